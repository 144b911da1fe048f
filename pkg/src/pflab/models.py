"""Learned power-flow surrogates with a scikit-learn style interface.

All three regressors map a batch of per-node injection matrices
``(n_samples, n_nodes, n_features)`` to targets ``(n_samples, n_outputs)``
(bus voltage magnitudes followed by branch active flows). They share the
training loop in :class:`SurrogateRegressor` and differ only in the encoder
placed before a common decoder of two ReLU hidden layers and a linear head:

* :class:`GNNRegressor` - one graph convolution ``ReLU(V X W + b)``,
* :class:`DNNRegressor` - a dense layer on the flattened input,
* :class:`CNNRegressor` - a 1-D convolution along the bus axis.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import __version__
from . import autodiff as ad
from ._validation import check_node_features, check_operator, check_targets
from .dataset import STD_FLOOR, Dataset, atomic_write_text
from .exceptions import NonFiniteLoss, ShapeMismatch

logger = logging.getLogger(__name__)

# Targets whose training spread is below this (voltages held at PV setpoints,
# structurally zero flows) are predicted as their training mean.
TARGET_STD_FLOOR = 1e-6
CHECKPOINT_TAG = "PFW 1"
TREND_WINDOW = 100


class SurrogateRegressor(RegressorMixin, BaseEstimator):
    """Shared training loop: mini-batch Adam on z-scored inputs and targets.

    Parameters
    ----------
    hidden_sizes : tuple of int
        Widths of the two decoder hidden layers.
    epochs : int
        Passes over the training set.
    batch_size : int
    lr : float
        Adam step size.
    seed : int
        Seeds weight initialisation and batch order.
    verbose : int
        Log every ``verbose`` epochs; 0 disables.
    """

    kind = "base"

    def __init__(self, hidden_sizes=(128, 64), epochs=1000, batch_size=64, lr=1e-3, seed=0, verbose=0):
        self.hidden_sizes = hidden_sizes
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.verbose = verbose

    # -- architecture hooks ----------------------------------------------

    def _encoder_params(self, rng, n_nodes, n_features):
        raise NotImplementedError

    def _encode(self, xz: np.ndarray) -> ad.Tensor:
        raise NotImplementedError

    def _check_input(self, X, reset=False):
        if reset:
            return check_node_features(X)
        return check_node_features(X, self.n_nodes_, self.n_features_)

    # -- shared machinery --------------------------------------------------

    def _decoder_params(self, rng, width_in, n_outputs):
        sizes = [width_in, *self.hidden_sizes, n_outputs]
        params = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            params.append(ad.glorot_uniform(rng, (fan_in, fan_out), fan_in, fan_out))
            params.append(ad.zeros_param(fan_out))
        return params

    def _decode(self, h: ad.Tensor, start: int) -> ad.Tensor:
        layers = self.params_[start:]
        n_layers = len(layers) // 2
        for i in range(n_layers):
            h = ad.add_bias(ad.matmul(h, layers[2 * i]), layers[2 * i + 1])
            if i < n_layers - 1:
                h = ad.relu(h)
        return h

    def _forward(self, xz: np.ndarray) -> ad.Tensor:
        """Normalized inputs ``(B, N, F)`` to normalized outputs ``(B, n_outputs)``."""
        h = self._encode(xz)
        h = ad.reshape(h, (h.shape[0], -1))
        return self._decode(h, self.n_encoder_params_)

    def _scale_x(self, X):
        return (X - self.x_mean_) / np.where(self.x_std_ < STD_FLOOR, 1.0, self.x_std_)

    def _scale_y(self, y):
        return (y - self.y_mean_) / self.y_scale_

    def _validate_hyperparameters(self):
        if len(self.hidden_sizes) < 1:
            raise ValueError("hidden_sizes must name at least one layer")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")

    def fit(self, X, y, X_val=None, y_val=None):
        """Train on ``(X, y)``; keep the parameters with the best validation MSE.

        Without a validation set the best training-epoch parameters are kept.
        """
        self._validate_hyperparameters()
        X = self._check_input(X, reset=True)
        y = check_targets(y, X.shape[0])
        self.n_nodes_, self.n_features_ = X.shape[1:]
        self.n_outputs_ = y.shape[1]
        self.x_mean_ = X.mean(axis=0)
        self.x_std_ = X.std(axis=0)
        self.y_mean_ = y.mean(axis=0)
        y_std = y.std(axis=0)
        self.y_constant_ = y_std < TARGET_STD_FLOOR
        self.y_scale_ = np.where(self.y_constant_, 1.0, y_std)

        rng = np.random.default_rng(self.seed)
        enc = self._encoder_params(rng, self.n_nodes_, self.n_features_)
        width = self._encoded_width()
        self.n_encoder_params_ = len(enc)
        self.params_ = enc + self._decoder_params(rng, width, self.n_outputs_)

        xz, yz = self._scale_x(X), self._scale_y(y)
        if X_val is not None:
            xv = self._scale_x(self._check_input(X_val))
            yv = self._scale_y(check_targets(y_val, xv.shape[0], self.n_outputs_))
        else:
            xv = yv = None

        state = ad.AdamState(lr=self.lr)
        n = xz.shape[0]
        self.loss_history_, self.val_history_ = [], []
        best, best_params = np.inf, None
        for epoch in range(self.epochs):
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, self.batch_size):
                idx = order[start : start + self.batch_size]
                loss = ad.mse_loss(self._forward(xz[idx]), yz[idx])
                ad.backward(loss)
                ad.adam_step(self.params_, state)
                total += loss.item() * len(idx)
            train_mse = total / n
            if not np.isfinite(train_mse):
                raise NonFiniteLoss(f"training loss became {train_mse} at epoch {epoch + 1}")
            self.loss_history_.append(train_mse)
            self._check_trend(epoch + 1)
            score = train_mse
            if xv is not None:
                score = float(np.mean((self._forward(xv).data - yv) ** 2))
                self.val_history_.append(score)
            if score < best:
                best = score
                best_params = [p.data.copy() for p in self.params_]
                self.best_epoch_ = epoch + 1
            if self.verbose and (epoch + 1) % self.verbose == 0:
                logger.info("epoch %d train %.6g val %.6g", epoch + 1, train_mse, score)
        for p, data in zip(self.params_, best_params):
            p.data = data
        return self

    def _check_trend(self, n_done: int, window: int = TREND_WINDOW) -> None:
        # Adam noise is expected; a window mean rising >10% over the previous one is not.
        if n_done % window or n_done < 2 * window:
            return
        hist = self.loss_history_
        prev = float(np.mean(hist[-2 * window : -window]))
        last = float(np.mean(hist[-window:]))
        if last > 1.1 * prev:
            logger.warning(
                "%s: mean training loss rose %.0f%% over epochs %d-%d; check lr/batch size",
                self.kind,
                100 * (last / prev - 1),
                n_done - window + 1,
                n_done,
            )

    def predict(self, X) -> np.ndarray:
        """Targets in physical units, shape ``(n_samples, n_outputs)``."""
        check_is_fitted(self, "params_")
        X = self._check_input(X)
        out = self._forward(self._scale_x(X)).data
        out[:, self.y_constant_] = 0.0
        return out * self.y_scale_ + self.y_mean_

    def predict_split(self, X):
        """``(v_mag, p_branch)`` split of :meth:`predict` for one matrix or a batch."""
        single = np.ndim(X) == 2
        out = self.predict(X)
        v, p = out[:, : self.n_nodes_], out[:, self.n_nodes_ :]
        return (v[0], p[0]) if single else (v, p)

    def forward_raw(self, x) -> np.ndarray:
        """Forward one ``(n_nodes, n_features)`` matrix in physical units."""
        return self.predict(check_node_features(x, self.n_nodes_, self.n_features_))[0]

    @property
    def n_parameters_(self) -> int:
        return int(sum(p.data.size for p in self.params_))


class GNNRegressor(SurrogateRegressor):
    """Graph-convolution embedding ``ReLU(V X W + b)`` followed by a dense decoder.

    Parameters
    ----------
    v_operator : array of shape (n_nodes, n_nodes)
        Renormalized adjacency ``D^-1/2 (A + I) D^-1/2`` of the grid.
    embed_dim : int
        Width of the per-node embedding.
    """

    kind = "gnn"

    def __init__(
        self,
        v_operator=None,
        embed_dim=32,
        hidden_sizes=(128, 64),
        epochs=1000,
        batch_size=64,
        lr=1e-3,
        seed=0,
        verbose=0,
    ):
        super().__init__(hidden_sizes, epochs, batch_size, lr, seed, verbose)
        self.v_operator = v_operator
        self.embed_dim = embed_dim

    def _encoder_params(self, rng, n_nodes, n_features):
        if self.v_operator is None:
            raise ValueError("GNNRegressor needs a v_operator")
        self.v_ = check_operator(self.v_operator)
        if self.v_.shape[0] != n_nodes:
            raise ShapeMismatch(f"operator has {self.v_.shape[0]} nodes, input has {n_nodes}")
        return [
            ad.glorot_uniform(rng, (n_features, self.embed_dim), n_features, self.embed_dim),
            ad.zeros_param(self.embed_dim),
        ]

    def _encoded_width(self):
        return self.n_nodes_ * self.embed_dim

    def _embed(self, xz) -> ad.Tensor:
        w, b = self.params_[0], self.params_[1]
        propagated = ad.matmul(ad.Tensor(self.v_), xz if isinstance(xz, ad.Tensor) else ad.Tensor(xz))
        return ad.relu(ad.add_bias(ad.matmul(propagated, w), b))

    _encode = _embed

    def embedding(self, X) -> np.ndarray:
        """Per-node embeddings ``(n_samples, n_nodes, embed_dim)`` of raw inputs."""
        check_is_fitted(self, "params_")
        return self._embed(self._scale_x(self._check_input(X))).data


class DNNRegressor(SurrogateRegressor):
    """Fully connected baseline on the flattened ``n_nodes * n_features`` input.

    The first layer has ``n_nodes * embed_dim`` units so its output is the
    same size as the graph embedding of :class:`GNNRegressor`.
    """

    kind = "dnn"

    def __init__(
        self,
        embed_dim=32,
        hidden_sizes=(128, 64),
        epochs=1000,
        batch_size=64,
        lr=1e-3,
        seed=0,
        verbose=0,
    ):
        super().__init__(hidden_sizes, epochs, batch_size, lr, seed, verbose)
        self.embed_dim = embed_dim

    def _encoder_params(self, rng, n_nodes, n_features):
        fan_in, fan_out = n_nodes * n_features, n_nodes * self.embed_dim
        return [ad.glorot_uniform(rng, (fan_in, fan_out), fan_in, fan_out), ad.zeros_param(fan_out)]

    def _encoded_width(self):
        return self.n_nodes_ * self.embed_dim

    def _encode(self, xz) -> ad.Tensor:
        flat = xz.reshape(xz.shape[0], -1)
        return ad.relu(ad.add_bias(ad.matmul(flat, self.params_[0]), self.params_[1]))


class CNNRegressor(SurrogateRegressor):
    """Same-padded 1-D convolution over the bus axis, then the dense decoder."""

    kind = "cnn"

    def __init__(
        self,
        channels=16,
        kernel_size=3,
        hidden_sizes=(128, 64),
        epochs=1000,
        batch_size=64,
        lr=1e-3,
        seed=0,
        verbose=0,
    ):
        super().__init__(hidden_sizes, epochs, batch_size, lr, seed, verbose)
        self.channels = channels
        self.kernel_size = kernel_size

    def _encoder_params(self, rng, n_nodes, n_features):
        k, c = self.kernel_size, self.channels
        return [ad.glorot_uniform(rng, (k, n_features, c), k * n_features, c), ad.zeros_param(c)]

    def _encoded_width(self):
        return self.n_nodes_ * self.channels

    def _encode(self, xz) -> ad.Tensor:
        return ad.relu(ad.conv1d(xz, self.params_[0], self.params_[1]))


ESTIMATORS = {cls.kind: cls for cls in (GNNRegressor, DNNRegressor, CNNRegressor)}


@dataclass
class ModelSpec:
    kind: str = "gnn"
    hidden_sizes: tuple = (128, 64)
    gnn_embed_dim: int = 32
    seed: int = 0
    epochs: int = 1000
    batch_size: int = 64
    lr: float = 1e-3
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in ESTIMATORS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)

    def build(self, v_operator=None) -> SurrogateRegressor:
        common = dict(
            hidden_sizes=self.hidden_sizes,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            seed=self.seed,
            **self.extra,
        )
        if self.kind == "gnn":
            return GNNRegressor(v_operator=v_operator, embed_dim=self.gnn_embed_dim, **common)
        if self.kind == "dnn":
            return DNNRegressor(embed_dim=self.gnn_embed_dim, **common)
        return CNNRegressor(**common)


def train(spec: ModelSpec, ds: Dataset, v=None) -> SurrogateRegressor:
    """Fit the model described by ``spec`` on the dataset's train split."""
    if not ds.samples:
        raise ValueError("dataset is empty")
    model = spec.build(None if v is None else check_operator(v))
    X, Y = ds.X, ds.Y
    X_val = Y_val = None
    if len(ds.val_idx):
        X_val, Y_val = X[ds.val_idx], Y[ds.val_idx]
    return model.fit(X[ds.train_idx], Y[ds.train_idx], X_val, Y_val)


def predict(model: SurrogateRegressor, x):
    """``(v_mag, p_branch)`` for one raw ``(n_nodes, n_features)`` matrix."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ShapeMismatch(f"expected a single (n_nodes, n_features) matrix, got {x.shape}")
    return model.predict_split(x)


# -- .pfw checkpoints -------------------------------------------------------

_FITTED_ARRAYS = ("x_mean_", "x_std_", "y_mean_", "y_scale_")


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, tuple):
        return list(value)
    return value


def dumps_model(model: SurrogateRegressor, provenance: dict | None = None) -> str:
    check_is_fitted(model, "params_")
    params = {k: _jsonable(v) for k, v in model.get_params().items() if k != "v_operator"}
    manifest = {
        "format": CHECKPOINT_TAG,
        "tool_version": __version__,
        "kind": model.kind,
        "params": params,
        "shapes": [list(p.shape) for p in model.params_],
        "n_nodes": int(model.n_nodes_),
        "n_features": int(model.n_features_),
        "n_outputs": int(model.n_outputs_),
        "n_encoder_params": int(model.n_encoder_params_),
        "best_epoch": int(model.best_epoch_),
        "norm_stats": {
            **{k.rstrip("_"): getattr(model, k).tolist() for k in _FITTED_ARRAYS},
            "y_constant": model.y_constant_.tolist(),
        },
        "loss_history": list(model.loss_history_),
        "val_history": list(model.val_history_),
        **(provenance or {}),
    }
    if model.kind == "gnn":
        manifest["v_operator"] = model.v_.tolist()
    lines = [CHECKPOINT_TAG, json.dumps(manifest, sort_keys=True), "[PARAMS]"]
    lines += [",".join(repr(float(v)) for v in p.data.ravel()) for p in model.params_]
    return "\n".join(lines) + "\n"


def save_model(model: SurrogateRegressor, path, provenance: dict | None = None) -> None:
    atomic_write_text(path, dumps_model(model, provenance))


def loads_model(text: str) -> SurrogateRegressor:
    lines = text.splitlines()
    if not lines or lines[0] != CHECKPOINT_TAG:
        raise ValueError("not a .pfw checkpoint")
    manifest = json.loads(lines[1])
    params = dict(manifest["params"])
    params["hidden_sizes"] = tuple(params["hidden_sizes"])
    cls = ESTIMATORS[manifest["kind"]]
    if cls is GNNRegressor:
        params["v_operator"] = np.array(manifest["v_operator"], dtype=float)
    model = cls(**params)
    if cls is GNNRegressor:
        model.v_ = check_operator(model.v_operator)
    model.n_nodes_ = manifest["n_nodes"]
    model.n_features_ = manifest["n_features"]
    model.n_outputs_ = manifest["n_outputs"]
    model.n_encoder_params_ = manifest["n_encoder_params"]
    model.best_epoch_ = manifest["best_epoch"]
    for k in _FITTED_ARRAYS:
        setattr(model, k, np.array(manifest["norm_stats"][k.rstrip("_")], dtype=float))
    model.y_constant_ = np.array(manifest["norm_stats"]["y_constant"], dtype=bool)
    model.loss_history_ = manifest["loss_history"]
    model.val_history_ = manifest["val_history"]
    rows = lines[3 : 3 + len(manifest["shapes"])]
    model.params_ = [
        ad.Tensor(np.array([float(v) for v in row.split(",")]).reshape(shape), requires_grad=True)
        for row, shape in zip(rows, manifest["shapes"])
    ]
    model.manifest_ = manifest
    return model


def load_model(path) -> SurrogateRegressor:
    return loads_model(Path(path).read_text())


def loss_history_csv(model: SurrogateRegressor) -> str:
    rows = ["epoch,train_mse,val_mse"]
    for i, train_mse in enumerate(model.loss_history_):
        val = repr(float(model.val_history_[i])) if i < len(model.val_history_) else ""
        rows.append(f"{i + 1},{float(train_mse)!r},{val}")
    return "\n".join(rows) + "\n"


def fingerprint(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=_jsonable).encode()).hexdigest()[:16]
