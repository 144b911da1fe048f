"""End-to-end acceptance checks.

Each test prints one ``criterion N: PASS|FAIL`` line (also collected into the
terminal summary) before asserting. Tolerances are fixed here:

1. two-bus oracle: ACPF V2 0.99494 and theta2 -0.10068 within 1e-4; DCPF
   theta2 = -0.1 rad and 100 MW exactly; under 1 s.
2. ACPF on ieee14/ieee24: mismatch <= 1e-8 p.u. in <= 10 iterations, global
   active balance within 1e-4 MW; under 1 s each.
3. gradient checks: >= 100 randomized trials per primitive within 1e-5
   relative, full model forwards within 1e-4; under 30 s.
4. GNN on 10k ieee14 samples at defaults: best validation loss <= 5% of the
   epoch-1 value and the best-so-far curve moves < 1% of its initial level
   over the last 100 epochs.
5. GNN mean flow PRD < DCPF mean flow PRD on ieee14 and ieee24.
6. GNN 5% tolerance accuracy on ieee14 flows >= 90%.
7. GNN flow R2 on ieee14 >= 0.99.
8. best validation MSE: GNN <= DNN on ieee14; DNN/CNN on ieee24 reported.
9. every EvalReport statistic equals a loop-based recomputation to 1e-12.
10. ``compare`` twice with one config gives byte-identical outputs.

The trained models use the package defaults (1000 epochs each), so the
whole module takes roughly half an hour on one CPU core.
"""

import json
import statistics
import time

import numpy as np
import pytest

from pflab import autodiff as ad
from pflab.cli import main
from pflab.dataset import generate, targets_from_solution
from pflab.metrics import build_report, evaluate
from pflab.models import ModelSpec, train
from pflab.network import Branch, Generator, build_adjacency, load_case, renormalize_adjacency
from pflab.solvers import SolverConfig, solve_acpf, solve_dcpf

from conftest import ACCEPTANCE_LINES, make_case
from test_autodiff import TRIALS, check_op, dims, numeric_grad, rel_err
from test_models import make, toy_data

N_SAMPLES = 10_000
SEED = 0


def verdict(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def best_val_mse(model) -> float:
    return float(min(model.val_history_))


class Bench:
    """Datasets and default-config models shared by the slow criteria."""

    def __init__(self):
        self.datasets = {}
        self.models = {}
        self.seconds = {}

    def dataset(self, name):
        if name not in self.datasets:
            self.datasets[name] = generate(load_case(name), N_SAMPLES, SEED)
        return self.datasets[name]

    def model(self, name, kind):
        key = (name, kind)
        if key not in self.models:
            ds = self.dataset(name)
            v = renormalize_adjacency(build_adjacency(ds.base_case)).v if kind == "gnn" else None
            start = time.perf_counter()
            self.models[key] = train(ModelSpec(kind=kind, seed=SEED), ds, v)
            self.seconds[key] = time.perf_counter() - start
        return self.models[key]

    def report(self, name, source):
        ds = self.dataset(name)
        return evaluate(source if source in ("dcpf", "acpf") else self.model(name, source), ds)


@pytest.fixture(scope="module")
def bench():
    return Bench()


def test_solver_oracle():
    case = make_case(2, [Branch(0, 1, 0.0, 0.1)], loads={1: (100.0, 0.0)}, gens=[Generator(0, 0.0)])
    start = time.perf_counter()
    ac = solve_acpf(case)
    dc = solve_dcpf(case)
    elapsed = time.perf_counter() - start
    ok = (
        ac.converged
        and abs(ac.v_mag[1] - 0.99494) <= 1e-4
        and abs(ac.v_ang[1] + 0.10068) <= 1e-4
        and dc.v_ang[1] == -0.1
        and dc.p_branch[0] == 100.0
        and elapsed < 1.0
    )
    verdict(
        1,
        ok,
        f"ACPF V2={ac.v_mag[1]:.6f} theta2={ac.v_ang[1]:.6f}; DCPF theta2={float(dc.v_ang[1])!r} "
        f"flow={float(dc.p_branch[0])!r} MW; {elapsed * 1000:.1f} ms",
    )


@pytest.mark.parametrize("name", ["ieee14", "ieee24"])
def test_acpf_residual(name):
    case = load_case(name)
    start = time.perf_counter()
    sol = solve_acpf(case, SolverConfig(tolerance=1e-8, max_iter=10))
    elapsed = time.perf_counter() - start
    v = sol.v_mag * np.exp(1j * sol.v_ang)
    shunt = np.sum(np.abs(v) ** 2 * np.array([b.gs for b in case.buses]))
    losses = np.sum(sol.p_branch + sol.p_branch_to)
    imbalance = abs(sol.p_gen.sum() - case.load_p().sum() - losses - shunt)
    ok = sol.converged and sol.max_mismatch <= 1e-8 and sol.iterations <= 10 and imbalance <= 1e-4 and elapsed < 1.0
    verdict(
        2,
        ok,
        f"{name}: {sol.iterations} iterations, mismatch {sol.max_mismatch:.2e} p.u., "
        f"P imbalance {imbalance:.2e} MW, {elapsed * 1000:.1f} ms",
    )


def test_gradient_checks():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    for _ in range(TRIALS):
        m, k, n, b = dims(rng, 4)
        check_op(ad.matmul, [rng.standard_normal((m, k)), rng.standard_normal((k, n))], rng)
        check_op(ad.matmul, [rng.standard_normal((b, m, k)), rng.standard_normal((k, n))], rng)
        check_op(ad.add_bias, [rng.standard_normal((m, n)), rng.standard_normal(n)], rng)
        x = rng.standard_normal((m, n))
        check_op(ad.relu, [x + np.copysign(1e-2, x)], rng)
        check_op(ad.mul, [rng.standard_normal((m, n)), rng.standard_normal((m, n))], rng)
        check_op(ad.add, [rng.standard_normal((m, n)), rng.standard_normal((m, n))], rng)
        check_op(lambda t: ad.reshape(t, (m * n,)), [rng.standard_normal((m, n))], rng)
        kern = int(rng.choice([1, 3, 5]))
        check_op(
            ad.conv1d,
            [rng.standard_normal((b, m, k)), rng.standard_normal((kern, k, n)), rng.standard_normal(n)],
            rng,
        )
        pred, target = rng.standard_normal((m, n)), rng.standard_normal((m, n))
        leaf = ad.Tensor(pred, requires_grad=True)
        ad.backward(ad.mse_loss(leaf, target))
        assert rel_err(leaf.grad, numeric_grad(lambda: float(ad.mse_loss(pred, target).data), pred)) <= 1e-5

    worst = 0.0
    for trial in range(30):
        kind = ("gnn", "dnn", "cnn")[trial % 3]
        X, y = toy_data(rng, n=5)
        model = make(kind, epochs=1, seed=trial).fit(X, y)
        for p in model.params_:
            p.data += 0.1 * rng.standard_normal(p.shape)
        xz, yz = model._scale_x(X), model._scale_y(y)
        ad.backward(ad.mse_loss(model._forward(xz), yz))
        for p in model.params_:
            num = numeric_grad(lambda: float(np.mean((model._forward(xz).data - yz) ** 2)), p.data)
            worst = max(worst, rel_err(p.grad, num))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-4 and elapsed < 30
    verdict(3, ok, f"{TRIALS} trials x 9 primitives within 1e-5; 30 model forwards worst {worst:.1e}; {elapsed:.1f} s")


def test_training_viability(bench):
    model = bench.model("ieee14", "gnn")
    val = np.array(model.val_history_)
    best = np.minimum.accumulate(val)
    ratio = best[-1] / val[0]
    tail = (best[-101] - best[-1]) / val[0]
    tail_own = (best[-101] - best[-1]) / best[-101]
    minutes = bench.seconds[("ieee14", "gnn")] / 60
    ok = len(val) == 1000 and ratio <= 0.05 and tail < 0.01 and minutes < 15
    verdict(
        4,
        ok,
        f"val loss epoch1 {val[0]:.3e} -> best {best[-1]:.3e} (ratio {ratio:.2e}); "
        f"last-100 improvement {tail:.1e} of initial ({tail_own:.1%} of own level); "
        f"best epoch {model.best_epoch_}; {minutes:.1f} min",
    )


@pytest.mark.parametrize("name", ["ieee14", "ieee24"])
def test_gnn_beats_dcpf_prd(bench, name):
    gnn = bench.report(name, "gnn").prd_stats["mean"]
    dcpf = bench.report(name, "dcpf").prd_stats["mean"]
    verdict(5, gnn < dcpf, f"{name}: mean PRD GNN {gnn:.4f}% vs DCPF {dcpf:.4f}%")


def test_tolerance_accuracy(bench):
    rep = bench.report("ieee14", "gnn")
    acc = rep.tolerance_accuracy[0.05]
    verdict(6, acc >= 90.0, f"ieee14 GNN flows within 5%: {acc:.2f}% (1%: {rep.tolerance_accuracy[0.01]:.2f}%)")


def test_r2(bench):
    rep = bench.report("ieee14", "gnn")
    verdict(7, rep.r2 >= 0.99, f"ieee14 GNN flow R2 {rep.r2:.6f} (voltage R2 {rep.voltage['r2']:.4f})")


def test_benchmark_ordering(bench):
    lines = []
    for kind in ("dnn", "cnn"):
        gnn24 = best_val_mse(bench.model("ieee24", "gnn"))
        other = bench.model("ieee24", kind)
        rep = bench.report("ieee24", kind)
        lines.append(
            f"ieee24 {kind.upper()} val MSE {best_val_mse(other):.3e} (GNN {gnn24:.3e}), "
            f"R2 {rep.r2:.6f}, PRD mean {rep.prd_stats['mean']:.4f}%"
        )
    for line in lines:
        ACCEPTANCE_LINES.append(f"criterion 8: INFO  {line}")
    gnn = best_val_mse(bench.model("ieee14", "gnn"))
    dnn = best_val_mse(bench.model("ieee14", "dnn"))
    verdict(8, gnn <= dnn, f"ieee14 best validation MSE GNN {gnn:.3e} vs DNN {dnn:.3e}")


def brute_force_report(y, yhat, n_buses, taus):
    out = {}
    for label, cols in (("flow", slice(n_buses, None)), ("voltage", slice(0, n_buses))):
        pairs = [(float(a), float(b)) for ra, rb in zip(y[:, cols], yhat[:, cols]) for a, b in zip(ra, rb)]
        mean = sum(a for a, _ in pairs) / len(pairs)
        abs_err = [abs(a - b) for a, b in pairs]
        rel = [abs(a - b) / abs(a) for a, b in pairs if abs(a) >= 1e-6]
        out[label] = {
            "r2": 1 - sum((a - b) ** 2 for a, b in pairs) / sum((a - mean) ** 2 for a, _ in pairs),
            "max_e": max(abs_err),
            "med_e": statistics.median(abs_err),
            "mape": sum(rel) / len(rel),
            "tol": {t: 100 * sum(r <= t for r in rel) / len(rel) for t in taus},
            "n_zero": len(pairs) - len(rel),
        }
        if label == "flow":
            prds = [200 * abs(a - b) / abs(a + b) for a, b in pairs if abs(a + b) > 1e-6]
            mu = sum(prds) / len(prds)
            out["prd"] = {
                "mean": mu,
                "max": max(prds),
                "min": min(prds),
                "median": statistics.median(prds),
                "std": (sum((p - mu) ** 2 for p in prds) / len(prds)) ** 0.5,
            }
            out["n_prd_excluded"] = len(pairs) - len(prds)
            out["abs_err"] = abs_err
    return out


def test_metrics_oracle():
    ds = generate(load_case("ieee14"), 20, seed=SEED)
    taus = (0.01, 0.02, 0.03, 0.04, 0.05)
    y = ds.Y
    yhat = np.array([targets_from_solution(solve_dcpf(ds.reconstruct_case(i))) for i in range(20)])
    rep = build_report("dcpf", y, yhat, ds.n_buses, taus)
    ref = brute_force_report(y, yhat, ds.n_buses, taus)
    diffs = [
        rep.r2 - ref["flow"]["r2"],
        rep.max_e - ref["flow"]["max_e"],
        rep.med_e - ref["flow"]["med_e"],
        rep.mape - ref["flow"]["mape"],
        *[rep.tolerance_accuracy[t] - ref["flow"]["tol"][t] for t in taus],
        *[rep.prd_stats[k] - v for k, v in ref["prd"].items()],
        *[rep.voltage[k] - ref["voltage"][k] for k in ("r2", "max_e", "med_e", "mape")],
        *(rep.per_target_errors.ravel() - np.array(ref["abs_err"])),
    ]
    worst = float(np.max(np.abs(diffs)))
    counts_ok = (
        rep.n_samples == 20
        and rep.n_prd_excluded == ref["n_prd_excluded"]
        and rep.n_zero_truth_excluded == ref["flow"]["n_zero"]
    )
    via_evaluate = evaluate("dcpf", ds)
    ref_val = brute_force_report(y[ds.val_idx], yhat[ds.val_idx], ds.n_buses, taus)
    worst_val = max(
        abs(via_evaluate.r2 - ref_val["flow"]["r2"]),
        abs(via_evaluate.mape - ref_val["flow"]["mape"]),
        abs(via_evaluate.prd_stats["mean"] - ref_val["prd"]["mean"]),
    )
    ok = worst <= 1e-12 and worst_val <= 1e-12 and counts_ok
    verdict(
        9,
        ok,
        f"20-sample ieee14 set, {len(diffs)} statistics, worst |diff| {worst:.1e}; "
        f"validation-split evaluate worst {worst_val:.1e}; exclusion counts match: {counts_ok}",
    )


def test_compare_determinism(tmp_path, capsys):
    tiny = {"epochs": 20, "hidden_sizes": [32, 16]}
    cfg = {
        "case_path": "cases/ieee14.json",
        "n_samples": 200,
        "seed": 5,
        "output_dir": str(tmp_path / "run"),
        "models": {"gnn": tiny, "dnn": tiny, "cnn": tiny},
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    folder = tmp_path / "run"
    snapshots = []
    for _ in range(2):
        assert main(["compare", "--config", str(path)]) == 0
        snapshots.append({p.relative_to(folder).as_posix(): p.read_bytes() for p in sorted(folder.rglob("*")) if p.is_file()})
        for p in folder.rglob("*"):
            if p.is_file():
                p.unlink()
    a, b = snapshots
    checkpoints = sorted(k for k in a if k.endswith(".pfw"))
    same = a == b
    verdict(
        10,
        same and len(checkpoints) == 3,
        f"{len(a)} files ({', '.join(checkpoints)}, compare.txt/json, reports) identical across two runs: {same}",
    )
