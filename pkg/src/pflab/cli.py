"""Command line driver: ``pflab solve|generate|train|evaluate|compare``.

Exit codes: 0 success, 1 usage or I/O error, 2 numerical failure
(non-convergence, divergence), 3 validation failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .dataset import Dataset, atomic_write_text, generate, read_dataset, write_dataset
from .exceptions import MalformedCase, NumericalFailure, PFLabError
from .metrics import DEFAULT_TOLERANCES, EvalReport, evaluate, format_tables
from .models import ModelSpec, fingerprint, load_model, loss_history_csv, save_model, train
from .network import build_adjacency, load_case, renormalize_adjacency
from .solvers import SolverConfig, solve_acpf, solve_dcpf

logger = logging.getLogger("pflab")

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_VALIDATION = 0, 1, 2, 3
MODEL_KINDS = ("gnn", "dnn", "cnn")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    case_path: str = "cases/ieee14.json"
    n_samples: int = 10000
    seed: int = 0
    output_dir: str = "runs"
    dataset_path: str | None = None
    models: dict = field(default_factory=lambda: {k: {} for k in MODEL_KINDS})
    solver: dict = field(default_factory=dict)
    tolerances: list = field(default_factory=lambda: list(DEFAULT_TOLERANCES))

    @classmethod
    def load(cls, path: str | None, overrides: dict) -> "RunConfig":
        data: dict = {}
        if path:
            try:
                data = json.loads(Path(path).read_text())
            except json.JSONDecodeError as exc:
                raise UsageError(f"config {path}: {exc}") from exc
            if not isinstance(data, dict):
                raise UsageError(f"config {path}: expected a JSON object")
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        if "seed" not in data and os.environ.get("PFLAB_SEED"):
            data["seed"] = int(os.environ["PFLAB_SEED"])
        data.update({k: v for k, v in overrides.items() if v is not None})
        cfg = cls(**data)
        if cfg.n_samples < 5:
            raise ValueError("n_samples must be at least 5")
        return cfg

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    @property
    def dataset_file(self) -> Path:
        return Path(self.dataset_path) if self.dataset_path else self.out / "dataset.pfds"

    @property
    def hash(self) -> str:
        return fingerprint(asdict(self))

    def provenance(self) -> dict:
        return {"config_hash": self.hash, "seed": self.seed, "tool_version": __version__}

    def solver_config(self) -> SolverConfig:
        return SolverConfig(**self.solver)

    def model_spec(self, kind: str) -> ModelSpec:
        opts = dict(self.models.get(kind, {}))
        opts.setdefault("seed", self.seed)
        return ModelSpec(kind=kind, **opts)


# -- subcommands ---------------------------------------------------------------


def _solution_table(case, sol) -> str:
    lines = [f"{sol.method.upper()}  converged={sol.converged}  iterations={sol.iterations}  "
             f"max_mismatch={sol.max_mismatch:.3e}", "", f"{'bus':>5} {'V [pu]':>10} {'theta [rad]':>12}"]
    for i in range(case.n_buses):
        lines.append(f"{case.bus_ids[i]:>5} {sol.v_mag[i]:>10.6f} {sol.v_ang[i]:>12.6f}")
    lines += ["", f"{'from':>5} {'to':>5} {'P [MW]':>11} {'Q [MVAr]':>11}"]
    for k, br in enumerate(case.branches):
        lines.append(f"{case.bus_ids[br.from_bus]:>5} {case.bus_ids[br.to_bus]:>5} "
                     f"{sol.p_branch[k]:>11.4f} {sol.q_branch[k]:>11.4f}")
    return "\n".join(lines) + "\n"


def cmd_solve(args) -> int:
    case = load_case(args.case)
    if args.method == "dcpf":
        sol = solve_dcpf(case)
    else:
        cfg = SolverConfig(tolerance=args.tolerance, max_iter=args.max_iter)
        sol = solve_acpf(case, cfg)
    sys.stdout.write(_solution_table(case, sol))
    if args.json:
        atomic_write_text(args.json, json.dumps(sol.to_dict(case), indent=1) + "\n")
    return EXIT_OK if sol.converged else EXIT_NUMERICAL


def _generate(cfg: RunConfig) -> Dataset:
    case = load_case(cfg.case_path)
    ds = generate(case, cfg.n_samples, cfg.seed, cfg.solver_config())
    ds.extra.update(cfg.provenance())
    write_dataset(ds, cfg.dataset_file)
    print(f"wrote {cfg.dataset_file}: {len(ds.samples)} samples "
          f"({len(ds.train_idx)} train / {len(ds.val_idx)} validation), discarded {ds.n_discarded}")
    return ds


def _dataset(cfg: RunConfig) -> Dataset:
    if cfg.dataset_file.is_file():
        return read_dataset(cfg.dataset_file)
    return _generate(cfg)


def cmd_generate(args, cfg: RunConfig) -> int:
    _generate(cfg)
    return EXIT_OK


def _train_one(cfg: RunConfig, ds: Dataset, kind: str):
    spec = cfg.model_spec(kind)
    v = renormalize_adjacency(build_adjacency(ds.base_case)).v if kind == "gnn" else None
    model = train(spec, ds, v)
    folder = cfg.out / kind
    save_model(model, folder / "model.pfw", provenance={**cfg.provenance(), "case_id": ds.case_id})
    atomic_write_text(folder / "loss_history.csv", loss_history_csv(model))
    print(f"{kind}: best validation MSE {min(model.val_history_ or model.loss_history_):.6g} "
          f"at epoch {model.best_epoch_}; wrote {folder / 'model.pfw'}")
    return model


def cmd_train(args, cfg: RunConfig) -> int:
    _train_one(cfg, _dataset(cfg), args.model)
    return EXIT_OK


def _write_report(cfg: RunConfig, name: str, report: EvalReport, ds: Dataset) -> None:
    folder = cfg.out / "reports"
    doc = {**report.to_dict(), **cfg.provenance(), "case_id": ds.case_id}
    atomic_write_text(folder / f"{name}.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
    atomic_write_text(folder / f"{name}.txt", format_tables({name: report}, ds.case_id))
    atomic_write_text(folder / f"{name}_errors.csv", report.errors_csv(_branch_labels(ds)))


def _branch_labels(ds: Dataset) -> list[str]:
    ids = ds.base_case.bus_ids
    return [f"{ids[br.from_bus]}-{ids[br.to_bus]}#{k}" for k, br in enumerate(ds.base_case.branches)]


def cmd_evaluate(args, cfg: RunConfig) -> int:
    ds = _dataset(cfg)
    if args.model in ("dcpf", "acpf"):
        source, name = args.model, args.model
    else:
        source = load_model(args.model)
        name = source.kind
    report = evaluate(source, ds, tolerances=cfg.tolerances)
    _write_report(cfg, name, report, ds)
    sys.stdout.write(format_tables({name: report}, ds.case_id))
    return EXIT_OK


def cmd_compare(args, cfg: RunConfig) -> int:
    wanted = [m.strip().lower() for m in args.models.split(",") if m.strip()]
    bad = set(wanted) - set(MODEL_KINDS) - {"dcpf"}
    if bad:
        raise UsageError(f"unknown models: {sorted(bad)}")
    if not wanted:
        raise UsageError("--models is empty")
    ds = _dataset(cfg)
    reports: dict[str, EvalReport] = {}
    tables = ""
    try:
        for name in wanted:
            if name == "dcpf":
                source = "dcpf"
            else:
                ckpt = cfg.out / name / "model.pfw"
                source = load_model(ckpt) if args.reuse and ckpt.is_file() else _train_one(cfg, ds, name)
            reports[name.upper()] = evaluate(source, ds, tolerances=cfg.tolerances)
            _write_report(cfg, name, reports[name.upper()], ds)
    finally:
        if reports:
            tables = format_tables(reports, ds.case_id)
            summary = {
                **cfg.provenance(),
                "case_id": ds.case_id,
                "n_validation": int(len(ds.val_idx)),
                "reports": {k: r.to_dict() for k, r in reports.items()},
            }
            atomic_write_text(cfg.out / "compare.txt", tables)
            atomic_write_text(cfg.out / "compare.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    sys.stdout.write(tables)
    return EXIT_OK


# -- entry point -----------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pflab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"pflab {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("solve", help="run a power flow on a case file")
    p.add_argument("case")
    p.add_argument("--method", choices=["acpf", "dcpf"], default="acpf")
    p.add_argument("--tolerance", type=float, default=1e-8)
    p.add_argument("--max-iter", type=int, default=20)
    p.add_argument("--json", help="also write the solution as JSON")

    def run_options(p):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--case", dest="case_path")
        p.add_argument("--n-samples", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--out", dest="output_dir")
        p.add_argument("--dataset", dest="dataset_path")

    run_options(sub.add_parser("generate", help="write a perturbed-injection dataset (.pfds)"))
    p = sub.add_parser("train", help="train one surrogate model (.pfw + loss_history.csv)")
    run_options(p)
    p.add_argument("--model", choices=MODEL_KINDS, required=True)
    p = sub.add_parser("evaluate", help="score a checkpoint or the DC power flow")
    run_options(p)
    p.add_argument("--model", required=True, help="path to a .pfw checkpoint, or 'dcpf'")
    p = sub.add_parser("compare", help="train and score every model plus DC power flow")
    run_options(p)
    p.add_argument("--models", default="gnn,dnn,cnn,dcpf")
    p.add_argument("--reuse", action="store_true", help="load existing checkpoints instead of retraining")
    return parser


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "evaluate": cmd_evaluate, "compare": cmd_compare}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "solve":
            return cmd_solve(args)
        overrides = {k: getattr(args, k) for k in ("case_path", "n_samples", "seed", "output_dir", "dataset_path")}
        cfg = RunConfig.load(args.config, overrides)
        return COMMANDS[args.command](args, cfg)
    except (UsageError, OSError, MalformedCase, json.JSONDecodeError) as exc:
        print(f"pflab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalFailure as exc:
        print(f"pflab: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (PFLabError, ValueError, TypeError) as exc:
        print(f"pflab: validation failure: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
