"""``geot`` command line: gen, train, eval, gradcheck and ablate.

Exit codes: 0 success, 1 a check failed, 2 usage or configuration error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gradcheck
from .cloudgen import CloudFormatError, read_dataset, read_split, write_dataset
from .diffcore import ConfigError, NumericalError
from .metrics import evaluate_many
from .trainer import TrainConfig, load_config, load_model, predict_cloud, train

log = logging.getLogger("geot")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

# the five switch settings of the component ablation, in table order
ABLATION_CONFIGS: dict[str, dict[str, bool]] = {
    "baseline": dict(use_idtm=False, use_plgr=False, use_clgs=False),
    "IDTM": dict(use_idtm=True, use_plgr=False, use_clgs=False),
    "IDTM+PLGR": dict(use_idtm=True, use_plgr=True, use_clgs=False),
    "IDTM+CLGS": dict(use_idtm=True, use_plgr=False, use_clgs=True),
    "full": dict(use_idtm=True, use_plgr=True, use_clgs=True),
}
SWEEP_KEYS = {"lambda": "lam", "beta": "beta"}
DEFAULT_SWEEPS = {"lambda": (0.1, 0.5, 0.9, 0.99), "beta": (0.01, 0.05, 0.1, 0.5, 1.0)}
CSV_COLUMNS = ("config", "seed", "miou", "dsc", "acc")


class UsageError(Exception):
    """Bad flags or inputs that are not configuration files."""


def _n_workers() -> int:
    raw = os.environ.get("GEOT_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"GEOT_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise UsageError("GEOT_THREADS must be >= 0")
    return n


# gen ---------------------------------------------------------------------------------
def cmd_gen(args) -> int:
    if args.clouds < 1 or args.points < 1 or args.classes < 2:
        raise UsageError("--clouds and --points must be >= 1 and --classes >= 2")
    if not 0.0 <= args.labeled_ratio <= 1.0:
        raise UsageError("--labeled-ratio must lie in [0, 1]")
    if args.points < args.classes:
        raise UsageError("--points must be at least --classes")
    try:
        ds = write_dataset(args.out, args.clouds, args.points, args.classes, args.labeled_ratio, args.seed,
                           n_test=args.test)
    except OSError as exc:
        raise UsageError(f"cannot write dataset to {args.out}: {exc}") from None
    print(f"wrote {len(ds.labeled)} labeled, {len(ds.unlabeled)} unlabeled, {len(ds.test)} test clouds "
          f"to {args.out}")
    return EXIT_OK


# train -------------------------------------------------------------------------------
def cmd_train(args) -> int:
    cfg = load_config(args.config)
    result = train(cfg, args.out, resume=args.resume)
    last = result.records[-1] if result.records else None
    if last is not None:
        print(f"trained {len(result.records)} epoch(s); final total loss {last.losses['total']:.6f}"
              + (f", test mIoU {last.miou:.4f}" if last.miou is not None else ""))
    return EXIT_OK


# eval --------------------------------------------------------------------------------
def _eval_clouds(data: Path):
    if not data.is_dir():
        raise UsageError(f"data directory not found: {data}")
    direct, _ = read_split(data)
    if direct:
        clouds = direct
    else:
        ds = read_dataset(data)
        clouds = ds.labeled + ds.unlabeled + ds.test
    labeled = [c for c in clouds if c.labeled]
    if len(labeled) < len(clouds):
        log.warning("skipping %d cloud(s) without labels", len(clouds) - len(labeled))
    if not labeled:
        raise UsageError(f"no labeled clouds under {data}")
    return labeled


def cmd_eval(args) -> int:
    model, _, _ = load_model(args.checkpoint)
    clouds = _eval_clouds(Path(args.data))
    if clouds[0].n_classes != model.n_classes:
        raise ConfigError(f"checkpoint has {model.n_classes} classes, data has {clouds[0].n_classes}")
    cfg = TrainConfig(sample_points=args.sample_points, upsample_k=args.upsample_k)
    rng = np.random.default_rng(0)
    preds = [predict_cloud(c, model, cfg, rng) for c in clouds]
    report = evaluate_many(preds, [c.labels for c in clouds], model.n_classes)
    text = report.to_json(indent=2)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(f"miou {report.miou:.4f} dsc {report.dsc:.4f} acc {report.acc:.4f} over {len(clouds)} cloud(s)")
    return EXIT_OK


# gradcheck ---------------------------------------------------------------------------
def cmd_gradcheck(args) -> int:
    paths = gradcheck.PATHS
    if args.paths:
        wanted = [p.strip() for p in args.paths.split(",") if p.strip()]
        unknown = [p for p in wanted if p not in paths]
        if unknown:
            raise UsageError(f"unknown path(s) {unknown}; choose from {sorted(paths)}")
        paths = {p: paths[p] for p in wanted}
    results = gradcheck.run_gradcheck(tolerance=args.tol, step=args.step, seeds=range(args.seeds), paths=paths)
    for r in results:
        print(r.line())
    failed = sorted({r.path for r in results if not r.ok})
    if failed:
        print(f"gradcheck FAILED for: {', '.join(failed)}")
        return EXIT_CHECK
    print(f"gradcheck passed: {len(results)} checks at tolerance {args.tol:g}")
    return EXIT_OK


# ablate ------------------------------------------------------------------------------
@dataclass
class AblationRow:
    config: str
    seed: int
    miou: float
    dsc: float
    acc: float


@dataclass
class AblationResult:
    rows: list[AblationRow]
    seeds: list[int]
    config: TrainConfig
    names: list[str] = field(default_factory=lambda: list(ABLATION_CONFIGS))

    def table(self, metric: str = "miou") -> dict[str, dict[int, float]]:
        out: dict[str, dict[int, float]] = {n: {} for n in self.names}
        for r in self.rows:
            out[r.config][r.seed] = getattr(r, metric)
        return out

    def mean(self, name: str, metric: str = "miou") -> float:
        return float(np.mean([getattr(r, metric) for r in self.rows if r.config == name]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for r in self.rows:
                w.writerow([r.config, r.seed, repr(r.miou), repr(r.dsc), repr(r.acc)])


def _run_one(job: tuple[str, TrainConfig, str | None]) -> AblationRow:
    name, cfg, out = job
    result = train(cfg, out)
    last = result.records[-1]
    if last.miou is None:
        raise ConfigError("data: ablation needs a test split to score runs")
    return AblationRow(name, cfg.seed, float(last.miou), float(last.dsc), float(last.acc))


def ablation_jobs(base: TrainConfig, seeds, sweep: str | None = None, values=None, out_dir=None):
    """(name, config, run directory) for every run of an ablation or a sweep."""
    if sweep is None:
        variants = [(name, switches) for name, switches in ABLATION_CONFIGS.items()]
    else:
        key = SWEEP_KEYS[sweep]
        values = DEFAULT_SWEEPS[sweep] if values is None else values
        variants = [(f"full@{sweep}={v:g}", {**ABLATION_CONFIGS["full"], key: float(v)}) for v in values]
    jobs = []
    for seed in seeds:
        for name, overrides in variants:
            cfg = base.replace(seed=int(seed), **overrides)
            run = None if out_dir is None else str(Path(out_dir) / "runs" / f"{name}_seed{seed}")
            jobs.append((name, cfg, run))
    return jobs, [n for n, _ in variants]


def run_ablation(base: TrainConfig, seeds, sweep=None, values=None, out_dir=None, workers: int = 0) -> AblationResult:
    jobs, names = ablation_jobs(base, seeds, sweep, values, out_dir)
    if workers > 0:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_one, jobs))
    else:
        rows = [_run_one(j) for j in jobs]
    return AblationResult(rows, [int(s) for s in seeds], base, names)


def _parse_list(raw: str, kind, flag: str):
    try:
        items = [kind(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{flag}: cannot parse {raw!r}") from None
    if not items:
        raise UsageError(f"{flag}: need at least one value")
    return items


def cmd_ablate(args) -> int:
    base = load_config(args.config)
    seeds = _parse_list(args.seeds, int, "--seeds")
    values = _parse_list(args.values, float, "--values") if args.values else None
    if values is not None and args.sweep is None:
        raise UsageError("--values requires --sweep")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = run_ablation(base, seeds, args.sweep, values, out, _n_workers())
    result.write_csv(out / "ablation.csv")
    (out / "config.txt").write_text(base.to_text(), encoding="utf-8")
    (out / "seeds.txt").write_text(",".join(map(str, seeds)) + "\n", encoding="utf-8")
    for name in result.names:
        print(f"{name:>18s}  mean mIoU {result.mean(name):.4f}")
    return EXIT_OK


# entry -------------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="geot", description="Transition-corrected semi-supervised point segmentation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dental-arch dataset")
    g.add_argument("--clouds", type=int, required=True)
    g.add_argument("--points", type=int, required=True)
    g.add_argument("--classes", type=int, required=True)
    g.add_argument("--labeled-ratio", type=float, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--test", type=int, default=None, help="test clouds (default: clouds // 10)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train from a key = value config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on labeled clouds")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", default=None, help="JSON report path")
    e.add_argument("--sample-points", type=int, default=0)
    e.add_argument("--upsample-k", type=int, default=5)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference audit of all loss paths")
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--step", type=float, default=1e-5)
    c.add_argument("--seeds", type=int, default=5, help="instances per path")
    c.add_argument("--paths", default=None, help="comma list of paths (default: all)")
    c.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="component ablation or a lambda/beta sweep")
    a.add_argument("--config", required=True)
    a.add_argument("--seeds", required=True, help="comma list, e.g. 0,1,2")
    a.add_argument("--sweep", choices=sorted(SWEEP_KEYS), default=None)
    a.add_argument("--values", default=None, help="comma list of sweep values")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, UsageError, CloudFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
