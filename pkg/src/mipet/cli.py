"""Command-line entry point: ``mipet {train,eval,probe,report,gen-data}``.

Exit codes: 0 success, 2 configuration or usage error, 3 numerical failure,
4 I/O error. ``MIPET_THREADS`` caps the sweep worker pool and torch's
intra-op threads.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import torch

from . import checkpoint as ckpt
from . import config as C
from . import metrics as M
from . import probes as P
from .autodiff import NonFiniteError
from .data import MiniSpritesConfig, gen_minisprites
from .matexp import FAMILIES, commutation_probe, summarize_probe, write_probe_csv
from .npyio import NpyFormatError
from .training import build_dataset, build_model, evaluate_model, fit, losses_csv, trainable_store

log = logging.getLogger("mipet")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
PROBES = ("commutation", "toy2d", "ipe-sweep", "mask-sweep", "ablation", "symmetry")


class UsageError(ValueError):
    pass


def _csv_list(text: str, cast=str) -> list:
    return [cast(t.strip()) for t in text.split(",") if t.strip()]


def _seeds(text: str) -> list[int]:
    """``"3"`` means seeds 0..2; ``"0,5,7"`` lists them explicitly."""
    return _csv_list(text, int) if "," in text else list(range(int(text)))


def load_config(path: str | None, overrides) -> C.ExperimentConfig:
    cfg = C.load(path) if path else C.ExperimentConfig()
    return C.apply_overrides(cfg, overrides)


def _write_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


# train / eval -----------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    if args.out:
        cfg = C.apply_overrides(cfg, [f"output={args.out}"])
    run_dir = cfg.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config.resolved")
    chash = cfg.config_hash()
    dataset = build_dataset(cfg.data, cfg.seed)
    model = build_model(cfg.model, dataset.images.shape[1:], cfg.seed)
    store = trainable_store(model)
    every = cfg.schedule.checkpoint_every

    def on_step(row, store):
        if every and (row["step"] + 1) % every == 0:
            ckpt.save(run_dir / "checkpoint.latest", ckpt.model_state(model, store),
                      store.step_count, chash)

    t0 = time.perf_counter()
    result = fit(model, dataset.as_float(), cfg.schedule.epochs, cfg.schedule.batch_size, cfg.seed,
                 cfg.optimizer, store, cfg.schedule.max_steps, on_step)
    (run_dir / "losses.csv").write_text(losses_csv(result.losses))
    ckpt.save(run_dir / "checkpoint.final", ckpt.model_state(model, store), store.step_count, chash)
    summary = {"run_id": cfg.run_id(), "config_hash": chash, "steps": store.step_count,
               "final_losses": dict(result.losses[-1]) if result.losses else {},
               "wall_seconds": round(time.perf_counter() - t0, 3)}
    if args.eval:
        summary["metrics"] = _evaluate_into(run_dir, model, dataset, cfg)
    _write_json(run_dir / "summary.json", summary)
    print(run_dir)
    return EXIT_OK


def _evaluate_into(run_dir: Path, model, dataset, cfg: C.ExperimentConfig) -> dict:
    values, matrix = evaluate_model(model, dataset, cfg.eval, cfg.seed)
    M.write_metrics_csv(run_dir / "metrics.csv", values)
    if matrix is not None:
        M.write_dci_csv(run_dir / "dci_matrix.csv", matrix, dataset.names)
    return values


def load_run(target) -> tuple[Path, C.ExperimentConfig, object]:
    """Config and restored model of a run directory (or a checkpoint file inside one)."""
    target = Path(target)
    if not target.exists():
        raise FileNotFoundError(f"{target}: no such run directory or checkpoint")
    run_dir = target if target.is_dir() else target.parent
    ckpt_path = target if target.is_file() else run_dir / "checkpoint.final"
    cfg = C.load(run_dir / "config.resolved")
    arrays, manifest = ckpt.load(ckpt_path, cfg.config_hash())
    shape = build_dataset(cfg.data, cfg.seed).images.shape[1:]
    model = build_model(cfg.model, shape, cfg.seed)
    ckpt.restore_model(model, None, arrays, manifest["step"])
    return run_dir, cfg, model


def cmd_eval(args) -> int:
    run_dir, cfg, model = load_run(args.target)
    overrides = list(args.set)
    if args.metrics:
        overrides.append(f"eval.metrics={args.metrics}")
    cfg = C.apply_overrides(cfg, overrides)
    dataset = build_dataset(cfg.data, cfg.seed)
    if dataset.num_factors < 2:
        raise UsageError(f"dataset kind {cfg.data.kind!r} has no factor table to score metrics against")
    values = _evaluate_into(run_dir, model, dataset, cfg)
    for k, v in values.items():
        print(f"{k}\t{v:.4f}")
    return EXIT_OK


# probes -----------------------------------------------------------------------


def _probe_out(args, name: str) -> Path:
    out = Path(args.out or os.path.join("runs", f"probe-{name}"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _sweep_outputs(out: Path, stem: str, rows, errors, baseline, extra=None) -> None:
    P.write_sweep_csv(rows, out / f"{stem}.csv")
    summary = P.summarize(rows, baseline)
    summary["errors"] = errors
    summary.update(extra or {})
    P.write_summary(summary, out / "summary.json")
    for lv, per_metric in summary["levels"].items():
        cells = "  ".join(f"{m}={s['mean']:.2f}±{s['std']:.2f}" for m, s in per_metric.items())
        print(f"{lv:>12}  {cells}")


def cmd_probe(args) -> int:
    name = args.name
    if name not in PROBES:
        raise UsageError(f"unknown probe {name!r}; available: {', '.join(PROBES)}")
    out = _probe_out(args, name)
    if name == "commutation":
        rows = []
        for n in _csv_list(args.n, int):
            rows += [{"n": n, **r} for r in commutation_probe(n, args.trials, args.seed)]
        write_probe_csv(rows, out / "commutation.csv")
        summary = {str(n): summarize_probe([r for r in rows if r["n"] == n])
                   for n in _csv_list(args.n, int)}
        P.write_summary(summary, out / "summary.json")
        for n, s in summary.items():
            print(f"n={n}  " + "  ".join(f"{f}: asym={s[f]['asym_mean']:.3g}" for f in FAMILIES))
        return EXIT_OK
    if name == "toy2d":
        res = P.run_toy2d(args.dist, _seeds(args.seeds), epochs=args.epochs, out_dir=out)
        for m, per_seed in res.items():
            print(m, {s: round(v["skew"], 3) for s, v in per_seed.items()})
        return EXIT_OK
    base = load_config(args.config, args.set)
    seeds = _seeds(args.seeds)
    if name == "ipe-sweep":
        rows, errors = P.run_ipe_count_sweep(base, _csv_list(args.ks, int), seeds)
        _sweep_outputs(out, "ipe_sweep", rows, errors, None, {"axis": "k"})
    elif name == "mask-sweep":
        lams = [float(v) for v in _csv_list(args.lambdas)]
        rows, errors = P.run_mask_sweep(base, lams, seeds)
        _sweep_outputs(out, "mask_sweep", rows, errors, "inf", {"axis": "mask_lambda"})
    elif name == "ablation":
        rows, errors = P.run_ablation(base, P.ABLATIONS, seeds)
        _sweep_outputs(out, "ablation", rows, errors, "full", {"axis": "variant"})
    else:
        ratio, rows, errors = P.run_symmetry_benefit(base, seeds)
        _sweep_outputs(out, "symmetry", rows, errors, "asymmetric", {"axis": "mode", "ratio": ratio})
        print(f"symmetric >= asymmetric in {ratio:.3f} of (seed, metric) cells")
    return EXIT_OK


# report -----------------------------------------------------------------------


def collect_rows(paths) -> tuple[list[P.SweepRow], list[str]]:
    """Metric rows from run directories (grouped by config name) or sweep CSVs."""
    rows, warnings = [], []
    for p in map(Path, paths):
        if p.is_file() and p.suffix == ".csv":
            rows += P.read_sweep_csv(p)
            continue
        try:
            cfg = C.load(p / "config.resolved")
        except FileNotFoundError:
            warnings.append(f"{p}: no config.resolved; skipped")
            continue
        mpath = p / "metrics.csv"
        if not mpath.exists():
            warnings.append(f"{p}: no metrics.csv; skipped")
            continue
        values = M.read_metrics_csv(mpath)
        for m in cfg.eval.metrics:
            if m not in values:
                warnings.append(f"{p}: metric {m} missing")
        rows += [P.SweepRow(cfg.name, cfg.seed, m, v) for m, v in values.items()]
    return rows, warnings


def cmd_report(args) -> int:
    rows, warnings = collect_rows(args.runs)
    for w in warnings:
        log.warning(w)
    if not rows:
        raise UsageError("no metrics found in the given runs")
    summary = P.summarize(rows, args.baseline)
    summary["warnings"] = warnings
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    P.write_summary(summary, out)
    metrics = sorted({r.metric for r in rows})
    print("config".ljust(16) + "".join(m.rjust(18) for m in metrics))
    for lv, per_metric in summary["levels"].items():
        cells = []
        for m in metrics:
            s = per_metric.get(m)
            cells.append((f"{s['mean']:.2f}±{s['std']:.2f}" if s else "-").rjust(18))
        print(lv.ljust(16) + "".join(cells))
    for lv, per_metric in summary.get("comparisons", {}).items():
        for m, c in per_metric.items():
            p = "n/a" if math.isnan(c["p_value"]) else f"{c['p_value']:.3g}"
            print(f"{lv} vs {args.baseline} [{m}]: diff={c['diff']:+.3f} p={p} {c['category'] or ''}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    ds = gen_minisprites(MiniSpritesConfig(resolution=args.resolution))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ds.to_npz(out)
    print(f"{out}: {len(ds)} images, factors {dict(zip(ds.names, ds.cardinalities))}")
    return EXIT_OK


# wiring -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mipet", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("config", nargs="?", help="YAML experiment config (defaults if omitted)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted override, e.g. model.k=3 (repeatable)")

    p = sub.add_parser("train", help="train one configuration")
    with_config(p)
    p.add_argument("--out", help="output root (overrides the config's output)")
    p.add_argument("--eval", action="store_true", help="also compute metrics after training")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a trained run")
    p.add_argument("target", help="run directory or checkpoint file")
    p.add_argument("--metrics", help="comma-separated subset of fvm,mig,sap,dci")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe", help=f"run an analysis ({', '.join(PROBES)})")
    p.add_argument("name")
    with_config(p)
    p.add_argument("--out")
    p.add_argument("--seeds", default="3", help="count (0..N-1) or comma list")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", default="4,6,10", help="matrix sizes for the commutation probe")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--dist", default="beta", choices=("beta", "dirichlet"))
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--ks", default="1,2,4")
    p.add_argument("--lambdas", default="0,0.5,1,1.5,2,inf")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("report", help="aggregate metrics across runs")
    p.add_argument("runs", nargs="+", help="run directories or sweep CSV files")
    p.add_argument("--baseline", help="config name (or sweep level) to compare against")
    p.add_argument("--out", default="report.json")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gen-data", help="write the mini-sprites dataset as NPZ")
    p.add_argument("--out", default="minisprites.npz")
    p.add_argument("--resolution", type=int, default=32)
    p.set_defaults(func=cmd_gen_data)
    return parser


def _apply_thread_cap() -> None:
    cap = os.environ.get("MIPET_THREADS")
    if cap and cap.isdigit() and int(cap) > 0:
        torch.set_num_threads(int(cap))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    _apply_thread_cap()
    try:
        return args.func(args)
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ckpt.CheckpointError, NpyFormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
