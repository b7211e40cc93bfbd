"""``mignn`` command-line driver.

Every subcommand writes into ``--out``: ``metrics.csv`` (one row per method and
seed, no timings, so repeated runs are byte-identical), ``summary.json`` and,
where a model is trained, ``checkpoint.bin``.  Failures print one
``kind: message`` line on stderr and exit with status 1.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import MignnError
from .harness import casestudy, selftest
from .harness.baselines import METHODS, evaluate_state, make_splits, run_seeds
from .harness.config import RunConfig, build_config, load_collection
from .harness.metrics import Metrics
from .harness.sweep import SWEEP_PARAMS, sweep, sweep_csv
from .meta import hp_from_config, spec_from_config

ABLATION_METHODS = ("mignn", "task_only", "graph_only", "finetune_agf")

logger = logging.getLogger("mignn")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--data", help="dataset directory (tud) or file (jsonl)")
    common.add_argument("--format", choices=("tud", "jsonl", "synth"))
    common.add_argument("--name", help="dataset name (defaults to the directory name)")
    common.add_argument("--arch", choices=("sgc", "gcn", "sage"))
    common.add_argument("--alpha", type=float, help="inner-loop step size")
    common.add_argument("--steps", type=int, help="inner-loop gradient steps")
    common.add_argument("--lambda", dest="lam", type=float, help="weight of the scale/shift penalty")
    common.add_argument("--batch", type=int, help="graphs per outer update")
    common.add_argument("--seeds", help="e.g. '0-9' or '1,2,3'")
    common.add_argument("--second-order", dest="second_order", choices=("on", "off"))
    common.add_argument("--epochs", type=int)
    common.add_argument("--patience", type=int)
    common.add_argument("--split-seed", dest="split_seed", type=int)
    common.add_argument("--workers", type=int, help="processes for independent seeds")
    common.add_argument("--out", help="output directory")
    common.add_argument("--config", help="key = value file; its values override flags")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mignn", description="Meta-inductive node classification on graph collections.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="meta-train and evaluate on the test graphs")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a saved checkpoint on the test graphs")
    ev.add_argument("--checkpoint", required=True)
    b = sub.add_parser("baseline", parents=[common], help="run one comparison method")
    b.add_argument("--method", choices=METHODS, required=True)
    b.add_argument("--knn-k", dest="knn_k", type=int)
    sub.add_parser("ablate", parents=[common], help="full model against its ablations")
    s = sub.add_parser("sweep", parents=[common], help="grid over lambda or inner_steps")
    s.add_argument("--param", choices=tuple(SWEEP_PARAMS), required=True)
    s.add_argument("--values", required=True, help="comma-separated values")
    sub.add_parser("casestudy", parents=[common], help="accuracy by similarity to the training graphs")
    st = sub.add_parser("selftest", help="gradient checks against finite differences")
    st.add_argument("--instances", type=int, default=20)
    st.add_argument("--seed", type=int, default=0)
    return p


def _config(args) -> RunConfig:
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose", "checkpoint")}
    return build_config(flags, args.config)


def _csv(rows: list[list]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def _metric_rows(results_by_method: dict) -> list[list]:
    rows = [["method", "seed", "accuracy", "micro_f1", "correct", "decisions"]]
    for method, results in results_by_method.items():
        for r in results:
            rows.append([method, r.seed, repr(r.accuracy), repr(r.micro_f1), r.counts.correct, r.counts.decisions])
    return rows


def _write_outputs(cfg: RunConfig, out: Path, results_by_method: dict, metrics_by_method: dict,
                   runtime: float, extra: dict | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(_csv(_metric_rows(results_by_method)), encoding="utf-8")
    summary = {
        "config": cfg.as_dict(),
        "config_hash": cfg.digest(),
        "seeds": cfg.seeds,
        "methods": {m: _metrics_json(v) for m, v in metrics_by_method.items()},
        "runtime_seconds": runtime,
    }
    summary.update(extra or {})
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    # the first method with a model, first seed
    for results in results_by_method.values():
        state = results[0].checkpoint_state()
        if state is not None:
            save_checkpoint(out / "checkpoint.bin", state)
            break


def _metrics_json(m: Metrics) -> dict:
    return {"accuracy": m.accuracy, "accuracy_hw": m.accuracy_hw, "micro_f1": m.micro_f1,
            "micro_f1_hw": m.micro_f1_hw, "per_seed_accuracy": m.per_seed_accuracy,
            "per_seed_micro_f1": m.per_seed_micro_f1, "runtime_seconds": m.runtime, **m.extra}


def _prepare(cfg: RunConfig):
    coll = load_collection(cfg)
    splits = make_splits(coll, cfg.split_seed, cfg.support_fraction)
    return splits, cfg.encoder(coll), cfg.hyperparams()


def _run_methods(cfg: RunConfig, methods, echo) -> None:
    splits, spec, hp = _prepare(cfg)
    t0 = time.perf_counter()
    results, metrics = {}, {}
    for method in methods:
        m, rs = run_seeds(method, splits, spec, hp, cfg.seeds, cfg.options(), cfg.workers)
        results[method], metrics[method] = rs, m
        echo(f"{method:<13} {m.row()}")
    _write_outputs(cfg, Path(cfg.out), results, metrics, time.perf_counter() - t0)


def cmd_train(args, echo) -> int:
    cfg = _config(args)
    cfg.method = "mignn"
    _run_methods(cfg, ["mignn"], echo)
    return 0


def cmd_baseline(args, echo) -> int:
    cfg = _config(args)
    _run_methods(cfg, [cfg.method], echo)
    return 0


def cmd_ablate(args, echo) -> int:
    _run_methods(_config(args), ABLATION_METHODS, echo)
    return 0


def cmd_eval(args, echo) -> int:
    cfg = _config(args)
    state = load_checkpoint(args.checkpoint)
    spec, hp = spec_from_config(state.config), hp_from_config(state.config)
    splits = make_splits(load_collection(cfg), cfg.split_seed, hp.support_fraction)
    counts = evaluate_state(state, splits.test.graphs, splits.test_episodes, spec, hp, splits.multi_label)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = [["method", "seed", "accuracy", "micro_f1", "correct", "decisions"],
            ["checkpoint", state.seed, repr(counts.accuracy), repr(counts.micro_f1), counts.correct, counts.decisions]]
    (out / "metrics.csv").write_text(_csv(rows), encoding="utf-8")
    summary = {"config": cfg.as_dict(), "config_hash": cfg.digest(), "checkpoint": str(args.checkpoint),
               "seeds": [state.seed], "accuracy": counts.accuracy, "micro_f1": counts.micro_f1}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    save_checkpoint(out / "checkpoint.bin", state)
    echo(f"accuracy {100 * counts.accuracy:.2f}  micro-F1 {100 * counts.micro_f1:.2f}")
    return 0


def cmd_sweep(args, echo) -> int:
    cfg = _config(args)
    splits, spec, hp = _prepare(cfg)
    values = cfg.values
    t0 = time.perf_counter()
    rows = sweep(cfg.param, values, splits, spec, hp, cfg.seeds, cfg.method, cfg.options(), cfg.workers)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    text = sweep_csv(cfg.param, rows)
    (out / "sweep.csv").write_text(text, encoding="utf-8")
    metric_rows = [["value", "seed", "accuracy", "micro_f1"]]
    for r in rows:
        for seed, a, f in zip(cfg.seeds, r.metrics.per_seed_accuracy, r.metrics.per_seed_micro_f1):
            metric_rows.append([repr(r.value), seed, repr(a), repr(f)])
    (out / "metrics.csv").write_text(_csv(metric_rows), encoding="utf-8")
    summary = {"config": cfg.as_dict(), "config_hash": cfg.digest(), "seeds": cfg.seeds, "param": cfg.param,
               "rows": [{"value": r.value, "film_norm": r.film_norm, **_metrics_json(r.metrics)} for r in rows],
               "runtime_seconds": time.perf_counter() - t0}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    state = rows[0].results[0].checkpoint_state()  # first value, first seed
    if state is not None:
        save_checkpoint(out / "checkpoint.bin", state)
    echo(text.rstrip())
    return 0


def cmd_casestudy(args, echo) -> int:
    from .harness.baselines import train_supervised
    from .meta import train

    cfg = _config(args)
    hp = cfg.hyperparams()
    if cfg.format == "synth" and not cfg.data:
        splits = casestudy.shifted_case_collection(cfg.synth_seed)
    else:
        splits = make_splits(load_collection(cfg), cfg.split_seed, cfg.support_fraction)
    spec = cfg.encoder(splits.train)
    t0 = time.perf_counter()
    rows = [["seed", "group", "method", "size", "similarity", "accuracy", "micro_f1"]]
    per_seed = []
    state = None
    for seed in cfg.seeds:
        state = train(splits.train, splits.val, spec, hp, seed)
        theta, _ = train_supervised(splits.train, splits.val, spec, hp, seed)
        res = casestudy.similarity_case_study(splits.train, splits.test, splits.test_episodes, state, spec, hp, seed,
                                              theta, splits.val, cfg.transduct_epochs)
        per_seed.append(res)
        for r in res:
            rows.append([seed, r.group, r.method, r.size, repr(r.similarity), repr(r.accuracy), repr(r.micro_f1)])
            echo(f"seed {seed} {r.group:<6} {r.method:<9} n={r.size:<3} acc {100 * r.accuracy:6.2f}")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(_csv(rows), encoding="utf-8")
    means = casestudy.mean_drops(per_seed)
    summary = {"config": cfg.as_dict(), "config_hash": cfg.digest(), "seeds": cfg.seeds, "drops": means,
               "runtime_seconds": time.perf_counter() - t0}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    save_checkpoint(out / "checkpoint.bin", state)
    for method, d in means.items():
        echo(f"{method:<9} high-low drop {100 * d['drop']:6.2f}  spread {100 * d['spread']:6.2f}")
    return 0


def cmd_selftest(args, echo) -> int:
    return 0 if selftest.main(args.instances, args.seed, echo) else 1


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "baseline": cmd_baseline, "ablate": cmd_ablate,
            "sweep": cmd_sweep, "casestudy": cmd_casestudy, "selftest": cmd_selftest}


def main(argv=None, echo=print) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args, echo)
    except MignnError as exc:
        print(exc.one_line(), file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
