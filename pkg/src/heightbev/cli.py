"""Command-line entry points.

Exit codes: 0 success, 1 validation failure, 2 bad arguments.
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

import numpy as np

from .elements import write_jsonl
from .metrics import dumps_report, report_csv
from .model import ConfigMismatch, ModelConfig, load_config
from .params import FormatError
from .synth import ConfigError, build_datasets, load_dataset, save_dataset

log = logging.getLogger("heightbev")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

ABLATION_STEPS = (
    ("baseline", {"height_mechanism": False, "fg_separation": False, "multiscale_fusion": False}),
    ("+height", {"height_mechanism": True, "fg_separation": False, "multiscale_fusion": False}),
    ("+height+fg", {"height_mechanism": True, "fg_separation": True, "multiscale_fusion": False}),
    ("+height+fg+fusion", {"height_mechanism": True, "fg_separation": True, "multiscale_fusion": True}),
)


def _config(args) -> ModelConfig:
    return load_config(args.config, args.set or [])


def cmd_synth_gen(args) -> int:
    cfg = _config(args)
    n_val = args.val if args.val is not None else max(1, args.n // 4)
    t0 = time.time()
    ds = build_datasets(cfg.scene, args.seed, args.n, n_val)
    save_dataset(args.out, ds)
    print(f"wrote {args.n} train + {n_val} val scenes to {args.out} in {time.time() - t0:.1f}s")
    return EXIT_OK


def _check_data(cfg: ModelConfig, data_cfg) -> None:
    if data_cfg.channels != cfg.channels or data_cfg.scales != cfg.scales:
        raise ConfigMismatch(
            f"dataset has {data_cfg.scales} scales x {data_cfg.channels} channels, "
            f"model expects {cfg.scales} x {cfg.channels}"
        )


def cmd_train(args) -> int:
    from .train import TrainState, train

    cfg = _config(args)
    tr = load_dataset(args.data, "train")
    _check_data(cfg, tr.config)
    val = load_dataset(args.data, args.val_split) if args.eval_every else None
    state = TrainState.load(args.out) if args.resume and Path(args.out, "state.json").exists() else None
    t0 = time.time()
    state = train(tr, cfg, seed=args.seed, epochs=args.epochs, val=val, ckpt=args.out, state=state, eval_every=args.eval_every)
    last = state.history[-1] if state.history else {}
    print(json.dumps({"epochs": state.epoch, "seconds": round(time.time() - t0, 1), "last": last}))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import TrainState, evaluate

    state = TrainState.load(args.ckpt)
    ds = load_dataset(args.data, args.split)
    _check_data(state.config, ds.config)
    report, preds = evaluate(ds, state.params, state.config)
    Path(args.report).write_text(dumps_report(report) + "\n")
    if args.csv:
        Path(args.csv).write_text(report_csv(report))
    if args.predictions:
        write_jsonl(args.predictions, preds)
    print(report_csv(report), end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import full_report, module_reports

    cfg = _config(args)
    t0 = time.time()
    lines, ok, worst = [], True, 0.0
    for name, rep in module_reports(args.tolerance).items():
        lines.append(f"[{name}]")
        lines += rep.lines()
        ok &= rep.passed
        worst = max(worst, rep.max_rel_error)
    if args.full:
        rep = full_report(cfg, per_param=args.per_param, tolerance=args.tolerance)
        lines.append("[end-to-end]")
        lines += rep.lines()
        ok &= rep.passed
        worst = max(worst, rep.max_rel_error)
    lines.append(f"max relative error {worst:.3e} (tolerance {args.tolerance:g}) in {time.time() - t0:.1f}s: {'PASS' if ok else 'FAIL'}")
    text = "\n".join(lines)
    print(text)
    if args.report:
        Path(args.report).write_text(text + "\n")
    return EXIT_OK if ok else EXIT_FAIL


def run_ablation(cfg: ModelConfig, train_ds, val_ds, seeds, epochs=None, steps=ABLATION_STEPS) -> list[dict]:
    """Train every incremental toggle configuration for each seed; one row per configuration."""
    from .train import evaluate, train

    rows = []
    for name, toggles in steps:
        c = ModelConfig.from_json({**cfg.to_json(), **toggles})
        scores = []
        for s in seeds:
            st = train(train_ds, c, seed=s, epochs=epochs)
            rep, _ = evaluate(val_ds, st.params, c)
            scores.append(rep["mAP_general"])
            log.info("ablation %s seed %d mAP %.4f", name, s, rep["mAP_general"])
        rows.append({"setting": name, **toggles, "seeds": list(seeds), "mAP": scores, "mean": float(np.mean(scores))})
    order = np.argsort([-r["mean"] for r in rows], kind="stable")
    for rank, i in enumerate(order, 1):
        rows[i]["rank"] = rank
    return rows


def ablation_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    seeds = rows[0]["seeds"] if rows else []
    w.writerow(["setting", "height_mechanism", "fg_separation", "multiscale_fusion"] + [f"mAP_seed{s}" for s in seeds] + ["mAP_mean", "rank"])
    for r in rows:
        w.writerow(
            [r["setting"], int(r["height_mechanism"]), int(r["fg_separation"]), int(r["multiscale_fusion"])]
            + [f"{v:.4f}" for v in r["mAP"]]
            + [f"{r['mean']:.4f}", r["rank"]]
        )
    return buf.getvalue()


def cmd_ablate(args) -> int:
    cfg = _config(args)
    tr = load_dataset(args.data, "train")
    va = load_dataset(args.data, args.split)
    _check_data(cfg, tr.config)
    seeds = list(range(args.seeds))
    rows = run_ablation(cfg, tr, va, seeds, epochs=args.epochs)
    text = ablation_csv(rows)
    Path(args.report).write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    results = run_selftest()
    failed = [r for r in results if not r.passed]
    for r in results:
        print(r.line())
    print(f"{len(results) - len(failed)}/{len(results)} self-test assertions passed")
    return EXIT_OK if not failed else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="heightbev", description="Height-aware BEV vector-map pipeline on synthetic scenes.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="JSON file mirroring ModelConfig")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field (dotted keys for sections)")
        return p

    p = with_config(sub.add_parser("synth-gen", help="generate a synthetic dataset"))
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True, help="number of training scenes")
    p.add_argument("--val", type=int, help="number of validation scenes (default n/4)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_gen)

    p = with_config(sub.add_parser("train", help="train a model"))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--eval-every", type=int, default=0, help="evaluate the validation split every N epochs")
    p.add_argument("--val-split", default="val")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--csv")
    p.add_argument("--predictions", help="write predictions as JSON Lines")
    p.set_defaults(func=cmd_eval)

    p = with_config(sub.add_parser("gradcheck", help="finite-difference gradient checks"))
    p.add_argument("--full", action="store_true", help="also check the whole pipeline end to end at desk size")
    p.add_argument("--per-param", type=int, default=4)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--report")
    p.set_defaults(func=cmd_gradcheck)

    p = with_config(sub.add_parser("ablate", help="incremental toggle ablation"))
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--epochs", type=int)
    p.add_argument("--split", default="val")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("selftest", help="run the built-in trivial-example assertions")
    p.set_defaults(func=cmd_selftest)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)  # exits 2 with usage on bad arguments
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigMismatch, ConfigError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except Exception as exc:  # noqa: BLE001 - surfaced as a validation failure
        from .train import TrainingDiverged

        if isinstance(exc, TrainingDiverged):
            print(f"error: training diverged: {exc}", file=sys.stderr)
            return EXIT_FAIL
        raise


if __name__ == "__main__":
    sys.exit(main())
