"""Command-line entry point.

Subcommands: ``train``, ``eval``, ``gradcheck``, ``sketch-bench``, ``shapes``
and ``gen-data``. Exit codes: 0 success, 1 validation failure (bad config,
missing or incompatible checkpoint, bad arguments), 2 numeric failure
(non-finite loss, failed gradient or oracle check).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import backbone as bb
from . import checkpoint as ckpt
from . import config as cfgmod
from . import gradcheck as gc
from . import sketch as sk
from . import synthdata as sd
from . import training as tr
from .tensor_core import ShapeError

log = logging.getLogger("lgd")

VALIDATION, NUMERIC = 1, 2


class UsageError(ValueError):
    pass


def _emit(report, out=None):
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    sys.stdout.write(text)


def _load_config(args):
    cfg = cfgmod.load(args.config) if args.config else cfgmod.toy_config()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.output_dir = args.out
    if getattr(args, "precision", None):
        cfg.precision = args.precision
    return cfg


def load_data(cfg):
    """``(train, test)`` datasets named by the config; ``test`` may be None for file data without a test file."""
    data = cfg.data
    if "synthetic" in data:
        ds = sd.generate(cfgmod.synthetic_spec(cfg))
        return sd.split(ds, data.get("test_fraction", 1 / 3))
    train = sd.load_dataset(data["path"])
    test = sd.load_dataset(data["test_path"]) if data.get("test_path") else None
    return train, test


def _dtype(precision):
    return np.float32 if precision == "single" else np.float64


# train

def cmd_train(args):
    cfg = _load_config(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.dump(cfg, out / "config.json")
    stages = [args.stage] if args.stage else [1, 2]

    net, state, resumed_stage = None, None, None
    if args.resume:
        net, state, header = ckpt.load(args.resume)
        resumed_stage = header.get("stage")
        if resumed_stage == 2 and not args.stage:
            stages = [2]
    if 2 in stages and 1 not in stages and net is None:
        default = out / "stage1.ckpt"
        if default.exists():
            net, _, _ = ckpt.load(default)
        elif not args.from_scratch:
            raise UsageError(f"stage 2 needs a stage-1 checkpoint: none given with --resume and {default} "
                             "does not exist (run --stage 1 first or pass --from-scratch)")
    if net is not None and net.stage_done < 1 and 1 not in stages and not args.from_scratch:
        raise UsageError("stage 2 needs a network that finished stage 1 (pass --from-scratch to override)")

    train_set, test_set = load_data(cfg)
    mode = "a" if args.resume else "w"
    with open(out / "metrics.jsonl", mode) as metrics, open(out / "timing.jsonl", mode) as timing:
        def on_record(rec):
            metrics.write(rec.to_json() + "\n")
            metrics.flush()

        for stage in stages:
            tcfg = cfg.train_config(stage)
            if net is None:
                net = bb.build(cfg.network, seed=cfg.seed, dtype=_dtype(cfg.precision))
            elif net.dtype != _dtype(cfg.precision):
                net = net.astype(_dtype(cfg.precision))
            st = state if resumed_stage == stage else None

            def on_epoch_end(n, s, rec, seconds, stage=stage, tcfg=tcfg):
                timing.write(json.dumps({"stage": stage, "epoch": rec.epoch, "seconds": round(seconds, 3)}) + "\n")
                timing.flush()
                if tcfg.checkpoint_every and s.epoch % tcfg.checkpoint_every == 0:
                    ckpt.save(out / f"stage{stage}_epoch{s.epoch}.ckpt", n, cfg.to_dict(), s, stage=stage)

            t0 = time.perf_counter()
            st = st or tr.TrainState()
            try:
                tr.train(net, train_set, tcfg, seed=cfg.seed, test_set=test_set,
                         from_scratch=args.from_scratch, state=st, on_record=on_record,
                         on_epoch_end=on_epoch_end)
            except tr.NonFiniteLoss as e:
                metrics.write(json.dumps({"error": str(e), "stage": stage, "epoch": st.epoch}) + "\n")
                ckpt.save(out / f"stage{stage}_failed.ckpt", net, cfg.to_dict(), st, stage=stage)
                raise
            ckpt.save(out / f"stage{stage}.ckpt", net, cfg.to_dict(), st, stage=stage)
            log.info("stage %d done in %.1fs -> %s", stage, time.perf_counter() - t0, out / f"stage{stage}.ckpt")
    return 0


# eval

def evaluation_report(net, dataset, n_samples=None):
    if dataset.num_classes != net.spec.num_classes:
        raise UsageError(f"dataset has {dataset.num_classes} classes but the network predicts "
                         f"{net.spec.num_classes}")
    scores = tr.evaluate(net, dataset, n_samples)
    pred = np.argmax(scores, axis=1)
    K = net.spec.num_classes
    confusion = np.zeros((K, K), dtype=np.int64)
    np.add.at(confusion, (dataset.labels, pred), 1)
    counts = confusion.sum(axis=1)
    per_class = [float(confusion[k, k] / counts[k]) if counts[k] else None for k in range(K)]
    return {
        "num_videos": len(dataset),
        "samples_per_video": n_samples if n_samples is not None else (10 if net.spec.is_2d else 15),
        "classifier": net.spec.classifier,
        "top1": tr.top1(scores, dataset.labels),
        "per_class_top1": per_class,
        "confusion": confusion.tolist(),
    }


def cmd_eval(args):
    net, _, header = ckpt.load(args.checkpoint)
    if args.data:
        dataset = sd.load_dataset(args.data)
    else:
        if not header.get("config"):
            raise UsageError("checkpoint carries no config; pass --data")
        cfg = cfgmod.parse(header["config"])
        train_set, test_set = load_data(cfg)
        dataset = test_set if test_set is not None else train_set
    report = evaluation_report(net, dataset, args.samples)
    report["checkpoint"] = str(args.checkpoint)
    _emit(report, args.out)
    return 0


# gradcheck

def cmd_gradcheck(args):
    if args.precision == "single":
        log.warning("gradient checks always run in double precision")
    seed = args.seed
    if seed is None:
        seed = cfgmod.load(args.config).seed if args.config else 0
    suites = list(gc.SUITES) if args.scope == "all" else [args.scope]
    results = gc.run(suites, seed=seed)
    for r in results:
        print(r.line(), file=sys.stderr)
    report = {"seed": seed, "h": gc.H, "cases": [
        {"suite": r.suite, "name": r.name, "max_rel_err": r.report.worst, "threshold": r.threshold,
         "per_target": r.report.max_rel_err, "kinks_skipped": r.report.kinks_skipped, "passed": r.passed}
        for r in results]}
    report["passed"] = all(r.passed for r in results)
    _emit(report, args.out)
    return 0 if report["passed"] else NUMERIC


# sketch-bench

def oracle_check(input_dim=8, sketch_dim=32, trials=100, seed=0):
    """Largest gap between the FFT tensor sketch and the explicit outer-product sketch."""
    worst = 0.0
    for t in range(trials):
        rng = sk.stream(seed, f"oracle/{t}")
        cfg = sk.SketchConfig.create(input_dim, sketch_dim, seed=int(rng.integers(1 << 31)))
        x = rng.standard_normal(input_dim)
        worst = max(worst, float(np.max(np.abs(sk.tensor_sketch_np(x, cfg) - sk.outer_product_sketch(x, cfg)))))
    return worst


def cmd_sketch_bench(args):
    if args.trials < 50:
        raise UsageError(f"--trials must be >= 50, got {args.trials}")
    seed = args.seed or 0
    stats = sk.kernel_bench(args.dim, args.dims, args.trials, seed)
    gap = oracle_check(seed=seed)
    rmse = [s.rmse for s in stats]
    report = {
        "input_dim": args.dim,
        "trials": args.trials,
        "target": stats[0].target,
        "per_dim": [{"sketch_dim": s.sketch_dim, "mean": s.mean, "std_err": s.std_err, "rmse": s.rmse,
                     "within_3se": s.within_3se} for s in stats],
        "rmse_decreasing": bool(all(a > b for a, b in zip(rmse, rmse[1:]))),
        "oracle_max_abs_diff": gap,
        "oracle_pass": gap < 1e-9,
    }
    _emit(report, args.out)
    return 0 if report["oracle_pass"] else NUMERIC


# shapes

def cmd_shapes(args):
    if args.config:
        spec = _load_config(args).network
    else:
        kw = {"input_shape": tuple(args.input)} if args.input else {}
        spec = bb.PRESETS[args.preset](**kw)
    for layer, op, shape in bb.shape_schedule(spec):
        print(f"{layer:<6} {op:<48} {'x'.join(map(str, shape))}")
    return 0


# gen-data

def cmd_gen_data(args):
    cfg = _load_config(argparse.Namespace(config=args.config, seed=None, out=None, precision=None))
    if "synthetic" not in cfg.data:
        raise UsageError("config data section names a file, not a synthetic spec")
    spec = cfgmod.synthetic_spec(cfg)
    if args.seed is not None:
        spec.seed = args.seed
    ds = sd.generate(spec)
    if args.test_out:
        train, test = sd.split(ds, cfg.data.get("test_fraction", 1 / 3))
        sd.save_dataset(train, args.out)
        sd.save_dataset(test, args.test_out)
        print(f"wrote {len(train)} videos to {args.out} and {len(test)} to {args.test_out}")
    else:
        sd.save_dataset(ds, args.out)
        print(f"wrote {len(ds)} videos to {args.out}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="lgd", description="Local and global diffusion networks for video.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run stage 1, stage 2 or both")
    t.add_argument("--config", help="experiment config (JSON); the LGD-2D toy preset when omitted")
    t.add_argument("--stage", type=int, choices=(1, 2), help="train one stage only (default: both)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--from-scratch", action="store_true", help="allow stage 2 without a stage-1 network")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="output directory (overrides the config)")
    t.add_argument("--precision", choices=("double", "single"))
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="dataset file (default: the test split of the checkpoint's config)")
    e.add_argument("--samples", type=int, help="samples per video (default 10 for 2-D, 15 for 3-D)")
    e.add_argument("--out", help="write the JSON report here as well")
    e.set_defaults(fn=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    g.add_argument("--scope", choices=("ops", "block", "network", "all"), default="all")
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--precision", choices=("double", "single"))
    g.add_argument("--out")
    g.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("sketch-bench", help="kernel approximation quality of the tensor sketch")
    s.add_argument("--dim", type=int, default=16)
    s.add_argument("--dims", type=int, nargs="+", default=[64, 256, 1024])
    s.add_argument("--trials", type=int, default=200)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_sketch_bench)

    h = sub.add_parser("shapes", help="print the local path shape after every stage")
    h.add_argument("--config")
    h.add_argument("--preset", choices=sorted(bb.PRESETS), default="resnet50_3d")
    h.add_argument("--input", type=int, nargs=3, metavar=("T", "H", "W"))
    h.set_defaults(fn=cmd_shapes)

    d = sub.add_parser("gen-data", help="write a synthetic dataset file")
    d.add_argument("--config")
    d.add_argument("--seed", type=int)
    d.add_argument("--out", required=True)
    d.add_argument("--test-out", help="split and write the test part here (the train part goes to --out)")
    d.set_defaults(fn=cmd_gen_data)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (FloatingPointError, tr.NonFiniteLoss) as e:
        print(f"lgd {args.command}: numeric failure: {e}", file=sys.stderr)
        return NUMERIC
    except (cfgmod.ConfigError, ckpt.CheckpointError, ShapeError, UsageError, FileNotFoundError, ValueError) as e:
        print(f"lgd {args.command}: {e}", file=sys.stderr)
        return VALIDATION


if __name__ == "__main__":
    sys.exit(main())
