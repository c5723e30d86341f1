"""Command-line driver: profiling, synthetic data, training, distillation, pruning, evaluation.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 checkpoint error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import generate_synthetic, load_image_folder, load_split_arrays, split_dataset
from .distill import distill, train_supervised
from .errors import ConfigError, DataError, KDPruneError
from .metrics import corruption_descriptor, evaluate
from .profiler import count_macs
from .prune import PruneSpec, parse_grid, prune_model, select_optimal, sweep_prune
from .zoo import ARCHITECTURES, ModelSpec, build_model


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _config(args, **overrides) -> RunConfig:
    return RunConfig.resolve(getattr(args, "config", None), overrides)


def _load_data(root, input_size: int, fractions, split_seed: int, expect_classes=None):
    raw = load_image_folder(root)
    if expect_classes is not None and list(raw.classes) != list(expect_classes):
        raise DataError(f"{root}: classes {raw.classes} do not match the checkpoint's {list(expect_classes)}")
    split = split_dataset(raw, fractions, split_seed)
    return split, load_split_arrays(split, input_size)


def _split_meta(split, cfg: RunConfig) -> dict:
    return {
        "classes": list(split.classes),
        "split": {"fractions": list(split.fractions), "seed": split.seed},
        "input_size": cfg.input_size,
    }


def _data_for_checkpoint(args, meta: dict, model):
    split_info = meta.get("split", {"fractions": [0.7, 0.15, 0.15], "seed": 0})
    return _load_data(args.data, model.spec.input_size, split_info["fractions"], split_info["seed"],
                      meta.get("classes"))


def cmd_zoo_count(args) -> int:
    model = build_model(ModelSpec(args.arch, args.classes, args.input), seed=0)
    _emit(count_macs(model).to_dict(with_layers=args.layers))
    return 0


def cmd_synth(args) -> int:
    out = generate_synthetic(args.classes, args.per_class, args.size, args.seed, args.out)
    _emit({"out": str(out), "classes": args.classes, "per_class": args.per_class, "size": args.size,
           "seed": args.seed})
    return 0


def _write_curve(report, out, curve) -> str:
    path = Path(curve) if curve else Path(str(out) + ".csv")
    report.to_csv(path)
    return str(path)


def cmd_train(args) -> int:
    cfg = _config(args, epochs=args.epochs, lr=args.lr, batch_size=args.batch_size, seed=args.seed,
                  input_size=args.input, split_seed=args.split_seed, alpha=0.0)
    split, arrays = _load_data(args.data, cfg.input_size, cfg.split_fractions, cfg.split_seed)
    spec = ModelSpec(args.arch, split.num_classes, cfg.input_size, cfg.hybrid_involution_count)
    model = build_model(spec, seed=cfg.seed)
    meta = {"seed": cfg.seed, "run_config": cfg.to_dict(), **_split_meta(split, cfg)}
    report = train_supervised(model, arrays, cfg.distillation(), checkpoint_path=args.out, metadata=meta, log=_log)
    curve = _write_curve(report, args.out, args.curve)
    _emit({"checkpoint": str(args.out), "curve": curve, "train_loss": report.train_loss,
           "val_accuracy": report.val_accuracy, "seconds": report.seconds})
    return 0


def cmd_distill(args) -> int:
    teacher, tmeta = load_checkpoint(args.teacher)
    cfg = _config(args, alpha=args.alpha, temperature=args.temperature, epochs=args.epochs, lr=args.lr,
                  batch_size=args.batch_size, seed=args.seed,
                  hybrid_involution_count=args.involutions)
    cfg.input_size = args.input or teacher.spec.input_size
    split_info = tmeta.get("split", {"fractions": list(cfg.split_fractions), "seed": cfg.split_seed})
    split, arrays = _load_data(args.data, cfg.input_size, split_info["fractions"], split_info["seed"],
                               tmeta.get("classes"))
    if cfg.input_size != teacher.spec.input_size:
        raise ConfigError(f"student input {cfg.input_size} differs from teacher input {teacher.spec.input_size}")
    spec = ModelSpec(args.student_arch, split.num_classes, cfg.input_size, cfg.hybrid_involution_count)
    student = build_model(spec, seed=cfg.seed)
    meta = {"seed": cfg.seed, "run_config": cfg.to_dict(), "teacher": {"path": str(args.teacher), "arch": teacher.spec.arch},
            **_split_meta(split, cfg)}
    report = distill(teacher, student, arrays, cfg.distillation(), checkpoint_path=args.out, metadata=meta, log=_log)
    curve = _write_curve(report, args.out, args.curve)
    _emit({"checkpoint": str(args.out), "curve": curve, "train_loss": report.train_loss,
           "val_accuracy": report.val_accuracy, "seconds": report.seconds})
    return 0


def cmd_prune(args) -> int:
    cfg = _config(args, percent=args.percent, finetune_epochs=args.finetune_epochs,
                  eval_batch_size=args.batch_size, seed=args.seed)
    model, meta = load_checkpoint(args.ckpt)
    split, arrays = _data_for_checkpoint(args, meta, model)
    res = prune_model(model, PruneSpec(cfg.percent, finetune_epochs=cfg.finetune_epochs), arrays["test"],
                      cfg.eval_batch_size, train_data=arrays["train"], lr=cfg.lr, seed=cfg.seed)
    out_meta = {k: v for k, v in meta.items() if k not in ("tensors", "format_version", "arch", "spec", "prune")}
    out_meta["prune"] = {"p": cfg.percent, "finetune_epochs": cfg.finetune_epochs}
    out_meta["source"] = str(args.ckpt)
    save_checkpoint(res.model, args.out, out_meta, masks=res.masks)
    _emit({"checkpoint": str(args.out), "p_percent": cfg.percent, "test": res.report.to_dict()})
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args, grid=args.grid, select_delta=args.select_delta, eval_batch_size=args.batch_size)
    model, meta = load_checkpoint(args.ckpt)
    grid = parse_grid(cfg.grid)
    split, arrays = _data_for_checkpoint(args, meta, model)
    result = sweep_prune(model, arrays["test"], grid, cfg.eval_batch_size,
                         progress=lambda r: _log(f"p={r.p_percent:g} acc={r.accuracy:.4f} sparsity={r.global_sparsity:.4f}"))
    result.to_csv(args.out)
    summary = {"csv": str(args.out), "rows": len(result.rows)}
    if args.select_delta is not None:
        summary["select_delta"] = cfg.select_delta
        summary["p_star"] = select_optimal(result, cfg.select_delta)
    _emit(summary)
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args, eval_batch_size=args.batch_size, blur_kernel=args.blur_kernel)
    model, meta = load_checkpoint(args.ckpt)
    split, arrays = _data_for_checkpoint(args, meta, model)
    data = arrays[args.partition]
    if len(data) == 0:
        raise DataError(f"partition {args.partition!r} is empty")
    corruption = corruption_descriptor(args.blur_sigma, cfg.blur_kernel)
    report = evaluate(model, data, cfg.eval_batch_size, corruption=corruption)
    _emit(report.to_dict())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kdprune", description="Knowledge distillation and pruning toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    zoo = sub.add_parser("zoo", help="model zoo utilities")
    zsub = zoo.add_subparsers(dest="zoo_command", required=True, parser_class=_Parser)
    zc = zsub.add_parser("count", help="parameter and MAC counts as JSON")
    zc.add_argument("--arch", required=True, choices=ARCHITECTURES)
    zc.add_argument("--classes", type=int, required=True)
    zc.add_argument("--input", type=int, default=224)
    zc.add_argument("--layers", action="store_true", help="include the per-layer breakdown")
    zc.set_defaults(func=cmd_zoo_count)

    sy = sub.add_parser("synth", help="write a synthetic image-folder corpus")
    sy.add_argument("--classes", type=int, required=True)
    sy.add_argument("--per-class", type=int, required=True)
    sy.add_argument("--size", type=int, default=64)
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--out", required=True)
    sy.set_defaults(func=cmd_synth)

    def training_flags(sp):
        sp.add_argument("--config", help="JSON file of RunConfig keys")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--curve", help="per-epoch CSV path (default: <out>.csv)")

    tr = sub.add_parser("train", help="supervised training (no teacher)")
    tr.add_argument("--arch", required=True, choices=ARCHITECTURES)
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--input", type=int)
    tr.add_argument("--split-seed", type=int)
    training_flags(tr)
    tr.set_defaults(func=cmd_train)

    di = sub.add_parser("distill", help="distil a teacher checkpoint into a student")
    di.add_argument("--teacher", required=True)
    di.add_argument("--student-arch", required=True, choices=ARCHITECTURES)
    di.add_argument("--data", required=True)
    di.add_argument("--out", required=True)
    di.add_argument("--alpha", type=float)
    di.add_argument("--temperature", type=float)
    di.add_argument("--involutions", type=int, help="hybrid_densenet involution count")
    di.add_argument("--input", type=int, help="must match the teacher (default: teacher input)")
    training_flags(di)
    di.set_defaults(func=cmd_distill)

    pr = sub.add_parser("prune", help="prune a checkpoint at a single rate")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--percent", type=float, required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--finetune-epochs", type=int)
    pr.add_argument("--batch-size", type=int)
    pr.add_argument("--seed", type=int)
    pr.add_argument("--config")
    pr.set_defaults(func=cmd_prune)

    sw = sub.add_parser("sweep", help="accuracy/sparsity sweep over pruning rates")
    sw.add_argument("--ckpt", required=True)
    sw.add_argument("--data", required=True)
    sw.add_argument("--grid")
    sw.add_argument("--out", required=True)
    sw.add_argument("--select-delta", type=float)
    sw.add_argument("--batch-size", type=int)
    sw.add_argument("--config")
    sw.set_defaults(func=cmd_sweep)

    ev = sub.add_parser("eval", help="evaluate a checkpoint, optionally under Gaussian blur")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--partition", choices=("train", "val", "test"), default="test")
    ev.add_argument("--blur-sigma", type=float)
    ev.add_argument("--blur-kernel", type=int)
    ev.add_argument("--batch-size", type=int)
    ev.add_argument("--config")
    ev.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except KDPruneError as exc:
        print(f"kdprune: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"kdprune: training diverged: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
