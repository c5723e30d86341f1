"""Desk-scale run of the two-step pipeline through the CLI.

synth -> train a small teacher -> distil the hybrid student -> prune sweep ->
clean and blurred evaluation. Everything lands in --workdir.
"""
from __future__ import annotations

import argparse
import csv
import json
import time
from contextlib import redirect_stdout
from io import StringIO
from pathlib import Path

from kdprune.cli import main as cli


def step(*argv) -> dict:
    buf = StringIO()
    t0 = time.perf_counter()
    with redirect_stdout(buf):
        code = cli([str(a) for a in argv])
    if code != 0:
        raise SystemExit(f"step {argv[0]} failed with exit code {code}")
    print(f"  {argv[0]:8s} done in {time.perf_counter() - t0:6.1f}s")
    return json.loads(buf.getvalue())


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", default="desk_run")
    ap.add_argument("--classes", type=int, default=4)
    ap.add_argument("--per-class", type=int, default=200)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--teacher", default="vgg16_student")
    ap.add_argument("--teacher-epochs", type=int, default=5)
    ap.add_argument("--student", default="hybrid_densenet")
    ap.add_argument("--involutions", type=int, default=3)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--alpha", type=float, default=0.5)
    ap.add_argument("--temperature", type=float, default=4.0)
    ap.add_argument("--grid", default="0:95:5,99")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    wd = Path(args.workdir)
    wd.mkdir(parents=True, exist_ok=True)
    data = wd / "data"
    step("synth", "--classes", args.classes, "--per-class", args.per_class, "--size", args.size,
         "--seed", args.seed, "--out", data)
    step("train", "--arch", args.teacher, "--data", data, "--input", args.size, "--epochs", args.teacher_epochs,
         "--seed", args.seed, "--out", wd / "teacher.ckpt")
    teacher = step("eval", "--ckpt", wd / "teacher.ckpt", "--data", data)
    student_run = step("distill", "--teacher", wd / "teacher.ckpt", "--student-arch", args.student,
                       "--involutions", args.involutions, "--data", data, "--alpha", args.alpha,
                       "--temperature", args.temperature, "--epochs", args.epochs, "--seed", args.seed,
                       "--out", wd / "student.ckpt")
    student = step("eval", "--ckpt", wd / "student.ckpt", "--data", data)
    blurred = step("eval", "--ckpt", wd / "student.ckpt", "--data", data, "--blur-sigma", 1.5)
    sweep = step("sweep", "--ckpt", wd / "student.ckpt", "--data", data, "--grid", args.grid,
                 "--out", wd / "sweep.csv", "--select-delta", 1.0)

    print(f"\nteacher ({args.teacher}) test accuracy: {teacher['accuracy']:.4f}")
    print(f"student ({args.student}) test accuracy: {student['accuracy']:.4f} "
          f"(distillation {student_run['seconds'] / 60:.1f} min)")
    print(f"student under blur sigma=1.5:         {blurred['accuracy']:.4f}")
    print(f"selected pruning rate (delta 1 point): {sweep['p_star']:g}%\n")
    print(f"{'p':>5s} {'accuracy':>9s} {'f1':>7s} {'sparsity':>9s}")
    for row in csv.DictReader(open(wd / "sweep.csv")):
        print(f"{float(row['p_percent']):5g} {float(row['accuracy']):9.4f} {float(row['f1_macro']):7.4f} "
              f"{float(row['global_sparsity']):9.4f}")


if __name__ == "__main__":
    main()
