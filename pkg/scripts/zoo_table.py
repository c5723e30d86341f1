"""Print parameter and MAC counts for every architecture (teachers at 4 classes, students at 38)."""
from __future__ import annotations

import argparse
import csv
import sys

from kdprune.profiler import count_macs
from kdprune.zoo import STUDENTS, TEACHERS, ModelSpec, build_model


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--input", type=int, default=224)
    ap.add_argument("--teacher-classes", type=int, default=4)
    ap.add_argument("--student-classes", type=int, default=38)
    ap.add_argument("--csv", help="also write the table here")
    args = ap.parse_args()

    rows = []
    for arch in TEACHERS + STUDENTS:
        classes = args.teacher_classes if arch in TEACHERS else args.student_classes
        counts = (1, 2, 3) if arch == "hybrid_densenet" else (3,)
        for n in counts:
            rep = count_macs(build_model(ModelSpec(arch, classes, args.input, n)))
            label = f"{arch}({n} inv)" if arch == "hybrid_densenet" else arch
            rows.append((label, classes, rep.total_params, rep.macs, rep.flops))

    print(f"{'model':28s} {'classes':>7s} {'params (M)':>11s} {'MACs (G)':>9s} {'FLOPs (G)':>10s}")
    for label, classes, params, macs, flops in rows:
        print(f"{label:28s} {classes:7d} {params / 1e6:11.4f} {macs / 1e9:9.4f} {flops / 1e9:10.4f}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model", "classes", "params", "macs", "flops"])
            w.writerows(rows)


if __name__ == "__main__":
    sys.exit(main())
