"""Chain-rule composition of stacked masks, three ways.

1. Two point-wise layers sharing one mask: the effective kept set is the mask
   itself, nothing vanishes.
2. Two point-wise layers with disjoint masks: the kept-set intersection is
   empty and every bottom gradient is exactly zero.
3. A point-wise layer over a k=3 s=1 conv: overlapping receptive fields turn
   dropped positions into approximate (nonzero) gradients instead of exact
   zeros.
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from sbp.analysis import ConvStage, PointwiseStage, chain_rule_report, pointwise_stack_report
from sbp.masks import IndexMask, checkerboard_mask, sample_grid_mask


def show(label, report):
    print(label)
    print(f"  input classes: {report.input_classes}")
    print(f"  effective keep: {report.effective_keep}")
    print(f"  vanishing: {report.vanishing}")
    for lid, cls in report.weight_classes.items():
        print(f"  weights[{lid}]: {cls} "
              f"(sparsity {report.per_layer_sparsity[lid]:.2f})")
    print()


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid", default="4x4")
    args = p.parse_args()
    grid = tuple(int(v) for v in args.grid.split("x"))

    shared = sample_grid_mask(grid, 0.5, args.seed)
    show("shared mask, two point-wise layers",
         pointwise_stack_report([("pw0", shared), ("pw1", shared)]))

    half = grid[0] * grid[1] // 2
    low = IndexMask.from_keep(grid, range(half))
    high = IndexMask.from_keep(grid, range(half, 2 * half))
    show("disjoint masks, two point-wise layers",
         pointwise_stack_report([("pw0", low), ("pw1", high)]))

    show("point-wise over k=3 s=1 conv (neighbor effect)",
         chain_rule_report([
             PointwiseStage("pw0", grid, checkerboard_mask(*grid, phase=0)),
             ConvStage("conv0", grid, kernel=3, stride=1, padding=1,
                       mask=checkerboard_mask(*grid, phase=1)),
         ]))


if __name__ == "__main__":
    main()
