#!/usr/bin/env python3
"""Memorize five noiseless straight tracks with the plain encoder.

A sanity experiment, not a benchmark: if the encoder, loss, and optimizer are
wired correctly, training error collapses well below the 0.05 m line within
200 epochs. Prints the loss curve every 20 epochs and the final metric table.
"""

import argparse
import sys

from g2k import evaluation as ev
from g2k import training as tr


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=None,
                    help="override the recipe's epoch count")
    ap.add_argument("--seed", type=int, default=None,
                    help="override the recipe's training seed")
    args = ap.parse_args()

    batches, cfg, tcfg = tr.overfit_straight_setup()
    if args.epochs is not None:
        tcfg.epochs = args.epochs
    if args.seed is not None:
        tcfg.seed = args.seed

    result = tr.train(batches, cfg, tcfg)
    for i, lv in enumerate(result.history):
        if i % 20 == 0 or i == len(result.history) - 1:
            print(f"epoch {i:4d}  loss {lv:.6f}")

    report = ev.evaluate(result.model, batches, label="train")
    print()
    print(ev.report_table(report))
    ade = report.mean_ade
    print(f"\ntraining ADE {ade:.4f} m ({'below' if ade < 0.05 else 'ABOVE'} "
          f"the 0.05 m memorization line)")
    return 0 if ade < 0.05 else 1


if __name__ == "__main__":
    sys.exit(main())
