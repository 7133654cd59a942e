"""Baseline U-Net against U-Net + S-OCAE prior on synthetic trees.

The shape weight is chosen on a separate tuning dataset, then both variants
are cross-validated on one dataset per seed. With the default settings this
takes about 25 minutes on one CPU core; ``--seeds 0`` gives a quick look.
"""

import argparse
from dataclasses import replace

from vesselprior.experiments import TrendSettings, trend_check


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, nargs="+", default=list(TrendSettings.seeds))
    args = parser.parse_args()

    settings = replace(TrendSettings(), seeds=tuple(args.seeds))
    result = trend_check(settings, progress=print)
    print()
    print(result.table())


if __name__ == "__main__":
    main()
