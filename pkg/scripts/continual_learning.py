"""Resume toy VAT checkpoints with the held-out clips added as unlabelled audio.

Trains the checkpoints first unless --checkpoints already holds seed<N>_vat.pt
files from vat_vs_supervised.py (built on the same fixture seed).
"""

import argparse
import logging
import statistics
import tempfile
from pathlib import Path

from reconvat.experiments import TOY_CONFIG, build_fixture, continual_effect, train_variant


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--iterations", type=int, default=1000, help="budget before and after resuming")
    parser.add_argument("--fixture-seed", type=int, default=0)
    parser.add_argument("--checkpoints", default=None)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    fixture = build_fixture(tempfile.mkdtemp(prefix="reconvat-fixture-"), seed=args.fixture_seed)
    ck_dir = Path(args.checkpoints or tempfile.mkdtemp(prefix="reconvat-ck-"))
    print("seed\tbefore\tafter")
    before, after = [], []
    for seed in args.seeds:
        ck = ck_dir / f"seed{seed}_vat.pt"
        if not ck.exists():
            train_variant(fixture, TOY_CONFIG.replace(seed=seed, use_vat=True), args.iterations).save(ck)
        b, a = continual_effect(fixture, ck, args.iterations)
        before.append(b)
        after.append(a)
        print(f"{seed}\t{b:.4f}\t{a:.4f}")
    print(f"median\t{statistics.median(before):.4f}\t{statistics.median(after):.4f}")


if __name__ == "__main__":
    main()
