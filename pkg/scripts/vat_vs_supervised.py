"""Compare U-net-R with and without VAT on a synthetic fixture (held-out note F1)."""

import argparse
import logging
import tempfile

from reconvat.experiments import TOY_CONFIG, build_fixture, compare_vat


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--iterations", type=int, default=1000)
    parser.add_argument("--epsilon", type=float, default=TOY_CONFIG.epsilon)
    parser.add_argument("--fixture-seed", type=int, default=0)
    parser.add_argument("--workdir", default=None)
    parser.add_argument("--checkpoints", default=None, help="directory to keep trained checkpoints")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    workdir = args.workdir or tempfile.mkdtemp(prefix="reconvat-fixture-")
    fixture = build_fixture(workdir, seed=args.fixture_seed)
    result = compare_vat(fixture, args.seeds, args.iterations, TOY_CONFIG.replace(epsilon=args.epsilon),
                         checkpoint_dir=args.checkpoints)
    print("seed\tsupervised\tvat")
    for seed, a, b in zip(args.seeds, result.baseline, result.treatment):
        print(f"{seed}\t{a:.4f}\t{b:.4f}")
    print(f"median\t{result.baseline_median:.4f}\t{result.treatment_median:.4f}")


if __name__ == "__main__":
    main()
