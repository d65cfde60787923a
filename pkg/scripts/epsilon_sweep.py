"""Held-out note F1 of toy U-net-R VAT runs over a range of epsilon."""

import argparse
import logging
import statistics
import tempfile

from reconvat.experiments import TOY_CONFIG, build_fixture, train_variant
from reconvat.training import mean_note_f1


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--epsilons", type=float, nargs="+", default=[1.0, 1.5, 2.0])
    parser.add_argument("--seeds", type=int, nargs="+", default=[0])
    parser.add_argument("--iterations", type=int, default=1000)
    parser.add_argument("--fixture-seed", type=int, default=0)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    fixture = build_fixture(tempfile.mkdtemp(prefix="reconvat-fixture-"), seed=args.fixture_seed)
    print("epsilon\t" + "\t".join(f"seed{s}" for s in args.seeds) + "\tmedian")
    for eps in args.epsilons:
        scores = []
        for seed in args.seeds:
            cfg = TOY_CONFIG.replace(epsilon=eps, seed=seed, use_vat=True)
            scores.append(mean_note_f1(train_variant(fixture, cfg, args.iterations).transcriber, fixture.test, cfg))
        print(f"{eps:g}\t" + "\t".join(f"{s:.4f}" for s in scores) + f"\t{statistics.median(scores):.4f}")


if __name__ == "__main__":
    main()
