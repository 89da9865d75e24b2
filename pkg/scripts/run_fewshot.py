"""Twenty mixture users: encoder probe accuracy and held-out user win rates."""

import argparse
import logging

from ppdlab.config import load_config
from ppdlab.evaluation import binomial_ci
from ppdlab.experiments import read_csv, run_dir_for, run_pipeline


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default="fewshot")
    parser.add_argument("--out", default=None)
    parser.add_argument("--seed", type=int, default=None)
    args = parser.parse_args()
    logging.basicConfig(level=logging.WARNING)

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_overrides({"seed": str(args.seed)})
    run = run_pipeline(cfg, run_dir_for(args.out, cfg))
    print(f"run directory: {run}\n")

    probe = read_csv(run / "probe.csv")
    n_users = int(probe[0]["n_users"])
    print(f"user classification probe ({probe[0]['n_sets']} held-out sets, {n_users} users)")
    for r in probe:
        k = int(r["k"])
        print(f"  top-{k:<3d} {float(r['accuracy']):.3f}   chance {k / n_users:.3f}")

    print("\nwin rate of encoded-user conditioning vs zero conditioning")
    for r in read_csv(run / "heldout.csv"):
        wins, losses = int(r["wins"]), int(r["losses"])
        lo, hi = binomial_ci(wins, wins + losses)
        print(f"  {r['split']:7s} {float(r['rate']):.3f}  95% CI [{lo:.3f}, {hi:.3f}]  "
              f"n={wins + losses}")

    print("\nper-user win rates, embeddings from each user's held-out sets")
    for r in read_csv(run / "winrate.csv"):
        print(f"  {r['split']:7s} {float(r['rate']):.3f}")


if __name__ == "__main__":
    main()
