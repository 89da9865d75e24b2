"""Three one-hot users: alignment win rates, per-condition scores and interpolation trends."""

import argparse
import logging

from ppdlab.config import load_config
from ppdlab.evaluation import binomial_ci
from ppdlab.experiments import read_csv, run_dir_for, run_pipeline


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default="multireward")
    parser.add_argument("--out", default=None)
    parser.add_argument("--seed", type=int, default=None)
    args = parser.parse_args()
    logging.basicConfig(level=logging.WARNING)

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_overrides({"seed": str(args.seed)})
    run = run_pipeline(cfg, run_dir_for(args.out, cfg))
    print(f"run directory: {run}\n")

    print("win rate of e_i conditioning vs zero conditioning, judged by user i")
    for r in read_csv(run / "winrate.csv"):
        wins, losses = int(r["wins"]), int(r["losses"])
        lo, hi = binomial_ci(wins, wins + losses)
        print(f"  {r['split']:8s} {float(r['rate']):.3f}  95% CI [{lo:.3f}, {hi:.3f}]")

    print("\nmean reward per condition")
    scores = read_csv(run / "scores.csv")
    families = list(dict.fromkeys(r["family"] for r in scores))
    print("  " + "condition".ljust(10) + "".join(f.rjust(12) for f in families))
    for cond in dict.fromkeys(r["condition"] for r in scores):
        vals = {r["family"]: float(r["mean"]) for r in scores if r["condition"] == cond}
        print("  " + cond.ljust(10) + "".join(f"{vals[f]:12.4f}" for f in families))

    print("\nSpearman correlation of family weight vs family score along each edge")
    for r in read_csv(run / "sweep_spearman.csv"):
        print(f"  e{r['from']} -> e{r['to']}  {r['family']:10s} {float(r['spearman']):+.3f}")


if __name__ == "__main__":
    main()
