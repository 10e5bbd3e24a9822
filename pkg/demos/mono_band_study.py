"""Train a policy on the mono-scale L1 market and set its no-trade band beside the DP optimum.

Run with ``python demos/mono_band_study.py`` (about six minutes on one core)
or pass ``--quick`` for a rough one-minute version.
"""

import argparse

import numpy as np

from ddrl.analysis import extract_bands
from ddrl.envsim import preset
from ddrl.oracle import GridSpec, compare_policy, dp_solve
from ddrl.policy import Architecture
from ddrl.trainer import DESK_HIDDEN, TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--quick", action="store_true")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    env = preset("mono_l1")
    cfg = TrainConfig.desk(seed=args.seed, log_every=0)
    if args.quick:
        cfg = TrainConfig(**{**cfg.to_dict(), "total_samples": 100_000, "epochs": 2})

    # The oracle: value iteration on an (alpha, last weight) grid.
    dp = dp_solve(env, GridSpec(), horizon=cfg.horizon)

    # The learner: an MLP trained by differentiating through T-step rollouts.
    policy, curve = train(env, Architecture(2, DESK_HIDDEN), cfg)
    cr = np.asarray(curve.mean_cr)
    print(f"mean CR over first / last 10 batches: {cr[:10].mean():.3f} / {cr[-10:].mean():.3f}")

    res = compare_policy(policy, dp)
    print(f"steady-state reward  policy {res.reward_policy:.4f}  DP {res.reward_dp:.4f}  ratio {res.ratio:.4f}")
    print(f"action RMS vs DP on the probe region: {res.action_rms:.4f}")

    # Bands are expressed relative to the last weight: trade up once alpha - lw
    # exceeds `upper`, trade down below `lower`.
    lws = np.arange(-4.0, 4.01, 1.0)
    mine = extract_bands(policy, env, lws, dp.alpha_grid)
    ref = extract_bands(dp, env, lws, dp.alpha_grid)
    print("\n   lw   upper(NN)  upper(DP)  lower(NN)  lower(DP)")
    for row in zip(lws, mine.upper, ref.upper, mine.lower, ref.lower):
        print("{:5.1f}  {:9.3f}  {:9.3f}  {:9.3f}  {:9.3f}".format(*row))


if __name__ == "__main__":
    main()
