"""How a policy trained on two alpha timescales splits its attention between them.

Trains on ``twoscale_l1``, simulates a long path, then prints the correlation
table and a coarse sell/hold/buy map over (slow alpha, short-term alpha).
``--quick`` trains on a tenth of the data.
"""

import argparse

import numpy as np

from ddrl.analysis import correlation_matrix, no_trade_heatmap, simulate_trajectory
from ddrl.envsim import lift_static, preset
from ddrl.policy import Architecture
from ddrl.trainer import DESK_HIDDEN, TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--quick", action="store_true")
    args = ap.parse_args()

    env = preset("twoscale_l1")
    cfg = TrainConfig.desk(seed=0, log_every=0)
    if args.quick:
        cfg = TrainConfig(**{**cfg.to_dict(), "total_samples": 50_000, "epochs": 2})
    policy, _ = train(env, Architecture(lift_static(env).input_dim, DESK_HIDDEN), cfg)

    traj = simulate_trajectory(policy, env, 100_000, seed=1, burn_in=1_000)
    corr = correlation_matrix(traj)
    print("        " + "".join(f"{l:>9s}" for l in corr.labels))
    for i, a in enumerate(corr.labels):
        print(f"{a:>8s}" + "".join(f"{v:9.3f}" for v in corr.values[i]))
    # The position should follow the slow alpha far more closely than the fast one.
    print(f"\ncorr(w, slow) {corr['weight', 'alpha_s']:.3f}   corr(w, fast) {corr['weight', 'alpha_f']:.3f}")

    hm = no_trade_heatmap(policy, env, np.linspace(-4, 4, 17), np.linspace(-12, 12, 25))
    glyph = {-1: "-", 0: ".", 1: "+"}
    print("\nrows: short-term alpha (top = +12), columns: slow alpha -4..4; '-' sell, '.' hold, '+' buy")
    for st, row in zip(hm.short_term[::-1], hm.classes[::-1]):
        print(f"{st:6.1f}  " + "".join(glyph[int(c)] for c in row))


if __name__ == "__main__":
    main()
