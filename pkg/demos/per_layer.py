"""Where along the unfolded network do the errors disappear?

Stage 1 learns a surrogate channel for a fixed step size. Stage 2 then learns
per-layer step sizes on top of it. Printing the bit error rate after every
layer, before and after stage 2, shows how the learned steps front-load the
progress.

    python3 demos/per_layer.py --quick
"""

import argparse

from lordnet import (TrainConfig, generate_dataset, per_layer_ber, sample_rayleigh_channel,
                     snr_params, train_stage1, train_stage2)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--snr", type=float, default=8.0)
    p.add_argument("--quick", action="store_true")
    args = p.parse_args()
    tc = TrainConfig(epochs_stage1=100, lr_stage1=1e-2, epochs_stage2=100, lr_stage2=1e-3) \
        if args.quick else TrainConfig()

    theta = snr_params(sample_rayleigh_channel(32, 8, 0), args.snr)
    train = generate_dataset(theta, B=512, seed=1)
    test = generate_dataset(theta, B=2048, seed=2)

    s1 = train_stage1(train, tc)
    s2 = train_stage2(train, s1.theta, tc)
    before = per_layer_ber(s1.theta, s1.phi, test).bers
    after = per_layer_ber(s2.theta, s2.phi, test).bers
    print(f"{'layer':>5} {'stage 1':>8} {'stage 2':>8}")
    for i, (a, b) in enumerate(zip(before, after)):
        print(f"{i:5d} {a:8.4f} {b:8.4f}")


if __name__ == "__main__":
    main()
