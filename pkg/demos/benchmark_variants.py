"""The learned detector against two over-parameterized unfolded networks.

Both benchmarks keep the same layer structure but replace the channel and the
step with free per-layer matrices. One uses dense matrices and the other uses
rank-one factors. The printout lists trainable parameter counts next to test
bit error rates on the same channel and data.

    python3 demos/benchmark_variants.py --quick
"""

import argparse

import numpy as np

from lordnet import (TrainConfig, ber, detect, generate_dataset, sample_rayleigh_channel,
                     snr_params, train_two_stage, train_variant, variant_forward)
from lordnet.unfolded import lordnet_num_parameters, project


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--snr", type=float, default=8.0)
    p.add_argument("--layers", type=int, default=30)
    p.add_argument("--quick", action="store_true")
    args = p.parse_args()
    m, n, L = 32, 8, args.layers
    epochs = 60 if args.quick else 400

    theta = snr_params(sample_rayleigh_channel(m, n, 0), args.snr)
    train = generate_dataset(theta, B=512, seed=1)
    test = generate_dataset(theta, B=2048, seed=2)

    tc = TrainConfig(L=L, epochs_stage1=100, lr_stage1=1e-2, epochs_stage2=50) \
        if args.quick else TrainConfig(L=L)
    net = train_two_stage(train, tc)
    rows = [("lordnet", lordnet_num_parameters(m, n, L),
             ber(detect(test.r_obs, net.theta, net.phi), test.x_true))]
    for kind in ("full", "lowrank"):
        vw, _ = train_variant(train, kind, L=L, epochs=epochs)
        x = variant_forward(np.zeros(n), test.r_obs, vw, test.b)
        rows.append((kind, vw.num_parameters, ber(project(x), test.x_true)))
    print(f"{'network':>8} {'params':>7} {'ber':>7}")
    for name, count, value in rows:
        print(f"{name:>8} {count:7d} {value:7.4f}")


if __name__ == "__main__":
    main()
