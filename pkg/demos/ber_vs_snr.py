"""Bit error rate against SNR for the learned detector and the coherent baselines.

A single 32x8 Rayleigh channel is drawn and held fixed. At each SNR the
learned detector is retrained from scratch on B labelled pilots, without ever
seeing the channel. The nML detector gets the true channel and noise level.
Both are scored on the same held-out symbols.

    python3 demos/ber_vs_snr.py --quick
"""

import argparse

from lordnet import SweepConfig, TrainConfig, sweep_snr
from lordnet.harness import LordNetDetector, NmlDetector


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--snr", default="0,2,4,6,8,10", help="comma separated SNRs in dB")
    p.add_argument("--trials", type=int, default=2048)
    p.add_argument("--quick", action="store_true", help="shorter training for a fast look")
    args = p.parse_args()
    snrs = [float(s) for s in args.snr.split(",")]
    tc = TrainConfig(epochs_stage1=100, lr_stage1=1e-2, epochs_stage2=50) if args.quick \
        else TrainConfig()
    cfg = SweepConfig(m=32, n=8, train_size=512, seed=0)

    reports = {"lordnet": sweep_snr(LordNetDetector(tc), snrs, args.trials, cfg),
               "nml (true channel)": sweep_snr(NmlDetector(), snrs, args.trials, cfg)}
    print(f"{'snr_db':>7} " + " ".join(f"{name:>20}" for name in reports))
    for i, snr in enumerate(snrs):
        print(f"{snr:7g} " + " ".join(f"{rep.bers[i]:20.4g}" for rep in reports.values()))


if __name__ == "__main__":
    main()
