"""How many pilots does the learned detector need?

The channel and the test set stay fixed while the training set grows. The
smaller training sets are prefixes of the larger ones, so each step up only
adds samples. Standard errors are printed so the trend can be read against
Monte Carlo noise.

    python3 demos/training_size.py --quick
"""

import argparse

from lordnet import SweepConfig, TrainConfig, sweep_train_size
from lordnet.harness import LordNetDetector


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", default="32,64,128,256,512,1024,2048")
    p.add_argument("--snr", type=float, default=8.0)
    p.add_argument("--trials", type=int, default=2048)
    p.add_argument("--quick", action="store_true")
    args = p.parse_args()
    tc = TrainConfig(epochs_stage1=100, lr_stage1=1e-2, epochs_stage2=50) if args.quick \
        else TrainConfig()
    rep = sweep_train_size(LordNetDetector(tc), [int(s) for s in args.sizes.split(",")],
                           args.snr, args.trials, SweepConfig(m=32, n=8, seed=0))
    print(f"{'B':>6} {'ber':>8} {'std err':>8}")
    for pt in rep.points:
        print(f"{pt.axis_value:6g} {pt.ber:8.4f} {pt.std_error:8.4f}")


if __name__ == "__main__":
    main()
