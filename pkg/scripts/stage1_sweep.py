"""Train stage 1 on synthetic data for several seeds and report held-out F_beta.

    python3 scripts/stage1_sweep.py --seeds 0 1 2 --epochs 20
"""

import argparse
import tempfile
import time

import numpy as np

from saliency_distill.data import SyntheticSpec, gen_synthetic, load_dataset
from saliency_distill.metrics import evaluate_dataset
from saliency_distill.model import SaliencyNet
from saliency_distill.pipeline import TrainConfig, train_stage1


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--train", type=int, default=200)
    ap.add_argument("--test", type=int, default=50)
    ap.add_argument("--data-seed", type=int, default=1)
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        m = gen_synthetic(SyntheticSpec(count=args.train + args.test, seed=args.data_seed), tmp)
        ds = load_dataset(m, 64)
    train, test = ds[:args.train], ds[args.train:]
    print("seed  before  after  train_after  seconds")
    rows = []
    for seed in args.seeds:
        untrained = SaliencyNet.create(np.random.default_rng(seed), 3)
        before = evaluate_dataset(untrained, test).mean_fbeta
        t0 = time.perf_counter()
        net, _ = train_stage1(TrainConfig(epochs=args.epochs, seed=seed), train)
        after = evaluate_dataset(net, test).mean_fbeta
        rows.append(after)
        print(f"{seed:4d}  {before:6.3f}  {after:5.3f}  {evaluate_dataset(net, train).mean_fbeta:11.3f}"
              f"  {time.perf_counter() - t0:7.1f}", flush=True)
    print(f"mean held-out F_beta {np.mean(rows):.3f}")


if __name__ == "__main__":
    main()
