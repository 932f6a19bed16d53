"""Overfit the tiny network on two synthetic 32x32 images and print the loss curve.

    python3 scripts/overfit_tiny.py --lr 1e-3 --iterations 600
"""
import argparse

import numpy as np

from bloodseg import dced_net, label_codec as lc, smear_synth as ss, trainer


def run(lr, iterations, seed):
    cfg = ss.SynthConfig.small()
    entries = [lc.DatasetEntry(s.image, s.label, f"e{i}") for i, s in ((i, ss.generate(cfg, i)) for i in range(2))]
    model = dced_net.build(dced_net.NetworkConfig.preset("tiny", input_size=(32, 32), seed=seed))
    tcfg = trainer.TrainConfig(epochs=iterations // 2, learning_rate=lr, seed=seed)
    model, rows = trainer.train(model, entries, tcfg)
    blocks = np.array([r.loss for r in rows]).reshape(-1, 50).mean(axis=1)
    acc = trainer.evaluate_on(model, entries, evaluated=lc.CLASS_IDS).aggregate.global_accuracy
    return blocks, acc


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--iterations", type=int, default=600)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    args = ap.parse_args()
    for seed in args.seeds:
        blocks, acc = run(args.lr, args.iterations, seed)
        print(f"seed {seed}  lr {args.lr:g}  pixel accuracy {acc:.4f}")
        print("  50-iteration loss means: " + " ".join(f"{b:.4f}" for b in blocks))


if __name__ == "__main__":
    main()
