"""Train the bundled reference toy model on the calibration corpus.

Plain Adam on the hand-derived gradients; deterministic for a fixed seed.
The result is stored as float32 (widened to float64 on load).
"""

import argparse
import time

import numpy as np

from fang.calib import TRAIN_CORPUS, load_corpus
from fang.model import Checkpoint, ModelConfig, init_model, loss_and_param_grads
from fang.pipeline import REFERENCE_CHECKPOINT


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=3000)
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--seq-len", type=int, default=128)
    ap.add_argument("--lr", type=float, default=3e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=str(REFERENCE_CHECKPOINT))
    args = ap.parse_args()

    cfg = ModelConfig(n_layers=4, d_model=64, n_heads=4, d_head=16, n_ffn=192, ffn_kind="gated", seed=args.seed)
    ckpt = init_model(cfg)
    params = {k: v.copy() for k, v in ckpt.params.items()}
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v = {k: np.zeros_like(p) for k, p in params.items()}
    corpus = load_corpus(TRAIN_CORPUS)
    rng = np.random.default_rng(args.seed + 1)
    b1, b2, eps = 0.9, 0.99, 1e-8
    t0 = time.time()
    for step in range(1, args.steps + 1):
        lr = args.lr * min(1.0, step / 100) * 0.5 * (1 + np.cos(np.pi * step / args.steps))
        starts = rng.integers(0, corpus.size - args.seq_len, size=args.batch)
        batch = np.stack([corpus[s : s + args.seq_len] for s in starts])
        loss, grads = loss_and_param_grads(Checkpoint(cfg, dict(params)), batch)
        for k, g in grads.items():
            m[k] = b1 * m[k] + (1 - b1) * g
            v[k] = b2 * v[k] + (1 - b2) * g * g
            mh = m[k] / (1 - b1**step)
            vh = v[k] / (1 - b2**step)
            params[k] = params[k] - lr * mh / (np.sqrt(vh) + eps)
        if step % 100 == 0 or step == 1:
            print(f"step {step:5d} loss {loss:.4f} ppl {np.exp(loss):.2f} ({time.time() - t0:.0f}s)", flush=True)
    Checkpoint(cfg, params).save(args.out, dtype=np.float32)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
