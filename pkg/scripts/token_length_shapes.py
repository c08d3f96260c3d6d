"""Print mask token shapes for each supported token length over a few mask sizes.

    python3 scripts/token_length_shapes.py [--dim 64] [--seed 0]
"""

import argparse
import time

import numpy as np

from ureca_forge.encoder import SplitConfig, encode_mask, seeded_weights, split_mask
from ureca_forge.masks import BinaryMask

SIZES = [(300, 200), (448, 448), (1000, 600), (2048, 1536), (4000, 300)]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    cfg = SplitConfig()
    rng = np.random.default_rng(args.seed)
    print(f"{'mask WxH':>11}  {'grid':>5}  {'tiles':>5}  {'L':>3}  {'tokens':>12}  {'ms':>6}")
    for w, h in SIZES:
        mask = BinaryMask(rng.random((h, w)) < 0.3)
        grid = split_mask(mask, cfg)
        for token_len in (4, 8, 16):
            weights = seeded_weights(args.seed, args.dim, token_len)
            t0 = time.perf_counter()
            tokens = encode_mask(mask, weights, cfg)
            ms = 1000 * (time.perf_counter() - t0)
            assert tokens.shape == (grid.n_tiles * token_len, args.dim)
            shape = f"{tokens.shape[0]}x{tokens.shape[1]}"
            print(f"{w:>5}x{h:<5}  {grid.rows}x{grid.cols:<3}  {grid.n_tiles:>5}  {token_len:>3}  {shape:>12}  {ms:>6.0f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
