"""Windowed rotary embedding: exact inside the window, one fixed rotation outside.

Standard RoPE makes a cached key depend on its position, so a codebook
trained on keys at one set of positions fits poorly at others. The windowed
variant keeps keys raw and rotates every query by a single bridge offset for
distant tokens, while pairs closer than the window keep their exact scores.

Run: python3 demos/windowed_rope.py
"""

import numpy as np

from vqkv import RopeConfig, score_matrix
from vqkv.rope import post_pe_keys, rotation_matrix

d, n, window = 32, 256, 16
gen = np.random.default_rng(0)
q, k = gen.standard_normal((n, d)), gen.standard_normal((n, d))

standard = RopeConfig(d, window=window)
windowed = RopeConfig(d, window=window, bridge_offset=2048, mode="windowed")

# Relative-position property: R_i R_j^T = R_{i-j}.
dev = np.abs(rotation_matrix(900, standard) @ rotation_matrix(300, standard).T - rotation_matrix(600, standard)).max()
print(f"max |R_900 R_300^T - R_600| = {dev:.1e}")

s_std = score_matrix(q, k, standard)
s_win = score_matrix(q, k, windowed)
i, j = np.indices((n, n))
local = (i >= j) & (i - j < window)
far = i - j >= window
print(f"local band (i - j < {window}): max |standard - windowed| = {np.abs(s_std[local] - s_win[local]).max():.1e}")
print(f"distant pairs: mean |standard - windowed| = {np.abs(s_std[far] - s_win[far]).mean():.3f}")

# Cached keys: rotated per position for standard RoPE, untouched for the windowed variant.
positions = np.arange(n)
print("standard keys changed by caching:", not np.array_equal(post_pe_keys(k, positions, standard), k))
print("windowed keys changed by caching:", not np.array_equal(post_pe_keys(k, positions, windowed), k))
