"""Query-aware codebooks minimise attention-score error, not key error.

When queries are anisotropic, key errors along high-variance query directions
cost far more score error than errors elsewhere. Weighting the k-means metric
by the query second moment H (via its Cholesky factor) spends codewords where
they matter.

Run: python3 demos/query_aware_codebook.py
"""

import numpy as np

from vqkv import SeededRng
from vqkv.codebook import TrainConfig, attention_mse, estimate_h, quantization_objective, train_conventional, train_query_aware
from vqkv.synthetic import make_head_model

d, n, size = 32, 4096, 64
model = make_head_model(SeededRng(3), d, clusters=16, center_scale=2.0, key_noise=1.0, query_condition=100.0)
gen = np.random.default_rng(3)
keys = model.keys(gen, n)
train_q, eval_q = model.queries(gen, n), model.queries(gen, n)

h = estimate_h(train_q)
eig = np.linalg.eigvalsh(h)
print(f"query second moment: condition number {eig[-1] / eig[0]:.0f}")

cfg = TrainConfig(codebook_size=size, max_iters=50, rng=SeededRng(1))
conventional = train_conventional(keys, cfg)
query_aware = train_query_aware(keys, h, cfg)

print(f"{'':14s}{'key MSE':>12s}{'score MSE':>12s}")
for name, cb in (("conventional", conventional), ("query-aware", query_aware)):
    key_mse = quantization_objective(keys, cb, h=np.eye(d))
    print(f"{name:14s}{key_mse:12.3f}{attention_mse(eval_q, keys, cb):12.2f}")
print("Lloyd objective per iteration (query-aware):", np.round(query_aware.history[:5], 2), "...")
