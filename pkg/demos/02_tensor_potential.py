"""The tensor composition potential, computed two ways.

The naive form builds the per-image verb-role vector and contracts the
third-order weights for one triple at a time.  The fast form reshapes the
same contraction into a few matrix products over a whole batch.
"""
import time

import numpy as np

from situcrf.cli import tiny_lexicon_path
from situcrf.potentials import init_model, score_tensor_fast, score_tensor_naive
from situcrf.schema import load_lexicon

lex = load_lexicon(tiny_lexicon_path())
idx = lex.index
model = init_model(idx, "tensor", p=64, m=16, o=16, seed=0)
rng = np.random.default_rng(0)
g = rng.normal(size=(256, 64))

t0 = time.perf_counter()
fast = score_tensor_fast(model.tensor, idx, g)
t_fast = time.perf_counter() - t0

t0 = time.perf_counter()
naive = np.array([[score_tensor_naive(model.tensor, idx, row, *triple) for triple in idx.triples]
                  for row in g[:8]])
t_naive = (time.perf_counter() - t0) * 256 / 8

err = np.abs(naive - fast.triple[:8]).max() / np.abs(naive).max()
print(f"{idx.n_triples} triples x 256 images")
print(f"fast {t_fast * 1e3:.1f} ms, naive (extrapolated) {t_naive * 1e3:.0f} ms, max rel err {err:.1e}")
