"""Exact inference on the shipped three-verb lexicon.

Scores are random here; the point is that the factorized log-partition,
marginals and decoders agree with brute-force enumeration over every
situation the lexicon allows.
"""
import numpy as np

from situcrf.cli import tiny_lexicon_path
from situcrf.crf import decode_joint, decode_max_marginal, log_partition, marginal_log_prob
from situcrf.oracle import brute_log_partition, brute_marginal, random_scores
from situcrf.schema import load_lexicon, situation_space_size

lex = load_lexicon(tiny_lexicon_path())
per_verb, total = situation_space_size(lex)
print("situations per verb:", per_verb, "total:", total)

rng = np.random.default_rng(0)
scores = random_scores(lex, rng)
state = log_partition(scores)
print(f"log Z factorized  {float(state.log_partition):.12f}")
print(f"log Z enumerated  {brute_log_partition(lex, scores):.12f}")

# probability that someone is carrying a baby, whatever else is in the frame
partial = {"item": "baby"}
print(f"log p(carrying, item=baby)  {marginal_log_prob(scores, state, 'carrying', partial):.12f}"
      f"  brute force {brute_marginal(lex, scores, 'carrying', partial):.12f}")

# joint decoding ranks whole situations; max-marginal ranks verbs by p(v)
for name, ranked in (("joint", decode_joint(scores, 3)),
                     ("max-marginal", decode_max_marginal(scores, state, 3))):
    print(name)
    for s, value in ranked:
        print(f"  {value:8.3f}  {s.verb:<9} {dict(s.frame)}")
