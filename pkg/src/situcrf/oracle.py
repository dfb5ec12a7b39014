"""Brute-force reference computations by enumerating every situation.

These loop over ``enumerate_situations`` and add scores one by one, so they
share nothing with the factorized inference code beyond the score table.
Only usable on small lexica.
"""
from __future__ import annotations

import math

import numpy as np

from situcrf.crf import decode_joint, decode_max_marginal, log_partition, log_prob, marginal_log_prob
from situcrf.potentials import ScoreTable
from situcrf.schema import Lexicon, Situation, enumerate_situations


def situation_score(scores: ScoreTable, s: Situation) -> float:
    total = scores.verb_score(s.verb)
    for e, n in s.frame.items():
        total += scores.role_noun_score(s.verb, e, n)
    return float(total)


def _lse(values) -> float:
    values = list(values)
    top = max(values)
    return top + math.log(math.fsum(math.exp(x - top) for x in values))


def brute_log_partition(lex: Lexicon, scores: ScoreTable) -> float:
    return _lse(situation_score(scores, s) for s in enumerate_situations(lex))


def brute_marginal(lex: Lexicon, scores: ScoreTable, verb, partial) -> float:
    """log p(verb, partial) by summing the probability of every completion."""
    logz = brute_log_partition(lex, scores)
    hits = [situation_score(scores, s) for s in enumerate_situations(lex)
            if s.verb == verb and all(s.frame[e] == n for e, n in partial.items())]
    return _lse(hits) - logz


def brute_best(lex: Lexicon, scores: ScoreTable) -> tuple[Situation, float]:
    """Highest-scoring situation; ties go to the first in enumeration order."""
    best, best_score = None, -math.inf
    for s in enumerate_situations(lex):
        x = situation_score(scores, s)
        if x > best_score:
            best, best_score = s, x
    return best, best_score


def brute_verb_marginals(lex: Lexicon, scores: ScoreTable) -> dict:
    logz = brute_log_partition(lex, scores)
    by_verb = {}
    for s in enumerate_situations(lex):
        by_verb.setdefault(s.verb, []).append(situation_score(scores, s))
    return {v: _lse(xs) - logz for v, xs in by_verb.items()}


def random_scores(lex: Lexicon, rng, scale: float = 2.0) -> ScoreTable:
    index = lex.index
    return ScoreTable(rng.normal(0, scale, index.n_verbs), rng.normal(0, scale, index.n_triples), index)


def compare(lex: Lexicon, scores: ScoreTable, rng) -> dict:
    """Largest deviations between factorized inference and enumeration.

    Checks log Z, normalization of ``p(S)``, the marginal of a random
    partial frame, the joint top-1 score and the max-marginal top-1 verb
    log-marginal.
    """
    state = log_partition(scores)
    situations = list(enumerate_situations(lex))
    total = math.fsum(math.exp(log_prob(scores, state, s)) for s in situations)
    target = situations[int(rng.integers(len(situations)))]
    partial = {e: n for e, n in target.frame.items() if rng.random() < 0.5}
    best, best_score = brute_best(lex, scores)
    top = decode_joint(scores, 1)[0]
    vm = brute_verb_marginals(lex, scores)
    mm = decode_max_marginal(scores, state, 1)[0]
    return {
        "log_partition": abs(float(state.log_partition) - brute_log_partition(lex, scores)),
        "normalization": abs(total - 1.0),
        "marginal": abs(marginal_log_prob(scores, state, target.verb, partial)
                        - brute_marginal(lex, scores, target.verb, partial)),
        "decode_joint": abs(top[1] - best_score) + (0.0 if top[0] == best else math.inf),
        "decode_max_marginal": abs(mm[1] - max(vm.values()))
                               + (0.0 if vm[mm[0].verb] == max(vm.values()) else math.inf),
    }


def run_suite(lex: Lexicon, seed: int = 0, n_tables: int = 5) -> dict:
    """Max deviation per check over ``n_tables`` random score tables."""
    rng = np.random.default_rng(seed)
    worst = {}
    for _ in range(n_tables):
        for k, v in compare(lex, random_scores(lex, rng), rng).items():
            worst[k] = max(worst.get(k, 0.0), v)
    return worst
