"""Exact inference for the situation CRF.

Given a verb, the roles of its frame are independent, so

    log Z = logsumexp_v [ phi_v + sum_{e in E(v)} logsumexp_n phi_e(v, e, n) ]

and every quantity below (likelihoods, marginals, posteriors, decoding) is
computed from per-slot log-normalizers in log space.  Functions accept
unbatched tables for the keyed API; the ``batch_*`` helpers operate on
``(B, ...)`` tables for training.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from situcrf.potentials import ScoreTable
from situcrf.schema import LexiconIndex, Situation


class OffSupportError(KeyError):
    """A situation uses a (verb, role, noun) triple outside the candidate sets."""


@dataclass
class InferenceState:
    """Log partition, per-verb log-marginals ``(..., V)`` and per-slot
    log-normalizers ``(..., S)``."""

    log_partition: np.ndarray
    verb_log_marginals: np.ndarray
    slot_log_norm: np.ndarray


@dataclass
class Expectations:
    """Per-key posterior weights.  ``mass`` is the total weight of the target
    side; the log-likelihood gradient is ``target - mass * free``."""

    verb: np.ndarray
    triple: np.ndarray
    mass: float = 1.0


def log1mexp(x):
    """``log(1 - exp(x))`` for ``x <= 0``, accurate over the whole range."""
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(x > -np.log(2.0), np.log(-np.expm1(x)), np.log1p(-np.exp(x)))


def _padded(index: LexiconIndex, triple: np.ndarray, fill: float) -> np.ndarray:
    pad = np.full(triple.shape[:-1] + (1,), fill)
    return np.concatenate([triple, pad], axis=-1)[..., index.pad_index]


def log_partition(scores: ScoreTable) -> InferenceState:
    index = scores.index
    if index.n_slots and index.slot_size.min() == 0:
        s = index.slots[int(np.argmin(index.slot_size))]
        raise ValueError(f"empty candidate set for slot {s}")
    slot_lse = logsumexp(_padded(index, scores.triple, -np.inf), axis=-1)
    joint = scores.verb + slot_lse @ index.slot_verb_matrix
    logz = logsumexp(joint, axis=-1)
    return InferenceState(logz, joint - np.expand_dims(logz, -1), slot_lse)


def _encode(index, s: Situation):
    try:
        return index.encode(s)
    except KeyError as exc:
        raise OffSupportError(f"{s!r} is outside the candidate sets: {exc}") from None


def log_prob(scores: ScoreTable, state: InferenceState, s: Situation) -> float:
    v, ts = _encode(scores.index, s)
    return float(scores.verb[v] + scores.triple[ts].sum() - state.log_partition)


def marginal_log_prob(scores: ScoreTable, state: InferenceState, verb: str, partial) -> float:
    """Log-probability of a partial frame, summing over all completions."""
    try:
        v, obs, unobs = scores.index.encode_partial(verb, partial)
    except KeyError as exc:
        raise OffSupportError(str(exc)) from None
    return float(scores.verb[v] + scores.triple[obs].sum()
                 + state.slot_log_norm[unobs].sum() - state.log_partition)


def _noisy_or(lp: np.ndarray):
    """Stable ``log(1 - prod(1 - p))`` and normalized per-annotation weights.

    ``lp`` has shape ``(..., A)`` with ``-inf`` for padding.
    """
    log1m = log1mexp(lp)                       # log(1 - p_S); 0 for padding
    total = log1m.sum(axis=-1)
    loglik = log1mexp(total)
    a = lp.shape[-1]
    offdiag = ~np.eye(a, dtype=bool)
    excl = np.where(offdiag, log1m[..., None, :], 0.0).sum(axis=-1)
    with np.errstate(invalid="ignore"):
        logw = lp + excl - np.expand_dims(loglik, -1)
    w = np.where(np.isfinite(lp), np.exp(logw), 0.0)
    return loglik, w


def _dedupe(annotations):
    seen, out = set(), []
    for s in annotations:
        if s not in seen:
            seen.add(s)
            out.append(s)
    return out


def multi_annotation_loglik(scores: ScoreTable, state: InferenceState, annotations) -> float:
    """``log(1 - prod_S (1 - p(S)))`` over deduplicated annotations.

    Off-support annotations have probability zero.  Returns ``-inf`` when
    every annotation has probability zero.
    """
    anns = _dedupe(annotations)
    if not anns:
        raise ValueError("need at least one annotation")
    lp = []
    for s in anns:
        try:
            lp.append(log_prob(scores, state, s))
        except OffSupportError:
            lp.append(-np.inf)
    loglik, _ = _noisy_or(np.array(lp))
    return float(loglik)


def free_expectations(scores: ScoreTable, state: InferenceState) -> Expectations:
    """Model marginals: ``p(v)`` per verb, ``p(v) p(n | v, e)`` per triple."""
    index = scores.index
    pv = np.exp(state.verb_log_marginals)
    cond = np.exp(scores.triple - state.slot_log_norm[..., index.triple_slot])
    return Expectations(pv, pv[..., index.triple_verb] * cond, 1.0)


def posterior_expectations(scores: ScoreTable, state: InferenceState, target=None) -> Expectations:
    """Expected indicator of every score key.

    ``target`` selects the distribution:

    * ``None``               -- the model distribution;
    * ``(verb, partial)``    -- clamped to ``verb`` and the observed roles;
    * a ``Situation``        -- clamped to that situation;
    * a list of situations   -- the noisy-or target: the sum of clamped
      indicators weighted by ``w_S = p(S) prod_{S' != S} (1 - p(S')) / (1 - prod(1 - p))``.
    """
    index = scores.index
    if target is None:
        return free_expectations(scores, state)
    if isinstance(target, Situation):
        target = (target.verb, dict(target.frame))
    if isinstance(target, tuple):
        verb, partial = target
        v, obs, unobs = index.encode_partial(verb, partial)
        ev = np.zeros(index.n_verbs)
        ev[v] = 1.0
        et = np.zeros(index.n_triples)
        et[obs] = 1.0
        cond = np.exp(scores.triple - state.slot_log_norm[index.triple_slot])
        for s in unobs:
            sl = slice(index.slot_start[s], index.slot_start[s] + index.slot_size[s])
            et[sl] = cond[sl]
        return Expectations(ev, et, 1.0)
    anns = _dedupe(target)
    lp, codes = [], []
    for s in anns:
        try:
            codes.append(_encode(index, s))
            lp.append(log_prob(scores, state, s))
        except OffSupportError:
            codes.append(None)
            lp.append(-np.inf)
    _, w = _noisy_or(np.array(lp))
    ev = np.zeros(index.n_verbs)
    et = np.zeros(index.n_triples)
    for wi, code in zip(w, codes):
        if code is not None:
            ev[code[0]] += wi
            et[code[1]] += wi
    return Expectations(ev, et, float(w.sum()))


def loglik_score_gradient(scores: ScoreTable, state: InferenceState, target) -> ScoreTable:
    """Gradient of the target log-likelihood with respect to every score."""
    tgt = posterior_expectations(scores, state, target)
    free = free_expectations(scores, state)
    return ScoreTable(tgt.verb - tgt.mass * free.verb,
                      tgt.triple - tgt.mass * free.triple, scores.index)


# ---------------------------------------------------------------------------
# decoding

def _slot_argmax(scores: ScoreTable):
    index = scores.index
    padded = _padded(index, scores.triple, -np.inf)
    arg = np.argmax(padded, axis=-1)                      # first max = lowest id
    best = np.take_along_axis(padded, arg[..., None], axis=-1)[..., 0]
    return index.pad_index[np.arange(index.n_slots), arg], best


def _top_verbs(values: np.ndarray, k: int) -> np.ndarray:
    if k < 1:
        raise ValueError("k must be >= 1")
    order = np.argsort(-values, axis=-1, kind="stable")
    return order[..., :k]


def decode_arrays(scores: ScoreTable, k: int, mode: str = "joint", state=None):
    """Vectorized decoding: ``(top verb indices, verb scores, best triple per slot)``."""
    best_t, best_s = _slot_argmax(scores)
    if mode == "joint":
        ranking = scores.verb + best_s @ scores.index.slot_verb_matrix
    elif mode == "max-marginal":
        state = state if state is not None else log_partition(scores)
        ranking = state.verb_log_marginals
    else:
        raise ValueError(f"unknown decode mode {mode!r}")
    top = _top_verbs(ranking, k)
    return top, np.take_along_axis(ranking, top, axis=-1), best_t


def _frame_for(index: LexiconIndex, v: int, best_t) -> Situation:
    return index.decode(v, best_t[index.verb_slots[v]])


def decode_joint(scores: ScoreTable, k: int):
    """Top-``k`` verbs by ``phi_v + sum_e max_n phi_e``, each with its argmax frame."""
    top, vals, best_t = decode_arrays(scores, k, "joint")
    return [(_frame_for(scores.index, int(v), best_t), float(x)) for v, x in zip(top, vals)]


def decode_max_marginal(scores: ScoreTable, state: InferenceState, k: int):
    """Top-``k`` verbs by log-marginal probability, each with its argmax frame."""
    top, vals, best_t = decode_arrays(scores, k, "max-marginal", state)
    return [(_frame_for(scores.index, int(v), best_t), float(x)) for v, x in zip(top, vals)]


def decode_given_verb(scores: ScoreTable, verb: str) -> Situation:
    best_t, _ = _slot_argmax(scores)
    return _frame_for(scores.index, scores.index.verb_pos[verb], best_t)


# ---------------------------------------------------------------------------
# batched objectives used by training

@dataclass
class SupervisedBatch:
    """Padded encoding of deduplicated annotation sets: verbs ``(B, A)`` and
    triples ``(B, A, R)``; padding points at an extra zero column."""

    verbs: np.ndarray
    triples: np.ndarray
    valid: np.ndarray


@dataclass
class PartialBatch:
    verbs: np.ndarray       # (B,)
    observed: np.ndarray    # (B, R) triple ids, padded with T
    unobserved: np.ndarray  # (B, R) slot ids, padded with S


def encode_supervised(index: LexiconIndex, annotation_sets) -> SupervisedBatch:
    sets = [_dedupe(a) for a in annotation_sets]
    B = len(sets)
    A = max((len(a) for a in sets), default=1)
    R = max((len(index.lexicon.roles(v)) for v in index.verbs), default=1)
    verbs = np.full((B, A), index.n_verbs, dtype=np.intp)
    triples = np.full((B, A, R), index.n_triples, dtype=np.intp)
    valid = np.zeros((B, A), dtype=bool)
    for b, anns in enumerate(sets):
        for a, s in enumerate(anns):
            try:
                v, ts = index.encode(s)
            except KeyError:
                continue
            verbs[b, a] = v
            triples[b, a, : len(ts)] = ts
            valid[b, a] = True
    return SupervisedBatch(verbs, triples, valid)


def encode_partial(index: LexiconIndex, items) -> PartialBatch:
    """Encode ``(verb, partial)`` pairs; raises OffSupportError for unknown triples."""
    B = len(items)
    R = max((len(index.lexicon.roles(v)) for v in index.verbs), default=1)
    verbs = np.zeros(B, dtype=np.intp)
    obs = np.full((B, R), index.n_triples, dtype=np.intp)
    unobs = np.full((B, R), index.n_slots, dtype=np.intp)
    for b, (verb, partial) in enumerate(items):
        try:
            v, o, u = index.encode_partial(verb, partial)
        except KeyError as exc:
            raise OffSupportError(str(exc)) from None
        verbs[b] = v
        obs[b, : len(o)] = o
        unobs[b, : len(u)] = u
    return PartialBatch(verbs, obs, unobs)


def _ext(x):
    return np.concatenate([x, np.zeros(x.shape[:-1] + (1,))], axis=-1)


def batch_supervised(scores: ScoreTable, enc: SupervisedBatch):
    """Per-example noisy-or log-likelihood ``(B,)`` and its score gradient."""
    index = scores.index
    state = log_partition(scores)
    B = scores.verb.shape[0]
    rows = np.arange(B)[:, None]
    vext, text = _ext(scores.verb), _ext(scores.triple)
    lp = (vext[rows, enc.verbs] + text[rows[..., None], enc.triples].sum(-1)
          - state.log_partition[:, None])
    lp = np.where(enc.valid, lp, -np.inf)
    loglik, w = _noisy_or(lp)
    free = free_expectations(scores, state)
    mass = w.sum(-1, keepdims=True)
    tv = np.zeros_like(vext)
    np.add.at(tv, (np.broadcast_to(rows, enc.verbs.shape), enc.verbs), w)
    tt = np.zeros_like(text)
    R = enc.triples.shape[-1]
    np.add.at(tt, (np.broadcast_to(rows[..., None], enc.triples.shape), enc.triples),
              np.repeat(w[..., None], R, axis=-1))
    grad = ScoreTable(tv[:, :-1] - mass * free.verb, tt[:, :-1] - mass * free.triple, index)
    return loglik, grad


def batch_marginal(scores: ScoreTable, enc: PartialBatch):
    """Per-example marginal log-likelihood ``(B,)`` and its score gradient."""
    index = scores.index
    state = log_partition(scores)
    B = scores.verb.shape[0]
    rows = np.arange(B)
    text, sext = _ext(scores.triple), _ext(state.slot_log_norm)
    lp = (scores.verb[rows, enc.verbs] + text[rows[:, None], enc.observed].sum(-1)
          + sext[rows[:, None], enc.unobserved].sum(-1) - state.log_partition)
    free = free_expectations(scores, state)
    tv = np.zeros_like(scores.verb)
    tv[rows, enc.verbs] = 1.0
    tt = np.zeros_like(text)
    np.add.at(tt, (np.broadcast_to(rows[:, None], enc.observed.shape), enc.observed), 1.0)
    slot_w = np.zeros_like(sext)
    np.add.at(slot_w, (np.broadcast_to(rows[:, None], enc.unobserved.shape), enc.unobserved), 1.0)
    cond = np.exp(scores.triple - state.slot_log_norm[:, index.triple_slot])
    target_t = tt[:, :-1] + slot_w[:, index.triple_slot] * cond
    grad = ScoreTable(tv - free.verb, target_t - free.triple, index)
    return lp, grad
