"""Semantic data augmentation: situation substructures, query phrases, web
sets of partially labeled images, and model-based filtering of those sets.
"""
from __future__ import annotations

import itertools
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from situcrf._io import read_jsonl, write_jsonl
from situcrf.dataset import PartialExample, feature_hash
from situcrf.schema import NULL, Lexicon, Situation, _SLOT_RE, template_slots

MANIFEST_FORMAT = "situcrf.queries"
RETRIEVAL_FORMAT = "situcrf.retrieval"


class AugmentationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Substructure:
    """A verb with a non-empty set of non-null role-noun pairs.

    ``pairs`` keeps frame order for display; equality ignores pair order.
    """

    verb: str
    pairs: tuple

    def __post_init__(self):
        pairs = tuple(tuple(p) for p in self.pairs)
        if not pairs:
            raise AugmentationError("substructure needs at least one role-noun pair")
        roles = [e for e, _ in pairs]
        if len(set(roles)) != len(roles):
            raise AugmentationError(f"duplicate roles in substructure {pairs}")
        if any(n == NULL for _, n in pairs):
            raise AugmentationError("null nouns cannot appear in substructures")
        object.__setattr__(self, "pairs", pairs)

    def key(self):
        return (self.verb, tuple(sorted(self.pairs)))

    def __eq__(self, other):
        if not isinstance(other, Substructure):
            return NotImplemented
        return self.key() == other.key()

    def __hash__(self):
        return hash(self.key())

    @property
    def partial(self) -> dict:
        return dict(self.pairs)

    @classmethod
    def of(cls, verb, partial, lex: Lexicon | None = None) -> "Substructure":
        """Canonical substructure for a partial frame (roles in frame order)."""
        order = lex.roles(verb) if lex is not None else sorted(partial)
        return cls(verb, tuple((e, partial[e]) for e in order if e in partial))


def enumerate_substructures(s: Situation, lex: Lexicon | None = None) -> list[Substructure]:
    """All ``2**r - 1`` non-empty subsets of the non-null role-noun pairs.

    Roles follow frame order (the lexicon's, or the situation's own order);
    subsets are listed by size, then lexicographically by role position.
    """
    roles = lex.roles(s.verb) if lex is not None else list(s.frame)
    pairs = [(e, s.frame[e]) for e in roles if s.frame[e] != NULL]
    out = []
    for size in range(1, len(pairs) + 1):
        for combo in itertools.combinations(pairs, size):
            out.append(Substructure(s.verb, combo))
    return out


def realize_phrase(lex: Lexicon, sub: Substructure) -> str:
    """Fill the verb template with first glosses; drop slots of absent roles."""
    try:
        template = lex.templates[sub.verb]
    except KeyError:
        raise AugmentationError(f"no template for verb {sub.verb!r}") from None
    filled = sub.partial
    slots = dict(template_slots(template))

    def fill(match):
        body = match.group(1)
        role = slots[body]
        if role not in filled:
            return " "
        glosses = lex.nouns.get(filled[role], ())
        if not glosses:
            raise AugmentationError(f"noun {filled[role]!r} has no gloss")
        words = body.split()
        return " " + " ".join(words[:-1] + [glosses[0]]) + " "

    return " ".join(_SLOT_RE.sub(fill, template).split())


# ---------------------------------------------------------------------------
# query selection

@dataclass(frozen=True)
class QueryBands:
    """Frequency bands: ``[common_lo, common_hi]`` always kept; ``[sparse_lo,
    sparse_hi)`` kept only with at most ``sparse_max_nouns`` nouns."""

    common_lo: int = 10
    common_hi: int = 100
    sparse_lo: int = 3
    sparse_hi: int = 10
    sparse_max_nouns: int = 1

    def keep(self, count: int, n_nouns: int) -> bool:
        if self.common_lo <= count <= self.common_hi:
            return True
        return self.sparse_lo <= count < self.sparse_hi and n_nouns <= self.sparse_max_nouns


@dataclass(frozen=True)
class QueryEntry:
    phrase: str
    substructure: Substructure
    train_count: int


def select_queries(freq, lex: Lexicon, bands: QueryBands = QueryBands()) -> list[QueryEntry]:
    """Query manifest: one phrase per substructure that passes the bands.

    Phrases are unique; on a collision the more frequent substructure wins.
    """
    by_phrase = {}
    for sub in sorted(freq.substructure_counts, key=lambda s: (s.verb, s.pairs)):
        count = freq.substructure_counts[sub]
        if not bands.keep(count, len(sub.pairs)):
            continue
        phrase = realize_phrase(lex, sub)
        prev = by_phrase.get(phrase)
        if prev is None or count > prev.train_count:
            by_phrase[phrase] = QueryEntry(phrase, sub, count)
    return [by_phrase[p] for p in sorted(by_phrase)]


def save_manifest(entries, path) -> None:
    write_jsonl(path, MANIFEST_FORMAT, (
        {"phrase": q.phrase, "verb": q.substructure.verb,
         "pairs": [list(p) for p in q.substructure.pairs], "train_count": q.train_count}
        for q in entries))


def load_manifest(path) -> list[QueryEntry]:
    _, recs = read_jsonl(path, MANIFEST_FORMAT)
    return [QueryEntry(r["phrase"], Substructure(r["verb"], tuple(map(tuple, r["pairs"]))),
                       int(r["train_count"])) for _, r in recs]


# ---------------------------------------------------------------------------
# retrieval results and web sets

@dataclass(frozen=True, eq=False)
class RetrievalRecord:
    phrase: str
    image_id: str
    features: np.ndarray


def save_retrieval(records, path) -> None:
    write_jsonl(path, RETRIEVAL_FORMAT, (
        {"phrase": r.phrase, "image_id": r.image_id, "features": [float(x) for x in r.features]}
        for r in records))


def load_retrieval(path) -> list[RetrievalRecord]:
    _, recs = read_jsonl(path, RETRIEVAL_FORMAT)
    return [RetrievalRecord(r["phrase"], str(r["image_id"]), np.asarray(r["features"], dtype=float))
            for _, r in recs]


def ingest_web_set(manifest, retrieval, train, cap: int = 200) -> list[PartialExample]:
    """Label each retrieved image with the substructure of its query phrase.

    Images whose id or feature hash matches a training image are dropped,
    and at most ``cap`` images are kept per phrase, in file order.
    """
    by_phrase = {q.phrase: q for q in manifest}
    train_ids = {ex.image_id for ex in train}
    train_hashes = {feature_hash(ex.features) for ex in train}
    kept = defaultdict(int)
    out = []
    for rec in retrieval:
        q = by_phrase.get(rec.phrase)
        if q is None:
            raise AugmentationError(f"retrieval record {rec.image_id!r} has unknown phrase {rec.phrase!r}")
        if rec.image_id in train_ids or feature_hash(rec.features) in train_hashes:
            continue
        if kept[rec.phrase] >= cap:
            continue
        kept[rec.phrase] += 1
        out.append(PartialExample(rec.image_id, np.asarray(rec.features, dtype=float),
                                  q.substructure.verb, q.substructure.partial, rec.phrase))
    return out


def simulate_retrieval(world, manifest, per_query: int, noise_rate: float, seed: int):
    """Synthetic stand-in for web image search.

    A clean hit depicts the query's verb and nouns, with the remaining roles
    filled from the verb's noun distribution.  With probability
    ``noise_rate`` the hit shows the query nouns under a different verb.
    """
    rng = np.random.default_rng([seed, 3])
    verbs = list(world.lexicon.verbs)
    out = []
    for qi, q in enumerate(manifest):
        sub = q.substructure
        for j in range(per_query):
            verb = sub.verb
            if len(verbs) > 1 and rng.random() < noise_rate:
                others = [v for v in verbs if v != sub.verb]
                verb = others[int(rng.integers(len(others)))]
            frame = {e: sub.partial.get(e) or world.sample_noun(verb, e, rng) for e in world.roles}
            g = world.features(verb, frame, rng)
            out.append(RetrievalRecord(q.phrase, f"web{qi:05d}_{j:03d}", g))
    return out


# ---------------------------------------------------------------------------
# self-training

def marginal_scores(model, web) -> np.ndarray:
    """Normalized marginal log-likelihood of every web image under ``model``."""
    from situcrf.crf import batch_marginal, encode_partial

    if not web:
        return np.zeros(0)
    G = np.stack([w.features for w in web])
    enc = encode_partial(model.index, [(w.verb, w.partial) for w in web])
    lp, _ = batch_marginal(model.scores(G), enc)
    return lp


def self_train_filter(web, model, k: int, freq, threshold: int = 10) -> list[PartialExample]:
    """Keep the ``k`` best images (by marginal likelihood) of every rare group.

    Groups are the distinct (verb, partial frame) labels; a group is rare
    when its substructure occurs at most ``threshold`` times in training.
    Other groups, and items with an empty partial frame, pass through.
    Input order is preserved.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    web = list(web)
    groups = defaultdict(list)
    for i, w in enumerate(web):
        groups[(w.verb, tuple(sorted(w.partial.items())))].append(i)
    rare_groups = {key: idx for key, idx in groups.items()
                   if key[1] and freq.substructure_counts.get(Substructure(key[0], key[1]), 0) <= threshold
                   and len(idx) > k}
    keep = np.ones(len(web), dtype=bool)
    if rare_groups:
        members = sorted(i for idx in rare_groups.values() for i in idx)
        lp = dict(zip(members, marginal_scores(model, [web[i] for i in members])))
        for idx in rare_groups.values():
            ranked = sorted(idx, key=lambda i: (-lp[i], web[i].image_id))
            keep[ranked[k:]] = False
    return [w for w, kk in zip(web, keep) if kk]


def self_train_loop(web, train, dev, model, freq, *, pretrain_cfg, train_cfg,
                    k_schedule=(10, 20), init=None, decode=None, threshold: int = 10):
    """Alternate filtering, marginal pretraining and supervised training.

    ``model`` is an already trained supervised model; it ranks the web set
    in the first round.  ``init`` returns fresh parameters for each round's
    pretraining.  Stops when the dev mean stops improving and returns the
    best ``(TrainState, dev_mean)`` seen, the input model included.
    """
    from situcrf.evaluation import dev_mean
    from situcrf.training import TrainState, pretrain_marginal, train_supervised

    best_model = model
    best = dev_mean(model, dev, freq, decode)
    best_state = TrainState.fresh(model, train_cfg)
    best_state.best_dev_metric = best
    if not web:
        return best_state, best
    for k in k_schedule:
        subset = self_train_filter(web, best_model, k, freq, threshold)
        start = init() if init is not None else best_model.copy()
        pre = pretrain_marginal(subset, start, pretrain_cfg)
        state, _ = train_supervised(train, dev, pre.params, train_cfg, freq=freq, decode=decode)
        score = dev_mean(state.params, dev, freq, decode)
        if score <= best:
            break
        best, best_model, best_state = score, state.params, state
    return best_state, best
