"""Annotated examples, frequency statistics and a synthetic benchmark generator."""
from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from situcrf._io import read_jsonl, write_jsonl
from situcrf.schema import (
    NULL, Lexicon, Situation, _dump_noun, _parse_noun, validate_situation,
)

DATASET_FORMAT = "situcrf.dataset"
PARTIAL_FORMAT = "situcrf.partial"


class DataError(ValueError):
    """A data file is malformed or inconsistent with the lexicon."""


@dataclass(frozen=True, eq=False)
class Example:
    """An image (as a feature vector) with one or more full annotations."""

    image_id: str
    features: np.ndarray
    annotations: tuple

    def __post_init__(self):
        if not self.annotations:
            raise DataError(f"{self.image_id}: example needs at least one annotation")
        object.__setattr__(self, "annotations", tuple(self.annotations))


@dataclass(frozen=True, eq=False)
class PartialExample:
    """A weakly labeled image: verb plus a partial realized frame."""

    image_id: str
    features: np.ndarray
    verb: str
    partial: dict
    source_phrase: str = ""


@dataclass
class FrequencyTable:
    """Training-split tallies of role-noun triples and substructures."""

    counts: Counter = field(default_factory=Counter)
    substructure_counts: Counter = field(default_factory=Counter)

    def count(self, verb, role, noun) -> int:
        return self.counts.get((verb, role, noun), 0)

    def least_frequent(self, ex: Example) -> int:
        """Count of the rarest (verb, role, noun) triple over all annotations."""
        return min(self.count(s.verb, e, n) for s in ex.annotations for e, n in s.frame.items())


def feature_hash(features) -> str:
    arr = np.ascontiguousarray(features, dtype="<f8")
    return hashlib.sha256(arr.tobytes()).hexdigest()


def _frame_from_json(d):
    return {e: _parse_noun(n) for e, n in d.items()}


def _frame_to_json(frame):
    return {e: _dump_noun(n) for e, n in frame.items()}


def _check_features(image_id, feats, p):
    if feats.ndim != 1:
        raise DataError(f"{image_id}: features must be a flat list")
    if p is not None and feats.shape[0] != p:
        raise DataError(f"{image_id}: feature length {feats.shape[0]} != {p}")
    if not np.all(np.isfinite(feats)):
        raise DataError(f"{image_id}: non-finite feature value")


def load_dataset(path, lex: Lexicon) -> list[Example]:
    """Read fully annotated examples, validating every annotation against ``lex``."""
    try:
        _, records = read_jsonl(path, DATASET_FORMAT)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    out, p = [], None
    for lineno, rec in records:
        try:
            image_id = str(rec["image_id"])
            feats = np.asarray(rec["features"], dtype=np.float64)
            anns = [Situation(a["verb"], _frame_from_json(a["frame"])) for a in rec["annotations"]]
        except (KeyError, TypeError) as exc:
            raise DataError(f"line {lineno}: malformed record ({exc})") from exc
        _check_features(image_id, feats, p)
        p = feats.shape[0]
        for s in anns:
            bad = validate_situation(lex, s)
            if bad:
                raise DataError(f"{image_id}: invalid situation: {'; '.join(bad)}")
        out.append(Example(image_id, feats, tuple(anns)))
    return out


def save_dataset(examples, path) -> None:
    write_jsonl(path, DATASET_FORMAT, (
        {"image_id": ex.image_id,
         "features": [float(x) for x in ex.features],
         "annotations": [{"verb": s.verb, "frame": _frame_to_json(s.frame)}
                         for s in ex.annotations]}
        for ex in examples))


def load_partial_dataset(path, lex: Lexicon) -> list[PartialExample]:
    try:
        _, records = read_jsonl(path, PARTIAL_FORMAT)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    out, p = [], None
    for lineno, rec in records:
        try:
            image_id = str(rec["image_id"])
            feats = np.asarray(rec["features"], dtype=np.float64)
            verb = rec["verb"]
            partial = _frame_from_json(rec["partial"])
        except (KeyError, TypeError) as exc:
            raise DataError(f"line {lineno}: malformed record ({exc})") from exc
        _check_features(image_id, feats, p)
        p = feats.shape[0]
        if verb not in lex.verb_to_frame:
            raise DataError(f"{image_id}: unknown verb: {verb}")
        extra = [e for e in partial if e not in lex.roles(verb)]
        if extra:
            raise DataError(f"{image_id}: roles not in frame of {verb}: {', '.join(extra)}")
        out.append(PartialExample(image_id, feats, verb, partial, rec.get("source_phrase", "")))
    return out


def save_partial_dataset(examples, path) -> None:
    write_jsonl(path, PARTIAL_FORMAT, (
        {"image_id": ex.image_id,
         "features": [float(x) for x in ex.features],
         "verb": ex.verb,
         "partial": _frame_to_json(ex.partial),
         "source_phrase": ex.source_phrase}
        for ex in examples))


def count_frequencies(train) -> FrequencyTable:
    """Tally role-noun triples and substructures over every (example, annotation)."""
    from situcrf.augmentation import enumerate_substructures

    freq = FrequencyTable()
    for ex in train:
        for s in ex.annotations:
            for e, n in s.frame.items():
                freq.counts[(s.verb, e, n)] += 1
            freq.substructure_counts.update(enumerate_substructures(s))
    return freq


def rare_mask(dataset, freq: FrequencyTable, threshold: int = 10) -> np.ndarray:
    """Flag examples whose least-frequent annotation triple has count <= threshold."""
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    return np.array([freq.least_frequent(ex) <= threshold for ex in dataset], dtype=bool)


def observed_candidates(lex: Lexicon, train) -> Lexicon:
    """Lexicon whose candidate lists are the nouns seen per (verb, role) in ``train``."""
    cands = {(v, e): set() for v in lex.verbs for e in lex.roles(v)}
    for ex in train:
        for s in ex.annotations:
            for e, n in s.frame.items():
                cands[(s.verb, e)].add(n)
    return lex.with_candidates(cands)


# ---------------------------------------------------------------------------
# synthetic benchmark

_ROLE_NAMES = ("agent", "item", "place", "tool", "source", "destination")
_ROLE_PREP = {"agent": "", "item": "", "place": "in", "tool": "with",
              "source": "from", "destination": "to"}


@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the synthetic situation benchmark.

    Features are ``verb_scale * a_v + sum_e view_e(z_n) + noise``: verb
    prototypes and role views of a shared low-dimensional noun latent live
    in orthogonal subspaces, and ``specificity`` adds a per-(verb, role, noun)
    appearance term that only a triple-specific regression can capture.
    Within every (verb, role) the candidate nouns are drawn with
    probability proportional to ``rank ** -exponent``.
    """

    n_verbs: int = 10
    n_roles: int = 2
    n_nouns: int = 50
    n_features: int = 64
    n_candidates: int = 20
    exponent: float = 1.5
    noise: float = 0.5
    n_train: int = 2000
    n_dev: int = 500
    latent_dim: int = 16
    verb_scale: float = 1.0
    specificity: float = 0.25
    n_annotations: int = 1
    annotator_noise: float = 0.0

    def check(self):
        if self.n_verbs < 1 or self.n_roles < 1 or self.n_nouns < 1:
            raise ValueError("infeasible config: counts must be positive")
        if self.n_candidates > self.n_nouns:
            raise ValueError("infeasible config: more candidates than nouns")
        if self.n_verbs + self.latent_dim > self.n_features:
            raise ValueError("infeasible config: n_verbs + latent_dim exceeds n_features")
        if self.n_roles > len(_ROLE_NAMES):
            raise ValueError(f"infeasible config: at most {len(_ROLE_NAMES)} roles")
        if self.n_annotations < 1:
            raise ValueError("infeasible config: n_annotations < 1")


@dataclass
class SynthWorld:
    """Generator state, kept so that web images can be drawn from the same world."""

    cfg: SynthConfig
    lexicon: Lexicon
    verb_protos: np.ndarray        # (V, p)
    noun_latents: np.ndarray       # (N, q)
    role_views: np.ndarray         # (R, p, q)
    specific: dict                 # (v, e, n) -> (p,) lazily drawn
    cand_nouns: dict               # (v, e) -> array of noun indices, by popularity
    cand_probs: dict               # (v, e) -> probabilities
    seed: int

    def appearance(self, verb, role, noun) -> np.ndarray:
        vi = self.lexicon.verbs.index(verb)
        ri = self.roles.index(role)
        ni = self.noun_ids.index(noun)
        vec = self.role_views[ri] @ self.noun_latents[ni]
        return vec + self.cfg.specificity * self.specific[(vi, ri, ni)]

    @property
    def roles(self):
        return list(_ROLE_NAMES[: self.cfg.n_roles])

    @property
    def noun_ids(self):
        return [_noun_id(i) for i in range(self.cfg.n_nouns)]

    def features(self, verb, frame, rng) -> np.ndarray:
        vi = self.lexicon.verbs.index(verb)
        g = self.cfg.verb_scale * self.verb_protos[vi]
        for e, n in frame.items():
            if n != NULL:
                g = g + self.appearance(verb, e, n)
        noise = rng.standard_normal(self.cfg.n_features) * (self.cfg.noise / np.sqrt(self.cfg.n_features))
        return g + noise

    def sample_noun(self, verb, role, rng) -> str:
        key = (verb, role)
        i = rng.choice(len(self.cand_probs[key]), p=self.cand_probs[key])
        return _noun_id(int(self.cand_nouns[key][i]))

    def sample_situation(self, rng) -> Situation:
        verb = self.lexicon.verbs[int(rng.integers(len(self.lexicon.verbs)))]
        return Situation(verb, {e: self.sample_noun(verb, e, rng) for e in self.roles})


def _noun_id(i):
    return f"n{i:03d}"


def _verb_id(i):
    return f"v{i:02d}"


def make_world(cfg: SynthConfig, seed: int) -> SynthWorld:
    cfg.check()
    rng = np.random.default_rng(seed)
    p, q = cfg.n_features, cfg.latent_dim
    basis, _ = np.linalg.qr(rng.standard_normal((p, p)))
    verb_protos = basis[:, : cfg.n_verbs].T.copy()
    rest = basis[:, cfg.n_verbs:]
    z = rng.standard_normal((cfg.n_nouns, q))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    mix = rng.standard_normal((cfg.n_roles, rest.shape[1], q)) / np.sqrt(rest.shape[1])
    role_views = np.einsum("pk,rkq->rpq", rest, mix)

    roles = list(_ROLE_NAMES[: cfg.n_roles])
    verbs = [_verb_id(i) for i in range(cfg.n_verbs)]
    nouns = {_noun_id(i): (f"noun{i}",) for i in range(cfg.n_nouns)}
    frames = {f"frame_{v}": tuple(roles) for v in verbs}
    v2f = {v: f"frame_{v}" for v in verbs}
    templates = {}
    for v in verbs:
        parts = [f"{{{roles[0]}}}", v] + [
            "{" + (f"{_ROLE_PREP[e]} {e}" if _ROLE_PREP[e] else e) + "}" for e in roles[1:]]
        templates[v] = " ".join(parts)

    cand_nouns, cand_probs = {}, {}
    weights = np.arange(1, cfg.n_candidates + 1, dtype=float) ** -cfg.exponent
    weights /= weights.sum()
    for v in verbs:
        for e in roles:
            cand_nouns[(v, e)] = rng.choice(cfg.n_nouns, cfg.n_candidates, replace=False)
            cand_probs[(v, e)] = weights
    full = {k: {_noun_id(int(i)) for i in c} for k, c in cand_nouns.items()}
    lex = Lexicon.build(verbs, nouns, frames, v2f, templates, full)

    spec_rng = np.random.default_rng([seed, 1])
    specific = {}
    for vi in range(cfg.n_verbs):
        for ri in range(cfg.n_roles):
            draws = spec_rng.standard_normal((cfg.n_nouns, p)) / np.sqrt(p)
            for ni in range(cfg.n_nouns):
                specific[(vi, ri, ni)] = draws[ni]
    return SynthWorld(cfg, lex, verb_protos, z, role_views, specific,
                      cand_nouns, cand_probs, seed)


def _sample_examples(world: SynthWorld, n, prefix, rng) -> list[Example]:
    cfg = world.cfg
    out = []
    for i in range(n):
        s = world.sample_situation(rng)
        g = world.features(s.verb, s.frame, rng)
        anns = [s]
        for _ in range(cfg.n_annotations - 1):
            frame = {e: (world.sample_noun(s.verb, e, rng) if rng.random() < cfg.annotator_noise
                         else nn) for e, nn in s.frame.items()}
            anns.append(Situation(s.verb, frame))
        out.append(Example(f"{prefix}{i:06d}", g, tuple(anns)))
    return out


def synth_generate(cfg: SynthConfig, seed: int, *, return_world=False):
    """Generate ``(train, dev, lexicon)`` deterministically from ``seed``.

    The lexicon's candidate lists are the nouns observed in ``train`` per
    (verb, role), plus the null noun.
    """
    world = make_world(cfg, seed)
    rng = np.random.default_rng([seed, 2])
    train = _sample_examples(world, cfg.n_train, "train", rng)
    dev = _sample_examples(world, cfg.n_dev, "dev", rng)
    lex = observed_candidates(world.lexicon, train)
    if return_world:
        return train, dev, lex, world
    return train, dev, lex
