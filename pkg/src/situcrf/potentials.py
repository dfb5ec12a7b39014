"""Log-potential scores for the situation CRF and their parameter gradients.

Every family maps image features ``g`` (shape ``(p,)`` or a batch
``(B, p)``) to a :class:`ScoreTable`: one score per verb and one per
``(verb, role, noun)`` candidate triple.  Families:

* ``RegressionParams``   -- a linear regression per verb and per triple.
* ``TensorParams``       -- ``g^T A (d_n kron g^T H_{v,e})``; noun embeddings
  and verb-role matrices shared through a global composition matrix.
* ``InnerProductParams`` -- ``sum_k d_n^T H_{k,v,e} g``.
* ``NounPotentialParams``-- a per-noun regression added to every role.

``backprop`` on each family returns the exact gradient of
``sum(upstream * scores)`` with respect to its arrays and to ``g``.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, fields

import numpy as np

from situcrf.schema import LexiconIndex

FAMILIES = ("regression", "tensor", "tensor+reg", "inner", "inner+reg", "noun+reg")


@dataclass
class ScoreTable:
    """Verb scores ``(..., V)`` and triple scores ``(..., T)`` (log-potentials)."""

    verb: np.ndarray
    triple: np.ndarray
    index: LexiconIndex = field(repr=False)

    @classmethod
    def zeros(cls, index: LexiconIndex, batch=()):
        return cls(np.zeros(tuple(batch) + (index.n_verbs,)),
                   np.zeros(tuple(batch) + (index.n_triples,)), index)

    def __add__(self, other: "ScoreTable") -> "ScoreTable":
        return ScoreTable(self.verb + other.verb, self.triple + other.triple, self.index)

    def __getitem__(self, i) -> "ScoreTable":
        """Select one example (or a sub-batch) from a batched table."""
        return ScoreTable(self.verb[i], self.triple[i], self.index)

    def verb_score(self, verb):
        return np.take(self.verb, self.index.verb_pos[verb], axis=-1)

    def role_noun_score(self, verb, role, noun):
        return np.take(self.triple, self.index.triple_pos[(verb, role, noun)], axis=-1)

    def as_dict(self) -> dict:
        """Keyed view of an unbatched table."""
        if self.verb.ndim != 1:
            raise ValueError("as_dict needs an unbatched table")
        return {
            "verb": {v: float(x) for v, x in zip(self.index.verbs, self.verb)},
            "role_noun": {t: float(x) for t, x in zip(self.index.triples, self.triple)},
        }


def compose_scores(parts) -> ScoreTable:
    """Element-wise sum of log-scores (a product of potentials)."""
    parts = list(parts)
    if not parts:
        raise ValueError("nothing to compose")
    out = parts[0]
    for p in parts[1:]:
        out = out + p
    return out


def _as_batch(g, p):
    g = np.asarray(g, dtype=np.float64)
    single = g.ndim == 1
    G = np.atleast_2d(g)
    if G.ndim != 2 or G.shape[1] != p:
        raise ValueError(f"feature dimension mismatch: expected {p}, got {g.shape}")
    return G, single


def _unbatch(table: ScoreTable, single: bool) -> ScoreTable:
    return table[0] if single else table


class _Family:
    """Shared array bookkeeping for parameter dataclasses."""

    def arrays(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)
                if isinstance(getattr(self, f.name), np.ndarray) and f.name != "keep"}

    def zeros_like(self):
        new = copy.copy(self)
        for name, arr in self.arrays().items():
            setattr(new, name, np.zeros_like(arr))
        return new

    def copy(self):
        new = copy.copy(self)
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, np.ndarray):
                setattr(new, f.name, val.copy())
        return new


# ---------------------------------------------------------------------------
# image regression

@dataclass
class RegressionParams(_Family):
    """Per-verb weights ``(V, p)`` and per-triple weights ``(T, p)``.

    ``keep`` marks retained triple regressions; pruned triples score 0.
    ``triple_weights`` may be ``None`` for a verb-only regression.
    """

    verb_weights: np.ndarray
    triple_weights: np.ndarray | None = None
    keep: np.ndarray | None = None

    @property
    def p(self):
        return self.verb_weights.shape[1]

    def _mask(self):
        return None if self.keep is None else self.keep.astype(np.float64)

    def score(self, index: LexiconIndex, g) -> ScoreTable:
        G, single = _as_batch(g, self.p)
        verb = G @ self.verb_weights.T
        if self.triple_weights is None:
            triple = np.zeros((G.shape[0], index.n_triples))
        else:
            triple = G @ self.triple_weights.T
            if self.keep is not None:
                triple = triple * self._mask()
        return _unbatch(ScoreTable(verb, triple, index), single)

    def backprop(self, index, g, upstream: ScoreTable):
        G, _ = _as_batch(g, self.p)
        uv = np.atleast_2d(upstream.verb)
        grads = self.zeros_like()
        grads.verb_weights = uv.T @ G
        dG = uv @ self.verb_weights
        if self.triple_weights is not None:
            ut = np.atleast_2d(upstream.triple)
            if self.keep is not None:
                ut = ut * self._mask()
            grads.triple_weights = ut.T @ G
            dG = dG + ut @ self.triple_weights
        return grads, dG.reshape(np.shape(g))


def score_regression(params: RegressionParams, index: LexiconIndex, g) -> ScoreTable:
    return params.score(index, g)


# ---------------------------------------------------------------------------
# tensor composition

@dataclass
class TensorParams(_Family):
    """Noun embeddings ``(N, m)``, verb-role matrices ``(S, p, o)`` and the
    flattened composition weights ``A`` of shape ``(p, m*o)``.

    Column ``x*o + y`` of ``A`` holds the weights of noun dimension ``x``
    and role dimension ``y``.
    """

    noun_embeddings: np.ndarray
    role_matrices: np.ndarray
    composition: np.ndarray

    @property
    def dims(self):
        m = self.noun_embeddings.shape[1]
        s, p, o = self.role_matrices.shape
        return m, o, p

    def check(self):
        m, o, p = self.dims
        if self.composition.shape != (p, m * o):
            raise ValueError(f"composition shape {self.composition.shape} != {(p, m * o)}")

    def _forward(self, index, G):
        m, o, p = self.dims
        S = self.role_matrices.shape[0]
        H2 = self.role_matrices.transpose(1, 0, 2).reshape(p, S * o)
        R = (G @ H2).reshape(G.shape[0], S, o)
        U = (G @ self.composition).reshape(G.shape[0], m, o)
        W = R @ U.transpose(0, 2, 1)                      # (B, S, m)
        return R, U, W, H2

    def score(self, index: LexiconIndex, g) -> ScoreTable:
        self.check()
        G, single = _as_batch(g, self.dims[2])
        _, _, W, _ = self._forward(index, G)
        triple = _gather_triples(index, W @ self.noun_embeddings.T)
        table = ScoreTable(np.zeros((G.shape[0], index.n_verbs)), triple, index)
        return _unbatch(table, single)

    def backprop(self, index, g, upstream: ScoreTable):
        self.check()
        m, o, p = self.dims
        G, _ = _as_batch(g, p)
        B, S = G.shape[0], self.role_matrices.shape[0]
        R, U, W, H2 = self._forward(index, G)
        Yd = _scatter_triples(index, np.atleast_2d(upstream.triple), self.noun_embeddings.shape[0])
        grads = self.zeros_like()
        grads.noun_embeddings = Yd.reshape(B * S, -1).T @ W.reshape(B * S, m)
        dW = Yd @ self.noun_embeddings                    # (B, S, m)
        dU = dW.transpose(0, 2, 1) @ R                    # (B, m, o)
        dR = dW @ U                                       # (B, S, o)
        grads.composition = G.T @ dU.reshape(B, m * o)
        grads.role_matrices = (G.T @ dR.reshape(B, S * o)).reshape(p, S, o).transpose(1, 0, 2).copy()
        dG = dU.reshape(B, m * o) @ self.composition.T + dR.reshape(B, S * o) @ H2.T
        return grads, dG.reshape(np.shape(g))


def _gather_triples(index: LexiconIndex, grid: np.ndarray) -> np.ndarray:
    """``(B, S, N)`` slot-by-noun scores to ``(B, T)`` triple scores."""
    return grid[:, index.triple_slot, index.triple_noun]


def _scatter_triples(index: LexiconIndex, Y: np.ndarray, n_nouns: int) -> np.ndarray:
    """Inverse of :func:`_gather_triples` (each triple is a distinct cell)."""
    grid = np.zeros((Y.shape[0], index.n_slots, n_nouns))
    grid[:, index.triple_slot, index.triple_noun] = Y
    return grid


def score_tensor_naive(params: TensorParams, index: LexiconIndex, g, verb, role, noun) -> float:
    """Materialize the ``m x o x p`` weighted outer-product tensor and sum it.

    Reference implementation for :func:`score_tensor_fast`.
    """
    params.check()
    m, o, p = params.dims
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (p,):
        raise ValueError(f"feature dimension mismatch: expected {p}, got {g.shape}")
    d = params.noun_embeddings[index.noun_pos[noun]]
    H = params.role_matrices[index.slot_pos[(verb, role)]]
    r = g @ H
    C = params.composition.T.reshape(m, o, p)
    T = C * (d[:, None, None] * r[None, :, None] * g[None, None, :])
    return float(T.sum())


def score_tensor_fast(params: TensorParams, index: LexiconIndex, g) -> ScoreTable:
    return params.score(index, g)


# ---------------------------------------------------------------------------
# inner-product composition

@dataclass
class InnerProductParams(_Family):
    """Noun embeddings ``(N, m)`` and ``t`` verb-role matrices ``(t, S, m, p)``."""

    noun_embeddings: np.ndarray
    role_matrices: np.ndarray

    @property
    def dims(self):
        t, _, o, p = self.role_matrices.shape
        return self.noun_embeddings.shape[1], o, p, t

    def check(self):
        m, o, _, t = self.dims
        if m != o:
            raise ValueError(f"inner-product composition needs o == m, got o={o}, m={m}")
        if t < 1:
            raise ValueError("need at least one verb-role matrix per slot")

    def _project(self, G):
        t, S, o, p = self.role_matrices.shape
        Hsum = self.role_matrices.sum(axis=0)                     # (S, o, p)
        return (G @ Hsum.reshape(S * o, p).T).reshape(G.shape[0], S, o)

    def score(self, index: LexiconIndex, g) -> ScoreTable:
        self.check()
        G, single = _as_batch(g, self.dims[2])
        Z = self._project(G)
        triple = _gather_triples(index, Z @ self.noun_embeddings.T)
        table = ScoreTable(np.zeros((G.shape[0], index.n_verbs)), triple, index)
        return _unbatch(table, single)

    def backprop(self, index, g, upstream: ScoreTable):
        self.check()
        t, S, o, p = self.role_matrices.shape
        G, _ = _as_batch(g, p)
        B = G.shape[0]
        Z = self._project(G)
        Yd = _scatter_triples(index, np.atleast_2d(upstream.triple), self.noun_embeddings.shape[0])
        grads = self.zeros_like()
        grads.noun_embeddings = Yd.reshape(B * S, -1).T @ Z.reshape(B * S, o)
        dZ = (Yd @ self.noun_embeddings).reshape(B, S * o)
        dH = (dZ.T @ G).reshape(S, o, p)
        grads.role_matrices = np.broadcast_to(dH, self.role_matrices.shape).copy()
        dG = dZ @ self.role_matrices.sum(axis=0).reshape(S * o, p)
        return grads, dG.reshape(np.shape(g))


def score_inner_product(params: InnerProductParams, index: LexiconIndex, g) -> ScoreTable:
    return params.score(index, g)


# ---------------------------------------------------------------------------
# role-independent noun potential

@dataclass
class NounPotentialParams(_Family):
    """Per-noun regression weights ``(N, p)``."""

    noun_weights: np.ndarray

    def noun_scores(self, g) -> np.ndarray:
        G, single = _as_batch(g, self.noun_weights.shape[1])
        out = G @ self.noun_weights.T
        return out[0] if single else out

    def score(self, index: LexiconIndex, g) -> ScoreTable:
        ns = self.noun_scores(g)
        verb = np.zeros(ns.shape[:-1] + (index.n_verbs,))
        return ScoreTable(verb, ns[..., index.triple_noun], index)

    def backprop(self, index, g, upstream: ScoreTable):
        G, _ = _as_batch(g, self.noun_weights.shape[1])
        Y = np.atleast_2d(upstream.triple)
        Yn = np.zeros((G.shape[0], self.noun_weights.shape[0]))
        np.add.at(Yn.T, index.triple_noun, Y.T)
        grads = self.zeros_like()
        grads.noun_weights = Yn.T @ G
        dG = Yn @ self.noun_weights
        return grads, dG.reshape(np.shape(g))


def score_noun_potential(params: NounPotentialParams, index: LexiconIndex, g) -> dict:
    """Per-noun log score ``g . w_n`` keyed by noun id."""
    ns = params.noun_scores(g)
    if ns.ndim == 1:
        return {n: float(ns[i]) for i, n in enumerate(index.nouns)}
    return {n: ns[:, i].copy() for i, n in enumerate(index.nouns)}


def backprop_scores(params, index: LexiconIndex, g, upstream: ScoreTable):
    """Gradients of ``sum(upstream * scores)`` for one family: ``(grads, dg)``."""
    return params.backprop(index, g, upstream)


# ---------------------------------------------------------------------------
# full model

_COMPONENTS = ("regression", "tensor", "inner", "noun")


@dataclass
class ModelParams:
    """A potential family: verb (and optionally triple) regression plus at most
    one compositional or noun component."""

    family: str
    index: LexiconIndex = field(repr=False)
    regression: RegressionParams
    tensor: TensorParams | None = None
    inner: InnerProductParams | None = None
    noun: NounPotentialParams | None = None

    def components(self):
        for name in _COMPONENTS:
            comp = getattr(self, name)
            if comp is not None:
                yield name, comp

    @property
    def p(self) -> int:
        return self.regression.p

    def dims(self) -> dict:
        d = {"p": self.p, "m": 0, "o": 0, "t": 0}
        if self.tensor is not None:
            m, o, _ = self.tensor.dims
            d.update(m=m, o=o, t=1)
        if self.inner is not None:
            m, o, _, t = self.inner.dims
            d.update(m=m, o=o, t=t)
        return d

    def scores(self, g) -> ScoreTable:
        return compose_scores(c.score(self.index, g) for _, c in self.components())

    def backprop(self, g, upstream: ScoreTable):
        """``(grads, dg)`` where ``grads`` maps qualified array names to gradients."""
        grads, dG = {}, 0.0
        for name, comp in self.components():
            cg, cdg = comp.backprop(self.index, g, upstream)
            for k, v in cg.arrays().items():
                grads[f"{name}.{k}"] = v
            dG = dG + cdg
        return grads, dG

    def arrays(self) -> dict:
        """Qualified name -> parameter array (live views, updated in place)."""
        out = {}
        for name, comp in self.components():
            for k, v in comp.arrays().items():
                out[f"{name}.{k}"] = v
        return out

    def copy(self) -> "ModelParams":
        new = copy.copy(self)
        for name, comp in self.components():
            setattr(new, name, comp.copy())
        return new


def _uniform(rng, shape, fan_in):
    r = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-r, r, size=shape)


def prune_mask(index: LexiconIndex, freq, min_count: int = 10) -> np.ndarray:
    """Triples whose training count is at least ``min_count``."""
    return np.array([freq.count(*t) >= min_count for t in index.triples], dtype=bool)


def init_model(index: LexiconIndex, family: str, p: int, *, m: int = 32, o: int = 32,
               t: int = 1, seed: int = 0, freq=None, prune_below: int = 10) -> ModelParams:
    """Fresh parameters for ``family``.

    Embeddings and matrices are uniform in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``;
    regressions start at zero.  When a triple regression is combined with a
    compositional potential and ``freq`` is given, triples seen fewer than
    ``prune_below`` times are pruned.
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}; choose from {FAMILIES}")
    rng = np.random.default_rng(seed)
    V, T, N, S = index.n_verbs, index.n_triples, index.n_nouns, index.n_slots
    with_reg = family in ("regression", "tensor+reg", "inner+reg", "noun+reg")
    compositional = family.startswith(("tensor", "inner"))
    keep = None
    if with_reg and compositional and freq is not None:
        keep = prune_mask(index, freq, prune_below)
    reg = RegressionParams(np.zeros((V, p)), np.zeros((T, p)) if with_reg else None, keep)
    model = ModelParams(family, index, reg)
    if family.startswith("tensor"):
        model.tensor = TensorParams(
            _uniform(rng, (N, m), m), _uniform(rng, (S, p, o), p), _uniform(rng, (p, m * o), m * o))
    elif family.startswith("inner"):
        if o != m:
            raise ValueError("inner-product composition needs o == m")
        model.inner = InnerProductParams(_uniform(rng, (N, m), m), _uniform(rng, (t, S, o, p), p))
    elif family == "noun+reg":
        model.noun = NounPotentialParams(np.zeros((N, p)))
    return model


# ---------------------------------------------------------------------------
# checkpoint container: magic line, JSON header line, raw little-endian arrays

_MAGIC = b"SITUCRF-CKPT 1\n"


def save_model(model: ModelParams, path, extra: dict | None = None) -> None:
    tensors, blobs, offset = [], [], 0
    items = list(model.arrays().items())
    if model.regression.keep is not None:
        items.append(("regression.keep", model.regression.keep.astype(np.uint8)))
    for name, arr in items:
        dtype = "<f8" if arr.dtype.kind == "f" else "|u1"
        data = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": dtype,
                        "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = {"family": model.family, "dims": model.dims(),
              "mapping": model.index.mapping_table(), "tensors": tensors,
              "extra": extra or {}}
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(json.dumps(header, sort_keys=True, ensure_ascii=False).encode() + b"\n")
        for b in blobs:
            fh.write(b)


def load_model(path, index: LexiconIndex) -> ModelParams:
    """Read a checkpoint; the id mapping must match ``index`` exactly."""
    with open(path, "rb") as fh:
        if fh.readline() != _MAGIC:
            raise ValueError(f"{path}: not a situcrf checkpoint")
        header = json.loads(fh.readline())
        body = fh.read()
    if header["mapping"] != json.loads(json.dumps(index.mapping_table())):
        raise ValueError(f"{path}: checkpoint id mapping does not match the lexicon")
    arrs = {}
    for t in header["tensors"]:
        raw = body[t["offset"]: t["offset"] + t["nbytes"]]
        arrs[t["name"]] = np.frombuffer(raw, dtype=t["dtype"]).reshape(t["shape"]).copy()
    keep = arrs.pop("regression.keep", None)
    reg = RegressionParams(arrs["regression.verb_weights"], arrs.get("regression.triple_weights"),
                           None if keep is None else keep.astype(bool))
    model = ModelParams(header["family"], index, reg)
    if "tensor.composition" in arrs:
        model.tensor = TensorParams(arrs["tensor.noun_embeddings"], arrs["tensor.role_matrices"],
                                    arrs["tensor.composition"])
    if "inner.role_matrices" in arrs:
        model.inner = InnerProductParams(arrs["inner.noun_embeddings"], arrs["inner.role_matrices"])
    if "noun.noun_weights" in arrs:
        model.noun = NounPotentialParams(arrs["noun.noun_weights"])
    return model


def checkpoint_extra(path) -> dict:
    with open(path, "rb") as fh:
        fh.readline()
        return json.loads(fh.readline()).get("extra", {})
