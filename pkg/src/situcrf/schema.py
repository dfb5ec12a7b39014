"""Discrete situation space: verbs, frames, semantic roles and nouns.

A situation is a verb plus an assignment of every role in the verb's frame
to a noun (or to the null noun ``NULL``).  The :class:`Lexicon` holds the
space; :class:`LexiconIndex` maps it to dense integer ids used by the
numerical code.
"""
from __future__ import annotations

import itertools
import json
import math
import re
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterator, Mapping

import numpy as np

from situcrf._io import read_jsonl, write_jsonl

#: The null noun: the role is unknown or does not apply.
NULL = "∅"

LEXICON_FORMAT = "situcrf.lexicon"

_SLOT_RE = re.compile(r"\{([^{}]*)\}")

RealizedFrame = Mapping[str, str]


class LexiconError(ValueError):
    """Raised when a lexicon file does not parse or violates an invariant."""


@dataclass(frozen=True, eq=False)
class Situation:
    """A verb with a realized frame ``{role: noun}``.

    Equality and hashing are by content, so situations can be
    deduplicated with ``set``.
    """

    verb: str
    frame: RealizedFrame

    def __post_init__(self):
        object.__setattr__(self, "frame", MappingProxyType(dict(self.frame)))

    def key(self) -> tuple:
        return (self.verb, tuple(sorted(self.frame.items())))

    def __eq__(self, other):
        if not isinstance(other, Situation):
            return NotImplemented
        return self.key() == other.key()

    def __hash__(self):
        return hash(self.key())

    def __repr__(self):
        pairs = ", ".join(f"{r}:{n}" for r, n in self.frame.items())
        return f"Situation({self.verb}, {{{pairs}}})"


def template_slots(template: str) -> list[tuple[str, str]]:
    """Return ``(brace_content, role)`` for every slot of a verb template.

    The role is the last whitespace-separated token inside the braces, so
    ``"{with agentpart}"`` yields ``("with agentpart", "agentpart")``.
    """
    out = []
    for body in _SLOT_RE.findall(template):
        tokens = body.split()
        if not tokens:
            raise LexiconError(f"empty slot in template {template!r}")
        out.append((body, tokens[-1]))
    return out


@dataclass(frozen=True, eq=False)
class Lexicon:
    """The output space of the situation CRF.

    Attributes
    ----------
    verbs : tuple of str
        Sorted verb ids.
    nouns : mapping
        Noun id to its ordered gloss list.  Always contains ``NULL``.
    frames : mapping
        Frame id to ordered tuple of role ids.
    verb_to_frame : mapping
        Verb id to frame id.
    templates : mapping
        Verb id to phrase template with ``{role}`` slots.
    role_candidates : mapping
        ``(verb, role)`` to the sorted tuple of admissible nouns (incl. ``NULL``).
    """

    verbs: tuple
    nouns: Mapping[str, tuple]
    frames: Mapping[str, tuple]
    verb_to_frame: Mapping[str, str]
    templates: Mapping[str, str] = field(default_factory=dict)
    role_candidates: Mapping[tuple, tuple] = field(default_factory=dict)

    @classmethod
    def build(cls, verbs, nouns, frames, verb_to_frame, templates=None,
              role_candidates=None) -> "Lexicon":
        """Normalize containers and check invariants."""
        nouns = {n: tuple(g) for n, g in dict(nouns).items()}
        nouns.setdefault(NULL, ())
        frames = {f: tuple(r) for f, r in dict(frames).items()}
        verb_to_frame = dict(verb_to_frame)
        verbs = tuple(sorted(set(verbs)))
        templates = dict(templates or {})
        cands = {}
        for (v, e), ns in dict(role_candidates or {}).items():
            cands[(v, e)] = tuple(sorted(set(ns) | {NULL}))
        # every role gets at least the null noun
        for v in verbs:
            for e in frames.get(verb_to_frame.get(v), ()):
                cands.setdefault((v, e), (NULL,))
        lex = cls(
            verbs=verbs,
            nouns=MappingProxyType(nouns),
            frames=MappingProxyType(frames),
            verb_to_frame=MappingProxyType(verb_to_frame),
            templates=MappingProxyType(templates),
            role_candidates=MappingProxyType(cands),
        )
        lex.check()
        return lex

    def check(self) -> None:
        for v in self.verbs:
            if v not in self.verb_to_frame:
                raise LexiconError(f"verb {v!r} has no frame")
            f = self.verb_to_frame[v]
            if f not in self.frames:
                raise LexiconError(f"verb {v!r} maps to unknown frame {f!r}")
        for f, roles in self.frames.items():
            if not roles:
                raise LexiconError(f"frame {f!r} has an empty role list")
            if len(set(roles)) != len(roles):
                raise LexiconError(f"frame {f!r} has duplicate roles")
        for v, tmpl in self.templates.items():
            if v not in self.verb_to_frame:
                raise LexiconError(f"template for unknown verb {v!r}")
            roles = set(self.roles(v))
            for _, role in template_slots(tmpl):
                if role not in roles:
                    raise LexiconError(
                        f"template slot {role!r} of verb {v!r} is not a frame role")
        for (v, e), ns in self.role_candidates.items():
            if v not in self.verb_to_frame or e not in self.roles(v):
                raise LexiconError(f"candidates for unknown (verb, role) ({v!r}, {e!r})")
            for n in ns:
                if n not in self.nouns:
                    raise LexiconError(f"candidate noun {n!r} for ({v}, {e}) is not in the noun set")

    def roles(self, verb: str) -> tuple:
        return self.frames[self.verb_to_frame[verb]]

    def candidates(self, verb: str, role: str) -> tuple:
        return self.role_candidates[(verb, role)]

    def with_candidates(self, role_candidates) -> "Lexicon":
        """Copy of this lexicon with replaced candidate lists."""
        return Lexicon.build(self.verbs, self.nouns, self.frames, self.verb_to_frame,
                             self.templates, role_candidates)

    @property
    def index(self) -> "LexiconIndex":
        # cached; the lexicon is immutable
        try:
            return self.__dict__["_index"]
        except KeyError:
            idx = LexiconIndex(self)
            object.__setattr__(self, "_index", idx)
            return idx


def _parse_noun(n):
    return NULL if n is None else n


def _dump_noun(n):
    return None if n == NULL else n


def load_lexicon(path) -> Lexicon:
    """Read a lexicon file (JSON lines; see README for the record kinds)."""
    try:
        header, records = read_jsonl(path, LEXICON_FORMAT)
    except ValueError as exc:
        raise LexiconError(str(exc)) from exc
    verbs, nouns, frames, v2f, templates, cands = [], {}, {}, {}, {}, {}
    for lineno, rec in records:
        kind = rec.get("kind")
        try:
            if kind == "noun":
                nouns[rec["id"]] = tuple(rec.get("glosses", ()))
            elif kind == "frame":
                if rec["id"] in frames:
                    raise LexiconError(f"frame {rec['id']!r} declared twice")
                frames[rec["id"]] = tuple(rec["roles"])
            elif kind == "verb":
                v = rec["id"]
                if v in v2f and v2f[v] != rec["frame"]:
                    raise LexiconError(f"verb maps to multiple frames: {v!r}")
                v2f[v] = rec["frame"]
                verbs.append(v)
                if rec.get("template") is not None:
                    templates[v] = rec["template"]
            elif kind == "candidates":
                key = (rec["verb"], rec["role"])
                cands.setdefault(key, set()).update(_parse_noun(n) for n in rec["nouns"])
            else:
                raise LexiconError(f"line {lineno}: unknown record kind {kind!r}")
        except KeyError as exc:
            raise LexiconError(f"line {lineno}: missing field {exc}") from exc
    return Lexicon.build(verbs, nouns, frames, v2f, templates, cands)


def save_lexicon(lex: Lexicon, path) -> None:
    recs = []
    for n in sorted(lex.nouns):
        if n == NULL:
            continue
        recs.append({"kind": "noun", "id": n, "glosses": list(lex.nouns[n])})
    for f in sorted(lex.frames):
        recs.append({"kind": "frame", "id": f, "roles": list(lex.frames[f])})
    for v in lex.verbs:
        recs.append({"kind": "verb", "id": v, "frame": lex.verb_to_frame[v],
                     "template": lex.templates.get(v)})
    for v in lex.verbs:
        for e in lex.roles(v):
            recs.append({"kind": "candidates", "verb": v, "role": e,
                         "nouns": [_dump_noun(n) for n in lex.candidates(v, e)]})
    write_jsonl(path, LEXICON_FORMAT, recs)


def validate_situation(lex: Lexicon, s: Situation) -> list[str]:
    """Return the list of violations; an empty list means the situation is valid."""
    if s.verb not in lex.verb_to_frame:
        return [f"unknown verb: {s.verb}"]
    roles = lex.roles(s.verb)
    out = []
    missing = [e for e in roles if e not in s.frame]
    if missing:
        out.append("missing roles: " + ", ".join(missing))
    extra = [e for e in s.frame if e not in roles]
    if extra:
        out.append("roles not in frame: " + ", ".join(extra))
    bad = [n for n in s.frame.values() if n not in lex.nouns]
    if bad:
        out.append("unknown nouns: " + ", ".join(bad))
    return out


def situation_space_size(lex: Lexicon) -> tuple[dict, int]:
    """Per-verb and total number of situations in the CRF support."""
    per = {v: math.prod(len(lex.candidates(v, e)) for e in lex.roles(v)) for v in lex.verbs}
    return per, sum(per.values())


def enumerate_situations(lex: Lexicon) -> Iterator[Situation]:
    """All situations in the support, verbs in id order, roles in frame order."""
    for v in lex.verbs:
        roles = lex.roles(v)
        for combo in itertools.product(*(lex.candidates(v, e) for e in roles)):
            yield Situation(v, dict(zip(roles, combo)))


class LexiconIndex:
    """Dense integer layout of a lexicon.

    Each ``(verb, role)`` pair is a *slot*; each ``(verb, role, noun)``
    candidate is a *triple*.  Triples are stored contiguously per slot in
    candidate order, and slots contiguously per verb in frame order.
    """

    def __init__(self, lex: Lexicon):
        self.lexicon = lex
        self.verbs = list(lex.verbs)
        self.verb_pos = {v: i for i, v in enumerate(self.verbs)}
        self.nouns = sorted(lex.nouns)
        self.noun_pos = {n: i for i, n in enumerate(self.nouns)}
        self.slots = [(v, e) for v in self.verbs for e in lex.roles(v)]
        self.slot_pos = {s: i for i, s in enumerate(self.slots)}
        self.slot_verb = np.array([self.verb_pos[v] for v, _ in self.slots], dtype=np.intp)
        self.verb_slots = [np.flatnonzero(self.slot_verb == i) for i in range(len(self.verbs))]

        triples, t_slot, t_noun, starts, sizes = [], [], [], [], []
        for s, (v, e) in enumerate(self.slots):
            cands = lex.candidates(v, e)
            starts.append(len(triples))
            sizes.append(len(cands))
            for n in cands:
                triples.append((v, e, n))
                t_slot.append(s)
                t_noun.append(self.noun_pos[n])
        self.triples = triples
        self.triple_pos = {t: i for i, t in enumerate(triples)}
        self.triple_slot = np.array(t_slot, dtype=np.intp)
        self.triple_noun = np.array(t_noun, dtype=np.intp)
        self.triple_verb = self.slot_verb[self.triple_slot] if triples else np.zeros(0, np.intp)
        self.slot_start = np.array(starts, dtype=np.intp)
        self.slot_size = np.array(sizes, dtype=np.intp)

        n_t = len(triples)
        width = int(self.slot_size.max()) if sizes else 1
        pad = np.full((len(self.slots), width), n_t, dtype=np.intp)
        for s in range(len(self.slots)):
            pad[s, : sizes[s]] = np.arange(starts[s], starts[s] + sizes[s])
        #: (S, K) indices into a triple array extended by one padding column
        self.pad_index = pad
        self.pad_mask = pad < n_t
        #: (S, V) slot-to-verb membership
        self.slot_verb_matrix = np.zeros((len(self.slots), len(self.verbs)))
        self.slot_verb_matrix[np.arange(len(self.slots)), self.slot_verb] = 1.0

    @property
    def n_verbs(self) -> int:
        return len(self.verbs)

    @property
    def n_nouns(self) -> int:
        return len(self.nouns)

    @property
    def n_slots(self) -> int:
        return len(self.slots)

    @property
    def n_triples(self) -> int:
        return len(self.triples)

    def encode(self, s: Situation) -> tuple[int, np.ndarray]:
        """``(verb index, triple indices in frame order)``; KeyError if off-support."""
        v = self.verb_pos[s.verb]
        ts = [self.triple_pos[(s.verb, e, s.frame[e])] for e in self.lexicon.roles(s.verb)]
        return v, np.array(ts, dtype=np.intp)

    def encode_partial(self, verb: str, partial: RealizedFrame):
        """``(verb index, observed triple indices, unobserved slot indices)``."""
        v = self.verb_pos[verb]
        roles = self.lexicon.roles(verb)
        for e in partial:
            if e not in roles:
                raise KeyError(f"role {e!r} not in frame of {verb!r}")
        obs = [self.triple_pos[(verb, e, partial[e])] for e in roles if e in partial]
        unobs = [self.slot_pos[(verb, e)] for e in roles if e not in partial]
        return v, np.array(obs, dtype=np.intp), np.array(unobs, dtype=np.intp)

    def decode(self, v: int, slot_choice) -> Situation:
        """Build a situation from a verb index and per-slot chosen triple indices."""
        verb = self.verbs[v]
        frame = {}
        for t in slot_choice:
            _, e, n = self.triples[int(t)]
            frame[e] = n
        return Situation(verb, frame)

    def mapping_table(self) -> dict:
        """Id mapping persisted with model checkpoints."""
        return {"verbs": self.verbs, "nouns": self.nouns,
                "slots": [list(s) for s in self.slots],
                "triples": [list(t) for t in self.triples]}

    def fingerprint(self) -> str:
        import hashlib
        blob = json.dumps(self.mapping_table(), sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]
