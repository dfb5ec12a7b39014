"""Situation recognition metrics: verb, value and value-all accuracy at top-1,
top-5 and given the gold verb, on the full set and the rare subset."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from situcrf._io import read_jsonl, write_jsonl
from situcrf.crf import decode_arrays, log_partition
from situcrf.dataset import _frame_from_json, _frame_to_json
from situcrf.schema import Situation

PREDICTIONS_FORMAT = "situcrf.predictions"
REPORT_FORMAT = "situcrf.report"

MEASURES = ("top1_verb", "top1_value", "top1_value_all",
            "top5_verb", "top5_value", "top5_value_all",
            "gold_value", "gold_value_all")


class EvaluationError(ValueError):
    pass


@dataclass
class Prediction:
    """Ranked situations for one image plus one frame per annotated verb,
    decoded with that verb clamped."""

    image_id: str
    ranked: list
    gold_verb_frames: dict = field(default_factory=dict)


def default_decode(family: str) -> str:
    return "max-marginal" if family.startswith(("tensor", "inner")) else "joint"


def predict(model, examples, k: int = 5, mode: str | None = None, workers: int = 1,
            chunk: int = 256) -> list[Prediction]:
    """Decode the top-``k`` situations for every example."""
    mode = mode or default_decode(model.family)
    index = model.index
    examples = list(examples)

    def run(lo):
        part = examples[lo: lo + chunk]
        scores = model.scores(np.stack([ex.features for ex in part]))
        state = log_partition(scores) if mode == "max-marginal" else None
        top, vals, best_t = decode_arrays(scores, min(k, index.n_verbs), mode, state)
        out = []
        for b, ex in enumerate(part):
            ranked = [(index.decode(int(v), best_t[b][index.verb_slots[int(v)]]), float(x))
                      for v, x in zip(top[b], vals[b])]
            gold = {}
            for s in ex.annotations:
                if s.verb in index.verb_pos and s.verb not in gold:
                    vi = index.verb_pos[s.verb]
                    gold[s.verb] = index.decode(vi, best_t[b][index.verb_slots[vi]])
            out.append(Prediction(ex.image_id, ranked, gold))
        return out

    starts = range(0, len(examples), chunk)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(lo) for lo in starts]
    return [p for part in parts for p in part]


def save_predictions(preds, path) -> None:
    write_jsonl(path, PREDICTIONS_FORMAT, (
        {"image_id": p.image_id,
         "ranked": [{"verb": s.verb, "frame": _frame_to_json(s.frame), "score": sc}
                    for s, sc in p.ranked],
         "gold_verb": {v: _frame_to_json(s.frame) for v, s in p.gold_verb_frames.items()}}
        for p in preds))


def load_predictions(path) -> list[Prediction]:
    _, recs = read_jsonl(path, PREDICTIONS_FORMAT)
    return [Prediction(r["image_id"],
                       [(Situation(x["verb"], _frame_from_json(x["frame"])), x.get("score", 0.0))
                        for x in r["ranked"]],
                       {v: Situation(v, _frame_from_json(f)) for v, f in r.get("gold_verb", {}).items()})
            for _, r in recs]


def gold_as_predictions(examples, k: int = 5) -> list[Prediction]:
    """Predictions that repeat the first annotation (useful as a sanity check)."""
    out = []
    for ex in examples:
        first = ex.annotations[0]
        gold = {}
        for s in ex.annotations:
            gold.setdefault(s.verb, s)
        out.append(Prediction(ex.image_id, [(first, 0.0)], gold))
    return out


# ---------------------------------------------------------------------------
# scoring

def frame_match(pred: Situation, annotations) -> tuple[float, float]:
    """``(value, value_all)`` of one predicted frame.

    A role is correct when the predicted noun equals that role's noun in any
    annotation with the same verb.  Returns ``(0, 0)`` when no annotation has
    the predicted verb.
    """
    same = [a for a in annotations if a.verb == pred.verb]
    if not same:
        return 0.0, 0.0
    roles = list(same[0].frame)
    hits = [any(pred.frame.get(e) == a.frame.get(e) for a in same) for e in roles]
    frac = sum(hits) / len(roles) if roles else 1.0
    return frac, float(all(hits))


def score_example(pred: Prediction, ex) -> dict:
    """The eight per-example measures."""
    verbs = {a.verb for a in ex.annotations}
    out = {}
    for k in (1, 5):
        top = [s for s, _ in pred.ranked[:k]]
        matched = [frame_match(s, ex.annotations) for s in top if s.verb in verbs]
        out[f"top{k}_verb"] = float(bool(matched))
        out[f"top{k}_value"] = max((m[0] for m in matched), default=0.0)
        out[f"top{k}_value_all"] = max((m[1] for m in matched), default=0.0)
    first = ex.annotations[0].verb
    frame = pred.gold_verb_frames.get(first)
    if frame is None:
        raise EvaluationError(f"{ex.image_id}: no frame decoded for gold verb {first!r}")
    out["gold_value"], out["gold_value_all"] = frame_match(frame, ex.annotations)
    return out


def _aggregate(rows) -> dict | None:
    if not rows:
        return None
    agg = {m: float(np.mean([r[m] for r in rows])) for m in MEASURES}
    agg["mean"] = float(np.mean([agg[m] for m in MEASURES]))
    return agg


@dataclass
class MetricsReport:
    """Accuracies in ``[0, 1]``.  ``overall`` and ``rare`` map each measure
    name (see ``MEASURES``) plus ``"mean"`` to a value; ``rare`` is ``None``
    when no frequency table was given or no example is rare."""

    overall: dict
    n_examples: int
    rare: dict | None = None
    n_rare: int = 0

    def table(self) -> str:
        head = ("", "top-1 verb", "value", "value-all", "top-5 verb", "value", "value-all",
                "gold value", "value-all", "mean")
        lines = [" | ".join(f"{h:>10}" for h in head)]
        for name, row, n in (("all", self.overall, self.n_examples), ("rare", self.rare, self.n_rare)):
            if row is None:
                continue
            cells = [f"{name} ({n})"] + [f"{100 * row[m]:.2f}" for m in MEASURES + ("mean",)]
            lines.append(" | ".join(f"{c:>10}" for c in cells))
        return "\n".join(lines)

    def records(self) -> list[dict]:
        out = []
        for subset, row, n in (("all", self.overall, self.n_examples), ("rare", self.rare, self.n_rare)):
            if row is not None:
                out.append({"subset": subset, "n": n, **row})
        return out


def _pair(preds, gold):
    by_id = {p.image_id: p for p in preds}
    missing = [ex.image_id for ex in gold if ex.image_id not in by_id]
    if missing:
        raise EvaluationError(f"missing predictions for {len(missing)} examples, e.g. {missing[0]!r}")
    return [(by_id[ex.image_id], ex) for ex in gold]


def evaluate(preds, gold, freq=None, threshold: int = 10) -> MetricsReport:
    from situcrf.dataset import rare_mask

    rows = [score_example(p, ex) for p, ex in _pair(preds, gold)]
    report = MetricsReport(_aggregate(rows), len(rows))
    if freq is not None and rows:
        mask = rare_mask(gold, freq, threshold)
        rare_rows = [r for r, m in zip(rows, mask) if m]
        report.rare = _aggregate(rare_rows)
        report.n_rare = len(rare_rows)
    return report


def save_report(report: MetricsReport, path) -> None:
    write_jsonl(path, REPORT_FORMAT, report.records())


def report_by_frequency(preds, gold, freq, edges=(0, 1, 5, 10, 35, 100, 1000)) -> list[dict]:
    """Top-5 accuracies binned by the count of each example's rarest triple.

    ``edges`` must start at 0 and increase; bin ``i`` is
    ``[edges[i], edges[i+1])`` and the last bin is unbounded.  Empty bins
    are reported with ``accuracy=None``.
    """
    edges = list(edges)
    if not edges or edges[0] != 0 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError("edges must start at 0 and strictly increase")
    bins = [[] for _ in edges]
    for p, ex in _pair(preds, gold):
        c = freq.least_frequent(ex)
        i = int(np.searchsorted(edges, c, side="right")) - 1
        bins[i].append(score_example(p, ex))
    out = []
    for i, rows in enumerate(bins):
        label = f"[{edges[i]},{edges[i + 1]})" if i + 1 < len(edges) else f"[{edges[i]},inf)"
        for m in ("top5_verb", "top5_value", "top5_value_all"):
            acc = float(np.mean([r[m] for r in rows])) if rows else None
            out.append({"bin": label, "measure": m, "accuracy": acc, "n": len(rows)})
    return out


def dev_mean(model, dev, freq=None, decode=None) -> float:
    """Mean of the eight accuracies on ``dev``."""
    return evaluate(predict(model, dev, mode=decode), dev).overall["mean"]
