"""SGD with momentum for the situation CRF.

Two objectives share the optimizer: the noisy-or log-likelihood of the
annotation sets (supervised) and the marginal log-likelihood of partially
labeled images (pretraining).  Mini-batch gradients are means over
examples.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from situcrf.crf import batch_marginal, batch_supervised, encode_partial, encode_supervised
from situcrf.potentials import FAMILIES, ModelParams, init_model
from situcrf.schema import Lexicon, LexiconIndex, Situation

log = logging.getLogger(__name__)


class NumericError(FloatingPointError):
    """A non-finite gradient or objective."""


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-5
    momentum: float = 0.9
    weight_decay: float = 5e-4
    clip_norm: float | None = None
    batch_size: int = 64
    plateau_patience: int = 1
    decay_factor: float = 0.1
    max_updates: int = 1000
    eval_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if not 0 < self.decay_factor < 1:
            raise ValueError("decay_factor must be in (0, 1)")
        if self.batch_size < 1 or self.max_updates < 0 or self.eval_every < 1:
            raise ValueError("batch_size and eval_every must be positive")

    def to_dict(self):
        return asdict(self)


# Full-scale profiles for CNN image features and datasets of 100k+ images.
FULL_SUPERVISED = OptimizerConfig(learning_rate=1e-5, momentum=0.9, weight_decay=5e-4,
                                   batch_size=64, max_updates=50_000, eval_every=1000)
FULL_PRETRAIN = OptimizerConfig(learning_rate=1e-3, momentum=0.9, weight_decay=5e-4,
                                 clip_norm=100.0, batch_size=360, max_updates=50_000,
                                 eval_every=5000)
# Desk-scale profiles for the synthetic benchmark (p=64 features).
DESK_SUPERVISED = OptimizerConfig(learning_rate=0.05, momentum=0.9, weight_decay=5e-4,
                                  clip_norm=100.0, batch_size=32, max_updates=3000,
                                  eval_every=250)
DESK_PRETRAIN = OptimizerConfig(learning_rate=0.05, momentum=0.9, weight_decay=5e-4,
                                clip_norm=100.0, batch_size=32, max_updates=1500,
                                eval_every=500)

PROFILES = {"full-supervised": FULL_SUPERVISED, "full-pretrain": FULL_PRETRAIN,
            "desk-supervised": DESK_SUPERVISED, "desk-pretrain": DESK_PRETRAIN}


@dataclass
class TrainState:
    params: ModelParams
    velocity: dict
    update_count: int = 0
    best_dev_metric: float = -np.inf
    lr_current: float = 0.0
    trace: list = field(default_factory=list)

    @classmethod
    def fresh(cls, params: ModelParams, cfg: OptimizerConfig) -> "TrainState":
        vel = {k: np.zeros_like(v) for k, v in params.arrays().items()}
        return cls(params, vel, 0, -np.inf, cfg.learning_rate)


def global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def sgd_step(state: TrainState, grads: dict, cfg: OptimizerConfig) -> TrainState:
    """One momentum update, in place.

    ``g' = clip(grads + weight_decay * params)``;
    ``velocity = momentum * velocity - lr * g'``; ``params += velocity``.
    """
    params = state.params.arrays()
    if set(grads) != set(params):
        raise ValueError(f"gradient keys {sorted(grads)} do not match parameters {sorted(params)}")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient {name} has shape {g.shape}, expected {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name}")
    full = {k: grads[k] + cfg.weight_decay * params[k] for k in params}
    if cfg.clip_norm is not None:
        norm = global_norm(full)
        if norm > cfg.clip_norm:
            scale = cfg.clip_norm / norm
            full = {k: g * scale for k, g in full.items()}
    lr = state.lr_current
    for k, p in params.items():
        v = state.velocity[k]
        v *= cfg.momentum
        v -= lr * full[k]
        p += v
    state.update_count += 1
    return state


# ---------------------------------------------------------------------------
# objectives

def _chunks(n, workers):
    bounds = np.linspace(0, n, max(1, min(workers, n)) + 1).astype(int)
    return [(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _accumulate(model: ModelParams, G, objective, workers: int = 1):
    """Summed log-likelihood and summed parameter gradients over a batch.

    ``objective(scores, lo, hi)`` returns per-example log-likelihoods and the
    score gradient for rows ``lo:hi``.  Chunks are reduced in order, so the
    result does not depend on thread scheduling.
    """
    def run(bounds):
        lo, hi = bounds
        scores = model.scores(G[lo:hi])
        ll, gs = objective(scores, lo, hi)
        ok = np.isfinite(ll)
        if not ok.all():
            gs.verb[~ok] = 0.0
            gs.triple[~ok] = 0.0
        grads, _ = model.backprop(G[lo:hi], gs)
        return float(ll[ok].sum()), int(ok.sum()), grads

    parts = _chunks(G.shape[0], workers)
    if workers > 1 and len(parts) > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, parts))
    else:
        results = [run(b) for b in parts]
    total, count, grads = 0.0, 0, None
    for ll, n, g in results:
        total += ll
        count += n
        grads = g if grads is None else {k: grads[k] + g[k] for k in grads}
    return total, count, grads


class SupervisedData:
    """Pre-encoded fully annotated examples."""

    def __init__(self, index: LexiconIndex, examples):
        self.examples = list(examples)
        self.G = np.stack([ex.features for ex in self.examples]) if self.examples else None
        self.enc = encode_supervised(index, [ex.annotations for ex in self.examples])

    def __len__(self):
        return len(self.examples)

    def objective(self, rows):
        def f(scores, lo, hi):
            sel = rows[lo:hi]
            sub = type(self.enc)(self.enc.verbs[sel], self.enc.triples[sel], self.enc.valid[sel])
            return batch_supervised(scores, sub)
        return f


class PartialData:
    """Pre-encoded partially labeled examples."""

    def __init__(self, index: LexiconIndex, examples):
        self.examples = list(examples)
        self.G = np.stack([ex.features for ex in self.examples]) if self.examples else None
        self.enc = encode_partial(index, [(ex.verb, ex.partial) for ex in self.examples])

    def __len__(self):
        return len(self.examples)

    def objective(self, rows):
        def f(scores, lo, hi):
            sel = rows[lo:hi]
            sub = type(self.enc)(self.enc.verbs[sel], self.enc.observed[sel], self.enc.unobserved[sel])
            return batch_marginal(scores, sub)
        return f


def loss_and_grads(model: ModelParams, data, rows=None, workers: int = 1):
    """Mean negative log-likelihood over ``rows`` and its parameter gradients."""
    rows = np.arange(len(data)) if rows is None else np.asarray(rows)
    total, count, grads = _accumulate(model, data.G[rows], data.objective(rows), workers)
    if count == 0:
        raise NumericError("no example in the batch has finite likelihood")
    return -total / count, {k: -g / count for k, g in grads.items()}


def mean_loss(model: ModelParams, data, chunk: int = 1024) -> float:
    total, count = 0.0, 0
    for lo in range(0, len(data), chunk):
        rows = np.arange(lo, min(len(data), lo + chunk))
        scores = model.scores(data.G[rows])
        ll, _ = data.objective(rows)(scores, 0, len(rows))
        ok = np.isfinite(ll)
        total += float(ll[ok].sum())
        count += int(ok.sum())
    return -total / max(count, 1)


# ---------------------------------------------------------------------------
# training loops

def _run(state: TrainState, data, cfg: OptimizerConfig, evaluate_fn=None, workers: int = 1):
    """Shared loop: shuffled mini-batches, periodic evaluation, plateau decay,
    best-checkpoint selection.  Returns ``(state, trace)``."""
    rng = np.random.default_rng(cfg.seed)
    n = len(data)
    trace, bad = [], 0
    best_params = state.params.copy()
    order, pos = rng.permutation(n), 0

    def checkpoint():
        nonlocal best_params, bad
        rec = {"update_count": state.update_count, "lr": state.lr_current,
               "train_loss": mean_loss(state.params, data)}
        if evaluate_fn is not None:
            rec.update(evaluate_fn(state.params))
            metric = rec["dev_mean"]
            if metric > state.best_dev_metric:
                state.best_dev_metric = metric
                best_params = state.params.copy()
                bad = 0
            else:
                bad += 1
                if bad >= cfg.plateau_patience:
                    state.lr_current *= cfg.decay_factor
                    bad = 0
            rec["best_dev_mean"] = state.best_dev_metric
        trace.append(rec)
        log.debug("update %d: %s", state.update_count, rec)

    checkpoint()
    while state.update_count < cfg.max_updates and n:
        if pos + cfg.batch_size > n:
            order, pos = rng.permutation(n), 0
        rows = order[pos: pos + cfg.batch_size]
        pos += cfg.batch_size
        _, grads = loss_and_grads(state.params, data, rows, workers)
        sgd_step(state, grads, cfg)
        if state.update_count % cfg.eval_every == 0 or state.update_count == cfg.max_updates:
            checkpoint()
    if evaluate_fn is not None:
        state.params = best_params
    state.trace = trace
    return state, trace


def _dev_evaluator(dev, freq, decode):
    from situcrf.evaluation import evaluate, predict

    def fn(model):
        report = evaluate(predict(model, dev, mode=decode), dev, freq)
        rec = {f"dev_{k}": v for k, v in report.overall.items()}
        if report.rare is not None:
            rec.update({f"dev_rare_{k}": v for k, v in report.rare.items()})
        return rec
    return fn


def train_supervised(train, dev, model: ModelParams, cfg: OptimizerConfig, *, freq=None,
                     decode=None, workers: int = 1, state: TrainState | None = None):
    """Maximize the noisy-or likelihood of ``train``; pick the best dev checkpoint.

    Returns ``(TrainState, trace)`` where ``trace`` has one record per
    evaluation.  Without a dev set the final parameters are returned.
    """
    data = SupervisedData(model.index, train)
    state = state or TrainState.fresh(model, cfg)
    state.lr_current = cfg.learning_rate
    evaluate_fn = _dev_evaluator(dev, freq, decode) if dev else None
    return _run(state, data, cfg, evaluate_fn, workers)


def pretrain_marginal(web, model: ModelParams, cfg: OptimizerConfig, *, dev=None, freq=None,
                      decode=None, workers: int = 1) -> TrainState:
    """Maximize the marginal likelihood of partially labeled images."""
    state = TrainState.fresh(model, cfg)
    if not web:
        return state
    data = PartialData(model.index, web)
    evaluate_fn = _dev_evaluator(dev, freq, decode) if dev else None
    state, _ = _run(state, data, cfg, evaluate_fn, workers)
    return state


# ---------------------------------------------------------------------------
# gradient checking

@dataclass
class GradCheckReport:
    family: str
    tolerance: float
    errors: dict = field(default_factory=dict)   # (objective, tensor) -> max rel error

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return all(np.isfinite(e) and e < self.tolerance for e in self.errors.values())

    def lines(self):
        for (obj, name), e in sorted(self.errors.items()):
            yield f"{self.family:>11} {obj:>10} {name:<28} {e:.3e}"


def relative_error(a, b, floor: float = 1e-5) -> float:
    """Max elementwise ``|a-b| / max(|a|, |b|, floor)``."""
    a, b = np.asarray(a), np.asarray(b)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def small_problem(seed: int = 0, n_verbs: int = 3, max_roles: int = 3, max_cands: int = 4):
    """A random tiny lexicon for oracle and gradient checks."""
    rng = np.random.default_rng(seed)
    nouns = {f"n{i}": (f"noun{i}",) for i in range(6)}
    verbs, frames, v2f, cands = [], {}, {}, {}
    for vi in range(n_verbs):
        v = f"v{vi}"
        roles = [f"r{j}" for j in range(int(rng.integers(1, max_roles + 1)))]
        verbs.append(v)
        frames[f"f{vi}"] = roles
        v2f[v] = f"f{vi}"
        for e in roles:
            k = int(rng.integers(1, max_cands))
            cands[(v, e)] = [f"n{i}" for i in rng.choice(6, k, replace=False)]
    return Lexicon.build(verbs, nouns, frames, v2f, {}, cands)


def random_situation(lex: Lexicon, rng) -> Situation:
    v = lex.verbs[int(rng.integers(len(lex.verbs)))]
    return Situation(v, {e: lex.candidates(v, e)[int(rng.integers(len(lex.candidates(v, e))))]
                         for e in lex.roles(v)})


def random_model(index: LexiconIndex, family: str, p: int, seed: int, *, m=3, o=3, t=2,
                 scale=0.5, zero=False) -> ModelParams:
    model = init_model(index, family, p, m=m, o=m if family.startswith("inner") else o,
                       t=t, seed=seed)
    rng = np.random.default_rng([seed, 7])
    for arr in model.arrays().values():
        arr[...] = 0.0 if zero else rng.normal(0.0, scale, arr.shape)
    if model.regression.triple_weights is not None and family != "regression":
        model.regression.keep = rng.random(index.n_triples) < 0.7
    return model


def grad_check(family: str, tolerance: float = 1e-4, *, seed: int = 0, step: float = 1e-5,
               p: int = 5, zero: bool = False) -> GradCheckReport:
    """Compare analytic gradients of both objectives with central differences."""
    from situcrf.dataset import Example, PartialExample

    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    lex = small_problem(seed)
    index = lex.index
    rng = np.random.default_rng([seed, 11])
    model = random_model(index, family, p, seed, zero=zero)
    examples = []
    for i in range(4):
        anns = [random_situation(lex, rng) for _ in range(int(rng.integers(1, 4)))]
        examples.append(Example(f"x{i}", rng.normal(size=p), anns))
    partials = []
    for i in range(4):
        s = random_situation(lex, rng)
        keep = [e for e in s.frame if rng.random() < 0.5]
        partials.append(PartialExample(f"w{i}", rng.normal(size=p), s.verb,
                                       {e: s.frame[e] for e in keep}))
    report = GradCheckReport(family, tolerance)
    for obj_name, data in (("noisy-or", SupervisedData(index, examples)),
                           ("marginal", PartialData(index, partials))):
        _, grads = loss_and_grads(model, data)
        for name, arr in model.arrays().items():
            numeric = np.zeros_like(arr)
            flat, nflat = arr.reshape(-1), numeric.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + step
                up = mean_loss(model, data)
                flat[i] = old - step
                down = mean_loss(model, data)
                flat[i] = old
                nflat[i] = (up - down) / (2 * step)
            report.errors[(obj_name, name)] = relative_error(grads[name], numeric)
    return report
