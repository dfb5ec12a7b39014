"""Desk-scale synthetic experiments.

``sparsity_trial`` trains several potential families on one power-law
benchmark and reports rare and common subset accuracies.
``augmentation_trial`` measures what marginal pretraining on a simulated
web set (clean-ish, noisy, and self-train filtered) adds on top of
supervised training with a small training set.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from situcrf.augmentation import (ingest_web_set, select_queries, self_train_filter,
                                  simulate_retrieval)
from situcrf.dataset import SynthConfig, count_frequencies, rare_mask, synth_generate
from situcrf.evaluation import dev_mean, evaluate, predict
from situcrf.potentials import init_model
from situcrf.training import DESK_PRETRAIN, DESK_SUPERVISED, train_supervised, pretrain_marginal

SPARSITY_FAMILIES = ("regression", "tensor", "tensor+reg", "inner", "inner+reg", "noun+reg")


@dataclass
class SparsityResult:
    seed: int
    n_rare: int
    n_common: int
    rare: dict = field(default_factory=dict)      # family -> metrics dict
    common: dict = field(default_factory=dict)
    seconds: float = 0.0


def sparsity_trial(seed: int, *, families=SPARSITY_FAMILIES, noise: float = 2.0,
                   updates: int = 2000, dims: int = 16, synth: SynthConfig | None = None,
                   workers: int = 1) -> SparsityResult:
    """Train each family on the power-law benchmark; split dev into rare and common."""
    t0 = time.perf_counter()
    cfg = synth or SynthConfig(noise=noise)
    train, dev, lex = synth_generate(cfg, seed)
    freq = count_frequencies(train)
    mask = rare_mask(dev, freq)
    rare_dev = [ex for ex, m in zip(dev, mask) if m]
    common_dev = [ex for ex, m in zip(dev, mask) if not m]
    opt = replace(DESK_SUPERVISED, max_updates=updates, seed=seed)
    out = SparsityResult(seed, len(rare_dev), len(common_dev))
    for fam in families:
        model = init_model(lex.index, fam, cfg.n_features, m=dims, o=dims, seed=seed, freq=freq)
        state, _ = train_supervised(train, dev, model, opt, freq=freq, workers=workers)
        out.rare[fam] = evaluate(predict(state.params, rare_dev), rare_dev).overall
        out.common[fam] = evaluate(predict(state.params, common_dev), common_dev).overall
    out.seconds = time.perf_counter() - t0
    return out


@dataclass
class AugmentationResult:
    seed: int
    n_queries: int
    baseline: float
    pretrained_clean: float       # web set at ``low_noise``
    pretrained_noisy: float       # web set at ``high_noise``, unfiltered
    pretrained_filtered: float    # same noisy set after the self-train filter
    web_sizes: dict = field(default_factory=dict)
    seconds: float = 0.0


def augmentation_trial(seed: int, *, family: str = "tensor+reg", n_train: int = 300,
                       noise: float = 2.0, per_query: int = 20, low_noise: float = 0.2,
                       high_noise: float = 0.5, k: int = 10, dims: int = 16,
                       updates: int = 1500, pretrain_updates: int = 1500,
                       workers: int = 1) -> AugmentationResult:
    """Dev mean of supervised training with and without web pretraining.

    Pretraining always starts from a fresh initialization; the filtered run
    ranks the noisy web set with the supervised baseline model.
    """
    t0 = time.perf_counter()
    cfg = SynthConfig(noise=noise, n_train=n_train)
    train, dev, lex, world = synth_generate(cfg, seed, return_world=True)
    freq = count_frequencies(train)
    manifest = select_queries(freq, lex)
    sup = replace(DESK_SUPERVISED, max_updates=updates, seed=seed)
    pre = replace(DESK_PRETRAIN, max_updates=pretrain_updates, eval_every=pretrain_updates,
                  seed=seed)

    def fresh():
        return init_model(lex.index, family, cfg.n_features, m=dims, o=dims, seed=seed, freq=freq)

    def finetune(web):
        start = pretrain_marginal(web, fresh(), pre, workers=workers).params
        state, _ = train_supervised(train, dev, start, sup, freq=freq, workers=workers)
        return dev_mean(state.params, dev)

    base, _ = train_supervised(train, dev, fresh(), sup, freq=freq, workers=workers)
    clean = ingest_web_set(manifest, simulate_retrieval(world, manifest, per_query, low_noise, seed), train)
    noisy = ingest_web_set(manifest, simulate_retrieval(world, manifest, per_query, high_noise, seed), train)
    filtered = self_train_filter(noisy, base.params, k, freq)
    return AugmentationResult(
        seed, len(manifest), dev_mean(base.params, dev),
        finetune(clean), finetune(noisy), finetune(filtered),
        {"clean": len(clean), "noisy": len(noisy), "filtered": len(filtered)},
        time.perf_counter() - t0)


def value_gap(result: SparsityResult, measure: str = "top1_value") -> dict:
    """Common minus rare accuracy per family."""
    return {f: result.common[f][measure] - result.rare[f][measure] for f in result.rare}


def summarize(results, key) -> np.ndarray:
    return np.array([key(r) for r in results])
