"""Supervised training on the noise-free synthetic benchmark.

Ten verbs with two roles each and fifty nouns.  Features are a verb
prototype plus role views of each noun, so a good model should recover
both the verb and its frame.
"""
from dataclasses import replace

from situcrf.dataset import SynthConfig, count_frequencies, synth_generate
from situcrf.evaluation import evaluate, predict
from situcrf.potentials import init_model
from situcrf.training import DESK_SUPERVISED, train_supervised

cfg = SynthConfig(noise=0.0)
train, dev, lex = synth_generate(cfg, seed=0)
freq = count_frequencies(train)
print(f"{len(train)} train / {len(dev)} dev, {lex.index.n_triples} candidate triples")

model = init_model(lex.index, "tensor+reg", cfg.n_features, m=16, o=16, seed=0, freq=freq)
opt = replace(DESK_SUPERVISED, max_updates=4000, eval_every=500)
state, trace = train_supervised(train, dev, model, opt, freq=freq)
for row in trace:
    if "dev_mean" in row:
        print(f"update {row['update_count']:>5}  loss {row['train_loss']:.3f}  dev mean {row['dev_mean']:.3f}")

report = evaluate(predict(state.params, dev), dev, freq)
print(report.table())
