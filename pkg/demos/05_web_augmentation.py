"""Query phrases, a simulated web set and self-training.

Substructures seen in training become search phrases through each verb's
template.  Retrieved images inherit the query's partial frame as a weak
label.  A trained model then keeps only the top-k images of each rare
label group before marginal pretraining.
"""
from dataclasses import replace

from situcrf.augmentation import (ingest_web_set, select_queries, self_train_filter,
                                  simulate_retrieval)
from situcrf.benchmarks import augmentation_trial
from situcrf.dataset import SynthConfig, count_frequencies, synth_generate
from situcrf.potentials import init_model
from situcrf.training import DESK_SUPERVISED, train_supervised

train, dev, lex, world = synth_generate(SynthConfig(n_train=300, noise=2.0), 0, return_world=True)
freq = count_frequencies(train)
manifest = select_queries(freq, lex)
print(f"{len(manifest)} query phrases, for example:")
for q in manifest[:5]:
    print(f"  {q.phrase!r:<40} seen {q.train_count} times")

web = ingest_web_set(manifest, simulate_retrieval(world, manifest, 20, 0.5, seed=0), train)
print(f"web set: {len(web)} weakly labeled images")

# rank the web set with a quickly trained model and keep the top 10 per rare label
model = init_model(lex.index, "tensor+reg", 64, m=16, o=16, seed=0, freq=freq)
state, _ = train_supervised(train, dev, model, replace(DESK_SUPERVISED, max_updates=500), freq=freq)
kept = self_train_filter(web, state.params, 10, freq)
print(f"self-train filter keeps {len(kept)} of {len(web)}")

# the whole experiment: baseline, pretraining on clean and noisy web sets, filtered
r = augmentation_trial(seed=0)
print(f"dev mean  baseline {r.baseline:.3f}  +clean web {r.pretrained_clean:.3f}  "
      f"+noisy web {r.pretrained_noisy:.3f}  +filtered {r.pretrained_filtered:.3f}")
print("web sizes:", r.web_sizes)
