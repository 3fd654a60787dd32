"""Pretrain a Tiny encoder by masked reconstruction, then linear-probe it.

Run: python3 demos/02_pretrain_and_probe.py [steps]
The default 300 steps take well under a minute on one CPU core.
"""

import sys

import numpy as np

from reve.eeg_data import SynthSpec, preprocess, synth_generate
from reve.finetune import LabeledSet, ProbeConfig, checksum, probe_model
from reve.model import named_config, param_count
from reve.optim import OptimConfig, scale_lr
from reve.patching import PatchConfig
from reve.pretrain import REVE, PretrainConfig, Pretrainer, make_samples

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300

recs = preprocess(synth_generate(SynthSpec(recordings_per_class=60, seed=0)))
cfg = named_config("tiny")
print(f"Tiny encoder: {param_count(cfg):,} parameters, dim {cfg.dim}, depth {cfg.depth}")

data = LabeledSet.from_recordings(recs, PatchConfig())
idx = np.random.default_rng(0).permutation(len(data))
test, train = data.subset(idx[:30]), data.subset(idx[30:])


def probe(model, label):
    res = probe_model(model, train, test, ProbeConfig(pooling="layer-mean"))
    print(f"{label:>12}: balanced accuracy {res.metrics['balanced_accuracy']:.3f}")


model = REVE(cfg, seed=0)
probe(model, "random init")

# learning rate follows the width power law
lr = scale_lr(cfg.dim)
trainer = Pretrainer(model, make_samples(recs, 10.0, 200.0),
                     PretrainConfig(batch_size=16, steps=steps, optim=OptimConfig(lr_peak=lr)))
history = trainer.run()
for h in history[:: max(1, steps // 6)] + history[-1:]:
    print(f"step {h['step']:4d}  lr {h['lr']:.2e}  primary {h['primary']:7.2f}  secondary {h['secondary']:7.2f}")

before = checksum(model)
probe(model, f"{steps} steps")
print("encoder untouched by probing:", checksum(model) == before)
