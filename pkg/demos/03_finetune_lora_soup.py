"""Two-step fine-tuning with LoRA adapters, then a uniform soup of the runs.

Run: python3 demos/03_finetune_lora_soup.py
"""

import numpy as np
import torch

from reve.eeg_data import SynthSpec, preprocess, synth_generate
from reve.finetune import (
    Classifier,
    FinetunePlan,
    LabeledSet,
    LoraConfig,
    evaluate,
    lora_merge,
    soup,
    two_step_finetune,
)
from reve.model import named_config
from reve.patching import PatchConfig
from reve.optim import OptimConfig, scale_lr
from reve.pretrain import REVE, PretrainConfig, Pretrainer, make_samples

recs = preprocess(synth_generate(SynthSpec(recordings_per_class=40, seed=3)))
data = LabeledSet.from_recordings(recs, PatchConfig())
idx = np.random.default_rng(3).permutation(len(data))
test, val, train = data.subset(idx[:20]), data.subset(idx[20:32]), data.subset(idx[32:])

# a short self-supervised warm start for the backbone
backbone = REVE(named_config("tiny"), seed=0)
Pretrainer(backbone, make_samples(recs, 10.0, 200.0),
           PretrainConfig(batch_size=16, steps=300, optim=OptimConfig(lr_peak=scale_lr(32)))).run()
plan = dict(total_steps=150, freeze_steps=50, batch_size=16, lr=3e-3, warmup_steps=10, eval_every=10,
            lora=LoraConfig(rank=4))

members = []
for seed in (0, 1, 2):
    res = two_step_finetune(backbone, train, val, FinetunePlan(seed=seed, **plan))
    norms = [h["backbone_grad_norm"] for h in res.history]
    print(f"seed {seed}: backbone grad-norm frozen {max(norms[:50]):.1f}, then {np.mean(norms[50:]):.3f}; "
          f"val balanced accuracy {res.metrics['balanced_accuracy']:.3f}")
    lora_merge(res.model.backbone.encoder)  # fold adapters back into the weights
    members.append(res.model)

# Every member shares the same architecture, so their weights average cleanly.
avg = soup([m.state_dict() for m in members])
souped = Classifier(REVE(named_config("tiny")), 2, "attention")
souped.load_state_dict(avg)
for i, m in enumerate(members):
    print(f"member {i} test balanced accuracy {evaluate(m, test)[1]['balanced_accuracy']:.3f}")
print(f"soup     test balanced accuracy {evaluate(souped, test)[1]['balanced_accuracy']:.3f}")
with torch.no_grad():
    w = [m.head.weight for m in members]
    print("soup head == mean of member heads:", torch.allclose(souped.head.weight, sum(w) / 3))
