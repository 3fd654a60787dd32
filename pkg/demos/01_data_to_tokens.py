"""From raw synthetic EEG to the masked token grid the encoder sees.

Run: python3 demos/01_data_to_tokens.py
"""

import numpy as np

from reve.eeg_data import PreprocessConfig, SynthSpec, preprocess, synth_generate
from reve.masking import MaskParams, block_mask, nearest_masked_distance, random_mask
from reve.patching import PatchConfig, segment
from reve.posenc import FourierConfig, extend_positions, fourier_encode

# Two classes that differ only in where their spectral peak sits (10 Hz vs 25 Hz),
# recorded at 256 Hz so the pipeline has something to resample.
spec = SynthSpec(recordings_per_class=4, channels=12, duration=12.0, sample_rate=256.0)
raw = synth_generate(spec)
print(f"{len(raw)} recordings, {raw[0].n_channels} channels, {raw[0].n_samples} samples @ {raw[0].sample_rate:g} Hz")

clean = preprocess(raw, PreprocessConfig())
rec = clean[0]
print(f"after preprocessing: {rec.n_samples} samples @ {rec.sample_rate:g} Hz, "
      f"per-channel std {rec.data.std(1).round(2)}")

grid = segment(rec, PatchConfig(w=200, o=20))
C, p, w = grid.patches.shape
print(f"patches: {C} channels x {p} windows of {w} samples (stride {w - 20})")

# Each token gets a 4D coordinate: electrode (x, y, z) plus its window index.
ext = extend_positions(rec.channel_positions(), p)
feats = fourier_encode(ext, n_freq=4)
print(f"4D coordinates {ext.shape} -> Fourier features {feats.shape}")
print("first electrode, first window:", ext[0, 0].round(3))

# Block masking hides contiguous space-time regions; random masking scatters.
P = rec.channel_positions()
block = block_mask(P, p, MaskParams(ratio=0.55), seed=0)
scatter = random_mask(C, p, 0.55, seed=0)
for name, m in (("block", block), ("random", scatter)):
    print(f"\n{name} mask ({m.n_masked}/{C * p} hidden, nearest-masked distance "
          f"{nearest_masked_distance(m, P):.2f} cm):")
    for c in range(C):
        print(f"  {rec.channel_names[c]:>4} " + "".join("." if v else "#" for v in m.visible[c]))
