"""How a spectrum becomes a short sequence, and how a patch becomes a spectrum.

Piece-wise scanning cuts L bands into R pieces and reads them in lockstep,
so the recurrence runs over ceil(L/R) steps of width R instead of L steps of
width one. The gated merge collapses a P x P patch to one spectrum by
weighting each neighbor band by a learned sigmoid mask.
"""
import numpy as np

from spectralmamba import ModelConfig, count_macs, param_count
from spectralmamba.data import extract_patch, normalize, synth_scene
from spectralmamba.model import gssm_mask, gssm_merge, init_weights, pss_scan, pss_unscan
from spectralmamba.ndtensor import DiffTensor

bands = np.arange(1, 11)
print("10 bands in 3 pieces (rows are steps, columns are pieces):")
print(pss_scan(bands, 3))
print("unscanned:", pss_unscan(pss_scan(bands, 3), 10))

# cost of the sweep on a Houston-sized spectrum; more pieces means a wider,
# shorter sequence and a bigger block
print("\n  R  steps    params   MACs@64")
for r in (1, 2, 4, 6, 8):
    cfg = ModelConfig(bands=144, pieces=r, classes=15, variant="pixelwise")
    print(f"  {r}  {cfg.piece_len:5d}  {param_count(cfg):8d}  {count_macs(cfg):9d}")

cube, labels = synth_scene(16, 16, 24, 3, noise_sigma=0.05, seed=3)
cube = normalize(cube)
cfg = ModelConfig(bands=24, pieces=4, classes=3)
weights = init_weights(cfg, 0)
patch = extract_patch(cube, 8, 8, cfg.patch)
mask = gssm_mask(DiffTensor(patch), weights.gssm).data
merged = gssm_merge(patch, weights.gssm).data
print(f"\npatch {patch.shape}, mask range [{mask.min():.3f}, {mask.max():.3f}]")
print("center spectrum :", np.round(patch[:6, 1, 1], 3))
print("merged spectrum :", np.round(merged[:6], 3))
