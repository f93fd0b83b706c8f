"""
Synthesizing noisy clips
========================

Seeded white Gaussian noise on a synthetic clip, a look at its statistics,
and why it is saved in the float container rather than as 8-bit PPM.
"""

# %%
import tempfile
from pathlib import Path

import numpy as np

from llvd.data import add_awgn, load_sequence, save_sequence, synthetic_clip
from llvd.metrics import psnr

clean = synthetic_clip(length=8, size=64, seed=3)
noisy = add_awgn(clean, 30, 7)
print(clean.frames.shape, clean.frames.dtype)

# %%
# Same seed, same noise. The noise is not clipped, so some values leave [0, 1].
assert np.array_equal(noisy.frames, add_awgn(clean, 30, 7).frames)
residual = noisy.frames.astype(np.float64) - clean.frames
print(f"std {residual.std() * 255:.2f}/255, min {noisy.frames.min():.3f}, max {noisy.frames.max():.3f}")

# %%
# Neighbouring pixels and frames should be uncorrelated.
def lag1(v, axis):
    v = np.moveaxis(v, axis, 0)
    return float(np.corrcoef(v[1:].ravel(), v[:-1].ravel())[0, 1])

print({name: round(lag1(residual, ax), 4) for name, ax in (("time", 0), ("rows", 2), ("cols", 3))})

# %%
# The PSNR of a clipped noisy frame is the baseline a denoiser has to beat.
print(f"noisy PSNR {np.mean([psnr(np.clip(n, 0, 1), c) for n, c in zip(noisy.frames, clean.frames)]):.2f} dB")

# %%
# The .llvt container keeps the unclipped float values exactly. 16-bit PPM
# has to clamp and quantize them.
with tempfile.TemporaryDirectory() as d:
    save_sequence(noisy, Path(d) / "llvt", "llvt")
    save_sequence(noisy, Path(d) / "ppm", "ppm16")
    exact = load_sequence(Path(d) / "llvt")
    lossy = load_sequence(Path(d) / "ppm")
print(np.array_equal(exact.frames, noisy.frames), float(np.max(np.abs(lossy.frames - noisy.frames))))
