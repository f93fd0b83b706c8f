"""
Training a small denoiser and streaming a clip through it
=========================================================

A few hundred Adam steps on one synthetic clip are enough to see the
recurrent denoiser beat its noisy input. After that the clip is run in two
halves with the state carried across, which gives the same output as one pass.
"""

# %%
import dataclasses
import time

import numpy as np

from llvd.data import VideoSequence, add_awgn, synthetic_clip
from llvd.model import build_model, denoise_sequence
from llvd.train import evaluate, load_train_config, train

model_cfg, train_cfg = load_train_config("smoke-train")
train_cfg = dataclasses.replace(train_cfg, steps=400)
print(model_cfg)

clip = synthetic_clip(length=8, size=32)
model = build_model(model_cfg, train_cfg.seed)

# %%
t0 = time.perf_counter()
model, records = train(model, train_cfg, clip)
losses = np.array([r.loss for r in records])
print(f"{len(records)} steps in {time.perf_counter() - t0:.0f} s")
print("block means:", np.round(losses.reshape(-1, 100).mean(axis=1), 4))

# %%
noisy = add_awgn(clip, 25, 123)
baseline = evaluate(lambda s: s, [noisy], [clip])
denoised = evaluate(model, [noisy], [clip])
print(f"noisy {baseline.mean_psnr:.2f} dB -> denoised {denoised.mean_psnr:.2f} dB")

# %%
# The model is causal and keeps its memory in an explicit state, so a clip can
# be processed in pieces.
whole, _ = denoise_sequence(model, noisy)
first, state = denoise_sequence(model, VideoSequence(noisy.frames[:3], "rgb"))
rest, _ = denoise_sequence(model, VideoSequence(noisy.frames[3:], "rgb"), state)
print(np.array_equal(np.concatenate([first.frames, rest.frames]), whole.frames))
