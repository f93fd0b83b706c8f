"""
Where the FLOPs go
==================

Per-layer cost of the two reference denoisers at 854x480, the ablation
ladder, and a check that the analytic count agrees with what the conv
kernels actually execute.
"""

# %%
import numpy as np

from llvd.config import load_model_config
from llvd.flops import count_flops, empirical_mac_probe

large = count_flops(load_model_config("llvd-l"), 480, 854, pad=True)
print(large.table())

# %%
# 854 is not a multiple of 4, so the frame is padded to 856 before counting.
# The small model works on a 2x pixel-unshuffled frame, which buys roughly a
# 4x saving.
small = count_flops(load_model_config("llvd-s"), 480, 854, pad=True)
print(f"LLVD-L {large.gflops:.2f} GFLOPs, LLVD-S {small.gflops:.2f} GFLOPs, ratio {small.gflops / large.gflops:.3f}")

# %%
for name in ("ablation-lstm-only", "ablation-encdec", "ablation-encdec-lstm1", "llvd-s", "llvd-l"):
    rep = count_flops(load_model_config(name), 480, 854, pad=True)
    print(f"{name:<24} {rep.gflops:8.2f}")

# %%
# Cost is linear in pixel count, so going from 256x256 to 854x480 multiplies
# it by about 6.27 (6.25 before padding).
for name in ("llvd-l", "llvd-s"):
    cfg = load_model_config(name)
    print(name, round(count_flops(cfg, 480, 854, pad=True).gflops / count_flops(cfg, 256, 256).gflops, 4))

# %%
# The analytic count should match the multiply-accumulates the forward pass
# actually runs, exactly.
cfg = load_model_config("llvd-s-tiny")
analytic = count_flops(cfg, 32, 32).total_macs
measured = empirical_mac_probe(cfg, 32, 32)
print(analytic, measured, analytic == measured)
assert np.int64(analytic) == measured
