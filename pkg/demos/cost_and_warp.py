"""Two quick non-training checks: the modulation overhead and 3D-consistent noise warping.

    python3 demos/cost_and_warp.py
"""
import numpy as np

from tokd.analysis import count_params_flops, overhead_ratio
from tokd.autodiff import Rng
from tokd.blocks import BlockVariant
from tokd.geometry import Intrinsics, NoiseWarpConfig, Pose, warp_noise
from tokd.model import PAPER_CONFIG

# Modulation adds a handful of per-token multiply-adds next to attention and the FFN.
for v in BlockVariant:
    c = count_params_flops(PAPER_CONFIG.replace(variant=v))
    print(f"{v.value:10s} {c['params'] / 1e6:8.1f} M params  {c['flops'] / 1e9:9.2f} GFLOPs per target view")
print(f"tokd_plus / plain FLOPs: {overhead_ratio(PAPER_CONFIG)['flop_ratio']:.5f}")

# Warp one view's noise into a camera shifted sideways; pixels that see nothing from the
# first view get fresh noise blended in and are renormalized back to unit variance.
intr = Intrinsics(50.0, 50.0, 50.0, 50.0, 100, 100)
n1 = np.random.default_rng(0).normal(size=(100, 100, 4))
p1, p2 = Pose.identity(), Pose.from_center(np.eye(3), [1.5, 0.0, 0.0])
n2, overlap = warp_noise(n1, p1, p2, intr, NoiseWarpConfig(alpha=0.5), Rng(1))
print(f"overlap {overlap.mean():.0%} of pixels; variance inside {n2[overlap].var():.3f}, "
      f"outside {n2[~overlap].var():.3f}")
