"""
Concordance and the two fusion blocks
=====================================

CCC rewards predictions that track the target *and* sit on the same scale,
so a perfectly correlated but shifted prediction still loses points.
"""
import numpy as np

from afusion.autodiff import Tensor
from afusion.fusion import ChannelAttention, LeaderFollowerAttention
from afusion.metrics import ccc

t = np.linspace(0, 4 * np.pi, 200)
target = 0.6 * np.sin(t)

print("exact copy     ", ccc(target, target))
print("shifted by 0.3 ", round(ccc(target, target + 0.3), 4))
print("half amplitude ", round(ccc(target, 0.5 * target), 4))
print("constant       ", ccc(np.zeros_like(target), target))

# channel attention: a softmax over modalities, per time step.
# zero-initialised weights start as a plain average of the branches.
rng = np.random.default_rng(1)
visual, audio = Tensor(rng.normal(size=(6, 4))), Tensor(rng.normal(size=(6, 4)))
can = ChannelAttention(2, 4, rng, np.float64, zero_init=True)
out = can([visual, audio])
print("\nCAN weights at init:\n", out.attention_weights[:2])
print("fused == mean:", np.allclose(out.fused.data, (visual.data + audio.data) / 2))

# leader-follower attention: the leader queries keys from every modality
lfan = LeaderFollowerAttention(2, 4, 3, 5, 0, rng, np.float64)
res = lfan([visual, audio])
print("\nLFAN attention rows sum to", res.attention_weights.sum(-1).round(6))
print("fused shape", res.fused.shape)
