"""
Losses and pseudo labels
========================

Segmentation cross-entropy, the adversarial pair, the symmetric
memory-regularization term between the two heads, and the fusion rule that
turns the two heads into pseudo labels.
"""

import math

import numpy as np

from memreg import losses as L
from memreg.tensor import Tensor

uniform4 = Tensor(np.full((4, 2, 2), 0.25))
print("CE of a uniform guess over 4 classes: %.5f (ln 4 = %.5f)"
      % (L.seg_ce(uniform4, np.zeros((2, 2), int)).item(), math.log(4)))

# heads that agree confidently have no consistency penalty; uniform heads pay 2 ln C
onehot = Tensor(np.eye(3)[[[0, 1], [2, 0]]].transpose(2, 0, 1))
print("memory reg, identical one-hot heads is zero:", L.memory_reg(onehot, onehot).item() == 0.0)
u = Tensor(np.full((2, 2, 2), 0.5))
print("memory reg, uniform heads (C=2): %.5f" % L.memory_reg(u, u).item())

# discriminator scores near 0.5 everywhere: both adversarial losses sit at ln 2 per term
half = [Tensor(np.full((1, 1, 4, 4), 0.5))]
print("adv_d %.4f  adv_g %.4f" % (L.adv_d_loss(half, half).item(), L.adv_g_loss(half).item()))

print("stage-I total on unit components:", L.stage1_total(*[Tensor(1.0)] * 5).item())

# fusion: primary plus half the auxiliary, ties to the lower class id
p = np.array([0.5, 0.3, 0.2])
a = np.array([0.0, 0.6, 0.4])
print("fused label:", L.fuse_pseudo_label(p, a).labels, "scores", p + 0.5 * a)

labels = np.random.default_rng(0).choice(5, size=(10, 16, 16), p=[0.7, 0.15, 0.1, 0.05, 0.0])
print("class-balance weights:", np.round(np.asarray(L.class_balance_weights([labels], 5)), 3))
