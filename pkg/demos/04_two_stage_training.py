"""
Two-stage adaptation, end to end
================================

Stage I trains on labeled source and unlabeled target batches with
output-space discriminators and, after a warmup, consistency between the
two heads. Its fused predictions label the target set, and Stage II
fine-tunes on those labels only.

The iteration counts here are tiny so the script finishes in about a minute;
the defaults in ``TrainConfig`` are what the ablations use.
"""

from memreg import pipeline as P
from memreg.models import SegModel

cfg = P.TrainConfig(stage1_iters=200, stage2_iters=100, eval_every=50, val_count=8, eval_count=16)
target = P.target_domain(cfg)

before = P.evaluate_model(SegModel(seed=cfg.seed), target, cfg.eval_count)
print(f"untrained fused mIoU on target: {100 * before.fused_miou:.1f}")

stage1 = P.train_stage1(cfg, log=print)
m1 = P.evaluate(stage1.checkpoint, target, cfg.eval_count)
print(f"stage I (best snapshot at iter {stage1.best_iteration}): fused mIoU {100 * m1.fused_miou:.1f}, "
      f"heads disagree on {100 * m1.disagreement_rate:.1f}% of pixels")
print(stage1.csv().splitlines()[0])

pseudo = P.generate_pseudo_labels(stage1.checkpoint, target, cfg.target_size)
print("pseudo labels:", pseudo.labels.shape, "rule:", pseudo.provenance)

stage2 = P.train_stage2(cfg, stage1.checkpoint, pseudo, log=print)
m2 = P.evaluate(stage2.checkpoint, target, cfg.eval_count)
print(f"stage II: fused mIoU {100 * m2.fused_miou:.1f}")
