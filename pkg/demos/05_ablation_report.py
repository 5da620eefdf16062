"""
Ablation plans and reports
==========================

A plan is a config file plus ``seeds`` and ``arms``. Each arm is a delta over
the base config; arms that share a Stage-I config share one training run.
The report is rebuilt from the stored results alone.
"""

import tempfile
from pathlib import Path

from memreg import harness as H

PLAN = """
stage1_iters = 150
stage2_iters = 50
eval_every = 50
val_count = 4
eval_count = 16
early_stop = false  # report the last iterate so the arms differ after the MR warmup
seeds = 0
arms = source_only, full_stage1, lambda_0.05
"""

plan = H.plan_from_text(PLAN)
print("arms:", plan.arm_names, "seeds:", plan.seeds)

with tempfile.TemporaryDirectory() as tmp:
    out = Path(tmp)
    H.run_plan(plan, out)
    written = H.emit_report(out)
    print(written["text"].read_text())
    print(written["lambda_series"].read_text())
