"""Acceptance criteria, one test each.

The ablation criteria (3-7) share one run of the default plan over seeds 0, 1, 2.
It is stored under ``runs/acceptance`` (override with ``MEMREG_ACCEPTANCE_DIR``)
and resumed, so arms already trained with an identical config are not retrained.
Delete the directory to force a full rerun.
"""

import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

import gradcases
from memreg import data as D
from memreg import harness as H
from memreg import losses as L
from memreg import pipeline as P
from memreg.gradcheck import check_gradients
from memreg.models import checkpoint_bytes, load_checkpoint, save_checkpoint
from memreg.optim import PolySchedule, poly_lr
from memreg.tensor import Tensor

RUN_DIR = Path(os.environ.get("MEMREG_ACCEPTANCE_DIR", Path(__file__).resolve().parents[1] / "runs" / "acceptance"))
SEEDS = (0, 1, 2)


def _note(record_property, text):
    record_property("detail", text)
    print(text)


# -- 1: gradient oracle ----------------------------------------------------
def test_criterion_1_gradient_oracle(record_property):
    cases = {**gradcases.PRIMITIVES, **gradcases.LOSSES}
    start = time.perf_counter()
    worst = {}
    for name, make in cases.items():
        rng = np.random.default_rng(1000 + sum(map(ord, name)))
        worst[name] = max(check_gradients(*make(rng)) for _ in range(20))
    elapsed = time.perf_counter() - start
    bad = {k: v for k, v in worst.items() if not v < 1e-4}
    _note(record_property, f"{len(cases)} functions x 20 instances, worst rel err "
                           f"{max(worst.values()):.2e}, {elapsed:.1f}s")
    assert not bad, bad
    assert elapsed < 60


# -- 2: closed-form loss values --------------------------------------------
def test_criterion_2_closed_form_losses(record_property):
    ce = L.seg_ce(Tensor(np.full((4, 5, 5), 0.25)), np.zeros((5, 5), dtype=int)).item()
    assert abs(ce - math.log(4)) <= 1e-5
    u = Tensor(np.full((2, 5, 5), 0.5))
    mr = L.memory_reg(u, u).item()
    assert abs(mr - 2 * math.log(2)) <= 1e-5

    rng = np.random.default_rng(0)
    p = Tensor(rng.dirichlet(np.ones(5), size=(4, 4)).transpose(2, 0, 1))
    q = Tensor(np.eye(5)[rng.integers(0, 5, size=(4, 4))].transpose(2, 0, 1))
    assert L.memory_reg(p, q).item() == L.memory_reg(q, p).item()
    assert L.memory_reg(q, q).item() == 0.0

    ones = [Tensor(1.0) for _ in range(5)]
    total = L.stage1_total(*ones, L.LossWeights()).item()
    assert abs(total - 1.6012) <= 1e-6
    _note(record_property, f"ce={ce:.6f} mr={mr:.6f} stage1={total:.6f}")


# -- 8: pseudo-label oracle ------------------------------------------------
def test_criterion_8_pseudo_label_oracle(record_property):
    rng = np.random.default_rng(8)
    n, c = 10_000, 5
    p = rng.dirichlet(np.ones(c), size=n)
    a = rng.dirichlet(np.ones(c), size=n)
    # force exact ties on a slice: identical classes in both maps
    p[:500, 1] = p[:500, 0]
    a[:500, 1] = a[:500, 0]
    p[500:1000] = 1.0 / c
    a[500:1000] = 1.0 / c
    fused = L.fuse_pseudo_label(p, a, axis=1).labels
    expected = np.empty(n, dtype=np.int64)
    for i in range(n):
        best, best_score = 0, -math.inf
        for k in range(c):
            score = p[i, k] + 0.5 * a[i, k]
            if score > best_score:
                best, best_score = k, score
        expected[i] = best
    mismatches = int(np.sum(fused != expected))
    _note(record_property, f"{n} pairs, {mismatches} mismatches")
    assert mismatches == 0


# -- 9: engineering invariants ---------------------------------------------
TINY = P.TrainConfig(stage1_iters=6, stage2_iters=3, eval_every=3, val_count=2, eval_count=2, crop=32,
                     source_size=8, target_size=8)


def test_criterion_9_engineering_invariants(tmp_path, record_property):
    r1 = P.train_stage1(TINY)
    r2 = P.train_stage1(TINY)
    assert r1.csv() == r2.csv()

    path = save_checkpoint(r1.final, tmp_path / "a.ckpt")
    back = load_checkpoint(path)
    for (_, x), (_, y) in zip(r1.final.model.named_parameters(), back.model.named_parameters()):
        assert x.data.tobytes() == y.data.tobytes()
    assert checkpoint_bytes(back) == path.read_bytes()

    spec = D.target_spec(TINY.target_seed)
    out = D.export_dataset(spec, 5, tmp_path / "d.bin")
    spec_back, samples = D.import_dataset(out)
    assert spec_back == spec
    for i, s in enumerate(samples):
        ref = D.generate(spec, i)
        assert s.image.tobytes() == ref.image.tobytes() and s.label.tobytes() == ref.label.tobytes()

    sched = PolySchedule(0.0002, 1000)
    assert poly_lr(sched, 0) == 0.0002 and poly_lr(sched, 1000) == 0.0
    _note(record_property, "csv determinism, checkpoint and dataset round trips, poly endpoints")


# -- 3-7: ablations --------------------------------------------------------
@pytest.fixture(scope="module")
def ablation():
    plan = H.default_plan(seeds=SEEDS)
    results = H.run_plan(plan, RUN_DIR, log=print, resume=True)
    H.emit_report(RUN_DIR)
    failed = [(r["arm"], r["seed"]) for r in results if r.get("status") != "ok"]
    assert not failed, f"failed arms: {failed}"
    return results


def _means(results, key="fused_miou", source="metrics"):
    return H.arm_means(results, key, source)


def _pts(x):
    return f"{100 * x:.2f}"


def test_criterion_3_stage1_ordering(ablation, record_property):
    m = _means(ablation)
    arms = ("source_only", "adv_only", "mr_only", "full_stage1")
    _note(record_property, "fused mIoU " + ", ".join(f"{a}={_pts(m[a])}" for a in arms))
    assert m["source_only"] < m["adv_only"]
    assert m["source_only"] < m["mr_only"]
    assert m["full_stage1"] == max(m[a] for a in arms)
    assert m["full_stage1"] - m["source_only"] >= 0.05


def test_criterion_4_stage2_ordering(ablation, record_property):
    m = _means(ablation)
    _note(record_property, f"fused mIoU full_stage1={_pts(m['full_stage1'])}, pseudo_only={_pts(m['pseudo_only'])}, "
                           f"full_stage2={_pts(m['full_stage2'])}")
    assert m["pseudo_only"] >= m["full_stage1"]
    assert m["full_stage2"] - m["pseudo_only"] >= 0.003


def test_criterion_5_both_heads_improve(ablation, record_property):
    aux, pri, fused = (_means(ablation, k) for k in ("aux_miou", "primary_miou", "fused_miou"))
    _note(record_property, f"aux {_pts(aux['lambda_0'])}->{_pts(aux['full_stage1'])}, "
                           f"primary {_pts(pri['lambda_0'])}->{_pts(pri['full_stage1'])}, "
                           f"fused {_pts(fused['full_stage1'])}")
    assert aux["full_stage1"] > aux["lambda_0"]
    assert pri["full_stage1"] > pri["lambda_0"]
    assert fused["full_stage1"] >= pri["full_stage1"] - 0.005


def test_criterion_6_disagreement_drops(ablation, record_property):
    by = {(r["arm"], r["seed"]): r["final_disagreement_rate"] for r in ablation}
    pairs = [(by[("lambda_0", s)], by[("full_stage1", s)]) for s in SEEDS]
    _note(record_property, "final disagreement lambda=0 vs full: "
                           + ", ".join(f"{_pts(a)}%->{_pts(b)}%" for a, b in pairs))
    assert all(b < a for a, b in pairs)


def test_criterion_7_lambda_sweep(ablation, record_property):
    series = H.lambda_series(ablation)
    _note(record_property, "sweep " + ", ".join(f"{lam:g}:{_pts(v)}" for lam, v, _ in series))
    lines = (RUN_DIR / H.LAMBDA_SERIES).read_text().splitlines()
    assert len(lines) == 1 + 6
    assert [lam for lam, _, _ in series] == [0.0, 0.01, 0.05, 0.1, 0.2, 0.5]
    assert all(n == len(SEEDS) for _, _, n in series)
    base = series[0][1]
    assert all(v > base for lam, v, _ in series[1:])
