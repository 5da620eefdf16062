"""Two-stage training: adversarial + memory-regularized Stage-I, pseudo labels, Stage-II."""

from __future__ import annotations

import csv
import dataclasses
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from memreg import data as D
from memreg import losses as L
from memreg import rng as R
from memreg.errors import ConfigError, TrainingDivergedError
from memreg.metrics import MetricAccumulator, RunMetrics
from memreg.models import Discriminator, ModelCheckpoint, SegModel, disc_forward, seg_forward
from memreg.optim import SGD, Adam, PolySchedule
from memreg.tensor import no_grad

DETACH_MODES = ("teacher", "none")


@dataclass(frozen=True)
class TrainConfig:
    """All knobs of a run. Defaults are the desk-scale settings used by the ablations."""

    stage1_iters: int = 2500
    stage2_iters: int = 2500
    mr_warmup: float = 0.4  # fraction of stage1_iters trained without memory regularization
    batch_size: int = 2
    seg_lr: float = 0.02
    disc_lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    aux_seg: float = 0.5
    adv_primary: float = 0.001
    adv_aux: float = 0.0002
    lambda_mr: float = 0.1
    stage2_lambda_mr: float = 0.1
    lambda_mr_sweep: tuple = (0.0, 0.01, 0.05, 0.1, 0.2, 0.5)
    mr_detach_mode: str = "teacher"
    class_balance: bool = True
    seed: int = 0
    eval_every: int = 250
    val_count: int = 32
    eval_count: int = 128
    early_stop: bool = True
    crop: int = 48
    source_size: int = 500
    target_size: int = 500
    source_seed: int = 0
    target_seed: int = 1

    def __post_init__(self):
        ints = ("stage1_iters", "stage2_iters", "batch_size", "eval_every", "val_count", "eval_count", "crop",
                "source_size", "target_size")
        for name in ints:
            if getattr(self, name) < 1:
                raise ConfigError(f"must be >= 1, got {getattr(self, name)}", key=name)
        if not 0.0 <= self.mr_warmup < 1.0:
            raise ConfigError(f"must lie in [0, 1), got {self.mr_warmup}", key="mr_warmup")
        for name in ("seg_lr", "disc_lr"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"learning rates must be > 0, got {getattr(self, name)}", key=name)
        for name in ("aux_seg", "adv_primary", "adv_aux", "lambda_mr", "stage2_lambda_mr",
                     "momentum", "weight_decay"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"must be >= 0, got {getattr(self, name)}", key=name)
        if self.mr_detach_mode not in DETACH_MODES:
            raise ConfigError(f"must be one of {DETACH_MODES}, got {self.mr_detach_mode!r}",
                              key="mr_detach_mode")

    @property
    def mr_warmup_iters(self) -> int:
        return int(round(self.mr_warmup * self.stage1_iters))

    @property
    def loss_weights(self) -> L.LossWeights:
        return L.LossWeights(self.aux_seg, self.adv_primary, self.adv_aux, self.lambda_mr)

    @property
    def uses_adversary(self) -> bool:
        return self.adv_primary > 0 or self.adv_aux > 0

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lambda_mr_sweep"] = list(self.lambda_mr_sweep)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda_mr_sweep" in d:
            d["lambda_mr_sweep"] = tuple(d["lambda_mr_sweep"])
        return cls(**d)


def source_domain(cfg: TrainConfig) -> D.DomainSpec:
    return D.source_spec(cfg.source_seed)


def target_domain(cfg: TrainConfig) -> D.DomainSpec:
    return D.target_spec(cfg.target_seed)


# -- evaluation ------------------------------------------------------------
def evaluate_model(model: SegModel, spec: D.DomainSpec, count: int, split: str = "eval",
                   batch: int = 16) -> RunMetrics:
    """Aux, primary and fused mIoU plus disagreement on labeled held-out samples."""
    if count < 1:
        raise ValueError(f"evaluation needs at least one sample, got count={count}")
    make = {"eval": D.generate_eval, "val": D.generate_val}[split]
    acc = MetricAccumulator(spec.num_classes)
    for start in range(0, count, batch):
        samples = [make(spec, i) for i in range(start, min(count, start + batch))]
        acc.update(*_predict(model, np.stack([s.image for s in samples])), np.stack([s.label for s in samples]))
    return acc.result()


def evaluate_samples(model: SegModel, samples, batch: int = 16) -> RunMetrics:
    samples = list(samples)
    if not samples or any(s.label is None for s in samples):
        raise ValueError("evaluation needs labeled samples")
    acc = MetricAccumulator(model.num_classes)
    for start in range(0, len(samples), batch):
        chunk = samples[start : start + batch]
        acc.update(*_predict(model, np.stack([s.image for s in chunk])), np.stack([s.label for s in chunk]))
    return acc.result()


def evaluate(checkpoint: ModelCheckpoint, eval_spec: D.DomainSpec, count: int) -> RunMetrics:
    return evaluate_model(checkpoint.model, eval_spec, count)


def _predict(model: SegModel, images: np.ndarray):
    with no_grad():
        a, p = seg_forward(model, images, False)
    return a.data, p.data


# -- trace bookkeeping -----------------------------------------------------
METRIC_COLUMNS = ("aux_miou", "primary_miou", "fused_miou", "disagreement_rate")
STAGE1_LOSSES = ("seg_primary", "seg_aux", "adv_primary", "adv_aux", "mr", "total", "d_primary", "d_aux")
STAGE2_LOSSES = ("pseg_primary", "pseg_aux", "mr", "total")


def trace_csv(rows: list, loss_columns) -> str:
    header = ["iter", "lr", *loss_columns, *METRIC_COLUMNS]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(row.get(k)) for k in header])
    return buf.getvalue()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


@dataclass
class StageResult:
    """Output of one training stage.

    ``checkpoint`` is the snapshot kept by early stopping (best fused mIoU on the
    validation split); ``final`` is the model after the last iteration.
    """

    checkpoint: ModelCheckpoint
    final: ModelCheckpoint
    trace: list
    loss_columns: tuple
    best_iteration: int
    best: Optional[RunMetrics] = None
    extras: dict = field(default_factory=dict)

    def csv(self) -> str:
        return trace_csv(self.trace, self.loss_columns)

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.write_text(self.csv())
        return path


class _Snapshotter:
    """Evaluates every ``eval_every`` iterations and keeps the best fused-mIoU weights."""

    def __init__(self, cfg: TrainConfig, model: SegModel, val_spec: D.DomainSpec, total: int):
        self.cfg, self.model, self.val_spec, self.total = cfg, model, val_spec, total
        self.best_score = -math.inf
        self.best_iter = 0
        self.best_arrays = None
        self.best_metrics = None

    def maybe(self, it: int, row: dict):
        done = it + 1
        if done % self.cfg.eval_every and done != self.total:
            return
        m = evaluate_model(self.model, self.val_spec, self.cfg.val_count, split="val")
        row.update(m.summary())
        score = m.fused_miou
        if not self.cfg.early_stop or score > self.best_score or done == self.total and self.best_arrays is None:
            self.best_score, self.best_iter, self.best_metrics = score, done, m
            self.best_arrays = {k: v.copy() for k, v in self.model.state_arrays().items()}

    def best_model(self) -> SegModel:
        model = SegModel(**self.model.config())
        model.load_arrays(self.best_arrays)
        return model


def _check_finite(it: int, components: dict):
    if not all(math.isfinite(v) for v in components.values()):
        raise TrainingDivergedError(it, components)


def _clone(model):
    out = type(model)(**model.config())
    out.load_arrays(model.state_arrays())
    return out


# -- Stage-I ---------------------------------------------------------------
def train_stage1(cfg: TrainConfig, source_spec: Optional[D.DomainSpec] = None,
                 target_spec: Optional[D.DomainSpec] = None, model: Optional[SegModel] = None,
                 log=None) -> StageResult:
    """Joint source segmentation, output-space adversarial alignment and memory regularization.

    Each iteration makes one segmentation/generator step and then, if any
    adversarial weight is nonzero, one step for each discriminator on detached
    predictions. Memory regularization on target batches switches on at
    ``cfg.mr_warmup_iters``.
    """
    source_spec = source_spec or source_domain(cfg)
    target_spec = target_spec or target_domain(cfg)
    w = cfg.loss_weights
    detach = cfg.mr_detach_mode == "teacher"
    model = model or SegModel(num_classes=source_spec.num_classes, seed=cfg.seed)
    d_p = Discriminator(model.num_classes, seed=cfg.seed, stream=0)
    d_a = Discriminator(model.num_classes, seed=cfg.seed, stream=1)
    opt = SGD(model.parameters(), cfg.seg_lr, cfg.momentum, cfg.weight_decay)
    opt_dp = Adam(d_p.parameters(), cfg.disc_lr)
    opt_da = Adam(d_a.parameters(), cfg.disc_lr)
    sched = PolySchedule(cfg.seg_lr, cfg.stage1_iters)
    dsched = PolySchedule(cfg.disc_lr, cfg.stage1_iters)
    crop = (cfg.crop, cfg.crop)
    src = D.batch_iter(source_spec, cfg.batch_size, 2 * cfg.seed, dataset_size=cfg.source_size, crop=crop)
    tgt = D.batch_iter(target_spec, cfg.batch_size, 2 * cfg.seed + 1, dataset_size=cfg.target_size,
                       crop=crop, labeled=False)
    drop = R.make_rng(cfg.seed, R.STREAM_DROPOUT, 1)
    snap = _Snapshotter(cfg, model, target_spec, cfg.stage1_iters)
    use_adv = cfg.uses_adversary
    trace = []

    for it in range(cfg.stage1_iters):
        lr, dlr = sched(it), dsched(it)
        sb, tb = next(src), next(tgt)
        mr_on = w.lambda_mr > 0 and it >= cfg.mr_warmup_iters
        n = len(sb.images)
        images = np.concatenate([sb.images, tb.images]) if (use_adv or mr_on) else sb.images
        p_aux, p_pri = seg_forward(model, images, True, drop)
        s_aux, s_pri = p_aux[:n], p_pri[:n]
        seg_p = L.seg_ce(s_pri, sb.labels)
        seg_a = L.seg_ce(s_aux, sb.labels)
        adv_p = adv_a = mr = 0.0
        if use_adv or mr_on:
            t_aux, t_pri = p_aux[n:], p_pri[n:]
        if use_adv:
            adv_p = L.adv_g_loss(disc_forward(d_p, t_pri))
            adv_a = L.adv_g_loss(disc_forward(d_a, t_aux))
        if mr_on:
            mr = L.memory_reg(t_aux, t_pri, detach_teacher=detach)
        total = L.stage1_total(seg_p, seg_a, adv_p, adv_a, mr, w)
        row = {"iter": it + 1, "lr": lr, "seg_primary": seg_p.item(), "seg_aux": seg_a.item(),
               "adv_primary": _val(adv_p), "adv_aux": _val(adv_a), "mr": _val(mr), "total": total.item()}
        _check_finite(it + 1, {k: row[k] for k in STAGE1_LOSSES[:6]})
        model.zero_grad()
        total.backward()
        opt.step(lr)

        if use_adv:
            d_p.zero_grad()
            d_a.zero_grad()
            ld_p = L.adv_d_loss(disc_forward(d_p, s_pri.detach()), disc_forward(d_p, t_pri.detach()))
            ld_a = L.adv_d_loss(disc_forward(d_a, s_aux.detach()), disc_forward(d_a, t_aux.detach()))
            row["d_primary"], row["d_aux"] = ld_p.item(), ld_a.item()
            _check_finite(it + 1, {"d_primary": row["d_primary"], "d_aux": row["d_aux"]})
            (ld_p + ld_a).backward()
            opt_dp.step(dlr)
            opt_da.step(dlr)
        snap.maybe(it, row)
        trace.append(row)
        if log is not None and row.get("fused_miou") is not None:
            log(f"stage1 iter {it + 1}: loss {row['total']:.4f} val fused mIoU {row['fused_miou']:.4f}")

    meta = {"stage": 1, "config": cfg.to_dict()}
    optim = {"seg": opt.state_dict(), "disc_primary": opt_dp.state_dict(), "disc_aux": opt_da.state_dict()}
    final = ModelCheckpoint(_clone(model), _clone(d_p), _clone(d_a), optim, cfg.stage1_iters, meta)
    best = ModelCheckpoint(snap.best_model(), _clone(d_p), _clone(d_a), optim, snap.best_iter, meta)
    return StageResult(best, final, trace, STAGE1_LOSSES, snap.best_iter, snap.best_metrics,
                       {"source_draws": src.draws, "target_draws": tgt.draws})


def _val(x) -> float:
    return x.item() if hasattr(x, "item") else float(x)


# -- pseudo labels ---------------------------------------------------------
@dataclass
class PseudoDataset:
    """Frozen fused-rule labels for target training samples ``0..count-1``."""

    spec: D.DomainSpec
    labels: np.ndarray  # [count, H, W] uint8
    weights: L.ClassBalanceWeights
    provenance: str = L.FUSION_RULE

    def __len__(self):
        return len(self.labels)


def generate_pseudo_labels(checkpoint: ModelCheckpoint, target_spec: D.DomainSpec, count: int,
                           batch: int = 16) -> PseudoDataset:
    model = checkpoint.model
    if model.num_classes != target_spec.num_classes:
        raise ConfigError(f"checkpoint has {model.num_classes} classes, target spec has "
                          f"{target_spec.num_classes}", key="num_classes")
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    maps = []
    for start in range(0, count, batch):
        images = np.stack([D.generate(target_spec, i).image for i in range(start, min(count, start + batch))])
        a, p = _predict(model, images)
        maps.append(L.fuse_pseudo_label(p, a, axis=1).labels)
    labels = np.concatenate(maps)
    return PseudoDataset(target_spec, labels, L.class_balance_weights([labels], model.num_classes))


# -- Stage-II --------------------------------------------------------------
def train_stage2(cfg: TrainConfig, stage1: ModelCheckpoint, pseudo: PseudoDataset, log=None) -> StageResult:
    """Target-only fine-tuning on frozen pseudo labels plus memory regularization.

    The optimizer and poly schedule restart from scratch; discriminators and
    source data are not used.
    """
    model = _clone(stage1.model)
    opt = SGD(model.parameters(), cfg.seg_lr, cfg.momentum, cfg.weight_decay)
    sched = PolySchedule(cfg.seg_lr, cfg.stage2_iters)
    weights = pseudo.weights if cfg.class_balance else None
    detach = cfg.mr_detach_mode == "teacher"
    lam = cfg.stage2_lambda_mr
    w = L.LossWeights(aux_seg=cfg.aux_seg, lambda_mr=lam)
    tgt = D.batch_iter(pseudo.spec, cfg.batch_size, 2 * cfg.seed + 1, dataset_size=len(pseudo),
                       crop=(cfg.crop, cfg.crop), labels=pseudo.labels)
    drop = R.make_rng(cfg.seed, R.STREAM_DROPOUT, 2)
    snap = _Snapshotter(cfg, model, pseudo.spec, cfg.stage2_iters)
    trace = []
    for it in range(cfg.stage2_iters):
        lr = sched(it)
        tb = next(tgt)
        p_aux, p_pri = seg_forward(model, tb.images, True, drop)
        pseg_p = L.seg_ce(p_pri, tb.labels, weights)
        pseg_a = L.seg_ce(p_aux, tb.labels, weights)
        mr = L.memory_reg(p_aux, p_pri, detach_teacher=detach) if lam > 0 else 0.0
        total = L.stage2_total(pseg_p, pseg_a, mr, w)
        row = {"iter": it + 1, "lr": lr, "pseg_primary": pseg_p.item(), "pseg_aux": pseg_a.item(),
               "mr": _val(mr), "total": total.item()}
        _check_finite(it + 1, {k: row[k] for k in STAGE2_LOSSES})
        model.zero_grad()
        total.backward()
        opt.step(lr)
        snap.maybe(it, row)
        trace.append(row)
        if log is not None and row.get("fused_miou") is not None:
            log(f"stage2 iter {it + 1}: loss {row['total']:.4f} val fused mIoU {row['fused_miou']:.4f}")

    meta = {"stage": 2, "config": cfg.to_dict()}
    optim = {"seg": opt.state_dict()}
    final = ModelCheckpoint(_clone(model), None, None, optim, cfg.stage2_iters, meta)
    best = ModelCheckpoint(snap.best_model(), None, None, optim, snap.best_iter, meta)
    return StageResult(best, final, trace, STAGE2_LOSSES, snap.best_iter, snap.best_metrics,
                       {"source_draws": 0, "target_draws": tgt.draws})
