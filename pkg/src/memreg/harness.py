"""Config files, ablation plans, arm execution and report emission."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from memreg import pipeline as P
from memreg.data import CLASS_NAMES
from memreg.errors import ConfigError
from memreg.models import save_checkpoint

# -- config files ------------------------------------------------------------
_FIELDS = {f.name: f for f in dataclasses.fields(P.TrainConfig)}


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_int(text: str) -> int:
    # accept "2500" and "2.5e3" style integers, refuse "2.5"
    try:
        return int(text)
    except ValueError:
        value = float(text)
        if not value.is_integer():
            raise ValueError(f"expected an integer, got {text!r}") from None
        return int(value)


def _parse_float_list(text: str) -> tuple:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ValueError("expected a comma-separated list of numbers")
    return tuple(float(p) for p in parts)


def _parser_for(name: str) -> Callable[[str], object]:
    default = _FIELDS[name].default
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, int):
        return _parse_int
    if isinstance(default, float):
        return float
    if isinstance(default, tuple):
        return _parse_float_list
    return str


def parse_key_values(text: str, source: str = "<config>") -> list:
    """``[(line, key, raw_value)]`` from flat ``key = value`` text; ``#`` starts a comment."""
    out = []
    seen = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value' in {source}", line=lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"missing key in {source}", line=lineno)
        if key in seen:
            raise ConfigError(f"duplicate key (first set on line {seen[key]})", line=lineno, key=key)
        seen[key] = lineno
        out.append((lineno, key, value))
    return out


def config_from_text(text: str, base: Optional[P.TrainConfig] = None, source: str = "<config>",
                     extra_keys: tuple = ()) -> tuple:
    """Parse config text into ``(TrainConfig, {extra_key: raw})``.

    Unknown keys are rejected unless listed in ``extra_keys``.
    """
    base = base or P.TrainConfig()
    changes, extras, lines = {}, {}, {}
    for lineno, key, value in parse_key_values(text, source):
        if key in extra_keys:
            extras[key] = (lineno, value)
            continue
        if key not in _FIELDS:
            raise ConfigError("unknown key", line=lineno, key=key)
        try:
            changes[key] = _parser_for(key)(value)
        except ValueError as exc:
            raise ConfigError(f"cannot parse {value!r}: {exc}", line=lineno, key=key) from None
        lines[key] = lineno
    try:
        cfg = base.replace(**changes)
    except ConfigError as exc:
        # re-raise with the line that set the offending key
        raise ConfigError(str(exc).split(": ", 1)[-1], line=lines.get(exc.key), key=exc.key) from None
    return cfg, extras


def load_config(path) -> P.TrainConfig:
    path = Path(path)
    cfg, _ = config_from_text(path.read_text(), source=str(path))
    return cfg


def config_to_text(cfg: P.TrainConfig) -> str:
    lines = []
    for name in _FIELDS:
        value = getattr(cfg, name)
        if isinstance(value, tuple):
            value = ", ".join(repr(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{name} = {value}")
    return "\n".join(lines) + "\n"


# -- plans ---------------------------------------------------------------------
STAGE1_ARMS = {
    "source_only": dict(adv_primary=0.0, adv_aux=0.0, lambda_mr=0.0),
    "adv_only": dict(lambda_mr=0.0),
    "mr_only": dict(adv_primary=0.0, adv_aux=0.0),
    "full_stage1": dict(),
}
STAGE2_ARMS = {
    "pseudo_only": dict(stage2_lambda_mr=0.0),
    "full_stage2": dict(),
}
TABLE_ARMS = tuple(STAGE1_ARMS) + tuple(STAGE2_ARMS)


def sweep_arm_name(lam: float) -> str:
    return f"lambda_{lam:g}"


@dataclass(frozen=True)
class Arm:
    name: str
    stage1: dict
    stage2: Optional[dict] = None  # None: Stage-I only

    def configs(self, base: P.TrainConfig, seed: int):
        cfg1 = base.replace(seed=seed, **self.stage1)
        cfg2 = None if self.stage2 is None else cfg1.replace(**self.stage2)
        return cfg1, cfg2


@dataclass
class ExperimentPlan:
    """Named arms, each a delta over ``base``, run for every seed in ``seeds``."""

    base: P.TrainConfig = field(default_factory=P.TrainConfig)
    arms: list = field(default_factory=list)
    seeds: tuple = (0, 1, 2)

    def __post_init__(self):
        names = [a.name for a in self.arms]
        dup = {n for n in names if names.count(n) > 1}
        if dup:
            raise ConfigError(f"duplicate arm names: {sorted(dup)}", key="arms")
        if not self.seeds:
            raise ConfigError("at least one seed is required", key="seeds")
        for arm in self.arms:
            for seed in self.seeds:
                arm.configs(self.base, seed)  # raises on an unresolvable delta

    @property
    def arm_names(self) -> list:
        return [a.name for a in self.arms]


def default_arms(base: P.TrainConfig, include_sweep: bool = True) -> list:
    arms = [Arm(n, d) for n, d in STAGE1_ARMS.items()]
    arms += [Arm(n, {}, d) for n, d in STAGE2_ARMS.items()]
    if include_sweep:
        arms += [Arm(sweep_arm_name(lam), {"lambda_mr": lam}) for lam in base.lambda_mr_sweep]
    return arms


def resolve_arm(name: str) -> Arm:
    if name in STAGE1_ARMS:
        return Arm(name, STAGE1_ARMS[name])
    if name in STAGE2_ARMS:
        return Arm(name, {}, STAGE2_ARMS[name])
    if name.startswith("lambda_"):
        try:
            lam = float(name[len("lambda_"):])
        except ValueError:
            pass
        else:
            return Arm(name, {"lambda_mr": lam})
    raise ConfigError(f"unknown arm {name!r}", key="arms")


def default_plan(base: Optional[P.TrainConfig] = None, seeds=(0, 1, 2)) -> ExperimentPlan:
    base = base or P.TrainConfig()
    return ExperimentPlan(base, default_arms(base), tuple(seeds))


def plan_from_text(text: str, source: str = "<plan>") -> ExperimentPlan:
    """Plan files are config files with two extra keys: ``seeds`` and ``arms``.

    ``arms`` lists arm names (``source_only``, ..., ``lambda_0.05``) or the
    shorthands ``tables`` (the six Stage-I and Stage-II arms) and ``sweep`` (one arm per
    ``lambda_mr_sweep`` value). Without ``arms`` all of them run.
    """
    base, extras = config_from_text(text, source=source, extra_keys=("seeds", "arms"))
    seeds = (0, 1, 2)
    if "seeds" in extras:
        lineno, raw = extras["seeds"]
        try:
            seeds = tuple(int(s) for s in raw.split(",") if s.strip())
        except ValueError:
            raise ConfigError(f"cannot parse {raw!r} as a seed list", line=lineno, key="seeds") from None
    if "arms" not in extras:
        return ExperimentPlan(base, default_arms(base), seeds)
    lineno, raw = extras["arms"]
    arms = []
    for token in (t.strip() for t in raw.split(",")):
        if not token:
            continue
        try:
            if token == "tables":
                arms += default_arms(base, include_sweep=False)
            elif token == "sweep":
                arms += [Arm(sweep_arm_name(lam), {"lambda_mr": lam}) for lam in base.lambda_mr_sweep]
            else:
                arms.append(resolve_arm(token))
        except ConfigError as exc:
            raise ConfigError(str(exc).split(": ", 1)[-1], line=lineno, key="arms") from None
    try:
        return ExperimentPlan(base, arms, seeds)
    except ConfigError as exc:
        raise ConfigError(str(exc).split(": ", 1)[-1], line=lineno, key=exc.key) from None


def load_plan(path) -> ExperimentPlan:
    path = Path(path)
    return plan_from_text(path.read_text(), source=str(path))


# -- execution -------------------------------------------------------------
RESULT_FILE = "result.json"


def metrics_record(m) -> dict:
    return {
        "aux_miou": m.aux_miou,
        "primary_miou": m.primary_miou,
        "fused_miou": m.fused_miou,
        "disagreement_rate": m.disagreement_rate,
        "per_class_iou": [None if math.isnan(v) else float(v) for v in m.per_class_iou],
    }


class _Stage1Cache:
    """Arms whose Stage-I configs coincide share one training run."""

    def __init__(self):
        self._runs = {}

    def get(self, cfg: P.TrainConfig, log):
        key = json.dumps(cfg.to_dict(), sort_keys=True)
        if key not in self._runs:
            self._runs[key] = P.train_stage1(cfg, log=log)
        return self._runs[key]


def run_arm(plan: ExperimentPlan, arm: Arm, seed: int, out_dir: Path, cache: Optional[_Stage1Cache] = None,
            log=None) -> dict:
    """Train (or reuse) one arm for one seed and write its artifacts under ``out_dir``."""
    cache = cache or _Stage1Cache()
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg1, cfg2 = arm.configs(plan.base, seed)
    tgt = P.target_domain(cfg1)
    r1 = cache.get(cfg1, log)
    r1.write_csv(out_dir / "stage1_metrics.csv")
    save_checkpoint(r1.checkpoint, out_dir / "stage1.ckpt")
    final_eval = P.evaluate_model(r1.final.model, tgt, cfg1.eval_count)
    result = {"arm": arm.name, "seed": seed, "status": "ok", "stages": 1,
              "lambda_mr": cfg1.lambda_mr, "config": cfg1.to_dict(),
              "best_iteration": r1.best_iteration, "final_disagreement_rate": final_eval.disagreement_rate}
    best = r1.checkpoint
    if cfg2 is not None:
        pseudo = P.generate_pseudo_labels(r1.checkpoint, tgt, cfg2.target_size)
        r2 = P.train_stage2(cfg2, r1.checkpoint, pseudo, log=log)
        r2.write_csv(out_dir / "stage2_metrics.csv")
        save_checkpoint(r2.checkpoint, out_dir / "stage2.ckpt")
        best = r2.checkpoint
        final_eval = P.evaluate_model(r2.final.model, tgt, cfg2.eval_count)
        result.update(stages=2, config=cfg2.to_dict(), best_iteration=r2.best_iteration,
                      final_disagreement_rate=final_eval.disagreement_rate,
                      class_weights=[float(w) for w in pseudo.weights.weights])
    result["metrics"] = metrics_record(P.evaluate_model(best.model, tgt, cfg1.eval_count))
    result["final_metrics"] = metrics_record(final_eval)
    (out_dir / RESULT_FILE).write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return result


def _finished(arm_dir: Path, arm: Arm, plan: ExperimentPlan, seed: int) -> Optional[dict]:
    """The stored result of this arm if it completed with the same config, else None."""
    path = arm_dir / RESULT_FILE
    if not path.exists():
        return None
    try:
        result = json.loads(path.read_text())
    except ValueError:
        return None
    cfg1, cfg2 = arm.configs(plan.base, seed)
    expected = (cfg2 or cfg1).to_dict()
    if result.get("status") != "ok" or result.get("config") != expected:
        return None
    return result


def run_plan(plan: ExperimentPlan, out_dir, log=None, resume: bool = False) -> list:
    """Run every arm x seed; a failing arm is recorded as FAILED and the rest continue.

    With ``resume``, arms whose ``result.json`` already holds a successful run
    of the same config are read back instead of retrained.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "plan.cfg").write_text(config_to_text(plan.base)
                                      + f"seeds = {', '.join(map(str, plan.seeds))}\n"
                                      + f"arms = {', '.join(plan.arm_names)}\n")
    results = []
    for seed in plan.seeds:
        cache = _Stage1Cache()
        for arm in plan.arms:
            arm_dir = out_dir / arm.name / f"seed{seed}"
            done = _finished(arm_dir, arm, plan, seed) if resume else None
            if done is not None:
                results.append(done)
                continue
            if log:
                log(f"arm {arm.name} seed {seed}")
            try:
                results.append(run_arm(plan, arm, seed, arm_dir, cache, log))
            except Exception as exc:  # one broken arm must not sink the whole plan
                arm_dir.mkdir(parents=True, exist_ok=True)
                failed = {"arm": arm.name, "seed": seed, "status": "FAILED",
                          "error": f"{type(exc).__name__}: {exc}"}
                (arm_dir / RESULT_FILE).write_text(json.dumps(failed, indent=2, sort_keys=True) + "\n")
                (arm_dir / "error.txt").write_text(traceback.format_exc())
                results.append(failed)
    return results


# -- reports ---------------------------------------------------------------
REPORT_CSV = "report.csv"
REPORT_TXT = "report.txt"
LAMBDA_SERIES = "lambda_series.csv"

_METRIC_KEYS = ("aux_miou", "primary_miou", "fused_miou", "disagreement_rate")


def collect_results(run_dir) -> list:
    run_dir = Path(run_dir)
    results = [json.loads(p.read_text()) for p in sorted(run_dir.glob(f"*/seed*/{RESULT_FILE}"))]
    order = {n: i for i, n in enumerate(_plan_arm_order(run_dir))}
    results.sort(key=lambda r: (order.get(r["arm"], len(order)), r["arm"], r["seed"]))
    return results


def _plan_arm_order(run_dir: Path) -> list:
    plan_file = run_dir / "plan.cfg"
    if plan_file.exists():
        for _, key, value in parse_key_values(plan_file.read_text()):
            if key == "arms":
                return [a.strip() for a in value.split(",") if a.strip()]
    return []


def _f(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return f"{v:.6f}"


def report_rows(results: list, num_classes: int = len(CLASS_NAMES)) -> list:
    """Arm x seed rows followed by one ``mean`` row per arm (over completed seeds)."""
    header = ["arm", "seed", "status", *_METRIC_KEYS, *(f"iou_{c}" for c in CLASS_NAMES[:num_classes])]
    rows = [header]
    by_arm = {}
    for r in results:
        by_arm.setdefault(r["arm"], []).append(r)
    for arm, items in by_arm.items():
        done = []
        for r in items:
            if r.get("status") != "ok":
                rows.append([arm, str(r["seed"]), "FAILED"] + [""] * (len(header) - 3))
                continue
            m = r["metrics"]
            done.append(m)
            rows.append([arm, str(r["seed"]), "ok", *(_f(m[k]) for k in _METRIC_KEYS),
                         *(_f(v) for v in m["per_class_iou"])])
        if done:
            mean = [_f(float(np.mean([m[k] for m in done]))) for k in _METRIC_KEYS]
            per_class = []
            for c in range(num_classes):
                vals = [m["per_class_iou"][c] for m in done if m["per_class_iou"][c] is not None]
                per_class.append(_f(float(np.mean(vals))) if vals else "")
            rows.append([arm, "mean", f"{len(done)}/{len(items)}", *mean, *per_class])
        else:
            rows.append([arm, "mean", "FAILED"] + [""] * (len(header) - 3))
    return rows


def _render_text(rows: list) -> str:
    """Fixed-width table derived from the CSV rows (scores shown in points)."""
    header, body = rows[0], rows[1:]
    shown = []
    for row in body:
        cells = list(row[:3])
        for v in row[3:]:
            cells.append(f"{100 * float(v):.2f}" if v else "-")
        shown.append(cells)
    titles = ["arm", "seed", "status", "aux", "primary", "fused", "disagree%",
              *(h[len("iou_"):] for h in header[7:])]
    widths = [max(len(t), *(len(r[i]) for r in shown)) if shown else len(t) for i, t in enumerate(titles)]
    lines = ["  ".join(t.ljust(w) for t, w in zip(titles, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    prev = None
    for cells in shown:
        if prev is not None and cells[0] != prev:
            lines.append("")
        prev = cells[0]
        lines.append("  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip())
    return "mIoU and per-class IoU on the target eval split, in points\n\n" + "\n".join(lines) + "\n"


def lambda_series(results: list) -> list:
    """``(lambda, mean fused mIoU, seeds completed)`` for every sweep arm, sorted by lambda."""
    acc = {}
    for r in results:
        if not r["arm"].startswith("lambda_"):
            continue
        lam = float(r["arm"][len("lambda_"):])
        acc.setdefault(lam, [])
        if r.get("status") == "ok":
            acc[lam].append(r["metrics"]["fused_miou"])
    return [(lam, float(np.mean(v)) if v else float("nan"), len(v)) for lam, v in sorted(acc.items())]


def emit_report(run_dir) -> dict:
    """Write report.csv, report.txt and (for sweeps) lambda_series.csv into ``run_dir``.

    The text table is rendered from the CSV rows, so the two never disagree.
    Output depends only on the result files, so re-running is byte-identical.
    """
    run_dir = Path(run_dir)
    results = collect_results(run_dir)
    if not results:
        raise FileNotFoundError(f"no {RESULT_FILE} files under {run_dir}")
    rows = report_rows(results)
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    csv_text = buf.getvalue()
    written = {}
    (run_dir / REPORT_CSV).write_text(csv_text)
    written["csv"] = run_dir / REPORT_CSV
    parsed = list(csv.reader(io.StringIO(csv_text)))
    (run_dir / REPORT_TXT).write_text(_render_text(parsed))
    written["text"] = run_dir / REPORT_TXT
    series = lambda_series(results)
    if series:
        lines = ["lambda_mr,fused_miou,seeds"] + [f"{lam:g},{_f(v)},{n}" for lam, v, n in series]
        (run_dir / LAMBDA_SERIES).write_text("\n".join(lines) + "\n")
        written["lambda_series"] = run_dir / LAMBDA_SERIES
    return written


def arm_means(results: list, key: str = "fused_miou", source: str = "metrics") -> dict:
    """Mean of one metric per arm over its completed seeds."""
    acc = {}
    for r in results:
        if r.get("status") == "ok":
            acc.setdefault(r["arm"], []).append(r[source][key] if source else r[key])
    return {arm: float(np.mean(v)) for arm, v in acc.items()}
