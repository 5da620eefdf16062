"""Command line entry point: ``python -m memreg <command> [flags]``.

Exit status is 0 on success, 1 on a runtime failure and 2 on a usage or
configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from memreg import data as D
from memreg import harness as H
from memreg import pipeline as P
from memreg.data import CLASS_NAMES
from memreg.errors import ConfigError, FormatError
from memreg.losses import ClassBalanceWeights
from memreg.models import load_checkpoint, save_checkpoint

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _config(args) -> P.TrainConfig:
    cfg = H.load_config(args.config) if args.config else P.TrainConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def _domain_spec(cfg: P.TrainConfig, domain: str, seed=None) -> D.DomainSpec:
    if domain == "source":
        return D.source_spec(cfg.source_seed if seed is None else seed)
    return D.target_spec(cfg.target_seed if seed is None else seed)


def cmd_gen_data(args) -> int:
    cfg = H.load_config(args.config) if args.config else P.TrainConfig()
    spec = _domain_spec(cfg, args.domain, args.seed)
    path = D.export_dataset(spec, args.count, args.out, eval_split=args.split == "eval")
    print(f"wrote {args.count} {args.domain} samples to {path}")
    return EXIT_OK


def cmd_train_stage1(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = P.train_stage1(cfg, log=_log)
    result.write_csv(out / "stage1_metrics.csv")
    save_checkpoint(result.checkpoint, out / "stage1.ckpt")
    save_checkpoint(result.final, out / "stage1_final.ckpt")
    print(f"best iteration {result.best_iteration}; checkpoint {out / 'stage1.ckpt'}")
    return EXIT_OK


def _pseudo_paths(out: Path):
    return out.with_suffix(".bin"), out.with_suffix(".json")


def cmd_pseudo_label(args) -> int:
    cfg = _config(args)
    ckpt = load_checkpoint(args.checkpoint)
    spec = _domain_spec(cfg, "target")
    count = args.count or cfg.target_size
    pseudo = P.generate_pseudo_labels(ckpt, spec, count)
    bin_path, meta_path = _pseudo_paths(Path(args.out))
    samples = [D.SegSample(D.generate(spec, i).image, pseudo.labels[i], spec.domain, i) for i in range(count)]
    bin_path.write_bytes(D.dataset_bytes(spec, samples))
    meta_path.write_text(json.dumps({"provenance": pseudo.provenance, "count": count,
                                     "class_weights": [float(w) for w in pseudo.weights.weights]},
                                    indent=2) + "\n")
    print(f"wrote pseudo labels for {count} target samples to {bin_path}")
    return EXIT_OK


def _load_pseudo(path: Path) -> P.PseudoDataset:
    bin_path, meta_path = _pseudo_paths(path)
    spec, samples = D.import_dataset(bin_path)
    meta = json.loads(meta_path.read_text())
    labels = np.stack([s.label for s in samples])
    return P.PseudoDataset(spec, labels, ClassBalanceWeights(meta["class_weights"]), meta["provenance"])


def cmd_train_stage2(args) -> int:
    cfg = _config(args)
    ckpt = load_checkpoint(args.checkpoint)
    if args.pseudo:
        pseudo = _load_pseudo(Path(args.pseudo))
    else:
        pseudo = P.generate_pseudo_labels(ckpt, _domain_spec(cfg, "target"), cfg.target_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = P.train_stage2(cfg, ckpt, pseudo, log=_log)
    result.write_csv(out / "stage2_metrics.csv")
    save_checkpoint(result.checkpoint, out / "stage2.ckpt")
    save_checkpoint(result.final, out / "stage2_final.ckpt")
    print(f"best iteration {result.best_iteration}; checkpoint {out / 'stage2.ckpt'}")
    return EXIT_OK


def format_metrics(m) -> str:
    lines = [f"{'class':<12}{'IoU':>8}"]
    for name, v in zip(CLASS_NAMES, m.per_class_iou):
        lines.append(f"{name:<12}{'-' if np.isnan(v) else f'{100 * v:.2f}':>8}")
    lines.append("")
    lines.append(f"{'aux mIoU':<20}{100 * m.aux_miou:8.2f}")
    lines.append(f"{'primary mIoU':<20}{100 * m.primary_miou:8.2f}")
    lines.append(f"{'fused mIoU':<20}{100 * m.fused_miou:8.2f}")
    lines.append(f"{'disagreement %':<20}{100 * m.disagreement_rate:8.2f}")
    return "\n".join(lines)


def cmd_eval(args) -> int:
    cfg = _config(args)
    ckpt = load_checkpoint(args.checkpoint)
    spec = _domain_spec(cfg, args.domain)
    m = P.evaluate(ckpt, spec, args.count or cfg.eval_count)
    print(format_metrics(m))
    return EXIT_OK


def cmd_ablate(args) -> int:
    plan = H.load_plan(args.plan) if args.plan else H.default_plan()
    if args.seed is not None:
        plan = H.ExperimentPlan(plan.base, plan.arms, (args.seed,))
    H.run_plan(plan, args.out, log=_log, resume=args.resume)
    written = H.emit_report(args.out)
    print(Path(written["text"]).read_text(), end="")
    return EXIT_OK


def cmd_report(args) -> int:
    written = H.emit_report(args.out)
    print(Path(written["text"]).read_text(), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="memreg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(fn=fn)
        return p

    p = add("gen-data", cmd_gen_data, "export generated samples to a dataset container")
    p.add_argument("--config")
    p.add_argument("--domain", choices=("source", "target"), default="source")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, help="domain seed (scene geometry)")
    p.add_argument("--split", choices=("train", "eval"), default="train")
    p.add_argument("--out", required=True)

    p = add("train-stage1", cmd_train_stage1, "adversarial + memory-regularized training")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = add("pseudo-label", cmd_pseudo_label, "label target training samples with a Stage-I model")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--out", required=True)

    p = add("train-stage2", cmd_train_stage2, "self-training on pseudo labels")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pseudo", help="output of pseudo-label; generated on the fly if omitted")
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "per-class IoU of a checkpoint on held-out samples")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--domain", choices=("source", "target"), default="target")
    p.add_argument("--count", type=int)

    p = add("ablate", cmd_ablate, "run an experiment plan and write its report")
    p.add_argument("--plan")
    p.add_argument("--seed", type=int, help="run only this seed")
    p.add_argument("--resume", action="store_true", help="reuse finished arms with an identical config")
    p.add_argument("--out", required=True)

    p = add("report", cmd_report, "(re)build the report of a finished run directory")
    p.add_argument("--out", required=True)
    return parser


def _limit_threads():
    value = os.environ.get("MEMREG_THREADS")
    if not value:
        return None
    try:
        n = int(value)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"MEMREG_THREADS must be a positive integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "count", None) is not None and args.count < 0:
            raise UsageError("--count must be >= 0")
        _limit_threads()
        return args.fn(args)
    except UsageError as exc:
        print(f"memreg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"memreg: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, IsADirectoryError) as exc:
        # a missing --config/--plan/--checkpoint is a usage problem
        print(f"memreg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, ValueError, RuntimeError, OSError) as exc:
        print(f"memreg: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
