"""Command-line interface: train, eval, count-params, gen-instruct, gradcheck.

Configuration files are INI-style with [model], [plan], [train], and [data]
sections; field names match ModelConfig and TrainConfig exactly. Flags
override file values. Validation failures exit non-zero.
"""

from __future__ import annotations

import argparse
import configparser
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_model
from .config import ModelConfig, config_from_preset
from .dataio import build_samples, load_benchmark, read_records
from .datagen import generate_dataset
from .errors import VlmtuneError
from .evaluation import evaluate
from .gradcheck import model_gradcheck
from .model import build_model
from .plans import TuningPlan, apply_plan, count_params
from .training import TrainConfig, train, train_two_stage


def _coerce(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    return text


def read_config_file(path) -> dict:
    parser = configparser.ConfigParser()
    found = parser.read(path)
    if not found:
        raise VlmtuneError(f"config file not found: {path}")
    return {section: {k: _coerce(v) for k, v in parser[section].items()}
            for section in parser.sections()}


def model_config_from(sections: dict) -> ModelConfig:
    model_sec = dict(sections.get("model", {}))
    preset = model_sec.pop("preset", None)
    if preset:
        return config_from_preset(preset, **model_sec)
    return ModelConfig.from_dict(model_sec)


def plan_from(sections: dict, override: str | None) -> TuningPlan:
    if override:
        return TuningPlan.parse(override)
    plan_sec = sections.get("plan", {})
    if {"vit", "jtm", "dec"} <= set(plan_sec):
        return TuningPlan.parse(f"{plan_sec['vit']},{plan_sec['jtm']},{plan_sec['dec']}")
    raise VlmtuneError("no tuning plan: give [plan] vit/jtm/dec or --plan")


def train_config_from(sections: dict, args) -> TrainConfig:
    merged = dict(sections.get("train", {}))
    data = sections.get("data", {})
    key_map = {"train": "train_path", "instruct": "instruct_path",
               "bench": "bench_path", "images": "image_root"}
    for k, v in data.items():
        merged[key_map.get(k, k)] = v
    for attr in ("seed", "epochs", "batch_size", "out_dir"):
        v = getattr(args, attr, None)
        if v is not None:
            merged[attr] = v
    return TrainConfig.from_dict(merged)


def cmd_count_params(args) -> int:
    sections = read_config_file(args.config) if args.config else {"model": {"preset": "full"}}
    cfg = model_config_from(sections)
    model = build_model(cfg)  # zeros init: counting never runs a forward pass
    plan = plan_from(sections, args.plan)
    apply_plan(model, plan)
    report = count_params(model)
    if args.csv:
        print("component,base_total,base_trainable,peft_trainable")
        for comp_id, base_total, base_trainable, peft_trainable in report.rows():
            print(f"{comp_id},{base_total},{base_trainable},{peft_trainable}")
        print(f"trainable,{report.trainable}")
        print(f"total,{report.total}")
        print(f"fraction,{report.fraction_percent:.3f}")
    else:
        print(f"plan: {plan}")
        print(f"{'component':<12}{'base total':>14}{'base train':>14}{'peft train':>12}")
        for comp_id, base_total, base_trainable, peft_trainable in report.rows():
            print(f"{comp_id:<12}{base_total:>14,}{base_trainable:>14,}{peft_trainable:>12,}")
        print(f"trainable parameters: {report.trainable:,}")
        print(f"total parameters:     {report.total:,}")
        print(f"trainable fraction:   {report.fraction_display}")
    return 0


def _load_train_samples(tcfg: TrainConfig, mcfg: ModelConfig, path):
    records = read_records(path)
    return build_samples(records, tcfg.image_root, mcfg)


def cmd_train(args) -> int:
    sections = read_config_file(args.config)
    mcfg = model_config_from(sections)
    tcfg = train_config_from(sections, args)
    plan = plan_from(sections, args.plan)
    if not tcfg.out_dir:
        tcfg.out_dir = "runs/run"
    model = build_model(mcfg, seed=tcfg.seed)
    apply_plan(model, plan, rng=np.random.default_rng(tcfg.seed + 1))

    if tcfg.paradigm == "origin_then_instruct":
        origin = _load_train_samples(tcfg, mcfg, tcfg.train_path)
        instruct = _load_train_samples(tcfg, mcfg, tcfg.instruct_path)
        log = train_two_stage(model, tcfg, tcfg, origin, instruct, out_dir=tcfg.out_dir)
    else:
        path = tcfg.instruct_path if tcfg.paradigm == "instruct" else tcfg.train_path
        samples = _load_train_samples(tcfg, mcfg, path)
        log = train(model, samples, tcfg, stage=tcfg.paradigm,
                    out_dir=tcfg.out_dir, resume_from=args.resume)
    print(f"trained {len(log.steps)} steps in {log.wall_clock:.1f}s; "
          f"final loss {log.steps[-1].loss:.4f}")
    print(f"checkpoint: {log.final_checkpoint}")
    print(f"loss log:   {Path(tcfg.out_dir) / 'loss.csv'}")
    return 0


def cmd_eval(args) -> int:
    sections = read_config_file(args.config)
    mcfg = model_config_from(sections)
    tcfg = train_config_from(sections, args)
    model = build_model(mcfg, seed=0)
    plan = plan_from(sections, args.plan)
    apply_plan(model, plan)
    load_model(args.checkpoint, model)
    samples = load_benchmark(tcfg.bench_path, tcfg.image_root, mcfg)
    report = evaluate(model, samples, max_len=tcfg.max_answer_len,
                      workers=args.workers)
    print(report.table())
    if args.csv:
        report.write_csv(args.csv)
        print(f"csv written to {args.csv}")
    return 0


def cmd_gen_instruct(args) -> int:
    manifest = generate_dataset(args.infile, args.out, seed=args.seed,
                                k=args.distractors, template_path=args.templates)
    print(f"wrote {manifest['n_records']} records "
          f"({manifest['n_open']} open, {manifest['n_closed']} closed) to {args.out}")
    print(f"manifest: {args.out}.manifest.json")
    return 0


def cmd_gradcheck(args) -> int:
    from .config import micro_config
    from .dataio import VqaSample

    cfg = micro_config()  # float64 throughout
    model = build_model(cfg, seed=args.seed)
    apply_plan(model, TuningPlan.parse(args.plan), rng=np.random.default_rng(args.seed))
    rng = np.random.default_rng(args.seed + 1)
    sample = VqaSample(
        image=rng.random((cfg.image_size, cfg.image_size, 3)),
        question_ids=[model.bos_id] + list(rng.integers(0, 20, size=5)) + [model.sep_id],
        answer_ids=list(rng.integers(0, 20, size=3)),
        answer_type="open", question_text="", answer_text="")
    report = model_gradcheck(model, sample, rtol=args.tolerance)
    print(report.summary())
    n = len(report.checks)
    print(f"{n - len(report.failures)}/{n} tensors within tolerance {args.tolerance}")
    return 0 if report.ok else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="vlmtune",
        description="Desk-scale vision-language fine-tuning with PEFT adapters")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("count-params", help="print exact parameter accounting for a plan")
    p.add_argument("--config", help="INI config with a [model] section (default: full preset)")
    p.add_argument("--plan", help="plan override, e.g. F,LoRA4,LoRA4")
    p.add_argument("--csv", action="store_true", help="machine-readable output")
    p.set_defaults(fn=cmd_count_params)

    p = sub.add_parser("train", help="train a model per config file")
    p.add_argument("--config", required=True)
    p.add_argument("--plan")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a benchmark file")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--plan")
    p.add_argument("--csv", help="also write the report as CSV to this path")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gen-instruct", help="rewrite a QA corpus into instruction format")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--distractors", type=int, default=3)
    p.add_argument("--templates", help="alternate template JSON file")
    p.set_defaults(fn=cmd_gen_instruct)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check (float64)")
    p.add_argument("--plan", default="T,T,T")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.set_defaults(fn=cmd_gradcheck)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except VlmtuneError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
