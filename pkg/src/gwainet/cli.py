"""Command-line surface: gen-data, train, infer, eval, gradcheck.

Exit codes: 0 success, 1 validation error (bad arguments, configs or
files), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .tensor import GwaiError, ValidationError


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gwai",
                                description="Exemplar-guided 8x face super-resolution")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic identity dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--identities", type=int, required=True)
    g.add_argument("--per-identity", type=int, required=True)
    g.add_argument("--hr-size", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--nuisance", choices=("full", "translation"), default="full")

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--stage", required=True,
                   choices=("inet-pretrain", "wnet-pretrain", "content", "adversarial"))

    i = sub.add_parser("infer", help="super-resolve one image")
    i.add_argument("--model", required=True)
    i.add_argument("--lr", required=True, dest="lr_img")
    i.add_argument("--guide")
    i.add_argument("--mode", choices=("full", "no-guide"), default="full")
    i.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="PSNR evaluation over a dataset split")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--mode", default="full",
                   choices=("full", "no-guide", "shuffled-guide"))
    e.add_argument("--seed", type=int, default=0)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    c.add_argument("--op")
    c.add_argument("--tol", type=float, default=1e-4)
    return p


def _load_config(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"config file not found: {path}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {path} is not valid JSON: {exc}") from exc


def _arch_from_config(cfg: dict):
    from .networks import ArchConfig, preset
    spec = dict(cfg.get("arch", {"preset": "desk"}))
    name = spec.pop("preset", None)
    if name is not None:
        base = preset(name)
        if spec:
            from dataclasses import replace
            return replace(base, **spec).validate()
        return base
    return ArchConfig.from_json_dict({**ArchConfig().to_json_dict(), **spec})


def _stage_config(cfg: dict, stage: str):
    from .losses import LossWeights, PAPER_WEIGHTS
    from .training import StageConfig
    stages = cfg.get("stages", {})
    if stage not in stages:
        raise ValidationError(f"config has no entry for stage {stage!r} "
                              f"(found: {sorted(stages)})")
    entry = dict(stages[stage])
    weights = entry.pop("weights", None)
    if weights is None and stage == "adversarial":
        lw = PAPER_WEIGHTS
    elif weights is None:
        lw = LossWeights()
    else:
        lw = LossWeights(**weights)
    betas = entry.pop("betas", None)
    return StageConfig(stage=stage, weights=lw,
                       betas=tuple(betas) if betas else None,
                       seed=entry.pop("seed", cfg.get("seed", 0)),
                       **entry).validate()


def _read_image(path: str) -> np.ndarray:
    from PIL import Image
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"image not found: {path}")
    arr = np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def _cmd_gen_data(args) -> int:
    from .synthdata import build_dataset
    manifest = build_dataset(args.identities, args.per_identity, args.hr_size,
                             args.seed, args.out, nuisance_mode=args.nuisance)
    print(json.dumps({"out": args.out, "splits": {k: len(v) for k, v in
                                                  manifest["splits"].items()}}))
    return 0


def _cmd_train(args) -> int:
    from .checkpoint import load_checkpoint, save_checkpoint
    from .networks import init_model
    from .synthdata import SynthDataset
    from .training import run_stage
    cfg = _load_config(args.config)
    dataset = SynthDataset.load(args.data)
    stage_cfg = _stage_config(cfg, args.stage)

    init_path = cfg.get("init_checkpoint")
    out = Path(args.out)
    latest = out / "model_latest.gwai"
    if init_path:
        bundle = load_checkpoint(init_path)
    elif latest.exists():
        bundle = load_checkpoint(latest)
    else:
        bundle = init_model(_arch_from_config(cfg), seed=cfg.get("seed", 0))
    metrics = run_stage(bundle, dataset, stage_cfg, out_dir=out)
    save_checkpoint(bundle, latest)
    print(json.dumps({"stage": args.stage, "steps_logged": len(metrics),
                      "checkpoint": str(latest)}))
    return 0


def _cmd_infer(args) -> int:
    from PIL import Image
    from .checkpoint import load_checkpoint
    from .synthdata import to_uint8
    from .training import infer
    bundle = load_checkpoint(args.model)
    lr01 = _read_image(args.lr_img)
    guide01 = _read_image(args.guide) if args.guide else None
    sr01 = infer(bundle, lr01, guide01, mode=args.mode)
    Image.fromarray(to_uint8(sr01).transpose(1, 2, 0), mode="RGB").save(args.out)
    print(json.dumps({"out": args.out, "shape": list(sr01.shape)}))
    return 0


def _cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .synthdata import SynthDataset
    from .training import evaluate
    bundle = load_checkpoint(args.model)
    dataset = SynthDataset.load(args.data)
    report = evaluate(bundle, dataset, split=args.split, mode=args.mode,
                      seed=args.seed)
    print(json.dumps(report.to_json_dict(), sort_keys=True))
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck
    reports = run_gradcheck(args.op, tol=args.tol)
    ok = True
    for r in reports:
        print(f"{'PASS' if r['passed'] else 'FAIL'} {r['op']:<24} "
              f"max_rel_err={r['max_rel_err']:.3e} tol={r['tol']:.1e}")
        ok = ok and r["passed"]
    if not ok:
        print("gradcheck FAILED", file=sys.stderr)
        return 2
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        return _COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except GwaiError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
