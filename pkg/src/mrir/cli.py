"""Command-line surface: synth, train, restore, eval, check."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .checks import run_checks
from .config import Config, load_config
from .degrade import DegradationParams, sample_degradation_params, synthesize_pair
from .diffusion import FreezePolicy, ddpm_sample, fit, make_schedule
from .evaluate import CheckpointRestorer, StubRestorer, run_eval
from .imgio import list_images, load_image, save_image
from .model import build_model, load_checkpoint, make_train_item, save_checkpoint


def _load_cfg(path: str | None) -> Config:
    return load_config(path)


def cmd_synth(args) -> int:
    cfg = _load_cfg(args.config)
    if args.scale is not None:
        cfg.degrade.final_scale = args.scale
    scale = cfg.degrade.final_scale
    hq_map = list_images(args.hq_dir)
    if not hq_map:
        print(f"no images found in {args.hq_dir}", file=sys.stderr)
        return 1
    out = Path(args.out_dir)
    (out / "hq").mkdir(parents=True, exist_ok=True)
    (out / "lq").mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.jsonl"
    with manifest.open("w", encoding="utf-8") as mf:
        for idx, stem in enumerate(sorted(hq_map)):
            hq = load_image(hq_map[stem])
            h, w = hq.shape[:2]
            hq = hq[: h - h % scale, : w - w % scale]
            seed = args.seed + idx
            params = sample_degradation_params(cfg.degrade, seed)
            pair = synthesize_pair(hq, params)
            save_image(out / "hq" / f"{stem}.png", pair.hq)
            save_image(out / "lq" / f"{stem}.png", pair.lq)
            mf.write(json.dumps({
                "filename": f"{stem}.png",
                "seed": seed,
                "params": params.to_dict(),
            }) + "\n")
    print(f"wrote {len(hq_map)} pairs and {manifest}")
    return 0


def _read_manifest(path: Path) -> list[dict]:
    entries = []
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                entries.append(json.loads(line))
    return entries


def cmd_train(args) -> int:
    cfg = _load_cfg(args.config)
    manifest = Path(args.data)
    entries = _read_manifest(manifest)
    if not entries:
        print(f"no entries in {manifest}", file=sys.stderr)
        return 1
    root = manifest.parent
    model = build_model(cfg, seed=cfg.train.seed)
    items = []
    for entry in entries:
        name = entry["filename"]
        hq = load_image(root / "hq" / name)
        lq = load_image(root / "lq" / name)
        items.append(make_train_item(model, hq, lq, path=root / "lq" / name))
    policy = FreezePolicy.adapter() if cfg.train.regime == "adapter" else FreezePolicy.full()
    sched = make_schedule(cfg.train.timesteps, cfg.train.beta_min, cfg.train.beta_max,
                          cfg.sampler.steps)
    history = fit(
        model, items, args.steps, sched, policy,
        lr=cfg.train.lr, batch_size=cfg.train.batch_size, seed=cfg.train.seed,
        lambda1=cfg.train.lambda_rgb, lambda2=cfg.train.lambda_fft,
        null_prob=cfg.train.null_prob, log_every=args.log_every,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "final.npz", model, cfg)
    with (out / "loss_log.jsonl").open("w", encoding="utf-8") as fh:
        for step, b in enumerate(history):
            fh.write(json.dumps({
                "step": step, "total": b.total, "l_diff": b.l_diff,
                "l_rgb": b.l_rgb, "l_fft": b.l_fft,
            }) + "\n")
    (out / "config.json").write_text(cfg.to_json(), encoding="utf-8")
    print(f"trained {args.steps} steps on {len(items)} pairs; checkpoint at {out / 'final.npz'}")
    return 0


def cmd_restore(args) -> int:
    model, cfg = load_checkpoint(args.ckpt)
    if args.cfg_scale is not None:
        cfg.sampler.cfg_scale = args.cfg_scale
    if args.steps is not None:
        cfg.sampler.steps = args.steps
    if args.lre is not None:
        cfg.sampler.lre = args.lre == "on"
    lq_path = Path(args.lq)
    lq = load_image(lq_path)
    cond = model.conditioning_for(lq, lq_path)
    sched = make_schedule(cfg.train.timesteps, cfg.train.beta_min, cfg.train.beta_max,
                          cfg.sampler.steps)
    restored = ddpm_sample(
        model, cond, lq, sched,
        w=cfg.sampler.cfg_scale, seed=args.seed, lre=cfg.sampler.lre,
    )
    out_path = Path(args.out) if args.out else lq_path.with_name(lq_path.stem + "_restored.png")
    save_image(out_path, restored)
    print(f"restored {lq_path} -> {out_path} ({restored.shape[1]}x{restored.shape[0]})")
    return 0


def cmd_eval(args) -> int:
    if args.ckpt:
        model, cfg = load_checkpoint(args.ckpt)
        if args.config:
            cfg = _load_cfg(args.config)
        restorer = CheckpointRestorer(model, cfg)
    else:
        cfg = _load_cfg(args.config)
        restorer = StubRestorer(cfg.degrade.final_scale)
    report = run_eval(args.lq_dir, args.ref_dir, restorer, cfg,
                      out_dir=args.out_dir, seed=args.seed)
    report_path = Path(args.report) if args.report else Path("eval_report.json")
    report.save(report_path)
    print(f"scored {report.aggregates['n_scored']} images "
          f"({len(report.skipped)} skipped); report at {report_path}")
    return 1 if not report.per_image else 0


def cmd_check(args) -> int:
    results = run_checks()
    failed = 0
    for r in results:
        status = "PASS" if r.ok else "FAIL"
        print(f"{status} {r.name}: {r.detail}")
        failed += 0 if r.ok else 1
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mrir", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize LQ/HQ training pairs")
    p.add_argument("--hq-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", type=int, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train on a synthesized manifest")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True, help="path to manifest.jsonl")
    p.add_argument("--out", required=True, help="checkpoint output directory")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--log-every", type=int, default=50)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("restore", help="restore one LQ image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--lq", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cfg-scale", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lre", choices=("on", "off"), default=None)
    p.set_defaults(fn=cmd_restore)

    p = sub.add_parser("eval", help="restore a directory and score against references")
    p.add_argument("--lq-dir", required=True)
    p.add_argument("--ref-dir", required=True)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--report", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("check", help="run the invariant and gradient suite")
    p.set_defaults(fn=cmd_check)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
