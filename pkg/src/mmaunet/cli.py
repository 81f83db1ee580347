"""Command-line entry point: ``mmaunet <subcommand> [--key value ...]``.

Every RunConfig key is available as a ``--kebab-case`` flag; flags override
values from ``--config FILE``. Exit codes: 0 success, 1 usage error,
2 data or contract error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import checkpoint as ckpt_io
from . import plotting
from . import train as W
from .config import RunConfig, load_config
from .data import SceneSpec, gen_dataset
from .errors import DependencyError, MMAError
from .model import ABLATIONS

COMMANDS = ("gen-data", "train-vi", "train-ir", "train-fuse", "fuse", "eval", "cka", "ablate")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_config_flags(p):
    p.add_argument("--config", help="key=value run configuration file")
    for f in fields(RunConfig):
        p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None, metavar=f.name.upper())
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = _Parser(prog="mmaunet", description="Asymmetric cross-scale IR/VI fusion toolkit")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    helps = {
        "gen-data": "write synthetic train/ and eval/ splits to --data-dir",
        "train-vi": "stage I: train the VI-UNet",
        "train-ir": "stage I: train the IR-UNet (guided by the VI-UNet unless --guidance false)",
        "train-fuse": "stage II: train the fusion network",
        "fuse": "fuse one IR/VI image pair",
        "eval": "score a fusion checkpoint on the eval split",
        "cka": "layer-wise CKA analysis of one or two IR/VI UNet checkpoints",
        "ablate": "train and score ablation variants",
    }
    subs = {}
    for name in COMMANDS:
        subs[name] = sub.add_parser(name, help=helps[name], description=helps[name])
        _add_config_flags(subs[name])
    subs["fuse"].add_argument("--ir", required=True, help="1-channel PGM (P6 is reduced to luminance)")
    subs["fuse"].add_argument("--vi", required=True, help="3-channel PPM")
    subs["fuse"].add_argument("--out", required=True, help="output PPM")
    subs["fuse"].add_argument("--dump-features", action="store_true", help="write one feature montage per fused stage")
    subs["cka"].add_argument("--ckpt", action="append", default=[], help="UNet checkpoint (give once for self mode, twice for cross mode)")
    return parser


def resolve_config(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    given = {f.name: getattr(args, f.name) for f in fields(RunConfig) if getattr(args, f.name) is not None}
    return cfg.with_overrides(**given)


def _ckpt(cfg, key, default_name):
    value = getattr(cfg, key)
    return Path(value) if value else Path(cfg.out_dir) / default_name


def _out(cfg):
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(cfg, args):
    spec = SceneSpec(size=cfg.image_size)
    base = Path(cfg.data_dir)
    n_train = len(gen_dataset(spec, cfg.train_count, cfg.seed, base / "train")) // 3
    n_eval = len(gen_dataset(spec, cfg.eval_count, cfg.seed + 1, base / "eval")) // 3
    print(f"wrote {n_train} train and {n_eval} eval pairs to {base}")


def _finish_stage1(cfg, model, rows, name, pairs):
    out = _out(cfg)
    path = W.save_unet(model, out / f"{name}.ckpt")
    W.write_log(rows, out / f"{name}_loss.csv")
    plotting.loss_curves(rows, out / f"{name}_loss.png", title=name)
    psnrs = W.reconstruction_psnr(model, pairs)
    print(f"{path}: final loss {rows[-1]['loss']:.6g}, train PSNR {sum(psnrs) / len(psnrs):.2f} dB")


def cmd_train_vi(cfg, args):
    pairs = W.load_split(cfg, "train")
    model, rows = W.train_stage1(cfg, "vi", pairs)
    _finish_stage1(cfg, model, rows, "vi", pairs)


def cmd_train_ir(cfg, args):
    pairs = W.load_split(cfg, "train")
    vi_model = None
    if cfg.guidance:
        vi_path = _ckpt(cfg, "vi_ckpt", "vi.ckpt")
        if not vi_path.exists():
            raise DependencyError(f"guided IR training needs a VI checkpoint; {vi_path} not found (run train-vi first)")
        vi_model = W.load_unet(vi_path)
    model, rows = W.train_stage1(cfg, "ir", pairs, vi_model, guided=cfg.guidance)
    _finish_stage1(cfg, model, rows, "ir" if cfg.guidance else "ir_unguided", pairs)


def _stage1_models(cfg):
    vi_model = W.load_unet(_ckpt(cfg, "vi_ckpt", "vi.ckpt"))
    ir_model = W.load_unet(_ckpt(cfg, "ir_ckpt", "ir.ckpt") if cfg.guidance else _ckpt(cfg, "ir_unguided_ckpt", "ir_unguided.ckpt"))
    return vi_model, ir_model


def cmd_train_fuse(cfg, args):
    pairs = W.load_split(cfg, "train")
    vi_model, ir_model = _stage1_models(cfg)
    model, rows, (before, after) = W.train_stage2(cfg, vi_model, ir_model, pairs)
    out = _out(cfg)
    path = ckpt_io.save(_ckpt(cfg, "fusion_ckpt", "fusion.ckpt"), W.fusion_checkpoint(model))
    W.write_log(rows, out / "fuse_loss.csv")
    plotting.loss_curves(rows, out / "fuse_loss.png", title="stage II")
    state = "unchanged" if before == after else "updated"
    print(f"{path}: final total loss {rows[-1]['total']:.6g}; encoder digest {after[:16]} ({state})")


def cmd_fuse(cfg, args):
    model = W.load_fusion(_ckpt(cfg, "fusion_ckpt", "fusion.ckpt"))
    for p in W.fuse_files(model, args.ir, args.vi, args.out, args.dump_features):
        print(p)


def cmd_eval(cfg, args):
    model = W.load_fusion(_ckpt(cfg, "fusion_ckpt", "fusion.ckpt"))
    pairs = W.load_split(cfg, "eval")
    report, fused = W.evaluate_model(model, pairs)
    out = _out(cfg)
    report.to_csv(out / "report.csv")
    (out / "report_meta.txt").write_text("".join(f"{k}={v}\n" for k, v in report.metadata.items()))
    plotting.fusion_panel(pairs[0].ir, pairs[0].vi, fused[0], out / "report_fusion.png", title=pairs[0].name)
    m = report.means
    print(f"{out / 'report.csv'}: psnr {m['psnr']:.4f} ssim {m['ssim']:.4f} qabf {m['qabf']:.4f}")


def cmd_cka(cfg, args):
    paths = args.ckpt or [str(_ckpt(cfg, "ir_ckpt", "ir.ckpt"))]
    if len(paths) > 2:
        raise UsageError("cka takes one or two --ckpt values")
    models = [W.load_unet(p) for p in paths]
    pairs = W.load_split(cfg, "eval")
    summary = W.cka_analysis(cfg, models[0], pairs, _out(cfg) / "cka", models[1] if len(models) == 2 else None)
    for net, layer in summary["divergence"].items():
        print(f"{net}: divergence layer {'none' if layer is None else layer + 1}")


def cmd_ablate(cfg, args):
    variants = [v.strip() for v in cfg.variants.split(",") if v.strip()]
    unknown = [v for v in variants if v not in ABLATIONS]
    if unknown:
        raise UsageError(f"unknown variants {unknown}; choose from {','.join(ABLATIONS)}")
    train_pairs = W.load_split(cfg, "train")
    eval_pairs = W.load_split(cfg, "eval")
    vi_path = _ckpt(cfg, "vi_ckpt", "vi.ckpt")
    ir_path = _ckpt(cfg, "ir_ckpt", "ir.ckpt")
    unguided_path = _ckpt(cfg, "ir_unguided_ckpt", "ir_unguided.ckpt")
    for p in (vi_path, ir_path):
        if not p.exists():
            raise DependencyError(f"ablation needs stage-I checkpoint {p}")
    if not unguided_path.exists():
        # unguided variants need an IR encoder trained without attention
        model, rows = W.train_stage1(cfg, "ir", train_pairs, guided=False)
        W.save_unet(model, unguided_path)
        W.write_log(rows, unguided_path.with_name("ir_unguided_loss.csv"))
    rows = W.ablation_study(cfg, vi_path, ir_path, unguided_path, train_pairs, eval_pairs, variants, _out(cfg) / "ablation")
    for r in rows:
        print(f"{r['variant']}: psnr {r['psnr']:.4f} ssim {r['ssim']:.4f} qabf {r['qabf']:.4f}")


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-vi": cmd_train_vi,
    "train-ir": cmd_train_ir,
    "train-fuse": cmd_train_fuse,
    "fuse": cmd_fuse,
    "eval": cmd_eval,
    "cka": cmd_cka,
    "ablate": cmd_ablate,
}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        HANDLERS[args.command](cfg, args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except MMAError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
