"""``delivr`` command line.

Exit codes: 0 success, 1 check or evaluation failure (including unreadable
checkpoints and datasets), 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import tomli

from . import config as C
from .errors import ConfigError, FormatError, ShapeError

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    """Route usage errors through ``main`` so they share the config-error exit path."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(f"usage: {message}")


def _defaults_epilog() -> str:
    lines = ["config keys and defaults (override with --set section.key=value):"]
    for section, cls in C.SECTIONS.items():
        for name, f in cls.__dataclass_fields__.items():
            lines.append(f"  {section}.{name} = {f.default!r}")
    return "\n".join(lines)


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # Global flags are accepted before or after the subcommand. The subparser
    # copy suppresses its defaults so it cannot clobber values given up front.
    def d(value):
        return argparse.SUPPRESS if suppress else value

    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--config", type=Path, default=d(None),
                   help="TOML run config (sections model, bias, synth, train)")
    g.add_argument("--seed", type=int, default=d(None), help="overrides model.seed and synth.seed")
    g.add_argument("--out", type=Path, default=d(None), help="output directory (or file for inspect-bias)")
    g.add_argument("--quiet", action="store_true", default=d(False),
                   help="only print errors and the final summary")
    g.add_argument("--set", dest="overrides", action="append", default=d([]), metavar="KEY=VALUE",
                   help="config override, VALUE is a TOML literal; flags win over --config")
    return g


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(suppress=True)
    p = _Parser(prog="delivr", description="Rotation-aware video restoration toolkit.",
                epilog=_defaults_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter,
                parents=[_global_flags(suppress=False)])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("check", parents=[common], help="run executable property suites")
    c.add_argument("--suite", choices=["all", "group", "grad", "bias"], default="all")

    s = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    s.add_argument("--count", type=int, default=16, help="number of clips (default 16)")
    s.add_argument("--first-seed", type=int, default=None,
                   help="first clip seed (default synth.seed * count)")

    t = sub.add_parser("train", parents=[common], help="train one model")
    t.add_argument("--steps", type=int, help="override train.steps")

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--data", type=Path, help="dataset directory from `synth` (default: eval seeds)")
    e.add_argument("--min-psnr", type=float, default=None, help="exit 1 if mean PSNR is below this")

    a = sub.add_parser("ablate", parents=[common], help="rows (a)-(d) over several seeds")
    a.add_argument("--seeds", default="0,1,2", help="comma-separated seeds (default 0,1,2)")
    a.add_argument("--steps", type=int, help="override train.steps")

    b = sub.add_parser("inspect-bias", parents=[common], help="dump the bias matrices for given angles")
    b.add_argument("--angles", required=True, help="comma-separated per-frame angles in radians")

    sub.add_parser("config-doc", parents=[common], help="print the config reference table")
    return p


def _parse_value(text: str):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def _base_config(args) -> C.RunConfig:
    if args.config:
        return C.load(args.config)
    # eval falls back to the config recorded next to the checkpoint
    ckpt = getattr(args, "checkpoint", None)
    if ckpt is not None and (ckpt.parent / "report.json").is_file():
        try:
            return C.from_dict(json.loads((ckpt.parent / "report.json").read_text())["config"])
        except (KeyError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{ckpt.parent / 'report.json'}: unreadable config ({exc})") from None
    return C.RunConfig()


def load_config(args) -> C.RunConfig:
    cfg = _base_config(args)
    over = {}
    for item in args.overrides:
        key, eq, value = item.partition("=")
        if not eq:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        over[key.strip()] = _parse_value(value.strip())
    if args.seed is not None:
        over.setdefault("model.seed", args.seed)
        over.setdefault("synth.seed", args.seed)
    if getattr(args, "steps", None) is not None:
        over["train.steps"] = args.steps
    if over:
        cfg = cfg.replace(**over)
    return cfg


def _threads() -> int:
    raw = os.environ.get("DELIVR_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"DELIVR_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def _parse_floats(text: str, what: str) -> list:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"{what} must be comma-separated numbers, got {text!r}") from None
    if not vals or not all(np.isfinite(vals)):
        raise ConfigError(f"{what} must be non-empty and finite")
    return vals


# -- commands ------------------------------------------------------------------

def cmd_check(args, cfg, say) -> int:
    from . import checks
    seed = args.seed if args.seed is not None else 0
    ok = checks.run(args.suite, seed=seed, out=print)
    print("all checks passed" if ok else "some checks FAILED")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_synth(args, cfg, say) -> int:
    from .synth import write_dataset
    if args.count < 1:
        raise ConfigError("--count must be >= 1")
    out = args.out or Path("dataset")
    first = args.first_seed if args.first_seed is not None else cfg.synth.seed * args.count
    seeds = range(first, first + args.count)
    manifest = write_dataset(out, cfg.synth, seeds, workers=_threads())
    print(f"wrote {args.count} clips to {out} (manifest {manifest.name})")
    return EXIT_OK


def cmd_train(args, cfg, say) -> int:
    from .trainer import train
    out = args.out or Path("run")
    log = None if args.quiet else sys.stdout
    report, _ = train(cfg, out, log=log)
    ev = report.eval
    print(f"report: {out / 'report.json'}  psnr={ev['psnr_mean']:.3f} ssim={ev['ssim_mean']:.4f} "
          f"angle_corr={ev['angle_corr']}")
    return EXIT_OK


def cmd_eval(args, cfg, say) -> int:
    from .synth import read_dataset
    from .trainer import evaluate, evaluate_samples, load_model
    if not args.checkpoint.exists():
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    clips = None
    if args.data is not None:
        data_cfg, clips = read_dataset(args.data)
        cfg = cfg.replace(**{f"synth.{k}": v for k, v in data_cfg.__dict__.items()})
    try:
        model = load_model(cfg, args.checkpoint)
    except ShapeError as exc:
        raise FormatError(f"checkpoint does not match the model config: {exc}") from None
    metrics = evaluate(model, cfg) if clips is None else evaluate_samples(model, clips)
    print(f"PSNR {metrics['psnr_mean']:.3f} ± {metrics['psnr_std']:.3f} dB")
    print(f"SSIM {metrics['ssim_mean']:.4f} ± {metrics['ssim_std']:.4f}")
    corr = metrics["angle_corr"]
    print(f"angle-recovery correlation {'n/a' if corr is None else f'{corr:.4f}'}"
          f" over {metrics['n_clips']} clips")
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "eval.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    if args.min_psnr is not None and not metrics["psnr_mean"] >= args.min_psnr:
        print(f"mean PSNR below --min-psnr {args.min_psnr}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_ablate(args, cfg, say) -> int:
    from .trainer import ablate, ablation_markdown
    seeds = [int(s) for s in _parse_floats(args.seeds, "--seeds")]
    log = None if args.quiet else sys.stdout
    result = ablate(cfg, seeds=seeds, out_dir=args.out, log=log)
    print(ablation_markdown(result["rows"]), end="")
    return EXIT_OK


def cmd_inspect_bias(args, cfg, say) -> int:
    from .bias import build_bias_stack
    from .coords import build_grid
    angles = _parse_floats(args.angles, "--angles")
    ps = cfg.model.patch_size
    grid = build_grid((cfg.synth.height // ps, cfg.synth.width // ps), cfg.model.lift_height)
    stack = build_bias_stack(grid, angles, cfg.bias.params())
    out = args.out or Path("bias.dlvb")
    if out.suffix != ".dlvb":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "bias.dlvb"
    stack.save(out)
    summary = stack.summary()
    blocked = summary.pop("blocked_pairs")
    for name, row in summary.items():
        print(f"{name:>6}: min={row['min']:+.6f} max={row['max']:+.6f} "
              f"symmetry_residual={row['symmetry_residual']:.3e}")
    print(f"T={stack.T} N={stack.N} blocked_pairs={blocked} -> {out}")
    return EXIT_OK


def cmd_config_doc(args, cfg, say) -> int:
    print(C.reference_doc(), end="")
    return EXIT_OK


COMMANDS = {"check": cmd_check, "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "inspect-bias": cmd_inspect_bias, "config-doc": cmd_config_doc}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = load_config(args)
        say = (lambda *a, **k: None) if args.quiet else print
        return COMMANDS[args.command](args, cfg, say)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FormatError as exc:
        print(f"checkpoint/file error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
