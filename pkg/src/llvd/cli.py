"""Command-line entry point: ``llvd <subcommand> ...``.

Exit codes: 0 on success, 1 on a runtime failure (one line on stderr naming
the cause), 2 on malformed arguments (argparse prints usage).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, load_model_config
from .container import FormatError
from .data import FORMATS, DataError, VideoSequence, add_awgn, load_sequence, save_sequence
from .flops import count_flops
from .model import RecurrentState, build_model, denoise_sequence, load_checkpoint
from .tensor import ShapeError
from .train import TrainingError, evaluate, load_train_config, train

RUNTIME_ERRORS = (ConfigError, DataError, FormatError, ShapeError, TrainingError, OSError, ValueError, KeyError)


class CommandError(RuntimeError):
    pass


def _layout_for(model) -> str:
    return "bayer_rggb" if model.config.in_channels == 4 else "rgb"


def _load_sequences(path: Path, layout: str) -> tuple[list[str], list[VideoSequence]]:
    """A directory of frames is one sequence; a directory of directories is one per subdirectory."""
    if not path.is_dir():
        raise CommandError(f"{path}: not a directory")
    subdirs = sorted(p for p in path.iterdir() if p.is_dir())
    if subdirs:
        return [p.name for p in subdirs], [load_sequence(p, layout) for p in subdirs]
    return [path.name], [load_sequence(path, layout)]


def cmd_noise(args) -> int:
    seq = load_sequence(args.input)
    fmt = args.format or seq.meta["format"]
    save_sequence(add_awgn(seq, args.sigma, args.seed), args.out, fmt)
    print(f"wrote {len(seq)} frames to {args.out} (sigma {args.sigma:g}/255, seed {args.seed}, {fmt})")
    return 0


def cmd_train(args) -> int:
    model_cfg, train_cfg = load_train_config(args.config)
    if args.steps is not None:
        train_cfg = dataclasses.replace(train_cfg, steps=args.steps)
    model = build_model(model_cfg, train_cfg.seed)
    log_path = args.log or f"{args.out}.log"
    Path(log_path).write_text("")

    def progress(rec):
        if not args.quiet and (rec.step % max(1, train_cfg.steps // 20) == 0 or rec.step == train_cfg.steps):
            print(rec.line(), flush=True)

    _, records = train(model, train_cfg, args.data, out=args.out, log_path=log_path, on_step=progress)
    final = f"{records[-1].loss:.6g}" if records else "n/a"
    print(f"trained {len(records)} steps, final loss {final}; checkpoint {args.out}, log {log_path}")
    return 0


def cmd_denoise(args) -> int:
    model = load_checkpoint(args.model)
    seq = load_sequence(args.input, _layout_for(model))
    state = None
    if args.state and Path(args.state).exists():
        state = RecurrentState.load(args.state)
    out, state = denoise_sequence(model, seq, state)
    fmt = args.format or seq.meta["format"]
    save_sequence(out, args.out, fmt)
    if args.state:
        state.save(args.state)
    print(f"denoised {len(seq)} frames into {args.out}")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.model)
    layout = _layout_for(model)
    noisy_ids, noisy = _load_sequences(Path(args.noisy), layout)
    clean_ids, clean = _load_sequences(Path(args.clean), layout)
    if len(noisy) > 1 or len(clean) > 1:
        if noisy_ids != clean_ids:
            raise CommandError(f"sequence names differ: noisy {noisy_ids} vs clean {clean_ids}")
    report = evaluate(model, noisy, clean, ids=noisy_ids)
    text = report.to_json() + "\n" if args.json else report.to_text()
    Path(args.report).write_text(text)
    print(f"mean PSNR {report.mean_psnr:.4f} dB, mean SSIM {report.mean_ssim:.6f} over {len(noisy)} sequence(s)")
    return 0


def cmd_flops(args) -> int:
    cfg = load_model_config(args.config)
    rep = count_flops(cfg, args.height, args.width, convention=args.convention, pad=True)
    if args.json:
        print(json.dumps(rep.totals(), indent=2))
    else:
        print(rep.table())
    return 0


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_checks

    results = run_checks(quick=args.quick)
    if args.json:
        print(json.dumps([{"name": r.name, "passed": r.passed, "detail": r.detail,
                           "seconds": round(r.seconds, 3)} for r in results], indent=2))
    else:
        width = max(len(r.name) for r in results)
        for r in results:
            print(f"{'pass' if r.passed else 'FAIL'}  {r.name:<{width}}  {r.detail}  [{r.seconds:.2f}s]")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="llvd", description="Recurrent latent-space video denoiser toolkit.",
                                allow_abbrev=False)
    p.add_argument("--version", action="version", version=f"llvd {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, help_text, fn):
        sp = sub.add_parser(name, help=help_text, description=help_text, allow_abbrev=False)
        sp.set_defaults(func=fn)
        return sp

    sp = add("noise", "Add seeded white Gaussian noise to a frame directory.", cmd_noise)
    sp.add_argument("--sigma", type=float, required=True, help="noise std on the 0..255 scale")
    sp.add_argument("--seed", type=int, required=True, help="PRNG seed (same seed, same noise)")
    sp.add_argument("--in", dest="input", required=True, help="input frame directory (.ppm/.pgm/.llvt)")
    sp.add_argument("--out", required=True, help="output directory; file names follow the input")
    sp.add_argument("--format", choices=sorted(FORMATS),
                    help="output format (default: same as input; use llvt to keep values unclipped)")

    sp = add("train", "Train a model from a config file and a dataset manifest.", cmd_train)
    sp.add_argument("--config", required=True, help="key=value file with model and training keys")
    sp.add_argument("--data", required=True, help="manifest: one 'id directory layout frame_count' per line")
    sp.add_argument("--out", required=True, help="checkpoint path (rewritten at each checkpoint)")
    sp.add_argument("--log", help="training log path (default: CKPT.log)")
    sp.add_argument("--steps", type=int, help="override the config's step count")
    sp.add_argument("--quiet", action="store_true", help="suppress progress lines")

    sp = add("denoise", "Denoise a frame directory with a checkpoint, frame by frame.", cmd_denoise)
    sp.add_argument("--model", required=True, help="checkpoint file")
    sp.add_argument("--in", dest="input", required=True, help="noisy frame directory")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--state", help="recurrent state file: read if present, written after the last frame")
    sp.add_argument("--format", choices=sorted(FORMATS), help="output format (default: same as input)")

    sp = add("eval", "Report PSNR/SSIM of a checkpoint on paired noisy/clean data.", cmd_eval)
    sp.add_argument("--model", required=True, help="checkpoint file")
    sp.add_argument("--noisy", required=True, help="frame directory, or a directory of sequence directories")
    sp.add_argument("--clean", required=True, help="clean counterpart with the same structure")
    sp.add_argument("--report", required=True, help="report output file")
    sp.add_argument("--json", action="store_true", help="write the report as JSON")

    sp = add("flops", "Per-layer analytic FLOP table for a model config.", cmd_flops)
    sp.add_argument("--config", required=True, help="config file or built-in name (e.g. llvd-l)")
    sp.add_argument("--width", type=int, required=True, help="frame width in pixels")
    sp.add_argument("--height", type=int, required=True, help="frame height in pixels")
    sp.add_argument("--convention", choices=["mac", "flop2"], help="count MACs or 2 FLOPs per MAC")
    sp.add_argument("--json", action="store_true", help="print machine-readable totals only")

    sp = add("selfcheck", "Run the built-in gradient, structure and FLOP checks.", cmd_selfcheck)
    sp.add_argument("--json", action="store_true", help="print results as JSON")
    sp.add_argument("--quick", action="store_true", help="sample fewer gradient coordinates")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CommandError, *RUNTIME_ERRORS) as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"llvd {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
