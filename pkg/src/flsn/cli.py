"""Command-line entry point: ``flsn <command> [flags] [--key value ...]``.

Any config key can be overridden with ``--key value`` (or ``--section.key
value`` when a bare key is ambiguous). Exit codes: 0 success, 1 usage or
config error, 2 runtime or numeric error.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import config as C
from . import gradcheck as G
from . import tensor as T
from .checkpoint import load_checkpoint
from .errors import ConfigError, ContractError, FLSNError, GeometryError
from .fileio import read_pgm16, read_tensor, write_pgm16, write_tensor
from .metrics import bilinear_baseline, count_flops, count_params, evaluate, flop_breakdown
from .model import FLSN
from .synth import DATA_MAX, N_FRAMES, NoiseConfig, build_dataset, load_sample, normalize, read_manifest
from .tensor import Tensor
from .train import fit

log = logging.getLogger("flsn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _key_help() -> str:
    lines = ["config keys (override with --key value):"]
    for section, names in C.keys().items():
        lines.append(f"  [{section}] " + ", ".join(names))
    return "\n".join(lines)


def _overrides(extra: Sequence[str]) -> list[tuple[str, str]]:
    out, i = [], 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or tok == "--":
            raise UsageError(f"unexpected argument {tok!r}")
        if "=" in tok:
            key, value = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"{tok} needs a value")
            key, value = tok[2:], extra[i + 1]
            i += 2
        out.append((key, value))
    return out


def _resolve(args, fixed: dict[str, object]) -> C.RunConfig:
    pairs = list(args.overrides)
    pairs += [(k, v if isinstance(v, str) else C._format_value(v)) for k, v in fixed.items() if v is not None]
    return C.load(args.config, pairs)


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    cfg = _resolve(args, {
        "data.train_samples": args.samples, "data.test_samples": args.test_samples,
        "data.seed": args.seed, "data.root": args.out, "data.lr_size": args.size, "data.style": args.style,
    })
    regimes = ["HE", "LE"] if args.regime == "BOTH" else [args.regime or cfg.noise.regime]
    d = cfg.data
    for regime in regimes:
        if regime == cfg.noise.regime:
            noise = cfg.noise
        else:
            noise = NoiseConfig(regime=regime, read_sigma=cfg.noise.read_sigma)
        root = Path(d.root) / regime if len(regimes) > 1 else Path(d.root)
        size = (d.lr_size, d.lr_size)
        manifest = None
        for split, n in (("train", d.train_samples), ("test", d.test_samples)):
            if n:
                manifest = build_dataset(n, split, cfg.optics, noise, root, d.seed, lr_size=size, style=d.style)
        C.dump(cfg.replace(noise=noise, data=dataclasses.replace(d, root=str(root))), root)
        print(f"{regime}: {d.train_samples} train / {d.test_samples} test samples, manifest {manifest or root / 'manifest.txt'}")
    return 0


def cmd_train(args) -> int:
    fixed = {
        "data.root": args.data, "data.out": args.out, "train.seed": args.seed,
        "train.epochs": args.epochs, "train.max_steps": args.max_steps,
    }
    if args.no_ne:
        fixed["model.use_noise_estimator"] = False
    if args.no_ba:
        fixed["model.use_bandpass_attention"] = False
    cfg = _resolve(args, fixed)
    state, start = None, 0
    if args.resume:
        model, state, start = load_checkpoint(args.resume)
        if state is None:
            raise ContractError(f"{args.resume}: checkpoint has no optimizer state to resume from")
        if model.config != cfg.model:
            log.warning("using the model configuration stored in %s", args.resume)
        cfg = cfg.replace(model=model.config)
    div = cfg.model.divisor
    if cfg.train.crop_size % div:
        raise ConfigError(
            f"crop_size {cfg.train.crop_size} is not divisible by 2^B = {div} (B = {cfg.model.branches}); "
            f"use a multiple of {div} or fewer branches"
        )
    if not args.resume:
        model = FLSN(cfg.model, seed=cfg.train.seed)
    samples = [load_sample(p) for p in read_manifest(cfg.data.root, "train")]
    if not samples:
        raise ContractError(f"no training samples listed in {Path(cfg.data.root) / 'manifest.txt'}")
    out = Path(cfg.data.out)
    C.dump(cfg, out)
    res = fit(model, samples, cfg.train, out_dir=out, state=state, start_epoch=start)
    last = res.step_losses[-1] if res.step_losses else float("nan")
    print(f"trained {res.epochs_done} epochs / {res.state.step} steps, last loss {last:.6g}, "
          f"{count_params(model)} parameters -> {out / 'checkpoint.flc'}")
    return 0


def _load_model(path: str) -> FLSN:
    model, _, _ = load_checkpoint(path)
    return model


def cmd_infer(args) -> int:
    model = _load_model(args.checkpoint)
    frame = read_tensor(args.input)
    if frame.shape[1] != 1:
        raise ContractError(f"{args.input}: expected a single-channel frame, got {frame.shape[1]} channels")
    h, w = frame.shape[2:]
    div = model.config.divisor
    if h % div or w % div:
        raise GeometryError(
            f"{args.input}: {h}x{w} frame is not divisible by 2^B = {div} (B = {model.config.branches}); crop or pad it"
        )
    x = Tensor(normalize(frame.astype(np.float32)), dtype=np.float32)
    with T.no_grad():
        t0 = time.perf_counter()
        pred = model(x)
        ms = (time.perf_counter() - t0) * 1e3
    Path(args.output).resolve().parent.mkdir(parents=True, exist_ok=True)
    write_tensor(args.output, (pred.data * np.float32(DATA_MAX)).astype(np.float32))
    cfg = _resolve(args, {})
    C.dump(cfg.replace(model=model.config), Path(args.output).resolve().parent)
    print(f"{h}x{w} -> {2 * h}x{2 * w} written to {args.output}; inference {ms:.1f} ms")
    return 0


def _frames(spec: str):
    if spec == "all":
        return "all"
    try:
        idx = [int(v) for v in spec.split(",")]
    except ValueError:
        idx = []
    if not idx or min(idx) < 0 or max(idx) >= N_FRAMES:
        raise UsageError(f"--frames must be 'all' or a comma list of indices in 0..{N_FRAMES - 1}, got {spec!r}")
    return idx


def cmd_eval(args) -> int:
    cfg = _resolve(args, {"data.root": args.data})
    if args.checkpoint == "bilinear":
        model, where = bilinear_baseline, Path(cfg.data.out)
    else:
        model, where = _load_model(args.checkpoint), Path(args.checkpoint).resolve().parent
        cfg = cfg.replace(model=model.config)
    report_path = Path(args.report) if args.report else where / f"eval_{args.split}.csv"
    dirs = read_manifest(cfg.data.root, args.split)
    report = evaluate(model, dirs, report_path=None, frames=_frames(args.frames))
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(report_path)
    C.dump(cfg, report_path.resolve().parent)
    print(f"{len(dirs)} samples, {len(report.rows)} frames: mean RMSE {report.mean_rmse:.4f}, "
          f"mean SSIM {report.mean_ssim:.6f} -> {report_path}")
    return 0


def cmd_gradcheck(args) -> int:
    failed = []

    def show(name, err):
        ok = err < args.tol
        print(f"{'PASS' if ok else 'FAIL'}  {name:28s} {err:.3e}", flush=True)
        if not ok:
            failed.append(name)

    G.run(samples=args.samples, seed=args.seed, report=show)
    if failed:
        print(f"{len(failed)} check(s) above {args.tol:g}: {', '.join(failed)}", file=sys.stderr)
        return 2
    print(f"all checks below {args.tol:g}")
    return 0


def cmd_info(args) -> int:
    fixed = {}
    if args.no_ne:
        fixed["model.use_noise_estimator"] = False
    if args.no_ba:
        fixed["model.use_bandpass_attention"] = False
    cfg = _resolve(args, fixed)
    model = _load_model(args.checkpoint) if args.checkpoint else FLSN(cfg.model, seed=0)
    h, w = args.size or (cfg.data.lr_size, cfg.data.lr_size)
    div = model.config.divisor
    if h % div or w % div:
        raise ConfigError(f"--size {h} {w} is not divisible by 2^B = {div}")
    flops = count_flops(model, (h, w))
    c = model.config
    print(f"model       nc={c.nc} B={c.branches} blocks={c.blocks_per_branch} "
          f"NE={'on' if c.use_noise_estimator else 'off'} BA={'on' if c.use_bandpass_attention else 'off'}")
    print(f"parameters  {count_params(model)}")
    print(f"input       {h}x{w} -> {2 * h}x{2 * w}")
    print(f"FLOPs       {flops}  ({flops / 1e9:.4f} GFLOPs)")
    if args.verbose:
        for op, n in sorted(flop_breakdown(model, (h, w)).items(), key=lambda kv: -kv[1]):
            print(f"  {op:20s} {n}")
    return 0


def cmd_convert(args) -> int:
    src, dst = Path(args.input), Path(args.output)
    kinds = (src.suffix.lower(), dst.suffix.lower())
    if kinds == (".flt", ".pgm"):
        write_pgm16(dst, read_tensor(src))
    elif kinds == (".pgm", ".flt"):
        write_tensor(dst, read_pgm16(src))
    else:
        raise UsageError(f"convert supports .flt -> .pgm and .pgm -> .flt, got {src.suffix} -> {dst.suffix}")
    print(f"{src} -> {dst}")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="flsn", description="Single-frame SIM super-resolution toolkit.",
                epilog=_key_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-q", "--quiet", action="store_true", help="only print results")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_, epilog=_key_help(),
                            formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.add_argument("--config", help="sectioned key = value config file")
        sp.add_argument("-q", "--quiet", action="store_true", default=argparse.SUPPRESS, help="only print results")
        sp.set_defaults(func=fn)
        return sp

    sp = command("synth", cmd_synth, "generate a synthetic SIM dataset")
    sp.add_argument("--samples", type=int, help="training samples")
    sp.add_argument("--test-samples", type=int, help="test samples")
    sp.add_argument("--regime", choices=["HE", "LE", "BOTH"], help="noise regime; BOTH writes HE/ and LE/ roots")
    sp.add_argument("--seed", type=int, help="dataset seed")
    sp.add_argument("--out", help="dataset root")
    sp.add_argument("--size", type=int, help="LR frame side length")
    sp.add_argument("--style", choices=["filaments", "puncta"])

    sp = command("train", cmd_train, "train a model on a dataset's train split")
    sp.add_argument("--data", help="dataset root")
    sp.add_argument("--out", help="run directory for log and checkpoints")
    sp.add_argument("--no-ne", action="store_true", help="drop the noise estimator")
    sp.add_argument("--no-ba", action="store_true", help="drop bandpass attention")
    sp.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint with optimizer state")
    sp.add_argument("--seed", type=int, help="training seed")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--max-steps", type=int, help="stop after this many optimizer steps (0 = no cap)")

    sp = command("infer", cmd_infer, "super-resolve one FLT1 frame")
    sp.add_argument("checkpoint")
    sp.add_argument("input")
    sp.add_argument("output")

    sp = command("eval", cmd_eval, "score a checkpoint (or 'bilinear') on a dataset split")
    sp.add_argument("checkpoint")
    sp.add_argument("data", nargs="?", help="dataset root")
    sp.add_argument("--split", default="test", choices=["train", "test"])
    sp.add_argument("--frames", default="all", help="'all' or comma-separated frame indices")
    sp.add_argument("--report", help="CSV path (default: next to the checkpoint)")

    sp = command("gradcheck", cmd_gradcheck, "finite-difference check of every op and a small FLSN")
    sp.add_argument("--samples", type=int, default=50, help="coordinates per tensor")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--tol", type=float, default=G.TOLERANCE)

    sp = command("info", cmd_info, "parameter count and FLOPs")
    sp.add_argument("checkpoint", nargs="?")
    sp.add_argument("--size", type=int, nargs=2, metavar=("H", "W"), help="LR input size")
    sp.add_argument("--no-ne", action="store_true")
    sp.add_argument("--no-ba", action="store_true")
    sp.add_argument("-v", "--verbose", action="store_true", help="per-op FLOP breakdown")

    sp = command("convert", cmd_convert, "convert between FLT1 (.flt) and 16-bit PGM (.pgm)")
    sp.add_argument("input")
    sp.add_argument("output")
    return p


def _split_overrides(parser: argparse.ArgumentParser, argv: list[str]) -> tuple[list[str], list[str]]:
    """Separate ``--key value`` config overrides from the command's own flags."""
    subs = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    pos = next((i for i, tok in enumerate(argv) if tok in subs.choices), None)
    if pos is None:
        return argv, []
    known = subs.choices[argv[pos]]._option_string_actions
    keep, extra, i = argv[: pos + 1], [], pos + 1
    while i < len(argv):
        tok = argv[i]
        if tok.startswith("--") and tok.split("=", 1)[0] not in known:
            take = 1 if "=" in tok else 2
            extra += argv[i : i + take]
            i += take
        else:
            keep.append(tok)
            i += 1
    return keep, extra


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        argv = list(sys.argv[1:] if argv is None else argv)
        argv, extra = _split_overrides(parser, argv)
        args = parser.parse_args(argv)
        args.overrides = _overrides(extra)
        if not args.quiet:
            logging.basicConfig(level=logging.INFO, format="%(message)s")
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (FLSNError, OSError, ArithmeticError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
