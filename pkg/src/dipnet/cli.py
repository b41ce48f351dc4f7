"""Command-line entry point: train, denoise, eval, sweep, gradcheck.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
numeric error.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .checkpoint import CheckpointError
from .config import ConfigError, load_run_config
from .data import PAPER_SIGMAS, ImageBuffer, ImageFormatError, list_images, load_directory, load_image, save_image
from .train.evaluate import denoise_image, evaluate, evenly_spaced, noise_sensitivity_sweep
from .train.trainer import DivergenceError, Trainer, load_generator

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _floats(text: str) -> List[float]:
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dipnet", description="Blind image denoising with learned image priors.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model from a key = value config file")
    t.add_argument("--config", help="config file (keys documented in README)")
    t.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value; may repeat")
    t.add_argument("--seed", type=int, help="run seed (beats DIPNET_SEED and the file)")
    t.add_argument("--out", help="output directory (overrides out_dir)")
    t.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.ckpt")

    d = sub.add_parser("denoise", help="denoise an image or a directory of images")
    d.add_argument("checkpoint")
    d.add_argument("input", help="PNG/PPM/PGM file or directory")
    d.add_argument("output_dir")

    e = sub.add_parser("eval", help="PSNR/SSIM per noise level on a clean image directory")
    e.add_argument("checkpoint")
    e.add_argument("clean_dir")
    e.add_argument("--sigmas", type=_floats, default=list(PAPER_SIGMAS))
    e.add_argument("--seed", type=int, default=0, help="noise seed")
    e.add_argument("--out", help="CSV path (default: stdout)")

    s = sub.add_parser("sweep", help="PSNR curve over evenly spaced noise levels")
    s.add_argument("checkpoint")
    s.add_argument("clean_dir")
    s.add_argument("--sigma-min", type=float, default=5.0)
    s.add_argument("--sigma-max", type=float, default=100.0)
    s.add_argument("--steps", type=int, default=20)
    s.add_argument("--seed", type=int, default=0, help="noise seed")
    s.add_argument("--out", help="CSV path (default: stdout)")

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks in float64")
    g.add_argument("scope", choices=["primitives", "blocks", "end2end"])
    g.add_argument("--seeds", type=int, default=5, help="number of seeds per case")
    return p


def _emit_csv(header: Sequence[str], rows, out: Optional[str]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([v if isinstance(v, str) else repr(float(v)) for v in r])
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())


def cmd_train(args) -> int:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out:
        overrides.append(f"out_dir={args.out}")
    rc = load_run_config(args.config, overrides)
    out = Path(rc.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(rc.to_text())
    ckpt = out / "checkpoint.ckpt"
    if args.resume:
        if not ckpt.exists():
            raise FileNotFoundError(f"nothing to resume: {ckpt} does not exist")
        trainer = Trainer.from_checkpoint(ckpt, out)
        if trainer.tc != rc.train or trainer.mc != rc.model:
            raise ConfigError("config differs from the checkpoint being resumed")
    else:
        trainer = Trainer(rc.train, rc.model, rc.data, out)
    trainer.run()
    last = trainer.records[-1] if trainer.records else None
    if last is not None:
        print(f"step {last['step']}: psnr {last['psnr_db']:.3f} dB at sigma {last['sigma']:g}; wrote {out}")
    return EXIT_OK


def _gather_inputs(path: Path) -> List[Path]:
    if path.is_dir():
        files = list_images(path)
        if not files:
            raise FileNotFoundError(f"no PNG/PPM/PGM images in {path}")
        return files
    if not path.exists():
        raise FileNotFoundError(f"{path} does not exist")
    return [path]


def cmd_denoise(args) -> int:
    net, _ = load_generator(args.checkpoint)
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    failures = 0
    for path in _gather_inputs(Path(args.input)):
        try:
            img = load_image(path)
        except ImageFormatError as exc:
            print(f"error: {exc}", file=sys.stderr)
            failures += 1
            continue
        den = denoise_image(net, img.rgb().values)
        if img.channels == 1:
            den = den.mean(axis=0, keepdims=True)
        save_image(ImageBuffer(den, img.source_id), out_dir / path.name)
    return EXIT_RUNTIME if failures else EXIT_OK


def cmd_eval(args) -> int:
    if not args.sigmas or min(args.sigmas) <= 0:
        raise UsageError("eval: --sigmas needs positive values")
    net, _ = load_generator(args.checkpoint)
    images = load_directory(args.clean_dir)
    rows = [evaluate(net, images, s, args.seed) for s in args.sigmas]
    table = [(format(r.sigma, "g"), r.psnr_db, r.ssim) for r in rows]
    if len(rows) > 1:
        table.append(("average", float(np.mean([r.psnr_db for r in rows])), float(np.mean([r.ssim for r in rows]))))
    _emit_csv(("sigma", "psnr_db", "ssim"), table, args.out)
    return EXIT_OK


def cmd_sweep(args) -> int:
    try:
        sigmas = evenly_spaced(args.sigma_min, args.sigma_max, args.steps)
    except ValueError as exc:
        raise UsageError(f"sweep: {exc}") from None
    net, _ = load_generator(args.checkpoint)
    rows = noise_sensitivity_sweep(net, load_directory(args.clean_dir), sigmas, args.seed)
    _emit_csv(("sigma", "psnr_db"), [(r.sigma, r.psnr_db) for r in rows], args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .verify import TOLERANCE, run_suite

    if args.seeds < 1:
        raise UsageError("gradcheck: --seeds must be at least 1")
    failed = []
    for rep in run_suite(args.scope, range(args.seeds)):
        status = "ok" if rep.passed else "FAIL"
        print(f"{rep.name:<32} max_rel_error={rep.max_rel_error:.3e} checked={rep.checked} "
              f"kinks_skipped={rep.skipped} {status}")
        if not rep.passed:
            failed.append(rep.name)
    if failed:
        print(f"gradcheck {args.scope}: over tolerance {TOLERANCE:g}: {', '.join(failed)}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"gradcheck {args.scope}: all cases under {TOLERANCE:g}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "denoise": cmd_denoise, "eval": cmd_eval, "sweep": cmd_sweep,
            "gradcheck": cmd_gradcheck}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, CheckpointError, ImageFormatError, OSError, ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
