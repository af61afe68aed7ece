"""``ggcnseg`` command line: data generation, preprocessing, training, inference,
evaluation and the built-in correctness checks.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 failed check.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import checks
from .errors import ConfigurationError, DataError, GenerationError, GgcnError, NoSignalError
from .files import (read_mask_png, read_manifest, read_png_rgb, write_manifest, write_mask_png, write_pgm,
                    write_png_rgb)
from .preprocess import (apply_shift, coregister, extract_patches, gaussian_gradient_magnitude, normalize_bands,
                         synth_scene, to_grayscale, tsdm)
from .trainer import (Model, config_from_mapping, config_items, evaluate, format_table, history_csv, infer,
                      metrics_csv, read_config_file, train)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3

log = logging.getLogger("ggcnseg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _shift(text: str):
    try:
        dy, dx = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'dy,dx', got {text!r}") from None
    return dy, dx


def _print_config(name: str, items) -> None:
    print(f"[{name}] resolved config")
    for k, v in items:
        print(f"  {k}={v}")


def _prepare_out(path: Path, force: bool) -> Path:
    """Create an output directory, refusing to reuse a non-empty one without ``--force``."""
    if path.exists():
        if not path.is_dir():
            raise UsageError(f"output {path} exists and is not a directory")
        if any(path.iterdir()):
            if not force:
                raise UsageError(f"output directory {path} is not empty; pass --force to overwrite")
            shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _args_items(args, skip=("func", "command")):
    return [(k, v) for k, v in vars(args).items() if k not in skip]


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    _print_config("synth", _args_items(args))
    out = _prepare_out(Path(args.out), args.force)
    seeds = np.random.default_rng(args.seed).integers(0, 2 ** 31 - 1, size=args.count)
    pairs, truth, shifts = [], [], ["scene\tdy\tdx"]
    for i, s in enumerate(seeds):
        name = f"scene_{i:03d}"
        img, mask, shifted = synth_scene(int(s), args.size, args.size, args.buildings, args.shift, args.noise)
        write_png_rgb(out / f"{name}.png", img)
        write_mask_png(out / f"{name}_mask.png", mask)
        write_mask_png(out / f"{name}_shifted.png", shifted)
        pairs.append((f"{name}.png", f"{name}_shifted.png"))
        truth.append((f"{name}.png", f"{name}_mask.png"))
        shifts.append(f"{name}\t{args.shift[0]}\t{args.shift[1]}")
    write_manifest(out / "manifest.tsv", pairs)
    write_manifest(out / "truth.tsv", truth)
    (out / "shifts.tsv").write_text("\n".join(shifts) + "\n")
    print(f"wrote {args.count} scenes to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# preprocess


def cmd_preprocess(args) -> int:
    _print_config("preprocess", _args_items(args))
    pairs = read_manifest(args.input)
    out = _prepare_out(Path(args.out), args.force)
    (out / "patches").mkdir()
    report = ["scene\tdy\tdx\tpeak_score\tstatus"]
    manifest = []
    for img_path, mask_path in pairs:
        name = Path(img_path).stem
        img = normalize_bands(read_png_rgb(img_path))
        mask = read_mask_png(mask_path)
        if mask.shape != img.shape[:2]:
            raise DataError(f"{mask_path}: mask size {mask.shape} differs from image {img.shape[:2]}")
        grad = gaussian_gradient_magnitude(to_grayscale(img), args.sigma)
        try:
            est = coregister(grad, mask, args.max_shift, use_edges=args.corr == "edge")
            dy, dx, score, status = est.dy, est.dx, est.peak_score, "ok"
        except NoSignalError as e:
            dy, dx, score, status = 0, 0, 0.0, f"no-signal: {e}"
            print(f"warning: {name}: {e}; keeping the mask unshifted", file=sys.stderr)
        report.append(f"{name}\t{dy}\t{dx}\t{score:.6g}\t{status}")
        labels = tsdm(apply_shift(mask, dy, dx), args.td)
        for k, (ip, lp) in enumerate(extract_patches(img, labels, args.patch, args.overlap)):
            stem = f"patches/{name}_p{k:03d}"
            write_png_rgb(out / f"{stem}.png", ip)
            write_pgm(out / f"{stem}.pgm", lp)
            manifest.append((f"{stem}.png", f"{stem}.pgm"))
    write_manifest(out / "manifest.tsv", manifest)
    (out / "shift_report.tsv").write_text("\n".join(report) + "\n")
    print(f"wrote {len(manifest)} patches from {len(pairs)} scenes to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train / infer / eval

TRAIN_FLAGS = ("lr", "epochs", "batch", "seed", "lr_decay", "lr_floor", "patience", "min_delta", "val_fraction",
               "head", "timesteps", "connectivity", "td")


def cmd_train(args) -> int:
    values = read_config_file(args.config) if args.config else {}
    cfg = config_from_mapping(values)
    overrides = {k: getattr(args, k) for k in TRAIN_FLAGS if getattr(args, k) is not None}
    cfg = config_from_mapping(overrides, cfg)
    _print_config("train", [("manifest", args.manifest), ("out", args.out)] + config_items(cfg))
    out = _prepare_out(Path(args.out), args.force)
    result = train(cfg, args.manifest)
    result.model.save(out / "checkpoint.gstn")
    (out / "loss.csv").write_text(history_csv(result.history))
    last = result.history[-1]
    print(f"trained {last[0]} epochs; final train loss {last[1]:.6f}, val loss {last[2]:.6f}")
    return EXIT_OK


def cmd_infer(args) -> int:
    _print_config("infer", _args_items(args))
    model = Model.load(args.checkpoint)
    img = normalize_bands(read_png_rgb(args.image))
    model.cfg.dsfe.check_dims(*img.shape[:2])
    out = _prepare_out(Path(args.out), args.force)
    labels, mask, overlay = infer(model, img)
    write_pgm(out / "labels.pgm", labels)
    write_mask_png(out / "mask.png", mask)
    write_png_rgb(out / "overlay.png", overlay)
    print(f"building pixels: {int(mask.sum())} of {mask.size}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _print_config("eval", _args_items(args))
    if args.csv and Path(args.csv).exists() and not args.force:
        raise UsageError(f"{args.csv} exists; pass --force to overwrite")
    model = Model.load(args.checkpoint)
    total, per_sample = evaluate(model, args.manifest)
    print(format_table([(model.cfg.head.upper(), total)]))
    if args.csv:
        Path(args.csv).write_text(metrics_csv(total, per_sample))
    return EXIT_OK


# ---------------------------------------------------------------------------
# checks


def _report(results) -> int:
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed")
    return EXIT_CHECK if failed else EXIT_OK


def cmd_gradcheck(args) -> int:
    _print_config("gradcheck", _args_items(args))
    try:
        results = checks.run_gradchecks(args.module, args.seed)
    except KeyError as e:
        raise UsageError(e.args[0]) from None
    return _report(results)


def cmd_oracle(args) -> int:
    _print_config("oracle", _args_items(args))
    try:
        results = checks.run_oracles(args.which, args.seed)
    except KeyError as e:
        raise UsageError(e.args[0]) from None
    return _report(results)


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ggcnseg", description="Building footprint segmentation with gated graph convolutions.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate synthetic scenes with misaligned masks")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--buildings", type=int, default=3)
    s.add_argument("--shift", type=_shift, default=(0, 0), help="planted mask offset 'dy,dx'")
    s.add_argument("--noise", type=float, default=0.05)
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="normalise, coregister, label and cut patches")
    s.add_argument("--in", dest="input", required=True, help="manifest of image<TAB>mask lines")
    s.add_argument("--out", required=True)
    s.add_argument("--td", type=int, default=5)
    s.add_argument("--max-shift", type=int, default=8)
    s.add_argument("--patch", type=int, default=64)
    s.add_argument("--overlap", type=int, default=19)
    s.add_argument("--sigma", type=float, default=1.0)
    s.add_argument("--corr", choices=("edge", "filled"), default="edge",
                   help="correlate against the mask boundary (default) or the filled mask")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="train a model on a patch manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="key=value file; flags override it")
    for flag, kind in (("lr", float), ("epochs", int), ("batch", int), ("seed", int), ("lr-decay", float),
                       ("lr-floor", float), ("patience", int), ("min-delta", float), ("val-fraction", float),
                       ("timesteps", int), ("connectivity", int), ("td", int)):
        s.add_argument(f"--{flag}", type=kind)
    s.add_argument("--head", choices=("ggcn", "ggnn", "gcn"))
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="predict labels, mask and overlay for one image")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="OA / F1 / IoU of a checkpoint on a manifest")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--csv", help="also write per-sample metrics here")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    s.add_argument("--module", default="all", help=f"one of {', '.join(checks.GRADCHECK_MODULES)} or all")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("oracle", help="brute-force oracle comparisons")
    s.add_argument("--which", default="all", help=f"one of {', '.join(checks.ORACLES)} or all")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_oracle)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:  # argparse exits on --help and on usage errors
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigurationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, GenerationError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except GgcnError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
