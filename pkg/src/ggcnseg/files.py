"""Image, label-map and manifest file I/O."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError


def write_png_rgb(path, img: np.ndarray) -> None:
    """Write an H x W x 3 float image in [0, 1] as 8-bit RGB."""
    a = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(a, mode="RGB").save(path, format="PNG")


def read_png_rgb(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            a = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read image {path}: {e}") from e
    return a / 255.0


def write_mask_png(path, mask: np.ndarray) -> None:
    a = (np.asarray(mask) != 0).astype(np.uint8) * 255
    Image.fromarray(a, mode="L").save(path, format="PNG")


def read_mask_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            a = np.asarray(im.convert("L"))
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read mask {path}: {e}") from e
    return (a >= 128).astype(np.uint8)


def write_pgm(path, values: np.ndarray) -> None:
    """Binary 8-bit PGM; used for label maps (0..10) and grayscale images."""
    a = np.asarray(values)
    if a.ndim != 2 or a.min() < 0 or a.max() > 255:
        raise DataError(f"PGM needs a 2-D array of values in 0..255, got shape {a.shape}")
    Image.fromarray(a.astype(np.uint8), mode="L").save(path, format="PPM")


def read_pgm(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im, dtype=np.int64)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read PGM {path}: {e}") from e


def write_manifest(path, pairs) -> None:
    """One ``image<TAB>label`` line per sample; paths are stored as given."""
    Path(path).write_text("".join(f"{a}\t{b}\n" for a, b in pairs))


def read_manifest(path) -> list:
    """Pairs of paths, resolved relative to the manifest's directory."""
    p = Path(path)
    if not p.is_file():
        raise DataError(f"manifest not found: {p}")
    base = p.parent
    out = []
    for n, line in enumerate(p.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{p}:{n}: expected 'image<TAB>label'")
        out.append(tuple(str(q if Path(q).is_absolute() else base / q) for q in parts))
    return out
