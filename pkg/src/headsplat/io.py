"""Atomic file output, deterministic JSON and 8-bit PNG helpers."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

FLOAT_DIGITS = 9


def _round_floats(obj):
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            return None if math.isnan(x) else (1e308 if x > 0 else -1e308)
        return float(f"{x:.{FLOAT_DIGITS}g}")
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return [_round_floats(v) for v in obj.tolist()]
    if isinstance(obj, dict):
        return {str(k): _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    return obj


def dumps(obj) -> str:
    return json.dumps(_round_floats(obj), indent=2, sort_keys=False) + "\n"


def write_bytes_atomic(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj) -> None:
    write_bytes_atomic(path, dumps(obj).encode("utf-8"))


def write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([f"{v:.{FLOAT_DIGITS}g}" if isinstance(v, float) else v for v in row])
    write_bytes_atomic(path, buf.getvalue().encode("utf-8"))


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def write_png(path, image: np.ndarray) -> None:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(image)).save(buf, format="PNG")
    write_bytes_atomic(path, buf.getvalue())


def read_png(path) -> np.ndarray:
    """RGB image as float64 in [0, 1], shape (H, W, 3)."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def read_image_dir(directory) -> tuple[list[str], np.ndarray]:
    """All PNGs of a directory in sorted-name order, stacked to (V, H, W, 3)."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"image directory not found: {directory}")
    names = sorted(p.name for p in directory.glob("*.png"))
    if not names:
        raise FileNotFoundError(f"no PNG images in {directory}")
    images = [read_png(directory / n) for n in names]
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ValueError(f"images in {directory} have differing shapes: {sorted(shapes)}")
    return names, np.stack(images)
