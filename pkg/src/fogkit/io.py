"""On-disk formats: PNG rasters, Cityscapes disparity, label sidecars, digests."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
from PIL import Image

from .core import ScalarMap, SemanticLabeling


def read_rgb(path) -> np.ndarray:
    """Read an 8- or 16-bit RGB PNG as float64 in ``[0, 1]``."""
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I"):
            raise ValueError(f"{path}: expected a color image, got mode {im.mode}")
        arr = np.asarray(im.convert("RGB") if im.mode not in ("RGB",) else im)
    scale = 65535.0 if arr.dtype == np.uint16 else 255.0
    return arr.astype(np.float64) / scale


def quantize8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_rgb(path, img: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(quantize8(img), mode="RGB").save(path, format="PNG")


def _read_u16(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise ValueError(f"{path}: expected a single-channel image")
    return arr.astype(np.int64)


def _write_u16(path, raw: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(raw, dtype=np.uint16)).save(path, format="PNG")


def read_disparity(path) -> ScalarMap:
    """Cityscapes 16-bit disparity: ``d = (raw - 1) / 256``, ``raw == 0`` invalid."""
    raw = _read_u16(path)
    return ScalarMap((raw - 1.0) / 256.0, raw > 0)


def write_disparity(path, disparity: ScalarMap) -> None:
    raw = np.round(np.asarray(disparity.values) * 256.0 + 1.0)
    raw = np.where(disparity.mask, np.clip(raw, 1, 65535), 0)
    _write_u16(path, raw)


def write_transmittance(path, t: ScalarMap) -> None:
    """t in ``[0, 1]`` quantized to 16 bits (``raw = round(t * 65535)``)."""
    _write_u16(path, np.round(np.clip(t.values, 0.0, 1.0) * 65535.0))


def read_transmittance(path) -> ScalarMap:
    return ScalarMap(_read_u16(path) / 65535.0)


def sidecar_path(label_path) -> Path:
    p = Path(label_path)
    return p.with_suffix(".json")


def write_labels(path, labeling: SemanticLabeling, class_names: list[str] | None = None) -> None:
    """Write an 8-bit id map plus a JSON sidecar with the id -> class table."""
    labels = np.asarray(labeling.labels)
    if labels.max() > 255:
        raise ValueError("8-bit label maps hold at most 256 ids")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path, format="PNG")
    table = labeling.id_to_class
    if table is None:
        table = {int(i): int(i) for i in np.unique(labels)}
    meta = {
        "num_classes": int(labeling.num_classes),
        "instance_aware": bool(labeling.instance_aware),
        "id_to_class": {str(k): int(v) for k, v in sorted(table.items())},
    }
    if class_names is not None:
        meta["class_names"] = list(class_names)
    sidecar_path(path).write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def read_labels(path, num_classes: int | None = None) -> SemanticLabeling:
    """Read a label PNG; the sidecar is optional when ``num_classes`` is given."""
    with Image.open(path) as im:
        labels = np.asarray(im).astype(np.int64)
    side = sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text())
        table = {int(k): int(v) for k, v in meta["id_to_class"].items()}
        identity = all(k == v for k, v in table.items())
        return SemanticLabeling(
            labels,
            num_classes=int(meta["num_classes"]),
            instance_aware=bool(meta.get("instance_aware", False)),
            id_to_class=None if identity else table,
        )
    if num_classes is None:
        raise ValueError(f"{path}: no sidecar table and num_classes not given")
    return SemanticLabeling(labels, num_classes=num_classes)


def write_class_map(path, classes: np.ndarray, num_classes: int) -> None:
    write_labels(path, SemanticLabeling(np.asarray(classes, dtype=np.int64), num_classes))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_json(path, obj) -> None:
    """Deterministic JSON: sorted keys, fixed indentation, trailing newline."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
