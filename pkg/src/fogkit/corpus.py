"""Directory layout of image corpora and the toy corpus writer.

A corpus directory holds ``<name>.png`` images with optional companions:

* ``<name>_labels.png`` (+ ``.json`` sidecar): semantic or instance labels,
* ``<name>_disparity.png``: 16-bit Cityscapes-style disparity,
* ``camera.json``: the stereo rig shared by every image of the directory.

Files are listed in sorted name order so every pipeline sees the same
sequence on every run.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import io, toy
from .core import SemanticLabeling
from .depth import CameraModel, load_camera
from .optics import LabeledScene

COMPANION_SUFFIXES = ("_labels", "_disparity", "_transmittance")
CAMERA_FILE = "camera.json"


def list_images(directory) -> list[Path]:
    """Sorted ``*.png`` images of ``directory``, companions excluded."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"{directory}: not a directory")
    return sorted(p for p in directory.glob("*.png") if not p.stem.endswith(COMPANION_SUFFIXES))


def label_path(image_path) -> Path:
    p = Path(image_path)
    return p.with_name(p.stem + "_labels.png")


def disparity_path(image_path) -> Path:
    p = Path(image_path)
    return p.with_name(p.stem + "_disparity.png")


def load_labeled_scenes(directory, num_classes: int = toy.NUM_CLASSES) -> list[LabeledScene]:
    """Clear scenes with labels, disparity and the directory camera."""
    directory = Path(directory)
    cam_file = directory / CAMERA_FILE
    if not cam_file.exists():
        raise FileNotFoundError(f"{cam_file}: missing camera calibration")
    camera = load_camera(cam_file)
    scenes = []
    for p in list_images(directory):
        for need in (label_path(p), disparity_path(p)):
            if not need.exists():
                raise FileNotFoundError(f"{need}: missing companion of {p.name}")
        scenes.append(LabeledScene(io.read_rgb(p), io.read_labels(label_path(p), num_classes),
                                   disparity=io.read_disparity(disparity_path(p)), camera=camera, name=p.stem))
    return scenes


def load_labeled_pairs(directory, num_classes: int = toy.NUM_CLASSES) -> list[tuple[np.ndarray, np.ndarray]]:
    """``(image, class map)`` pairs of a labeled evaluation directory."""
    pairs = []
    for p in list_images(directory):
        if not label_path(p).exists():
            raise FileNotFoundError(f"{label_path(p)}: missing labels of {p.name}")
        pairs.append((io.read_rgb(p), io.read_labels(label_path(p), num_classes).class_map()))
    return pairs


def write_camera(path, camera: CameraModel) -> None:
    io.write_json(path, {"focal_length": camera.focal_length, "baseline": camera.baseline,
                         "principal_point": list(camera.principal_point)})


def write_toy_corpus(out, seed: int = 0, num_clear: int = 8, num_real: int = 16, num_test: int = 8,
                     size: int = 128, real_beta_range=(0.001, 0.015), test_beta_range=(0.008, 0.015),
                     hole_fraction: float = 0.1, outlier_fraction: float = 0.02) -> dict:
    """Write a seeded toy corpus under ``out``.

    Subdirectories: ``clear`` (labels, perturbed disparity, camera), ``real``
    (unlabeled foggy images), ``test`` (labeled dense fog) and ``clear_test``
    (labeled clear real-domain images).  ``real_beta.tsv`` records the true
    densities of the real images for evaluation only.  Returns a summary.
    """
    out = Path(out)
    rng = np.random.default_rng(seed)
    clear_dir = out / "clear"
    write_camera(clear_dir / CAMERA_FILE, _scaled_camera(size))
    for i in range(num_clear):
        s = toy.make_scene(rng, size, "clear")
        stem = clear_dir / f"clear_{i:05d}"
        io.write_rgb(stem.with_suffix(".png"), s.image)
        io.write_labels(label_path(stem.with_suffix(".png")), s.instance_labeling(), _names())
        disp = toy.disparity_from_distance(s.distance, _scaled_camera(size), rng, hole_fraction, outlier_fraction)
        io.write_disparity(disparity_path(stem.with_suffix(".png")), disp)
    betas = rng.uniform(*real_beta_range, num_real)
    lines = ["name\tbeta"]
    for i, b in enumerate(betas):
        s = toy.make_scene(rng, size, "real")
        io.write_rgb(out / "real" / f"real_{i:05d}.png", toy.render_real_fog(s, b, rng))
        lines.append(f"real_{i:05d}\t{float(b)!r}")
    (out / "real_beta.tsv").write_text("\n".join(lines) + "\n")
    for sub, fog in (("test", True), ("clear_test", False)):
        for i in range(num_test):
            s = toy.make_scene(rng, size, "real")
            img = toy.render_real_fog(s, rng.uniform(*test_beta_range), rng) if fog else s.image
            p = out / sub / f"{sub}_{i:05d}.png"
            io.write_rgb(p, img)
            io.write_labels(label_path(p), s.class_labeling(), _names())
    return {"seed": int(seed), "num_clear": num_clear, "num_real": num_real, "num_test": num_test, "size": size}


def _scaled_camera(size: int) -> CameraModel:
    f = toy.TOY_CAMERA.focal_length * size / 128.0
    return CameraModel(f, toy.TOY_CAMERA.baseline, (size / 2.0, size / 2.0))


def _names() -> list[str]:
    return [toy.CLASS_NAMES.get(c, f"class{c}") for c in range(toy.NUM_CLASSES)]


def read_class_table(path) -> dict:
    return json.loads(Path(path).read_text())
