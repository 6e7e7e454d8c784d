"""Command-line entry point: ``fogkit <subcommand> [flags]``.

Every subcommand validates its inputs, runs one pipeline, writes its data
files and a ``provenance.json`` (input digests, parameters, tool version;
no timestamps) next to them.  Logs go to standard error.  Exit status is 0
on success, 2 on usage errors (bad flags, missing inputs, unwritable
outputs) and 1 when the pipeline itself fails.

A ``--config`` JSON file maps flag names (with underscores) to values and
overrides the command line.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import __version__, corpus, curriculum, densify, density, io, toy
from .dbf import FilterParams
from .optics import SimulationParams, estimate_atmospheric_light, simulate
from .segmentation import ToyTrainer

log = logging.getLogger("fogkit.cli")

PROVENANCE_FILE = "provenance.json"


class UsageError(Exception):
    """Invalid invocation: reported with exit status 2."""


# ---------------------------------------------------------------------------
# helpers


def _parallel_map(fn: Callable, items: Sequence, jobs: int) -> list:
    """Ordered map over ``items`` with at most ``jobs`` worker threads."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"missing {what}: {p}")
    return p


def _require_dir(path, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"missing {what} directory: {p}")
    return p


def _prepare_out_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {p}: {exc}") from exc
    if not os.access(p, os.W_OK):
        raise UsageError(f"output directory is not writable: {p}")
    return p


def _prepare_out_file(path) -> Path:
    p = Path(path)
    _prepare_out_dir(p.parent if str(p.parent) else Path("."))
    if p.is_dir():
        raise UsageError(f"output path is a directory: {p}")
    return p


def _digests(paths: Iterable[Path]) -> dict[str, str]:
    return {str(p): io.sha256_file(p) for p in sorted(set(Path(x) for x in paths)) if p.is_file()}


def _write_provenance(path: Path, args: argparse.Namespace, inputs: Iterable[Path], outputs: Iterable[Path]) -> None:
    params = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config", "log_level")}
    params = json.loads(json.dumps(params, default=str))
    out_root = path.parent
    io.write_json(path, {
        "tool": "fogkit",
        "version": __version__,
        "command": args.command,
        "parameters": params,
        "inputs": _digests(inputs),
        "outputs": {str(Path(p).relative_to(out_root)) if Path(p).is_relative_to(out_root) else str(p): d
                    for p, d in _digests(outputs).items()},
    })


def _simulation_params(args) -> SimulationParams:
    light = tuple(args.light) if args.light is not None else None
    return SimulationParams(
        filter=FilterParams(mu=args.mu, sigma_s=args.sigma_s, sigma_c=args.sigma_c, window_radius=args.window_radius),
        atmospheric_light=light, superpixels=args.superpixels, ransac_iters=args.ransac_iters, seed=args.seed)


def _load_scenes(directory):
    try:
        return corpus.load_labeled_scenes(_require_dir(directory, "clear corpus"))
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc


def _image_inputs(paths: Sequence[str]) -> list[Path]:
    files: list[Path] = []
    for p in map(Path, paths):
        if p.is_dir():
            files.extend(corpus.list_images(p))
        elif p.is_file():
            # shell globs such as dir/*.png also match label/disparity companions
            if p.stem.endswith(corpus.COMPANION_SUFFIXES):
                log.debug("%s: companion file, skipped", p)
                continue
            files.append(p)
        else:
            raise UsageError(f"missing input image: {p}")
    if not files:
        raise UsageError("no input images")
    return files


def _load_density_model(path) -> density.DensityModel:
    return density.DensityModel.load(_require_file(path, "density model"))


def _write_lines(path: Path, header: str, rows: Iterable[str]) -> None:
    path.write_text("\n".join([header, *rows]) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_make_toy_corpus(args) -> None:
    out = _prepare_out_dir(args.out)
    summary = corpus.write_toy_corpus(out, args.seed, args.num_clear, args.num_real, args.num_test, args.size)
    log.info("toy corpus: %s", summary)
    outputs = [p for p in out.rglob("*") if p.is_file() and p.name != PROVENANCE_FILE]
    _write_provenance(out / PROVENANCE_FILE, args, [], outputs)


def cmd_simulate(args) -> None:
    scenes = _load_scenes(args.input)
    out = _prepare_out_dir(args.out)
    params = _simulation_params(args)
    src = Path(args.input)

    def one(scene):
        res = simulate(scene, args.beta, params)
        io.write_rgb(out / f"{scene.name}.png", res.foggy)
        io.write_transmittance(out / f"{scene.name}_transmittance.png", res.t)
        return scene.name, res

    results = _parallel_map(one, scenes, args.jobs)
    rows = [f"{name}\t{res.beta!r}\t{res.regime}\t" + ",".join(repr(c) for c in res.atmospheric_light)
            for name, res in results]
    _write_lines(out / "simulation.tsv", "name\tbeta\tregime\tatmospheric_light", rows)
    outputs = [out / "simulation.tsv"] + [out / f"{n}{s}.png" for n, _ in results for s in ("", "_transmittance")]
    inputs = [p for p in src.iterdir() if p.is_file()]
    _write_provenance(out / PROVENANCE_FILE, args, inputs, outputs)


def cmd_fit_density(args) -> None:
    scenes = _load_scenes(args.input)
    out = _prepare_out_file(args.out)
    hist_out = _prepare_out_file(args.histogram) if args.histogram else None
    betas = sorted(set(args.betas))
    clear = curriculum.ClearCorpus(scenes, _simulation_params(args))

    def features(i):
        return [(density.extract_features(clear.foggy(i, b)), b) for b in betas]

    samples = [s for group in _parallel_map(features, list(range(len(clear))), args.jobs) for s in group]
    model = density.fit_density_model(samples, args.lambda_ridge)
    model.save(out)
    log.info("density model: %d samples, training residual rms %.3g", len(samples), model.residual_rms)
    outputs = [out]
    if hist_out is not None:
        hist = densify.build_distance_histogram([clear.distance(i) for i in range(len(clear))], args.bins)
        hist.save(hist_out)
        outputs.append(hist_out)
    inputs = [p for p in Path(args.input).iterdir() if p.is_file()]
    _write_provenance(out.with_name(out.name + ".provenance.json"), args, inputs, outputs)


def _estimate_files(args) -> tuple[list[Path], np.ndarray]:
    model = _load_density_model(args.model)
    files = _image_inputs(args.inputs)
    est = _parallel_map(lambda p: density.predict_density(model, io.read_rgb(p)), files, args.jobs)
    return files, np.asarray(est)


def _rank_rows(files, est, order) -> list[str]:
    ranked = density.rank_by_density(None, files, [str(f) for f in files], estimates=est)
    by_index = {r.index: r for r in ranked}
    return [f"{by_index[i].name}\t{by_index[i].estimate!r}\t{by_index[i].percentile!r}" for i in order]


def cmd_estimate_density(args) -> None:
    out = _prepare_out_file(args.out)
    files, est = _estimate_files(args)
    _write_lines(out, "path\tbeta\tpercentile", _rank_rows(files, est, range(len(files))))
    _write_provenance(out.with_name(out.name + ".provenance.json"), args, [Path(args.model), *files], [out])


def cmd_rank(args) -> None:
    out = _prepare_out_file(args.out)
    files, est = _estimate_files(args)
    order = [r.index for r in density.rank_by_density(None, files, estimates=est)]
    _write_lines(out, "path\tbeta\tpercentile", _rank_rows(files, est, order))
    _write_provenance(out.with_name(out.name + ".provenance.json"), args, [Path(args.model), *files], [out])


def cmd_densify(args) -> None:
    model = _load_density_model(args.model)
    hist = densify.DistanceHistogram.load(_require_file(args.histogram, "distance histogram"))
    files = _image_inputs(args.inputs)
    if not 0 < args.beta_prev < args.beta_next:
        raise UsageError("need 0 < --beta-prev < --beta-next")
    out = _prepare_out_dir(args.out)

    def one(path):
        img = io.read_rgb(path)
        beta_l = density.predict_density(model, img)
        if beta_l > args.beta_prev:
            return path, beta_l, None
        beta_d = densify.map_target_beta(beta_l, args.beta_prev, args.beta_next)
        light = tuple(args.light) if args.light is not None else estimate_atmospheric_light(img)
        io.write_rgb(out / path.name, densify.densify_image(img, beta_l, beta_d, hist, light))
        return path, beta_l, beta_d

    rows, outputs = [], []
    for path, beta_l, beta_d in _parallel_map(one, files, args.jobs):
        if beta_d is None:
            log.warning("%s: estimate %.4g exceeds --beta-prev %g; skipped", path, beta_l, args.beta_prev)
            continue
        t_l, t_d = densify.expected_transmittance(hist, beta_l), densify.expected_transmittance(hist, beta_d)
        rows.append(f"{path.name}\t{beta_l!r}\t{beta_d!r}\t{t_l!r}\t{t_d!r}")
        outputs.append(out / path.name)
    _write_lines(out / "densify.tsv", "name\tbeta_l\tbeta_d\tt_l\tt_d", rows)
    log.info("densified %d of %d images", len(rows), len(files))
    _write_provenance(out / PROVENANCE_FILE, args, [Path(args.model), Path(args.histogram), *files],
                      [out / "densify.tsv", *outputs])


def cmd_curriculum_run(args) -> None:
    try:
        schedule = curriculum.CurriculumSchedule.parse(args.schedule, args.densify, args.w)
        if args.densify and not schedule.densify:
            schedule = curriculum.CurriculumSchedule(schedule.betas, True, args.w)
    except ValueError as exc:
        raise UsageError(f"bad --schedule: {exc}") from exc
    scenes = _load_scenes(args.clear)
    real_files = corpus.list_images(_require_dir(args.real, "real corpus"))
    model = _load_density_model(args.density_model)
    hist = None
    if args.histogram:
        hist = densify.DistanceHistogram.load(_require_file(args.histogram, "distance histogram"))
    elif schedule.densify:
        raise UsageError("densification needs --histogram")
    test = None
    if args.test:
        try:
            test = corpus.load_labeled_pairs(_require_dir(args.test, "test"))
        except FileNotFoundError as exc:
            raise UsageError(str(exc)) from exc
    initial = ToyTrainer.load(_require_file(args.initial_model, "initial model")) if args.initial_model else None
    out = _prepare_out_dir(args.out)

    clear = curriculum.ClearCorpus(scenes, _simulation_params(args))
    real = curriculum.RealCorpus([io.read_rgb(p) for p in real_files], [p.stem for p in real_files])
    factory = lambda: ToyTrainer(toy.TOY_CLASSES, l2=args.l2, pixels_per_image=args.pixels_per_image,  # noqa: E731
                                 seed=args.seed)
    res = curriculum.run_cmada(schedule, clear, real, model, factory, out, args.epochs, initial_model=initial,
                               histogram=hist, test=test, seed=args.seed, min_confidence=args.min_confidence)
    io.write_json(out / "report.json", res.report)
    rows = []
    if test is not None:
        rows = [("clear model", res.report["clear_model_miou"])]
        rows += [(f"stage {s['z']} (beta={s['beta']:g})", s["miou"]) for s in res.report["stages"]]
    table = curriculum.format_table(rows, f"{schedule.name} dense-fog mIoU (%)") if rows else schedule.name
    (out / "report.txt").write_text(table + "\n")
    log.info("\n%s", table)
    inputs = [p for p in Path(args.clear).iterdir() if p.is_file()] + real_files + [Path(args.density_model)]
    if args.histogram:
        inputs.append(Path(args.histogram))
    if args.test:
        inputs += [p for p in Path(args.test).iterdir() if p.is_file()]
    outputs = [p for p in out.rglob("*") if p.is_file() and p.name != PROVENANCE_FILE]
    _write_provenance(out / PROVENANCE_FILE, args, inputs, outputs)


def cmd_select_model(args) -> None:
    clear_model = ToyTrainer.load(_require_file(args.clear_model, "clear model"))
    fog_model = ToyTrainer.load(_require_file(args.fog_model, "fog model"))
    gate = curriculum.DensityThresholdClassifier(_load_density_model(args.density_model), args.threshold)
    files = _image_inputs(args.inputs)
    out = _prepare_out_dir(args.out)

    def one(path):
        img = io.read_rgb(path)
        route = gate(img)
        pred = (clear_model if route == 1 else fog_model).predict(img)
        io.write_class_map(out / f"{path.stem}_labels.png", pred, toy.NUM_CLASSES)
        return path, route

    rows = [f"{p.name}\t{'clear' if r == 1 else 'fog'}" for p, r in _parallel_map(one, files, args.jobs)]
    _write_lines(out / "routing.tsv", "name\tmodel", rows)
    outputs = [out / "routing.tsv"] + [out / f"{p.stem}_labels.png" for p in files] + \
        [out / f"{p.stem}_labels.json" for p in files]
    _write_provenance(out / PROVENANCE_FILE, args,
                      [Path(args.clear_model), Path(args.fog_model), Path(args.density_model), *files], outputs)


def cmd_eval_miou(args) -> None:
    truth_dir = _require_dir(args.truth, "ground truth")
    pred_dir = _require_dir(args.pred, "prediction")
    out = _prepare_out_file(args.out)
    truth_files = sorted(p for p in truth_dir.glob("*_labels.png"))
    if not truth_files:
        raise UsageError(f"no *_labels.png files in {truth_dir}")
    preds, truths = [], []
    for t in truth_files:
        p = pred_dir / t.name
        if not p.is_file():
            raise UsageError(f"missing prediction for {t.name}")
        preds.append(io.read_labels(p, args.num_classes).class_map())
        truths.append(io.read_labels(t, args.num_classes).class_map())
    conf = curriculum.dataset_confusion(preds, truths, args.num_classes)
    iou = curriculum.iou_per_class(conf)
    report = {
        "images": len(truth_files),
        "subset": args.subset,
        "miou": curriculum.miou_from_confusion(conf, args.subset, args.classes),
        "iou": {str(c): float(v) for c, v in enumerate(iou) if not np.isnan(v)},
    }
    io.write_json(out, report)
    log.info("mIoU %.2f over %d images", 100 * report["miou"], len(truth_files))
    _write_provenance(out.with_name(out.name + ".provenance.json"), args,
                      truth_files + [pred_dir / t.name for t in truth_files], [out])


# ---------------------------------------------------------------------------
# parser


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="seed of every random choice (default 0)")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker threads (default: all cores)")
    p.add_argument("--config", help="JSON file of flag values; overrides the command line")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def _add_simulation(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("fog simulation")
    g.add_argument("--mu", type=float, default=5.0, help="weight of the color term")
    g.add_argument("--sigma-s", type=float, default=20.0, help="spatial bandwidth in pixels")
    g.add_argument("--sigma-c", type=float, default=10.0, help="CIELAB color bandwidth")
    g.add_argument("--window-radius", type=int, default=None, help="spatial window radius (default 3 sigma-s)")
    g.add_argument("--light", type=float, nargs=3, default=None, help="atmospheric light (default: estimate)")
    g.add_argument("--superpixels", type=int, default=None, help="SLIC superpixel count")
    g.add_argument("--ransac-iters", type=int, default=500)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fogkit", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"fogkit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-toy-corpus", help="write a seeded toy corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--num-clear", type=int, default=8)
    p.add_argument("--num-real", type=int, default=16)
    p.add_argument("--num-test", type=int, default=8)
    p.add_argument("--size", type=int, default=128)
    p.set_defaults(func=cmd_make_toy_corpus)

    p = sub.add_parser("simulate", help="synthetic fog on a labeled clear corpus")
    p.add_argument("--input", required=True, help="clear corpus directory")
    p.add_argument("--beta", type=float, required=True, help="attenuation coefficient (1/m)")
    p.add_argument("--out", required=True)
    _add_simulation(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit-density", help="fit the fog density estimator on simulated fog")
    p.add_argument("--input", required=True, help="clear corpus directory")
    p.add_argument("--out", required=True, help="model file")
    p.add_argument("--betas", type=float, nargs="+", default=list(density.TRAINING_BETAS))
    p.add_argument("--lambda-ridge", type=float, default=density.DEFAULT_LAMBDA)
    p.add_argument("--histogram", help="also write the corpus distance histogram here")
    p.add_argument("--bins", type=int, default=densify.DEFAULT_BINS)
    _add_simulation(p)
    p.set_defaults(func=cmd_fit_density)

    for name, func, text in (("estimate-density", cmd_estimate_density, "estimate fog density per image"),
                             ("rank", cmd_rank, "order images by increasing fog density")):
        p = sub.add_parser(name, help=text)
        p.add_argument("inputs", nargs="+", help="images or directories")
        p.add_argument("--model", required=True, help="density model file")
        p.add_argument("--out", required=True, help="TSV of path, beta, percentile")
        p.set_defaults(func=func)

    p = sub.add_parser("densify", help="densify the fog of real foggy images")
    p.add_argument("inputs", nargs="+", help="images or directories")
    p.add_argument("--model", required=True, help="density model file")
    p.add_argument("--histogram", required=True, help="distance histogram file")
    p.add_argument("--beta-prev", type=float, required=True)
    p.add_argument("--beta-next", type=float, required=True)
    p.add_argument("--light", type=float, nargs=3, default=None, help="atmospheric light (default: estimate)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_densify)

    p = sub.add_parser("curriculum-run", help="staged adaptation from clear weather to dense fog")
    p.add_argument("--schedule", required=True, help="preset (CMAda1, CMAda2, CMAda3, with optional +) or betas")
    p.add_argument("--densify", action="store_true", help="densify the real images of each stage")
    p.add_argument("--w", type=float, default=1.0, help="real:synthetic mixing weight")
    p.add_argument("--clear", required=True, help="labeled clear corpus directory")
    p.add_argument("--real", required=True, help="unlabeled real foggy directory")
    p.add_argument("--density-model", required=True)
    p.add_argument("--histogram", help="distance histogram (needed with densification)")
    p.add_argument("--test", help="labeled test directory for per-stage mIoU")
    p.add_argument("--initial-model", help="clear-weather model checkpoint (default: train one)")
    p.add_argument("--epochs", type=int, default=4, help="epochs per stage")
    p.add_argument("--l2", type=float, default=1e-4)
    p.add_argument("--pixels-per-image", type=int, default=400)
    p.add_argument("--min-confidence", type=float, default=None, help="void low-confidence pseudo-labels")
    p.add_argument("--out", required=True)
    _add_simulation(p)
    p.set_defaults(func=cmd_curriculum_run)

    p = sub.add_parser("select-model", help="segment with the clear or the fog model per image")
    p.add_argument("inputs", nargs="+", help="images or directories")
    p.add_argument("--clear-model", required=True)
    p.add_argument("--fog-model", required=True)
    p.add_argument("--density-model", required=True)
    p.add_argument("--threshold", type=float, default=curriculum.CLEAR_THRESHOLD)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_select_model)

    p = sub.add_parser("eval-miou", help="dataset-level mean IoU of predicted label maps")
    p.add_argument("--pred", required=True, help="directory of <name>_labels.png predictions")
    p.add_argument("--truth", required=True, help="directory of <name>_labels.png ground truth")
    p.add_argument("--subset", default="all", choices=["all", "frequent", "void-aware"])
    p.add_argument("--classes", type=int, nargs="+", default=None, help="class ids of the frequent subset")
    p.add_argument("--num-classes", type=int, default=toy.NUM_CLASSES)
    p.add_argument("--out", required=True, help="JSON report")
    p.set_defaults(func=cmd_eval_miou)

    for p in sub.choices.values():
        _add_common(p)
    return parser


def _apply_config(args: argparse.Namespace) -> None:
    if not args.config:
        return
    path = _require_file(args.config, "config file")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError(f"{path}: expected a JSON object")
    for key, value in cfg.items():
        dest = key.replace("-", "_")
        if dest in ("func", "command") or not hasattr(args, dest):
            raise UsageError(f"{path}: unknown setting {key!r} for {args.command}")
        setattr(args, dest, value)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed the message
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, args.log_level), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _apply_config(args)
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        args.func(args)
    except UsageError as exc:
        print(f"fogkit {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        log.error("%s failed: %s", args.command, exc, exc_info=args.log_level == "DEBUG")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
