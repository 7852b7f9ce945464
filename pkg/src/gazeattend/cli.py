"""Command line entry point.

Every subcommand accepts ``--config FILE``: a JSON document whose top-level
keys (or a section named after the subcommand) supply option values.
Explicit flags override the config. Each output directory receives a
``provenance.json`` with the resolved options, their hash, the seed and
library versions.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import shutil
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .boxfit import read_detections, write_detections
from .dataset import SyntheticSceneConfig, generate_synthetic, load_image, load_manifest
from .dense import (convert_to_fully_convolutional, dense_inference, load_dense_model,
                    sliding_window_inference)
from .distill import (DistillConfig, build_teachers, finetune_kl, load_teachers,
                      select_distill_frames)
from .errors import ConfigError, DataError, GazeAttendError
from .evaluation import (EvalReport, confusion_report, timing_benchmark, write_per_class_csv,
                         write_report)
from .model import ClassifierSpec, TrainConfig, load_patch_model, train_patch_classifier
from .pipeline import (eval_frames, fit_boxes, infer_frames, load_maps, score_detections,
                       select_gaze_boxes)

log = logging.getLogger("gazeattend")

DATASET_URL = "https://iplab.dmi.unict.it/WS_OBJ_DET/"
PROVENANCE = "provenance.json"

# option defaults, applied after config-file values
DEFAULTS = {
    "seed": 0,
    "force": False,
    "jobs": 1,
    "split": "test",
    "backbone": "tiny",
    "batch": 8,
    "lr": 1e-3,
    "epochs": 60,
    "patience": 5,
    "input_side": 300,
    "momentum": 0.9,
    "hflip": False,
    "class_weighting": False,
    "mode": "dense",
    "batch_size": 64,
    "masks": False,
    "n": 1659,
    "direction": "teacher_student",
    "neighborhood": 100,
    "rule": "mode",
    "frames": 5,
    "repetitions": 1,
    "strides": "32,30",
    "name": "method",
}
COMMAND_DEFAULTS = {
    "train-patch": {"split": "train"},
    "distill": {"batch": 1, "epochs": 20, "patience": 3, "split": "train"},
}
PATH_OPTIONS = ("manifest", "model", "teachers", "patch_model", "maps", "detections", "timing",
                "pretrained")


def _cache_dir() -> Path:
    return Path(os.environ.get("GAZEATTEND_CACHE", Path.home() / ".cache" / "gazeattend"))


def _resolve(args, command: str) -> dict:
    cfg = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        cfg = {k.replace("-", "_"): v for k, v in doc.items() if not isinstance(v, dict)}
        section = doc.get(command, {})
        cfg.update({k.replace("-", "_"): v for k, v in section.items()})
        cfg["_document"] = doc
    defaults = {**DEFAULTS, **COMMAND_DEFAULTS.get(command, {})}
    opts = {}
    for key, value in vars(args).items():
        if key in ("func", "config", "command"):
            continue
        if value is not None:
            opts[key] = value
        elif key in cfg:
            opts[key] = cfg[key]
        else:
            opts[key] = defaults.get(key)
    opts["_document"] = cfg.get("_document", {})
    for key in PATH_OPTIONS:
        if opts.get(key) is not None and not Path(opts[key]).exists():
            raise ConfigError(f"--{key.replace('_', '-')} path does not exist: {opts[key]}")
    return opts


def _require(opts, *keys):
    missing = [k for k in keys if opts.get(k) is None]
    if missing:
        raise ConfigError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _prepare_out(opts) -> Path:
    _require(opts, "out")
    out = Path(opts["out"])
    if out.exists() and any(out.iterdir()):
        if not opts["force"]:
            raise ConfigError(f"output directory {out} is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_provenance(out: Path, command: str, opts: dict) -> None:
    resolved = {k: v for k, v in sorted(opts.items()) if not k.startswith("_") and k != "force"}
    if opts.get("_document"):
        resolved["config_document"] = opts["_document"]
    blob = json.dumps(resolved, sort_keys=True, default=str)
    doc = {
        "command": command,
        "options": json.loads(blob),
        "config_hash": hashlib.sha256(blob.encode()).hexdigest(),
        "seed": opts.get("seed"),
        "versions": {
            "gazeattend": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "torch": torch.__version__,
        },
    }
    (out / PROVENANCE).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(opts):
    doc = opts["_document"]
    fields = set(SyntheticSceneConfig.__dataclass_fields__)
    scene = doc.get("synthetic") or {k: v for k, v in doc.items() if k in fields}
    cfg = SyntheticSceneConfig.from_dict(scene)
    out = _prepare_out(opts)
    generate_synthetic(cfg, int(opts["seed"]), out)
    opts["synthetic"] = cfg.to_dict()
    _write_provenance(out, "synth", opts)
    print(out / "manifest.json")


def cmd_train_patch(opts):
    _require(opts, "manifest")
    manifest = load_manifest(opts["manifest"])
    spec = ClassifierSpec(opts["backbone"], manifest.num_classes, int(opts["input_side"]),
                          pretrained=opts.get("pretrained"))
    cfg = TrainConfig(batch_size=int(opts["batch"]), learning_rate=float(opts["lr"]),
                      max_epochs=int(opts["epochs"]), patience=int(opts["patience"]),
                      seed=int(opts["seed"]), momentum=float(opts["momentum"]),
                      class_weighting=bool(opts["class_weighting"]), hflip=bool(opts["hflip"]))
    spec.validate()
    cfg.validate()
    out = _prepare_out(opts)
    torch.manual_seed(cfg.seed)
    model = train_patch_classifier(manifest, opts["split"], spec, cfg, out)
    _write_provenance(out, "train-patch", opts)
    log.info("best epoch %s", model.history.get("best_epoch"))


def cmd_convert(opts):
    _require(opts, "model")
    dense = convert_to_fully_convolutional(load_patch_model(opts["model"]))
    out = _prepare_out(opts)
    dense.save(out)
    _write_provenance(out, "convert", opts)


def _load_for_mode(opts):
    if opts["mode"] == "sliding":
        return load_patch_model(opts["model"])
    if opts["mode"] == "dense":
        return load_dense_model(opts["model"])
    raise ConfigError(f"unknown inference mode {opts['mode']!r}")


def cmd_infer(opts):
    _require(opts, "model", "manifest")
    model = _load_for_mode(opts)
    manifest = load_manifest(opts["manifest"])
    frames = eval_frames(manifest, opts["split"])
    out = _prepare_out(opts)
    infer_frames(model, frames, out, masks=bool(opts["masks"]), batch_size=int(opts["batch_size"]),
                 jobs=int(opts["jobs"]))
    _write_provenance(out, "infer", opts)


def cmd_distill(opts):
    _require(opts, "model", "manifest")
    manifest = load_manifest(opts["manifest"])
    dense = load_dense_model(opts["model"])
    cfg = DistillConfig(num_frames=int(opts["n"]), batch_size=int(opts["batch"]),
                        learning_rate=float(opts["lr"]), max_epochs=int(opts["epochs"]),
                        patience=int(opts["patience"]), seed=int(opts["seed"]),
                        direction=opts["direction"])
    cfg.validate()
    frames = select_distill_frames(manifest, cfg.num_frames, cfg.seed, opts["split"])
    if opts.get("teachers"):
        teachers = load_teachers(opts["teachers"], [f.frame_id for f in frames])
    else:
        _require(opts, "patch_model")
        digest = hashlib.sha256((Path(opts["patch_model"]) / "weights.pt").read_bytes())
        digest.update(Path(opts["manifest"]).read_bytes())
        cache = _cache_dir() / "teachers" / digest.hexdigest()[:16]
        frame_ids = [f.frame_id for f in frames]
        try:
            teachers = load_teachers(cache, frame_ids)
        except DataError:
            build_teachers(load_patch_model(opts["patch_model"]), frames, cache,
                           batch_size=int(opts["batch_size"]), jobs=int(opts["jobs"]))
            teachers = load_teachers(cache, frame_ids)
    out = _prepare_out(opts)
    student = finetune_kl(dense, teachers, cfg, manifest)
    student.save(out)
    _dump(out / "distill_history.json", student.history)
    _write_provenance(out, "distill", opts)


def cmd_fit_boxes(opts):
    _require(opts, "manifest")
    manifest = load_manifest(opts["manifest"])
    frames = eval_frames(manifest, opts["split"])
    if opts.get("detections"):
        chosen = select_gaze_boxes(read_detections(opts["detections"]), frames)
    else:
        _require(opts, "maps")
        maps = load_maps(opts["maps"], frames)
        chosen = fit_boxes(maps, frames, manifest.other_index, int(opts["neighborhood"]), opts["rule"])
    out = _prepare_out(opts)
    write_detections(out / "detections.jsonl", {fid: [d] if d else [] for fid, d in chosen.items()})
    _write_provenance(out, "fit-boxes", opts)


def cmd_evaluate(opts):
    _require(opts, "detections", "manifest")
    manifest = load_manifest(opts["manifest"])
    frames = eval_frames(manifest, opts["split"])
    per_frame = read_detections(opts["detections"])
    chosen = {}
    for fid, dets in per_frame.items():
        if len(dets) > 1:
            raise DataError(f"frame {fid} has {len(dets)} detections; at most one is scored")
        chosen[fid] = dets[0] if dets else None
    report = score_detections(chosen, manifest, frames)
    if opts.get("timing"):
        report.timing = json.loads(Path(opts["timing"]).read_text())
    out = _prepare_out(opts)
    write_report(out / "report.json", report)
    write_per_class_csv(out / "per_class.csv", {opts["name"]: report}, manifest.class_names)
    _write_provenance(out, "evaluate", opts)
    print(json.dumps({"map": report.map, "map50": report.map50}))


def cmd_bench(opts):
    _require(opts, "model", "manifest")
    model = load_patch_model(opts["model"])
    dense = convert_to_fully_convolutional(model)
    manifest = load_manifest(opts["manifest"])
    frames = eval_frames(manifest, opts["split"])[: int(opts["frames"])]
    images = [load_image(f.image_path) for f in frames]
    jobs, batch = int(opts["jobs"]), int(opts["batch_size"])
    methods = {"dense": lambda im: dense_inference(dense, im)}
    for stride in (int(s) for s in str(opts["strides"]).split(",") if s):
        methods[f"sliding_s{stride}"] = (
            lambda im, s=stride: sliding_window_inference(model, im, stride=s, batch_size=batch, jobs=jobs))
    timing = timing_benchmark(methods, images, repetitions=int(opts["repetitions"]))
    out = _prepare_out(opts)
    _dump(out / "timing.json", timing)
    _write_provenance(out, "bench", opts)
    print(json.dumps(timing))


def cmd_report(opts):
    _require(opts, "manifest")
    manifest = load_manifest(opts["manifest"])
    out = _prepare_out(opts)
    if opts.get("model"):
        report = confusion_report(load_patch_model(opts["model"]), manifest, opts["split"],
                                  out / "confusion.csv")
        _dump(out / "classifier.json", report.to_json())
    if opts.get("reports"):
        reports = {}
        for item in opts["reports"]:
            name, _, path = item.partition("=")
            if not path:
                name, path = Path(item).parent.name, item
            if not Path(path).is_file():
                raise ConfigError(f"report not found: {path}")
            reports[name] = EvalReport.from_json(json.loads(Path(path).read_text()))
        write_per_class_csv(out / "per_class_table.csv", reports, manifest.class_names)
        _dump(out / "summary.json", {k: {"map": r.map, "map50": r.map50, "timing": r.timing}
                                     for k, r in reports.items()})
    _write_provenance(out, "report", opts)


def cmd_fetch(opts):
    print(f"The museum dataset is distributed at {DATASET_URL}")
    if not opts.get("verify"):
        return
    bad = []
    for item in opts["verify"]:
        path, _, expected = item.partition("=")
        if not Path(path).is_file():
            raise DataError(f"file to verify not found: {path}")
        h = hashlib.sha256()
        with open(path, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
        ok = h.hexdigest() == expected.lower()
        print(f"{'OK  ' if ok else 'FAIL'} {path}")
        if not ok:
            bad.append(path)
    if bad:
        raise DataError(f"checksum mismatch: {bad}")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gazeattend", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config; flags override its values")
    common.add_argument("--out")
    common.add_argument("--force", action="store_const", const=True, default=None)
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int, help="threads for sliding-window batches")

    def add(name, func, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=func)
        return p

    add("synth", cmd_synth, "generate a synthetic gaze dataset")

    p = add("train-patch", cmd_train_patch, "train the gaze-patch classifier")
    p.add_argument("--manifest")
    p.add_argument("--split")
    p.add_argument("--backbone", choices=["tiny", "resnet18"])
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--input-side", type=int)
    p.add_argument("--momentum", type=float)
    p.add_argument("--pretrained", help="torchvision resnet18 state dict")
    p.add_argument("--hflip", action="store_const", const=True, default=None)
    p.add_argument("--class-weighting", action="store_const", const=True, default=None)

    p = add("convert", cmd_convert, "convert a patch classifier to fully convolutional form")
    p.add_argument("--model")

    p = add("infer", cmd_infer, "write class maps for a split")
    p.add_argument("--mode", choices=["sliding", "dense"])
    p.add_argument("--model")
    p.add_argument("--manifest")
    p.add_argument("--split")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--masks", action="store_const", const=True, default=None, help="also write mask PNGs")

    p = add("distill", cmd_distill, "KL-finetune a dense model on sliding-window maps")
    p.add_argument("--model")
    p.add_argument("--teachers", help="directory of sliding-window class maps")
    p.add_argument("--patch-model", help="build missing teachers with this classifier")
    p.add_argument("--manifest")
    p.add_argument("--split")
    p.add_argument("--n", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--batch-size", type=int, help="sliding-window batch when building teachers")
    p.add_argument("--direction", choices=["teacher_student", "student_teacher"])

    p = add("fit-boxes", cmd_fit_boxes, "turn class maps (or external detections) into attended detections")
    p.add_argument("--maps")
    p.add_argument("--detections", help="external detections JSONL for gaze-box selection")
    p.add_argument("--manifest")
    p.add_argument("--split")
    p.add_argument("--neighborhood", type=int)
    p.add_argument("--rule", choices=["mode", "median"])

    p = add("evaluate", cmd_evaluate, "score detections with mAP and mAP50")
    p.add_argument("--detections")
    p.add_argument("--manifest")
    p.add_argument("--split")
    p.add_argument("--timing", help="timing.json from bench")
    p.add_argument("--name", help="method name for the per-class CSV")

    p = add("bench", cmd_bench, "time sliding-window and dense inference")
    p.add_argument("--model")
    p.add_argument("--manifest")
    p.add_argument("--split")
    p.add_argument("--frames", type=int)
    p.add_argument("--repetitions", type=int)
    p.add_argument("--strides", help="comma-separated sliding-window strides")
    p.add_argument("--batch-size", type=int)

    p = add("report", cmd_report, "confusion matrix and per-class AP tables")
    p.add_argument("--model")
    p.add_argument("--manifest")
    p.add_argument("--split")
    p.add_argument("--reports", nargs="+", help="NAME=report.json entries")

    p = add("fetch", cmd_fetch, "print the dataset URL and verify downloaded files")
    p.add_argument("--verify", nargs="+", help="PATH=SHA256 entries")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    command = args.command
    del args.verbose
    try:
        opts = _resolve(args, command)
        args.func(opts)
    except GazeAttendError as exc:
        print(f"gazeattend {command}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
