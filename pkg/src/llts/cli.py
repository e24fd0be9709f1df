"""Operator commands: synth | train | eval | enhance | stats | gradcheck.

Config files are INI-style key=value sections; flags override file values;
every resolved setting is echoed to a frozen run.json so a run can be
reconstructed.  Exit codes: 0 success, 1 usage, 2 data, 3 numeric failure.
"""

import os
import sys

# the thread cap must be in the environment before numpy binds its BLAS
_threads = os.environ.get("LLTS_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import configparser
import json
import math
from pathlib import Path

import numpy as np

from . import mfia, pgfe
from ._init import he_conv
from ._rng import STREAM_MODEL_INIT, stream
from .datakit import (
    DEFAULT_CLASSES,
    DatasetManifest,
    ImageEntry,
    LabelRecord,
    anchor_stats,
    degrade_lowlight,
    load_dataset,
    load_image_png,
    manifest_to_pairs,
    sample_degrade_params,
    save_dataset,
    save_image_png,
    synth_scene,
)
from .detector import (
    DivergenceError,
    ModelConfig,
    build_model,
    detection_loss,
    evaluate,
    load_checkpoint,
    model_forward,
    save_checkpoint,
    train_loop,
    write_trace_csv,
)
from .detector.targets import assign_targets
from .evalkit import format_report_table, map_suite, parse_predictions, report_to_json
from .tensorops import (
    NumericError,
    Tensor,
    conv2d,
    bilinear_upsample,
    gaussian_blur,
    grad_check,
    grad_check_param,
    no_grad,
    sum_all,
)

GRAD_TOL = 1e-4

# defaults double as the per-section key whitelist; values are coerced to
# the default's type when read from a config file
SCHEMA = {
    "model": {
        "input_size": 640, "num_classes": 3, "stem_channels": 64,
        "backbone_widths": "32,48,64,96", "hrfm_width": 128, "head_width": 128,
        "pgfe_stages": 3, "pgfe_blocks": 2, "attention_ratio": 4,
        "enable_pgfe": True, "enable_hrfm": True, "enable_mfia": True,
        "conf_threshold": 0.25, "nms_iou": 0.45,
    },
    "train": {
        "epochs": 10, "batch_size": 2, "lr": 0.01, "momentum": 0.937,
        "clip_norm": 10.0, "eval_every": 1, "target_map50": 0.0,
    },
    "synth": {"count": 8, "size": 160, "max_signs": 3, "degrade": True},
    "enhance": {"gamma": 2.2, "contrast": 1.2, "sharpen": 0.5, "blur_sigma": 1.0},
}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route to exit code 1 instead of argparse's 2
        raise UsageError(message)


# -- configuration ---------------------------------------------------------


def _coerce(section: str, key: str, raw: str):
    default = SCHEMA[section][key]
    try:
        if isinstance(default, bool):
            lowered = raw.strip().lower()
            if lowered not in configparser.ConfigParser.BOOLEAN_STATES:
                raise ValueError(f"not a boolean: {raw!r}")
            return configparser.ConfigParser.BOOLEAN_STATES[lowered]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as e:
        raise UsageError(f"config [{section}] {key}: {e}") from None


def load_settings(config_path=None) -> dict:
    """Schema defaults overlaid with an optional INI file; unknown keys fail."""
    settings = {section: dict(values) for section, values in SCHEMA.items()}
    if config_path is None:
        return settings
    path = Path(config_path)
    if not path.is_file():
        raise DataError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read_string(path.read_text())
    except configparser.Error as e:
        raise UsageError(f"bad config file: {e}") from None
    for section in parser.sections():
        if section not in settings:
            raise UsageError(f"unknown config section [{section}]")
        for key, raw in parser[section].items():
            if key not in settings[section]:
                raise UsageError(f"unknown config key [{section}] {key}")
            settings[section][key] = _coerce(section, key, raw)
    return settings


def model_config_from(settings: dict) -> ModelConfig:
    m = dict(settings["model"])
    try:
        widths = tuple(int(tok) for tok in str(m.pop("backbone_widths")).split(","))
        return ModelConfig(backbone_widths=widths, **m)
    except ValueError as e:
        raise UsageError(f"bad model settings: {e}") from None


def _apply_flags(settings: dict, args) -> None:
    for section, key, attr in (
            ("model", "input_size", "input_size"),
            ("model", "conf_threshold", "conf"),
            ("model", "nms_iou", "iou"),
            ("model", "enable_pgfe", "enable_pgfe"),
            ("model", "enable_hrfm", "enable_hrfm"),
            ("model", "enable_mfia", "enable_mfia"),
            ("train", "epochs", "epochs"),
            ("synth", "count", "count"),
            ("synth", "size", "size"),
            ("synth", "degrade", "degrade")):
        value = getattr(args, attr, None)
        if value is not None:
            settings[section][key] = value


def _prepare_out_dir(out, force: bool) -> Path:
    if out is None:
        raise UsageError("--out is required for this command")
    path = Path(out)
    if path.exists() and any(path.iterdir()) and not force:
        raise DataError(f"output directory {path} is not empty (use --force)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_run_json(out_dir, command: str, seed: int, settings: dict,
                   inputs: dict | None = None) -> None:
    """Freeze every resolved value; deliberately excludes the output path so
    reruns into different directories stay byte-identical."""
    record = {"command": command, "seed": seed, "settings": settings,
              "inputs": inputs or {}}
    Path(out_dir, "run.json").write_text(
        json.dumps(record, sort_keys=True, indent=1) + "\n")


# -- commands --------------------------------------------------------------


def cmd_synth(args, settings: dict) -> int:
    s = settings["synth"]
    out = _prepare_out_dir(args.out, args.force)
    entries, clean_arrays, low_arrays = [], {}, {}
    for i in range(s["count"]):
        scene_seed = (args.seed << 20) + i
        img, labels = synth_scene(scene_seed, s["size"], s["max_signs"])
        path = f"images/scene_{i:05d}.png"
        clean_arrays[path] = img
        if s["degrade"]:
            low_arrays[path] = degrade_lowlight(img, sample_degrade_params(scene_seed))
        recs = [LabelRecord(int(row[0]), *map(float, row[1:])) for row in labels]
        entries.append(ImageEntry(path, s["size"], s["size"], recs))
    notes = {"generator": dict(s, seed=args.seed,
                               order="cast,gamma,contrast,blur,noise,clamp")}
    clean = DatasetManifest("clean", list(DEFAULT_CLASSES), entries, notes=notes)
    save_dataset(clean, out / "clean", clean_arrays)
    if s["degrade"]:
        low = DatasetManifest("lowlight", list(DEFAULT_CLASSES), entries, notes=notes)
        save_dataset(low, out / "lowlight", low_arrays)
    write_run_json(out, "synth", args.seed, settings)
    counts = clean.class_counts()
    print(f"wrote {len(entries)} scenes to {out} "
          f"(instances per class: {', '.join(map(str, counts))})")
    return 0


def _load_pairs(dataset_dir, expected_classes: int | None = None):
    try:
        manifest = load_dataset(dataset_dir)
    except (FileNotFoundError, ValueError) as e:
        raise DataError(str(e)) from None
    if expected_classes is not None and len(manifest.classes) != expected_classes:
        raise DataError(f"dataset {dataset_dir} has {len(manifest.classes)} classes, "
                        f"model expects {expected_classes}")
    return manifest, manifest_to_pairs(manifest, dataset_dir)


def cmd_train(args, settings: dict) -> int:
    config = model_config_from(settings)
    _, pairs = _load_pairs(args.dataset, config.num_classes)
    val_pairs = _load_pairs(args.val, config.num_classes)[1] if args.val else None
    t = settings["train"]
    out = _prepare_out_dir(args.out, args.force)
    try:
        result = train_loop(
            pairs, config, t["epochs"], args.seed, batch_size=t["batch_size"],
            lr=t["lr"], momentum=t["momentum"], clip_norm=t["clip_norm"],
            val_dataset=val_pairs, eval_every=t["eval_every"],
            target_map50=t["target_map50"] if t["target_map50"] > 0 else None)
    except ValueError as e:
        raise DataError(str(e)) from None
    save_checkpoint(out / "checkpoint.llts", result.model)
    write_trace_csv(out / "trace.csv", result.trace)
    write_run_json(out, "train", args.seed, settings,
                   {"dataset": str(args.dataset), "val": str(args.val) if args.val else None})
    last = result.trace[-1]
    print(f"parameters: {result.model.param_count()}")
    print(f"steps: {result.steps}  final mAP50: {last['mAP50']:.4f}  "
          f"norm_loss: {last['norm_loss']:.4f}")
    return 0


def _eval_from_predictions(pred_dir, manifest, dataset_dir, conf: float):
    dets_by_image, gts_by_image = [], []
    for i, entry in enumerate(manifest.images):
        pred_path = Path(pred_dir) / (Path(entry.path).stem + ".txt")
        try:
            dets = (parse_predictions(pred_path.read_text())
                    if pred_path.exists() else np.zeros((0, 6)))
        except ValueError as e:
            raise DataError(f"{pred_path}: {e}") from None
        dets_by_image.append(dets)
        labels = manifest.label_array(i)
        gts = np.zeros((0, 5))
        if len(labels):
            scale = np.array([entry.width, entry.height, entry.width, entry.height])
            half = labels[:, 3:5] / 2
            corners = np.concatenate([labels[:, 1:3] - half, labels[:, 1:3] + half], axis=1)
            gts = np.concatenate([labels[:, :1], corners * scale], axis=1)
        gts_by_image.append(gts)
    return map_suite(dets_by_image, gts_by_image, range(len(manifest.classes)),
                     conf_threshold=conf)


def cmd_eval(args, settings: dict) -> int:
    manifest, pairs = _load_pairs(args.dataset)
    conf = settings["model"]["conf_threshold"]
    if args.predictions:
        try:
            report = _eval_from_predictions(args.predictions, manifest, args.dataset, conf)
        except ValueError as e:
            raise DataError(str(e)) from None
    else:
        try:
            model = load_checkpoint(args.checkpoint)
        except (FileNotFoundError, ValueError) as e:
            raise DataError(str(e)) from None
        if model.config.num_classes != len(manifest.classes):
            raise DataError(f"checkpoint expects {model.config.num_classes} classes, "
                            f"dataset has {len(manifest.classes)}")
        model.config = model.config.with_overrides(
            conf_threshold=conf, nms_iou=settings["model"]["nms_iou"])
        report = evaluate(model, pairs)
    print(format_report_table(report), end="")
    if args.out:
        out = _prepare_out_dir(args.out, args.force)
        (out / "report.json").write_text(report_to_json(report))
        (out / "report.txt").write_text(format_report_table(report))
        write_run_json(out, "eval", args.seed, settings,
                       {"dataset": str(args.dataset),
                        "checkpoint": str(args.checkpoint) if args.checkpoint else None,
                        "predictions": str(args.predictions) if args.predictions else None})
    return 0


def enhance_image(img: np.ndarray, gamma: float = 2.2, contrast: float = 1.2,
                  sharpen: float = 0.5, blur_sigma: float = 1.0) -> np.ndarray:
    """Closed-form low-light lift: brighten (v^(1/gamma)), stretch contrast
    about the channel mean, unsharp-mask edges.  Constant images pass
    through as constants."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected [3,H,W] image, got {img.shape}")
    if gamma <= 0 or contrast <= 0 or sharpen < 0 or blur_sigma < 0:
        raise ValueError("enhance params must be positive (sharpen/blur may be 0)")
    x = np.power(np.clip(img, 0.0, 1.0), 1.0 / gamma)
    mean = x.mean(axis=(1, 2), keepdims=True)
    x = mean + contrast * (x - mean)
    if sharpen > 0 and blur_sigma > 0:
        ksize = 2 * math.ceil(3 * blur_sigma) + 1
        with no_grad():
            blurred = gaussian_blur(Tensor(x[None], check=False), ksize, blur_sigma).data[0]
        x = x + sharpen * (x - blurred)
    return np.clip(x, 0.0, 1.0)


def cmd_enhance(args, settings: dict) -> int:
    if args.out is None:
        raise UsageError("--out FILE is required for enhance")
    try:
        img = load_image_png(args.input)
    except FileNotFoundError as e:
        raise DataError(str(e)) from None
    e = settings["enhance"]
    try:
        out_img = enhance_image(img, e["gamma"], e["contrast"], e["sharpen"],
                                e["blur_sigma"])
    except ValueError as err:
        raise UsageError(str(err)) from None
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_image_png(out_path, out_img)
    Path(str(out_path) + ".run.json").write_text(
        json.dumps({"command": "enhance", "seed": args.seed,
                    "settings": settings, "inputs": {"input": str(args.input)}},
                   sort_keys=True, indent=1) + "\n")
    print(f"enhanced {args.input} -> {out_path}")
    return 0


def cmd_stats(args, settings: dict) -> int:
    try:
        manifest = load_dataset(args.dataset)
        csv_path = None
        out = None
        if args.out:
            out = _prepare_out_dir(args.out, args.force)
            csv_path = out / "anchors.csv"
        s = anchor_stats(manifest, csv_path=csv_path)
    except (FileNotFoundError, ValueError) as e:
        raise DataError(str(e)) from None
    if out is not None:
        write_run_json(out, "stats", args.seed, settings,
                       {"dataset": str(args.dataset)})
    print(f"instances: {s.count}")
    print(f"mean_w_px: {s.mean_w!r}")
    print(f"mean_h_px: {s.mean_h!r}")
    return 0


# -- gradcheck -------------------------------------------------------------


def _gradcheck_cases(scope: str, seed: int):
    """(name, callable -> worst relative error) pairs, double precision."""
    rng = np.random.default_rng(seed)

    def rt(*shape):
        return Tensor(rng.standard_normal(shape))

    def check(op, x):
        return grad_check(lambda t: sum_all(op(t)), x)

    cases = []
    if scope in ("all", "ops"):
        spec = he_conv(stream(seed, STREAM_MODEL_INIT), 3, 4, 3)
        cases += [
            ("conv2d", lambda: check(lambda t: conv2d(t, spec), rt(2, 3, 6, 6))),
            ("bilinear_upsample", lambda: check(
                lambda t: bilinear_upsample(t, 8, 8), rt(1, 2, 4, 4))),
            ("gaussian_blur", lambda: check(
                lambda t: gaussian_blur(t, 5, 1.0), rt(1, 2, 6, 6))),
        ]
    if scope in ("all", "pgfe"):
        prm = pgfe.make_pgfe_params(stream(seed, STREAM_MODEL_INIT), channels=6,
                                    stages=2, blocks=1, split=3)
        cases += [
            ("pge_residual_chain", lambda: check(
                lambda t: pgfe.pge_residual_chain(t, prm.pge), rt(1, 6, 5, 5))),
            ("contrast_enhance", lambda: check(
                lambda t: pgfe.contrast_enhance(t, 0.5),
                Tensor(rng.uniform(0.1, 0.9, (1, 3, 5, 5))))),
            ("edge_enhance", lambda: check(
                lambda t: pgfe.edge_enhance(t, 0.4), rt(1, 3, 6, 6))),
            ("pgfe_forward", lambda: check(
                lambda t: pgfe.pgfe_forward(t, prm), rt(1, 3, 8, 8))),
        ]
    if scope in ("all", "mfia"):
        mp = mfia.make_mfia_params(stream(seed, STREAM_MODEL_INIT), branch=1,
                                   channels=8, ratio=2)
        fixed = [rt(1, 8, 5, 5) for _ in range(3)]
        cases += [
            ("cam", lambda: check(lambda t: mfia.cam(t, *fixed, mp.cam1), rt(1, 8, 5, 5))),
            ("sam", lambda: check(lambda t: mfia.sam(t, *fixed, mp.sam), rt(1, 8, 5, 5))),
            ("mfia_forward", lambda: check(
                lambda t: mfia.mfia_forward(t, *fixed, mp), rt(1, 8, 5, 5))),
        ]
    if scope in ("all", "detector"):
        config = ModelConfig(input_size=64, num_classes=2, stem_channels=4,
                             backbone_widths=(4, 6, 8, 8), hrfm_width=4,
                             head_width=8, pgfe_stages=1, pgfe_blocks=1,
                             attention_ratio=2)
        model = build_model(config, seed=seed, dtype=np.float64)
        img = rng.uniform(0.0, 1.0, (1, 3, 64, 64))
        labels = np.array([[0, 0.5, 0.5, 0.4, 0.4], [1, 0.2, 0.25, 0.2, 0.3]])
        targets = assign_targets(labels, config.grid_size, config.stride, 2)

        def loss():
            raw = model_forward(model, Tensor(img, check=False))
            return detection_loss(raw, [targets])[0]

        def detector_case():
            worst = 0.0
            for name, param in model.named_params():
                if name in ("backbone.conv1.weight", "head.conv3.bias",
                            "hrfm.proj1.weight"):
                    # deep relu composites need the tighter probe step to
                    # keep the finite difference off activation kinks
                    worst = max(worst, grad_check_param(loss, param, eps=1e-6,
                                                        max_coords=2))
            return worst

        cases.append(("detector_loss", detector_case))
    return cases


def cmd_gradcheck(args, settings: dict) -> int:
    failures = 0
    for name, run in _gradcheck_cases(args.scope, args.seed):
        err = run()
        status = "ok" if err <= GRAD_TOL else "FAIL"
        failures += status == "FAIL"
        print(f"{name:20s} {err:.3e}  {status}")
    if failures:
        print(f"{failures} gradient check(s) exceeded {GRAD_TOL:g}", file=sys.stderr)
        return 3
    print(f"all gradient checks within {GRAD_TOL:g}")
    return 0


# -- argument wiring -------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="llts", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="INI settings file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", help="output directory (enhance: output file)")
        p.add_argument("--force", action="store_true",
                       help="allow writing into a non-empty output directory")

    p = sub.add_parser("synth", help="write paired clean/lowlight corpora")
    common(p)
    p.add_argument("--count", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--no-degrade", dest="degrade", action="store_false", default=None)

    p = sub.add_parser("train", help="train a detector on a dataset directory")
    common(p)
    p.add_argument("dataset")
    p.add_argument("--val", help="separate validation dataset directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--input-size", type=int, dest="input_size")
    for name in ("pgfe", "hrfm", "mfia"):
        p.add_argument(f"--enable-{name}", dest=f"enable_{name}",
                       action="store_true", default=None)
        p.add_argument(f"--no-{name}", dest=f"enable_{name}", action="store_false")

    p = sub.add_parser("eval", help="score a checkpoint or prediction files")
    common(p)
    p.add_argument("dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--predictions", help="directory of per-image prediction .txt files")
    p.add_argument("--conf", type=float, dest="conf")
    p.add_argument("--iou", type=float, dest="iou")

    p = sub.add_parser("enhance", help="closed-form low-light enhancement preview")
    common(p)
    p.add_argument("input")

    p = sub.add_parser("stats", help="anchor-size statistics for a dataset")
    common(p)
    p.add_argument("dataset")

    p = sub.add_parser("gradcheck", help="gradient self-check")
    common(p)
    p.add_argument("--scope", choices=("all", "ops", "pgfe", "mfia", "detector"),
                   default="all")
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "enhance": cmd_enhance,
    "stats": cmd_stats,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required (see --help)")
        if args.command == "eval" and bool(args.checkpoint) == bool(args.predictions):
            raise UsageError("eval needs exactly one of --checkpoint or --predictions")
        settings = load_settings(args.config)
        _apply_flags(settings, args)
        return COMMANDS[args.command](args, settings)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except DivergenceError as e:
        print(f"numeric failure: training diverged: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
