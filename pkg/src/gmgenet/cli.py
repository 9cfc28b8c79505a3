"""Command-line entry point: ``gmgenet <subcommand> [options]``.

Every run-configuration key is also a flag (``--grid 32x32x32``). Exit codes:
0 success, 1 validation error, 2 I/O error, 3 numerical failure. Failures
print one line to stderr: ``error code=<n> kind=<kind> reason=<text>``.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import KEYS, ConfigValidationError, RunConfig, phantom_run_config
from .ctprep import LandmarkError, ResampleError
from .dataio import ManifestError, VolumeFormatError, export_heatmap_slices, read_volume, write_array
from .densenet3d import CheckpointError, ConfigError, load_checkpoint
from .gradcam import NoBodyError, gradcam, refine_mask
from .nn.tensor import DimensionError
from .phantom import PhantomSpec, PhantomSpecError, generate
from .pipeline import run as pipeline
from .pipeline.metrics import UndefinedMetricError
from .pipeline.optim import NonFiniteGradientError
from .pipeline.split import SplitSizeError
from .pipeline.train import TrainingDivergedError

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

VALIDATION_ERRORS = (
    ConfigValidationError, ConfigError, ManifestError, DimensionError, SplitSizeError,
    PhantomSpecError, LandmarkError, ResampleError, UndefinedMetricError, NoBodyError,
)
IO_ERRORS = (OSError, VolumeFormatError, CheckpointError, pipeline.RunError)
NUMERIC_ERRORS = (TrainingDivergedError, NonFiniteGradientError, FloatingPointError)

RUN_STAGES = ("preprocess", "train-extractor", "extract-voi", "train-classifier", "evaluate", "run-all")

log = logging.getLogger("gmgenet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key=value run configuration file")
    for key in KEYS:
        p.add_argument(f"--{key.name.replace('_', '-')}", dest=key.name, default=None, metavar=key.kind.__name__.upper(), help=key.doc)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gmgenet", description="Grad-CAM guided VOI extraction and 3-D DenseNet classification.")
    parser.add_argument("--version", action="version", version=f"gmgenet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a phantom dataset and a matching run config")
    p.add_argument("--out", type=Path, help="dataset directory (required)")
    p.add_argument("--per-class", type=int, default=None, help="phantoms per class (default 100)")
    p.add_argument("--seed", type=int, default=0, help="phantom seed")

    helps = {
        "preprocess": "window, resample, slab-select and resize every manifest volume",
        "train-extractor": "split the data and train the VOI extractor",
        "extract-voi": "compute Grad-CAM heatmaps and crop VOIs",
        "train-classifier": "cross-validate classifiers on VOIs and on full volumes",
        "evaluate": "score fold classifiers on the test set and write the report",
        "run-all": "run every stage end to end",
    }
    for name in RUN_STAGES:
        _add_config_flags(sub.add_parser(name, help=helps[name]))

    p = sub.add_parser("gradcam", help="heatmap of one preprocessed volume from a checkpoint")
    p.add_argument("--checkpoint", type=Path, help="model checkpoint (required)")
    p.add_argument("--volume", type=Path, help="preprocessed GMGV volume matching the model input (required)")
    p.add_argument("--out", type=Path, help="output directory (required)")
    p.add_argument("--stride", type=int, default=10, help="slice stride of the PGM export")
    p.add_argument("--intensity-floor", type=float, default=0.05)
    return parser


def _resolve(args) -> RunConfig:
    overrides = {k.name: getattr(args, k.name) for k in KEYS}
    return RunConfig.resolve(args.config, overrides=overrides)


def _setup_logging(run_dir: Path | None) -> list[logging.Handler]:
    root = logging.getLogger()
    root.setLevel(logging.INFO)
    handlers: list[logging.Handler] = []
    out = logging.StreamHandler(sys.stdout)
    out.setFormatter(logging.Formatter("%(message)s"))
    handlers.append(out)
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        fh = logging.FileHandler(run_dir / "run.log", mode="a")
        fh.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s %(message)s"))
        handlers.append(fh)
    for h in handlers:
        root.addHandler(h)
    return handlers


def _cmd_synth(args) -> int:
    n = args.per_class if args.per_class is not None else RunConfig().phantom_per_class
    if n < 1:
        raise ConfigValidationError(f"--per-class must be positive, got {n}")
    spec = PhantomSpec(seed=args.seed)
    samples = generate(spec, n, args.out)
    cfg = phantom_run_config("manifest.csv").with_values(seed=args.seed, phantom_per_class=n)
    (args.out / "phantom.cfg").write_text(cfg.to_text())
    log.info("stage=synth samples=%d out=%s config=%s", len(samples), args.out, args.out / "phantom.cfg")
    return EXIT_OK


def _cmd_gradcam(args) -> int:
    model = load_checkpoint(args.checkpoint)
    vol = read_volume(args.volume)
    expected = model.config.input_shape[1:]
    if vol.voxels.shape != tuple(expected):
        raise DimensionError(f"volume {vol.voxels.shape} does not match model input {tuple(expected)} (D, H, W)")
    res = gradcam(model, vol.voxels)
    hm = refine_mask(res.heatmap, vol.voxels, args.intensity_floor)
    args.out.mkdir(parents=True, exist_ok=True)
    write_array(hm.values.astype(np.float32), args.out / "heatmap.gmgv", vol.spacing)
    files = export_heatmap_slices(hm, vol.voxels, args.out / "slices", stride=args.stride)
    log.info("stage=gradcam probability=%.6f peak=%s slices=%d", res.probability, ",".join(map(str, hm.peak())), len(files) // 3)
    return EXIT_OK


def _cmd_stage(args) -> int:
    cfg = _resolve(args)
    run_dir = Path(cfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(cfg.to_text())
    cmd = args.command
    if cmd == "run-all":
        report = pipeline.two_stage_run(cfg, run_dir)
    elif cmd == "preprocess":
        pipeline.stage_preprocess(cfg, run_dir)
    elif cmd == "train-extractor":
        pipeline.stage_train_extractor(cfg, run_dir)
    elif cmd == "extract-voi":
        pipeline.stage_extract_voi(cfg, run_dir)
    elif cmd == "train-classifier":
        pipeline.stage_train_classifier(cfg, run_dir)
    elif cmd == "evaluate":
        report = pipeline.stage_evaluate(cfg, run_dir)
    if cmd in ("run-all", "evaluate"):
        sys.stdout.write(pipeline.format_report(report, cfg))
    return EXIT_OK


def _fail(code: int, kind: str, reason: str) -> int:
    reason = " ".join(str(reason).split())
    sys.stderr.write(f"error code={code} kind={kind} reason={reason}\n")
    return code


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if extra:
            return _fail(EXIT_VALIDATION, "usage", f"unrecognized argument {extra[0]}")
        required = {"synth": ("out",), "gradcam": ("checkpoint", "volume", "out")}.get(args.command, ())
        missing = [f"--{r}" for r in required if getattr(args, r) is None]
        if missing:
            return _fail(EXIT_VALIDATION, "usage", f"missing required argument {' '.join(missing)}")
    except UsageError as exc:
        return _fail(EXIT_VALIDATION, "usage", exc)

    handlers: list[logging.Handler] = []
    try:
        run_dir = None
        if args.command in RUN_STAGES:
            run_dir = Path(_resolve(args).run_dir)
        elif args.command == "gradcam":
            run_dir = args.out
        handlers = _setup_logging(run_dir)
        if args.command == "synth":
            return _cmd_synth(args)
        if args.command == "gradcam":
            return _cmd_gradcam(args)
        return _cmd_stage(args)
    except NUMERIC_ERRORS as exc:
        return _fail(EXIT_NUMERIC, "numerical", exc)
    except IO_ERRORS as exc:
        return _fail(EXIT_IO, "io", exc)
    except VALIDATION_ERRORS as exc:
        return _fail(EXIT_VALIDATION, "validation", exc)
    finally:
        root = logging.getLogger()
        for h in handlers:
            root.removeHandler(h)
            h.close()


if __name__ == "__main__":
    raise SystemExit(main())
