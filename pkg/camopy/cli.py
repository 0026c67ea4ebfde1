"""
Command line entry point: ``camopy train|eval|infer|synth|report``.

Output directories default to subdirectories of ``$CAMOPY_HOME`` (or
``./camopy_runs``) when ``--out`` is omitted.
"""
import argparse
import logging
import os
import pathlib
import sys
from typing import List, Optional

from camopy.checkpoint import load_checkpoint, model_from_checkpoint
from camopy.config import TrainConfig, load_config
from camopy.custom_exceptions import (
    CheckpointException,
    ConfigException,
    DataException,
    NonFiniteException,
    RasterDecodeException,
)
from camopy.data import load_manifest, load_taxonomy, synth_generate
from camopy.data.simulate_data import SynthConfig
from camopy.encoders import PrecomputedFeatures
from camopy.experiments import (
    EvaluationExperiment,
    ReportExperiment,
    TrainingExperiment,
    infer_image,
)

logger = logging.getLogger("camopy")

HOME_VARIABLE = "CAMOPY_HOME"


def _home() -> pathlib.Path:
    return pathlib.Path(os.environ.get(HOME_VARIABLE, "camopy_runs"))


def _out(args, default: str) -> pathlib.Path:
    return pathlib.Path(args.out) if args.out else _home() / default


def _taxonomy(args):
    return load_taxonomy(args.taxonomy) if args.taxonomy else load_taxonomy()


def _features(args, config):
    if getattr(args, "features", None):
        return PrecomputedFeatures(args.features, config.backbone)
    return None


def _checkpoint_features(args):
    """Feature lookup matched to the backbone stored in ``args.ckpt``"""
    if not getattr(args, "features", None):
        return None
    stored = TrainConfig.from_dict(load_checkpoint(args.ckpt)["config"])
    return _features(args, stored)


def cmd_train(args) -> None:
    config = load_config(args.config)
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    if args.max_steps is not None:
        config = config.replace(max_steps=args.max_steps)
    if args.quiet:
        config = config.replace(progressbar=False)
    manifest = load_manifest(args.data, _taxonomy(args), split=args.split)
    result = TrainingExperiment(
        manifest, config, _out(args, "train"), feature_source=_features(args, config)
    )
    result.summary()


def cmd_eval(args) -> None:
    expected = load_config(args.config) if args.config else None
    model = model_from_checkpoint(
        args.ckpt, expected=expected, feature_source=_checkpoint_features(args)
    )
    taxonomy = _taxonomy(args)
    manifest = load_manifest(args.data, taxonomy, split=args.split, check_paths=False)
    result = EvaluationExperiment(
        manifest,
        model,
        out_dir=_out(args, "eval"),
        batch_size=args.batch_size,
        max_workers=args.workers,
        taxonomy=taxonomy,
        progressbar=not args.quiet,
    )
    result.summary()


def cmd_infer(args) -> None:
    expected = load_config(args.config) if args.config else None
    model = model_from_checkpoint(
        args.ckpt, expected=expected, feature_source=_checkpoint_features(args)
    )
    result = infer_image(model, args.image, _out(args, "infer"), _taxonomy(args))
    print(f"Mask written to {result.mask_path}")
    if result.attributes is not None:
        for category, share in result.attributes["categories"].items():
            print(f"{category: <5}{share:.3f}")


def cmd_synth(args) -> None:
    config = SynthConfig(canvas=args.canvas) if args.canvas else SynthConfig()
    manifest = synth_generate(
        args.n,
        args.seed,
        _out(args, "synth"),
        config=config,
        taxonomy=_taxonomy(args),
        split=args.split,
        progressbar=not args.quiet,
    )
    print(f"Wrote {len(manifest)} samples to {manifest.root}")


def cmd_report(args) -> None:
    taxonomy = _taxonomy(args)
    manifests = {}
    for path in args.manifest or []:
        path = pathlib.Path(path)
        label = path.parent.name or path.stem
        if label in manifests:
            label = f"{label}_{len(manifests)}"
        manifests[label] = load_manifest(path, taxonomy, check_paths=False)
    result = ReportExperiment(
        manifests,
        scores_dir=args.scores,
        out_dir=_out(args, "report"),
        taxonomy=taxonomy,
        max_images=args.max_images,
    )
    result.summary()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="camopy", description="Attribute and fixation guided camouflaged object segmentation"
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="hide progress bars")
    parser.add_argument("--taxonomy", help="attribute taxonomy file (default: bundled)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a manifest")
    p.add_argument("--config", default="default", help="preset name or YAML file")
    p.add_argument("--data", required=True, help="manifest.jsonl")
    p.add_argument("--out", help="run directory")
    p.add_argument("--split", default="train", help="split of records that carry none")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--features", help="directory of precomputed .feat files")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="manifest.jsonl")
    p.add_argument("--out", help="evaluation directory")
    p.add_argument("--config", help="config the checkpoint backbone must match")
    p.add_argument("--split", default="test")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--workers", type=int, default=None, help="metric threads")
    p.add_argument("--features", help="directory of precomputed .feat files")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="segment one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", help="output directory")
    p.add_argument("--config", help="config the checkpoint backbone must match")
    p.add_argument("--features", help="directory of precomputed .feat files")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("synth", help="generate a synthetic data set")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output directory")
    p.add_argument("--canvas", type=int, default=None, help="image side in pixels")
    p.add_argument("--split", default="train")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("report", help="statistics and figures")
    p.add_argument("--scores", help="evaluation output directory")
    p.add_argument(
        "--manifest", action="append", help="manifest to describe; may be repeated"
    )
    p.add_argument("--out", help="report directory")
    p.add_argument("--max-images", type=int, default=8)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s: %(message)s",
    )
    try:
        args.func(args)
    except (
        CheckpointException,
        ConfigException,
        DataException,
        NonFiniteException,
        RasterDecodeException,
    ) as err:
        logger.error(getattr(err, "message", str(err)))
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
