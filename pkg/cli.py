#!/usr/bin/env python3
"""Command-line entry point: split, train, transmit and eval.

Exit codes: 0 success, 2 bad usage or input, 3 numeric divergence,
4 checkpoint incompatibility.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import torch

from channel import budget
from containers import checkpoint_metadata, load_checkpoint
from dataset_ingest import ImageSet, derive_seed, load_images, save_image
from errors import (ContainerFormatError, IncompatibleCheckpointError, IngestError, NumericError, ParameterError,
                    ShapeError, StructuralError, TrainingDivergedError)
from eval_harness import BASELINE_ADAPTERS, ReportBuilder, sweep
from rate_accounting import COMPONENTS
from run_config import RunConfig, load_run_config, write_run_config
from seb_pipeline import ModelConfig, SebTransmissionModel, group_by_size, read_payload, write_payload
from set_splitter import (ChannelMeanProjector, ContrastiveResNetProjector, ConvFeatureProjector,
                          EmbeddingFileProjector, Projector, split)
from trainer import train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DIVERGED = 3
EXIT_INCOMPATIBLE = 4
IMAGE_SUFFIXES = (".png", ".ppm")
LOG_FORMAT = "%(asctime)s - [%(levelname)s] %(message)s"


def _configure_logging(run_dir: Path, verbose: bool = False) -> None:
    """Log to ``run_dir/sebcomm.log`` and the console."""
    run_dir.mkdir(parents=True, exist_ok=True)
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format=LOG_FORMAT,
        handlers=[
            logging.FileHandler(run_dir / "sebcomm.log", encoding="utf-8"),
            logging.StreamHandler(),
        ],
        force=True,
    )


def corpus_paths(source: Path) -> List[Path]:
    """Image files of a corpus directory (sorted) or a single image file."""
    source = Path(source)
    if source.is_dir():
        paths = sorted(p for p in source.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not paths:
            raise ParameterError(f"no PNG/PPM images in {source}")
        return paths
    if not source.exists():
        raise IngestError(source, "no such file or directory")
    return [source]


def read_manifest(path: Path) -> Dict[str, int]:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)["subsets"]


def _labelled(images: ImageSet, manifest: Optional[Path]) -> ImageSet:
    """Apply subset labels from the manifest, renumbered 1..J in order of appearance.

    Images the manifest does not list share one extra subset.
    """
    if manifest is None or not Path(manifest).exists():
        return images
    subsets = read_manifest(manifest)
    renumber: Dict[int, int] = {}
    labels = [renumber.setdefault(subsets.get(str(p), 0), len(renumber) + 1) for p in images.paths]
    return images.with_labels(labels)


def _stem(images: ImageSet, index: int) -> str:
    return Path(images.paths[index]).stem if images.paths else f"image{index:04d}"


def build_projector(config: RunConfig) -> Projector:
    name = config.eval.projector
    source = config.eval.projector_source
    if name == "channel_mean":
        return ChannelMeanProjector()
    if name == "conv":
        return ConvFeatureProjector(seed=config.seed)
    if name == "embeddings":
        return EmbeddingFileProjector().load(source, config.paths.checkpoint_dir)
    if name == "resnet":
        return ContrastiveResNetProjector().load_weights(source, config.paths.checkpoint_dir)
    raise ParameterError(f"unknown projector {name!r}; use channel_mean, conv, embeddings or resnet")


def load_model(path: Path) -> SebTransmissionModel:
    """Rebuild a model from the configuration stored in its checkpoint."""
    metadata = checkpoint_metadata(path)
    try:
        model_config = ModelConfig(**metadata.get("model_config", {}))
    except (TypeError, ValueError) as err:
        raise IncompatibleCheckpointError(f"{path}: stored model configuration is unusable ({err})") from err
    model = SebTransmissionModel(model_config)
    load_checkpoint(path, model)
    model.eval()
    return model


def cmd_split(config: RunConfig) -> Dict:
    """Split the corpus and write the subset manifest."""
    paths = corpus_paths(config.paths.corpus)
    images = load_images(paths)
    labelled, result = split(images, build_projector(config), config.eval.j_max, config.seed)
    manifest = {
        "J": result.J,
        "seed": config.seed,
        "inertia_curve": [[j, inertia] for j, inertia in result.inertia_curve],
        "subsets": {str(p): label for p, label in zip(labelled.paths, labelled.subset_labels)},
    }
    target = Path(config.paths.manifest)
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
    logger.info("✅ J=%d subsets, manifest written to %s", result.J, target)
    for j, inertia in result.inertia_curve:
        logger.info("📊 J=%d inertia %.6g", j, inertia)
    return manifest


def cmd_train(config: RunConfig) -> List[Path]:
    """Train one model per λ; returns the checkpoint paths."""
    if not Path(config.paths.manifest).exists():
        if not config.training.auto_split:
            raise ParameterError(f"subset manifest {config.paths.manifest} missing and auto_split is off")
        logger.info("No subset manifest; splitting the corpus first")
        cmd_split(config)
    images = _labelled(load_images(corpus_paths(config.paths.corpus)), config.paths.manifest)
    checkpoints = []
    for lam in config.loss.lambdas:
        logger.info("=" * 70)
        logger.info("🚀 Training λ=%g", lam)
        train(images, config.model, config.loss_config(lam), config.train_config(lam))
        checkpoints.append(config.checkpoint_path(lam))
    return checkpoints


def cmd_transmit(config: RunConfig, checkpoint: Path, image_paths: Sequence[Path], out_dir: Path,
                 snr_db: Optional[float] = None) -> Dict:
    """Encode, serialize, deliver and decode ``image_paths``; write images and a report.

    The link is the ideal capacity-achieving code at the post-equalization
    SNR: the serialized containers arrive intact and their size sets the
    channel symbol count. Quality is scored on what the receiver decoded.
    """
    snr_db = config.channel.snr_db[0] if snr_db is None else snr_db
    spec = config.channel_spec(snr_db)
    model = load_model(checkpoint)
    images = _labelled(load_images(image_paths), config.paths.manifest)
    out_dir = Path(out_dir)
    builder = ReportBuilder(images, msssim=config.eval.msssim)
    serialized = {name: 0 for name in COMPONENTS}
    subsets: Dict[int, int] = {}

    for label, members in sorted(images.subsets().items()):
        for g, group in enumerate(group_by_size([images[i] for i in members])):
            indices = [members[i] for i in group]
            batch = torch.stack([images[i] for i in indices])
            try:
                sent = model.encode(batch, seed=derive_seed(config.seed, label, indices[0]))
            except ShapeError as err:
                raise IncompatibleCheckpointError(f"{checkpoint}: images do not fit the model ({err})") from err
            payload_dir = out_dir / "payload" / f"subset{label:02d}_{g:02d}"
            for name, size in write_payload(payload_dir, sent.payload).items():
                serialized[name] += 8 * size
            received = model.decode(read_payload(payload_dir))
            builder.add(indices, received["reconstruction"], received["reference"], sent.rates, sent.usage)
            for row, index in enumerate(indices):
                subsets[index] = label
                save_image(received["reconstruction"][row], out_dir / f"{_stem(images, index)}_reconstruction.png")
                save_image(received["reference"][row], out_dir / f"{_stem(images, index)}_reference.png")

    report = builder.build(snr_db, gain=spec.gain)
    link = [budget(bits, spec.effective_snr_db) for bits in report.rates.parts().values()]
    total_link = link[0]
    for part in link[1:]:
        total_link = total_link + part
    summary = {
        "snr_db": snr_db,
        "effective_snr_db": spec.effective_snr_db,
        "checkpoint": str(checkpoint),
        "psnr_mean": report.psnr_mean,
        "msssim_mean": report.msssim_mean,
        "reference_psnr_mean": report.reference_psnr_mean,
        "bpp": report.bpp,
        "bits": report.rates.parts(),
        "serialized_bits": serialized,
        "usage_bits": report.usage_bits,
        "cbr": report.cbr,
        "channel_symbols": total_link.symbols,
        "images": [
            {
                "image": str(images.paths[index]) if images.paths else _stem(images, index),
                "subset": subsets[index],
                "psnr": report.psnr[index],
                "msssim": report.msssim[index],
                "reference_psnr": report.reference_psnr[index],
            }
            for index in range(len(images))
        ],
    }
    with open(out_dir / "report.json", "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2)
    logger.info("✅ Transmitted %d images at %.1f dB: PSNR %.2f dB, CBR %.5f",
                len(images), snr_db, report.psnr_mean, report.cbr["cbr_total"])
    return summary


def cmd_eval(config: RunConfig, checkpoints: Sequence[Path], out_dir: Path):
    """Sweep the configured SNRs over one model per λ."""
    models: Dict[float, SebTransmissionModel] = {}
    sources = list(checkpoints) or [config.checkpoint_path(lam) for lam in config.loss.lambdas]
    for path in sources:
        if not Path(path).exists():
            logger.warning("⚠️ Checkpoint %s not found", path)
            continue
        lam = checkpoint_metadata(path).get("loss_config", {}).get("lam")
        if lam is None:
            raise IncompatibleCheckpointError(f"{path}: checkpoint does not record its λ")
        models[float(lam)] = load_model(path)
    if not models:
        raise ParameterError("no checkpoint to evaluate")
    lambdas = sorted(set(models) | set(config.loss.lambdas)) if not checkpoints else sorted(models)
    images = _labelled(load_images(corpus_paths(config.paths.corpus)), config.paths.manifest)
    return sweep(models, images, list(config.channel.snr_db), lambdas, out_dir, seed=config.seed,
                 adapters=BASELINE_ADAPTERS.values(), cbr_value=config.eval.cbr, gain=config.channel.gain,
                 msssim=config.eval.msssim)


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sebcomm", description="Seb-based semantic image transmission")
    parser.add_argument("--config", type=Path, help="INI configuration file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one configuration value")
    parser.add_argument("--seed", type=int, help="root seed")
    parser.add_argument("--out", type=Path, help="output directory (default from [paths] output_dir)")
    parser.add_argument("-v", "--verbose", action="store_true")
    commands = parser.add_subparsers(dest="command", required=True)

    split_cmd = commands.add_parser("split", help="partition the corpus into correlated subsets")
    split_cmd.add_argument("--corpus", type=Path)
    split_cmd.add_argument("--j-max", type=int)

    train_cmd = commands.add_parser("train", help="train one model per λ")
    train_cmd.add_argument("--corpus", type=Path)
    train_cmd.add_argument("--lambda", dest="lambdas", type=float, action="append")

    transmit_cmd = commands.add_parser("transmit", help="send images through a trained model")
    transmit_cmd.add_argument("--checkpoint", type=Path, required=True)
    transmit_cmd.add_argument("--snr", type=float)
    transmit_cmd.add_argument("images", type=Path, nargs="*")

    eval_cmd = commands.add_parser("eval", help="SNR/λ sweep with CSV and plots")
    eval_cmd.add_argument("--checkpoint", type=Path, action="append", default=[])
    eval_cmd.add_argument("--corpus", type=Path)
    eval_cmd.add_argument("--snr", type=float, action="append")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, str]:
    overrides = {}
    for item in args.overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ParameterError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value
    if args.seed is not None:
        overrides["training.seed"] = str(args.seed)
    if args.out is not None:
        overrides["paths.output_dir"] = str(args.out)
    if getattr(args, "corpus", None) is not None:
        overrides["paths.corpus"] = str(args.corpus)
    if getattr(args, "j_max", None) is not None:
        overrides["eval.j_max"] = str(args.j_max)
    if getattr(args, "lambdas", None):
        overrides["loss.lambdas"] = ", ".join(repr(lam) for lam in args.lambdas)
    if args.command == "eval" and args.snr:
        overrides["channel.snr_db"] = ", ".join(repr(snr) for snr in args.snr)
    return overrides


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    try:
        config = load_run_config(args.config, _overrides(args))
    except ParameterError as err:
        print(f"❌ {err}", file=sys.stderr)
        return EXIT_USAGE

    run_dir = Path(config.paths.output_dir) / args.command
    _configure_logging(run_dir, args.verbose)
    write_run_config(config, run_dir)
    logger.info("=" * 70)
    logger.info("🚀 sebcomm %s (seed %d)", args.command, config.seed)
    logger.info("=" * 70)

    try:
        if args.command == "split":
            cmd_split(config)
        elif args.command == "train":
            cmd_train(config)
        elif args.command == "transmit":
            images = args.images or corpus_paths(config.paths.corpus)
            cmd_transmit(config, args.checkpoint, images, run_dir, args.snr)
        else:
            cmd_eval(config, args.checkpoint, run_dir)
    except TrainingDivergedError as err:
        logger.error("❌ %s", err)
        return EXIT_DIVERGED
    except NumericError as err:
        logger.error("❌ Numeric failure: %s", err)
        return EXIT_DIVERGED
    except IncompatibleCheckpointError as err:
        logger.error("❌ %s", err)
        return EXIT_INCOMPATIBLE
    except (IngestError, ParameterError, ShapeError, StructuralError, ContainerFormatError) as err:
        logger.error("❌ %s", err)
        return EXIT_USAGE
    except KeyboardInterrupt:
        logger.warning("⚠️ Interrupted")
        return 130
    logger.info("✅ %s finished; outputs in %s", args.command, run_dir)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
