"""Command-line entry points: harmonize, build-priors, train, eval, infer.

Exit codes: 0 success, 2 input or configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .atlas import PriorAtlas, build_atlas, contingency_table, train_latent_encoder
from .bundle import ModelBundle
from .config import RunConfig, load_config
from .data import PLANES, STRUCTURES, labels_from_channels, read_pixels, resize_image, write_mask_png
from .errors import EchoOneError, LayoutError, NumericalError
from .evaluate import evaluate, oracle_predictor
from .metrics import inner_boundary
from .harmonize import DatasetManifest, RemapTable, build_manifest, harmonize_to_disk
from .train import Trainer, _usable

log = logging.getLogger("echoone")

# overlay contour colours per unified structure
OVERLAY_COLORS = {1: (255, 80, 80), 2: (80, 200, 255), 3: (255, 220, 60)}


def _manifest_path(cfg: RunConfig, out: Path, split: str, explicit=None) -> Path:
    if explicit:
        return Path(explicit)
    base = Path(cfg.data.manifest_dir) if cfg.data.manifest_dir else out / "manifests"
    return base / f"{split}.tsv"


def _load_split(cfg, out, split, explicit=None, size=None, skipped=None):
    manifest = DatasetManifest.read(_manifest_path(cfg, out, split, explicit), split)
    return manifest.load_images(size, skipped if skipped is not None else [])


# -- harmonize ---------------------------------------------------------------


def plane_count_table(counts: dict) -> str:
    datasets = sorted({d for d, _ in counts})
    planes = [p.value for p in PLANES]
    lines = [f"{'dataset':<12}" + "".join(f"{p:>7}" for p in planes) + f"{'total':>7}"]
    for d in datasets:
        row = [counts.get((d, p), 0) for p in planes]
        lines.append(f"{d:<12}" + "".join(f"{n:>7}" for n in row) + f"{sum(row):>7}")
    totals = [sum(counts.get((d, p), 0) for d in datasets) for p in planes]
    lines.append(f"{'total':<12}" + "".join(f"{n:>7}" for n in totals) + f"{sum(totals):>7}")
    return "\n".join(lines)


def cmd_harmonize(cfg: RunConfig, args) -> int:
    root = args.root or cfg.data.root
    if not root:
        raise LayoutError("no dataset root given (data.root or --root)")
    table = RemapTable.from_file(cfg.data.remap) if cfg.data.remap else None
    manifests = build_manifest(root, table, split_seed=cfg.seed)
    for m in manifests:
        m.meta["run_config_hash"] = cfg.hash
    out = Path(args.out)
    unified, counts = harmonize_to_disk(manifests, out)
    for m in unified:
        m.write(out / "manifests" / f"{m.split}.tsv")
    print(plane_count_table(counts))
    print("splits: " + ", ".join(f"{m.split}={len(m)}" for m in unified))
    return 0


# -- build-priors ------------------------------------------------------------


def cmd_build_priors(cfg: RunConfig, args) -> int:
    out = Path(args.out)
    size = cfg.model_config().input_size
    images = _load_split(cfg, out, "train", args.manifest, size)
    planes = tuple(p for p in PLANES if any(img.plane == p for img in images))
    enc_cfg = dataclasses.replace(cfg.atlas.encoder_config(size), num_planes=len(planes))
    encoder = train_latent_encoder(
        images, cfg.atlas.encoder_epochs, cfg.seed, enc_cfg, planes, cfg.atlas.encoder_batch_size, cfg.atlas.encoder_lr
    )
    atlas = build_atlas(encoder, images, cfg.atlas.K, cfg.seed, n_init=cfg.atlas.n_init, max_iter=cfg.atlas.max_iter)
    atlas.meta["encoder_train_accuracy"] = encoder.train_accuracy
    path = Path(args.atlas) if args.atlas else out / "atlas.zip"
    digest = atlas.save(path, cfg.hash)
    print(f"atlas: K={atlas.K} D={atlas.embed_dim} encoder accuracy={encoder.train_accuracy:.3f}")
    print("cluster sizes: " + " ".join(str(n) for n in atlas.meta["cluster_sizes"]))
    table = contingency_table(atlas, images)
    names = [p.value for p in planes]
    print(f"{'cluster':<8}" + "".join(f"{p:>6}" for p in names))
    for c in range(atlas.K):
        print(f"{c:<8}" + "".join(f"{table[c].get(p, 0):>6}" for p in names))
    print(f"wrote {path} sha256={digest[:16]}")
    return 0


# -- train -------------------------------------------------------------------


def cmd_train(cfg: RunConfig, args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model_cfg = cfg.model_config()
    train_cfg = cfg.train_config()
    atlas = None
    atlas_path = Path(args.atlas) if args.atlas else out / "atlas.zip"
    if atlas_path.exists():
        # with --no-pcmask the U-Net is still built (and left untouched) so the bundle records it
        atlas = PriorAtlas.load(atlas_path)
    elif model_cfg.pcmask_enabled:
        raise LayoutError(f"atlas not found: {atlas_path} (run build-priors or pass --no-pcmask)")
    skipped: list = []
    size = train_cfg.input_size
    train_images = _usable(_load_split(cfg, out, "train", args.manifest, size, skipped), size, skipped)
    val_images = []
    if not args.no_val:
        val_images = _usable(_load_split(cfg, out, "val", args.val_manifest, size, skipped), size, skipped)
    if not train_images:
        raise LayoutError("no usable training images")

    trainer = Trainer(train_cfg, model_cfg, atlas, run_config_hash=cfg.hash)
    if args.resume:
        trainer.load_checkpoint(args.resume)
    log_path = out / "train_log.jsonl"
    if not args.resume and log_path.exists():
        log_path.unlink()
    remaining = max(train_cfg.epochs - trainer.epoch, 0)
    trainer.fit(train_images, val_images, remaining, log_path, out / "checkpoints")
    bundle = trainer.best_bundle()
    bundle.meta.update(skipped=len(skipped), epochs=trainer.epoch)
    digest = bundle.save(out / "model.zip")
    last = trainer.log[-1] if trainer.log else {}
    print(f"trained {trainer.epoch} epochs; last: " + json.dumps(last, sort_keys=True))
    print(f"lffa={model_cfg.lffa_enabled} pcmask={model_cfg.pcmask_enabled} skipped={len(skipped)}")
    print(f"wrote {out / 'model.zip'} sha256={digest[:16]}")
    return 0


# -- eval --------------------------------------------------------------------


def cmd_eval(cfg: RunConfig, args) -> int:
    out = Path(args.out)
    bundle = ModelBundle.load(args.bundle or out / "model.zip")
    atlas = None
    if bundle.config.pcmask_enabled:
        atlas = PriorAtlas.load(args.atlas or out / "atlas.zip")
    images = _load_split(cfg, out, "test", args.manifest)
    meta = {
        "run_config_hash": cfg.hash,
        "bundle_run_config_hash": bundle.run_config_hash,
        "atlas_hash": bundle.atlas_hash,
        "lffa_enabled": bundle.config.lffa_enabled,
        "pcmask_enabled": bundle.config.pcmask_enabled,
    }
    predictor = oracle_predictor if args.oracle else None
    report = evaluate(bundle, atlas, images, predictor, cfg.eval.batch_size, meta)
    stem = args.report or "report"
    report.write(out / f"{stem}.json", out / f"{stem}.csv")
    print(report.plane_table())
    print(f"records={len(report.records)} wrote {out / (stem + '.json')}")
    return 0


# -- infer -------------------------------------------------------------------


def overlay(pixels: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """RGB image with each structure's outline drawn in its colour."""
    gray = np.round(np.clip(pixels, 0, 1) * 255).astype(np.uint8)
    rgb = np.repeat(gray[..., None], 3, axis=2)
    for s in (1, 3, 2):
        rgb[inner_boundary(labels == s)] = OVERLAY_COLORS[s]
    return rgb


def cmd_infer(cfg: RunConfig, args) -> int:
    out = Path(args.out)
    bundle = ModelBundle.load(args.bundle or out / "model.zip")
    atlas = PriorAtlas.load(args.atlas or out / "atlas.zip") if bundle.config.pcmask_enabled else None
    bundle.check_lineage(atlas)
    size = bundle.config.input_size
    paths = [Path(p) for p in args.inputs]
    try:
        pixels = [read_pixels(p) for p in paths]
    except (OSError, ValueError) as exc:
        raise LayoutError(f"unreadable input: {exc}") from exc
    batch = np.stack([resize_image(p, size) for p in pixels]).astype(np.float32)
    probs = bundle.predict(batch, atlas)
    dest = out / "predictions"
    for i, (path, p) in enumerate(zip(paths, probs)):
        labels = labels_from_channels(p > 0.5, STRUCTURES)
        name = f"{i:04d}_{path.stem}"
        write_mask_png(dest / f"{name}_pred.png", labels)
        if args.overlay:
            Image.fromarray(overlay(batch[i], labels), mode="RGB").save(dest / f"{name}_overlay.png", optimize=False)
    print(f"wrote {len(paths)} prediction(s) to {dest}")
    return 0


# -- parser ------------------------------------------------------------------


COMMANDS = {
    "harmonize": cmd_harmonize,
    "build-priors": cmd_build_priors,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", default="runs/default", help="output directory")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, repeatable (e.g. train.epochs=5)")
    common.add_argument("--no-lffa", action="store_true", help="disable local feature fusion in the decoder")
    common.add_argument("--no-pcmask", action="store_true", help="use the no-mask dense embedding instead of PC-Mask")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="echoone", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("harmonize", parents=[common], help="remap labels, fill cavities, split subjects")
    p.add_argument("--root", help="dataset root (overrides data.root)")

    p = sub.add_parser("build-priors", parents=[common], help="train the latent encoder and cluster prototypes")
    p.add_argument("--manifest", help="train manifest (default <out>/manifests/train.tsv)")
    p.add_argument("--atlas", help="output atlas path (default <out>/atlas.zip)")

    p = sub.add_parser("train", parents=[common], help="train the segmentation model")
    p.add_argument("--manifest", help="train manifest (default <out>/manifests/train.tsv)")
    p.add_argument("--val-manifest", help="validation manifest (default <out>/manifests/val.tsv)")
    p.add_argument("--no-val", action="store_true", help="skip validation (keeps the last epoch)")
    p.add_argument("--atlas", help="prior atlas (default <out>/atlas.zip)")
    p.add_argument("--resume", help="checkpoint to resume from")

    p = sub.add_parser("eval", parents=[common], help="score a bundle on a manifest")
    p.add_argument("--bundle", help="model bundle (default <out>/model.zip)")
    p.add_argument("--atlas", help="prior atlas (default <out>/atlas.zip)")
    p.add_argument("--manifest", help="manifest to score (default <out>/manifests/test.tsv)")
    p.add_argument("--report", help="report file stem (default 'report')")
    p.add_argument("--oracle", action="store_true", help=argparse.SUPPRESS)

    p = sub.add_parser("infer", parents=[common], help="predict masks for PNG images")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--bundle", help="model bundle (default <out>/model.zip)")
    p.add_argument("--atlas", help="prior atlas (default <out>/atlas.zip)")
    p.add_argument("--overlay", action="store_true", help="also write contour overlays")
    return parser


def resolve_config(args) -> RunConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.no_lffa:
        overrides.append("model.lffa_enabled=false")
    if args.no_pcmask:
        overrides.append("model.pcmask_enabled=false")
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (EchoOneError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
