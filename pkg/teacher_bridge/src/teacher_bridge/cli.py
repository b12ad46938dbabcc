"""Command-line surface for the teacher-side tools.

Exit codes match the radar pipeline: 0 success, 2 usage, 3 data error,
4 runtime error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .encoders import get_encoder, image_to_tensor
from .errors import BridgeError, NoFramesToMatchError, UsageError
from .saliency import SaliencyConfig, apply_mask, mask_image, saliency_map
from .sync import synchronize
from . import wire

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}


def _collect_images(spec: str) -> list:
    path = Path(spec)
    if path.is_dir():
        files = sorted(p for p in path.iterdir()
                       if p.suffix.lower() in IMAGE_SUFFIXES)
    else:
        files = [Path(p) for p in spec.split(",")]
    if not files:
        raise FileNotFoundError(f"no images found under {spec}")
    return files


def _saliency_config(args) -> SaliencyConfig:
    return SaliencyConfig(prompt=args.prompt,
                          lambda_thresh=args.lambda_thresh,
                          blur_kernel=args.kernel,
                          signed=getattr(args, "signed", False))


def _load_image(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def cmd_embed_images(args) -> int:
    encoder = get_encoder(args.model, seed=args.seed)
    config = _saliency_config(args)
    entries, errors = [], []
    for path in _collect_images(args.images):
        try:
            image = _load_image(path)
            if args.mask:
                image, _ = mask_image(image, encoder, config)
            with torch.no_grad():
                emb = encoder.embed_image_tensor(
                    image_to_tensor(image, dtype=encoder.dtype))[0]
            entries.append((path, emb.cpu().numpy()))
        except (OSError, ValueError) as e:
            errors.append({"path": str(path), "error": str(e)})
            print(f"warning: skipping {path}: {e}", file=sys.stderr)
    wire.write_image_embeddings(entries, args.out)
    if errors:
        wire.atomic_write_text(str(args.out) + ".errors.json",
                               json.dumps(errors, indent=2) + "\n")
    print(f"embedded {len(entries)} images ({len(errors)} failed) -> {args.out}")
    return 0


def cmd_embed_prompts(args) -> int:
    if args.classes:
        names = [c.strip() for c in args.classes.split(",") if c.strip()]
    elif args.classes_file:
        names = [line.strip() for line in
                 Path(args.classes_file).read_text().splitlines()
                 if line.strip()]
    else:
        raise UsageError("need --classes or --classes-file")
    if len(set(names)) != len(names):
        raise UsageError("class names must be unique")
    encoder = get_encoder(args.model, seed=args.seed)
    prompts = [args.template.replace("{CLS}", name) for name in names]
    with torch.no_grad():
        embs = encoder.embed_texts(prompts).cpu().numpy()
    wire.write_anchors(zip(names, prompts, embs), args.out)
    print(f"wrote {len(names)} anchors -> {args.out}")
    return 0


def cmd_saliency_mask(args) -> int:
    encoder = get_encoder(args.model, seed=args.seed)
    config = _saliency_config(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for path in _collect_images(args.images):
        image = _load_image(path)
        _, m_norm = saliency_map(image, encoder, config)
        masked = apply_mask(image, m_norm, config)
        Image.fromarray(masked).save(out_dir / path.name)
        if args.save_maps:
            np.save(out_dir / (path.stem + ".map.npy"), m_norm)
    print(f"masked images -> {out_dir} (lambda={config.lambda_thresh}, "
          f"kernel={config.blur_kernel})")
    return 0


def cmd_sync_export(args) -> int:
    radar = wire.load_radar_frames(args.radar)
    cam_stamps, cam_paths = wire.load_camera_csv(args.camera_csv)
    embeddings = wire.load_image_embeddings(args.embeddings)
    indices = synchronize([r["timestamp_ms"] for r in radar], cam_stamps)
    n_written, errors = wire.export_paired(radar, cam_paths, indices,
                                           embeddings, args.out)
    if errors:
        wire.atomic_write_text(str(args.out) + ".errors.json",
                               json.dumps(errors, indent=2) + "\n")
        print(f"warning: {len(errors)} records lacked embeddings",
              file=sys.stderr)
    print(f"exported {n_written} paired records -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="teacher-bridge",
        description="Teacher-side embedding, saliency masking, and "
                    "camera/radar synchronization tools.")
    sub = parser.add_subparsers(dest="command", required=True)

    def model_flags(p):
        p.add_argument("--model", choices=("tiny", "clip"), default="clip",
                       help="vision-language backend (tiny = offline stand-in)")
        p.add_argument("--seed", type=int, default=0,
                       help="seed for the tiny backend's weights")

    def saliency_flags(p):
        p.add_argument("--prompt", default="a photo of a human")
        p.add_argument("--lambda", dest="lambda_thresh", type=float, default=0.6)
        p.add_argument("--kernel", type=int, default=30)
        p.add_argument("--signed", action="store_true",
                       help="sum signed gradients instead of magnitudes")

    p = sub.add_parser("embed-images", help="embed an image directory")
    p.add_argument("--images", required=True,
                   help="directory or comma-separated files")
    p.add_argument("--out", required=True)
    model_flags(p)
    p.add_argument("--mask", dest="mask", action="store_true", default=False,
                   help="apply saliency masking before embedding")
    p.add_argument("--no-mask", dest="mask", action="store_false")
    saliency_flags(p)
    p.set_defaults(func=cmd_embed_images)

    p = sub.add_parser("embed-prompts", help="embed class prompts as anchors")
    p.add_argument("--classes", default=None, help="comma-separated names")
    p.add_argument("--classes-file", default=None, help="one name per line")
    p.add_argument("--template", default="A person {CLS}")
    p.add_argument("--out", required=True)
    model_flags(p)
    p.set_defaults(func=cmd_embed_prompts)

    p = sub.add_parser("saliency-mask", help="write masked copies of images")
    p.add_argument("--images", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--save-maps", action="store_true")
    model_flags(p)
    saliency_flags(p)
    p.set_defaults(func=cmd_saliency_mask)

    p = sub.add_parser("sync-export",
                       help="match radar frames to camera embeddings and "
                            "write paired records")
    p.add_argument("--radar", required=True, help="radar frames JSONL")
    p.add_argument("--camera-csv", required=True,
                   help="CSV with header timestamp_ms,path")
    p.add_argument("--embeddings", required=True,
                   help="image embeddings JSONL from embed-images")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sync_export)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except (FileNotFoundError, NoFramesToMatchError, ValueError, KeyError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except (BridgeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
