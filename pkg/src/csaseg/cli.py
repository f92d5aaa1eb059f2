"""Command-line interface.

Exit statuses: 0 success, 1 selftest failure, 2 bad flags or configuration,
3 I/O or file-format errors, 4 shape/model/data errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import attention as A
from . import model_io
from .errors import ConfigError, CsaError, FormatError
from .evaluation import IGNORE_INDEX, ConfusionMatrix, miou
from .slide import SlideConfig, preprocess, slide_segment
from .vit import forward_features

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO, EXIT_MODEL = 0, 1, 2, 3, 4

NORMALIZATION_HELP = (
    "Images are binary P6 PPM (maxval 255). Pixels are scaled to [0, 1] and "
    f"normalised per RGB channel with mean {model_io.IMAGE_MEAN} and std {model_io.IMAGE_STD}."
)


def _mode(text: str) -> A.AttentionMode:
    try:
        return A.parse_mode(text)
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _point(text: str) -> tuple[int, int]:
    try:
        r, c = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected ROW,COL, got {text!r}") from None
    return r, c


def thread_count() -> int:
    raw = os.environ.get("CSA_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"CSA_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ConfigError(f"CSA_THREADS must be >= 0, got {n}")
    return n or (os.cpu_count() or 1)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--model", required=True, type=Path, help="weight container (.scwt)")
    common.add_argument(
        "--mode",
        type=_mode,
        default=A.CsaDual(),
        help="decoding-layer attention: vanilla | csa | csa-q | csa-k | csa-id | identity | "
        "local:<size> | sharpen:<tau> | ensemble:<n>:<seed> | early:<layer> (default: csa)",
    )
    common.add_argument("--short-side", type=int, default=336, help="resize shorter side to this (default 336)")
    common.add_argument("--json", action="store_true", help="machine-readable JSON-lines output")

    slide = argparse.ArgumentParser(add_help=False)
    slide.add_argument("--window", type=int, default=224, help="slide window in pixels (default 224)")
    slide.add_argument("--stride", type=int, default=112, help="slide stride in pixels (default 112)")
    slide.add_argument("--classes", type=Path, help="container with class_embeds/class_names (default: --model)")

    parser = argparse.ArgumentParser(prog="csaseg", description="Zero-shot dense segmentation with a swappable decoding-layer attention.", epilog=NORMALIZATION_HELP)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment", parents=[common, slide], help="segment one image", epilog=NORMALIZATION_HELP)
    p.add_argument("--image", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path, help="output mask (P5 PGM of class indices)")

    p = sub.add_parser("eval", parents=[common, slide], help="mIoU over a directory of images", epilog=NORMALIZATION_HELP)
    p.add_argument("--images", required=True, type=Path, help="directory of <name>.ppm images")
    p.add_argument("--gt", required=True, type=Path, help="directory of <name>.pgm ground-truth masks")
    p.add_argument("--ignore-index", type=int, default=IGNORE_INDEX)

    p = sub.add_parser("attn-dump", parents=[common], help="dump attention heatmaps for one source patch")
    p.add_argument("--image", required=True, type=Path)
    p.add_argument("--layer", type=int, help="1-based layer (default: the decoding layer)")
    p.add_argument("--point", required=True, type=_point, help="source patch as ROW,COL on the patch grid")
    p.add_argument("--out-dir", required=True, type=Path)

    p = sub.add_parser("selftest", help="run the invariant suite on a generated tiny model")
    p.add_argument("--json", action="store_true")
    return parser


def _emit(args, record: dict, text: str) -> None:
    print(json.dumps(record, sort_keys=True) if args.json else text)


def _load(args):
    model = model_io.load_model(args.model)
    classes = model_io.load_classes(args.classes or args.model)
    cfg = SlideConfig(args.short_side, args.window, args.stride)
    cfg.validate(model.config.patch_size)
    return model, classes, cfg


def cmd_segment(args) -> int:
    model, classes, cfg = _load(args)
    image = model_io.read_image_ppm(args.image)
    mask = slide_segment(model, image, classes, args.mode, cfg)
    model_io.write_mask_pgm(args.out, mask)
    counts = np.bincount(mask.ravel(), minlength=len(classes))
    record = {
        "image": str(args.image),
        "mask": str(args.out),
        "mode": A.format_mode(args.mode),
        "shape": list(mask.shape),
        "pixels": {name: int(n) for name, n in zip(classes.names, counts) if n},
    }
    summary = ", ".join(f"{k}={v}" for k, v in record["pixels"].items())
    _emit(args, record, f"{args.out}: {mask.shape[0]}x{mask.shape[1]} [{A.format_mode(args.mode)}] {summary}")
    return EXIT_OK


def _eval_pairs(images: Path, gt: Path) -> list[tuple[Path, Path]]:
    if not images.is_dir():
        raise FileNotFoundError(f"image directory not found: {images}")
    pairs = []
    for img in sorted(images.glob("*.ppm")):
        label = gt / (img.stem + ".pgm")
        if not label.is_file():
            raise FileNotFoundError(f"no ground truth for {img.name}: expected {label}")
        pairs.append((img, label))
    if not pairs:
        raise FileNotFoundError(f"no .ppm images in {images}")
    return pairs


def cmd_eval(args) -> int:
    model, classes, cfg = _load(args)
    pairs = _eval_pairs(args.images, args.gt)

    def one(pair):
        img, label = pair
        mask = slide_segment(model, model_io.read_image_ppm(img), classes, args.mode, cfg)
        return ConfusionMatrix(len(classes), args.ignore_index).update(mask, model_io.read_pgm(label))

    with ThreadPoolExecutor(max_workers=thread_count()) as pool:
        matrices = list(pool.map(one, pairs))  # map preserves sorted-filename order

    total = ConfusionMatrix(len(classes), args.ignore_index)
    for cm in matrices:
        total = total + cm
    result = miou(total)

    if args.json:
        for name, iou in zip(classes.names, result.per_class):
            print(json.dumps({"class": name, "iou": iou}, sort_keys=True))
        print(json.dumps({"mode": A.format_mode(args.mode), "images": len(pairs), "miou": result.mean}, sort_keys=True))
    else:
        width = max(len(n) for n in classes.names)
        for name, iou in zip(classes.names, result.per_class):
            print(f"{name:<{width}}  {'-' if iou is None else f'{100 * iou:6.2f}'}")
        print(f"{'mIoU':<{width}}  {100 * result.mean:6.2f}  ({len(pairs)} images, mode {A.format_mode(args.mode)})")
    return EXIT_OK


def attention_heatmaps(scores: np.ndarray, grid: tuple[int, int], point: tuple[int, int]) -> dict[str, np.ndarray]:
    """Per-head and head-mean attention of one source patch over the patch grid.

    Each map is the source row restricted to patch columns and renormalised
    to sum to 1.
    """
    rows, cols = grid
    r, c = point
    if not (0 <= r < rows and 0 <= c < cols):
        raise ConfigError(f"point {r},{c} outside the {rows}x{cols} patch grid")
    src = 1 + r * cols + c
    maps = {}
    for h in range(scores.shape[0]):
        row = scores[h, src, 1:].astype(np.float64)
        s = row.sum()
        maps[f"head{h}"] = (row / s if s > 0 else row).reshape(rows, cols).astype(np.float32)
    mean = np.mean([maps[f"head{h}"] for h in range(scores.shape[0])], axis=0, dtype=np.float64)
    maps["mean"] = (mean / mean.sum() if mean.sum() > 0 else mean).astype(np.float32)
    return maps


def cmd_attn_dump(args) -> int:
    model = model_io.load_model(args.model)
    layer = model.depth if args.layer is None else args.layer
    if not 1 <= layer <= model.depth:
        raise ConfigError(f"--layer {layer} outside 1..{model.depth}")
    image, _ = preprocess(model_io.read_image_ppm(args.image), args.short_side, model.config.patch_size)
    dense = forward_features(model, image, args.mode)
    maps = attention_heatmaps(dense.attention[layer - 1], dense.grid, args.point)

    args.out_dir.mkdir(parents=True, exist_ok=True)
    for name, heat in maps.items():
        model_io.write_heatmap_pgm(args.out_dir / f"{name}.pgm", heat)
    model_io.write_container(args.out_dir / "attn.scwt", maps)
    record = {
        "layer": layer,
        "point": list(args.point),
        "grid": list(dense.grid),
        "mode": A.format_mode(args.mode),
        "maps": sorted(maps),
        "row_sums": {k: float(v.sum(dtype=np.float64)) for k, v in maps.items()},
    }
    _emit(args, record, f"wrote {len(maps)} heatmaps for layer {layer}, patch {args.point} to {args.out_dir}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_all

    results = run_all()
    for name, ok, detail in results:
        if args.json:
            print(json.dumps({"check": name, "pass": ok, "detail": detail}, sort_keys=True))
        else:
            print(f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else ""))
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_FAIL


COMMANDS = {"segment": cmd_segment, "eval": cmd_eval, "attn-dump": cmd_attn_dump, "selftest": cmd_selftest}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"csaseg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError) as exc:
        print(f"csaseg: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except CsaError as exc:
        print(f"csaseg: {exc}", file=sys.stderr)
        return EXIT_MODEL


if __name__ == "__main__":
    sys.exit(main())
