"""Weight container and NetPBM image/mask I/O.

Container layout (all integers little-endian)::

    b"SCWT"            magic
    u32                format version (1)
    u32                entry count
    entry * count:
        u16 + bytes    UTF-8 name
        u8             dtype code (0 = float32, 1 = raw bytes)
        u8             ndim
        u32 * ndim     extents (each >= 1)
        payload        4 * prod(dims) bytes for float32, dims[0] bytes for raw
    u32                CRC-32 of every preceding byte

Model entries (``i`` is the 0-based block index)::

    config                          bytes, canonical JSON of VitConfig
    patch_proj.weight / .bias       [d, 3*p*p] / [d]
    cls_token                       [d]
    pos_embed                       [1 + gh*gw, d]
    ln_pre.weight / .bias           [d]  (optional)
    blocks.{i}.norm1.weight / .bias [d]
    blocks.{i}.attn.w_q ... w_o     [d, d]  applied as x @ W
    blocks.{i}.attn.b_q ... b_o     [d]
    blocks.{i}.norm2.weight / .bias [d]
    blocks.{i}.mlp.in.weight / .bias   [hidden, d] / [hidden]
    blocks.{i}.mlp.out.weight / .bias  [d, hidden] / [d]
    final_norm.weight / .bias       [d]
    visual_proj                     [d, d']
    class_embeds                    [C, d']
    class_names                     bytes, newline-joined UTF-8
"""

from __future__ import annotations

import json
import math
import re
import struct
import zlib
from pathlib import Path

import numpy as np

from .attention import AttentionWeights
from .classifier import ClassEmbeddingSet
from .errors import DataError, FormatError, ModelError
from .tensor import DTYPE
from .vit import BlockWeights, LayerNormParams, VitConfig, VitModel

MAGIC = b"SCWT"
VERSION = 1
DTYPE_F32 = 0
DTYPE_BYTES = 1

# CLIP image statistics, per RGB channel
IMAGE_MEAN = (0.48145466, 0.4578275, 0.40821073)
IMAGE_STD = (0.26862954, 0.26130258, 0.27577711)


# ---------------------------------------------------------------------------
# Container
# ---------------------------------------------------------------------------


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        end = self.pos + n
        if end > len(self.data):
            raise FormatError(f"truncated container: {what} needs {n} bytes at offset {self.pos}")
        chunk = self.data[self.pos : end]
        self.pos = end
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def encode_container(entries: dict[str, np.ndarray | bytes]) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<II", VERSION, len(entries))
    for name, value in entries.items():
        raw_name = name.encode("utf-8")
        if not raw_name or len(raw_name) > 0xFFFF:
            raise FormatError(f"entry name {name!r} has invalid length")
        out += struct.pack("<H", len(raw_name)) + raw_name
        if isinstance(value, (bytes, bytearray)):
            if not value:
                raise FormatError(f"{name}: empty byte payload")
            out += struct.pack("<BBI", DTYPE_BYTES, 1, len(value)) + bytes(value)
        else:
            arr = np.asarray(value, dtype="<f4")
            if arr.ndim == 0 or arr.ndim > 255 or 0 in arr.shape:
                raise FormatError(f"{name}: cannot store shape {arr.shape}")
            out += struct.pack(f"<BB{arr.ndim}I", DTYPE_F32, arr.ndim, *arr.shape)
            out += np.ascontiguousarray(arr).tobytes()
    out += struct.pack("<I", zlib.crc32(out))
    return bytes(out)


def decode_container(data: bytes) -> dict[str, np.ndarray | bytes]:
    cur = _Cursor(data)
    if cur.take(4, "magic") != MAGIC:
        raise FormatError("bad magic: not a weight container")
    version, count = cur.unpack("<II", "header")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    entries: dict[str, np.ndarray | bytes] = {}
    for idx in range(count):
        (name_len,) = cur.unpack("<H", f"entry {idx} name length")
        try:
            name = cur.take(name_len, f"entry {idx} name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"entry {idx} name is not valid UTF-8") from None
        if not name:
            raise FormatError(f"entry {idx} has an empty name")
        if name in entries:
            raise FormatError(f"duplicate entry {name!r}")
        code, ndim = cur.unpack("<BB", f"{name} dtype")
        dims = cur.unpack(f"<{ndim}I", f"{name} dims") if ndim else ()
        if ndim == 0 or 0 in dims:
            raise FormatError(f"{name}: invalid extents {dims}")
        if code == DTYPE_F32:
            size = 4 * math.prod(dims)
            payload = cur.take(size, f"{name} payload")
            entries[name] = np.frombuffer(payload, dtype="<f4").astype(DTYPE).reshape(dims)
        elif code == DTYPE_BYTES:
            if ndim != 1:
                raise FormatError(f"{name}: byte payloads must be 1-D")
            entries[name] = cur.take(dims[0], f"{name} payload")
        else:
            raise FormatError(f"{name}: unknown dtype code {code}")
    body_end = cur.pos
    (crc,) = cur.unpack("<I", "checksum")
    if cur.pos != len(data):
        raise FormatError(f"{len(data) - cur.pos} trailing bytes after checksum")
    if zlib.crc32(data[:body_end]) != crc:
        raise FormatError("checksum mismatch: container is corrupted")
    return entries


def write_container(path, entries: dict[str, np.ndarray | bytes]) -> None:
    Path(path).write_bytes(encode_container(entries))


def read_container(path) -> dict[str, np.ndarray | bytes]:
    return decode_container(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Model <-> entries
# ---------------------------------------------------------------------------


def _config_json(cfg: VitConfig) -> bytes:
    doc = {
        "activation": cfg.activation,
        "depth": cfg.depth,
        "dim": cfg.dim,
        "embed_out_dim": cfg.embed_out_dim,
        "head_count": cfg.head_count,
        "mlp_ratio": cfg.mlp_ratio,
        "patch_size": cfg.patch_size,
        "pretrain_grid": list(cfg.pretrain_grid),
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _parse_config(raw) -> VitConfig:
    if not isinstance(raw, bytes):
        raise ModelError("config: expected a byte entry")
    try:
        doc = json.loads(raw.decode("utf-8"))
        return VitConfig(**{**doc, "pretrain_grid": tuple(doc["pretrain_grid"])})
    except (UnicodeDecodeError, json.JSONDecodeError, TypeError, KeyError, ValueError) as exc:
        raise ModelError(f"config: {exc}") from None


def _ln_entries(prefix: str, ln: LayerNormParams) -> dict:
    return {f"{prefix}.weight": ln.gain, f"{prefix}.bias": ln.bias}


def model_entries(model: VitModel, classes: ClassEmbeddingSet | None = None) -> dict:
    """Canonical ordered entry dict for ``model`` (and optional classes)."""
    e: dict[str, np.ndarray | bytes] = {"config": _config_json(model.config)}
    e["patch_proj.weight"] = model.patch_proj
    e["patch_proj.bias"] = model.patch_bias
    e["cls_token"] = model.cls_token
    e["pos_embed"] = model.pos_embed
    if model.pre_norm is not None:
        e.update(_ln_entries("ln_pre", model.pre_norm))
    for i, b in enumerate(model.blocks):
        p = f"blocks.{i}"
        e.update(_ln_entries(f"{p}.norm1", b.norm1))
        for w in ("w_q", "w_k", "w_v", "w_o", "b_q", "b_k", "b_v", "b_o"):
            e[f"{p}.attn.{w}"] = getattr(b.attn, w)
        e.update(_ln_entries(f"{p}.norm2", b.norm2))
        e[f"{p}.mlp.in.weight"] = b.mlp_in
        e[f"{p}.mlp.in.bias"] = b.mlp_in_bias
        e[f"{p}.mlp.out.weight"] = b.mlp_out
        e[f"{p}.mlp.out.bias"] = b.mlp_out_bias
    e.update(_ln_entries("final_norm", model.final_norm))
    e["visual_proj"] = model.visual_proj
    if classes is not None:
        e["class_embeds"] = classes.embeds
        e["class_names"] = "\n".join(classes.names).encode("utf-8")
    return e


def expected_shapes(cfg: VitConfig) -> dict[str, tuple[int, ...]]:
    d, p, h = cfg.dim, cfg.patch_size, cfg.mlp_hidden
    gh, gw = cfg.pretrain_grid
    shapes = {
        "patch_proj.weight": (d, 3 * p * p),
        "patch_proj.bias": (d,),
        "cls_token": (d,),
        "pos_embed": (1 + gh * gw, d),
    }
    for i in range(cfg.depth):
        pre = f"blocks.{i}"
        for ln in ("norm1", "norm2"):
            shapes[f"{pre}.{ln}.weight"] = (d,)
            shapes[f"{pre}.{ln}.bias"] = (d,)
        for w in ("w_q", "w_k", "w_v", "w_o"):
            shapes[f"{pre}.attn.{w}"] = (d, d)
        for b in ("b_q", "b_k", "b_v", "b_o"):
            shapes[f"{pre}.attn.{b}"] = (d,)
        shapes[f"{pre}.mlp.in.weight"] = (h, d)
        shapes[f"{pre}.mlp.in.bias"] = (h,)
        shapes[f"{pre}.mlp.out.weight"] = (d, h)
        shapes[f"{pre}.mlp.out.bias"] = (d,)
    shapes["final_norm.weight"] = (d,)
    shapes["final_norm.bias"] = (d,)
    shapes["visual_proj"] = (d, cfg.embed_out_dim)
    return shapes


_CLASS_ENTRIES = ("class_embeds", "class_names")


def model_from_entries(entries: dict) -> VitModel:
    if "config" not in entries:
        raise ModelError("missing entry 'config'")
    cfg = _parse_config(entries["config"])
    shapes = expected_shapes(cfg)
    for name in ("ln_pre.weight", "ln_pre.bias"):
        if name in entries:
            shapes[name] = (cfg.dim,)
    for name, shape in shapes.items():
        if name not in entries:
            raise ModelError(f"missing entry {name!r}")
        arr = entries[name]
        if not isinstance(arr, np.ndarray):
            raise ModelError(f"{name}: expected float32 tensor, got bytes")
        if arr.shape != shape:
            raise ModelError(f"{name}: expected shape {shape}, got {arr.shape}")
    known = set(shapes) | {"config", *_CLASS_ENTRIES}
    for name in entries:
        if name not in known:
            raise ModelError(f"unexpected entry {name!r}")
    if ("ln_pre.weight" in entries) != ("ln_pre.bias" in entries):
        raise ModelError("ln_pre.weight and ln_pre.bias must appear together")

    def ln(prefix):
        return LayerNormParams(entries[f"{prefix}.weight"], entries[f"{prefix}.bias"])

    blocks = []
    for i in range(cfg.depth):
        p = f"blocks.{i}"
        attn = AttentionWeights(
            *(entries[f"{p}.attn.{w}"] for w in ("w_q", "w_k", "w_v", "w_o", "b_q", "b_k", "b_v", "b_o")),
            head_count=cfg.head_count,
        )
        blocks.append(
            BlockWeights(
                norm1=ln(f"{p}.norm1"),
                attn=attn,
                norm2=ln(f"{p}.norm2"),
                mlp_in=entries[f"{p}.mlp.in.weight"],
                mlp_in_bias=entries[f"{p}.mlp.in.bias"],
                mlp_out=entries[f"{p}.mlp.out.weight"],
                mlp_out_bias=entries[f"{p}.mlp.out.bias"],
            )
        )
    return VitModel(
        config=cfg,
        patch_proj=entries["patch_proj.weight"],
        patch_bias=entries["patch_proj.bias"],
        cls_token=entries["cls_token"],
        pos_embed=entries["pos_embed"],
        blocks=tuple(blocks),
        final_norm=ln("final_norm"),
        visual_proj=entries["visual_proj"],
        pre_norm=ln("ln_pre") if "ln_pre.weight" in entries else None,
    )


def classes_from_entries(entries: dict) -> ClassEmbeddingSet:
    for name in _CLASS_ENTRIES:
        if name not in entries:
            raise ModelError(f"missing entry {name!r}")
    embeds, raw = entries["class_embeds"], entries["class_names"]
    if not isinstance(embeds, np.ndarray) or embeds.ndim != 2:
        raise ModelError("class_embeds: expected a 2-D float32 tensor")
    if not isinstance(raw, bytes):
        raise ModelError("class_names: expected a byte entry")
    try:
        names = raw.decode("utf-8").split("\n")
    except UnicodeDecodeError:
        raise ModelError("class_names: not valid UTF-8") from None
    if len(names) != embeds.shape[0]:
        raise ModelError(f"class_names: {len(names)} names for {embeds.shape[0]} embeddings")
    try:
        return ClassEmbeddingSet(names, embeds)
    except (DataError, ValueError) as exc:
        raise ModelError(f"class_embeds: {exc}") from None


def save_model(path, model: VitModel, classes: ClassEmbeddingSet | None = None) -> None:
    write_container(path, model_entries(model, classes))


def load_model(path) -> VitModel:
    return model_from_entries(read_container(path))


def load_classes(path) -> ClassEmbeddingSet:
    return classes_from_entries(read_container(path))


def load_bundle(path) -> tuple[VitModel, ClassEmbeddingSet]:
    entries = read_container(path)
    return model_from_entries(entries), classes_from_entries(entries)


# ---------------------------------------------------------------------------
# NetPBM
# ---------------------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _parse_netpbm(data: bytes, magic: bytes) -> tuple[int, int, bytes]:
    if data[:2] != magic:
        raise FormatError(f"expected NetPBM magic {magic.decode()}, got {data[:2]!r}")
    pos = 2
    fields = []
    for what in ("width", "height", "maxval"):
        m = _TOKEN.match(data, pos)
        if not m or not m.group(1).isdigit():
            raise FormatError(f"malformed NetPBM header: bad {what}")
        fields.append(int(m.group(1)))
        pos = m.end()
    width, height, maxval = fields
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval} (only 255)")
    if width < 1 or height < 1:
        raise FormatError(f"empty image {width}x{height}")
    if pos >= len(data) or data[pos : pos + 1] not in (b" ", b"\t", b"\n", b"\r"):
        raise FormatError("malformed NetPBM header: missing separator before raster")
    return width, height, data[pos + 1 :]


def read_ppm(path) -> np.ndarray:
    """Raw ``H x W x 3`` uint8 pixels of a binary P6 file."""
    w, h, raster = _parse_netpbm(Path(path).read_bytes(), b"P6")
    if len(raster) < w * h * 3:
        raise FormatError(f"truncated P6 raster: {len(raster)} of {w * h * 3} bytes")
    return np.frombuffer(raster[: w * h * 3], dtype=np.uint8).reshape(h, w, 3).copy()


def normalize_image(rgb: np.ndarray) -> np.ndarray:
    """uint8 ``H x W x 3`` -> float32 ``3 x H x W`` with the CLIP channel statistics."""
    x = rgb.astype(np.float32).transpose(2, 0, 1) / 255.0
    mean = np.asarray(IMAGE_MEAN, dtype=np.float32)[:, None, None]
    std = np.asarray(IMAGE_STD, dtype=np.float32)[:, None, None]
    return np.ascontiguousarray((x - mean) / std, dtype=np.float32)


def read_image_ppm(path) -> np.ndarray:
    return normalize_image(read_ppm(path))


def write_ppm(path, rgb) -> None:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DataError(f"expected H x W x 3 pixels, got {rgb.shape}")
    h, w, _ = rgb.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + rgb.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    w, h, raster = _parse_netpbm(Path(path).read_bytes(), b"P5")
    if len(raster) < w * h:
        raise FormatError(f"truncated P5 raster: {len(raster)} of {w * h} bytes")
    return np.frombuffer(raster[: w * h], dtype=np.uint8).reshape(h, w).copy()


def _write_pgm(path, pixels: np.ndarray) -> None:
    h, w = pixels.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + pixels.astype(np.uint8).tobytes())


def write_mask_pgm(path, mask) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise DataError(f"mask must be 2-D, got shape {mask.shape}")
    if mask.size and (mask.min() < 0 or mask.max() > 255):
        raise DataError("mask labels must lie in 0..255")
    _write_pgm(path, mask)


def heatmap_bytes(values) -> np.ndarray:
    """Min-max scale a 2-D map to 0..255 (a constant map becomes all zeros)."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros(v.shape, dtype=np.uint8)
    return np.rint((v - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_heatmap_pgm(path, values) -> None:
    values = np.asarray(values)
    if values.ndim != 2:
        raise DataError(f"heatmap must be 2-D, got shape {values.shape}")
    _write_pgm(path, heatmap_bytes(values))
