"""Vision-transformer encoder with a swappable decoding layer.

Blocks are pre-norm (norm -> attention -> residual -> norm -> MLP -> residual).
All blocks but the last run vanilla attention; the last block, the decoding
layer, takes its attention scores from the requested
:data:`~csaseg.attention.AttentionMode` and keeps its residuals and MLP.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import attention as A
from .errors import ConfigError, DimensionError, ModelError
from .tensor import DTYPE, as_tensor, bilinear_resize, gelu, layer_norm, quick_gelu

ACTIVATIONS = {"gelu": gelu, "quick_gelu": quick_gelu}


@dataclass(frozen=True)
class VitConfig:
    patch_size: int
    dim: int
    depth: int
    head_count: int
    mlp_ratio: float = 4.0
    pretrain_grid: tuple[int, int] = (14, 14)
    embed_out_dim: int = 512
    activation: str = "gelu"

    def __post_init__(self):
        object.__setattr__(self, "pretrain_grid", tuple(int(g) for g in self.pretrain_grid))
        if self.patch_size < 1 or self.depth < 1 or self.dim < 1 or self.embed_out_dim < 1:
            raise ConfigError(f"non-positive model size in {self}")
        if self.head_count < 1 or self.dim % self.head_count:
            raise ConfigError(f"dim {self.dim} not divisible by head_count {self.head_count}")
        if len(self.pretrain_grid) != 2 or min(self.pretrain_grid) < 1:
            raise ConfigError(f"pretrain_grid must be two positive extents, got {self.pretrain_grid}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.mlp_hidden < 1:
            raise ConfigError(f"mlp_ratio {self.mlp_ratio} gives an empty MLP")

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.mlp_ratio * self.dim))

    @property
    def head_dim(self) -> int:
        return self.dim // self.head_count


@dataclass(frozen=True, eq=False)
class LayerNormParams:
    gain: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "gain", as_tensor(self.gain, ndim=1, name="layer norm gain"))
        object.__setattr__(self, "bias", as_tensor(self.bias, ndim=1, name="layer norm bias"))

    @classmethod
    def identity(cls, d: int) -> "LayerNormParams":
        return cls(np.ones(d, dtype=DTYPE), np.zeros(d, dtype=DTYPE))

    def __call__(self, x):
        return layer_norm(x, self.gain, self.bias)


@dataclass(frozen=True, eq=False)
class BlockWeights:
    norm1: LayerNormParams
    attn: A.AttentionWeights
    norm2: LayerNormParams
    mlp_in: np.ndarray
    mlp_in_bias: np.ndarray
    mlp_out: np.ndarray
    mlp_out_bias: np.ndarray

    def __post_init__(self):
        for name in ("mlp_in", "mlp_in_bias", "mlp_out", "mlp_out_bias"):
            object.__setattr__(self, name, as_tensor(getattr(self, name), name=name))


@dataclass(frozen=True, eq=False)
class VitModel:
    """Immutable encoder weights.

    ``patch_proj`` and the MLP matrices are stored output-major (applied as
    ``x @ W.T``); attention matrices and ``visual_proj`` are applied as
    ``x @ W``. ``pre_norm`` is the optional layer norm some checkpoints apply
    right after the positional embedding.
    """

    config: VitConfig
    patch_proj: np.ndarray
    patch_bias: np.ndarray
    cls_token: np.ndarray
    pos_embed: np.ndarray
    blocks: tuple[BlockWeights, ...]
    final_norm: LayerNormParams
    visual_proj: np.ndarray
    pre_norm: LayerNormParams | None = None

    def __post_init__(self):
        cfg = self.config
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if len(self.blocks) != cfg.depth:
            raise ModelError(f"blocks: expected {cfg.depth}, got {len(self.blocks)}")
        p, d = cfg.patch_size, cfg.dim
        gh, gw = cfg.pretrain_grid
        expected = {
            "patch_proj": (self.patch_proj, (d, 3 * p * p)),
            "patch_bias": (self.patch_bias, (d,)),
            "cls_token": (self.cls_token, (d,)),
            "pos_embed": (self.pos_embed, (1 + gh * gw, d)),
            "visual_proj": (self.visual_proj, (d, cfg.embed_out_dim)),
        }
        for name, (arr, shape) in expected.items():
            if np.shape(arr) != shape:
                raise ModelError(f"{name}: expected shape {shape}, got {np.shape(arr)}")
            object.__setattr__(self, name, as_tensor(arr, name=name))
        for i, blk in enumerate(self.blocks):
            if blk.attn.dim != d or blk.attn.head_count != cfg.head_count:
                raise ModelError(f"blocks.{i}.attn: width/head count disagree with config")
            if np.shape(blk.mlp_in) != (cfg.mlp_hidden, d) or np.shape(blk.mlp_out) != (d, cfg.mlp_hidden):
                raise ModelError(f"blocks.{i}.mlp: shapes disagree with config")

    @property
    def depth(self) -> int:
        return self.config.depth


@dataclass(frozen=True, eq=False)
class DenseFeatures:
    """Per-patch features in the joint embedding space.

    ``feats`` has one row per patch in row-major grid order (class token
    dropped). ``attention`` holds the score stack each layer used.
    """

    grid: tuple[int, int]
    feats: np.ndarray
    attention: list[np.ndarray] = field(default_factory=list)


def patchify(image, p: int) -> np.ndarray:
    """Cut a ``3 x H x W`` image into flattened ``p x p`` patches.

    Patches are ordered top-left to bottom-right; each row is laid out
    channel-major (c, y, x), matching a flattened convolution kernel.
    """
    image = as_tensor(image, ndim=3, name="image")
    c, h, w = image.shape
    if h % p or w % p:
        raise DimensionError(f"image {h}x{w} is not divisible by patch size {p}")
    gh, gw = h // p, w // p
    patches = image.reshape(c, gh, p, gw, p).transpose(1, 3, 0, 2, 4)
    return np.ascontiguousarray(patches.reshape(gh * gw, c * p * p))


def interpolate_pos_embed(pos, new_grid: tuple[int, int], old_grid: tuple[int, int] | None = None) -> np.ndarray:
    """Bilinearly resample the patch rows of a positional embedding.

    Row 0 (class token) is copied unchanged. ``old_grid`` defaults to the
    square grid implied by the row count.
    """
    pos = as_tensor(pos, ndim=2, name="pos_embed")
    n, d = pos.shape
    if old_grid is None:
        side = math.isqrt(n - 1)
        if side * side != n - 1:
            raise DimensionError(f"cannot infer a square grid from {n - 1} patch positions")
        old_grid = (side, side)
    gh, gw = old_grid
    if gh * gw != n - 1:
        raise DimensionError(f"pos_embed has {n - 1} patch rows, grid {gh}x{gw} expects {gh * gw}")
    r, c = new_grid
    if (r, c) == (gh, gw):
        return pos.copy()
    patch = pos[1:].reshape(gh, gw, d).transpose(2, 0, 1)
    patch = bilinear_resize(patch, r, c).transpose(1, 2, 0).reshape(r * c, d)
    return np.concatenate([pos[:1], patch], axis=0)


def embed_tokens(model: VitModel, image) -> tuple[np.ndarray, tuple[int, int]]:
    """Patch embedding + class token + positional embedding (+ optional pre-norm)."""
    cfg = model.config
    patches = patchify(image, cfg.patch_size)
    grid = (image.shape[1] // cfg.patch_size, image.shape[2] // cfg.patch_size)
    tokens = patches @ model.patch_proj.T + model.patch_bias
    x = np.concatenate([model.cls_token[None, :], tokens], axis=0)
    x = x + interpolate_pos_embed(model.pos_embed, grid, cfg.pretrain_grid)
    if model.pre_norm is not None:
        x = model.pre_norm(x)
    return x.astype(DTYPE, copy=False), grid


def mlp(block: BlockWeights, x, activation: str = "gelu") -> np.ndarray:
    hidden = ACTIVATIONS[activation](x @ block.mlp_in.T + block.mlp_in_bias)
    return hidden @ block.mlp_out.T + block.mlp_out_bias


def run_block(
    block: BlockWeights,
    x: np.ndarray,
    mode: A.AttentionMode,
    grid: tuple[int, int],
    *,
    borrowed: np.ndarray | None = None,
    activation: str = "gelu",
    use_mlp: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """One pre-norm block; returns the new tokens and the scores it used."""
    h = block.norm1(x)
    scores = A.compute_scores(mode, h, block.attn, grid=grid, borrowed=borrowed)
    x = x + A.aggregate(h, scores, block.attn)
    if use_mlp:
        x = x + mlp(block, block.norm2(x), activation)
    return x, scores


def forward_features(
    model: VitModel,
    image,
    decode_mode: A.AttentionMode | None = None,
    *,
    decoder_mlp: bool = True,
) -> DenseFeatures:
    """Dense patch features with the last block's attention set by ``decode_mode``.

    ``decoder_mlp=False`` skips the decoding layer's MLP branch, for
    experimenting with pipelines that bypass it.
    """
    decode_mode = A.CsaDual() if decode_mode is None else decode_mode
    depth = model.depth
    if isinstance(decode_mode, A.EarlyBorrow) and decode_mode.layer >= depth:
        raise ConfigError(f"early-borrow layer {decode_mode.layer} must precede the decoding layer {depth}")

    x, grid = embed_tokens(model, image)
    act = model.config.activation
    maps: list[np.ndarray] = []
    for i, block in enumerate(model.blocks, start=1):
        last = i == depth
        mode = decode_mode if last else A.Vanilla()
        borrowed = maps[mode.layer - 1] if isinstance(mode, A.EarlyBorrow) else None
        x, scores = run_block(
            block, x, mode, grid, borrowed=borrowed, activation=act, use_mlp=decoder_mlp or not last
        )
        maps.append(scores)

    x = model.final_norm(x)
    feats = (x[1:] @ model.visual_proj).astype(DTYPE, copy=False)
    return DenseFeatures(grid=grid, feats=feats, attention=maps)


def capture_attention(model: VitModel, image, layer_idx: int) -> np.ndarray:
    """Post-softmax scores of layer ``layer_idx`` (1-based) under a vanilla pass."""
    if not 1 <= layer_idx <= model.depth:
        raise ConfigError(f"layer index {layer_idx} outside 1..{model.depth}")
    x, grid = embed_tokens(model, image)
    act = model.config.activation
    for block in model.blocks[:layer_idx]:
        x, scores = run_block(block, x, A.Vanilla(), grid, activation=act)
    return scores
