"""Generated models for tests, demos and ``csaseg selftest``."""

from __future__ import annotations

import numpy as np

from .attention import AttentionWeights
from .classifier import ClassEmbeddingSet
from .tensor import DTYPE
from .vit import BlockWeights, LayerNormParams, VitConfig, VitModel


def _normal(rng, *shape, scale=1.0):
    return (rng.standard_normal(shape) * scale).astype(DTYPE)


def random_model(config: VitConfig, seed: int = 0) -> VitModel:
    """A model with Gaussian weights scaled so activations stay O(1)."""
    rng = np.random.default_rng(seed)
    d, p, h = config.dim, config.patch_size, config.mlp_hidden
    gh, gw = config.pretrain_grid

    def ln():
        return LayerNormParams(1.0 + _normal(rng, d, scale=0.1), _normal(rng, d, scale=0.1))

    blocks = []
    for _ in range(config.depth):
        attn = AttentionWeights(
            *(_normal(rng, d, d, scale=d**-0.5) for _ in range(4)),
            *(_normal(rng, d, scale=0.1) for _ in range(4)),
            head_count=config.head_count,
        )
        blocks.append(
            BlockWeights(
                norm1=ln(),
                attn=attn,
                norm2=ln(),
                mlp_in=_normal(rng, h, d, scale=d**-0.5),
                mlp_in_bias=_normal(rng, h, scale=0.1),
                mlp_out=_normal(rng, d, h, scale=h**-0.5),
                mlp_out_bias=_normal(rng, d, scale=0.1),
            )
        )
    return VitModel(
        config=config,
        patch_proj=_normal(rng, d, 3 * p * p, scale=(3 * p * p) ** -0.5),
        patch_bias=_normal(rng, d, scale=0.1),
        cls_token=_normal(rng, d),
        pos_embed=_normal(rng, 1 + gh * gw, d, scale=0.5),
        blocks=tuple(blocks),
        final_norm=ln(),
        visual_proj=_normal(rng, d, config.embed_out_dim, scale=d**-0.5),
    )


def tiny_config(**overrides) -> VitConfig:
    """2-layer, width-16, 4-head encoder on 4-pixel patches."""
    params = dict(patch_size=4, dim=16, depth=2, head_count=4, mlp_ratio=2.0, pretrain_grid=(4, 4), embed_out_dim=8)
    params.update(overrides)
    return VitConfig(**params)


def random_classes(num_classes: int, dim: int, seed: int = 0) -> ClassEmbeddingSet:
    rng = np.random.default_rng(seed)
    names = [f"class{i}" for i in range(num_classes)]
    return ClassEmbeddingSet(names, _normal(rng, num_classes, dim))


# ---------------------------------------------------------------------------
# Two-region segmentation fixture
# ---------------------------------------------------------------------------

RED = (255, 0, 0)
BLUE = (0, 0, 255)


def two_region_image(height: int, width: int) -> np.ndarray:
    """uint8 ``H x W x 3`` picture: red left half, blue right half."""
    rgb = np.empty((height, width, 3), dtype=np.uint8)
    rgb[:, : width // 2] = RED
    rgb[:, width // 2 :] = BLUE
    return rgb


def two_region_truth(height: int, width: int) -> np.ndarray:
    mask = np.ones((height, width), dtype=np.int64)
    mask[:, : width // 2] = 0
    return mask


def two_region_model(
    *, patch_size: int = 16, dim: int = 16, head_count: int = 4, cls_pull: float = 2000.0, global_mixing: bool = False
) -> tuple[VitModel, ClassEmbeddingSet]:
    """Two-layer encoder whose patch features are, by construction, class embeddings.

    The patch embedding maps red patches to ``+u`` and blue patches to ``-u``
    with ``u = e0 - e1``; the two class embeddings are ``+u`` and ``-u``.
    Layer 1 is an exact no-op. In the decoding layer the value projection
    copies the patch directions and turns the class token (which lives in
    ``e2 - e3``) into a strong pull toward class 0, so any attention that
    spreads weight onto the class token drags every patch toward class 0.

    With ``global_mixing=True`` the decoding layer's query and key
    projections are zero, forcing uniform vanilla attention.
    """
    d, p = dim, patch_size
    zeros_dd = np.zeros((d, d), dtype=DTYPE)
    zeros_d = np.zeros(d, dtype=DTYPE)
    u = np.zeros(d, dtype=DTYPE)
    u[0], u[1] = 1.0, -1.0

    # token = mean(red channel) - mean(blue channel) along +u
    kernel = np.zeros((3, p, p), dtype=DTYPE)
    kernel[0] = 1.0 / (p * p)
    kernel[2] = -1.0 / (p * p)
    patch_proj = np.outer(u, kernel.reshape(-1)).astype(DTYPE)

    cls_token = np.zeros(d, dtype=DTYPE)
    cls_token[2], cls_token[3] = 1.0, -1.0

    noop = BlockWeights(
        norm1=LayerNormParams.identity(d),
        attn=AttentionWeights(zeros_dd, zeros_dd, zeros_dd, zeros_dd, zeros_d, zeros_d, zeros_d, zeros_d, head_count),
        norm2=LayerNormParams.identity(d),
        mlp_in=np.zeros((d, d), dtype=DTYPE),
        mlp_in_bias=zeros_d,
        mlp_out=np.zeros((d, d), dtype=DTYPE),
        mlp_out_bias=zeros_d,
    )

    w_v = np.zeros((d, d), dtype=DTYPE)
    w_v[0, 0] = w_v[1, 1] = 1.0
    w_v[2, :] = cls_pull * u
    qk = zeros_dd if global_mixing else np.eye(d, dtype=DTYPE)
    decoder = BlockWeights(
        norm1=LayerNormParams.identity(d),
        attn=AttentionWeights(qk, qk, w_v, np.eye(d, dtype=DTYPE), zeros_d, zeros_d, zeros_d, zeros_d, head_count),
        norm2=LayerNormParams.identity(d),
        mlp_in=np.zeros((d, d), dtype=DTYPE),
        mlp_in_bias=zeros_d,
        mlp_out=np.zeros((d, d), dtype=DTYPE),
        mlp_out_bias=zeros_d,
    )

    config = VitConfig(
        patch_size=p, dim=d, depth=2, head_count=head_count, mlp_ratio=1.0, pretrain_grid=(14, 14), embed_out_dim=d
    )
    model = VitModel(
        config=config,
        patch_proj=patch_proj,
        patch_bias=zeros_d,
        cls_token=cls_token,
        pos_embed=np.zeros((1 + 14 * 14, d), dtype=DTYPE),
        blocks=(noop, decoder),
        final_norm=LayerNormParams.identity(d),
        visual_proj=np.eye(d, dtype=DTYPE),
    )
    classes = ClassEmbeddingSet(["red", "blue"], np.stack([u, -u]))
    return model, classes

