"""Invariant suite behind ``csaseg selftest``.

Each check raises AssertionError on failure; :func:`run_all` collects the
outcomes so the CLI can report every check instead of stopping at the first.
"""

from __future__ import annotations

import math
import tempfile
from pathlib import Path

import numpy as np

from . import attention as A
from . import model_io
from .slide import SlideConfig, direct_logits, slide_logits, slide_segment
from .synthetic import random_classes, random_model, tiny_config, two_region_image, two_region_model, two_region_truth
from .vit import capture_attention, forward_features

SEED = 20240101


def _random_case(rng, n_tokens: int, d: int = 16, heads: int = 4):
    x = rng.standard_normal((n_tokens, d)).astype(np.float32)
    mats = [rng.standard_normal((d, d)).astype(np.float32) / math.sqrt(d) for _ in range(4)]
    biases = [rng.standard_normal(d).astype(np.float32) * 0.1 for _ in range(4)]
    return x, A.AttentionWeights(*mats, *biases, head_count=heads)


def check_row_sums():
    rng = np.random.default_rng(SEED)
    for l in (1, 4, 9, 16):
        x, w = _random_case(rng, l + 1)
        side = math.isqrt(l)
        grid = (side, l // side) if side * (l // side) == l else (1, l)
        for mode in (A.Vanilla(), A.CsaSingle("q"), A.Identity(), A.LocalWindow(3), A.Sharpened(2.0), A.RandomEnsemble(3, 1)):
            s = A.compute_scores(mode, x, w, grid=grid)
            assert np.abs(s.sum(-1) - 1).max() < 1e-6, f"{A.format_mode(mode)} rows do not sum to 1"
        s = A.compute_scores(A.CsaDual(), x, w)
        assert np.abs(s.sum(-1) - 2).max() < 1e-6, "dual rows do not sum to 2"


def check_csa_symmetry():
    rng = np.random.default_rng(SEED + 1)
    x, w = _random_case(rng, 10)
    s = A.csa_logits(x, w.w_q, w.head_count, bias=w.b_q)
    assert np.abs(s - s.transpose(0, 2, 1)).max() < 1e-6


def check_dual_recomposition():
    rng = np.random.default_rng(SEED + 2)
    x, w = _random_case(rng, 10)
    dual = A.compute_scores(A.CsaDual(), x, w)
    parts = A.compute_scores(A.CsaSingle("q"), x, w) + A.compute_scores(A.CsaSingle("k"), x, w)
    assert np.abs(dual - parts).max() <= 1e-7


def check_window_one_is_identity():
    rng = np.random.default_rng(SEED + 3)
    x, w = _random_case(rng, 13)
    s = A.compute_scores(A.LocalWindow(1), x, w, grid=(3, 4))
    assert np.array_equal(s[:, 1:, :], np.broadcast_to(A.identity_scores(12)[1:], s[:, 1:, :].shape))


def check_default_sharpening_is_vanilla():
    rng = np.random.default_rng(SEED + 4)
    x, w = _random_case(rng, 9)
    assert np.array_equal(A.compute_scores(A.Sharpened(w.default_tau), x, w), A.vanilla_scores(x, w))


def check_diagonal_maximality():
    rng = np.random.default_rng(SEED + 5)
    x, w = _random_case(rng, 12)
    s = A.csa_logits(x, w.w_k, w.head_count, normalize=True)
    diag = np.diagonal(s, axis1=1, axis2=2)
    assert np.all(diag >= s.max(axis=-1) - 1e-6)


def check_permutation_equivariance():
    rng = np.random.default_rng(SEED + 6)
    x, w = _random_case(rng, 11)
    perm = np.concatenate([[0], 1 + rng.permutation(10)])
    s = A.csa_scores(x, w.w_q, w.head_count)
    sp = A.csa_scores(x[perm], w.w_q, w.head_count)
    assert np.abs(sp - s[:, perm][:, :, perm]).max() < 1e-6


def check_early_borrow():
    model = random_model(tiny_config(depth=3), seed=SEED)
    image = np.random.default_rng(SEED).standard_normal((3, 16, 16)).astype(np.float32)
    dense = forward_features(model, image, A.EarlyBorrow(1))
    assert np.array_equal(dense.attention[-1], capture_attention(model, image, 1))


def check_single_window_slide():
    model = random_model(tiny_config(), seed=SEED)
    classes = random_classes(3, model.config.embed_out_dim, seed=SEED)
    image = np.random.default_rng(SEED).standard_normal((3, 16, 16)).astype(np.float32)
    cfg = SlideConfig(short_side=16, window=16, stride=8)
    assert np.array_equal(slide_logits(model, image, classes, A.CsaDual(), cfg), direct_logits(model, image, classes, A.CsaDual(), 16))


def check_container_roundtrip():
    model = random_model(tiny_config(), seed=SEED)
    classes = random_classes(3, model.config.embed_out_dim, seed=SEED)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "m.scwt"
        model_io.save_model(path, model, classes)
        first = path.read_bytes()
        m2, c2 = model_io.load_bundle(path)
        model_io.save_model(path, m2, c2)
        assert path.read_bytes() == first


def check_two_region_segmentation():
    rgb = two_region_image(224, 224)
    truth = two_region_truth(224, 224)
    image = model_io.normalize_image(rgb)
    cfg = SlideConfig(short_side=224, window=224, stride=112)
    model, classes = two_region_model()
    assert np.array_equal(slide_segment(model, image, classes, A.CsaDual(), cfg), truth)
    mixing, _ = two_region_model(global_mixing=True)
    assert not np.array_equal(slide_segment(mixing, image, classes, A.Vanilla(), cfg), truth)


CHECKS = [
    ("row sums", check_row_sums),
    ("csa symmetry", check_csa_symmetry),
    ("dual = single(q) + single(k)", check_dual_recomposition),
    ("local:1 = identity", check_window_one_is_identity),
    ("sharpen:sqrt(head_dim) = vanilla", check_default_sharpening_is_vanilla),
    ("diagonal maximality", check_diagonal_maximality),
    ("permutation equivariance", check_permutation_equivariance),
    ("early borrow reuses captured scores", check_early_borrow),
    ("single-window slide = direct", check_single_window_slide),
    ("container round trip", check_container_roundtrip),
    ("two-region segmentation", check_two_region_segmentation),
]


def run_all() -> list[tuple[str, bool, str]]:
    results = []
    for name, fn in CHECKS:
        try:
            fn()
            results.append((name, True, ""))
        except AssertionError as exc:
            results.append((name, False, str(exc)))
        except Exception as exc:  # a crash is a failed check, not a crashed suite
            results.append((name, False, f"{type(exc).__name__}: {exc}"))
    return results
