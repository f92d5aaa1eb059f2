"""Attention-score mechanisms and value aggregation.

Every scoring function maps a token matrix ``x`` of shape ``(l+1) x d``
(class token first) to a ``heads x (l+1) x (l+1)`` stack of attention
matrices. Multi-head handling is uniform: each head works on its own column
slice of the projected tokens and the default temperature is
``sqrt(head_dim)``.

Projection matrices use the row-vector convention ``x @ W``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import DTYPE, as_tensor, softmax_rows

MASK_VALUE = -1e9


# ---------------------------------------------------------------------------
# Attention modes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Vanilla:
    """Pretrained query-key attention."""


@dataclass(frozen=True)
class CsaSingle:
    """Correlative attention through one projection.

    ``projection`` is ``"q"`` or ``"k"`` (reuse the layer's query or key
    projection, bias included), ``"identity"`` (correlate raw inputs), or a
    ``d x d`` matrix.
    """

    projection: Union[str, np.ndarray] = "q"

    def __post_init__(self):
        if isinstance(self.projection, str):
            if self.projection not in ("q", "k", "identity"):
                raise ConfigError(f"unknown CSA projection {self.projection!r}")
        else:
            object.__setattr__(self, "projection", as_tensor(self.projection, ndim=2, name="custom projection"))

    def __eq__(self, other):
        if not isinstance(other, CsaSingle):
            return NotImplemented
        a, b = self.projection, other.projection
        if isinstance(a, str) and isinstance(b, str):
            return a == b
        if isinstance(a, np.ndarray) and isinstance(b, np.ndarray):
            return bool(np.array_equal(a, b))
        return False

    __hash__ = None


@dataclass(frozen=True)
class CsaDual:
    """Sum of the query-projection and key-projection correlative attentions."""


@dataclass(frozen=True)
class Identity:
    """Every token attends only to itself."""


@dataclass(frozen=True)
class LocalWindow:
    size: int

    def __post_init__(self):
        if self.size < 1 or self.size % 2 == 0:
            raise ConfigError(f"local window size must be odd and >= 1, got {self.size}")


@dataclass(frozen=True)
class Sharpened:
    """Vanilla attention at temperature ``tau``; ``tau == 0`` means hard argmax."""

    tau: float

    def __post_init__(self):
        if not math.isfinite(self.tau) or self.tau < 0:
            raise ConfigError(f"sharpening temperature must be >= 0, got {self.tau}")


@dataclass(frozen=True)
class RandomEnsemble:
    n: int
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError(f"ensemble size must be >= 1, got {self.n}")


@dataclass(frozen=True)
class EarlyBorrow:
    """Reuse the vanilla attention maps of an earlier (1-based) layer."""

    layer: int

    def __post_init__(self):
        if self.layer < 1:
            raise ConfigError(f"borrowed layer index is 1-based, got {self.layer}")


AttentionMode = Union[Vanilla, CsaSingle, CsaDual, Identity, LocalWindow, Sharpened, RandomEnsemble, EarlyBorrow]

_MODE_RE = {
    "local": re.compile(r"local:(\d+)"),
    "sharpen": re.compile(r"sharpen:([0-9.eE+-]+)"),
    "ensemble": re.compile(r"ensemble:(\d+):(-?\d+)"),
    "early": re.compile(r"early:(\d+)"),
}

_SIMPLE_MODES = {
    "vanilla": Vanilla,
    "csa": CsaDual,
    "csa-q": lambda: CsaSingle("q"),
    "csa-k": lambda: CsaSingle("k"),
    "csa-id": lambda: CsaSingle("identity"),
    "identity": Identity,
}


def parse_mode(text: str) -> AttentionMode:
    """Parse a CLI mode string such as ``csa``, ``local:3`` or ``ensemble:4:7``."""
    text = text.strip()
    if text in _SIMPLE_MODES:
        return _SIMPLE_MODES[text]()
    if m := _MODE_RE["local"].fullmatch(text):
        return LocalWindow(int(m.group(1)))
    if m := _MODE_RE["sharpen"].fullmatch(text):
        try:
            tau = float(m.group(1))
        except ValueError:
            raise ConfigError(f"bad temperature in mode {text!r}") from None
        return Sharpened(tau)
    if m := _MODE_RE["ensemble"].fullmatch(text):
        return RandomEnsemble(int(m.group(1)), int(m.group(2)))
    if m := _MODE_RE["early"].fullmatch(text):
        return EarlyBorrow(int(m.group(1)))
    raise ConfigError(f"unknown attention mode {text!r}")


def format_mode(mode: AttentionMode) -> str:
    """Inverse of :func:`parse_mode` (custom projections have no string form)."""
    if isinstance(mode, Vanilla):
        return "vanilla"
    if isinstance(mode, CsaDual):
        return "csa"
    if isinstance(mode, Identity):
        return "identity"
    if isinstance(mode, CsaSingle):
        if isinstance(mode.projection, str):
            return {"q": "csa-q", "k": "csa-k", "identity": "csa-id"}[mode.projection]
        return "csa-custom"
    if isinstance(mode, LocalWindow):
        return f"local:{mode.size}"
    if isinstance(mode, Sharpened):
        return f"sharpen:{mode.tau:g}"
    if isinstance(mode, RandomEnsemble):
        return f"ensemble:{mode.n}:{mode.seed}"
    if isinstance(mode, EarlyBorrow):
        return f"early:{mode.layer}"
    raise ConfigError(f"not an attention mode: {mode!r}")


# ---------------------------------------------------------------------------
# Weights
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class AttentionWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    b_q: np.ndarray
    b_k: np.ndarray
    b_v: np.ndarray
    b_o: np.ndarray
    head_count: int = field(default=1)

    def __post_init__(self):
        d = None
        for name in ("w_q", "w_k", "w_v", "w_o"):
            m = as_tensor(getattr(self, name), ndim=2, name=name)
            if m.shape[0] != m.shape[1] or (d is not None and m.shape[0] != d):
                raise DimensionError(f"{name}: expected square {d or m.shape[0]}x{d or m.shape[0]}, got {m.shape}")
            d = m.shape[0]
            object.__setattr__(self, name, m)
        for name in ("b_q", "b_k", "b_v", "b_o"):
            b = as_tensor(getattr(self, name), ndim=1, name=name)
            if b.shape[0] != d:
                raise DimensionError(f"{name}: expected length {d}, got {b.shape[0]}")
            object.__setattr__(self, name, b)
        if self.head_count < 1 or d % self.head_count:
            raise DimensionError(f"width {d} not divisible by head_count {self.head_count}")

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.head_count

    @property
    def default_tau(self) -> float:
        return math.sqrt(self.head_dim)

    @classmethod
    def identity(cls, d: int, head_count: int = 1) -> "AttentionWeights":
        eye = np.eye(d, dtype=DTYPE)
        zero = np.zeros(d, dtype=DTYPE)
        return cls(eye, eye, eye, eye, zero, zero, zero, zero, head_count)


# ---------------------------------------------------------------------------
# Score functions
# ---------------------------------------------------------------------------


def _check_tokens(x, d: int) -> np.ndarray:
    x = as_tensor(x, ndim=2, name="tokens")
    if x.shape[1] != d:
        raise DimensionError(f"tokens have width {x.shape[1]}, weights expect {d}")
    return x


def split_heads(p: np.ndarray, heads: int) -> np.ndarray:
    """``n x d`` -> ``heads x n x (d/heads)`` by contiguous column slices."""
    n, d = p.shape
    if d % heads:
        raise DimensionError(f"width {d} not divisible by {heads} heads")
    return np.ascontiguousarray(p.reshape(n, heads, d // heads).transpose(1, 0, 2))


def merge_heads(p: np.ndarray) -> np.ndarray:
    heads, n, hd = p.shape
    return np.ascontiguousarray(p.transpose(1, 0, 2).reshape(n, heads * hd))


def _tau(tau, head_dim: int) -> np.float32:
    return DTYPE(math.sqrt(head_dim) if tau is None else tau)


def vanilla_logits(x, w: AttentionWeights, tau=None) -> np.ndarray:
    x = _check_tokens(x, w.dim)
    q = split_heads(x @ w.w_q + w.b_q, w.head_count)
    k = split_heads(x @ w.w_k + w.b_k, w.head_count)
    return np.matmul(q, k.transpose(0, 2, 1)) / _tau(tau, w.head_dim)


def vanilla_scores(x, w: AttentionWeights, tau=None) -> np.ndarray:
    return softmax_rows(vanilla_logits(x, w, tau))


def csa_logits(x, w_r, heads: int = 1, tau=None, bias=None, normalize: bool = False) -> np.ndarray:
    """Pre-softmax correlative scores ``(x W_r)(x W_r)^T / tau`` per head.

    With ``normalize=True`` each head's projected rows are scaled to unit
    length first, which makes the diagonal the row maximum.
    """
    w_r = as_tensor(w_r, ndim=2, name="w_r")
    x = _check_tokens(x, w_r.shape[0])
    proj = x @ w_r
    if bias is not None:
        proj = proj + as_tensor(bias, ndim=1, name="projection bias")
    p = split_heads(proj, heads)
    if normalize:
        norms = np.sqrt(np.sum(p * p, axis=-1, keepdims=True))
        p = p / np.where(norms == 0, DTYPE(1), norms)
    return np.matmul(p, p.transpose(0, 2, 1)) / _tau(tau, p.shape[-1])


def csa_scores(x, w_r, heads: int = 1, tau=None, bias=None) -> np.ndarray:
    return softmax_rows(csa_logits(x, w_r, heads, tau, bias))


def csa_dual_scores(x, w: AttentionWeights, tau=None) -> np.ndarray:
    """Query-correlation plus key-correlation attention; rows sum to 2."""
    sq = csa_scores(x, w.w_q, w.head_count, tau, w.b_q)
    sk = csa_scores(x, w.w_k, w.head_count, tau, w.b_k)
    return sq + sk


def identity_scores(l: int) -> np.ndarray:
    if l < 0:
        raise DimensionError(f"patch count must be >= 0, got {l}")
    return np.eye(l + 1, dtype=DTYPE)


def local_window_mask(grid: tuple[int, int], size: int) -> np.ndarray:
    """Boolean ``(l+1) x (l+1)`` matrix of admissible (query, key) pairs.

    The class-token row is fully open. Patch rows admit only patches within
    Chebyshev distance ``size // 2`` on the grid; the class-token column is
    closed for them so that ``size == 1`` collapses to the identity.
    """
    rows, cols = grid
    if size < 1 or size % 2 == 0:
        raise ConfigError(f"local window size must be odd and >= 1, got {size}")
    r, c = np.divmod(np.arange(rows * cols), cols)
    half = size // 2
    near = (np.abs(r[:, None] - r[None, :]) <= half) & (np.abs(c[:, None] - c[None, :]) <= half)
    n = rows * cols + 1
    allowed = np.zeros((n, n), dtype=bool)
    allowed[0, :] = True
    allowed[1:, 1:] = near
    return allowed


def local_window_scores(x, w: AttentionWeights, size: int, grid: tuple[int, int], tau=None) -> np.ndarray:
    logits = vanilla_logits(x, w, tau)
    n = logits.shape[-1]
    if grid[0] * grid[1] != n - 1:
        raise DimensionError(f"grid {grid[0]}x{grid[1]} does not match {n - 1} patch tokens")
    allowed = local_window_mask(grid, size)
    return softmax_rows(np.where(allowed, logits, DTYPE(MASK_VALUE)))


def hard_max(logits: np.ndarray) -> np.ndarray:
    """One-hot rows at the (first) argmax: the zero-temperature limit of softmax."""
    out = np.zeros_like(logits, dtype=DTYPE)
    np.put_along_axis(out, np.argmax(logits, axis=-1)[..., None], DTYPE(1), axis=-1)
    return out


def sharpened_scores(x, w: AttentionWeights, tau: float) -> np.ndarray:
    if tau == 0:
        return hard_max(vanilla_logits(x, w))
    return vanilla_scores(x, w, tau)


def ensemble_matrix(d: int, seed: int, index: int) -> np.ndarray:
    """The ``index``-th random ``d x d`` projection, entries ~ N(0, 1/d).

    Each (seed, index) pair keys its own Philox stream, so any single trial
    can be regenerated without drawing the ones before it.
    """
    key = (seed % (1 << 64)) | (index << 64)
    rng = np.random.Generator(np.random.Philox(key=key))
    return (rng.standard_normal((d, d)) / math.sqrt(d)).astype(DTYPE)


def ensemble_scores(x, n: int, seed: int, heads: int = 1, tau=None) -> np.ndarray:
    if n < 1:
        raise ConfigError(f"ensemble size must be >= 1, got {n}")
    x = as_tensor(x, ndim=2, name="tokens")
    d = x.shape[1]
    total = None
    for i in range(n):
        s = csa_scores(x, ensemble_matrix(d, seed, i), heads, tau)
        total = s if total is None else total + s
    return total / DTYPE(n)


def aggregate(x, scores, w: AttentionWeights) -> np.ndarray:
    """Apply attention: value projection, per-head weighting, output projection."""
    x = _check_tokens(x, w.dim)
    scores = as_tensor(scores, ndim=3, name="scores")
    n = x.shape[0]
    if scores.shape != (w.head_count, n, n):
        raise DimensionError(f"scores shape {scores.shape} != {(w.head_count, n, n)}")
    v = split_heads(x @ w.w_v + w.b_v, w.head_count)
    mixed = merge_heads(np.matmul(scores, v))
    return mixed @ w.w_o + w.b_o


def compute_scores(
    mode: AttentionMode,
    x,
    w: AttentionWeights,
    grid: tuple[int, int] | None = None,
    borrowed: np.ndarray | None = None,
) -> np.ndarray:
    """Dispatch on ``mode`` and return the ``heads x n x n`` score stack."""
    x = _check_tokens(x, w.dim)
    heads = w.head_count
    n = x.shape[0]
    if isinstance(mode, Vanilla):
        return vanilla_scores(x, w)
    if isinstance(mode, CsaDual):
        return csa_dual_scores(x, w)
    if isinstance(mode, CsaSingle):
        if isinstance(mode.projection, str):
            if mode.projection == "q":
                return csa_scores(x, w.w_q, heads, bias=w.b_q)
            if mode.projection == "k":
                return csa_scores(x, w.w_k, heads, bias=w.b_k)
            return csa_scores(x, np.eye(w.dim, dtype=DTYPE), heads)
        return csa_scores(x, mode.projection, heads)
    if isinstance(mode, Identity):
        return np.broadcast_to(identity_scores(n - 1), (heads, n, n)).copy()
    if isinstance(mode, LocalWindow):
        if grid is None:
            raise ConfigError("local window attention needs the patch grid")
        return local_window_scores(x, w, mode.size, grid)
    if isinstance(mode, Sharpened):
        return sharpened_scores(x, w, mode.tau)
    if isinstance(mode, RandomEnsemble):
        return ensemble_scores(x, mode.n, mode.seed, heads)
    if isinstance(mode, EarlyBorrow):
        if borrowed is None:
            raise ConfigError("early-borrow attention needs the borrowed layer's scores")
        borrowed = as_tensor(borrowed, ndim=3, name="borrowed scores")
        if borrowed.shape != (heads, n, n):
            raise DimensionError(f"borrowed scores shape {borrowed.shape} != {(heads, n, n)}")
        return borrowed
    raise ConfigError(f"not an attention mode: {mode!r}")
