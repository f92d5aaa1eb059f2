"""Zero-shot matching of dense patch features against class text embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, DimensionError
from .tensor import as_tensor, l2_normalize_rows
from .vit import DenseFeatures

BACKGROUND_NAME = "background"


@dataclass(frozen=True, eq=False)
class ClassEmbeddingSet:
    """``C`` named class embeddings, unit-normalised on construction.

    The background class, when present, is an ordinary class with its own
    embedding at index 0; ``has_background`` defaults to whether the first
    name is ``"background"``.
    """

    names: tuple[str, ...]
    embeds: np.ndarray
    has_background: bool | None = None

    def __post_init__(self):
        names = tuple(self.names)
        embeds = as_tensor(self.embeds, ndim=2, name="class_embeds")
        if len(names) < 2:
            raise DataError(f"need at least 2 classes, got {len(names)}")
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise DataError(f"duplicate class names: {', '.join(dupes)}")
        if embeds.shape[0] != len(names):
            raise DimensionError(f"{len(names)} class names but {embeds.shape[0]} embeddings")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "embeds", l2_normalize_rows(embeds))
        if self.has_background is None:
            object.__setattr__(self, "has_background", names[0] == BACKGROUND_NAME)

    def __len__(self) -> int:
        return len(self.names)

    @property
    def dim(self) -> int:
        return self.embeds.shape[1]


@dataclass(frozen=True, eq=False)
class DenseLogits:
    grid: tuple[int, int]
    logits: np.ndarray  # (rows*cols) x C

    def as_grid(self) -> np.ndarray:
        """Logits as a ``C x rows x cols`` map."""
        r, c = self.grid
        return np.ascontiguousarray(self.logits.T.reshape(-1, r, c))


def classify_dense(feats: DenseFeatures, classes: ClassEmbeddingSet) -> DenseLogits:
    """Cosine similarity between every patch feature and every class embedding."""
    f = as_tensor(feats.feats, ndim=2, name="dense features")
    if f.shape[1] != classes.dim:
        raise DimensionError(f"feature width {f.shape[1]} != class embedding width {classes.dim}")
    r, c = feats.grid
    if r * c != f.shape[0]:
        raise DimensionError(f"grid {r}x{c} does not match {f.shape[0]} feature rows")
    logits = l2_normalize_rows(f) @ classes.embeds.T
    return DenseLogits(grid=feats.grid, logits=logits)


def argmax_mask(logits: DenseLogits) -> np.ndarray:
    """Per-patch class index; ties go to the lowest index."""
    r, c = logits.grid
    return np.argmax(logits.logits, axis=1).reshape(r, c)
