"""Learned filter-level pruning masks.

Each prunable conv layer owns one importance score per output filter.
A binary mask is derived from the scores by global ranking: keep the
top fraction across all layers together, then repair any layer that
fell below its floor. The mask multiplies conv outputs channelwise in
the forward pass; scores receive a straight-through surrogate gradient
(gradient of the loss w.r.t. a per-channel multiplier, evaluated on the
unmasked pre-activation) so that disabled filters can still compete and
re-enter on later mask refreshes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ShapeError, channel_scale, conv2d, conv2d_raw


class MaskError(ValueError):
    """Raised when a mask request is infeasible or malformed."""


@dataclass(frozen=True)
class PruneConfig:
    """How much to keep and how low a layer may go.

    keep_ratio: fraction of all prunable filters to keep, in (0, 1].
    min_filters: per-layer floor; no layer's kept count drops below it.
    """
    keep_ratio: float
    min_filters: int = 1

    def __post_init__(self):
        if not 0.0 < self.keep_ratio <= 1.0:
            raise MaskError(f"keep_ratio must be in (0, 1], got {self.keep_ratio}")
        if self.min_filters < 0:
            raise MaskError(f"min_filters must be >= 0, got {self.min_filters}")


class ImportanceScores:
    """Per-layer float score vectors, keyed by layer id."""

    def __init__(self, layers: dict[int, np.ndarray]):
        self.layers = {lid: np.asarray(v, dtype=np.float64).copy()
                       for lid, v in layers.items()}
        for lid, v in self.layers.items():
            if v.ndim != 1 or v.size == 0:
                raise MaskError(f"layer {lid}: scores must be a non-empty vector")

    @classmethod
    def from_weights(cls, weights: dict[int, np.ndarray]) -> "ImportanceScores":
        """Initialize from kernel magnitudes: per-filter L1 norm, rescaled
        to unit mean within each layer so layers start on equal footing."""
        layers = {}
        for lid, w in weights.items():
            if w.ndim != 4:
                raise MaskError(f"layer {lid}: expected (K,K,Cin,Cout) kernel")
            l1 = np.abs(w).sum(axis=(0, 1, 2)).astype(np.float64)
            mean = l1.mean()
            layers[lid] = l1 / mean if mean > 0 else np.ones_like(l1)
        return cls(layers)

    def total_filters(self) -> int:
        return sum(v.size for v in self.layers.values())

    def copy(self) -> "ImportanceScores":
        return ImportanceScores(self.layers)


class FilterMask:
    """Per-layer boolean keep vectors, keyed by layer id."""

    def __init__(self, layers: dict[int, np.ndarray]):
        self.layers = {lid: np.asarray(v, dtype=bool).copy()
                       for lid, v in layers.items()}

    def kept_per_layer(self) -> dict[int, int]:
        return {lid: int(v.sum()) for lid, v in self.layers.items()}

    def kept_total(self) -> int:
        return sum(int(v.sum()) for v in self.layers.values())

    def hamming(self, other: "FilterMask") -> int:
        """Number of filters whose keep bit differs between the two masks."""
        if set(self.layers) != set(other.layers):
            raise MaskError("masks cover different layer sets")
        return sum(int((self.layers[lid] != other.layers[lid]).sum())
                   for lid in self.layers)

    def copy(self) -> "FilterMask":
        return FilterMask(self.layers)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FilterMask):
            return NotImplemented
        return set(self.layers) == set(other.layers) and \
            all(np.array_equal(self.layers[k], other.layers[k]) for k in self.layers)


def keep_count(keep_ratio: float, total: int) -> int:
    """Round half-up: floor(ratio * total + 0.5)."""
    return int(np.floor(keep_ratio * total + 0.5))


def build_mask(scores: ImportanceScores, config: PruneConfig) -> FilterMask:
    """Global top-k mask with per-layer floor repair.

    Filters from every layer are ranked together by score, descending,
    ties broken by (layer id, filter index) ascending, and the top
    keep_count are marked kept. While some layer holds fewer than
    min_filters kept, one exchange is made: that layer's best disabled
    filter is enabled and the weakest kept filter of any layer still
    strictly above the floor is disabled. The kept total never changes.
    """
    total = scores.total_filters()
    n_keep = keep_count(config.keep_ratio, total)
    floor_sum = sum(min(config.min_filters, v.size) for v in scores.layers.values())
    if n_keep < floor_sum:
        raise MaskError(f"cannot keep {n_keep} of {total} filters while "
                        f"honoring a floor of {config.min_filters} per layer")

    ranked = sorted(((lid, idx) for lid, v in scores.layers.items()
                     for idx in range(v.size)),
                    key=lambda e: (-scores.layers[e[0]][e[1]], e[0], e[1]))
    mask = {lid: np.zeros(v.size, dtype=bool) for lid, v in scores.layers.items()}
    for lid, idx in ranked[:n_keep]:
        mask[lid][idx] = True

    def floor_of(lid: int) -> int:
        return min(config.min_filters, mask[lid].size)

    while True:
        short = [lid for lid in sorted(mask) if mask[lid].sum() < floor_of(lid)]
        if not short:
            break
        lid = short[0]
        enable = max((i for i in range(mask[lid].size) if not mask[lid][i]),
                     key=lambda i: (scores.layers[lid][i], -i))
        # weakest kept filter among layers that can spare one
        donor = min(((dl, i) for dl, v in mask.items() if v.sum() > floor_of(dl)
                     for i in range(v.size) if v[i]),
                    key=lambda e: (scores.layers[e[0]][e[1]], -e[0], -e[1]))
        mask[lid][enable] = True
        mask[donor[0]][donor[1]] = False

    return FilterMask(mask)


def masked_conv2d(x: Tensor, w: Tensor, mask: np.ndarray,
                  stride: int = 1, padding: str = "same") -> tuple[Tensor, Tensor]:
    """Convolution with disabled output channels zeroed.

    Returns (pre, out): the raw conv output and its masked version. The
    raw tensor is what the surrogate score gradient needs, so callers
    keep both.
    """
    mask = np.asarray(mask)
    if mask.ndim != 1 or mask.shape[0] != w.shape[3]:
        raise ShapeError(f"mask length {mask.shape} does not match "
                         f"{w.shape[3]} output filters")
    pre = conv2d(x, w, stride=stride, padding=padding)
    out = channel_scale(pre, mask.astype(x.dtype))
    return pre, out


def surrogate_gamma_grad(dL_dY: np.ndarray, x: np.ndarray, w: np.ndarray,
                         stride: int = 1, padding: str = "same") -> np.ndarray:
    """Score gradient through the straight-through estimator.

    Treating the binary mask as a per-channel multiplier gamma on the
    raw conv output Y = gamma * (X conv W), the loss gradient is

        d loss / d gamma[n] = sum over batch and positions of
                              dL_dY[:, n] * (X conv W)[:, n]

    computed on the unmasked product, so a disabled filter still sees a
    meaningful gradient and can climb back above the keep threshold.
    """
    pre = conv2d_raw(x, w, stride=stride, padding=padding)
    if dL_dY.shape != pre.shape:
        raise ShapeError(f"upstream gradient shape {dL_dY.shape} does not "
                         f"match conv output {pre.shape}")
    return (dL_dY * pre).sum(axis=(0, 2, 3))
