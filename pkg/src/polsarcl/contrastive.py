"""Contrastive losses and the superpixel-aware batch sampler.

:func:`info_nce` is the classic one-positive softmax loss.
:func:`superpixel_info_nce` generalizes it: targets sharing the anchor's
superpixel (always including the anchor's own cross-view pair) sit in the
numerator together, everything else in the batch is a negative, and the
per-anchor loss carries a 1/(B-1) factor.  With one pixel per superpixel it
reduces to the classic loss scaled by 1/(B-1).

Sampling modes: ``superpixel`` draws one pixel from each of B distinct
superpixels; ``vanilla`` draws B distinct pixels and treats each as its own
instance; ``label-oracle`` draws labeled pixels and groups them by class
(the ablation that trades self-supervision for label leakage).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .superpixel import SuperpixelMap

__all__ = [
    "SamplingStrategy",
    "BatchSample",
    "BatchSampler",
    "info_nce",
    "superpixel_info_nce",
    "superpixel_info_nce_per_anchor",
    "sample_batch",
]

SAMPLING_MODES = ("superpixel", "vanilla", "label-oracle")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _check_unit(data: np.ndarray, name: str, tol: float = 1e-6) -> None:
    norms = np.linalg.norm(data, axis=-1)
    if np.any(np.abs(norms - 1.0) > tol):
        worst = float(np.abs(norms - 1.0).max())
        raise ValueError(f"{name} must be unit vectors (worst deviation {worst:.2e})")


def info_nce(q, k_pos, negatives, tau: float) -> Tensor:
    """Softmax contrastive loss for one anchor.

    ``q`` and ``k_pos`` are unit d-vectors, ``negatives`` a (n, d) stack of
    unit vectors (possibly empty).  Returns
    ``-log exp(q.k+/tau) / (exp(q.k+/tau) + sum_i exp(q.k_i/tau))``.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    q = _as_tensor(q)
    k_pos = _as_tensor(k_pos)
    _check_unit(q.data[None, :], "q")
    _check_unit(k_pos.data[None, :], "k_pos")
    inv_tau = 1.0 / tau
    e_pos = ((q * k_pos).sum() * inv_tau).exp()
    if not isinstance(negatives, Tensor):
        arr = np.asarray(negatives, dtype=np.float64)
        if arr.size == 0:
            arr = arr.reshape(0, q.data.shape[-1])
        negatives = Tensor(arr)
    if negatives.shape[0] == 0:
        denom = e_pos
    else:
        _check_unit(negatives.data, "negatives")
        logits = (negatives @ q.reshape(-1, 1)) * inv_tau
        denom = e_pos + logits.exp().sum()
    return -(e_pos / denom).log()


def superpixel_info_nce_per_anchor(anchors, targets, ids, tau: float) -> Tensor:
    """Per-anchor grouped contrastive losses, shape (B,).

    ``anchors`` and ``targets`` are (B, d) unit-vector stacks (typically the
    online and target network outputs for the same pixels), ``ids`` the
    grouping key (superpixel id, instance id, or class).  Entry i is

        -(1/(B-1)) log [sum_{j: ids_j = ids_i} e_ij / sum_j e_ij]

    with e_ij = exp(anchors_i . targets_j / tau); j = i always counts as a
    positive (the anchor's own cross-view pair).
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    q = _as_tensor(anchors)
    k = _as_tensor(targets)
    ids = np.asarray(ids)
    b = q.shape[0]
    if b < 2:
        raise ValueError("batch must have at least 2 members")
    if k.shape[0] != b or ids.shape != (b,):
        raise ValueError("anchors, targets and ids must agree on batch size")
    _check_unit(q.data, "anchors")
    _check_unit(k.data, "targets")
    pos_mask = (ids[:, None] == ids[None, :]).astype(q.data.dtype)
    exp_logits = ((q @ k.T) * (1.0 / tau)).exp()
    pos_sum = (exp_logits * Tensor(pos_mask)).sum(axis=1)
    all_sum = exp_logits.sum(axis=1)
    return (pos_sum / all_sum).log() * (-1.0 / (b - 1))


def superpixel_info_nce(anchors, targets, ids, tau: float) -> Tensor:
    """Batch loss: mean of the per-anchor grouped losses."""
    return superpixel_info_nce_per_anchor(anchors, targets, ids, tau).mean()


# -- batch sampling -----------------------------------------------------------


@dataclass(frozen=True)
class SamplingStrategy:
    """How pretraining batches are drawn and grouped."""

    mode: str = "superpixel"
    batch_size: int = 4096

    def __post_init__(self):
        if self.mode not in SAMPLING_MODES:
            raise ValueError(f"mode must be one of {SAMPLING_MODES}, got {self.mode!r}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")


@dataclass(frozen=True)
class BatchSample:
    rows: np.ndarray
    cols: np.ndarray
    ids: np.ndarray

    def __len__(self) -> int:
        return len(self.rows)


class BatchSampler:
    """Pre-indexes the eligible pixels of a map for repeated sampling."""

    def __init__(
        self,
        spmap: SuperpixelMap,
        mode: str = "superpixel",
        pool: np.ndarray | None = None,
        labels: np.ndarray | None = None,
    ):
        if mode not in SAMPLING_MODES:
            raise ValueError(f"mode must be one of {SAMPLING_MODES}, got {mode!r}")
        self.mode = mode
        self.shape = (spmap.height, spmap.width)
        n_pixels = spmap.height * spmap.width
        if pool is None:
            pool = np.ones(n_pixels, dtype=bool)
        else:
            pool = np.asarray(pool, dtype=bool).reshape(n_pixels)
        if mode == "superpixel":
            members = spmap.members()
            self.groups = [m[pool[m]] for m in members]
            self.group_ids = [i for i, g in enumerate(self.groups) if len(g)]
            self.capacity = len(self.group_ids)
        elif mode == "vanilla":
            self.flat_pool = np.flatnonzero(pool)
            self.capacity = len(self.flat_pool)
        else:  # label-oracle
            if labels is None:
                raise ValueError("label-oracle sampling needs a label map")
            labels = np.asarray(labels).reshape(n_pixels)
            self.flat_pool = np.flatnonzero(pool & (labels > 0))
            self.labels = labels
            self.capacity = len(self.flat_pool)

    def sample(self, b: int, rng: np.random.Generator) -> BatchSample:
        if b < 2:
            raise ValueError("batch size must be >= 2")
        if self.mode == "superpixel":
            if b > self.capacity:
                raise ValueError(
                    f"batch size {b} exceeds the {self.capacity} non-empty superpixels"
                )
            chosen = rng.choice(self.group_ids, size=b, replace=False)
            flat = np.empty(b, dtype=np.int64)
            for i, sp in enumerate(chosen):
                members = self.groups[sp]
                flat[i] = members[rng.integers(len(members))]
            ids = np.asarray(chosen)
        else:
            if b > self.capacity:
                raise ValueError(f"batch size {b} exceeds the pool of {self.capacity} pixels")
            flat = rng.choice(self.flat_pool, size=b, replace=False)
            ids = flat.copy() if self.mode == "vanilla" else self.labels[flat]
        rows, cols = np.unravel_index(flat, self.shape)
        return BatchSample(rows=rows, cols=cols, ids=ids)


def sample_batch(
    spmap: SuperpixelMap,
    strategy: SamplingStrategy,
    b: int,
    rng: np.random.Generator,
    pool: np.ndarray | None = None,
    labels: np.ndarray | None = None,
) -> BatchSample:
    """Draw one batch of pixel coordinates plus grouping ids."""
    return BatchSampler(spmap, strategy.mode, pool=pool, labels=labels).sample(b, rng)
