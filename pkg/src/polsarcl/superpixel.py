"""SLIC superpixel segmentation defining contrastive sample scopes.

Cluster centers start on a regular grid sized from the requested count,
are nudged to the lowest-gradient pixel in a 3x3 neighborhood, and then
alternate windowed assignment and mean updates in a joint feature/space
metric.  The squared assignment distance is

    D^2 = d_feat^2 + (m / S)^2 * d_spatial^2

with S the grid spacing and m the compactness weight; each pixel's current
cluster always stays a candidate, which together with mean updates makes
the total energy non-increasing.  After the iterations, disconnected
fragments below a quarter of the mean superpixel size are merged into
their largest finalized neighbor; larger fragments become superpixels of
their own, so every final id is one 4-connected component.

The segmentation feature space is the three Pauli diagonal powers in dB,
z-scored (see :func:`pauli_features`).

Map files (".pspx"): magic ``PSPX``, u32-LE height, width and superpixel
count, then u32 ids row-major.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass

import numpy as np

from ._util import atomic_write_bytes
from .sar import PolSARImage

__all__ = [
    "SuperpixelMap",
    "default_k",
    "pauli_features",
    "slic",
    "assignment_energy",
    "write_superpixel_map",
    "read_superpixel_map",
    "SUPERPIXEL_MAGIC",
]

SUPERPIXEL_MAGIC = b"PSPX"


@dataclass
class SuperpixelMap:
    """Per-pixel superpixel ids plus per-superpixel centers and sizes."""

    labels: np.ndarray
    centers: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int32)
        if self.labels.ndim != 2:
            raise ValueError("labels must be 2-D")
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 2)
        self.counts = np.asarray(self.counts, dtype=np.int64).reshape(-1)
        k = self.n_superpixels
        if self.labels.min() < 0 or self.labels.max() >= k:
            raise ValueError("labels must be in 0..K'-1")
        if self.counts.sum() != self.labels.size:
            raise ValueError("member counts must cover every pixel exactly once")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def n_superpixels(self) -> int:
        return len(self.counts)

    def members(self) -> list[np.ndarray]:
        """Flat pixel indices per superpixel id (row-major order)."""
        flat = self.labels.ravel()
        order = np.argsort(flat, kind="stable")
        sorted_labels = flat[order]
        bounds = np.searchsorted(sorted_labels, np.arange(self.n_superpixels + 1))
        return [order[bounds[i] : bounds[i + 1]] for i in range(self.n_superpixels)]


def default_k(height: int, width: int) -> int:
    """Superpixel count for a roughly 30x30 target size (minimum 1)."""
    if height < 1 or width < 1:
        raise ValueError("dimensions must be positive")
    return max(1, int(np.floor(height * width / 900.0 + 0.5)))


def pauli_features(img: PolSARImage) -> np.ndarray:
    """Per-pixel 3-vector for segmentation: Pauli powers in dB, z-scored."""
    powers = np.clip(img.data[..., :3], 1e-10, None)
    db = 10.0 * np.log10(powers)
    flat = db.reshape(-1, 3)
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return (db - mean) / std


def _init_centers(h: int, w: int, k: int) -> tuple[np.ndarray, float]:
    """Grid centers (row, col floats) whose count best matches k."""
    spacing = np.sqrt(h * w / k)
    best = None
    for ny in {max(1, int(np.floor(h / spacing))), max(1, int(np.ceil(h / spacing)))}:
        for nx in {max(1, int(np.floor(w / spacing))), max(1, int(np.ceil(w / spacing)))}:
            score = (abs(ny * nx - k), ny * nx)
            if best is None or score < best[0]:
                best = (score, ny, nx)
    _, ny, nx = best
    rows = (np.arange(ny) + 0.5) * h / ny - 0.5
    cols = (np.arange(nx) + 0.5) * w / nx - 0.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return np.stack([rr.ravel(), cc.ravel()], axis=1), spacing


def _gradient_image(features: np.ndarray) -> np.ndarray:
    gr, gc = np.gradient(features, axis=(0, 1))
    return (gr**2).sum(axis=-1) + (gc**2).sum(axis=-1)


def _perturb_centers(centers: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Move each center to a strictly lower-gradient pixel in its 3x3 patch."""
    h, w = grad.shape
    out = centers.copy()
    for i, (r, c) in enumerate(centers):
        r0 = int(np.clip(np.floor(r + 0.5), 0, h - 1))
        c0 = int(np.clip(np.floor(c + 0.5), 0, w - 1))
        best_val = grad[r0, c0]
        best = None
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                rr, cc = r0 + dr, c0 + dc
                if 0 <= rr < h and 0 <= cc < w and grad[rr, cc] < best_val:
                    best_val = grad[rr, cc]
                    best = (rr, cc)
        if best is not None:
            out[i] = best
    return out


def _assign(
    features: np.ndarray,
    spatial: np.ndarray,
    feat_centers: np.ndarray,
    pos_centers: np.ndarray,
    labels: np.ndarray,
    spacing: float,
    ratio2: float,
) -> tuple[np.ndarray, np.ndarray]:
    """One windowed assignment sweep; returns (labels, squared distances).

    Deterministic: centers are visited in ascending id order and a pixel
    moves only on a strict improvement, so ties resolve to the lower id.
    The incoming assignment is seeded as a candidate so no pixel can get
    worse.
    """
    h, w, _ = features.shape
    dist = np.full((h, w), np.inf)
    assigned = labels >= 0
    if np.any(assigned):
        idx = labels[assigned]
        df = ((features[assigned] - feat_centers[idx]) ** 2).sum(axis=-1)
        ds = ((spatial[assigned] - pos_centers[idx]) ** 2).sum(axis=-1)
        dist[assigned] = df + ratio2 * ds
    new_labels = labels.copy()
    reach = int(np.ceil(spacing))
    for k, (cr, cc) in enumerate(pos_centers):
        r0 = max(0, int(np.floor(cr)) - reach)
        r1 = min(h, int(np.ceil(cr)) + reach + 1)
        c0 = max(0, int(np.floor(cc)) - reach)
        c1 = min(w, int(np.ceil(cc)) + reach + 1)
        if r0 >= r1 or c0 >= c1:
            continue
        fwin = features[r0:r1, c0:c1]
        swin = spatial[r0:r1, c0:c1]
        d = ((fwin - feat_centers[k]) ** 2).sum(axis=-1) + ratio2 * (
            (swin - pos_centers[k]) ** 2
        ).sum(axis=-1)
        win_dist = dist[r0:r1, c0:c1]
        better = d < win_dist
        win_dist[better] = d[better]
        new_labels[r0:r1, c0:c1][better] = k

    # pixels missed by every window fall back to a full search
    missed = new_labels < 0
    if np.any(missed):
        fm = features[missed]
        sm = spatial[missed]
        best_d = np.full(fm.shape[0], np.inf)
        best_k = np.zeros(fm.shape[0], dtype=np.int32)
        for k in range(len(pos_centers)):
            d = ((fm - feat_centers[k]) ** 2).sum(axis=-1) + ratio2 * (
                (sm - pos_centers[k]) ** 2
            ).sum(axis=-1)
            upd = d < best_d
            best_d[upd] = d[upd]
            best_k[upd] = k
        new_labels[missed] = best_k
        dist[missed] = best_d
    return new_labels, dist


def _update(features, spatial, labels, feat_centers, pos_centers):
    """Recompute centers as member means; empty clusters keep their spot."""
    k = len(pos_centers)
    flat_labels = labels.ravel()
    counts = np.bincount(flat_labels, minlength=k).astype(np.float64)
    nf = feat_centers.shape[1]
    fsum = np.zeros((k, nf))
    for j in range(nf):
        fsum[:, j] = np.bincount(flat_labels, weights=features[..., j].ravel(), minlength=k)
    ssum = np.zeros((k, 2))
    ssum[:, 0] = np.bincount(flat_labels, weights=spatial[..., 0].ravel(), minlength=k)
    ssum[:, 1] = np.bincount(flat_labels, weights=spatial[..., 1].ravel(), minlength=k)
    nonempty = counts > 0
    new_f = feat_centers.copy()
    new_p = pos_centers.copy()
    new_f[nonempty] = fsum[nonempty] / counts[nonempty, None]
    new_p[nonempty] = ssum[nonempty] / counts[nonempty, None]
    return new_f, new_p


def assignment_energy(
    features: np.ndarray,
    labels: np.ndarray,
    feat_centers: np.ndarray,
    pos_centers: np.ndarray,
    spacing: float,
    compactness: float,
) -> float:
    """Total squared joint distance of an assignment (the SLIC objective)."""
    h, w = labels.shape
    spatial = _spatial_grid(h, w)
    ratio2 = (compactness / spacing) ** 2
    idx = labels.ravel()
    df = ((features.reshape(-1, features.shape[-1]) - feat_centers[idx]) ** 2).sum(axis=-1)
    ds = ((spatial.reshape(-1, 2) - pos_centers[idx]) ** 2).sum(axis=-1)
    return float((df + ratio2 * ds).sum())


def _spatial_grid(h: int, w: int) -> np.ndarray:
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return np.stack([rr, cc], axis=-1)


def _connected_components(labels: np.ndarray):
    """4-connected components of equal-label pixels, in scan order."""
    h, w = labels.shape
    comp = -np.ones((h, w), dtype=np.int64)
    comps = []
    for r in range(h):
        for c in range(w):
            if comp[r, c] >= 0:
                continue
            cid = len(comps)
            lbl = labels[r, c]
            pixels = []
            queue = deque([(r, c)])
            comp[r, c] = cid
            while queue:
                pr, pc = queue.popleft()
                pixels.append((pr, pc))
                for nr, nc in ((pr - 1, pc), (pr + 1, pc), (pr, pc - 1), (pr, pc + 1)):
                    if 0 <= nr < h and 0 <= nc < w and comp[nr, nc] < 0 and labels[nr, nc] == lbl:
                        comp[nr, nc] = cid
                        queue.append((nr, nc))
            comps.append((lbl, pixels))
    return comp, comps


def _enforce_connectivity(labels: np.ndarray, min_size: int) -> np.ndarray:
    """Make every id one 4-connected component.

    The largest fragment of each id keeps it; fragments of at least
    ``min_size`` pixels become fresh ids; smaller ones merge into the
    largest already-finalized 4-adjacent region.  Ids are re-numbered
    densely in order of first appearance.
    """
    h, w = labels.shape
    comp_map, comps = _connected_components(labels)

    largest: dict[int, int] = {}
    for cid, (lbl, pixels) in enumerate(comps):
        if lbl not in largest or len(pixels) > len(comps[largest[lbl]][1]):
            largest[lbl] = cid

    final = -np.ones((h, w), dtype=np.int32)
    sizes: list[int] = []
    keep_ids = sorted(largest.values(), key=lambda cid: comps[cid][1][0])
    comp_final = {}
    for cid in keep_ids:
        fid = len(sizes)
        comp_final[cid] = fid
        for r, c in comps[cid][1]:
            final[r, c] = fid
        sizes.append(len(comps[cid][1]))

    pending = []
    for cid, (lbl, pixels) in enumerate(comps):
        if cid in comp_final:
            continue
        if len(pixels) >= min_size:
            fid = len(sizes)
            comp_final[cid] = fid
            for r, c in pixels:
                final[r, c] = fid
            sizes.append(len(pixels))
        else:
            pending.append(cid)

    while pending:
        remaining = []
        progressed = False
        for cid in pending:
            pixels = comps[cid][1]
            neighbors: set[int] = set()
            for r, c in pixels:
                for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                    if 0 <= nr < h and 0 <= nc < w and final[nr, nc] >= 0:
                        neighbors.add(int(final[nr, nc]))
            if not neighbors:
                remaining.append(cid)
                continue
            target = max(neighbors, key=lambda fid: (sizes[fid], -fid))
            for r, c in pixels:
                final[r, c] = target
            sizes[target] += len(pixels)
            progressed = True
        if remaining and not progressed:
            # isolated cluster of small fragments: promote the first
            cid = remaining.pop(0)
            fid = len(sizes)
            for r, c in comps[cid][1]:
                final[r, c] = fid
            sizes.append(len(comps[cid][1]))
        pending = remaining
    return final


def slic(
    features: np.ndarray,
    k: int,
    compactness: float = 10.0,
    iters: int = 10,
    return_energies: bool = False,
):
    """Segment a per-pixel feature image into about ``k`` superpixels.

    ``features`` is (H, W, C) and must be finite; ``compactness`` weighs
    spatial against feature distance (after any feature scaling the caller
    applied).  Returns a :class:`SuperpixelMap`, plus the per-sweep energy
    trace when ``return_energies`` is set.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 3:
        raise ValueError("features must be (H, W, C)")
    if not np.all(np.isfinite(features)):
        raise ValueError("features must be finite")
    h, w, _ = features.shape
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > h * w:
        raise ValueError(f"k={k} exceeds pixel count {h * w}")

    pos_centers, spacing = _init_centers(h, w, k)
    pos_centers = _perturb_centers(pos_centers, _gradient_image(features))
    spatial = _spatial_grid(h, w)
    ratio2 = (compactness / spacing) ** 2

    ri = np.clip(pos_centers[:, 0].astype(int), 0, h - 1)
    ci = np.clip(pos_centers[:, 1].astype(int), 0, w - 1)
    feat_centers = features[ri, ci].astype(np.float64)

    labels = -np.ones((h, w), dtype=np.int32)
    energies = []
    for _ in range(max(1, iters)):
        labels, dist = _assign(
            features, spatial, feat_centers, pos_centers, labels, spacing, ratio2
        )
        energies.append(float(dist.sum()))
        feat_centers, pos_centers = _update(
            features, spatial, labels, feat_centers, pos_centers
        )

    n_initial = len(np.unique(labels))
    min_size = max(1, (h * w // n_initial) // 4)
    final = _enforce_connectivity(labels, min_size)

    n_final = int(final.max()) + 1
    counts = np.bincount(final.ravel(), minlength=n_final)
    centers = np.zeros((n_final, 2))
    centers[:, 0] = np.bincount(final.ravel(), weights=spatial[..., 0].ravel(), minlength=n_final) / counts
    centers[:, 1] = np.bincount(final.ravel(), weights=spatial[..., 1].ravel(), minlength=n_final) / counts
    spmap = SuperpixelMap(labels=final, centers=centers, counts=counts)
    if return_energies:
        return spmap, energies
    return spmap


# -- map file format ---------------------------------------------------------


def write_superpixel_map(path: str, spmap: SuperpixelMap) -> None:
    header = SUPERPIXEL_MAGIC + struct.pack(
        "<III", spmap.height, spmap.width, spmap.n_superpixels
    )
    atomic_write_bytes(path, header + spmap.labels.astype("<u4").tobytes())


def read_superpixel_map(path: str) -> SuperpixelMap:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != SUPERPIXEL_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}, expected {SUPERPIXEL_MAGIC!r}")
    h, w, k = struct.unpack("<III", raw[4:16])
    expected = 16 + h * w * 4
    if len(raw) != expected:
        raise ValueError(f"{path}: truncated superpixel map")
    labels = np.frombuffer(raw, dtype="<u4", offset=16).reshape(h, w).astype(np.int32)
    if labels.max() >= k:
        raise ValueError(f"{path}: label {labels.max()} out of range for K'={k}")
    counts = np.bincount(labels.ravel(), minlength=k)
    if np.any(counts == 0):
        raise ValueError(f"{path}: empty superpixel ids present")
    spatial = _spatial_grid(h, w)
    centers = np.zeros((k, 2))
    centers[:, 0] = np.bincount(labels.ravel(), weights=spatial[..., 0].ravel(), minlength=k) / counts
    centers[:, 1] = np.bincount(labels.ravel(), weights=spatial[..., 1].ravel(), minlength=k) / counts
    return SuperpixelMap(labels=labels, centers=centers, counts=counts)
