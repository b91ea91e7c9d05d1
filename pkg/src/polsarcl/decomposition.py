"""Target-decomposition feature groups and the per-pixel feature cube.

Six groups are computed natively from the coherency matrix (28 features):
eigenvalue statistics (11), Freeman-Durden power splits (5), circular-basis
sphere/diplane/helix amplitudes (3), and three diagonal-power dichotomies
(Cloude, Huynen, Van Zyl; 3 each).  Further groups ingest from ".pftc"
feature-cube files so the group search can run over the full inventory.

Power features are reported in dB with a floor of -50 dB; angles in
degrees; ratios unitless.  A cube carries a feature-to-group index and an
active-feature mask: masked features read back as exactly 0 while the raw
values stay untouched underneath.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from ._util import atomic_write_bytes
from .sar import (
    CoherencyMatrix,
    CovarianceMatrix,
    PolSARImage,
    ScatteringMatrix,
    check_psd,
    coherency_to_covariance_raster,
    vec_to_mat,
)

__all__ = [
    "DB_FLOOR",
    "HAAlphaResult",
    "FeatureCube",
    "haalpha",
    "freeman",
    "krogager",
    "krogager_from_coherency",
    "diag_db_group",
    "assemble_cube",
    "NATIVE_GROUPS",
    "write_feature_cube",
    "read_feature_cube",
    "CUBE_MAGIC",
]

CUBE_MAGIC = b"PFTC"
DB_FLOOR = -50.0
_POWER_FLOOR = 10.0 ** (DB_FLOOR / 10.0)

# native group name -> feature count, in cube assembly order
NATIVE_GROUPS = (
    ("haalpha", 11),
    ("freeman", 5),
    ("krogager", 3),
    ("cloude", 3),
    ("huynen", 3),
    ("vanzyl", 3),
)


def _to_db(power: np.ndarray) -> np.ndarray:
    """Powers to dB, clamping at the -50 dB floor (zeros stay finite)."""
    return 10.0 * np.log10(np.clip(power, _POWER_FLOOR, None))


def _wrap_angle(a: np.ndarray) -> np.ndarray:
    return np.arctan2(np.sin(a), np.cos(a))


# -- eigenvalue decomposition --------------------------------------------------


@dataclass(frozen=True)
class HAAlphaResult:
    """Entropy/anisotropy/angle statistics of one coherency matrix.

    Angles are probability-weighted means in degrees; ``lam`` is the mean
    eigenvalue (a power); the four combinations pair entropy with
    anisotropy.
    """

    entropy: float
    anisotropy: float
    alpha: float
    beta: float
    delta: float
    gamma: float
    lam: float
    comb_ha: float
    comb_1mh_a: float
    comb_h_1ma: float
    comb_1mh_1ma: float


def _haalpha_batch(vec: np.ndarray) -> np.ndarray:
    """(N, 9) canonical vectors -> (N, 11) feature rows.

    Column order: alpha, anisotropy, beta, delta, entropy, gamma, lambda,
    HA, (1-H)A, H(1-A), (1-H)(1-A).
    """
    mats = vec_to_mat(vec)
    w, v = np.linalg.eigh(mats)
    w = np.clip(w[..., ::-1], 0.0, None)  # descending, clamped
    v = v[..., :, ::-1]
    total = w.sum(axis=-1)
    safe_total = np.where(total > 0, total, 1.0)
    p = w / safe_total[..., None]

    logp = np.zeros_like(p)
    np.log(p, out=logp, where=p > 0)
    entropy = -(p * logp).sum(axis=-1) / np.log(3.0)

    den = w[..., 1] + w[..., 2]
    anisotropy = np.where(den > 0, (w[..., 1] - w[..., 2]) / np.where(den > 0, den, 1.0), 0.0)

    e0 = v[..., 0, :]
    e1 = v[..., 1, :]
    e2 = v[..., 2, :]
    alpha_k = np.arccos(np.clip(np.abs(e0), 0.0, 1.0))
    phase = np.angle(e0)
    beta_k = np.arctan2(np.abs(e2), np.abs(e1))
    delta_k = _wrap_angle(np.angle(e1) - phase)
    gamma_k = _wrap_angle(np.angle(e2) - phase)

    deg = 180.0 / np.pi
    alpha = (p * alpha_k).sum(axis=-1) * deg
    beta = (p * beta_k).sum(axis=-1) * deg
    delta = (p * delta_k).sum(axis=-1) * deg
    gamma = (p * gamma_k).sum(axis=-1) * deg
    lam = (p * w).sum(axis=-1)

    h, a = entropy, anisotropy
    return np.stack(
        [
            alpha,
            a,
            beta,
            delta,
            h,
            gamma,
            lam,
            h * a,
            (1.0 - h) * a,
            h * (1.0 - a),
            (1.0 - h) * (1.0 - a),
        ],
        axis=-1,
    )


def haalpha(t: CoherencyMatrix) -> HAAlphaResult:
    """Eigenvalue statistics of a single PSD coherency matrix."""
    check_psd(t.values, what="coherency matrix")
    row = _haalpha_batch(t.values[None, :])[0]
    return HAAlphaResult(
        entropy=float(row[4]),
        anisotropy=float(row[1]),
        alpha=float(row[0]),
        beta=float(row[2]),
        delta=float(row[3]),
        gamma=float(row[5]),
        lam=float(row[6]),
        comb_ha=float(row[7]),
        comb_1mh_a=float(row[8]),
        comb_h_1ma=float(row[9]),
        comb_1mh_1ma=float(row[10]),
    )


# -- Freeman-Durden -----------------------------------------------------------


def _freeman_batch(cvec: np.ndarray) -> np.ndarray:
    """(N, 9) covariance vectors -> (N, 5) features.

    Column order: two-component (volume, ground) dB then three-component
    (odd, double, volume) dB.  The volume term is fixed by the cross-pol
    power; the remainder is split surface/double-bounce by the sign of the
    residual HH-VV correlation.
    """
    eps = 1e-30
    c11 = cvec[..., 0].copy()
    c22 = cvec[..., 1]
    c33 = cvec[..., 2].copy()
    c13r = cvec[..., 5].copy()
    c13i = cvec[..., 6].copy()
    span = cvec[..., 0] + c22 + cvec[..., 2]

    fv = 1.5 * c22
    c11 -= fv
    c33 -= fv
    c13r -= fv / 3.0

    all_volume = (c11 <= eps) | (c33 <= eps)

    # keep the remainder correlation physically realizable
    pow_c13 = c13r**2 + c13i**2
    limit = np.clip(c11 * c33, 0.0, None)
    over = (~all_volume) & (pow_c13 > limit)
    scale = np.where(over, np.sqrt(limit / np.maximum(pow_c13, eps)), 1.0)
    c13r *= scale
    c13i *= scale
    pow_c13 = c13r**2 + c13i**2

    odd_dominant = (~all_volume) & (c13r >= 0.0)
    den_odd = np.maximum(c11 + c33 + 2.0 * c13r, eps)
    fd_odd = (c11 * c33 - pow_c13) / den_odd
    fs_odd = c33 - fd_odd
    beta_sq = ((fd_odd + c13r) ** 2 + c13i**2) / np.maximum(fs_odd, eps) ** 2

    den_dbl = np.maximum(c11 + c33 - 2.0 * c13r, eps)
    fs_dbl = (c11 * c33 - pow_c13) / den_dbl
    fd_dbl = c33 - fs_dbl
    alpha_sq = ((fs_dbl - c13r) ** 2 + c13i**2) / np.maximum(fd_dbl, eps) ** 2

    # odd branch fixes alpha = -1 (so Pd = 2 fd); double branch fixes beta = 1
    ps = np.where(odd_dominant, fs_odd * (1.0 + beta_sq), 2.0 * fs_dbl)
    pd = np.where(odd_dominant, 2.0 * fd_odd, fd_dbl * (1.0 + alpha_sq))
    pv = 8.0 * fv / 3.0

    ps = np.where(all_volume, 0.0, np.clip(ps, 0.0, None))
    pd = np.where(all_volume, 0.0, np.clip(pd, 0.0, None))
    pv = np.where(all_volume, span, np.clip(pv, 0.0, None))

    pv2 = np.minimum(pv, span)
    ground = np.clip(span - pv2, 0.0, None)
    return np.stack([_to_db(pv2), _to_db(ground), _to_db(ps), _to_db(pd), _to_db(pv)], axis=-1)


def freeman(c: CovarianceMatrix) -> dict[str, float]:
    """Freeman-Durden power split of one covariance matrix (dB).

    Returns the three-component odd/double/volume powers and the
    two-component volume/ground variant.
    """
    check_psd(c.values, what="covariance matrix")
    row = _freeman_batch(c.values[None, :])[0]
    return {
        "volume2": float(row[0]),
        "ground": float(row[1]),
        "odd": float(row[2]),
        "double": float(row[3]),
        "volume": float(row[4]),
    }


# -- Krogager -----------------------------------------------------------------


def krogager(s: ScatteringMatrix) -> tuple[float, float, float]:
    """Sphere, diplane and helix amplitudes via the circular basis."""
    s_rr = (s.shh - s.svv) / 2.0 + 1j * s.shv
    s_ll = (s.svv - s.shh) / 2.0 + 1j * s.shv
    s_rl = 1j * (s.shh + s.svv) / 2.0
    k_s = abs(s_rl)
    k_d = min(abs(s_rr), abs(s_ll))
    k_h = abs(abs(s_rr) - abs(s_ll))
    return k_s, k_d, k_h


def _krogager_batch(vec: np.ndarray) -> np.ndarray:
    """(N, 9) coherency vectors -> (N, 3) amplitudes.

    Circular-basis channel powers in terms of the coherency entries:
    |S_RL|^2 = T11/2, |S_RR/LL|^2 = (T22 + T33)/2 +- Im T23.
    """
    t11 = np.clip(vec[..., 0], 0.0, None)
    t22 = vec[..., 1]
    t33 = vec[..., 2]
    im23 = vec[..., 8]
    base = (t22 + t33) / 2.0
    rr = np.sqrt(np.clip(base + im23, 0.0, None))
    ll = np.sqrt(np.clip(base - im23, 0.0, None))
    k_s = np.sqrt(t11 / 2.0)
    k_d = np.minimum(rr, ll)
    k_h = np.abs(rr - ll)
    return np.stack([k_s, k_d, k_h], axis=-1)


def krogager_from_coherency(t: CoherencyMatrix) -> tuple[float, float, float]:
    row = _krogager_batch(t.values[None, :])[0]
    return float(row[0]), float(row[1]), float(row[2])


# -- diagonal-power dichotomies ------------------------------------------------


def _cloude_batch(vec: np.ndarray) -> np.ndarray:
    """Dominant-eigenvector rank-1 reconstruction, diagonal powers in dB."""
    mats = vec_to_mat(vec)
    w, v = np.linalg.eigh(mats)
    lam1 = np.clip(w[..., -1], 0.0, None)
    e1 = v[..., :, -1]
    diag = lam1[..., None] * np.abs(e1) ** 2
    return _to_db(diag)


def _huynen_batch(vec: np.ndarray) -> np.ndarray:
    """Single-target dichotomy: reconstruct the pure target that preserves
    t11, t12 and t13; report its diagonal powers in dB."""
    t11 = np.clip(vec[..., 0], 0.0, None)
    p12 = vec[..., 3] ** 2 + vec[..., 4] ** 2
    p13 = vec[..., 5] ** 2 + vec[..., 6] ** 2
    safe = np.where(t11 > 0, t11, 1.0)
    t22 = np.where(t11 > 0, p12 / safe, 0.0)
    t33 = np.where(t11 > 0, p13 / safe, 0.0)
    return _to_db(np.stack([t11, t22, t33], axis=-1))


def _vanzyl_batch(vec: np.ndarray) -> np.ndarray:
    """Three-component eigen-split of the reflection-symmetric covariance."""
    eps = 1e-15
    cvec = coherency_to_covariance_raster(vec)
    hhhh = cvec[..., 0]
    hvhv = cvec[..., 1] / 2.0
    vvvv = cvec[..., 2]
    hhvv = cvec[..., 5] + 1j * cvec[..., 6]

    pow_hhvv = (hhvv * hhvv.conj()).real
    det = np.sqrt((hhhh - vvvv) ** 2 + 4.0 * pow_hhvv + eps)
    f1 = vvvv - hhhh + det
    f2 = vvvv - hhhh - det
    lam1 = 0.5 * (hhhh + vvvv + det)
    lam2 = 0.5 * (hhhh + vvvv - det)
    alpha = 2.0 * hhvv / (f1 + eps)
    beta = 2.0 * hhvv / (f2 + eps)
    omega1 = lam1 * f1**2 / (f1**2 + 4.0 * pow_hhvv + eps)
    omega2 = lam2 * f2**2 / (f2**2 + 4.0 * pow_hhvv + eps)

    a0a0 = omega1 * ((1.0 + alpha.real) ** 2 + alpha.imag**2)
    b0bp = omega1 * ((1.0 - alpha.real) ** 2 + alpha.imag**2)
    p_first = omega1 * (1.0 + (alpha * alpha.conj()).real)
    p_second = omega2 * (1.0 + (beta * beta.conj()).real)
    odd_first = a0a0 > b0bp
    ps = np.where(odd_first, p_first, p_second)
    pd = np.where(odd_first, p_second, p_first)
    pv = 2.0 * hvhv
    return _to_db(np.stack([np.clip(ps, 0, None), np.clip(pd, 0, None), np.clip(pv, 0, None)], axis=-1))


_DIAG_VARIANTS = {
    "cloude": _cloude_batch,
    "huynen": _huynen_batch,
    "vanzyl": _vanzyl_batch,
}


def diag_db_group(t: CoherencyMatrix, variant: str) -> tuple[float, float, float]:
    """Three diagonal powers (dB, floored at -50) for one dichotomy variant."""
    if variant not in _DIAG_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(_DIAG_VARIANTS)}")
    check_psd(t.values, what="coherency matrix")
    row = _DIAG_VARIANTS[variant](t.values[None, :])[0]
    return float(row[0]), float(row[1]), float(row[2])


def cloude_rank1_reconstruction(t: CoherencyMatrix) -> CoherencyMatrix:
    """The dominant rank-1 component lambda1 e1 e1^H of a coherency matrix."""
    w, v = np.linalg.eigh(t.to_matrix())
    lam1 = max(w[-1], 0.0)
    e1 = v[:, -1]
    return CoherencyMatrix.from_matrix(lam1 * np.outer(e1, e1.conj()))


# -- the feature cube -----------------------------------------------------------


@dataclass
class FeatureCube:
    """Per-pixel decomposition features with group structure and a mask.

    ``features`` is (H, W, F) raw values; ``group_index[f]`` maps feature f
    to its group id; ``active`` is the per-feature mask.  ``mean``/``std``
    are per-feature standardization statistics over all pixels, computed at
    assembly.  Masked features read back as exactly 0 through
    :meth:`values` and :meth:`standardized`; the raw array is untouched,
    so unmasking restores originals bit-exactly.
    """

    features: np.ndarray
    group_index: np.ndarray
    group_names: list[str]
    active: np.ndarray | None = None
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 3:
            raise ValueError("features must be (H, W, F)")
        if self.features.shape[0] < 1 or self.features.shape[1] < 1:
            raise ValueError("zero-area feature cube")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("non-finite feature values")
        f = self.features.shape[2]
        self.group_index = np.asarray(self.group_index, dtype=np.int16)
        if self.group_index.shape != (f,):
            raise ValueError("group_index must have one entry per feature")
        if len(set(self.group_names)) != len(self.group_names):
            raise ValueError("duplicate group names")
        g = len(self.group_names)
        present = np.unique(self.group_index)
        if g == 0 or present.min() < 0 or present.max() >= g or len(present) != g:
            raise ValueError("group_index must cover group ids 0..n_groups-1")
        if self.active is None:
            self.active = np.ones(f, dtype=bool)
        else:
            self.active = np.asarray(self.active, dtype=bool).reshape(f)
        if self.mean is None or self.std is None:
            flat = self.features.reshape(-1, f)
            self.mean = flat.mean(axis=0)
            std = flat.std(axis=0)
            self.std = np.where(std > 0, std, 1.0)

    @property
    def height(self) -> int:
        return self.features.shape[0]

    @property
    def width(self) -> int:
        return self.features.shape[1]

    @property
    def n_features(self) -> int:
        return self.features.shape[2]

    @property
    def n_groups(self) -> int:
        return len(self.group_names)

    def group_sizes(self) -> np.ndarray:
        return np.bincount(self.group_index, minlength=self.n_groups)

    def mask_for_groups(self, active_groups) -> np.ndarray:
        """Feature mask that keeps exactly the given group ids."""
        keep = np.zeros(self.n_groups, dtype=bool)
        keep[list(active_groups)] = True
        return keep[self.group_index]

    def set_active_groups(self, active_groups) -> None:
        self.active = self.mask_for_groups(active_groups)

    def active_group_ids(self) -> list[int]:
        return sorted(int(g) for g in np.unique(self.group_index[self.active]))

    def values(self) -> np.ndarray:
        """(H, W, F) features with masked entries reading exactly 0."""
        out = self.features.copy()
        out[..., ~self.active] = 0.0
        return out

    def standardized(self, apply_mask: bool = True) -> np.ndarray:
        """(H*W, F) z-scored features; masked entries are exactly 0."""
        flat = (self.features.reshape(-1, self.n_features) - self.mean) / self.std
        if apply_mask:
            flat[:, ~self.active] = 0.0
        return flat

    def active_vectors(self) -> np.ndarray:
        """(H*W, n_active) standardized vectors of only the active features."""
        flat = (self.features.reshape(-1, self.n_features) - self.mean) / self.std
        return np.ascontiguousarray(flat[:, self.active])


def assemble_cube(img: PolSARImage, extra: list[FeatureCube] | None = None) -> FeatureCube:
    """Compute the native feature groups and append ingested ones.

    Native order and sizes: eigenvalue statistics (11), Freeman (5),
    Krogager (3), Cloude (3), Huynen (3), Van Zyl (3).  Ingested cubes must
    match the image dimensions and bring previously unused group names.
    """
    flat = img.data.reshape(-1, 9)
    cvec = coherency_to_covariance_raster(flat)
    blocks = [
        _haalpha_batch(flat),
        _freeman_batch(cvec),
        _krogager_batch(flat),
        _cloude_batch(flat),
        _huynen_batch(flat),
        _vanzyl_batch(flat),
    ]
    names = [name for name, _ in NATIVE_GROUPS]
    for (name, size), block in zip(NATIVE_GROUPS, blocks):
        if block.shape[1] != size:
            raise AssertionError(f"group {name}: expected {size} features")
    group_index = np.concatenate(
        [np.full(size, gid, dtype=np.int16) for gid, (_, size) in enumerate(NATIVE_GROUPS)]
    )
    features = np.concatenate(blocks, axis=1)

    for cube in extra or []:
        if (cube.height, cube.width) != (img.height, img.width):
            raise ValueError(
                f"ingested cube is {cube.height}x{cube.width}, image is "
                f"{img.height}x{img.width}"
            )
        offset = len(names)
        for name in cube.group_names:
            if name in names:
                raise ValueError(f"duplicate group name {name!r}")
            names.append(name)
        group_index = np.concatenate([group_index, cube.group_index + offset])
        features = np.concatenate([features, cube.features.reshape(-1, cube.n_features)], axis=1)

    if not np.all(np.isfinite(features)):
        raise ValueError("non-finite feature values")
    return FeatureCube(
        features=features.reshape(img.height, img.width, -1),
        group_index=group_index,
        group_names=names,
    )


# -- feature cube file format -----------------------------------------------


def write_feature_cube(path: str, cube: FeatureCube) -> None:
    parts = [
        CUBE_MAGIC,
        struct.pack("<IIII", cube.height, cube.width, cube.n_features, cube.n_groups),
        cube.group_index.astype("<u2").tobytes(),
        struct.pack("<H", cube.n_groups),
    ]
    for name in cube.group_names:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
    parts.append(cube.features.reshape(-1, cube.n_features).astype("<f4").tobytes())
    atomic_write_bytes(path, b"".join(parts))


def read_feature_cube(path: str) -> FeatureCube:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CUBE_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}, expected {CUBE_MAGIC!r}")
    h, w, n_features, n_groups = struct.unpack("<IIII", raw[4:20])
    pos = 20
    group_index = np.frombuffer(raw, dtype="<u2", count=n_features, offset=pos).astype(np.int16)
    pos += 2 * n_features
    (count,) = struct.unpack("<H", raw[pos : pos + 2])
    pos += 2
    if count != n_groups:
        raise ValueError(f"{path}: name table has {count} entries, expected {n_groups}")
    names = []
    for _ in range(count):
        (nlen,) = struct.unpack("<H", raw[pos : pos + 2])
        pos += 2
        names.append(raw[pos : pos + nlen].decode("utf-8"))
        pos += nlen
    expected = pos + h * w * n_features * 4
    if len(raw) != expected:
        raise ValueError(f"{path}: truncated cube ({len(raw)} bytes, want {expected})")
    features = np.frombuffer(raw, dtype="<f4", offset=pos).reshape(h, w, n_features)
    return FeatureCube(
        features=features.astype(np.float64),
        group_index=group_index,
        group_names=names,
    )
