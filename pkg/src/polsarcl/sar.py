"""Scattering-matrix algebra, speckle filtering and synthetic Wishart scenes.

Per-pixel second-order statistics are stored as 9 reals in the canonical
order ``[t11, t22, t33, Re t12, Im t12, Re t13, Im t13, Re t23, Im t23]``
(only the upper triangle of the Hermitian matrix is kept).  The same layout
is used for coherency (Pauli basis) and covariance (lexicographic basis)
matrices; :data:`PAULI_FROM_LEX` is the unitary change of basis between
them.

Raster I/O: ".pt3r" files hold the magic ``PT3R``, u32-LE height and width,
then ``height*width*9`` float32-LE values in canonical order, row-major.
".plbl" files hold ``PLBL``, u32 height, u32 width, then u16 labels
row-major with 0 meaning unlabeled.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from ._util import atomic_write_bytes

__all__ = [
    "ScatteringMatrix",
    "CoherencyMatrix",
    "CovarianceMatrix",
    "PolSARImage",
    "WishartClassSpec",
    "PAULI_FROM_LEX",
    "vec_to_mat",
    "mat_to_vec",
    "min_eigenvalues",
    "check_psd",
    "build_covariance",
    "build_coherency",
    "coherency_to_covariance",
    "covariance_to_coherency",
    "speckle_filter",
    "extract_patch",
    "PatchExtractor",
    "synthesize_wishart",
    "block_layout",
    "write_coherency_raster",
    "read_coherency_raster",
    "write_label_map",
    "read_label_map",
    "RASTER_MAGIC",
    "LABEL_MAGIC",
]

RASTER_MAGIC = b"PT3R"
LABEL_MAGIC = b"PLBL"

# Rows are the Pauli target vector expressed in the lexicographic basis
# h = [S_HH, sqrt(2) S_HV, S_VV]:  k_p = PAULI_FROM_LEX @ h.
PAULI_FROM_LEX = np.array(
    [
        [1.0 / np.sqrt(2.0), 0.0, 1.0 / np.sqrt(2.0)],
        [1.0 / np.sqrt(2.0), 0.0, -1.0 / np.sqrt(2.0)],
        [0.0, 1.0, 0.0],
    ],
    dtype=np.complex128,
)


# -- canonical 9-real representation ----------------------------------------


def vec_to_mat(vec: np.ndarray) -> np.ndarray:
    """Expand canonical 9-vectors (..., 9) into Hermitian (..., 3, 3)."""
    v = np.asarray(vec, dtype=np.float64)
    if v.shape[-1] != 9:
        raise ValueError(f"expected trailing axis of 9 reals, got {v.shape}")
    m = np.zeros(v.shape[:-1] + (3, 3), dtype=np.complex128)
    m[..., 0, 0] = v[..., 0]
    m[..., 1, 1] = v[..., 1]
    m[..., 2, 2] = v[..., 2]
    m[..., 0, 1] = v[..., 3] + 1j * v[..., 4]
    m[..., 0, 2] = v[..., 5] + 1j * v[..., 6]
    m[..., 1, 2] = v[..., 7] + 1j * v[..., 8]
    m[..., 1, 0] = np.conj(m[..., 0, 1])
    m[..., 2, 0] = np.conj(m[..., 0, 2])
    m[..., 2, 1] = np.conj(m[..., 1, 2])
    return m


def mat_to_vec(mat: np.ndarray) -> np.ndarray:
    """Collapse Hermitian (..., 3, 3) matrices into canonical 9-vectors."""
    m = np.asarray(mat)
    v = np.empty(m.shape[:-2] + (9,), dtype=np.float64)
    v[..., 0] = m[..., 0, 0].real
    v[..., 1] = m[..., 1, 1].real
    v[..., 2] = m[..., 2, 2].real
    v[..., 3] = m[..., 0, 1].real
    v[..., 4] = m[..., 0, 1].imag
    v[..., 5] = m[..., 0, 2].real
    v[..., 6] = m[..., 0, 2].imag
    v[..., 7] = m[..., 1, 2].real
    v[..., 8] = m[..., 1, 2].imag
    return v


def min_eigenvalues(vec: np.ndarray) -> np.ndarray:
    """Smallest eigenvalue of each canonical 9-vector matrix."""
    return np.linalg.eigvalsh(vec_to_mat(vec))[..., 0]


def check_psd(vec: np.ndarray, tol: float = 1e-9, what: str = "matrix") -> None:
    """Raise if any matrix has an eigenvalue below ``-tol * trace``."""
    v = np.asarray(vec, dtype=np.float64)
    trace = v[..., 0] + v[..., 1] + v[..., 2]
    lo = min_eigenvalues(v)
    bad = lo < -tol * np.maximum(trace, np.finfo(np.float64).tiny)
    if np.any(bad):
        raise ValueError(f"{what} is not positive semidefinite within tolerance")


# -- domain types ------------------------------------------------------------


@dataclass(frozen=True)
class ScatteringMatrix:
    """Complex 2x2 backscatter matrix (HH, HV, VH, VV)."""

    shh: complex
    shv: complex
    svh: complex
    svv: complex

    @classmethod
    def monostatic(cls, shh: complex, shv: complex, svv: complex) -> "ScatteringMatrix":
        return cls(shh, shv, shv, svv)

    @classmethod
    def from_components(cls, shh, shv, svh, svv, tol: float = 1e-9) -> "ScatteringMatrix":
        """Build from four channels, warning when reciprocity is violated."""
        scale = max(abs(shv), abs(svh), 1.0)
        if abs(shv - svh) > tol * scale:
            warnings.warn(
                "scattering matrix violates monostatic reciprocity (shv != svh)",
                stacklevel=2,
            )
        return cls(shh, shv, svh, svv)

    @property
    def span(self) -> float:
        return abs(self.shh) ** 2 + 2 * abs(self.shv) ** 2 + abs(self.svv) ** 2


@dataclass(frozen=True)
class CoherencyMatrix:
    """Pauli-basis second-order statistic; 9 reals in canonical order."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "values", np.asarray(self.values, dtype=np.float64).reshape(9)
        )

    @property
    def trace(self) -> float:
        return float(self.values[0] + self.values[1] + self.values[2])

    def to_matrix(self) -> np.ndarray:
        return vec_to_mat(self.values)

    @classmethod
    def from_matrix(cls, mat: np.ndarray) -> "CoherencyMatrix":
        return cls(mat_to_vec(mat))


@dataclass(frozen=True)
class CovarianceMatrix:
    """Lexicographic-basis second-order statistic; same layout as coherency."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "values", np.asarray(self.values, dtype=np.float64).reshape(9)
        )

    @property
    def trace(self) -> float:
        return float(self.values[0] + self.values[1] + self.values[2])

    def to_matrix(self) -> np.ndarray:
        return vec_to_mat(self.values)

    @classmethod
    def from_matrix(cls, mat: np.ndarray) -> "CovarianceMatrix":
        return cls(mat_to_vec(mat))


@dataclass
class PolSARImage:
    """Raster of per-pixel coherency matrices with an optional label map.

    ``data`` is (height, width, 9) in canonical order; ``labels`` is
    (height, width) integer with 0 meaning unlabeled.
    """

    data: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[-1] != 9:
            raise ValueError(f"image data must be (H, W, 9), got {self.data.shape}")
        if self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ValueError("image must be non-empty")
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.labels.shape != self.data.shape[:2]:
                raise ValueError(
                    f"label shape {self.labels.shape} != image {self.data.shape[:2]}"
                )
            if not np.issubdtype(self.labels.dtype, np.integer):
                raise ValueError("labels must be integers")
            if self.labels.min() < 0:
                raise ValueError("labels must be >= 0 (0 = unlabeled)")
            self.labels = self.labels.astype(np.int32)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def matrix_at(self, row: int, col: int) -> CoherencyMatrix:
        return CoherencyMatrix(self.data[row, col])

    def n_classes(self) -> int:
        return 0 if self.labels is None else int(self.labels.max())


@dataclass(frozen=True)
class WishartClassSpec:
    """Mean coherency matrix and look count for one synthetic class."""

    class_id: int
    sigma: np.ndarray
    looks: int = 4

    def __post_init__(self):
        sigma = np.asarray(self.sigma, dtype=np.complex128)
        if sigma.shape != (3, 3):
            raise ValueError("sigma must be 3x3")
        if not np.allclose(sigma, sigma.conj().T, atol=1e-12):
            raise ValueError("sigma must be Hermitian")
        trace = sigma.trace().real
        if np.linalg.eigvalsh(sigma).min() < -1e-9 * max(trace, 1e-300):
            raise ValueError("sigma must be positive semidefinite")
        if self.looks < 1:
            raise ValueError("looks must be >= 1")
        object.__setattr__(self, "sigma", sigma)


# -- matrix construction ----------------------------------------------------


def build_covariance(s: ScatteringMatrix) -> CovarianceMatrix:
    """Single-look covariance ``h h^H`` with ``h = [S_HH, sqrt2 S_HV, S_VV]``."""
    h = np.array([s.shh, np.sqrt(2.0) * s.shv, s.svv], dtype=np.complex128)
    return CovarianceMatrix.from_matrix(np.outer(h, h.conj()))


def build_coherency(s: ScatteringMatrix) -> CoherencyMatrix:
    """Single-look coherency ``k k^H`` with the Pauli target vector ``k``."""
    k = np.array(
        [
            (s.shh + s.svv) / np.sqrt(2.0),
            (s.shh - s.svv) / np.sqrt(2.0),
            np.sqrt(2.0) * s.shv,
        ],
        dtype=np.complex128,
    )
    return CoherencyMatrix.from_matrix(np.outer(k, k.conj()))


def coherency_to_covariance(t: CoherencyMatrix) -> CovarianceMatrix:
    """Unitary change of basis from Pauli to lexicographic."""
    check_psd(t.values, what="coherency matrix")
    n = PAULI_FROM_LEX
    return CovarianceMatrix.from_matrix(n.conj().T @ t.to_matrix() @ n)


def covariance_to_coherency(c: CovarianceMatrix) -> CoherencyMatrix:
    """Unitary change of basis from lexicographic to Pauli."""
    check_psd(c.values, what="covariance matrix")
    n = PAULI_FROM_LEX
    return CoherencyMatrix.from_matrix(n @ c.to_matrix() @ n.conj().T)


def coherency_to_covariance_raster(data: np.ndarray) -> np.ndarray:
    """Vectorized Pauli-to-lexicographic conversion of a (..., 9) raster."""
    n = PAULI_FROM_LEX
    mats = vec_to_mat(data)
    return mat_to_vec(np.einsum("ij,...jk,kl->...il", n.conj().T, mats, n))


# -- filtering and patches ---------------------------------------------------


def speckle_filter(img: PolSARImage, window: int) -> PolSARImage:
    """Boxcar mean of the coherency channels over an odd square window.

    Borders are mirror-padded (edge pixel not duplicated).  The mean of PSD
    matrices is PSD, so the output stays physical.  Labels pass through
    untouched.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd and positive, got {window}")
    if window == 1:
        return PolSARImage(img.data.copy(), img.labels)
    r = window // 2
    if min(img.height, img.width) <= r:
        raise ValueError(f"window {window} too large for {img.height}x{img.width} image")
    padded = np.pad(img.data, ((r, r), (r, r), (0, 0)), mode="reflect")
    win = np.lib.stride_tricks.sliding_window_view(padded, (window, window), axis=(0, 1))
    return PolSARImage(win.mean(axis=(-2, -1)), img.labels)


class PatchExtractor:
    """Extracts mirror-padded square patches; pads the raster once."""

    def __init__(self, img: PolSARImage, k: int):
        if k < 1 or k % 2 == 0:
            raise ValueError(f"patch size must be odd and positive, got {k}")
        r = k // 2
        if min(img.height, img.width) <= r:
            raise ValueError(f"patch size {k} too large for image")
        self.k = k
        self.height = img.height
        self.width = img.width
        padded = np.pad(img.data, ((r, r), (r, r), (0, 0)), mode="reflect")
        # (H, W, 9, k, k) windows; entry [r, c] is the patch centered at (r, c)
        self._windows = np.lib.stride_tricks.sliding_window_view(
            padded, (k, k), axis=(0, 1)
        )

    def patch(self, row: int, col: int) -> np.ndarray:
        """One (k, k, 9) patch centered at (row, col)."""
        if not (0 <= row < self.height and 0 <= col < self.width):
            raise IndexError(f"patch center ({row}, {col}) outside image")
        return np.ascontiguousarray(self._windows[row, col].transpose(1, 2, 0))

    def batch(self, rows: np.ndarray, cols: np.ndarray, dtype=np.float32) -> np.ndarray:
        """Stack of patches in network layout (B, 9, k, k)."""
        if np.any(rows < 0) or np.any(rows >= self.height) or np.any(cols < 0) or np.any(cols >= self.width):
            raise IndexError("patch center outside image")
        return self._windows[rows, cols].astype(dtype)


def extract_patch(img: PolSARImage, row: int, col: int, k: int) -> np.ndarray:
    """A (k, k, 9) patch centered at (row, col) with mirror-padded borders."""
    return PatchExtractor(img, k).patch(row, col)


# -- synthetic scenes ---------------------------------------------------------


def _hermitian_sqrt(sigma: np.ndarray) -> np.ndarray:
    """A matrix A with A A^H = sigma; Cholesky when possible."""
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(sigma)
        return v * np.sqrt(np.clip(w, 0.0, None))[None, :]


def synthesize_wishart(
    specs: list[WishartClassSpec], layout: np.ndarray, seed: int
) -> PolSARImage:
    """Draw per-pixel multilook coherency matrices from class-wise models.

    For a pixel of class ``c`` with ``L`` looks, ``T = (1/L) sum_l k_l k_l^H``
    where each ``k_l`` is circular complex Gaussian with covariance
    ``sigma_c``.  The label map is taken from ``layout``.  Output is
    bit-reproducible for a fixed seed.
    """
    layout = np.asarray(layout)
    if layout.ndim != 2:
        raise ValueError("layout must be a 2-D class map")
    by_id = {s.class_id: s for s in specs}
    if len(by_id) != len(specs):
        raise ValueError("duplicate class ids in specs")
    unknown = sorted(set(np.unique(layout).tolist()) - set(by_id))
    if unknown:
        raise ValueError(f"layout contains unknown class ids: {unknown}")

    rng = np.random.default_rng(seed)
    h, w = layout.shape
    data = np.zeros((h, w, 9), dtype=np.float64)
    for class_id in sorted(by_id):
        mask = layout == class_id
        n = int(mask.sum())
        if n == 0:
            continue
        spec = by_id[class_id]
        a = _hermitian_sqrt(spec.sigma)
        looks = spec.looks
        z = (
            rng.standard_normal((n, looks, 3)) + 1j * rng.standard_normal((n, looks, 3))
        ) / np.sqrt(2.0)
        k = z @ a.T
        t = np.einsum("nli,nlj->nij", k, k.conj()) / looks
        data[mask] = mat_to_vec(t)
    return PolSARImage(data, labels=layout.astype(np.int32))


def block_layout(
    height: int, width: int, n_classes: int, cell: int, seed: int
) -> np.ndarray:
    """Tile the frame with cell x cell blocks, each assigned a random class.

    Class ids are 1..n_classes and every class is guaranteed at least one
    block (requires enough blocks).
    """
    if n_classes < 1 or cell < 1:
        raise ValueError("need n_classes >= 1 and cell >= 1")
    rng = np.random.default_rng(seed)
    ny = -(-height // cell)
    nx = -(-width // cell)
    if ny * nx < n_classes:
        raise ValueError("not enough blocks to place every class")
    blocks = rng.integers(1, n_classes + 1, size=(ny, nx))
    # ensure every class appears
    flat = blocks.reshape(-1)
    missing = [c for c in range(1, n_classes + 1) if c not in flat]
    if missing:
        slots = rng.choice(flat.size, size=len(missing), replace=False)
        flat[slots] = missing
    layout = np.repeat(np.repeat(blocks, cell, axis=0), cell, axis=1)
    return layout[:height, :width].astype(np.int32)


# -- raster file formats -----------------------------------------------------


def write_coherency_raster(path: str, img: PolSARImage) -> None:
    header = RASTER_MAGIC + struct.pack("<II", img.height, img.width)
    body = img.data.astype("<f4").tobytes()
    atomic_write_bytes(path, header + body)


def read_coherency_raster(path: str) -> PolSARImage:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != RASTER_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}, expected {RASTER_MAGIC!r}")
    h, w = struct.unpack("<II", raw[4:12])
    expected = 12 + h * w * 9 * 4
    if len(raw) != expected:
        raise ValueError(f"{path}: truncated raster ({len(raw)} bytes, want {expected})")
    data = np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w, 9)
    return PolSARImage(data.astype(np.float64))


def write_label_map(path: str, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError("labels must be 2-D")
    if labels.min() < 0 or labels.max() > np.iinfo(np.uint16).max:
        raise ValueError("labels must fit in u16")
    h, w = labels.shape
    header = LABEL_MAGIC + struct.pack("<II", h, w)
    atomic_write_bytes(path, header + labels.astype("<u2").tobytes())


def read_label_map(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != LABEL_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}, expected {LABEL_MAGIC!r}")
    h, w = struct.unpack("<II", raw[4:12])
    expected = 12 + h * w * 2
    if len(raw) != expected:
        raise ValueError(f"{path}: truncated label map")
    return (
        np.frombuffer(raw, dtype="<u2", offset=12).reshape(h, w).astype(np.int32)
    )
