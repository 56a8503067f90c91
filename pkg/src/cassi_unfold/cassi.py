"""Dispersive coded-aperture imaging: the sensing operator and its files.

A scene is a spectral cube x(h, w, lam).  The instrument shifts band lam
rightward by ``d * lam`` pixels, multiplies every shifted band by the same
coded mask, and sums over bands onto a single detector plane of width
``W + d * (bands - 1)``.  Flattened, that is a fat sparse matrix Phi with
at most one nonzero per column, so Phi Phi^T is diagonal; its diagonal
``psi`` is what the reconstruction's closed-form data step consumes.

The structured operator (``forward_phi`` / ``adjoint_phi``) is the fast
path; ``build_explicit_phi`` materializes the same matrix sparsely so
small instances can be checked against dense linear algebra.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np
from scipy import sparse

__all__ = [
    "CassiError", "HsiCube", "Mask", "Measurement", "SensingOperator",
    "add_shot_noise", "adjoint_phi", "build_explicit_phi", "compute_psi",
    "forward_phi", "load_hsc", "save_hsc", "shift_cube", "unshift_cube",
    "verify_cap",
]

DEFAULT_VERIFY_CAP = 10 ** 6


class CassiError(ValueError):
    """Bad geometry, bad file, or an instance over the verification cap."""


def verify_cap() -> int:
    """Explicit-matrix size cap; DAUHST_VERIFY_CAP overrides the default."""
    raw = os.environ.get("DAUHST_VERIFY_CAP")
    if raw is None:
        return DEFAULT_VERIFY_CAP
    try:
        cap = int(raw)
    except ValueError:
        raise CassiError(f"DAUHST_VERIFY_CAP={raw!r} is not an integer")
    if cap <= 0:
        raise CassiError(f"DAUHST_VERIFY_CAP must be positive, got {cap}")
    return cap


class HsiCube:
    """Spectral cube, data indexed (h, w, lam)."""

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 3:
            raise CassiError(f"cube must be rank 3 (h, w, lam), "
                             f"got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise CassiError(f"cube dimensions must be positive: {arr.shape}")
        self.data = arr

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def bands(self) -> int:
        return self.data.shape[2]


class Mask:
    """Coded aperture, one transmission value per detector-plane pixel."""

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 2:
            raise CassiError(f"mask must be rank 2, got shape {arr.shape}")
        self.data = arr

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


class Measurement:
    """Single detector snapshot on the shifted plane (H x shifted width)."""

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 2:
            raise CassiError(f"measurement must be rank 2, "
                             f"got shape {arr.shape}")
        self.data = arr


class SensingOperator:
    """Immutable mask + dispersion geometry with cached psi.

    shifted_masks stacks M_lam (the mask placed at column offset d*lam,
    zero elsewhere) into an (H, shifted_width, bands) array, which makes
    forward/adjoint single vectorized expressions and doubles as the
    constant the differentiable reconstruction path multiplies by.
    """

    def __init__(self, mask: Mask, bands: int, shift_step: int):
        if bands < 1:
            raise CassiError(f"bands must be >= 1, got {bands}")
        if shift_step < 0:
            raise CassiError(f"shift step must be >= 0, got {shift_step}")
        self.mask = mask
        self.bands = int(bands)
        self.shift_step = int(shift_step)
        self.height = mask.height
        self.width = mask.width
        self.shifted_width = mask.width + shift_step * (bands - 1)
        stack = np.zeros((self.height, self.shifted_width, bands))
        for lam in range(bands):
            off = shift_step * lam
            stack[:, off:off + self.width, lam] = mask.data
        self.shifted_masks = stack
        self.shifted_masks.flags.writeable = False
        self.psi = compute_psi(self)
        self.psi.flags.writeable = False

    @property
    def n_pixels(self) -> int:
        return self.height * self.shifted_width

    @property
    def n_voxels(self) -> int:
        return self.n_pixels * self.bands


def shift_cube(cube: HsiCube, d: int) -> np.ndarray:
    """Place band lam at column offset d*lam on a widened plane."""
    if d < 0:
        raise CassiError(f"shift step must be >= 0, got {d}")
    H, W, L = cube.data.shape
    out = np.zeros((H, W + d * (L - 1), L))
    for lam in range(L):
        out[:, d * lam:d * lam + W, lam] = cube.data[:, :, lam]
    return out


def unshift_cube(shifted: np.ndarray, d: int, width: int) -> np.ndarray:
    """Crop each band of a shifted plane back to the original support."""
    H, Ws, L = shifted.shape
    if Ws != width + d * (L - 1):
        raise CassiError(
            f"shifted width {Ws} inconsistent with width {width}, "
            f"step {d}, bands {L}")
    out = np.empty((H, width, L))
    for lam in range(L):
        out[:, :, lam] = shifted[:, d * lam:d * lam + width, lam]
    return out


def forward_phi(op: SensingOperator, x: np.ndarray) -> np.ndarray:
    """y(h,w) = sum_lam M_lam(h,w) * x(h,w,lam) on the shifted plane."""
    x = np.asarray(x)
    want = (op.height, op.shifted_width, op.bands)
    if x.shape != want:
        raise CassiError(f"shifted cube shape {x.shape}, expected {want}")
    return (op.shifted_masks * x).sum(axis=2)


def adjoint_phi(op: SensingOperator, y: np.ndarray) -> np.ndarray:
    """out(h,w,lam) = M_lam(h,w) * y(h,w); the exact transpose of forward."""
    y = np.asarray(y)
    want = (op.height, op.shifted_width)
    if y.shape != want:
        raise CassiError(f"measurement shape {y.shape}, expected {want}")
    return op.shifted_masks * y[:, :, None]


def build_explicit_phi(op: SensingOperator) -> sparse.csr_matrix:
    """The flattened operator as a sparse matrix, for verification only.

    Row = pixel index h*shifted_width + w; column = voxel index
    (h*shifted_width + w)*bands + lam; entry = M_lam(h, w).  Every column
    holds at most one nonzero, which is what makes Phi Phi^T diagonal.
    """
    if op.n_voxels > verify_cap():
        raise CassiError(
            f"instance has {op.n_voxels} voxels, over the verification "
            f"cap {verify_cap()}; set DAUHST_VERIFY_CAP to raise it")
    H, Ws, L = op.height, op.shifted_width, op.bands
    h_idx, w_idx, l_idx = np.nonzero(op.shifted_masks)
    rows = h_idx * Ws + w_idx
    cols = rows * L + l_idx
    vals = op.shifted_masks[h_idx, w_idx, l_idx]
    return sparse.csr_matrix((vals, (rows, cols)),
                             shape=(op.n_pixels, op.n_voxels))


def compute_psi(op: SensingOperator) -> np.ndarray:
    """Diagonal of Phi Phi^T as an (H, shifted_width) map."""
    return (op.shifted_masks ** 2).sum(axis=2)


def add_shot_noise(y: np.ndarray, bits: int, seed: int) -> np.ndarray:
    """Photon-count noise at a given detector bit depth.

    The measurement is scaled so its peak hits 2^bits - 1, each pixel is
    replaced by a Poisson draw with that mean, and the scale is undone.
    The draw is seeded, so a (y, bits, seed) triple is reproducible.
    """
    y = np.asarray(y, dtype=np.float64)
    if bits < 1:
        raise CassiError(f"bit depth must be >= 1, got {bits}")
    if np.any(y < 0):
        raise CassiError("shot noise requires a non-negative measurement")
    peak = y.max()
    if peak == 0.0:
        return y.copy()
    full_scale = float(2 ** bits - 1)
    scale = full_scale / peak
    rng = np.random.default_rng(seed)
    counts = rng.poisson(y * scale)
    return counts / scale


# ----------------------------------------------------------------------
# HSC1 container: magic, u32 LE H W C, then H*W*C LE float32, (h, w, c)
# row-major.  Masks and measurements are C = 1.
# ----------------------------------------------------------------------

_HSC_MAGIC = b"HSC1"


def save_hsc(path: str, data: np.ndarray) -> None:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise CassiError(f"HSC1 stores rank-2 or rank-3 arrays, "
                         f"got rank {np.asarray(data).ndim}")
    H, W, C = arr.shape
    payload = _HSC_MAGIC + struct.pack("<3I", H, W, C) + \
        np.ascontiguousarray(arr, dtype="<f4").tobytes()
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_hsc(path: str) -> np.ndarray:
    """Returns (H, W) for C = 1 files, else (H, W, C), as float64."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _HSC_MAGIC:
        raise CassiError(f"{path}: bad magic {blob[:4]!r}, "
                         f"expected {_HSC_MAGIC!r}")
    if len(blob) < 16:
        raise CassiError(f"{path}: truncated header")
    H, W, C = struct.unpack_from("<3I", blob, 4)
    count = H * W * C
    if len(blob) != 16 + 4 * count:
        raise CassiError(
            f"{path}: payload is {len(blob) - 16} bytes, header promises "
            f"{4 * count}")
    arr = np.frombuffer(blob, dtype="<f4", count=count,
                        offset=16).reshape(H, W, C).astype(np.float64)
    return arr[:, :, 0] if C == 1 else arr
