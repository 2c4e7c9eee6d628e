"""Volumetric containers, raster I/O and voxel-level preprocessing.

Arrays are indexed ``[x, y, z]``. On disk the raster is x-fastest, which is
Fortran order for such an array.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError, ShapeError

KINDS = ("intensity", "gradient", "sdm", "probability", "label")

SVOL_MAGIC = b"SVOL"
SVOL_VERSION = 1
_SVOL_HEADER = struct.Struct("<4sIIIIB")


@dataclass(frozen=True)
class Volume:
    """A 3D scalar grid tagged with what its values mean."""

    data: np.ndarray
    kind: str = "intensity"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown volume kind {self.kind!r}")
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ShapeError(f"volume must be 3D, got shape {data.shape}")
        if self.kind == "label":
            data = data.astype(np.uint8, copy=False)
        elif not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        data = data.view()
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def __getitem__(self, idx):
        return self.data[idx]


@dataclass(frozen=True)
class Sdm:
    volume: Volume
    source_label: int

    @property
    def data(self) -> np.ndarray:
        return self.volume.data


def as_array(v) -> np.ndarray:
    return v.data if isinstance(v, (Volume, Sdm)) else np.asarray(v)


# --------------------------------------------------------------------------
# SVOL raster format

def write_svol(path, volume: Volume) -> None:
    """Write ``volume`` as SVOL. Label volumes are stored as u8, all else f32."""
    data = as_array(volume)
    kind = volume.kind if isinstance(volume, Volume) else "intensity"
    if kind == "label":
        dtype_code, raw = 1, data.astype("<u1")
    else:
        dtype_code, raw = 0, data.astype("<f4")
    nx, ny, nz = data.shape
    with open(path, "wb") as fh:
        fh.write(_SVOL_HEADER.pack(SVOL_MAGIC, SVOL_VERSION, nx, ny, nz, dtype_code))
        fh.write(raw.tobytes(order="F"))


def read_svol(path, kind: str | None = None) -> Volume:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no such volume: {path}")
    buf = path.read_bytes()
    if len(buf) < _SVOL_HEADER.size:
        raise DataError(f"{path}: truncated SVOL header")
    magic, version, nx, ny, nz, dtype_code = _SVOL_HEADER.unpack_from(buf)
    if magic != SVOL_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != SVOL_VERSION:
        raise DataError(f"{path}: unsupported SVOL version {version}")
    if dtype_code not in (0, 1):
        raise DataError(f"{path}: unknown dtype code {dtype_code}")
    dtype = np.dtype("<f4") if dtype_code == 0 else np.dtype("<u1")
    n = nx * ny * nz
    payload = buf[_SVOL_HEADER.size:]
    if len(payload) != n * dtype.itemsize:
        raise DataError(f"{path}: payload size {len(payload)} does not match {nx}x{ny}x{nz}")
    data = np.frombuffer(payload, dtype=dtype).reshape((nx, ny, nz), order="F")
    if kind is None:
        kind = "label" if dtype_code == 1 else "intensity"
    if kind != "label":
        data = data.astype(np.float64)
    return Volume(np.ascontiguousarray(data), kind)


# --------------------------------------------------------------------------
# Gradients and patches

def gradient_magnitude(v) -> Volume:
    """Euclidean norm of central differences, mirrored at the borders."""
    data = np.asarray(as_array(v), dtype=np.float64)
    if data.ndim != 3 or min(data.shape) < 3:
        raise ShapeError(f"gradient needs at least 3 voxels per axis, got {data.shape}")
    padded = np.pad(data, 1, mode="reflect")
    inner = (slice(1, -1),) * 3
    sq = np.zeros_like(data)
    for axis in range(3):
        hi = list(inner)
        lo = list(inner)
        hi[axis] = slice(2, None)
        lo[axis] = slice(None, -2)
        d = 0.5 * (padded[tuple(hi)] - padded[tuple(lo)])
        sq += d * d
    return Volume(np.sqrt(sq), "gradient")


def _check_side(side: int) -> int:
    side = int(side)
    if side < 1 or side % 2 == 0:
        raise ConfigError(f"patch side must be a positive odd integer, got {side}")
    return side


def _reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    # whole-sample mirror about the first/last voxel; periodic with 2(n-1)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def extract_patches3(v, centers, side: int = 5) -> np.ndarray:
    """Cubic patches around many voxels at once, shape ``(n_centers, side**3)``.

    Samples are in raster order (x fastest) and mirror padded.
    """
    side = _check_side(side)
    data = as_array(v)
    centers = np.atleast_2d(np.asarray(centers, dtype=np.int64))
    r = side // 2
    off = np.arange(-r, r + 1)
    # raster order x-fastest: z outermost, x innermost
    oz, oy, ox = np.meshgrid(off, off, off, indexing="ij")
    ox, oy, oz = ox.ravel(), oy.ravel(), oz.ravel()
    xs = _reflect_index(centers[:, :1] + ox, data.shape[0])
    ys = _reflect_index(centers[:, 1:2] + oy, data.shape[1])
    zs = _reflect_index(centers[:, 2:3] + oz, data.shape[2])
    return data[xs, ys, zs]


def extract_patch3(v, center, side: int = 5) -> np.ndarray:
    """Raster-ordered ``side**3`` cube centered on ``center``."""
    return extract_patches3(v, [center], side)[0]


def extract_axial_patches(v, centers, size: int = 20) -> np.ndarray:
    """2D ``size x size`` patches in the xy plane through each center voxel.

    For even sizes the center sits at row/column ``size // 2``. Returned
    shape is ``(n_centers, size, size)`` indexed ``[x, y]``.
    """
    data = as_array(v)
    centers = np.atleast_2d(np.asarray(centers, dtype=np.int64))
    off = np.arange(size) - size // 2
    xs = _reflect_index(centers[:, 0, None, None] + off[None, :, None], data.shape[0])
    ys = _reflect_index(centers[:, 1, None, None] + off[None, None, :], data.shape[1])
    zs = np.broadcast_to(centers[:, 2, None, None], xs.shape[:1] + (size, size))
    xs = np.broadcast_to(xs, zs.shape)
    ys = np.broadcast_to(ys, zs.shape)
    return data[xs, ys, zs]


# --------------------------------------------------------------------------
# Signed distance maps

def distance_sentinel(dims) -> float:
    return float(sum(dims))


def signed_distance_map(labels, structure: int = 1) -> Sdm:
    """Signed Euclidean distance to the nearest voxel of the opposite class.

    Negative inside ``structure``, positive outside. A missing structure maps
    every voxel to ``+sum(dims)``; a structure filling the volume maps every
    voxel to ``-sum(dims)``.
    """
    lab = as_array(labels)
    if lab.size == 0:
        raise DataError("empty label volume")
    fg = lab == structure
    sentinel = distance_sentinel(lab.shape)
    if not fg.any():
        out = np.full(lab.shape, sentinel)
    elif fg.all():
        out = np.full(lab.shape, -sentinel)
    else:
        # edt(mask) gives, for True voxels, the distance to the nearest False
        out = ndimage.distance_transform_edt(~fg) - ndimage.distance_transform_edt(fg)
    return Sdm(Volume(out, "sdm"), int(structure))


# --------------------------------------------------------------------------
# Label fusion baseline and intensity normalisation

def majority_vote(label_maps) -> Volume:
    """Per-voxel modal label. Any tie for the top count resolves to 0."""
    maps = [as_array(m) for m in label_maps]
    if not maps:
        raise DataError("majority vote needs at least one label map")
    shape = maps[0].shape
    if any(m.shape != shape for m in maps):
        raise ShapeError("label maps have different dimensions")
    stack = np.stack(maps).astype(np.int64)
    if stack.min() < 0:
        raise DataError("labels must be non-negative")
    counts = np.stack([(stack == lab).sum(axis=0) for lab in range(int(stack.max()) + 1)])
    best = counts.max(axis=0)
    winner = counts.argmax(axis=0)
    tie = (counts == best).sum(axis=0) > 1
    winner[tie] = 0
    return Volume(winner.astype(np.uint8), "label")


def histogram_match(src, ref, n_quantiles: int = 256) -> Volume:
    """Map ``src`` intensities onto the distribution of ``ref``.

    Each source value is sent to the reference quantile at the value's
    mid-rank in ``src``; the reference quantile function is tabulated at
    ``n_quantiles`` levels and linearly interpolated.
    """
    s = np.asarray(as_array(src), dtype=np.float64)
    r = np.asarray(as_array(ref), dtype=np.float64)
    if s.size == 0 or r.size == 0:
        raise DataError("histogram matching needs non-empty volumes")
    if n_quantiles < 2:
        raise ConfigError("n_quantiles must be at least 2")
    levels = np.linspace(0.0, 1.0, n_quantiles)
    ref_q = np.quantile(r, levels)
    flat = np.sort(s.ravel())
    lo = np.searchsorted(flat, s.ravel(), side="left")
    hi = np.searchsorted(flat, s.ravel(), side="right")
    # mid-rank of each value's plateau, scaled onto [0, 1]
    rank = ((lo + hi - 1) / 2.0) / max(flat.size - 1, 1)
    if flat.size == 1:
        rank = np.full_like(rank, 0.5)
    out = np.interp(rank, levels, ref_q).reshape(s.shape)
    return Volume(out, "intensity")


# --------------------------------------------------------------------------
# Synthetic phantoms

@dataclass(frozen=True)
class _Blob:
    center: np.ndarray
    axes: np.ndarray  # 3x3, rows scaled principal directions (inverse radii)
    ripple: np.ndarray  # (n_terms, 4): wave vector (3) and phase


def _anatomy(shape, n_structures: int, anatomy_seed: int) -> list[_Blob]:
    rng = np.random.default_rng(anatomy_seed)
    dims = np.asarray(shape, dtype=np.float64)
    # centers spread along the longest diagonal so structures never touch
    blobs = []
    for k in range(n_structures):
        t = (k + 1) / (n_structures + 1)
        center = dims * (0.5 + (t - 0.5) * 0.8 * np.array([1.0, 1.0, 0.35]))
        center += rng.uniform(-1.0, 1.0, 3)
        spacing = 0.8 * np.linalg.norm(dims * np.array([1.0, 1.0, 0.35])) / (n_structures + 1)
        base_r = min(0.36 * spacing, 0.22 * dims.min())
        radii = base_r * rng.uniform(0.8, 1.15, 3)
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        axes = q / radii[:, None]
        n_terms = 3
        waves = rng.normal(size=(n_terms, 3))
        waves /= np.linalg.norm(waves, axis=1, keepdims=True)
        waves *= rng.uniform(1.5, 3.0, (n_terms, 1)) / base_r
        phases = rng.uniform(0, 2 * np.pi, (n_terms, 1))
        blobs.append(_Blob(center, axes, np.hstack([waves, phases])))
    return blobs


def _level_set(blob: _Blob, pts: np.ndarray) -> np.ndarray:
    rel = pts - blob.center
    rho = np.linalg.norm(rel @ blob.axes.T, axis=-1)
    ripple = sum(np.sin(rel @ term[:3] + term[3]) for term in blob.ripple)
    return rho - 1.0 + 0.06 * ripple


def structure_means(n_structures: int) -> np.ndarray:
    """Mean intensity per label: background 0, structures spread over [0.5, 1]."""
    if n_structures == 1:
        return np.array([0.0, 0.75])
    return np.concatenate([[0.0], np.linspace(0.5, 1.0, n_structures)])


def generate_phantom(seed, n_structures: int = 2, noise_sigma: float = 0.05,
                     deform: float = 1.5, *, shape=(48, 48, 48), anatomy_seed: int = 0,
                     warp_smoothness: float = 6.0):
    """Synthetic intensity/label pair.

    ``anatomy_seed`` fixes the underlying blob geometry shared by every
    subject; ``seed`` drives the smooth warp (``deform`` is its peak
    displacement in voxels) and the additive Gaussian noise.

    Returns ``(intensity, labels)`` as :class:`Volume` objects.
    """
    if n_structures < 1:
        raise ConfigError("need at least one structure")
    if noise_sigma < 0 or deform < 0:
        raise ConfigError("noise_sigma and deform must be non-negative")
    shape = tuple(int(n) for n in shape)
    rng = np.random.default_rng(seed)
    grid = np.stack(np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape),
                                indexing="ij"), axis=-1)
    if deform > 0:
        disp = np.stack([ndimage.gaussian_filter(rng.normal(size=shape), warp_smoothness,
                                                 mode="wrap") for _ in range(3)], axis=-1)
        peak = np.abs(disp).max()
        if peak > 0:
            disp *= deform / peak
        grid = grid + disp
    labels = np.zeros(shape, dtype=np.uint8)
    for k, blob in enumerate(_anatomy(shape, n_structures, anatomy_seed), start=1):
        inside = (_level_set(blob, grid) < 0) & (labels == 0)
        labels[inside] = k
    intensity = structure_means(n_structures)[labels]
    if noise_sigma > 0:
        intensity = intensity + rng.normal(scale=noise_sigma, size=shape)
    return Volume(intensity, "intensity"), Volume(labels, "label")
