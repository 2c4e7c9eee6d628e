"""Per-voxel augmented features: intensity cube, gradient cube and the
learned structural signature, plus the labelled atlas dictionary.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import cnn_signature as cnn
from .errors import ConfigError, DataError, DegenerateDataError, ShapeError
from .volume import (as_array, extract_axial_patches, extract_patches3, gradient_magnitude,
                     signed_distance_map)

PATCH_SIDE = 5
SEGMENT_LENGTHS = (125, 125, 18)
ROI_RADIUS = 4.0

FBNK_MAGIC = b"FBNK"
FBNK_VERSION = 1


@dataclass(frozen=True)
class AugmentedFeature:
    intensity: np.ndarray
    gradient: np.ndarray
    signature: np.ndarray
    origin: tuple[int, int, int, int]  # image id, x, y, z
    label: int | None = None

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.intensity, self.gradient, self.signature])

    @property
    def segment_lengths(self) -> tuple[int, int, int]:
        return (self.intensity.size, self.gradient.size, self.signature.size)


@dataclass(frozen=True)
class FeatureBank:
    """Column store of labelled atlas features.

    ``segments`` holds the intensity, gradient and signature blocks, each of
    shape ``(n_entries, n_j)``.
    """

    segments: tuple[np.ndarray, np.ndarray, np.ndarray]
    origins: np.ndarray  # (n, 4) int: image id, x, y, z
    labels: np.ndarray  # (n,) uint8

    def __post_init__(self):
        n = self.origins.shape[0]
        if any(s.shape[0] != n for s in self.segments) or self.labels.shape[0] != n:
            raise ShapeError("bank columns differ in length")

    def __len__(self) -> int:
        return int(self.labels.size)

    def __getitem__(self, i: int) -> AugmentedFeature:
        return AugmentedFeature(*(s[i] for s in self.segments),
                                origin=tuple(int(v) for v in self.origins[i]),
                                label=int(self.labels[i]))

    @property
    def segment_lengths(self) -> tuple[int, ...]:
        return tuple(s.shape[1] for s in self.segments)

    def matrix(self, entries) -> np.ndarray:
        """Augmented vectors of ``entries`` as columns, shape ``(268, m)``."""
        return np.hstack([s[entries] for s in self.segments]).T


def voxel_features(voxels, intensity, gradient, net, side: int = PATCH_SIDE):
    """Feature segments for many voxels of one image.

    Returns the three blocks ``(intensity, gradient, signature)``.
    """
    voxels = np.atleast_2d(np.asarray(voxels, dtype=np.int64))
    img = as_array(intensity)
    grad = as_array(gradient)
    if img.shape != grad.shape:
        raise ShapeError("intensity and gradient volumes differ in shape")
    f_int = extract_patches3(img, voxels, side)
    f_grad = extract_patches3(grad, voxels, side)
    sig, _ = cnn.forward_batch(net, extract_axial_patches(img, voxels, net.input_size))
    return f_int, f_grad, sig


def build_feature(voxel, intensity, gradient, net, image_id: int = -1,
                  label: int | None = None) -> AugmentedFeature:
    f_int, f_grad, sig = voxel_features([voxel], intensity, gradient, net)
    return AugmentedFeature(f_int[0], f_grad[0], sig[0],
                            (int(image_id),) + tuple(int(v) for v in voxel), label)


def roi_mask(labels, structure: int, radius: float = ROI_RADIUS) -> np.ndarray:
    """Voxels within ``radius`` of the structure boundary."""
    return np.abs(signed_distance_map(labels, structure).data) <= radius


def build_bank(atlases, structure: int, roi, net, side: int = PATCH_SIDE) -> FeatureBank:
    """One labelled entry per ROI voxel per atlas.

    ``atlases`` is a sequence of ``(intensity, labels)`` pairs; the entry
    label is 1 where the atlas label equals ``structure``.
    """
    atlases = list(atlases)
    if not atlases:
        raise DegenerateDataError("need at least one atlas")
    roi = np.asarray(roi, dtype=bool)
    voxels = np.argwhere(roi)
    if voxels.shape[0] == 0:
        raise DegenerateDataError("empty region of interest")
    blocks = ([], [], [])
    origins, labels = [], []
    for image_id, (img, lab) in enumerate(atlases):
        img_a, lab_a = as_array(img), as_array(lab)
        if img_a.shape != roi.shape or lab_a.shape != roi.shape:
            raise ShapeError("atlas and ROI differ in shape")
        grad = gradient_magnitude(img_a)
        for block, seg in zip(blocks, voxel_features(voxels, img_a, grad, net, side)):
            block.append(seg)
        origins.append(np.hstack([np.full((len(voxels), 1), image_id), voxels]))
        labels.append((lab_a[tuple(voxels.T)] == structure).astype(np.uint8))
    return FeatureBank(tuple(np.concatenate(b) for b in blocks),
                       np.concatenate(origins).astype(np.int64),
                       np.concatenate(labels))


# --------------------------------------------------------------------------
# FBNK cache files

_FBNK_HEADER = struct.Struct("<4sIIIII")


def save_bank(path, bank: FeatureBank) -> None:
    """Header, then origins (i32 x4), labels (u8), features (f64) per entry."""
    n = len(bank)
    with open(path, "wb") as fh:
        fh.write(_FBNK_HEADER.pack(FBNK_MAGIC, FBNK_VERSION, n, *bank.segment_lengths))
        fh.write(bank.origins.astype("<i4").tobytes())
        fh.write(bank.labels.astype("<u1").tobytes())
        fh.write(np.hstack(bank.segments).astype("<f8").tobytes())


def load_bank(path) -> FeatureBank:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no such bank file: {path}")
    buf = path.read_bytes()
    magic, version, n, *lengths = _FBNK_HEADER.unpack_from(buf)
    if magic != FBNK_MAGIC or version != FBNK_VERSION:
        raise DataError(f"{path}: not an FBNK v{FBNK_VERSION} file")
    pos = _FBNK_HEADER.size
    width = sum(lengths)
    expected = pos + n * (16 + 1 + 8 * width)
    if len(buf) != expected:
        raise DataError(f"{path}: size {len(buf)} != expected {expected}")
    origins = np.frombuffer(buf, "<i4", 4 * n, pos).reshape(n, 4).astype(np.int64)
    pos += 16 * n
    labels = np.frombuffer(buf, "<u1", n, pos).copy()
    pos += n
    feats = np.frombuffer(buf, "<f8", n * width, pos).reshape(n, width)
    cuts = np.cumsum(lengths)[:-1]
    return FeatureBank(tuple(np.ascontiguousarray(s) for s in np.split(feats, cuts, axis=1)),
                       origins, labels)
