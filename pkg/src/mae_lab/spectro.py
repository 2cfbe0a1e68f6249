"""Spectrogram container, SPGM file I/O, patch tiling and patch normalization.

Patch order: patch ``i`` sits at frequency block ``i // cols`` and time block
``i % cols``, i.e. frequency varies slowest. Positional embeddings are indexed
in this order.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels

N_MELS = 128
PATCH_SIZE = 16
TARGET_FRAMES = 256
NORM_EPS = 1e-6

SPGM_MAGIC = b"SPGM"
SPGM_VERSION = 1
_MAX_EXTENT = 1 << 24


class SpectrogramFormatError(ValueError):
    pass


@dataclass
class Spectrogram:
    values: np.ndarray
    id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] == 0 or v.shape[1] == 0:
            raise ValueError(f"spectrogram must be a non-empty 2-D array, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("spectrogram values must be finite")
        self.values = v

    @property
    def n_mels(self):
        return self.values.shape[0]

    @property
    def n_frames(self):
        return self.values.shape[1]


@dataclass
class PatchGrid:
    patch_size: int
    rows: int
    cols: int
    patches: np.ndarray  # (rows*cols, patch_size**2)
    per_patch_mean: np.ndarray
    per_patch_var: np.ndarray

    @property
    def n_patches(self):
        return self.rows * self.cols


def write_spectrogram(spec, path):
    v = spec.values.astype("<f4")
    with open(path, "wb") as fh:
        fh.write(SPGM_MAGIC)
        fh.write(struct.pack("<III", SPGM_VERSION, spec.n_mels, spec.n_frames))
        fh.write(np.ascontiguousarray(v).tobytes())


def read_spectrogram(path, id=None):
    """Load an SPGM file. Values come back as float64 widened from float32."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 16:
        raise SpectrogramFormatError("truncated header")
    if buf[:4] != SPGM_MAGIC:
        raise SpectrogramFormatError(f"bad magic {buf[:4]!r}")
    version, n_mels, n_frames = struct.unpack_from("<III", buf, 4)
    if version != SPGM_VERSION:
        raise SpectrogramFormatError(f"unsupported SPGM version {version}")
    if n_mels == 0 or n_frames == 0 or n_mels > _MAX_EXTENT or n_frames > _MAX_EXTENT:
        raise SpectrogramFormatError(f"extent out of range: {n_mels}x{n_frames}")
    n = n_mels * n_frames
    if len(buf) - 16 < 4 * n:
        raise SpectrogramFormatError(f"truncated payload: need {4 * n} bytes, have {len(buf) - 16}")
    vals = np.frombuffer(buf, dtype="<f4", count=n, offset=16).astype(np.float64)
    return Spectrogram(vals.reshape(n_mels, n_frames), id=id if id is not None else str(path))


def crop_or_pad(spec, target_frames=TARGET_FRAMES):
    """Center-crop or right-pad (with the spectrogram minimum) to ``target_frames``."""
    if target_frames <= 0:
        raise ValueError("target_frames must be positive")
    v = spec.values
    t = v.shape[1]
    if t == target_frames:
        return spec
    if t > target_frames:
        start = (t - target_frames) // 2
        out = v[:, start:start + target_frames]
    else:
        out = np.full((v.shape[0], target_frames), v.min())
        out[:, :t] = v
    return Spectrogram(out.copy(), id=spec.id, meta=dict(spec.meta))


def tile(values, patch_size=PATCH_SIZE):
    """Cut a 2-D array into (n_patches, patch_size**2) with frequency-major order."""
    n_mels, n_frames = values.shape
    if n_mels % patch_size:
        raise ValueError(f"n_mels={n_mels} not divisible by patch_size={patch_size}")
    if n_frames < patch_size:
        raise ValueError(f"n_frames={n_frames} shorter than patch_size={patch_size}")
    rows, cols = n_mels // patch_size, n_frames // patch_size
    cropped = values[:, :cols * patch_size]
    blocks = cropped.reshape(rows, patch_size, cols, patch_size).transpose(0, 2, 1, 3)
    return np.ascontiguousarray(blocks.reshape(rows * cols, patch_size * patch_size)), rows, cols


def patchify(spec, patch_size=PATCH_SIZE):
    values = spec.values if isinstance(spec, Spectrogram) else np.asarray(spec, dtype=np.float64)
    patches, rows, cols = tile(values, patch_size)
    mean, var = kernels.patch_stats(patches)
    return PatchGrid(patch_size, rows, cols, patches, mean, np.maximum(var, 0.0))


def unpatchify(grid):
    """Inverse of patchify on the cropped region."""
    p = grid.patch_size
    blocks = grid.patches.reshape(grid.rows, grid.cols, p, p).transpose(0, 2, 1, 3)
    return blocks.reshape(grid.rows * p, grid.cols * p).copy()


def patch_normalize(patch, eps=NORM_EPS):
    """Standardize patch(es) by their own population mean and std.

    Accepts one patch (1-D) or a stack (..., K); statistics are taken over
    the last axis. Returns ``(normalized, mean, std)``.
    """
    x = np.asarray(patch, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty patch")
    mu = x.mean(axis=-1, keepdims=True)
    sd = np.sqrt(np.mean((x - mu) ** 2, axis=-1, keepdims=True))
    out = (x - mu) / (sd + eps)
    if x.ndim == 1:
        return out, float(mu[0]), float(sd[0])
    return out, mu[..., 0], sd[..., 0]


def patch_denormalize(normalized, mean, std, eps=NORM_EPS):
    mean = np.asarray(mean)[..., None] if np.ndim(mean) else mean
    std = np.asarray(std)[..., None] if np.ndim(std) else std
    return normalized * (std + eps) + mean
