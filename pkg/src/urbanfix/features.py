"""Dense local descriptors over a fixed grid, plus a binary descriptor store.

Images are normalized to 400x300 grayscale, then described by a dense grid
of gradient-orientation histograms: 32x32 patches every 16 px, 4x4 spatial
cells of 8 orientation bins each, L2-normalized with the usual clamp at 0.2
and renormalize. No scale or rotation invariance: reference headings are
quantized to 30 degrees and queries are upright street photos, so geometric
verification absorbs the residual viewpoint change.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image, UnidentifiedImageError

NORMALIZED_WIDTH = 400
NORMALIZED_HEIGHT = 300
PATCH_SIZE = 32
PATCH_STRIDE = 16
CELL_SIZE = PATCH_SIZE // 4
ORIENTATION_BINS = 8
DESCRIPTOR_DIM = 128
CLAMP_THRESHOLD = 0.2
ENERGY_FLOOR = 1e-6

GRID_COLS = (NORMALIZED_WIDTH - PATCH_SIZE) // PATCH_STRIDE + 1
GRID_ROWS = (NORMALIZED_HEIGHT - PATCH_SIZE) // PATCH_STRIDE + 1

STORE_MAGIC = b"VLD1"
STORE_VERSION = 1
_STORE_HEADER = struct.Struct("<4sIIIII")
_RECORD_FLOATS = 2 + DESCRIPTOR_DIM


class ImageFormatError(ValueError):
    """The input image cannot be decoded or has the wrong shape."""


class DescriptorStoreError(ValueError):
    """Base class for descriptor-store format failures."""


class BadMagicError(DescriptorStoreError):
    """The file does not start with the descriptor-store magic bytes."""


class VersionMismatchError(DescriptorStoreError):
    """The file uses an unsupported store version."""


class TruncatedFileError(DescriptorStoreError):
    """The file ends before the declared record count is complete."""


@dataclass(frozen=True)
class Keypoint:
    """Patch center in image coordinates (x = column, y = row)."""

    x: float
    y: float


@dataclass(eq=False)
class DescriptorSet:
    """All descriptors extracted from one normalized image.

    keypoints is (N, 2) float32 of patch centers; vectors is (N, 128)
    float32 of unit-norm descriptors, ordered row-major by grid position.
    """

    image_id: str
    width: int
    height: int
    keypoints: np.ndarray
    vectors: np.ndarray

    def __len__(self) -> int:
        return len(self.vectors)

    def items(self):
        """Iterate (Keypoint, descriptor vector) pairs."""
        for (x, y), vec in zip(self.keypoints, self.vectors):
            yield Keypoint(float(x), float(y)), vec


def load_image(path: str | Path) -> np.ndarray:
    """Decode an image file to a uint8 array, grayscale or RGB."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            return np.asarray(im)
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageFormatError(f"cannot decode image {path}: {exc}") from exc


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    in_h, in_w = img.shape
    ys = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, in_h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, in_w - 1)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = img[y0][:, x0] * (1.0 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1.0 - wx) + img[y1][:, x1] * wx
    return top * (1.0 - wy) + bot * wy


def normalize_image(image: np.ndarray) -> np.ndarray:
    """Convert any 8-bit image to 400x300 float32 grayscale.

    Color inputs are reduced with the luma weights 0.299R + 0.587G + 0.114B,
    then bilinearly resized to exactly 400 wide by 300 high regardless of
    aspect ratio. An input that is already 400x300 grayscale passes through
    pixel-identical.
    """
    arr = np.asarray(image)
    if arr.size == 0:
        raise ImageFormatError(f"empty image of shape {arr.shape}")
    if arr.ndim == 3:
        if arr.shape[2] != 3:
            raise ImageFormatError(f"expected 1 or 3 channels, got shape {arr.shape}")
        arr = 0.299 * arr[..., 0] + 0.587 * arr[..., 1] + 0.114 * arr[..., 2]
    elif arr.ndim != 2:
        raise ImageFormatError(f"expected a 2-D or 3-D image, got shape {arr.shape}")
    arr = arr.astype(np.float64)
    if arr.shape == (NORMALIZED_HEIGHT, NORMALIZED_WIDTH):
        return arr.astype(np.float32)
    return _resize_bilinear(arr, NORMALIZED_HEIGHT, NORMALIZED_WIDTH).astype(np.float32)


def _patch_histograms(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Raw per-patch histograms before any normalization.

    Returns (raw, energy): raw is (GRID_ROWS, GRID_COLS, 128) of magnitude-
    weighted orientation votes, energy is (GRID_ROWS, GRID_COLS) of summed
    squared gradient magnitude per patch.
    """
    img = image.astype(np.float64)
    gy, gx = np.gradient(img)
    mag = np.hypot(gx, gy)
    energy = gx * gx + gy * gy
    # Bilinear orientation vote: angle in units of 45-degree bins, bin 0
    # centered at 0 degrees, split between the two nearest bins by magnitude.
    f = (np.degrees(np.arctan2(gy, gx)) % 360.0) / 45.0
    b0 = np.floor(f).astype(np.int64) % ORIENTATION_BINS
    w1 = f - np.floor(f)
    b1 = (b0 + 1) % ORIENTATION_BINS
    votes = np.zeros((*img.shape, ORIENTATION_BINS))
    for b in range(ORIENTATION_BINS):
        votes[..., b] = mag * ((b0 == b) * (1.0 - w1) + (b1 == b) * w1)

    # Patch origins are multiples of the stride and cells are stride/2, so
    # every cell aligns with the global 8x8 block grid; sum blocks once and
    # assemble each patch from a 4x4 window of blocks.
    bh = img.shape[0] // CELL_SIZE
    bw = img.shape[1] // CELL_SIZE
    blocks = (
        votes[: bh * CELL_SIZE, : bw * CELL_SIZE]
        .reshape(bh, CELL_SIZE, bw, CELL_SIZE, ORIENTATION_BINS)
        .sum(axis=(1, 3))
    )
    eblocks = (
        energy[: bh * CELL_SIZE, : bw * CELL_SIZE]
        .reshape(bh, CELL_SIZE, bw, CELL_SIZE)
        .sum(axis=(1, 3))
    )
    win = sliding_window_view(blocks, (4, 4), axis=(0, 1))
    sel = win[: 2 * GRID_ROWS : 2, : 2 * GRID_COLS : 2]
    raw = sel.transpose(0, 1, 3, 4, 2).reshape(GRID_ROWS, GRID_COLS, DESCRIPTOR_DIM)
    ewin = sliding_window_view(eblocks, (4, 4), axis=(0, 1))
    patch_energy = ewin[: 2 * GRID_ROWS : 2, : 2 * GRID_COLS : 2].sum(axis=(2, 3))
    return raw, patch_energy


def extract_descriptors(image: np.ndarray, image_id: str = "") -> DescriptorSet:
    """Extract the dense descriptor grid from a normalized 400x300 image.

    Each 32x32 patch (stride 16) yields a 128-dim histogram of gradient
    orientations, L2-normalized, clamped at 0.2, and renormalized. Patches
    with total squared gradient energy below 1e-6 are dropped, so a
    constant image yields an empty set and a full-contrast image yields all
    408 grid positions.
    """
    arr = np.asarray(image)
    if arr.ndim != 2 or arr.shape != (NORMALIZED_HEIGHT, NORMALIZED_WIDTH):
        raise ImageFormatError(
            f"expected a {NORMALIZED_WIDTH}x{NORMALIZED_HEIGHT} grayscale image, "
            f"got shape {arr.shape}"
        )
    raw, energy = _patch_histograms(arr)
    flat = raw.reshape(-1, DESCRIPTOR_DIM)
    keep = energy.reshape(-1) >= ENERGY_FLOOR

    norms = np.linalg.norm(flat, axis=1, keepdims=True)
    keep &= norms[:, 0] > 0
    safe = np.where(norms > 0, norms, 1.0)
    clamped = np.minimum(flat / safe, CLAMP_THRESHOLD)
    renorm = np.linalg.norm(clamped, axis=1, keepdims=True)
    desc = clamped / np.where(renorm > 0, renorm, 1.0)

    cols, rows = np.meshgrid(np.arange(GRID_COLS), np.arange(GRID_ROWS))
    xs = (cols * PATCH_STRIDE + PATCH_SIZE / 2).reshape(-1)
    ys = (rows * PATCH_STRIDE + PATCH_SIZE / 2).reshape(-1)
    keypoints = np.stack([xs, ys], axis=1)[keep].astype(np.float32)
    return DescriptorSet(
        image_id=image_id,
        width=NORMALIZED_WIDTH,
        height=NORMALIZED_HEIGHT,
        keypoints=keypoints,
        vectors=desc[keep].astype(np.float32),
    )


def save_descriptors(dset: DescriptorSet, path: str | Path) -> None:
    """Write a DescriptorSet in the binary store format.

    Layout: magic "VLD1", then little-endian u32 version, count, dim, width,
    height, followed by count records of [f32 x, f32 y, 128 x f32].
    """
    count = len(dset)
    header = _STORE_HEADER.pack(
        STORE_MAGIC, STORE_VERSION, count, DESCRIPTOR_DIM, dset.width, dset.height
    )
    body = np.empty((count, _RECORD_FLOATS), dtype="<f4")
    body[:, 0:2] = dset.keypoints
    body[:, 2:] = dset.vectors
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(body.tobytes())


def load_descriptors(path: str | Path, image_id: str | None = None) -> DescriptorSet:
    """Read a DescriptorSet from the binary store format.

    image_id defaults to the file stem. Validates magic, version, and
    descriptor dimension; a short file raises TruncatedFileError.
    """
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _STORE_HEADER.size:
        raise TruncatedFileError(f"{path}: file shorter than the store header")
    magic, version, count, dim, width, height = _STORE_HEADER.unpack_from(data)
    if magic != STORE_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != STORE_VERSION:
        raise VersionMismatchError(f"{path}: unsupported version {version}")
    if dim != DESCRIPTOR_DIM:
        raise DescriptorStoreError(f"{path}: unsupported descriptor dimension {dim}")
    expected = count * _RECORD_FLOATS * 4
    body = data[_STORE_HEADER.size :]
    if len(body) < expected:
        raise TruncatedFileError(
            f"{path}: expected {expected} record bytes, found {len(body)}"
        )
    if len(body) > expected:
        raise DescriptorStoreError(f"{path}: {len(body) - expected} trailing bytes")
    records = np.frombuffer(body, dtype="<f4").reshape(count, _RECORD_FLOATS)
    return DescriptorSet(
        image_id=path.stem if image_id is None else image_id,
        width=width,
        height=height,
        keypoints=records[:, 0:2].copy(),
        vectors=records[:, 2:].copy(),
    )
