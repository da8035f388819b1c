"""Unit-norm feature maps and the small convolutional backbone.

Every downstream module consumes H x W grids of unit-norm D-dimensional
feature vectors on a regular pixel lattice. The backbone is a 3-layer conv
stack (kernel 3, stride 2, padding 1 per layer, total stride 8) whose output
is L2-normalized per cell. The receptive-field center of output cell (r, c)
sits at pixel (stride * r + origin, stride * c + origin); with this stack the
origin is 0.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as tf
from PIL import Image

from .errors import DimensionError, FormatError, InputError

FEATURE_MAGIC = b"CAFM"
FEATURE_VERSION = 1


@dataclass(frozen=True)
class FeatureMap:
    """H x W grid of D-dimensional feature vectors plus lattice metadata."""

    values: torch.Tensor  # (H, W, D) float64
    stride: int = 8
    origin: int = 0

    def __post_init__(self):
        v = self.values
        if v.ndim != 3 or min(v.shape) < 1:
            raise DimensionError(f"feature grid must be H x W x D, got {tuple(v.shape)}")
        if self.stride < 1:
            raise DimensionError(f"stride must be >= 1, got {self.stride}")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def depth(self) -> int:
        return self.values.shape[2]

    def cell_center(self, row: int, col: int) -> tuple[float, float]:
        """Pixel (x, y) of the receptive-field center of a cell."""
        return (self.stride * col + self.origin, self.stride * row + self.origin)

    def pixel_to_cell(self, x: float, y: float) -> tuple[int, int]:
        """Nearest cell (row, col) for a pixel location, clamped to the grid."""
        col = int(round((x - self.origin) / self.stride))
        row = int(round((y - self.origin) / self.stride))
        return (min(max(row, 0), self.height - 1), min(max(col, 0), self.width - 1))


@dataclass
class BackboneParams:
    """Weights of the conv stack; immutable by convention after creation."""

    weights: list = field(default_factory=list)  # (out, in, 3, 3) float64 tensors
    biases: list = field(default_factory=list)   # (out,) float64 tensors

    @property
    def stride(self) -> int:
        return 2 ** len(self.weights)

    @property
    def origin(self) -> int:
        return 0

    @property
    def receptive_field(self) -> int:
        rf = 1
        for _ in self.weights:
            rf = 2 * rf + 1
        return rf

    @property
    def depth(self) -> int:
        return self.weights[-1].shape[0]

    def parameters(self) -> list:
        return list(self.weights) + list(self.biases)

    def squared_norm(self) -> torch.Tensor:
        total = torch.zeros((), dtype=torch.float64)
        for w in self.weights:
            total = total + (w * w).sum()
        for b in self.biases:
            total = total + (b * b).sum()
        return total


def init_backbone(channels=(3, 12, 12, 8), seed: int = 0) -> BackboneParams:
    """He-style random init, zero biases, deterministic per seed."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for c_in, c_out in zip(channels[:-1], channels[1:]):
        scale = np.sqrt(2.0 / (c_in * 9))
        w = rng.normal(0.0, scale, size=(c_out, c_in, 3, 3))
        weights.append(torch.from_numpy(w))
        biases.append(torch.zeros(c_out, dtype=torch.float64))
    return BackboneParams(weights=weights, biases=biases)


def normalize_features(raw, stride: int = 8, origin: int = 0) -> FeatureMap:
    """Normalize every cell vector to unit length; zero vectors map to e1."""
    if isinstance(raw, np.ndarray):
        raw = torch.from_numpy(np.ascontiguousarray(raw, dtype=np.float64))
    raw = raw.to(torch.float64)
    values = normalize_rows(raw)
    return FeatureMap(values=values, stride=stride, origin=origin)


def normalize_rows(raw: torch.Tensor) -> torch.Tensor:
    """Unit-normalize along the last axis; exact-zero vectors become e1."""
    norms = torch.linalg.vector_norm(raw, dim=-1, keepdim=True)
    zero = norms.squeeze(-1) == 0
    safe = torch.where(norms == 0, torch.ones_like(norms), norms)
    out = raw / safe
    if bool(zero.any()):
        e1 = torch.zeros(raw.shape[-1], dtype=raw.dtype)
        e1[0] = 1.0
        out = torch.where(zero.unsqueeze(-1), e1.expand_as(out), out)
    return out


def extract_features(image, params: BackboneParams) -> FeatureMap:
    """Run the conv stack on an RGB image in [0, 1] and unit-normalize cells."""
    if isinstance(image, np.ndarray):
        image = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float64))
    image = image.to(torch.float64)
    if image.ndim != 3 or image.shape[2] != params.weights[0].shape[1]:
        raise DimensionError(
            f"image must be H x W x {params.weights[0].shape[1]}, got {tuple(image.shape)}"
        )
    if not bool(torch.isfinite(image).all()):
        raise InputError("image contains non-finite pixels")
    rf = params.receptive_field
    if image.shape[0] < rf or image.shape[1] < rf:
        raise DimensionError(
            f"image {tuple(image.shape[:2])} smaller than the backbone "
            f"receptive field ({rf} px)"
        )
    # Center the input so feature directions spread over the sphere instead
    # of clustering around the all-positive mean direction.
    x = (image - 0.5).permute(2, 0, 1).unsqueeze(0)
    n = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        x = tf.conv2d(x, w, b, stride=2, padding=1)
        if i < n - 1:
            # tanh keeps hidden activations zero-centered, which keeps the
            # normalized output directions spread over the sphere instead of
            # collapsing into the cone around one mean direction.
            x = torch.tanh(x)
    values = normalize_rows(x.squeeze(0).permute(1, 2, 0))
    return FeatureMap(values=values, stride=params.stride, origin=params.origin)


def save_feature_map(fmap: FeatureMap, path) -> None:
    values = np.ascontiguousarray(fmap.values.detach().numpy(), dtype="<f8")
    header = FEATURE_MAGIC + struct.pack(
        "<HIIIII", FEATURE_VERSION, fmap.height, fmap.width, fmap.depth,
        fmap.stride, fmap.origin,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(values.tobytes())


def load_feature_map(path) -> FeatureMap:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != FEATURE_MAGIC:
        raise FormatError("magic: expected 'CAFM'")
    head_len = 4 + struct.calcsize("<HIIIII")
    if len(blob) < head_len:
        raise FormatError("header: truncated before dims")
    version, h, w, d, stride, origin = struct.unpack("<HIIIII", blob[4:head_len])
    if version != FEATURE_VERSION:
        raise FormatError(f"version: unsupported {version}")
    if min(h, w, d) < 1 or stride < 1:
        raise FormatError(f"dims: invalid (H={h}, W={w}, D={d}, stride={stride})")
    expected = h * w * d * 8
    payload = blob[head_len:]
    if len(payload) != expected:
        raise FormatError(
            f"payload: expected {expected} bytes for {h}x{w}x{d}, got {len(payload)}"
        )
    values = np.frombuffer(payload, dtype="<f8").reshape(h, w, d).copy()
    return FeatureMap(values=torch.from_numpy(values), stride=stride, origin=origin)


def load_image(path) -> np.ndarray:
    """Read a PNG or PPM image as an H x W x 3 float64 array in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr


def save_image(image: np.ndarray, path) -> None:
    """Write an H x W x 3 float array in [0, 1] as PNG or PPM (by extension)."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    out = (arr * 255.0).round().astype(np.uint8)
    Image.fromarray(out).save(path)
