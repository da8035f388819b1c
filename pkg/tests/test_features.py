"""Feature maps: normalization, the conv backbone, and serialization."""

from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from compdet.errors import DimensionError, FormatError, InputError
from compdet.features import (
    BackboneParams, FeatureMap, extract_features, init_backbone,
    load_feature_map, normalize_features, normalize_rows, save_feature_map,
    load_image, save_image,
)


def test_normalize_pythagorean():
    fmap = normalize_features(np.array([[[3.0, 4.0]]]))
    assert torch.allclose(fmap.values[0, 0],
                          torch.tensor([0.6, 0.8], dtype=torch.float64))


def test_normalize_unit_vector_unchanged():
    v = np.array([[[0.0, 1.0, 0.0]]])
    fmap = normalize_features(v)
    assert torch.equal(fmap.values, torch.from_numpy(v))


def test_normalize_zero_vector_becomes_e1():
    fmap = normalize_features(np.zeros((2, 2, 4)))
    e1 = torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=torch.float64)
    assert torch.equal(fmap.values[1, 1], e1)


@settings(deadline=None, max_examples=50)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 4), st.integers(1, 4),
       st.integers(1, 6))
def test_normalize_always_unit(seed, h, w, d):
    rng = np.random.default_rng(seed)
    raw = rng.normal(scale=rng.choice([1e-6, 1.0, 1e6]), size=(h, w, d))
    fmap = normalize_features(raw)
    norms = torch.linalg.vector_norm(fmap.values, dim=-1)
    assert float((norms - 1.0).abs().max()) <= 1e-6


def test_feature_map_validation():
    with pytest.raises(DimensionError):
        FeatureMap(values=torch.zeros((3, 3)))
    with pytest.raises(DimensionError):
        FeatureMap(values=torch.zeros((3, 3, 2)), stride=0)


def test_lattice_round_trip():
    fmap = normalize_features(np.ones((4, 5, 2)), stride=8, origin=0)
    assert fmap.cell_center(2, 3) == (24, 16)
    assert fmap.pixel_to_cell(24, 16) == (2, 3)
    assert fmap.pixel_to_cell(-50, 900) == (3, 0)  # clamped


def test_extract_constant_zero_image():
    backbone = init_backbone(seed=0)
    fmap = extract_features(np.zeros((32, 32, 3)), backbone)
    assert fmap.values.shape == (4, 4, 8)
    first = fmap.values[0, 0]
    # Constant input with padding breaks symmetry at borders only; the four
    # interior-free cells of a 32x32 input all match and are unit-norm.
    assert abs(float(torch.linalg.vector_norm(first)) - 1.0) <= 1e-6


def test_extract_deterministic():
    backbone = init_backbone(seed=3)
    image = np.random.default_rng(5).random((40, 40, 3))
    a = extract_features(image, backbone)
    b = extract_features(image, backbone)
    assert torch.equal(a.values, b.values)


def test_extract_matches_direct_convolution_oracle():
    """Straight-line reimplementation of the stack: pad 1, stride 2, tanh."""
    backbone = init_backbone(channels=(3, 4, 4, 5), seed=9)
    rng = np.random.default_rng(2)
    image = rng.random((64, 64, 3))
    fmap = extract_features(image, backbone)

    x = (image - 0.5).transpose(2, 0, 1)
    for layer, (w, b) in enumerate(zip(backbone.weights, backbone.biases)):
        w = w.numpy()
        b = b.numpy()
        c_in, h, wd = x.shape
        padded = np.zeros((c_in, h + 2, wd + 2))
        padded[:, 1:-1, 1:-1] = x
        h_out = (h + 2 - 3) // 2 + 1
        w_out = (wd + 2 - 3) // 2 + 1
        out = np.zeros((w.shape[0], h_out, w_out))
        for co in range(w.shape[0]):
            for i in range(h_out):
                for j in range(w_out):
                    patch = padded[:, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
                    out[co, i, j] = (patch * w[co]).sum() + b[co]
        x = np.tanh(out) if layer < len(backbone.weights) - 1 else out
    x = x.transpose(1, 2, 0)
    oracle = x / np.linalg.norm(x, axis=-1, keepdims=True)
    assert np.abs(fmap.values.numpy() - oracle).max() < 1e-12


def test_extract_rejects_bad_inputs():
    backbone = init_backbone(seed=0)
    with pytest.raises(DimensionError):
        extract_features(np.zeros((8, 8, 3)), backbone)  # below receptive field
    bad = np.zeros((32, 32, 3))
    bad[0, 0, 0] = np.nan
    with pytest.raises(InputError):
        extract_features(bad, backbone)
    with pytest.raises(DimensionError):
        extract_features(np.zeros((32, 32, 4)), backbone)


def test_backbone_descriptors():
    backbone = init_backbone(channels=(3, 12, 12, 8), seed=0)
    assert backbone.stride == 8
    assert backbone.receptive_field == 15
    assert backbone.depth == 8
    assert float(backbone.squared_norm()) > 0


def test_save_load_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(7)
    fmap = normalize_features(rng.normal(size=(5, 3, 4)), stride=4)
    path = tmp_path / "f.cafm"
    save_feature_map(fmap, path)
    loaded = load_feature_map(path)
    assert torch.equal(loaded.values, fmap.values)
    assert loaded.stride == 4 and loaded.origin == 0


def test_load_rejects_corrupt_files(tmp_path):
    fmap = normalize_features(np.ones((2, 2, 2)))
    path = tmp_path / "f.cafm"
    save_feature_map(fmap, path)
    blob = path.read_bytes()

    bad_magic = tmp_path / "m.cafm"
    bad_magic.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(FormatError, match="magic"):
        load_feature_map(bad_magic)

    truncated = tmp_path / "t.cafm"
    truncated.write_bytes(blob[:-5])
    with pytest.raises(FormatError, match="payload"):
        load_feature_map(truncated)

    short = tmp_path / "s.cafm"
    short.write_bytes(blob[:10])
    with pytest.raises(FormatError, match="header"):
        load_feature_map(short)


def test_image_round_trip(tmp_path):
    image = np.random.default_rng(1).random((16, 16, 3))
    path = tmp_path / "x.png"
    save_image(image, path)
    loaded = load_image(path)
    assert loaded.shape == (16, 16, 3)
    assert np.abs(loaded - image).max() <= 0.5 / 255.0 + 1e-12
