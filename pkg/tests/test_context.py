"""Context dictionary learning and context/object segmentation."""

from __future__ import annotations

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from compdet.boxes import BoundingBox
from compdet.context import (
    ContextDictionary, build_context_dictionary, max_cosine_similarity,
    segment_context,
)
from compdet.errors import CardinalityError, GeometryError, InputError
from compdet.features import FeatureMap, normalize_rows


def _unit(rng, shape):
    return normalize_rows(torch.from_numpy(rng.normal(size=shape)))


def _fmap(values, stride=8):
    return FeatureMap(values=values, stride=stride, origin=0)


def test_dictionary_validation():
    with pytest.raises(InputError):
        ContextDictionary(centers=torch.ones(3))
    with pytest.raises(InputError):
        ContextDictionary(centers=torch.eye(3, dtype=torch.float64), threshold=1.0)


def test_build_single_cluster_is_pooled_mean():
    rng = np.random.default_rng(0)
    base = np.array([0.0, 1.0, 0.0])
    values = normalize_rows(torch.from_numpy(
        base + 0.01 * rng.normal(size=(6, 6, 3))))
    fmap = _fmap(values)
    box = BoundingBox(8.0, 8.0, 24.0, 24.0)  # cells rows 1-3, cols 1-3 inside
    d = build_context_dictionary([(fmap, box)], 1, seed=0)
    outside = []
    for r in range(6):
        for c in range(6):
            x, y = c * 8, r * 8
            if not (8 <= x <= 24 and 8 <= y <= 24):
                outside.append(values[r, c])
    mean = torch.stack(outside).sum(dim=0)
    mean = mean / torch.linalg.vector_norm(mean)
    assert float(torch.linalg.vector_norm(d.centers[0] - mean)) < 1e-9


def test_build_box_covering_everything_fails():
    rng = np.random.default_rng(1)
    fmap = _fmap(_unit(rng, (4, 4, 3)))
    box = BoundingBox(-1.0, -1.0, 100.0, 100.0)
    with pytest.raises(CardinalityError):
        build_context_dictionary([(fmap, box)], 1, seed=0)


def test_build_two_texture_cluster_means():
    rng = np.random.default_rng(2)
    a_dir = np.array([1.0, 0.0, 0.0])
    b_dir = np.array([0.0, 0.0, 1.0])
    values = torch.zeros((6, 6, 3), dtype=torch.float64)
    for r in range(6):
        for c in range(6):
            d = a_dir if c < 3 else b_dir
            values[r, c] = torch.from_numpy(d + 0.01 * rng.normal(size=3))
    values = normalize_rows(values)
    fmap = _fmap(values)
    box = BoundingBox(16.0, 16.0, 24.0, 24.0)
    d = build_context_dictionary([(fmap, box)], 2, seed=3)
    for direction in (a_dir, b_dir):
        best = max(float(d.centers[q] @ torch.from_numpy(direction))
                   for q in range(2))
        assert math.acos(min(1.0, best)) < 0.1


def test_max_cosine_similarity_examples():
    centers = torch.eye(3, dtype=torch.float64)[:2]
    d = ContextDictionary(centers=centers, threshold=0.5)
    assert max_cosine_similarity(torch.tensor([1.0, 0.0, 0.0]), d) == pytest.approx(1.0)
    assert max_cosine_similarity(torch.tensor([0.0, 0.0, 1.0]), d) == pytest.approx(0.0)
    rng = np.random.default_rng(4)
    f = _unit(rng, (3,))
    oracle = max(float(centers[q] @ f) for q in range(2))
    assert max_cosine_similarity(f, d) == pytest.approx(oracle)
    with pytest.raises(InputError):
        max_cosine_similarity(torch.tensor([2.0, 0.0, 0.0]), d)


def test_segment_outside_box_is_always_context():
    rng = np.random.default_rng(5)
    fmap = _fmap(_unit(rng, (5, 5, 3)))
    box = BoundingBox(8.0, 8.0, 24.0, 24.0)
    d = ContextDictionary(centers=_unit(rng, (2, 3)), threshold=0.99)
    seg = segment_context(fmap, box, d)
    for r in range(5):
        for c in range(5):
            x, y = c * 8, r * 8
            if not (8 <= x <= 24 and 8 <= y <= 24):
                assert int(seg.pi[r, c]) == 1


def test_segment_impossible_threshold_marks_inside_as_object():
    rng = np.random.default_rng(6)
    fmap = _fmap(_unit(rng, (5, 5, 3)))
    box = BoundingBox(8.0, 8.0, 24.0, 24.0)
    d = ContextDictionary(centers=_unit(rng, (2, 3)), threshold=0.5)
    seg = segment_context(fmap, box, d, threshold=1.0 + 1e-9)
    for r in range(1, 4):
        for c in range(1, 4):
            assert int(seg.pi[r, c]) == 0


def test_segment_known_textures_recovers_object_mask():
    """Context centers match the background direction; object is orthogonal."""
    bg = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
    obj = torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64)
    values = bg.repeat(6, 6, 1).clone()
    values[2:4, 2:4] = obj
    fmap = _fmap(values)
    box = BoundingBox(16.0, 16.0, 24.0, 24.0)
    d = ContextDictionary(centers=bg.reshape(1, 3), threshold=0.9)
    seg = segment_context(fmap, box, d)
    for r in range(6):
        for c in range(6):
            expected = 0 if (2 <= r <= 3 and 2 <= c <= 3) else 1
            assert int(seg.pi[r, c]) == expected


def test_segment_invalid_box():
    rng = np.random.default_rng(7)
    fmap = _fmap(_unit(rng, (4, 4, 3)))
    d = ContextDictionary(centers=_unit(rng, (2, 3)))
    with pytest.raises(GeometryError):
        segment_context(fmap, BoundingBox(500.0, 500.0, 600.0, 600.0), d)


@settings(deadline=None, max_examples=30)
@given(st.integers(0, 2 ** 31 - 1),
       st.floats(-0.9, 0.9), st.floats(0.0, 0.09))
def test_segment_monotone_in_threshold(seed, lo, bump):
    """Raising the threshold never converts object cells to context."""
    rng = np.random.default_rng(seed)
    fmap = _fmap(_unit(rng, (5, 5, 3)))
    box = BoundingBox(8.0, 8.0, 24.0, 24.0)
    d = ContextDictionary(centers=_unit(rng, (3, 3)), threshold=0.5)
    low = segment_context(fmap, box, d, threshold=lo)
    high = segment_context(fmap, box, d, threshold=lo + bump)
    assert bool((high.pi <= low.pi).all())


def test_segment_deterministic():
    rng = np.random.default_rng(8)
    fmap = _fmap(_unit(rng, (5, 5, 3)))
    box = BoundingBox(8.0, 8.0, 24.0, 24.0)
    d = ContextDictionary(centers=_unit(rng, (2, 3)))
    a = segment_context(fmap, box, d)
    b = segment_context(fmap, box, d)
    assert torch.equal(a.pi, b.pi)
