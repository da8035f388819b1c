"""Model container serialization: exact round trips and corruption handling."""

from __future__ import annotations

import numpy as np
import pytest
import torch

from compdet.container import ModelContainer, load_container, save_container
from compdet.context import ContextDictionary
from compdet.errors import FormatError
from compdet.features import init_backbone, normalize_rows
from compdet.model import CORNER_ROLES, CompositionalModel, OccluderModel
from compdet.vmf import VmfDictionary


def _container(seed=0):
    rng = np.random.default_rng(seed)

    def unit(shape):
        return normalize_rows(torch.from_numpy(rng.normal(size=shape)))

    def simplex(shape):
        v = rng.random(shape) + 0.05
        return torch.from_numpy(v / v.sum(axis=-1, keepdims=True))

    models = {}
    for cid in (0, 1):
        for corner in CORNER_ROLES:
            models[(cid, corner)] = CompositionalModel(
                class_id=cid, corner=corner, A=simplex((2, 3, 3, 5)),
                chi=simplex((2, 3, 3, 5)), omega=0.35, rho=0.2)
    return ModelContainer(
        dictionary=VmfDictionary(mu=unit((5, 4)), sigma=7.5),
        context=ContextDictionary(centers=unit((3, 4)), threshold=0.8),
        occluder=OccluderModel(beta=simplex((2, 5))),
        backbone=init_backbone(channels=(3, 4, 4, 4), seed=seed),
        models=models,
    )


def test_round_trip_is_exact(tmp_path):
    container = _container()
    path = tmp_path / "m.cacn"
    save_container(container, path)
    loaded = load_container(path)
    assert torch.equal(loaded.dictionary.mu, container.dictionary.mu)
    assert loaded.dictionary.sigma == container.dictionary.sigma
    assert torch.equal(loaded.context.centers, container.context.centers)
    assert loaded.context.threshold == container.context.threshold
    assert torch.equal(loaded.occluder.beta, container.occluder.beta)
    for w0, w1 in zip(loaded.backbone.weights, container.backbone.weights):
        assert torch.equal(w0, w1)
    assert sorted(loaded.models) == sorted(container.models)
    for key, model in container.models.items():
        got = loaded.models[key]
        assert torch.equal(got.A, model.A)
        assert torch.equal(got.chi, model.chi)
        assert got.omega == model.omega and got.rho == model.rho
    assert loaded.class_ids() == [0, 1]
    assert sorted(loaded.by_class()[0]) == sorted(CORNER_ROLES)


def test_trainable_groups_cover_all_models():
    container = _container()
    groups = container.trainable_groups()
    assert len(groups["dictionary"]) == 1
    assert len(groups["backbone"]) == 6  # 3 weights + 3 biases
    assert len(groups["mixture"]) == 4   # 2 classes x (A, chi) for ct
    assert len(groups["corner"]) == 8    # 2 classes x 2 corners x (A, chi)


def test_load_rejects_corruption(tmp_path):
    container = _container()
    path = tmp_path / "m.cacn"
    save_container(container, path)
    blob = path.read_bytes()

    bad = tmp_path / "bad.cacn"
    bad.write_bytes(b"NOPE" + blob[4:])
    with pytest.raises(FormatError, match="magic"):
        load_container(bad)

    cut = tmp_path / "cut.cacn"
    cut.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(FormatError, match="truncated"):
        load_container(cut)
