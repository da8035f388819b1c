"""Shared fixtures: the synthetic benchmark dataset and a trained container.

The heavyweight fixtures are session-scoped so the acceptance tests share one
dataset generation and one model build. Acceptance tests register a one-line
verdict per criterion; the terminal summary prints them all at the end of the
run so the pass/fail lines survive pytest's output capturing.
"""

from __future__ import annotations

import os
import time

import pytest
import torch

from compdet import data as datamod
from compdet.features import extract_features, load_image
from compdet.training import TrainConfig, build_container

ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    verdict = "PASS" if passed else "FAIL"
    line = f"ACCEPTANCE {number:2d}: {verdict} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def bench_root(tmp_path_factory):
    """Seed-pinned synthetic benchmark: 3 classes, 96x96 scenes, test cells
    L0/L0, L2/L2 and L3/L3 with 48 images each."""
    root = str(tmp_path_factory.mktemp("bench"))
    datamod.generate_dataset(
        root, n_classes=3, seed=0, canvas=96, scale=48,
        train_per_class=48, val_per_class=4, test_per_class=16,
        test_levels=[("L0", "L0"), ("L2", "L2"), ("L3", "L3")],
        n_background=16,
    )
    return root


@pytest.fixture(scope="session")
def bench_build(bench_root):
    """(container, samples, build seconds) for the default TrainConfig."""
    cfg = TrainConfig()
    t0 = time.time()
    container, samples = build_container(bench_root, cfg)
    return container, samples, time.time() - t0


@pytest.fixture(scope="session")
def bench_fmaps(bench_root, bench_build):
    container, _, _ = bench_build
    manifest = datamod.load_dataset(bench_root)
    fmaps = {}
    with torch.no_grad():
        for rec in manifest["test"]:
            image = load_image(os.path.join(bench_root, rec.path))
            fmaps[rec.image_id] = extract_features(image, container.backbone)
    return fmaps
