"""Loss terms, response maps, end-to-end training and gradient verification.

Hard-EM style: the discrete variables inferred in the forward pass (best
mixture, per-position occlusion switch, context assignment) are treated as
constants during differentiation. Simplex and unit-norm constraints are
re-established by projection after every optimizer step.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, fields

import numpy as np
import torch

from .boxes import BoundingBox
from .container import ModelContainer
from .context import ContextDictionary, build_context_dictionary, segment_context
from .detection import scan_mixture_stack
from .errors import DataError, DimensionError, InputError, NumericError
from .features import FeatureMap, extract_features, init_backbone, load_image
from .model import (
    CompositionalModel, OccluderModel, CORNER_ROLES, _log_clamped,
    learn_occluder_model, object_log_likelihood,
)
from .vmf import VmfDictionary, kernel_responses, learn_dictionary, vmf_clustering_loss
from . import data as datamod


@dataclass
class TrainConfig:
    # Loss trade-offs and scales.
    eps1: float = 0.2
    eps2: float = 0.4
    temperature: float = 1.0
    weight_reg: float = 1e-4
    vmf_scale: float = 1.0
    # Per-group learning rates.
    lr_backbone: float = 2e-6
    lr_dictionary: float = 2e-5
    lr_mixture: float = 5e-5
    lr_corner: float = 5e-5
    # Schedule.
    epochs: int = 2
    batch_size: int = 8
    seed: int = 0
    # Model hyperparameters.
    # Calibrated on the synthetic benchmark (see scripts/run_benchmark.py):
    # sigma trades per-cell discrimination against dictionary-coverage noise,
    # rho sets the occlusion switch threshold log((1 - rho) / rho), and the
    # operating omega favors the object branch, which is the robust choice
    # under heavy context occlusion.
    sigma: float = 5.0
    kernels: int = 128
    mixtures: int = 2
    occluder_components: int = 5
    context_size: int = 16
    context_threshold: float = 0.85
    rho: float = 0.2
    omega: float = 0.0
    grid: int = 6
    feature_depth: int = 8

    def __post_init__(self):
        if self.eps1 < 0 or self.eps2 < 0:
            raise InputError("eps1 and eps2 must be >= 0")
        if self.temperature <= 0:
            raise InputError("temperature must be > 0")
        for name in ("lr_backbone", "lr_dictionary", "lr_mixture", "lr_corner"):
            if getattr(self, name) <= 0:
                raise InputError(f"{name} must be > 0")

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        """Parse a plain-text key=value config file."""
        kwargs = {}
        valid = {f.name: f.type for f in fields(cls)}
        with open(path) as fh:
            for ln, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise DataError(f"{path}:{ln}: expected key=value")
                key, value = (s.strip() for s in line.split("=", 1))
                if key not in valid:
                    raise DataError(f"{path}:{ln}: unknown key {key!r}")
                caster = int if valid[key] in ("int", int) else float
                kwargs[key] = caster(value)
        return cls(**kwargs)

    def to_file(self, path) -> None:
        with open(path, "w") as fh:
            for f in fields(self):
                fh.write(f"{f.name}={getattr(self, f.name)!r}\n".replace("'", ""))


@dataclass
class ResponseMap:
    x: torch.Tensor  # (H, W) nonnegative, sums to 1
    mixture: int
    corner: str


@dataclass
class TrainSample:
    image: np.ndarray
    class_id: int
    box: BoundingBox
    image_id: str = ""
    pose: int = 0


def make_ground_truth(shape: tuple[int, int], cell: tuple[int, int]) -> torch.Tensor:
    """Binary map with a single 1 at the annotated cell."""
    gt = torch.zeros(shape, dtype=torch.float64)
    gt[cell] = 1.0
    return gt


def classification_loss(
    logits: torch.Tensor, class_id: int, temperature: float = 1.0,
    weight_sq_norm=0.0, reg_coeff: float = 1.0,
) -> torch.Tensor:
    """Cross-entropy of the temperature softmax plus the weight regularizer."""
    if temperature <= 0:
        raise InputError(f"temperature must be > 0, got {temperature}")
    scaled = logits * temperature
    ce = torch.logsumexp(scaled, dim=0) - scaled[class_id]
    return ce + reg_coeff * weight_sq_norm


def response_map(
    fmap: FeatureMap | torch.Tensor, model: CompositionalModel,
    dictionary: VmfDictionary, occ: OccluderModel | None, omega: float | None = None,
) -> ResponseMap:
    """Scanned map of the best mixture, exponentiated and normalized to sum 1."""
    values = fmap.values if isinstance(fmap, FeatureMap) else fmap
    stack, _ = scan_mixture_stack(values, model, dictionary, occ, omega)
    if not bool(torch.isfinite(stack).all()):
        raise NumericError("likelihood map contains non-finite values")
    per_mix = stack.reshape(stack.shape[0], -1).max(dim=1).values
    m_hat = int(per_mix.argmax())
    log_map = stack[m_hat]
    shifted = log_map - log_map.max().detach()
    expd = torch.exp(shifted)
    return ResponseMap(x=expd / expd.sum(), mixture=m_hat, corner=model.corner)


def detection_loss(x: ResponseMap | torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Dice-style loss: 1 - 2 sum(x * gt) / (sum x + sum gt); in [0, 1]."""
    xv = x.x if isinstance(x, ResponseMap) else x
    if xv.shape != gt.shape:
        raise DimensionError(f"response {tuple(xv.shape)} vs truth {tuple(gt.shape)}")
    return 1.0 - 2.0 * (xv * gt).sum() / (xv.sum() + gt.sum())


def mixture_loss(
    window: FeatureMap | torch.Tensor, model: CompositionalModel,
    dictionary: VmfDictionary, occ: OccluderModel | None,
) -> torch.Tensor:
    """Negative object-branch log-likelihood over positions inferred visible."""
    values = window.values if isinstance(window, FeatureMap) else window
    with torch.no_grad():
        _, m_hat, zmap = object_log_likelihood(values, model, dictionary, occ)
    resp = kernel_responses(values, dictionary)
    obj = _log_clamped((model.A[m_hat] * resp).sum(dim=-1))
    visible = (1.0 - zmap.z.to(torch.float64))
    return -(visible * obj).sum()


def context_mixture_loss(
    window: FeatureMap | torch.Tensor, model: CompositionalModel,
    dictionary: VmfDictionary, occ: OccluderModel | None, pi: torch.Tensor,
) -> torch.Tensor:
    """Object branch trained where pi = 0, context branch where pi = 1."""
    values = window.values if isinstance(window, FeatureMap) else window
    if pi.shape != values.shape[:2]:
        raise DimensionError(f"pi {tuple(pi.shape)} vs window {tuple(values.shape[:2])}")
    with torch.no_grad():
        _, m_hat, zmap = object_log_likelihood(values, model, dictionary, occ)
    resp = kernel_responses(values, dictionary)
    obj = _log_clamped((model.A[m_hat] * resp).sum(dim=-1))
    ctx = _log_clamped((model.chi[m_hat] * resp).sum(dim=-1))
    visible = (1.0 - zmap.z.to(torch.float64))
    pi_f = pi.to(torch.float64)
    return -(visible * ((1.0 - pi_f) * obj + pi_f * ctx)).sum()


def corner_cells(box: BoundingBox, fmap: FeatureMap) -> dict:
    """Annotated (row, col) cells for the three corner roles."""
    cx, cy = box.center
    return {
        "ct": fmap.pixel_to_cell(cx, cy),
        "bl": fmap.pixel_to_cell(box.x_min, box.y_max),
        "tr": fmap.pixel_to_cell(box.x_max, box.y_min),
    }


def crop_window(values: torch.Tensor, cell: tuple[int, int], grid: tuple[int, int]):
    """Grid-sized window centered at a cell, shifted inward at borders.

    Returns (window, (top, left)).
    """
    h, w = values.shape[:2]
    hm, wm = grid
    if hm > h or wm > w:
        raise DimensionError(f"model grid {grid} larger than feature map {(h, w)}")
    top = min(max(cell[0] - hm // 2, 0), h - hm)
    left = min(max(cell[1] - wm // 2, 0), w - wm)
    return values[top:top + hm, left:left + wm], (top, left)


def class_logits(
    values: torch.Tensor, center_models: dict, dictionary: VmfDictionary,
    occ: OccluderModel | None, omega: float | None = None,
) -> torch.Tensor:
    """Per-class logit = max over positions and mixtures of the center scan."""
    logits = []
    for cid in sorted(center_models):
        stack, _ = scan_mixture_stack(values, center_models[cid], dictionary, occ, omega)
        logits.append(stack.max())
    return torch.stack(logits)


def total_loss(
    batch: list[TrainSample], container: ModelContainer, cfg: TrainConfig,
) -> tuple[torch.Tensor, dict]:
    """Sum over the batch of L_cls + sum_c (eps1 * L_g + eps2 * L_detect)."""
    by_class = container.by_class()
    center_models = {cid: roles["ct"] for cid, roles in by_class.items()}
    dictionary = container.dictionary
    occ = container.occluder
    parts = {"cls": 0.0, "g": 0.0, "detect": 0.0}
    total = torch.zeros((), dtype=torch.float64)
    weight_sq = container.backbone.squared_norm()

    for sample in batch:
        if sample.box is None:
            raise DataError(f"sample {sample.image_id!r} lacks a box annotation")
        if sample.class_id not in by_class:
            raise DataError(f"no model for class {sample.class_id}")
        fmap = extract_features(sample.image, container.backbone)
        cells = corner_cells(sample.box, fmap)
        logits = class_logits(fmap.values, center_models, dictionary, occ)
        l_cls = classification_loss(
            logits, sorted(center_models).index(sample.class_id),
            cfg.temperature, weight_sq, cfg.weight_reg,
        )
        with torch.no_grad():
            pi_full = segment_context(fmap, sample.box, container.context).pi
        sample_total = l_cls
        parts["cls"] += float(l_cls.detach())
        for corner in CORNER_ROLES:
            model = by_class[sample.class_id][corner]
            window, (top, left) = crop_window(fmap.values, cells[corner], model.grid)
            pi_win = pi_full[top:top + model.grid[0], left:left + model.grid[1]]
            l_g = (vmf_clustering_loss(FeatureMap(values=window, stride=fmap.stride),
                                       dictionary, cfg.vmf_scale)
                   + context_mixture_loss(window, model, dictionary, occ, pi_win))
            rmap = response_map(fmap.values, model, dictionary, occ)
            gt = make_ground_truth(tuple(rmap.x.shape), cells[corner])
            l_det = detection_loss(rmap, gt)
            sample_total = sample_total + cfg.eps1 * l_g + cfg.eps2 * l_det
            parts["g"] += float(l_g.detach())
            parts["detect"] += float(l_det.detach())
        total = total + sample_total
    parts["total"] = float(total.detach())
    return total, parts


# ---------------------------------------------------------------------------
# Constraint projection

def project_simplex_(t: torch.Tensor) -> None:
    """In-place: clamp at zero and renormalize the last axis to sum 1."""
    with torch.no_grad():
        t.clamp_(min=0.0)
        sums = t.sum(dim=-1, keepdim=True)
        uniform = torch.full_like(t, 1.0 / t.shape[-1])
        t.copy_(torch.where(sums > 0, t / torch.clamp(sums, min=1e-300), uniform))


def project_unit_rows_(t: torch.Tensor) -> None:
    """In-place: renormalize rows to unit length (zero rows become e1)."""
    with torch.no_grad():
        norms = torch.linalg.vector_norm(t, dim=-1, keepdim=True)
        zero = norms == 0
        t.div_(torch.where(zero, torch.ones_like(norms), norms))
        if bool(zero.any()):
            e1 = torch.zeros(t.shape[-1], dtype=t.dtype)
            e1[0] = 1.0
            t[zero.squeeze(-1)] = e1


def project_constraints_(container: ModelContainer) -> None:
    project_unit_rows_(container.dictionary.mu)
    for model in container.models.values():
        project_simplex_(model.A)
        project_simplex_(model.chi)


# ---------------------------------------------------------------------------
# Finite-difference gradient verification

def finite_difference_check(
    loss_fn, params: list[torch.Tensor], h: float = 1e-4, samples: int = 50,
    seed: int = 0, assignments_fn=None,
) -> dict:
    """Compare autograd gradients to central differences on sampled coordinates.

    `assignments_fn()` (optional) returns the discrete forward assignments; a
    coordinate is excluded when perturbing it by +/- h flips any assignment
    (non-differentiable argmax-tie point). Relative error is
    |a - f| / max(1, |a|, |f|).
    """
    if h <= 0:
        raise InputError(f"h must be > 0, got {h}")
    for p in params:
        p.requires_grad_(True)
        p.grad = None
    loss = loss_fn()
    if not bool(torch.isfinite(loss)):
        raise NumericError("loss is non-finite at the evaluation point")
    loss.backward()
    grads = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
             for p in params]

    rng = np.random.default_rng(seed)
    sizes = [p.numel() for p in params]
    total = sum(sizes)
    n = min(samples, total)
    picks = rng.choice(total, size=n, replace=False)

    max_err, checked, excluded = 0.0, 0, 0
    for flat in sorted(int(i) for i in picks):
        pi = 0
        while flat >= sizes[pi]:
            flat -= sizes[pi]
            pi += 1
        p = params[pi]
        orig = float(p.detach().reshape(-1)[flat])

        def poke(value):
            with torch.no_grad():
                p.reshape(-1)[flat] = value

        poke(orig + h)
        with torch.no_grad():
            plus = float(loss_fn())
        a_plus = assignments_fn() if assignments_fn else None
        poke(orig - h)
        with torch.no_grad():
            minus = float(loss_fn())
        a_minus = assignments_fn() if assignments_fn else None
        poke(orig)

        if assignments_fn and a_plus != a_minus:
            excluded += 1
            continue
        fd = (plus - minus) / (2.0 * h)
        an = float(grads[pi].reshape(-1)[flat])
        err = abs(an - fd) / max(1.0, abs(an), abs(fd))
        max_err = max(max_err, err)
        checked += 1
    return {"max_rel_error": max_err, "checked": checked, "excluded": excluded}


# ---------------------------------------------------------------------------
# Model initialization and the training loop

def _subsample(features: torch.Tensor, limit: int) -> torch.Tensor:
    if features.shape[0] <= limit:
        return features
    step = features.shape[0] / limit
    idx = (np.arange(limit) * step).astype(int)
    return features[idx]

def _init_class_models(
    samples, fmaps, pis, cfg: TrainConfig, dictionary: VmfDictionary,
) -> dict:
    """Maximum-likelihood-style init of A and chi from kernel responsibilities.

    A collects counts where the segmentation says object (pi = 0), chi where
    it says context (pi = 1), so each cell normally has data for exactly one
    of the two; the side without counts stays uniform. Keeping the two
    branches distinct is what gives the omega blend its meaning: at context
    cells the chi branch commits to surrounding appearance while A stays
    flat, so a high omega sharpens scores when the surroundings are visible
    and a low omega is the robust choice when they are occluded.
    """
    grid = (cfg.grid, cfg.grid)
    k = dictionary.size
    models = {}
    class_ids = sorted({s.class_id for s in samples})
    for cid in class_ids:
        for corner in CORNER_ROLES:
            a_acc = torch.zeros((cfg.mixtures, *grid, k), dtype=torch.float64)
            x_acc = torch.zeros((cfg.mixtures, *grid, k), dtype=torch.float64)
            for sample, fmap, pi in zip(samples, fmaps, pis):
                if sample.class_id != cid:
                    continue
                m = sample.pose % cfg.mixtures
                cells = corner_cells(sample.box, fmap)
                # Counts must stay aligned to the corner cell the scan centers
                # on, so out-of-bounds window cells are skipped rather than
                # clamping the whole window back inside the map.
                r0 = cells[corner][0] - grid[0] // 2
                c0 = cells[corner][1] - grid[1] // 2
                h, w = fmap.values.shape[:2]
                for gr in range(grid[0]):
                    rr = r0 + gr
                    if not 0 <= rr < h:
                        continue
                    for gc in range(grid[1]):
                        cc = c0 + gc
                        if not 0 <= cc < w:
                            continue
                        # Hard nearest-kernel counts keep the coefficients sharp.
                        nearest = int((fmap.values[rr, cc] @ dictionary.mu.T).argmax())
                        if int(pi[rr, cc]) == 0:
                            a_acc[m, gr, gc, nearest] += 1.0
                        else:
                            x_acc[m, gr, gc, nearest] += 1.0
            a_tot = a_acc.sum(dim=-1, keepdim=True)
            x_tot = x_acc.sum(dim=-1, keepdim=True)
            uniform = torch.full_like(a_acc, 1.0 / k)
            a = torch.where(a_tot > 0, a_acc / a_tot.clamp(min=1.0), uniform)
            x = torch.where(x_tot > 0, x_acc / x_tot.clamp(min=1.0), uniform)
            models[(cid, corner)] = CompositionalModel(
                class_id=cid, corner=corner, A=a, chi=x,
                omega=cfg.omega, rho=cfg.rho,
            )
    return models


def load_train_samples(root: str, split: str = "train") -> list[TrainSample]:
    manifest = datamod.load_dataset(root)
    if split not in manifest:
        raise DataError(f"dataset {root} has no {split!r} split")
    samples = []
    for rec in manifest[split]:
        img = load_image(os.path.join(root, rec.path))
        samples.append(TrainSample(image=img, class_id=rec.class_id, box=rec.box,
                                   image_id=rec.image_id, pose=rec.pose))
    return samples


def build_container(root: str, cfg: TrainConfig) -> tuple[ModelContainer, list[TrainSample]]:
    """Learn dictionary, context, occluder and initial class models."""
    samples = load_train_samples(root, "train")
    manifest = datamod.load_dataset(root)
    backbone = init_backbone(channels=(3, 12, 12, cfg.feature_depth), seed=cfg.seed)
    with torch.no_grad():
        fmaps = [extract_features(s.image, backbone) for s in samples]
        bg_maps = [
            extract_features(load_image(os.path.join(root, rec.path)), backbone)
            for rec in manifest.get("bg", [])
        ]
        pool = torch.cat(
            [m.values.reshape(-1, cfg.feature_depth) for m in fmaps + bg_maps], dim=0)
        dictionary = learn_dictionary(
            _subsample(pool, 20000), cfg.kernels, cfg.seed, sigma=cfg.sigma)
        context = build_context_dictionary(
            [(m, s.box) for m, s in zip(fmaps, samples)], cfg.context_size,
            cfg.seed, threshold=cfg.context_threshold,
            margin=backbone.receptive_field / 2)
        if not bg_maps:
            raise DataError(f"dataset {root} has no background split for occluder learning")
        occluder = learn_occluder_model(bg_maps, cfg.occluder_components,
                                        dictionary, cfg.seed)
        pis = [segment_context(m, s.box, context).pi for m, s in zip(fmaps, samples)]
        models = _init_class_models(samples, fmaps, pis, cfg, dictionary)
    return ModelContainer(dictionary=dictionary, context=context, occluder=occluder,
                          backbone=backbone, models=models), samples


def make_optimizer(container: ModelContainer, cfg: TrainConfig) -> torch.optim.Adam:
    groups = container.trainable_groups()
    for params in groups.values():
        for p in params:
            p.requires_grad_(True)
    return torch.optim.Adam([
        {"params": groups["backbone"], "lr": cfg.lr_backbone},
        {"params": groups["dictionary"], "lr": cfg.lr_dictionary},
        {"params": groups["mixture"], "lr": cfg.lr_mixture},
        {"params": groups["corner"], "lr": cfg.lr_corner},
    ])


def train_steps(
    container: ModelContainer, samples: list[TrainSample], cfg: TrainConfig,
    n_steps: int, optimizer: torch.optim.Adam | None = None,
) -> list[dict]:
    """Run n_steps Adam steps over deterministic mini-batches; returns per-step parts."""
    if optimizer is None:
        optimizer = make_optimizer(container, cfg)
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(samples))
    cursor = 0
    history = []
    for _ in range(n_steps):
        idx = []
        for _ in range(min(cfg.batch_size, len(samples))):
            if cursor >= len(order):
                order = rng.permutation(len(samples))
                cursor = 0
            idx.append(int(order[cursor]))
            cursor += 1
        batch = [samples[i] for i in idx]
        optimizer.zero_grad()
        loss, parts = total_loss(batch, container, cfg)
        loss.backward()
        optimizer.step()
        project_constraints_(container)
        history.append(parts)
    return history


# ---------------------------------------------------------------------------
# Gradient-check suite (used by tests and the check-grads CLI)

def _scan_branch_signature(values, model, dictionary, occ, omega=None):
    """Discrete choices inside the scan: occluder switches and mixture argmax."""
    with torch.no_grad():
        if omega is None:
            omega = model.omega
        resp = kernel_responses(values, dictionary)
        parts = []
        occ_term = None
        if occ is not None:
            occ_vals = _log_clamped(resp @ occ.beta.T)
            parts.append(occ_vals.argmax(dim=-1).numpy().tobytes())
            occ_term = math.log(model.rho) + occ_vals.max(dim=-1).values
        for m in range(model.mixtures):
            blend = omega * model.chi[m] + (1.0 - omega) * model.A[m]
            mix = _log_clamped(resp @ blend.reshape(-1, blend.shape[-1]).T)
            if occ_term is not None:
                vis = math.log1p(-model.rho) + mix
                parts.append((occ_term.unsqueeze(-1) > vis).numpy().tobytes())
        stack, _ = scan_mixture_stack(values, model, dictionary, occ, omega)
        parts.append(stack.argmax(dim=0).numpy().tobytes())
        parts.append(int(stack.reshape(-1).argmax()))
        return tuple(parts)


def _backbone_sign_signature(image, backbone):
    """Kink signature of the conv stack. The tanh stack is smooth, so the
    only non-differentiable point is an exactly-zero pre-normalization cell;
    record which cells are zero so FD skips perturbations that cross it."""
    import torch.nn.functional as tf
    with torch.no_grad():
        x = torch.as_tensor(image, dtype=torch.float64)
        x = (x - 0.5).permute(2, 0, 1).unsqueeze(0)
        n = len(backbone.weights)
        for i, (w, b) in enumerate(zip(backbone.weights, backbone.biases)):
            x = tf.conv2d(x, w, b, stride=2, padding=1)
            if i < n - 1:
                x = torch.tanh(x)
        norms = torch.linalg.vector_norm(x.squeeze(0), dim=0)
        return ((norms == 0).numpy().tobytes(),)


def _window_signature(window, model, dictionary, occ):
    with torch.no_grad():
        _, m_hat, zmap = object_log_likelihood(window, model, dictionary, occ)
        return (m_hat, zmap.z.numpy().tobytes())


def grad_check_suite(seed: int = 0, h: float = 1e-4, samples_per_loss: int = 50) -> dict:
    """Finite-difference verification of every loss term on a small random setup."""
    rng = np.random.default_rng(seed)
    depth, k, m_mix, n_occ, grid = 5, 6, 2, 2, 3
    sigma = 10.0
    backbone = init_backbone(channels=(3, 4, 4, depth), seed=seed)
    image = rng.random((32, 32, 3))
    box = BoundingBox(6.0, 6.0, 26.0, 26.0, class_id=0)

    def unit(shape):
        v = rng.normal(size=shape)
        return torch.from_numpy(v / np.linalg.norm(v, axis=-1, keepdims=True))

    def simplex(shape):
        v = rng.random(shape) + 0.1
        return torch.from_numpy(v / v.sum(axis=-1, keepdims=True))

    dictionary = VmfDictionary(mu=unit((k, depth)), sigma=sigma)
    occ = OccluderModel(beta=simplex((n_occ, k)))
    context = ContextDictionary(centers=unit((4, depth)))
    models = {}
    for cid in (0, 1):
        for corner in CORNER_ROLES:
            models[(cid, corner)] = CompositionalModel(
                class_id=cid, corner=corner, A=simplex((m_mix, grid, grid, k)),
                chi=simplex((m_mix, grid, grid, k)), omega=0.4, rho=0.3)
    container = ModelContainer(dictionary=dictionary, context=context,
                               occluder=occ, backbone=backbone, models=models)
    cfg = TrainConfig(grid=grid, kernels=k, mixtures=m_mix, feature_depth=depth,
                      sigma=sigma, seed=seed)
    with torch.no_grad():
        fmap = extract_features(image, backbone)
    values = fmap.values.detach().clone()
    window, _ = crop_window(values, (2, 2), (grid, grid))
    window = window.detach().clone()
    model = models[(0, "ct")]
    gt = make_ground_truth(tuple(values.shape[:2]), (2, 2))
    batch = [TrainSample(image=image, class_id=0, box=box, image_id="g0")]

    results = {}
    results["L_vmf"] = finite_difference_check(
        lambda: vmf_clustering_loss(FeatureMap(values=window), dictionary),
        [dictionary.mu], h=h, samples=samples_per_loss, seed=seed,
        assignments_fn=lambda: (window @ dictionary.mu.T).argmax(-1).numpy().tobytes(),
    )
    results["L_mix"] = finite_difference_check(
        lambda: mixture_loss(window, model, dictionary, occ),
        [model.A], h=h, samples=samples_per_loss, seed=seed + 1,
        assignments_fn=lambda: _window_signature(window, model, dictionary, occ),
    )
    results["L_detect"] = finite_difference_check(
        lambda: detection_loss(response_map(values, model, dictionary, occ), gt),
        [model.A, model.chi], h=h, samples=samples_per_loss, seed=seed + 2,
        assignments_fn=lambda: _scan_branch_signature(values, model, dictionary, occ),
    )

    center_models = {0: models[(0, "ct")], 1: models[(1, "ct")]}

    def cls_loss():
        fm = extract_features(image, backbone)
        logits = class_logits(fm.values, center_models, dictionary, occ)
        return classification_loss(logits, 0, cfg.temperature,
                                   backbone.squared_norm(), cfg.weight_reg)

    def cls_assign():
        with torch.no_grad():
            fm = extract_features(image, backbone)
        return (_backbone_sign_signature(image, backbone),
                tuple(_scan_branch_signature(fm.values, center_models[c],
                                             dictionary, occ) for c in (0, 1)))

    results["L_cls"] = finite_difference_check(
        cls_loss, backbone.parameters(), h=h, samples=samples_per_loss,
        seed=seed + 3, assignments_fn=cls_assign)

    def total_fn():
        return total_loss(batch, container, cfg)[0]

    def total_assign():
        with torch.no_grad():
            fm = extract_features(image, backbone)
            pi = segment_context(fm, box, context).pi.numpy().tobytes()
            cells = corner_cells(box, fm)
            sigs = [_backbone_sign_signature(image, backbone), pi,
                    (fm.values @ dictionary.mu.T).argmax(-1).numpy().tobytes()]
            for cid in (0, 1):
                sigs.append(_scan_branch_signature(
                    fm.values, center_models[cid], dictionary, occ))
            for corner in CORNER_ROLES:
                mdl = models[(0, corner)]
                win, _ = crop_window(fm.values, cells[corner], mdl.grid)
                sigs.append(_window_signature(win, mdl, dictionary, occ))
                sigs.append(_scan_branch_signature(fm.values, mdl, dictionary, occ))
        return tuple(sigs)

    all_params = (backbone.parameters() + [dictionary.mu]
                  + [t for mdl in models.values() for t in (mdl.A, mdl.chi)])
    results["total_loss"] = finite_difference_check(
        total_fn, all_params, h=h, samples=samples_per_loss, seed=seed + 4,
        assignments_fn=total_assign)
    return results


def train(root: str, cfg: TrainConfig, model_path: str, metrics_path: str | None = None):
    """Full pipeline: build, fine-tune for cfg.epochs passes, save the container."""
    from .container import save_container

    container, samples = build_container(root, cfg)
    steps_per_epoch = max(1, math.ceil(len(samples) / cfg.batch_size))
    optimizer = make_optimizer(container, cfg)
    rows = []
    for epoch in range(cfg.epochs):
        history = train_steps(container, samples, cfg, steps_per_epoch, optimizer)
        agg = {k: sum(hh[k] for hh in history) / len(history)
               for k in ("cls", "g", "detect", "total")}
        rows.append((epoch, agg))
    for p in container.trainable_groups().values():
        for t in p:
            t.requires_grad_(False)
    save_container(container, model_path)
    if metrics_path:
        with open(metrics_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "L_cls", "L_g", "L_detect", "total"])
            for epoch, agg in rows:
                writer.writerow([epoch, f"{agg['cls']:.9f}", f"{agg['g']:.9f}",
                                 f"{agg['detect']:.9f}", f"{agg['total']:.9f}"])
    return container
