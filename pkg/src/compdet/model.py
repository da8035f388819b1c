"""Compositional object models, the occluder outlier model, and inference.

A compositional model holds, for one class and one corner role, M mixtures of
per-position simplex coefficients over the vMF dictionary: A for the object
branch and chi for the context branch, blended by the prior omega. Inference
uses hard assignments throughout: the best mixture m, the best occluder
component n per position, and the binary per-position occlusion switch z.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .errors import CardinalityError, DimensionError, InputError
from .features import FeatureMap
from .vmf import VmfDictionary, kernel_responses, nearest_kernel, spherical_kmeans

CORNER_ROLES = ("ct", "bl", "tr")
LOG_FLOOR = -690.7755278982137  # log(1e-300)


@dataclass
class CompositionalModel:
    class_id: int
    corner: str  # one of CORNER_ROLES
    A: torch.Tensor    # (M, Hm, Wm, K) per-position simplex over kernels
    chi: torch.Tensor  # (M, Hm, Wm, K) context coefficients, same constraint
    omega: float = 0.5
    rho: float = 0.1   # occlusion prior p(z_p = 1)

    def __post_init__(self):
        if self.corner not in CORNER_ROLES:
            raise InputError(f"corner must be one of {CORNER_ROLES}, got {self.corner!r}")
        if self.A.shape != self.chi.shape or self.A.ndim != 4:
            raise DimensionError(
                f"A and chi must share shape (M, Hm, Wm, K); got {tuple(self.A.shape)} "
                f"vs {tuple(self.chi.shape)}"
            )
        if not (0.0 <= self.omega <= 1.0):
            raise InputError(f"omega must lie in [0, 1], got {self.omega}")
        if not (0.0 < self.rho < 1.0):
            raise InputError(f"rho must lie in (0, 1), got {self.rho}")

    @property
    def mixtures(self) -> int:
        return self.A.shape[0]

    @property
    def grid(self) -> tuple[int, int]:
        return (self.A.shape[1], self.A.shape[2])


@dataclass
class OccluderModel:
    beta: torch.Tensor  # (N, K) simplex rows

    def __post_init__(self):
        if self.beta.ndim != 2 or self.beta.shape[0] < 1:
            raise DimensionError(f"beta must be N x K, got {tuple(self.beta.shape)}")

    @property
    def components(self) -> int:
        return self.beta.shape[0]


@dataclass
class OcclusionMap:
    z: torch.Tensor            # (Hm, Wm) in {0, 1}
    mixture: int
    component: torch.Tensor = field(default=None)  # (Hm, Wm) occluder index per position


def _log_clamped(x: torch.Tensor) -> torch.Tensor:
    return torch.log(torch.clamp(x, min=1e-300))


def blended_mixture_grid(
    window: torch.Tensor, model: CompositionalModel, dictionary: VmfDictionary,
    m: int, omega: float | None = None,
) -> torch.Tensor:
    """Per-position omega-blended mixture likelihood over an (Hm, Wm, D) window."""
    if omega is None:
        omega = model.omega
    resp = kernel_responses(window, dictionary)  # (Hm, Wm, K)
    obj = (model.A[m] * resp).sum(dim=-1)
    ctx = (model.chi[m] * resp).sum(dim=-1)
    return omega * ctx + (1.0 - omega) * obj


def position_log_likelihood(
    f, model: CompositionalModel, dictionary: VmfDictionary, m: int, p: tuple[int, int],
    omega: float | None = None,
) -> float:
    """log[omega * mix(f, chi_mp) + (1 - omega) * mix(f, A_mp)]."""
    hm, wm = model.grid
    r, c = p
    if not (0 <= r < hm and 0 <= c < wm):
        raise IndexError(f"position {p} outside model grid {(hm, wm)}")
    if omega is None:
        omega = model.omega
    f = torch.as_tensor(f, dtype=torch.float64)
    resp = kernel_responses(f, dictionary)
    obj = float(model.A[m, r, c] @ resp)
    ctx = float(model.chi[m, r, c] @ resp)
    return math.log(max(omega * ctx + (1.0 - omega) * obj, 1e-300))


def occluder_log_likelihood(
    f, occ: OccluderModel, dictionary: VmfDictionary
) -> tuple[float, int]:
    """Best occluder component log-likelihood and its index (hard tau)."""
    f = torch.as_tensor(f, dtype=torch.float64)
    resp = kernel_responses(f, dictionary)
    vals = _log_clamped(occ.beta @ resp)
    n = int(vals.argmax())
    return float(vals[n]), n


def occluder_log_grid(
    window: torch.Tensor, occ: OccluderModel, dictionary: VmfDictionary
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-position best occluder log-likelihood over an (Hm, Wm, D) window."""
    resp = kernel_responses(window, dictionary)  # (Hm, Wm, K)
    vals = _log_clamped(resp @ occ.beta.T)  # (Hm, Wm, N)
    best, comp = vals.max(dim=-1)
    return best, comp


def robust_log_likelihood(
    window: FeatureMap | torch.Tensor, model: CompositionalModel, dictionary: VmfDictionary,
    m: int, occ: OccluderModel | None, omega: float | None = None,
) -> tuple[torch.Tensor, OcclusionMap]:
    """Per-position switch between object model and occluder model.

    Score = sum_p max(log[(1 - rho) obj_p], log[rho occ_p]); ties keep the
    object branch (z = 0). With occ None the occluder branch is disabled and
    the score is the plain object log-likelihood without prior terms.
    """
    values = window.values if isinstance(window, FeatureMap) else window
    hm, wm = model.grid
    if tuple(values.shape[:2]) != (hm, wm):
        raise DimensionError(
            f"window {tuple(values.shape[:2])} does not match model grid {(hm, wm)}"
        )
    obj_log = _log_clamped(blended_mixture_grid(values, model, dictionary, m, omega))
    if occ is None:
        z = torch.zeros((hm, wm), dtype=torch.int64)
        return obj_log.sum(), OcclusionMap(z=z, mixture=m, component=torch.zeros_like(z))
    occ_log, comp = occluder_log_grid(values, occ, dictionary)
    visible = math.log1p(-model.rho) + obj_log
    hidden = math.log(model.rho) + occ_log
    z = (hidden > visible).to(torch.int64)
    score = torch.maximum(visible, hidden).sum()
    return score, OcclusionMap(z=z, mixture=m, component=comp)


def object_log_likelihood(
    window: FeatureMap | torch.Tensor, model: CompositionalModel, dictionary: VmfDictionary,
    occ: OccluderModel | None, omega: float | None = None,
) -> tuple[torch.Tensor, int, OcclusionMap]:
    """Hard max over mixtures of the robust window likelihood."""
    best_score, best_m, best_map = None, None, None
    for m in range(model.mixtures):
        score, zmap = robust_log_likelihood(window, model, dictionary, m, occ, omega)
        if best_score is None or float(score) > float(best_score):
            best_score, best_m, best_map = score, m, zmap
    return best_score, best_m, best_map


def learn_occluder_model(
    background_maps: list[FeatureMap], n: int, dictionary: VmfDictionary, seed: int
) -> OccluderModel:
    """Cluster pooled background features into N groups; beta rows are the
    normalized nearest-kernel histograms per group. Frozen after learning."""
    pooled = torch.cat([m.values.reshape(-1, m.depth) for m in background_maps], dim=0)
    if pooled.shape[0] < n:
        raise CardinalityError(
            f"need at least {n} background features, got {pooled.shape[0]}"
        )
    _, assign = spherical_kmeans(pooled, n, seed)
    kern = nearest_kernel(pooled, dictionary)
    k = dictionary.size
    beta = torch.zeros((n, k), dtype=torch.float64)
    for g in range(n):
        members = kern[assign == g]
        if len(members) == 0:
            beta[g] = torch.full((k,), 1.0 / k, dtype=torch.float64)
            continue
        hist = torch.bincount(members, minlength=k).to(torch.float64)
        beta[g] = hist / hist.sum()
    return OccluderModel(beta=beta)
