"""von Mises-Fisher kernels, the shared direction dictionary and its losses.

All likelihood values are unnormalized: the concentration sigma is one shared
constant, so normalization constants cancel in every argmax / ratio use and
are never evaluated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import CardinalityError, InputError
from .features import FeatureMap, normalize_rows

UNIT_TOL = 1e-6
DEFAULT_SIGMA = 30.0


@dataclass(frozen=True)
class VmfDictionary:
    """K unit mean directions with one shared concentration."""

    mu: torch.Tensor  # (K, D) float64, unit rows
    sigma: float = DEFAULT_SIGMA

    def __post_init__(self):
        if self.mu.ndim != 2 or self.mu.shape[0] < 1:
            raise InputError(f"mu must be K x D with K >= 1, got {tuple(self.mu.shape)}")
        if not self.sigma > 0:
            raise InputError(f"sigma must be > 0, got {self.sigma}")

    @property
    def size(self) -> int:
        return self.mu.shape[0]

    @property
    def depth(self) -> int:
        return self.mu.shape[1]


def _check_unit(f: torch.Tensor, name: str = "f") -> torch.Tensor:
    f = torch.as_tensor(f, dtype=torch.float64)
    norm = float(torch.linalg.vector_norm(f))
    if abs(norm - 1.0) > UNIT_TOL:
        raise InputError(f"{name} must be unit-norm (|norm - 1| <= {UNIT_TOL}), got {norm}")
    return f


def _check_simplex(alpha: torch.Tensor, name: str = "alpha") -> torch.Tensor:
    alpha = torch.as_tensor(alpha, dtype=torch.float64)
    if bool((alpha < -1e-12).any()):
        raise InputError(f"{name} has negative entries")
    s = float(alpha.sum())
    if abs(s - 1.0) > UNIT_TOL:
        raise InputError(f"{name} must sum to 1 +/- {UNIT_TOL}, got {s}")
    return alpha


def vmf_log_kernel(f, k: int, dictionary: VmfDictionary) -> float:
    """Unnormalized log-likelihood sigma * <mu_k, f>; range [-sigma, sigma]."""
    f = _check_unit(f)
    return float(dictionary.sigma * (dictionary.mu[k] @ f))


def vmf_mixture_likelihood(f, alpha, dictionary: VmfDictionary) -> float:
    """sum_k alpha_k * exp(sigma * <mu_k, f>), unnormalized, strictly positive."""
    f = _check_unit(f)
    alpha = _check_simplex(alpha)
    kernels = torch.exp(dictionary.sigma * (dictionary.mu @ f))
    return float(alpha @ kernels)


def kernel_responses(values: torch.Tensor, dictionary: VmfDictionary) -> torch.Tensor:
    """exp(sigma * <mu_k, f_p>) for a (..., D) stack of unit features -> (..., K)."""
    return torch.exp(dictionary.sigma * (values @ dictionary.mu.T))


def spherical_kmeans(
    samples: torch.Tensor, k: int, seed: int, max_iter: int = 100
) -> tuple[torch.Tensor, torch.Tensor]:
    """Spherical k-means++ on unit vectors (cosine distance).

    Returns (centers (k, D) unit rows, assignments (n,)). Deterministic per
    seed; argmax ties resolve to the lowest index. Empty clusters keep their
    previous center.
    """
    samples = torch.as_tensor(samples, dtype=torch.float64)
    n = samples.shape[0]
    if n < k:
        raise CardinalityError(f"need at least {k} samples, got {n}")
    rng = np.random.default_rng(seed)
    x = samples.numpy()

    # k-means++ seeding with D(x) = 1 - <x, c>
    centers = np.empty((k, x.shape[1]))
    first = int(rng.integers(n))
    centers[0] = x[first]
    if k > 1:
        best = 1.0 - x @ centers[0]
        for j in range(1, k):
            d = np.clip(best, 0.0, None)
            total = d.sum()
            if total <= 0:
                idx = int(rng.integers(n))
            else:
                idx = int(rng.choice(n, p=d / total))
            centers[j] = x[idx]
            best = np.minimum(best, 1.0 - x @ centers[j])

    assign = None
    for _ in range(max_iter):
        sims = x @ centers.T
        new_assign = sims.argmax(axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = x[assign == j]
            if len(members) == 0:
                continue
            mean = members.sum(axis=0)
            norm = np.linalg.norm(mean)
            if norm > 0:
                centers[j] = mean / norm
    centers_t = normalize_rows(torch.from_numpy(centers))
    return centers_t, torch.from_numpy(assign.astype(np.int64))


def learn_dictionary(features, k: int, seed: int, sigma: float = DEFAULT_SIGMA) -> VmfDictionary:
    """Cluster unit feature vectors into K directions (spherical k-means++)."""
    if isinstance(features, (list, tuple)):
        features = torch.stack([torch.as_tensor(f, dtype=torch.float64) for f in features])
    features = torch.as_tensor(features, dtype=torch.float64)
    if features.shape[0] < k:
        raise CardinalityError(
            f"need at least {k} feature vectors to learn K={k} kernels, got {features.shape[0]}"
        )
    centers, _ = spherical_kmeans(features, k, seed)
    return VmfDictionary(mu=centers, sigma=sigma)


def nearest_kernel(values: torch.Tensor, dictionary: VmfDictionary) -> torch.Tensor:
    """Index of the best-aligned kernel per feature vector; ties -> lowest index."""
    return (values @ dictionary.mu.T).argmax(dim=-1)


def vmf_clustering_loss(fmap: FeatureMap, dictionary: VmfDictionary, scale: float = 1.0) -> torch.Tensor:
    """-scale * sum_p max_k <mu_k, f_p>; decreases as features align to kernels."""
    values = fmap.values if isinstance(fmap, FeatureMap) else torch.as_tensor(fmap, dtype=torch.float64)
    sims = values.reshape(-1, values.shape[-1]) @ dictionary.mu.T
    return -scale * sims.max(dim=1).values.sum()
