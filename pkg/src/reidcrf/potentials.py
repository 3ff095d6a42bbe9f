"""Unary costs, Gaussian kernel mixtures, and CRF problem assembly.

The unary cost of labeling gallery item i as the target is a normalized
weighted sum of probe-to-gallery channel distances; the cost of the
background label is identically zero. The pairwise similarity between two
gallery items is a convex combination of Gaussian kernels
exp(-||f_i - f_j||^2 / sigma) evaluated on vector channels, and acts as the
penalty magnitude whenever the two items take different labels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data_model import (
    BHATTACHARYYA,
    EUCLIDEAN,
    HISTOGRAM_TOL,
    VECTOR,
    Dataset,
    ProbeQuery,
)

WEIGHT_TOL = 1e-9


@dataclass(frozen=True)
class UnaryConfig:
    """Normalized per-channel weights for the unary cost."""

    channel_weights: dict

    def __post_init__(self):
        if not self.channel_weights:
            raise ValueError("unary config needs at least one channel")
        weights = np.array(list(self.channel_weights.values()), dtype=np.float64)
        if (weights < 0).any():
            raise ValueError("unary channel weights must be non-negative")
        if abs(weights.sum() - 1.0) > WEIGHT_TOL:
            raise ValueError(f"unary channel weights must sum to 1, got {weights.sum()!r}")


@dataclass(frozen=True)
class KernelSpec:
    channel: str
    sigma: float
    weight: float

    def __post_init__(self):
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ValueError(f"kernel on '{self.channel}': sigma must be positive and finite")
        if self.weight < 0:
            raise ValueError(f"kernel on '{self.channel}': weight must be non-negative")


@dataclass(frozen=True)
class PairwiseConfig:
    """Convex combination of Gaussian kernels over vector channels."""

    kernels: tuple

    def __init__(self, kernels):
        object.__setattr__(self, "kernels", tuple(kernels))
        if not self.kernels:
            raise ValueError("pairwise config needs at least one kernel")
        total = sum(k.weight for k in self.kernels)
        if abs(total - 1.0) > WEIGHT_TOL:
            raise ValueError(f"kernel weights must sum to 1, got {total!r}")


@dataclass(frozen=True)
class ResolvedKernel:
    """A kernel bound to its channel's feature matrix (standardized view
    when the channel is flagged standardize)."""

    points: np.ndarray
    sigma: float
    weight: float
    channel: str = ""


@dataclass
class CrfProblem:
    """A fully materialized inference instance over one gallery.

    unary_cost[i] is the cost of labeling item i as the target; the
    background label costs 0 and is never stored. alpha trades off the
    unary term against the pairwise coupling.
    """

    n: int
    unary_cost: np.ndarray
    kernels: list
    alpha: float

    def __post_init__(self):
        self.unary_cost = np.asarray(self.unary_cost, dtype=np.float64)
        if self.unary_cost.shape != (self.n,):
            raise ValueError(f"unary cost must have shape ({self.n},)")
        if not np.isfinite(self.unary_cost).all():
            raise ValueError("unary costs must be finite")
        if (self.unary_cost < 0).any():
            raise ValueError("unary costs must be non-negative")
        if not (np.isfinite(self.alpha) and self.alpha >= 0):
            raise ValueError("alpha must be non-negative and finite")


def euclidean_distance(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def bhattacharyya_distance(h1: np.ndarray, h2: np.ndarray) -> float:
    """sqrt(1 - sum_k sqrt(h1_k * h2_k)) between normalized histograms.

    The Bhattacharyya coefficient is clamped to [0, 1] before the outer
    square root to absorb rounding on near-identical histograms.
    """
    h1 = np.asarray(h1, dtype=np.float64)
    h2 = np.asarray(h2, dtype=np.float64)
    if h1.shape != h2.shape:
        raise ValueError(f"dimension mismatch: {h1.shape} vs {h2.shape}")
    for name, h in (("h1", h1), ("h2", h2)):
        if (h < 0).any():
            raise ValueError(f"{name}: histogram entries must be non-negative")
        if abs(h.sum() - 1.0) > HISTOGRAM_TOL:
            raise ValueError(f"{name}: histogram not normalized (sum {h.sum():.6g})")
    coeff = np.clip(np.sum(np.sqrt(h1 * h2)), 0.0, 1.0)
    return float(np.sqrt(1.0 - coeff))


def gaussian_kernel(a: np.ndarray, b: np.ndarray, sigma: float) -> float:
    """exp(-||a - b||^2 / sigma); sigma divides the squared norm directly."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.exp(-np.sum((a - b) ** 2) / sigma))


def _channel_distance(probe: ProbeQuery, dataset: Dataset, name: str, i: int) -> float:
    ch = dataset.channel(name)
    if ch.kind == VECTOR:
        if name not in probe.vectors:
            raise ValueError(f"probe '{probe.probe_id}' is missing channel '{name}'")
        if ch.metric == EUCLIDEAN:
            gallery = dataset.kernel_matrix(name)
            pv = dataset.transform_probe(name, probe.vectors[name])
            return euclidean_distance(gallery[i], pv)
        return bhattacharyya_distance(dataset.matrix(name)[i], probe.vectors[name])
    if name not in probe.precomputed:
        raise ValueError(f"probe '{probe.probe_id}' is missing distances for channel '{name}'")
    col = np.asarray(probe.precomputed[name], dtype=np.float64)
    if col.shape[0] != dataset.n:
        raise ValueError(
            f"channel '{name}': probe '{probe.probe_id}' carries {col.shape[0]} distances, "
            f"gallery has {dataset.n}"
        )
    return float(col[i])


def unary_cost(probe: ProbeQuery, dataset: Dataset, config: UnaryConfig, i: int) -> float:
    """Weighted sum of probe-to-gallery channel distances for item i."""
    if not 0 <= i < dataset.n:
        raise ValueError(f"gallery index {i} out of range [0, {dataset.n})")
    return float(
        sum(
            w * _channel_distance(probe, dataset, name, i)
            for name, w in config.channel_weights.items()
        )
    )


def unary_cost_vector(probe: ProbeQuery, dataset: Dataset, config: UnaryConfig) -> np.ndarray:
    """Unary costs for the whole gallery (vectorized unary_cost)."""
    n = dataset.n
    u = np.zeros(n, dtype=np.float64)
    for name, w in config.channel_weights.items():
        ch = dataset.channel(name)
        if ch.kind == VECTOR:
            if name not in probe.vectors:
                raise ValueError(f"probe '{probe.probe_id}' is missing channel '{name}'")
            if ch.metric == EUCLIDEAN:
                gallery = dataset.kernel_matrix(name)
                pv = dataset.transform_probe(name, probe.vectors[name])
                d = np.sqrt(np.sum((gallery - pv) ** 2, axis=1))
            else:
                pv = np.asarray(probe.vectors[name], dtype=np.float64)
                hist = dataset.matrix(name)
                if (pv < 0).any() or abs(pv.sum() - 1.0) > HISTOGRAM_TOL:
                    raise ValueError(
                        f"probe '{probe.probe_id}' channel '{name}': histogram not normalized"
                    )
                coeff = np.clip(np.sum(np.sqrt(hist * pv), axis=1), 0.0, 1.0)
                d = np.sqrt(1.0 - coeff)
        else:
            if name not in probe.precomputed:
                raise ValueError(
                    f"probe '{probe.probe_id}' is missing distances for channel '{name}'"
                )
            d = np.asarray(probe.precomputed[name], dtype=np.float64)
            if d.shape[0] != n:
                raise ValueError(
                    f"channel '{name}': probe '{probe.probe_id}' carries {d.shape[0]} "
                    f"distances, gallery has {n}"
                )
        u += w * d
    return u


def resolve_kernels(dataset: Dataset, pairwise: PairwiseConfig) -> list:
    resolved = []
    for spec in pairwise.kernels:
        ch = dataset.channel(spec.channel)
        if ch.kind != VECTOR:
            raise ValueError(
                f"kernel channel '{spec.channel}' is not a vector channel; "
                "precomputed-distance channels cannot enter pairwise kernels"
            )
        resolved.append(
            ResolvedKernel(
                points=dataset.kernel_matrix(spec.channel),
                sigma=spec.sigma,
                weight=spec.weight,
                channel=spec.channel,
            )
        )
    return resolved


def pairwise_similarity(problem: CrfProblem, i: int, j: int) -> float:
    """Mixture similarity kappa(i, j); the pairwise penalty magnitude for
    differing labels. Symmetric, bounded in (0, 1]."""
    if i == j:
        raise ValueError("pairwise similarity is undefined for i == j")
    total = 0.0
    for k in problem.kernels:
        total += k.weight * np.exp(-np.sum((k.points[i] - k.points[j]) ** 2) / k.sigma)
    return float(total)


def build_crf_problem(
    probe: ProbeQuery,
    dataset: Dataset,
    unary: UnaryConfig,
    pairwise: PairwiseConfig,
    alpha: float,
) -> CrfProblem:
    """Assemble the inference instance for one probe against one gallery."""
    if dataset.n == 0:
        raise ValueError("empty gallery")
    u = unary_cost_vector(probe, dataset, unary)
    kernels = resolve_kernels(dataset, pairwise)
    return CrfProblem(n=dataset.n, unary_cost=u, kernels=kernels, alpha=float(alpha))


def kernel_mixture_matrix(problem: CrfProblem) -> np.ndarray:
    """Dense kappa matrix with unit diagonal (each kernel is 1 at zero
    displacement and the weights are convex)."""
    n = problem.n
    out = np.zeros((n, n), dtype=np.float64)
    for k in problem.kernels:
        sq = np.sum(k.points**2, axis=1)
        d2 = sq[:, None] + sq[None, :] - 2.0 * (k.points @ k.points.T)
        np.maximum(d2, 0.0, out=d2)
        out += k.weight * np.exp(-d2 / k.sigma)
    return out


def save_params(path, unary: UnaryConfig, pairwise: PairwiseConfig, alpha: float) -> Path:
    """Persist learned or manual parameters as JSON."""
    path = Path(path)
    payload = {
        "unary_weights": dict(unary.channel_weights),
        "kernels": [
            {"channel": k.channel, "sigma": k.sigma, "weight": k.weight}
            for k in pairwise.kernels
        ],
        "alpha": float(alpha),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def load_params(path):
    """Load a parameter file; returns (UnaryConfig, PairwiseConfig, alpha)."""
    with open(path) as fh:
        payload = json.load(fh)
    unary = UnaryConfig(channel_weights=dict(payload["unary_weights"]))
    pairwise = PairwiseConfig(
        kernels=[
            KernelSpec(channel=e["channel"], sigma=float(e["sigma"]), weight=float(e["weight"]))
            for e in payload["kernels"]
        ]
    )
    alpha = float(payload["alpha"])
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    return unary, pairwise, alpha
