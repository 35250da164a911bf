"""Logits-to-token pipeline: guidance, temperature, top-k/top-p, sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class SamplerConfigError(ValueError):
    """Raised for invalid sampling hyperparameters."""


@dataclass(frozen=True)
class SamplerConfig:
    """Sampling hyperparameters.

    ``top_k == 0`` and ``top_p == 1.0`` disable truncation; ``cfg_scale == 0``
    disables classifier-free guidance entirely (conditional context only).
    When both truncations are enabled, top-k applies first.
    """

    temperature: float = 1.0
    top_k: int = 0
    top_p: float = 1.0
    cfg_scale: float = 0.0

    def __post_init__(self) -> None:
        if not self.temperature > 0:
            raise SamplerConfigError("temperature must be positive")
        if self.top_k < 0:
            raise SamplerConfigError("top_k must be 0 (off) or positive")
        if not 0 < self.top_p <= 1:
            raise SamplerConfigError("top_p must lie in (0, 1]")
        if self.cfg_scale < 0:
            raise SamplerConfigError("cfg_scale must be nonnegative")


def guided_logits(cond: np.ndarray, uncond: np.ndarray, scale: float) -> np.ndarray:
    """Classifier-free guidance on logits: uncond + scale * (cond - uncond)."""
    cond = np.asarray(cond, dtype=np.float64)
    uncond = np.asarray(uncond, dtype=np.float64)
    if cond.shape != uncond.shape:
        raise ValueError(f"logit length mismatch: {cond.shape} vs {uncond.shape}")
    return uncond + scale * (cond - uncond)


def to_distribution(logits: np.ndarray, cfg: SamplerConfig) -> np.ndarray:
    """softmax(logits / temperature) with top-k then top-p truncation.

    Truncation ties break toward the lower token index; the result always
    keeps at least the argmax, so the output is a valid distribution even
    when truncation would remove all mass.
    """
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    z = z / cfg.temperature
    z = z - z.max()
    p = np.exp(z)
    p = p / p.sum()

    n = p.shape[0]
    if cfg.top_k or cfg.top_p < 1.0:
        # Stable sort on -p: ties keep index order deterministic.
        order = np.argsort(-p, kind="stable")
        keep = n
        if 0 < cfg.top_k < n:
            keep = cfg.top_k
        if cfg.top_p < 1.0:
            cum = np.cumsum(p[order[:keep]])
            # Smallest prefix reaching the nucleus mass; never empty.
            nucleus = int(np.searchsorted(cum, cfg.top_p, side="left")) + 1
            keep = min(keep, nucleus)
        mask = np.zeros(n, dtype=bool)
        mask[order[:keep]] = True
        p = np.where(mask, p, 0.0)
        total = p.sum()
        if total <= 0.0:
            p = np.zeros(n)
            p[order[0]] = 1.0
        else:
            p = p / total
    return p


def sample_from(probs: np.ndarray, stream: np.random.Generator) -> int:
    """Inverse-CDF draw over the vocabulary in index order."""
    u = stream.random()
    cdf = np.cumsum(probs)
    idx = int(np.searchsorted(cdf, u, side="right"))
    return min(idx, probs.shape[0] - 1)


def validate_distribution(probs: np.ndarray, atol: float = 1e-9) -> None:
    p = np.asarray(probs)
    if np.any(p < 0):
        raise ValueError("distribution has negative entries")
    if abs(float(p.sum()) - 1.0) > atol:
        raise ValueError(f"distribution sums to {p.sum()}, not 1")


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())
