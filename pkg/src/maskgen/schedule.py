"""Masking schedules: the cosine decay curve, its coarse-to-fine per-token
rescaling, Bernoulli mask sampling, and mask application.

Step indexing runs i = 0..n_steps with i=0 fully masked and i=n_steps fully
observed. Two conventions exist for the expected masked count at step i:
COS uses T*cos(pi*i/(2N)), consistent with the per-token probability curve
and decaying with progress; SIN uses T*sin(pi*i/(2N)), which rises instead.
COS is the default; SIN is kept selectable for fidelity experiments.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np


class MaskMode(enum.Enum):
    UNIFORM_COSINE = "uniform"
    CTF = "ctf"  # coarse-to-fine: rescale per-token by rarity


class Convention(enum.Enum):
    """Expected-masked-count convention (see module docstring)."""

    COS = "cos"
    SIN = "sin"


@dataclass
class ScheduleConfig:
    n_steps: int
    mode: MaskMode = MaskMode.UNIFORM_COSINE
    convention: Convention = Convention.COS
    mask_token_id: int = -1  # callers set this to vocab_size

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")


@dataclass
class MaskVector:
    """Sampled binary mask together with the probabilities it came from."""

    m: np.ndarray  # (T,) int8 in {0,1}
    probs: np.ndarray  # (T,) float64 in [0,1]
    step: int | None = None  # schedule step the probabilities belong to


def cosine_probability(i: int, n_steps: int) -> float:
    """Masking probability at step i of n_steps: cos(pi/2 * i/N).

    1 at i=0 (everything masked), exactly 0 at i=N (everything observed).
    """
    if not 0 <= i <= n_steps:
        raise ValueError(f"step {i} outside [0, {n_steps}]")
    if i == n_steps:
        return 0.0  # cos(pi/2) in floats is ~6e-17; the endpoint is exact
    return math.cos(0.5 * math.pi * i / n_steps)


def expected_masked_cosine(
    i: int, n_steps: int, seq_len: int, convention: Convention = Convention.COS
) -> float:
    """Expected number of masked tokens at step i under the cosine schedule."""
    if not 0 <= i <= n_steps:
        raise ValueError(f"step {i} outside [0, {n_steps}]")
    if convention is Convention.COS:
        return seq_len * cosine_probability(i, n_steps)
    return seq_len * math.sin(0.5 * math.pi * i / n_steps)


def scaled_clipped_probabilities(p_base: np.ndarray, expected_masked: float) -> np.ndarray:
    """Rescale per-token base probabilities so their sum matches the target
    expectation, clipping at 1.

    p(t) = min(expected_masked / sum(p_base) * p_base(t), 1). The sum of the
    result equals the target exactly when nothing clips and falls short of
    it otherwise. Rank order among unclipped entries is preserved.
    """
    p_base = np.asarray(p_base, dtype=np.float64)
    if np.any(p_base <= 0.0) or np.any(p_base > 1.0):
        raise ValueError("p_base values must lie in (0, 1]")
    total = p_base.sum()
    if total <= 0.0:
        raise ValueError("sum of p_base must be positive")
    return np.minimum(expected_masked / total * p_base, 1.0)


def ctf_probabilities(
    p_base: np.ndarray,
    i: int,
    n_steps: int,
    convention: Convention = Convention.COS,
) -> np.ndarray:
    """Coarse-to-fine per-token masking probabilities at step i.

    Matches the cosine schedule's expected masked count in aggregate while
    keeping rare tokens (high p_base) masked longer than frequent ones.
    Uniform p_base collapses this to the plain cosine schedule.
    """
    p_base = np.asarray(p_base, dtype=np.float64)
    e_cos = expected_masked_cosine(i, n_steps, p_base.shape[0], convention)
    return scaled_clipped_probabilities(p_base, e_cos)


def sample_mask(probs: np.ndarray, rng: np.random.Generator, step: int | None = None) -> MaskVector:
    """Independent Bernoulli draw per position."""
    probs = np.asarray(probs, dtype=np.float64)
    if np.any(probs < 0.0) or np.any(probs > 1.0):
        raise ValueError("mask probabilities must lie in [0, 1]")
    m = (rng.random(probs.shape[0]) < probs).astype(np.int8)
    return MaskVector(m=m, probs=probs.copy(), step=step)


def apply_mask(tokens: np.ndarray, m: np.ndarray, mask_token_id: int) -> np.ndarray:
    """Write the mask token into selected positions, leave the rest alone."""
    tokens = np.asarray(tokens, dtype=np.int64)
    m = np.asarray(m)
    if tokens.shape[0] != m.shape[0]:
        raise ValueError(f"length mismatch: {tokens.shape[0]} tokens vs {m.shape[0]} mask entries")
    return np.where(m == 1, np.int64(mask_token_id), tokens)


def dump_schedule_rows(config: ScheduleConfig, seq_len: int) -> list[tuple[int, float, str]]:
    """Rows ``(step, expected_masked, convention)`` for CSV plotting."""
    return [
        (i, expected_masked_cosine(i, config.n_steps, seq_len, config.convention), config.convention.value)
        for i in range(config.n_steps + 1)
    ]
