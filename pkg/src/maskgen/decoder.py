"""Iterative masked decoding: start fully masked, predict all open
positions each step, commit the most confident predictions, and leave
exactly the scheduled number of positions open for the next step.

The per-step open-count targets come from the schedule's expected masked
counts, rounded half-up and repaired to a strictly decreasing sequence from
T down to 0, so every step commits at least one position and decoding
finishes in exactly n_steps forward passes. In coarse-to-fine mode the
stay-open priority of a position is additionally weighted by its rarity,
so positions holding frequent tokens commit earlier and rare ones are
refined last with the most visible context.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .predictor import ConditioningContext, PredictionOutput, PredictorModel, forward
from .schedule import (
    Convention,
    MaskMode,
    ScheduleConfig,
    ctf_probabilities,
    expected_masked_cosine,
)


@dataclass
class DecodeState:
    current: np.ndarray  # (T,) with mask_token_id at open positions
    committed: np.ndarray  # (T,) int8; 1 where a value has been fixed
    step: int
    confidences: np.ndarray  # (T,) confidence recorded at commit time, 0 while open
    target_open_counts: np.ndarray  # (n_steps+1,) planned open positions per step


@dataclass
class StepTrace:
    step: int
    open_count: int  # positions predicted at this step
    mean_confidence: float


def plan_open_counts(
    sched: ScheduleConfig, seq_len: int, p_base: np.ndarray | None = None
) -> np.ndarray:
    """Open-position targets per step: strictly decreasing from T to 0.

    Raw targets are the rounded expected masked counts (uniform cosine, or
    the clipped coarse-to-fine sum when p_base is given in CTF mode). The
    repair pass pins both endpoints and enforces a strict decrease so each
    step commits at least one position; this needs n_steps <= seq_len.
    """
    n = sched.n_steps
    if n > seq_len:
        raise ValueError(f"n_steps ({n}) must not exceed seq_len ({seq_len})")
    use_ctf = sched.mode is MaskMode.CTF and p_base is not None
    raw = np.empty(n + 1, dtype=np.int64)
    for i in range(n + 1):
        if use_ctf:
            expected = float(ctf_probabilities(p_base, i, n, sched.convention).sum())
        else:
            expected = expected_masked_cosine(i, n, seq_len, sched.convention)
        raw[i] = math.floor(expected + 0.5)  # round half up

    counts = np.zeros(n + 1, dtype=np.int64)
    for i in range(n - 1, 0, -1):
        counts[i] = max(counts[i + 1] + 1, min(int(raw[i]), seq_len - i))
    counts[0] = seq_len
    return counts


def confidence(pred: PredictionOutput, position: int) -> float:
    """Probability of the chosen (argmax) token at an open position.

    Ties go to the lower token id via argmax's first-hit rule.
    """
    cache = pred._cache
    if cache.masked[position] != cache.model.mask_token_id:
        raise ValueError(f"position {position} is not open (not masked)")
    row = pred.probs[position]
    return float(row[int(np.argmax(row))])


def _choose(
    probs: np.ndarray,
    selection: str,
    temperature: float,
    rng: np.random.Generator | None,
) -> np.ndarray:
    """Token choice per open position: argmax, or temperature sampling."""
    if selection == "greedy" or temperature <= 0.0:
        return probs.argmax(axis=1)
    if rng is None:
        raise ValueError("sample selection needs an rng")
    logits = np.log(np.maximum(probs, 1e-300)) / temperature
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    cum = np.cumsum(p, axis=1)
    u = rng.random((probs.shape[0], 1))
    # rounding can leave cum[-1] marginally below u; clamp the index
    return np.minimum((u > cum).sum(axis=1), probs.shape[1] - 1)


def decode(
    model: PredictorModel,
    ctx: ConditioningContext,
    sched: ScheduleConfig,
    selection: str = "greedy",
    rng: np.random.Generator | None = None,
    temperature: float = 1.0,
    p_base: np.ndarray | None = None,
    initial: np.ndarray | None = None,
) -> tuple[np.ndarray, list[StepTrace]]:
    """Reconstruct a full sequence in exactly ``sched.n_steps`` steps.

    Each step predicts every open position, picks a token per position
    (greedy argmax, or temperature sampling with the temperature annealed
    linearly to zero over the steps), and commits enough of them --
    highest confidence first -- that exactly the planned number stays open.
    Committed positions never change. In CTF mode ``p_base`` (the rarity
    priors of the observed sequence) weights the stay-open priority.

    ``initial`` may pre-commit positions (everything not equal to the mask
    token); the plan is clamped to the initially open count. With nothing
    open the input is returned untouched with no forward pass.
    """
    if selection not in ("greedy", "sample"):
        raise ValueError(f"unknown selection {selection!r}")
    if sched.mask_token_id != model.vocab_size:
        raise ValueError("schedule mask_token_id must equal the model vocab size")
    if sched.mode is MaskMode.CTF and p_base is None:
        raise ValueError("CTF decoding needs the per-position p_base vector")
    t = ctx.seq_len
    mask_id = sched.mask_token_id

    if initial is None:
        current = np.full(t, mask_id, dtype=np.int64)
    else:
        current = np.asarray(initial, dtype=np.int64).copy()
        if current.shape[0] != t:
            raise ValueError("initial sequence length does not match conditioning")
    open0 = int((current == mask_id).sum())
    state = DecodeState(
        current=current,
        committed=(current != mask_id).astype(np.int8),
        step=0,
        confidences=np.zeros(t),
        target_open_counts=np.minimum(plan_open_counts(sched, t, p_base), open0),
    )
    trace: list[StepTrace] = []
    if open0 == 0:
        return state.current, trace

    n = sched.n_steps
    for i in range(n):
        pred = forward(model, state.current, ctx)
        open_idx = np.flatnonzero(state.current == mask_id)
        if selection == "sample":
            step_temp = temperature * (1.0 - (i + 1) / n)
            chosen = _choose(pred.probs[open_idx], selection, step_temp, rng)
        else:
            chosen = pred.probs[open_idx].argmax(axis=1)
        conf = pred.probs[open_idx, chosen]
        trace.append(StepTrace(step=i, open_count=open_idx.shape[0], mean_confidence=float(conf.mean())))

        n_commit = open_idx.shape[0] - int(state.target_open_counts[i + 1])
        if n_commit > 0:
            if sched.mode is MaskMode.CTF:
                stay = ctf_probabilities(p_base, i + 1, n, sched.convention)[open_idx] * (1.0 - conf)
            else:
                stay = 1.0 - conf
            # commit the lowest stay-open scores; ties resolved by position
            order = np.lexsort((open_idx, stay))
            pick = order[:n_commit]
            state.current[open_idx[pick]] = chosen[pick]
            state.committed[open_idx[pick]] = 1
            state.confidences[open_idx[pick]] = conf[pick]
        state.step = i + 1

    assert not (state.current == mask_id).any()
    return state.current, trace


def write_decode_trace(trace: list[StepTrace], path, comment: str | None = None) -> None:
    """CSV ``step,open_count,mean_confidence``."""
    with open(path, "w") as fh:
        if comment is not None:
            fh.write(f"# {comment}\n")
        fh.write("step,open_count,mean_confidence\n")
        for row in trace:
            fh.write(f"{row.step},{row.open_count},{row.mean_confidence!r}\n")
