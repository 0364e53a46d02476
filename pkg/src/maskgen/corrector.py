"""Suspicion scoring for decoded sequences: detect likely-wrong tokens,
re-mask them, and route them back through the predictor.

The scorer shares the predictor's feature scheme -- embed each token,
concatenate a window of radius ``radius`` around the position -- but maps
the feature to a single logit per position. It is trained on synthetically
corrupted ground truth: for each training sequence a corruption rate is
drawn uniformly from (0, max_rate], that fraction of positions is
substituted at random, and the scorer learns to flag the substituted
positions with a binary cross-entropy objective and exact hand-derived
gradients.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .corpus import Corpus
from .decoder import decode
from .errors import NumericsError
from .predictor import ConditioningContext, PredictorModel, forward
from .schedule import ScheduleConfig, apply_mask

CORRECTOR_MAGIC = b"MGCORR\x00\x01"
CORRECTOR_VERSION = 1


@dataclass
class CorrectorModel:
    embedding: np.ndarray  # (V, D)
    w: np.ndarray  # (D*(2r+1),)
    b: float
    radius: int
    version: int = CORRECTOR_VERSION

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    @property
    def dim(self) -> int:
        return self.embedding.shape[1]


@dataclass
class CorrectorVerdict:
    suspicion: np.ndarray  # (T,) in (0, 1)
    threshold: float
    remask: np.ndarray  # (T,) int8; 1 where suspicion > threshold


@dataclass
class CorrectorTrainConfig:
    lr: float
    epochs: int
    seed: int
    dim: int = 16
    radius: int = 2
    max_rate: float = 0.3


@dataclass
class CorrectorEpochStats:
    epoch: int
    loss_per_position: float


def init_corrector(vocab_size: int, dim: int, radius: int, rng: np.random.Generator) -> CorrectorModel:
    feat = dim * (2 * radius + 1)
    return CorrectorModel(
        embedding=0.1 * rng.standard_normal((vocab_size, dim)),
        w=(0.1 / np.sqrt(feat)) * rng.standard_normal(feat),
        b=0.0,
        radius=radius,
    )


def corrupt_for_training(
    clean: np.ndarray,
    vocab_size: int,
    max_rate: float,
    rng: np.random.Generator,
    rate: float | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Substitute a random fraction of positions and return the labels.

    The fraction is drawn uniformly from (0, max_rate] per call unless
    ``rate`` pins it. Substituted positions always receive a different
    token and carry label 1.
    """
    if not 0.0 < max_rate <= 1.0:
        raise ValueError(f"max_rate must be in (0, 1], got {max_rate}")
    clean = np.asarray(clean, dtype=np.int64)
    u = float(rng.uniform(0.0, max_rate)) if rate is None else float(rate)
    t = clean.shape[0]
    if u == 0.0:
        return clean.copy(), np.zeros(t, dtype=np.int8)
    hit = rng.random(t) < u
    offsets = rng.integers(1, vocab_size, size=t)
    corrupted = clean.copy()
    corrupted[hit] = (clean[hit] + offsets[hit]) % vocab_size
    return corrupted, hit.astype(np.int8)


def _features(model: CorrectorModel, tokens: np.ndarray) -> np.ndarray:
    r, d = model.radius, model.dim
    u = model.embedding[tokens]
    t = u.shape[0]
    padded = np.zeros((t + 2 * r, d))
    padded[r : r + t] = u
    return np.concatenate([padded[c : c + t] for c in range(2 * r + 1)], axis=1)


def suspicion_scores(model: CorrectorModel, tokens: np.ndarray) -> np.ndarray:
    """Per-position probability-of-corruption via sigmoid of the logits."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.min(initial=0) < 0 or tokens.max(initial=0) >= model.vocab_size:
        raise ValueError("token id outside [0, vocab_size)")
    logits = _features(model, tokens) @ model.w + model.b
    return 1.0 / (1.0 + np.exp(-logits))


def bce_loss_and_grads(
    model: CorrectorModel, tokens: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray, float]:
    """Summed binary cross entropy with gradients (embedding, w, b)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    y = np.asarray(labels, dtype=np.float64)
    feats = _features(model, tokens)
    logits = feats @ model.w + model.b
    # stable: ln sigma(s) = -softplus(-s), ln(1-sigma(s)) = -softplus(s)
    loss = float((y * np.logaddexp(0.0, -logits) + (1.0 - y) * np.logaddexp(0.0, logits)).sum())

    dlogits = 1.0 / (1.0 + np.exp(-logits)) - y
    g_w = feats.T @ dlogits
    g_b = float(dlogits.sum())

    r, d = model.radius, model.dim
    t = tokens.shape[0]
    dfeats = np.outer(dlogits, model.w).reshape(t, 2 * r + 1, d)
    du = np.zeros((t, d))
    for c in range(2 * r + 1):
        k = c - r
        t_lo, t_hi = max(0, -k), min(t, t - k)
        if t_lo < t_hi:
            du[t_lo + k : t_hi + k] += dfeats[t_lo:t_hi, c]
    g_e = np.zeros_like(model.embedding)
    np.add.at(g_e, tokens, du)
    return loss, g_e, g_w, g_b


def train_corrector(
    corpus: Corpus, hyper: CorrectorTrainConfig
) -> tuple[CorrectorModel, list[CorrectorEpochStats]]:
    """Per-sequence SGD on the substitution-detection objective."""
    rng = np.random.default_rng(hyper.seed)
    model = init_corrector(corpus.vocab_size, hyper.dim, hyper.radius, rng)
    n, t = corpus.num_docs, corpus.seq_len
    history: list[CorrectorEpochStats] = []
    for epoch in range(hyper.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for j in order:
            corrupted, labels = corrupt_for_training(
                corpus.tokens[j], corpus.vocab_size, hyper.max_rate, rng
            )
            loss, g_e, g_w, g_b = bce_loss_and_grads(model, corrupted, labels)
            if not np.isfinite(loss):
                raise NumericsError(f"non-finite corrector loss {loss} at epoch {epoch}, example {j}")
            scale = hyper.lr / t
            model.embedding -= scale * g_e
            model.w -= scale * g_w
            model.b -= scale * g_b
            epoch_loss += loss
        history.append(CorrectorEpochStats(epoch=epoch, loss_per_position=epoch_loss / (n * t)))
    return model, history


def detect_and_remask(tokens: np.ndarray, model: CorrectorModel, threshold: float) -> CorrectorVerdict:
    """Flag positions whose suspicion exceeds the threshold.

    Suspicion lives in the open interval (0, 1), so threshold 1 never
    flags anything and threshold 0 flags everything.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    s = suspicion_scores(model, tokens)
    return CorrectorVerdict(suspicion=s, threshold=threshold, remask=(s > threshold).astype(np.int8))


def correct(
    decoded: np.ndarray,
    predictor: PredictorModel,
    ctx: ConditioningContext,
    corrector: CorrectorModel,
    threshold: float,
    rounds: int,
    rng: np.random.Generator | None = None,
    full_decode: ScheduleConfig | None = None,
    p_base: np.ndarray | None = None,
) -> np.ndarray:
    """Re-mask suspicious positions and refill them, up to ``rounds`` times.

    Each round scores the current sequence, masks every flagged position,
    and refills with a single argmax pass of the predictor (or a full
    multi-step decode when ``full_decode`` is given). Stops early when
    nothing is flagged or a round leaves the sequence unchanged (a fixed
    point: identical input would be flagged and refilled identically).
    Positions never flagged are never modified; rounds=0 is the identity.
    """
    if rounds < 0:
        raise ValueError(f"rounds must be >= 0, got {rounds}")
    current = np.asarray(decoded, dtype=np.int64).copy()
    mask_id = predictor.mask_token_id
    for _ in range(rounds):
        verdict = detect_and_remask(current, corrector, threshold)
        if not verdict.remask.any():
            break
        masked = apply_mask(current, verdict.remask, mask_id)
        if full_decode is not None:
            refilled, _ = decode(
                predictor, ctx, full_decode, rng=rng, p_base=p_base, initial=masked
            )
        else:
            pred = forward(predictor, masked, ctx)
            refilled = masked.copy()
            flagged = verdict.remask == 1
            refilled[flagged] = pred.probs[flagged].argmax(axis=1)
        if np.array_equal(refilled, current):
            break
        current = refilled
    return current


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank-based AUC (tie-aware Mann-Whitney)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative examples")
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    cum = np.cumsum(counts)
    mean_rank = (cum - counts + 1 + cum) / 2.0
    ranks = mean_rank[inverse]
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# Checkpoints: same layout family as the predictor, distinct magic.


def save_corrector(model: CorrectorModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(CORRECTOR_MAGIC)
        fh.write(struct.pack("<4I", model.version, model.vocab_size, model.dim, model.radius))
        fh.write(model.embedding.astype("<f8").tobytes())
        fh.write(model.w.astype("<f8").tobytes())
        fh.write(struct.pack("<d", model.b))


def load_corrector(path) -> CorrectorModel:
    with open(path, "rb") as fh:
        magic = fh.read(len(CORRECTOR_MAGIC))
        if magic != CORRECTOR_MAGIC:
            raise ValueError(f"not a corrector checkpoint (magic {magic!r})")
        version, v, d, r = struct.unpack("<4I", fh.read(16))
        if version != CORRECTOR_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        feat = d * (2 * r + 1)
        embedding = np.frombuffer(fh.read(8 * (v * d)), dtype="<f8").reshape(v, d).astype(np.float64)
        w = np.frombuffer(fh.read(8 * feat), dtype="<f8").astype(np.float64)
        (b,) = struct.unpack("<d", fh.read(8))
        return CorrectorModel(embedding=embedding, w=w, b=b, radius=r, version=version)
