"""Experiment orchestration: end-to-end runs, step-count ablations, paired
masking-mode comparisons, and CSV emission.

Configuration is a flat key-value text file (``key = value`` per line,
``#`` comments). All randomness flows from the ``seed`` key: corpus, model
initialization, masking draws, evaluation corruption, and the corrector all
derive their streams from it, so a rerun with an identical config produces
byte-identical CSV artifacts. Every CSV starts with a config-hash comment
line for exact reproduction.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, fields, replace
from typing import Iterable

import numpy as np

from . import corpus as corpuslib
from .corrector import CorrectorModel, CorrectorTrainConfig, correct, train_corrector
from .corpus import Corpus, FrequencyTable, corrupt_sequence, frequency_table, generate_corpus, sequence_base_probabilities
from .decoder import StepTrace, decode
from .errors import ConfigError
from .predictor import (
    EpochStats,
    PredictorModel,
    TrainConfig,
    build_conditioning,
    train,
    write_learning_curve,
)
from .schedule import Convention, MaskMode, ScheduleConfig


@dataclass
class ExperimentConfig:
    seed: int
    vocab_size: int = 64
    num_docs: int = 512
    test_docs: int = 160
    seq_len: int = 96
    zipf_exponent: float = 1.2
    markov_order: int = 1
    n_steps: int = 10
    mask_mode: str = "uniform"  # uniform | ctf
    convention: str = "cos"  # cos | sin
    embed_dim: int = 32
    radius: int = 1
    lr: float = 1.5
    epochs: int = 16
    batch: int = 8
    rho: float = 0.3
    use_corrector: bool = False
    corrector_dim: int = 16
    corrector_radius: int = 2
    corrector_lr: float = 1.0
    corrector_epochs: int = 4
    corrector_rounds: int = 2
    theta: float = 0.5
    ablate_steps: tuple[int, ...] = (2, 10, 20, 40)
    seeds: tuple[int, ...] = (11, 12, 13, 14, 15)
    output_dir: str = "runs"


def _parse_bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _parse_int_tuple(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(",") if x.strip())


_PARSERS = {
    "seed": int,
    "vocab_size": int,
    "num_docs": int,
    "test_docs": int,
    "seq_len": int,
    "zipf_exponent": float,
    "markov_order": int,
    "n_steps": int,
    "mask_mode": str,
    "convention": str,
    "embed_dim": int,
    "radius": int,
    "lr": float,
    "epochs": int,
    "batch": int,
    "rho": float,
    "use_corrector": _parse_bool,
    "corrector_dim": int,
    "corrector_radius": int,
    "corrector_lr": float,
    "corrector_epochs": int,
    "corrector_rounds": int,
    "theta": float,
    "ablate_steps": _parse_int_tuple,
    "seeds": _parse_int_tuple,
    "output_dir": str,
}


def parse_config(text: str) -> ExperimentConfig:
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in _PARSERS:
            raise ConfigError(key, "unknown configuration key")
        try:
            values[key] = _PARSERS[key](raw)
        except ValueError as exc:
            raise ConfigError(key, f"cannot parse {raw!r}: {exc}") from None
    if "seed" not in values:
        raise ConfigError("seed", "seed is required; no wall-clock defaults")
    cfg = ExperimentConfig(**values)
    validate_config(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    if not os.path.exists(path):
        raise ConfigError("config", f"file not found: {path}")
    with open(path) as fh:
        return parse_config(fh.read())


def validate_config(cfg: ExperimentConfig) -> None:
    if cfg.mask_mode not in ("uniform", "ctf"):
        raise ConfigError("mask_mode", f"must be 'uniform' or 'ctf', got {cfg.mask_mode!r}")
    if cfg.convention not in ("cos", "sin"):
        raise ConfigError("convention", f"must be 'cos' or 'sin', got {cfg.convention!r}")
    if cfg.vocab_size < 2:
        raise ConfigError("vocab_size", f"must be >= 2, got {cfg.vocab_size}")
    if not 0.0 <= cfg.rho <= 1.0:
        raise ConfigError("rho", f"must be in [0,1], got {cfg.rho}")
    if not 0.0 <= cfg.theta <= 1.0:
        raise ConfigError("theta", f"must be in [0,1], got {cfg.theta}")
    if cfg.n_steps < 1:
        raise ConfigError("n_steps", f"must be >= 1, got {cfg.n_steps}")
    if cfg.n_steps > cfg.seq_len:
        raise ConfigError("n_steps", f"must not exceed seq_len ({cfg.seq_len}), got {cfg.n_steps}")


def serialize_config(cfg: ExperimentConfig) -> str:
    """Canonical text form: sorted keys, one per line."""
    lines = []
    for f in sorted(fields(cfg), key=lambda f: f.name):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    """Hash of the canonical config excluding output_dir, so the same
    experiment hashes identically wherever its artifacts land."""
    canonical = serialize_config(replace(cfg, output_dir=""))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def write_csv(path, header: str, rows: Iterable[tuple], cfg_hash: str) -> None:
    """All harness CSVs: config-hash comment, header row, repr-formatted floats."""
    with open(path, "w") as fh:
        fh.write(f"# config_hash={cfg_hash}\n")
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in row) + "\n")


# ---------------------------------------------------------------------------
# Metrics


@dataclass
class MetricsReport:
    overall_accuracy: float
    exact_match: float
    mean_edit_distance: float
    decile_accuracy: list[float]  # nan for empty buckets
    decile_counts: list[int]
    step_trace: list[tuple[int, float, float]]  # (step, mean open count, mean confidence)


def frequency_deciles(table: FrequencyTable) -> np.ndarray:
    """Decile index per token (0 = rarest) by document-frequency rank.

    Rank buckets partition the vocabulary into ten near-equal groups; ties
    in f are broken by token id so the partition is deterministic.
    """
    v = table.vocab_size
    order = np.lexsort((np.arange(v), table.doc_freq))
    deciles = np.empty(v, dtype=np.int64)
    deciles[order] = np.arange(v) * 10 // v
    return deciles


def edit_distance(a: np.ndarray, b: np.ndarray) -> int:
    """Levenshtein distance between two token sequences."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape[0] == 0:
        return int(b.shape[0])
    prev = np.arange(b.shape[0] + 1)
    idx = np.arange(b.shape[0] + 1)
    for i in range(1, a.shape[0] + 1):
        sub = prev[:-1] + (b != a[i - 1])
        best = np.minimum(prev[1:] + 1, sub)  # delete or substitute/match
        cur = np.empty_like(prev)
        cur[0] = i
        cur[1:] = best
        # insertion closes over prefixes: cur[j] = min_k<=j (cur[k] + j - k)
        cur = np.minimum.accumulate(cur - idx) + idx
        prev = cur
    return int(prev[-1])


@dataclass
class _EvalAccumulator:
    hits: int = 0
    total: int = 0
    exact: int = 0
    edit_sum: int = 0


def evaluate(
    model: PredictorModel,
    test_corpus: Corpus,
    freq: FrequencyTable,
    sched: ScheduleConfig,
    cfg: ExperimentConfig,
    eval_seed: int,
    corrector: CorrectorModel | None = None,
) -> MetricsReport:
    """Decode every held-out sequence and score against the clean tokens.

    Each sequence gets its own RNG stream derived from ``eval_seed``, so
    results do not depend on evaluation order or worker count.
    """
    deciles = frequency_deciles(freq)
    acc = _EvalAccumulator()
    dec_hits = np.zeros(10, dtype=np.int64)
    dec_total = np.zeros(10, dtype=np.int64)
    traces: list[list[StepTrace]] = []
    streams = np.random.SeedSequence(eval_seed).spawn(test_corpus.num_docs)

    for j in range(test_corpus.num_docs):
        rng = np.random.default_rng(streams[j])
        clean = test_corpus.tokens[j]
        if cfg.rho > 0:
            distorted = corrupt_sequence(clean, test_corpus.vocab_size, cfg.rho, rng)
        else:
            distorted = clean.copy()
        ctx = build_conditioning(distorted, model)
        p_base = sequence_base_probabilities(freq, distorted) if sched.mode is MaskMode.CTF else None
        decoded, trace = decode(model, ctx, sched, p_base=p_base)
        if corrector is not None:
            decoded = correct(decoded, model, ctx, corrector, cfg.theta, cfg.corrector_rounds)
        traces.append(trace)

        hit = decoded == clean
        acc.hits += int(hit.sum())
        acc.total += clean.shape[0]
        acc.exact += int(hit.all())
        acc.edit_sum += edit_distance(decoded, clean)
        np.add.at(dec_hits, deciles[clean], hit.astype(np.int64))
        np.add.at(dec_total, deciles[clean], 1)

    n = test_corpus.num_docs
    mean_trace = [
        (
            i,
            float(np.mean([t[i].open_count for t in traces])),
            float(np.mean([t[i].mean_confidence for t in traces])),
        )
        for i in range(sched.n_steps)
    ]
    decile_acc = [float(dec_hits[d] / dec_total[d]) if dec_total[d] else float("nan") for d in range(10)]
    return MetricsReport(
        overall_accuracy=acc.hits / acc.total,
        exact_match=acc.exact / n,
        mean_edit_distance=acc.edit_sum / n,
        decile_accuracy=decile_acc,
        decile_counts=[int(c) for c in dec_total],
        step_trace=mean_trace,
    )


# ---------------------------------------------------------------------------
# Pipelines


@dataclass
class TrainedPipeline:
    train_corpus: Corpus
    test_corpus: Corpus
    freq: FrequencyTable
    sched: ScheduleConfig
    model: PredictorModel
    history: list[EpochStats]
    corrector: CorrectorModel | None
    eval_seed: int


def derive_seeds(master: int) -> dict[str, int]:
    """Named sub-seeds for the pipeline stages, all derived from the master."""
    rng = np.random.default_rng(master)
    names = ("train_corpus", "test_corpus", "fit", "eval", "corrector")
    draws = rng.integers(0, 2**62, size=len(names))
    return {name: int(v) for name, v in zip(names, draws)}


def build_pipeline(cfg: ExperimentConfig, force_corrector: bool | None = None) -> TrainedPipeline:
    """Generate corpora, fit the predictor (and corrector if enabled)."""
    seeds = derive_seeds(cfg.seed)
    train_corpus = generate_corpus(
        cfg.vocab_size, cfg.num_docs, cfg.seq_len, cfg.zipf_exponent, cfg.markov_order, seeds["train_corpus"]
    )
    test_corpus = generate_corpus(
        cfg.vocab_size, cfg.test_docs, cfg.seq_len, cfg.zipf_exponent, cfg.markov_order, seeds["test_corpus"]
    )
    freq = frequency_table(train_corpus)
    sched = ScheduleConfig(
        n_steps=cfg.n_steps,
        mode=MaskMode(cfg.mask_mode),
        convention=Convention(cfg.convention),
        mask_token_id=cfg.vocab_size,
    )
    model, history = train(
        train_corpus,
        freq,
        sched,
        TrainConfig(
            lr=cfg.lr, epochs=cfg.epochs, batch=cfg.batch, rho=cfg.rho,
            seed=seeds["fit"], dim=cfg.embed_dim, radius=cfg.radius,
        ),
    )
    use_corr = cfg.use_corrector if force_corrector is None else force_corrector
    corrector = None
    if use_corr:
        corrector, _ = train_corrector(
            train_corpus,
            CorrectorTrainConfig(
                lr=cfg.corrector_lr, epochs=cfg.corrector_epochs, seed=seeds["corrector"],
                dim=cfg.corrector_dim, radius=cfg.corrector_radius,
            ),
        )
    return TrainedPipeline(
        train_corpus=train_corpus, test_corpus=test_corpus, freq=freq, sched=sched,
        model=model, history=history, corrector=corrector, eval_seed=seeds["eval"],
    )


def run_experiment(cfg: ExperimentConfig, out_dir: str | None = None) -> MetricsReport:
    """End-to-end run with all CSV artifacts written to the output directory."""
    validate_config(cfg)
    out = out_dir if out_dir is not None else cfg.output_dir
    os.makedirs(out, exist_ok=True)
    h = config_hash(cfg)

    pipe = build_pipeline(cfg)
    report = evaluate(pipe.model, pipe.test_corpus, pipe.freq, pipe.sched, cfg, pipe.eval_seed, pipe.corrector)

    write_csv(
        os.path.join(out, "metrics.csv"),
        "overall_accuracy,exact_match,mean_edit_distance",
        [(report.overall_accuracy, report.exact_match, report.mean_edit_distance)],
        h,
    )
    token_deciles = frequency_deciles(pipe.freq)
    write_csv(
        os.path.join(out, "deciles.csv"),
        "decile,token_count,position_count,accuracy",
        [
            (d, int((token_deciles == d).sum()), report.decile_counts[d], report.decile_accuracy[d])
            for d in range(10)
        ],
        h,
    )
    write_csv(
        os.path.join(out, "decode_trace.csv"),
        "step,open_count,mean_confidence",
        report.step_trace,
        h,
    )
    write_learning_curve(pipe.history, os.path.join(out, "learning_curve.csv"), comment=f"config_hash={h}")
    corpuslib.save_frequency_csv(pipe.freq, os.path.join(out, "frequency.csv"), comment=f"config_hash={h}")
    return report


def ablate_steps(cfg: ExperimentConfig, steps: Iterable[int] | None = None, out_dir: str | None = None) -> list[tuple[int, float, float]]:
    """One decode evaluation per step count, sharing the trained model and
    all seeds. Emits ``n_steps,accuracy,edit_distance``."""
    validate_config(cfg)
    step_list = tuple(steps) if steps is not None else cfg.ablate_steps
    if not step_list:
        raise ConfigError("ablate_steps", "need at least one step count")
    if min(step_list) < 1 or max(step_list) > cfg.seq_len:
        raise ConfigError("ablate_steps", "every step count must lie in [1, seq_len]")
    out = out_dir if out_dir is not None else cfg.output_dir
    os.makedirs(out, exist_ok=True)

    pipe = build_pipeline(cfg)
    rows = []
    for n in step_list:
        sched_n = replace(pipe.sched, n_steps=int(n))
        report = evaluate(pipe.model, pipe.test_corpus, pipe.freq, sched_n, cfg, pipe.eval_seed, pipe.corrector)
        rows.append((int(n), report.overall_accuracy, report.mean_edit_distance))
    write_csv(os.path.join(out, "ablate_steps.csv"), "n_steps,accuracy,edit_distance", rows, config_hash(cfg))
    return rows


def compare_masking_modes(cfg: ExperimentConfig, out_dir: str | None = None) -> dict[tuple[int, str, bool], MetricsReport]:
    """Four cells (uniform/ctf x corrector off/on) per seed, with shared
    corpora and seeds across cells. Returns reports keyed by
    (seed, mode, corrector_on) and writes summary plus per-decile CSVs."""
    validate_config(cfg)
    if not cfg.seeds:
        raise ConfigError("seeds", "need at least one seed for paired comparisons")
    out = out_dir if out_dir is not None else cfg.output_dir
    os.makedirs(out, exist_ok=True)
    h = config_hash(cfg)

    results: dict[tuple[int, str, bool], MetricsReport] = {}
    summary_rows = []
    decile_rows = []
    for seed in cfg.seeds:
        for mode in ("uniform", "ctf"):
            cell_cfg = replace(cfg, seed=int(seed), mask_mode=mode)
            pipe = build_pipeline(cell_cfg, force_corrector=True)
            for use_corr in (False, True):
                report = evaluate(
                    pipe.model, pipe.test_corpus, pipe.freq, pipe.sched, cell_cfg,
                    pipe.eval_seed, pipe.corrector if use_corr else None,
                )
                results[(int(seed), mode, use_corr)] = report
                bottom = report.decile_accuracy[0]
                summary_rows.append(
                    (int(seed), mode, int(use_corr), report.overall_accuracy,
                     report.exact_match, report.mean_edit_distance, bottom, report.decile_counts[0])
                )
                for d in range(10):
                    decile_rows.append(
                        (int(seed), mode, int(use_corr), d, report.decile_counts[d], report.decile_accuracy[d])
                    )
    write_csv(
        os.path.join(out, "compare_modes.csv"),
        "seed,mask_mode,corrector,overall_accuracy,exact_match,mean_edit_distance,bottom_decile_accuracy,bottom_decile_count",
        summary_rows,
        h,
    )
    write_csv(
        os.path.join(out, "compare_modes_deciles.csv"),
        "seed,mask_mode,corrector,decile,position_count,accuracy",
        decile_rows,
        h,
    )
    return results
