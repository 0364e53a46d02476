"""Command-line interface.

Subcommands: gen-corpus, train, train-corrector, decode, eval,
ablate-steps, compare-modes, dump-schedule. Flags mirror the experiment
config keys; any subcommand that draws randomness requires an explicit
seed (from the config file or --seed). Exit codes: 0 success, 2 config
error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from . import corpus as corpuslib
from . import corrector as corrlib
from . import decoder as declib
from . import harness, predictor
from .errors import ConfigError, NumericsError
from .schedule import Convention, MaskMode, ScheduleConfig, dump_schedule_rows


def _load_cfg(args) -> harness.ExperimentConfig:
    if args.config:
        cfg = harness.load_config(args.config)
    else:
        if getattr(args, "seed", None) is None:
            raise ConfigError("seed", "give --config or --seed")
        cfg = harness.ExperimentConfig(seed=args.seed)
    for key in harness._PARSERS:
        flag = getattr(args, key, None)
        if flag is not None and key != "seed":
            cfg = replace(cfg, **{key: flag})
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "output_dir", None) is not None:
        cfg = replace(cfg, output_dir=args.output_dir)
    harness.validate_config(cfg)
    return cfg


def _cmd_gen_corpus(args) -> int:
    corpus = corpuslib.generate_corpus(
        args.vocab_size, args.num_docs, args.seq_len, args.zipf_exponent, args.markov_order, args.seed
    )
    corpuslib.save_corpus(corpus, args.out)
    print(f"wrote {corpus.num_docs} sequences of length {corpus.seq_len} to {args.out}")
    if args.freq_csv:
        corpuslib.save_frequency_csv(corpuslib.frequency_table(corpus), args.freq_csv)
        print(f"wrote frequency table to {args.freq_csv}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_cfg(args)
    os.makedirs(cfg.output_dir, exist_ok=True)
    pipe = harness.build_pipeline(cfg, force_corrector=False)
    model_path = args.model_out or os.path.join(cfg.output_dir, "predictor.bin")
    predictor.save_predictor(pipe.model, model_path)
    h = harness.config_hash(cfg)
    predictor.write_learning_curve(
        pipe.history, os.path.join(cfg.output_dir, "learning_curve.csv"), comment=f"config_hash={h}"
    )
    corpuslib.save_frequency_csv(
        pipe.freq, os.path.join(cfg.output_dir, "frequency.csv"), comment=f"config_hash={h}"
    )
    last = pipe.history[-1]
    print(f"trained predictor -> {model_path} (loss/token {last.loss_per_token:.4f}, masked acc {last.masked_acc:.4f})")
    return 0


def _cmd_train_corrector(args) -> int:
    cfg = _load_cfg(args)
    os.makedirs(cfg.output_dir, exist_ok=True)
    seeds = harness.derive_seeds(cfg.seed)
    corpus = corpuslib.generate_corpus(
        cfg.vocab_size, cfg.num_docs, cfg.seq_len, cfg.zipf_exponent, cfg.markov_order, seeds["train_corpus"]
    )
    model, history = corrlib.train_corrector(
        corpus,
        corrlib.CorrectorTrainConfig(
            lr=cfg.corrector_lr, epochs=cfg.corrector_epochs, seed=seeds["corrector"],
            dim=cfg.corrector_dim, radius=cfg.corrector_radius,
        ),
    )
    path = args.model_out or os.path.join(cfg.output_dir, "corrector.bin")
    corrlib.save_corrector(model, path)
    print(f"trained corrector -> {path} (loss/position {history[-1].loss_per_position:.4f})")
    return 0


def _cmd_decode(args) -> int:
    model = predictor.load_predictor(args.model)
    observations = corpuslib.load_corpus(args.input)
    if observations.vocab_size != model.vocab_size:
        raise ConfigError("input", f"corpus vocab {observations.vocab_size} != model vocab {model.vocab_size}")
    if args.selection == "sample" and args.seed is None:
        raise ConfigError("seed", "--seed is required with --selection sample")
    freq = corpuslib.load_frequency_csv(args.freq_csv) if args.freq_csv else None
    mode = MaskMode(args.mask_mode)
    if mode is MaskMode.CTF and freq is None:
        raise ConfigError("freq_csv", "--freq-csv is required for ctf decoding")
    corrector = corrlib.load_corrector(args.corrector) if args.corrector else None
    sched = ScheduleConfig(
        n_steps=args.n_steps, mode=mode, convention=Convention(args.convention),
        mask_token_id=model.vocab_size,
    )
    streams = np.random.SeedSequence(args.seed if args.seed is not None else 0).spawn(observations.num_docs)
    decoded = np.empty_like(observations.tokens)
    last_trace: list[declib.StepTrace] = []
    for j in range(observations.num_docs):
        rng = np.random.default_rng(streams[j])
        ctx = predictor.build_conditioning(observations.tokens[j], model)
        p_base = corpuslib.sequence_base_probabilities(freq, observations.tokens[j]) if freq is not None else None
        out, last_trace = declib.decode(
            model, ctx, sched, selection=args.selection, rng=rng,
            temperature=args.temperature, p_base=p_base,
        )
        if corrector is not None:
            out = corrlib.correct(
                out, model, ctx, corrector, args.theta, args.rounds,
                rng=rng, full_decode=sched if args.refill == "full" else None, p_base=p_base,
            )
        decoded[j] = out
    corpuslib.save_corpus(
        corpuslib.Corpus(tokens=decoded, vocab_size=model.vocab_size, seed=args.seed or 0), args.out
    )
    if args.trace:
        declib.write_decode_trace(last_trace, args.trace)
    print(f"decoded {observations.num_docs} sequences -> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    report = harness.run_experiment(cfg)
    print(f"overall_accuracy {report.overall_accuracy:.4f}")
    print(f"exact_match {report.exact_match:.4f}")
    print(f"mean_edit_distance {report.mean_edit_distance:.3f}")
    print(f"artifacts in {cfg.output_dir}")
    return 0


def _cmd_ablate_steps(args) -> int:
    cfg = _load_cfg(args)
    steps = harness._parse_int_tuple(args.steps) if args.steps else None
    rows = harness.ablate_steps(cfg, steps)
    for n, acc, edit in rows:
        print(f"n_steps {n:4d}  accuracy {acc:.4f}  edit_distance {edit:.3f}")
    return 0


def _cmd_compare_modes(args) -> int:
    cfg = _load_cfg(args)
    results = harness.compare_masking_modes(cfg)
    for (seed, mode, corr), report in sorted(results.items()):
        tag = f"{mode}+corrector" if corr else mode
        print(
            f"seed {seed}  {tag:18s} overall {report.overall_accuracy:.4f}  "
            f"bottom-decile {report.decile_accuracy[0]:.4f}"
        )
    return 0


def _cmd_dump_schedule(args) -> int:
    sched = ScheduleConfig(n_steps=args.n_steps, convention=Convention(args.convention))
    rows = dump_schedule_rows(sched, args.seq_len)
    with open(args.out, "w") as fh:
        fh.write(f"# n_steps={args.n_steps} seq_len={args.seq_len} convention={args.convention}\n")
        fh.write("step,expected_masked,convention\n")
        for step, expected, conv in rows:
            fh.write(f"{step},{expected!r},{conv}\n")
    print(f"wrote schedule ({args.n_steps} steps, {args.convention}) to {args.out}")
    return 0


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config file (key = value lines)")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--output-dir", dest="output_dir", help="artifact directory")
    for key, parser_fn in harness._PARSERS.items():
        if key in ("seed", "output_dir"):
            continue
        flag = "--" + key.replace("_", "-")
        if parser_fn is harness._parse_bool:
            p.add_argument(flag, dest=key, type=harness._parse_bool, default=None)
        elif parser_fn is harness._parse_int_tuple:
            p.add_argument(flag, dest=key, type=harness._parse_int_tuple, default=None)
        else:
            p.add_argument(flag, dest=key, type=parser_fn, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maskgen", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate a synthetic corpus file")
    p.add_argument("--vocab-size", type=int, required=True)
    p.add_argument("--num-docs", type=int, required=True)
    p.add_argument("--seq-len", type=int, required=True)
    p.add_argument("--zipf-exponent", type=float, default=1.2)
    p.add_argument("--markov-order", type=int, default=1, choices=(0, 1))
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--freq-csv", help="also write the frequency table CSV")
    p.set_defaults(fn=_cmd_gen_corpus)

    p = sub.add_parser("train", help="train the masked-token predictor")
    _add_config_flags(p)
    p.add_argument("--model-out", help="checkpoint path (default <output_dir>/predictor.bin)")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("train-corrector", help="train the suspicion scorer")
    _add_config_flags(p)
    p.add_argument("--model-out", help="checkpoint path (default <output_dir>/corrector.bin)")
    p.set_defaults(fn=_cmd_train_corrector)

    p = sub.add_parser("decode", help="decode a corpus of distorted observations")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True, help="corpus file of observations")
    p.add_argument("--out", required=True)
    p.add_argument("--n-steps", type=int, default=10)
    p.add_argument("--mask-mode", choices=("uniform", "ctf"), default="uniform")
    p.add_argument("--convention", choices=("cos", "sin"), default="cos")
    p.add_argument("--freq-csv", help="frequency table (required for ctf)")
    p.add_argument("--selection", choices=("greedy", "sample"), default="greedy")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--corrector", help="optional corrector checkpoint")
    p.add_argument("--theta", type=float, default=0.5)
    p.add_argument("--rounds", type=int, default=2)
    p.add_argument("--refill", choices=("single", "full"), default="single",
                   help="refill re-masked positions with one argmax pass or a full decode")
    p.add_argument("--seed", type=int, help="required for --selection sample")
    p.add_argument("--trace", help="write the last sequence's decode trace CSV")
    p.set_defaults(fn=_cmd_decode)

    p = sub.add_parser("eval", help="end-to-end experiment with metric CSVs")
    _add_config_flags(p)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("ablate-steps", help="accuracy vs decode step count")
    _add_config_flags(p)
    p.add_argument("--steps", help="comma-separated step counts (default from config)")
    p.set_defaults(fn=_cmd_ablate_steps)

    p = sub.add_parser("compare-modes", help="uniform vs ctf, corrector off/on")
    _add_config_flags(p)
    p.set_defaults(fn=_cmd_compare_modes)

    p = sub.add_parser("dump-schedule", help="expected masked count per step")
    p.add_argument("--n-steps", type=int, required=True)
    p.add_argument("--seq-len", type=int, required=True)
    p.add_argument("--convention", choices=("cos", "sin"), default="cos")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_dump_schedule)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericsError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
