"""Command-line pipeline: gendata, train, infer, analyze.

Exit codes: 0 success, 2 config/usage error, 3 I/O or join error,
4 numerical abort.  Errors print a single machine-parsable line to stderr:
``ERROR code=N msg=...``.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import analysis, synthdata
from .channel import write_sentences
from .config import AnalysisConfig, ConfigError, load_run_config
from .grad import NonFiniteError, Tensor
from .model import CheckpointError, SegmentationModel, load_checkpoint, save_checkpoint
from .training import TrainAbort, dsc, predict, train, write_epoch_reports

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse usage errors -> our error format
        print(f"ERROR code={EXIT_CONFIG} msg={message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _build_parser() -> _Parser:
    parser = _Parser(
        prog="symseg",
        description="Symbol-channel segmentation: data, training, inference, analysis.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("gendata", formatter_class=fmt,
                       help="generate a synthetic phantom dataset")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--n", type=int, default=None,
                   help="sample count (overrides config n_samples)")

    p = sub.add_parser("train", formatter_class=fmt,
                       help="train a model on a dataset directory")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--ablate-channel", action="store_true",
                   help="train the backbone-only baseline (no symbol channel)")
    p.add_argument("--epochs", type=int, default=None,
                   help="epoch count (overrides config)")
    p.add_argument("--seed", type=int, default=None,
                   help="seed (overrides config)")

    p = sub.add_parser("infer", formatter_class=fmt,
                       help="run inference over a dataset directory")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", default=None,
                   help="optional run config JSON cross-checked against the checkpoint")

    p = sub.add_parser("analyze", formatter_class=fmt,
                       help="regress symbols against outcomes and mine prefixes")
    p.add_argument("--sentences", required=True, help="sentences JSONL path")
    p.add_argument("--stats", required=True, help="stats CSV path")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--min-count", type=int, default=AnalysisConfig.min_count,
                   help="pool symbols rarer than this per position")
    p.add_argument("--max-k", type=int, default=AnalysisConfig.max_k,
                   help="maximum prefix length to mine")
    p.add_argument("--min-coverage", type=float, default=AnalysisConfig.min_coverage,
                   help="minimum class coverage for a mined prefix")
    p.add_argument("--min-purity", type=float, default=AnalysisConfig.min_purity,
                   help="minimum class purity for a mined prefix")
    return parser


def _load_config(path: str):
    try:
        return load_run_config(path)
    except FileNotFoundError:
        raise CliError(EXIT_IO, f"config file not found: {path}")
    except ConfigError as e:
        raise CliError(EXIT_CONFIG, str(e))


def _load_dataset(path: str):
    try:
        return synthdata.load_dataset(path)
    except FileNotFoundError as e:
        raise CliError(EXIT_IO, f"dataset not found: {e}")
    except (ValueError, synthdata.PgmError) as e:
        raise CliError(EXIT_IO, str(e))


def cmd_gendata(args) -> int:
    cfg = _load_config(args.config)
    n = args.n if args.n is not None else cfg.n_samples
    try:
        samples = synthdata.generate(n, cfg.data, cfg.seed)
        synthdata.save_dataset(args.out, samples)
    except synthdata.GenerationError as e:
        raise CliError(EXIT_CONFIG, str(e))
    except OSError as e:
        raise CliError(EXIT_IO, str(e))
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def _split(samples, val_fraction: float):
    n_val = int(round(len(samples) * val_fraction))
    if n_val == 0:
        return samples, []
    return samples[:-n_val], samples[-n_val:]


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    if args.seed is not None:
        cfg.train.seed = args.seed
    samples = _load_dataset(args.data)
    if not samples:
        raise CliError(EXIT_IO, f"dataset at {args.data} is empty")
    train_samples, val_samples = _split(samples, cfg.train.val_fraction)

    channel_cfg = None if args.ablate_channel else cfg.channel
    model = SegmentationModel(cfg.backbone, channel_cfg, seed=cfg.train.seed)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)

    def hook(epoch: int, m: SegmentationModel) -> None:
        save_checkpoint(f"{args.out}.epoch{epoch}", m)

    try:
        reports = train(model, train_samples, val_samples, cfg.train,
                        checkpoint_hook=hook)
    except TrainAbort as e:
        raise CliError(EXIT_NUMERIC, str(e))
    try:
        save_checkpoint(args.out, model)
        write_epoch_reports(os.path.join(out_dir, "epochs.csv"), reports)
    except OSError as e:
        raise CliError(EXIT_IO, str(e))
    best = max((r.val_dsc for r in reports), default=0.0)
    print(f"trained {cfg.train.epochs} epochs; best val DSC {best:.4f}; "
          f"checkpoint {args.out}")
    return 0


def cmd_infer(args) -> int:
    try:
        model = load_checkpoint(args.model)
    except FileNotFoundError:
        raise CliError(EXIT_IO, f"checkpoint not found: {args.model}")
    except CheckpointError as e:
        raise CliError(EXIT_CONFIG, str(e))
    if args.config is not None:
        cfg = _load_config(args.config)
        if model.channel_cfg is not None and cfg.channel.n_words != model.channel_cfg.n_words:
            raise CliError(
                EXIT_CONFIG,
                f"checkpoint sentence length {model.channel_cfg.n_words} != "
                f"config {cfg.channel.n_words}",
            )
    samples = _load_dataset(args.data)
    if not samples:
        raise CliError(EXIT_IO, f"dataset at {args.data} is empty")

    os.makedirs(args.out, exist_ok=True)
    sentence_records = []
    dsc_rows = []
    batch = 8
    for start in range(0, len(samples), batch):
        chunk = samples[start:start + batch]
        images = np.stack([s.image for s in chunk])[:, None, :, :]
        try:
            masks, message, _ = predict(model, images)
        except NonFiniteError as e:
            raise CliError(EXIT_NUMERIC, str(e))
        for i, s in enumerate(chunk):
            pred = masks[i, 0]
            stem = os.path.join(args.out, f"{s.sample_id}_{s.slice_index}")
            synthdata.write_pgm(f"{stem}.pred.pgm", pred.astype(np.uint8) * 255)
            dsc_rows.append((s.sample_id, s.slice_index, dsc(pred, s.mask)))
            if message is not None:
                sentence_records.append({
                    "sample_id": s.sample_id,
                    "slice_index": s.slice_index,
                    "ids": message.ids[i].tolist(),
                    "mode": "infer",
                })
    with open(os.path.join(args.out, "sentences.jsonl"), "w") as fp:
        write_sentences(fp, sentence_records)
    with open(os.path.join(args.out, "dsc.csv"), "w") as fp:
        fp.write("sample_id,slice,dsc\n")
        for sid, sl, value in dsc_rows:
            fp.write(f"{sid},{sl},{value!r}\n")
    mean_dsc = float(np.mean([v for _, _, v in dsc_rows]))
    print(f"inferred {len(samples)} samples; mean DSC {mean_dsc:.4f}")
    return 0


def cmd_analyze(args) -> int:
    try:
        log = analysis.load_log(args.sentences, args.stats)
    except FileNotFoundError as e:
        raise CliError(EXIT_IO, str(e))
    except (analysis.JoinError, ValueError) as e:
        raise CliError(EXIT_IO, str(e))

    os.makedirs(args.out, exist_ok=True)
    reports = analysis.table2_report(log, min_count=args.min_count)
    analysis.write_table2_csv(os.path.join(args.out, "table2.csv"), reports)
    labels = ["tumor" if r.present else "normal" for r in log.records]
    summary = analysis.mine_prefixes([r.ids for r in log.records], labels,
                                     max_k=args.max_k,
                                     min_coverage=args.min_coverage,
                                     min_purity=args.min_purity)
    analysis.write_patterns(os.path.join(args.out, "patterns.txt"), summary)
    fitted = sum(not r.skipped for r in reports)
    print(f"analyzed {len(log.records)} records; {fitted} outcomes fitted")
    return 0


_COMMANDS = {
    "gendata": cmd_gendata,
    "train": cmd_train,
    "infer": cmd_infer,
    "analyze": cmd_analyze,
}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except CliError as e:
        print(f"ERROR code={e.code} msg={e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
