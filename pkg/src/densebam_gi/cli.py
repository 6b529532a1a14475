"""Command-line entry point: train, eval, ablate, gradcheck, attention-dump."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .data import Vocabulary, generate_synthetic, load_inkml_dir, split
from .data.dataset import write_pgm
from .data.ink import InkmlError
from .data.vocab import detokenize
from .model import DenseBamGI
from .tensor import ContractError

log = logging.getLogger("densebam_gi")

EXIT_OK, EXIT_CONTRACT, EXIT_IO = 0, 1, 2


# ---------------------------------------------------------------- shared plumbing


def load_samples(cfg: ExperimentConfig, vocab: Vocabulary) -> list:
    d = cfg.data
    if d.source == "synthetic":
        return generate_synthetic(cfg.seed, d.count, d.grammar_depth, vocab, d.target_height, d.stroke_width,
                                  pad_multiple=d.pad_multiple)
    return load_inkml_dir(d.inkml_dir, vocab, d.target_height, d.stroke_width, d.pad_multiple)


def prepare_data(cfg: ExperimentConfig, vocab: Vocabulary) -> tuple[list, list]:
    """Seeded train/validation split of the configured dataset."""
    return split(load_samples(cfg, vocab), cfg.seed, cfg.data.val_fraction)


def build_model(cfg: ExperimentConfig, vocab: Vocabulary) -> DenseBamGI:
    return DenseBamGI(cfg.encoder, cfg.decoder_config(), len(vocab), seed=cfg.seed,
                      sos_id=vocab.sos_id, eos_id=vocab.eos_id)


def resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"output_dir={json.dumps(str(args.out))}")
    return cfg.with_overrides(overrides) if overrides else cfg


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_weights(model: DenseBamGI, path) -> None:
    if not path:
        raise ContractError("--checkpoint is required for this command")
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    model.load(path)


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- commands


def cmd_train(cfg: ExperimentConfig) -> int:
    from .training import train

    vocab = Vocabulary()
    train_set, val_set = prepare_data(cfg, vocab)
    out = _out_dir(cfg)
    cfg.save(out / "config.json")
    model = build_model(cfg, vocab)
    result = train(model, train_set, val_set, cfg.train_config(), out_dir=out)
    model.save(out / "final.ckpt")
    status = "diverged" if result.diverged else "ok"
    print(f"{status}: {len(result.history)} epochs, best exprate {result.best_exprate:.2f} "
          f"at epoch {result.best_epoch}; outputs in {out}")
    return EXIT_OK


def cmd_eval(cfg: ExperimentConfig, checkpoint, mode: str = "greedy", beam_width: int = 5) -> int:
    from .training import compute_report
    from .data.dataset import batches, collate

    vocab = Vocabulary()
    train_set, val_set = prepare_data(cfg, vocab)
    samples = val_set or train_set
    model = build_model(cfg, vocab)
    _load_weights(model, checkpoint)
    preds, refs = [], []
    for chunk in batches(samples, cfg.train.batch_size):
        images, _, _ = collate(chunk)
        res = model.recognize(images, cfg.train.max_decode_len, mode, beam_width)
        preds += res.tokens
        refs += [s.body for s in chunk]
    report = compute_report(preds, refs)
    out = _out_dir(cfg)
    _write_json(out / "eval.json", {"seed": cfg.seed, "checkpoint": str(checkpoint), "samples": len(samples),
                                    "decoding": mode, **report.to_dict()})
    print(f"exprate {report.exprate:.2f}  wer {report.wer:.2f}  <=1 {report.le1:.2f}  <=2 {report.le2:.2f}  "
          f"<=3 {report.le3:.2f}  ({len(samples)} samples)")
    return EXIT_OK


def cmd_ablate(cfg: ExperimentConfig, axis: str) -> int:
    from .training import ablation_variants, run_ablation, write_ablation_csv

    vocab = Vocabulary()
    variants = ablation_variants(axis, cfg.encoder, cfg.decoder_config())
    train_set, val_set = prepare_data(cfg, vocab)
    tcfg = cfg.train_config()
    # no clipping here, so divergence can show up as a result
    tcfg.grad_clip = None
    rows = run_ablation(variants, train_set, val_set, tcfg, len(vocab), model_seed=cfg.seed)
    out = _out_dir(cfg)
    write_ablation_csv(rows, out / f"ablation_{axis}.csv")
    _write_json(out / f"ablation_{axis}.json", {
        "seed": cfg.seed, "axis": axis,
        "rows": [{"variant": r.variant, "diverged": r.diverged, "epochs": r.epochs,
                  "epochs_to_loss_0.5": r.epochs_to_loss, "final_token_nll": r.final_token_nll,
                  "report": r.report.to_dict() if r.report else None} for r in rows]})
    for r in rows:
        shown = "diverged" if r.diverged else f"exprate {r.report.exprate:.2f}"
        print(f"{r.variant:10s} {shown}  epochs-to-loss-0.5 {r.epochs_to_loss}")
    return EXIT_OK


def cmd_gradcheck(seed: int = 0) -> int:
    from .gradcheck import run_all

    results = run_all(seed=seed, log=print)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} suites passed")
    return EXIT_OK if not failed else EXIT_CONTRACT


def attention_heatmap(alpha: np.ndarray, height: int, width: int) -> np.ndarray:
    """Scale one attention map to 0..255 (peak weight -> 255) and upsample it to the image size."""
    grid = np.asarray(alpha, dtype=np.float64)
    peak = grid.max()
    scaled = np.zeros_like(grid) if peak <= 0 else grid / peak
    rows = np.minimum(np.arange(height) * grid.shape[0] // height, grid.shape[0] - 1)
    cols = np.minimum(np.arange(width) * grid.shape[1] // width, grid.shape[1] - 1)
    return np.rint(scaled[np.ix_(rows, cols)] * 255).astype(np.uint8)


def cmd_attention_dump(cfg: ExperimentConfig, checkpoint, index: int) -> int:
    vocab = Vocabulary()
    samples = load_samples(cfg, vocab)
    if not 0 <= index < len(samples):
        raise ContractError(f"sample index {index} outside dataset of {len(samples)}")
    model = build_model(cfg, vocab)
    _load_weights(model, checkpoint)
    sample = samples[index]
    image = sample.image[None]
    res = model.recognize(image, cfg.train.max_decode_len)
    text = detokenize(res.tokens[0], vocab)
    out = _out_dir(cfg) / f"attention_{index:04d}"
    out.mkdir(parents=True, exist_ok=True)
    _, h, w = sample.image.shape
    for t, alpha in enumerate(res.alphas[0]):
        write_pgm(out / f"step_{t:03d}.pgm", attention_heatmap(alpha, h, w))
    write_pgm(out / "input.pgm", np.rint(255 * (1 - sample.image[0])).astype(np.uint8))
    (out / "prediction.txt").write_text(text + "\n", encoding="utf-8")
    _write_json(out / "meta.json", {"seed": cfg.seed, "index": index, "reference": sample.label,
                                    "prediction": text, "steps": len(res.alphas[0]),
                                    "truncated": res.truncated[0]})
    print(f"{len(res.alphas[0])} attention maps and prediction written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="densebam-gi", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment config (defaults if omitted)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key by dotted path, e.g. train.lr=1e-3 (repeatable)")
    common.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
    common.add_argument("--seed", type=int, help="root seed (overrides seed)")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train and write checkpoints, metrics CSV and report")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the validation split")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--beam", type=int, default=0, metavar="WIDTH", help="beam search width (0 = greedy)")
    ab = sub.add_parser("ablate", parents=[common], help="train every variant along one ablation axis")
    ab.add_argument("--axis", required=True, choices=["bam_position", "layer_counts", "decoder"])
    sub.add_parser("gradcheck", parents=[common], help="run every finite-difference gradient suite")
    dump = sub.add_parser("attention-dump", parents=[common], help="write per-step attention heatmaps")
    dump.add_argument("--checkpoint", required=True)
    dump.add_argument("--index", type=int, default=0, help="sample index in the configured dataset")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(args.seed or 0)
        cfg = resolve_config(args)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            mode = "beam" if args.beam > 0 else "greedy"
            return cmd_eval(cfg, args.checkpoint, mode, max(args.beam, 1))
        if args.command == "ablate":
            return cmd_ablate(cfg, args.axis)
        return cmd_attention_dump(cfg, args.checkpoint, args.index)
    except (OSError, InkmlError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # ContractError and ConfigError are ValueErrors: any invalid input is a contract violation
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
