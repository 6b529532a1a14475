"""Objective, optimizer, learning-rate schedule, metrics and the training loop."""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data.dataset import batches, collate
from .tensor import ContractError, Parameter, Tensor

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
DIVERGENCE_LOSS = 1e3


@dataclass
class TrainConfig:
    lr: float = 1e-4
    momentum: float = 0.9
    lambda_l2: float = 0.01
    max_epochs: int = 300
    plateau_patience: int = 10
    lr_decay_factor: float = 10.0
    seed: int = 0
    batch_size: int = 16
    # global gradient-norm clip; None disables it
    grad_clip: float | None = 100.0
    max_decode_len: int = 40
    # stop once the training set is recognised perfectly (overfit runs)
    stop_at_train_exprate: float | None = None
    eval_every: int = 1
    # "weights" penalises decay-flagged matrices only; "all" includes biases and norm parameters
    l2_scope: str = "weights"

    def __post_init__(self):
        if self.lr <= 0 or self.lambda_l2 < 0 or not 0 <= self.momentum < 1:
            raise ContractError("lr must be positive, lambda_l2 nonnegative and momentum in [0, 1)")
        if self.max_epochs < 1 or self.plateau_patience < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ContractError("max_epochs, plateau_patience, batch_size and eval_every must be >= 1")
        if self.lr_decay_factor <= 1:
            raise ContractError("lr_decay_factor must exceed 1")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ContractError("grad_clip must be positive or null")
        if self.l2_scope not in ("weights", "all"):
            raise ContractError(f"l2_scope must be 'weights' or 'all', got {self.l2_scope!r}")


# ---------------------------------------------------------------- objective


def nll(step_probabilities: Sequence[Tensor], labels, mask=None) -> Tensor:
    """Summed negative log-likelihood of ``labels``, averaged over the batch.

    Probabilities are either K-vectors (one sequence) or N x K matrices with
    ``labels`` N x S; ``mask`` zeroes padded positions.
    """
    labels = np.asarray(labels, dtype=np.int64)
    steps = labels.shape[-1]
    if len(step_probabilities) != steps:
        raise ContractError(f"{len(step_probabilities)} probability vectors for {steps} labels")
    batch = labels.shape[0] if labels.ndim == 2 else 1
    mask = np.ones(labels.shape) if mask is None else np.asarray(mask, dtype=np.float64)
    total = None
    for t, probs in enumerate(step_probabilities):
        picked = T.pick(probs, labels[..., t])
        if np.any((picked.data == 0) & (mask[..., t] > 0)):
            warnings.warn("zero probability on a reference token; log floored", RuntimeWarning, stacklevel=2)
        term = T.tsum(T.mul(T.log(picked, PROB_FLOOR), -mask[..., t]))
        total = term if total is None else T.add(total, term)
    return T.mul(total, 1.0 / batch)


def l2_penalty(parameters: Sequence[Tensor]) -> Tensor:
    total = T.Tensor(0.0)
    for p in parameters:
        total = T.add(total, T.tsum(T.square(p)))
    return total


def loss(step_probabilities: Sequence[Tensor], labels, parameters: Sequence[Tensor], lambda_l2: float,
         mask=None) -> Tensor:
    """Cross-entropy over the label sequence plus ``lambda_l2`` times the squared parameter norm."""
    data = nll(step_probabilities, labels, mask)
    if lambda_l2 == 0 or not parameters:
        return data
    return T.add(data, T.mul(l2_penalty(parameters), lambda_l2))


# ---------------------------------------------------------------- optimizer


def sgd_momentum_step(parameters: Sequence[Parameter], velocities: dict[int, np.ndarray],
                      lr: float, momentum: float) -> None:
    """Classical momentum: v <- momentum * v + grad; theta <- theta - lr * v."""
    for p in parameters:
        if p.grad is None:
            continue
        v = velocities.get(id(p))
        if v is None:
            v = velocities[id(p)] = np.zeros_like(p.data)
        v *= momentum
        v += p.grad
        p.data -= lr * v


class SGD:
    def __init__(self, parameters: Sequence[Parameter], lr: float, momentum: float, grad_clip: float | None = None):
        self.parameters = list(parameters)
        self.lr, self.momentum, self.grad_clip = lr, momentum, grad_clip
        self.velocities: dict[int, np.ndarray] = {}

    def zero_grad(self) -> None:
        for p in self.parameters:
            p.grad = None

    def step(self) -> float:
        """Apply one update; returns the pre-clip global gradient norm."""
        norm = T.parameters_norm(self.parameters)
        if self.grad_clip is not None and norm > self.grad_clip:
            scale = self.grad_clip / norm
            for p in self.parameters:
                if p.grad is not None:
                    p.grad *= scale
        sgd_momentum_step(self.parameters, self.velocities, self.lr, self.momentum)
        return norm


class PlateauScheduler:
    """Divide the learning rate when the monitored metric stops improving.

    After ``patience`` epochs without a strictly better value the rate is
    divided by ``factor`` and the count restarts, so a flat history decays
    once every ``patience`` epochs.
    """

    def __init__(self, lr: float, patience: int = 10, factor: float = 10.0):
        self.base_lr, self.patience, self.factor = lr, patience, factor
        self.decays = 0
        self.best = -math.inf
        self.bad_epochs = 0

    @property
    def lr(self) -> float:
        # one division from the base rate, so 1e-4 decays to exactly 1e-5 then 1e-6
        return self.base_lr / self.factor ** self.decays

    def step(self, metric: float) -> float:
        if metric > self.best:
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.decays += 1
                self.bad_epochs = 0
        return self.lr


def plateau_scheduler(history: Sequence[float], config: TrainConfig) -> float:
    """Learning rate after replaying a history of validation exprates."""
    if not history:
        raise ContractError("plateau scheduler needs a nonempty history")
    sched = PlateauScheduler(config.lr, config.plateau_patience, config.lr_decay_factor)
    for value in history:
        sched.step(value)
    return sched.lr


# ---------------------------------------------------------------- metrics


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Levenshtein distance with unit insert, delete and substitute costs."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


@dataclass
class EvalReport:
    exprate: float
    wer: float
    le1: float
    le2: float
    le3: float
    distances: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def compute_report(predictions: Sequence[Sequence], references: Sequence[Sequence]) -> EvalReport:
    if len(predictions) != len(references) or not references:
        raise ContractError("need one prediction per reference and at least one pair")
    dist = [edit_distance(r, p) for p, r in zip(predictions, references)]
    n = len(dist)
    ref_tokens = sum(len(r) for r in references)
    pct = lambda k: 100.0 * sum(d <= k for d in dist) / n  # noqa: E731
    return EvalReport(
        exprate=pct(0),
        wer=100.0 * sum(dist) / max(ref_tokens, 1),
        le1=pct(1), le2=pct(2), le3=pct(3),
        distances=dist,
    )


def evaluate(model, samples, batch_size: int = 32, max_len: int = 40, mode: str = "greedy") -> EvalReport:
    if not samples:
        raise ContractError("cannot evaluate on an empty dataset")
    preds, refs = [], []
    for chunk in batches(samples, batch_size):
        images, _, _ = collate(chunk)
        result = model.recognize(images, max_len=max_len, mode=mode)
        preds += result.tokens
        refs += [s.body for s in chunk]
    return compute_report(preds, refs)


# ---------------------------------------------------------------- training loop


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    token_nll: float
    lr: float
    exprate: float = float("nan")
    wer: float = float("nan")
    le1: float = float("nan")
    le2: float = float("nan")
    le3: float = float("nan")


@dataclass
class TrainResult:
    history: list[EpochRecord]
    diverged: bool = False
    best_exprate: float = float("nan")
    best_epoch: int = 0
    train_exprate: float = float("nan")

    def epochs_to_loss(self, threshold: float) -> int | None:
        """First epoch whose mean per-token training NLL is at or below ``threshold``."""
        for rec in self.history:
            if rec.token_nll <= threshold:
                return rec.epoch
        return None


CSV_FIELDS = ["epoch", "loss", "lr", "exprate", "wer", "le1", "le2", "le3"]


def train_step(model, chunk, optimizer: SGD, config: TrainConfig) -> tuple[float, float, float]:
    """One SGD update; returns (objective, summed token NLL, token count)."""
    images, targets, mask = collate(chunk)
    optimizer.zero_grad()
    probs = model.teacher_forced(images, targets)
    data = nll(probs, targets, mask)
    penalised = model.weight_parameters() if config.l2_scope == "weights" else model.parameters()
    objective = data if config.lambda_l2 == 0 else T.add(data, T.mul(l2_penalty(penalised), config.lambda_l2))
    value = objective.item()
    if not math.isfinite(value):
        return value, float("nan"), float(mask.sum())
    T.backward(objective)
    optimizer.step()
    return value, data.item() * len(chunk), float(mask.sum())


def train(model, train_samples, val_samples, config: TrainConfig, out_dir: str | Path | None = None,
          on_epoch: Callable[[EpochRecord], None] | None = None, eval_train: bool = False) -> TrainResult:
    """Teacher-forced SGD with plateau decay on validation exprate.

    Writes ``metrics.csv``, ``best.ckpt`` and ``report.json`` under ``out_dir``
    when given.  Divergence (non-finite objective or one above 1e3) ends the
    run early and is reported, not raised.
    """
    rng = np.random.default_rng([config.seed, 0x7A1])
    model.train()
    optimizer = SGD(model.parameters(), config.lr, config.momentum, config.grad_clip)
    sched = PlateauScheduler(config.lr, config.plateau_patience, config.lr_decay_factor)
    result = TrainResult([])
    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "metrics.csv", "w", newline="", encoding="utf-8")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_FIELDS)
    try:
        for epoch in range(1, config.max_epochs + 1):
            losses, nll_sum, tokens = [], 0.0, 0.0
            for chunk in batches(train_samples, config.batch_size, rng):
                value, chunk_nll, n_tok = train_step(model, chunk, optimizer, config)
                losses.append(value)
                nll_sum += chunk_nll
                tokens += n_tok
                if not math.isfinite(value) or value > DIVERGENCE_LOSS:
                    result.diverged = True
                    break
            rec = EpochRecord(epoch, float(np.mean(losses)), nll_sum / max(tokens, 1), optimizer.lr)
            if not result.diverged and (epoch % config.eval_every == 0 or epoch == config.max_epochs):
                monitor = val_samples or train_samples
                report = evaluate(model, monitor, config.batch_size, config.max_decode_len)
                rec.exprate, rec.wer, rec.le1, rec.le2, rec.le3 = (
                    report.exprate, report.wer, report.le1, report.le2, report.le3)
                if math.isnan(result.best_exprate) or report.exprate > result.best_exprate:
                    result.best_exprate, result.best_epoch = report.exprate, epoch
                    if out is not None:
                        model.save(out / "best.ckpt")
                optimizer.lr = sched.step(report.exprate)
                if eval_train or config.stop_at_train_exprate is not None:
                    train_report = report if not val_samples else evaluate(
                        model, train_samples, config.batch_size, config.max_decode_len)
                    result.train_exprate = train_report.exprate
            result.history.append(rec)
            if writer is not None:
                writer.writerow([rec.epoch, _fmt(rec.loss), _fmt(rec.lr)] +
                                [_fmt(getattr(rec, k)) for k in CSV_FIELDS[3:]])
            if on_epoch:
                on_epoch(rec)
            log.info("epoch %d loss %.4f token-nll %.4f lr %.2e exprate %.2f", epoch, rec.loss, rec.token_nll,
                     rec.lr, rec.exprate)
            if result.diverged:
                break
            if (config.stop_at_train_exprate is not None
                    and result.train_exprate >= config.stop_at_train_exprate):
                break
    finally:
        if writer is not None:
            fh.close()
    if out is not None:
        if not (out / "best.ckpt").exists():
            model.save(out / "best.ckpt")
        report = {
            "seed": config.seed,
            "epochs": len(result.history),
            "diverged": result.diverged,
            "best_exprate": result.best_exprate,
            "best_epoch": result.best_epoch,
            "final": asdict(result.history[-1]) if result.history else None,
        }
        (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True, allow_nan=True) + "\n")
    return result


def _fmt(x: float) -> str:
    return "nan" if x != x else repr(float(x))


# ---------------------------------------------------------------- ablation

ABLATION_AXES = ("bam_position", "layer_counts", "decoder")
LOSS_TARGET = 0.5


def ablation_variants(axis: str, encoder, decoder) -> dict[str, tuple]:
    """Named (encoder, decoder) configs for one ablation axis, built around a base pair.

    ``bam_position`` varies which dense blocks carry a BAM gate (plain GRU decoder),
    ``layer_counts`` varies layers per block (plain GRU), and ``decoder`` swaps the cell.
    """
    from dataclasses import replace

    if axis == "bam_position":
        gru = replace(decoder, cell="gru")
        sites = {"none": (), "block1": (1,), "block2": (2,), "block3": (3,), "block1+3": (1, 3),
                 "block2+3": (2, 3), "block1+2": (1, 2), "all": (1, 2, 3)}
        return {name: (replace(encoder, bam_after=frozenset(s)), gru) for name, s in sites.items()}
    if axis == "layer_counts":
        gru = replace(decoder, cell="gru")
        counts = [(12, 12, 12), (16, 16, 16), (6, 12, 24)]
        return {"-".join(map(str, c)): (replace(encoder, layers_per_block=c), gru) for c in counts}
    if axis == "decoder":
        return {cell: (encoder, replace(decoder, cell=cell)) for cell in ("gru", "gi_gru")}
    raise ContractError(f"unknown ablation axis {axis!r}; choose from {ABLATION_AXES}")


@dataclass
class AblationRow:
    variant: str
    diverged: bool
    epochs: int
    epochs_to_loss: int | None
    final_token_nll: float
    report: EvalReport | None


def run_ablation(variants: dict[str, tuple], train_samples, val_samples, config: TrainConfig, vocab_size: int,
                 model_seed: int = 0, on_epoch: Callable[[str, EpochRecord], None] | None = None) -> list[AblationRow]:
    """Train every variant from the same seed and data; divergence is recorded, not raised."""
    from .model import DenseBamGI

    rows = []
    for name, (enc, dec) in variants.items():
        model = DenseBamGI(enc, dec, vocab_size, seed=model_seed)
        hook = (lambda rec, name=name: on_epoch(name, rec)) if on_epoch else None
        result = train(model, train_samples, val_samples, config, on_epoch=hook)
        report = None
        if not result.diverged:
            report = evaluate(model, val_samples or train_samples, config.batch_size, config.max_decode_len)
        rows.append(AblationRow(name, result.diverged, len(result.history), result.epochs_to_loss(LOSS_TARGET),
                                result.history[-1].token_nll, report))
    return rows


ABLATION_FIELDS = ["variant", "exprate", "le1", "le2", "le3", "wer", "status", "epochs", "epochs_to_loss_0.5",
                   "final_token_nll"]


def write_ablation_csv(rows: list[AblationRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ABLATION_FIELDS)
        for row in rows:
            if row.diverged:
                metrics = ["diverged", "", "", "", ""]
            else:
                r = row.report
                metrics = [_fmt(r.exprate), _fmt(r.le1), _fmt(r.le2), _fmt(r.le3), _fmt(r.wer)]
            writer.writerow([row.variant, *metrics, "diverged" if row.diverged else "ok", row.epochs,
                             "" if row.epochs_to_loss is None else row.epochs_to_loss, _fmt(row.final_token_nll)])
