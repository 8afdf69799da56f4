"""Stage 1: supervised fine-tuning on reverse-thinking chain-of-thought targets."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .optim import Adam, clip_by_global_norm
from .seqmodel import (
    ANSWER, END_ANSWER, END_THINK, THINK, DEFAULT_VOCAB, Params, Vocab, forward, make_batch,
    save_checkpoint, token_logprobs, weighted_loglik_grad,
)
from .taskgen import Dataset, QAItem

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, msg: str, step: int):
        super().__init__(f"step {step}: {msg}")
        self.step = step


@dataclass(frozen=True)
class CoTExample:
    item_id: str
    x: tuple[int, ...]
    target: tuple[int, ...]


def answer_text(item: QAItem) -> str:
    return item.correct_letter if item.kind.is_mcq else item.ground_truth or item.answer


def target_text(item: QAItem, with_cot: bool = True) -> str:
    a = answer_text(item)
    if not with_cot:
        return f"{ANSWER} {a} {END_ANSWER}"
    if item.cot is None:
        raise ValueError(f"item {item.id} has no chain of thought; run attach_cot first")
    return f"{THINK} {item.cot} {END_THINK} {ANSWER} {a} {END_ANSWER}"


def build_cot_examples(dataset: Dataset | Sequence[QAItem], vocab: Vocab = DEFAULT_VOCAB,
                       with_cot: bool = True) -> list[CoTExample]:
    """One example per item; ``with_cot=False`` gives the answer-only targets of plain SFT."""
    items = dataset.items if isinstance(dataset, Dataset) else dataset
    out = []
    for it in items:
        target = vocab.encode(target_text(it, with_cot)) + [vocab.eos]
        out.append(CoTExample(it.id, tuple(vocab.encode(it.prompt)), tuple(target)))
    return out


@dataclass(frozen=True)
class SFTConfig:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 20
    clip_norm: float = 1.0
    betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    checkpoint_every: int = 0

    def check(self) -> None:
        if self.lr < 0 or self.clip_norm <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError(f"invalid SFT config {self}")


def _batch(examples: Sequence[CoTExample], vocab: Vocab):
    return make_batch([(e.x, e.target) for e in examples], vocab.bos, vocab.pad)


def sft_loss(params: Params, batch: Sequence[CoTExample], vocab: Vocab = DEFAULT_VOCAB) -> float:
    """Mean over examples of the per-token negative log-likelihood of the target."""
    if not batch:
        raise ValueError("empty batch")
    b = _batch(batch, vocab)
    _, picked = token_logprobs(forward(params, b.inputs), b.targets)
    per_seq = -(picked * b.target_mask).sum(axis=1) / b.y_len
    return float(per_seq.mean())


def sft_loss_and_grad(params: Params, batch: Sequence[CoTExample],
                      vocab: Vocab = DEFAULT_VOCAB) -> tuple[float, Params]:
    if not batch:
        raise ValueError("empty batch")
    b = _batch(batch, vocab)
    w = -1.0 / (b.y_len * len(batch))
    loglik, grad = weighted_loglik_grad(params, b, w)
    return float(np.sum(loglik * w)), grad


def train_sft(
    params: Params,
    examples: Sequence[CoTExample],
    config: SFTConfig,
    vocab: Vocab = DEFAULT_VOCAB,
    curve_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    on_step: Callable[[int, int, float], None] | None = None,
) -> tuple[Params, list[tuple[int, int, float]]]:
    config.check()
    rng = np.random.default_rng(config.seed)
    opt = Adam(config.lr, config.betas)
    curve: list[tuple[int, int, float]] = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(examples))
        for start in range(0, len(order), config.batch_size):
            batch = [examples[i] for i in order[start:start + config.batch_size]]
            loss, grad = sft_loss_and_grad(params, batch, vocab)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite SFT loss {loss}", step)
            grad, _ = clip_by_global_norm(grad, config.clip_norm)
            params = opt.step(params, grad)
            curve.append((step, epoch, loss))
            if on_step is not None:
                on_step(step, epoch, loss)
            step += 1
            if checkpoint_path and config.checkpoint_every and step % config.checkpoint_every == 0:
                save_checkpoint(params, checkpoint_path, vocab, {"stage": "sft", "step": step})
    if curve_path is not None:
        write_curve(curve, curve_path)
    if checkpoint_path is not None:
        save_checkpoint(params, checkpoint_path, vocab, {"stage": "sft", "step": step, "seed": config.seed})
    return params, curve


def write_curve(curve: Sequence[tuple[int, int, float]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "epoch", "loss"])
        for step, epoch, loss in curve:
            w.writerow([step, epoch, repr(loss)])
