"""End-to-end experiment drivers: paradigm comparison, OOD transfer and the GRPO bandit."""
from __future__ import annotations

import logging
import time
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .evalsuite import generate_predictions, mcq_accuracy
from .seqmodel import DEFAULT_VOCAB, Params, Vocab, logprob, new_params
from .taskgen import (
    Dataset, GenConfig, Polarity, QAItem, Ratio, SceneKind, SceneOOD, attach_cot, build_dataset, split,
)
from .optim import Adam
from .trainer_grpo import GRPOConfig, GRPOState, StepStats, grpo_step, train_grpo
from .trainer_sft import CoTExample, SFTConfig, build_cot_examples, train_sft

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExperimentConfig:
    gen: GenConfig = GenConfig()
    n_routes: int = 840
    data_seed: int = 0
    n_train: int = 630
    ratio: tuple[int, int] = (1, 6)
    sft: SFTConfig = SFTConfig()
    grpo: GRPOConfig = GRPOConfig(steps=200, max_len=160)
    eval_max_len: int = 160
    d_model: int = 32
    hidden: int = 64


@dataclass
class Accuracy:
    forward: float
    reverse: float
    overall: float

    def cell(self) -> str:
        return f"{self.forward:.1f} / {self.reverse:.1f}"


@dataclass
class RunResult:
    name: str
    seed: int
    accuracy: Accuracy
    rewards: list[float] = field(default_factory=list)
    seconds: float = 0.0

    def final_reward_std(self, window: int = 100) -> float:
        r = np.asarray(self.rewards[-window:])
        return float(r.std()) if r.size else float("nan")


def mcq_items(dataset: Dataset) -> list[QAItem]:
    return [it for it in dataset.items if it.kind.is_mcq]


def ratio_split(cfg: ExperimentConfig) -> tuple[list[QAItem], Dataset]:
    """Training MCQs (CoT attached, first ``n_train`` by route order) and the held-out MCQ set."""
    ds = build_dataset(cfg.gen, cfg.n_routes, cfg.data_seed)
    train, test = split(ds, Ratio(*cfg.ratio), np.random.default_rng(cfg.data_seed))
    train_items = mcq_items(attach_cot(train))
    if len(train_items) < cfg.n_train:
        raise ValueError(f"train side has only {len(train_items)} MCQs, need {cfg.n_train}")
    test_items = mcq_items(test)
    return train_items[: cfg.n_train], test.subset(test_items)


def ood_split(cfg: ExperimentConfig) -> tuple[list[QAItem], Dataset]:
    ds = build_dataset(cfg.gen, cfg.n_routes, cfg.data_seed)
    indoor = frozenset({SceneKind.INDOOR_SINGLE, SceneKind.INDOOR_MULTI})
    train, test = split(ds, SceneOOD(indoor, frozenset({SceneKind.OUTDOOR})), np.random.default_rng(cfg.data_seed))
    train_items = mcq_items(attach_cot(train))
    if len(train_items) < cfg.n_train:
        raise ValueError(f"indoor side has only {len(train_items)} MCQs, need {cfg.n_train}")
    return train_items[: cfg.n_train], test.subset(mcq_items(test))


def accuracy(params: Params, test: Dataset, max_len: int, vocab: Vocab = DEFAULT_VOCAB) -> Accuracy:
    """Mean per-family accuracy by polarity, plus the pooled item-level accuracy."""
    preds = generate_predictions(params, test.items, max_len, vocab)
    table = mcq_accuracy(preds, test)
    fwd = [v for (_, pol), v in table.items() if pol is Polarity.FORWARD]
    rev = [v for (_, pol), v in table.items() if pol is Polarity.REVERSE]
    sizes = Counter(it.family for it in test.items)
    pooled = sum(table[fam] * sizes[fam] for fam in table) / sum(sizes[fam] for fam in table)
    return Accuracy(float(np.mean(fwd)), float(np.mean(rev)), float(pooled))


def _fresh(cfg: ExperimentConfig, seed: int) -> Params:
    return new_params(seed, d_model=cfg.d_model, hidden=cfg.hidden)


def sft_stage(cfg: ExperimentConfig, train: Sequence[QAItem], seed: int, with_cot: bool) -> Params:
    examples: list[CoTExample] = build_cot_examples(train, with_cot=with_cot)
    params, _ = train_sft(_fresh(cfg, seed), examples, replace(cfg.sft, seed=seed))
    return params


def grpo_stage(cfg: ExperimentConfig, init: Params, train: Sequence[QAItem], seed: int) -> tuple[Params, list[StepStats]]:
    return train_grpo(init, train, replace(cfg.grpo, seed=seed))


def run_paradigms(cfg: ExperimentConfig, seed: int, include_random_init: bool = True) -> dict[str, RunResult]:
    """SFT-only, CoT-SFT, CoT-SFT+GRPO, SFT+GRPO and (optionally) GRPO from random initialization."""
    train, test = ratio_split(cfg)
    out: dict[str, RunResult] = {}

    def record(name: str, params: Params, t0: float, hist: list[StepStats] | None = None) -> None:
        acc = accuracy(params, test, cfg.eval_max_len)
        rewards = [s.mean_reward for s in hist] if hist else []
        out[name] = RunResult(name, seed, acc, rewards, time.perf_counter() - t0)
        log.info("%s seed %d: %s (%.0fs)", name, seed, acc.cell(), out[name].seconds)

    t0 = time.perf_counter()
    plain = sft_stage(cfg, train, seed, with_cot=False)
    record("sft", plain, t0)
    t0 = time.perf_counter()
    cot = sft_stage(cfg, train, seed, with_cot=True)
    record("cot_sft", cot, t0)
    t0 = time.perf_counter()
    params, hist = grpo_stage(cfg, cot, train, seed)
    record("cot_sft_grpo", params, t0, hist)
    t0 = time.perf_counter()
    params, hist = grpo_stage(cfg, plain, train, seed)
    record("sft_grpo", params, t0, hist)
    if include_random_init:
        t0 = time.perf_counter()
        params, hist = grpo_stage(cfg, _fresh(cfg, seed), train, seed)
        record("init_grpo", params, t0, hist)
    return out


def run_ood(cfg: ExperimentConfig, seed: int) -> dict[str, Accuracy]:
    """Indoor-only CoT-SFT+GRPO evaluated on outdoor MCQs, next to its starting points."""
    train, test = ood_split(cfg)
    init = _fresh(cfg, seed)
    cot = sft_stage(cfg, train, seed, with_cot=True)
    trained, _ = grpo_stage(cfg, cot, train, seed)
    return {
        "init": accuracy(init, test, cfg.eval_max_len),
        "cot_sft": accuracy(cot, test, cfg.eval_max_len),
        "cot_sft_grpo": accuracy(trained, test, cfg.eval_max_len),
    }


# ---------------------------------------------------------------------------
# single-prompt bandit

@dataclass
class BanditResult:
    p_correct: list[float]
    rewards: list[float]
    initial: list[float]


def answer_ids(letter: str, vocab: Vocab = DEFAULT_VOCAB) -> list[int]:
    return vocab.encode(f"<answer> {letter} </answer>") + [vocab.eos]


def mcq_bandit(seed: int, item: QAItem | None = None, steps: int = 500, config: GRPOConfig | None = None,
               vocab: Vocab = DEFAULT_VOCAB, probe_every: int = 10) -> BanditResult:
    """GRPO on one MCQ prompt, starting from a policy that answers every letter equally often.

    The warm start is a short SFT on the four well-formed answers, so the
    only thing GRPO has to learn is which arm pays.
    """
    if item is None:
        ds = build_dataset(GenConfig(), 5, seed)
        item = mcq_items(ds)[0]
    letters = [chr(ord("A") + i) for i in range(len(item.options))]
    x = tuple(vocab.encode(item.prompt))
    warm = [CoTExample(f"arm-{L}", x, tuple(answer_ids(L, vocab))) for L in letters]
    params, _ = train_sft(new_params(seed, vocab), warm,
                          SFTConfig(epochs=150, batch_size=len(warm), lr=1e-2, seed=seed), vocab)
    cfg = config or GRPOConfig(group_size=8, tau=1.0, beta=0.01, max_len=8, batch_size=1)
    cfg = replace(cfg, steps=steps, seed=seed, batch_size=1)
    target = answer_ids(item.correct_letter, vocab)
    initial = [float(np.exp(logprob(params, x, answer_ids(L, vocab), vocab))) for L in letters]
    probes: list[float] = []
    rewards: list[float] = []
    state = GRPOState(params.copy(), params.copy(), Adam(cfg.lr, cfg.betas))
    rng = np.random.default_rng(cfg.seed)
    for step in range(1, steps + 1):
        rewards.append(grpo_step(state, [item], cfg, rng, vocab).mean_reward)
        if step % probe_every == 0 or step == steps:
            probes.append(float(np.exp(logprob(state.params, x, target, vocab))))
    return BanditResult(probes, rewards, initial)
