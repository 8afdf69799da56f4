"""Stage 2: group-relative policy optimization of the softmax-weighted group likelihood.

For each query ``x`` a group of ``K`` completions is sampled from the
current policy, rewards are standardized within the group, turned into
softmax weights ``w_k`` and the policy ascends

    J = mean_x [ sum_k w_k log pi(y_k | x) ] - beta * KL(pi || pi_ref)

where the KL is the exact categorical divergence at every position of the
sampled completions, averaged per completion and then over the group.
"""
from __future__ import annotations

import csv
import logging
import math
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .evalsuite import extract_answer, rubric_score
from .optim import Adam, clip_by_global_norm
from .seqmodel import (
    DEFAULT_VOCAB, Params, Vocab, backward, forward, log_softmax, make_batch, sample_batch,
    save_checkpoint,
)
from .taskgen import OPTION_LETTERS, QAItem, TaskKind
from .routeworld import Route

log = logging.getLogger(__name__)

_WELL_FORMED = re.compile(r"(<think>(?:(?!<think>|</think>|<answer>|</answer>).)*</think> )?"
                          r"<answer>(?:(?!<think>|</think>|<answer>|</answer>).)*</answer>", re.S)


class GRPOError(RuntimeError):
    pass


class NonFiniteError(GRPOError):
    """Objective or gradient stopped being finite; training cannot continue."""


@dataclass(frozen=True)
class GRPOConfig:
    group_size: int = 8
    tau: float = 1.0
    beta: float = 0.01
    eps_std: float = 1e-6
    temperature: float = 1.0
    max_len: int = 120
    lr: float = 5e-4
    steps: int = 200
    batch_size: int = 8
    clip_norm: float = 1.0
    betas: tuple[float, float] = (0.9, 0.999)
    wrong_reward: float = 0.0
    format_bonus: float = 0.0
    variant: str = "weighted"       # "weighted" (softmax group weights) or "clipped" (ratio-clipped advantages)
    clip_eps: float = 0.2
    inner_epochs: int = 1
    rubric_reward: bool = False
    seed: int = 0
    checkpoint_every: int = 0

    def check(self) -> None:
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.tau <= 0 or self.beta < 0 or self.eps_std <= 0 or self.temperature <= 0:
            raise ValueError(f"invalid GRPO config {self}")
        if self.wrong_reward not in (0.0, -1.0):
            raise ValueError("wrong_reward must be 0 or -1")
        if self.format_bonus < 0:
            raise ValueError("format_bonus must be >= 0")
        if self.variant not in ("weighted", "clipped"):
            raise ValueError(f"unknown variant {self.variant!r}")


# ---------------------------------------------------------------------------
# rewards and weights

def is_well_formed(completion: str) -> bool:
    return _WELL_FORMED.fullmatch(completion.strip()) is not None


def reward_mcq(item: QAItem, completion: str, config: GRPOConfig) -> float:
    if not item.kind.is_mcq:
        raise ValueError(f"item {item.id} is not multiple choice")
    well_formed = is_well_formed(completion)
    bonus = config.format_bonus if well_formed else 0.0
    inner = extract_answer(completion) if well_formed else None
    words = inner.split() if inner else []
    if words and words[0] in OPTION_LETTERS and words[0] == item.correct_letter:
        return 1.0 + bonus
    return config.wrong_reward + bonus


def reward_route(item: QAItem, route: Route, completion: str, config: GRPOConfig) -> float:
    inner = extract_answer(completion)
    text = inner if inner is not None else ""
    bonus = config.format_bonus if is_well_formed(completion) else 0.0
    return rubric_score(text, route, item.polarity).percent / 100.0 + bonus


def normalize_rewards(r: Sequence[float], eps_std: float) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if r.size < 2:
        raise ValueError("need at least two rewards")
    return (r - r.mean()) / (r.std() + eps_std)


def weights(r_tilde: Sequence[float], tau: float) -> np.ndarray:
    if tau <= 0:
        raise ValueError("tau must be > 0")
    a = np.asarray(r_tilde, dtype=np.float64) / tau
    e = np.exp(a - a.max())
    return e / e.sum()


@dataclass
class GroupSample:
    query_id: str
    x: list[int]
    completions: list[list[int]]
    rewards: np.ndarray
    normalized: np.ndarray
    weights: np.ndarray
    old_logprobs: list[np.ndarray] | None = None

    def __post_init__(self) -> None:
        if len(self.completions) < 2:
            raise GRPOError("a group needs at least two completions")
        if abs(float(self.weights.sum()) - 1.0) > 1e-9:
            raise GRPOError("group weights do not sum to 1")


def make_group(query_id: str, x: Sequence[int], completions: Sequence[Sequence[int]],
               rewards: Sequence[float], config: GRPOConfig) -> GroupSample:
    r = np.asarray(rewards, dtype=np.float64)
    rt = normalize_rewards(r, config.eps_std)
    return GroupSample(query_id, list(x), [list(c) for c in completions], r, rt, weights(rt, config.tau))


# ---------------------------------------------------------------------------
# objective

@dataclass
class ObjectiveParts:
    objective: float
    weighted_loglik: float
    kl: float
    grad: Params


def _groups_batch(groups: Sequence[GroupSample], vocab: Vocab):
    pairs = [(g.x, y) for g in groups for y in g.completions]
    return make_batch(pairs, vocab.bos, vocab.pad)


def _kl_positions(lp: np.ndarray, lq: np.ndarray) -> np.ndarray:
    return (np.exp(lp) * (lp - lq)).sum(axis=-1)


def kl_term(params: Params, ref_params: Params, group: GroupSample, vocab: Vocab = DEFAULT_VOCAB) -> float:
    """Mean over completions of the mean per-position KL(pi || pi_ref) along the sampled prefixes."""
    if not params.same_shape(ref_params):
        raise GRPOError("policy and reference have different shapes or vocabularies")
    batch = _groups_batch([group], vocab)
    lp = log_softmax(forward(params, batch.inputs).logits)
    lq = log_softmax(forward(ref_params, batch.inputs).logits)
    per_pos = _kl_positions(lp, lq) * batch.target_mask
    per_seq = per_pos.sum(axis=1) / np.maximum(batch.y_len, 1)
    return max(float(per_seq.mean()), 0.0)


def grpo_objective(params: Params, ref_params: Params, groups: Sequence[GroupSample], beta: float,
                   vocab: Vocab = DEFAULT_VOCAB, variant: str = "weighted",
                   clip_eps: float = 0.2) -> ObjectiveParts:
    """Objective averaged over ``groups`` and its exact gradient with the completions held fixed."""
    if not params.same_shape(ref_params):
        raise GRPOError("policy and reference have different shapes or vocabularies")
    batch = _groups_batch(groups, vocab)
    n_q = len(groups)
    K = np.array([len(g.completions) for g in groups for _ in g.completions], dtype=np.float64)
    mask = batch.target_mask
    cache = forward(params, batch.inputs)
    lp = log_softmax(cache.logits)
    lq = log_softmax(forward(ref_params, batch.inputs).logits)
    p = np.exp(lp)
    picked = np.take_along_axis(lp, batch.targets[..., None], axis=-1)[..., 0]

    if variant == "weighted":
        w = np.concatenate([g.weights for g in groups]) / n_q
        wpos = w[:, None] * mask
        surrogate = float(np.sum(wpos * picked))
    else:
        adv = np.concatenate([g.normalized for g in groups])
        old = np.zeros_like(picked)
        row = 0
        for g in groups:
            for k, _ in enumerate(g.completions):
                if g.old_logprobs is not None:
                    seg = g.old_logprobs[k]
                    s0 = batch.y_start[row]
                    old[row, s0:s0 + len(seg)] = seg
                else:
                    s0, n = batch.y_start[row], batch.y_len[row]
                    old[row, s0:s0 + n] = picked[row, s0:s0 + n]
                row += 1
        ratio = np.exp((picked - old) * mask)
        scale = (mask / np.maximum(batch.y_len, 1)[:, None]) / (K[:, None] * n_q)
        A = adv[:, None]
        unclipped = ratio * A
        clipped = np.clip(ratio, 1 - clip_eps, 1 + clip_eps) * A
        surrogate = float(np.sum(scale * np.minimum(unclipped, clipped)))
        active = (unclipped <= clipped)
        wpos = scale * A * ratio * active

    kl_pos = _kl_positions(lp, lq)
    kl_scale = mask / (np.maximum(batch.y_len, 1)[:, None] * K[:, None] * n_q)
    kl = float(np.sum(kl_pos * kl_scale))

    # d/dlogits of sum wpos*log p[target]  minus  beta * d/dlogits of KL
    dlogits = -p * wpos[..., None]
    np.put_along_axis(
        dlogits, batch.targets[..., None],
        np.take_along_axis(dlogits, batch.targets[..., None], axis=-1) + wpos[..., None], axis=-1,
    )
    if beta:
        dkl = p * (lp - lq - kl_pos[..., None])
        dlogits -= beta * kl_scale[..., None] * dkl
    grad = backward(params, cache, dlogits)
    return ObjectiveParts(surrogate - beta * kl, surrogate, kl, grad)


# ---------------------------------------------------------------------------
# training loop

@dataclass
class StepStats:
    step: int
    mean_reward: float
    reward_std: float
    kl: float
    objective: float
    weight_entropy: float
    wall_time: float

    def row(self) -> list:
        return [self.step, self.mean_reward, self.reward_std, self.kl, self.objective, self.weight_entropy]


# wall time stays out of the CSV so curves are byte-reproducible
CURVE_COLUMNS = ["step", "mean_reward", "reward_std", "kl", "objective", "weight_entropy"]


@dataclass
class GRPOState:
    params: Params
    ref_params: Params
    optimizer: Adam
    step: int = 0
    history: list[StepStats] = field(default_factory=list)


def _rollout(params: Params, items: Sequence[QAItem], config: GRPOConfig, rng: np.random.Generator,
             vocab: Vocab, routes: dict[str, Route] | None) -> list[GroupSample]:
    prompts = [vocab.encode(it.prompt) for it in items]
    K = config.group_size
    flat = [p for p in prompts for _ in range(K)]
    samples = sample_batch(params, flat, config.temperature, config.max_len, rng, vocab)
    groups = []
    for q, (it, x) in enumerate(zip(items, prompts)):
        comps = [samples[q * K + k].ids for k in range(K)]
        texts = [vocab.decode(c) for c in comps]
        if it.kind.is_mcq:
            rewards = [reward_mcq(it, t, config) for t in texts]
        else:
            if routes is None:
                raise GRPOError("route-description rewards need the routes")
            rewards = [reward_route(it, routes[it.route_id], t, config) for t in texts]
        groups.append(make_group(it.id, x, comps, rewards, config))
    if config.variant == "clipped":
        for g in groups:
            b = _groups_batch([g], vocab)
            lp = log_softmax(forward(params, b.inputs).logits)
            picked = np.take_along_axis(lp, b.targets[..., None], axis=-1)[..., 0]
            g.old_logprobs = [picked[k, b.y_start[k]: b.y_start[k] + b.y_len[k]].copy()
                              for k in range(len(g.completions))]
    return groups


def grpo_step(state: GRPOState, items: Sequence[QAItem], config: GRPOConfig, rng: np.random.Generator,
              vocab: Vocab = DEFAULT_VOCAB, routes: dict[str, Route] | None = None) -> StepStats:
    if not items:
        raise GRPOError("empty batch")
    t0 = time.perf_counter()
    groups = _rollout(state.params, items, config, rng, vocab, routes)
    parts = None
    for _ in range(config.inner_epochs if config.variant == "clipped" else 1):
        parts = grpo_objective(state.params, state.ref_params, groups, config.beta, vocab,
                               config.variant, config.clip_eps)
        if not math.isfinite(parts.objective) or not parts.grad.all_finite():
            raise NonFiniteError(
                f"non-finite objective at step {state.step}: objective={parts.objective}, "
                f"kl={parts.kl}, loglik={parts.weighted_loglik}"
            )
        grad, _ = clip_by_global_norm(parts.grad, config.clip_norm)
        neg = Params(grad.config, *(-t for t in grad.tensors()))
        state.params = state.optimizer.step(state.params, neg)
    rewards = np.concatenate([g.rewards for g in groups])
    ent = float(np.mean([-(g.weights * np.log(np.maximum(g.weights, 1e-300))).sum() for g in groups]))
    stats = StepStats(
        step=state.step,
        mean_reward=float(rewards.mean()),
        reward_std=float(rewards.std()),
        kl=max(parts.kl, 0.0),
        objective=parts.objective,
        weight_entropy=ent,
        wall_time=time.perf_counter() - t0,
    )
    state.step += 1
    state.history.append(stats)
    return stats


def train_grpo(
    init_params: Params,
    items: Sequence[QAItem],
    config: GRPOConfig,
    ref_params: Params | None = None,
    vocab: Vocab = DEFAULT_VOCAB,
    routes: dict[str, Route] | None = None,
    curve_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    on_step: Callable[[StepStats], None] | None = None,
) -> tuple[Params, list[StepStats]]:
    """Run ``config.steps`` updates; the reference defaults to a frozen copy of ``init_params``."""
    config.check()
    pool = [it for it in items if it.kind.is_mcq or config.rubric_reward]
    if not pool:
        raise GRPOError("no trainable items (route descriptions need rubric_reward)")
    ref = init_params.copy() if ref_params is None else ref_params
    state = GRPOState(init_params.copy(), ref, Adam(config.lr, config.betas))
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(pool))
    cursor = 0
    fh = open(curve_path, "w", newline="") if curve_path is not None else None
    writer = csv.writer(fh, lineterminator="\n") if fh else None
    if writer:
        writer.writerow(CURVE_COLUMNS)
    try:
        for _ in range(config.steps):
            if cursor + config.batch_size > len(order):
                order = rng.permutation(len(pool))
                cursor = 0
            batch = [pool[i] for i in order[cursor: cursor + config.batch_size]]
            cursor += config.batch_size
            stats = grpo_step(state, batch, config, rng, vocab, routes)
            if writer:
                writer.writerow([repr(v) if isinstance(v, float) else v for v in stats.row()])
            if on_step is not None:
                on_step(stats)
            if checkpoint_path and config.checkpoint_every and state.step % config.checkpoint_every == 0:
                save_checkpoint(state.params, checkpoint_path, vocab, {"stage": "grpo", "step": state.step})
    finally:
        if fh:
            fh.close()
    if checkpoint_path is not None:
        save_checkpoint(state.params, checkpoint_path, vocab,
                        {"stage": "grpo", "step": state.step, "seed": config.seed})
    return state.params, state.history
