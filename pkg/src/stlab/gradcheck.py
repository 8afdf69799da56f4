"""Central finite-difference checks of the SFT loss and the GRPO objective.

Configs are deliberately tiny (a six-token vocabulary, a few hidden units)
so every parameter coordinate can be perturbed.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .seqmodel import BOS, EOS, PAD, ModelConfig, Params, Vocab
from .trainer_grpo import GRPOConfig, grpo_objective, make_group
from .trainer_sft import CoTExample, sft_loss, sft_loss_and_grad

SMALL_VOCAB = Vocab((PAD, BOS, EOS, "a", "b", "c"))


@dataclass(frozen=True)
class CheckResult:
    case: int
    target: str
    rel_error: float
    n_params: int


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / denom)


def numeric_grad(fn: Callable[[Params], float], params: Params, h: float = 1e-5) -> np.ndarray:
    base = params.flat()
    out = np.empty_like(base)
    for i in range(base.size):
        v = base.copy()
        v[i] = base[i] + h
        up = fn(params.with_flat(v))
        v[i] = base[i] - h
        out[i] = (up - fn(params.with_flat(v))) / (2 * h)
    return out


def _random_params(rng: np.random.Generator, d: int, hidden: int) -> Params:
    cfg = ModelConfig(len(SMALL_VOCAB), d, hidden, init_scale=0.5)
    return Params.init(cfg, rng)


def _seq(rng: np.random.Generator, lo: int, hi: int) -> list[int]:
    return [int(t) for t in rng.integers(2, len(SMALL_VOCAB), size=int(rng.integers(lo, hi + 1)))]


def check_case(case: int, seed: int = 0, h: float = 1e-5) -> list[CheckResult]:
    """Check SFT and GRPO (weighted and clipped) gradients on one random small config."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, case]))
    d, hidden = int(rng.integers(2, 5)), int(rng.integers(2, 6))
    params = _random_params(rng, d, hidden)
    ref = _random_params(rng, d, hidden)
    v = SMALL_VOCAB
    results = []

    batch = [CoTExample(f"e{i}", tuple(_seq(rng, 1, 4)), tuple(_seq(rng, 1, 4))) for i in range(int(rng.integers(1, 4)))]
    # loss_and_grad returns the descent gradient of the mean NLL
    _, g = sft_loss_and_grad(params, batch, v)
    num = numeric_grad(lambda p: sft_loss(p, batch, v), params, h)
    results.append(CheckResult(case, "sft", relative_error(g.flat(), num), num.size))

    cfg = GRPOConfig(group_size=2, tau=float(rng.uniform(0.5, 2.0)))
    groups = []
    for q in range(int(rng.integers(1, 3))):
        K = int(rng.integers(2, 5))
        groups.append(make_group(f"q{q}", _seq(rng, 1, 3), [_seq(rng, 1, 4) for _ in range(K)],
                                 rng.integers(0, 2, size=K).astype(float) + rng.normal(0, 0.1, size=K), cfg))
    beta = float(rng.uniform(0.0, 0.5))
    parts = grpo_objective(params, ref, groups, beta, v)
    num = numeric_grad(lambda p: grpo_objective(p, ref, groups, beta, v).objective, params, h)
    results.append(CheckResult(case, "grpo", relative_error(parts.grad.flat(), num), num.size))

    # the clipped variant needs old log-probs from a fixed behaviour policy
    for g_ in groups:
        g_.old_logprobs = [rng.normal(-1.5, 0.3, size=len(c)) for c in g_.completions]
    parts = grpo_objective(params, ref, groups, beta, v, variant="clipped")
    num = numeric_grad(lambda p: grpo_objective(p, ref, groups, beta, v, variant="clipped").objective, params, h)
    results.append(CheckResult(case, "grpo-clipped", relative_error(parts.grad.flat(), num), num.size))
    return results


def run_gradcheck(n_cases: int = 20, seed: int = 0, h: float = 1e-5) -> list[CheckResult]:
    out = []
    for case in range(n_cases):
        out.extend(check_case(case, seed, h))
    return out
