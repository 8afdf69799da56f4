"""Tiny autoregressive categorical policy over a closed word vocabulary.

One gated recurrent cell (update gate plus tanh candidate, no reset gate):

    z_t = sigmoid([e_t, h_{t-1}] @ Wz + bz)
    c_t = tanh([e_t, h_{t-1}] @ Wc + bc)
    h_t = (1 - z_t) * h_{t-1} + z_t * c_t
    logits_t = h_t @ Wo + bo

Everything runs in float64. Gradients are exact backpropagation through
time; callers pass ``dlogits`` so the same backward pass serves both the
likelihood losses and the KL penalty.
"""
from __future__ import annotations

import hashlib
import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .routeworld import all_actions, all_landmarks

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
THINK, END_THINK, ANSWER, END_ANSWER = "<think>", "</think>", "<answer>", "</answer>"

_GRAMMAR = ["go", "straight", "for", "steps", "past", "the", "and", "turn", "left", "right", "at"]
_TEMPLATE = [
    "You", "walked", "following", "route", "Describe", "in", "In", "FORWARD", "REVERSE",
    "order", "what", "is", "sequence", "of", "direction", "changes", "landmarks", "actions", "Options",
]
_PUNCT = [";", ".", ",", ":", "?", ")"]
_NO_SPACE_BEFORE = frozenset(_PUNCT)
_TOKEN_RE = re.compile(r"</?[a-z]+>|\d|\w+|[^\w\s]")


class VocabError(ValueError):
    pass


def _default_tokens() -> list[str]:
    tokens = [PAD, BOS, EOS, THINK, END_THINK, ANSWER, END_ANSWER]
    tokens += _PUNCT
    tokens += [str(d) for d in range(10)]
    tokens += ["A", "B", "C", "D"]
    words = list(_GRAMMAR) + list(_TEMPLATE)
    for phrase in all_landmarks() + all_actions():
        words.extend(phrase.split())
    for w in words:
        if w not in tokens:
            tokens.append(w)
    return tokens


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...] = field(default_factory=lambda: tuple(_default_tokens()))

    def __post_init__(self) -> None:
        if len(set(self.tokens)) != len(self.tokens):
            raise VocabError("duplicate tokens in vocabulary")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        try:
            return self._index[token]  # type: ignore[attr-defined]
        except KeyError:
            raise VocabError(f"out-of-vocabulary word {token!r}") from None

    @property
    def pad(self) -> int:
        return self.id(PAD)

    @property
    def bos(self) -> int:
        return self.id(BOS)

    @property
    def eos(self) -> int:
        return self.id(EOS)

    def encode(self, text: str) -> list[int]:
        return [self.id(tok) for tok in _TOKEN_RE.findall(text)]

    def decode(self, ids: Iterable[int]) -> str:
        out: list[str] = []
        prev = None
        for i in ids:
            tok = self.tokens[int(i)]
            if tok in (PAD, BOS, EOS):
                continue
            glue = not out or tok in _NO_SPACE_BEFORE or (tok.isdigit() and prev is not None and prev.isdigit())
            out.append(tok if glue else " " + tok)
            prev = tok
        return "".join(out)

    def hash(self) -> bytes:
        return hashlib.sha256("\n".join(self.tokens).encode()).digest()


DEFAULT_VOCAB = Vocab()


# ---------------------------------------------------------------------------
# parameters

@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 32
    hidden: int = 64
    init_scale: float = 0.08


PARAM_NAMES = ("emb", "Wz", "bz", "Wc", "bc", "Wo", "bo")


@dataclass
class Params:
    config: ModelConfig
    emb: np.ndarray
    Wz: np.ndarray
    bz: np.ndarray
    Wc: np.ndarray
    bc: np.ndarray
    Wo: np.ndarray
    bo: np.ndarray

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> "Params":
        d, h, v, s = config.d_model, config.hidden, config.vocab_size, config.init_scale
        u = lambda *shape: rng.uniform(-s, s, size=shape)
        return cls(config, u(v, d), u(d + h, h), u(h), u(d + h, h), u(h), u(h, v), u(v))

    @classmethod
    def zeros(cls, config: ModelConfig) -> "Params":
        d, h, v = config.d_model, config.hidden, config.vocab_size
        z = np.zeros
        return cls(config, z((v, d)), z((d + h, h)), z(h), z((d + h, h)), z(h), z((h, v)), z(v))

    def tensors(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in PARAM_NAMES]

    def copy(self) -> "Params":
        return Params(self.config, *(t.copy() for t in self.tensors()))

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors()])

    def with_flat(self, vec: np.ndarray) -> "Params":
        out, off = [], 0
        for t in self.tensors():
            out.append(vec[off:off + t.size].reshape(t.shape).copy())
            off += t.size
        return Params(self.config, *out)

    def scaled_add(self, other: "Params", alpha: float) -> "Params":
        return Params(self.config, *(a + alpha * b for a, b in zip(self.tensors(), other.tensors())))

    def norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(t * t)) for t in self.tensors())))

    def all_finite(self) -> bool:
        return all(np.isfinite(t).all() for t in self.tensors())

    def same_shape(self, other: "Params") -> bool:
        return self.config == other.config


# ---------------------------------------------------------------------------
# forward / backward

def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@dataclass
class Cache:
    inputs: np.ndarray     # (B, S) token ids fed at each step
    E: np.ndarray          # (B, S, d) embeddings
    Hprev: np.ndarray      # (B, S, h) state before each step
    Z: np.ndarray
    C: np.ndarray
    H: np.ndarray          # (B, S, h) state after each step
    logits: np.ndarray     # (B, S, V)


def forward(params: Params, inputs: np.ndarray, h0: np.ndarray | None = None) -> Cache:
    B, S = inputs.shape
    d, h = params.config.d_model, params.config.hidden
    W = np.concatenate([params.Wz, params.Wc], axis=1)
    b = np.concatenate([params.bz, params.bc])
    E = params.emb[inputs]
    XW = E @ W[:d] + b
    Wh = W[d:]
    Hprev = np.empty((B, S, h))
    Z = np.empty((B, S, h))
    C = np.empty((B, S, h))
    H = np.empty((B, S, h))
    state = np.zeros((B, h)) if h0 is None else h0
    for s in range(S):
        Hprev[:, s] = state
        pre = XW[:, s] + state @ Wh
        z = _sigmoid(pre[:, :h])
        c = np.tanh(pre[:, h:])
        state = state + z * (c - state)
        Z[:, s], C[:, s], H[:, s] = z, c, state
    logits = H @ params.Wo + params.bo
    return Cache(inputs, E, Hprev, Z, C, H, logits)


def backward(params: Params, cache: Cache, dlogits: np.ndarray) -> Params:
    """Gradient of ``sum(dlogits * logits)`` with respect to every parameter."""
    d, h = params.config.d_model, params.config.hidden
    B, S, _ = dlogits.shape
    W = np.concatenate([params.Wz, params.Wc], axis=1)
    Wh_T = W[d:].T
    dWo = cache.H.reshape(-1, h).T @ dlogits.reshape(-1, dlogits.shape[-1])
    dbo = dlogits.sum(axis=(0, 1))
    dH = dlogits @ params.Wo.T
    DA = np.empty((B, S, 2 * h))
    carry = np.zeros((B, h))
    for s in range(S - 1, -1, -1):
        dh = dH[:, s] + carry
        z, c, hp = cache.Z[:, s], cache.C[:, s], cache.Hprev[:, s]
        da_z = dh * (c - hp) * z * (1.0 - z)
        da_c = dh * z * (1.0 - c * c)
        da = np.concatenate([da_z, da_c], axis=1)
        DA[:, s] = da
        carry = dh * (1.0 - z) + da @ Wh_T
    DA2 = DA.reshape(-1, 2 * h)
    dW = np.concatenate([cache.E.reshape(-1, d), cache.Hprev.reshape(-1, h)], axis=1).T @ DA2
    db = DA2.sum(axis=0)
    demb = np.zeros_like(params.emb)
    np.add.at(demb, cache.inputs.ravel(), DA2 @ W[:d].T)
    return Params(params.config, demb, dW[:, :h], db[:h], dW[:, h:], db[h:], dWo, dbo)


# ---------------------------------------------------------------------------
# batching helpers

@dataclass
class Batch:
    """Right-padded ``[BOS] + x + y`` sequences with the span of ``y`` marked."""

    inputs: np.ndarray     # (B, S)
    targets: np.ndarray    # (B, S)
    target_mask: np.ndarray  # (B, S) 1.0 where targets[b, s] belongs to y
    y_start: np.ndarray
    y_len: np.ndarray


def make_batch(pairs: Sequence[tuple[Sequence[int], Sequence[int]]], bos: int, pad: int) -> Batch:
    seqs = [[bos, *x, *y] for x, y in pairs]
    T = max(len(s) for s in seqs)
    T = max(T, 2)
    full = np.full((len(seqs), T), pad, dtype=np.int64)
    mask = np.zeros((len(seqs), T - 1))
    y_start = np.empty(len(seqs), dtype=np.int64)
    y_len = np.empty(len(seqs), dtype=np.int64)
    for b, ((x, y), s) in enumerate(zip(pairs, seqs)):
        full[b, : len(s)] = s
        mask[b, len(x): len(x) + len(y)] = 1.0
        y_start[b], y_len[b] = len(x), len(y)
    return Batch(full[:, :-1], full[:, 1:], mask, y_start, y_len)


def token_logprobs(cache: Cache, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(log-probabilities of every next-token distribution, log p of the realized targets)."""
    lp = log_softmax(cache.logits)
    picked = np.take_along_axis(lp, targets[..., None], axis=-1)[..., 0]
    return lp, picked


def weighted_loglik_grad(params: Params, batch: Batch, weights: np.ndarray) -> tuple[np.ndarray, Params]:
    """Per-sequence log-likelihoods and the gradient of ``sum_b weights[b] * loglik_b``.

    ``weights`` may be (B,) or a per-position (B, S) array (already masked).
    """
    cache = forward(params, batch.inputs)
    lp, picked = token_logprobs(cache, batch.targets)
    loglik = (picked * batch.target_mask).sum(axis=1)
    wpos = weights[:, None] * batch.target_mask if weights.ndim == 1 else weights
    dlogits = -np.exp(lp) * wpos[..., None]
    np.put_along_axis(
        dlogits, batch.targets[..., None],
        np.take_along_axis(dlogits, batch.targets[..., None], axis=-1) + wpos[..., None], axis=-1,
    )
    return loglik, backward(params, cache, dlogits)


# ---------------------------------------------------------------------------
# public single-sequence API

def logprob(params: Params, x: Sequence[int], y: Sequence[int], vocab: Vocab = DEFAULT_VOCAB) -> float:
    if len(y) == 0:
        return 0.0
    batch = make_batch([(x, y)], vocab.bos, vocab.pad)
    cache = forward(params, batch.inputs)
    _, picked = token_logprobs(cache, batch.targets)
    return float((picked * batch.target_mask).sum())


def next_token_distributions(params: Params, x: Sequence[int], y: Sequence[int],
                             vocab: Vocab = DEFAULT_VOCAB) -> list[np.ndarray]:
    """Teacher-forced next-token distributions at each position of ``y``."""
    if len(y) == 0:
        return []
    batch = make_batch([(x, y)], vocab.bos, vocab.pad)
    cache = forward(params, batch.inputs)
    lp = log_softmax(cache.logits[0, len(x): len(x) + len(y)])
    return list(np.exp(lp))


def grad_weighted_loglik(params: Params, x: Sequence[int], pairs: Sequence[tuple[Sequence[int], float]],
                         vocab: Vocab = DEFAULT_VOCAB) -> Params:
    """Exact gradient of ``sum_k w_k * logprob(params, x, y_k)``."""
    if not pairs:
        return Params.zeros(params.config)
    batch = make_batch([(x, y) for y, _ in pairs], vocab.bos, vocab.pad)
    w = np.array([wk for _, wk in pairs], dtype=np.float64)
    _, grad = weighted_loglik_grad(params, batch, w)
    return grad


# ---------------------------------------------------------------------------
# sampling

@dataclass
class SampledSeq:
    ids: list[int]
    logprob: float
    distributions: list[np.ndarray] | None = None


def encode_prompts(params: Params, prompts: Sequence[Sequence[int]], bos: int, pad: int) -> np.ndarray:
    """Hidden state after consuming ``[BOS] + x`` for each prompt."""
    T = max(len(p) for p in prompts) + 1
    inputs = np.full((len(prompts), T), pad, dtype=np.int64)
    for b, p in enumerate(prompts):
        inputs[b, 0] = bos
        inputs[b, 1: 1 + len(p)] = p
    cache = forward(params, inputs)
    last = np.array([len(p) for p in prompts])
    return cache.H[np.arange(len(prompts)), last]


def _step(params: Params, state: np.ndarray, tokens: np.ndarray) -> np.ndarray:
    inp = np.concatenate([params.emb[tokens], state], axis=1)
    z = _sigmoid(inp @ params.Wz + params.bz)
    c = np.tanh(inp @ params.Wc + params.bc)
    return state + z * (c - state)


def sample_batch(params: Params, prompts: Sequence[Sequence[int]], temperature: float, max_len: int,
                 rng: np.random.Generator, vocab: Vocab = DEFAULT_VOCAB,
                 keep_distributions: bool = False) -> list[SampledSeq]:
    """Ancestral sampling from ``softmax(logits / temperature)`` for every prompt at once.

    Reported log-probabilities are always under the temperature-1 policy.
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    B = len(prompts)
    state = encode_prompts(params, prompts, vocab.bos, vocab.pad)
    eos = vocab.eos
    ids = [[] for _ in range(B)]
    dists: list[list[np.ndarray]] = [[] for _ in range(B)]
    total = np.zeros(B)
    alive = np.ones(B, dtype=bool)
    for _ in range(max_len):
        logits = state @ params.Wo + params.bo
        lp = log_softmax(logits)
        scaled = log_softmax(logits / temperature)
        probs = np.exp(scaled)
        cdf = np.cumsum(probs, axis=1)
        u = rng.random(B) * cdf[:, -1]
        tok = np.minimum((cdf < u[:, None]).sum(axis=1), probs.shape[1] - 1)
        for b in np.flatnonzero(alive):
            ids[b].append(int(tok[b]))
            total[b] += lp[b, tok[b]]
            if keep_distributions:
                dists[b].append(np.exp(lp[b]))
        alive &= tok != eos
        if not alive.any():
            break
        state = _step(params, state, tok)
    return [SampledSeq(ids[b], float(total[b]), dists[b] if keep_distributions else None) for b in range(B)]


def sample(params: Params, x: Sequence[int], temperature: float, max_len: int, rng: np.random.Generator,
           vocab: Vocab = DEFAULT_VOCAB, keep_distributions: bool = False) -> SampledSeq:
    return sample_batch(params, [x], temperature, max_len, rng, vocab, keep_distributions)[0]


def greedy_batch(params: Params, prompts: Sequence[Sequence[int]], max_len: int,
                 vocab: Vocab = DEFAULT_VOCAB) -> list[list[int]]:
    B = len(prompts)
    state = encode_prompts(params, prompts, vocab.bos, vocab.pad)
    ids = [[] for _ in range(B)]
    alive = np.ones(B, dtype=bool)
    for _ in range(max_len):
        tok = np.argmax(state @ params.Wo + params.bo, axis=1)
        for b in np.flatnonzero(alive):
            ids[b].append(int(tok[b]))
        alive &= tok != vocab.eos
        if not alive.any():
            break
        state = _step(params, state, tok)
    return ids


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"STR1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: Params, path: str | Path, vocab: Vocab = DEFAULT_VOCAB,
                    meta: dict | None = None) -> None:
    cfg = {
        "vocab_size": params.config.vocab_size,
        "d_model": params.config.d_model,
        "hidden": params.config.hidden,
        "init_scale": params.config.init_scale,
        "meta": meta or {},
    }
    blob = json.dumps(cfg, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(vocab.hash())
        for t in params.tensors():
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path, vocab: Vocab = DEFAULT_VOCAB) -> tuple[Params, dict]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, n = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    off = 12
    cfg = json.loads(data[off: off + n])
    off += n
    if data[off: off + 32] != vocab.hash():
        raise CheckpointError(f"{path}: vocabulary hash mismatch")
    off += 32
    config = ModelConfig(cfg["vocab_size"], cfg["d_model"], cfg["hidden"], cfg["init_scale"])
    shapes = [t.shape for t in Params.zeros(config).tensors()]
    tensors = []
    for shape in shapes:
        size = int(np.prod(shape))
        tensors.append(np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64))
        off += 8 * size
    if off != len(data):
        raise CheckpointError(f"{path}: trailing bytes after parameter tensors")
    return Params(config, *tensors), cfg.get("meta", {})


def new_params(seed: int, vocab: Vocab = DEFAULT_VOCAB, d_model: int = 32, hidden: int = 64) -> Params:
    return Params.init(ModelConfig(len(vocab), d_model, hidden), np.random.default_rng(seed))
