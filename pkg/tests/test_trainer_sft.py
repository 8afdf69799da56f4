import math

import numpy as np
import pytest

from stlab.gradcheck import SMALL_VOCAB, numeric_grad, relative_error
from stlab.seqmodel import DEFAULT_VOCAB, ModelConfig, Params, load_checkpoint, new_params
from stlab.taskgen import GenConfig, TaskKind, attach_cot, build_dataset, describe, Polarity
from stlab.trainer_sft import (
    CoTExample, SFTConfig, TrainingError, build_cot_examples, sft_loss, sft_loss_and_grad, target_text, train_sft,
)

V = DEFAULT_VOCAB


@pytest.fixture(scope="module")
def ds():
    return attach_cot(build_dataset(GenConfig(), 20, 1))


def test_reverse_target_thinks_forward(ds):
    it = next(i for i in ds.items if i.kind is TaskKind.DIRECTION_MCQ and i.polarity is Polarity.REVERSE)
    text = target_text(it)
    fwd = describe(ds.routes[it.route_id], Polarity.FORWARD)
    assert text.startswith(f"<think> {fwd} </think>")
    assert text.endswith(f"<answer> {it.correct_letter} </answer>")


def test_examples_per_item(ds):
    ex = build_cot_examples(ds)
    assert len(ex) == len(ds)
    for e, it in zip(ex, ds.items):
        assert e.target[-1] == V.eos
        if it.kind.is_mcq:
            inner = V.decode(e.target).split("<answer>")[1].split("</answer>")[0].split()
            assert inner == [it.correct_letter]


def test_missing_cot_raises():
    raw = build_dataset(GenConfig(), 2, 1)
    with pytest.raises(ValueError):
        build_cot_examples(raw)
    assert len(build_cot_examples(raw, with_cot=False)) == len(raw)


def test_untrained_loss_near_log_vocab(ds):
    ex = build_cot_examples(ds)[:64]
    loss = sft_loss(new_params(0), ex)
    assert abs(loss - math.log(len(V))) / math.log(len(V)) < 0.05


def test_loss_nonnegative_and_empty_batch(ds):
    ex = build_cot_examples(ds)[:8]
    assert sft_loss(new_params(1), ex) >= 0
    with pytest.raises(ValueError):
        sft_loss(new_params(1), [])


def test_loss_ignores_prompt_and_padding():
    p = Params.init(ModelConfig(len(SMALL_VOCAB), 3, 4, 0.5), np.random.default_rng(0))
    short = CoTExample("a", (3,), (4, 2))
    long = CoTExample("b", (5, 5, 5, 5), (3, 4, 5, 2))
    alone = sft_loss(p, [short], SMALL_VOCAB)
    together = sft_loss(p, [short, long], SMALL_VOCAB)
    other = sft_loss(p, [long], SMALL_VOCAB)
    assert abs(together - (alone + other) / 2) < 1e-12


def test_sft_gradient_finite_differences():
    p = Params.init(ModelConfig(len(SMALL_VOCAB), 3, 4, 0.5), np.random.default_rng(3))
    batch = [CoTExample("a", (3, 4), (5, 2)), CoTExample("b", (4,), (3, 3, 5, 2))]
    _, g = sft_loss_and_grad(p, batch, SMALL_VOCAB)
    num = numeric_grad(lambda q: sft_loss(q, batch, SMALL_VOCAB), p)
    assert relative_error(g.flat(), num) <= 1e-4


def test_overfit_single_example(ds):
    ex = build_cot_examples(ds)[:1]
    _, curve = train_sft(new_params(0), ex, SFTConfig(lr=3e-2, batch_size=1, epochs=500))
    assert curve[-1][2] <= 0.01


def test_zero_lr_keeps_params_and_flat_curve(ds):
    ex = build_cot_examples(ds)[:10]
    p0 = new_params(2)
    # one full batch per step, so every step scores the same examples
    p1, curve = train_sft(p0, ex, SFTConfig(lr=0.0, batch_size=len(ex), epochs=3))
    assert np.array_equal(p0.flat(), p1.flat())
    assert len({l for _, _, l in curve}) == 1


def test_deterministic_checkpoint(tmp_path, ds):
    ex = build_cot_examples(ds)[:12]
    cfg = SFTConfig(batch_size=4, epochs=2, seed=5)
    train_sft(new_params(0), ex, cfg, checkpoint_path=tmp_path / "a.ckpt", curve_path=tmp_path / "a.csv")
    train_sft(new_params(0), ex, cfg, checkpoint_path=tmp_path / "b.ckpt", curve_path=tmp_path / "b.csv")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert load_checkpoint(tmp_path / "a.ckpt")[1]["stage"] == "sft"


def test_nonfinite_loss_aborts(ds):
    p = new_params(0)
    p.Wo[:] = np.nan
    with pytest.raises(TrainingError) as exc:
        train_sft(p, build_cot_examples(ds)[:4], SFTConfig(batch_size=2, epochs=1))
    assert exc.value.step == 0


def test_defaults_halve_train_loss():
    from stlab.experiments import ExperimentConfig, ratio_split
    train, _ = ratio_split(ExperimentConfig())
    assert len(train) == 630
    ex = build_cot_examples(train)
    _, curve = train_sft(new_params(0), ex, SFTConfig())
    first_epoch = np.mean([l for _, e, l in curve if e == 0][:3])
    last_epoch = np.mean([l for _, e, l in curve if e == curve[-1][1]])
    assert last_epoch < 0.5 * first_epoch
