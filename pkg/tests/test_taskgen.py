import numpy as np
import pytest
from hypothesis import given, settings

from conftest import route_from_seed, routes
from stlab.routeworld import Heading, Route, SceneKind, Segment, Turn
from stlab.taskgen import (
    MCQ_KINDS, Dataset, DatasetError, GenConfig, Polarity, QAItem, Ratio, SceneOOD, TaskKind, attach_cot,
    build_dataset, describe, make_distractors, make_mcq, query_sequence, split,
)

F, R = Polarity.FORWARD, Polarity.REVERSE


def toy(turns, landmarks=None, actions=None, scene=SceneKind.INDOOR_SINGLE):
    landmarks = landmarks or {}
    actions = actions or {}
    segs = [Segment(t, 1 + i % 3, landmarks.get(i), actions.get(i)) for i, t in enumerate([Turn.STRAIGHT] + turns)]
    return Route("toy", scene, (16, 16), Heading.NORTH, tuple(segs), 32)


@pytest.fixture(scope="module")
def small_ds():
    return build_dataset(GenConfig(), 60, 5)


def test_describe_example():
    r = Route("x", SceneKind.INDOOR_SINGLE, (5, 5), Heading.EAST,
              (Segment(Turn.STRAIGHT, 2, "door"), Segment(Turn.LEFT, 1)), 32)
    assert describe(r, F) == "go straight for 2 steps past the door; turn left; go straight for 1 steps."
    rev = describe(r, R)
    assert "turn right" in rev and "left" not in rev
    assert describe(r, R) == rev


def test_direction_mcq_mirror_reverse():
    r = toy([Turn.LEFT, Turn.LEFT])
    item = make_mcq(r, TaskKind.DIRECTION_MCQ, F, np.random.default_rng(0))
    assert item.options[item.correct_index] == "left, left"
    item = make_mcq(r, TaskKind.DIRECTION_MCQ, R, np.random.default_rng(0))
    assert item.options[item.correct_index] == "right, right"


def test_mcq_deterministic_under_seed():
    r = route_from_seed(11)
    a = make_mcq(r, TaskKind.DIRECTION_MCQ, F, np.random.default_rng(11))
    b = make_mcq(r, TaskKind.DIRECTION_MCQ, F, np.random.default_rng(11))
    assert a == b


def test_short_sequence_skipped():
    r = toy([Turn.LEFT])
    assert make_mcq(r, TaskKind.DIRECTION_MCQ, F, np.random.default_rng(0)) is None
    assert make_mcq(r, TaskKind.LANDMARK_MCQ, F, np.random.default_rng(0)) is None


def test_distractor_budget_exhaustion_returns_none():
    # two identical straight turns leave only a handful of distinct wrong sequences
    assert make_distractors(["straight", "straight"], TaskKind.DIRECTION_MCQ, SceneKind.INDOOR_SINGLE,
                            np.random.default_rng(0), n=50, budget=5) is None


@given(routes)
@settings(max_examples=100, deadline=None)
def test_mcq_options_invariants(route):
    rng = np.random.default_rng(0)
    for kind in MCQ_KINDS:
        for pol in Polarity:
            item = make_mcq(route, kind, pol, rng)
            if item is None:
                continue
            truth = ", ".join(query_sequence(route, kind, pol))
            assert len(item.options) == 4 and len(set(item.options)) == 4
            assert [o == truth for o in item.options].count(True) == 1
            assert item.options[item.correct_index] == truth
            assert item.answer == "ABCD"[item.correct_index]


@given(routes)
@settings(max_examples=100, deadline=None)
def test_direction_mirror_consistency(route):
    fwd = query_sequence(route, TaskKind.DIRECTION_MCQ, F)
    rev = query_sequence(route, TaskKind.DIRECTION_MCQ, R)
    assert rev == [Turn(t).mirror().value for t in reversed(fwd)]


def test_prompts_carry_forward_context(small_ds):
    for it in small_ds.items[:40]:
        route = small_ds.routes[it.route_id]
        assert describe(route, F) in it.prompt
        word = "FORWARD" if it.polarity is F else "REVERSE"
        assert word in it.prompt


def test_single_route_at_most_eight(small_ds):
    ds = build_dataset(GenConfig(), 1, 3)
    assert 2 <= len(ds) <= 8


def test_counts_sum(small_ds):
    assert sum(small_ds.manifest["counts"].values()) == len(small_ds) == small_ds.manifest["n_items"]


def test_ratio_split_exact():
    ds = build_dataset(GenConfig(), 700, 0)
    train, test = split(ds, Ratio(1, 6), np.random.default_rng(0))
    assert len({it.route_id for it in train.items}) == 100
    assert len({it.route_id for it in test.items}) == 600
    ids_tr = {it.id for it in train.items}
    ids_te = {it.id for it in test.items}
    assert not ids_tr & ids_te and ids_tr | ids_te == {it.id for it in ds.items}
    assert not {it.route_id for it in train.items} & {it.route_id for it in test.items}
    again = split(ds, Ratio(1, 6), np.random.default_rng(0))[0]
    assert [it.id for it in again.items] == [it.id for it in train.items]


def test_scene_ood_split(small_ds):
    indoor = frozenset({SceneKind.INDOOR_SINGLE, SceneKind.INDOOR_MULTI})
    train, test = split(small_ds, SceneOOD(indoor, frozenset({SceneKind.OUTDOOR})), np.random.default_rng(0))
    assert all(it.scene is not SceneKind.OUTDOOR for it in train.items)
    assert all(it.scene is SceneKind.OUTDOOR for it in test.items)
    assert len(train) + len(test) == len(small_ds)


def test_split_errors(small_ds):
    with pytest.raises(DatasetError):
        split(small_ds, Ratio(0, 6), np.random.default_rng(0))
    with pytest.raises(DatasetError):
        split(small_ds, SceneOOD(frozenset({SceneKind.OUTDOOR}), frozenset({SceneKind.OUTDOOR})),
              np.random.default_rng(0))
    only_outdoor = small_ds.subset([it for it in small_ds.items if it.scene is SceneKind.OUTDOOR])
    with pytest.raises(DatasetError):
        split(only_outdoor, SceneOOD(frozenset({SceneKind.INDOOR_SINGLE}), frozenset({SceneKind.OUTDOOR})),
              np.random.default_rng(0))


def test_attach_cot(small_ds):
    ds = attach_cot(small_ds)
    for it, orig in zip(ds.items, small_ds.items):
        route = ds.routes[it.route_id]
        assert it.cot == describe(route, it.polarity.opposite())
        assert it.answer == orig.answer
    rev = next(it for it in ds.items if it.kind is TaskKind.DIRECTION_MCQ and it.polarity is R)
    assert rev.cot == describe(ds.routes[rev.route_id], F)
    assert attach_cot(ds).items == ds.items


def test_dataset_round_trip(tmp_path, small_ds):
    small_ds.save(tmp_path / "a")
    back = Dataset.load(tmp_path / "a")
    assert back.items == small_ds.items and back.routes == small_ds.routes
    back.save(tmp_path / "b")
    for name in ("items.jsonl", "routes.jsonl", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_item_json_round_trip(small_ds):
    for it in small_ds.items[:20]:
        assert QAItem.from_json(it.to_json()) == it


def test_duplicate_ids_rejected(small_ds):
    with pytest.raises(DatasetError):
        Dataset(small_ds.items[:2] * 2, small_ds.routes)


def test_gen_config_json_round_trip():
    cfg = GenConfig(action_prob=0.3, scenes=(SceneKind.OUTDOOR,))
    assert GenConfig.from_json(cfg.to_json()) == cfg
