"""Benchmark construction: route descriptions, MCQs with distractors, splits and CoT."""
from __future__ import annotations

import enum
import hashlib
import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .routeworld import (
    ACTIONS,
    LANDMARKS,
    Route,
    RouteConfig,
    SceneKind,
    Turn,
    action_sequence,
    generate_route,
    landmark_sequence,
    reverse_route,
    turn_sequence,
)

log = logging.getLogger(__name__)

OPTION_LETTERS = ("A", "B", "C", "D")


class TaskKind(str, enum.Enum):
    ROUTE_DESC = "RouteDesc"
    DIRECTION_MCQ = "DirectionMCQ"
    LANDMARK_MCQ = "LandmarkMCQ"
    ACTION_MCQ = "ActionMCQ"

    @property
    def is_mcq(self) -> bool:
        return self is not TaskKind.ROUTE_DESC


MCQ_KINDS = (TaskKind.DIRECTION_MCQ, TaskKind.LANDMARK_MCQ, TaskKind.ACTION_MCQ)


class Polarity(str, enum.Enum):
    FORWARD = "Forward"
    REVERSE = "Reverse"

    def opposite(self) -> "Polarity":
        return Polarity.REVERSE if self is Polarity.FORWARD else Polarity.FORWARD


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class QAItem:
    id: str
    route_id: str
    scene: SceneKind
    kind: TaskKind
    polarity: Polarity
    prompt: str
    answer: str
    options: tuple[str, ...] | None = None
    correct_index: int | None = None
    ground_truth: str | None = None
    cot: str | None = None

    @property
    def family(self) -> tuple[TaskKind, Polarity]:
        return (self.kind, self.polarity)

    @property
    def correct_letter(self) -> str:
        if self.correct_index is None:
            raise DatasetError(f"item {self.id} is not a multiple-choice item")
        return OPTION_LETTERS[self.correct_index]

    def to_json(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "id": self.id,
            "route_id": self.route_id,
            "scene": self.scene.value,
            "kind": self.kind.value,
            "polarity": self.polarity.value,
            "prompt": self.prompt,
        }
        if self.options is not None:
            d["options"] = list(self.options)
            d["correct_index"] = self.correct_index
        if self.ground_truth is not None:
            d["ground_truth"] = self.ground_truth
        if self.cot is not None:
            d["cot"] = self.cot
        d["answer"] = self.answer
        return d

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "QAItem":
        return cls(
            id=d["id"],
            route_id=d["route_id"],
            scene=SceneKind(d["scene"]),
            kind=TaskKind(d["kind"]),
            polarity=Polarity(d["polarity"]),
            prompt=d["prompt"],
            answer=d["answer"],
            options=tuple(d["options"]) if "options" in d else None,
            correct_index=d.get("correct_index"),
            ground_truth=d.get("ground_truth"),
            cot=d.get("cot"),
        )


# ---------------------------------------------------------------------------
# canonical descriptions

def describe(route: Route, polarity: Polarity) -> str:
    if polarity is Polarity.REVERSE:
        route = reverse_route(route)
    clauses = []
    for i, seg in enumerate(route.segments):
        if i > 0 and seg.turn is not Turn.STRAIGHT:
            clauses.append(f"turn {seg.turn.value}")
        move = f"go straight for {seg.length} steps"
        if seg.landmark is not None:
            move += f" past the {seg.landmark}"
        if seg.action is not None:
            move += f" and {seg.action}"
        clauses.append(move)
    return "; ".join(clauses) + "."


def oriented(route: Route, polarity: Polarity) -> Route:
    return reverse_route(route) if polarity is Polarity.REVERSE else route


def query_sequence(route: Route, kind: TaskKind, polarity: Polarity) -> list[str]:
    r = oriented(route, polarity)
    if kind is TaskKind.DIRECTION_MCQ:
        return [t.value for t in turn_sequence(r)]
    if kind is TaskKind.LANDMARK_MCQ:
        return landmark_sequence(r)
    if kind is TaskKind.ACTION_MCQ:
        return action_sequence(r)
    raise DatasetError(f"{kind} has no option sequence")


# ---------------------------------------------------------------------------
# prompts

_WHAT = {
    TaskKind.DIRECTION_MCQ: "direction changes",
    TaskKind.LANDMARK_MCQ: "landmarks",
    TaskKind.ACTION_MCQ: "actions",
}


def _order_word(polarity: Polarity) -> str:
    return "FORWARD" if polarity is Polarity.FORWARD else "REVERSE"


def route_prompt(route: Route, polarity: Polarity) -> str:
    return (
        f"You walked the following route: {describe(route, Polarity.FORWARD)} "
        f"Describe the route in {_order_word(polarity)} order."
    )


def mcq_prompt(route: Route, kind: TaskKind, polarity: Polarity, options: Sequence[str]) -> str:
    opts = " ".join(f"{letter}) {text}" for letter, text in zip(OPTION_LETTERS, options))
    return (
        f"You walked the following route: {describe(route, Polarity.FORWARD)} "
        f"In {_order_word(polarity)} order, what is the sequence of {_WHAT[kind]}? "
        f"Options: {opts}"
    )


# ---------------------------------------------------------------------------
# distractors

def _alphabet(kind: TaskKind, scene: SceneKind) -> tuple[str, ...]:
    if kind is TaskKind.DIRECTION_MCQ:
        return tuple(t.value for t in Turn)
    if kind is TaskKind.LANDMARK_MCQ:
        return LANDMARKS[scene]
    return ACTIONS[scene]


def _perturb_one(seq: list[str], kind: TaskKind, alphabet, rng) -> list[str]:
    out = list(seq)
    if kind is TaskKind.DIRECTION_MCQ:
        turnable = [i for i, t in enumerate(out) if t != Turn.STRAIGHT.value]
        if turnable:
            i = turnable[int(rng.integers(len(turnable)))]
            out[i] = Turn(out[i]).mirror().value
            return out
    i = int(rng.integers(len(out)))
    others = [a for a in alphabet if a != out[i]]
    out[i] = others[int(rng.integers(len(others)))]
    return out


def _swap_adjacent(seq: list[str], rng) -> list[str]:
    out = list(seq)
    i = int(rng.integers(len(out) - 1))
    out[i], out[i + 1] = out[i + 1], out[i]
    return out


def _mirror_reverse(seq: list[str], kind: TaskKind) -> list[str]:
    out = list(reversed(seq))
    if kind is TaskKind.DIRECTION_MCQ:
        out = [Turn(t).mirror().value for t in out]
    return out


def _drop_or_duplicate(seq: list[str], rng) -> list[str]:
    out = list(seq)
    i = int(rng.integers(len(out)))
    if rng.random() < 0.5 and len(out) > 1:
        del out[i]
    else:
        out.insert(i, out[i])
    return out


def make_distractors(
    seq: Sequence[str], kind: TaskKind, scene: SceneKind, rng: np.random.Generator,
    n: int = 3, budget: int = 20,
) -> list[list[str]] | None:
    """Wrong options for ``seq``; ``None`` when ``budget`` rounds cannot yield ``n`` distinct ones."""
    seq = list(seq)
    alphabet = _alphabet(kind, scene)
    found: list[list[str]] = []
    for _ in range(budget):
        for make in (
            lambda: _perturb_one(seq, kind, alphabet, rng),
            lambda: _swap_adjacent(seq, rng),
            lambda: _mirror_reverse(seq, kind),
            lambda: _drop_or_duplicate(seq, rng),
        ):
            cand = make()
            if cand != seq and cand not in found:
                found.append(cand)
            if len(found) == n:
                return found
    return None


def make_mcq(route: Route, kind: TaskKind, polarity: Polarity, rng: np.random.Generator) -> QAItem | None:
    seq = query_sequence(route, kind, polarity)
    if len(seq) < 2:
        return None
    wrong = make_distractors(seq, kind, route.scene, rng)
    if wrong is None:
        log.info("skipping %s %s for route %s: distractor budget exhausted", kind.value, polarity.value, route.id)
        return None
    options = [", ".join(seq)] + [", ".join(w) for w in wrong]
    order = rng.permutation(len(options))
    shuffled = tuple(options[i] for i in order)
    correct = int(np.flatnonzero(order == 0)[0])
    return QAItem(
        id=f"{route.id}-{kind.value}-{polarity.value}",
        route_id=route.id,
        scene=route.scene,
        kind=kind,
        polarity=polarity,
        prompt=mcq_prompt(route, kind, polarity, shuffled),
        answer=OPTION_LETTERS[correct],
        options=shuffled,
        correct_index=correct,
    )


def make_route_desc(route: Route, polarity: Polarity) -> QAItem:
    truth = describe(route, polarity)
    return QAItem(
        id=f"{route.id}-{TaskKind.ROUTE_DESC.value}-{polarity.value}",
        route_id=route.id,
        scene=route.scene,
        kind=TaskKind.ROUTE_DESC,
        polarity=polarity,
        prompt=route_prompt(route, polarity),
        answer=truth,
        ground_truth=truth,
    )


# ---------------------------------------------------------------------------
# datasets

@dataclass(frozen=True)
class GenConfig:
    scenes: tuple[SceneKind, ...] = tuple(SceneKind)
    grid_size: int = 32
    segment_count_range: tuple[int, int] = (3, 6)
    length_range: tuple[int, int] = (1, 5)
    landmark_prob: float = 0.7
    action_prob: float = 0.5

    def route_config(self, scene: SceneKind) -> RouteConfig:
        return RouteConfig(
            scene=scene,
            grid_size=self.grid_size,
            segment_count_range=tuple(self.segment_count_range),
            length_range=tuple(self.length_range),
            landmark_prob=self.landmark_prob,
            action_prob=self.action_prob,
        )

    def to_json(self) -> dict[str, Any]:
        d = asdict(self)
        d["scenes"] = [s.value for s in self.scenes]
        d["segment_count_range"] = list(self.segment_count_range)
        d["length_range"] = list(self.length_range)
        return d

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "GenConfig":
        d = dict(d)
        if "scenes" in d:
            d["scenes"] = tuple(SceneKind(s) for s in d["scenes"])
        for key in ("segment_count_range", "length_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def config_hash(obj: Any) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def family_key(item: QAItem) -> str:
    return f"{item.kind.value}/{item.polarity.value}/{item.scene.value}"


@dataclass
class Dataset:
    items: list[QAItem]
    routes: dict[str, Route]
    manifest: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        ids = [it.id for it in self.items]
        if len(set(ids)) != len(ids):
            raise DatasetError("duplicate item ids")
        self.manifest = dict(self.manifest)
        self.manifest["counts"] = dict(sorted(Counter(family_key(it) for it in self.items).items()))
        self.manifest["n_items"] = len(self.items)
        self.manifest["n_routes"] = len({it.route_id for it in self.items})

    def __len__(self) -> int:
        return len(self.items)

    def subset(self, items: list[QAItem], **extra) -> "Dataset":
        routes = {it.route_id: self.routes[it.route_id] for it in items if it.route_id in self.routes}
        manifest = {k: v for k, v in self.manifest.items() if k in ("seed", "config_hash", "config")}
        manifest.update(extra)
        return Dataset(items, routes, manifest)

    def by_id(self) -> dict[str, QAItem]:
        return {it.id: it for it in self.items}

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "items.jsonl", "w", encoding="utf-8") as fh:
            for it in self.items:
                fh.write(json.dumps(it.to_json(), ensure_ascii=False) + "\n")
        with open(directory / "routes.jsonl", "w", encoding="utf-8") as fh:
            for rid in sorted(self.routes):
                fh.write(json.dumps(self.routes[rid].to_json(), ensure_ascii=False) + "\n")
        with open(directory / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(self.manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, directory: str | Path) -> "Dataset":
        directory = Path(directory)
        with open(directory / "items.jsonl", encoding="utf-8") as fh:
            items = [QAItem.from_json(json.loads(line)) for line in fh if line.strip()]
        routes: dict[str, Route] = {}
        rpath = directory / "routes.jsonl"
        if rpath.exists():
            with open(rpath, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        r = Route.from_json(json.loads(line))
                        routes[r.id] = r
        manifest = {}
        mpath = directory / "manifest.json"
        if mpath.exists():
            manifest = json.loads(mpath.read_text(encoding="utf-8"))
        return cls(items, routes, manifest)


def route_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-derived stream for route ``index``; makes generation order-independent."""
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def items_for_route(route: Route, rng: np.random.Generator) -> list[QAItem]:
    items = []
    for polarity in Polarity:
        items.append(make_route_desc(route, polarity))
    for kind in MCQ_KINDS:
        for polarity in Polarity:
            item = make_mcq(route, kind, polarity, rng)
            if item is not None:
                items.append(item)
    return items


def build_dataset(config: GenConfig, n_routes: int, seed: int) -> Dataset:
    if n_routes < 1:
        raise DatasetError("n_routes must be >= 1")
    items: list[QAItem] = []
    routes: dict[str, Route] = {}
    width = max(5, len(str(n_routes - 1)))
    for i in range(n_routes):
        rng = route_rng(seed, i)
        scene = config.scenes[int(rng.integers(len(config.scenes)))]
        route = generate_route(config.route_config(scene), rng, route_id=f"r{i:0{width}d}")
        routes[route.id] = route
        items.extend(items_for_route(route, rng))
    cfg = config.to_json()
    return Dataset(items, routes, {"seed": seed, "config": cfg, "config_hash": config_hash(cfg)})


# ---------------------------------------------------------------------------
# splits

@dataclass(frozen=True)
class Ratio:
    train: int
    test: int


@dataclass(frozen=True)
class SceneOOD:
    train_scenes: frozenset[SceneKind]
    test_scenes: frozenset[SceneKind]


def split(dataset: Dataset, mode: Ratio | SceneOOD, rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    if isinstance(mode, Ratio):
        if mode.train <= 0 or mode.test <= 0:
            raise DatasetError("ratio parts must be positive")
        route_ids = sorted({it.route_id for it in dataset.items})
        perm = rng.permutation(len(route_ids))
        n_train = int(round(len(route_ids) * mode.train / (mode.train + mode.test)))
        train_ids = {route_ids[i] for i in perm[:n_train]}
        train = [it for it in dataset.items if it.route_id in train_ids]
        test = [it for it in dataset.items if it.route_id not in train_ids]
        desc = f"ratio {mode.train}:{mode.test}"
    else:
        if not mode.train_scenes or not mode.test_scenes:
            raise DatasetError("scene sets must be non-empty")
        if mode.train_scenes & mode.test_scenes:
            raise DatasetError("train and test scene sets overlap")
        train = [it for it in dataset.items if it.scene in mode.train_scenes]
        test = [it for it in dataset.items if it.scene in mode.test_scenes]
        desc = "scene-ood {} -> {}".format(
            ",".join(sorted(s.value for s in mode.train_scenes)),
            ",".join(sorted(s.value for s in mode.test_scenes)),
        )
    if not train or not test:
        raise DatasetError(f"split {desc} leaves an empty side ({len(train)} train / {len(test)} test)")
    return dataset.subset(train, split=desc, side="train"), dataset.subset(test, split=desc, side="test")


def attach_cot(dataset: Dataset) -> Dataset:
    """Give every item the opposite-polarity description of its route as its thought."""
    items = []
    for it in dataset.items:
        try:
            route = dataset.routes[it.route_id]
        except KeyError:
            raise DatasetError(f"item {it.id}: route {it.route_id} not available") from None
        items.append(replace(it, cot=describe(route, it.polarity.opposite())))
    return Dataset(items, dataset.routes, dataset.manifest)


__all__ = [
    "Dataset",
    "DatasetError",
    "GenConfig",
    "MCQ_KINDS",
    "OPTION_LETTERS",
    "Polarity",
    "QAItem",
    "Ratio",
    "SceneOOD",
    "TaskKind",
    "attach_cot",
    "build_dataset",
    "describe",
    "make_distractors",
    "make_mcq",
    "make_route_desc",
    "query_sequence",
    "split",
]
