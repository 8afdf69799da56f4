"""Synthetic egocentric grid world: routes, their simulation and exact reversal.

Coordinates: x grows East, y grows North. ``Left`` is a counterclockwise
rotation of the heading, ``Right`` clockwise.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, replace
from typing import Any

import numpy as np


class Heading(enum.IntEnum):
    NORTH = 0
    EAST = 1
    SOUTH = 2
    WEST = 3

    def rotate(self, turn: "Turn") -> "Heading":
        if turn is Turn.LEFT:
            return Heading((self - 1) % 4)
        if turn is Turn.RIGHT:
            return Heading((self + 1) % 4)
        return self

    def opposite(self) -> "Heading":
        return Heading((self + 2) % 4)

    @property
    def delta(self) -> tuple[int, int]:
        return _DELTAS[self]


_DELTAS = {
    Heading.NORTH: (0, 1),
    Heading.EAST: (1, 0),
    Heading.SOUTH: (0, -1),
    Heading.WEST: (-1, 0),
}


class Turn(str, enum.Enum):
    LEFT = "left"
    RIGHT = "right"
    STRAIGHT = "straight"

    def mirror(self) -> "Turn":
        if self is Turn.LEFT:
            return Turn.RIGHT
        if self is Turn.RIGHT:
            return Turn.LEFT
        return Turn.STRAIGHT


class SceneKind(str, enum.Enum):
    INDOOR_SINGLE = "IndoorSingle"
    INDOOR_MULTI = "IndoorMulti"
    OUTDOOR = "Outdoor"

    @property
    def is_indoor(self) -> bool:
        return self is not SceneKind.OUTDOOR


_INDOOR_LANDMARKS = ("door", "sofa", "table", "fridge", "staircase", "sink")
_INDOOR_ACTIONS = ("open the door", "climb the stairs", "pick up the cup")

LANDMARKS: dict[SceneKind, tuple[str, ...]] = {
    SceneKind.INDOOR_SINGLE: _INDOOR_LANDMARKS,
    SceneKind.INDOOR_MULTI: _INDOOR_LANDMARKS + ("corridor", "elevator", "office", "whiteboard"),
    SceneKind.OUTDOOR: ("tree", "shop", "crosswalk", "bench", "fountain", "bus stop"),
}

ACTIONS: dict[SceneKind, tuple[str, ...]] = {
    SceneKind.INDOOR_SINGLE: _INDOOR_ACTIONS,
    SceneKind.INDOOR_MULTI: _INDOOR_ACTIONS + ("take the elevator", "press the button"),
    SceneKind.OUTDOOR: ("cross the road", "wait at the light", "enter the shop"),
}


def all_landmarks() -> list[str]:
    names: list[str] = []
    for scene in SceneKind:
        names.extend(n for n in LANDMARKS[scene] if n not in names)
    return names


def all_actions() -> list[str]:
    names: list[str] = []
    for scene in SceneKind:
        names.extend(n for n in ACTIONS[scene] if n not in names)
    return names


class RouteError(ValueError):
    """Invalid route or infeasible generator configuration."""


class SimulationError(RouteError):
    def __init__(self, segment_index: int, cell: tuple[int, int]):
        super().__init__(f"segment {segment_index} leaves the grid at cell {cell}")
        self.segment_index = segment_index
        self.cell = cell


@dataclass(frozen=True)
class Segment:
    turn: Turn
    length: int
    landmark: str | None = None
    action: str | None = None


@dataclass(frozen=True)
class Route:
    id: str
    scene: SceneKind
    start: tuple[int, int]
    start_heading: Heading
    segments: tuple[Segment, ...]
    grid_size: int

    def validate(self) -> None:
        if not self.segments:
            raise RouteError(f"route {self.id} has no segments")
        if self.segments[0].turn is not Turn.STRAIGHT:
            raise RouteError(f"route {self.id}: first segment must go straight")
        for i, seg in enumerate(self.segments):
            if seg.length < 1:
                raise RouteError(f"route {self.id}: segment {i} has length {seg.length}")
            if seg.landmark is not None and seg.landmark not in LANDMARKS[self.scene]:
                raise RouteError(f"route {self.id}: landmark {seg.landmark!r} not in {self.scene.value}")
            if seg.action is not None and seg.action not in ACTIONS[self.scene]:
                raise RouteError(f"route {self.id}: action {seg.action!r} not in {self.scene.value}")
        simulate(self)

    def to_json(self) -> dict[str, Any]:
        segs = []
        for seg in self.segments:
            d: dict[str, Any] = {"turn": seg.turn.value, "len": seg.length}
            if seg.landmark is not None:
                d["landmark"] = seg.landmark
            if seg.action is not None:
                d["action"] = seg.action
            segs.append(d)
        return {
            "id": self.id,
            "scene": self.scene.value,
            "grid_size": self.grid_size,
            "start": list(self.start),
            "heading": self.start_heading.name.capitalize(),
            "segments": segs,
        }

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "Route":
        segments = tuple(
            Segment(Turn(s["turn"]), int(s["len"]), s.get("landmark"), s.get("action"))
            for s in d["segments"]
        )
        return cls(
            id=str(d["id"]),
            scene=SceneKind(d["scene"]),
            start=(int(d["start"][0]), int(d["start"][1])),
            start_heading=Heading[d["heading"].upper()],
            segments=segments,
            grid_size=int(d["grid_size"]),
        )


@dataclass(frozen=True)
class Trajectory:
    states: tuple[tuple[tuple[int, int], Heading], ...]

    @property
    def start(self) -> tuple[int, int]:
        return self.states[0][0]

    @property
    def end(self) -> tuple[tuple[int, int], Heading]:
        return self.states[-1]

    def __len__(self) -> int:
        return len(self.states)


@dataclass(frozen=True)
class RouteConfig:
    scene: SceneKind = SceneKind.INDOOR_SINGLE
    grid_size: int = 32
    segment_count_range: tuple[int, int] = (3, 6)
    length_range: tuple[int, int] = (1, 5)
    landmark_prob: float = 0.7
    action_prob: float = 0.5
    max_attempts: int = 1000

    def check(self) -> None:
        lo, hi = self.segment_count_range
        if lo < 1 or hi < lo:
            raise RouteError(f"bad segment_count_range {self.segment_count_range}")
        lo, hi = self.length_range
        if lo < 1 or hi < lo:
            raise RouteError(f"bad length_range {self.length_range}")
        if self.grid_size < 4:
            raise RouteError(f"grid_size must be >= 4, got {self.grid_size}")
        if not (0.0 <= self.landmark_prob <= 1.0 and 0.0 <= self.action_prob <= 1.0):
            raise RouteError("event probabilities must lie in [0, 1]")


def simulate(route: Route) -> Trajectory:
    (x, y), heading = route.start, route.start_heading
    n = route.grid_size
    if not (0 <= x < n and 0 <= y < n):
        raise SimulationError(0, (x, y))
    states = [((x, y), heading)]
    for i, seg in enumerate(route.segments):
        heading = heading.rotate(seg.turn)
        dx, dy = heading.delta
        for _ in range(seg.length):
            x, y = x + dx, y + dy
            if not (0 <= x < n and 0 <= y < n):
                raise SimulationError(i, (x, y))
            states.append(((x, y), heading))
    return Trajectory(tuple(states))


def generate_route(config: RouteConfig, rng: np.random.Generator, route_id: str = "r0") -> Route:
    """Rejection-sample an in-bounds route; raises ``RouteError`` when the budget runs out."""
    config.check()
    landmarks = LANDMARKS[config.scene]
    actions = ACTIONS[config.scene]
    turns = (Turn.LEFT, Turn.RIGHT, Turn.STRAIGHT)
    center = (config.grid_size // 2, config.grid_size // 2)
    for _ in range(config.max_attempts):
        n_seg = int(rng.integers(config.segment_count_range[0], config.segment_count_range[1] + 1))
        heading = Heading(int(rng.integers(4)))
        segs = []
        for i in range(n_seg):
            turn = Turn.STRAIGHT if i == 0 else turns[int(rng.integers(3))]
            length = int(rng.integers(config.length_range[0], config.length_range[1] + 1))
            landmark = landmarks[int(rng.integers(len(landmarks)))] if rng.random() < config.landmark_prob else None
            action = actions[int(rng.integers(len(actions)))] if rng.random() < config.action_prob else None
            segs.append(Segment(turn, length, landmark, action))
        route = Route(route_id, config.scene, center, heading, tuple(segs), config.grid_size)
        try:
            simulate(route)
        except SimulationError:
            continue
        return route
    raise RouteError(f"no in-bounds route found after {config.max_attempts} attempts; configuration infeasible")


def reverse_route(route: Route) -> Route:
    """Retrace ``route`` backwards from its endpoint.

    Lengths come back in reverse order, each interior turn is the mirror of
    the forward turn at the same boundary, and every event stays with the
    segment covering the same cells (so a landmark seen at a segment's end
    going forward is met at that segment's start going back).
    """
    end_cell, end_heading = simulate(route).end
    fwd = route.segments
    n = len(fwd)
    segs = []
    for j in range(n):
        src = fwd[n - 1 - j]
        turn = Turn.STRAIGHT if j == 0 else fwd[n - j].turn.mirror()
        segs.append(Segment(turn, src.length, src.landmark, src.action))
    return replace(route, start=end_cell, start_heading=end_heading.opposite(), segments=tuple(segs))


def turn_sequence(route: Route) -> list[Turn]:
    return [seg.turn for seg in route.segments[1:]]


def landmark_sequence(route: Route) -> list[str]:
    return [seg.landmark for seg in route.segments if seg.landmark is not None]


def action_sequence(route: Route) -> list[str]:
    return [seg.action for seg in route.segments if seg.action is not None]


def dump_routes(routes, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in routes:
            fh.write(json.dumps(r.to_json(), ensure_ascii=False) + "\n")


def load_routes(path) -> list[Route]:
    with open(path, encoding="utf-8") as fh:
        return [Route.from_json(json.loads(line)) for line in fh if line.strip()]


__all__ = [
    "ACTIONS",
    "Heading",
    "LANDMARKS",
    "Route",
    "RouteConfig",
    "RouteError",
    "SceneKind",
    "Segment",
    "SimulationError",
    "Trajectory",
    "Turn",
    "action_sequence",
    "all_actions",
    "all_landmarks",
    "dump_routes",
    "generate_route",
    "landmark_sequence",
    "load_routes",
    "reverse_route",
    "simulate",
    "turn_sequence",
]
