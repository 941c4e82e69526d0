"""Seedable mini-arcade environments rendered to RGB pixel frames.

Two games are provided:

``minipac``
    A pillar maze. The agent eats beans (+10) and power pellets (+50) while
    ghosts chase it. A pellet frightens every ghost for a few steps; eating a
    frightened ghost gives +200 and sends it home. Being caught costs -500 and
    ends the episode. Nine actions, in the order
    left, right, down, up, leftup, leftdown, rightup, rightdown, nowhere,
    where ``nowhere`` repeats the previous movement.

``minicross``
    A road-crossing game. The agent walks up through lanes of wrapping cars;
    reaching the top row gives +100 and restarts at the bottom, being hit gives
    -10 and pushes the agent one row back. Three actions: up, down, nowhere.

The API is functional: :func:`env_reset` and :func:`env_step` return fresh
:class:`EnvState` values and never mutate their input, so any state can be
kept as a snapshot. :class:`MiniArcade` is a small stateful wrapper around
them for rollout loops.

Coordinates are ``(x, y)`` cells with ``y`` growing downwards. Every sprite is
``cell_px - 2`` pixels square, drawn one pixel inside its cell.
"""

from __future__ import annotations

import dataclasses
import functools
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .exceptions import ConfigError, UsageError

ENV_IDS = ("minipac", "minicross")

OBJECT_TYPES = {
    "minipac": ("pacman", "ghost", "bean", "pellet"),
    "minicross": ("chicken", "car"),
}

ACTIONS = {
    "minipac": ("left", "right", "down", "up", "leftup", "leftdown", "rightup", "rightdown", "nowhere"),
    "minicross": ("up", "down", "nowhere"),
}

REWARDS = {
    "bean": 10,
    "pellet": 50,
    "eat_ghost": 200,
    "caught": -500,
    "crossing": 100,
    "collision": -10,
}

MAX_ABS_REWARD = {"minipac": 500, "minicross": 100}

BACKGROUND_COLOR = {"minipac": (0, 0, 0), "minicross": (0, 0, 0)}
WALL_COLOR = (40, 40, 200)

# Drawn back to front; later types occlude earlier ones on a shared cell.
DRAW_ORDER = {"minipac": (2, 3, 1, 0), "minicross": (1, 0)}

GHOST_CHASE_PROB = 0.8
FRIGHTENED_STEPS = 10
CAR_SKIP_PROB = 0.1

_DELTAS = {
    "left": (-1, 0),
    "right": (1, 0),
    "down": (0, 1),
    "up": (0, -1),
    "leftup": (-1, -1),
    "leftdown": (-1, 1),
    "rightup": (1, -1),
    "rightdown": (1, 1),
}
_GHOST_MOVES = ((-1, 0), (1, 0), (0, 1), (0, -1))


def _mask(kind: str, s: int) -> np.ndarray:
    i, j = np.indices((s, s))
    if kind == "triangle":
        return j >= i
    if kind == "top":
        return i < s // 2
    if kind == "checker":
        return (i + j) % 2 == 0
    if kind == "left":
        return j < s // 2
    if kind == "antidiag":
        return i + j >= s - 1
    raise KeyError(kind)


# (mask pattern, primary colour, secondary colour) per object type.
_SPRITES = {
    ("minipac", 0): ("triangle", (255, 230, 0), (120, 70, 0)),
    ("minipac", 1): ("top", (230, 30, 30), (235, 235, 235)),
    ("minipac", 2): ("checker", (255, 170, 200), (230, 120, 30)),
    ("minipac", 3): ("left", (0, 220, 220), (190, 0, 190)),
    ("minicross", 0): ("antidiag", (250, 250, 90), (160, 80, 20)),
    ("minicross", 1): ("top", (220, 0, 0), (150, 150, 150)),
}


@functools.lru_cache(maxsize=None)
def sprite(env_id: str, object_type: int, cell_px: int) -> np.ndarray:
    """Bitmap of one object type as a read-only ``(s, s, 3)`` uint8 array, ``s = cell_px - 2``."""
    kind, primary, secondary = _SPRITES[(env_id, object_type)]
    s = cell_px - 2
    out = np.empty((s, s, 3), dtype=np.uint8)
    out[:] = secondary
    out[_mask(kind, s)] = primary
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class EnvConfig:
    env_id: str = "minipac"
    grid_w: int = 9
    grid_h: int = 9
    cell_px: int = 8
    max_steps: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.env_id not in ENV_IDS:
            raise ConfigError(f"env_id must be one of {ENV_IDS}, got {self.env_id!r}")
        if self.grid_w < 5 or self.grid_h < 5:
            raise ConfigError(f"grid must be at least 5x5, got {self.grid_w}x{self.grid_h}")
        if self.cell_px < 4:
            raise ConfigError(f"cell_px must be >= 4, got {self.cell_px}")
        if self.max_steps < 1:
            raise ConfigError(f"max_steps must be >= 1, got {self.max_steps}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")

    @property
    def frame_shape(self) -> tuple[int, int, int]:
        return (self.grid_h * self.cell_px, self.grid_w * self.cell_px, 3)

    @property
    def n_actions(self) -> int:
        return len(ACTIONS[self.env_id])

    @property
    def object_types(self) -> tuple[str, ...]:
        return OBJECT_TYPES[self.env_id]

    @property
    def background_color(self) -> tuple[int, int, int]:
        return BACKGROUND_COLOR[self.env_id]


class Entity(NamedTuple):
    x: int
    y: int
    alive: bool = True


class Lane(NamedTuple):
    row: int
    direction: int
    period: int
    phase: int


class GroundTruthBox(NamedTuple):
    object_type: int
    x: int
    y: int
    w: int
    h: int


@dataclass(frozen=True)
class EnvState:
    """Complete, immutable snapshot of one environment.

    ``entities`` maps every non-agent object type id to its entity tuple; the
    agent itself is object type 0 and lives in ``agent``.
    """

    config: EnvConfig
    agent: tuple[int, int]
    entities: dict
    walls: frozenset = frozenset()
    step_count: int = 0
    score: int = 0
    done: bool = False
    rng_state: dict = field(default=None, repr=False, compare=False)
    last_dir: tuple[int, int] = (0, 0)
    ghost_home: tuple = ()
    frightened: tuple = ()
    lanes: tuple = ()

    def n_entities(self) -> int:
        return 1 + sum(e.alive for ents in self.entities.values() for e in ents)


def action_set(env_id: str) -> list[str]:
    if env_id not in ACTIONS:
        raise ConfigError(f"unknown env_id {env_id!r}")
    return list(ACTIONS[env_id])


def _rng(state_dict) -> np.random.Generator:
    gen = np.random.Generator(np.random.PCG64())
    gen.bit_generator.state = state_dict
    return gen


def _maze_walls(w: int, h: int) -> frozenset:
    walls = set()
    for y in range(h):
        for x in range(w):
            border = x in (0, w - 1) or y in (0, h - 1)
            if border or (x % 2 == 0 and y % 2 == 0):
                walls.add((x, y))
    return frozenset(walls)


def _reset_minipac(config: EnvConfig, rng: np.random.Generator) -> EnvState:
    walls = _maze_walls(config.grid_w, config.grid_h)
    open_cells = [
        (x, y) for y in range(config.grid_h) for x in range(config.grid_w) if (x, y) not in walls
    ]
    small = min(config.grid_w, config.grid_h)
    n_ghosts = 2 if small >= 9 else 1
    n_pellets = 2 if small >= 7 else 1

    agent = open_cells[int(rng.integers(len(open_cells)))]
    rest = [c for c in open_cells if c != agent]
    far = [c for c in rest if abs(c[0] - agent[0]) + abs(c[1] - agent[1]) >= 4]
    pool = far if len(far) >= n_ghosts else rest
    picks = rng.choice(len(pool), size=n_ghosts, replace=False)
    ghosts = [pool[int(i)] for i in picks]
    rest = [c for c in rest if c not in ghosts]
    picks = rng.choice(len(rest), size=n_pellets, replace=False)
    pellets = sorted((rest[int(i)] for i in picks), key=lambda c: (c[1], c[0]))
    beans = [c for c in rest if c not in pellets]

    return EnvState(
        config=config,
        agent=agent,
        entities={
            1: tuple(Entity(x, y) for x, y in ghosts),
            2: tuple(Entity(x, y) for x, y in beans),
            3: tuple(Entity(x, y) for x, y in pellets),
        },
        walls=walls,
        rng_state=rng.bit_generator.state,
        ghost_home=tuple(ghosts),
        frightened=(0,) * n_ghosts,
    )


def _reset_minicross(config: EnvConfig, rng: np.random.Generator) -> EnvState:
    w, h = config.grid_w, config.grid_h
    lanes = []
    cars = []
    for row in range(1, h - 1):
        direction = 1 if rng.random() < 0.5 else -1
        period = int(rng.integers(1, 4))
        phase = int(rng.integers(period))
        n_cars = 2 if rng.random() < 0.5 else 1
        cols = sorted(int(c) for c in rng.choice(w, size=n_cars, replace=False))
        lanes.append(Lane(row, direction, period, phase))
        cars.extend(Entity(c, row) for c in cols)
    return EnvState(
        config=config,
        agent=(w // 2, h - 1),
        entities={1: tuple(cars)},
        rng_state=rng.bit_generator.state,
        lanes=tuple(lanes),
    )


def env_reset(config: EnvConfig) -> tuple[EnvState, np.ndarray]:
    """Initial state for ``config`` (a pure function of the config and seed) and its frame."""
    if not isinstance(config, EnvConfig):
        raise ConfigError("env_reset expects an EnvConfig")
    rng = np.random.Generator(np.random.PCG64(config.seed))
    if config.env_id == "minipac":
        state = _reset_minipac(config, rng)
    else:
        state = _reset_minicross(config, rng)
    return state, render(state)


def _open(state: EnvState, x: int, y: int) -> bool:
    cfg = state.config
    return 0 <= x < cfg.grid_w and 0 <= y < cfg.grid_h and (x, y) not in state.walls


def _step_minipac(state: EnvState, action: int):
    rng = _rng(state.rng_state)
    name = ACTIONS["minipac"][action]
    direction = state.last_dir if name == "nowhere" else _DELTAS[name]
    ax, ay = state.agent
    if direction != (0, 0) and _open(state, ax + direction[0], ay + direction[1]):
        ax, ay = ax + direction[0], ay + direction[1]

    ghosts = list(state.entities[1])
    beans = list(state.entities[2])
    pellets = list(state.entities[3])
    frightened = list(state.frightened)
    reward = 0
    caught = False

    for i, b in enumerate(beans):
        if b.alive and (b.x, b.y) == (ax, ay):
            beans[i] = b._replace(alive=False)
            reward += REWARDS["bean"]
    for i, p in enumerate(pellets):
        if p.alive and (p.x, p.y) == (ax, ay):
            pellets[i] = p._replace(alive=False)
            reward += REWARDS["pellet"]
            frightened = [FRIGHTENED_STEPS] * len(ghosts)

    def collide():
        nonlocal reward, caught
        for i, g in enumerate(ghosts):
            if (g.x, g.y) != (ax, ay):
                continue
            if frightened[i] > 0:
                reward += REWARDS["eat_ghost"]
                hx, hy = state.ghost_home[i]
                ghosts[i] = Entity(hx, hy)
                frightened[i] = 0
            elif not caught:
                reward += REWARDS["caught"]
                caught = True

    collide()
    if not caught:
        for i, g in enumerate(ghosts):
            legal = [(g.x + dx, g.y + dy) for dx, dy in _GHOST_MOVES if _open(state, g.x + dx, g.y + dy)]
            if not legal:
                continue
            if rng.random() < GHOST_CHASE_PROB:
                dist = [abs(cx - ax) + abs(cy - ay) for cx, cy in legal]
                pick = dist.index(max(dist)) if frightened[i] > 0 else dist.index(min(dist))
            else:
                pick = int(rng.integers(len(legal)))
            ghosts[i] = Entity(*legal[pick])
        collide()

    frightened = [max(f - 1, 0) for f in frightened]
    step_count = state.step_count + 1
    cleared = not any(e.alive for e in beans) and not any(e.alive for e in pellets)
    done = caught or cleared or step_count >= state.config.max_steps
    new_dir = state.last_dir if name == "nowhere" else direction
    return dataclasses.replace(
        state,
        agent=(ax, ay),
        entities={1: tuple(ghosts), 2: tuple(beans), 3: tuple(pellets)},
        step_count=step_count,
        score=state.score + reward,
        done=done,
        rng_state=rng.bit_generator.state,
        last_dir=new_dir,
        frightened=tuple(frightened),
    ), reward


def _step_minicross(state: EnvState, action: int):
    rng = _rng(state.rng_state)
    cfg = state.config
    name = ACTIONS["minicross"][action]
    ax, ay = state.agent
    if name == "up":
        ay -= 1
    elif name == "down":
        ay = min(ay + 1, cfg.grid_h - 1)
    reward = 0
    if ay == 0:
        reward += REWARDS["crossing"]
        ay = cfg.grid_h - 1

    cars = list(state.entities[1])
    hit = any((c.x, c.y) == (ax, ay) for c in cars)
    for lane in state.lanes:
        if (state.step_count + lane.phase) % lane.period != 0:
            continue
        if rng.random() < CAR_SKIP_PROB:
            continue
        for i, c in enumerate(cars):
            if c.y == lane.row:
                cars[i] = c._replace(x=(c.x + lane.direction) % cfg.grid_w)
    hit = hit or any((c.x, c.y) == (ax, ay) for c in cars)
    if hit:
        reward += REWARDS["collision"]
        ay = min(ay + 1, cfg.grid_h - 1)

    step_count = state.step_count + 1
    return dataclasses.replace(
        state,
        agent=(ax, ay),
        entities={1: tuple(cars)},
        step_count=step_count,
        score=state.score + reward,
        done=step_count >= cfg.max_steps,
        rng_state=rng.bit_generator.state,
    ), reward


def env_step(state: EnvState, action: int):
    """Advance one tick. Returns ``(state, frame, reward, done)``."""
    if state.done:
        raise UsageError("cannot step an environment whose episode is done; reset it")
    n = len(ACTIONS[state.config.env_id])
    if not (isinstance(action, (int, np.integer)) and 0 <= action < n):
        raise UsageError(f"action must be an integer in [0, {n}), got {action!r}")
    if state.config.env_id == "minipac":
        new_state, reward = _step_minipac(state, int(action))
    else:
        new_state, reward = _step_minicross(state, int(action))
    return new_state, render(new_state), reward, new_state.done


def _live_entities(state: EnvState):
    """Yield ``(type_id, x, y)`` in draw order (back to front)."""
    for t in DRAW_ORDER[state.config.env_id]:
        if t == 0:
            if state.agent[0] >= 0:
                yield 0, state.agent[0], state.agent[1]
        else:
            for e in state.entities.get(t, ()):
                if e.alive:
                    yield t, e.x, e.y


def render(state: EnvState) -> np.ndarray:
    cfg = state.config
    c = cfg.cell_px
    frame = np.empty(cfg.frame_shape, dtype=np.uint8)
    frame[:] = cfg.background_color
    for x, y in state.walls:
        frame[y * c : (y + 1) * c, x * c : (x + 1) * c] = WALL_COLOR
    s = c - 2
    sprites = {t: sprite(cfg.env_id, t, c) for t in range(len(cfg.object_types))}
    for t, x, y in _live_entities(state):
        frame[y * c + 1 : y * c + 1 + s, x * c + 1 : x * c + 1 + s] = sprites[t]
    return frame


def ground_truth(state: EnvState) -> list[GroundTruthBox]:
    """Pixel boxes of every live entity, ordered by type, then y, then x."""
    c = state.config.cell_px
    s = c - 2
    boxes = [GroundTruthBox(t, x * c + 1, y * c + 1, s, s) for t, x, y in _live_entities(state)]
    return sorted(boxes, key=lambda b: (b.object_type, b.y, b.x))


def visible_ground_truth(state: EnvState) -> list[GroundTruthBox]:
    """Like :func:`ground_truth` but without entities hidden under a later-drawn sprite."""
    c = state.config.cell_px
    s = c - 2
    top = {}
    for t, x, y in _live_entities(state):
        top.setdefault((x, y), []).append(t)
    boxes = []
    for (x, y), types in top.items():
        boxes.append(GroundTruthBox(types[-1], x * c + 1, y * c + 1, s, s))
    return sorted(boxes, key=lambda b: (b.object_type, b.y, b.x))


def format_layout(state: EnvState) -> str:
    """Flat text layout: one live entity per line as ``type x y`` (cell coordinates)."""
    names = state.config.object_types
    lines = [f"{names[0]} {state.agent[0]} {state.agent[1]}"]
    for t in sorted(state.entities):
        lines.extend(f"{names[t]} {e.x} {e.y}" for e in state.entities[t] if e.alive)
    return "\n".join(lines) + "\n"


def parse_layout(text: str) -> list[tuple[str, int, int]]:
    out = []
    for line in text.splitlines():
        if not line.strip():
            continue
        name, x, y = line.split()
        out.append((name, int(x), int(y)))
    return out


def empty_state(config: EnvConfig, agent: tuple[int, int] | None = None) -> EnvState:
    """A state with no walls and no entities besides an optional agent.

    With ``agent=None`` nothing at all is drawn; used for tests and crafted
    scenarios.
    """
    types = OBJECT_TYPES[config.env_id]
    state = EnvState(
        config=config,
        agent=agent if agent is not None else (-1, -1),
        entities={t: () for t in range(1, len(types))},
        rng_state=np.random.Generator(np.random.PCG64(config.seed)).bit_generator.state,
    )
    return state


class MiniArcade:
    """Stateful convenience wrapper: ``reset()`` then repeated ``step(action)``."""

    def __init__(self, config: EnvConfig):
        self.config = config
        self.state = None
        self.actions = action_set(config.env_id)

    def reset(self, seed: int | None = None) -> np.ndarray:
        config = self.config if seed is None else dataclasses.replace(self.config, seed=seed)
        self.state, frame = env_reset(config)
        return frame

    def step(self, action: int):
        self.state, frame, reward, done = env_step(self.state, action)
        return frame, reward, done

    @property
    def ground_truth(self) -> list[GroundTruthBox]:
        return ground_truth(self.state)
