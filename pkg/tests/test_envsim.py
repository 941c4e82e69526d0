import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from odrl.envsim import (
    ACTIONS,
    BACKGROUND_COLOR,
    EnvConfig,
    Entity,
    MiniArcade,
    action_set,
    empty_state,
    env_reset,
    env_step,
    format_layout,
    ground_truth,
    parse_layout,
    render,
    sprite,
    visible_ground_truth,
)
from odrl.exceptions import ConfigError, UsageError
from oracles import simulate_minipac

# Frozen from the first verified run of minipac 9x9, seed 7.
GOLDEN_MINIPAC_SEED7 = """\
pacman 5 7
ghost 6 3
ghost 1 4
bean 1 1
bean 2 1
bean 3 1
bean 4 1
bean 5 1
bean 6 1
bean 7 1
bean 1 2
bean 3 2
bean 5 2
bean 7 2
bean 1 3
bean 2 3
bean 3 3
bean 4 3
bean 5 3
bean 7 3
bean 3 4
bean 5 4
bean 7 4
bean 2 5
bean 3 5
bean 4 5
bean 5 5
bean 6 5
bean 7 5
bean 1 6
bean 5 6
bean 7 6
bean 1 7
bean 2 7
bean 3 7
bean 4 7
bean 6 7
bean 7 7
pellet 1 5
pellet 3 6
"""


def test_golden_layout_seed7():
    state, _ = env_reset(EnvConfig("minipac", seed=7))
    assert format_layout(state) == GOLDEN_MINIPAC_SEED7


def test_layout_text_round_trip():
    state, _ = env_reset(EnvConfig("minipac", seed=7))
    rows = parse_layout(format_layout(state))
    assert rows[0] == ("pacman", 5, 7)
    assert len(rows) == state.n_entities()


def test_frame_dimensions():
    _, frame = env_reset(EnvConfig("minipac", 9, 9, 8))
    assert frame.shape == (72, 72, 3) and frame.dtype == np.uint8
    _, frame = env_reset(EnvConfig("minicross", 5, 7, 4))
    assert frame.shape == (28, 20, 3)


@pytest.mark.parametrize("kw", [
    {"grid_w": 4}, {"grid_h": 4}, {"cell_px": 3}, {"max_steps": 0}, {"env_id": "pong"}, {"seed": -1},
])
def test_invalid_config(kw):
    with pytest.raises(ConfigError):
        EnvConfig(**kw)


def test_action_sets():
    assert action_set("minipac") == ["left", "right", "down", "up", "leftup", "leftdown",
                                     "rightup", "rightdown", "nowhere"]
    assert action_set("minipac").index("nowhere") == 8
    assert action_set("minicross") == ["up", "down", "nowhere"]
    with pytest.raises(ConfigError):
        action_set("pong")


@pytest.mark.parametrize("env_id", ["minipac", "minicross"])
def test_reset_is_deterministic(env_id):
    cfg = EnvConfig(env_id, seed=3)
    s1, f1 = env_reset(cfg)
    s2, f2 = env_reset(cfg)
    assert f1.tobytes() == f2.tobytes()
    assert s1.score == 0 and not s1.done
    assert np.array_equal(render(s1), f1)


@pytest.mark.parametrize("env_id", ["minipac", "minicross"])
def test_rollouts_are_deterministic(env_id):
    cfg = EnvConfig(env_id, seed=11)
    actions = np.random.default_rng(0).integers(cfg.n_actions, size=60)

    def run():
        state, frame = env_reset(cfg)
        out = [frame.tobytes()]
        for a in actions:
            if state.done:
                break
            state, frame, r, _ = env_step(state, int(a))
            out.append((frame.tobytes(), r))
        return out

    assert run() == run()


def test_empty_state_renders_background():
    for env_id in ("minipac", "minicross"):
        cfg = EnvConfig(env_id)
        frame = render(empty_state(cfg))
        assert np.all(frame == np.array(BACKGROUND_COLOR[env_id], dtype=np.uint8))


def test_sprites_distinct_and_read_only():
    for env_id, n in (("minipac", 4), ("minicross", 2)):
        sprites = [sprite(env_id, t, 8) for t in range(n)]
        assert all(s.shape == (6, 6, 3) for s in sprites)
        for i in range(n):
            for j in range(i + 1, n):
                assert not np.array_equal(sprites[i], sprites[j])
        with pytest.raises(ValueError):
            sprites[0][0, 0, 0] = 1


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32), steps=st.integers(0, 40), env_id=st.sampled_from(["minipac", "minicross"]))
def test_truth_boxes_match_sprites(seed, steps, env_id):
    cfg = EnvConfig(env_id, 7, 7, 6, seed=seed)
    state, frame = env_reset(cfg)
    rng = np.random.default_rng(seed)
    for _ in range(steps):
        if state.done:
            break
        state, frame, _, _ = env_step(state, int(rng.integers(cfg.n_actions)))
    for box in visible_ground_truth(state):
        patch = frame[box.y : box.y + box.h, box.x : box.x + box.w]
        assert np.array_equal(patch, sprite(env_id, box.object_type, cfg.cell_px))
    H, W, _ = frame.shape
    for box in ground_truth(state):
        assert 0 <= box.x and box.x + box.w <= W and 0 <= box.y and box.y + box.h <= H


def test_reset_boxes_are_disjoint_over_100_seeds():
    for seed in range(100):
        for env_id in ("minipac", "minicross"):
            state, _ = env_reset(EnvConfig(env_id, seed=seed))
            cells = [(b.x, b.y) for b in ground_truth(state)]
            assert len(cells) == len(set(cells)) == state.n_entities()


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32), env_id=st.sampled_from(["minipac", "minicross"]))
def test_score_bookkeeping_and_termination(seed, env_id):
    cfg = EnvConfig(env_id, 7, 7, 4, max_steps=60, seed=seed)
    state, _ = env_reset(cfg)
    rng = np.random.default_rng(seed)
    total = 0
    steps = 0
    while not state.done:
        state, _, r, done = env_step(state, int(rng.integers(cfg.n_actions)))
        total += r
        steps += 1
        assert done == state.done
        if env_id == "minipac":
            assert state.agent not in state.walls
            assert all(g not in state.walls for g in ((e.x, e.y) for e in state.entities[1]))
    assert state.score == total
    assert steps <= cfg.max_steps


def test_step_after_done_and_bad_action():
    state, _ = env_reset(EnvConfig("minicross", max_steps=1))
    with pytest.raises(UsageError):
        env_step(state, 3)
    state, _, _, done = env_step(state, 2)
    assert done
    with pytest.raises(UsageError):
        env_step(state, 0)


def _corridor_state():
    cfg = EnvConfig("minipac", 9, 9, 8)
    base, _ = env_reset(cfg)
    return dataclasses.replace(
        base, agent=(1, 1), entities={1: (), 2: (Entity(3, 1),), 3: ()}, ghost_home=(), frightened=(),
    )


def test_move_into_empty_corridor_then_onto_bean():
    state = _corridor_state()
    state, _, r, _ = env_step(state, ACTIONS["minipac"].index("right"))
    assert r == 0 and state.agent == (2, 1)
    n_before = len(ground_truth(state))
    state, _, r, done = env_step(state, ACTIONS["minipac"].index("right"))
    assert r == 10 and state.agent == (3, 1)
    assert len(ground_truth(state)) == n_before - 1
    assert done  # the only collectible is gone


def test_blocked_move_and_nowhere_repeat():
    state = dataclasses.replace(_corridor_state(), entities={1: (), 2: (Entity(7, 7),), 3: ()})
    state, _, _, _ = env_step(state, ACTIONS["minipac"].index("up"))  # wall above row 1
    assert state.agent == (1, 1)
    state, _, _, _ = env_step(state, ACTIONS["minipac"].index("right"))
    state, _, _, _ = env_step(state, ACTIONS["minipac"].index("nowhere"))
    assert state.agent == (3, 1)


def test_scripted_20_steps_match_hand_simulation():
    cfg = EnvConfig("minipac", seed=7)
    state, _ = env_reset(cfg)
    actions = [0, 0, 3, 3, 1, 8, 8, 2, 0, 3, 3, 3, 1, 1, 8, 6, 2, 2, 0, 8]
    expected, final_agent = simulate_minipac(
        state.agent,
        [(e.x, e.y) for e in state.entities[1]],
        [(e.x, e.y) for e in state.entities[2]],
        [(e.x, e.y) for e in state.entities[3]],
        state.walls,
        (cfg.grid_w, cfg.grid_h),
        actions,
        state.rng_state,
    )
    rewards = []
    for a in actions:
        state, _, r, done = env_step(state, a)
        rewards.append(r)
        if done:
            break
    assert rewards == expected
    assert state.score == sum(expected)
    assert state.agent == final_agent
    assert {10, 50} <= set(expected)  # the script eats beans and a pellet


def test_minicross_crossing_and_collision():
    cfg = EnvConfig("minicross", 5, 5, 4)
    base, _ = env_reset(cfg)
    # No cars: walking up from row 4 crosses after four steps.
    state = dataclasses.replace(base, entities={1: ()}, lanes=())
    got = []
    for _ in range(4):
        state, _, r, _ = env_step(state, 0)
        got.append(r)
    assert got == [0, 0, 0, 100] and state.agent == (2, 4)
    # A parked car straight above: stepping into it costs 10 and pushes back.
    state = dataclasses.replace(base, agent=(2, 4), entities={1: (Entity(2, 3),)}, lanes=())
    state, _, r, _ = env_step(state, 0)
    assert r == -10 and state.agent == (2, 4)


def test_miniarcade_wrapper():
    game = MiniArcade(EnvConfig("minicross", seed=2))
    frame = game.reset()
    assert frame.shape == game.config.frame_shape
    frame2, reward, done = game.step(2)
    assert frame2.shape == frame.shape and isinstance(done, bool)
    assert len(game.ground_truth) == game.state.n_entities()
