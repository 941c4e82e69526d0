"""Value-based agents (DQN, Double DQN, Dueling) with optional object channels.

A state is the last four RGB frames (oldest first, scaled to [0, 1]) stacked
into 12 planes, followed, for object-sensitive agents, by one binary plane per
object type computed from the newest frame only. Replay memory keeps states in
their compact uint8 form; :func:`decode_states` turns them into network input.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .envsim import MAX_ABS_REWARD, EnvConfig, env_reset, env_step
from .exceptions import ConfigError, DimensionError, TrainingError
from .tensornet import RMSPROP_DECAY, RMSPROP_EPS, RMSPROP_LR, QNet, build_qnet
from .vision import build_object_channels, detect_objects, templates_for_env

log = logging.getLogger(__name__)

HISTORY = 4
RGB_PLANES = 3 * HISTORY
ALGOS = ("dqn", "ddqn", "dueling")
LOG_FIELDS = ("frame", "episode", "loss", "eps", "eval_mean", "eval_std")


@dataclass(frozen=True)
class AgentConfig:
    algo: str = "dqn"
    object_sensitive: bool = False
    gamma: float = 0.99
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_frames: int = 0  # 0: 30% of the training budget
    batch_size: int = 32
    target_sync: int = 1000
    replay_capacity: int = 50_000
    learning_start: int = 1000
    train_freq: int = 1
    seed: int = 0
    profile: str = "tiny"
    lr: float = RMSPROP_LR
    rms_decay: float = RMSPROP_DECAY
    rms_eps: float = RMSPROP_EPS
    eval_every: int = 10_000
    eval_plays: int = 50
    eval_eps: float = 0.01

    def __post_init__(self):
        if self.algo not in ALGOS:
            raise ConfigError(f"algo must be one of {ALGOS}, got {self.algo!r}")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not 0.0 <= self.eps_end <= self.eps_start <= 1.0:
            raise ConfigError("need 0 <= eps_end <= eps_start <= 1")
        for name in ("batch_size", "target_sync", "replay_capacity", "train_freq", "eval_every", "eval_plays"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.learning_start < 0 or self.eps_decay_frames < 0:
            raise ConfigError("learning_start and eps_decay_frames must be >= 0")
        if not 0.0 <= self.eval_eps <= 1.0:
            raise ConfigError("eval_eps must lie in [0, 1]")

    @property
    def name(self) -> str:
        return ("o-" if self.object_sensitive else "") + self.algo


def derive_seed(*parts: int) -> int:
    """A 64-bit seed derived deterministically from integer parts."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0])


def discounted_return(rewards, gamma: float) -> float:
    """``sum_i gamma**i * r_i``."""
    total = 0.0
    for r in reversed(list(rewards)):
        total = r + gamma * total
    return total


def normalize_reward(raw: float, env_id: str) -> float:
    """Scale by the game's largest absolute reward, clamped to [-1, 1]."""
    try:
        scale = MAX_ABS_REWARD[env_id]
    except KeyError:
        raise ConfigError(f"unknown env_id {env_id!r}") from None
    return float(min(1.0, max(-1.0, raw / scale)))


# --- states --------------------------------------------------------------------


def n_planes(object_sensitive: bool, k: int) -> int:
    return RGB_PLANES + (k if object_sensitive else 0)


def encode_state(frames, detections=(), object_sensitive: bool = False, k: int = 0) -> np.ndarray:
    """Compact uint8 state: raw RGB planes then 0/1 object planes."""
    frames = list(frames)
    if len(frames) != HISTORY:
        raise DimensionError(f"need exactly {HISTORY} frames, got {len(frames)}")
    shape = np.shape(frames[0])
    if len(shape) != 3 or shape[2] != 3 or any(np.shape(f) != shape for f in frames):
        raise DimensionError("history frames must all be HxWx3 with equal dimensions")
    H, W, _ = shape
    out = np.empty((n_planes(object_sensitive, k), H, W), dtype=np.uint8)
    for i, f in enumerate(frames):
        out[3 * i : 3 * i + 3] = np.asarray(f).transpose(2, 0, 1)
    if object_sensitive and k:
        out[RGB_PLANES:] = build_object_channels((H, W), detections, k)
    return out


def decode_states(raw: np.ndarray) -> np.ndarray:
    """uint8 states (C, H, W) or (N, C, H, W) to float64 network input."""
    raw = np.asarray(raw)
    out = raw.astype(np.float64)
    out[..., :RGB_PLANES, :, :] /= 255.0
    return out


def assemble_state(frame_history, detections_of_last_frame=(), object_sensitive: bool = False, k: int = 0) -> np.ndarray:
    """Network input ``(12 [+ k], H, W)`` from the last four frames."""
    return decode_states(encode_state(frame_history, detections_of_last_frame, object_sensitive, k))


class StateBuilder:
    """Tracks the frame history of one episode and produces encoded states."""

    def __init__(self, env_config: EnvConfig, object_sensitive: bool):
        self.object_sensitive = object_sensitive
        self.k = len(env_config.object_types)
        self.templates = templates_for_env(env_config.env_id, env_config.cell_px) if object_sensitive else None
        self.frames: list = []

    def reset(self, frame) -> np.ndarray:
        self.frames = [frame] * HISTORY
        return self._encode()

    def push(self, frame) -> np.ndarray:
        self.frames = self.frames[1:] + [frame]
        return self._encode()

    def _encode(self) -> np.ndarray:
        dets = detect_objects(self.frames[-1], self.templates) if self.object_sensitive else ()
        return encode_state(self.frames, dets, self.object_sensitive, self.k)

    @property
    def n_planes(self) -> int:
        return n_planes(self.object_sensitive, self.k)


# --- replay --------------------------------------------------------------------


@dataclass
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    terminal: bool


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)

    @classmethod
    def from_transitions(cls, transitions) -> "Batch":
        ts = list(transitions)
        return cls(
            np.stack([np.asarray(t.state, dtype=np.float64) for t in ts]),
            np.array([t.action for t in ts], dtype=np.int64),
            np.array([t.reward for t in ts], dtype=np.float64),
            np.stack([np.asarray(t.next_state, dtype=np.float64) for t in ts]),
            np.array([t.terminal for t in ts], dtype=bool),
        )


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions with uniform sampling.

    States are stored as given (normally uint8 from :func:`encode_state`) and
    decoded on sampling when ``decode`` is true.
    """

    def __init__(self, capacity: int, decode: bool = True):
        if capacity < 1:
            raise ConfigError("replay capacity must be >= 1")
        self.capacity = capacity
        self.decode = decode
        self.size = 0
        self._next = 0
        self._states = None

    def __len__(self) -> int:
        return self.size

    def _allocate(self, state):
        state = np.asarray(state)
        self._states = np.zeros((self.capacity,) + state.shape, dtype=state.dtype)
        self._next_states = np.zeros_like(self._states)
        self._actions = np.zeros(self.capacity, dtype=np.int64)
        self._rewards = np.zeros(self.capacity, dtype=np.float64)
        self._terminals = np.zeros(self.capacity, dtype=bool)

    def push(self, state, action: int, reward: float, next_state, terminal: bool) -> None:
        if abs(reward) > 1.0:
            raise ValueError(f"replay rewards must be normalised to [-1, 1], got {reward}")
        if self._states is None:
            self._allocate(state)
        i = self._next
        self._states[i] = state
        self._actions[i] = action
        self._rewards[i] = reward
        self._next_states[i] = next_state
        self._terminals[i] = terminal
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        return rng.integers(0, self.size, size=batch_size)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        return self.gather(self.sample_indices(batch_size, rng))

    def gather(self, idx) -> Batch:
        conv = decode_states if self.decode else (lambda a: np.asarray(a, dtype=np.float64))
        return Batch(
            conv(self._states[idx]),
            self._actions[idx].copy(),
            self._rewards[idx].copy(),
            conv(self._next_states[idx]),
            self._terminals[idx].copy(),
        )

    def transitions(self) -> list[Transition]:
        """Stored transitions, oldest first."""
        start = self._next if self.size == self.capacity else 0
        order = [(start + i) % self.capacity for i in range(self.size)]
        return [
            Transition(self._states[i].copy(), int(self._actions[i]), float(self._rewards[i]),
                       self._next_states[i].copy(), bool(self._terminals[i]))
            for i in order
        ]


# --- control and targets ------------------------------------------------------------


def select_action(net: QNet, state, eps: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy; greedy ties go to the lowest action index."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"eps must lie in [0, 1], got {eps}")
    if rng.random() < eps:
        return int(rng.integers(net.n_actions))
    return int(np.argmax(net.predict(state)[0]))


def greedy_actions(net: QNet, states) -> np.ndarray:
    return np.argmax(net.predict(states), axis=1)


def _as_batch(batch) -> Batch:
    return batch if isinstance(batch, Batch) else Batch.from_transitions(batch)


def dqn_target(batch, online: QNet, target: QNet, gamma: float) -> np.ndarray:
    """``r + gamma * max_a Q_target(s', a)``, or just ``r`` for terminal transitions.

    ``online`` is unused; it is accepted so both target rules share a signature.
    """
    b = _as_batch(batch)
    if len(b) == 0:
        raise ValueError("empty batch")
    best = target.predict(b.next_states).max(axis=1)
    return np.where(b.terminals, b.rewards, b.rewards + gamma * best)


def ddqn_target(batch, online: QNet, target: QNet, gamma: float) -> np.ndarray:
    """Action chosen by the online net, evaluated by the target net."""
    b = _as_batch(batch)
    if len(b) == 0:
        raise ValueError("empty batch")
    chosen = np.argmax(online.predict(b.next_states), axis=1)
    value = target.predict(b.next_states)[np.arange(len(b)), chosen]
    return np.where(b.terminals, b.rewards, b.rewards + gamma * value)


TARGET_RULES = {"dqn": dqn_target, "ddqn": ddqn_target, "dueling": ddqn_target}


class Agent:
    """Online and target networks plus replay memory and RNG streams."""

    def __init__(self, config: AgentConfig, env_config: EnvConfig, net: QNet | None = None):
        self.config = config
        self.env_config = env_config
        self.k = len(env_config.object_types)
        H, W, _ = env_config.frame_shape
        self.input_shape = (n_planes(config.object_sensitive, self.k), H, W)
        if net is None:
            net = build_qnet(self.input_shape, env_config.n_actions, config.profile,
                             dueling=config.algo == "dueling", seed=derive_seed(config.seed, 4))
        elif net.input_shape != self.input_shape or net.n_actions != env_config.n_actions:
            raise DimensionError(
                f"network expects {net.input_shape} -> {net.n_actions}, environment gives "
                f"{self.input_shape} -> {env_config.n_actions}"
            )
        self.online = net
        self.target = net.copy()
        self.replay = ReplayBuffer(config.replay_capacity)
        self.act_rng = np.random.default_rng(derive_seed(config.seed, 1))
        self.replay_rng = np.random.default_rng(derive_seed(config.seed, 2))

    @property
    def target_rule(self):
        return TARGET_RULES[self.config.algo]


def sync_target(agent: Agent) -> None:
    agent.target = agent.online.copy()


def td_loss_and_grad(online: QNet, batch: Batch, targets: np.ndarray):
    """MSE between ``Q(s, a)`` and fixed targets; gradient only through the taken action."""
    q, cache = online.forward(batch.states)
    n = len(batch)
    rows = np.arange(n)
    diff = q[rows, batch.actions] - targets
    loss = float(np.mean(diff * diff))
    if not math.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss}")
    dq = np.zeros_like(q)
    dq[rows, batch.actions] = 2.0 * diff / n
    return loss, dq, cache


def train_step(agent: Agent, batch) -> float:
    """One optimiser step on ``batch``; returns the loss before the update."""
    b = _as_batch(batch)
    cfg = agent.config
    targets = agent.target_rule(b, agent.online, agent.target, cfg.gamma)
    loss, dq, cache = td_loss_and_grad(agent.online, b, targets)
    grads = agent.online.backward(cache, dq, need_input_grad=False)
    agent.online.rmsprop_step(grads, cfg.lr, cfg.rms_decay, cfg.rms_eps)
    return loss


def epsilon_at(config: AgentConfig, frame: int, total_frames: int) -> float:
    decay = config.eps_decay_frames or max(1, round(0.3 * total_frames))
    frac = max(0.0, 1.0 - frame / decay)
    return config.eps_end + (config.eps_start - config.eps_end) * frac


# --- evaluation ------------------------------------------------------------------


def eval_env_seeds(seed: int, plays: int) -> list[int]:
    return [derive_seed(seed, 5, i) for i in range(plays)]


def evaluate(net: QNet | None, env_config: EnvConfig, object_sensitive: bool, plays: int = 50,
             eps: float = 0.01, seed: int = 0, rng_seed: int | None = None) -> np.ndarray:
    """Raw episode scores of ``plays`` epsilon-greedy episodes, stepped in lock-step.

    ``net=None`` plays uniformly at random. Episode layouts depend only on
    ``seed``; exploration draws come from ``rng_seed`` (defaults to ``seed``).
    """
    rng = np.random.default_rng(derive_seed(seed if rng_seed is None else rng_seed, 6))
    n_actions = env_config.n_actions
    envs, builders, states = [], [], []
    for s in eval_env_seeds(seed, plays):
        st, frame = env_reset(dataclasses.replace(env_config, seed=s))
        b = StateBuilder(env_config, object_sensitive)
        envs.append(st)
        builders.append(b)
        states.append(b.reset(frame) if net is not None else None)
    scores = np.zeros(plays)
    active = list(range(plays))
    while active:
        explore = rng.random(len(active)) < (1.0 if net is None else eps)
        random_actions = rng.integers(n_actions, size=len(active))
        greedy_idx = [i for i, e in zip(active, explore) if not e]
        greedy = {}
        if greedy_idx:
            q = net.predict(decode_states(np.stack([states[i] for i in greedy_idx])))
            greedy = dict(zip(greedy_idx, np.argmax(q, axis=1).tolist()))
        still = []
        for j, i in enumerate(active):
            a = int(random_actions[j]) if explore[j] else greedy[i]
            envs[i], frame, _, done = env_step(envs[i], a)
            if done:
                scores[i] = envs[i].score
            else:
                if net is not None:
                    states[i] = builders[i].push(frame)
                still.append(i)
        active = still
    return scores


def random_policy_scores(env_config: EnvConfig, plays: int = 50, seed: int = 0) -> np.ndarray:
    return evaluate(None, env_config, False, plays=plays, eps=1.0, seed=seed)


# --- training loop -------------------------------------------------------------------


@dataclass
class TrainResult:
    net: QNet
    log: list
    agent: Agent


def _format_row(row: dict) -> list:
    out = []
    for key in LOG_FIELDS:
        v = row[key]
        if isinstance(v, float):
            out.append("" if math.isnan(v) else repr(v))
        else:
            out.append(str(v))
    return out


def write_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for row in rows:
            w.writerow(_format_row(row))


def read_log(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append({
                "frame": int(r["frame"]),
                "episode": int(r["episode"]),
                "loss": float(r["loss"]) if r["loss"] else math.nan,
                "eps": float(r["eps"]),
                "eval_mean": float(r["eval_mean"]),
                "eval_std": float(r["eval_std"]),
            })
    return rows


def train(agent_config: AgentConfig, env_config: EnvConfig, total_frames: int, log_sink=None,
          checkpoint_path=None) -> TrainResult:
    """Train an agent for ``total_frames`` environment steps.

    Evaluates every ``eval_every`` frames and at the end, appending one row per
    evaluation to the log (and calling ``log_sink(row)`` if given). When
    ``checkpoint_path`` is set the online network is written there after each
    evaluation. Fully determined by the two configs.
    """
    if total_frames < 0:
        raise ConfigError("total_frames must be >= 0")
    cfg = agent_config
    agent = Agent(cfg, env_config)
    rows: list = []
    if checkpoint_path is not None:
        Path(checkpoint_path).parent.mkdir(parents=True, exist_ok=True)
    if total_frames == 0:
        if checkpoint_path is not None:
            agent.online.save(checkpoint_path)
        return TrainResult(agent.online, rows, agent)

    builder = StateBuilder(env_config, cfg.object_sensitive)
    episode = 0

    def new_episode():
        env_state, frame = env_reset(dataclasses.replace(env_config, seed=derive_seed(cfg.seed, 3, episode)))
        return env_state, builder.reset(frame)

    env_state, state = new_episode()
    losses: list = []
    for frame_no in range(1, total_frames + 1):
        eps = epsilon_at(cfg, frame_no - 1, total_frames)
        action = select_action(agent.online, decode_states(state), eps, agent.act_rng)
        env_state, frame, raw_reward, done = env_step(env_state, action)
        next_state = builder.push(frame)
        agent.replay.push(state, action, normalize_reward(raw_reward, env_config.env_id), next_state, done)
        state = next_state

        if len(agent.replay) >= max(cfg.learning_start, 1) and frame_no % cfg.train_freq == 0:
            losses.append(train_step(agent, agent.replay.sample(cfg.batch_size, agent.replay_rng)))
        if frame_no % cfg.target_sync == 0:
            sync_target(agent)
        if done:
            episode += 1
            env_state, state = new_episode()

        if frame_no % cfg.eval_every == 0 or frame_no == total_frames:
            scores = evaluate(agent.online, env_config, cfg.object_sensitive, cfg.eval_plays, cfg.eval_eps,
                              seed=cfg.seed, rng_seed=derive_seed(cfg.seed, agent.online.global_step))
            row = {
                "frame": frame_no,
                "episode": episode,
                "loss": float(np.mean(losses)) if losses else math.nan,
                "eps": float(eps),
                "eval_mean": float(scores.mean()),
                "eval_std": float(scores.std()),
            }
            losses = []
            rows.append(row)
            log.info("%s frame %d eval %.1f +- %.1f", cfg.name, frame_no, row["eval_mean"], row["eval_std"])
            if log_sink is not None:
                log_sink(row)
            if checkpoint_path is not None:
                agent.online.save(checkpoint_path)
    return TrainResult(agent.online, rows, agent)


def evaluate_checkpoint(net: QNet, agent_config: AgentConfig, env_config: EnvConfig) -> np.ndarray:
    """Re-run the evaluation ``train`` performs for a network at its current step."""
    return evaluate(net, env_config, agent_config.object_sensitive, agent_config.eval_plays, agent_config.eval_eps,
                    seed=agent_config.seed, rng_seed=derive_seed(agent_config.seed, net.global_step))
