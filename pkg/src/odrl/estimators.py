"""scikit-learn style wrappers around object channels and agent training."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .agents import AgentConfig, HISTORY, decode_states, encode_state, evaluate_checkpoint, train
from .envsim import OBJECT_TYPES, EnvConfig
from .validation import check_frames, check_states
from .vision import DEFAULT_THRESHOLD, build_object_channels, detect_objects, templates_for_env


class ObjectChannelExtractor(TransformerMixin, BaseEstimator):
    """Frames ``(N, H, W, 3)`` to binary object planes ``(N, k, H, W)``.

    ``fit`` only builds the sprite templates for ``env_id``; no data is used.
    """

    def __init__(self, env_id: str = "minipac", cell_px: int = 8, threshold: float = DEFAULT_THRESHOLD):
        self.env_id = env_id
        self.cell_px = cell_px
        self.threshold = threshold

    def fit(self, X=None, y=None):
        self.templates_ = templates_for_env(self.env_id, self.cell_px, self.threshold)
        self.n_types_ = len(OBJECT_TYPES[self.env_id])
        return self

    def transform(self, X):
        check_is_fitted(self, "templates_")
        frames = check_frames(X)
        out = np.zeros((len(frames), self.n_types_) + frames.shape[1:3], dtype=np.uint8)
        for i, f in enumerate(frames):
            out[i] = build_object_channels(f.shape, detect_objects(f, self.templates_), self.n_types_)
        return out


class DQNAgent(BaseEstimator):
    """Train a value-based agent on a built-in environment.

    ``fit`` ignores its arguments and trains for ``total_frames``; ``predict``
    maps decoded states to greedy actions; ``score`` is the mean evaluation
    score of the trained network.
    """

    def __init__(self, env_id: str = "minicross", grid_w: int = 5, grid_h: int = 7, cell_px: int = 4,
                 max_steps: int = 200, algo: str = "dqn", object_sensitive: bool = False,
                 total_frames: int = 10_000, train_freq: int = 4, profile: str = "tiny",
                 eval_plays: int = 50, eval_every: int = 10_000, seed: int = 0):
        self.env_id = env_id
        self.grid_w = grid_w
        self.grid_h = grid_h
        self.cell_px = cell_px
        self.max_steps = max_steps
        self.algo = algo
        self.object_sensitive = object_sensitive
        self.total_frames = total_frames
        self.train_freq = train_freq
        self.profile = profile
        self.eval_plays = eval_plays
        self.eval_every = eval_every
        self.seed = seed

    def _configs(self):
        env = EnvConfig(self.env_id, self.grid_w, self.grid_h, self.cell_px, self.max_steps)
        agent = AgentConfig(self.algo, self.object_sensitive, train_freq=self.train_freq, profile=self.profile,
                            eval_plays=self.eval_plays, eval_every=self.eval_every, seed=self.seed)
        return env, agent

    def fit(self, X=None, y=None):
        env, agent = self._configs()
        result = train(agent, env, self.total_frames)
        self.net_ = result.net
        self.log_ = result.log
        self.n_actions_ = env.n_actions
        return self

    def predict(self, X):
        check_is_fitted(self, "net_")
        states = check_states(X, self.net_.input_shape)
        return np.argmax(self.net_.predict(states), axis=1)

    def states_from_frames(self, frames) -> np.ndarray:
        """Decoded state from the last four frames of ``frames``."""
        frames = check_frames(frames)[-HISTORY:]
        frames = np.concatenate([np.repeat(frames[:1], HISTORY - len(frames), axis=0), frames])
        env, _ = self._configs()
        k = len(env.object_types)
        dets = detect_objects(frames[-1], templates_for_env(self.env_id, self.cell_px)) if self.object_sensitive else ()
        return decode_states(encode_state(list(frames), dets, self.object_sensitive, k))[None]

    def score(self, X=None, y=None) -> float:
        check_is_fitted(self, "net_")
        env, agent = self._configs()
        return float(evaluate_checkpoint(self.net_, agent, env).mean())
