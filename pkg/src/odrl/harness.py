"""Experiment orchestration: detection sweeps, score comparisons, disagreements.

Output layout of :func:`run_score_comparison`::

    <out>/<agent>/<seed>/config.txt      fingerprint of the cell's configuration
    <out>/<agent>/<seed>/log.csv         training log (one row per evaluation)
    <out>/<agent>/<seed>/checkpoint.bin  final online network
    <out>/<agent>/<seed>/eval.csv        final evaluation, one row per play
    <out>/report.csv                     one row per (agent, seed) cell
    <out>/deltas.csv                     per-seed mean differences between agents

:func:`build_report` rebuilds the report from those files alone, so every
number in it can be recomputed from the persisted logs.
"""

from __future__ import annotations

import csv
import dataclasses
import itertools
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agents import (
    HISTORY,
    decode_states,
    derive_seed,
    encode_state,
    eval_env_seeds,
    evaluate_checkpoint,
    train,
    write_log,
)
from .envsim import EnvConfig, EnvState, Entity, env_reset, env_step, ground_truth, render
from .exceptions import ConfigError, ODRLError
from .netpbm import write_ppm
from .saliency import classify_objects, object_saliency, render_saliency
from .tensornet import QNet
from .vision import DetectionMetrics, detect_objects, evaluate_detections, templates_for_env

log = logging.getLogger(__name__)

REPORT_FIELDS = ("agent", "seed", "eval_mean", "eval_std", "eval_se", "plays", "status")
DELTA_FIELDS = ("agent_a", "agent_b", "seed", "delta")


# --- sampling --------------------------------------------------------------------


@dataclass
class SampledState:
    """One decision point of a random-policy episode and its frame history."""

    env_state: EnvState
    frames: list

    @property
    def frame(self) -> np.ndarray:
        return self.frames[-1]


def sample_random_states(env_config: EnvConfig, n: int, seed: int = 0) -> list[SampledState]:
    """``n`` states, each drawn uniformly from the non-terminal states of its own random episode.

    Terminal states are left out: they are never acted on, and a caught agent
    is drawn on top of the ghost that caught it.
    """
    out = []
    for i in range(n):
        rng = np.random.default_rng(derive_seed(seed, 8, i))
        st, frame = env_reset(dataclasses.replace(env_config, seed=derive_seed(seed, 7, i)))
        history = [frame] * HISTORY
        seen = [SampledState(st, history)]
        while True:
            st, frame, _, done = env_step(st, int(rng.integers(env_config.n_actions)))
            if done:
                break
            history = history[1:] + [frame]
            seen.append(SampledState(st, history))
        out.append(seen[int(rng.integers(len(seen)))])
    return out


# --- detection -------------------------------------------------------------------


@dataclass
class DetectionEvalResult:
    per_type: dict
    pooled: DetectionMetrics
    n_frames: int


def run_detection_eval(env_config: EnvConfig, templates=None, n_frames: int = 100,
                       seed: int = 0) -> DetectionEvalResult:
    """Detection metrics per object type and pooled over ``n_frames`` sampled frames."""
    if n_frames < 1:
        raise ConfigError("n_frames must be >= 1")
    if templates is None:
        templates = templates_for_env(env_config.env_id, env_config.cell_px)
    types = range(len(env_config.object_types))
    counts = {t: [0, 0, 0] for t in types}
    for s in sample_random_states(env_config, n_frames, seed):
        dets = detect_objects(s.frame, templates)
        truth = ground_truth(s.env_state)
        for t in types:
            m = evaluate_detections([d for d in dets if d.object_type == t],
                                    [g for g in truth if g.object_type == t])
            counts[t][0] += m.tp
            counts[t][1] += m.fp
            counts[t][2] += m.fn
    per_type = {t: DetectionMetrics.from_counts(*c) for t, c in counts.items()}
    pooled = DetectionMetrics.from_counts(*(sum(c[i] for c in counts.values()) for i in range(3)))
    return DetectionEvalResult(per_type, pooled, n_frames)


# --- score comparison --------------------------------------------------------------


@dataclass
class ExperimentSpec:
    env_config: EnvConfig
    agents: list
    frames: int
    eval_plays: int = 50
    seeds: tuple = (0, 1, 2)
    out_dir: str | os.PathLike = "runs"
    resume: bool = False

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("an experiment needs at least one seed")
        if not self.agents:
            raise ConfigError("an experiment needs at least one agent")
        if self.frames < 0 or self.eval_plays < 1:
            raise ConfigError("frames must be >= 0 and eval_plays >= 1")
        self.seeds = tuple(int(s) for s in self.seeds)

    def labels(self) -> list[str]:
        """Directory names; repeated agent names get a numeric suffix."""
        seen: dict = {}
        out = []
        for a in self.agents:
            n = seen.get(a.name, 0)
            seen[a.name] = n + 1
            out.append(a.name if n == 0 else f"{a.name}_{n + 1}")
        return out


@dataclass
class CellResult:
    agent: str
    seed: int
    eval_mean: float
    eval_std: float
    plays: int
    status: str = "ok"

    @property
    def eval_se(self) -> float:
        return self.eval_std / math.sqrt(self.plays) if self.plays else math.nan


@dataclass
class DisagreementRecord:
    state_id: str
    action_a: int
    action_b: int
    paths: list


@dataclass
class DisagreementResult:
    n_states: int
    records: list

    @property
    def rate(self) -> float:
        return len(self.records) / self.n_states if self.n_states else 0.0


@dataclass
class ComparisonReport:
    cells: list
    deltas: list = field(default_factory=list)
    disagreements: DisagreementResult | None = None

    @property
    def partial(self) -> bool:
        return any(c.status != "ok" for c in self.cells)

    def means(self, agent: str) -> dict:
        return {c.seed: c.eval_mean for c in self.cells if c.agent == agent and c.status == "ok"}

    def margin(self, agent_a: str, agent_b: str) -> float:
        """Mean over shared seeds of ``mean(agent_a) - mean(agent_b)``."""
        d = [delta for a, b, _, delta in self.deltas if a == agent_a and b == agent_b]
        return float(np.mean(d)) if d else math.nan


def write_eval_csv(path, env_seeds, scores) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["play", "env_seed", "score"])
        for i, (s, v) in enumerate(zip(env_seeds, scores)):
            w.writerow([i, s, repr(float(v))])


def read_eval_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([float(r["score"]) for r in csv.DictReader(fh)], dtype=np.float64)


def cell_fingerprint(cfg, env_config: EnvConfig, frames: int) -> str:
    """Text identifying everything that determines a cell's results."""
    return f"{cfg!r}\n{env_config!r}\nframes={frames}\n"


def _run_cell(args) -> tuple[str, int, str]:
    label, cfg, env_config, frames, cell_dir, resume = args
    cell_dir = Path(cell_dir)
    cell_dir.mkdir(parents=True, exist_ok=True)
    fingerprint = cell_fingerprint(cfg, env_config, frames)
    stamp = cell_dir / "config.txt"
    if resume and (cell_dir / "eval.csv").exists() and stamp.exists() and stamp.read_text() == fingerprint:
        log.info("cell %s seed %d reused from %s", label, cfg.seed, cell_dir)
        return label, cfg.seed, "ok"
    for name in ("eval.csv", "error.txt"):
        (cell_dir / name).unlink(missing_ok=True)
    stamp.write_text(fingerprint)
    try:
        result = train(cfg, env_config, frames, checkpoint_path=cell_dir / "checkpoint.bin")
        write_log(cell_dir / "log.csv", result.log)
        scores = evaluate_checkpoint(result.net, cfg, env_config)
        write_eval_csv(cell_dir / "eval.csv", eval_env_seeds(cfg.seed, cfg.eval_plays), scores)
        return label, cfg.seed, "ok"
    except (ODRLError, FloatingPointError, OSError) as exc:
        log.error("cell %s seed %d failed: %s", label, cfg.seed, exc)
        (cell_dir / "error.txt").write_text(f"{type(exc).__name__}: {exc}\n")
        return label, cfg.seed, "failed"


def max_workers() -> int:
    """Cell-level parallelism, capped by ``ODRL_THREADS`` (default 1)."""
    raw = os.environ.get("ODRL_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"ODRL_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def run_score_comparison(spec: ExperimentSpec) -> ComparisonReport:
    """Train and evaluate every (agent, seed) cell, then write and return the report."""
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    for label, agent in zip(spec.labels(), spec.agents):
        for seed in spec.seeds:
            cfg = dataclasses.replace(agent, seed=seed, eval_plays=spec.eval_plays)
            jobs.append((label, cfg, spec.env_config, spec.frames, out / label / str(seed), spec.resume))
    workers = min(max_workers(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            list(pool.map(_run_cell, jobs))
    else:
        for job in jobs:
            _run_cell(job)
    report = build_report(out, spec.labels(), spec.seeds)
    write_report(out, report)
    return report


def build_report(out_dir, labels, seeds) -> ComparisonReport:
    """Fold the per-cell ``eval.csv`` files into a report."""
    out = Path(out_dir)
    cells = []
    for label in labels:
        for seed in seeds:
            path = out / label / str(seed) / "eval.csv"
            if path.exists():
                scores = read_eval_csv(path)
                cells.append(CellResult(label, seed, float(scores.mean()), float(scores.std()), len(scores)))
            else:
                cells.append(CellResult(label, seed, math.nan, math.nan, 0, "failed"))
    deltas = []
    for a, b in itertools.permutations(dict.fromkeys(labels), 2):
        ma, mb = {c.seed: c for c in cells if c.agent == a}, {c.seed: c for c in cells if c.agent == b}
        for seed in seeds:
            if ma[seed].status == "ok" and mb[seed].status == "ok":
                deltas.append((a, b, seed, ma[seed].eval_mean - mb[seed].eval_mean))
    return ComparisonReport(cells, deltas)


def write_report(out_dir, report: ComparisonReport) -> None:
    out = Path(out_dir)
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_FIELDS)
        for c in report.cells:
            w.writerow([c.agent, c.seed, repr(c.eval_mean), repr(c.eval_std), repr(c.eval_se), c.plays, c.status])
    with open(out / "deltas.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DELTA_FIELDS)
        for a, b, seed, d in report.deltas:
            w.writerow([a, b, seed, repr(d)])


# --- disagreements -------------------------------------------------------------------


def _is_object_sensitive(net: QNet) -> bool:
    return net.input_shape[0] > 3 * HISTORY


def net_input(net: QNet, frames, detections, k: int) -> np.ndarray:
    """Decoded state for ``net``, with object planes only if it expects them."""
    return decode_states(encode_state(frames, detections, _is_object_sensitive(net), k))


def run_disagreement_analysis(net_a: QNet, net_b: QNet, env_config: EnvConfig, n_states: int,
                              out_dir=None, seed: int = 0) -> DisagreementResult:
    """Compare greedy actions on sampled states; save saliency for each disagreement.

    Each disagreement gets ``<out>/disagreements/<state_id>/`` holding
    ``state.ppm``, ``object_a.ppm``, ``object_b.ppm`` and the two CSV sidecars.
    """
    if n_states < 1:
        raise ConfigError("n_states must be >= 1")
    k = len(env_config.object_types)
    templates = templates_for_env(env_config.env_id, env_config.cell_px)
    root = Path(out_dir) / "disagreements" if out_dir is not None else None
    records = []
    for i, s in enumerate(sample_random_states(env_config, n_states, seed)):
        dets = detect_objects(s.frame, templates)
        xa = net_input(net_a, s.frames, dets, k)
        xb = net_input(net_b, s.frames, dets, k)
        a = int(np.argmax(net_a.predict(xa)[0]))
        b = int(np.argmax(net_b.predict(xb)[0]))
        if a == b:
            continue
        state_id = f"{i:04d}"
        paths = []
        if root is not None:
            d = root / state_id
            d.mkdir(parents=True, exist_ok=True)
            bg = env_config.background_color
            write_ppm(d / "state.ppm", s.frame)
            render_saliency(object_saliency(net_a, xa, dets, a, bg, state_id), d / "object_a.ppm")
            render_saliency(object_saliency(net_b, xb, dets, b, bg, state_id), d / "object_b.ppm")
            paths = [str(d / n) for n in ("state.ppm", "object_a.ppm", "object_b.ppm", "object_a.csv", "object_b.csv")]
        records.append(DisagreementRecord(state_id, a, b, paths))
    result = DisagreementResult(n_states, records)
    if root is not None:
        root.mkdir(parents=True, exist_ok=True)
        with open(Path(out_dir) / "disagreements.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["state_id", "action_a", "action_b"])
            for r in records:
                w.writerow([r.state_id, r.action_a, r.action_b])
    return result


# --- crafted sign states ---------------------------------------------------------------


def crafted_sign_states(env_config: EnvConfig, n: int = 50, seed: int = 0) -> list[SampledState]:
    """Minipac states with exactly one bean and one ghost, both next to the agent.

    Walls follow the normal maze. The agent sits on an open cell with at least
    two open orthogonal neighbours; the bean takes one, the ghost another.
    The frame history is the single frame repeated, as at an episode start.
    """
    if env_config.env_id != "minipac":
        raise ConfigError("crafted sign states exist for minipac only")
    base, _ = env_reset(env_config)
    walls = base.walls
    cells = [(x, y) for y in range(env_config.grid_h) for x in range(env_config.grid_w) if (x, y) not in walls]

    def neighbours(c):
        return [(c[0] + dx, c[1] + dy) for dx, dy in ((-1, 0), (1, 0), (0, 1), (0, -1))
                if (c[0] + dx, c[1] + dy) in cells]

    anchors = [c for c in cells if len(neighbours(c)) >= 2]
    rng = np.random.default_rng(derive_seed(seed, 9))
    out = []
    for _ in range(n):
        agent = anchors[int(rng.integers(len(anchors)))]
        nb = neighbours(agent)
        i, j = rng.choice(len(nb), size=2, replace=False)
        bean, ghost = nb[int(i)], nb[int(j)]
        st = dataclasses.replace(
            base,
            agent=agent,
            entities={1: (Entity(*ghost),), 2: (Entity(*bean),), 3: ()},
            ghost_home=(ghost,),
            frightened=(0,),
        )
        frame = render(st)
        out.append(SampledState(st, [frame] * HISTORY))
    return out


@dataclass
class SignResult:
    n_states: int
    n_correct: int
    weights: list

    @property
    def fraction(self) -> float:
        return self.n_correct / self.n_states if self.n_states else 0.0


def sign_property(net: QNet, env_config: EnvConfig, states) -> SignResult:
    """Share of states where the bean is labelled good and the ghost bad for the greedy action."""
    k = len(env_config.object_types)
    templates = templates_for_env(env_config.env_id, env_config.cell_px)
    correct = 0
    weights = []
    for s in states:
        dets = detect_objects(s.frame, templates)
        x = net_input(net, s.frames, dets, k)
        a = int(np.argmax(net.predict(x)[0]))
        smap = object_saliency(net, x, dets, a, env_config.background_color)
        labels = {d.object_type: lab for d, lab in classify_objects(smap)}
        w = {d.object_type: wv for d, wv in smap.entries}
        weights.append((w.get(2, math.nan), w.get(1, math.nan)))
        correct += labels.get(2) == "good" and labels.get(1) == "bad"
    return SignResult(len(weights), correct, weights)
