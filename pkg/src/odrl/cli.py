"""Command-line entry point: ``odrl <subcommand> [--config F] [--set k=v ...] [--out DIR] [--seed N]``.

Subcommands: train, eval, detect, explain, compare, gradcheck.
Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .agents import decode_states, derive_seed, encode_state, eval_env_seeds, evaluate_checkpoint, n_planes, train, write_log
from .config import RunConfig, build_run_config, parse_overrides, read_config
from .envsim import OBJECT_TYPES, Entity, GroundTruthBox, env_reset, env_step, parse_layout, render
from .exceptions import ConfigError, DimensionError, FormatError, ODRLError
from .netpbm import read_ppm, write_ppm
from .saliency import object_saliency, pixel_saliency, render_saliency
from .tensornet import QNet, build_qnet, grad_check
from .vision import (
    DetectionMetrics,
    detect_objects,
    evaluate_detections,
    load_templates,
    templates_for_env,
    write_detections_csv,
)

log = logging.getLogger("odrl")

GRADCHECK_TOL = 1e-4
SUBCOMMANDS = ("train", "eval", "detect", "explain", "compare", "gradcheck")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(2)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="odrl", description="Object-sensitive deep RL experiments.")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="K=V",
                   help="override one config key (repeatable)")
    p.add_argument("--out", default=".", help="output directory (default: current directory)")
    p.add_argument("--seed", type=int, help="agent seed override")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def load_run_config(args, required=()) -> RunConfig:
    raw = read_config(args.config) if args.config else {}
    raw.update(parse_overrides(args.overrides))
    if args.seed is not None:
        raw["seed"] = str(args.seed)
    return build_run_config(raw, required)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_checkpoint(cfg: RunConfig, out: Path) -> QNet:
    path = Path(cfg.get("checkpoint", out / "checkpoint.bin"))
    try:
        net = QNet.load(path)
    except FileNotFoundError:
        raise ConfigError(f"checkpoint {str(path)!r} not found") from None
    k = len(cfg.env.object_types)
    H, W, _ = cfg.env.frame_shape
    for sensitive in (cfg.agent.object_sensitive, not cfg.agent.object_sensitive):
        if net.input_shape == (n_planes(sensitive, k), H, W) and net.n_actions == cfg.env.n_actions:
            return net
    raise DimensionError(
        f"checkpoint {str(path)!r} expects input {net.input_shape} -> {net.n_actions} actions, "
        f"environment gives {(n_planes(cfg.agent.object_sensitive, k), H, W)} -> {cfg.env.n_actions}"
    )


# --- subcommands -----------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_run_config(args, required=("total_frames",))
    out = _out(args)
    result = train(cfg.agent, cfg.env, cfg.run["total_frames"], checkpoint_path=out / "checkpoint.bin")
    write_log(out / "log.csv", result.log)
    if result.log:
        last = result.log[-1]
        print(f"frame {last['frame']} eval_mean {last['eval_mean']!r} eval_std {last['eval_std']!r}")
    print(f"wrote {out / 'checkpoint.bin'} and {out / 'log.csv'}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_run_config(args)
    out = _out(args)
    net = _load_checkpoint(cfg, out)
    agent = dataclasses.replace(cfg.agent, object_sensitive=harness._is_object_sensitive(net))
    scores = evaluate_checkpoint(net, agent, cfg.env)
    harness.write_eval_csv(out / "eval.csv", eval_env_seeds(agent.seed, agent.eval_plays), scores)
    print(f"eval_mean {float(scores.mean())!r} eval_std {float(scores.std())!r} plays {len(scores)}")
    return 0


def _read_truth(path: Path) -> list[GroundTruthBox]:
    boxes = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            try:
                boxes.append(GroundTruthBox(int(r["type"]), int(r["x"]), int(r["y"]), int(r["w"]), int(r["h"])))
            except (KeyError, ValueError):
                raise FormatError(f"{path}: truth rows need integer type,x,y,w,h") from None
    return boxes


def cmd_detect(args) -> int:
    cfg = load_run_config(args, required=("frames_dir",))
    out = _out(args)
    frames_dir = Path(cfg.run["frames_dir"])
    if not frames_dir.is_dir():
        raise ConfigError(f"frames_dir {str(frames_dir)!r} is not a directory")
    templates = load_templates(cfg.run["templates"]) if "templates" in cfg.run else \
        templates_for_env(cfg.env.env_id, cfg.env.cell_px)
    rows = []
    counts = [0, 0, 0]
    have_truth = False
    for path in sorted(frames_dir.glob("*.ppm")):
        dets = detect_objects(read_ppm(path), templates)
        rows.extend((path.stem, d) for d in dets)
        truth_path = path.with_suffix(".truth.csv")
        if truth_path.exists():
            have_truth = True
            m = evaluate_detections(dets, _read_truth(truth_path))
            counts = [counts[0] + m.tp, counts[1] + m.fp, counts[2] + m.fn]
    n = write_detections_csv(out / "detections.csv", rows)
    print(f"{n} detections written to {out / 'detections.csv'}")
    if have_truth:
        m = DetectionMetrics.from_counts(*counts)
        with open(out / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["tp", "fp", "fn", "precision", "recall", "f1"])
            w.writerow([m.tp, m.fp, m.fn, repr(m.precision), repr(m.recall), repr(m.f1)])
        print(f"precision {m.precision:.6g} recall {m.recall:.6g} f1 {m.f1:.6g}")
    return 0


def state_from_layout(env_config, text: str):
    """Environment state whose entities come from a ``name x y`` layout."""
    base, _ = env_reset(env_config)
    names = OBJECT_TYPES[env_config.env_id]
    agent = None
    ents: dict = {t: [] for t in range(1, len(names))}
    for name, x, y in parse_layout(text):
        if name not in names:
            raise ConfigError(f"unknown object {name!r} in layout")
        if not (0 <= x < env_config.grid_w and 0 <= y < env_config.grid_h):
            raise ConfigError(f"layout cell ({x}, {y}) lies outside the grid")
        t = names.index(name)
        if t == 0:
            agent = (x, y)
        else:
            ents[t].append(Entity(x, y))
    if agent is None:
        raise ConfigError(f"layout has no {names[0]!r} line")
    extra = {}
    if env_config.env_id == "minipac":
        ghosts = tuple((e.x, e.y) for e in ents[1])
        extra = {"ghost_home": ghosts, "frightened": (0,) * len(ghosts)}
    return dataclasses.replace(base, agent=agent, entities={t: tuple(v) for t, v in ents.items()}, **extra)


def _explain_frames(cfg: RunConfig) -> list:
    if "layout" in cfg.run:
        path = Path(cfg.run["layout"])
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read layout {str(path)!r}: {exc.strerror}") from None
        return [render(state_from_layout(cfg.env, text))] * 4
    env = dataclasses.replace(cfg.env, seed=cfg.get("state_seed", 0))
    st, frame = env_reset(env)
    frames = [frame] * 4
    rng = np.random.default_rng(derive_seed(env.seed, 10))
    for _ in range(cfg.get("state_steps", 0)):
        st, frame, _, done = env_step(st, int(rng.integers(env.n_actions)))
        if done:
            break
        frames = frames[1:] + [frame]
    return frames


def cmd_explain(args) -> int:
    cfg = load_run_config(args)
    out = _out(args)
    net = _load_checkpoint(cfg, out)
    frames = _explain_frames(cfg)
    k = len(cfg.env.object_types)
    dets = detect_objects(frames[-1], templates_for_env(cfg.env.env_id, cfg.env.cell_px))
    x = decode_states(encode_state(frames, dets, harness._is_object_sensitive(net), k))
    action = int(np.argmax(net.predict(x)[0]))
    write_ppm(out / "state.ppm", frames[-1])
    render_saliency(pixel_saliency(net, x, action), out / "pixel.pgm")
    smap = object_saliency(net, x, dets, action, cfg.env.background_color)
    render_saliency(smap, out / "object.ppm", csv_path=out / "objects.csv")
    print(f"action {action} objects {len(dets)}; wrote state.ppm pixel.pgm object.ppm objects.csv to {out}")
    return 0


def cmd_compare(args) -> int:
    cfg = load_run_config(args, required=("total_frames",))
    names = [a.strip() for a in cfg.get("agents", "dqn,o-dqn").split(",") if a.strip()]
    agents = []
    for name in names:
        sensitive = name.startswith("o-")
        agents.append(dataclasses.replace(cfg.agent, algo=name[2:] if sensitive else name, object_sensitive=sensitive))
    try:
        seeds = tuple(int(s) for s in cfg.get("seeds", "0,1,2").split(","))
    except ValueError:
        raise ConfigError(f"seeds must be a comma list of integers, got {cfg.get('seeds')!r}") from None
    spec = harness.ExperimentSpec(cfg.env, agents, cfg.run["total_frames"], cfg.agent.eval_plays, seeds, _out(args))
    report = harness.run_score_comparison(spec)
    for c in report.cells:
        print(f"{c.agent} seed {c.seed}: {c.eval_mean:.2f} +- {c.eval_std:.2f} ({c.status})")
    labels = spec.labels()
    if len(labels) >= 2 and cfg.get("n_states", 0) > 0:
        paths = [Path(spec.out_dir) / lab / str(seeds[0]) / "checkpoint.bin" for lab in labels[:2]]
        res = harness.run_disagreement_analysis(QNet.load(paths[0]), QNet.load(paths[1]), cfg.env,
                                                cfg.run["n_states"], spec.out_dir, seed=seeds[0])
        print(f"disagreement rate {res.rate:.4f} over {res.n_states} states")
    return 1 if report.partial else 0


def cmd_gradcheck(args) -> int:
    cfg = load_run_config(args)
    k = len(cfg.env.object_types)
    H, W, _ = cfg.env.frame_shape
    shape = (n_planes(cfg.agent.object_sensitive, k), H, W)
    seed = cfg.agent.seed
    net = build_qnet(shape, cfg.env.n_actions, cfg.agent.profile, cfg.agent.algo == "dueling", seed=seed)
    x = np.random.default_rng(derive_seed(seed, 11)).uniform(0.0, 1.0, size=(1,) + shape)
    res = grad_check(net, x, eps=1e-5, seed=seed, detail=True)
    ok = res.max_relative_error < GRADCHECK_TOL
    print(f"profile {cfg.agent.profile} max relative error {res.max_relative_error:.6g} "
          f"checked {res.checked} skipped {res.skipped_kinks} {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "detect": cmd_detect,
    "explain": cmd_explain,
    "compare": cmd_compare,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.subcommand](args)
    except (ConfigError, DimensionError, FormatError) as exc:
        print(f"odrl {args.subcommand}: configuration error: {exc}", file=sys.stderr)
        return 2
    except (ODRLError, OSError, FloatingPointError) as exc:
        print(f"odrl {args.subcommand}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
