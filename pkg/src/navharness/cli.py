"""Command-line entry point: ``navharness <subcommand> ...``.

Failures print one JSON line on stderr and exit 1 (domain errors) or 2
(usage errors). Options can also come from ``--config`` (JSON or TOML);
explicit flags win over the file.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .action_lang import format_action, parse_action
from .bench import lowlevel_eval, obstacle_course
from .datagen import DatagenConfig, emit_sft
from .episode import EpisodeConfig, OracleConfig, run_episodes
from .errors import NavHarnessError
from .lidar import HeightMapConfig, HeightMapFilter, LidarConfig, simulate_scan, voxelize_heightmap
from .locomotion import DynamicsParams, RewardWeights, replace_params
from .metrics import MetricConfig, aggregate, evaluate_episode, json_safe
from .records import read_records, write_records
from .scene import SceneParams, generate_scene, inflate, load_scene, load_scene_dir, save_scene

ENDPOINT_ENV = "VLN_AGENT_ENDPOINT"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


# --- config and manifests ------------------------------------------------------------


def load_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    text = p.read_text(encoding="utf-8")
    if p.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        return tomllib.loads(text)
    return json.loads(text)


def _config_defaults(config: dict, command: str) -> dict:
    """Flat option defaults: top-level scalars, then the subcommand's own section."""
    flat = {k: v for k, v in config.items() if not isinstance(v, dict)}
    section = config.get(command.replace("-", "_"), config.get(command, {}))
    flat.update({k.replace("-", "_"): v for k, v in section.items()})
    return flat


def _jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {k: _jsonable(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(output: str | Path, command: str, params: dict, inputs=(), seed=None, extra=None, started=None) -> Path:
    """Sibling ``<output>.manifest.json`` with everything needed to reproduce ``output``."""
    output = Path(output)
    now = datetime.now(timezone.utc).isoformat()
    manifest = {
        "tool": "navharness",
        "version": __version__,
        "command": command,
        "params": _jsonable(params),
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "output": {"path": str(output), "sha256": _sha256(output) if output.is_file() else None},
        "started": started or now,
        "finished": now,
    }
    if extra:
        manifest.update(_jsonable(extra))
    path = output.with_name(output.name + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _plain_args(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func", "config_key")}


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _locomotion(config: dict) -> tuple[DynamicsParams, RewardWeights]:
    section = config.get("locomotion", {})
    return (
        replace_params(DynamicsParams(), **section),
        replace_params(RewardWeights(), **section),
    )


def _episode_cfg(args, config: dict) -> EpisodeConfig:
    dyn, _ = _locomotion(config)
    return EpisodeConfig(
        max_decisions=args.max_decisions,
        success_radius=args.success_radius,
        frames_budget=args.frames_budget,
        avoidance_enabled=args.avoidance,
        collision_policy=args.collision_policy,
        settle=args.settle,
        render_dir=args.render_dir,
        dynamics=dyn,
    )


# --- subcommands ------------------------------------------------------------------


def cmd_scene_gen(args, config) -> int:
    started = _now()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params = SceneParams(
        size=args.size,
        obstacle_density=args.density,
        min_clearance=args.clearance,
        terrain=args.terrain,
        min_goal_distance=args.min_goal_distance,
    )
    written = []
    for seed in range(args.seed, args.seed + args.count):
        scene = generate_scene(seed, params)
        path = out / f"{scene.scene_id}.json"
        save_scene(scene, path)
        write_manifest(path, "scene gen", {"scene_params": params, "seed": seed}, seed=seed, started=started)
        written.append(str(path))
    print(json.dumps({"scenes": written}))
    return 0


def _scenes(path: str):
    p = Path(path)
    return load_scene_dir(p) if p.is_dir() else [load_scene(p)]


def cmd_run(args, config) -> int:
    started = _now()
    scenes = _scenes(args.scenes)
    if not scenes:
        raise NavHarnessError(f"no scenes found in {args.scenes}")
    if args.agent == "external":
        endpoint = args.endpoint or os.environ.get(ENDPOINT_ENV)
        if not endpoint:
            raise UsageError(f"--endpoint (or {ENDPOINT_ENV}) is required for the external agent")
        spec = {"kind": "external", "endpoint": endpoint, "timeout": args.timeout, "retries": args.retries}
    elif args.agent == "scripted":
        if args.script:
            lines = Path(args.script).read_text(encoding="utf-8").splitlines()
            responses = [ln for ln in lines if ln.strip()]
        else:
            responses = list(args.response or [])
        spec = {"kind": "scripted", "responses": responses}
    else:
        spec = {"kind": "oracle", "oracle": dataclasses.asdict(OracleConfig())}
    cfg = _episode_cfg(args, config)
    records = run_episodes(scenes, spec, cfg, base_seed=args.seed, workers=args.workers)
    write_records(records, args.out)
    write_manifest(
        args.out,
        "run",
        {"agent": spec, "episode": cfg, "workers": args.workers},
        inputs=[args.scenes],
        seed=args.seed,
        extra={"wall_times": [r.wall_time for r in records]},
        started=started,
    )
    print(json.dumps({"episodes": len(records), "out": args.out}))
    return 0


def cmd_eval(args, config) -> int:
    started = _now()
    scenes = {s.scene_id: s for s in _scenes(args.scenes)}
    mcfg = MetricConfig(success_radius=args.success_radius, d_th=args.success_radius, euclidean=args.euclidean)
    reports, per_episode, grids = [], [], {}
    for rec in read_records(args.episodes):
        scene = scenes.get(rec.scene_id)
        if scene is None:
            raise NavHarnessError(f"episode references unknown scene {rec.scene_id!r}")
        grid = grids.setdefault(rec.scene_id, inflate(scene, mcfg.robot_radius))
        rep = evaluate_episode(rec, scene, mcfg, grid)
        reports.append(rep)
        per_episode.append({"scene_id": rec.scene_id, "episode_index": rec.episode_index, **rep.to_dict()})
    summary = json_safe(aggregate(reports))
    report = {
        "summary": summary,
        "units": {"NE": "m", "Collision Rate": "percent of control steps"},
        "episodes": [json_safe(e) for e in per_episode],
    }
    Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_manifest(args.out, "eval", {"metrics": mcfg}, inputs=[args.episodes, args.scenes], started=started)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_datagen(args, config) -> int:
    started = _now()
    cfg = DatagenConfig(
        frames_budget=args.frames_budget,
        max_merge=args.max_merge,
        rebalance=not args.no_rebalance,
        min_class_frac=args.min_class_frac,
        max_dup_factor=args.max_dup_factor,
        seed=args.seed,
    )
    stats = emit_sft(args.episodes, args.out, cfg)
    write_manifest(args.out, "datagen", {"datagen": cfg}, inputs=[args.episodes], seed=args.seed, extra={"stats": stats}, started=started)
    print(json.dumps(stats, sort_keys=True))
    return 0


def cmd_heightmap(args, config) -> int:
    hcfg = HeightMapConfig()
    if args.points:
        pts = np.asarray(json.loads(Path(args.points).read_text(encoding="utf-8")), dtype=float)
        hmap = voxelize_heightmap(pts, hcfg)
    else:
        if not args.scene:
            raise UsageError("heightmap needs --scene or --points")
        scene = load_scene(args.scene)
        sp = scene.start_pose
        pose = (
            sp.x if args.x is None else args.x,
            sp.y if args.y is None else args.y,
            sp.yaw if args.yaw is None else args.yaw,
        )
        window = HeightMapFilter(hcfg)
        for k in range(args.scans):
            window.push(simulate_scan(scene, pose, LidarConfig(), seed=args.seed + k))
        hmap = window.current()
    payload = hmap.to_dict()
    if args.out:
        Path(args.out).write_text(json.dumps(payload) + "\n", encoding="utf-8")
        write_manifest(args.out, "heightmap", _plain_args(args), inputs=[args.scene or args.points], seed=args.seed)
        print(json.dumps({"dims": payload["dims"], "valid_cells": int(hmap.valid.sum()), "out": args.out}))
    else:
        print(json.dumps(payload))
    return 0


def cmd_parse(args, config) -> int:
    report = parse_action(args.text)
    print(json.dumps(report.to_dict(), sort_keys=True))
    return 0


def cmd_lowlevel_eval(args, config) -> int:
    started = _now()
    scene = load_scene(args.scene) if args.scene else obstacle_course(args.seed)
    dyn, _ = _locomotion(config)
    dyn = replace_params(dyn, **{k: getattr(args, k) for k in ("tau_v", "tau_omega", "noise_sigma") if getattr(args, k) is not None})
    cfg = EpisodeConfig(dynamics=dyn)
    report = lowlevel_eval(scene, args.duration, args.seed, cfg)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
        write_manifest(args.out, "lowlevel-eval", {"dynamics": dyn, "duration": args.duration, "scene": scene.scene_id}, seed=args.seed, started=started)
    print(text)
    return 0


def cmd_mock_agent(args, config) -> int:
    from .mock_agent import MockAgentServer

    responses = None
    if args.script:
        responses = [ln for ln in Path(args.script).read_text(encoding="utf-8").splitlines() if ln.strip()]
    elif args.response:
        responses = list(args.response)
    scene = load_scene(args.scene) if args.scene else None
    server = MockAgentServer(args.port, responses=responses, scene=scene, host=args.host)
    print(json.dumps({"url": server.url, "mode": "oracle" if scene else "script"}), flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.httpd.server_close()
    return 0


# --- parser ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    p = _Parser(prog="navharness", description="Language-driven navigation harness for 2.5D grid worlds.")
    p.add_argument("--version", action="version", version=f"navharness {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--config", help="JSON or TOML file with option defaults")
        return sp

    scene = sub.add_parser("scene", help="scene utilities")
    scene_sub = scene.add_subparsers(dest="scene_command", parser_class=_Parser, metavar="SCENE_COMMAND")
    scene_sub.required = True
    g = scene_sub.add_parser("gen", help="generate random rooms", description="generate random rooms")
    g.add_argument("--config", help="JSON or TOML file with option defaults")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--size", type=float, default=8.0)
    g.add_argument("--density", type=float, default=0.10)
    g.add_argument("--clearance", type=float, default=0.7)
    g.add_argument("--min-goal-distance", type=float, default=3.0)
    g.add_argument("--terrain", choices=["flat", "ramp", "steps"], default="flat")
    g.set_defaults(func=cmd_scene_gen, config_key="scene_gen")

    r = add("run", "run episodes with an agent")
    r.add_argument("--agent", choices=["oracle", "scripted", "external"], default="oracle")
    r.add_argument("--scenes", required=True, help="scene file or directory")
    r.add_argument("--endpoint", help=f"agent URL (default: ${ENDPOINT_ENV})")
    r.add_argument("--script", help="file with one scripted response per line")
    r.add_argument("--response", action="append", help="scripted response (repeatable)")
    r.add_argument("--frames-budget", type=int, default=8)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--max-decisions", type=int, default=50)
    r.add_argument("--success-radius", type=float, default=3.0)
    r.add_argument("--avoidance", action="store_true", help="enable height-map avoidance")
    r.add_argument("--collision-policy", choices=["block", "terminate"], default="block")
    r.add_argument("--settle", type=float, default=0.0)
    r.add_argument("--render-dir", help="write top-down PNG frames here")
    r.add_argument("--timeout", type=float, default=30.0)
    r.add_argument("--retries", type=int, default=2)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run, config_key="run")

    e = add("eval", "score episodes")
    e.add_argument("--episodes", required=True)
    e.add_argument("--scenes", required=True)
    e.add_argument("--success-radius", type=float, default=3.0)
    e.add_argument("--euclidean", action="store_true", help="straight-line instead of geodesic distances")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval, config_key="eval")

    d = add("datagen", "emit fine-tuning samples from episodes")
    d.add_argument("--episodes", required=True)
    d.add_argument("--frames-budget", type=int, default=8)
    d.add_argument("--max-merge", type=int, default=3)
    d.add_argument("--min-class-frac", type=float, default=0.08)
    d.add_argument("--max-dup-factor", type=int, default=5)
    d.add_argument("--no-rebalance", action="store_true")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_datagen, config_key="datagen")

    h = add("heightmap", "build a height map from a scene pose or a point file")
    h.add_argument("--scene")
    h.add_argument("--points", help="JSON list of [x, y, z] points in the map frame")
    h.add_argument("--x", type=float)
    h.add_argument("--y", type=float)
    h.add_argument("--yaw", type=float)
    h.add_argument("--scans", type=int, default=1)
    h.add_argument("--seed", type=int, default=0)
    h.add_argument("--out")
    h.set_defaults(func=cmd_heightmap, config_key="heightmap")

    pa = add("parse", "parse agent text into an action")
    pa.add_argument("--text", required=True)
    pa.set_defaults(func=cmd_parse, config_key="parse")

    lo = add("lowlevel-eval", "velocity tracking and collision rate with and without avoidance")
    lo.add_argument("--scene")
    lo.add_argument("--duration", type=float, default=60.0)
    lo.add_argument("--seed", type=int, default=0)
    lo.add_argument("--tau-v", type=float)
    lo.add_argument("--tau-omega", type=float)
    lo.add_argument("--noise-sigma", type=float)
    lo.add_argument("--out")
    lo.set_defaults(func=cmd_lowlevel_eval, config_key="lowlevel_eval")

    m = add("mock-agent", "serve a scripted or oracle agent over HTTP")
    m.add_argument("--port", type=int, default=8765)
    m.add_argument("--host", default="127.0.0.1")
    m.add_argument("--script")
    m.add_argument("--response", action="append")
    m.add_argument("--scene", help="oracle mode: answer from the posted pose")
    m.set_defaults(func=cmd_mock_agent, config_key="mock_agent")
    return p


def _find_config(argv: list[str]) -> str | None:
    for k, tok in enumerate(argv):
        if tok == "--config" and k + 1 < len(argv):
            return argv[k + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _apply_config(parser: _Parser, argv: list[str], config: dict) -> None:
    """Install config values as defaults of the selected subcommand parser."""
    sp, parts = parser, []
    while True:
        subs = [a for a in sp._actions if isinstance(a, argparse._SubParsersAction)]
        token = next((t for t in argv if subs and t in subs[0].choices), None)
        if token is None:
            break
        sp = subs[0].choices[token]
        parts.append(token)
    if not parts:
        return
    defaults = _config_defaults(config, "_".join(parts))
    dests = {a.dest: a for a in sp._actions}
    known = {k: v for k, v in defaults.items() if k in dests and k not in ("help", "config")}
    for k in known:
        dests[k].required = False
    sp.set_defaults(**known)


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        config = load_config(_find_config(argv))
        if config:
            _apply_config(parser, argv, config)
        args = parser.parse_args(argv)
        return args.func(args, config)
    except UsageError as exc:
        return _fail("UsageError", str(exc), 2)
    except NavHarnessError as exc:
        return _fail(type(exc).__name__, str(exc), 1)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        return _fail(type(exc).__name__, str(exc), 1)


if __name__ == "__main__":
    sys.exit(main())
