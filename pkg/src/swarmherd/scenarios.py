"""Scenario files: strict YAML schema, station layouts, world assembly.

A scenario pins everything a run needs: swarm sizes, engine constants,
controller gains, the station layout around the cluster, and the waypoint
route. Unknown keys anywhere in the file are rejected outright; silently
ignoring a typo like ``arival_tol`` costs hours.

Station layouts are generated from a small library of named kinds:

* ``clover``  — guides press in at the four diagonal lobe roots;
* ``dumbbell`` — guides pinch a waist at the top and bottom;
* ``circle``  — guides spread evenly and hold, without pressing;
* ``custom``  — explicit angle/distance lists.

Distances in the shape section are perceived COM distances (a guide's
limited field of view biases its estimate toward the near edge), so they are
deliberately shorter than true geometric radii.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from swarmherd.engine import EngineParams, World, default_half_width, init_world
from swarmherd.geometry import Vec2
from swarmherd.guides import GuideConfig, MovementPlan, ShapingPlan
from swarmherd.potential import PotentialParams
from swarmherd.workers import WorkerGains, WorkerParams


class ScenarioError(ValueError):
    """Bad scenario file or override; the CLI maps this to a usage error."""


_TOP_KEYS = {
    "name",
    "n_workers",
    "n_guides",
    "seed",
    "max_ticks",
    "engine",
    "worker",
    "gains",
    "potential",
    "shape",
    "movement",
    "guide",
    "init",
}
_ENGINE_KEYS = {"dt", "v_max", "radius", "d_com", "loss_rate", "anti_entropy_period", "log_every"}
_WORKER_KEYS = {"rho", "fov", "rfov"}
_GAINS_KEYS = {"alpha", "beta"}
_POTENTIAL_KEYS = {"k", "a0"}
_SHAPE_KEYS = {
    "kind",
    "base_dist",
    "press_depth",
    "group_spread",
    "theta_targets",
    "dist_targets",
    "d_sp",
    "d_ss",
    "v_s",
    "theta_tol",
    "dist_tol",
    "exit_offset",
}
_MOVEMENT_KEYS = {
    "waypoints",
    "waypoints_relative",
    "arrival_tol",
    "alpha_g",
    "beta_g",
    "gamma_g",
    "com_standoff",
    "press_bias",
    "rigid_fov",
}
_GUIDE_KEYS = {"setup_speed", "quorum_rounds", "gcom_period", "follow_distance"}
_INIT_KEYS = {"worker_region", "guide_region", "guide_margin", "worker_density", "positions"}


def _check_keys(section: dict, allowed: set[str], path: str) -> None:
    if not isinstance(section, dict):
        raise ScenarioError(f"{path} must be a mapping")
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ScenarioError(f"unknown key(s) {unknown} in {path}; allowed: {sorted(allowed)}")


@dataclass(frozen=True)
class Scenario:
    """A validated scenario: the resolved config dict plus its name."""

    name: str
    config: dict

    @property
    def n_workers(self) -> int:
        return int(self.config["n_workers"])

    @property
    def n_guides(self) -> int:
        return int(self.config["n_guides"])

    @property
    def seed(self) -> int:
        return int(self.config.get("seed", 0))

    @property
    def max_ticks(self) -> int:
        return int(self.config.get("max_ticks", 20000))


def station_layout(
    kind: str,
    n_guides: int,
    base_dist: float,
    press_depth: float,
    group_spread: float = 0.5,
) -> tuple[tuple[float, ...], tuple[float, ...], tuple[float, ...]]:
    """(theta_targets, dist_targets, d_sp) for a named layout.

    Angles come out sorted ascending in (-pi, pi]. Group members fan out
    around their root by up to group_spread radians.
    """
    if n_guides < 1:
        raise ScenarioError("station layout needs at least one guide")
    if kind == "clover":
        roots = [-3 * math.pi / 4, -math.pi / 4, math.pi / 4, 3 * math.pi / 4]
        thetas = _spread_over_roots(roots, n_guides, group_spread)
        return thetas, (base_dist,) * n_guides, (press_depth,) * n_guides
    if kind == "dumbbell":
        roots = [-math.pi / 2, math.pi / 2]
        thetas = _spread_over_roots(roots, n_guides, group_spread)
        return thetas, (base_dist,) * n_guides, (press_depth,) * n_guides
    if kind == "circle":
        thetas = tuple(-math.pi + 2.0 * math.pi * (k + 1) / n_guides for k in range(n_guides))
        return thetas, (base_dist,) * n_guides, (press_depth,) * n_guides
    raise ScenarioError(f"unknown shape kind {kind!r}")


def _spread_over_roots(roots: list[float], n_guides: int, group_spread: float) -> tuple[float, ...]:
    per_root = [n_guides // len(roots)] * len(roots)
    for i in range(n_guides % len(roots)):
        per_root[i] += 1
    thetas: list[float] = []
    for root, count in zip(roots, per_root):
        if count == 1:
            thetas.append(root)
        elif count > 1:
            offsets = np.linspace(-group_spread / 2.0, group_spread / 2.0, count)
            thetas.extend(root + float(o) for o in offsets)
    return tuple(sorted(thetas))


def parse_override(expr: str) -> tuple[list[str], object]:
    """Parse a ``--set dotted.key=value`` expression; values are YAML scalars."""
    if "=" not in expr:
        raise ScenarioError(f"override {expr!r} must look like key=value")
    key, _, raw = expr.partition("=")
    key = key.strip()
    if not key:
        raise ScenarioError(f"override {expr!r} has an empty key")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ScenarioError(f"override {expr!r} has an unparseable value: {exc}") from exc
    return key.split("."), value


def apply_overrides(config: dict, overrides: list[str]) -> dict:
    """Apply dotted-path overrides to a copy of the config dict."""
    import copy

    out = copy.deepcopy(config)
    for expr in overrides:
        path, value = parse_override(expr)
        node = out
        for part in path[:-1]:
            nxt = node.get(part)
            if nxt is None:
                nxt = {}
                node[part] = nxt
            if not isinstance(nxt, dict):
                raise ScenarioError(f"override {expr!r} descends through non-mapping {part!r}")
            node = nxt
        node[path[-1]] = value
    return out


def validate_config(config: dict, origin: str = "scenario") -> None:
    """Reject unknown keys and structurally bad sections."""
    _check_keys(config, _TOP_KEYS, origin)
    for key in ("n_workers", "n_guides"):
        if key not in config:
            raise ScenarioError(f"{origin} is missing required key {key!r}")
        if not isinstance(config[key], int) or config[key] < 0:
            raise ScenarioError(f"{key} must be a non-negative integer")
    if config["n_workers"] + config["n_guides"] == 0:
        raise ScenarioError("scenario has no robots")
    _check_keys(config.get("engine", {}), _ENGINE_KEYS, f"{origin}.engine")
    _check_keys(config.get("worker", {}), _WORKER_KEYS, f"{origin}.worker")
    _check_keys(config.get("gains", {}), _GAINS_KEYS, f"{origin}.gains")
    _check_keys(config.get("potential", {}), _POTENTIAL_KEYS, f"{origin}.potential")
    _check_keys(config.get("init", {}), _INIT_KEYS, f"{origin}.init")
    _check_keys(config.get("guide", {}), _GUIDE_KEYS, f"{origin}.guide")
    if config["n_guides"] > 0:
        if "shape" not in config or "movement" not in config:
            raise ScenarioError("scenarios with guides need shape and movement sections")
        _check_keys(config["shape"], _SHAPE_KEYS, f"{origin}.shape")
        _check_keys(config["movement"], _MOVEMENT_KEYS, f"{origin}.movement")
        movement = config["movement"]
        wps = movement.get("waypoints")
        if not isinstance(wps, list) or not wps:
            raise ScenarioError("movement.waypoints must be a non-empty list of [x, y] pairs")
        for wp in wps:
            if not (isinstance(wp, list) and len(wp) == 2):
                raise ScenarioError(f"waypoint {wp!r} is not an [x, y] pair")
        shape = config["shape"]
        kind = shape.get("kind", "custom")
        if kind == "custom":
            if "theta_targets" not in shape or "dist_targets" not in shape or "d_sp" not in shape:
                raise ScenarioError("custom shapes need explicit theta_targets, dist_targets, d_sp")
    elif "shape" in config or "movement" in config:
        _check_keys(config.get("shape", {}), _SHAPE_KEYS, f"{origin}.shape")
        _check_keys(config.get("movement", {}), _MOVEMENT_KEYS, f"{origin}.movement")


def load_scenario(path: str | Path, overrides: list[str] | None = None) -> Scenario:
    """Load and validate a scenario file, applying any --set overrides."""
    p = Path(path)
    if not p.exists():
        builtin = builtin_scenario_path(p.stem if p.suffix else str(path))
        if builtin is not None:
            p = builtin
        else:
            raise ScenarioError(f"scenario file {path} does not exist and is not a built-in name")
    try:
        config = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ScenarioError(f"{p}: invalid YAML: {exc}") from exc
    if not isinstance(config, dict):
        raise ScenarioError(f"{p}: scenario must be a mapping at top level")
    if overrides:
        config = apply_overrides(config, overrides)
    validate_config(config, origin=p.name)
    name = config.get("name", p.stem)
    return Scenario(name=str(name), config=config)


def builtin_scenario_path(name: str) -> Path | None:
    """Resolve a bare name like ``clover50`` against the shipped scenarios."""
    pkg = resources.files("swarmherd") / "scenarios" / f"{name}.yaml"
    try:
        if pkg.is_file():
            return Path(str(pkg))
    except OSError:
        return None
    return None


def list_builtin_scenarios() -> list[str]:
    pkg = resources.files("swarmherd") / "scenarios"
    return sorted(p.name[: -len(".yaml")] for p in pkg.iterdir() if p.name.endswith(".yaml"))


def build_world(scenario: Scenario, seed: int | None = None) -> World:
    """Assemble a ready-to-run world from a scenario.

    Waypoints flagged relative are resolved against the true initial worker
    COM: mission designers know where they dropped the swarm, so this is
    plan-time knowledge, not a runtime sensor.
    """
    cfg = scenario.config
    n_w = scenario.n_workers
    n_g = scenario.n_guides
    run_seed = scenario.seed if seed is None else seed

    engine_params = EngineParams(**cfg.get("engine", {}))
    worker_params = WorkerParams(**cfg.get("worker", {}))
    gains = WorkerGains(**cfg.get("gains", {}))
    potential = PotentialParams(**cfg.get("potential", {}))

    init = cfg.get("init", {})
    positions = None
    worker_region = None
    guide_region = None
    if "positions" in init:
        positions = np.asarray(init["positions"], dtype=np.float64)
    else:
        if "worker_region" in init:
            worker_region = tuple(float(v) for v in init["worker_region"])
        elif "worker_density" in init:
            density = float(init["worker_density"])
            if density <= 0:
                raise ScenarioError("init.worker_density must be positive")
            half = math.sqrt(n_w / density) / 2.0
            worker_region = (-half, half, -half, half)
        if "guide_region" in init:
            guide_region = tuple(float(v) for v in init["guide_region"])
        elif worker_region is not None:
            margin = float(init.get("guide_margin", 1.0))
            guide_region = (
                worker_region[0] - margin,
                worker_region[1] + margin,
                worker_region[2] - margin,
                worker_region[3] + margin,
            )

    guide_cfg = None
    if n_g > 0:
        shape = dict(cfg["shape"])
        kind = shape.get("kind", "custom")
        if kind == "custom":
            thetas = tuple(float(t) for t in shape["theta_targets"])
            dists = tuple(float(d) for d in shape["dist_targets"])
            d_sp_raw = shape["d_sp"]
            d_sp: float | tuple[float, ...]
            if isinstance(d_sp_raw, list):
                d_sp = tuple(float(v) for v in d_sp_raw)
            else:
                d_sp = float(d_sp_raw)
        else:
            thetas, dists, d_sp = station_layout(
                kind,
                n_g,
                base_dist=float(shape.get("base_dist", 1.3)),
                press_depth=float(shape.get("press_depth", 0.9)),
                group_spread=float(shape.get("group_spread", 0.5)),
            )
        if len(thetas) < n_g:
            raise ScenarioError(f"{len(thetas)} stations for {n_g} guides")
        plan = ShapingPlan(
            theta_targets=thetas,
            dist_targets=dists,
            d_sp=d_sp,
            d_ss=float(shape.get("d_ss", 1.0)),
            v_s=float(shape.get("v_s", 0.05)),
            theta_tol=float(shape.get("theta_tol", 0.01)),
            dist_tol=float(shape.get("dist_tol", 0.45)),
            exit_offset=float(shape.get("exit_offset", 1.1)),
        )
        movement_cfg = cfg["movement"]
        waypoints = tuple(Vec2(float(x), float(y)) for x, y in movement_cfg["waypoints"])
        movement = MovementPlan(
            waypoints=waypoints,
            arrival_tol=float(movement_cfg.get("arrival_tol", 1.0)),
            alpha_g=float(movement_cfg.get("alpha_g", 1.0)),
            beta_g=float(movement_cfg.get("beta_g", 1.0)),
            gamma_g=float(movement_cfg.get("gamma_g", 1.0)),
            com_standoff=float(movement_cfg.get("com_standoff", 1.05)),
            press_bias=float(movement_cfg.get("press_bias", 0.0)),
        )
        guide_knobs = cfg.get("guide", {})
        guide_cfg = GuideConfig(
            plan=plan,
            movement=movement,
            guide_roster=tuple(range(n_w, n_w + n_g)),
            worker_params=worker_params,
            potential=potential,
            v_max=engine_params.v_max,
            setup_speed=float(guide_knobs.get("setup_speed", 0.25)),
            quorum_rounds=int(guide_knobs.get("quorum_rounds", 3)),
            gcom_period=int(guide_knobs.get("gcom_period", 10)),
            rigid_fov=float(movement_cfg.get("rigid_fov", 1.4)),
        )

    world = init_world(
        n_w,
        n_g,
        run_seed,
        params=engine_params,
        worker_params=worker_params,
        gains=gains,
        potential=potential,
        guide_cfg=guide_cfg,
        worker_region=worker_region,
        guide_region=guide_region,
        positions=positions,
    )

    if n_g > 0 and cfg["movement"].get("waypoints_relative", False) and n_w > 0:
        com = world.pos[:n_w].mean(axis=0)
        shifted = tuple(Vec2(wp.x + float(com[0]), wp.y + float(com[1])) for wp in guide_cfg.movement.waypoints)
        world.guide_cfg = replace(
            guide_cfg, movement=replace(guide_cfg.movement, waypoints=shifted)
        )

    follow = float(cfg.get("guide", {}).get("follow_distance", 0.95))
    for rt in world.guide_runtimes.values():
        rt.efs.follow_distance = follow
    return world
