"""Scenario files and controller gain profiles."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import yaml

from ..model import bundled_models, load_model
from ..sim import DisturbanceSpec, ExternalWrench, Payload, TorqueScale


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GainProfile:
    """Controller gains and loop rates shared by a family of scenarios."""

    name: str
    omega0: float
    gamma: float
    maf_window: int
    Kp: float
    Kd: float
    mpc_rate: float
    theta_bound: float = 100.0
    Q1: float = 100.0
    Q2: float = 1.0


PROFILES = {
    "biped-sim": GainProfile("biped-sim", omega0=100.0, gamma=5e4, maf_window=7, Kp=15.0, Kd=0.5, mpc_rate=50.0),
    "quad-sim": GainProfile("quad-sim", omega0=350.0, gamma=6e5, maf_window=3, Kp=0.0, Kd=3.0, mpc_rate=20.0),
    "quad-exp": GainProfile("quad-exp", omega0=200.0, gamma=6e3, maf_window=5, Kp=0.0, Kd=3.0, mpc_rate=100.0),
}
VARIANTS = ("wbdrc", "standard")


@dataclass(frozen=True)
class Scenario:
    name: str
    robot: str
    gait: str
    duration: float
    profile: str
    command: dict = field(default_factory=dict)
    disturbance: DisturbanceSpec = field(default_factory=DisturbanceSpec)
    variant: str = "wbdrc"
    gait_start: float = 0.0
    seed: int = 0
    output: str = "out"
    mpc: dict = field(default_factory=dict)
    description: str = ""

    @property
    def height(self) -> float | None:
        return self.command.get("height")

    @property
    def gains(self) -> GainProfile:
        return PROFILES[self.profile]

    def with_variant(self, variant: str) -> "Scenario":
        if variant not in VARIANTS:
            raise ConfigError(f"unknown controller variant {variant!r}")
        return replace(self, variant=variant)


def _window(entry, key="window"):
    win = entry.get(key, [0.0, float("inf")])
    if len(win) != 2:
        raise ConfigError(f"{key} must be [start, stop]")
    return float(win[0]), float(win[1])


def _disturbances(raw) -> DisturbanceSpec:
    payloads, wrenches, scales = [], [], []
    for entry in raw or []:
        kind = entry.get("type")
        try:
            if kind == "payload":
                payloads.append(Payload(float(entry["mass_kg"]), entry.get("link", "base"), float(entry.get("start", 0.0))))
            elif kind == "wrench":
                w = [float(v) for v in entry["wrench"]]
                if len(w) != 6:
                    raise ConfigError("wrench needs six components [Fx, Fy, Fz, Tx, Ty, Tz]")
                start, stop = _window(entry)
                wrenches.append(ExternalWrench(tuple(w), start, stop))
            elif kind == "torque_scale":
                start, stop = _window(entry)
                scales.append(TorqueScale(dict(entry["factors"]), start, stop))
            else:
                raise ConfigError(f"unknown disturbance type {kind!r}")
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed {kind} disturbance: {exc}") from exc
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc
    return DisturbanceSpec(tuple(payloads), tuple(wrenches), tuple(scales))


def parse_scenario(data: dict, name: str = "scenario") -> Scenario:
    if not isinstance(data, dict):
        raise ConfigError("scenario file must hold a mapping")
    robot = data.get("robot")
    if robot not in bundled_models():
        raise ConfigError(f"unknown robot profile {robot!r}")
    profile = data.get("profile", "biped-sim" if robot == "biped12" else "quad-sim")
    if profile not in PROFILES:
        raise ConfigError(f"unknown gains profile {profile!r}")
    try:
        duration = float(data.get("duration", 0.0))
    except (TypeError, ValueError) as exc:
        raise ConfigError("duration must be a number") from exc
    if not duration > 0.0:
        raise ConfigError("duration must be positive")
    gait = data.get("gait", "stand")
    if gait not in ("stand", "step-in-place", "trot", "walk"):
        raise ConfigError(f"unknown gait {gait!r}")
    variant = data.get("variant", "wbdrc")
    if variant not in VARIANTS:
        raise ConfigError(f"unknown controller variant {variant!r}")
    command = dict(data.get("command") or {})
    unknown = set(command) - {"vx", "vy", "yaw_rate", "height"}
    if unknown:
        raise ConfigError(f"unknown command keys {sorted(unknown)}")
    dist = _disturbances(data.get("disturbances"))
    scen = Scenario(name=data.get("name", name), robot=robot, gait=gait, duration=duration, profile=profile,
                    command=command, disturbance=dist, variant=variant,
                    gait_start=float(data.get("gait_start", 0.0)), seed=int(data.get("seed", 0)),
                    output=str(data.get("output", "out")), mpc=dict(data.get("mpc") or {}),
                    description=str(data.get("description", "")))
    return _resolve_links(scen)


def _resolve_links(scen: Scenario) -> Scenario:
    """Map the ``base`` alias to the root link and check every referenced name."""
    model = load_model(scen.robot)
    payloads = []
    for p in scen.disturbance.payloads:
        link = model.link_names[0] if p.link == "base" else p.link
        if link not in model.link_names:
            raise ConfigError(f"payload link {p.link!r} not in {scen.robot}")
        payloads.append(replace(p, link=link))
    for ts in scen.disturbance.torque_scales:
        for joint in ts.factors:
            if joint not in model.actuated_names:
                raise ConfigError(f"torque-scaled joint {joint!r} not in {scen.robot}")
    return replace(scen, disturbance=replace(scen.disturbance, payloads=tuple(payloads)))


def load_scenario(path) -> Scenario:
    path = Path(path)
    if not path.exists():
        bundled = bundled_scenarios()
        if str(path) in bundled:
            path = bundled[str(path)]
        else:
            raise ConfigError(f"no scenario file {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return parse_scenario(data, path.stem)


def bundled_scenarios() -> dict:
    root = resources.files("wbdrc.cli") / "scenarios"
    return {Path(p.name).stem: Path(str(p)) for p in sorted(root.iterdir(), key=lambda p: p.name)
            if p.name.endswith(".yaml")}
