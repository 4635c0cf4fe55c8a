"""Scenario configuration: INI files with one section per subsystem.

Relative paths inside a config file resolve against the file's directory.
Shipped presets live in ``mindstack/presets`` and can be referenced by name.
"""
from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

from .control import PFConfig, StanleyGains
from .training import E2EConfig
from .vehicle import VehicleParams
from .world import TRACK_KINDS, SensorConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MapSource:
    kind: str | None = "oval"        # generated track kind, or None when loading a PGM
    scale: float = 1.0
    resolution: float = 0.1
    width: float = 2.2
    pgm: Path | None = None
    meta: Path | None = None
    waypoints: Path | None = None    # waypoint CSV; generated centerline when None
    velocity: float = 2.0


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 40
    lr: float = 1e-3
    batch_size: int = 64
    augment: int = 10
    prev_sigma_xy: float = 0.30
    prev_sigma_theta: float = 0.20
    checkpoint: Path | None = None


@dataclass(frozen=True)
class BaselineConfig:
    lookahead: float = 1.0
    ftg_bubble: float = 0.4
    ftg_threshold: float = 2.5
    pf: PFConfig = field(default_factory=PFConfig)


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "scenario"
    seed: int = 0
    map: MapSource = MapSource()
    sensor: SensorConfig = SensorConfig()
    noise_sigma: float = 0.25
    vehicle: VehicleParams = VehicleParams()
    pretrain: PretrainConfig = PretrainConfig()
    e2e: E2EConfig = E2EConfig()
    gains: tuple = (1.8, 1.3)
    baselines: BaselineConfig = BaselineConfig()
    source: Path | None = None

    def stanley_gains(self) -> StanleyGains:
        return StanleyGains(*self.gains)

    def with_seed(self, seed: int) -> "ScenarioConfig":
        return replace(self, seed=seed, e2e=replace(self.e2e, seed=seed))

    def with_laps(self, laps: int) -> "ScenarioConfig":
        return replace(self, e2e=replace(self.e2e, laps=laps, eval_laps=laps))

    def validate(self) -> None:
        """Fail fast: referenced files must exist before anything runs."""
        m = self.map
        if m.pgm is None and m.kind not in TRACK_KINDS:
            raise ConfigError(f"map kind must be one of {TRACK_KINDS} or a pgm path is required")
        for label, p in (("map pgm", m.pgm), ("map meta", m.meta), ("waypoints", m.waypoints)):
            if p is not None and not Path(p).is_file():
                raise ConfigError(f"{label} file not found: {p}")
        if m.pgm is not None and m.waypoints is None:
            raise ConfigError("a pgm map needs a waypoint CSV")
        if self.noise_sigma < 0:
            raise ConfigError("noise sigma must be nonnegative")


PRESETS = ("scenario1", "scenario2", "scenario3", "scenario4", "scenario5", "scenario6",
           "oval", "hairpin", "chicane")


def preset_path(name: str) -> Path:
    return Path(str(resources.files("mindstack") / "presets" / f"{name}.ini"))


def _path(sec, key, base: Path):
    raw = sec.get(key, "").strip()
    if not raw:
        return None
    p = Path(raw)
    return p if p.is_absolute() else (base / p)


def _bool(sec, key, default):
    return sec.getboolean(key, fallback=default)


def parse_config(text: str, base: Path = Path("."), source: Path | None = None) -> ScenarioConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    get = lambda name: cp[name] if cp.has_section(name) else {}  # noqa: E731
    d = ScenarioConfig()
    try:
        s = get("scenario")
        seed = int(s.get("seed", d.seed))
        name = s.get("name", source.stem if source else d.name)

        m = get("map")
        pgm = _path(m, "pgm", base) if m else None
        mp = MapSource(
            kind=None if pgm is not None else m.get("kind", d.map.kind),
            scale=float(m.get("scale", d.map.scale)),
            resolution=float(m.get("resolution", d.map.resolution)),
            width=float(m.get("width", d.map.width)),
            pgm=pgm,
            meta=_path(m, "meta", base) if m else None,
            waypoints=_path(m, "waypoints", base) if m else None,
            velocity=float(m.get("velocity", d.map.velocity)),
        )

        se = get("sensor")
        sensor = SensorConfig(n_beams=int(se.get("n_beams", d.sensor.n_beams)),
                              fov=math.radians(float(se.get("fov_deg", math.degrees(d.sensor.fov)))),
                              max_range=float(se.get("max_range", d.sensor.max_range)))
        noise = float(se.get("noise_sigma", d.noise_sigma))

        ve = get("vehicle")
        vehicle = VehicleParams(wheelbase=float(ve.get("wheelbase", d.vehicle.wheelbase)),
                                delta_max=float(ve.get("delta_max", d.vehicle.delta_max)),
                                dt=float(ve.get("dt", d.vehicle.dt)))

        pt = get("pretrain")
        pre = PretrainConfig(epochs=int(pt.get("epochs", d.pretrain.epochs)),
                             lr=float(pt.get("lr", d.pretrain.lr)),
                             batch_size=int(pt.get("batch_size", d.pretrain.batch_size)),
                             augment=int(pt.get("augment", d.pretrain.augment)),
                             prev_sigma_xy=float(pt.get("prev_sigma_xy", d.pretrain.prev_sigma_xy)),
                             prev_sigma_theta=float(pt.get("prev_sigma_theta", d.pretrain.prev_sigma_theta)),
                             checkpoint=_path(pt, "checkpoint", base) if pt else None)

        tr = get("training")
        de = d.e2e
        laps = int(tr.get("laps", de.laps))
        e2e = E2EConfig(lr=float(tr.get("lr", de.lr)), alpha=float(tr.get("alpha", de.alpha)),
                        beta=float(tr.get("beta", de.beta)), gamma=float(tr.get("gamma", de.gamma)),
                        laps=laps, eval_laps=int(tr.get("eval_laps", laps)),
                        train_loc=_bool(tr, "train_loc", de.train_loc) if tr else de.train_loc,
                        train_stanley=_bool(tr, "train_stanley", de.train_stanley) if tr else de.train_stanley,
                        stanley_lr=float(tr.get("stanley_lr", de.stanley_lr)),
                        loc_reference=tr.get("loc_reference", de.loc_reference), seed=seed)

        co = get("control")
        gains = (float(co.get("k_e", d.gains[0])), float(co.get("k_h", d.gains[1])))
        pf = PFConfig(n_particles=int(co.get("pf_particles", PFConfig.n_particles)),
                      n_beams=int(co.get("pf_beams", PFConfig.n_beams)),
                      sigma_hit=float(co.get("pf_sigma_hit", PFConfig.sigma_hit)))
        base_cfg = BaselineConfig(lookahead=float(co.get("lookahead", d.baselines.lookahead)),
                                  ftg_bubble=float(co.get("ftg_bubble", d.baselines.ftg_bubble)),
                                  ftg_threshold=float(co.get("ftg_threshold", d.baselines.ftg_threshold)),
                                  pf=pf)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid config value: {exc}") from None
    return ScenarioConfig(name=name, seed=seed, map=mp, sensor=sensor, noise_sigma=noise,
                          vehicle=vehicle, pretrain=pre, e2e=e2e, gains=gains,
                          baselines=base_cfg, source=source)


def load_config(spec: str | Path | None) -> ScenarioConfig:
    """Load a config file, or a preset by name; ``None`` gives the oval preset."""
    if spec is None:
        spec = "oval"
    p = Path(spec)
    if not p.is_file():
        if str(spec) in PRESETS:
            p = preset_path(str(spec))
        else:
            raise ConfigError(f"config not found: {spec} (presets: {', '.join(PRESETS)})")
    cfg = parse_config(p.read_text(), base=p.resolve().parent, source=p)
    cfg.validate()
    return cfg


def dump_config(cfg: ScenarioConfig) -> str:
    """Effective config as INI text; parsing it back yields an equal config."""
    cp = configparser.ConfigParser()
    cp["scenario"] = {"name": cfg.name, "seed": str(cfg.seed)}
    m = cfg.map
    sec = {"scale": repr(m.scale), "resolution": repr(m.resolution), "width": repr(m.width),
           "velocity": repr(m.velocity)}
    if m.pgm is not None:
        sec["pgm"] = str(m.pgm)
        if m.meta is not None:
            sec["meta"] = str(m.meta)
    else:
        sec["kind"] = m.kind
    if m.waypoints is not None:
        sec["waypoints"] = str(m.waypoints)
    cp["map"] = sec
    cp["sensor"] = {"n_beams": str(cfg.sensor.n_beams), "fov_deg": repr(math.degrees(cfg.sensor.fov)),
                    "max_range": repr(cfg.sensor.max_range), "noise_sigma": repr(cfg.noise_sigma)}
    cp["vehicle"] = {f.name: repr(getattr(cfg.vehicle, f.name)) for f in fields(cfg.vehicle)}
    p = cfg.pretrain
    cp["pretrain"] = {"epochs": str(p.epochs), "lr": repr(p.lr), "batch_size": str(p.batch_size),
                      "augment": str(p.augment), "prev_sigma_xy": repr(p.prev_sigma_xy),
                      "prev_sigma_theta": repr(p.prev_sigma_theta)}
    if p.checkpoint is not None:
        cp["pretrain"]["checkpoint"] = str(p.checkpoint)
    e = cfg.e2e
    cp["training"] = {"lr": repr(e.lr), "alpha": repr(e.alpha), "beta": repr(e.beta),
                      "gamma": repr(e.gamma), "laps": str(e.laps), "eval_laps": str(e.eval_laps),
                      "train_loc": str(e.train_loc).lower(),
                      "train_stanley": str(e.train_stanley).lower(),
                      "stanley_lr": repr(e.stanley_lr), "loc_reference": e.loc_reference}
    b = cfg.baselines
    cp["control"] = {"k_e": repr(cfg.gains[0]), "k_h": repr(cfg.gains[1]),
                     "lookahead": repr(b.lookahead), "ftg_bubble": repr(b.ftg_bubble),
                     "ftg_threshold": repr(b.ftg_threshold), "pf_particles": str(b.pf.n_particles),
                     "pf_beams": str(b.pf.n_beams), "pf_sigma_hit": repr(b.pf.sigma_hit)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
