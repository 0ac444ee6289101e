"""Pipeline configuration: a versioned TOML file with six sections.

Every key is optional; omitted keys take the defaults below, so an empty file
(or no file at all) is a valid configuration.  Unknown sections or keys are
rejected.  Any key can be overridden from the environment as
``MTDGPT_<SECTION>_<KEY>`` (case-insensitive), e.g. ``MTDGPT_GPT_EPOCHS=20``.

::

    version = 1

    [scenario]   # geometry, episode and reward settings
    arm_length = 60.0          # m, approach arm length
    lane_width = 4.0           # m
    zone_half_width = 10.0     # m, half side of the central conflict box
    right_turn_radius = 8.0    # m
    left_turn_radius = 9.0     # m
    exit_length = 20.0         # m, route length past the box
    sample_step = 0.5          # m, route polyline spacing
    horizon = 40               # decision steps per episode
    decision_dt = 1.0          # s
    physics_dt = 0.05          # s
    perception_range = 50.0    # m
    n_obs = 8                  # observation rows (ego + 7 neighbours)
    yield_horizon = 5.0        # s, HV conflict look-ahead
    yield_period = 5           # physics steps between HV yield re-checks
    ego_speed_min = 4.0        # m/s, initial ego speed range
    ego_speed_max = 8.0
    w_c = 1.0                  # collision penalty weight
    w_e = 1.0                  # efficiency weight
    w_a = 1.0                  # arrival weight

    [traffic]    # human-driven vehicles
    n_min = 2                  # HVs per episode, inclusive range
    n_max = 4
    min_gap = 10.0             # m, spawn spacing
    speed_min = 4.0            # m/s, initial HV speed range
    speed_max = 8.0
    style_min = 0.8            # driving-style multiplier range
    style_max = 1.2
    spawn_margin = 10.0        # m, kept free ahead of the ego
    idm_v0 = 8.0               # IDM desired speed, m/s
    idm_T = 1.5                # time headway, s
    idm_s0 = 2.0               # jam distance, m
    idm_a_max = 3.0            # m/s^2
    idm_b = 2.0                # comfortable deceleration, m/s^2
    idm_delta_exp = 4.0

    [expert]     # PPO training and expert data collection
    total_steps = 20000
    clip_eps = 0.2
    gamma = 0.99
    gae_lambda = 0.95
    rollout_length = 512
    minibatch_size = 64
    update_epochs = 4
    lr = 3e-4
    entropy_coef = 0.01
    value_coef = 0.5
    max_grad_norm = 0.5
    hidden = 64
    n_heads = 2
    feature_size = 128
    episodes = 300             # trajectories sampled per task
    keep_filter = "all"        # "all" or "successes"

    [gpt]
    n_layers = 3
    embed_dim = 128
    n_heads = 4
    context = 30
    dropout = 0.1
    epochs = 100
    steps_per_epoch = 10000
    batch_size = 64
    lr = 3e-4
    max_grad_norm = 1.0

    [eval]
    episodes = 100
    g1_scale = 1.05            # g1 = scale x mean successful expert return

    [paths]      # relative paths resolve against out_dir
    out_dir = "runs"
    experts = "experts"
    samples = "samples"
    dataset = "dataset.jsonl"
    gpt = "gpt"
    reports = "reports"
    traces = "traces"
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli

from .expert.ppo import ExpertConfig
from .gpt import GPTConfig
from .kinematics import ControllerGains, VehicleParams
from .sim.env import EnvConfig, RewardWeights
from .sim.geometry import ScenarioConfig
from .sim.traffic import IDMParams, TrafficConfig

CONFIG_VERSION = 1
ENV_PREFIX = "MTDGPT_"

_ENV_KEYS = ["horizon", "decision_dt", "physics_dt", "perception_range", "n_obs", "yield_horizon", "yield_period", "ego_speed_min", "ego_speed_max"]


def _scenario_defaults() -> dict:
    return {**asdict(ScenarioConfig()), **{k: getattr(EnvConfig(), k) for k in _ENV_KEYS}, **asdict(RewardWeights())}


def _traffic_defaults() -> dict:
    d = asdict(TrafficConfig())
    idm = d.pop("idm")
    return {**d, **{f"idm_{k}": v for k, v in idm.items()}}


DEFAULTS: dict[str, dict] = {
    "scenario": _scenario_defaults(),
    "traffic": _traffic_defaults(),
    "expert": {**asdict(ExpertConfig()), "episodes": 300, "keep_filter": "all"},
    "gpt": asdict(GPTConfig()),
    "eval": {"episodes": 100, "g1_scale": 1.05},
    "paths": {
        "out_dir": "runs",
        "experts": "experts",
        "samples": "samples",
        "dataset": "dataset.jsonl",
        "gpt": "gpt",
        "reports": "reports",
        "traces": "traces",
    },
}


class ConfigError(ValueError):
    pass


def _coerce(section: str, key: str, value, default):
    where = f"[{section}] {key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        return value
    raise ConfigError(f"{where} has unsupported type")


def _parse_env_value(text: str, default):
    if isinstance(default, bool):
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        return text
    if isinstance(default, int):
        try:
            return int(text)
        except ValueError:
            return text
    if isinstance(default, float):
        try:
            return float(text)
        except ValueError:
            return text
    return text


@dataclass
class PipelineConfig:
    scenario: dict = field(default_factory=lambda: dict(DEFAULTS["scenario"]))
    traffic: dict = field(default_factory=lambda: dict(DEFAULTS["traffic"]))
    expert: dict = field(default_factory=lambda: dict(DEFAULTS["expert"]))
    gpt: dict = field(default_factory=lambda: dict(DEFAULTS["gpt"]))
    eval: dict = field(default_factory=lambda: dict(DEFAULTS["eval"]))
    paths: dict = field(default_factory=lambda: dict(DEFAULTS["paths"]))
    source: str | None = None

    # ---------------------------------------------------------------- loading
    @classmethod
    def from_dict(cls, data: dict, environ: dict | None = None, source: str | None = None) -> "PipelineConfig":
        data = dict(data)
        version = data.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {version!r}; expected {CONFIG_VERSION}")
        unknown = set(data) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
        cfg = cls(source=source)
        for section, values in data.items():
            if not isinstance(values, dict):
                raise ConfigError(f"[{section}] must be a table")
            cfg._update(section, values)
        if environ is not None:
            cfg.apply_env(environ)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path | None = None, environ: dict | None = None) -> "PipelineConfig":
        """Read ``path`` (``None`` means all defaults) and apply env overrides."""
        environ = os.environ if environ is None else environ
        if path is None:
            return cls.from_dict({}, environ)
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        with open(path, "rb") as fh:
            try:
                data = tomli.load(fh)
            except tomli.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(data, environ, str(path))

    def _update(self, section: str, values: dict) -> None:
        table = getattr(self, section)
        defaults = DEFAULTS[section]
        for key, value in values.items():
            if key not in defaults:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            table[key] = _coerce(section, key, value, defaults[key])

    def apply_env(self, environ) -> None:
        for name, text in sorted(environ.items()):
            if not name.upper().startswith(ENV_PREFIX):
                continue
            rest = name[len(ENV_PREFIX):].lower()
            section, _, key = rest.partition("_")
            if section not in DEFAULTS:
                raise ConfigError(f"environment override {name}: unknown section {section!r}")
            match = [k for k in DEFAULTS[section] if k.lower() == key]
            if not match:
                raise ConfigError(f"environment override {name}: unknown key {key!r} in [{section}]")
            k = match[0]
            self._update(section, {k: _parse_env_value(text, DEFAULTS[section][k])})

    def validate(self) -> None:
        """Build every typed config once so bad values fail at load time."""
        self.env_config()
        self.expert_config()
        self.gpt_config()
        if self.expert["episodes"] < 1:
            raise ConfigError("[expert] episodes must be at least 1")
        if self.expert["keep_filter"] not in ("all", "successes"):
            raise ConfigError("[expert] keep_filter must be 'all' or 'successes'")
        if self.eval["episodes"] < 1:
            raise ConfigError("[eval] episodes must be at least 1")
        if not math.isfinite(self.eval["g1_scale"]) or self.eval["g1_scale"] <= 0:
            raise ConfigError("[eval] g1_scale must be positive")
        t = self.traffic
        if not 0 <= t["n_min"] <= t["n_max"]:
            raise ConfigError("[traffic] needs 0 <= n_min <= n_max")

    # ---------------------------------------------------------------- typed views
    def env_config(self) -> EnvConfig:
        sc = self.scenario
        scenario = ScenarioConfig(**{f.name: sc[f.name] for f in fields(ScenarioConfig)})
        reward = RewardWeights(**{f.name: sc[f.name] for f in fields(RewardWeights)})
        tr = dict(self.traffic)
        idm = IDMParams(**{k[4:]: tr.pop(k) for k in list(tr) if k.startswith("idm_")})
        traffic = TrafficConfig(**tr, idm=idm)
        return EnvConfig(
            scenario=scenario,
            traffic=traffic,
            vehicle=VehicleParams(),
            gains=ControllerGains(),
            reward=reward,
            **{k: sc[k] for k in _ENV_KEYS},
        )

    def expert_config(self) -> ExpertConfig:
        return ExpertConfig(**{f.name: self.expert[f.name] for f in fields(ExpertConfig)})

    def gpt_config(self) -> GPTConfig:
        return GPTConfig(**self.gpt)

    def path(self, key: str, out_dir: str | Path | None = None) -> Path:
        base = Path(out_dir if out_dir is not None else self.paths["out_dir"])
        if key == "out_dir":
            return base
        p = Path(self.paths[key])
        return p if p.is_absolute() else base / p

    # ---------------------------------------------------------------- output
    def as_dict(self) -> dict:
        return {"version": CONFIG_VERSION, **{s: dict(getattr(self, s)) for s in DEFAULTS}}

    def dumps(self) -> str:
        """Resolved configuration as TOML (round-trips through ``load``)."""
        lines = [f"version = {CONFIG_VERSION}"]
        for section in DEFAULTS:
            lines.append("")
            lines.append(f"[{section}]")
            for key, value in getattr(self, section).items():
                lines.append(f"{key} = {_toml_value(value)}")
        return "\n".join(lines) + "\n"


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        text = repr(value)
        return text if any(c in text for c in ".en") else text + ".0"
    return json.dumps(value)
