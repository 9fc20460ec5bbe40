from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml
from dotenv import load_dotenv

from .errors import ConfigurationError

# Resolve project root (repo root)
PROJECT_ROOT = Path(__file__).resolve().parents[2]
CONFIG_DIR = PROJECT_ROOT / "config"


# Load environment
load_dotenv(PROJECT_ROOT / ".env", override=False)


# Runtime
MMRL_THREADS = max(1, int(os.getenv("MMRL_THREADS", "1")))
MMRL_LOG_LEVEL = os.getenv("MMRL_LOG_LEVEL", "INFO")
MMRL_RUNS_DIR = Path(os.getenv("MMRL_RUNS_DIR", str(PROJECT_ROOT / "runs")))


@dataclass(frozen=True)
class ModelConfig:
    feature_hidden: tuple[int, ...] = (128, 128)
    lora_rank: int = 8
    embed: int = 64
    heads: int = 2
    blocks: int = 2
    ff_width: int = 256
    critic_hidden: tuple[int, ...] = (128, 128)

    def __post_init__(self) -> None:
        if not self.feature_hidden:
            raise ConfigurationError("feature net needs a hidden layer", key="model.feature_hidden")
        if not 1 <= self.lora_rank <= self.feature_hidden[-1]:
            raise ConfigurationError(
                f"rank must lie in [1, {self.feature_hidden[-1]}]", key="model.lora_rank"
            )
        if self.embed % self.heads:
            raise ConfigurationError("embed must be divisible by heads", key="model.embed")


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 500_000
    envs: int = 128
    minibatches: int = 8
    epochs: int = 4
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    lr: float = 6e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-5
    nmd_des_min: float = 0.05
    nmd_des_max: float = 2.0
    single_query: bool = False
    freeze_alpha: bool = False
    alpha_probe_obs: int = 16
    alpha_floor: float = 1e-6
    alpha_cap: float = 1e3
    alpha_ema_decay: float = 0.99
    seed: int = 0

    def __post_init__(self) -> None:
        positive = {
            "total_steps": self.total_steps,
            "envs": self.envs,
            "minibatches": self.minibatches,
            "epochs": self.epochs,
            "gamma": self.gamma,
            "lr": self.lr,
            "max_grad_norm": self.max_grad_norm,
            "alpha_probe_obs": self.alpha_probe_obs,
            "alpha_floor": self.alpha_floor,
            "alpha_cap": self.alpha_cap,
            "adam_eps": self.adam_eps,
        }
        for name, value in positive.items():
            if value <= 0:
                raise ConfigurationError("must be positive", key=f"train.{name}")
        if not 0.0 < self.clip < 1.0:
            raise ConfigurationError("clip must lie in (0, 1)", key="train.clip")
        if not 0.0 < self.nmd_des_min <= self.nmd_des_max:
            raise ConfigurationError(
                "need 0 < nmd_des_min <= nmd_des_max", key="train.nmd_des_min"
            )


@dataclass(frozen=True)
class EvalConfig:
    episodes: int = 10
    nmd_des: float = 0.5
    perturb: str = ""
    seed: int = 1000


@dataclass(frozen=True)
class RunConfig:
    task: Any = None
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict[str, dict[str, Any]]:
        return {
            name: _plain(dataclasses.asdict(getattr(self, name)))
            for name in ("task", "model", "train", "eval")
        }


KEY_DOCS: dict[str, str] = {
    "task.task": "dispersion | pressure_plate | wind_flocking (applies that task's preset first)",
    "task.agents": "team size",
    "task.goals": "goal count (dispersion only; other tasks fix their own)",
    "task.horizon": "steps per episode",
    "task.max_speed": "arena units per step at capability 1",
    "task.drag": "velocity retention per step",
    "task.wind": "wind strength (wind_flocking)",
    "task.capabilities": "per-agent capability scalars, padded with 1.0",
    "task.goal_reward": "reward for a first goal visit (dispersion)",
    "task.completion_bonus": "team reward on completion",
    "task.distance_weight": "weight of the distance-to-objective penalty (pressure_plate)",
    "task.progress_weight": "weight of progress towards the waypoint (wind_flocking)",
    "task.cohesion_weight": "weight of the spread penalty (wind_flocking)",
    "task.energy_weight": "weight of the upwind effort cost (wind_flocking)",
    "task.door_half_width": "half width of the door gap (pressure_plate)",
    "task.shield_factor": "wind fraction felt inside a shielding cone",
    "task.shield_range": "shielding cone length",
    "task.shield_half_angle": "shielding cone half angle, degrees",
    "task.seed": "ignored; seeds come from train.seed / eval.seed",
    "model.feature_hidden": "hidden widths of the feature net (last one is d)",
    "model.lora_rank": "adapter rank r, 1 <= r <= d",
    "model.embed": "hypernetwork embedding width",
    "model.heads": "attention heads per block",
    "model.blocks": "attention blocks",
    "model.ff_width": "attention feed-forward width",
    "model.critic_hidden": "hidden widths of the centralised critic",
    "train.total_steps": "environment steps to train for",
    "train.envs": "parallel environments",
    "train.minibatches": "minibatches per epoch (split over timesteps)",
    "train.epochs": "passes over each rollout",
    "train.gamma": "discount",
    "train.gae_lambda": "GAE lambda",
    "train.clip": "PPO ratio clip",
    "train.entropy_coef": "entropy bonus weight",
    "train.value_coef": "value loss weight",
    "train.max_grad_norm": "global gradient norm clamp",
    "train.lr": "Adam step size",
    "train.adam_beta1": "Adam first-moment decay",
    "train.adam_beta2": "Adam second-moment decay",
    "train.adam_eps": "Adam stabiliser",
    "train.nmd_des_min": "lower end of the log-uniform diversity target range",
    "train.nmd_des_max": "upper end of the log-uniform diversity target range",
    "train.single_query": "query the hypernetwork only at episode start",
    "train.freeze_alpha": "treat alpha as a constant in the policy gradient",
    "train.alpha_probe_obs": "observations per step used to measure diversity",
    "train.alpha_floor": "floor on the measured diversity when computing alpha",
    "train.alpha_cap": "upper bound on alpha",
    "train.alpha_ema_decay": "decay of the stored alpha average used by evaluation",
    "train.seed": "training seed",
    "eval.episodes": "evaluation episodes",
    "eval.nmd_des": "diversity target during evaluation",
    "eval.perturb": "perturbation spec, e.g. remove:first_on_plate2",
    "eval.seed": "first evaluation episode seed",
}


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _section_classes() -> dict[str, type]:
    from .envs.core import TaskConfig

    return {"task": TaskConfig, "model": ModelConfig, "train": TrainConfig, "eval": EvalConfig}


def describe_keys() -> list[tuple[str, Any, str]]:
    rows = []
    for section, cls in _section_classes().items():
        defaults = cls()
        for f in dataclasses.fields(cls):
            key = f"{section}.{f.name}"
            rows.append((key, _plain(getattr(defaults, f.name)), KEY_DOCS.get(key, "")))
    return rows


def _key_lines(node: yaml.Node | None) -> dict[str, int]:
    """1-based line of every `section` and `section.key` in a composed document."""
    lines: dict[str, int] = {}
    if not isinstance(node, yaml.MappingNode):
        return lines
    for key_node, value_node in node.value:
        section = str(key_node.value)
        lines[section] = key_node.start_mark.line + 1
        if isinstance(value_node, yaml.MappingNode):
            for sub_key, _ in value_node.value:
                lines[f"{section}.{sub_key.value}"] = sub_key.start_mark.line + 1
    return lines


def _coerce(value: Any, hint: Any, key: str, line: int | None) -> Any:
    def bad(expected: str) -> ConfigurationError:
        return ConfigurationError(f"expected {expected}, got {value!r}", key=key, line=line)

    origin = typing.get_origin(hint)
    if origin in (tuple, list):
        if not isinstance(value, list):
            raise bad("a list")
        inner = typing.get_args(hint)[0]
        return tuple(_coerce(v, inner, key, line) for v in value)
    if hint is bool:
        if not isinstance(value, bool):
            raise bad("true or false")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise bad("an integer")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise bad("a number")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise bad("a string")
        return value
    return value


def _build_section(
    cls: type, values: dict[str, Any], section: str, lines: dict[str, int], base: dict[str, Any]
) -> Any:
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = dict(base)
    for name, value in values.items():
        key = f"{section}.{name}"
        if name not in known:
            raise ConfigurationError("unknown key", key=key, line=lines.get(key))
        kwargs[name] = _coerce(value, hints[name], key, lines.get(key))
    try:
        return cls(**kwargs)
    except ConfigurationError as exc:
        if exc.key is not None and exc.line is None and exc.key in lines:
            raise ConfigurationError(
                str(exc).rsplit(" (key", 1)[0], key=exc.key, line=lines[exc.key]
            ) from exc
        raise


def build_run_config(data: dict[str, Any], lines: dict[str, int] | None = None) -> RunConfig:
    from .envs.core import TASKS

    lines = lines or {}
    if not isinstance(data, dict):
        raise ConfigurationError("a run config is a mapping of sections", key="<document>", line=1)
    classes = _section_classes()
    for section, values in data.items():
        if section not in classes:
            raise ConfigurationError(
                "unknown section", key=str(section), line=lines.get(str(section))
            )
        if values is not None and not isinstance(values, dict):
            raise ConfigurationError(
                "a section is a mapping of keys", key=str(section), line=lines.get(str(section))
            )

    task_values = data.get("task") or {}
    task_name = task_values.get("task", "dispersion")
    if task_name not in TASKS:
        raise ConfigurationError(
            f"unknown task '{task_name}'", key="task.task", line=lines.get("task.task")
        )
    preset = dict(TASKS[task_name].preset, task=task_name)

    sections = {}
    for section, cls in classes.items():
        base = preset if section == "task" else {}
        sections[section] = _build_section(cls, data.get(section) or {}, section, lines, base)
    return RunConfig(**sections)


def parse_run_config(text: str) -> RunConfig:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        problem = getattr(exc, "problem", None) or str(exc)
        raise ConfigurationError(
            f"YAML syntax error: {problem}",
            key="<document>",
            line=mark.line + 1 if mark is not None else None,
        ) from exc
    return build_run_config(data or {}, _key_lines(node))


def load_run_config(path: Path | str | None) -> RunConfig:
    if path is None:
        return build_run_config({})
    path = Path(path)
    # bare names resolve to the shipped configs, e.g. `mmrl train pressure_plate`
    if not path.exists() and (CONFIG_DIR / f"{path}.yml").exists():
        path = CONFIG_DIR / f"{path}.yml"
    if not path.exists():
        raise ConfigurationError(
            f"config file {path} does not exist", key="<document>", line=0
        )
    return parse_run_config(path.read_text(encoding="utf-8"))
