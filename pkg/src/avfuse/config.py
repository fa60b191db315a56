"""Run configuration: JSON file + dotted-key overrides over documented defaults.

Unknown keys are rejected, every value is type-checked against the default,
and the fully resolved config is echoed into the run directory so a run can
be reproduced (or evaluated) from its own `config.json`.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

from .data import SynthSpec
from .dropout import DropoutPolicy
from .fusion import FusionKind, ModelConfig
from .train import OptimConfig

DEFAULTS = {
    "task": "classification",
    "seed": 1,
    "out": "runs/run",
    "data": {
        "path": None,          # load a saved dataset instead of synthesizing
        "seed": None,          # dataset seed; defaults to the top-level seed
        "classes": 4,
        "n_audio": 64,
        "d_audio": 10,
        "n_vision": 15,
        "d_vision": 35,
        "strength_audio": 1.0,
        "strength_vision": 1.0,
        "redundancy": 0.7,
        "noise_std": 1.0,
        "within_std": 0.5,
        "group_scale": 0.3,
        "latent_dim": 16,
        "groups": 24,
        "train": 2000,
        "val": 400,
        "test": 400,
    },
    "fusion": {
        "kind": "IA",          # LT | IT | IA | TAV | TVA
        "heads": 1,
        "latent": 64,
        "qkv_bias": False,
    },
    "dropout": {
        "variant": "none",     # none | hard | soft | noise
        "p_full": 1.0,
        "p_drop_audio": 0.0,
        "p_drop_vision": 0.0,
        "p_soft": 0.0,
    },
    "optim": {
        "lr": 0.04,
        "momentum": 0.9,
        "weight_decay": 1e-3,
        "batch_size": 32,
        "epochs": 100,
        "plateau_patience": 10,
        "plateau_factor": 0.1,
        "plateau_tol": 1e-4,
    },
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict, path: str = ""):
    for key, value in override.items():
        here = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {here!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {here!r} expects a section, got {value!r}")
            _merge(base[key], value, here + ".")
        else:
            base[key] = _check_type(here, base[key], value)


def _check_type(key: str, default, value):
    if default is None or value is None:
        if value is None or isinstance(value, (str, int, float)) and not isinstance(value, bool):
            return value
        raise ConfigError(f"config key {key!r} expects a string, number or null, got {value!r}")
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"config key {key!r} expects a boolean, got {value!r}")
        return value
    if isinstance(default, (int, float)):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {key!r} expects a number, got {value!r}")
        if isinstance(default, int):
            if float(value) != int(value):
                raise ConfigError(f"config key {key!r} expects an integer, got {value!r}")
            return int(value)
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"config key {key!r} expects a string, got {value!r}")
        return value
    raise ConfigError(f"config key {key!r} has unsupported default type")


def _apply_set(cfg: dict, assignment: str):
    if "=" not in assignment:
        raise ConfigError(f"--set needs key=value, got {assignment!r}")
    dotted, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = {}
    leaf = node
    parts = dotted.split(".")
    for part in parts[:-1]:
        leaf[part] = {}
        leaf = leaf[part]
    leaf[parts[-1]] = value
    _merge(cfg, node)


@dataclass
class RunConfig:
    raw: dict
    task: str
    seed: int
    out: Path
    data_path: str | None
    synth: SynthSpec
    model: ModelConfig
    policy: DropoutPolicy
    optim: OptimConfig

    @property
    def label(self) -> str:
        return f"{self.model.fusion.value}{self.model.heads}/{self.policy.variant}"


def parse_config(path: str | None = None, sets: list[str] | None = None,
                 seed: int | None = None, out: str | None = None) -> RunConfig:
    """Resolve defaults <- file <- --set overrides <- --seed/--out flags."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        file_path = Path(path)
        if not file_path.exists():
            raise ConfigError(f"config file not found: {file_path}")
        try:
            loaded = json.loads(file_path.read_text()) if file_path.read_text().strip() else {}
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {file_path} is not valid JSON: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {file_path} must hold a JSON object")
        _merge(cfg, loaded)
    for assignment in sets or []:
        _apply_set(cfg, assignment)
    if seed is not None:
        cfg["seed"] = int(seed)
    if out is not None:
        cfg["out"] = str(out)

    d = cfg["data"]
    data_seed = cfg["seed"] if d["seed"] is None else int(d["seed"])
    try:
        synth = SynthSpec(
            task=cfg["task"], classes=d["classes"],
            n_audio=d["n_audio"], d_audio=d["d_audio"],
            n_vision=d["n_vision"], d_vision=d["d_vision"],
            strength_audio=d["strength_audio"], strength_vision=d["strength_vision"],
            redundancy=d["redundancy"], noise_std=d["noise_std"],
            within_std=d["within_std"], group_scale=d["group_scale"],
            latent_dim=d["latent_dim"], groups=d["groups"],
            n_train=d["train"], n_val=d["val"], n_test=d["test"], seed=data_seed,
        )
        model = ModelConfig(
            fusion=FusionKind.parse(cfg["fusion"]["kind"]),
            heads=cfg["fusion"]["heads"], latent=cfg["fusion"]["latent"],
            task=cfg["task"], classes=d["classes"],
            d_audio=d["d_audio"], d_vision=d["d_vision"],
            qkv_bias=cfg["fusion"]["qkv_bias"],
        )
        policy = DropoutPolicy(
            variant=cfg["dropout"]["variant"], p_full=cfg["dropout"]["p_full"],
            p_drop_audio=cfg["dropout"]["p_drop_audio"],
            p_drop_vision=cfg["dropout"]["p_drop_vision"], p_soft=cfg["dropout"]["p_soft"],
        )
        optim = OptimConfig(
            lr=cfg["optim"]["lr"], momentum=cfg["optim"]["momentum"],
            weight_decay=cfg["optim"]["weight_decay"], batch_size=cfg["optim"]["batch_size"],
            epochs=cfg["optim"]["epochs"], plateau_patience=cfg["optim"]["plateau_patience"],
            plateau_factor=cfg["optim"]["plateau_factor"], plateau_tol=cfg["optim"]["plateau_tol"],
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e

    return RunConfig(raw=cfg, task=cfg["task"], seed=cfg["seed"], out=Path(cfg["out"]),
                     data_path=d["path"], synth=synth, model=model, policy=policy,
                     optim=optim)


def echo_config(cfg: RunConfig, directory: Path):
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.json").write_text(json.dumps(cfg.raw, indent=2) + "\n")
