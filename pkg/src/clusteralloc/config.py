"""Run configuration: one strict JSON document driving every pipeline stage.

Unknown keys are rejected by name (silent hyperparameter typos are the
dominant failure mode in staged pipelines), values are type-checked, and
the fully resolved config round-trips deterministically for hashing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError

# schema: section -> key -> (type tag, default). Type tags: int, float, str,
# bool, float_list, int_list, str_list.
_SCHEMA: dict[str, dict[str, tuple[str, object]]] = {
    "": {
        "seed": ("int", 0),
        "out_dir": ("str", "runs/out"),
    },
    "gen": {
        "scenario": ("str", "default"),
        "n_train": ("int", 20_000),
        "n_test": ("int", 40_000),
        "d": ("int", 10),
        "m": ("int", 4),
        "g": ("int", 4),
        "kind": ("str", "rct"),
        "sigma_noise": ("float", 1.0),
        "contamination": ("float", 0.0),
        "contamination_scale": ("float", 10.0),
        "obs_bias": ("float", 0.0),
        "signal_radius": ("float", 3.0),
    },
    "repnet": {
        "head": ("str", "concat"),
        "d_z": ("int", 32),
        "alpha": ("float", 1.0),
        "hidden": ("int_list", [64]),
        "repeat_dim": ("int", 8),
        "learning_rate": ("float", 0.05),
        "epochs": ("int", 30),
        "batch_size": ("int", 512),
        "weight_decay": ("float", 0.0),
    },
    "cluster": {
        "k": ("int", 100),
        "max_iters": ("int", 100),
        "n_init": ("int", 4),
    },
    "solver": {
        "lambda": ("float", 0.1),
        "kappa": ("float", 0.1),
        "budgets_per_individual": ("float_list", [0.05, 0.1, 0.2, 0.3, 0.4]),
        "method": ("str", "exact_dp"),
    },
    "distill": {
        "hidden": ("int_list", [64]),
        "learning_rate": ("float", 0.1),
        "epochs": ("int", 40),
        "batch_size": ("int", 512),
    },
    "baselines": {
        "policies": ("str_list", ["heuristic", "lagrangian", "dfl"]),
        "hidden": ("int_list", [64]),
        "learning_rate": ("float", 0.05),
        "epochs": ("int", 30),
        "batch_size": ("int", 512),
        "dfl_lambda_list": ("float_list", [0.1, 0.5, 1.0]),
        "dfl_temperature": ("float", 0.5),
        "dfl_theta_d": ("float", 0.3),
        "dfl_theta_r": ("float", 1.0),
        "dfl_theta_c": ("float", 1.0),
    },
    "eval": {
        "estimator": ("str", "matched"),
    },
}

_SCALAR_CHECKS = {
    "int": lambda v: isinstance(v, int) and not isinstance(v, bool),
    "float": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
    "str": lambda v: isinstance(v, str),
    "bool": lambda v: isinstance(v, bool),
}


def _coerce(tag: str, value, path: str):
    if tag in _SCALAR_CHECKS:
        if not _SCALAR_CHECKS[tag](value):
            raise ConfigError(f"{path}: expected {tag}, got {value!r}")
        return float(value) if tag == "float" else value
    elem = tag.removesuffix("_list")
    if not isinstance(value, list):
        raise ConfigError(f"{path}: expected a list of {elem}, got {value!r}")
    return [_coerce(elem, v, f"{path}[{i}]") for i, v in enumerate(value)]


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved configuration (defaults applied, everything typed)."""

    values: dict
    source_path: str | None = None

    def __getitem__(self, dotted: str):
        section, _, key = dotted.partition(".")
        if not key:
            return self.values[section]
        return self.values[section][key]

    @property
    def seed(self) -> int:
        return self.values["seed"]

    @property
    def out_dir(self) -> Path:
        return Path(self.values["out_dir"])

    def canonical_json(self) -> str:
        return json.dumps(self.values, sort_keys=True, indent=2) + "\n"


def parse_config(doc: dict, source_path: str | None = None) -> RunConfig:
    """Validate a raw config dict against the schema (strict, typed)."""
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    values: dict = {}
    for key, value in doc.items():
        if key in _SCHEMA[""]:
            values[key] = _coerce(_SCHEMA[""][key][0], value, key)
        elif key in _SCHEMA and key != "":
            if not isinstance(value, dict):
                raise ConfigError(f"{key}: expected a section object")
            section = {}
            for sub, sub_value in value.items():
                if sub not in _SCHEMA[key]:
                    raise ConfigError(f"unknown key '{key}.{sub}'")
                section[sub] = _coerce(_SCHEMA[key][sub][0], sub_value, f"{key}.{sub}")
            values[key] = section
        else:
            raise ConfigError(f"unknown key '{key}'")
    # fill defaults
    for key, (tag, default) in _SCHEMA[""].items():
        values.setdefault(key, default)
    for section, keys in _SCHEMA.items():
        if section == "":
            continue
        sec = values.setdefault(section, {})
        for sub, (tag, default) in keys.items():
            sec.setdefault(sub, json.loads(json.dumps(default)))
    _validate_semantics(values)
    return RunConfig(values=values, source_path=source_path)


def _validate_semantics(values: dict) -> None:
    gen = values["gen"]
    if gen["scenario"] not in ("default", "table-w1", "table-w3"):
        raise ConfigError(f"gen.scenario: unknown scenario {gen['scenario']!r}")
    if gen["kind"] not in ("rct", "obs"):
        raise ConfigError(f"gen.kind: must be 'rct' or 'obs', got {gen['kind']!r}")
    if values["repnet"]["head"] not in ("concat", "monotonic"):
        raise ConfigError(f"repnet.head: must be 'concat' or 'monotonic'")
    if values["solver"]["method"] not in ("exact_dp", "lagrangian_sweep", "brute_force"):
        raise ConfigError(f"solver.method: unknown method {values['solver']['method']!r}")
    budgets = values["solver"]["budgets_per_individual"]
    if not budgets or any(b <= 0 for b in budgets) or any(
        b2 <= b1 for b1, b2 in zip(budgets, budgets[1:])
    ):
        raise ConfigError("solver.budgets_per_individual must be positive and strictly increasing")
    for p in values["baselines"]["policies"]:
        if p not in ("heuristic", "lagrangian", "dfl"):
            raise ConfigError(f"baselines.policies: unknown policy {p!r}")
    if values["eval"]["estimator"] not in ("matched", "ipw"):
        raise ConfigError(f"eval.estimator: unknown estimator {values['eval']['estimator']!r}")


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from exc
    return parse_config(doc, source_path=str(path))


def gen_config_from_run(config: RunConfig, n: int, seed: int):
    """Build the generator config the ``gen`` section describes."""
    from .synthgen import default_config, table_calibrated_config

    gen = config.values["gen"]
    if gen["scenario"] == "default":
        base = default_config(
            n=n,
            d=gen["d"],
            m=gen["m"],
            g=gen["g"],
            seed=seed,
            sigma_noise=gen["sigma_noise"],
            contamination=gen["contamination"],
            obs_bias=gen["obs_bias"],
            signal_radius=gen["signal_radius"],
        )
    else:
        week = gen["scenario"].removeprefix("table-")
        base = table_calibrated_config(
            n=n,
            week=week,
            d=gen["d"],
            m=gen["m"],
            seed=seed,
            contamination=gen["contamination"],
            signal_radius=gen["signal_radius"],
        )
        if gen["obs_bias"]:
            base = base.with_(obs_bias=gen["obs_bias"])
    if gen["contamination_scale"] != 10.0:
        base = base.with_(contamination_scale=gen["contamination_scale"])
    return base
