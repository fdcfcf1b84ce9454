"""Strict experiment-config parsing: flat key = value lines in sections.

Unknown sections or keys are errors (no silent typos), every value is
type-checked with its line number, and the effective configuration can be
echoed back out in the same format for exact reruns.
"""

from __future__ import annotations

import os

from .errors import ConfigError
from .pipeline import ExperimentConfig, ExpertSpec
from .signal import GeneratorConfig

ENV_SEED = "ENECG_SEED"


def _parse_bool(text: str) -> bool:
    if text.lower() in ("true", "1", "yes"):
        return True
    if text.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"expected true/false, got {text!r}")


def _parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(p) for p in text.split(","))


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(","))


def _parse_names(text: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in text.split(",") if p.strip())


def _parse_roster(text: str) -> tuple[ExpertSpec, ...]:
    """name:tag:seed:input_len:feature_dim entries separated by ';'.

    input_len '-' means the architecture default."""
    specs = []
    for entry in text.split(";"):
        entry = entry.strip()
        if not entry:
            continue
        parts = [p.strip() for p in entry.split(":")]
        if len(parts) != 5:
            raise ValueError(f"roster entry needs name:tag:seed:input_len:feature_dim, got {entry!r}")
        input_len = None if parts[3] == "-" else int(parts[3])
        specs.append(ExpertSpec(parts[0], parts[1], int(parts[2]), input_len, int(parts[4])))
    if not specs:
        raise ValueError("empty roster")
    return tuple(specs)


# (section, key) -> (parser, experiment-config field or data.* field)
_SCHEMA: dict[tuple[str, str], tuple] = {
    ("experiment", "seed"): (int, "seed"),
    ("experiment", "n_records"): (int, "n_records"),
    ("experiment", "epochs"): (int, "epochs"),
    ("experiment", "batch_size"): (int, "batch_size"),
    ("experiment", "learning_rate"): (float, "learning_rate"),
    ("experiment", "split"): (_parse_floats, "split"),
    ("experiment", "tasks"): (_parse_names, "tasks"),
    ("experiment", "ensemble"): (str, "ensemble"),
    ("experiment", "repeats"): (int, "repeats"),
    ("experiment", "joint"): (_parse_bool, "joint"),
    ("experiment", "normalize_targets"): (_parse_bool, "normalize_targets"),
    ("experiment", "class_weighted_bce"): (_parse_bool, "class_weighted_bce"),
    ("experts", "roster"): (_parse_roster, "experts"),
    ("heads", "hidden_dim"): (int, "head_hidden"),
    ("heads", "rank"): (int, "head_rank"),
    ("heads", "depth"): (int, "head_depth"),
    ("heads", "train_bias"): (_parse_bool, "train_bias"),
    ("heads", "lora_only"): (_parse_bool, "lora_only"),
    ("gating", "leads"): (_parse_ints, "gate_leads"),
    ("gating", "pooled_len"): (int, "gate_pooled_len"),
    ("gating", "hidden_dim"): (int, "gate_hidden"),
    ("gating", "per_coordinate"): (_parse_bool, "per_coordinate_weights"),
    ("data", "duration_s"): (float, "data.duration_s"),
    ("data", "fs_hz"): (float, "data.fs_hz"),
    ("data", "heart_rate_bpm"): (_parse_floats, "data.heart_rate_bpm"),
    ("data", "noise_amplitude"): (float, "data.noise_amplitude"),
    ("data", "potassium_rate"): (float, "data.potassium_rate"),
    ("data", "sex_ratio"): (float, "data.sex_ratio"),
    ("saliency", "task"): (str, "saliency.task"),
    ("saliency", "steps"): (int, "saliency.steps"),
    ("saliency", "record_index"): (int, "saliency.record_index"),
    ("saliency", "expert_index"): (int, "saliency.expert_index"),
    ("saliency", "class_index"): (int, "saliency.class_index"),
}

_SECTIONS = {section for section, _ in _SCHEMA}


def load_config(path, seed_override: int | None = None) -> tuple[ExperimentConfig, dict]:
    """Parse and validate a config file.

    Returns the ExperimentConfig plus a dict of saliency options. The seed
    is resolved as: explicit override > config value > ENECG_SEED env var;
    a missing seed is a config error.
    """
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e

    raw: dict[str, object] = {}
    section = None
    for lineno, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if text.startswith("[") and text.endswith("]"):
            section = text[1:-1].strip()
            if section not in _SECTIONS:
                raise ConfigError(f"{path}:{lineno}: unknown section [{section}]")
            continue
        if "=" not in text:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        if section is None:
            raise ConfigError(f"{path}:{lineno}: key outside any [section]")
        key, value = (p.strip() for p in text.split("=", 1))
        if (section, key) not in _SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown key {section}.{key}")
        parser, field_name = _SCHEMA[(section, key)]
        try:
            parsed = parser(value)
        except ValueError as e:
            raise ConfigError(f"{path}:{lineno}: bad value for {section}.{key}: {e}") from e
        if field_name in raw:
            raise ConfigError(f"{path}:{lineno}: duplicate key {section}.{key}")
        raw[field_name] = parsed

    if seed_override is not None:
        raw["seed"] = int(seed_override)
    elif "seed" not in raw:
        env = os.environ.get(ENV_SEED)
        if env is None:
            raise ConfigError(f"missing required key experiment.seed "
                              f"(set it in {path}, via --seed, or via {ENV_SEED})")
        try:
            raw["seed"] = int(env)
        except ValueError as e:
            raise ConfigError(f"bad {ENV_SEED} value {env!r}") from e

    split = raw.get("split")
    if split is not None and abs(sum(split) - 1.0) > 1e-9:
        raise ConfigError(f"experiment.split: ratios must sum to 1, got {split}")

    data_kwargs = {name.split(".", 1)[1]: value for name, value in raw.items()
                   if name.startswith("data.")}
    saliency = {name.split(".", 1)[1]: value for name, value in raw.items()
                if name.startswith("saliency.")}
    exp_kwargs = {name: value for name, value in raw.items()
                  if "." not in name}
    if data_kwargs:
        exp_kwargs["data"] = GeneratorConfig(**data_kwargs)
    cfg = ExperimentConfig(**exp_kwargs)
    try:
        cfg.validate()
        cfg.data.validate()
    except Exception as e:
        raise ConfigError(str(e)) from e
    return cfg, saliency


def echo_config(cfg: ExperimentConfig, saliency: dict | None = None) -> str:
    """Render the effective configuration; load_config(echo) reproduces it."""
    roster = "; ".join(
        f"{s.name}:{s.arch}:{s.seed}:{'-' if s.input_len is None else s.input_len}:{s.feature_dim}"
        for s in cfg.experts)
    lines = [
        "# effective configuration (auto-generated)",
        "[experiment]",
        f"seed = {cfg.seed}",
        f"n_records = {cfg.n_records}",
        f"epochs = {cfg.epochs}",
        f"batch_size = {cfg.batch_size}",
        f"learning_rate = {cfg.learning_rate!r}",
        f"split = {','.join(repr(r) for r in cfg.split)}",
        f"tasks = {','.join(cfg.tasks)}",
        f"ensemble = {cfg.ensemble}",
        f"repeats = {cfg.repeats}",
        f"joint = {str(cfg.joint).lower()}",
        f"normalize_targets = {str(cfg.normalize_targets).lower()}",
        f"class_weighted_bce = {str(cfg.class_weighted_bce).lower()}",
        "",
        "[experts]",
        f"roster = {roster}",
        "",
        "[heads]",
        f"hidden_dim = {cfg.head_hidden}",
        f"rank = {cfg.head_rank}",
        f"depth = {cfg.head_depth}",
        f"train_bias = {str(cfg.train_bias).lower()}",
        f"lora_only = {str(cfg.lora_only).lower()}",
        "",
        "[gating]",
        f"leads = {','.join(str(i) for i in cfg.gate_leads)}",
        f"pooled_len = {cfg.gate_pooled_len}",
        f"hidden_dim = {cfg.gate_hidden}",
        f"per_coordinate = {str(cfg.per_coordinate_weights).lower()}",
        "",
        "[data]",
        f"duration_s = {cfg.data.duration_s!r}",
        f"fs_hz = {cfg.data.fs_hz!r}",
        f"heart_rate_bpm = {','.join(repr(v) for v in cfg.data.heart_rate_bpm)}",
        f"noise_amplitude = {cfg.data.noise_amplitude!r}",
        f"potassium_rate = {cfg.data.potassium_rate!r}",
        f"sex_ratio = {cfg.data.sex_ratio!r}",
    ]
    if saliency:
        lines += ["", "[saliency]"]
        lines += [f"{k} = {v}" for k, v in sorted(saliency.items())]
    return "\n".join(lines) + "\n"
