"""Run configuration: key=value files, a validated schema, CLI overrides.

Precedence is built-in defaults < config file < command-line overrides.
Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from .data import CATEGORIES
from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_int3(raw: str) -> tuple:
    parts = [p.strip() for p in raw.split(",")]
    if len(parts) != 3:
        raise ValueError(f"expected three comma-separated integers, got {raw!r}")
    return tuple(int(p) for p in parts)


def _parse_choice(*options: str) -> Callable[[str], str]:
    def parse(raw: str) -> str:
        low = raw.strip().lower()
        if low not in options:
            raise ValueError(f"expected one of {options}, got {raw!r}")
        return low
    return parse


@dataclass(frozen=True)
class KeySpec:
    parse: Callable
    default: object
    help: str


SCHEMA: dict = {
    # model
    "n_partial": KeySpec(int, 512, "points in the partial input cloud (model N)"),
    "embed_width": KeySpec(int, 64, "per-point embedding width"),
    "gdp_ratios": KeySpec(_parse_int3, (4, 2, 2), "encoder down-sampling ratios"),
    "code_width": KeySpec(int, 1024, "shape code width"),
    "seed_points": KeySpec(int, 128, "coarse points generated from the code"),
    "seed_width": KeySpec(int, 128, "feature width of the coarse points"),
    "seed_cloud": KeySpec(int, 512, "seed cloud size after merge + FPS (= |P0|)"),
    "feat_width": KeySpec(int, 128, "per-point width inside the generators"),
    "heads": KeySpec(int, 4, "attention heads (must divide all widths)"),
    "gen1_up": KeySpec(_parse_int3, (1, 1, 1), "SFA up-ratios of generator 1"),
    "gen2_up": KeySpec(_parse_int3, (1, 1, 1), "SFA up-ratios of generator 2"),
    "split_base": KeySpec(int, 2, "extra point-split factor per generator"),
    "disable_gdp": KeySpec(_parse_bool, False, "ablation: replace GDP blocks with FPS"),
    "disable_encoder_sfa": KeySpec(_parse_bool, False, "ablation: drop encoder SFA blocks"),
    # training
    "epochs": KeySpec(int, 400, "training epochs"),
    "batch_size": KeySpec(int, 32, "samples per optimizer step"),
    "lr": KeySpec(float, 1e-4, "initial Adam learning rate"),
    "lr_decay": KeySpec(float, 0.7, "multiplicative LR decay factor"),
    "lr_decay_every": KeySpec(int, 40, "epochs between LR decays"),
    "lambda0": KeySpec(float, 1.0, "loss weight of the seed cloud term"),
    "lambda1": KeySpec(float, 1.0, "loss weight of the first generator term"),
    "lambda2": KeySpec(float, 1.0, "loss weight of the final cloud term"),
    "cd_variant": KeySpec(_parse_choice("l1", "l2"), "l2", "Chamfer variant for the loss"),
    "seed": KeySpec(int, 0, "RNG seed (init, shuffling, data)"),
    "checkpoint_every": KeySpec(int, 10, "epochs between checkpoints (0 = only final)"),
    "eval_every": KeySpec(int, 1, "epochs between val-metric refreshes"),
    "val_fraction": KeySpec(float, 0.0,
                            "fraction of pairs held out for the epoch metric "
                            "(0 = report on the training set)"),
    # data
    "m_complete": KeySpec(int, 2048, "points in the complete ground-truth cloud"),
    "partial_method": KeySpec(_parse_choice("half_space", "viewpoint"), "half_space",
                              "occlusion model for synthetic partials"),
}


def schema_help() -> str:
    """Formatted key table for --help output."""
    lines = ["configuration keys (key = value; defaults shown):"]
    width = max(len(k) for k in SCHEMA)
    for key, spec in SCHEMA.items():
        default = spec.default
        if isinstance(default, tuple):
            default = ",".join(str(v) for v in default)
        lines.append(f"  {key:<{width}}  [{default}]  {spec.help}")
    return "\n".join(lines)


def parse_config_file(path) -> dict:
    """Read key = value lines ('#' comments allowed) into a validated dict."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, raw = stripped.partition("=")
            values[key.strip()] = (raw.strip(), f"{path}:{lineno}")
    return _validate({k: v for k, (v, _) in values.items()},
                     {k: where for k, (_, where) in values.items()})


def parse_overrides(pairs) -> dict:
    values = {}
    for item in pairs or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, _, raw = item.partition("=")
        values[key.strip()] = raw.strip()
    return _validate(values, {k: "command line" for k in values})


def _validate(raw: dict, origins: dict) -> dict:
    out = {}
    for key, value in raw.items():
        if key not in SCHEMA:
            raise ConfigError(f"{origins.get(key, '?')}: unknown key {key!r}")
        try:
            out[key] = SCHEMA[key].parse(value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{origins.get(key, '?')}: bad value for {key}: {exc}") from None
    return out


@dataclass
class RunConfig:
    """Merged model/training/data configuration for one run."""

    values: dict

    @classmethod
    def build(cls, config_path=None, overrides=None) -> "RunConfig":
        values = {k: spec.default for k, spec in SCHEMA.items()}
        if config_path is not None:
            values.update(parse_config_file(config_path))
        values.update(parse_overrides(overrides))
        return cls(values=values)

    def __getitem__(self, key):
        return self.values[key]

    def model_config(self) -> ModelConfig:
        v = self.values
        cfg = ModelConfig(
            n_input=v["n_partial"], embed_width=v["embed_width"],
            gdp_ratios=v["gdp_ratios"], code_width=v["code_width"],
            seed_points=v["seed_points"], seed_width=v["seed_width"],
            seed_cloud=v["seed_cloud"], feat_width=v["feat_width"],
            heads=v["heads"], gen1_up=v["gen1_up"], gen2_up=v["gen2_up"],
            split_base=v["split_base"], disable_gdp=v["disable_gdp"],
            disable_encoder_sfa=v["disable_encoder_sfa"])
        cfg.validate()
        sizes = cfg.predicted_sizes()
        if v["m_complete"] < sizes[2]:
            raise ConfigError(
                f"m_complete={v['m_complete']} is smaller than the final "
                f"prediction size {sizes[2]}")
        return cfg

    def train_config(self) -> TrainConfig:
        v = self.values
        cfg = TrainConfig(
            epochs=v["epochs"], batch_size=v["batch_size"], lr=v["lr"],
            lr_decay=v["lr_decay"], lr_decay_every=v["lr_decay_every"],
            lambdas=(v["lambda0"], v["lambda1"], v["lambda2"]),
            variant=v["cd_variant"], seed=v["seed"],
            checkpoint_every=v["checkpoint_every"],
            val_fraction=v["val_fraction"], eval_every=v["eval_every"])
        try:
            cfg.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return cfg

    def data_kwargs(self) -> dict:
        v = self.values
        return {"n_partial": v["n_partial"], "m_complete": v["m_complete"],
                "seed": v["seed"], "categories": CATEGORIES,
                "method": v["partial_method"]}
