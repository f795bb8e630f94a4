"""Run configuration: JSON file, ``DDGHM_*`` environment overrides, validation."""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Mapping

ENV_PREFIX = "DDGHM_"


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


@dataclass
class DataConfig:
    min_interactions: int = 10
    period_days: float = 90.0
    min_items_per_domain: int = 5
    split_ratios: tuple = (0.75, 0.15, 0.10)

    @property
    def period_seconds(self) -> int:
        return int(round(self.period_days * 86_400))

    def problems(self) -> list[str]:
        out = []
        if self.min_interactions < 1:
            out.append(f"min_interactions: must be >= 1, got {self.min_interactions}")
        if self.period_days <= 0:
            out.append(f"period_days: must be > 0, got {self.period_days}")
        if self.min_items_per_domain < 1:
            out.append(f"min_items_per_domain: must be >= 1, got {self.min_items_per_domain}")
        r = self.split_ratios
        if len(r) != 3 or any(x < 0 for x in r) or abs(sum(r) - 1) > 1e-9:
            out.append(f"split_ratios: need three non-negative values summing to 1, got {list(r)}")
        return out


@dataclass
class TrainConfig:
    dim: int = 32
    steps: int = 1
    lambda_col: float = 1.0
    lambda_con: float = 0.7
    margin: float = 1.5
    mask_ratio: float = 0.5
    batch_size: int = 16
    n_neg: int = 1
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 30
    seed: int = 0
    max_len: int = 50
    local_only: bool = False
    global_only: bool = False
    plain_gru_gate: bool = False
    no_col: bool = False
    no_con: bool = False
    select_metric: str = "HR@10"

    @property
    def use_local(self) -> bool:
        return not self.global_only

    @property
    def use_global(self) -> bool:
        return not self.local_only

    @property
    def use_gate(self) -> bool:
        return self.use_local and self.use_global

    def problems(self) -> list[str]:
        out = []
        if self.dim < 1:
            out.append(f"dim: must be >= 1, got {self.dim}")
        if self.steps < 0:
            out.append(f"steps: must be >= 0, got {self.steps}")
        for name in ("lambda_col", "lambda_con"):
            if getattr(self, name) < 0:
                out.append(f"{name}: must be >= 0, got {getattr(self, name)}")
        if self.margin <= 0:
            out.append(f"margin: must be > 0, got {self.margin}")
        if not 0 < self.mask_ratio < 1:
            out.append(f"mask_ratio: must lie in (0, 1), got {self.mask_ratio}")
        for name in ("batch_size", "n_neg", "max_len"):
            if getattr(self, name) < 1:
                out.append(f"{name}: must be >= 1, got {getattr(self, name)}")
        if self.epochs < 0:
            out.append(f"epochs: must be >= 0, got {self.epochs}")
        if self.lr <= 0:
            out.append(f"lr: must be > 0, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            out.append("beta1/beta2: must lie in [0, 1)")
        if self.local_only and self.global_only:
            out.append("local_only/global_only: at most one may be set")
        if self.seed < 0:
            out.append(f"seed: must be >= 0, got {self.seed}")
        metric, _, k = self.select_metric.partition("@")
        if metric not in ("HR", "NDCG", "MRR") or not k.isdigit():
            out.append(f"select_metric: expected e.g. HR@10, got {self.select_metric!r}")
        return out

    def validate(self) -> "TrainConfig":
        p = self.problems()
        if p:
            raise ConfigError(p)
        return self


# Values reported for the full-size experiments; defaults above are scaled down.
PAPER_TRAIN = {"dim": 256, "batch_size": 100, "lambda_col": 1.0, "lambda_con": 0.7, "margin": 1.5}


def _coerce(f: dataclasses.Field, raw, problems: list[str]):
    typ = f.type if isinstance(f.type, str) else f.type.__name__
    try:
        if typ == "bool":
            if isinstance(raw, bool):
                return raw
            if isinstance(raw, str) and raw.lower() in ("1", "true", "yes", "on", "0", "false", "no", "off"):
                return raw.lower() in ("1", "true", "yes", "on")
            raise ValueError
        if typ == "int":
            if isinstance(raw, bool) or (isinstance(raw, float) and not raw.is_integer()):
                raise ValueError
            return int(raw)
        if typ == "float":
            if isinstance(raw, bool):
                raise ValueError
            return float(raw)
        if typ == "tuple":
            if isinstance(raw, str):
                raw = json.loads(raw)
            return tuple(float(x) for x in raw)
        return str(raw)
    except (TypeError, ValueError, json.JSONDecodeError):
        problems.append(f"{f.name}: cannot read {raw!r} as {typ}")
        return f.default


def _apply(obj, values: Mapping, problems: list[str], strict: bool) -> None:
    known = {f.name: f for f in fields(obj)}
    for key, raw in values.items():
        if key not in known:
            if strict:
                problems.append(f"{key}: unknown field")
            continue
        setattr(obj, key, _coerce(known[key], raw, problems))


def load_config(
    path: str | Path | None = None,
    env: Mapping[str, str] | None = None,
    overrides: Mapping | None = None,
) -> tuple[DataConfig, TrainConfig]:
    """Defaults, then the JSON file, then ``DDGHM_<FIELD>`` env vars, then overrides.

    The file may be flat or split into ``{"data": {...}, "train": {...}}``.
    Every bad field is reported at once via :class:`ConfigError`.
    """
    data, train = DataConfig(), TrainConfig()
    problems: list[str] = []
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError([f"config file: {exc}"]) from None
        if not isinstance(raw, dict):
            raise ConfigError(["config file: top level must be an object"])
        if "data" in raw or "train" in raw:
            extra = set(raw) - {"data", "train"}
            problems += [f"{k}: unknown section" for k in sorted(extra)]
            _apply(data, raw.get("data", {}), problems, strict=True)
            _apply(train, raw.get("train", {}), problems, strict=True)
        else:
            dn = {f.name for f in fields(DataConfig)}
            tn = {f.name for f in fields(TrainConfig)}
            problems += [f"{k}: unknown field" for k in raw if k not in dn | tn]
            _apply(data, {k: v for k, v in raw.items() if k in dn}, problems, strict=False)
            _apply(train, {k: v for k, v in raw.items() if k in tn}, problems, strict=False)
    env = os.environ if env is None else env
    env_vals = {k[len(ENV_PREFIX):].lower(): v for k, v in env.items() if k.startswith(ENV_PREFIX)}
    _apply(data, env_vals, problems, strict=False)
    _apply(train, env_vals, problems, strict=False)
    if overrides:
        _apply(data, overrides, problems, strict=False)
        _apply(train, overrides, problems, strict=False)
    problems += data.problems() + train.problems()
    if problems:
        raise ConfigError(problems)
    return data, train


def to_dict(data: DataConfig | None, train: TrainConfig) -> dict:
    out = {"train": dataclasses.asdict(train)}
    if data is not None:
        d = dataclasses.asdict(data)
        d["split_ratios"] = list(d["split_ratios"])
        out["data"] = d
    return out


def train_config_from_dict(values: Mapping) -> TrainConfig:
    problems: list[str] = []
    cfg = TrainConfig()
    _apply(cfg, values, problems, strict=False)
    problems += cfg.problems()
    if problems:
        raise ConfigError(problems)
    return cfg
