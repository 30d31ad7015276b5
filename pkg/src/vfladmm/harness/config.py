"""Experiment configuration: one JSON document, validated, with command-line overrides."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ..engine import HyperParams
from ..privacy import PrivacyParams

DEFAULT_LAMBDA_FACTOR = 1e-4


class ConfigError(ValueError):
    """Invalid configuration; the message carries field paths."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class HyperConfig(_Strict):
    rho: Union[float, Literal["recommend"]] = Field(
        ..., description="penalty parameter, or 'recommend' for the smallest rho passing the convergence checks")
    lam: Optional[float] = Field(None, ge=0, description="regulariser weight; default 1e-4 * N * loss_scale")
    max_epochs: int = Field(50, ge=1)
    lyapunov_tol: float = Field(1e-4, gt=0)
    early_stop: bool = False
    seed: int = Field(0, ge=0, lt=2**64)
    loss_scale: Union[float, Literal["1/N"]] = 1.0

    @model_validator(mode="after")
    def _positive(self):
        if isinstance(self.rho, float) and not self.rho > 0:
            raise ValueError("rho must be > 0")
        if isinstance(self.loss_scale, float) and not self.loss_scale > 0:
            raise ValueError("loss_scale must be > 0")
        return self


class PrivacyConfig(_Strict):
    epsilon: float = Field(..., gt=0, le=1, description="per-iteration epsilon")
    delta: float = Field(..., gt=0, lt=1)
    delta_prime: float = Field(1e-4, gt=0, lt=1)
    b1: float = Field(1.0, gt=0, description="radius of the parameter ball")
    c1: float = Field(1.0, gt=0, description="bound on the regulariser gradient")
    seed: Optional[int] = Field(None, ge=0, description="noise seed; defaults to hyper.seed")


class SweepConfig(_Strict):
    multipliers: list[float] = Field(default_factory=lambda: [0.0, 0.5, 1.0, 2.0, 4.0])
    seeds: int = Field(5, ge=1)


class ExperimentConfig(_Strict):
    name: str = "experiment"
    train_path: str
    test_path: str
    n_features: Optional[int] = Field(None, ge=1, description="force the feature count of train and test")
    max_rows: Optional[int] = Field(None, ge=1, description="use only the first rows of the training file")
    partition: list[int] = Field(..., min_length=1)
    hyper: HyperConfig
    privacy: Optional[PrivacyConfig] = None
    row_normalization: Literal["off", "party", "global"] = "off"
    role: Literal["local-sim", "coordinator", "party"] = "local-sim"
    party_id: Optional[int] = Field(None, ge=0)
    listen: Optional[str] = None
    connect: Optional[str] = None
    timeout: float = Field(30.0, gt=0, description="I/O deadline in seconds")
    output_csv: str = "metrics.csv"
    sweep: SweepConfig = Field(default_factory=SweepConfig)

    @model_validator(mode="after")
    def _roles(self):
        if any(w < 1 for w in self.partition):
            raise ValueError("partition widths must be >= 1")
        if self.role == "party":
            if self.party_id is None or self.connect is None:
                raise ValueError("role 'party' needs party_id and connect")
            if self.party_id >= len(self.partition):
                raise ValueError(f"party_id {self.party_id} but only {len(self.partition)} parties")
        if self.role == "coordinator" and self.listen is None:
            raise ValueError("role 'coordinator' needs listen")
        if self.role != "local-sim" and self.hyper.early_stop:
            # parties cannot see the Lyapunov value, so the schedule is fixed up front
            raise ValueError("hyper.early_stop is only supported for role 'local-sim'")
        return self

    # ---------------------------------------------------------------
    def resolved(self, base: Path) -> "ExperimentConfig":
        """Copy with relative paths made absolute against ``base``."""
        def fix(p):
            return str((base / p).resolve()) if p and not Path(p).is_absolute() else p
        return self.model_copy(update={"train_path": fix(self.train_path), "test_path": fix(self.test_path)})

    def loss_scale_for(self, n_samples: int) -> float:
        s = self.hyper.loss_scale
        return 1.0 / n_samples if s == "1/N" else float(s)

    def lam_for(self, n_samples: int) -> float:
        if self.hyper.lam is not None:
            return self.hyper.lam
        return DEFAULT_LAMBDA_FACTOR * n_samples * self.loss_scale_for(n_samples)

    def hyper_params(self, n_samples: int, rho: float) -> HyperParams:
        h = self.hyper
        return HyperParams(rho=rho, lam=self.lam_for(n_samples), max_epochs=h.max_epochs,
                           lyapunov_tol=h.lyapunov_tol, seed=h.seed,
                           loss_scale=self.loss_scale_for(n_samples), early_stop=h.early_stop)

    def privacy_params(self) -> PrivacyParams | None:
        p = self.privacy
        if p is None:
            return None
        seed = self.hyper.seed if p.seed is None else p.seed
        return PrivacyParams(p.epsilon, p.delta, p.delta_prime, p.b1, p.c1, seed)


def _format(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(x) for x in e["loc"]) or "<root>"
        lines.append(f"{loc}: {e['msg']}")
    return "; ".join(lines)


def parse_config(data: dict, base: Path | str = ".") -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format(exc)) from None
    return cfg.resolved(Path(base))


def load_config(path: str | Path, overrides: dict | None = None) -> ExperimentConfig:
    """Read a JSON config; ``overrides`` maps dotted field paths to values."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    for key, value in (overrides or {}).items():
        apply_override(data, key, value)
    return parse_config(data, path.parent)


def apply_override(data: dict, dotted: str, value) -> None:
    node = data
    parts = dotted.split(".")
    for p in parts[:-1]:
        nxt = node.get(p)
        if nxt is None:
            nxt = node[p] = {}
        if not isinstance(nxt, dict):
            raise ConfigError(f"{dotted}: '{p}' is not an object")
        node = nxt
    node[parts[-1]] = value


def json_schema() -> dict:
    return ExperimentConfig.model_json_schema()
