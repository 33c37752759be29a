"""Strict run configuration: unknown keys and bad values are rejected by name."""
from __future__ import annotations

import json
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from tclnet.errors import InvalidParameterError


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DataSection(_Strict):
    n_a: int = Field(16, ge=1)
    n_t: int = Field(16, ge=1)
    n_c: int = Field(32, ge=1)
    num_paths: int = Field(3, ge=1)
    max_delay_taps: int = Field(8, ge=1)
    samples: int = Field(200, ge=1)
    seed: int = 0
    snr_db: float | None = None

    @model_validator(mode="after")
    def _rows(self):
        if self.n_a > self.n_c:
            raise ValueError(f"n_a={self.n_a} exceeds n_c={self.n_c}")
        if self.max_delay_taps > self.n_c:
            raise ValueError(f"max_delay_taps={self.max_delay_taps} exceeds n_c={self.n_c}")
        return self


class LossySection(_Strict):
    cr_num: int = Field(1, ge=1)
    cr_den: int = Field(4, ge=1)
    r: int = Field(8, ge=2)
    window: int = Field(4, ge=1)
    heads: int = Field(2, ge=1)
    epochs: int = Field(300, ge=1)
    warmup: int = Field(12, ge=0)
    batch: int = Field(8, ge=2)
    lr: float = Field(2e-3, gt=0)

    @model_validator(mode="after")
    def _ratio(self):
        if self.cr_num > self.cr_den:
            raise ValueError("cr_num must not exceed cr_den")
        if (self.r // 2) % self.heads:
            raise ValueError(f"global channels r//2={self.r // 2} not divisible by heads={self.heads}")
        return self


class LmSection(_Strict):
    embed: int = Field(64, ge=1)
    blocks: int = Field(2, ge=1)
    heads: int = Field(4, ge=1)
    ffn: int = Field(256, ge=1)
    iters: int = Field(400, ge=1)
    batch: int = Field(16, ge=1)
    lr: float = Field(1e-3, gt=0)
    seed: int = 0

    @model_validator(mode="after")
    def _heads(self):
        if self.embed % self.heads:
            raise ValueError(f"embed={self.embed} not divisible by heads={self.heads}")
        return self


class CodecSection(_Strict):
    n_bits: int = Field(7, ge=1, le=8)
    c: float = Field(0.5, ge=0.0, le=1.0)
    provider: str = Field("lm", pattern="^(lm|fm-only|llm)$")
    llm_url: str | None = None


class PathsSection(_Strict):
    dataset: str = "out/dataset.tcld"
    checkpoints: str = "out/checkpoints"
    out: str = "out"


class RunConfig(_Strict):
    data: DataSection = DataSection()
    lossy: LossySection = LossySection()
    lm: LmSection = LmSection()
    codec: CodecSection = CodecSection()
    paths: PathsSection = PathsSection()

    def resolved_json(self) -> str:
        return json.dumps(self.model_dump(), indent=2, sort_keys=True) + "\n"


def _describe(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        where = ".".join(str(p) for p in e["loc"]) or "<root>"
        parts.append(f"{where}: {e['msg']}")
    return "; ".join(parts)


def parse_config_text(text: str) -> RunConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidParameterError(f"config is not valid JSON: {exc}") from None
    try:
        return RunConfig.model_validate(doc)
    except ValidationError as exc:
        raise InvalidParameterError(f"invalid config: {_describe(exc)}") from None


def parse_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise InvalidParameterError(f"config file {path} does not exist")
    return parse_config_text(path.read_text())


def write_resolved(cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    target = out / "resolved_config.json"
    target.write_text(cfg.resolved_json())
    return target
