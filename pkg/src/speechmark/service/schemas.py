"""Request and response models for the HTTP service."""

from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, ConfigDict, model_validator

from ..config import ExperimentConfig


class HealthResponse(BaseModel):
    status: str
    version: str


class SynthDataRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    config: ExperimentConfig
    out_dir: str = "dataset"


class SynthDataResponse(BaseModel):
    n_clips: int
    d_x: int
    sample_rate: int
    content_hash: str
    dir: str


class KeygenRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    config: ExperimentConfig
    seed: int
    out_dir: str = "run"


class KeygenResponse(BaseModel):
    n_keys: int
    gram_max: float
    min_compliance: float
    all_converged: bool
    keys_path: str
    conditions: dict


class TrainRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    config: ExperimentConfig
    seed: int
    out_dir: str = "run"
    keys_path: str | None = None  # default: <out_dir>/keys.json


class TrainResponse(BaseModel):
    n_models: int
    robust: bool
    iterations: list[int]
    models_dir: str


class EvalRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    config: ExperimentConfig
    seed: int
    mode: Literal["standard", "ablation", "attack"] = "standard"
    out_dir: str = "run"
    keys_path: str | None = None
    models_dir: str | None = None


class AttackRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    wav_base64: str
    seed: int = 0
    suite_kind: str | None = None
    suite: dict | None = None

    @model_validator(mode="after")
    def _one_suite(self):
        if (self.suite_kind is None) == (self.suite is None):
            raise ValueError("provide exactly one of suite_kind or suite")
        return self


class AttackResponse(BaseModel):
    wav_base64: str


class KeyModel(BaseModel):
    model_config = ConfigDict(extra="forbid")
    id: int
    bias: float
    direction: list[float]


class RegisterRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    user_id: str
    key: KeyModel
    model_ref: str | None = None


class RegisterResponse(BaseModel):
    user_id: str
    key_id: int
    version: int


class RegistryEntrySummary(BaseModel):
    user_id: str
    key_id: int
    registered_at: str
    model_ref: str | None


class RegistryResponse(BaseModel):
    dataset_hash: str
    version: int
    entries: list[RegistryEntrySummary]


class AttributeRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    wav_base64: str | None = None
    samples: list[float] | None = None
    sample_rate: int | None = None

    @model_validator(mode="after")
    def _one_payload(self):
        has_wav = self.wav_base64 is not None
        has_samples = self.samples is not None
        if has_wav == has_samples:
            raise ValueError("provide exactly one of wav_base64 or samples")
        if has_samples and self.sample_rate is None:
            raise ValueError("sample_rate is required with raw samples")
        return self


class AttributeResponse(BaseModel):
    verdict: Literal["attributed", "no_match", "ambiguous"]
    user_ids: list[str]
    scores: dict[str, float]
