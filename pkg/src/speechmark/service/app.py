"""FastAPI service wrapping the pipeline over one workspace directory.

The registry lives at ``<workspace>/registry.json``; batch endpoints write
their outputs under workspace-relative directories. Attribution and
registration are the long-lived, multi-client operations; the batch
endpoints run synchronously at desk scale.
"""

from __future__ import annotations

import base64
import binascii
from importlib.metadata import version as package_version
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import pipeline
from ..attacks import named_suite, suite_from_dict, sample_suite_batch
from ..audio import AudioClip, read_wav_bytes, write_wav_bytes
from ..errors import ConfigError, DataError, NumericError, SpeechmarkError
from ..keys import Key, load_keys
from ..registry import attribute, empty_store, load_registry, register, save_registry
from . import schemas


def _resolve(workspace: Path, relative: str) -> Path:
    path = (workspace / relative).resolve()
    if not path.is_relative_to(workspace.resolve()):
        raise ConfigError(f"path {relative!r} escapes the workspace")
    return path


def create_app(workspace: Path) -> FastAPI:
    workspace = Path(workspace)
    workspace.mkdir(parents=True, exist_ok=True)
    registry_path = workspace / "registry.json"

    app = FastAPI(title="speechmark attribution service")

    @app.exception_handler(SpeechmarkError)
    async def _package_error(request: Request, exc: SpeechmarkError):
        status = {2: 422, 3: 400, 4: 500}.get(exc.exit_code, 500)
        return JSONResponse(status_code=status, content={"detail": str(exc)})

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(status="ok", version=package_version("speechmark"))

    @app.post("/synth-data", response_model=schemas.SynthDataResponse)
    def synth_data(request: schemas.SynthDataRequest):
        out_dir = _resolve(workspace, request.out_dir)
        summary = pipeline.run_synth_data(request.config, out_dir)
        return schemas.SynthDataResponse(**summary)

    @app.post("/keygen", response_model=schemas.KeygenResponse)
    def keygen(request: schemas.KeygenRequest):
        out_dir = _resolve(workspace, request.out_dir)
        output = pipeline.run_keygen(request.config, request.seed, out_dir)
        return schemas.KeygenResponse(
            n_keys=output.keyset.n_keys,
            gram_max=output.keyset.gram_max,
            min_compliance=min(r.compliance_rate for r in output.results),
            all_converged=all(r.converged for r in output.results),
            keys_path=str(out_dir / "keys.json"),
            conditions=output.report.to_dict(),
        )

    @app.post("/train", response_model=schemas.TrainResponse)
    def train(request: schemas.TrainRequest):
        out_dir = _resolve(workspace, request.out_dir)
        keys_path = (_resolve(workspace, request.keys_path)
                     if request.keys_path else out_dir / "keys.json")
        keyset = load_keys(keys_path)
        models = pipeline.run_train(request.config, request.seed, keyset, out_dir)
        return schemas.TrainResponse(
            n_models=len(models),
            robust=request.config.robust,
            iterations=[len(m.training_log) for m in models],
            models_dir=str(out_dir / "models"),
        )

    @app.post("/eval")
    def evaluate(request: schemas.EvalRequest):
        out_dir = _resolve(workspace, request.out_dir)
        keys_path = (_resolve(workspace, request.keys_path)
                     if request.keys_path else out_dir / "keys.json")
        keyset = load_keys(keys_path)
        eval_dir = out_dir / "eval"
        if request.mode == "standard":
            models_dir = (_resolve(workspace, request.models_dir)
                          if request.models_dir else out_dir / "models")
            models = pipeline.load_models(models_dir)
            report = pipeline.run_eval(request.config, request.seed, keyset, models, eval_dir)
            return report.to_dict()
        if request.mode == "ablation":
            return pipeline.run_eval_ablation(request.config, request.seed, keyset, eval_dir)
        return pipeline.run_eval_attacks(request.config, request.seed, keyset, eval_dir)

    @app.post("/attack", response_model=schemas.AttackResponse)
    def attack(request: schemas.AttackRequest):
        clip = _decode_wav(request.wav_base64)
        suite = (named_suite(request.suite_kind) if request.suite_kind
                 else suite_from_dict(request.suite))
        kernel = sample_suite_batch(suite, 1, clip.d_x, clip.sample_rate,
                                    seed=request.seed)
        out = AudioClip(kernel.forward(clip.samples[None, :])[0], clip.sample_rate)
        return schemas.AttackResponse(
            wav_base64=base64.b64encode(write_wav_bytes(out)).decode("ascii"))

    @app.get("/registry", response_model=schemas.RegistryResponse)
    def registry_list():
        if not registry_path.exists():
            return schemas.RegistryResponse(dataset_hash="", version=0, entries=[])
        store = load_registry(registry_path)
        return schemas.RegistryResponse(
            dataset_hash=store.dataset_hash,
            version=store.version,
            entries=[
                schemas.RegistryEntrySummary(
                    user_id=e.user_id, key_id=e.key.id,
                    registered_at=e.registered_at, model_ref=e.model_ref)
                for e in store.entries
            ],
        )

    @app.post("/registry/register", response_model=schemas.RegisterResponse)
    def registry_register(request: schemas.RegisterRequest):
        key = Key(np.array(request.key.direction, dtype=np.float64),
                  request.key.bias, request.key.id)
        store = (load_registry(registry_path) if registry_path.exists()
                 else empty_store(dataset_hash=""))
        store = register(store, request.user_id, key, model_ref=request.model_ref)
        save_registry(store, registry_path)
        return schemas.RegisterResponse(
            user_id=request.user_id, key_id=key.id, version=store.version)

    @app.post("/attribute", response_model=schemas.AttributeResponse)
    def attribute_clip(request: schemas.AttributeRequest):
        if not registry_path.exists():
            raise DataError("registry is empty; register keys first")
        store = load_registry(registry_path)
        if request.wav_base64 is not None:
            clip = _decode_wav(request.wav_base64)
        else:
            clip = AudioClip(np.array(request.samples, dtype=np.float64),
                             request.sample_rate)
        result = attribute(store, clip)
        return schemas.AttributeResponse(**result.to_dict())

    return app


def _decode_wav(wav_base64: str) -> AudioClip:
    try:
        data = base64.b64decode(wav_base64, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise DataError(f"invalid base64 WAV payload: {exc}") from exc
    return read_wav_bytes(data, label="<request>")
