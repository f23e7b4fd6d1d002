"""Command-line interface.

Each subcommand parses flags, merges them over an optional ``--config`` file,
and delegates to the pipeline; with ``--server`` the request is posted to a
running service instead of executing in-process. Exit codes: 0 success,
2 usage or config error, 3 data or format error, 4 numeric failure.
"""

from __future__ import annotations

import base64
import functools
import json
import sys
from pathlib import Path

import click
from filelock import FileLock, Timeout

from . import pipeline
from .attacks import load_suite, named_suite
from .config import ExperimentConfig, parse_config
from .errors import ConfigError, DataError, NumericError, SpeechmarkError
from .keys import load_keys
from .registry import empty_store, load_registry, register, save_registry


def cli_errors(f):
    @functools.wraps(f)
    def wrapper(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except FileNotFoundError as exc:
            click.echo(f"error: file not found: {exc.filename or exc}", err=True)
            sys.exit(3)
        except NumericError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(4)
        except ConfigError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)
        except DataError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(3)
        except SpeechmarkError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(exc.exit_code)

    return wrapper


def _set_nested(payload: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = payload
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value


def _build_config(config_path: str | None, overrides: dict) -> ExperimentConfig:
    payload: dict = {}
    if config_path:
        try:
            payload = json.loads(Path(config_path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{config_path}: invalid JSON: {exc}") from exc
    for dotted, value in overrides.items():
        if value is not None:
            _set_nested(payload, dotted, value)
    return parse_config(payload)


def _parse_lambdas(text: str | None) -> tuple[float, float, float] | None:
    if text is None:
        return None
    parts = text.split(",")
    if len(parts) != 3:
        raise ConfigError("--lambdas expects three comma-separated numbers")
    try:
        return tuple(float(p) for p in parts)  # type: ignore[return-value]
    except ValueError as exc:
        raise ConfigError(f"--lambdas expects numbers: {exc}") from exc


def _locked(out_dir: Path) -> FileLock:
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(out_dir / ".lock", timeout=0)
    try:
        lock.acquire()
    except Timeout as exc:
        raise ConfigError(f"another process owns the output directory {out_dir}") from exc
    return lock


def _post(server: str, endpoint: str, payload: dict) -> dict:
    import httpx

    response = httpx.post(server.rstrip("/") + endpoint, json=payload, timeout=3600.0)
    if response.status_code >= 400:
        detail = response.json().get("detail", response.text)
        raise DataError(f"server error {response.status_code}: {detail}")
    return response.json()


def _echo_json(payload) -> None:
    click.echo(json.dumps(payload, indent=1))


config_option = click.option("--config", "config_path", type=click.Path(), default=None,
                             help="JSON config file; flags override its fields.")
server_option = click.option("--server", default=None,
                             help="Base URL of a running service; runs remotely when set.")


@click.group()
@click.version_option(package_name="speechmark")
def main() -> None:
    """Key-based attribution of generative speech models."""


@main.command("synth-data")
@config_option
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--n", type=int, default=None, help="Number of clips.")
@click.option("--d-x", type=int, default=None, help="Samples per clip.")
@click.option("--sample-rate", type=int, default=None)
@click.option("--seed", type=int, default=None, help="Dataset seed.")
@server_option
@cli_errors
def cmd_synth_data(config_path, out_dir, n, d_x, sample_rate, seed, server):
    """Synthesize the deterministic dataset and write it as WAV files."""

    config = _build_config(config_path, {
        "dataset.kind": "synthetic", "dataset.n": n, "dataset.d_x": d_x,
        "dataset.sample_rate": sample_rate, "dataset.seed": seed,
    })
    if server:
        _echo_json(_post(server, "/synth-data",
                         {"config": config.model_dump(), "out_dir": str(out_dir)}))
        return
    with _locked(Path(out_dir)):
        _echo_json(pipeline.run_synth_data(config, Path(out_dir)))


@main.command("ingest")
@click.option("--wav-dir", type=click.Path(), required=True)
@cli_errors
def cmd_ingest(wav_dir):
    """Validate a WAV directory and print its dataset summary."""

    _echo_json(pipeline.run_ingest(wav_dir))


@main.command("keygen")
@config_option
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--seed", type=int, required=True, help="Key generation seed.")
@click.option("--n-keys", type=int, default=None)
@click.option("--no-bias", is_flag=True, default=False,
              help="Disable the classifier bias (keys through the origin).")
@server_option
@cli_errors
def cmd_keygen(config_path, out_dir, seed, n_keys, no_bias, server):
    """Generate mutually orthogonal data-compliant keys; writes keys.json and
    conditions.json."""

    config = _build_config(config_path, {
        "n_keys": n_keys, "use_bias": False if no_bias else None,
    })
    if server:
        _echo_json(_post(server, "/keygen",
                         {"config": config.model_dump(), "seed": seed, "out_dir": str(out_dir)}))
        return
    with _locked(Path(out_dir)):
        output = pipeline.run_keygen(config, seed, Path(out_dir))
    _echo_json({
        "n_keys": output.keyset.n_keys,
        "gram_max": output.keyset.gram_max,
        "min_compliance": min(r.compliance_rate for r in output.results),
        "all_converged": all(r.converged for r in output.results),
    })


@main.command("train")
@config_option
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--seed", type=int, required=True, help="Training seed.")
@click.option("--keys", "keys_path", type=click.Path(), default=None,
              help="keys.json path (default: <out>/keys.json).")
@click.option("--lambdas", default=None, help="Objective weights 'l1,l2,l3'.")
@click.option("--robust", is_flag=True, default=False)
@click.option("--suite-kind", default=None,
              help="Named attack class for robust training "
                   "(noise|gain|speed|pass_filter|combination).")
@click.option("--suite-file", type=click.Path(), default=None,
              help="Attack suite JSON for robust training.")
@server_option
@cli_errors
def cmd_train(config_path, out_dir, seed, keys_path, lambdas, robust,
              suite_kind, suite_file, server):
    """Train one watermark model per key; writes model JSONs and loss CSVs."""

    from .attacks import suite_to_dict

    overrides: dict = {"lambdas": _parse_lambdas(lambdas)}
    if robust:
        overrides["robust"] = True
    if suite_kind:
        overrides["attack_suite"] = suite_to_dict(named_suite(suite_kind))
    elif suite_file:
        overrides["attack_suite"] = suite_to_dict(load_suite(suite_file))
    config = _build_config(config_path, overrides)
    keys_file = Path(keys_path) if keys_path else Path(out_dir) / "keys.json"
    if server:
        _echo_json(_post(server, "/train", {
            "config": config.model_dump(), "seed": seed,
            "out_dir": str(out_dir), "keys_path": str(keys_file),
        }))
        return
    keyset = load_keys(keys_file)
    with _locked(Path(out_dir)):
        models = pipeline.run_train(config, seed, keyset, Path(out_dir))
    _echo_json({
        "n_models": len(models),
        "robust": config.robust,
        "iterations": [len(m.training_log) for m in models],
    })


@main.command("attack")
@click.option("--in", "in_path", type=click.Path(), required=True,
              help="Input WAV file or directory.")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--seed", type=int, required=True)
@click.option("--suite-kind", default=None)
@click.option("--suite-file", type=click.Path(), default=None)
@cli_errors
def cmd_attack(in_path, out_dir, seed, suite_kind, suite_file):
    """Apply sampled post-processing attacks to clips; writes attacked WAVs."""

    if suite_file:
        suite = load_suite(suite_file)
    elif suite_kind:
        suite = named_suite(suite_kind)
    else:
        raise ConfigError("one of --suite-kind or --suite-file is required")
    with _locked(Path(out_dir)):
        meta = pipeline.run_attack(suite, Path(in_path), seed, Path(out_dir))
    _echo_json({"n_inputs": len(meta["inputs"]), "out": str(out_dir)})


@main.command("eval")
@config_option
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--seed", type=int, required=True)
@click.option("--keys", "keys_path", type=click.Path(), default=None)
@click.option("--models", "models_dir", type=click.Path(), default=None,
              help="Directory of model JSONs (default: <out>/models).")
@click.option("--mode", type=click.Choice(["standard", "ablation", "attack"]),
              default="standard")
@click.option("--eval-samples", type=int, default=None)
@click.option("--lambdas", default=None, help="Objective weights 'l1,l2,l3'.")
@server_option
@cli_errors
def cmd_eval(config_path, out_dir, seed, keys_path, models_dir, mode,
             eval_samples, lambdas, server):
    """Evaluate models: standard report, loss-design ablation, or per-attack
    before/after robust-training comparison."""

    config = _build_config(config_path, {
        "eval_samples": eval_samples, "lambdas": _parse_lambdas(lambdas),
    })
    keys_file = Path(keys_path) if keys_path else Path(out_dir) / "keys.json"
    if server:
        _echo_json(_post(server, "/eval", {
            "config": config.model_dump(), "seed": seed, "mode": mode,
            "out_dir": str(out_dir), "keys_path": str(keys_file),
            "models_dir": str(models_dir) if models_dir else None,
        }))
        return
    keyset = load_keys(keys_file)
    eval_dir = Path(out_dir) / "eval"
    with _locked(Path(out_dir)):
        if mode == "standard":
            models = pipeline.load_models(
                Path(models_dir) if models_dir else Path(out_dir) / "models")
            report = pipeline.run_eval(config, seed, keyset, models, eval_dir)
            _echo_json(report.to_dict())
        elif mode == "ablation":
            _echo_json(pipeline.run_eval_ablation(config, seed, keyset, eval_dir))
        else:
            _echo_json(pipeline.run_eval_attacks(config, seed, keyset, eval_dir))


@main.command("attribute")
@click.option("--registry", "registry_path", type=click.Path(), required=True)
@click.option("--wav", "wav_path", type=click.Path(), required=True)
@click.option("--json-out", type=click.Path(), default=None,
              help="Also write the result JSON to this path.")
@server_option
@cli_errors
def cmd_attribute(registry_path, wav_path, json_out, server):
    """Attribute a clip: report which registered user's key fires on it."""

    if server:
        wav_b64 = base64.b64encode(Path(wav_path).read_bytes()).decode("ascii")
        payload = _post(server, "/attribute", {"wav_base64": wav_b64})
    else:
        result = pipeline.run_attribute(Path(registry_path), Path(wav_path))
        payload = result.to_dict()
    if payload["verdict"] == "attributed":
        click.echo(f"attributed: {payload['user_ids'][0]}")
    elif payload["verdict"] == "no_match":
        click.echo("no match: no registered key fires on this clip")
    else:
        click.echo(f"ambiguous: {', '.join(payload['user_ids'])}")
    _echo_json(payload)
    if json_out:
        Path(json_out).write_text(json.dumps(payload, indent=1) + "\n")


@main.command("register")
@click.option("--registry", "registry_path", type=click.Path(), required=True)
@click.option("--user-id", required=True)
@click.option("--keys", "keys_path", type=click.Path(), required=True)
@click.option("--key-id", type=int, required=True)
@click.option("--model-ref", default=None)
@server_option
@cli_errors
def cmd_register(registry_path, user_id, keys_path, key_id, model_ref, server):
    """Register a user with one key from a keys.json file."""

    if server:
        keyset = load_keys(keys_path)
        key = _find_key(keyset, key_id)
        _echo_json(_post(server, "/registry/register", {
            "user_id": user_id, "model_ref": model_ref,
            "key": {"id": key.id, "bias": key.bias, "direction": key.direction.tolist()},
        }))
        return
    keyset = load_keys(keys_path)
    key = _find_key(keyset, key_id)
    path = Path(registry_path)
    store = load_registry(path) if path.exists() else empty_store(keyset.dataset_hash)
    store = register(store, user_id, key, model_ref=model_ref)
    save_registry(store, path)
    _echo_json({"user_id": user_id, "key_id": key_id, "version": store.version})


def _find_key(keyset, key_id: int):
    for key in keyset.keys:
        if key.id == key_id:
            return key
    raise DataError(f"key id {key_id} not present in the key file")


@main.command("report")
@config_option
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--seed", type=int, required=True)
@click.option("--keys", "keys_path", type=click.Path(), default=None)
@click.option("--models", "models_dir", type=click.Path(), default=None)
@cli_errors
def cmd_report(config_path, out_dir, seed, keys_path, models_dir):
    """Emit metric-versus-model-count series as CSV."""

    config = _build_config(config_path, {})
    keys_file = Path(keys_path) if keys_path else Path(out_dir) / "keys.json"
    keyset = load_keys(keys_file)
    models = pipeline.load_models(Path(models_dir) if models_dir else Path(out_dir) / "models")
    with _locked(Path(out_dir)):
        series = pipeline.run_report(config, seed, keyset, models, Path(out_dir) / "report")
    _echo_json(series)


@main.command("serve")
@click.option("--workspace", type=click.Path(), required=True,
              help="Directory the service reads and writes.")
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8000)
@cli_errors
def cmd_serve(workspace, host, port):
    """Run the attribution service over the given workspace."""

    import uvicorn

    from .service.app import create_app

    uvicorn.run(create_app(Path(workspace)), host=host, port=port)


if __name__ == "__main__":
    main()
