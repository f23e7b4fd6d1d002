"""Additive, amplitude-clipped watermark training for user-end models.

A watermarked model is the base sample source plus a learned vector ``w``
added to every output and clamped back into [-1, 1]. Training minimizes

    lambda1 * hinge + lambda2 * quality + lambda3 * angle

where the hinge pushes the key's margin on watermarked outputs above 1, the
quality term is the per-clip L1 distance to the unwatermarked output, and the
angle term aligns the mean realized perturbation with the key direction. The
robust variant passes each batch element through an independently sampled
post-processing attack before the hinge; quality and angle stay on the
unattacked outputs.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attacks import AttackSuite, BatchAttack, sample_suite_batch, suite_from_dict, suite_to_dict
from .audio import AudioClip, Dataset
from .errors import ContractError, FormatError
from .keys import Key
from .optim import OptimizerConfig, minimize

MODEL_FORMAT_VERSION = 1
DEFAULT_LAMBDAS = (10.0, 10000.0, 1000.0)
INIT_SCALE = 0.01


@dataclass(frozen=True)
class SampleSource:
    """Deterministic draws of base clips standing in for a generator."""

    dataset: Dataset

    @property
    def d_x(self) -> int:
        return self.dataset.d_x

    @property
    def sample_rate(self) -> int:
        return self.dataset.sample_rate

    def draw_matrix(self, seed: int | tuple[int, ...] | list[int], k: int) -> np.ndarray:
        entropy = [seed] if isinstance(seed, int) else list(seed)
        rng = np.random.default_rng(entropy)
        idx = rng.integers(0, self.dataset.n_clips, size=k)
        return self.dataset.matrix[idx]

    def draw(self, seed: int | tuple[int, ...], k: int) -> list[AudioClip]:
        return [AudioClip(row, self.sample_rate) for row in self.draw_matrix(seed, k)]


@dataclass(frozen=True)
class WatermarkModel:
    """A trained additive watermark for one key."""

    key_id: int
    w: np.ndarray
    lambdas: tuple[float, float, float]
    robust: dict | None = None  # attack suite description used during training
    training_log: tuple[tuple[int, float, float, float], ...] = ()

    def __post_init__(self) -> None:
        arr = np.array(self.w, dtype=np.float64, copy=True)
        if arr.ndim != 1 or not np.all(np.isfinite(arr)):
            raise ContractError("watermark must be a finite 1-D vector")
        if np.max(np.abs(arr)) > 2.0:
            raise ContractError("watermark amplitude cannot exceed the full range swing of 2")
        if len(self.lambdas) != 3 or any(l < 0 for l in self.lambdas):
            raise ContractError("lambdas must be three nonnegative weights")
        arr.setflags(write=False)
        object.__setattr__(self, "w", arr)
        object.__setattr__(self, "lambdas", tuple(float(l) for l in self.lambdas))

    @property
    def d_x(self) -> int:
        return self.w.shape[0]


def apply(model: WatermarkModel, clip: AudioClip) -> AudioClip:
    """Watermarked output: clamp(clip + w) elementwise."""

    if clip.d_x != model.d_x:
        raise ContractError(f"clip length {clip.d_x} != watermark length {model.d_x}")
    return AudioClip(np.clip(clip.samples + model.w, -1.0, 1.0), clip.sample_rate)


def apply_matrix(w: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    if matrix.shape[1] != w.shape[0]:
        raise ContractError("sample dimension does not match watermark length")
    return np.clip(matrix + w, -1.0, 1.0)


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------


def hinge_loss(key: Key, batch: list[AudioClip] | np.ndarray) -> float:
    """Mean of max(1 - score(x), 0) over watermarked outputs."""

    matrix = batch if isinstance(batch, np.ndarray) else np.stack([c.samples for c in batch])
    if matrix.shape[0] == 0:
        raise ContractError("hinge loss needs a non-empty batch")
    margins = matrix @ key.direction + key.bias
    return float(np.mean(np.maximum(1.0 - margins, 0.0)))


def quality_loss(w: np.ndarray, batch_pre: np.ndarray, batch_post: np.ndarray) -> float:
    """Mean per-clip L1 distance between pre- and post-watermark outputs.

    Clipping is included via ``batch_post``, so the value is at most the L1
    norm of ``w`` and strictly less wherever the watermark saturates.
    """

    if batch_pre.shape != batch_post.shape:
        raise ContractError("pre and post batches must be aligned")
    return float(np.mean(np.sum(np.abs(batch_post - batch_pre), axis=1)))


def angle_alignment(delta: np.ndarray, key: Key) -> tuple[float, bool]:
    """Cosine between the mean realized perturbation and the key direction.

    Returns (cosine, degenerate); a zero-norm perturbation is degenerate and
    reports cosine 0.
    """

    norm = float(np.linalg.norm(delta))
    if norm == 0.0:
        return 0.0, True
    return float(delta @ key.direction / (norm * np.linalg.norm(key.direction))), False


def angle_loss(w_effective: np.ndarray, key: Key) -> float:
    """max(1 - cos(delta, direction), 0) for the mean perturbation delta."""

    cos, _ = angle_alignment(w_effective, key)
    return float(max(1.0 - cos, 0.0))


# ---------------------------------------------------------------------------
# Combined objective
# ---------------------------------------------------------------------------


def combined_loss_and_grad(
    w: np.ndarray,
    X: np.ndarray,
    key: Key,
    lambdas: tuple[float, float, float],
    attack: BatchAttack | None = None,
) -> tuple[float, np.ndarray, tuple[float, float, float]]:
    """Objective value, gradient in ``w``, and the three loss components.

    The clamp's subgradient is pass-through strictly inside (-1, 1) and zero
    at saturated coordinates; hinge and L1 kinks take the zero subgradient.
    When ``attack`` is given, the hinge margin is computed on attacked
    outputs and its gradient is transported back through the attack.
    """

    l1, l2, l3 = lambdas
    k = X.shape[0]
    pre = X + w
    C = np.clip(pre, -1.0, 1.0)
    mask = np.abs(pre) < 1.0

    # Hinge on (optionally attacked) watermarked outputs.
    A = attack.forward(C) if attack is not None else C
    margins = A @ key.direction + key.bias
    active = margins < 1.0
    loss_h = float(np.mean(np.maximum(1.0 - margins, 0.0)))
    G_rows = (-(active.astype(np.float64))[:, None] / k) * key.direction[None, :]
    if attack is not None:
        G_rows = attack.vjp(G_rows)
    grad_h = np.sum(G_rows * mask, axis=0)

    # Per-clip L1 distance to the unwatermarked output.
    diff = C - X
    loss_d = float(np.mean(np.sum(np.abs(diff), axis=1)))
    grad_d = np.mean(np.sign(diff) * mask, axis=0)

    # Alignment of the mean realized perturbation with the key direction.
    delta = np.mean(diff, axis=0)
    cos, degenerate = angle_alignment(delta, key)
    loss_a = float(max(1.0 - cos, 0.0))
    if degenerate or loss_a <= 0.0:
        grad_a = np.zeros_like(w)
    else:
        norm = np.linalg.norm(delta)
        dcos = key.direction / norm - cos * delta / norm**2
        grad_a = -dcos * np.mean(mask, axis=0)

    loss = l1 * loss_h + l2 * loss_d + l3 * loss_a
    grad = l1 * grad_h + l2 * grad_d + l3 * grad_a
    return loss, grad, (loss_h, loss_d, loss_a)


def _train_impl(
    key: Key,
    source: SampleSource,
    lambdas: tuple[float, float, float],
    opt: OptimizerConfig | None,
    seed: int | tuple[int, ...],
    suite: AttackSuite | None,
) -> WatermarkModel:
    opt = opt or OptimizerConfig(algorithm="momentum")
    X_full = source.dataset.matrix
    n = X_full.shape[0]
    batch = opt.resolve_batch_size(n)
    entropy = [seed] if isinstance(seed, int) else list(seed)

    log: list[tuple[int, float, float, float]] = []
    d_x = source.d_x

    def loss_and_grad(w: np.ndarray, it: int) -> tuple[float, np.ndarray]:
        if batch == n:
            X = X_full
        else:
            rng = np.random.default_rng(entropy + [0xB0, it])
            X = X_full[rng.integers(0, n, size=batch)]
        attack = None
        if suite is not None:
            attack = sample_suite_batch(suite, X.shape[0], d_x, source.sample_rate,
                                        entropy + [0xA7, it])
        loss, grad, parts = combined_loss_and_grad(w, X, key, lambdas, attack)
        log.append((it, *parts))
        return loss, grad

    def box_project(w: np.ndarray) -> np.ndarray:
        # Keep iterates inside the feasible amplitude swing of the model.
        np.clip(w, -2.0, 2.0, out=w)
        return w

    w0 = INIT_SCALE * key.direction
    w, _, _ = minimize(w0, loss_and_grad, opt, postprocess=box_project)
    return WatermarkModel(
        key_id=key.id,
        w=w,
        lambdas=tuple(float(l) for l in lambdas),
        robust=suite_to_dict(suite) if suite is not None else None,
        training_log=tuple(log),
    )


def train(
    key: Key,
    source: SampleSource,
    lambdas: tuple[float, float, float] = DEFAULT_LAMBDAS,
    opt: OptimizerConfig | None = None,
    seed: int | tuple[int, ...] = 0,
) -> WatermarkModel:
    """Train a watermark under the combined objective."""

    return _train_impl(key, source, lambdas, opt, seed, suite=None)


def train_robust(
    key: Key,
    source: SampleSource,
    suite: AttackSuite,
    lambdas: tuple[float, float, float] = DEFAULT_LAMBDAS,
    opt: OptimizerConfig | None = None,
    seed: int | tuple[int, ...] = 0,
) -> WatermarkModel:
    """Train a watermark whose hinge sees independently sampled attacks."""

    return _train_impl(key, source, lambdas, opt, seed, suite=suite)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def model_to_dict(model: WatermarkModel, log_path: str | None = None) -> dict:
    return {
        "version": MODEL_FORMAT_VERSION,
        "key_id": model.key_id,
        "lambdas": list(model.lambdas),
        "robust_suite": model.robust,
        "w": model.w.tolist(),
        "training_log": log_path,
    }


def save_model(model: WatermarkModel, path: str | Path, log_path: str | Path | None = None) -> None:
    """Write the model JSON and, if requested, its per-iteration loss CSV."""

    log_name = None
    if log_path is not None:
        log_name = Path(log_path).name
        with open(log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iter", "L_h", "L_d", "L_A"])
            for row in model.training_log:
                writer.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3])])
    Path(path).write_text(json.dumps(model_to_dict(model, log_name), indent=1) + "\n")


def model_from_dict(payload: dict) -> WatermarkModel:
    try:
        if payload["version"] != MODEL_FORMAT_VERSION:
            raise FormatError(f"unsupported model file version {payload['version']}")
        robust = payload.get("robust_suite")
        if robust is not None:
            suite_from_dict(robust)  # validate shape
        return WatermarkModel(
            key_id=int(payload["key_id"]),
            w=np.array(payload["w"], dtype=np.float64),
            lambdas=tuple(payload["lambdas"]),
            robust=robust,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed model file: {exc}") from exc


def load_model(path: str | Path) -> WatermarkModel:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc
    return model_from_dict(payload)
