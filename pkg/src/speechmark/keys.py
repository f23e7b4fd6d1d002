"""User key generation and the sufficient conditions for reliable attribution.

A key is a unit direction in waveform space plus a free bias; its binary
classifier is the sign of ``direction . x + bias``. Keys are trained to
classify every authentic clip as negative (data compliance) while staying
mutually orthogonal, which together bound the attribution accuracy of the
resulting watermarked models from below.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import AudioClip, Dataset
from .errors import ContractError, FormatError, NumericError, StaleKeysError
from .optim import OptimizerConfig, minimize

KEYS_FORMAT_VERSION = 1
COMPLIANCE_THRESHOLD = 0.99
UNIT_NORM_TOL = 1e-9


@dataclass(frozen=True)
class Key:
    """A unit-norm direction plus scalar bias; one user's binary classifier."""

    direction: np.ndarray
    bias: float
    id: int

    def __post_init__(self) -> None:
        arr = np.array(self.direction, dtype=np.float64, copy=True)
        if arr.ndim != 1 or arr.size == 0:
            raise ContractError("key direction must be a non-empty 1-D vector")
        if not np.all(np.isfinite(arr)) or not np.isfinite(self.bias):
            raise ContractError("key direction and bias must be finite")
        norm = float(np.linalg.norm(arr))
        if abs(norm - 1.0) > UNIT_NORM_TOL:
            raise ContractError(f"key direction must have unit norm, got {norm!r}")
        arr.setflags(write=False)
        object.__setattr__(self, "direction", arr)

    @property
    def d_x(self) -> int:
        return self.direction.shape[0]


@dataclass(frozen=True)
class KeySet:
    """Ordered keys with their worst pairwise direction inner product."""

    keys: tuple[Key, ...]
    gram_max: float
    dataset_hash: str

    def __post_init__(self) -> None:
        if not self.keys:
            raise ContractError("key set must contain at least one key")
        ids = [k.id for k in self.keys]
        if ids != list(range(1, len(self.keys) + 1)):
            raise ContractError(f"key ids must be 1..N consecutive, got {ids}")
        d = self.keys[0].d_x
        if any(k.d_x != d for k in self.keys):
            raise ContractError("all keys must share the same dimension")

    @property
    def n_keys(self) -> int:
        return len(self.keys)

    @property
    def d_x(self) -> int:
        return self.keys[0].d_x

    def direction_matrix(self) -> np.ndarray:
        return np.stack([k.direction for k in self.keys])

    def biases(self) -> np.ndarray:
        return np.array([k.bias for k in self.keys])

    @classmethod
    def from_keys(cls, keys: list[Key] | tuple[Key, ...], dataset_hash: str) -> "KeySet":
        return cls(tuple(keys), gram_max(list(keys)), dataset_hash)


@dataclass(frozen=True)
class KeyGenResult:
    """A generated key plus convergence metadata (not persisted with the key)."""

    key: Key
    compliance_rate: float
    iterations: int
    converged: bool
    final_loss: float


@dataclass(frozen=True)
class ConditionReport:
    """Per-key margins and pairwise angle checks for the attribution bound.

    ``pairwise_ok[i, j]`` is true when the inner product of directions i and j
    does not exceed min(d_min_i / d_max_i, d_min_j / d_max_j); with
    nonpositive inner products this holds automatically. ``bound`` is the
    implied lower bound max(0, 1 - N * delta) on attribution accuracy.
    """

    d_min: np.ndarray
    d_max: np.ndarray
    compliance_rate: np.ndarray
    pairwise_ok: np.ndarray
    delta: float
    bound: float

    @property
    def all_pairwise_ok(self) -> bool:
        n = self.pairwise_ok.shape[0]
        off = ~np.eye(n, dtype=bool)
        return bool(np.all(self.pairwise_ok[off]))

    def to_dict(self) -> dict:
        return {
            "d_min": self.d_min.tolist(),
            "d_max": self.d_max.tolist(),
            "compliance_rate": self.compliance_rate.tolist(),
            "pairwise_ok": self.pairwise_ok.tolist(),
            "delta": self.delta,
            "bound": self.bound,
        }


def gram_max(keys: list[Key]) -> float:
    """Largest off-diagonal inner product among key directions (0.0 for N=1)."""

    if len(keys) < 2:
        return 0.0
    dirs = np.stack([k.direction for k in keys])
    gram = dirs @ dirs.T
    np.fill_diagonal(gram, -np.inf)
    return float(np.max(gram))


def classifier_score(key: Key, clip: AudioClip) -> float:
    """Raw classifier margin ``direction . samples + bias``; its sign is the label."""

    if clip.d_x != key.d_x:
        raise ContractError(f"clip length {clip.d_x} != key dimension {key.d_x}")
    return float(key.direction @ clip.samples + key.bias)


def score_matrix(key: Key, matrix: np.ndarray) -> np.ndarray:
    """Margins of one key over a (n, d_x) sample matrix."""

    if matrix.shape[1] != key.d_x:
        raise ContractError(f"sample dimension {matrix.shape[1]} != key dimension {key.d_x}")
    return matrix @ key.direction + key.bias


def _orthonormal_rows(existing: KeySet | None, d_x: int) -> np.ndarray | None:
    if existing is None or existing.n_keys == 0:
        return None
    if existing.d_x != d_x:
        raise ContractError("existing keys have a different dimension than the dataset")
    return existing.direction_matrix()


def generate_key(
    dataset: Dataset,
    existing: KeySet | None,
    opt: OptimizerConfig | None = None,
    seed: int | tuple[int, ...] = 0,
    use_bias: bool = True,
    penalty_weight: float = 1.0,
    orthogonalize: bool = True,
) -> KeyGenResult:
    """Train one new key against the dataset and any previously issued keys.

    Minimizes the compliance hinge ``mean(max(1 + score(x), 0))`` plus the
    one-sided orthogonality penalty ``sum_j max(dir_j . dir, 0)`` over prior
    keys (omitted for the first key). The direction is renormalized to unit
    norm after every optimizer step; with ``orthogonalize`` it is also kept
    inside the orthogonal complement of prior keys, so issued keys are
    mutually orthogonal to working precision rather than merely
    non-positively correlated.
    """

    opt = opt or OptimizerConfig()
    X = dataset.matrix
    n, d_x = X.shape
    prior = _orthonormal_rows(existing, d_x)
    entropy = [seed] if isinstance(seed, int) else list(seed)
    rng = np.random.default_rng(entropy)

    def project(vec: np.ndarray) -> np.ndarray:
        if prior is None or not orthogonalize:
            return vec
        return vec - prior.T @ (prior @ vec)

    direction = project(rng.standard_normal(d_x))
    norm = np.linalg.norm(direction)
    if norm == 0.0:
        raise NumericError("degenerate initialization: no orthogonal direction left")
    direction /= norm
    params = np.concatenate([direction, [0.0]])

    batch = opt.resolve_batch_size(n)
    batch_rng = np.random.default_rng(entropy + [0x0B])

    def loss_and_grad(p: np.ndarray, _it: int) -> tuple[float, np.ndarray]:
        phi, b = p[:-1], p[-1]
        rows = X if batch == n else X[batch_rng.integers(0, n, size=batch)]
        scores = rows @ phi + (b if use_bias else 0.0)
        margins = 1.0 + scores
        active = margins > 0.0
        hinge = float(np.sum(np.maximum(margins, 0.0))) / rows.shape[0]
        g_phi = active @ rows / rows.shape[0]
        g_b = float(np.mean(active)) if use_bias else 0.0
        loss = hinge
        if prior is not None:
            overlaps = prior @ phi
            pos = overlaps > 0.0
            loss += penalty_weight * float(np.sum(overlaps[pos]))
            if np.any(pos):
                g_phi = g_phi + penalty_weight * (pos @ prior)
        # Ride the unit sphere: feed the optimizer only the tangential
        # gradient component. The raw gradient's radial part is cancelled by
        # renormalization anyway, and adaptive per-coordinate scaling of it
        # creates spurious fixed points at sign-vector directions.
        g_phi = project(g_phi)
        g_phi = g_phi - (g_phi @ phi) * phi
        return loss, np.concatenate([g_phi, [g_b]])

    def postprocess(p: np.ndarray) -> np.ndarray:
        phi = project(p[:-1])
        norm = np.linalg.norm(phi)
        if norm == 0.0:
            raise NumericError("direction collapsed to zero during training")
        p[:-1] = phi / norm
        if not use_bias:
            p[-1] = 0.0
        return p

    params, final_loss, iters = minimize(params, loss_and_grad, opt, postprocess=postprocess)
    direction, bias = params[:-1], float(params[-1])
    key_id = 1 if existing is None else existing.n_keys + 1
    key = Key(direction, bias if use_bias else 0.0, key_id)
    compliance = float(np.mean(score_matrix(key, X) < 0.0))
    return KeyGenResult(
        key=key,
        compliance_rate=compliance,
        iterations=iters,
        converged=compliance >= COMPLIANCE_THRESHOLD,
        final_loss=final_loss,
    )


def generate_keyset(
    dataset: Dataset,
    n_keys: int,
    opt: OptimizerConfig | None = None,
    seed: int = 0,
    use_bias: bool = True,
    orthogonalize: bool = True,
) -> tuple[KeySet, list[KeyGenResult]]:
    """Iteratively generate ``n_keys`` keys bound to the dataset."""

    if n_keys < 1:
        raise ContractError("n_keys must be >= 1")
    results: list[KeyGenResult] = []
    keyset: KeySet | None = None
    for i in range(n_keys):
        result = generate_key(
            dataset, keyset, opt, seed=(seed, i), use_bias=use_bias,
            orthogonalize=orthogonalize,
        )
        results.append(result)
        keyset = KeySet.from_keys([r.key for r in results], dataset.content_hash)
    assert keyset is not None
    return keyset, results


def check_conditions(
    keys: KeySet,
    dataset: Dataset,
    measured_delta: float,
    allow_hash_mismatch: bool = False,
) -> ConditionReport:
    """Evaluate per-key margins and the pairwise angle condition on a dataset.

    ``measured_delta`` is the worst-case distinguishability shortfall
    (1 - D) measured for the corresponding watermarked models; the returned
    bound is max(0, 1 - N * measured_delta).
    """

    if keys.dataset_hash != dataset.content_hash and not allow_hash_mismatch:
        raise StaleKeysError(
            "keys were generated against a different dataset "
            f"(key hash {keys.dataset_hash[:12]}..., dataset hash {dataset.content_hash[:12]}...)"
        )
    if keys.d_x != dataset.d_x:
        raise ContractError("key dimension does not match dataset dimension")
    dirs = keys.direction_matrix()
    biases = keys.biases()
    scores = dataset.matrix @ dirs.T + biases  # (n, N)
    abs_scores = np.abs(scores)
    d_min = abs_scores.min(axis=0)
    d_max = abs_scores.max(axis=0)
    compliance = np.mean(scores < 0.0, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(d_max > 0.0, d_min / d_max, 0.0)
    gram = dirs @ dirs.T
    limits = np.minimum(ratios[:, None], ratios[None, :])
    pairwise_ok = gram <= limits
    np.fill_diagonal(pairwise_ok, True)
    n = keys.n_keys
    bound = max(0.0, 1.0 - n * measured_delta)
    return ConditionReport(
        d_min=d_min,
        d_max=d_max,
        compliance_rate=compliance,
        pairwise_ok=pairwise_ok,
        delta=float(measured_delta),
        bound=bound,
    )


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def keyset_to_dict(keys: KeySet, d_x: int, sample_rate: int) -> dict:
    return {
        "version": KEYS_FORMAT_VERSION,
        "d_x": d_x,
        "sample_rate": sample_rate,
        "dataset_hash": keys.dataset_hash,
        "gram_max": keys.gram_max,
        "keys": [
            {"id": k.id, "bias": k.bias, "direction": k.direction.tolist()}
            for k in keys.keys
        ],
    }


def save_keys(keys: KeySet, path: str | Path, sample_rate: int) -> None:
    payload = keyset_to_dict(keys, keys.d_x, sample_rate)
    Path(path).write_text(json.dumps(payload, indent=1) + "\n")


def keyset_from_dict(payload: dict) -> KeySet:
    try:
        version = payload["version"]
        if version != KEYS_FORMAT_VERSION:
            raise FormatError(f"unsupported key file version {version}")
        keys = [
            Key(np.array(entry["direction"], dtype=np.float64), float(entry["bias"]), int(entry["id"]))
            for entry in payload["keys"]
        ]
        stored_gram = float(payload["gram_max"])
        dataset_hash = payload["dataset_hash"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed key file: {exc}") from exc
    recomputed = gram_max(keys)
    if abs(recomputed - stored_gram) > 1e-9:
        raise FormatError(
            f"key file gram_max {stored_gram!r} does not match recomputed {recomputed!r}"
        )
    return KeySet(tuple(keys), stored_gram, dataset_hash)


def load_keys(path: str | Path) -> KeySet:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc
    return keyset_from_dict(payload)
