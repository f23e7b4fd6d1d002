"""Evaluation metrics: distinguishability, attributability, Fréchet spectrogram
distance, and the collusion-attack verification.

A margin of exactly zero counts as misclassified on both sides of every
metric, so ties never inflate accuracy. The quality metric is named FSD
(Fréchet Spectrogram Distance) in all outputs: the standard Fréchet Gaussian
distance computed over time-averaged log-mel features.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .audio import mel_frames
from .errors import ContractError, NumericError
from .keys import Key, KeySet

COV_RIDGE = 1e-6


@dataclass(frozen=True)
class GaussianStats:
    """Mean and covariance of per-clip features."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self) -> None:
        if self.covariance.shape != (self.mean.shape[0], self.mean.shape[0]):
            raise ContractError("covariance shape does not match mean dimension")
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.covariance))):
            raise NumericError("feature statistics must be finite")


@dataclass(frozen=True)
class EvalReport:
    """Per-model and aggregate evaluation results.

    ``per_model`` rows carry key_id, distinguishability, compliance (accuracy
    on the authentic side), per-model FSD, and post-attack distinguishability
    keyed by attack label. ``quality`` is the FSD between the pooled
    watermarked outputs and the authentic samples.
    """

    per_model: tuple[dict, ...]
    attributability: float
    post_attack_attributability: dict[str, float]
    quality: float
    n_samples: int
    seed: int

    def __post_init__(self) -> None:
        rates = [self.attributability, *self.post_attack_attributability.values()]
        for row in self.per_model:
            rates.extend([row["distinguishability"], row["compliance"]])
            rates.extend(row.get("post_attack", {}).values())
        if any(r < 0.0 or r > 1.0 for r in rates):
            raise ContractError("all rates must lie in [0, 1]")
        if self.quality < 0.0:
            raise ContractError("quality must be nonnegative")

    def mean_distinguishability(self) -> float:
        return float(np.mean([row["distinguishability"] for row in self.per_model]))

    def to_dict(self) -> dict:
        return {
            "per_model": list(self.per_model),
            "attributability": self.attributability,
            "post_attack_attributability": dict(self.post_attack_attributability),
            "quality_fsd": self.quality,
            "n_samples": self.n_samples,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class CollusionReport:
    """Third-party scores over the interpolation grid between two sources."""

    premise_met: bool
    lambdas: np.ndarray
    scores: np.ndarray  # (n_lambdas, n_other_keys)
    other_key_ids: tuple[int, ...]
    violations: int

    def to_dict(self) -> dict:
        return {
            "premise_met": self.premise_met,
            "lambdas": self.lambdas.tolist(),
            "other_key_ids": list(self.other_key_ids),
            "scores": self.scores.tolist(),
            "violations": self.violations,
        }


def distinguishability(key: Key, generated: np.ndarray, authentic: np.ndarray) -> float:
    """Balanced accuracy of the key separating generated from authentic samples.

    One half times (fraction of generated with positive margin plus fraction
    of authentic with negative margin).
    """

    if generated.shape[0] == 0 or authentic.shape[0] == 0:
        raise ContractError("both sample sets must be non-empty")
    gen_scores = generated @ key.direction + key.bias
    auth_scores = authentic @ key.direction + key.bias
    return 0.5 * (float(np.mean(gen_scores > 0.0)) + float(np.mean(auth_scores < 0.0)))


def attributability(keys: KeySet, per_model_samples: list[np.ndarray]) -> float:
    """Fraction of samples for which exactly the owning key fires.

    ``per_model_samples[i]`` holds outputs of the model owning key i+1; a
    sample counts as correct when its own key's margin is positive and every
    other key's margin is negative.
    """

    if len(per_model_samples) != keys.n_keys:
        raise ContractError(
            f"expected {keys.n_keys} sample sets, got {len(per_model_samples)}"
        )
    dirs = keys.direction_matrix()
    biases = keys.biases()
    total = 0.0
    for i, samples in enumerate(per_model_samples):
        if samples.shape[0] == 0:
            raise ContractError("sample sets must be non-empty")
        scores = samples @ dirs.T + biases  # (n, N)
        own_positive = scores[:, i] > 0.0
        others = np.delete(scores, i, axis=1)
        others_negative = np.all(others < 0.0, axis=1)
        total += float(np.mean(own_positive & others_negative))
    return total / keys.n_keys


# ---------------------------------------------------------------------------
# Fréchet spectrogram distance
# ---------------------------------------------------------------------------


def clip_features(matrix: np.ndarray, sample_rate: int) -> GaussianStats:
    """Gaussian fit of time-averaged log-mel features across clips.

    With fewer clips than features + 1 the covariance is regularized by a
    small ridge to stay usable.
    """

    feats = mel_frames(matrix, sample_rate).mean(axis=1)  # (n, n_mels)
    mean = feats.mean(axis=0)
    n, dim = feats.shape
    if n >= 2:
        cov = np.cov(feats, rowvar=False, ddof=1)
    else:
        cov = np.zeros((dim, dim))
    cov = np.atleast_2d(cov)
    if n < dim + 1:
        cov = cov + COV_RIDGE * np.eye(dim)
    return GaussianStats(mean=mean, covariance=0.5 * (cov + cov.T))


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    eigvals, eigvecs = np.linalg.eigh(mat)
    return (eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))) @ eigvecs.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """Fréchet distance between two Gaussians:

        |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The cross term uses the eigendecomposition of the symmetrized product
    sqrt(S_a) S_b sqrt(S_a); negative eigenvalues from roundoff are clipped
    at zero. Tiny negative totals from roundoff are clipped as well.
    """

    if a.mean.shape != b.mean.shape:
        raise ContractError("feature statistics have mismatched dimensions")
    diff = a.mean - b.mean
    root_a = _psd_sqrt(a.covariance)
    inner = root_a @ b.covariance @ root_a
    inner = 0.5 * (inner + inner.T)
    eigvals = np.linalg.eigvalsh(inner)
    cross = float(np.sum(np.sqrt(np.clip(eigvals, 0.0, None))))
    value = float(diff @ diff + np.trace(a.covariance) + np.trace(b.covariance) - 2.0 * cross)
    if not np.isfinite(value):
        raise NumericError("Fréchet distance is not finite")
    return max(value, 0.0)


def fsd(generated: np.ndarray, authentic: np.ndarray, sample_rate: int) -> float:
    """Fréchet spectrogram distance between generated and authentic clips."""

    return frechet_distance(clip_features(generated, sample_rate),
                            clip_features(authentic, sample_rate))


# ---------------------------------------------------------------------------
# Collusion attack verification
# ---------------------------------------------------------------------------


def collusion_check(
    keys: KeySet,
    x1: np.ndarray,
    x2: np.ndarray,
    source_i: int,
    source_j: int,
    lambdas: np.ndarray | None = None,
) -> CollusionReport:
    """Scores of all third-party keys on interpolants of two attributed clips.

    Verifies the premise that every key other than the two sources scores
    both clips negative; when it holds, interpolated scores are affine in
    lambda and violations are exactly zero. Interpolants are scored raw,
    without clamping.
    """

    if lambdas is None:
        lambdas = np.linspace(0.0, 1.0, 11)
    lambdas = np.asarray(lambdas, dtype=np.float64)
    if x1.shape != x2.shape or x1.shape[0] != keys.d_x:
        raise ContractError("clips must match the key dimension")
    ids = {k.id for k in keys.keys}
    if source_i not in ids or source_j not in ids or source_i == source_j:
        raise ContractError("source key ids must be two distinct registered ids")
    others = [k for k in keys.keys if k.id not in (source_i, source_j)]
    if not others:
        return CollusionReport(True, lambdas, np.zeros((lambdas.shape[0], 0)), (), 0)
    dirs = np.stack([k.direction for k in others])
    biases = np.array([k.bias for k in others])
    s1 = dirs @ x1 + biases
    s2 = dirs @ x2 + biases
    premise = bool(np.all(s1 < 0.0) and np.all(s2 < 0.0))
    interpolants = lambdas[:, None] * x1[None, :] + (1.0 - lambdas)[:, None] * x2[None, :]
    scores = interpolants @ dirs.T + biases
    violations = int(np.sum(scores > 0.0))
    return CollusionReport(
        premise_met=premise,
        lambdas=lambdas,
        scores=scores,
        other_key_ids=tuple(k.id for k in others),
        violations=violations,
    )
