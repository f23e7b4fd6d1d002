"""Seedable adversarial post-processing transforms on fixed-length waveforms.

Every attack maps a (k, d_x) batch to a (k, d_x) batch, clamps its output to
[-1, 1], and is linear or affine in the input before the clamp. Each batch
kernel returns a context with a ``vjp`` so gradients can flow through
sampled attacks during robust watermark training: noise is an offset
(its scale is treated as constant), gain is diagonal, resampling is a fixed
sparse linear map, and the brick-wall filter is an orthogonal projection and
therefore self-adjoint.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .audio import AudioClip
from .errors import ConfigError, ContractError, DegenerateInputError, FormatError

SUITE_FORMAT_VERSION = 1

NOISE_ALPHAS = {"brown": -2.0, "pink": -1.0, "blue": 1.0, "violet": 2.0, "white": 0.0}
DEFAULT_COLORS = ("brown", "pink", "blue", "violet")
ATTACK_KINDS = ("identity", "noise", "gain", "speed", "pass_filter", "combination")

# Stage order inside a combination attack; also indexes its seed substreams.
COMBINATION_STAGES = ("noise", "gain", "speed", "pass_filter")


# ---------------------------------------------------------------------------
# Parameter types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseParams:
    colors: tuple[str, ...] = DEFAULT_COLORS
    snr_db_range: tuple[float, float] = (3.0, 30.0)

    def __post_init__(self) -> None:
        if not self.colors:
            raise ConfigError("noise attack needs at least one color")
        unknown = [c for c in self.colors if c not in NOISE_ALPHAS]
        if unknown:
            raise ConfigError(f"unknown noise colors: {unknown}")
        lo, hi = self.snr_db_range
        if lo > hi:
            raise ConfigError("snr_db_range low must be <= high")


@dataclass(frozen=True)
class GainParams:
    gain_db_range: tuple[float, float] = (-18.0, 6.0)

    def __post_init__(self) -> None:
        lo, hi = self.gain_db_range
        if lo > hi:
            raise ConfigError("gain_db_range low must be <= high")


@dataclass(frozen=True)
class SpeedParams:
    percentages: tuple[float, ...] = (80.0, 90.0, 110.0)

    def __post_init__(self) -> None:
        if not self.percentages or any(p <= 0 for p in self.percentages):
            raise ConfigError("speed percentages must be positive")


@dataclass(frozen=True)
class FilterParams:
    low_pass_cutoff_range: tuple[float, float] = (2200.0, 4000.0)
    high_pass_cutoff_range: tuple[float, float] = (200.0, 1200.0)

    def __post_init__(self) -> None:
        for lo, hi in (self.low_pass_cutoff_range, self.high_pass_cutoff_range):
            if lo > hi or lo < 0:
                raise ConfigError("cutoff ranges must be nonnegative with low <= high")

    def validate_rate(self, sample_rate: int) -> None:
        nyquist = sample_rate / 2.0
        if self.low_pass_cutoff_range[1] >= nyquist or self.high_pass_cutoff_range[1] >= nyquist:
            raise ConfigError(f"filter cutoffs must stay below the Nyquist frequency {nyquist}")


@dataclass(frozen=True)
class CombinationParams:
    noise: NoiseParams = field(default_factory=NoiseParams)
    gain: GainParams = field(default_factory=GainParams)
    speed: SpeedParams = field(default_factory=SpeedParams)
    pass_filter: FilterParams = field(default_factory=FilterParams)
    apply_probability: float = 0.5


@dataclass(frozen=True)
class AttackSpec:
    """One attack kind with its parameter ranges and a selection weight."""

    kind: str
    params: NoiseParams | GainParams | SpeedParams | FilterParams | CombinationParams | None = None
    probability: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in ATTACK_KINDS:
            raise ConfigError(f"unknown attack kind {self.kind!r}")
        if self.params is None and self.kind != "identity":
            object.__setattr__(self, "params", default_params(self.kind))
        if self.probability <= 0:
            raise ConfigError("attack probability must be positive")


@dataclass(frozen=True)
class AttackSuite:
    """A distribution over attacks: specs are sampled by relative weight."""

    attacks: tuple[AttackSpec, ...]
    master_seed: int = 0

    def __post_init__(self) -> None:
        if not self.attacks:
            raise ConfigError("attack suite must contain at least one attack")

    def weights(self) -> np.ndarray:
        w = np.array([a.probability for a in self.attacks], dtype=np.float64)
        return w / w.sum()


def default_params(kind: str):
    return {
        "noise": NoiseParams(),
        "gain": GainParams(),
        "speed": SpeedParams(),
        "pass_filter": FilterParams(),
        "combination": CombinationParams(),
        "identity": None,
    }[kind]


# ---------------------------------------------------------------------------
# Colored noise
# ---------------------------------------------------------------------------


def _unit_noise_rows(alphas: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Rows of unit-RMS noise with per-row spectral slope ``alphas``."""

    white = rng.standard_normal((alphas.shape[0], n))
    spectrum = np.fft.rfft(white, axis=1)
    freqs = np.fft.rfftfreq(n)
    shaping = np.zeros((alphas.shape[0], freqs.shape[0]))
    nonzero = freqs > 0
    shaping[:, nonzero] = freqs[None, nonzero] ** (alphas[:, None] / 2.0)
    out = np.fft.irfft(spectrum * shaping, n=n)
    rms = np.sqrt(np.mean(out**2, axis=1, keepdims=True))
    return out / rms


def colored_noise(kind: str, n: int, seed: int | tuple[int, ...]) -> np.ndarray:
    """Unit-RMS noise of length ``n`` whose power spectrum follows f**alpha.

    Slopes: brown -2, pink -1, blue +1, violet +2 (white 0 is available but
    not part of the default color set). The DC bin is zeroed.
    """

    if n < 2:
        raise ContractError("noise length must be >= 2")
    if kind not in NOISE_ALPHAS:
        raise ConfigError(f"unknown noise color {kind!r}")
    rng = np.random.default_rng(seed)
    return _unit_noise_rows(np.array([NOISE_ALPHAS[kind]]), n, rng)[0]


# ---------------------------------------------------------------------------
# Batch kernels with vector-Jacobian products
# ---------------------------------------------------------------------------


@dataclass
class BatchAttack:
    """A realized attack on a (k, d_x) batch: forward plus gradient transport."""

    forward: Callable[[np.ndarray], np.ndarray]
    vjp: Callable[[np.ndarray], np.ndarray]


def _clamp_ctx(pre: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return np.clip(pre, -1.0, 1.0), np.abs(pre) < 1.0


def _identity_batch() -> BatchAttack:
    return BatchAttack(forward=lambda X: X, vjp=lambda G: G)


def _noise_batch(colors_idx: np.ndarray, snrs_db: np.ndarray, color_names: tuple[str, ...],
                 d_x: int, rng: np.random.Generator) -> BatchAttack:
    alphas = np.array([NOISE_ALPHAS[color_names[i]] for i in colors_idx])
    nu = _unit_noise_rows(alphas, d_x, rng)
    state: dict = {}

    def forward(X: np.ndarray) -> np.ndarray:
        power = np.mean(X**2, axis=1)
        if np.any(power <= 0.0):
            raise DegenerateInputError("cannot set an SNR against a silent signal")
        sigma = np.sqrt(power * 10.0 ** (-snrs_db / 10.0))
        out, mask = _clamp_ctx(X + sigma[:, None] * nu)
        state["mask"] = mask
        return out

    def vjp(G: np.ndarray) -> np.ndarray:
        # Noise scale is treated as constant with respect to the input.
        return G * state["mask"]

    return BatchAttack(forward, vjp)


def _gain_batch(gains_db: np.ndarray) -> BatchAttack:
    factors = 10.0 ** (gains_db / 20.0)
    state: dict = {}

    def forward(X: np.ndarray) -> np.ndarray:
        out, mask = _clamp_ctx(factors[:, None] * X)
        state["mask"] = mask
        return out

    def vjp(G: np.ndarray) -> np.ndarray:
        return factors[:, None] * (G * state["mask"])

    return BatchAttack(forward, vjp)


def resampled_length(d_x: int, percentage: float) -> int:
    return int(np.round(d_x * 100.0 / percentage))


def _interp_weights(d_x: int, m: int) -> tuple[np.ndarray, np.ndarray]:
    positions = np.linspace(0.0, d_x - 1.0, m)
    idx = np.minimum(positions.astype(np.int64), d_x - 2)
    frac = positions - idx
    return idx, frac


def _speed_batch(percentages: np.ndarray, d_x: int) -> BatchAttack:
    state: dict = {}

    def forward(X: np.ndarray) -> np.ndarray:
        out = np.zeros_like(X)
        groups = []
        for p in np.unique(percentages):
            rows = np.where(percentages == p)[0]
            m = resampled_length(d_x, float(p))
            idx, frac = _interp_weights(d_x, m)
            y = X[rows][:, idx] * (1.0 - frac) + X[rows][:, idx + 1] * frac
            if m >= d_x:
                out[rows] = y[:, :d_x]
            else:
                out[rows, :m] = y
            groups.append((rows, m, idx, frac))
        clamped, mask = _clamp_ctx(out)
        state["groups"], state["mask"] = groups, mask
        return clamped

    def vjp(G: np.ndarray) -> np.ndarray:
        G = G * state["mask"]
        out = np.zeros_like(G)
        for rows, m, idx, frac in state["groups"]:
            if m >= d_x:
                Gy = np.zeros((rows.shape[0], m))
                Gy[:, :d_x] = G[rows]
            else:
                Gy = G[rows, :m]
            acc = np.zeros((rows.shape[0], d_x))
            np.add.at(acc, (slice(None), idx), Gy * (1.0 - frac))
            np.add.at(acc, (slice(None), idx + 1), Gy * frac)
            out[rows] = acc
        return out

    return BatchAttack(forward, vjp)


def _filter_rows(X: np.ndarray, keep: np.ndarray) -> np.ndarray:
    spectrum = np.fft.rfft(X, axis=1)
    return np.fft.irfft(spectrum * keep, n=X.shape[1])


def _pass_filter_batch(lp_cutoffs: np.ndarray, hp_cutoffs: np.ndarray,
                       d_x: int, sample_rate: int) -> BatchAttack:
    freqs = np.fft.rfftfreq(d_x, d=1.0 / sample_rate)
    keep = (freqs[None, :] >= hp_cutoffs[:, None]) & (freqs[None, :] <= lp_cutoffs[:, None])
    state: dict = {}

    def forward(X: np.ndarray) -> np.ndarray:
        out, mask = _clamp_ctx(_filter_rows(X, keep))
        state["mask"] = mask
        return out

    def vjp(G: np.ndarray) -> np.ndarray:
        # The brick-wall band limiter is an orthogonal projection, hence
        # self-adjoint: transporting gradients applies the same filter.
        return _filter_rows(G * state["mask"], keep)

    return BatchAttack(forward, vjp)


def _combination_batch(params: CombinationParams, k: int, d_x: int, sample_rate: int,
                       seed_entropy: list[int]) -> BatchAttack:
    coin_rng = np.random.default_rng(seed_entropy + [0])
    fires = coin_rng.random((k, len(COMBINATION_STAGES))) < params.apply_probability
    stages: list[tuple[np.ndarray, BatchAttack]] = []
    for s, stage in enumerate(COMBINATION_STAGES):
        rows = np.where(fires[:, s])[0]
        if rows.size == 0:
            continue
        stage_rng = np.random.default_rng(seed_entropy + [s + 1])
        sub = _sample_kind_batch(stage, _stage_params(params, stage), rows.size, d_x,
                                 sample_rate, stage_rng)
        stages.append((rows, sub))

    def forward(X: np.ndarray) -> np.ndarray:
        out = np.array(X, copy=True)
        for rows, sub in stages:
            out[rows] = sub.forward(out[rows])
        return out

    def vjp(G: np.ndarray) -> np.ndarray:
        out = np.array(G, copy=True)
        for rows, sub in reversed(stages):
            out[rows] = sub.vjp(out[rows])
        return out

    return BatchAttack(forward, vjp)


def _stage_params(params: CombinationParams, stage: str):
    return {"noise": params.noise, "gain": params.gain,
            "speed": params.speed, "pass_filter": params.pass_filter}[stage]


def _sample_kind_batch(kind: str, params, k: int, d_x: int, sample_rate: int,
                       rng: np.random.Generator,
                       seed_entropy: list[int] | None = None) -> BatchAttack:
    """Draw attack randomness for ``k`` rows and return the realized kernel."""

    if kind == "identity":
        return _identity_batch()
    if kind == "noise":
        colors_idx = rng.integers(0, len(params.colors), size=k)
        snrs = rng.uniform(*params.snr_db_range, size=k)
        return _noise_batch(colors_idx, snrs, params.colors, d_x, rng)
    if kind == "gain":
        gains = rng.uniform(*params.gain_db_range, size=k)
        return _gain_batch(gains)
    if kind == "speed":
        choices = np.array(params.percentages)
        percentages = choices[rng.integers(0, choices.shape[0], size=k)]
        return _speed_batch(percentages, d_x)
    if kind == "pass_filter":
        params.validate_rate(sample_rate)
        lp = rng.uniform(*params.low_pass_cutoff_range, size=k)
        hp = rng.uniform(*params.high_pass_cutoff_range, size=k)
        return _pass_filter_batch(lp, hp, d_x, sample_rate)
    if kind == "combination":
        if seed_entropy is None:
            raise ContractError("combination attacks need an explicit seed stream")
        return _combination_batch(params, k, d_x, sample_rate, seed_entropy)
    raise ConfigError(f"unknown attack kind {kind!r}")


def sample_suite_batch(suite: AttackSuite, k: int, d_x: int, sample_rate: int,
                       seed: int | tuple[int, ...] | list[int]) -> BatchAttack:
    """Sample one attack per batch row from the suite and realize its randomness.

    Rows are partitioned among the suite's specs by their selection weights;
    all randomness derives from ``seed`` alone.
    """

    entropy = [seed] if isinstance(seed, int) else list(seed)
    select_rng = np.random.default_rng(entropy + [0x5E1])
    weights = suite.weights()
    choice = select_rng.choice(len(suite.attacks), size=k, p=weights)
    parts: list[tuple[np.ndarray, BatchAttack]] = []
    for a, spec in enumerate(suite.attacks):
        rows = np.where(choice == a)[0]
        if rows.size == 0:
            continue
        spec_rng = np.random.default_rng(entropy + [a + 1])
        sub = _sample_kind_batch(spec.kind, spec.params, rows.size, d_x, sample_rate,
                                 spec_rng, seed_entropy=entropy + [a + 1, 0xC0])
        parts.append((rows, sub))

    def forward(X: np.ndarray) -> np.ndarray:
        out = np.array(X, copy=True)
        for rows, sub in parts:
            out[rows] = sub.forward(out[rows])
        return out

    def vjp(G: np.ndarray) -> np.ndarray:
        out = np.array(G, copy=True)
        for rows, sub in parts:
            out[rows] = sub.vjp(out[rows])
        return out

    return BatchAttack(forward, vjp)


# ---------------------------------------------------------------------------
# Single-clip operations
# ---------------------------------------------------------------------------


def _entropy(seed: int | tuple[int, ...] | list[int]) -> list[int]:
    return [seed] if isinstance(seed, int) else list(seed)


def add_noise(clip: AudioClip, params: NoiseParams | None = None,
              seed: int | tuple[int, ...] = 0) -> AudioClip:
    """Add colored noise at a seeded random SNR drawn from the configured range."""

    params = params or NoiseParams()
    if float(np.mean(clip.samples**2)) <= 0.0:
        raise DegenerateInputError("cannot add noise at a target SNR to a silent clip")
    rng = np.random.default_rng(_entropy(seed))
    kernel = _sample_kind_batch("noise", params, 1, clip.d_x, clip.sample_rate, rng)
    return AudioClip(kernel.forward(clip.samples[None, :])[0], clip.sample_rate)


def gain(clip: AudioClip, params: GainParams | None = None,
         seed: int | tuple[int, ...] = 0) -> AudioClip:
    """Scale by a seeded random gain factor drawn in dB, then clamp."""

    params = params or GainParams()
    rng = np.random.default_rng(_entropy(seed))
    kernel = _sample_kind_batch("gain", params, 1, clip.d_x, clip.sample_rate, rng)
    return AudioClip(kernel.forward(clip.samples[None, :])[0], clip.sample_rate)


def speed_change(clip: AudioClip, params: SpeedParams | None = None,
                 seed: int | tuple[int, ...] = 0) -> AudioClip:
    """Linearly resample to a seeded random speed, then pad or truncate to d_x."""

    params = params or SpeedParams()
    rng = np.random.default_rng(_entropy(seed))
    kernel = _sample_kind_batch("speed", params, 1, clip.d_x, clip.sample_rate, rng)
    return AudioClip(kernel.forward(clip.samples[None, :])[0], clip.sample_rate)


def pass_filter(clip: AudioClip, params: FilterParams | None = None,
                seed: int | tuple[int, ...] = 0) -> AudioClip:
    """Brick-wall band limiting with seeded random low/high-pass cutoffs."""

    params = params or FilterParams()
    rng = np.random.default_rng(_entropy(seed))
    kernel = _sample_kind_batch("pass_filter", params, 1, clip.d_x, clip.sample_rate, rng)
    return AudioClip(kernel.forward(clip.samples[None, :])[0], clip.sample_rate)


def combination(clip: AudioClip, params: CombinationParams | None = None,
                seed: int | tuple[int, ...] = 0) -> AudioClip:
    """Apply noise, gain, speed, and pass-filter in order, each with probability 0.5.

    Coin flips come from substream [seed, 0]; stage s draws its parameters
    from substream [seed, s+1], so a combination where only one stage fires
    reproduces that stage invoked directly with its substream.
    """

    params = params or CombinationParams()
    kernel = _combination_batch(params, 1, clip.d_x, clip.sample_rate, _entropy(seed))
    return AudioClip(kernel.forward(clip.samples[None, :])[0], clip.sample_rate)


# ---------------------------------------------------------------------------
# Suite persistence
# ---------------------------------------------------------------------------


def _params_to_dict(kind: str, params) -> dict:
    if kind == "identity":
        return {}
    if kind == "noise":
        return {"colors": list(params.colors), "snr_db_range": list(params.snr_db_range)}
    if kind == "gain":
        return {"gain_db_range": list(params.gain_db_range)}
    if kind == "speed":
        return {"percentages": list(params.percentages)}
    if kind == "pass_filter":
        return {"low_pass_cutoff_range": list(params.low_pass_cutoff_range),
                "high_pass_cutoff_range": list(params.high_pass_cutoff_range)}
    if kind == "combination":
        return {
            "noise": _params_to_dict("noise", params.noise),
            "gain": _params_to_dict("gain", params.gain),
            "speed": _params_to_dict("speed", params.speed),
            "pass_filter": _params_to_dict("pass_filter", params.pass_filter),
            "apply_probability": params.apply_probability,
            "stage_order": list(COMBINATION_STAGES),
        }
    raise ConfigError(f"unknown attack kind {kind!r}")


_KNOWN_PARAM_KEYS = {
    "identity": set(),
    "noise": {"colors", "snr_db_range"},
    "gain": {"gain_db_range"},
    "speed": {"percentages"},
    "pass_filter": {"low_pass_cutoff_range", "high_pass_cutoff_range"},
    "combination": {"noise", "gain", "speed", "pass_filter", "apply_probability",
                    "stage_order"},
}


def _params_from_dict(kind: str, data: dict):
    if kind not in _KNOWN_PARAM_KEYS:
        raise ConfigError(f"unknown attack kind {kind!r}")
    unknown = set(data) - _KNOWN_PARAM_KEYS[kind]
    if unknown:
        raise ConfigError(f"unknown {kind} attack parameters: {sorted(unknown)}")
    try:
        if kind == "identity":
            return None
        if kind == "noise":
            return NoiseParams(tuple(data.get("colors", DEFAULT_COLORS)),
                               tuple(data.get("snr_db_range", (3.0, 30.0))))
        if kind == "gain":
            return GainParams(tuple(data.get("gain_db_range", (-18.0, 6.0))))
        if kind == "speed":
            return SpeedParams(tuple(data.get("percentages", (80.0, 90.0, 110.0))))
        if kind == "pass_filter":
            return FilterParams(tuple(data.get("low_pass_cutoff_range", (2200.0, 4000.0))),
                                tuple(data.get("high_pass_cutoff_range", (200.0, 1200.0))))
        return CombinationParams(
            noise=_params_from_dict("noise", data.get("noise", {})),
            gain=_params_from_dict("gain", data.get("gain", {})),
            speed=_params_from_dict("speed", data.get("speed", {})),
            pass_filter=_params_from_dict("pass_filter", data.get("pass_filter", {})),
            apply_probability=data.get("apply_probability", 0.5),
        )
    except TypeError as exc:
        raise FormatError(f"malformed {kind} attack parameters: {exc}") from exc


def suite_to_dict(suite: AttackSuite) -> dict:
    return {
        "version": SUITE_FORMAT_VERSION,
        "master_seed": suite.master_seed,
        "attacks": [
            {"kind": a.kind, "probability": a.probability, **_params_to_dict(a.kind, a.params)}
            for a in suite.attacks
        ],
    }


def suite_from_dict(payload: dict) -> AttackSuite:
    try:
        attacks = []
        for entry in payload["attacks"]:
            entry = dict(entry)
            kind = entry.pop("kind")
            probability = entry.pop("probability", 1.0)
            attacks.append(AttackSpec(kind, _params_from_dict(kind, entry), probability))
        return AttackSuite(tuple(attacks), master_seed=payload.get("master_seed", 0))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed attack suite: {exc}") from exc


def save_suite(suite: AttackSuite, path: str | Path) -> None:
    Path(path).write_text(json.dumps(suite_to_dict(suite), indent=1) + "\n")


def load_suite(path: str | Path) -> AttackSuite:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc
    return suite_from_dict(payload)


def named_suite(kind: str, master_seed: int = 0) -> AttackSuite:
    """Single-attack suite for one of the standard attack classes."""

    return AttackSuite((AttackSpec(kind, default_params(kind)),), master_seed=master_seed)
