"""Advantage estimation and trainability diagnostics for PPO rollouts.

Distribution statistics use a fully specified histogram estimator
(Freedman-Diaconis bin width, differential entropy in nats, KL against the
moment-matched normal with exact Gaussian bin masses) so that numbers are
reproducible across runs. The multimodality check is a smoothed-bootstrap
critical-bandwidth test with the standard variance correction.

Randomness: every bootstrap replicate draws its generator from
``np.random.SeedSequence(seed, spawn_key=(replicate_index,))``, so results do
not depend on evaluation order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .errors import NumericalError, ValidationError

KDE_GRID_POINTS = 512
FALLBACK_BINS = 64


# ---------------------------------------------------------------------------
# generalized advantage estimation and the clipped objective


@dataclass(frozen=True)
class GaeParams:
    gamma: float
    lam: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise ValidationError(f"gamma must be in [0, 1], got {self.gamma}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValidationError(f"lambda must be in [0, 1], got {self.lam}")


@dataclass
class TrajectoryTrace:
    """Per-step rewards plus value estimates, including the terminal value."""

    rewards: np.ndarray  # (T,)
    values: np.ndarray  # (T + 1,)

    def __post_init__(self) -> None:
        self.rewards = np.asarray(self.rewards, dtype=np.float64).reshape(-1)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.rewards.shape[0] < 1:
            raise ValidationError("trace must contain at least one step")
        if self.values.shape[0] != self.rewards.shape[0] + 1:
            raise ValidationError(
                f"values must have length T+1={self.rewards.shape[0] + 1}, "
                f"got {self.values.shape[0]}"
            )
        if not (np.all(np.isfinite(self.rewards)) and np.all(np.isfinite(self.values))):
            raise NumericalError("trace contains non-finite entries")

    @property
    def length(self) -> int:
        return self.rewards.shape[0]


def gae(trace: TrajectoryTrace, p: GaeParams) -> np.ndarray:
    """Advantages by the backward recursion A_t = delta_t + gamma*lam*A_{t+1}."""
    delta = trace.rewards + p.gamma * trace.values[1:] - trace.values[:-1]
    adv = np.empty_like(delta)
    acc = 0.0
    decay = p.gamma * p.lam
    for t in range(delta.shape[0] - 1, -1, -1):
        acc = delta[t] + decay * acc
        adv[t] = acc
    return adv


def ppo_objective(ratio: float, advantage: float, epsilon: float) -> float:
    """Clipped surrogate: min(ratio * A, clip(ratio, 1-eps, 1+eps) * A)."""
    if not ratio > 0.0:
        raise ValidationError(f"probability ratio must be positive, got {ratio}")
    if not 0.0 < epsilon < 1.0:
        raise ValidationError(f"epsilon must lie in (0, 1), got {epsilon}")
    clipped = min(max(ratio, 1.0 - epsilon), 1.0 + epsilon)
    return min(ratio * advantage, clipped * advantage)


# ---------------------------------------------------------------------------
# distribution summary


@dataclass(frozen=True)
class EstimatorConfig:
    bins: str | int = "fd"  # "fd" or an explicit bin count
    min_samples: int = 200
    kl_direction: str = "empirical_vs_normal"  # or "normal_vs_empirical"
    mode_budget: int = 1
    bootstrap: int = 500
    seed: int = 0
    #: samples above this count are deterministically subsampled before the
    #: multimodality bootstrap; None disables the cap
    silverman_max_n: int | None = 5000
    max_bins: int = 65536

    def __post_init__(self) -> None:
        if self.bins != "fd" and (not isinstance(self.bins, int) or self.bins < 2):
            raise ValidationError(f"bins must be 'fd' or an integer >= 2, got {self.bins!r}")
        if self.kl_direction not in ("empirical_vs_normal", "normal_vs_empirical"):
            raise ValidationError(f"unknown kl_direction {self.kl_direction!r}")


@dataclass
class AdvantageSummary:
    n: int
    mu: float
    sd: float
    skewness: float
    entropy_nats: float
    kl_vs_matched_normal: float
    silverman_p: float
    estimator_config: dict = field(default_factory=dict)


def _as_samples(samples, min_count: int, what: str = "samples") -> np.ndarray:
    arr = np.asarray(samples, dtype=np.float64).reshape(-1)
    if arr.shape[0] < min_count:
        raise ValidationError(f"need at least {min_count} {what}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{what} contain non-finite values")
    return arr


def _histogram_edges(x: np.ndarray, cfg: EstimatorConfig) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    if cfg.bins == "fd":
        q25, q75 = np.percentile(x, [25.0, 75.0])
        width = 2.0 * (q75 - q25) * x.shape[0] ** (-1.0 / 3.0)
        if width <= 0.0:
            nbins = FALLBACK_BINS
        else:
            nbins = int(np.ceil((hi - lo) / width))
    else:
        nbins = int(cfg.bins)
    nbins = min(max(nbins, 1), cfg.max_bins)
    return np.linspace(lo, hi, nbins + 1)


def _entropy_and_kl(x: np.ndarray, mu: float, sd: float, cfg: EstimatorConfig):
    edges = _histogram_edges(x, cfg)
    counts, _ = np.histogram(x, bins=edges)
    p = counts / x.shape[0]
    widths = np.diff(edges)
    occupied = p > 0.0

    entropy = -float(np.sum(p[occupied] * np.log(p[occupied] / widths[occupied])))

    q = np.diff(ndtr((edges - mu) / sd))  # exact Gaussian mass per bin
    if cfg.kl_direction == "empirical_vs_normal":
        kl = float(np.sum(p[occupied] * np.log(p[occupied] / np.maximum(q[occupied], 1e-300))))
    else:
        support = q > 0.0
        kl = float(np.sum(q[support] * np.log(q[support] / np.maximum(p[support], 1e-300))))
    return entropy, kl, edges, p, q


def summarize(samples, cfg: EstimatorConfig = EstimatorConfig()) -> AdvantageSummary:
    """Moments, histogram entropy/KL, and the multimodality p-value.

    Requires at least `cfg.min_samples` points with positive variance.
    """
    x = _as_samples(samples, cfg.min_samples)
    mu = float(x.mean())
    sd = float(x.std(ddof=1))
    if sd == 0.0 or x.max() == x.min():
        raise ValidationError("zero variance: all samples identical")

    centered = x - mu
    m2 = float(np.mean(centered**2))
    m3 = float(np.mean(centered**3))
    skewness = m3 / m2**1.5

    entropy, kl, edges, _, _ = _entropy_and_kl(x, mu, sd, cfg)

    sil_x = x
    if cfg.silverman_max_n is not None and x.shape[0] > cfg.silverman_max_n:
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0xD0,)))
        sil_x = x[rng.choice(x.shape[0], cfg.silverman_max_n, replace=False)]
    p_value, h_crit = _silverman(sil_x, cfg.mode_budget, cfg.bootstrap, cfg.seed)

    return AdvantageSummary(
        n=x.shape[0],
        mu=mu,
        sd=sd,
        skewness=skewness,
        entropy_nats=entropy,
        kl_vs_matched_normal=kl,
        silverman_p=p_value,
        estimator_config={
            "bins_requested": cfg.bins,
            "bins_used": len(edges) - 1,
            "bin_width": float(edges[1] - edges[0]) if len(edges) > 1 else 0.0,
            "kl_direction": cfg.kl_direction,
            "mode_budget": cfg.mode_budget,
            "bootstrap": cfg.bootstrap,
            "seed": cfg.seed,
            "silverman_n": int(sil_x.shape[0]),
            "critical_bandwidth": h_crit,
        },
    )


def histogram_table(samples, cfg: EstimatorConfig = EstimatorConfig()):
    """Per-bin rows (left, right, count, p, matched-normal mass) for plotting."""
    x = _as_samples(samples, cfg.min_samples)
    mu = float(x.mean())
    sd = float(x.std(ddof=1))
    if sd == 0.0 or x.max() == x.min():
        raise ValidationError("zero variance: all samples identical")
    _, _, edges, p, q = _entropy_and_kl(x, mu, sd, cfg)
    counts = np.round(p * x.shape[0]).astype(np.int64)
    return [
        (float(edges[i]), float(edges[i + 1]), int(counts[i]), float(p[i]), float(q[i]))
        for i in range(len(p))
    ]


# ---------------------------------------------------------------------------
# multimodality: critical-bandwidth bootstrap


def _kde_on_grid(x: np.ndarray, h: float, buf: np.ndarray) -> np.ndarray:
    """Unnormalized Gaussian KDE on KDE_GRID_POINTS spanning [min-3h, max+3h]."""
    grid = np.linspace(x.min() - 3.0 * h, x.max() + 3.0 * h, KDE_GRID_POINTS)
    np.subtract(grid[:, None], x[None, :], out=buf)
    buf *= 1.0 / h
    np.multiply(buf, buf, out=buf)
    buf *= -0.5
    np.exp(buf, out=buf)
    return buf.sum(axis=1)


def _count_modes(f: np.ndarray) -> int:
    """Local maxima of a grid-sampled curve; runs of equal values merge."""
    keep = np.empty(f.shape[0], dtype=bool)
    keep[0] = True
    np.not_equal(f[1:], f[:-1], out=keep[1:])
    fr = f[keep]
    if fr.shape[0] == 1:
        return 1
    rises = np.sign(np.diff(fr))
    modes = 0
    prev = rises[0]
    if prev < 0:
        modes += 1
    for step in rises[1:]:
        if prev > 0 and step < 0:
            modes += 1
        prev = step
    if prev > 0:
        modes += 1
    return modes


def _critical_bandwidth(x: np.ndarray, mode_budget: int, rel_tol: float = 1e-3) -> float:
    """Smallest bandwidth whose KDE shows at most `mode_budget` modes (bisection)."""
    buf = np.empty((KDE_GRID_POINTS, x.shape[0]))
    hi = float(x.max() - x.min())
    if hi == 0.0:
        raise ValidationError("zero variance: all samples identical")
    while _count_modes(_kde_on_grid(x, hi, buf)) > mode_budget:
        hi *= 2.0
    lo = 0.0
    for _ in range(200):
        if hi - lo <= rel_tol * hi:
            break
        mid = 0.5 * (lo + hi)
        if _count_modes(_kde_on_grid(x, mid, buf)) <= mode_budget:
            hi = mid
        else:
            lo = mid
    return hi


def _silverman(x: np.ndarray, mode_budget: int, bootstrap: int, seed: int):
    n = x.shape[0]
    h = _critical_bandwidth(x, mode_budget)
    scale = 1.0 / math.sqrt(1.0 + h * h / float(x.var()))
    buf = np.empty((KDE_GRID_POINTS, n))
    exceed = 0
    for i in range(bootstrap):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
        resample = (x[rng.integers(0, n, n)] + h * rng.standard_normal(n)) * scale
        if _count_modes(_kde_on_grid(resample, h, buf)) > mode_budget:
            exceed += 1
    return exceed / bootstrap, h


def silverman_test(samples, mode_budget: int = 1, bootstrap: int = 500, seed: int = 0) -> float:
    """Smoothed-bootstrap p-value for "more than `mode_budget` modes".

    The critical bandwidth is found by bisection to relative 1e-3, counting
    modes of the Gaussian-kernel density on a 512-point grid. Each resample
    is smoothed at the critical bandwidth and shrunk by
    (1 + h^2/s^2)^(-1/2) to restore the sample variance; the p-value is the
    fraction of resamples whose density at the critical bandwidth still
    exceeds the mode budget. Deterministic for a fixed seed.
    """
    x = _as_samples(samples, 50)
    if bootstrap < 100:
        raise ValidationError(f"bootstrap count must be >= 100, got {bootstrap}")
    if mode_budget < 1:
        raise ValidationError(f"mode budget must be >= 1, got {mode_budget}")
    p, _ = _silverman(x, mode_budget, bootstrap, seed)
    return p


# ---------------------------------------------------------------------------
# trainability verdict


@dataclass(frozen=True)
class ThresholdConfig:
    center_ratio_max: float = 0.5  # |mu| / sd
    entropy_min: float = 2.55
    kl_max: float = 0.16


@dataclass
class TrainabilityVerdict:
    verdict: str  # "trainable" | "marginal" | "not_trainable"
    reasons: list[dict]


def verdict(s: AdvantageSummary, thresholds: ThresholdConfig = ThresholdConfig()) -> TrainabilityVerdict:
    """Threshold checks on a summary; one violation is marginal, more is not trainable."""
    center_ratio = abs(s.mu) / s.sd
    checks = [
        {
            "check": "center_near_zero",
            "value": center_ratio,
            "threshold": thresholds.center_ratio_max,
            "ok": center_ratio <= thresholds.center_ratio_max,
        },
        {
            "check": "entropy_above_min",
            "value": s.entropy_nats,
            "threshold": thresholds.entropy_min,
            "ok": s.entropy_nats > thresholds.entropy_min,
        },
        {
            "check": "kl_below_max",
            "value": s.kl_vs_matched_normal,
            "threshold": thresholds.kl_max,
            "ok": s.kl_vs_matched_normal < thresholds.kl_max,
        },
    ]
    violations = sum(1 for c in checks if not c["ok"])
    label = "trainable" if violations == 0 else ("marginal" if violations == 1 else "not_trainable")
    return TrainabilityVerdict(verdict=label, reasons=checks)


# ---------------------------------------------------------------------------
# rollout-log ingestion


def read_rollout_log(path: str | Path, params: GaeParams | None = None):
    """Load advantage samples from a JSON-lines rollout log.

    Two record schemas are accepted and may not be mixed: direct samples
    ``{"advantage": x}`` or per-step rows ``{"trace_id", "t", "reward",
    "value"}`` with steps t = 0..T-1. In trace mode an optional final row at
    t = T carrying only ``value`` supplies the terminal bootstrap value
    (0 when absent) and advantages are recomputed with `params`. Returns
    (samples, source_label).
    """
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"rollout log not found: {path}")
    advantages: list[float] = []
    steps: dict[str, list[dict]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            if "advantage" in rec:
                advantages.append(float(rec["advantage"]))
            elif "trace_id" in rec and "t" in rec and "value" in rec:
                steps.setdefault(str(rec["trace_id"]), []).append(rec)
            else:
                raise ValidationError(
                    f"{path}:{lineno}: record needs either 'advantage' or "
                    "'trace_id'/'t'/'reward'/'value' fields"
                )
    if advantages and steps:
        raise ValidationError(f"{path}: mixes advantage records with trace records")
    if advantages:
        return np.asarray(advantages, dtype=np.float64), "advantage-samples"

    if not steps:
        raise ValidationError(f"{path}: no records found")
    if params is None:
        params = GaeParams(gamma=0.99, lam=0.95)
    out: list[np.ndarray] = []
    for trace_id in sorted(steps):
        rows = sorted(steps[trace_id], key=lambda r: int(r["t"]))
        rewards = [float(r["reward"]) for r in rows if "reward" in r and r["reward"] is not None]
        terminal = [r for r in rows if "reward" not in r or r["reward"] is None]
        if len(terminal) > 1:
            raise ValidationError(f"trace {trace_id!r}: multiple terminal-value rows")
        expected_t = list(range(len(rows)))
        if [int(r["t"]) for r in rows] != expected_t:
            raise ValidationError(f"trace {trace_id!r}: step indices must be 0..T without gaps")
        if terminal and int(terminal[0]["t"]) != len(rows) - 1:
            raise ValidationError(f"trace {trace_id!r}: terminal-value row must come last")
        values = [float(r["value"]) for r in rows]
        if not terminal:
            values.append(0.0)
        trace = TrajectoryTrace(rewards=np.asarray(rewards), values=np.asarray(values))
        out.append(gae(trace, params))
    label = f"gae(gamma={params.gamma:g},lambda={params.lam:g})"
    return np.concatenate(out), label
