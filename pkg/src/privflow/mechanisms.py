"""Differentially-private release mechanisms over per-user values.

Neighbouring datasets differ by one user's whole contribution (add/remove).
Every mechanism takes an explicit randomness source: a
``numpy.random.Generator`` or, in test mode only, :data:`BYPASS`, which
disables noise so results can be compared to exact oracles.

The number of contributing users ``n`` is treated as public by the mean,
standard deviation and percentile mechanisms.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from .errors import BypassDisabled, EmptyInput, InsufficientSamples, InvalidBins, InvalidBounds, InvalidEpsilon

TEST_MODE_ENV = "PRIVFLOW_TEST_MODE"


def test_mode() -> bool:
    return os.environ.get(TEST_MODE_ENV) == "1"


test_mode.__test__ = False  # keep pytest from collecting it


class _Bypass:
    def __repr__(self):
        return "BYPASS"


BYPASS = _Bypass()

Rng = Union[np.random.Generator, _Bypass]


def _bypass(rng: Rng) -> bool:
    if rng is BYPASS:
        if not test_mode():
            raise BypassDisabled(f"noise bypass requires {TEST_MODE_ENV}=1")
        return True
    return False


def check_epsilon(eps: float) -> float:
    try:
        eps = float(eps)
    except (TypeError, ValueError) as exc:
        raise InvalidEpsilon(f"epsilon must be a number, got {eps!r}") from exc
    if not (eps > 0 and math.isfinite(eps)):
        raise InvalidEpsilon(f"epsilon must be positive and finite, got {eps}")
    return eps


@dataclass(frozen=True)
class Bounds:
    """Public clipping range for per-user values."""

    lower: float
    upper: float

    def __post_init__(self):
        lo, hi = float(self.lower), float(self.upper)
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise InvalidBounds(f"bounds must be finite, got [{lo}, {hi}]")
        if not lo < hi:
            raise InvalidBounds(f"lower bound must be below upper, got [{lo}, {hi}]")
        # the variance noise scales with width**2, which must stay a normal float
        if not 1e-150 < hi - lo < 1e150:
            raise InvalidBounds(f"bounds width {hi - lo:g} is outside the supported range")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def clip(self, values: Sequence[float]) -> np.ndarray:
        return np.clip(np.asarray(values, dtype=float), self.lower, self.upper)


# -- bins -------------------------------------------------------------------


@dataclass(frozen=True)
class UniformBins:
    lower: float
    upper: float
    count: int = 10

    def edges(self) -> np.ndarray:
        if self.count < 1:
            raise InvalidBins("bin count must be >= 1")
        if not (math.isfinite(self.lower) and math.isfinite(self.upper) and self.lower < self.upper):
            raise InvalidBins(f"uniform bins need finite lower < upper, got [{self.lower}, {self.upper}]")
        return np.linspace(self.lower, self.upper, self.count + 1)


@dataclass(frozen=True)
class LogBins:
    lower: float
    upper: float
    count: int = 100

    def edges(self) -> np.ndarray:
        if self.count < 1:
            raise InvalidBins("bin count must be >= 1")
        if not self.lower > 0:
            raise InvalidBins("logarithmic bins need lower > 0")
        if not (math.isfinite(self.upper) and self.lower < self.upper):
            raise InvalidBins(f"logarithmic bins need lower < upper, got [{self.lower}, {self.upper}]")
        return np.geomspace(self.lower, self.upper, self.count + 1)


@dataclass(frozen=True)
class ExplicitBins:
    edge_list: tuple

    def __init__(self, edges: Sequence[float]):
        object.__setattr__(self, "edge_list", tuple(float(e) for e in edges))

    def edges(self) -> np.ndarray:
        edges = np.asarray(self.edge_list, dtype=float)
        if len(edges) < 2:
            raise InvalidBins("explicit bins need at least two edges")
        if not np.all(np.isfinite(edges)) or not np.all(np.diff(edges) > 0):
            raise InvalidBins("bin edges must be finite and strictly increasing")
        return edges


BinSpec = Union[UniformBins, LogBins, ExplicitBins]


def auto_bins(bounds: Bounds, count: int = 10) -> UniformBins:
    """Bins derived only from public bounds, never from the data."""
    return UniformBins(bounds.lower, bounds.upper, count)


def parse_bins(text: str, bounds: Optional[Bounds] = None) -> BinSpec:
    """``uniform:LO:HI:N``, ``log:LO:HI:N``, ``edges:E0,E1,...`` or ``auto[:N]``."""
    kind, _, rest = text.partition(":")
    try:
        if kind == "uniform":
            lo, hi, n = rest.split(":")
            return UniformBins(float(lo), float(hi), int(n))
        if kind == "log":
            lo, hi, n = rest.split(":")
            return LogBins(float(lo), float(hi), int(n))
        if kind == "edges":
            return ExplicitBins([float(e) for e in rest.split(",")])
        if kind == "auto":
            if bounds is None:
                raise InvalidBins("automatic bins need public bounds")
            return auto_bins(bounds, int(rest) if rest else 10)
    except ValueError as exc:
        raise InvalidBins(f"bad bin spec {text!r}: {exc}") from exc
    raise InvalidBins(f"unknown bin spec {text!r}")


def bins_to_dict(bins: BinSpec) -> Dict[str, Any]:
    if isinstance(bins, ExplicitBins):
        return {"kind": "edges", "edges": list(bins.edge_list)}
    kind = "log" if isinstance(bins, LogBins) else "uniform"
    return {"kind": kind, "lower": bins.lower, "upper": bins.upper, "count": bins.count}


def bins_from_dict(d: Dict[str, Any]) -> BinSpec:
    kind = d.get("kind")
    if kind == "edges":
        return ExplicitBins(d["edges"])
    if kind == "log":
        return LogBins(float(d["lower"]), float(d["upper"]), int(d["count"]))
    if kind == "uniform":
        return UniformBins(float(d["lower"]), float(d["upper"]), int(d.get("count", 10)))
    raise InvalidBins(f"unknown bin kind {kind!r}")


# -- results ----------------------------------------------------------------


@dataclass(frozen=True)
class NoisyHistogram:
    edges: List[float]
    counts: List[float]
    epsilon_spent: float
    # the virtual "everyone else" bin, when requested
    remainder: Optional[float] = None

    def share(self) -> float:
        """Binned users over binned users plus remainder (clamped noisy counts)."""
        if self.remainder is None:
            raise ValueError("share needs a remainder bin")
        inside = math.fsum(self.counts)
        total = inside + self.remainder
        return inside / total if total > 0 else 0.0

    def to_dict(self) -> Dict[str, Any]:
        out = {"edges": self.edges, "counts": self.counts, "epsilon_spent": self.epsilon_spent}
        if self.remainder is not None:
            out["remainder"] = self.remainder
        return out


@dataclass(frozen=True)
class Release:
    value: Any
    mechanism: str
    epsilon: float
    sensitivity: Any
    details: Dict[str, Any] = field(default_factory=dict)


# -- noise ------------------------------------------------------------------


def laplace_noise(scale: float, rng: Rng, size: Optional[int] = None):
    """Laplace(0, scale) draws as a difference of two exponentials."""
    if not scale > 0:
        raise ValueError(f"Laplace scale must be positive, got {scale}")
    if _bypass(rng):
        return 0.0 if size is None else np.zeros(size)
    e = rng.standard_exponential(2 if size is None else (2, size))
    return scale * (e[0] - e[1])


def laplace_sample(scale: float, rng: Rng) -> float:
    return float(laplace_noise(scale, rng))


def dp_count(n: int, eps: float, rng: Rng) -> Release:
    if n < 0:
        raise ValueError("count must be non-negative")
    eps = check_epsilon(eps)
    return Release(n + laplace_sample(1.0 / eps, rng), "laplace-count", eps, 1.0)


def _prepare(values: Sequence[float], bounds: Bounds) -> np.ndarray:
    if len(values) == 0:
        raise EmptyInput("no per-user values to aggregate")
    return np.sort(bounds.clip(values))


def dp_mean(values: Sequence[float], eps: float, bounds: Bounds, rng: Rng) -> Release:
    eps = check_epsilon(eps)
    clipped = _prepare(values, bounds)
    n = len(clipped)
    sensitivity = bounds.width / n
    mean = math.fsum(clipped) / n
    return Release(mean + laplace_sample(sensitivity / eps, rng), "laplace-mean", eps, sensitivity, {"n": n})


def _noisy_variance(clipped: np.ndarray, center: float, eps: float, bounds: Bounds, rng: Rng) -> float:
    n = len(clipped)
    sq = math.fsum((x - center) ** 2 for x in clipped) / n
    return sq + laplace_sample(bounds.width**2 / (n * eps), rng)


def dp_std(values: Sequence[float], eps: float, bounds: Bounds, rng: Rng) -> Release:
    """Half the budget on a noisy mean, half on the noisy mean squared deviation."""
    eps = check_epsilon(eps)
    clipped = _prepare(values, bounds)
    n = len(clipped)
    if n < 2:
        raise InsufficientSamples("standard deviation needs at least two users")
    half = eps / 2
    center = dp_mean(clipped, half, bounds, rng).value
    # keeps every squared deviation within width**2
    center = min(max(center, bounds.lower), bounds.upper)
    var = _noisy_variance(clipped, center, eps - half, bounds, rng)
    sens = {"mean": bounds.width / n, "variance": bounds.width**2 / n}
    return Release(math.sqrt(max(var, 0.0)), "laplace-std", eps, sens, {"n": n, "epsilon_split": [half, eps - half]})


def split_epsilon(eps: float, parts: int) -> List[float]:
    """Equal shares whose sum is exactly ``eps``."""
    share = eps / parts
    shares = [share] * (parts - 1)
    last = float(Fraction(eps) - Fraction(share) * (parts - 1))
    # nudge the last share until the float sum lands on eps
    for _ in range(64):
        total = math.fsum(shares + [last])
        if total == eps:
            break
        last = math.nextafter(last, -math.inf if total > eps else math.inf)
    shares.append(last)
    return shares


def _quantile_index(n: int, q: float) -> int:
    # interval index minimizing |i - q*n|, smallest on ties
    return min(max(math.ceil(q * n - 0.5), 0), n)


def _exp_quantile(ext: np.ndarray, q: float, eps: float, rng: Rng) -> float:
    n = len(ext) - 2
    if _bypass(rng):
        return float(ext[_quantile_index(n, q)])
    widths = np.diff(ext)
    with np.errstate(divide="ignore"):
        logw = np.log(widths) - (eps / 2.0) * np.abs(np.arange(n + 1) - q * n)
    # Gumbel-max draw from the normalized weights
    idx = int(np.argmax(logw + rng.gumbel(size=n + 1)))
    return float(rng.uniform(ext[idx], ext[idx + 1]))


def dp_percentile(
    values: Sequence[float],
    q: Union[float, Sequence[float]],
    eps: float,
    bounds: Bounds,
    rng: Rng,
) -> Release:
    """Exponential-mechanism quantile(s).

    Clipped sorted values are padded with the bounds; interval ``i`` is drawn
    with weight ``width_i * exp(-eps/2 * |i - q*n|)`` and the answer is uniform
    within it. Several quantiles share ``eps`` equally. In bypass mode the
    result is the left end of the best interval, i.e. the
    ``ceil(q*n - 1/2)``-th order statistic (the lower bound for index 0).
    """
    eps = check_epsilon(eps)
    qs = [float(q)] if np.isscalar(q) else [float(x) for x in q]
    if not qs:
        raise ValueError("at least one quantile required")
    for x in qs:
        if not 0.0 <= x <= 1.0:
            raise ValueError(f"quantile {x} outside [0, 1]")
    clipped = _prepare(values, bounds)
    ext = np.concatenate(([bounds.lower], clipped, [bounds.upper]))
    shares = split_epsilon(eps, len(qs))
    out = [_exp_quantile(ext, x, e, rng) for x, e in zip(qs, shares)]
    value = out[0] if np.isscalar(q) else out
    return Release(value, "exponential-quantile", eps, 1.0, {"n": len(clipped), "epsilon_split": shares, "q": qs})


def bin_counts(values: Sequence[float], edges: np.ndarray) -> np.ndarray:
    """Count values per ``(e_i, e_{i+1}]`` bin; the first bin is closed and
    out-of-range values land in the end bins."""
    k = len(edges) - 1
    idx = np.searchsorted(edges, np.asarray(values, dtype=float), side="left") - 1
    idx = np.clip(idx, 0, k - 1)
    return np.bincount(idx, minlength=k)


def dp_histogram(
    values: Sequence[float],
    bins: BinSpec,
    eps: float,
    rng: Rng,
    population_remainder: Optional[int] = None,
) -> Release:
    """Laplace(1/eps) on every bin; one user sits in exactly one bin, so the
    whole histogram (remainder bin included) costs eps once."""
    eps = check_epsilon(eps)
    edges = bins.edges()
    counts = bin_counts(values, edges).astype(float)
    noisy = counts + laplace_noise(1.0 / eps, rng, size=len(counts))
    remainder = None
    if population_remainder is not None:
        if population_remainder < 0:
            raise ValueError("remainder count must be non-negative")
        remainder = max(population_remainder + laplace_sample(1.0 / eps, rng), 0.0)
    # clamping is post-processing, after noise
    noisy = np.maximum(noisy, 0.0)
    hist = NoisyHistogram([float(e) for e in edges], [float(c) for c in noisy], eps, remainder)
    return Release(hist, "laplace-histogram", eps, 1.0, {"bins": len(counts)})
