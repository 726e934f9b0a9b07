"""State-dependent emission families.

Every family is an immutable value object exposing ``logpdf``, ``pdf``,
``cdf``, ``pit`` (probability integral transform used for pseudo-residuals),
``sample`` and a weighted maximum-likelihood estimator.  Parameters use the
shape-scale convention for the Gamma family and (mean, variance) for the
Normal and Log-Normal families.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import ClassVar

import numpy as np
from scipy import optimize, special, stats

VAR_FLOOR = 1e-8
SCALE_FLOOR = math.sqrt(VAR_FLOOR)
KAPPA_MAX = 1e8


class Emission:
    """Common behaviour of the univariate emission families."""

    tag: ClassVar[str]
    n_params: ClassVar[int] = 2

    def logpdf(self, y):
        raise NotImplementedError

    def cdf(self, y):
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, size=None):
        raise NotImplementedError

    def pdf(self, y):
        return np.exp(self.logpdf(y))

    def pit(self, y):
        """Probability integral transform; equals ``cdf`` for continuous families."""
        return self.cdf(y)

    def mean(self) -> float:
        raise NotImplementedError

    def to_dict(self) -> dict:
        out = {"family": self.tag}
        for f in fields(self):
            out[f.name] = float(getattr(self, f.name))
        return out


def _positive(name, value):
    if not (np.isfinite(value) and value > 0):
        raise ValueError(f"{name} must be positive and finite, got {value!r}")


@dataclass(frozen=True)
class Gamma(Emission):
    shape: float
    scale: float

    tag: ClassVar[str] = "gamma"

    def __post_init__(self):
        _positive("shape", self.shape)
        _positive("scale", self.scale)

    def logpdf(self, y):
        y = np.asarray(y, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = stats.gamma.logpdf(y, self.shape, scale=self.scale)
        return np.where(y > 0, out, -np.inf)

    def cdf(self, y):
        return stats.gamma.cdf(y, self.shape, scale=self.scale)

    def sample(self, rng, size=None):
        return rng.gamma(self.shape, self.scale, size)

    def mean(self):
        return self.shape * self.scale


@dataclass(frozen=True)
class Normal(Emission):
    mu: float
    var: float

    tag: ClassVar[str] = "normal"

    def __post_init__(self):
        _positive("var", self.var)
        if not np.isfinite(self.mu):
            raise ValueError("mu must be finite")

    def logpdf(self, y):
        y = np.asarray(y, dtype=float)
        return -0.5 * (np.log(2 * np.pi * self.var) + (y - self.mu) ** 2 / self.var)

    def cdf(self, y):
        return special.ndtr((np.asarray(y, dtype=float) - self.mu) / math.sqrt(self.var))

    def sample(self, rng, size=None):
        return rng.normal(self.mu, math.sqrt(self.var), size)

    def mean(self):
        return self.mu


@dataclass(frozen=True)
class Laplace(Emission):
    mu: float
    b: float

    tag: ClassVar[str] = "laplace"

    def __post_init__(self):
        _positive("b", self.b)

    def logpdf(self, y):
        y = np.asarray(y, dtype=float)
        return -np.log(2 * self.b) - np.abs(y - self.mu) / self.b

    def cdf(self, y):
        return stats.laplace.cdf(y, loc=self.mu, scale=self.b)

    def sample(self, rng, size=None):
        return rng.laplace(self.mu, self.b, size)

    def mean(self):
        return self.mu


@dataclass(frozen=True)
class LogNormal(Emission):
    mu: float
    var: float

    tag: ClassVar[str] = "lognormal"

    def __post_init__(self):
        _positive("var", self.var)

    def logpdf(self, y):
        y = np.asarray(y, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            ly = np.log(y)
            out = -ly - 0.5 * (np.log(2 * np.pi * self.var) + (ly - self.mu) ** 2 / self.var)
        return np.where(y > 0, out, -np.inf)

    def cdf(self, y):
        y = np.asarray(y, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = (np.log(np.where(y > 0, y, 1.0)) - self.mu) / math.sqrt(self.var)
        return np.where(y > 0, special.ndtr(z), 0.0)

    def sample(self, rng, size=None):
        return rng.lognormal(self.mu, math.sqrt(self.var), size)

    def mean(self):
        return math.exp(self.mu + self.var / 2)


def bessel_ratio(kappa):
    """I1(kappa) / I0(kappa), computed from exponentially scaled Bessel functions."""
    kappa = np.asarray(kappa, dtype=float)
    return special.i1e(kappa) / special.i0e(kappa)


@dataclass(frozen=True)
class VonMises(Emission):
    mu: float
    kappa: float

    tag: ClassVar[str] = "vonmises"

    def __post_init__(self):
        if not (np.isfinite(self.kappa) and self.kappa >= 0):
            raise ValueError(f"kappa must be non-negative, got {self.kappa!r}")

    def logpdf(self, y):
        y = np.asarray(y, dtype=float)
        # log I0(k) = log(i0e(k)) + k
        out = self.kappa * (np.cos(y - self.mu) - 1) - np.log(2 * np.pi * special.i0e(self.kappa))
        return np.where((y >= -np.pi) & (y < np.pi), out, -np.inf)

    def cdf(self, y):
        y = np.clip(np.asarray(y, dtype=float), -np.pi, np.pi)
        if self.kappa == 0:
            return (y + np.pi) / (2 * np.pi)
        dist = stats.vonmises(self.kappa)
        # scipy's centred cdf is continuous on the real line with period offset 1
        lo = dist.cdf(-np.pi - self.mu)
        return np.clip(dist.cdf(y - self.mu) - lo, 0.0, 1.0)

    def sample(self, rng, size=None):
        out = rng.vonmises(self.mu, self.kappa, size)
        return np.where(out >= np.pi, out - 2 * np.pi, out)

    def mean(self):
        return self.mu


@dataclass(frozen=True)
class _ZeroInflated(Emission):
    """Point mass ``p0`` at zero mixed with a positive continuous family."""

    n_params: ClassVar[int] = 3

    def _base(self) -> Emission:
        raise NotImplementedError

    def logpdf(self, y):
        y = np.asarray(y, dtype=float)
        with np.errstate(divide="ignore"):
            at_zero = np.log(self.p0)
            pos = np.log1p(-self.p0) + self._base().logpdf(y)
        return np.where(y == 0, at_zero, np.where(y > 0, pos, -np.inf))

    def cdf(self, y):
        y = np.asarray(y, dtype=float)
        return np.where(y >= 0, self.p0 + (1 - self.p0) * self._base().cdf(y), 0.0)

    def pit(self, y):
        # mid-distribution value at the atom
        y = np.asarray(y, dtype=float)
        return np.where(y == 0, 0.5 * self.p0, self.cdf(y))

    def sample(self, rng, size=None):
        zero = rng.random(size) < self.p0
        return np.where(zero, 0.0, self._base().sample(rng, size))

    def mean(self):
        return (1 - self.p0) * self._base().mean()


@dataclass(frozen=True)
class ZeroInflatedGamma(_ZeroInflated):
    p0: float
    shape: float
    scale: float

    tag: ClassVar[str] = "zigamma"

    def __post_init__(self):
        if not 0 <= self.p0 <= 1:
            raise ValueError("p0 must lie in [0, 1]")
        self._base()

    def _base(self):
        return Gamma(self.shape, self.scale)


@dataclass(frozen=True)
class ZeroInflatedLogNormal(_ZeroInflated):
    p0: float
    mu: float
    var: float

    tag: ClassVar[str] = "zilognormal"

    def __post_init__(self):
        if not 0 <= self.p0 <= 1:
            raise ValueError("p0 must lie in [0, 1]")
        self._base()

    def _base(self):
        return LogNormal(self.mu, self.var)


FAMILIES: dict[str, type[Emission]] = {
    cls.tag: cls
    for cls in (Gamma, Normal, Laplace, LogNormal, VonMises, ZeroInflatedGamma, ZeroInflatedLogNormal)
}


def from_dict(d: dict) -> Emission:
    d = dict(d)
    cls = FAMILIES[d.pop("family")]
    return cls(**d)


# --- weighted maximum likelihood -------------------------------------------


def weighted_median(values, weights) -> float:
    """Smallest value whose cumulative weight reaches half the total."""
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    order = np.argsort(values, kind="stable")
    cum = np.cumsum(weights[order])
    idx = np.searchsorted(cum, 0.5 * cum[-1] * (1 - 1e-12))
    return float(values[order][idx])


def _weighted_moments(x, w):
    W = w.sum()
    mu = float(np.dot(w, x) / W)
    var = float(np.dot(w, (x - mu) ** 2) / W)
    return mu, var


def solve_gamma_shape(log_mean_minus_mean_log: float, start: float | None = None) -> float:
    """Solve ``log k - digamma(k) = s`` for the Gamma shape ``k``."""
    s = log_mean_minus_mean_log
    if s <= 0:
        return math.inf
    if start is None or not np.isfinite(start) or start <= 0:
        start = (3 - s + math.sqrt((s - 3) ** 2 + 24 * s)) / (12 * s)

    def f(logk):
        k = math.exp(logk)
        return math.log(k) - special.digamma(k) - s

    lo = hi = math.log(start)
    while f(lo) < 0:
        lo -= 1.0
    while f(hi) > 0:
        hi += 1.0
    return math.exp(optimize.brentq(f, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps))


def solve_vonmises_kappa(resultant: float) -> float:
    """Invert ``A(kappa) = I1/I0 = resultant``."""
    if resultant <= 0:
        return 0.0
    if resultant >= bessel_ratio(KAPPA_MAX):
        return KAPPA_MAX
    f = lambda k: float(bessel_ratio(k)) - resultant  # noqa: E731
    hi = 1.0
    while f(hi) < 0:
        hi *= 2.0
    return optimize.brentq(f, 0.0, hi, xtol=1e-13, rtol=4 * np.finfo(float).eps)


def weighted_mle(tag: str, values, weights, previous: Emission | None = None):
    """Weighted MLE of one emission family.

    Parameters
    ----------
    tag : str
        Family tag, one of ``FAMILIES``.
    values, weights : array_like
        Observations and their non-negative weights (posterior responsibilities).
    previous : Emission, optional
        Previous iterate.  Used as a warm start and as the fallback when the
        weighted sample carries no mass in the family's support.

    Returns
    -------
    family : Emission
    degenerate : bool
        True when a variance/scale floor was applied or the fit fell back to
        ``previous``.
    """
    x = np.asarray(values, dtype=float)
    w = np.asarray(weights, dtype=float)
    if x.shape != w.shape:
        raise ValueError("values and weights differ in length")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    keep = w > 0
    x, w = x[keep], w[keep]
    W = w.sum()
    if W <= 0:
        if previous is None:
            raise ValueError("weights sum to zero and no previous estimate given")
        return previous, True

    if tag == "normal":
        mu, var = _weighted_moments(x, w)
        return Normal(mu, max(var, VAR_FLOOR)), var < VAR_FLOOR

    if tag == "lognormal":
        if np.any(x <= 0):
            raise ValueError("log-normal sample must be positive")
        mu, var = _weighted_moments(np.log(x), w)
        return LogNormal(mu, max(var, VAR_FLOOR)), var < VAR_FLOOR

    if tag == "laplace":
        mu = weighted_median(x, w)
        b = float(np.dot(w, np.abs(x - mu)) / W)
        return Laplace(mu, max(b, SCALE_FLOOR)), b < SCALE_FLOOR

    if tag == "gamma":
        if np.any(x <= 0):
            raise ValueError("gamma sample must be positive")
        mean = float(np.dot(w, x) / W)
        s = math.log(mean) - float(np.dot(w, np.log(x)) / W)
        start = previous.shape if isinstance(previous, Gamma) else None
        k = solve_gamma_shape(s, start)
        # variance k * theta^2 = mean^2 / k
        k_cap = mean**2 / VAR_FLOOR
        degenerate = k > k_cap
        k = min(k, k_cap)
        return Gamma(k, mean / k), degenerate

    if tag == "vonmises":
        S = float(np.dot(w, np.sin(x)))
        C = float(np.dot(w, np.cos(x)))
        mu = math.atan2(S, C)
        if mu >= math.pi:
            mu -= 2 * math.pi
        resultant = math.hypot(S, C) / W
        kappa = solve_vonmises_kappa(resultant)
        return VonMises(mu, kappa), kappa >= KAPPA_MAX

    if tag in ("zigamma", "zilognormal"):
        zero = x == 0
        p0 = float(w[zero].sum() / W)
        base_tag = tag[2:]
        prev_base = previous._base() if isinstance(previous, _ZeroInflated) else None
        if np.all(zero):
            if prev_base is None:
                raise ValueError("zero-inflated sample has no positive values")
            base, degenerate = prev_base, True
        else:
            base, degenerate = weighted_mle(base_tag, x[~zero], w[~zero], prev_base)
        if tag == "zigamma":
            return ZeroInflatedGamma(p0, base.shape, base.scale), degenerate
        return ZeroInflatedLogNormal(p0, base.mu, base.var), degenerate

    raise ValueError(f"unknown family {tag!r}")
