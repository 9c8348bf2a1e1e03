"""Finite distributions, sample batches, and divergence computations.

States of an n-spin system are addressed by integers: bit i of the index
carries spin i, a set bit meaning +1. Everything in this module is immutable
after construction and safe to share across threads; the divergence functions
are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, rel_entr

from .errors import CapacityError, ParseError

MAX_STATES = 1 << 20
_SUM_TOL = 1e-12


def _readonly(a, dtype=float) -> np.ndarray:
    out = np.array(a, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class FiniteDistribution:
    """Probability vector over states ``{0, ..., m-1}``.

    Entries must be nonnegative and sum to one within 1e-12; at most 2**20
    states. The stored vector is read-only.
    """

    probs: np.ndarray

    def __post_init__(self):
        p = _readonly(self.probs)
        if p.ndim != 1:
            raise ValueError(f"probability vector must be 1-D, got shape {p.shape}")
        if p.size == 0:
            raise ValueError("empty distribution")
        if p.size > MAX_STATES:
            raise CapacityError(f"{p.size} states exceed the cap of {MAX_STATES}")
        if not np.all(np.isfinite(p)):
            raise ValueError("probabilities must be finite")
        if p.min() < 0.0:
            raise ValueError(f"negative probability {p.min()!r}")
        total = float(p.sum())
        if abs(total - 1.0) > _SUM_TOL:
            raise ValueError(f"probabilities sum to {total!r}, not 1")
        object.__setattr__(self, "probs", p)

    @property
    def m(self) -> int:
        return self.probs.size

    def support(self) -> np.ndarray:
        """Indices of states with nonzero probability."""
        return np.flatnonzero(self.probs)

    @classmethod
    def delta(cls, index: int, m: int) -> "FiniteDistribution":
        """Point mass on one state."""
        p = np.zeros(m)
        p[index] = 1.0
        return cls(p)

    @classmethod
    def uniform(cls, m: int) -> "FiniteDistribution":
        return cls(np.full(m, 1.0 / m))


@dataclass(frozen=True)
class SampleSet:
    """A batch of points in R^d, one row per sample.

    One-dimensional input is promoted to a single-column matrix. Ragged input
    fails at construction, so every sample shares the same dimensionality.
    """

    data: np.ndarray

    def __post_init__(self):
        x = np.array(self.data, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2:
            raise ValueError(f"samples must form a 2-D array, got shape {x.shape}")
        if x.shape[0] < 1:
            raise ValueError("a sample set needs at least one sample")
        x.setflags(write=False)
        object.__setattr__(self, "data", x)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class DivergenceReport:
    """TV, KL and chi-square between one pair of distributions.

    Construction enforces tv in [0, 1] and the chi-square domination
    kl <= log(1 + chi2) (within 1e-9); infinite kl/chi2 use ``math.inf``.
    """

    tv: float
    kl: float
    chi2: float

    def __post_init__(self):
        if not -1e-12 <= self.tv <= 1.0 + 1e-12:
            raise ValueError(f"tv out of range: {self.tv!r}")
        if self.kl < -1e-12 or self.chi2 < -1e-12:
            raise ValueError("divergences must be nonnegative")
        if self.kl > math.log1p(self.chi2) + 1e-9:
            raise ValueError(
                f"kl={self.kl!r} exceeds log(1 + chi2)={math.log1p(self.chi2)!r}"
            )


def _check_pair(p: FiniteDistribution, q: FiniteDistribution) -> None:
    if p.m != q.m:
        raise ValueError(f"state-space mismatch: {p.m} vs {q.m}")


def tv_distance(p: FiniteDistribution, q: FiniteDistribution) -> float:
    """Total variation distance ``(1/2) sum_x |p(x) - q(x)|``."""
    _check_pair(p, q)
    return float(0.5 * np.abs(p.probs - q.probs).sum())


def kl_divergence(p: FiniteDistribution, q: FiniteDistribution) -> float:
    """KL(p || q) in nats; ``math.inf`` when p puts mass outside supp(q)."""
    _check_pair(p, q)
    return float(rel_entr(p.probs, q.probs).sum())


def chi2_divergence(p: FiniteDistribution, q: FiniteDistribution) -> float:
    """Chi-square divergence ``sum_{q(x)>0} (p(x)/q(x) - 1)^2 q(x)``.

    Returns ``math.inf`` when p puts mass outside the support of q.
    """
    _check_pair(p, q)
    pp, qq = p.probs, q.probs
    if np.any((qq == 0.0) & (pp > 0.0)):
        return math.inf
    on = qq > 0.0
    diff = pp[on] - qq[on]
    return float(np.sum(diff * diff / qq[on]))


def renyi_divergence(p: FiniteDistribution, q: FiniteDistribution, order: float) -> float:
    """Renyi divergence of the given order (> 1), in nats.

    R_a(p||q) = (a-1)^{-1} log sum_x p(x)^a q(x)^{1-a}, evaluated in log
    space. R_2 coincides with log(1 + chi2); orders are monotone.
    """
    _check_pair(p, q)
    if not (isinstance(order, (int, float)) and math.isfinite(order) and order > 1.0):
        raise ValueError(f"order must be a finite number > 1, got {order!r}")
    on = p.probs > 0.0
    qq = q.probs[on]
    if np.any(qq == 0.0):
        return math.inf
    log_terms = order * np.log(p.probs[on]) + (1.0 - order) * np.log(qq)
    return float(logsumexp(log_terms) / (order - 1.0))


def divergence_report(p: FiniteDistribution, q: FiniteDistribution) -> DivergenceReport:
    """Compute TV, KL and chi-square for one pair in a single call."""
    return DivergenceReport(
        tv=tv_distance(p, q), kl=kl_divergence(p, q), chi2=chi2_divergence(p, q)
    )


def empirical_tv_continuous(
    a, b, *, bins: int = 50, direction=None
) -> float:
    """Histogram estimate of total variation between two sample clouds.

    Parameters
    ----------
    a, b : SampleSet or array_like
        Sample batches of equal dimensionality.
    bins : int
        Number of equal-width bins (at least 2), shared by both batches and
        spanning the pooled sample range.
    direction : array_like, optional
        Projection direction; required when the ambient dimension exceeds
        one. Samples are projected onto it before binning.

    Returns
    -------
    float
        Half the l1 distance between the two bin-frequency vectors. Binning
        is a coarsening and finite samples only blur further, so this is an
        estimated lower bound on the true total variation, not an unbiased
        estimate of it.
    """
    if not isinstance(a, SampleSet):
        a = SampleSet(a)
    if not isinstance(b, SampleSet):
        b = SampleSet(b)
    if bins < 2:
        raise ValueError(f"need at least 2 bins, got {bins}")
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    if direction is None:
        if a.dim != 1:
            raise ValueError("direction is required for multivariate samples")
        xa, xb = a.data[:, 0], b.data[:, 0]
    else:
        u = np.asarray(direction, dtype=float).reshape(-1)
        if u.size != a.dim:
            raise ValueError(f"direction has size {u.size}, samples have dim {a.dim}")
        norm = float(np.linalg.norm(u))
        if norm == 0.0:
            raise ValueError("direction must be nonzero")
        u = u / norm
        xa, xb = a.data @ u, b.data @ u
    lo = min(xa.min(), xb.min())
    hi = max(xa.max(), xb.max())
    if lo == hi:
        hi = lo + 1.0  # all samples coincide; one occupied bin either way
    edges = np.linspace(lo, hi, bins + 1)
    ha, _ = np.histogram(xa, edges)
    hb, _ = np.histogram(xb, edges)
    return float(0.5 * np.abs(ha / xa.size - hb / xb.size).sum())


def dump_distribution(dist: FiniteDistribution) -> str:
    """Serialize to the ``finite-dist v1`` text format.

    One header line ``finite-dist v1 <m>``, then an ``index probability``
    line per state of nonzero probability. Probabilities are written with
    shortest round-trip precision, so load(dump(d)) reproduces d exactly.
    """
    lines = [f"finite-dist v1 {dist.m}"]
    for i in dist.support():
        lines.append(f"{i} {float(dist.probs[i])!r}")
    return "\n".join(lines) + "\n"


def load_distribution(text: str) -> FiniteDistribution:
    """Parse the ``finite-dist v1`` format written by dump_distribution."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ParseError("empty distribution file")
    head = lines[0].split()
    if len(head) != 3 or head[:2] != ["finite-dist", "v1"]:
        raise ParseError(f"bad header: {lines[0]!r}")
    try:
        m = int(head[2])
    except ValueError:
        raise ParseError(f"bad state count: {head[2]!r}") from None
    if m < 1:
        raise ParseError(f"state count must be positive, got {m}")
    if m > MAX_STATES:
        raise CapacityError(f"{m} states exceed the cap of {MAX_STATES}")
    probs = np.zeros(m)
    for ln in lines[1:]:
        parts = ln.split()
        if len(parts) != 2:
            raise ParseError(f"bad entry line: {ln!r}")
        try:
            idx, val = int(parts[0]), float(parts[1])
        except ValueError:
            raise ParseError(f"bad entry line: {ln!r}") from None
        if not 0 <= idx < m:
            raise ParseError(f"state index {idx} out of range for m={m}")
        probs[idx] = val
    try:
        return FiniteDistribution(probs)
    except ValueError as exc:
        raise ParseError(f"invalid distribution: {exc}") from None
