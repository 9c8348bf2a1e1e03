"""Continuous-space mixture targets with exact scores and discretized Langevin.

The targets are finite mixtures of smooth strongly log-concave components
(Gaussians, optionally tilted by a convex softplus ramp). All regularity
numbers attached to a mixture are exact rather than estimated: smoothness is
read off precision spectra, the strong-convexity floor likewise, and the
separation scale is the largest distance between component means.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.linalg
from scipy.integrate import cumulative_trapezoid, quad
from scipy.optimize import brentq
from scipy.special import expit, logsumexp, softmax

from .errors import ParseError
from .measures import SampleSet
from .rng import make_rng

# Any coordinate beyond this aborts its chain; the threshold sits far above
# every concentration radius a supported mixture can produce.
DIVERGENCE_GUARD = 1e8

_MC_SAMPLES = 100_000


def _as_batch(x, d: int):
    """Promote a single point to a one-row batch; report which it was."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        if arr.shape[0] != d:
            raise ValueError(f"point has dimension {arr.shape[0]}, expected {d}")
        return arr[None, :], True
    if arr.ndim == 2 and arr.shape[1] == d:
        return arr, False
    raise ValueError(f"expected shape (n, {d}) or ({d},), got {arr.shape}")


class GaussianComponent:
    """Normalized Gaussian density with exact potential, gradient and sampler."""

    def __init__(self, mean, cov):
        mean = np.asarray(mean, dtype=float).reshape(-1)
        cov = np.asarray(cov, dtype=float)
        d = mean.size
        if cov.shape != (d, d):
            raise ValueError("covariance shape does not match the mean")
        if np.abs(cov - cov.T).max() > 1e-12:
            raise ValueError("covariance must be symmetric")
        cov = 0.5 * (cov + cov.T)
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariance must be positive definite") from exc
        self.mean = mean
        self.cov = cov
        self._chol = chol
        self.precision = scipy.linalg.cho_solve((chol, True), np.eye(d))
        spread = scipy.linalg.eigvalsh(cov)
        self.alpha = 1.0 / spread[-1]
        self.beta = 1.0 / spread[0]
        self._log_norm = 0.5 * d * math.log(2.0 * math.pi) + float(
            np.log(np.diag(chol)).sum()
        )
        for a in (self.mean, self.cov, self.precision):
            a.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def mode(self) -> np.ndarray:
        return self.mean

    def potential(self, X: np.ndarray) -> np.ndarray:
        z = X - self.mean
        y = scipy.linalg.solve_triangular(self._chol, z.T, lower=True)
        return 0.5 * np.einsum("dn,dn->n", y, y) + self._log_norm

    def grad(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) @ self.precision

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        return self.mean + rng.standard_normal((count, self.dim)) @ self._chol.T


class SoftplusComponent:
    """Gaussian tilted by a one-directional softplus ramp.

    The density is proportional to exp(-z'Pz/2 - strength*softplus(w'z)) with
    z the offset from the center. The ramp is convex, so the component keeps
    the Gaussian's strong-convexity floor while its smoothness grows by at
    most strength*|w|^2/4 (the softplus second derivative peaks at 1/4).
    Normalizer and mean reduce to one-dimensional integrals over the marginal
    of w'z, which is all the quadrature this class ever needs.
    """

    def __init__(self, center, cov, tilt, strength: float):
        base = GaussianComponent(center, cov)
        tilt = np.asarray(tilt, dtype=float).reshape(-1)
        if tilt.size != base.dim:
            raise ValueError("tilt direction has the wrong dimension")
        if np.linalg.norm(tilt) == 0.0:
            raise ValueError("tilt direction must be nonzero")
        strength = float(strength)
        if strength < 0.0:
            raise ValueError("tilt strength must be nonnegative")
        self._base = base
        self.center = base.mean
        self.cov = base.cov
        self.precision = base.precision
        self._chol = base._chol
        self.tilt = tilt
        self.strength = strength
        self._sig_w = base.cov @ tilt
        self._s2 = float(tilt @ self._sig_w)
        s = math.sqrt(self._s2)
        a = strength

        def tilted(z: float) -> float:
            return math.exp(
                -a * (math.log1p(math.exp(-abs(s * z))) + max(s * z, 0.0))
                - 0.5 * z * z
            ) / math.sqrt(2.0 * math.pi)

        mass, _ = quad(tilted, -np.inf, np.inf)
        shift, _ = quad(lambda z: s * z * tilted(z), -np.inf, np.inf)
        self._log_norm = base._log_norm + math.log(mass)
        self.mean = self.center + self._sig_w * (shift / mass / self._s2)
        t_star = brentq(
            lambda t: t + a * expit(t) * self._s2, -a * self._s2 - 1.0, 1.0
        )
        self.mode = self.center - a * expit(t_star) * self._sig_w
        self.alpha = base.alpha
        self.beta = base.beta + 0.25 * a * float(tilt @ tilt)
        # inverse-CDF table for the tilted 1-D marginal of w'z
        lo, hi = -a * self._s2 - 8.0 * s, 8.0 * s
        grid = np.linspace(lo, hi, 4096)
        dens = np.exp(
            -a * np.logaddexp(0.0, grid) - 0.5 * (grid / s) ** 2
        )
        cdf = np.concatenate([[0.0], cumulative_trapezoid(dens, grid)])
        self._cdf_grid = grid
        self._cdf = cdf / cdf[-1]
        for arr in (self.tilt, self.mean, self.mode, self._sig_w):
            arr.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.center.size

    def potential(self, X: np.ndarray) -> np.ndarray:
        z = X - self.center
        quad_part = self._base.potential(X) - self._base._log_norm
        ramp = np.logaddexp(0.0, z @ self.tilt)
        return quad_part + self.strength * ramp + self._log_norm

    def grad(self, X: np.ndarray) -> np.ndarray:
        z = X - self.center
        return z @ self.precision + self.strength * expit(z @ self.tilt)[
            :, None
        ] * self.tilt

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        t = np.interp(rng.random(count), self._cdf, self._cdf_grid)
        g = rng.standard_normal((count, self.dim)) @ self._chol.T
        z = g + ((t - g @ self.tilt) / self._s2)[:, None] * self._sig_w
        return self.center + z


class MixtureModel:
    """Weighted mixture of smooth components with exact score and regularity.

    Weights must be positive and sum to one. The smoothness bound is the
    largest component smoothness, the convexity floor the smallest component
    floor, and the separation scale the largest distance between component
    means (a declared bound may exceed it but never undercut it).
    """

    def __init__(self, weights, components: Sequence, separation: float | None = None):
        weights = np.asarray(weights, dtype=float).reshape(-1)
        components = tuple(components)
        if weights.size == 0 or weights.size != len(components):
            raise ValueError("need one positive weight per component")
        if weights.min() <= 0.0:
            raise ValueError("weights must be positive")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to one")
        dims = {c.dim for c in components}
        if len(dims) != 1:
            raise ValueError("components must share one dimension")
        means = np.stack([c.mean for c in components])
        largest = 0.0
        for i in range(len(components)):
            for j in range(i):
                largest = max(largest, float(np.linalg.norm(means[i] - means[j])))
        if separation is None:
            separation = largest
        elif largest > separation + 1e-9:
            raise ValueError("mean separation exceeds the declared bound")
        weights.setflags(write=False)
        means.setflags(write=False)
        self.weights = weights
        self.components = components
        self.means = means
        self.separation = float(separation)
        self.beta = max(c.beta for c in components)
        self.alpha = min(c.alpha for c in components)

    @property
    def d(self) -> int:
        return self.components[0].dim

    @property
    def k(self) -> int:
        return len(self.components)

    @property
    def kappa(self) -> float:
        return self.beta / self.alpha

    @property
    def modes(self) -> np.ndarray:
        return np.stack([c.mode for c in self.components])

    @property
    def gradient_bound(self) -> float:
        """Scale of the largest component gradient a stationary draw sees."""
        return math.sqrt(self.beta * self.kappa * self.d) + self.beta * self.separation

    def _component_logs(self, X: np.ndarray) -> np.ndarray:
        return np.stack(
            [math.log(p) - c.potential(X) for p, c in zip(self.weights, self.components)]
        )

    def log_density(self, x) -> np.ndarray | float:
        X, single = _as_batch(x, self.d)
        out = logsumexp(self._component_logs(X), axis=0)
        return float(out[0]) if single else out

    def potential(self, x) -> np.ndarray | float:
        return -self.log_density(x)

    def score(self, x) -> np.ndarray:
        X, single = _as_batch(x, self.d)
        if not np.isfinite(X).all():
            raise ValueError("score requested at a non-finite point")
        if self.k == 1:
            out = -self.components[0].grad(X)
        else:
            posterior = softmax(self._component_logs(X), axis=0)
            grads = np.stack([c.grad(X) for c in self.components])
            out = -np.einsum("kn,knd->nd", posterior, grads)
        return out[0] if single else out

    def max_gradient(self, x) -> np.ndarray | float:
        """Largest component gradient norm at x, the local score envelope."""
        X, single = _as_batch(x, self.d)
        norms = np.stack(
            [np.linalg.norm(c.grad(X), axis=1) for c in self.components]
        ).max(axis=0)
        return float(norms[0]) if single else norms

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        labels = rng.choice(self.k, size=count, p=self.weights)
        out = np.empty((count, self.d))
        for c, comp in enumerate(self.components):
            mask = labels == c
            hits = int(mask.sum())
            if hits:
                out[mask] = comp.sample(rng, hits)
        return out


def sample_mixture(model: MixtureModel, count: int, seed: int) -> SampleSet:
    """Draw stationary samples, the raw material for data-based starts."""
    return SampleSet(model.sample(count, make_rng(seed, "init")))


def mixture_score(model: MixtureModel, x) -> np.ndarray:
    """Gradient of the log density, a posterior-weighted blend of component
    gradients computed through log-sum-exp so no weight ever overflows."""
    return model.score(x)


_FIELD_KINDS = ("exact", "perturbed", "submixture")


@dataclass(frozen=True)
class ScoreField:
    """A score evaluator together with where it came from.

    Perturbed fields carry both the requested error level and the error
    actually measured on a fresh stationary Monte Carlo batch.
    """

    fn: Callable[[np.ndarray], np.ndarray]
    kind: str
    epsilon: float | None = None
    measured_error: float | None = None
    subset: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in _FIELD_KINDS:
            raise ValueError(f"unknown score field kind {self.kind!r}")
        if self.kind == "perturbed" and (
            self.epsilon is None or self.measured_error is None
        ):
            raise ValueError("perturbed fields must report their error levels")

    def evaluate(self, x) -> np.ndarray:
        return self.fn(x)


def exact_score(model: MixtureModel) -> ScoreField:
    return ScoreField(fn=model.score, kind="exact")


@dataclass(frozen=True)
class SinusoidalNoise:
    """Spec for the perturbation field: a fixed random combination of a few
    low-frequency sinusoidal vector fields, so the perturbation is smooth,
    bounded, and reproducible from a seed."""

    waves: int = 8
    min_freq: float = 0.2
    max_freq: float = 1.0

    def __post_init__(self):
        if self.waves < 0:
            raise ValueError("wave count must be nonnegative")
        if not 0.0 <= self.min_freq <= self.max_freq:
            raise ValueError("need 0 <= min_freq <= max_freq")


def _unit_rows(rng: np.random.Generator, count: int, d: int) -> np.ndarray:
    rows = rng.standard_normal((count, d))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def perturb_score(
    model: MixtureModel,
    epsilon: float,
    noise: SinusoidalNoise | None = None,
    seed: int = 0,
) -> ScoreField:
    """Exact score plus a random smooth field rescaled to stationary L2 size
    epsilon. Frequencies live below one over the mixture's footprint, the
    separation scale plus one component standard-deviation radius, so the
    field varies slowly where the mass sits."""
    if not epsilon >= 0.0:
        raise ValueError("perturbation size must be nonnegative")
    if epsilon == 0.0:
        return exact_score(model)
    spec = noise if noise is not None else SinusoidalNoise()
    rng = make_rng(seed)
    d = model.d
    footprint = model.separation + math.sqrt(d / model.alpha)
    values = _unit_rows(rng, max(spec.waves, 1), d)[: spec.waves]
    omegas = _unit_rows(rng, max(spec.waves, 1), d)[: spec.waves]
    omegas = omegas * (
        rng.uniform(spec.min_freq, spec.max_freq, max(spec.waves, 1))[: spec.waves, None]
        / footprint
    )
    phases = rng.uniform(0.0, 2.0 * math.pi, spec.waves)
    amps = rng.standard_normal(spec.waves)

    def field(X: np.ndarray) -> np.ndarray:
        if spec.waves == 0:
            return np.zeros_like(X)
        return (np.sin(X @ omegas.T + phases) * amps) @ values

    draws = model.sample(_MC_SAMPLES, rng)
    raw = float(np.mean(np.einsum("nd,nd->n", field(draws), field(draws))))
    if raw < 1e-16:
        raise ValueError("perturbation field is degenerate on this target")
    scale = epsilon / math.sqrt(raw)
    fresh = model.sample(_MC_SAMPLES, rng)
    held_out = field(fresh)
    measured = scale * math.sqrt(
        float(np.mean(np.einsum("nd,nd->n", held_out, held_out)))
    )

    def fn(x):
        X, single = _as_batch(x, d)
        out = model.score(X) + scale * field(X)
        return out[0] if single else out

    return ScoreField(
        fn=fn, kind="perturbed", epsilon=float(epsilon), measured_error=measured
    )


def submixture(model: MixtureModel, subset) -> MixtureModel:
    """Renormalized mixture over a component subset."""
    idx = sorted({int(i) for i in subset})
    if not idx:
        raise ValueError("component subset must be nonempty")
    if idx[0] < 0 or idx[-1] >= model.k:
        raise ValueError("component subset out of range")
    w = model.weights[idx]
    return MixtureModel(w / w.sum(), [model.components[i] for i in idx])


def submixture_score_error(model: MixtureModel, subset, samples: SampleSet) -> float:
    """Monte Carlo estimate of the stationary mean squared score change from
    dropping the complement of the subset."""
    sub = submixture(model, subset)
    X = samples.data
    diff = model.score(X) - sub.score(X)
    return float(np.mean(np.einsum("nd,nd->n", diff, diff)))


def submixture_score(model: MixtureModel, subset) -> ScoreField:
    sub = submixture(model, subset)
    return ScoreField(
        fn=sub.score, kind="submixture", subset=tuple(sorted({int(i) for i in subset}))
    )


@dataclass(frozen=True)
class LmcConfig:
    """Step size and horizon in the same time units; the horizon must be an
    integer number of steps."""

    step: float
    horizon: float
    seed: int
    chains: int = 1

    def __post_init__(self):
        if self.step <= 0.0:
            raise ValueError("step size must be positive")
        if self.horizon < 0.0:
            raise ValueError("horizon must be nonnegative")
        if self.chains < 1:
            raise ValueError("need at least one chain")
        n = round(self.horizon / self.step)
        if abs(n * self.step - self.horizon) > 1e-9 * max(1.0, self.horizon):
            raise ValueError("horizon must be an integer number of steps")

    @property
    def steps(self) -> int:
        return round(self.horizon / self.step)


@dataclass(frozen=True)
class LmcResult:
    """Terminal points, one per chain, plus which chains tripped the guard.

    A flagged chain froze at its first offending state and took no further
    steps, so its row records where the blow-up happened.
    """

    samples: SampleSet
    flagged: np.ndarray

    def __post_init__(self):
        flagged = np.asarray(self.flagged, dtype=bool)
        if flagged.shape != (self.samples.n,):
            raise ValueError("need one flag per chain")
        flagged.setflags(write=False)
        object.__setattr__(self, "flagged", flagged)

    @property
    def chains(self) -> int:
        return self.samples.n


def lmc_run(init, score: ScoreField, cfg: LmcConfig) -> LmcResult:
    """Euler discretization of the overdamped Langevin diffusion.

    Every chain starts at a uniformly chosen row of the initialization (a
    single point behaves as a one-row set), then takes cfg.steps moves of
    x + step*s(x) + sqrt(2*step)*noise in lockstep. Noise is drawn for the
    full ensemble each step, so a chain's path depends only on the seed and
    the chain count, never on when other chains trip the guard.
    """
    pool = init.data if isinstance(init, SampleSet) else None
    if pool is None:
        pool = np.asarray(init, dtype=float).reshape(1, -1)
    rng = make_rng(cfg.seed, "lmc")
    x = pool[rng.integers(0, pool.shape[0], cfg.chains)].copy()
    flagged = np.zeros(cfg.chains, dtype=bool)
    spread = math.sqrt(2.0 * cfg.step)
    for _ in range(cfg.steps):
        noise = rng.standard_normal(x.shape)
        if not flagged.any():
            # fast path: same float association as the masked update below
            x += cfg.step * np.asarray(score.evaluate(x))
            x += spread * noise
        else:
            live = ~flagged
            if not live.any():
                break
            drift = np.asarray(score.evaluate(x[live]))
            x[live] = x[live] + cfg.step * drift + spread * noise[live]
        flagged |= np.abs(x).max(axis=1) > DIVERGENCE_GUARD
    return LmcResult(SampleSet(x), flagged)


@dataclass(frozen=True)
class WarmStartReport:
    """Computable driver of the warm-start bound at a candidate start point.

    The surrogate collects the worst component's step-weighted squared
    gradient plus potential gap above its mean, then adds the dimensional
    term d*(1+log(1/(alpha*h))). The flag reports whether the point escapes
    the concentration radius (plus separation) around any component mean.
    """

    surrogate: float
    radius: float
    outside: bool


def warm_start_diagnostic(
    model: MixtureModel, x, step: float, epsilon1: float = 0.1
) -> WarmStartReport:
    if not 0.0 < step <= 1.0 / (50.0 * model.beta) * (1.0 + 1e-12):
        raise ValueError("step must satisfy h <= 1/(50*beta)")
    if not 0.0 < epsilon1 < 1.0:
        raise ValueError("epsilon1 must lie in (0, 1)")
    X, _ = _as_batch(np.asarray(x, dtype=float).reshape(-1), model.d)
    worst = -math.inf
    for comp in model.components:
        gap = float(comp.potential(X)[0] - comp.potential(comp.mean[None, :])[0])
        g2 = float(np.sum(comp.grad(X)[0] ** 2))
        worst = max(worst, step * g2 + gap)
    surrogate = worst + model.d * (1.0 + math.log(1.0 / (model.alpha * step)))
    radius = (math.sqrt(model.d) + math.log(3.0 / epsilon1)) / math.sqrt(
        model.alpha
    ) + model.separation
    dists = np.linalg.norm(model.means - X[0], axis=1)
    return WarmStartReport(
        surrogate=surrogate, radius=radius, outside=bool((dists > radius).any())
    )


def dump_mixture(model: MixtureModel) -> str:
    """Render a mixture as versioned text: weights, means, covariance factors
    (lower Cholesky), and tilt data for ramped components."""
    lines = [f"mixture v1 {model.d} {model.k}"]
    for p, comp in zip(model.weights, model.components):
        if isinstance(comp, SoftplusComponent):
            lines.append(f"softplus {float(p)!r} {float(comp.strength)!r}")
            center = comp.center
        else:
            lines.append(f"gaussian {float(p)!r}")
            center = comp.mean
        lines.append(" ".join(repr(float(v)) for v in center))
        for row in comp._chol:
            lines.append(" ".join(repr(float(v)) for v in row))
        if isinstance(comp, SoftplusComponent):
            lines.append(" ".join(repr(float(v)) for v in comp.tilt))
    return "\n".join(lines) + "\n"


def _floats(line: str, count: int) -> np.ndarray:
    parts = line.split()
    if len(parts) != count:
        raise ParseError(f"expected {count} numbers, got {len(parts)}")
    try:
        return np.array([float(v) for v in parts])
    except ValueError as exc:
        raise ParseError(f"bad number in {line!r}") from exc


def load_mixture(text: str) -> MixtureModel:
    lines = [ln for ln in (raw.strip() for raw in text.splitlines()) if ln]
    if not lines:
        raise ParseError("empty mixture file")
    head = lines[0].split()
    if len(head) != 4 or head[0] != "mixture" or head[1] != "v1":
        raise ParseError(f"bad mixture header {lines[0]!r}")
    try:
        d, k = int(head[2]), int(head[3])
    except ValueError as exc:
        raise ParseError(f"bad mixture header {lines[0]!r}") from exc
    weights, comps = [], []
    at = 1
    for _ in range(k):
        if at >= len(lines):
            raise ParseError("mixture file ended early")
        tag = lines[at].split()
        at += 1
        rows = lines[at : at + d + 1 + (1 if tag[0] == "softplus" else 0)]
        if len(rows) < d + 1:
            raise ParseError("mixture file ended early")
        center = _floats(rows[0], d)
        chol = np.stack([_floats(rows[1 + i], d) for i in range(d)])
        cov = chol @ chol.T
        if tag[0] == "gaussian" and len(tag) == 2:
            weights.append(float(tag[1]))
            comps.append(GaussianComponent(center, cov))
            at += d + 1
        elif tag[0] == "softplus" and len(tag) == 3:
            if len(rows) < d + 2:
                raise ParseError("mixture file ended early")
            weights.append(float(tag[1]))
            comps.append(
                SoftplusComponent(center, cov, _floats(rows[d + 1], d), float(tag[2]))
            )
            at += d + 2
        else:
            raise ParseError(f"bad component line {' '.join(tag)!r}")
    if at != len(lines):
        raise ParseError("trailing data after the last component")
    try:
        return MixtureModel(weights, comps)
    except ValueError as exc:
        raise ParseError(str(exc)) from exc


def dump_terminal_samples(result: LmcResult) -> str:
    """CSV with one row per chain: chain_index, coordinates, flagged."""
    d = result.samples.dim
    header = "chain_index," + ",".join(f"x_{j + 1}" for j in range(d)) + ",flagged"
    lines = [header]
    for i, row in enumerate(result.samples.data):
        coords = ",".join(repr(float(v)) for v in row)
        lines.append(f"{i},{coords},{int(result.flagged[i])}")
    return "\n".join(lines) + "\n"


def load_terminal_samples(text: str) -> LmcResult:
    lines = [ln for ln in (raw.strip() for raw in text.splitlines()) if ln]
    if not lines:
        raise ParseError("empty sample file")
    head = lines[0].split(",")
    if head[0] != "chain_index" or head[-1] != "flagged" or len(head) < 3:
        raise ParseError(f"bad sample header {lines[0]!r}")
    d = len(head) - 2
    points = np.empty((len(lines) - 1, d))
    flags = np.empty(len(lines) - 1, dtype=bool)
    for i, line in enumerate(lines[1:]):
        parts = line.split(",")
        if len(parts) != d + 2:
            raise ParseError(f"row {i} has {len(parts)} fields, expected {d + 2}")
        try:
            if int(parts[0]) != i:
                raise ParseError(f"row {i} is out of order")
            points[i] = [float(v) for v in parts[1:-1]]
            flag = int(parts[-1])
        except ValueError as exc:
            raise ParseError(f"bad number in row {i}") from exc
        if flag not in (0, 1):
            raise ParseError(f"bad flag in row {i}")
        flags[i] = bool(flag)
    return LmcResult(SampleSet(points), flags)
