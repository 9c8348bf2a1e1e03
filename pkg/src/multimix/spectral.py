"""Spectral analysis of heat-bath Glauber dynamics on spin spaces.

The continuous-time generator L acts on functions, with unit-rate coordinate
clocks and heat-bath flip rates pi(x^i) / (pi(x) + pi(x^i)). Everything here
works with its symmetrization A = D^{1/2} (-L) D^{-1/2}, D = diag(pi): A is
symmetric positive semidefinite, its eigenvalues are the relaxation rates,
and D^{-1/2} maps its eigenvectors to eigenfunctions of -L that are
orthonormal in L^2(pi). The bottom eigenfunction is the constant 1.

State indexing matches the package convention (bit i of the index is spin i).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.optimize

from .errors import CapacityError, ParseError
from .measures import FiniteDistribution, SampleSet, _readonly

MAX_DENSE_STATES = 1 << 14


def _as_distribution(mu0, m: int) -> FiniteDistribution:
    """Accept either a distribution or a batch of spin samples."""
    if isinstance(mu0, FiniteDistribution):
        return mu0
    if isinstance(mu0, SampleSet):
        from .ising import empirical_distribution

        n = m.bit_length() - 1
        return empirical_distribution(mu0.data, n)
    raise TypeError(f"expected FiniteDistribution or SampleSet, got {type(mu0).__name__}")


@dataclass(frozen=True)
class GeneratorMatrix:
    """Symmetrized negative generator together with its stationary law.

    Validated at construction: symmetry to 1e-10, nonpositive off-diagonal
    entries, nonnegative diagonal, and A sqrt(pi) = 0 within 1e-8 (the
    constant function is harmonic). The last two conditions pin the row
    structure of the underlying rate matrix: row sums vanish and jump rates
    are nonnegative.
    """

    A: np.ndarray
    pi: FiniteDistribution

    def __post_init__(self):
        A = _readonly(self.A)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError(f"generator must be square, got shape {A.shape}")
        if A.shape[0] != self.pi.m:
            raise ValueError(
                f"generator size {A.shape[0]} does not match state count {self.pi.m}"
            )
        if not np.all(np.isfinite(A)):
            raise ValueError("generator entries must be finite")
        asym = np.abs(A - A.T).max()
        if asym > 1e-10:
            raise ValueError(f"asymmetry {asym!r} exceeds 1e-10")
        off = A - np.diag(np.diag(A))
        if off.max() > 1e-12:
            raise ValueError("off-diagonal entries must be nonpositive")
        if np.diag(A).min() < -1e-12:
            raise ValueError("diagonal entries must be nonnegative")
        drift = np.abs(A @ np.sqrt(self.pi.probs)).max()
        if drift > 1e-8:
            raise ValueError(f"A sqrt(pi) = 0 violated by {drift!r}")
        object.__setattr__(self, "A", A)

    @property
    def m(self) -> int:
        return self.A.shape[0]

    def rate_matrix(self) -> np.ndarray:
        """The generator L itself (acting on functions; row sums vanish)."""
        sq = np.sqrt(self.pi.probs)
        return -(self.A * (sq[None, :] / sq[:, None]))


@dataclass(frozen=True)
class Spectrum:
    """Bottom eigenvalues and pi-orthonormal eigenfunctions of -L.

    Eigenvalues ascend, the first is zero (to 1e-8) with eigenfunction
    identically one, and the eigenfunction matrix F (one column per
    eigenfunction) satisfies F' diag(pi) F = I within 1e-8. Columns are
    sign-fixed: the entry of largest magnitude is positive.
    """

    eigenvalues: np.ndarray
    eigenfunctions: np.ndarray
    pi: FiniteDistribution

    def __post_init__(self):
        w = _readonly(self.eigenvalues)
        F = _readonly(self.eigenfunctions)
        if w.ndim != 1 or w.size < 1:
            raise ValueError("need at least one eigenvalue")
        if F.shape != (self.pi.m, w.size):
            raise ValueError(
                f"eigenfunction matrix has shape {F.shape}, expected ({self.pi.m}, {w.size})"
            )
        if w.size > 1 and np.diff(w).min() < -1e-12:
            raise ValueError("eigenvalues must ascend")
        if abs(w[0]) > 1e-8:
            raise ValueError(f"bottom eigenvalue {w[0]!r} is not 0 within 1e-8")
        if w[0] < -1e-8 or w.min() < -1e-8:
            raise ValueError("negative relaxation rate")
        gram = (F * self.pi.probs[:, None]).T @ F
        err = np.abs(gram - np.eye(w.size)).max()
        if err > 1e-8:
            raise ValueError(f"eigenfunctions not pi-orthonormal: deviation {err!r}")
        if np.abs(F[:, 0] - 1.0).max() > 1e-6:
            raise ValueError("bottom eigenfunction must be the constant 1")
        object.__setattr__(self, "eigenvalues", w)
        object.__setattr__(self, "eigenfunctions", F)

    @property
    def m(self) -> int:
        return self.pi.m

    @property
    def k(self) -> int:
        return self.eigenvalues.size

    @property
    def is_full(self) -> bool:
        return self.k == self.m


@dataclass(frozen=True)
class BalanceStatistic:
    """Euclidean size of the initialization's overlap with eigenfunctions
    2..k; coefficient i is the mean of eigenfunction i under the
    initialization."""

    k: int
    coefficients: np.ndarray
    value: float

    def __post_init__(self):
        c = _readonly(self.coefficients)
        if c.shape != (self.k - 1,):
            raise ValueError(f"expected {self.k - 1} coefficients, got shape {c.shape}")
        norm = float(np.linalg.norm(c))
        if abs(self.value - norm) > 1e-12:
            raise ValueError(f"value {self.value!r} differs from coefficient norm {norm!r}")
        object.__setattr__(self, "coefficients", c)


@dataclass(frozen=True)
class ContractionReport:
    """Exact chi-square decay against the balance-plus-gap envelope."""

    times: np.ndarray
    lhs: np.ndarray
    bound: np.ndarray
    epsilon: float
    alpha: float
    holds: bool

    def __post_init__(self):
        object.__setattr__(self, "times", _readonly(self.times))
        object.__setattr__(self, "lhs", _readonly(self.lhs))
        object.__setattr__(self, "bound", _readonly(self.bound))


def build_glauber_generator(pi: FiniteDistribution) -> GeneratorMatrix:
    """Symmetrized heat-bath generator for a stationary law on {-1,+1}^n.

    Parameters
    ----------
    pi : FiniteDistribution
        Target law over all 2^n spin configurations. Must be strictly
        positive: the heat-bath rates divide by pi(x) + pi(x^i), and a chain
        restricted to a sub-support is a different object.

    Raises
    ------
    ValueError
        If the state count is not a power of two or pi has zero entries.
    CapacityError
        Beyond 2^14 states (the dense-matrix limit).
    """
    m = pi.m
    n = m.bit_length() - 1
    if 1 << n != m:
        raise ValueError(f"state count {m} is not a power of two")
    if n < 1:
        raise ValueError("need at least one spin")
    if m > MAX_DENSE_STATES:
        raise CapacityError(f"{m} states exceed the dense cap of {MAX_DENSE_STATES}")
    if pi.probs.min() <= 0.0:
        raise ValueError("stationary law must have full support (zero entries found)")
    p = pi.probs
    sq = np.sqrt(p)
    idx = np.arange(m)
    A = np.zeros((m, m))
    diag = np.zeros(m)
    for i in range(n):
        nb = idx ^ (1 << i)
        total = p + p[nb]
        A[idx, nb] = -sq * sq[nb] / total
        diag += p[nb] / total
    A[idx, idx] = diag
    return GeneratorMatrix(A=A, pi=pi)


def eigendecompose(gen: GeneratorMatrix, k_max: int | None = None) -> Spectrum:
    """Bottom-k eigenpairs of the symmetrized generator.

    Eigenvectors v of A are mapped to eigenfunctions f = D^{-1/2} v of -L,
    which makes them pi-orthonormal. Residuals ||A v - lambda v|| (equal to
    the pi-norm of the eigenfunction residual) are checked against 1e-7.
    """
    m = gen.m
    k = m if k_max is None else int(k_max)
    if not 1 <= k <= m:
        raise ValueError(f"k_max must lie in 1..{m}, got {k_max}")
    if k == m:
        w, v = scipy.linalg.eigh(gen.A)
    else:
        w, v = scipy.linalg.eigh(gen.A, subset_by_index=(0, k - 1))
    resid = gen.A @ v - v * w[None, :]
    worst = float(np.sqrt((resid**2).sum(axis=0)).max())
    if worst > 1e-7:
        raise ValueError(f"eigenpair residual {worst!r} exceeds 1e-7")
    F = v / np.sqrt(gen.pi.probs)[:, None]
    # deterministic signs: largest-magnitude entry of each column positive
    lead = np.abs(F).argmax(axis=0)
    F *= np.where(F[lead, np.arange(k)] < 0.0, -1.0, 1.0)[None, :]
    w = w.copy()
    if abs(w[0]) <= 1e-8:
        # the kernel of A is exactly sqrt(pi), so the bottom eigenfunction is
        # the constant; writing it down beats dividing noise by tiny sqrt(pi)
        w[0] = 0.0
        F[:, 0] = 1.0
    return Spectrum(eigenvalues=w, eigenfunctions=F, pi=gen.pi)


def higher_order_gap(spectrum: Spectrum, k: int) -> float:
    """The (k+1)-st smallest relaxation rate, the decay rate left after the
    k slowest directions are discounted."""
    if k < 1:
        raise ValueError(f"order must be >= 1, got {k}")
    if spectrum.k < k + 1:
        raise ValueError(f"spectrum holds {spectrum.k} eigenvalues, need {k + 1}")
    return float(spectrum.eigenvalues[k])


def _check_mu0(spectrum: Spectrum, mu0) -> FiniteDistribution:
    mu0 = _as_distribution(mu0, spectrum.m)
    if mu0.m != spectrum.m:
        raise ValueError(f"state-space mismatch: {mu0.m} vs {spectrum.m}")
    return mu0


def balance_statistic(spectrum: Spectrum, mu0, k: int) -> BalanceStatistic:
    """Overlap of an initialization with eigenfunctions 2..k.

    The initialization may be a FiniteDistribution or a SampleSet of spin
    configurations (its empirical law is used). Coefficient i is
    E_{mu0}[f_i]. Under mu0 = pi every coefficient vanishes (orthogonality
    to the constant); a large value flags mass concentrated on few of the
    slow directions.
    """
    mu0 = _check_mu0(spectrum, mu0)
    if k < 1:
        raise ValueError(f"order must be >= 1, got {k}")
    if spectrum.k < k:
        raise ValueError(f"spectrum holds {spectrum.k} eigenfunctions, need {k}")
    coeff = spectrum.eigenfunctions[:, 1:k].T @ mu0.probs
    return BalanceStatistic(k=k, coefficients=coeff, value=float(np.linalg.norm(coeff)))


def _require_full(spectrum: Spectrum, what: str) -> None:
    if not spectrum.is_full:
        raise ValueError(
            f"{what} needs the full spectrum ({spectrum.m} eigenpairs), got {spectrum.k}"
        )


def _check_times(times) -> np.ndarray:
    t = np.atleast_1d(np.asarray(times, dtype=float))
    if t.ndim != 1 or t.size == 0:
        raise ValueError("need a nonempty 1-D array of times")
    if not np.all(np.isfinite(t)) or t.min() < 0.0:
        raise ValueError("times must be finite and >= 0")
    return t


def chi2_trajectory(spectrum: Spectrum, mu0, times) -> np.ndarray:
    """Exact chi-square divergence of the evolved law against pi.

    chi2(mu_t || pi) = sum_{i >= 2} exp(-2 lambda_i t) c_i^2 with
    c_i = E_{mu0}[f_i]. The identity needs every eigenpair, so a partial
    spectrum is refused rather than silently truncated.
    """
    _require_full(spectrum, "chi2_trajectory")
    mu0 = _check_mu0(spectrum, mu0)
    t = _check_times(times)
    coeff = spectrum.eigenfunctions[:, 1:].T @ mu0.probs
    rates = spectrum.eigenvalues[1:]
    return np.exp(-2.0 * np.outer(t, rates)) @ (coeff**2)


def evolve_distribution(gen: GeneratorMatrix, mu0: FiniteDistribution, t: float) -> FiniteDistribution:
    """Push an initial law through the semigroup: mu_t = mu0 e^{tL}.

    Computed as D^{1/2} exp(-tA) D^{-1/2} mu0 via the matrix exponential,
    independent of any eigendecomposition. Round-off can leave entries a
    hair below zero; anything past -1e-10 is treated as an error, the rest
    is clipped and renormalized.
    """
    if mu0.m != gen.m:
        raise ValueError(f"state-space mismatch: {mu0.m} vs {gen.m}")
    if not (math.isfinite(t) and t >= 0.0):
        raise ValueError(f"time must be finite and >= 0, got {t!r}")
    sq = np.sqrt(gen.pi.probs)
    out = sq * (scipy.linalg.expm(-t * gen.A) @ (mu0.probs / sq))
    if out.min() < -1e-10:
        raise ValueError(f"evolution produced probability {out.min()!r}")
    out = np.clip(out, 0.0, None)
    return FiniteDistribution(out / out.sum())


def verify_balance_contraction(
    spectrum: Spectrum,
    mu0: FiniteDistribution,
    k: int,
    times,
    t0: float = 0.0,
) -> ContractionReport:
    """Check the exact chi-square curve against its balance envelope.

    The envelope is epsilon^2 + exp(-alpha (t - t0)) chi2(mu_{t0} || pi)
    with epsilon the balance statistic over eigenfunctions 2..k and alpha
    the (k+1)-st rate. With k = 1 the balance term is empty and the envelope
    degenerates to the plain spectral-gap decay.
    """
    _require_full(spectrum, "verify_balance_contraction")
    t = _check_times(times)
    if not (math.isfinite(t0) and t0 >= 0.0):
        raise ValueError(f"t0 must be finite and >= 0, got {t0!r}")
    if t.min() < t0:
        raise ValueError("all times must be >= t0")
    eps = balance_statistic(spectrum, mu0, k).value
    alpha = higher_order_gap(spectrum, k)
    lhs = chi2_trajectory(spectrum, mu0, t)
    chi0 = float(chi2_trajectory(spectrum, mu0, [t0])[0])
    bound = eps**2 + np.exp(-alpha * (t - t0)) * chi0
    holds = bool(np.all(lhs <= bound + 1e-9))
    return ContractionReport(
        times=t, lhs=lhs, bound=bound, epsilon=eps, alpha=alpha, holds=holds
    )


EXHAUSTIVE_STATE_CAP = 4096
_PAIR_CHUNK = 256


def _single_state_init(B: np.ndarray, pi: np.ndarray, tol: float) -> FiniteDistribution | None:
    flat = np.abs(B).max(axis=1) if B.shape[1] else np.zeros(B.shape[0])
    ok = np.flatnonzero(flat <= tol)
    if ok.size == 0:
        return None
    best = ok[np.argmax(pi[ok])]
    return FiniteDistribution.delta(int(best), B.shape[0])


def _pair_init(B: np.ndarray, tol: float) -> FiniteDistribution | None:
    # two-point supports: weights (t, 1-t) on rows (x, y) kill the balance
    # vector iff the segment between the rows passes within tol of the origin
    m = B.shape[0]
    sq = np.einsum("xi,xi->x", B, B)
    for lo in range(0, m, _PAIR_CHUNK):
        hi = min(lo + _PAIR_CHUNK, m)
        dots = B[lo:hi] @ B.T
        a = sq[lo:hi, None]
        b = sq[None, :]
        den = a + b - 2.0 * dots
        t = np.where(den > 1e-30, (b - dots) / np.where(den > 1e-30, den, 1.0), 0.5)
        t = np.clip(t, 0.0, 1.0)
        resid = t * t * a + (1.0 - t) ** 2 * b + 2.0 * t * (1.0 - t) * dots
        cols = np.arange(m)[None, :]
        hits = (resid <= tol * tol) & (cols > np.arange(lo, hi)[:, None])
        if hits.any():
            r, c = np.argwhere(hits)[0]
            x, y = lo + int(r), int(c)
            probs = np.zeros(m)
            probs[x] = t[r, c]
            probs[y] = 1.0 - t[r, c]
            return FiniteDistribution(probs / probs.sum())
    return None


def minimal_balanced_initialization(
    spectrum: Spectrum, k: int, tol: float = 1e-8
) -> FiniteDistribution:
    """Sparse initialization with no overlap on eigenfunctions 2..k.

    Searches exhaustively for a supporting set of one or two states (state
    spaces up to 4096; two-point supports are only minimal for k >= 3) and
    otherwise falls back to a simplex phase-1 basic solution of the balance
    system, whose support has at most k states. So the k-1 state target is
    met when such a support exists within the searched sizes; failing that,
    the result is the minimal-support basic solution found.

    Raises
    ------
    ValueError
        If the linear program is infeasible, which signals inconsistent
        eigenfunctions: the stationary law itself always satisfies the
        balance constraints, so a valid spectrum cannot be infeasible.
    """
    if k < 2:
        raise ValueError(f"order must be >= 2, got {k}")
    if spectrum.k < k:
        raise ValueError(f"spectrum holds {spectrum.k} eigenfunctions, need {k}")
    B = spectrum.eigenfunctions[:, 1:k]
    pi = spectrum.pi.probs
    m = spectrum.m
    if m <= EXHAUSTIVE_STATE_CAP:
        found = _single_state_init(B, pi, tol)
        if found is not None:
            return found
        if k >= 3:
            found = _pair_init(B, tol)
            if found is not None:
                return found
    stack = np.vstack([B.T, np.ones(m)])
    target = np.concatenate([np.zeros(k - 1), [1.0]])
    res = scipy.optimize.linprog(
        c=np.zeros(m), A_eq=stack, b_eq=target, bounds=(0.0, None), method="highs"
    )
    if res.status == 2:
        raise ValueError(
            "balance system infeasible: the eigenfunctions are inconsistent "
            "(the stationary law itself satisfies every balance constraint, "
            "so a valid spectrum always admits a solution)"
        )
    if not res.success:
        raise RuntimeError(f"linear program failed: {res.message}")
    support = np.flatnonzero(res.x > 1e-10)
    # polish on the support: nonnegative least squares drives the balance
    # residual to round-off, then the mass is renormalized exactly
    sol, _ = scipy.optimize.nnls(stack[:, support], target)
    probs = np.zeros(m)
    probs[support] = sol
    total = probs.sum()
    if total <= 0.0:
        raise RuntimeError("degenerate solution from the simplex fallback")
    probs /= total
    if np.abs(B.T @ probs).max() > tol:
        raise RuntimeError("could not polish the basic solution to tolerance")
    return FiniteDistribution(probs)


def dump_spectrum(spectrum: Spectrum) -> str:
    """Serialize to ``spectrum v1 <m> <k>``: eigenvalue line, then one row
    of k eigenfunction values per state."""
    lines = [f"spectrum v1 {spectrum.m} {spectrum.k}"]
    lines.append(" ".join(repr(float(v)) for v in spectrum.eigenvalues))
    for row in spectrum.eigenfunctions:
        lines.append(" ".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


def load_spectrum(text: str, pi: FiniteDistribution) -> Spectrum:
    """Parse ``spectrum v1`` text; the stationary law is supplied separately
    because the format stores only eigenvalues and eigenfunctions."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ParseError("empty spectrum file")
    head = lines[0].split()
    if len(head) != 4 or head[:2] != ["spectrum", "v1"]:
        raise ParseError(f"bad header: {lines[0]!r}")
    try:
        m, k = int(head[2]), int(head[3])
    except ValueError:
        raise ParseError(f"bad dimensions in header: {lines[0]!r}") from None
    if m != pi.m:
        raise ParseError(f"file is for {m} states, stationary law has {pi.m}")
    if len(lines) != m + 2:
        raise ParseError(f"expected {m + 1} data lines, found {len(lines) - 1}")
    try:
        w = np.array([float(v) for v in lines[1].split()])
        F = np.array([[float(v) for v in ln.split()] for ln in lines[2:]])
    except ValueError:
        raise ParseError("non-numeric entry in spectrum file") from None
    if w.size != k or F.shape != (m, k):
        raise ParseError("dimension mismatch between header and data")
    try:
        return Spectrum(eigenvalues=w, eigenfunctions=F, pi=pi)
    except ValueError as exc:
        raise ParseError(f"invalid spectrum: {exc}") from None
