"""Mixture decomposition of low-rank spin models through auxiliary fields.

A spin Hamiltonian whose coupling matrix has only a few large eigenvalues
factors over those directions: integrating a Gaussian auxiliary field against
the remaining small-coupling model writes the Gibbs law, up to a bounded
multiplicative error, as a finite mixture of external-field tilts. This
module performs the split, builds the discrete field net with its weights,
certifies the multiplicative sandwich by full enumeration, and reweights the
net into an exact mixture once the certificate holds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.integrate import quad
from scipy.special import logsumexp, softmax

from .errors import CapacityError, ParseError
from .ising import (
    IsingModel,
    PottsModel,
    ising_energy_vector,
    potts_digits,
    potts_energy_vector,
    states_matrix,
)
from .measures import FiniteDistribution

MAX_EXACT_STATES = 1 << 14
MAX_FIELDS = 1_000_000
MAX_NET_RANK = 3

# Multiplicative sandwich accepted for the gap transfer: dpi2/dpi within
# [e^-3, e^3] on every state, hence a factor e^6 between the two Dirichlet
# form / variance ratios.
SANDWICH_LIMIT = math.exp(3.0)


@dataclass(frozen=True)
class SpectralSplit:
    """Coupling split J = J_plus + J_tilde at the threshold 1 - 1/c.

    J_plus collects the eigendirections with eigenvalue above the threshold
    (its rank factorization is kept as `eigenvalues` and `basis`), J_tilde is
    the remainder, and `negative_trace` records the total magnitude of the
    negative part of the spectrum. The model the split was taken from rides
    along so the field-net weights can enumerate its states.
    """

    model: object
    j_plus: np.ndarray
    j_tilde: np.ndarray
    eigenvalues: np.ndarray
    basis: np.ndarray
    negative_trace: float
    c: float
    threshold: float

    def __post_init__(self):
        for name in ("j_plus", "j_tilde", "eigenvalues", "basis"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if np.abs(self.j_plus + self.j_tilde - self._coupling()).max() > 1e-10:
            raise ValueError("split parts must add back to the coupling")
        if self.eigenvalues.size and self.eigenvalues.min() <= self.threshold:
            raise ValueError("kept eigenvalues must exceed the threshold")

    def _coupling(self) -> np.ndarray:
        if isinstance(self.model, PottsModel):
            return _potts_feature_coupling(self.model)
        return self.model.J

    @property
    def r(self) -> int:
        return self.eigenvalues.size

    @property
    def dim(self) -> int:
        return self.j_plus.shape[0]


def _potts_feature_coupling(model: PottsModel) -> np.ndarray:
    """Coupling on one-hot site features: agreement counts become the
    quadratic form (beta/n) (11' - I) (x) I_q, diagonal already zero."""
    block = (model.beta / model.n) * (np.ones((model.n, model.n)) - np.eye(model.n))
    return np.kron(block, np.eye(model.q))


def split_spectrum(model, c: float) -> SpectralSplit:
    """Split the coupling spectrum at 1 - 1/c.

    Directions with eigenvalue strictly above the threshold form the PSD
    low-rank part; everything else stays in the remainder. A PottsModel is
    first lifted to its one-hot feature coupling.
    """
    if c < 1.0:
        raise ValueError("threshold parameter c must be at least 1")
    if isinstance(model, PottsModel):
        J = _potts_feature_coupling(model)
        vals, vecs = scipy.linalg.eigh(J)
    elif isinstance(model, IsingModel):
        J = model.J
        vals, vecs = model.coupling_eigh
    else:
        raise TypeError(f"expected IsingModel or PottsModel, got {type(model).__name__}")
    threshold = 1.0 - 1.0 / c
    keep = vals > threshold
    eigenvalues = vals[keep]
    basis = vecs[:, keep]
    j_plus = (basis * eigenvalues) @ basis.T
    return SpectralSplit(
        model=model,
        j_plus=j_plus,
        j_tilde=J - j_plus,
        eigenvalues=eigenvalues,
        basis=basis,
        negative_trace=float(-vals[vals < 0.0].sum()) + 0.0,
        c=float(c),
        threshold=threshold,
    )


@dataclass(frozen=True)
class FieldNet:
    """Discrete net of auxiliary fields with their mixture weights.

    Fields are full-dimension vectors living in the image of J_plus, on a
    uniform grid of the given mesh inside the radius. Weights are normalized.
    """

    fields: np.ndarray
    weights: np.ndarray
    radius: float
    mesh: float

    def __post_init__(self):
        fields = np.asarray(self.fields, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if fields.ndim != 2 or weights.shape != (fields.shape[0],):
            raise ValueError("need one weight per field vector")
        if fields.shape[0] > MAX_FIELDS:
            raise CapacityError(f"{fields.shape[0]} fields exceed the {MAX_FIELDS} cap")
        if weights.min() < 0.0 or abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to one")
        if self.mesh < 0.0:
            raise ValueError("mesh must be nonnegative")
        norms = np.linalg.norm(fields, axis=1)
        if norms.max() > self.radius + 1e-9:
            raise ValueError("every field must lie within the net radius")
        fields.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "fields", fields)
        object.__setattr__(self, "weights", weights)

    @property
    def count(self) -> int:
        return self.fields.shape[0]


def _enumeration(split: SpectralSplit):
    """Base energies E0 under J_tilde and per-state projections onto the kept
    eigenbasis, by full state enumeration of the split's model."""
    model = split.model
    if isinstance(model, PottsModel):
        if model.n * math.log2(model.q) > 14.0 + 1e-9:
            raise CapacityError(f"{model.q}**{model.n} states exceed the exact cap")
        digits = potts_digits(model.n, model.q)
        if split.r:
            onehot = (digits[:, :, None] == np.arange(model.q)).astype(float)
            proj = np.einsum(
                "xic,icr->xr", onehot, split.basis.reshape(model.n, model.q, split.r)
            )
        else:
            proj = np.zeros((digits.shape[0], 0))
        full = potts_energy_vector(model)
    else:
        if model.n > 14:
            raise CapacityError(f"2**{model.n} states exceed the exact cap")
        S = states_matrix(model.n)
        proj = S @ split.basis
        full = ising_energy_vector(model)
    # E0 = full energy minus the quadratic form of the kept part
    base = full - 0.5 * (proj * proj) @ split.eigenvalues if split.r else full
    return base, proj


def _tilts(split: SpectralSplit, fields: np.ndarray) -> np.ndarray:
    """Per-state linear tilt <h, x> (or <h, phi(x)>) for a block of fields."""
    model = split.model
    if isinstance(model, PottsModel):
        digits = potts_digits(model.n, model.q)
        onehot = (digits[:, :, None] == np.arange(model.q)).astype(float)
        return np.einsum(
            "xic,fic->xf", onehot, fields.reshape(-1, model.n, model.q)
        )
    return states_matrix(model.n) @ fields.T


def _net_radius(split: SpectralSplit, scale: float) -> float:
    lam1 = float(split.eigenvalues.max())
    lam_r = float(split.eigenvalues.min())
    r = split.r
    return (
        lam1 * scale
        + r * math.sqrt(lam1)
        + math.sqrt(lam1 * r * math.log(lam_r**-0.5 + scale))
    )


def _grid_weights(split: SpectralSplit, radius: float, mesh: float):
    """Grid coordinates, normalized weights, and the log of the raw net mass."""
    r = split.r
    steps = math.floor(radius / mesh)
    if (2 * steps + 1) ** r > 8 * MAX_FIELDS:
        raise CapacityError("field grid exceeds the net capacity")
    axis = mesh * np.arange(-steps, steps + 1)
    grids = np.meshgrid(*([axis] * r), indexing="ij")
    coords = np.stack([g.ravel() for g in grids], axis=1)
    coords = coords[np.linalg.norm(coords, axis=1) <= radius]
    if coords.shape[0] > MAX_FIELDS:
        raise CapacityError(f"{coords.shape[0]} fields exceed the {MAX_FIELDS} cap")
    base, proj = _enumeration(split)
    # midpoint quadrature over each cell, three sub-nodes per direction
    offsets = np.meshgrid(*([np.array([-mesh / 3.0, 0.0, mesh / 3.0])] * r), indexing="ij")
    offsets = np.stack([o.ravel() for o in offsets], axis=1)
    nodes = (coords[:, None, :] + offsets[None, :, :]).reshape(-1, r)
    log_gauss = -0.5 * (nodes * nodes) @ (1.0 / split.eigenvalues)
    log_z = np.empty(nodes.shape[0])
    for lo in range(0, nodes.shape[0], 4096):
        block = nodes[lo : lo + 4096]
        log_z[lo : lo + 4096] = logsumexp(
            base[:, None] + proj @ block.T, axis=0
        )
    per_node = (log_z + log_gauss).reshape(coords.shape[0], -1)
    log_cells = logsumexp(per_node, axis=1) + r * math.log(mesh / 3.0)
    return coords, softmax(log_cells), float(logsumexp(log_cells))


def _tail_to_bulk(split: SpectralSplit, radius: float, scale: float, log_bulk: float) -> float:
    """Upper bound on the truncated net mass relative to the kept mass.

    Z_H grows at most like exp(|H| * scale) while the Gaussian factor decays
    like exp(-|H|^2 / (2 lam1)), so the tail integral is bounded radially.
    """
    lam1 = float(split.eigenvalues.max())
    r = split.r
    base, _ = _enumeration(split)
    log_w = float(logsumexp(base))
    area = 2.0 * math.pi ** (r / 2.0) / math.gamma(r / 2.0)

    def integrand(s: float) -> float:
        return s ** (r - 1) * math.exp(log_w - log_bulk + s * scale - 0.5 * s * s / lam1)

    tail, _ = quad(integrand, radius, np.inf)
    return area * tail


def build_field_net(
    split: SpectralSplit, support_radius: float, n: int, mesh: float | None = None
) -> FieldNet:
    """Uniform field net over the kept eigendirections with quadrature weights.

    The mesh defaults to 1/(2 D sqrt(n)) for states in the D-cube on n sites.
    The radius starts at the analytic scale of the auxiliary Gaussian and
    doubles (at most six times) until the truncated mass is provably below a
    quarter of the kept mass. Cell weights integrate the enumerated partition
    function of the remainder model against the Gaussian factor by midpoint
    quadrature with three sub-nodes per grid direction.
    """
    if support_radius <= 0.0 or n < 1:
        raise ValueError("need a positive support radius and site count")
    if split.r > MAX_NET_RANK:
        raise CapacityError(f"rank {split.r} net would need (R/mesh)^{split.r} cells")
    scale = support_radius * math.sqrt(n)
    if mesh is None:
        mesh = 1.0 / (2.0 * scale)
    if mesh <= 0.0:
        raise ValueError("mesh must be positive")
    if split.r == 0:
        return FieldNet(
            fields=np.zeros((1, split.dim)), weights=np.ones(1), radius=0.0, mesh=mesh
        )
    radius = _net_radius(split, scale)
    for _ in range(7):
        coords, weights, log_bulk = _grid_weights(split, radius, mesh)
        if _tail_to_bulk(split, radius, scale, log_bulk) < 0.25:
            return FieldNet(
                fields=coords @ split.basis.T, weights=weights, radius=radius, mesh=mesh
            )
        radius *= 2.0
    raise ValueError("net radius search did not confine the auxiliary field mass")


def mixture_density(net: FieldNet, split: SpectralSplit, model):
    """Exact mixture law pi2 = sum_h p_h pi_h and its tilted components.

    For a spin model the components come back as IsingModels with coupling
    J_tilde and field b + h, ready for Glauber dynamics; for a Potts model
    they come back as exact tilted distributions.
    """
    same = model is split.model
    if not same and isinstance(model, IsingModel) and isinstance(split.model, IsingModel):
        same = np.array_equal(model.J, split.model.J) and np.array_equal(
            model.b, split.model.b
        )
    if not same and isinstance(model, PottsModel) and isinstance(split.model, PottsModel):
        same = (model.n, model.q, model.beta) == (
            split.model.n,
            split.model.q,
            split.model.beta,
        )
    if not same:
        raise ValueError("model does not match the one the split was taken from")
    base, _ = _enumeration(split)
    m = base.size
    pi2 = np.zeros(m)
    for lo in range(0, net.count, 256):
        block = net.fields[lo : lo + 256]
        pi2 += softmax(base[:, None] + _tilts(split, block), axis=0) @ net.weights[
            lo : lo + 256
        ]
    if isinstance(model, PottsModel):
        components = tuple(
            FiniteDistribution(softmax(base + _tilts(split, h[None, :])[:, 0]))
            for h in net.fields
        )
    else:
        components = tuple(
            IsingModel(split.j_tilde, model.b + h) for h in net.fields
        )
    return FiniteDistribution(pi2 / pi2.sum()), components


@dataclass(frozen=True)
class SandwichCertificate:
    """Extreme values of dpi2/dpi over all states and the pass verdict."""

    min_ratio: float
    max_ratio: float
    passed: bool

    def __post_init__(self):
        if self.passed != (
            self.min_ratio >= 1.0 / SANDWICH_LIMIT and self.max_ratio <= SANDWICH_LIMIT
        ):
            raise ValueError("pass flag contradicts the ratio interval")


def certify_sandwich(
    pi: FiniteDistribution, pi2: FiniteDistribution
) -> SandwichCertificate:
    """Exact multiplicative comparison of two enumerated laws."""
    if pi.m != pi2.m:
        raise ValueError("laws live on different state spaces")
    if pi.probs.min() <= 0.0:
        raise ValueError("reference law must be strictly positive")
    ratio = pi2.probs / pi.probs
    lo, hi = float(ratio.min()), float(ratio.max())
    return SandwichCertificate(
        min_ratio=lo,
        max_ratio=hi,
        passed=bool(lo >= 1.0 / SANDWICH_LIMIT and hi <= SANDWICH_LIMIT),
    )


def exact_mixture_refinement(pi: FiniteDistribution, weights, components):
    """Reweight a certified approximate mixture into an exact one.

    Each component is multiplied by the bounded ratio pi/pi2 and renormalized;
    the weights pick up the corresponding mass. The reconstruction
    sum_h q_h pibar_h = pi is verified entrywise before returning.
    """
    weights = np.asarray(weights, dtype=float)
    dists = [c.probs if isinstance(c, FiniteDistribution) else np.asarray(c, float) for c in components]
    if weights.ndim != 1 or weights.size != len(dists):
        raise ValueError("need one weight per component")
    stack = np.stack(dists)
    pi2 = weights @ stack
    cert = certify_sandwich(pi, FiniteDistribution(pi2 / pi2.sum()))
    if not cert.passed:
        raise ValueError(
            "sandwich certificate fails: the density ratio is too wide for the gap transfer"
        )
    ratio = pi.probs / pi2
    tilted = stack * ratio
    masses = tilted.sum(axis=1)
    q = weights * masses
    q /= q.sum()
    refined = tuple(FiniteDistribution(row / mass) for row, mass in zip(tilted, masses))
    recon = q @ np.stack([d.probs for d in refined])
    if np.abs(recon - pi.probs).max() > 1e-10:
        raise RuntimeError("refined mixture failed to reconstruct the target law")
    return q, refined


def dump_field_net(net: FieldNet) -> str:
    """Versioned text export: header, then one line per field with its weight.

    The header records the net's grid rank, recomputed as the dimension of
    the span of the stored fields.
    """
    if net.count == 1 and not net.fields.any():
        rank = 0
    else:
        rank = int(np.linalg.matrix_rank(net.fields, tol=1e-10))
    lines = [f"fieldnet v1 {rank} {net.count}"]
    for h, w in zip(net.fields, net.weights):
        coords = " ".join(repr(float(v)) for v in h)
        lines.append(f"{coords} {float(w)!r}")
    return "\n".join(lines) + "\n"


def load_field_net(text: str) -> FieldNet:
    """Rebuild a net from its export. The radius is recovered from the
    fields themselves; the mesh is not recorded and loads as zero."""
    lines = [ln for ln in (raw.strip() for raw in text.splitlines()) if ln]
    if not lines:
        raise ParseError("empty field net file")
    head = lines[0].split()
    if len(head) != 4 or head[0] != "fieldnet" or head[1] != "v1":
        raise ParseError(f"bad field net header {lines[0]!r}")
    try:
        rank, count = int(head[2]), int(head[3])
    except ValueError as exc:
        raise ParseError(f"bad field net header {lines[0]!r}") from exc
    if count != len(lines) - 1 or count < 1:
        raise ParseError(f"expected {count} field lines, found {len(lines) - 1}")
    rows = []
    for line in lines[1:]:
        parts = line.split()
        if len(parts) < 2:
            raise ParseError(f"bad field line {line!r}")
        try:
            rows.append([float(v) for v in parts])
        except ValueError as exc:
            raise ParseError(f"bad number in field line {line!r}") from exc
        if len(rows[-1]) != len(rows[0]):
            raise ParseError("field lines disagree on dimension")
    data = np.asarray(rows)
    fields, weights = data[:, :-1], data[:, -1]
    if abs(weights.sum() - 1.0) > 1e-9:
        raise ParseError("field weights must sum to one")
    net = FieldNet(
        fields=fields,
        weights=weights / weights.sum(),
        radius=float(np.linalg.norm(fields, axis=1).max()),
        mesh=0.0,
    )
    if rank not in (0, int(np.linalg.matrix_rank(fields, tol=1e-10))):
        raise ParseError("header rank disagrees with the stored fields")
    return net
