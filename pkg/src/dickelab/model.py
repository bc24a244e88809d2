"""Model definition and Hamiltonian construction.

Two representations of the same spin-boson model are supported:

* FULL -- every spin is resolved; the basis is (bitstring) x (Fock number)
  with site 0 the most significant bit and the Fock index fastest-varying.
* SUBENSEMBLE -- spins are partitioned into M groups, each restricted to its
  symmetric (Dicke) ladder; the basis is (m_1, ..., m_M) x (Fock number),
  again with the Fock index fastest-varying.

Sign conventions: sigma_z|0> = +|0>, the boson term enters as -delta a^dag a,
and the light-shift coupling acts through (I + sigma_z) so only |0> feels the
force.  All frequencies are angular (rad/s).
"""

from __future__ import annotations

import cmath
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from . import dicke
from .errors import DimensionCapExceeded, EmptyInput, InvalidTruncation

DEFAULT_DIMENSION_CAP = 2 ** 22

KHZ = 2e3 * np.pi  # rad/s per (kHz / 2pi) interface unit


@dataclass(frozen=True)
class SiteCoupling:
    """Per-site light-shift Rabi rate, mode amplitude and motional phase."""

    omega_i: float  # rad/s
    b_i: float      # dimensionless mode amplitude
    phi_i: float    # rad; canonical range [0, 2pi), transforms may leave it

    def __post_init__(self):
        if not (math.isfinite(self.omega_i) and math.isfinite(self.b_i)
                and math.isfinite(self.phi_i)):
            raise ValueError("site coupling fields must be finite")


@dataclass(frozen=True)
class ModelParams:
    """All symbols of the site-resolved Hamiltonian."""

    eta: float
    delta: float
    b_field: float
    sites: tuple[SiteCoupling, ...]
    n_max: int

    def __post_init__(self):
        object.__setattr__(self, "sites", tuple(self.sites))
        if len(self.sites) < 1:
            raise EmptyInput("model needs at least one site")
        if self.n_max < 0:
            raise InvalidTruncation(f"n_max must be >= 0, got {self.n_max}")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")

    @property
    def n_sites(self):
        return len(self.sites)

    def site_drives(self):
        """Complex per-site couplings eta * Omega_i * b_i * exp(i phi_i)."""
        return np.array([self.eta * s.omega_i * s.b_i * cmath.exp(1j * s.phi_i)
                         for s in self.sites])


@dataclass(frozen=True)
class SubensembleGroup:
    n_j: int     # spins in the group
    g_j: float   # eta * Omega_j, rad/s (mode amplitude 1/sqrt(N) absorbed)
    phi_j: float

    def __post_init__(self):
        if self.n_j < 1:
            raise ValueError("every group needs at least one spin")


@dataclass(frozen=True)
class SubensembleSpec:
    """M-group factorized model; ``members`` maps groups to parent site ids."""

    groups: tuple[SubensembleGroup, ...]
    members: tuple[tuple[int, ...], ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(self.groups))
        if len(self.groups) < 1:
            raise EmptyInput("need at least one subensemble")
        if self.members is not None:
            members = tuple(tuple(m) for m in self.members)
            if len(members) != len(self.groups):
                raise ValueError("members must align with groups")
            for grp, mem in zip(self.groups, members):
                if len(mem) != grp.n_j:
                    raise ValueError("member count must equal group size")
            object.__setattr__(self, "members", members)

    @property
    def m_groups(self):
        return len(self.groups)

    @property
    def total_n(self):
        return sum(g.n_j for g in self.groups)

    def group_of_site(self, site):
        members = self.members or self.default_members()
        for j, mem in enumerate(members):
            if site in mem:
                return j
        raise KeyError(f"site {site} not in any group")

    def default_members(self):
        """Contiguous block assignment used when no mapping was recorded."""
        out, offset = [], 0
        for g in self.groups:
            out.append(tuple(range(offset, offset + g.n_j)))
            offset += g.n_j
        return tuple(out)


@dataclass(frozen=True)
class Basis:
    """Basis-ordering metadata shared by operators and state vectors."""

    tag: str                      # "FULL" | "SUBENSEMBLE"
    spin_dims: tuple[int, ...]    # per-axis spin dimensions
    n_max: int

    @classmethod
    def full(cls, n_sites, n_max):
        return cls("FULL", (2,) * n_sites, n_max)

    @classmethod
    def subensemble(cls, group_sizes, n_max):
        return cls("SUBENSEMBLE", tuple(n + 1 for n in group_sizes), n_max)

    @property
    def axis_dims(self):
        return self.spin_dims + (self.n_max + 1,)

    @property
    def dimension(self):
        return math.prod(self.axis_dims)

    @property
    def n_sites(self):
        if self.tag == "FULL":
            return len(self.spin_dims)
        return sum(d - 1 for d in self.spin_dims)

    @property
    def group_sizes(self):
        if self.tag != "SUBENSEMBLE":
            raise ValueError("group_sizes only defined for SUBENSEMBLE bases")
        return tuple(d - 1 for d in self.spin_dims)


@dataclass(frozen=True)
class HamiltonianOperator:
    """Immutable sparse Hermitian operator tagged with its basis."""

    matrix: sp.csr_matrix = field(repr=False)
    basis: Basis

    def __post_init__(self):
        _check_hermitian(self.matrix)

    @property
    def dimension(self):
        return self.matrix.shape[0]

    def entries(self):
        """(rows, cols, values) triplet view of the sparse representation."""
        coo = self.matrix.tocoo()
        return coo.row.copy(), coo.col.copy(), coo.data.copy()

    def norm_scale(self):
        """Cheap upper bound on the spectral norm (max row 1-norm)."""
        return float(abs(self.matrix).sum(axis=1).max())

    def expectation(self, amplitudes):
        return complex(np.vdot(amplitudes, self.matrix @ amplitudes))


def _check_hermitian(matrix, rtol=1e-12):
    scale = max(abs(matrix.data).max() if matrix.nnz else 0.0, 1e-300)
    resid = abs((matrix - matrix.getH()).data)
    worst = resid.max() if resid.size else 0.0
    if worst > rtol * scale:
        raise ValueError(f"operator not Hermitian: residual {worst:.3e} "
                         f"exceeds {rtol:.0e} of scale {scale:.3e}")


def _check_cap(dimension, cap):
    if dimension > cap:
        raise DimensionCapExceeded(dimension, cap)


def _fock_ops(n_max):
    n = np.arange(n_max + 1)
    a = sp.diags(np.sqrt(n[1:]), offsets=1, format="csr")
    return a, sp.diags(n.astype(float), format="csr")


def _force_op(n_max, phi):
    """a e^{i phi} + a^dag e^{-i phi} on the truncated Fock space."""
    a, _ = _fock_ops(n_max)
    return (a * cmath.exp(1j * phi) + a.getH() * cmath.exp(-1j * phi)).tocsr()


def build_full_hamiltonian(params: ModelParams,
                           dimension_cap=DEFAULT_DIMENSION_CAP) -> HamiltonianOperator:
    """Site-resolved Hamiltonian on the (bitstring) x (Fock) basis.

    H = eta sum_i b_i Omega_i (I + sigma_z^i)(a e^{i phi_i} + a^dag e^{-i phi_i})
        - delta a^dag a + B sum_i sigma_x^i
    """
    n = params.n_sites
    if params.n_max < 0:
        raise InvalidTruncation(f"n_max must be >= 0, got {params.n_max}")
    basis = Basis.full(n, params.n_max)
    _check_cap(basis.dimension, dimension_cap)

    nf = params.n_max + 1
    spin_dim = 2 ** n
    _, number = _fock_ops(params.n_max)
    ident_f = sp.identity(nf, format="csr")

    h = sp.csr_matrix((basis.dimension, basis.dimension), dtype=complex)
    idx = np.arange(spin_dim, dtype=np.int64)
    for i, site in enumerate(params.sites):
        amp = 2.0 * params.eta * site.b_i * site.omega_i
        if amp != 0.0:
            # (I + sigma_z^i)/2 projects on bit i = 0 (site 0 most significant)
            bit = (idx >> (n - 1 - i)) & 1
            proj = sp.diags((bit == 0).astype(float), format="csr")
            h = h + amp * sp.kron(proj, _force_op(params.n_max, site.phi_i), format="csr")
        if params.b_field != 0.0:
            sx = sp.csr_matrix(np.array([[0.0, 1.0], [1.0, 0.0]]))
            op = sp.kron(sp.identity(2 ** i, format="csr"),
                         sp.kron(sx, sp.identity(2 ** (n - 1 - i), format="csr")),
                         format="csr")
            h = h + params.b_field * sp.kron(op, ident_f, format="csr")
    if params.delta != 0.0:
        h = h - params.delta * sp.kron(sp.identity(spin_dim, format="csr"), number,
                                       format="csr")
    h = (h + sp.csr_matrix((basis.dimension, basis.dimension), dtype=complex)).tocsr()
    return HamiltonianOperator(h, basis)


def _embed_spin_op(op, group_dims, j):
    """kron(I, ..., op at spin slot j, ..., I) over the spin axes only."""
    left = math.prod(group_dims[:j])
    right = math.prod(group_dims[j + 1:])
    out = sp.csr_matrix(op)
    if left > 1:
        out = sp.kron(sp.identity(left, format="csr"), out, format="csr")
    if right > 1:
        out = sp.kron(out, sp.identity(right, format="csr"), format="csr")
    return out


def build_subensemble_hamiltonian(spec: SubensembleSpec, delta, b_field, total_n,
                                  n_max, dimension_cap=DEFAULT_DIMENSION_CAP
                                  ) -> HamiltonianOperator:
    """Group-factorized Hamiltonian on the Dicke ladders x Fock basis.

    H = (2/sqrt(N)) sum_j g_j S_z^j F(phi_j)
      + (1/sqrt(N)) sum_j g_j N_j F(phi_j)
      - delta a^dag a + 2B sum_j S_x^j,
    with F(phi) = a e^{i phi} + a^dag e^{-i phi}.  The spin-independent force
    carries the same g_j as the spin-dependent one, so that a group of N_j
    spins with uniform site coupling g_j/sqrt(N) reproduces the site-resolved
    model exactly.
    """
    if n_max < 0:
        raise InvalidTruncation(f"n_max must be >= 0, got {n_max}")
    if total_n != spec.total_n:
        raise ValueError(f"total_n={total_n} inconsistent with groups "
                         f"(sum n_j = {spec.total_n})")
    sizes = tuple(g.n_j for g in spec.groups)
    basis = Basis.subensemble(sizes, n_max)
    _check_cap(basis.dimension, dimension_cap)

    group_dims = basis.spin_dims
    spin_dim = math.prod(group_dims)
    rootn = math.sqrt(total_n)
    _, number = _fock_ops(n_max)
    ident_f = sp.identity(n_max + 1, format="csr")

    h = sp.csr_matrix((basis.dimension, basis.dimension), dtype=complex)
    for j, grp in enumerate(spec.groups):
        sz, sx, _ = dicke.spin_ops(grp.n_j)
        if grp.g_j != 0.0:
            drive = sp.csr_matrix((2.0 / rootn) * grp.g_j * sz
                                  + (grp.g_j * grp.n_j / rootn) * np.eye(grp.n_j + 1))
            h = h + sp.kron(_embed_spin_op(drive, group_dims, j),
                            _force_op(n_max, grp.phi_j), format="csr")
        if b_field != 0.0:
            h = h + 2.0 * b_field * sp.kron(
                _embed_spin_op(sp.csr_matrix(sx), group_dims, j), ident_f, format="csr")
    if delta != 0.0:
        h = h - delta * sp.kron(sp.identity(spin_dim, format="csr"), number, format="csr")
    h = (h + sp.csr_matrix((basis.dimension, basis.dimension), dtype=complex)).tocsr()
    return HamiltonianOperator(h, basis)


@dataclass(frozen=True)
class SubensembleModel:
    """Bundle of everything needed to (re)build a SUBENSEMBLE Hamiltonian."""

    spec: SubensembleSpec
    delta: float
    b_field: float
    n_max: int
    dimension_cap: int = DEFAULT_DIMENSION_CAP

    def hamiltonian(self):
        return build_subensemble_hamiltonian(self.spec, self.delta, self.b_field,
                                             self.spec.total_n, self.n_max,
                                             self.dimension_cap)


def build_hamiltonian(model, dimension_cap=None):
    """Uniform entry point for ModelParams or SubensembleModel."""
    if isinstance(model, ModelParams):
        cap = DEFAULT_DIMENSION_CAP if dimension_cap is None else dimension_cap
        return build_full_hamiltonian(model, cap)
    if isinstance(model, SubensembleModel):
        if dimension_cap is not None:
            model = replace(model, dimension_cap=dimension_cap)
        return model.hamiltonian()
    raise TypeError(f"cannot build a Hamiltonian from {type(model).__name__}")


def phase_shifted(model, dphi):
    """Same model with every motional phase advanced by dphi (echo half)."""
    if isinstance(model, ModelParams):
        sites = tuple(replace(s, phi_i=s.phi_i + dphi) for s in model.sites)
        return replace(model, sites=sites)
    if isinstance(model, SubensembleModel):
        groups = tuple(replace(g, phi_j=g.phi_j + dphi) for g in model.spec.groups)
        return replace(model, spec=replace(model.spec, groups=groups))
    raise TypeError(f"cannot phase-shift {type(model).__name__}")


# -- subensemble grouping -----------------------------------------------------

def group_into_subensembles(sites, eta, m_groups) -> SubensembleSpec:
    """Partition sites into M groups by closeness of their complex drives.

    Sites are ordered by (phase, magnitude) of c_i = eta Omega_i b_i e^{i phi_i}
    and segmented contiguously; the segmentation minimizes the within-group
    sum of squared distances exactly (dynamic program), which makes the
    objective non-increasing in M.  Group couplings are the segment centroids
    with the 1/sqrt(N) mode normalization absorbed: g_j = sqrt(N)|mean c_i|.
    """
    n = len(sites)
    if n == 0:
        raise EmptyInput("no sites to group")
    if not 1 <= m_groups <= n:
        raise ValueError(f"need 1 <= M <= N, got M={m_groups}, N={n}")

    drives = np.array([eta * s.omega_i * s.b_i * cmath.exp(1j * s.phi_i) for s in sites])
    phase = np.mod(np.angle(drives), 2 * np.pi)
    phase[np.abs(drives) == 0.0] = 0.0
    order = np.lexsort((np.abs(drives), phase))
    c = drives[order]

    bounds = _segment_boundaries(c, m_groups)
    groups, members = [], []
    rootn = math.sqrt(n)
    for a, b in zip(bounds[:-1], bounds[1:]):
        centroid = c[a:b].mean()
        g = rootn * abs(centroid)
        phi = float(np.mod(np.angle(centroid), 2 * np.pi)) if g > 0 else 0.0
        groups.append(SubensembleGroup(n_j=b - a, g_j=float(g), phi_j=phi))
        members.append(tuple(int(i) for i in order[a:b]))
    return SubensembleSpec(tuple(groups), tuple(members))


def _segment_boundaries(values, m_groups):
    """Optimal contiguous M-segmentation of complex values (min total SSE)."""
    n = len(values)
    pre1 = np.concatenate([[0.0 + 0j], np.cumsum(values)])
    pre2 = np.concatenate([[0.0], np.cumsum(np.abs(values) ** 2)])

    def seg_cost(a, b):  # points a..b-1
        length = b - a
        s = pre1[b] - pre1[a]
        return max(pre2[b] - pre2[a] - (abs(s) ** 2) / length, 0.0)

    inf = float("inf")
    cost = np.full((m_groups + 1, n + 1), inf)
    split = np.zeros((m_groups + 1, n + 1), dtype=int)
    cost[0, 0] = 0.0
    for m in range(1, m_groups + 1):
        for k in range(m, n - (m_groups - m) + 1):
            best, arg = inf, m - 1
            for a in range(m - 1, k):
                val = cost[m - 1, a] + seg_cost(a, k)
                if val < best - 1e-15 * (1.0 + abs(best)):
                    best, arg = val, a
            cost[m, k] = best
            split[m, k] = arg
    bounds = [n]
    k = n
    for m in range(m_groups, 0, -1):
        k = split[m, k]
        bounds.append(k)
    return bounds[::-1]


def clustering_objective(sites, eta, spec: SubensembleSpec):
    """Within-group sum of squared distances of the complex drives."""
    drives = np.array([eta * s.omega_i * s.b_i * cmath.exp(1j * s.phi_i) for s in sites])
    members = spec.members or spec.default_members()
    total = 0.0
    for mem in members:
        vals = drives[list(mem)]
        total += float(np.sum(np.abs(vals - vals.mean()) ** 2))
    return total


# -- detuning sign normalization ---------------------------------------------

@dataclass(frozen=True)
class BasisRelabel:
    """How states and observables map under the antiunitary sign fix.

    ``y_flip`` means |+y> <-> |-y> in initial states and a sign flip of every
    measured sigma_y (and of the y component of measurement directions);
    x and z labels are untouched.
    """

    y_flip: bool = False
    zero_detuning: bool = False

    def map_spin_dir(self, direction):
        if self.y_flip and direction.endswith("y"):
            return ("-" if direction[0] == "+" else "+") + "y"
        return direction

    def observable_sign(self, axis):
        return -1.0 if (self.y_flip and axis == "y") else 1.0

    def map_direction(self, theta, phi):
        """Bloch-sphere direction carried to the transformed frame."""
        if self.y_flip:
            return theta, -phi
        return theta, phi


def sign_flip(params: ModelParams) -> ModelParams:
    """The parameter-level involution realizing H -> -H*.

    delta and B change sign, phases are conjugated and the overall sign of
    the light-shift force is folded into Omega_i.  All field updates are
    exact negations, so applying the map twice is a bit-for-bit identity.
    """
    sites = tuple(replace(s, omega_i=-s.omega_i, phi_i=-s.phi_i) for s in params.sites)
    return replace(params, delta=-params.delta, b_field=-params.b_field, sites=sites)


def normalize_sign(params: ModelParams):
    """Return parameters with delta >= 0 plus the basis relabel record.

    For delta > 0 this is the identity.  For delta < 0 the returned model is
    -H* re-expressed in the original operator basis; evolving it from the
    relabeled initial state reproduces every observable of the original
    model after applying the relabel to the measured quantities.  delta = 0
    is allowed and returns the identity with a warning flag.
    """
    if params.delta > 0:
        return params, BasisRelabel()
    if params.delta == 0:
        warnings.warn("delta = 0: sign normalization is a no-op", stacklevel=2)
        return params, BasisRelabel(zero_detuning=True)
    return sign_flip(params), BasisRelabel(y_flip=True)
