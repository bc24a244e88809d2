"""State representation and time evolution.

Propagation uses an adaptive-step Lanczos approximation of
exp(-i H dt)|psi>.  The Krylov basis is rebuilt from the current state each
accepted step; within a step the time substep is halved until the residual
estimate drops below the configured local tolerance and doubled again when
the estimate is far below it.

Checkpoint byte layout (little-endian), version 1:

    offset  size        field
    0       4           magic b"DLSV"
    4       2           u16 format version (1)
    6       1           u8 basis tag: 0 = FULL, 1 = SUBENSEMBLE
    7       1           reserved (0)
    8       4           u32 number of spin axes A
    12      4*A         u32 per-axis spin dimension
    12+4A   4           u32 Fock dimension (n_max + 1)
    ..      8           f64 evolution time (s)
    ..      8           u64 total dimension D
    ..      16*D        f64 pairs (re, im), basis order as in model.Basis
    ..      4           u32 CRC-32 of all preceding bytes
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from . import dicke
from .errors import (BasisMismatch, KrylovBreakdown, NonzeroField, NormDrift,
                     TruncationTooSmall)
from .model import (Basis, ModelParams, SubensembleModel, build_hamiltonian,
                    phase_shifted)


@dataclass
class StateVector:
    """Complex amplitudes over a tagged basis, at an evolution time."""

    amplitudes: np.ndarray
    basis: Basis
    time: float = 0.0

    def __post_init__(self):
        self.amplitudes = np.asarray(self.amplitudes, dtype=complex)
        if self.amplitudes.shape != (self.basis.dimension,):
            raise BasisMismatch(
                f"amplitude length {self.amplitudes.shape} does not match "
                f"basis dimension {self.basis.dimension}")

    def norm(self):
        return float(np.linalg.norm(self.amplitudes))

    def copy(self):
        return StateVector(self.amplitudes.copy(), self.basis, self.time)


@dataclass(frozen=True)
class EvolutionConfig:
    krylov_dim: int = 30
    step_tolerance: float = 1e-10
    output_grid: tuple[float, ...] = ()

    def __post_init__(self):
        if self.krylov_dim < 2:
            raise ValueError("krylov_dim must be >= 2")
        if self.step_tolerance <= 0:
            raise ValueError("step_tolerance must be > 0")


@dataclass(frozen=True)
class EchoSchedule:
    """Midpoint pi rotation plus laser phase flip in the second half."""

    enabled: bool = True
    pivot_axis: str = "x"


def fidelity(a: StateVector, b: StateVector):
    if a.basis != b.basis:
        raise BasisMismatch("states live in different bases")
    return float(abs(np.vdot(a.amplitudes, b.amplitudes)) ** 2)


# -- initial states -----------------------------------------------------------

def thermal_tail(nbar, n_max):
    """Probability mass of a thermal state beyond the truncation."""
    if nbar <= 0:
        return 0.0
    q = nbar / (1.0 + nbar)
    return q ** (n_max + 1)


def sample_thermal_occupation(nbar, rng):
    if nbar <= 0:
        return 0
    q = nbar / (1.0 + nbar)
    u = rng.random()
    return max(0, math.ceil(math.log1p(-u) / math.log(q)) - 1)


def initial_state(basis: Basis, spin_dir="+x", boson="vacuum", rng=None) -> StateVector:
    """Product spin state along a Bloch axis, tensored with a boson state.

    ``boson`` is "vacuum", an explicit Fock occupation (int), or
    ("thermal", nbar) in which case one occupation is drawn per call from the
    thermal distribution using ``rng`` (trajectory sampling).
    """
    if spin_dir not in dicke.SPIN_DIR_AMPLITUDES:
        raise ValueError(f"unknown spin direction {spin_dir!r}")
    u, v = dicke.SPIN_DIR_AMPLITUDES[spin_dir]

    if boson == "vacuum":
        n_occ = 0
    elif isinstance(boson, int):
        n_occ = boson
    elif isinstance(boson, tuple) and boson[0] == "thermal":
        nbar = float(boson[1])
        if thermal_tail(nbar, basis.n_max) > 1e-6:
            raise TruncationTooSmall(
                f"thermal tail beyond n_max={basis.n_max} exceeds 1e-6 for nbar={nbar}")
        if rng is None:
            raise ValueError("thermal boson sampling needs an rng")
        n_occ = sample_thermal_occupation(nbar, rng)
    else:
        raise ValueError(f"unknown boson spec {boson!r}")
    if not 0 <= n_occ <= basis.n_max:
        raise TruncationTooSmall(f"Fock occupation {n_occ} outside truncation")

    if basis.tag == "FULL":
        spin = np.array([u, v], dtype=complex)
        vec = np.array([1.0 + 0j])
        for _ in range(basis.n_sites):
            vec = np.kron(vec, spin)
    else:
        vec = np.array([1.0 + 0j])
        for size in basis.group_sizes:
            vec = np.kron(vec, dicke.product_state_coeffs(size, u, v))
    fock = np.zeros(basis.n_max + 1, dtype=complex)
    fock[n_occ] = 1.0
    amps = np.kron(vec, fock)
    amps /= np.linalg.norm(amps)
    return StateVector(amps, basis, 0.0)


# -- tensor-axis operator application ----------------------------------------

def apply_spin_ops(state: StateVector, ops) -> StateVector:
    """Apply one matrix per spin axis (None skips the axis)."""
    arr = state.amplitudes.reshape(state.basis.axis_dims)
    for ax, op in enumerate(ops):
        if op is None:
            continue
        arr = np.moveaxis(np.tensordot(op, arr, axes=([1], [ax])), 0, ax)
    return StateVector(np.ascontiguousarray(arr).reshape(-1), state.basis, state.time)


def _per_axis_sizes(basis: Basis):
    if basis.tag == "FULL":
        return [1] * basis.n_sites
    return list(basis.group_sizes)


def global_rotation(state: StateVector, axis, angle) -> StateVector:
    """Ideal global rotation exp(-i angle/2 sum_i sigma_axis^i)."""
    ops = [dicke.rotation_about(n, axis, angle) for n in _per_axis_sizes(state.basis)]
    return apply_spin_ops(state, ops)


def rotate_for_measurement(state: StateVector, theta, phi) -> StateVector:
    """Carry the state to the frame where (theta, phi) is the z axis."""
    ops = [dicke.rotation_to_axis(n, theta, phi).conj().T
           for n in _per_axis_sizes(state.basis)]
    return apply_spin_ops(state, ops)


# -- Krylov propagation -------------------------------------------------------

def _lanczos_basis(matrix, v0, m_max):
    """Hermitian Lanczos with full reorthogonalization.

    Returns (V, alphas, betas, beta_next, m) where V has m orthonormal
    columns, T = tridiag(betas, alphas, betas) is the m x m projection and
    beta_next is the first neglected off-diagonal (0 on happy breakdown).
    """
    dim = v0.shape[0]
    m_max = min(m_max, dim)
    V = np.empty((dim, m_max), dtype=complex)
    alphas = np.zeros(m_max)
    betas = np.zeros(max(m_max - 1, 0))
    V[:, 0] = v0
    m = m_max
    beta_next = 0.0
    scale = 1.0
    for j in range(m_max):
        w = matrix @ V[:, j]
        alpha = np.vdot(V[:, j], w).real
        alphas[j] = alpha
        w = w - alpha * V[:, j]
        if j > 0:
            w = w - betas[j - 1] * V[:, j - 1]
        # full reorthogonalization (two classical Gram-Schmidt passes)
        for _ in range(2):
            w = w - V[:, :j + 1] @ (V[:, :j + 1].conj().T @ w)
        beta = np.linalg.norm(w)
        if not np.isfinite(beta):
            raise KrylovBreakdown("non-finite Lanczos recurrence")
        scale = max(scale, abs(alpha), beta)
        if j == m_max - 1:
            beta_next = beta
            break
        if beta <= 1e-14 * scale:
            m = j + 1
            beta_next = 0.0
            break
        betas[j] = beta
        V[:, j + 1] = w / beta
    return V[:, :m], alphas[:m], betas[:max(m - 1, 0)], beta_next, m


def _tridiag(alphas, betas):
    t = np.diag(alphas).astype(complex)
    if len(betas):
        t += np.diag(betas, 1) + np.diag(betas, -1)
    return t


def evolve(state: StateVector, hamiltonian, t_target, config=EvolutionConfig()
           ) -> StateVector:
    """Propagate to exp(-i H (t_target - t)) |psi> within the local tolerance."""
    if hamiltonian.basis != state.basis:
        raise BasisMismatch("Hamiltonian and state bases differ")
    duration = t_target - state.time
    if duration == 0.0:
        out = state.copy()
        out.time = t_target
        return out
    sgn = 1.0 if duration > 0 else -1.0
    remaining = abs(duration)
    psi = state.amplitudes.copy()
    matrix = hamiltonian.matrix
    dt = remaining
    steps = 0
    while remaining > 0.0:
        steps += 1
        if steps > 10 ** 6:
            raise KrylovBreakdown("step control failed to make progress")
        V, alphas, betas, beta_next, _ = _lanczos_basis(matrix, psi, config.krylov_dim)
        t = _tridiag(alphas, betas)
        dt = min(dt, remaining)
        while True:
            u = expm(-1j * sgn * dt * t)[:, 0]
            # generalized-residual estimate: the rate of leakage out of the
            # Krylov subspace is beta_next |u_m(s)|; take the endpoint value
            err = beta_next * abs(u[-1]) * dt
            if err <= config.step_tolerance or dt <= abs(duration) * 1e-14:
                break
            dt *= 0.5
        psi = V @ u
        if not np.all(np.isfinite(psi)):
            raise KrylovBreakdown("propagation produced non-finite amplitudes")
        nrm = np.linalg.norm(psi)
        if abs(nrm - 1.0) > 1e-6:
            raise NormDrift(f"norm drifted to {nrm}")
        remaining -= dt
        if err < 0.01 * config.step_tolerance:
            dt *= 2.0
    return StateVector(psi, state.basis, t_target)


def evolve_series(state: StateVector, hamiltonian, times, config=EvolutionConfig()):
    """States at an increasing grid of absolute times (single continuation)."""
    out = []
    current = state
    for t in times:
        if t < current.time:
            raise ValueError("output grid must be non-decreasing")
        current = evolve(current, hamiltonian, t, config)
        out.append(current)
    return out


def evolve_with_echo(state: StateVector, model, t_total, config=EvolutionConfig(),
                     echo=EchoSchedule()) -> StateVector:
    """Half evolution, global pi pulse, half evolution with flipped phases.

    ``model`` is a ModelParams or SubensembleModel; the second-half
    Hamiltonian is rebuilt with every motional phase advanced by pi, which is
    what cancels the spin-independent force.
    """
    if not echo.enabled:
        raise ValueError("echo schedule is disabled; use evolve() instead")
    t0 = state.time
    h1 = build_hamiltonian(model)
    half = evolve(state, h1, t0 + t_total / 2.0, config)
    flipped = global_rotation(half, echo.pivot_axis, np.pi)
    h2 = build_hamiltonian(phase_shifted(model, np.pi))
    return evolve(flipped, h2, t0 + t_total, config)


# -- analytic zero-field oracle ----------------------------------------------

def analytic_b0_oracle(params: ModelParams, spin_bitstring, t):
    """Closed-form boson response of one sigma_z sector at B = 0.

    For the spin configuration ``spin_bitstring`` (0 = |0>, sigma_z = +1) the
    boson starts in vacuum and stays coherent:
    alpha(t) = (c/delta)(1 - e^{i delta t}) with
    c = sum_i eta b_i Omega_i (1 + s_i) e^{-i phi_i},
    and global phase theta(t) = |c|^2 (sin(delta t) - delta t) / delta^2.
    Returns (alpha, theta).
    """
    if params.b_field != 0.0:
        raise NonzeroField("the analytic oracle requires B = 0")
    bits = list(spin_bitstring)
    if len(bits) != params.n_sites:
        raise ValueError("bitstring length must equal the number of sites")
    c = sum(params.eta * s.b_i * s.omega_i * (1 + (1 - 2 * int(b)))
            * np.exp(-1j * s.phi_i)
            for s, b in zip(params.sites, bits))
    if params.delta != 0.0:
        alpha = (c / params.delta) * (1.0 - np.exp(1j * params.delta * t))
        theta = abs(c) ** 2 * (math.sin(params.delta * t) - params.delta * t) \
            / params.delta ** 2
    else:
        alpha = -1j * c * t
        theta = 0.0
    return complex(alpha), float(theta)


def coherent_amplitudes(alpha, n_max):
    """Truncated coherent-state column exp(-|a|^2/2) a^n / sqrt(n!)."""
    n = np.arange(n_max + 1)
    if alpha == 0:
        out = np.zeros(n_max + 1, dtype=complex)
        out[0] = 1.0
        return out
    logmag = -abs(alpha) ** 2 / 2 + n * math.log(abs(alpha)) \
        - 0.5 * np.array([math.lgamma(k + 1) for k in n])
    return np.exp(logmag) * np.exp(1j * n * np.angle(alpha))


def b0_reference_state(params: ModelParams, spin_amplitudes, t) -> StateVector:
    """Assemble the full analytic state at B = 0 from vacuum.

    ``spin_amplitudes`` is the initial spin vector over the 2^N bitstring
    basis; each sector evolves as e^{i theta_s(t)} |alpha_s(t)>.  The result
    is normalized in the truncated space (the truncation tail is the only
    approximation).
    """
    n = params.n_sites
    spin_amplitudes = np.asarray(spin_amplitudes, dtype=complex)
    if spin_amplitudes.shape != (2 ** n,):
        raise ValueError("spin amplitude vector has wrong length")
    basis = Basis.full(n, params.n_max)
    amps = np.zeros((2 ** n, params.n_max + 1), dtype=complex)
    for s in range(2 ** n):
        if spin_amplitudes[s] == 0:
            continue
        bits = [(s >> (n - 1 - i)) & 1 for i in range(n)]
        alpha, theta = analytic_b0_oracle(params, bits, t)
        amps[s] = spin_amplitudes[s] * np.exp(1j * theta) \
            * coherent_amplitudes(alpha, params.n_max)
    flat = amps.reshape(-1)
    flat /= np.linalg.norm(flat)
    return StateVector(flat, basis, t)


# -- truncation sizing --------------------------------------------------------

def _poisson_logpmf(k, lam):
    if lam <= 0:
        return 0.0 if k == 0 else -math.inf
    return -lam + k * math.log(lam) - math.lgamma(k + 1)


def adapt_truncation(model, tolerance=1e-8, t_max=0.0045, floor=4):
    """Smallest n_max keeping the top two Fock populations below tolerance.

    The predicted maximum coherent displacement is bounded by the zero-field
    oracle over all sigma_z sectors and times: |alpha| <= min(2 c/|delta|,
    c t_max) with c the sum of per-site drive magnitudes.  The truncation is
    the Poisson mean plus five standard deviations, raised further until the
    top two predicted populations drop below tolerance, and never below the
    padding floor.
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be > 0")
    if isinstance(model, ModelParams):
        c_max = 2.0 * sum(abs(model.eta * s.b_i * s.omega_i) for s in model.sites)
        delta = model.delta
    elif isinstance(model, SubensembleModel):
        rootn = math.sqrt(model.spec.total_n)
        c_max = (2.0 / rootn) * sum(abs(g.g_j) * g.n_j for g in model.spec.groups)
        delta = model.delta
    else:
        raise TypeError(f"cannot size truncation for {type(model).__name__}")
    if delta != 0.0:
        alpha_max = min(2.0 * c_max / abs(delta), c_max * t_max)
    else:
        alpha_max = c_max * t_max
    nbar = alpha_max ** 2
    n = max(floor, math.ceil(nbar + 5.0 * alpha_max))
    while max(_poisson_logpmf(n, nbar), _poisson_logpmf(max(n - 1, 0), nbar)) \
            >= math.log(tolerance):
        n += 1
    return n


# -- checkpoints ---------------------------------------------------------------

_MAGIC = b"DLSV"
_TAGS = {"FULL": 0, "SUBENSEMBLE": 1}
_TAG_NAMES = {v: k for k, v in _TAGS.items()}


def save_state(path, state: StateVector):
    """Write the checkpoint format documented in the module docstring."""
    basis = state.basis
    head = bytearray()
    head += _MAGIC
    head += struct.pack("<HBB", 1, _TAGS[basis.tag], 0)
    head += struct.pack("<I", len(basis.spin_dims))
    head += struct.pack(f"<{len(basis.spin_dims)}I", *basis.spin_dims)
    head += struct.pack("<I", basis.n_max + 1)
    head += struct.pack("<d", state.time)
    head += struct.pack("<Q", basis.dimension)
    payload = np.empty(2 * basis.dimension)
    payload[0::2] = state.amplitudes.real
    payload[1::2] = state.amplitudes.imag
    body = bytes(head) + payload.astype("<f8").tobytes()
    crc = zlib.crc32(body) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", crc))


def load_state(path) -> StateVector:
    with open(path, "rb") as fh:
        raw = fh.read()
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ValueError("checkpoint checksum mismatch")
    if body[:4] != _MAGIC:
        raise ValueError("not a dickelab checkpoint")
    version, tag_code, _ = struct.unpack("<HBB", body[4:8])
    if version != 1:
        raise ValueError(f"unsupported checkpoint version {version}")
    (n_axes,) = struct.unpack("<I", body[8:12])
    off = 12
    spin_dims = struct.unpack(f"<{n_axes}I", body[off:off + 4 * n_axes])
    off += 4 * n_axes
    (fock_dim,) = struct.unpack("<I", body[off:off + 4])
    off += 4
    (time,) = struct.unpack("<d", body[off:off + 8])
    off += 8
    (dim,) = struct.unpack("<Q", body[off:off + 8])
    off += 8
    flat = np.frombuffer(body, dtype="<f8", offset=off, count=2 * dim)
    amps = flat[0::2] + 1j * flat[1::2]
    basis = Basis(_TAG_NAMES[tag_code], tuple(spin_dims), fock_dim - 1)
    return StateVector(amps.copy(), basis, time)
