"""Planar ion-crystal equilibria and transverse normal modes.

The crystal lies in the xz plane (the y direction is stiffest).  Internally
everything is dimensionless: frequencies in units of omega_z, lengths in the
characteristic length l = (e^2 / (4 pi eps0 m omega_z^2))^(1/3) with m the
mass of a 171Yb+ ion (fixed at 170.936323 u).  Interface values use kHz/2pi
and micrometers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.constants as const

from .errors import (ImaginaryFrequency, IndexOutOfRange, NonConvergence,
                     UnstableCrystal)

ION_MASS_KG = 170.936323 * const.atomic_mass

KHZ = 2e3 * np.pi  # rad/s per (kHz / 2pi)

GRAD_TOL = 1e-10
MAX_NEWTON_ITER = 10 ** 4


@dataclass(frozen=True)
class TrapConfig:
    """Secular trap frequencies (rad/s) and ion count."""

    omega_x: float
    omega_y: float
    omega_z: float
    n_ions: int

    def __post_init__(self):
        if min(self.omega_x, self.omega_y, self.omega_z) <= 0:
            raise ValueError("trap frequencies must be positive")
        if not (self.omega_y > self.omega_x and self.omega_y > self.omega_z):
            raise ValueError("need omega_y > omega_x and omega_y > omega_z "
                             "(transverse direction stiffest)")
        if self.n_ions < 1:
            raise ValueError("n_ions must be >= 1")

    @property
    def length_scale_m(self):
        k_e = 1.0 / (4 * np.pi * const.epsilon_0)
        return (k_e * const.e ** 2 / (ION_MASS_KG * self.omega_z ** 2)) ** (1 / 3)


@dataclass(frozen=True)
class CrystalSolution:
    """Equilibrium positions in scaled units, plus convergence metadata."""

    positions: np.ndarray = field(repr=False)  # (N, 2) columns (x, z)
    converged: bool
    gradient_norm: float
    energy: float


@dataclass(frozen=True)
class ModeTable:
    """Transverse mode frequencies (rad/s, descending) and mode vectors."""

    frequencies: np.ndarray            # (N,)
    vectors: np.ndarray = field(repr=False)  # (N, N); row k = mode k


def _pairwise(pos):
    dx = pos[:, 0][:, None] - pos[:, 0]
    dz = pos[:, 1][:, None] - pos[:, 1]
    r = np.sqrt(dx ** 2 + dz ** 2)
    np.fill_diagonal(r, np.inf)
    return dx, dz, r


def _potential(pos, gx2):
    dx, dz, r = _pairwise(pos)
    coulomb = 0.5 * np.sum(1.0 / r)
    trap = 0.5 * np.sum(gx2 * pos[:, 0] ** 2 + pos[:, 1] ** 2)
    return trap + coulomb


def _gradient(pos, gx2):
    dx, dz, r = _pairwise(pos)
    inv3 = r ** -3
    gx = gx2 * pos[:, 0] - np.sum(dx * inv3, axis=1)
    gz = pos[:, 1] - np.sum(dz * inv3, axis=1)
    return np.column_stack([gx, gz])


def _hessian(pos, gx2):
    """In-plane Hessian, ordered (x_0..x_{N-1}, z_0..z_{N-1})."""
    n = len(pos)
    dx, dz, r = _pairwise(pos)
    inv3 = r ** -3
    inv5 = r ** -5
    # off-diagonal (i != j) blocks of -d2(1/r)/du_i du_j = +d2(1/r)/dDelta^2
    hxx = inv3 - 3 * dx ** 2 * inv5
    hzz = inv3 - 3 * dz ** 2 * inv5
    hxz = -3 * dx * dz * inv5
    np.fill_diagonal(hxx, 0.0)
    np.fill_diagonal(hzz, 0.0)
    np.fill_diagonal(hxz, 0.0)
    h = np.zeros((2 * n, 2 * n))
    h[:n, :n] = hxx
    h[n:, n:] = hzz
    h[:n, n:] = hxz
    h[n:, :n] = hxz
    h[np.arange(n), np.arange(n)] = gx2 - hxx.sum(axis=1)
    h[np.arange(n, 2 * n), np.arange(n, 2 * n)] = 1.0 - hzz.sum(axis=1)
    h[np.arange(n), np.arange(n, 2 * n)] = -hxz.sum(axis=1)
    h[np.arange(n, 2 * n), np.arange(n)] = -hxz.sum(axis=1)
    return h


def _hex_lattice(n_points):
    """The n_points hexagonal lattice sites closest to the origin."""
    ring = math.ceil(math.sqrt(n_points)) + 2
    a1 = np.array([1.0, 0.0])
    a2 = np.array([0.5, math.sqrt(3) / 2])
    pts = []
    for i in range(-ring, ring + 1):
        for j in range(-ring, ring + 1):
            pts.append(i * a1 + j * a2)
    pts = np.array(pts)
    key = np.round(np.linalg.norm(pts, axis=1), 12)
    ang = np.round(np.arctan2(pts[:, 1], pts[:, 0]), 12)
    order = np.lexsort((ang, key))
    return pts[order[:n_points]]


def _initial_guess(trap: TrapConfig, seed):
    n = trap.n_ions
    gx = trap.omega_x / trap.omega_z
    if n == 1:
        return np.zeros((1, 2))
    pts = _hex_lattice(n)
    rho = max(np.linalg.norm(pts, axis=1).max(), 1.0)
    r_edge = (1.5 * n) ** (1 / 3)
    scale_x = r_edge / (gx ** (2 / 3) * rho)
    scale_z = r_edge / rho
    pos = np.column_stack([pts[:, 0] * scale_x, pts[:, 1] * scale_z])
    rng = np.random.default_rng(seed)
    pos += rng.normal(0.0, 5e-3 * max(scale_x, scale_z), size=pos.shape)
    return pos


def solve_equilibrium(trap: TrapConfig, seed=0) -> CrystalSolution:
    """Damped-Newton minimization of the scaled crystal potential.

    Starts from a hexagonal-shell guess perturbed by the seeded generator;
    converged means the gradient infinity-norm fell below 1e-10 (scaled
    units).  Raises NonConvergence after 10^4 iterations and UnstableCrystal
    if the in-plane Hessian at the solution has an eigenvalue below -1e-9.
    """
    gx2 = (trap.omega_x / trap.omega_z) ** 2
    pos = _initial_guess(trap, seed)
    n = trap.n_ions
    lam = 1e-3
    energy = _potential(pos, gx2)
    for _ in range(MAX_NEWTON_ITER):
        grad = _gradient(pos, gx2)
        gnorm = float(np.abs(grad).max())
        if gnorm <= GRAD_TOL:
            break
        hess = _hessian(pos, gx2)
        flat_grad = np.concatenate([grad[:, 0], grad[:, 1]])
        while True:
            try:
                step = np.linalg.solve(hess + lam * np.eye(2 * n), -flat_grad)
            except np.linalg.LinAlgError:
                step = None
            if step is not None:
                cand = pos + np.column_stack([step[:n], step[n:]])
                cand_energy = _potential(cand, gx2)
                if np.isfinite(cand_energy) and cand_energy <= energy + 1e-12 * abs(energy):
                    pos, energy = cand, cand_energy
                    lam = max(lam * 0.3, 1e-12)
                    break
            lam *= 10.0
            if lam > 1e14:
                raise NonConvergence("damped Newton stalled (damping overflow)")
    else:
        raise NonConvergence(f"no convergence in {MAX_NEWTON_ITER} Newton iterations")

    grad = _gradient(pos, gx2)
    gnorm = float(np.abs(grad).max())
    hess = _hessian(pos, gx2)
    min_eig = float(np.linalg.eigvalsh(hess).min())
    if min_eig < -1e-9:
        raise UnstableCrystal(f"in-plane Hessian eigenvalue {min_eig:.3e} < -1e-9")
    return CrystalSolution(positions=pos, converged=gnorm <= GRAD_TOL,
                           gradient_norm=gnorm, energy=float(_potential(pos, gx2)))


def transverse_hessian(trap: TrapConfig, solution: CrystalSolution):
    """Scaled y-displacement Hessian A (eigenvalues are (omega_k/omega_z)^2)."""
    gy2 = (trap.omega_y / trap.omega_z) ** 2
    _, _, r = _pairwise(solution.positions)
    inv3 = r ** -3
    np.fill_diagonal(inv3, 0.0)
    a = inv3.copy()
    np.fill_diagonal(a, gy2 - inv3.sum(axis=1))
    return a


def transverse_modes(trap: TrapConfig, solution: CrystalSolution) -> ModeTable:
    """Eigen-decomposition of the transverse Hessian.

    Frequencies descend; within numerically degenerate clusters the vectors
    are re-fixed by Gram-Schmidt against the coordinate order so output is
    deterministic, and every vector is signed so its largest-magnitude
    component is positive.
    """
    if not solution.converged:
        raise ValueError("equilibrium solution did not converge")
    a = transverse_hessian(trap, solution)
    evals, evecs = np.linalg.eigh(a)
    scale = max(abs(evals).max(), 1.0)
    if evals.min() < -1e-12 * scale:
        raise ImaginaryFrequency(
            f"negative transverse eigenvalue {evals.min():.3e}")
    evals = np.clip(evals, 0.0, None)
    order = np.argsort(-evals, kind="stable")
    evals = evals[order]
    vecs = evecs[:, order].T.copy()

    # deterministic choice inside degenerate clusters
    i = 0
    n = len(evals)
    while i < n:
        j = i + 1
        while j < n and abs(evals[j] - evals[i]) <= 1e-9 * scale:
            j += 1
        if j - i > 1:
            vecs[i:j] = _canonical_degenerate_basis(vecs[i:j])
        i = j

    for k in range(n):
        pivot = int(np.argmax(np.abs(vecs[k])))
        if vecs[k, pivot] < 0:
            vecs[k] = -vecs[k]
    freqs = trap.omega_z * np.sqrt(evals)
    return ModeTable(frequencies=freqs, vectors=vecs)


def _canonical_degenerate_basis(rows):
    """Gram-Schmidt of projected coordinate unit vectors, in index order."""
    dim = rows.shape[1]
    proj = rows.T @ rows  # projector onto the degenerate subspace
    out = []
    for i in range(dim):
        v = proj[:, i].copy()
        for u in out:
            v -= (u @ v) * u
        nrm = np.linalg.norm(v)
        if nrm > 1e-8:
            out.append(v / nrm)
        if len(out) == len(rows):
            break
    return np.array(out)


def select_mode(table: ModeTable, which):
    """Pick a mode; "com" is index 0 (highest transverse frequency)."""
    idx = 0 if which == "com" else int(which)
    if not 0 <= idx < len(table.frequencies):
        raise IndexOutOfRange(f"mode index {idx} out of range "
                              f"(have {len(table.frequencies)} modes)")
    return float(table.frequencies[idx]), table.vectors[idx].copy()


# -- interface files ------------------------------------------------------------

def write_mode_table(path, trap: TrapConfig, table: ModeTable):
    with open(path, "w") as fh:
        fh.write("# dickelab-mode-table v1\n")
        fh.write(f"# n_ions={trap.n_ions}"
                 f" omega_x_khz={trap.omega_x / KHZ:.17g}"
                 f" omega_y_khz={trap.omega_y / KHZ:.17g}"
                 f" omega_z_khz={trap.omega_z / KHZ:.17g}\n")
        fh.write("# columns: mode_index freq_khz b_i...\n")
        for k, (freq, vec) in enumerate(zip(table.frequencies, table.vectors)):
            cols = [str(k), f"{freq / KHZ:.17g}"] + [f"{v:.17g}" for v in vec]
            fh.write("\t".join(cols) + "\n")


def read_mode_table(path):
    """Returns (n_ions, ModeTable).  Accepts externally calibrated tables."""
    freqs, vecs = [], []
    n_ions = None
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for tokens in line[1:].split():
                    if tokens.startswith("n_ions="):
                        n_ions = int(tokens.split("=", 1)[1])
                continue
            parts = line.split()
            freqs.append(float(parts[1]) * KHZ)
            vecs.append([float(x) for x in parts[2:]])
    if not freqs:
        raise ValueError(f"no modes found in {path}")
    table = ModeTable(frequencies=np.array(freqs), vectors=np.array(vecs))
    return (n_ions if n_ions is not None else table.vectors.shape[1]), table


def write_positions(path, trap: TrapConfig, solution: CrystalSolution):
    scale_um = trap.length_scale_m * 1e6
    with open(path, "w") as fh:
        fh.write("# dickelab-positions v1\n")
        fh.write(f"# n_ions={trap.n_ions} length_scale_um={scale_um:.17g}\n")
        fh.write("# columns: ion_index x_um z_um\n")
        for i, (x, z) in enumerate(solution.positions):
            fh.write(f"{i}\t{x * scale_um:.17g}\t{z * scale_um:.17g}\n")


def read_positions(path):
    """Positions in micrometers as an (N, 2) array."""
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            _, x, z = line.split()
            rows.append((float(x), float(z)))
    return np.array(rows)
