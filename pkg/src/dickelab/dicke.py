"""Collective-spin (Dicke ladder) utilities.

A group of n exchangeable qubits restricted to its symmetric subspace is a
single spin n/2.  Throughout the package that ladder is indexed by the
excitation number m = 0..n (m = number of spins in |1>), so S_z has the
diagonal (n/2 - m) with the convention sigma_z|0> = +|0>.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
from scipy.linalg import expm

AXIS_ANGLES = {"x": (np.pi / 2, 0.0), "y": (np.pi / 2, np.pi / 2), "z": (0.0, 0.0)}

SPIN_DIR_AMPLITUDES = {
    "+z": (1.0, 0.0),
    "-z": (0.0, 1.0),
    "+x": (1 / math.sqrt(2), 1 / math.sqrt(2)),
    "-x": (1 / math.sqrt(2), -1 / math.sqrt(2)),
    "+y": (1 / math.sqrt(2), 1j / math.sqrt(2)),
    "-y": (1 / math.sqrt(2), -1j / math.sqrt(2)),
}


@lru_cache(maxsize=None)
def spin_ops(n_spins: int):
    """Collective spin matrices (S_z, S_x, S_y) for n_spins qubits.

    Returned as dense complex arrays of shape (n+1, n+1) in the excitation
    basis.  Cached; treat as read-only.
    """
    n = n_spins
    m = np.arange(n + 1)
    sz = np.diag((n / 2 - m).astype(complex))
    # S_+ lowers m by one: S_+|m> = sqrt(m (n - m + 1)) |m-1>
    amp = np.sqrt(m[1:] * (n - m[1:] + 1.0))
    sp = np.zeros((n + 1, n + 1), dtype=complex)
    sp[m[1:] - 1, m[1:]] = amp
    sm = sp.conj().T
    sx = (sp + sm) / 2
    sy = (sp - sm) / (2j)
    return sz, sx, sy


def product_state_coeffs(n_spins, u, v):
    """Dicke-ladder coefficients of the product state (u|0> + v|1>)^n.

    c_m = sqrt(C(n, m)) u^(n-m) v^m.
    """
    m = np.arange(n_spins + 1)
    logc = [0.5 * (math.lgamma(n_spins + 1) - math.lgamma(k + 1) - math.lgamma(n_spins - k + 1))
            for k in m]
    return np.exp(logc) * np.power(complex(u), n_spins - m) * np.power(complex(v), m)


def rotation_to_axis(n_spins, theta, phi):
    """Collective rotation V with V|m=0> polarized along (theta, phi).

    V = exp(-i phi S_z) exp(-i theta S_y); measuring along the direction
    means sampling the z basis of V^dag |psi>.
    """
    sz, _, sy = spin_ops(n_spins)
    return expm(-1j * phi * sz) @ expm(-1j * theta * sy)


def rotation_about(n_spins, axis, angle):
    """exp(-i angle S_axis) on the (n+1)-dimensional ladder."""
    sz, sx, sy = spin_ops(n_spins)
    gen = {"x": sx, "y": sy, "z": sz}[axis]
    return expm(-1j * angle * gen)


@lru_cache(maxsize=None)
def split_coeffs(n_spins: int, k: int):
    """Coefficients of |m>_n = sum_q c[q, m-q] |q>_k |m-q>_(n-k).

    c[q, r] = sqrt(C(k, q) C(n-k, r) / C(n, q+r)); entries with q+r > n are 0.
    """
    c = np.zeros((k + 1, n_spins - k + 1))
    for q in range(k + 1):
        for r in range(n_spins - k + 1):
            c[q, r] = math.sqrt(math.comb(k, q) * math.comb(n_spins - k, r)
                                / math.comb(n_spins, q + r))
    return c


@lru_cache(maxsize=None)
def symmetric_embedding(k: int):
    """Isometry from the (k+1) Dicke ladder into the 2^k product basis.

    Column q is the normalized uniform superposition of weight-q bitstrings
    (site 0 = most significant bit).
    """
    iso = np.zeros((2 ** k, k + 1))
    for b in range(2 ** k):
        q = bin(b).count("1")
        iso[b, q] = 1.0 / math.sqrt(math.comb(k, q))
    return iso


@lru_cache(maxsize=None)
def bit_weights(n_spins: int):
    """Excitation count of every n-bit spin index, as an int array."""
    idx = np.arange(2 ** n_spins, dtype=np.uint64)
    w = np.zeros(2 ** n_spins, dtype=np.int64)
    for bit in range(n_spins):
        w += ((idx >> np.uint64(bit)) & np.uint64(1)).astype(np.int64)
    return w
