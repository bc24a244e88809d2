"""Maximum-likelihood state reconstruction and entropy scaling fits.

The fixed-point iteration is the standard R rho R map over rotated
projectors, started from the maximally mixed state, with an adaptive
dilution step (mix a fraction of the previous iterate back in) whenever a
raw update would lower the likelihood.  Entropies are in nats throughout;
the scaling law S_k = alpha ln(k+1) is fitted through the origin.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import dicke
from .errors import (DegenerateAbscissa, DegenerateData, NoRecords, NotPSD)
from .measure import DensityMatrix

PROB_FLOOR = 1e-12
DILUTION = 0.01
CONVERGENCE_TOL = 1e-10
MAX_ITERATIONS = 10 ** 4


@dataclass(frozen=True)
class TomoResult:
    rho: DensityMatrix
    log_likelihood: float
    iterations: int
    converged: bool
    history: tuple = ()
    underdetermined: bool = False


@dataclass(frozen=True)
class EntropyScalingFit:
    alpha: float
    residual: float


def _group_records(records):
    """Counts per (direction, outcome); directions in first-appearance order."""
    directions = []
    counts = {}
    for rec in records:
        key = (rec.theta, rec.phi)
        if key not in counts:
            directions.append(key)
            counts[key] = {}
        q = counts[key]
        out = rec.outcomes
        q[out] = q.get(out, 0) + 1
    return directions, counts


def _check_directions(found, expected):
    if expected is None:
        return
    for key in expected:
        key = (float(key[0]), float(key[1]))
        if key not in found:
            raise DegenerateData(f"direction {key} carries zero shots")


def mle_dicke(records, k, directions=None, tol=CONVERGENCE_TOL,
              max_iterations=MAX_ITERATIONS, dilution=DILUTION) -> TomoResult:
    """Symmetric-subspace reconstruction from excitation counts.

    Each shot is collapsed to its excitation number q in 0..k; the projector
    for outcome q along a direction is the rotated Dicke projector
    V|q><q|V^dag on the (k+1)-dimensional ladder.
    """
    records = list(records)
    if not records:
        raise NoRecords("no shot records")
    for rec in records:
        if len(rec.outcomes) != k:
            raise ValueError(f"record covers {len(rec.outcomes)} sites, expected {k}")
    found, counts = _group_records(records)
    _check_directions(found, directions)

    vectors, weights = [], []
    for key in found:
        rot = dicke.rotation_to_axis(k, *key)
        per_q = np.zeros(k + 1)
        for out, n in counts[key].items():
            per_q[sum(out)] += n
        for q in range(k + 1):
            if per_q[q] > 0:
                vectors.append(rot[:, q])
                weights.append(per_q[q])
    return _rrhor_iterate(np.array(vectors).T, np.array(weights, dtype=float),
                          "dicke", tol, max_iterations, dilution)


def mle_full(records, k, directions=None, tol=CONVERGENCE_TOL,
             max_iterations=MAX_ITERATIONS, dilution=DILUTION) -> TomoResult:
    """Site-resolved reconstruction over the 2^k product space.

    Projectors are k-fold tensor products of the rotated single-spin
    |0><0| / |1><1| projectors; site 0 is the most significant bit.
    """
    records = list(records)
    if not records:
        raise NoRecords("no shot records")
    for rec in records:
        if len(rec.outcomes) != k:
            raise ValueError(f"record covers {len(rec.outcomes)} sites, expected {k}")
    found, counts = _group_records(records)
    _check_directions(found, directions)

    vectors, weights = [], []
    for key in found:
        rot = dicke.rotation_to_axis(1, *key)  # single-spin rotation
        for out, n in counts[key].items():
            vec = np.array([1.0 + 0j])
            for bit in out:
                vec = np.kron(vec, rot[:, bit])
            vectors.append(vec)
            weights.append(n)
    return _rrhor_iterate(np.array(vectors).T, np.array(weights, dtype=float),
                          "full", tol, max_iterations, dilution)


def _log_likelihood(vmat, weights, rho):
    p = np.einsum("ij,jk,ki->i", vmat.conj().T, rho, vmat).real
    return float(np.sum(weights * np.log(np.maximum(p, PROB_FLOOR))))


def _rrhor_iterate(vmat, weights, basis, tol, max_iterations, dilution):
    dim, n_proj = vmat.shape
    if n_proj < dim ** 2:
        warnings.warn(f"only {n_proj} informationally distinct projectors for "
                      f"dimension {dim} (need {dim ** 2} for completeness)",
                      stacklevel=3)
    freqs = weights / weights.sum()
    rho = np.eye(dim, dtype=complex) / dim
    ll = _log_likelihood(vmat, weights, rho)
    history = [ll]
    iterations = 0
    converged = False
    for iterations in range(1, max_iterations + 1):
        p = np.einsum("ij,jk,ki->i", vmat.conj().T, rho, vmat).real
        p = np.maximum(p, PROB_FLOOR)
        r = (vmat * (freqs / p)) @ vmat.conj().T
        cand = r @ rho @ r
        cand = 0.5 * (cand + cand.conj().T)
        cand /= np.trace(cand).real
        ll_cand = _log_likelihood(vmat, weights, cand)
        if ll_cand < ll:
            # dilute toward the previous iterate until likelihood is restored
            accepted = False
            for w in (dilution, 0.1, 0.5, 0.9, 0.99):
                mix = (1.0 - w) * cand + w * rho
                mix = 0.5 * (mix + mix.conj().T)
                mix /= np.trace(mix).real
                ll_mix = _log_likelihood(vmat, weights, mix)
                if ll_mix >= ll:
                    cand, ll_cand, accepted = mix, ll_mix, True
                    break
            if not accepted:
                converged = True  # stagnated at a fixed point of the map
                break
        delta = float(np.abs(cand - rho).max())
        rho, ll = cand, ll_cand
        history.append(ll)
        if delta <= tol:
            converged = True
            break
    # tiny negative eigenvalues from roundoff are floored before packaging
    evals, evecs = np.linalg.eigh(rho)
    if evals.min() < -1e-10:
        evals = np.clip(evals, 0.0, None)
        rho = (evecs * evals) @ evecs.conj().T
        rho /= np.trace(rho).real
    return TomoResult(rho=DensityMatrix(rho, basis), log_likelihood=ll,
                      iterations=iterations, converged=converged,
                      history=tuple(history),
                      underdetermined=n_proj < dim ** 2)


def von_neumann_entropy(rho):
    """S = -sum lambda ln lambda in nats; eigenvalues <= 1e-12 contribute 0."""
    entries = rho.entries if isinstance(rho, DensityMatrix) else np.asarray(rho)
    evals = np.linalg.eigvalsh(entries)
    if evals.min() < -1e-10:
        raise NotPSD(f"eigenvalue {evals.min():.3e} below -1e-10")
    evals = evals[evals > 1e-12]
    return float(-np.sum(evals * np.log(evals)))


def fit_entropy_scaling(points) -> EntropyScalingFit:
    """Least squares of S_k = alpha ln(k+1) through the origin."""
    pts = [(int(k), float(s)) for k, s in points]
    if len(pts) < 2:
        raise ValueError("need at least two (k, S_k) points")
    if any(k < 1 for k, _ in pts):
        raise ValueError("subsystem sizes must be >= 1")
    logs = np.array([np.log(k + 1.0) for k, _ in pts])
    entropies = np.array([s for _, s in pts])
    denom = float(np.sum(logs ** 2))
    if denom == 0.0:
        raise DegenerateAbscissa("no abscissa spread in ln(k+1)")
    alpha = float(np.sum(entropies * logs) / denom)
    residual = float(np.sqrt(np.mean((entropies - alpha * logs) ** 2)))
    return EntropyScalingFit(alpha=alpha, residual=residual)


def trace_distance(a, b):
    """(1/2) ||a - b||_1 for density matrices or plain arrays."""
    ma = a.entries if isinstance(a, DensityMatrix) else np.asarray(a)
    mb = b.entries if isinstance(b, DensityMatrix) else np.asarray(b)
    evals = np.linalg.eigvalsh(ma - mb)
    return float(0.5 * np.abs(evals).sum())


def state_fidelity(rho, psi):
    """<psi| rho |psi> for a pure reference vector."""
    m = rho.entries if isinstance(rho, DensityMatrix) else np.asarray(rho)
    psi = np.asarray(psi, dtype=complex)
    return float(np.real(psi.conj() @ m @ psi))


def write_tomo_report(path, result: TomoResult, label=""):
    """Structured-text reconstruction report."""
    rho = result.rho
    evals = np.linalg.eigvalsh(rho.entries)
    with open(path, "w") as fh:
        fh.write("# dickelab-tomo-report v1\n")
        fh.write(f"# label={label} basis={rho.basis} dim={rho.dim}\n")
        fh.write(f"# converged={str(result.converged).lower()}"
                 f" iterations={result.iterations}"
                 f" underdetermined={str(result.underdetermined).lower()}\n")
        fh.write(f"# log_likelihood={result.log_likelihood:.17g}\n")
        fh.write(f"# entropy_nats={von_neumann_entropy(rho):.17g}\n")
        fh.write("[rho]\n")
        for row in rho.entries:
            fh.write("\t".join(f"{v.real:.17g}{v.imag:+.17g}j" for v in row) + "\n")
        fh.write("[eigenvalues]\n")
        fh.write("\t".join(f"{v:.17g}" for v in evals) + "\n")
        fh.write("[likelihood_trace]\n")
        for v in result.history:
            fh.write(f"{v:.17g}\n")
