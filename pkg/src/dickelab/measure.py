"""Observables, spin distributions, reduced density matrices, shot sampling.

Outcome encoding: bit 0 <-> sigma = +1 along the measured direction (state
|0>), matching the sigma_z|0> = +|0> convention used everywhere else.

Shot-record file format (tab-delimited):

    # dickelab-shots v1
    # seed=<int> directions=<K> shots_per_direction=<S>
    # columns: shot_index theta phi sites outcomes
    0   1.234   0.567   0,1,2,3   0101

Per-shot randomness is split deterministically: the generator for shot s of
direction d is ``numpy.random.default_rng([seed, d, s])``, so any subset of
records can be regenerated concurrently and reproducibly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import dicke
from .errors import (BasisMismatch, EmptySelection, EmptySeries, MixedAxes,
                     SiteOutOfRange, SubsystemTooLarge)
from .engine import StateVector, apply_spin_ops, rotate_for_measurement

PAULI = {
    "x": np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex),
    "y": np.array([[0.0, -1.0j], [1.0j, 0.0]], dtype=complex),
    "z": np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex),
}


@dataclass(frozen=True)
class ObservableSeries:
    times: np.ndarray
    values: np.ndarray
    label: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "times", np.asarray(self.times, dtype=float))
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        if self.times.shape != self.values.shape:
            raise ValueError("times and values must have equal length")


@dataclass(frozen=True)
class SpinHistogram:
    """Distribution of a total-spin component; index m = excitation count."""

    axis: str
    n_total: int
    probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "probs", np.asarray(self.probs, dtype=float))
        if self.probs.shape != (self.n_total + 1,):
            raise ValueError("histogram needs n_total + 1 bins")
        if abs(self.probs.sum() - 1.0) > 1e-9:
            raise ValueError(f"probabilities sum to {self.probs.sum()}, not 1")

    @property
    def values(self):
        """Total-spin eigenvalues N/2 - m, aligned with probs."""
        return self.n_total / 2 - np.arange(self.n_total + 1)

    @property
    def bins(self):
        return dict(zip(self.values.tolist(), self.probs.tolist()))


@dataclass(frozen=True)
class ShotRecord:
    """One measurement direction plus site-resolved binary outcomes."""

    theta: float
    phi: float
    sites: tuple[int, ...]
    outcomes: tuple[int, ...]
    shot_index: int
    rng_seed: int

    def __post_init__(self):
        if len(self.sites) != len(self.outcomes):
            raise ValueError("one outcome per site required")

    @property
    def direction(self):
        return np.array([math.sin(self.theta) * math.cos(self.phi),
                         math.sin(self.theta) * math.sin(self.phi),
                         math.cos(self.theta)])


@dataclass(frozen=True)
class DensityMatrix:
    """Hermitian PSD unit-trace matrix in the Dicke (k+1) or full (2^k) basis."""

    entries: np.ndarray = field(repr=False)
    basis: str  # "dicke" | "full"

    def __post_init__(self):
        object.__setattr__(self, "entries", np.asarray(self.entries, dtype=complex))
        if self.basis not in ("dicke", "full"):
            raise ValueError(f"unknown density-matrix basis {self.basis!r}")
        m = self.entries
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("density matrix must be square")
        if np.abs(m - m.conj().T).max() > 1e-12 * max(1.0, np.abs(m).max()):
            raise ValueError("density matrix not Hermitian")
        if abs(np.trace(m).real - 1.0) > 1e-10:
            raise ValueError(f"trace {np.trace(m).real} != 1")

    @property
    def dim(self):
        return self.entries.shape[0]

    def min_eigenvalue(self):
        return float(np.linalg.eigvalsh(self.entries).min())


# -- site/group resolution -----------------------------------------------------

def _group_layout(basis, members=None):
    """Per-group site tuples for a SUBENSEMBLE basis."""
    sizes = basis.group_sizes
    if members is None:
        out, off = [], 0
        for s in sizes:
            out.append(tuple(range(off, off + s)))
            off += s
        return tuple(out)
    members = tuple(tuple(m) for m in members)
    if tuple(len(m) for m in members) != tuple(sizes):
        raise ValueError("members inconsistent with basis group sizes")
    return members


def _site_to_group(layout, site):
    for j, mem in enumerate(layout):
        if site in mem:
            return j
    raise SiteOutOfRange(f"site {site} not present in the model")


# -- expectation values ----------------------------------------------------------

def expect_pauli(state: StateVector, axis, scope="ensemble", members=None):
    """<sigma_axis> for one site or the ensemble average.

    In the SUBENSEMBLE basis all sites of a group share one value (symmetry),
    computed as 2 <S_axis^j> / N_j; the ensemble average weights groups by
    N_j / N.  ``members`` optionally maps groups to site indices.
    """
    if axis not in PAULI:
        raise ValueError(f"unknown axis {axis!r}")
    basis = state.basis
    if basis.tag == "FULL":
        n = basis.n_sites
        if scope == "ensemble":
            return float(np.mean([_full_site_pauli(state, axis, i) for i in range(n)]))
        site = int(scope)
        if not 0 <= site < n:
            raise SiteOutOfRange(f"site {site} outside 0..{n - 1}")
        return _full_site_pauli(state, axis, site)

    layout = _group_layout(basis, members)
    sizes = basis.group_sizes
    per_group = [_group_pauli(state, axis, j) for j in range(len(sizes))]
    if scope == "ensemble":
        n = basis.n_sites
        return float(sum(p * s for p, s in zip(per_group, sizes)) / n)
    return per_group[_site_to_group(layout, int(scope))]


def _full_site_pauli(state, axis, site):
    ops = [None] * state.basis.n_sites
    ops[site] = PAULI[axis]
    rotated = apply_spin_ops(state, ops)
    return float(np.vdot(state.amplitudes, rotated.amplitudes).real)


def _group_pauli(state, axis, j):
    sizes = state.basis.group_sizes
    ops = [None] * len(sizes)
    sz, sx, sy = dicke.spin_ops(sizes[j])
    ops[j] = {"x": sx, "y": sy, "z": sz}[axis]
    rotated = apply_spin_ops(state, ops)
    val = np.vdot(state.amplitudes, rotated.amplitudes).real
    return float(2.0 * val / sizes[j])


def cumulative_time_average(series: ObservableSeries) -> ObservableSeries:
    """(1/t) integral_0^t of the series, by the trapezoid rule.

    The first point (t = 0) keeps the instantaneous value.
    """
    t, v = series.times, series.values
    if len(t) == 0:
        raise EmptySeries("cannot average an empty series")
    if t[0] != 0.0 or np.any(np.diff(t) <= 0):
        raise ValueError("times must increase strictly from 0")
    if len(t) == 1:
        return ObservableSeries(t.copy(), v.copy(), series.label)
    integral = np.concatenate([[0.0], np.cumsum(0.5 * (v[1:] + v[:-1]) * np.diff(t))])
    out = v.copy()
    out[1:] = integral[1:] / t[1:]
    return ObservableSeries(t.copy(), out, series.label)


# -- total-spin distributions -----------------------------------------------------

def total_spin_distribution(state: StateVector, axis) -> SpinHistogram:
    """Exact distribution of the total spin component along an axis."""
    theta, phi = dicke.AXIS_ANGLES[axis]
    rotated = rotate_for_measurement(state, theta, phi)
    probs = np.abs(rotated.amplitudes.reshape(state.basis.axis_dims)) ** 2
    probs = probs.sum(axis=-1)  # trace out the boson
    n = state.basis.n_sites
    out = np.zeros(n + 1)
    if state.basis.tag == "FULL":
        flat = probs.reshape(-1)
        np.add.at(out, dicke.bit_weights(n), flat)
    else:
        for idx, p in np.ndenumerate(probs):
            out[sum(idx)] += p
    out = out / out.sum()
    return SpinHistogram(axis=axis, n_total=n, probs=out)


def time_averaged_distribution(histograms) -> SpinHistogram:
    """Bin-wise arithmetic mean of equally shaped histograms."""
    hists = list(histograms)
    if not hists:
        raise EmptySeries("no histograms to average")
    first = hists[0]
    for h in hists[1:]:
        if h.axis != first.axis or h.n_total != first.n_total:
            raise MixedAxes("histograms mix axes or system sizes")
    probs = np.mean([h.probs for h in hists], axis=0)
    return SpinHistogram(axis=first.axis, n_total=first.n_total, probs=probs)


# -- shot sampling -----------------------------------------------------------------

def random_directions(k, seed):
    """K i.i.d. uniform points on the sphere as (theta, phi) rows."""
    if k < 1:
        raise ValueError("need at least one direction")
    rng = np.random.default_rng(seed)
    z = 1.0 - 2.0 * rng.random(k)
    phi = 2.0 * np.pi * rng.random(k)
    return np.column_stack([np.arccos(z), phi])


def sample_shots(state: StateVector, directions, shots_per_direction, sites,
                 seed, members=None):
    """Site-resolved single shots along each direction.

    For every direction the state is rotated so the direction becomes z, a
    joint basis state is drawn from |amplitude|^2, and (SUBENSEMBLE basis)
    each group's excitation number is expanded into a uniformly random
    bitstring of that weight over the group's sites, which is exact for
    within-group symmetric states.
    """
    sites = tuple(int(s) for s in sites)
    if not sites:
        raise EmptySelection("no sites selected")
    basis = state.basis
    n = basis.n_sites
    for s in sites:
        if not 0 <= s < n:
            raise SiteOutOfRange(f"site {s} outside 0..{n - 1}")
    layout = _group_layout(basis, members) if basis.tag == "SUBENSEMBLE" else None

    records = []
    shot_counter = 0
    for d, (theta, phi) in enumerate(directions):
        rotated = rotate_for_measurement(state, float(theta), float(phi))
        probs = np.abs(rotated.amplitudes) ** 2
        cdf = np.cumsum(probs)
        cdf /= cdf[-1]
        for s in range(shots_per_direction):
            rng = np.random.default_rng([seed, d, s])
            flat = int(np.searchsorted(cdf, rng.random(), side="right"))
            flat = min(flat, len(cdf) - 1)
            idx = np.unravel_index(flat, basis.axis_dims)
            if basis.tag == "FULL":
                spin_index = 0
                for bit_dim, comp in zip(basis.spin_dims, idx[:-1]):
                    spin_index = spin_index * bit_dim + comp
                bits = [(spin_index >> (n - 1 - i)) & 1 for i in range(n)]
            else:
                bits = [0] * n
                for j, m_j in enumerate(idx[:-1]):
                    group_sites = layout[j]
                    excited = rng.permutation(len(group_sites))[:m_j]
                    for e in excited:
                        bits[group_sites[e]] = 1
            records.append(ShotRecord(
                theta=float(theta), phi=float(phi), sites=sites,
                outcomes=tuple(bits[s_] for s_ in sites),
                shot_index=shot_counter, rng_seed=int(seed)))
            shot_counter += 1
    return records


def select_sites(records, sites):
    """Restrict records to a subset of their sites (order preserved)."""
    sites = tuple(int(s) for s in sites)
    out = []
    for rec in records:
        pos = []
        for s in sites:
            if s not in rec.sites:
                raise SiteOutOfRange(f"record does not cover site {s}")
            pos.append(rec.sites.index(s))
        out.append(ShotRecord(theta=rec.theta, phi=rec.phi, sites=sites,
                              outcomes=tuple(rec.outcomes[p] for p in pos),
                              shot_index=rec.shot_index, rng_seed=rec.rng_seed))
    return out


# -- reduced density matrices ---------------------------------------------------

def reduced_dm_symmetric(state: StateVector, group_j, k, members=None
                         ) -> DensityMatrix:
    """k-spin reduced density matrix of one group, in the Dicke basis.

    Uses the ladder splitting |m>_N = sum_q sqrt(C(k,q) C(N-k,m-q) / C(N,m))
    |q>_k |m-q>_(N-k) and traces everything else (other groups, the rest of
    the group, the boson).
    """
    basis = state.basis
    if basis.tag != "SUBENSEMBLE":
        raise BasisMismatch("reduced_dm_symmetric needs a SUBENSEMBLE state")
    sizes = basis.group_sizes
    if not 0 <= group_j < len(sizes):
        raise SiteOutOfRange(f"group {group_j} outside 0..{len(sizes) - 1}")
    n_j = sizes[group_j]
    if k > n_j:
        raise SubsystemTooLarge(f"k={k} exceeds group size {n_j}")
    arr = state.amplitudes.reshape(basis.axis_dims)
    a2 = np.moveaxis(arr, group_j, 0).reshape(n_j + 1, -1)
    coeff = dicke.split_coeffs(n_j, k)
    rows = np.empty((k + 1, n_j - k + 1, a2.shape[1]), dtype=complex)
    for q in range(k + 1):
        for r in range(n_j - k + 1):
            rows[q, r] = coeff[q, r] * a2[q + r]
    rho = np.einsum("qrx,srx->qs", rows, rows.conj())
    rho = 0.5 * (rho + rho.conj().T)
    rho /= np.trace(rho).real
    return DensityMatrix(rho, "dicke")


def reduced_dm_full(state: StateVector, sites, members=None, subsystem_cap=4
                    ) -> DensityMatrix:
    """Exact reduced density matrix of selected sites, in the 2^k basis.

    SUBENSEMBLE states are lifted through exchangeability: when all selected
    sites belong to one group, the result is the symmetrized embedding of
    :func:`reduced_dm_symmetric`; anything else raises BasisMismatch.
    """
    sites = tuple(int(s) for s in sites)
    if not sites:
        raise EmptySelection("no sites selected")
    k = len(sites)
    if k > subsystem_cap:
        raise SubsystemTooLarge(f"k={k} exceeds subsystem cap {subsystem_cap}")
    basis = state.basis
    if basis.tag == "FULL":
        n = basis.n_sites
        for s in sites:
            if not 0 <= s < n:
                raise SiteOutOfRange(f"site {s} outside 0..{n - 1}")
        arr = state.amplitudes.reshape(basis.axis_dims)
        keep = list(sites)
        rest = [ax for ax in range(n + 1) if ax not in keep]  # includes boson
        arr = np.transpose(arr, keep + rest).reshape(2 ** k, -1)
        rho = arr @ arr.conj().T
        rho = 0.5 * (rho + rho.conj().T)
        rho /= np.trace(rho).real
        return DensityMatrix(rho, "full")

    layout = _group_layout(basis, members)
    groups = {_site_to_group(layout, s) for s in sites}
    if len(groups) != 1:
        raise BasisMismatch("sites span several groups; the symmetric lift "
                            "applies only within one group")
    rho_sym = reduced_dm_symmetric(state, groups.pop(), k, members)
    iso = dicke.symmetric_embedding(k)
    return DensityMatrix(iso @ rho_sym.entries @ iso.T, "full")


def boson_reduced(state: StateVector):
    """Reduced boson density matrix (plain array, Fock basis)."""
    arr = state.amplitudes.reshape(-1, state.basis.n_max + 1)
    rho = arr.conj().T @ arr
    return 0.5 * (rho + rho.conj().T)


# -- delimited-text emission ------------------------------------------------------

def write_observable_series(path, series_list):
    """Tab-delimited series: time_s then one value column per series."""
    series_list = list(series_list)
    times = series_list[0].times
    for s in series_list[1:]:
        if not np.array_equal(s.times, times):
            raise ValueError("series share one time grid per file")
    with open(path, "w") as fh:
        fh.write("# dickelab-series v1\n")
        fh.write("# columns: time_s " + " ".join(s.label for s in series_list) + "\n")
        for i, t in enumerate(times):
            row = [f"{t:.17g}"] + [f"{s.values[i]:.17g}" for s in series_list]
            fh.write("\t".join(row) + "\n")


def write_histograms(path, entries):
    """Tab-delimited histograms: rows of (time_s, axis, bin_value, probability)."""
    with open(path, "w") as fh:
        fh.write("# dickelab-histograms v1\n")
        fh.write("# columns: time_s axis bin_value probability\n")
        for time, hist in entries:
            for value, prob in zip(hist.values, hist.probs):
                fh.write(f"{time:.17g}\t{hist.axis}\t{value:.17g}\t{prob:.17g}\n")


def write_shot_records(path, records, directions=None, shots_per_direction=None):
    with open(path, "w") as fh:
        fh.write("# dickelab-shots v1\n")
        seed = records[0].rng_seed if records else 0
        k = directions if directions is not None else ""
        s = shots_per_direction if shots_per_direction is not None else ""
        fh.write(f"# seed={seed} directions={k} shots_per_direction={s}\n")
        fh.write("# columns: shot_index theta phi sites outcomes\n")
        for rec in records:
            fh.write(f"{rec.shot_index}\t{rec.theta:.17g}\t{rec.phi:.17g}\t"
                     + ",".join(str(x) for x in rec.sites) + "\t"
                     + "".join(str(b) for b in rec.outcomes) + "\n")


def read_shot_records(path):
    records = []
    seed = 0
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for token in line[1:].split():
                    if token.startswith("seed="):
                        seed = int(token.split("=", 1)[1])
                continue
            idx, theta, phi, sites, outcomes = line.split("\t")
            records.append(ShotRecord(
                theta=float(theta), phi=float(phi),
                sites=tuple(int(x) for x in sites.split(",")),
                outcomes=tuple(int(c) for c in outcomes),
                shot_index=int(idx), rng_seed=seed))
    return records
