"""dickelab: thermalization dynamics of nonuniform spin-boson models.

Subpackages by responsibility: :mod:`~dickelab.model` (Hamiltonians and
parameter transforms), :mod:`~dickelab.crystal` (planar ion crystals and
transverse modes), :mod:`~dickelab.engine` (states and Krylov propagation),
:mod:`~dickelab.measure` (observables, distributions, shot sampling),
:mod:`~dickelab.tomo` (maximum-likelihood reconstruction and entropy fits)
and :mod:`~dickelab.pipelines`/:mod:`~dickelab.cli` (figure-style runs).
"""

__version__ = "0.1.0"
