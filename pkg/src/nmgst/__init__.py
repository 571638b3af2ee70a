"""Instrument set tomography for non-Markovian quantum processes.

Submodules:
    pauli: Pauli-basis superoperators, Choi conversion, certification.
    library: the named instrument menus and system-environment unitaries.
    simulate: forward simulation of full instrument sets and record generation.
    process_tensor: process-tensor PTMs, dual sets, causality checks and PTT.
    list_estimator: linear-inversion instrument set tomography (LIST).
    mle: maximum-likelihood fits (full IST, GST baselines, reduced IST).
    harness: benchmark grids, SEP tables, record files and plots.
    cli: the ``nmgst`` command.

Submodules are imported on demand so that the command-line entry point can pin
BLAS threading before numpy loads.
"""

__version__ = "0.1.0"
