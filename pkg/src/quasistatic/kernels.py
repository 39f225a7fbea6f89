"""Backend selection for the hot loops.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy implementations in ``_pykernels`` take over. ``QDS_BACKEND=python``
forces the fallback and ``QDS_WORKERS`` sets the thread count of the
compiled member loops.
"""

import os

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

BACKEND = "compiled" if (_ckernels is not None and os.environ.get("QDS_BACKEND", "") != "python") else "python"


def workers() -> int:
    try:
        return max(1, int(os.environ.get("QDS_WORKERS", "1")))
    except ValueError:
        return 1


def _impl(backend=None):
    backend = backend or BACKEND
    if backend == "compiled":
        if _ckernels is None:
            raise RuntimeError("compiled kernels are not available; build the extension first")
        return _ckernels
    return _pykernels


def pack_observable(obs):
    """Flatten an :class:`~quasistatic.phase.Observable` into arrays the kernels understand."""
    from .phase import StepComponent

    comps = obs.components
    d = len(comps)
    freqs = sorted({m for c in comps if not isinstance(c, StepComponent) for m, _ in c.cos + c.sin})
    col = {m: i for i, m in enumerate(freqs)}
    const = np.zeros(d)
    ccos = np.zeros((d, len(freqs)))
    csin = np.zeros((d, len(freqs)))
    offsets = [0]
    breaks, vals = [], []
    for c, comp in enumerate(comps):
        if isinstance(comp, StepComponent):
            breaks.extend(comp.breaks)
            vals.extend(comp.values)
        else:
            const[c] = comp.const
            for m, a in comp.cos:
                ccos[c, col[m]] += a
            for m, b in comp.sin:
                csin[c, col[m]] += b
        offsets.append(len(breaks))
    return {
        "const": const,
        "freq": np.asarray(freqs, dtype=float),
        "cos": ccos,
        "sin": csin,
        "step_offsets": np.asarray(offsets, dtype=np.int64),
        "step_breaks": np.asarray(breaks, dtype=float),
        "step_vals": np.asarray(vals, dtype=float),
    }


def galerkin_entries(breaks, degree, freqs, amps, M, gx, gw, backend=None):
    return _impl(backend).galerkin_entries(np.ascontiguousarray(breaks, dtype=float), int(degree),
                                           np.asarray(freqs, dtype=float), np.asarray(amps, dtype=float),
                                           int(M), gx, gw)


def birkhoff_float(x0, degrees, amps, freqs, obs, k_idx, fracs, backend=None):
    impl = _impl(backend)
    args = (np.asarray(x0, dtype=float), np.asarray(degrees, dtype=np.int64),
            np.ascontiguousarray(amps, dtype=float), np.asarray(freqs, dtype=float), obs,
            np.asarray(k_idx, dtype=np.int64), np.asarray(fracs, dtype=float))
    if impl is _ckernels:
        return impl.birkhoff_float(*args, num_threads=workers())
    return impl.birkhoff_float(*args)


def birkhoff_bits(words, obs, k_idx, fracs, backend=None):
    impl = _impl(backend)
    args = (np.ascontiguousarray(words, dtype=np.uint64), obs,
            np.asarray(k_idx, dtype=np.int64), np.asarray(fracs, dtype=float))
    if impl is _ckernels:
        return impl.birkhoff_bits(*args, num_threads=workers())
    return impl.birkhoff_bits(*args)
