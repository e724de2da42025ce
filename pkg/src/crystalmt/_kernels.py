"""Hot inner loops, with a numba path and a pure-numpy fallback.

The backend is chosen once at import time from ``CRYSTALMT_NO_NUMBA``
(any non-empty value other than ``0`` disables numba) and can be switched
at runtime with :func:`set_backend`.  Both paths perform the same floating
point operations in the same order, so their results are bit-identical.
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional speedup
    numba = None
    HAVE_NUMBA = False


def _env_disables_numba() -> bool:
    flag = os.environ.get("CRYSTALMT_NO_NUMBA", "").strip()
    return flag not in ("", "0")


# ---------------------------------------------------------------------------
# numpy implementations


def _segment_sum_numpy(values, index, n_segments):
    out = np.zeros((n_segments,) + values.shape[1:], dtype=np.float64)
    np.add.at(out, index, values)
    return out


def _image_distances_numpy(frac, lattice, center, offsets, cutoff):
    # d = f_j + n - f_i, Cartesian components accumulated row by row
    fi = frac[center]
    dfx = (frac[:, 0][None, :] + offsets[:, 0][:, None]) - fi[0]
    dfy = (frac[:, 1][None, :] + offsets[:, 1][:, None]) - fi[1]
    dfz = (frac[:, 2][None, :] + offsets[:, 2][:, None]) - fi[2]
    cx = dfx * lattice[0, 0] + dfy * lattice[1, 0] + dfz * lattice[2, 0]
    cy = dfx * lattice[0, 1] + dfy * lattice[1, 1] + dfz * lattice[2, 1]
    cz = dfx * lattice[0, 2] + dfy * lattice[1, 2] + dfz * lattice[2, 2]
    dist = np.sqrt(cx * cx + cy * cy + cz * cz)
    # rows: offsets, cols: atoms; flatten offset-major to match the loop order
    mask = dist <= cutoff
    off_idx, atom_idx = np.nonzero(mask)
    return atom_idx.astype(np.int64), off_idx.astype(np.int64), dist[mask]


# ---------------------------------------------------------------------------
# numba implementations

if HAVE_NUMBA:

    @numba.njit(cache=True, nogil=True)
    def _segment_sum_numba(values, index, n_segments):
        n, m = values.shape
        out = np.zeros((n_segments, m), dtype=np.float64)
        for e in range(n):
            s = index[e]
            for c in range(m):
                out[s, c] += values[e, c]
        return out

    @numba.njit(cache=True, nogil=True)
    def _image_distances_numba(frac, lattice, center, offsets, cutoff):
        n_atoms = frac.shape[0]
        n_off = offsets.shape[0]
        fix = frac[center, 0]
        fiy = frac[center, 1]
        fiz = frac[center, 2]
        cap = n_atoms * n_off
        atoms = np.empty(cap, dtype=np.int64)
        offs = np.empty(cap, dtype=np.int64)
        dists = np.empty(cap, dtype=np.float64)
        k = 0
        for o in range(n_off):
            ox = offsets[o, 0]
            oy = offsets[o, 1]
            oz = offsets[o, 2]
            for j in range(n_atoms):
                dfx = (frac[j, 0] + ox) - fix
                dfy = (frac[j, 1] + oy) - fiy
                dfz = (frac[j, 2] + oz) - fiz
                cx = dfx * lattice[0, 0] + dfy * lattice[1, 0] + dfz * lattice[2, 0]
                cy = dfx * lattice[0, 1] + dfy * lattice[1, 1] + dfz * lattice[2, 1]
                cz = dfx * lattice[0, 2] + dfy * lattice[1, 2] + dfz * lattice[2, 2]
                d = np.sqrt(cx * cx + cy * cy + cz * cz)
                if d <= cutoff:
                    atoms[k] = j
                    offs[k] = o
                    dists[k] = d
                    k += 1
        return atoms[:k], offs[:k], dists[:k]


_BACKEND = "numpy" if (not HAVE_NUMBA or _env_disables_numba()) else "numba"


def get_backend() -> str:
    return _BACKEND


def set_backend(name: str) -> None:
    """Select ``"numba"`` or ``"numpy"`` for all kernels."""
    global _BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    _BACKEND = name


def segment_sum(values: np.ndarray, index: np.ndarray, n_segments: int) -> np.ndarray:
    """Sum rows of ``values`` into ``n_segments`` buckets given by ``index``.

    Rows are accumulated in input order, which keeps the result independent
    of the backend.
    """
    values = np.ascontiguousarray(values, dtype=np.float64)
    index = np.ascontiguousarray(index, dtype=np.int64)
    if values.ndim == 1:
        return segment_sum(values[:, None], index, n_segments)[:, 0]
    if _BACKEND == "numba":
        return _segment_sum_numba(values, index, int(n_segments))
    return _segment_sum_numpy(values, index, int(n_segments))


def image_distances(frac, lattice, center, offsets, cutoff):
    """Distances from atom ``center`` to every periodic image within ``cutoff``.

    Returns ``(atom_index, offset_index, distance)`` arrays, in offset-major
    then atom order.
    """
    frac = np.ascontiguousarray(frac, dtype=np.float64)
    lattice = np.ascontiguousarray(lattice, dtype=np.float64)
    offsets = np.ascontiguousarray(offsets, dtype=np.float64)
    if _BACKEND == "numba":
        return _image_distances_numba(frac, lattice, int(center), offsets, float(cutoff))
    return _image_distances_numpy(frac, lattice, int(center), offsets, float(cutoff))
