"""Hot inner loops with a numba fast path and a pure-numpy fallback.

Set ``VDCORE_NO_NUMBA=1`` to force the numpy implementations (useful for
debugging and for the equivalence tests in ``tests/test_kernels.py``).
"""

from __future__ import annotations

import os

import numpy as np

SLOT_COUNT_MAX = 32

try:  # pragma: no cover - exercised implicitly
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False

USE_NUMBA = _HAVE_NUMBA and os.environ.get("VDCORE_NO_NUMBA", "0") not in ("1", "true", "yes")


# ---------------------------------------------------------------------------
# first-fit contiguous run in a 32-bit occupancy mask
# ---------------------------------------------------------------------------

def first_fit_numpy(mask: int, n: int, nslots: int) -> int:
    """Lowest index ``i`` such that bits ``[i, i+n)`` of ``mask`` are clear, else -1."""
    if n < 1 or n > nslots:
        return -1
    bits = (np.uint64(mask) >> np.arange(nslots, dtype=np.uint64)) & np.uint64(1)
    free = (bits == 0).astype(np.int64)
    # window sums over every start position; mirrors the per-thread probe
    csum = np.concatenate(([0], np.cumsum(free)))
    windows = csum[n:] - csum[:-n]
    hits = np.flatnonzero(windows == n)
    return int(hits[0]) if hits.size else -1


def _first_fit_py(mask, n, nslots):
    if n < 1 or n > nslots:
        return -1
    run = 0
    for i in range(nslots):
        if (mask >> i) & 1:
            run = 0
        else:
            run += 1
            if run == n:
                return i - n + 1
    return -1


# ---------------------------------------------------------------------------
# repetition scan used by loop folding
# ---------------------------------------------------------------------------

def repeat_count_numpy(sig, off, dep, tag, start: int, period: int) -> int:
    """Number of back-to-back repetitions of ``sig[start:start+period]``.

    Repetition ``r`` matches when every signature is equal and the offset,
    dep-id and tag columns advance by the same per-position stride that the
    first two repetitions established.
    """
    n = sig.shape[0]
    if start + 2 * period > n:
        return 1
    a = slice(start, start + period)
    b = slice(start + period, start + 2 * period)
    if not np.array_equal(sig[a], sig[b]):
        return 1
    s_off = off[b] - off[a]
    s_dep = dep[b] - dep[a]
    s_tag = tag[b] - tag[a]
    reps = 2
    while start + (reps + 1) * period <= n:
        c = slice(start + reps * period, start + (reps + 1) * period)
        if not np.array_equal(sig[c], sig[a]):
            break
        if not (np.array_equal(off[c] - off[a], reps * s_off)
                and np.array_equal(dep[c] - dep[a], reps * s_dep)
                and np.array_equal(tag[c] - tag[a], reps * s_tag)):
            break
        reps += 1
    return reps


def _repeat_count_py(sig, off, dep, tag, start, period):
    n = sig.shape[0]
    if start + 2 * period > n:
        return 1
    for j in range(period):
        if sig[start + j] != sig[start + period + j]:
            return 1
    reps = 2
    while start + (reps + 1) * period <= n:
        base = start + reps * period
        ok = True
        for j in range(period):
            i0 = start + j
            i1 = start + period + j
            ik = base + j
            if sig[ik] != sig[i0]:
                ok = False
                break
            if off[ik] - off[i0] != reps * (off[i1] - off[i0]):
                ok = False
                break
            if dep[ik] - dep[i0] != reps * (dep[i1] - dep[i0]):
                ok = False
                break
            if tag[ik] - tag[i0] != reps * (tag[i1] - tag[i0]):
                ok = False
                break
        if not ok:
            break
        reps += 1
    return reps


# ---------------------------------------------------------------------------
# transitive closure of a DAG in CSR form, rows packed into 64-bit words
# ---------------------------------------------------------------------------

def reach_closure_numpy(indptr: np.ndarray, indices: np.ndarray, n: int) -> np.ndarray:
    """Packed reachability of a DAG whose edges only go from lower to higher index.

    Bit ``j`` of row ``i`` is set when ``j`` is reachable from ``i`` by one or
    more edges.
    """
    words = (n + 63) // 64
    reach = np.zeros((n, words), dtype=np.uint64)
    for i in range(n - 1, -1, -1):
        succ = indices[indptr[i]:indptr[i + 1]]
        if succ.size:
            reach[i] = np.bitwise_or.reduce(reach[succ], axis=0)
            np.bitwise_or.at(reach[i], succ >> 6, np.uint64(1) << (succ & 63).astype(np.uint64))
    return reach


def _reach_closure_py(indptr, indices, n):
    words = (n + 63) // 64
    reach = np.zeros((n, words), dtype=np.uint64)
    one = np.uint64(1)
    for i in range(n - 1, -1, -1):
        for e in range(indptr[i], indptr[i + 1]):
            j = indices[e]
            reach[i, j >> 6] |= one << np.uint64(j & 63)
            for w in range(words):
                reach[i, w] |= reach[j, w]
    return reach


def reachable(reach: np.ndarray, i: int, j: int) -> bool:
    return bool((int(reach[i, j >> 6]) >> (j & 63)) & 1)


if _HAVE_NUMBA:
    _first_fit_jit = njit(cache=True)(_first_fit_py)
    _repeat_count_jit = njit(cache=True)(_repeat_count_py)
    _reach_closure_jit = njit(cache=True)(_reach_closure_py)


def first_fit(mask: int, n: int, nslots: int = SLOT_COUNT_MAX) -> int:
    if USE_NUMBA:
        return int(_first_fit_jit(np.int64(mask), n, nslots))
    return first_fit_numpy(mask, n, nslots)


def repeat_count(sig, off, dep, tag, start: int, period: int) -> int:
    if USE_NUMBA:
        return int(_repeat_count_jit(sig, off, dep, tag, start, period))
    return repeat_count_numpy(sig, off, dep, tag, start, period)


def reach_closure(indptr: np.ndarray, indices: np.ndarray, n: int) -> np.ndarray:
    indptr = np.ascontiguousarray(indptr, dtype=np.int64)
    indices = np.ascontiguousarray(indices, dtype=np.int64)
    if USE_NUMBA:
        return _reach_closure_jit(indptr, indices, n)
    return reach_closure_numpy(indptr, indices, n)
