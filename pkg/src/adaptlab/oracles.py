"""Slow, independent reference computations used to check the fast paths.

Nothing in here imports the code it is meant to verify.
"""
from __future__ import annotations

import itertools
from typing import Callable

import numpy as np


def simplex_projection_bruteforce(z) -> np.ndarray:
    """Exhaustive support-set search for argmin ||p - z||^2 over the simplex.

    For each candidate support S the KKT solution is ``p_S = z_S - tau`` with
    ``tau = (sum z_S - 1) / |S|``; infeasible supports (some ``p_i < 0``) are
    discarded and the closest feasible candidate wins.
    """
    z = np.asarray(z, dtype=np.float64)
    n = z.size
    best, best_dist = None, np.inf
    for k in range(1, n + 1):
        for support in itertools.combinations(range(n), k):
            idx = list(support)
            tau = (z[idx].sum() - 1.0) / k
            cand = np.zeros(n)
            cand[idx] = z[idx] - tau
            if np.any(cand[idx] < 0):
                continue
            dist = float(np.sum((cand - z) ** 2))
            if dist < best_dist - 1e-15:
                best, best_dist = cand, dist
    return best


def simplex_projection_bruteforce_batch(Z) -> np.ndarray:
    """Vectorised version of :func:`simplex_projection_bruteforce` over rows."""
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    m, n = Z.shape
    best = np.zeros_like(Z)
    best_dist = np.full(m, np.inf)
    for k in range(1, n + 1):
        for support in itertools.combinations(range(n), k):
            mask = np.zeros(n, dtype=bool)
            mask[list(support)] = True
            tau = (Z[:, mask].sum(axis=1) - 1.0) / k
            cand = np.where(mask, Z - tau[:, None], 0.0)
            feasible = np.all(cand[:, mask] >= 0, axis=1)
            dist = np.sum((cand - Z) ** 2, axis=1)
            better = feasible & (dist < best_dist - 1e-15)
            best[better] = cand[better]
            best_dist[better] = dist[better]
    return best


def central_difference(f: Callable[[], float], arrays, step: float = 1e-5) -> list[np.ndarray]:
    """Central finite-difference gradient of ``f`` w.r.t. each array, in place.

    ``f`` is re-evaluated after perturbing one entry of one array at a time;
    the entry is restored afterwards.
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f()
            flat[i] = orig - step
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * step)
        grads.append(g)
    return grads


def relative_error(analytic, numeric) -> float:
    """||a - n|| / max(||a||, ||n||) over the concatenation of all arrays."""
    a = np.concatenate([np.ravel(x) for x in analytic])
    n = np.concatenate([np.ravel(x) for x in numeric])
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def bpe_merges_bruteforce(words: list[tuple[bytes, ...]], n_merges: int) -> list[tuple[bytes, bytes]]:
    """Greedy BPE by full recount of pair frequencies on every step.

    ``words`` is a list of pretokens, each a tuple of single-byte strings (one
    entry per occurrence, no frequency compression). Ties on the count go to
    the lexicographically smallest ``(left, right)`` pair.
    """
    seqs = [list(w) for w in words]
    merges = []
    for _ in range(n_merges):
        counts: dict[tuple[bytes, bytes], int] = {}
        for s in seqs:
            for pair in zip(s, s[1:]):
                counts[pair] = counts.get(pair, 0) + 1
        if not counts:
            break
        top = max(counts.values())
        pair = min(p for p, c in counts.items() if c == top)
        merges.append(pair)
        new_seqs = []
        for s in seqs:
            out, i = [], 0
            while i < len(s):
                if i + 1 < len(s) and (s[i], s[i + 1]) == pair:
                    out.append(s[i] + s[i + 1])
                    i += 2
                else:
                    out.append(s[i])
                    i += 1
            new_seqs.append(out)
        seqs = new_seqs
    return merges
