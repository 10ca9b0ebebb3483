"""Random selection of large α-bDD index subsets."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .block_core import BlockSparseMatrix
from .errors import ImprobableFailure, InvalidInputError
from .rng import as_generator

MAX_ROUNDS = 100


@dataclass(frozen=True)
class SubsetResult:
    F: np.ndarray
    iterations: int
    seed: object


def _filter(M: BlockSparseMatrix, sample, alpha):
    """Keep i in ``sample`` whose total off-diagonal mass is at least (1+α)
    times its mass toward the rest of the sample."""
    in_s = np.zeros(M.n, dtype=bool)
    in_s[sample] = True
    rows, cols = M.row_ids, M.indices
    mask = in_s[rows] & in_s[cols] & (rows != cols)
    inner = np.bincount(rows[mask], weights=M.block_norms[mask], minlength=M.n)
    total = M.offdiag_row_sums
    keep = total[sample] >= (1.0 + alpha) * inner[sample]
    return np.sort(sample[keep])


def _select(M, candidates, alpha, seed, max_rounds):
    if alpha < 0:
        raise InvalidInputError("alpha must be nonnegative")
    rng = as_generator(seed)
    n = len(candidates)
    if n == 0:
        raise InvalidInputError("empty matrix")
    if n < 8 * (1 + alpha):
        if len(_filter(M, candidates, alpha)) == n:
            return SubsetResult(np.sort(candidates), 1, seed)
        size = max(1, int(math.floor(n / (4 * (1 + alpha)))))
        target = 1
    else:
        size = int(math.ceil(n / (4 * (1 + alpha))))
        target = n / (8 * (1 + alpha))
    for it in range(1, max_rounds + 1):
        sample = candidates[rng.choice(n, size=size, replace=False)]
        F = _filter(M, sample, alpha)
        if len(F) >= target:
            return SubsetResult(F, it, seed)
    raise ImprobableFailure(
        "no large alpha-bDD subset found",
        {"n": n, "alpha": alpha, "rounds": max_rounds, "sample_size": size},
    )


def bdd_subset(M: BlockSparseMatrix, alpha: float = 4.0, seed=0,
               max_rounds: int = MAX_ROUNDS) -> SubsetResult:
    """Sample a uniform subset, drop heavy-inside rows, retry until large.

    The returned ``F`` is sorted and ``M[F, F]`` is α-bDD whenever ``M`` is
    bDD.
    """
    return _select(M, np.arange(M.n), alpha, seed, max_rounds)


def bdd_subset_low_degree(M: BlockSparseMatrix, alpha: float = 4.0, seed=0,
                          max_rounds: int = MAX_ROUNDS) -> SubsetResult:
    """As :func:`bdd_subset`, restricted to rows whose off-diagonal degree is
    at most twice the average."""
    deg = M.degrees
    light = np.flatnonzero(deg <= 2 * deg.mean()) if M.n else np.arange(0)
    return _select(M, light, alpha, seed, max_rounds)
