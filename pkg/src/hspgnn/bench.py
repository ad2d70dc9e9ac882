"""Timing of three ways to mix higher-order time differences.

* ``explicit_power``: materialize ``sum_m lambda_m H^m`` densely, then multiply;
* ``matrix_free``: repeated first differences, never forming ``H``;
* ``conv_approx``: one first difference followed by a short convolution whose
  taps come from the exact ``W`` with ``W H = sum_m lambda_m H^m``.

Correctness is checked before any timing is taken.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from . import graphops as go
from .diffcore import convolve_time
from .exceptions import ConfigurationError, NumericError, ValidationError

METHODS = ("explicit_power", "matrix_free", "conv_approx")


@dataclass
class BenchResult:
    method: str
    M: int
    N: int
    order: int
    wall_time_ms: float
    repeats: int


def explicit_power_mix(x: np.ndarray, lambdas) -> np.ndarray:
    """``(sum_m lambda_m H^m) x`` with every power formed as a dense matrix."""
    M = x.shape[0]
    h = go.difference_operator(M)
    power = np.eye(M)
    total = np.zeros((M, M))
    for lam in lambdas:
        power = power @ h
        total += lam * power
    return total @ x


def matrix_free_mix(x: np.ndarray, lambdas) -> np.ndarray:
    out = np.zeros_like(x)
    cur = x
    for lam in lambdas:
        cur = go._first_difference(cur)
        out += lam * cur
    return out


def fitted_kernel(lambdas, M: int | None = None) -> np.ndarray:
    """Taps ``[w_0, w_1, ..., w_{p-1}]`` of the banded ``W`` solving ``W H = sum lambda_m H^m``.

    ``W`` has one tap per order (``p = len(lambdas)``) and is lower banded, so
    row ``t`` of ``W y`` is ``sum_j w_j y_{t-j}``. The kernel is padded to odd
    length for a centered convolution.
    """
    lambdas = np.asarray(lambdas, dtype=np.float64).reshape(-1)
    p = lambdas.size
    M = max(2 * p + 2, 8) if M is None else M
    w, residual = go.solve_derivative_combination(M, lambdas)
    if residual > 1e-10:
        raise NumericError(f"derivative-combination residual {residual:.3g} too large")
    row = M - 1
    taps = np.array([w[row, row - j] for j in range(p)])
    # everything outside the band must vanish for a convolution to be exact
    band = np.zeros_like(w)
    for j in range(p):
        band += np.diag(np.full(M - j, taps[j]), -j)
    interior = slice(p - 1, M)
    if not np.allclose(w[interior], band[interior], atol=1e-9):
        raise NumericError("solved W is not a banded Toeplitz operator")
    if p % 2 == 0:
        taps = np.append(taps, 0.0)
    return taps


def conv_mix(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Convolution of the first difference with a causal kernel.

    A centered odd kernel of length ``k`` reads ``y_{t+c-j}``; realigning the
    output by ``c`` rows makes row ``t`` equal ``sum_j k_j y_{t-j}``. The last
    ``c`` rows fall outside the window and are left at zero.
    """
    y = go._first_difference(x)
    out = convolve_time(y, kernel)
    c = (kernel.size - 1) // 2
    if c == 0:
        return out
    aligned = np.zeros_like(out)
    aligned[c:] = out[:-c]
    return aligned


def interior_rows(M: int, order: int) -> slice:
    """Rows where all three paths must agree: away from both window edges."""
    return slice(order - 1, M)


def check_equivalence(M: int, N: int, lambdas, seed: int = 0) -> float:
    """Largest absolute gap between the three paths on interior rows."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, (M, N))
    k = fitted_kernel(lambdas)
    a = explicit_power_mix(x, lambdas)
    b = matrix_free_mix(x, lambdas)
    c = conv_mix(x, k)
    rows = interior_rows(M, len(lambdas))
    return float(max(np.max(np.abs(a - b)), np.max(np.abs(a[rows] - c[rows]))))


def _median_ms(fn, repeats: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return max(float(np.median(times)), 1e-9)


def bench_temporal_mixing(
    M: int, N: int, order: int, repeats: int = 20, warmup: int = 3, seed: int = 0, tol: float = 1e-9
) -> list:
    """Median wall time (ms) per method, single-threaded, after the equivalence check."""
    if M < 2 or N < 2:
        raise ValidationError(f"need M, N >= 2, got M={M}, N={N}")
    if order < 1 or order > M - 1:
        raise ConfigurationError(f"order must lie in [1, M-1], got {order}")
    if repeats < 10:
        raise ConfigurationError(f"repeats must be >= 10, got {repeats}")
    rng = np.random.default_rng(seed)
    lambdas = rng.uniform(0.5, 1.5, order)
    gap = check_equivalence(M, min(N, 16), lambdas, seed)
    if gap > tol:
        raise NumericError(f"paths disagree by {gap:.3g} on interior rows; refusing to time")
    x = rng.uniform(-1.0, 1.0, (M, N))
    kernel = fitted_kernel(lambdas)
    fns = {
        "explicit_power": lambda: explicit_power_mix(x, lambdas),
        "matrix_free": lambda: matrix_free_mix(x, lambdas),
        "conv_approx": lambda: conv_mix(x, kernel),
    }
    with threadpool_limits(limits=1):
        return [BenchResult(m, M, N, order, _median_ms(fns[m], repeats, warmup), repeats) for m in METHODS]


def write_bench_report(results, path) -> None:
    with open(path, "w") as fh:
        json.dump([asdict(r) for r in results], fh, indent=2)
        fh.write("\n")
