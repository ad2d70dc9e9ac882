"""Series ingestion, missing-pattern emulation, preprocessing and windowing.

Masks use 1 for a missing entry and 0 for an observed one.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import graphops as go
from .exceptions import ConfigurationError, ParseError, ValidationError


@dataclass
class SeriesWindow:
    """Values ``X`` with aligned missing mask ``M``."""

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.values.shape != self.mask.shape or self.values.ndim != 2:
            raise ValidationError(f"values {self.values.shape} and mask {self.mask.shape} must be equal 2-D shapes")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValidationError("mask entries must be 0 or 1")

    @property
    def observed(self) -> np.ndarray:
        return self.values * (1.0 - self.mask)

    @property
    def hidden(self) -> np.ndarray:
        return self.values * self.mask


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def load_series_csv(path):
    """Read a T×N float CSV; empty cells mark originally-missing values."""
    values, mask = [], []
    width = None
    with open(path, newline="") as fh:
        for r, row in enumerate(csv.reader(fh)):
            if not row:
                continue
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise ParseError(f"expected {width} columns, found {len(row)}", r)
            vrow, mrow = [], []
            for c, cell in enumerate(row):
                cell = cell.strip()
                if cell == "":
                    vrow.append(0.0)
                    mrow.append(1.0)
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(f"non-numeric cell {cell!r}", r, c) from None
                vrow.append(v)
                mrow.append(0.0)
            values.append(vrow)
            mask.append(mrow)
    if not values:
        raise ParseError("empty series file")
    return np.array(values), np.array(mask)


def write_series_csv(path, values, mask=None) -> None:
    values = np.asarray(values, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for t in range(values.shape[0]):
            if mask is None:
                w.writerow([repr(float(v)) for v in values[t]])
            else:
                w.writerow(["" if m else repr(float(v)) for v, m in zip(values[t], mask[t])])


def load_mask_csv(path) -> np.ndarray:
    m = np.loadtxt(path, delimiter=",", ndmin=2)
    if not np.all((m == 0) | (m == 1)):
        raise ParseError("mask CSV must contain only 0 and 1")
    return m


def write_mask_csv(path, mask) -> None:
    np.savetxt(path, np.asarray(mask, dtype=int), delimiter=",", fmt="%d")


# ---------------------------------------------------------------------------
# missing patterns
# ---------------------------------------------------------------------------


@dataclass
class MissingPattern:
    kind: str = "point"
    point_rate: float = 0.25
    block_drop_rate: float = 0.05
    block_failure_prob: float = 0.0015
    block_duration_range: tuple = (12, 48)
    seed: int = 0
    events: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.kind not in ("point", "block"):
            raise ConfigurationError(f"pattern kind must be 'point' or 'block', got {self.kind!r}")
        for name in ("point_rate", "block_drop_rate", "block_failure_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {v}")
        lo, hi = self.block_duration_range
        if not (0 < lo <= hi):
            raise ConfigurationError(f"invalid duration range {self.block_duration_range}")
        self.block_duration_range = (int(lo), int(hi))


def apply_missing(values, mask, pattern: MissingPattern) -> np.ndarray:
    """New mask = old mask OR emulated missingness. Originally missing stays missing.

    Block mode appends one ``{"sensor", "start", "duration"}`` dict per failure
    event to ``pattern.events`` (durations are nominal; runs are cut at T).
    """
    mask = np.asarray(mask, dtype=np.float64)
    rng = np.random.default_rng(pattern.seed)
    T, N = mask.shape
    pattern.events = []
    if pattern.kind == "point":
        drop = rng.random((T, N)) < pattern.point_rate
        return np.maximum(mask, drop.astype(np.float64))
    drop = rng.random((T, N)) < pattern.block_drop_rate
    out = np.maximum(mask, drop.astype(np.float64))
    lo, hi = pattern.block_duration_range
    starts = rng.random((T, N)) < pattern.block_failure_prob
    for n in range(N):
        for t in np.flatnonzero(starts[:, n]):
            dur = int(rng.integers(lo, hi + 1))
            out[t : t + dur, n] = 1.0
            pattern.events.append({"sensor": int(n), "start": int(t), "duration": dur})
    return out


def write_events_jsonl(path, events) -> None:
    with open(path, "w") as fh:
        for e in events:
            fh.write(json.dumps(e, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# preprocessing / augmentation
# ---------------------------------------------------------------------------


def preprocess(values, mask) -> np.ndarray:
    """Per-node linear interpolation over masked entries.

    Leading and trailing gaps copy the nearest observed value; a node with
    no observation becomes all zeros. Observed entries are left untouched.
    """
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask).astype(bool)
    out = values.copy()
    t = np.arange(values.shape[0])
    for n in range(values.shape[1]):
        miss = mask[:, n]
        if not miss.any():
            continue
        obs = ~miss
        if not obs.any():
            out[:, n] = 0.0
            continue
        out[miss, n] = np.interp(t[miss], t[obs], values[obs, n])
    return out


def augment(values, mask, seed: int = 0, drop_rate: float = 0.25, copies: int = 2):
    """Original preprocessed series plus ``copies`` re-dropped, re-interpolated variants.

    Returns ``(series, mask)`` concatenated along time; the masks of the extra
    copies include their fresh drops so they remain excluded from losses.
    """
    filled = preprocess(values, mask)
    mask = np.asarray(mask, dtype=np.float64)
    rng = np.random.default_rng(seed)
    series, masks = [filled], [mask]
    for _ in range(copies):
        drop = (rng.random(mask.shape) < drop_rate).astype(np.float64)
        m2 = np.maximum(mask, drop)
        series.append(preprocess(filled, m2))
        masks.append(m2)
    return np.concatenate(series, axis=0), np.concatenate(masks, axis=0)


@dataclass
class Standardizer:
    """Per-node z-scoring fitted on observed entries only."""

    mean_: np.ndarray | None = None
    scale_: np.ndarray | None = None

    def fit(self, values, mask) -> "Standardizer":
        values = np.asarray(values, dtype=np.float64)
        obs = ~np.asarray(mask).astype(bool)
        n = values.shape[1]
        self.mean_ = np.zeros(n)
        self.scale_ = np.ones(n)
        for j in range(n):
            v = values[obs[:, j], j]
            if v.size:
                self.mean_[j] = v.mean()
                sd = v.std()
                self.scale_[j] = sd if sd > 1e-12 else 1.0
        return self

    def transform(self, values) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - self.mean_) / self.scale_

    def inverse_transform(self, values) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) * self.scale_ + self.mean_


# ---------------------------------------------------------------------------
# synthetic diffusion
# ---------------------------------------------------------------------------


def erdos_renyi(n_nodes: int, edge_prob: float, seed: int) -> go.GraphSpec:
    rng = np.random.default_rng(seed)
    upper = np.triu(rng.random((n_nodes, n_nodes)) < edge_prob, k=1)
    a = (upper | upper.T).astype(np.float64)
    return go.GraphSpec(a)


def diffusion_step_matrix(graph: go.GraphSpec, alpha: float) -> np.ndarray:
    lap = go.normalized_laplacian(graph).matrix
    return np.eye(graph.n_nodes) - alpha * lap


def synth_diffusion(
    n_nodes: int = 20,
    T: int = 2000,
    alpha: float = 0.5,
    graph_seed: int = 0,
    noise_sigma: float = 0.01,
    seed: int | None = None,
    edge_prob: float = 0.3,
    graph: go.GraphSpec | None = None,
):
    """Simulate ``X_{t+1} = X_t - alpha X_t L + noise`` on an Erdős–Rényi graph.

    ``L`` is the symmetric normalized Laplacian; ``X_0`` is standard normal.
    ``seed`` drives the initial state and noise (defaults to ``graph_seed``).
    """
    if graph is None:
        graph = erdos_renyi(n_nodes, edge_prob, graph_seed)
    step = diffusion_step_matrix(graph, alpha)
    radius = float(np.max(np.abs(np.linalg.eigvalsh(step))))
    if radius > 1.0 + 1e-12:
        raise ConfigurationError(
            f"alpha={alpha} is unstable: spectral radius of I - alpha*L is {radius:.6f} > 1"
        )
    rng = np.random.default_rng(graph_seed if seed is None else seed)
    x = np.empty((T, graph.n_nodes))
    x[0] = rng.standard_normal(graph.n_nodes)
    noise = rng.standard_normal((T - 1, graph.n_nodes)) * noise_sigma if T > 1 else None
    for t in range(T - 1):
        x[t + 1] = x[t] @ step + noise[t]
    return x, graph


# ---------------------------------------------------------------------------
# windowing
# ---------------------------------------------------------------------------


def make_windows(values, mask, M: int, stride: int | None = None) -> list:
    """Pairs ``(SeriesWindow[t-M:t], SeriesWindow[t:t+M])`` for t = M, M+stride, ...

    A trailing remainder shorter than a full pair is dropped.
    """
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    stride = M if stride is None else stride
    if M < 1 or stride < 1:
        raise ValidationError(f"M and stride must be positive, got M={M}, stride={stride}")
    T = values.shape[0]
    if T < 2 * M:
        raise ValidationError(f"series of length {T} is shorter than 2M = {2 * M}")
    pairs = []
    for t in range(M, T - M + 1, stride):
        pairs.append(
            (SeriesWindow(values[t - M : t], mask[t - M : t]), SeriesWindow(values[t : t + M], mask[t : t + M]))
        )
    return pairs


def cover_windows(T: int, M: int) -> list:
    """Start indices of length-M windows covering ``[0, T)``; the last is end-aligned."""
    if T < M:
        raise ValidationError(f"series of length {T} is shorter than the window M = {M}")
    starts = list(range(0, T - M + 1, M))
    if starts[-1] + M < T:
        starts.append(T - M)
    return starts
