"""Node-importance and transfer-rate diagnostics for a trained imputer.

* missing impact: how much the model output moves when one node's
  observations are withheld;
* a planar normalizing-flow posterior over regression coefficients that
  explain the impacts from node features;
* graph-like optical flow: learned temporal over spatial coefficients
  divided by dynamic-Laplacian entries;
* dynamic-graph snapshot export.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .data import SeriesWindow, cover_windows, preprocess
from .exceptions import ConfigurationError, ContractError, DegeneracyError, NumericError, ValidationError
from .model import AdamState, HSPGNNModel

LOG_2PI = math.log(2.0 * math.pi)

# ---------------------------------------------------------------------------
# missing impact
# ---------------------------------------------------------------------------


def model_output(model: HSPGNNModel, values, mask) -> np.ndarray:
    """Final model output over a whole series, window by window.

    The output is the forecaster head when present, else the imputation.
    ``values`` are in model units; masked entries are re-interpolated here.
    """
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    filled = preprocess(values, mask)
    M = model.config.M
    out = np.empty_like(values)
    with dc.no_grad():
        for start in cover_windows(values.shape[0], M):
            w = SeriesWindow(filled[start : start + M], mask[start : start + M])
            _, p_hat, _ = model.forward_impute(w)
            y = model.forward_predict(p_hat) if model.config.use_predictor else p_hat
            out[start : start + M] = y.data
    return out


def output_difference(model: HSPGNNModel, values, full_mask, observed_mask) -> np.ndarray:
    """Per-node mean ``|f(X) - f(U)|`` between two maskings of one series."""
    a = model_output(model, values, full_mask)
    b = model_output(model, values, observed_mask)
    return np.abs(a - b).mean(axis=0)


@dataclass
class MissingImpactReport:
    impact: np.ndarray  # one value per node, model-output units
    ranking: np.ndarray  # node indices by decreasing impact
    density: np.ndarray | None = None

    def to_records(self) -> list:
        rank_of = np.empty_like(self.ranking)
        rank_of[self.ranking] = np.arange(self.ranking.size)
        rows = []
        for node, imp in enumerate(self.impact):
            row = {"node_id": int(node), "impact": float(imp), "rank": int(rank_of[node])}
            row["density"] = None if self.density is None else float(self.density[node])
            rows.append(row)
        return rows


def rank_nodes(impact) -> np.ndarray:
    """Indices by decreasing impact; ties broken by node index."""
    impact = np.asarray(impact, dtype=np.float64)
    return np.lexsort((np.arange(impact.size), -impact))


def missing_impact(model: HSPGNNModel, values, mask=None, nodes=None) -> MissingImpactReport:
    """Withhold each node's observations in turn and measure the output shift.

    The impact of node ``i`` is the mean absolute output change over all
    entries when column ``i`` is additionally masked.
    """
    if not getattr(model, "trained", False):
        raise ContractError("missing_impact needs a trained model")
    values = np.asarray(values, dtype=np.float64)
    mask = np.zeros_like(values) if mask is None else np.asarray(mask, dtype=np.float64)
    n = values.shape[1]
    nodes = range(n) if nodes is None else nodes
    base = model_output(model, values, mask)
    impact = np.zeros(n)
    for i in nodes:
        m2 = mask.copy()
        m2[:, i] = 1.0
        impact[i] = float(np.abs(base - model_output(model, values, m2)).mean())
    return MissingImpactReport(impact, rank_nodes(impact))


def node_features(values, adjacency=None) -> np.ndarray:
    """Per-node descriptors ``[degree, std, mean |x|, 1]`` (z-scored columns)."""
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[1]
    deg = np.zeros(n) if adjacency is None else np.asarray(adjacency, dtype=np.float64).sum(axis=1)
    cols = [deg, values.std(axis=0), np.abs(values).mean(axis=0)]
    feats = []
    for c in cols:
        sd = c.std()
        feats.append((c - c.mean()) / sd if sd > 1e-12 else np.zeros(n))
    feats.append(np.ones(n))
    return np.stack(feats, axis=1)


# ---------------------------------------------------------------------------
# planar flows
# ---------------------------------------------------------------------------


@dataclass
class PlanarFlow:
    """``z -> z + u_hat tanh(w^T z + b)`` with ``u_hat`` keeping ``w^T u_hat >= -1``."""

    u: dc.Tensor  # d×1
    w: dc.Tensor  # d×1
    b: dc.Tensor  # 1×1

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, scale: float = 0.01) -> "PlanarFlow":
        def p(shape):
            return dc.Tensor(rng.normal(0.0, scale, shape), requires_grad=True)

        return cls(p((d, 1)), p((d, 1)), dc.Tensor(np.zeros((1, 1)), requires_grad=True))

    @classmethod
    def from_arrays(cls, u, w, b) -> "PlanarFlow":
        u = np.asarray(u, dtype=np.float64).reshape(-1, 1)
        w = np.asarray(w, dtype=np.float64).reshape(-1, 1)
        return cls(
            dc.Tensor(u, requires_grad=True),
            dc.Tensor(w, requires_grad=True),
            dc.Tensor(np.full((1, 1), float(b)), requires_grad=True),
        )

    @property
    def dim(self) -> int:
        return self.u.shape[0]

    def tensors(self) -> dict:
        return {"u": self.u, "w": self.w, "b": self.b}

    def u_hat(self) -> dc.Tensor:
        """``u + (softplus(w^T u) - 1 - w^T u) w / |w|^2``; ``u`` itself when ``w = 0``."""
        if not np.any(self.w.data):
            return self.u
        wu = self.w.T @ self.u  # 1×1
        coef = dc.add_scalar(dc.softplus(wu), -1.0) - wu
        w_sq = self.w.T @ self.w  # 1×1
        return self.u + self.w @ dc.hadamard(coef, dc.power(w_sq, -1.0))


def planar_forward(z, flow: PlanarFlow):
    """Apply one flow to a batch ``z`` (B×d or a d-vector).

    Returns ``(z_out, log_det)`` with ``log_det`` of shape B×1 for batched
    input and a float for a single vector.
    """
    single = not isinstance(z, dc.Tensor) and np.ndim(z) == 1
    zt = z if isinstance(z, dc.Tensor) else dc.Tensor(np.atleast_2d(np.asarray(z, dtype=np.float64)))
    if zt.shape[1] != flow.dim:
        raise ValidationError(f"sample dimension {zt.shape[1]} != flow dimension {flow.dim}")
    batch = zt.shape[0]
    ones = dc.Tensor(np.ones((batch, 1)))
    u_hat = flow.u_hat()
    act = dc.tanh(zt @ flow.w + ones @ flow.b)  # B×1
    z_out = zt + act @ u_hat.T
    slope = dc.add_scalar(dc.neg(dc.hadamard(act, act)), 1.0)  # 1 - tanh^2
    det = dc.add_scalar(dc.hadamard(slope, ones @ (flow.w.T @ u_hat)), 1.0)
    if np.any(np.abs(det.data) < 1e-12):
        raise DegeneracyError("planar flow Jacobian is singular (|1 + u_hat^T psi| < 1e-12)")
    log_det = dc.log(dc.absolute(det))
    if single:
        return z_out.data[0], float(log_det.data[0, 0])
    return z_out, log_det


@dataclass
class FlowStack:
    """``K`` planar flows over a ``d``-dimensional standard normal base."""

    flows: list
    log_tau: dc.Tensor = field(default_factory=lambda: dc.Tensor(np.zeros((1, 1)), requires_grad=True))

    @classmethod
    def init(cls, d: int, K: int = 480, seed: int = 0, scale: float = 0.01) -> "FlowStack":
        if K < 0 or d < 1:
            raise ConfigurationError(f"need K >= 0 and d >= 1, got K={K}, d={d}")
        rng = np.random.default_rng(seed)
        return cls([PlanarFlow.init(rng, d, scale) for _ in range(K)])

    @property
    def K(self) -> int:
        return len(self.flows)

    @property
    def dim(self) -> int:
        if not self.flows:
            raise ContractError("an empty flow stack has no intrinsic dimension")
        return self.flows[0].dim

    def parameters(self) -> dict:
        out = {"log_tau": self.log_tau}
        for i, f in enumerate(self.flows):
            for k, t in f.tensors().items():
                out[f"flow{i}.{k}"] = t
        return out

    def forward(self, z0):
        """``(z_K, sum of log-dets)`` for a batch of base samples."""
        z = z0 if isinstance(z0, dc.Tensor) else dc.Tensor(np.asarray(z0, dtype=np.float64))
        total = dc.Tensor(np.zeros((z.shape[0], 1)))
        for f in self.flows:
            z, ld = planar_forward(z, f)
            total = total + ld
        return z, total

    def log_q(self, z0):
        """``(z_K, ln q_K(z_K))`` with ``ln q_K = ln q_0(z_0) - sum ln|det|``."""
        z0 = z0 if isinstance(z0, dc.Tensor) else dc.Tensor(np.asarray(z0, dtype=np.float64))
        zk, total = self.forward(z0)
        return zk, standard_normal_logpdf(z0) - total


def standard_normal_logpdf(z: dc.Tensor) -> dc.Tensor:
    """Row-wise ``ln N(z; 0, I)`` as a B×1 tensor."""
    d = z.shape[1]
    sq = dc.sum(dc.hadamard(z, z), axis=1)
    return dc.add_scalar(dc.scale(sq, -0.5), -0.5 * d * LOG_2PI)


OBJECTIVE_SIGNS = ("elbo", "verbatim")


def joint_log_density(zk: dc.Tensor, features, impacts, log_tau: dc.Tensor) -> dc.Tensor:
    """``ln N(Y; Phi z, tau^2 I) + ln N(z; 0, I)`` per sample (B×1)."""
    phi = dc.Tensor(np.asarray(features, dtype=np.float64))
    y = np.asarray(impacts, dtype=np.float64).reshape(1, -1)
    batch, n = zk.shape[0], y.shape[1]
    pred = zk @ phi.T  # B×n
    resid = pred - dc.Tensor(np.repeat(y, batch, axis=0))
    ones_b = dc.Tensor(np.ones((batch, 1)))
    inv_var = dc.exp(dc.scale(log_tau, -2.0))  # 1×1
    sq = dc.hadamard(dc.sum(dc.hadamard(resid, resid), axis=1), ones_b @ inv_var)
    norm = dc.add_scalar(dc.scale(ones_b @ log_tau, -float(n)), -0.5 * n * LOG_2PI)
    return dc.scale(sq, -0.5) + norm + standard_normal_logpdf(zk)


def flow_objective(flows: FlowStack, samples_z0, features, impacts, sign: str = "elbo") -> dc.Tensor:
    """Monte-Carlo objective over base samples, to be maximized.

    ``sign="elbo"`` averages ``ln p(Y, z_K) - ln q_0(z_0) + sum ln|det|``;
    ``sign="verbatim"`` negates that integrand, following the printed form
    in which the joint term enters with a minus sign.
    """
    if sign not in OBJECTIVE_SIGNS:
        raise ConfigurationError(f"sign must be one of {OBJECTIVE_SIGNS}, got {sign!r}")
    z0 = samples_z0 if isinstance(samples_z0, dc.Tensor) else dc.Tensor(np.asarray(samples_z0, dtype=np.float64))
    zk, log_qk = flows.log_q(z0)
    integrand = joint_log_density(zk, features, impacts, flows.log_tau) - log_qk
    obj = dc.mean(integrand)
    if sign == "verbatim":
        obj = dc.neg(obj)
    if not np.isfinite(obj.item()):
        raise NumericError("flow objective is not finite")
    return obj


@dataclass
class FlowFitReport:
    objective: list = field(default_factory=list)


def fit_flows(
    flows: FlowStack,
    features,
    impacts,
    lr: float = 0.0001,
    batch: int = 100,
    steps: int = 200,
    seed: int = 0,
    sign: str = "elbo",
) -> FlowFitReport:
    """Adam ascent on :func:`flow_objective` with fresh base samples per step.

    The report tracks the objective on one fixed evaluation batch after
    every step, so the trajectory is free of sampling noise.
    """
    features = np.asarray(features, dtype=np.float64)
    d = features.shape[1]
    if flows.K and flows.dim != d:
        raise ValidationError(f"flow dimension {flows.dim} != feature dimension {d}")
    rng = np.random.default_rng(seed)
    eval_batch = rng.standard_normal((batch, d))
    params = flows.parameters()
    adam = AdamState()
    report = FlowFitReport()
    for step in range(steps):
        for p in params.values():
            p.zero_grad()
        z0 = rng.standard_normal((batch, d))
        try:
            obj = flow_objective(flows, z0, features, impacts, sign)
        except NumericError as exc:
            raise NumericError(f"flow fitting failed at step {step}: {exc}") from exc
        dc.backward(dc.neg(obj))
        adam.update(params, lr)
        with dc.no_grad():
            report.objective.append(flow_objective(flows, eval_batch, features, impacts, sign).item())
    return report


def posterior_mean(flows: FlowStack, d: int, n_samples: int = 1000, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    with dc.no_grad():
        zk, _ = flows.forward(rng.standard_normal((n_samples, d)))
    return zk.data.mean(axis=0)


def predict_impact(flows: FlowStack, features, n_samples: int = 1000, seed: int = 0) -> np.ndarray:
    """Posterior-mean impact prediction ``Phi E[z_K]`` for (possibly unseen) nodes."""
    features = np.asarray(features, dtype=np.float64)
    return features @ posterior_mean(flows, features.shape[1], n_samples, seed)


def impact_density(flows: FlowStack, features, impacts, n_samples: int = 1000, seed: int = 0) -> np.ndarray:
    """Per-node ``E_q[N(Y_i; Phi_i z, tau^2)]`` at the node's own impact."""
    features = np.asarray(features, dtype=np.float64)
    impacts = np.asarray(impacts, dtype=np.float64)
    rng = np.random.default_rng(seed)
    with dc.no_grad():
        zk, _ = flows.forward(rng.standard_normal((n_samples, features.shape[1])))
    tau = float(np.exp(flows.log_tau.data[0, 0]))
    resid = zk.data @ features.T - impacts[None, :]
    dens = np.exp(-0.5 * (resid / tau) ** 2) / (tau * math.sqrt(2.0 * math.pi))
    return dens.mean(axis=0)


# ---------------------------------------------------------------------------
# graph-like optical flow
# ---------------------------------------------------------------------------


@dataclass
class OpticalFlowField:
    """``values[t, i, j]`` is the transfer rate; NaN marks undefined edges."""

    values: np.ndarray
    lambda1: float
    theta1: float

    @property
    def defined(self) -> np.ndarray:
        return ~np.isnan(self.values)

    def records(self) -> list:
        """``(t, i, j, V)`` for defined entries, sorted by decreasing ``|V|``."""
        t, i, j = np.nonzero(self.defined)
        v = self.values[t, i, j]
        order = np.lexsort((j, i, t, -np.abs(v)))
        return [(int(t[k]), int(i[k]), int(j[k]), float(v[k])) for k in order]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "i", "j", "V"])
            for t, i, j, v in self.records():
                w.writerow([t, i, j, repr(v)])


def effective_coefficients(model: HSPGNNModel) -> tuple:
    """``(lambda1, theta1)``: mean kernel center tap and mean diagonal of the
    hop-1 mixing matrix, each averaged over physics layers."""
    layers = model.physics
    if 1 not in layers[0].hops:
        raise ConfigurationError("optical flow needs hop 1 among the physics hops")
    lam = float(np.mean([p.kernel.data.reshape(-1)[p.kernel.size // 2] for p in layers]))
    theta = float(np.mean([np.mean(np.diag(p.theta[p.hops.index(1)].data)) for p in layers]))
    return lam, theta


def optical_flow_from_coefficients(lambda1: float, theta1: float, l_dyn_seq, tol: float = 1e-9) -> OpticalFlowField:
    """``V_t^{ij} = -lambda1 / (theta1 L_t^{ij})`` on off-diagonal entries with ``|L| > tol``."""
    if abs(theta1) < 1e-12:
        raise DegeneracyError(f"spatial coefficient {theta1!r} is too close to zero")
    laps = np.stack([np.asarray(getattr(l, "data", l), dtype=np.float64) for l in l_dyn_seq])
    n = laps.shape[1]
    ok = (np.abs(laps) > tol) & ~np.eye(n, dtype=bool)[None]
    vals = np.full(laps.shape, np.nan)
    vals[ok] = -lambda1 / (theta1 * laps[ok])
    return OpticalFlowField(vals, lambda1, theta1)


def optical_flow(model: HSPGNNModel, l_dyn_seq, tol: float = 1e-9) -> OpticalFlowField:
    lam, theta = effective_coefficients(model)
    return optical_flow_from_coefficients(lam, theta, l_dyn_seq, tol)


# ---------------------------------------------------------------------------
# dynamic-graph export
# ---------------------------------------------------------------------------


def export_dynamic_graphs(l_dyn_seq, path, kind: str = "laplacian") -> list:
    """One CSV per step plus ``index.json``; returns the written file names."""
    os.makedirs(path, exist_ok=True)
    names = []
    for t, lap in enumerate(l_dyn_seq):
        arr = np.asarray(getattr(lap, "data", lap), dtype=np.float64)
        name = f"{kind}_{t:05d}.csv"
        np.savetxt(os.path.join(path, name), arr, delimiter=",", fmt="%.17g")
        names.append(name)
    n = int(np.asarray(getattr(l_dyn_seq[0], "data", l_dyn_seq[0])).shape[0]) if names else 0
    with open(os.path.join(path, "index.json"), "w") as fh:
        json.dump({"kind": kind, "n_steps": len(names), "n_nodes": n, "files": names}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return names


def load_dynamic_graphs(path) -> list:
    with open(os.path.join(path, "index.json")) as fh:
        index = json.load(fh)
    return [np.loadtxt(os.path.join(path, f), delimiter=",", ndmin=2) for f in index["files"]]
