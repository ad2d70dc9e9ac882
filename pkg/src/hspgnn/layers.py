"""Neural blocks of the imputer: coarse MLP, spatial attention, the
physics-incorporated layer, LSTM and temporal attention.

Windows are M×N tensors (time by node, one feature per node). Every block
is a pure function of an input tensor and a parameter container; parameter
containers expose their tensors through ``tensors()`` in a stable order so
optimizers and checkpoints can address them by name.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import graphops as go
from .exceptions import ConfigurationError, DimensionError, NumericError


def glorot(rng: np.random.Generator, shape: tuple, name: str | None = None) -> dc.Tensor:
    fan_in = shape[0]
    fan_out = shape[1] if len(shape) > 1 else 1
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return dc.Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def zeros(shape: tuple, name: str | None = None) -> dc.Tensor:
    return dc.Tensor(np.zeros(shape), requires_grad=True, name=name)


def _ones_col(m: int) -> dc.Tensor:
    return dc.Tensor(np.ones((m, 1)))


def _row_bias(m: int, b: dc.Tensor) -> dc.Tensor:
    """Repeat a (1×d) bias over ``m`` rows."""
    return _ones_col(m) @ b


def _check_window(x: dc.Tensor, n: int | None = None, what: str = "window") -> None:
    if x.ndim != 2:
        raise DimensionError(f"{what} must be M×N, got {x.shape}")
    if n is not None and x.shape[1] != n:
        raise DimensionError(f"{what} has {x.shape[1]} nodes, parameters expect {n}")


class _Params:
    """Ordered, named parameter tensors."""

    _fields: tuple = ()

    def tensors(self) -> dict:
        out = {}
        for f in self._fields:
            v = getattr(self, f)
            if isinstance(v, (list, tuple)):
                for i, t in enumerate(v):
                    out[f"{f}.{i}"] = t
            else:
                out[f] = v
        return out


# ---------------------------------------------------------------------------
# coarse imputation
# ---------------------------------------------------------------------------


@dataclass
class MLPParams(_Params):
    weights: list
    biases: list
    _fields = ("weights", "biases")

    @classmethod
    def init(cls, rng, n_nodes: int, hidden: int | None = None, n_layers: int = 2) -> "MLPParams":
        hidden = n_nodes if hidden is None else hidden
        dims = [n_nodes] + [hidden] * (n_layers - 1) + [n_nodes]
        ws = [glorot(rng, (dims[i], dims[i + 1])) for i in range(n_layers)]
        bs = [zeros((1, dims[i + 1])) for i in range(n_layers)]
        return cls(ws, bs)

    @classmethod
    def near_zero(cls, rng, n_nodes: int, hidden: int | None = None, scale: float = 0.01) -> "MLPParams":
        """Glorot first layer, output layer shrunk by ``scale`` (residual use)."""
        p = cls.init(rng, n_nodes, hidden)
        p.weights[-1].data *= scale
        return p

    @classmethod
    def identity(cls, n_nodes: int) -> "MLPParams":
        return cls([dc.Tensor(np.eye(n_nodes), requires_grad=True)], [zeros((1, n_nodes))])


def mlp_coarse_impute(u: dc.Tensor, params: MLPParams) -> dc.Tensor:
    """Per-step affine maps across the node axis with tanh between layers."""
    _check_window(u, params.weights[0].shape[0], "MLP input")
    m = u.shape[0]
    h = u
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + _row_bias(m, b)
        if i < last:
            h = dc.tanh(h)
    return h


# ---------------------------------------------------------------------------
# spatial attention -> dynamic Laplacian
# ---------------------------------------------------------------------------


@dataclass
class SpatialAttentionParams(_Params):
    v_s: dc.Tensor  # N×N
    b_s: dc.Tensor  # N×N
    w1: dc.Tensor  # M
    w2: dc.Tensor  # M×M
    w3: dc.Tensor  # M
    _fields = ("v_s", "b_s", "w1", "w2", "w3")

    @classmethod
    def init(cls, rng, M: int, n_nodes: int) -> "SpatialAttentionParams":
        return cls(
            v_s=glorot(rng, (n_nodes, n_nodes)),
            b_s=zeros((n_nodes, n_nodes)),
            w1=glorot(rng, (M,)),
            w2=glorot(rng, (M, M)),
            w3=glorot(rng, (M,)),
        )

    @classmethod
    def zeros(cls, M: int, n_nodes: int) -> "SpatialAttentionParams":
        return cls(zeros((n_nodes, n_nodes)), zeros((n_nodes, n_nodes)), zeros((M,)), zeros((M, M)), zeros((M,)))


def attention_scores(x: dc.Tensor, params: SpatialAttentionParams) -> dc.Tensor:
    """Row-softmax of ``V_s sigmoid(x^T diag(w1) w2 diag(w3) x + b_s)``."""
    _check_window(x, params.v_s.shape[0], "attention input")
    if x.shape[0] != params.w2.shape[0]:
        raise DimensionError(f"window length {x.shape[0]} != attention length {params.w2.shape[0]}")
    left = x.T @ dc.diag(params.w1)
    right = dc.diag(params.w3) @ x
    s = params.v_s @ dc.sigmoid(left @ params.w2 @ right + params.b_s)
    return dc.softmax_rows(s)


def dynamic_adjacency(s_prime: dc.Tensor, base_graph: go.GraphSpec | None) -> dc.Tensor:
    """Symmetrized attention modulating the base adjacency.

    Without a base graph the attention itself (diagonal removed) is the graph.
    """
    n = s_prime.shape[0]
    sym = dc.scale(s_prime + s_prime.T, 0.5)
    if base_graph is None:
        return dc.hadamard(sym, dc.Tensor(1.0 - np.eye(n)))
    return dc.hadamard(sym, dc.Tensor(base_graph.adjacency))


def spatial_attention(x: dc.Tensor, params: SpatialAttentionParams, base_graph: go.GraphSpec | None = None):
    """Returns ``(s_prime, l_dyn)``: the N×N attention and the normalized
    Laplacian of the attention-modulated adjacency."""
    s_prime = attention_scores(x, params)
    l_dyn = go.normalized_laplacian_tensor(dynamic_adjacency(s_prime, base_graph))
    return s_prime, l_dyn


def rescale_tensor(lap: dc.Tensor, lambda_max: float = 2.0) -> dc.Tensor:
    n = lap.shape[0]
    return dc.scale(lap, 2.0 / lambda_max) - dc.Tensor(np.eye(n))


# ---------------------------------------------------------------------------
# physics-incorporated layer
# ---------------------------------------------------------------------------


def normalize_hops(K) -> tuple:
    """``K=int`` means hops 0..K; a list selects exactly those hops."""
    if isinstance(K, (int, np.integer)):
        if K < 0:
            raise ConfigurationError(f"K must be >= 0, got {K}")
        return tuple(range(int(K) + 1))
    hops = tuple(sorted({int(k) for k in K}))
    if not hops or hops[0] < 0:
        raise ConfigurationError(f"hop list must be non-empty and nonnegative, got {K!r}")
    return hops


@dataclass
class PhysicsParams(_Params):
    theta: list  # one M×M mixing matrix per hop in ``hops``
    w_v: dc.Tensor  # N×N source coupling
    kernel: dc.Tensor  # k_t taps over first differences
    hops: tuple = (0, 1)
    _fields = ("theta", "w_v", "kernel")

    def __post_init__(self):
        self.hops = tuple(self.hops)
        if len(self.theta) != len(self.hops):
            raise ConfigurationError(f"{len(self.theta)} theta matrices for hops {self.hops}")
        if self.kernel.size % 2 == 0:
            raise ConfigurationError(f"kernel length must be odd, got {self.kernel.size}")

    @property
    def K(self) -> int:
        return max(self.hops)

    @property
    def M(self) -> int:
        return self.theta[0].shape[0]

    @classmethod
    def init(cls, rng, M: int, n_nodes: int, K=1, k_t: int = 3, theta_scale: float = 1.0) -> "PhysicsParams":
        if k_t % 2 == 0 or k_t > M:
            raise ConfigurationError(f"k_t must be odd and <= M, got k_t={k_t}, M={M}")
        hops = normalize_hops(K)
        theta = [glorot(rng, (M, M)) for _ in hops]
        for t in theta:
            t.data *= theta_scale
        kernel = np.zeros(k_t)
        kernel[k_t // 2] = 1.0
        return cls(theta, glorot(rng, (n_nodes, n_nodes)), dc.Tensor(kernel, requires_grad=True), hops)

    @classmethod
    def passthrough(cls, rng, M: int, n_nodes: int, K=1, k_t: int = 3, scale: float = 0.01) -> "PhysicsParams":
        """Identity map plus ``scale``-sized Glorot noise.

        ``Theta_0 = I`` carries ``X_{t-1}`` and the kernel ``-delta`` adds back
        ``X_t - X_{t-1}``, so the output starts at the input. Row 0 of the lag
        is clamped to ``X_1`` while the difference there is ``X_1`` itself, so
        that row of ``Theta_0`` starts empty.
        """
        p = cls.init(rng, M, n_nodes, K, k_t, theta_scale=scale)
        p.w_v.data *= scale
        if 0 in p.hops:
            eye = np.eye(M)
            eye[0, 0] = 0.0
            p.theta[p.hops.index(0)].data += eye
        p.kernel.data *= -1.0
        return p

    @classmethod
    def residual(cls, rng, M: int, n_nodes: int, K=1, k_t: int = 3, scale: float = 0.01) -> "PhysicsParams":
        """Small-noise parameters for a layer used as ``h + layer(h)``."""
        p = cls.init(rng, M, n_nodes, K, k_t, theta_scale=scale)
        p.w_v.data *= scale
        p.kernel.data[:] = 0.0
        return p

    @classmethod
    def zeros(cls, M: int, n_nodes: int, K=1, k_t: int = 3) -> "PhysicsParams":
        hops = normalize_hops(K)
        return cls([zeros((M, M)) for _ in hops], zeros((n_nodes, n_nodes)), zeros((k_t,)), hops)


def hop_bases(l_dyn_seq, hops: tuple, lambda_max: float = 2.0) -> list:
    """Chebyshev terms for each Laplacian in the sequence, restricted to ``hops``."""
    out = []
    K = max(hops)
    for lap in l_dyn_seq:
        if not isinstance(lap, dc.Tensor):
            lap = dc.Tensor(lap.matrix if isinstance(lap, go.LaplacianMatrix) else lap)
        basis = go.chebyshev_basis_tensor(rescale_tensor(lap, lambda_max), K)
        out.append([basis[k] for k in hops])
    return out


def _first_bad_row(a: np.ndarray):
    bad = ~np.all(np.isfinite(a), axis=1)
    return int(np.argmax(bad)) if bad.any() else None


def physics_layer(x: dc.Tensor, l_dyn_seq, params: PhysicsParams, bases=None) -> dc.Tensor:
    """One discretized PDE step over a window.

    ``out = sum_k Theta_k X_{t-1} T_k(L_t) + X_{t-1} W_v - conv(H X, kernel)``
    where ``X_{t-1}`` lags the window by one step (clamped at the start) and
    ``H X`` is the first difference in time.
    """
    _check_window(x, params.w_v.shape[0], "physics input")
    m = x.shape[0]
    if m != params.M:
        raise DimensionError(f"window length {m} != physics window length {params.M}")
    if bases is None:
        bases = hop_bases(l_dyn_seq, params.hops)
    if len(bases) not in (1, m):
        raise DimensionError(f"need 1 or {m} Laplacians, got {len(bases)}")
    lagged = dc.shift_rows(x, 1)
    mixed = [theta @ lagged for theta in params.theta]
    if len(bases) == 1:
        terms = [y @ t for y, t in zip(mixed, bases[0])]
        spatial = terms[0]
        for t in terms[1:]:
            spatial = spatial + t
    else:
        rows = []
        for step in range(m):
            row = None
            for y, t in zip(mixed, bases[step]):
                r = y[step : step + 1] @ t
                row = r if row is None else row + r
            rows.append(row)
        spatial = dc.concat(rows, axis=0)
    source = lagged @ params.w_v
    temporal = dc.conv1d_time(go.toeplitz_apply(x), params.kernel)
    out = spatial + source - temporal
    bad = _first_bad_row(out.data)
    if bad is not None:
        raise NumericError(f"physics layer produced non-finite values at step {bad}")
    return out


def physics_stack(x: dc.Tensor, l_dyn_seq, layers: list) -> dc.Tensor:
    """Two (or more) physics layers; each layer after the first is residual."""
    hops = layers[0].hops
    shared = all(p.hops == hops for p in layers)
    bases = hop_bases(l_dyn_seq, hops) if shared else None
    h = physics_layer(x, l_dyn_seq, layers[0], bases)
    for p in layers[1:]:
        h = h + physics_layer(h, l_dyn_seq, p, bases)
    return h


# ---------------------------------------------------------------------------
# LSTM and temporal attention
# ---------------------------------------------------------------------------

_GATES = ("i", "f", "c", "o")


@dataclass
class LSTMParams(_Params):
    W_i: dc.Tensor
    W_f: dc.Tensor
    W_c: dc.Tensor
    W_o: dc.Tensor
    U_i: dc.Tensor
    U_f: dc.Tensor
    U_c: dc.Tensor
    U_o: dc.Tensor
    b_i: dc.Tensor
    b_f: dc.Tensor
    b_c: dc.Tensor
    b_o: dc.Tensor
    _fields = ("W_i", "W_f", "W_c", "W_o", "U_i", "U_f", "U_c", "U_o", "b_i", "b_f", "b_c", "b_o")

    @property
    def hidden(self) -> int:
        return self.W_i.shape[0]

    @classmethod
    def init(cls, rng, n_in: int, hidden: int | None = None) -> "LSTMParams":
        hidden = n_in if hidden is None else hidden
        kw = {}
        for g in _GATES:
            kw[f"W_{g}"] = glorot(rng, (hidden, n_in))
            kw[f"U_{g}"] = glorot(rng, (hidden, hidden))
            kw[f"b_{g}"] = zeros((hidden,))
        return cls(**kw)

    @classmethod
    def filled(cls, n_in: int, hidden: int, value: float = 0.0) -> "LSTMParams":
        kw = {}
        for g in _GATES:
            kw[f"W_{g}"] = dc.Tensor(np.full((hidden, n_in), value), requires_grad=True)
            kw[f"U_{g}"] = dc.Tensor(np.full((hidden, hidden), value), requires_grad=True)
            kw[f"b_{g}"] = zeros((hidden,))
        return cls(**kw)


def lstm_forward(x_seq: dc.Tensor, params: LSTMParams, h0=None, c0=None) -> dc.Tensor:
    """Run the recurrence over the rows of ``x_seq``; returns M×hidden states."""
    _check_window(x_seq, params.W_i.shape[1], "LSTM input")
    m = x_seq.shape[0]
    hid = params.hidden
    h = dc.Tensor(np.zeros((1, hid))) if h0 is None else h0
    c = dc.Tensor(np.zeros((1, hid))) if c0 is None else c0
    # gates fused column-wise in i, f, c, o order
    w_all = dc.concat([params.W_i, params.W_f, params.W_c, params.W_o], axis=0).T
    u_all = dc.concat([params.U_i, params.U_f, params.U_c, params.U_o], axis=0).T
    b_all = dc.reshape(dc.concat([params.b_i, params.b_f, params.b_c, params.b_o], axis=0), (1, 4 * hid))
    xw = x_seq @ w_all + _row_bias(m, b_all)
    states = []
    for t in range(m):
        z = xw[t : t + 1] + h @ u_all
        i = dc.sigmoid(z[:, 0:hid])
        f = dc.sigmoid(z[:, hid : 2 * hid])
        g = dc.tanh(z[:, 2 * hid : 3 * hid])
        o = dc.sigmoid(z[:, 3 * hid :])
        c = f * c + i * g
        h = o * dc.tanh(c)
        states.append(h)
    return dc.concat(states, axis=0)


@dataclass
class TemporalAttentionParams(_Params):
    v_e: dc.Tensor  # M×M
    b_e: dc.Tensor  # M×M
    u1: dc.Tensor  # hidden×1
    u2: dc.Tensor  # hidden×1
    u3: dc.Tensor  # 1×1
    _fields = ("v_e", "b_e", "u1", "u2", "u3")

    @classmethod
    def init(cls, rng, M: int, hidden: int) -> "TemporalAttentionParams":
        return cls(
            v_e=glorot(rng, (M, M)),
            b_e=zeros((M, M)),
            u1=glorot(rng, (hidden, 1)),
            u2=glorot(rng, (hidden, 1)),
            u3=dc.Tensor(np.ones((1, 1)), requires_grad=True),
        )

    @classmethod
    def zeros(cls, M: int, hidden: int) -> "TemporalAttentionParams":
        return cls(zeros((M, M)), zeros((M, M)), zeros((hidden, 1)), zeros((hidden, 1)), zeros((1, 1)))


def temporal_attention_matrix(h_seq: dc.Tensor, params: TemporalAttentionParams) -> dc.Tensor:
    """Row-softmax of ``V_e sigmoid((h u1) u3 u2^T h^T + b_e)``."""
    a = h_seq @ params.u1  # M×1
    inner = a @ (params.u3 @ params.u2.T) @ h_seq.T + params.b_e
    return dc.softmax_rows(params.v_e @ dc.sigmoid(inner))


def temporal_attention(h_seq: dc.Tensor, params: TemporalAttentionParams) -> dc.Tensor:
    _check_window(h_seq, params.u1.shape[0], "temporal attention input")
    if h_seq.shape[0] != params.v_e.shape[0]:
        raise DimensionError(f"sequence length {h_seq.shape[0]} != attention length {params.v_e.shape[0]}")
    return temporal_attention_matrix(h_seq, params) @ h_seq
