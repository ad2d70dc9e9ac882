"""End-to-end imputer: coarse MLP -> spatial attention -> physics stack ->
LSTM/temporal-attention forecaster, trained on the masked L1 error of the
next window's observed values.
"""

from __future__ import annotations

import json
import logging
import struct
import warnings
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from . import graphops as go
from . import layers as ly
from .data import SeriesWindow, cover_windows, preprocess
from .exceptions import CheckpointError, ConfigurationError, NumericError, ValidationError

logger = logging.getLogger(__name__)

VARIANTS = ("standard", "L")
INIT_MODES = ("passthrough", "glorot")


class EmptyLossSupportWarning(UserWarning):
    """Every target position was masked, so the loss is defined as zero."""


@dataclass
class ModelConfig:
    n_nodes: int
    M: int = 60
    K: object = 1  # int -> hops 0..K, list -> exactly those hops
    k_t: int = 3
    hidden: int | None = None
    mlp_hidden: int | None = None
    variant: str = "standard"
    n_physics_layers: int = 2
    lambda_max: float = 2.0
    theta_scale: float = 1.0
    init: str = "passthrough"
    init_scale: float = 0.01
    mlp_residual: bool = True
    use_mlp: bool = True
    use_satt: bool = True
    use_physics: bool = True
    use_predictor: bool = True
    pinn_weight: float = 0.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.M < 2:
            raise ConfigurationError(f"M must be >= 2, got {self.M}")
        if self.k_t % 2 == 0 or self.k_t > self.M:
            raise ConfigurationError(f"k_t must be odd and <= M, got {self.k_t}")
        if not isinstance(self.K, int):
            self.K = list(ly.normalize_hops(self.K))
        ly.normalize_hops(self.K)
        if self.hidden is None:
            self.hidden = self.n_nodes
        if self.init not in INIT_MODES:
            raise ConfigurationError(f"init must be one of {INIT_MODES}, got {self.init!r}")
        if self.pinn_weight < 0:
            raise ConfigurationError("pinn_weight must be nonnegative")

    @property
    def hops(self) -> tuple:
        return ly.normalize_hops(self.K)


@dataclass
class TrainConfig:
    learning_rate: float = 0.0005
    decay: float = 0.92
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0
    validation_fraction: float = 0.16
    clip_norm: float = 5.0
    shuffle: bool = True
    reconstruction_weight: float = 0.0
    reconstruction_rate: float = 0.25

    def __post_init__(self):
        if not 0.0 < self.decay <= 1.0:
            raise ConfigurationError(f"decay must lie in (0, 1], got {self.decay}")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigurationError(f"validation_fraction must lie in (0, 1), got {self.validation_fraction}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigurationError("batch_size must be >= 1 and epochs >= 0")

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.decay**epoch


class HSPGNNModel:
    """Parameters and forward passes of the imputer.

    ``graph`` is the optional base adjacency the attention modulates.
    """

    def __init__(self, config: ModelConfig, graph: go.GraphSpec | None = None, seed: int = 0):
        self.config = config
        self.graph = graph
        self.trained = False
        if graph is not None and graph.n_nodes != config.n_nodes:
            raise ConfigurationError(f"graph has {graph.n_nodes} nodes, config says {config.n_nodes}")
        rng = np.random.default_rng(seed)
        c = config
        n, m = c.n_nodes, c.M
        self.satt = ly.SpatialAttentionParams.init(rng, m, n)
        if c.init == "passthrough":
            # the model starts out reproducing the interpolated input
            self.mlp = ly.MLPParams.near_zero(rng, n, c.mlp_hidden, c.init_scale)
            self.physics = [ly.PhysicsParams.passthrough(rng, m, n, c.K, c.k_t, c.init_scale)]
            self.physics += [
                ly.PhysicsParams.residual(rng, m, n, c.K, c.k_t, c.init_scale) for _ in range(c.n_physics_layers - 1)
            ]
        else:
            self.mlp = ly.MLPParams.init(rng, n, c.mlp_hidden)
            self.physics = [
                ly.PhysicsParams.init(rng, m, n, c.K, c.k_t, c.theta_scale) for _ in range(c.n_physics_layers)
            ]
        n_pred = 2 if c.variant == "L" else 1
        self.lstm = []
        self.tatt = []
        n_in = n
        for _ in range(n_pred):
            self.lstm.append(ly.LSTMParams.init(rng, n_in, c.hidden))
            self.tatt.append(ly.TemporalAttentionParams.init(rng, m, c.hidden))
            n_in = c.hidden
        self.pinn = ly.PhysicsParams.init(rng, m, n, c.K, c.k_t) if c.pinn_weight > 0 else None

    # -- parameter access ----------------------------------------------
    def parameters(self) -> dict:
        out = {}
        for prefix, group in self._groups():
            for k, t in group.tensors().items():
                out[f"{prefix}.{k}"] = t
        return out

    def _groups(self):
        c = self.config
        if c.use_mlp:
            yield "mlp", self.mlp
        if c.use_satt:
            yield "satt", self.satt
        if c.use_physics:
            for i, p in enumerate(self.physics):
                yield f"physics{i}", p
        if c.use_predictor:
            for i, (lp, tp) in enumerate(zip(self.lstm, self.tatt)):
                yield f"lstm{i}", lp
                yield f"tatt{i}", tp
        if self.pinn is not None:
            yield "pinn", self.pinn

    def state_arrays(self) -> dict:
        return {k: t.data.copy() for k, t in self.parameters().items()}

    def load_state_arrays(self, state: dict) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise CheckpointError(f"state lacks parameters: {sorted(missing)}")
        for k, t in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise CheckpointError(f"parameter {k}: shape {arr.shape} != expected {t.shape}")
            t.data = arr.copy()
            t.zero_grad()

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.zero_grad()

    # -- forward passes ------------------------------------------------
    def _base_laplacian(self) -> dc.Tensor:
        g = self.graph if self.graph is not None else go.GraphSpec.empty(self.config.n_nodes)
        return dc.Tensor(go.normalized_laplacian(g).matrix)

    def forward_impute(self, window: SeriesWindow):
        """Returns ``(p_bar, p_hat, l_dyn_seq)``.

        ``window.values`` must already be interpolated at masked positions.
        ``p_hat`` carries the observed values at every unmasked position.
        """
        c = self.config
        u = dc.Tensor(window.values)
        if u.shape != (c.M, c.n_nodes):
            raise ValidationError(f"window shape {u.shape} != ({c.M}, {c.n_nodes})")
        miss = dc.Tensor(window.mask)
        observed = dc.Tensor(window.values * (1.0 - window.mask))
        if c.use_mlp:
            p_bar = ly.mlp_coarse_impute(u, self.mlp)
            if c.mlp_residual:
                p_bar = u + p_bar
        else:
            p_bar = u
        coarse = observed + dc.hadamard(p_bar, miss)
        if c.use_satt:
            _, l_dyn = ly.spatial_attention(coarse, self.satt, self.graph)
        else:
            l_dyn = self._base_laplacian()
        l_dyn_seq = [l_dyn]
        if c.use_physics:
            raw = ly.physics_stack(coarse, l_dyn_seq, self.physics)
        else:
            raw = coarse
        p_hat = observed + dc.hadamard(raw, miss)
        return p_bar, p_hat, l_dyn_seq

    def forward_predict(self, imputed: dc.Tensor) -> dc.Tensor:
        h = imputed
        for lp, tp in zip(self.lstm, self.tatt):
            h = ly.temporal_attention(ly.lstm_forward(h, lp), tp)
        return h

    def pinn_penalty(self, imputed: dc.Tensor, l_dyn_seq) -> dc.Tensor:
        """Mean absolute residual of the discretized PDE on the imputed window."""
        resid = ly.physics_layer(imputed, l_dyn_seq, self.pinn) - imputed
        return dc.mean(dc.absolute(resid))

    def reconstruction_loss(self, src: SeriesWindow, rng: np.random.Generator, rate: float) -> dc.Tensor:
        """Hide a further ``rate`` of the observed entries, re-interpolate and
        score the imputation on exactly those entries (all truly observed)."""
        hide = (rng.random(src.mask.shape) < rate) & (src.mask == 0)
        mask2 = np.maximum(src.mask, hide.astype(np.float64))
        window = SeriesWindow(preprocess(src.values, mask2), mask2)
        _, p_hat, _ = self.forward_impute(window)
        return masked_l1_loss(src.values, p_hat, 1.0 - hide.astype(np.float64))

    def window_loss(self, pair, rng: np.random.Generator | None = None, reconstruction_weight: float = 0.0,
                    reconstruction_rate: float = 0.25) -> dc.Tensor:
        src, tgt = pair
        _, p_hat, l_dyn_seq = self.forward_impute(src)
        c = self.config
        if c.use_predictor:
            pred = self.forward_predict(p_hat)
            loss = masked_l1_loss(tgt.values, pred, tgt.mask)
        else:
            # no forecaster: regress the imputation onto the interpolated input
            loss = masked_l1_loss(src.values, p_hat, np.zeros_like(src.mask))
        if self.pinn is not None:
            loss = loss + dc.scale(self.pinn_penalty(p_hat, l_dyn_seq), c.pinn_weight)
        if reconstruction_weight > 0:
            if rng is None:
                raise ConfigurationError("reconstruction loss needs a random generator")
            rec = self.reconstruction_loss(src, rng, reconstruction_rate)
            loss = loss + dc.scale(rec, reconstruction_weight)
        return loss

    def impute_series(self, values, mask) -> np.ndarray:
        """Fill masked entries of a preprocessed series, window by window.

        Windows tile the series; the last one is end-aligned and only fills
        steps no earlier window covered.
        """
        values = np.asarray(values, dtype=np.float64)
        mask = np.asarray(mask, dtype=np.float64)
        T = values.shape[0]
        out = values.copy()
        done = 0
        with dc.no_grad():
            for start in cover_windows(T, self.config.M):
                w = SeriesWindow(values[start : start + self.config.M], mask[start : start + self.config.M])
                _, p_hat, _ = self.forward_impute(w)
                lo = max(done, start)
                out[lo : start + self.config.M] = p_hat.data[lo - start :]
                done = start + self.config.M
        return np.where(mask.astype(bool), out, values)

    def dynamic_laplacians(self, values, mask) -> list:
        """One dynamic Laplacian (numpy) per covering window."""
        values = np.asarray(values, dtype=np.float64)
        mask = np.asarray(mask, dtype=np.float64)
        out = []
        with dc.no_grad():
            for start in cover_windows(values.shape[0], self.config.M):
                w = SeriesWindow(values[start : start + self.config.M], mask[start : start + self.config.M])
                _, _, seq = self.forward_impute(w)
                out.extend(l.data.copy() for l in seq)
        return out


# ---------------------------------------------------------------------------
# losses and metrics
# ---------------------------------------------------------------------------


def masked_l1_loss(x_true, x_hat: dc.Tensor, mask) -> dc.Tensor:
    """Mean |x_hat - x_true| over positions with ``mask == 0``."""
    x_true = np.asarray(x_true, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if not isinstance(x_hat, dc.Tensor):
        x_hat = dc.Tensor(x_hat)
    if x_true.shape != x_hat.shape or mask.shape != x_hat.shape:
        raise ValidationError(f"shape mismatch: {x_true.shape}, {x_hat.shape}, {mask.shape}")
    keep = 1.0 - mask
    count = keep.sum()
    if count == 0:
        warnings.warn("all target positions are masked; loss defined as 0", EmptyLossSupportWarning, stacklevel=2)
        return dc.scale(dc.sum(x_hat), 0.0)
    diff = dc.hadamard(x_hat - dc.Tensor(x_true), dc.Tensor(keep))
    return dc.scale(dc.sum(dc.absolute(diff)), 1.0 / count)


def imputation_metrics(x_true, x_hat, mask) -> dict:
    """MAE and MSE over positions where ``mask == 1``."""
    x_true = np.asarray(x_true, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    count = mask.sum()
    if count == 0:
        raise ValidationError("no masked positions to evaluate")
    err = (x_true - x_hat) * mask
    return {"mae": float(np.abs(err).sum() / count), "mse": float((err**2).sum() / count)}


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def update(self, params: dict, lr: float) -> None:
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step
        c2 = 1.0 - b2**self.step
        for name, p in params.items():
            g = p.grad
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_global_norm(params: dict, max_norm: float) -> float:
    total = float(np.sqrt(np.sum([np.sum(p.grad * p.grad) for p in params.values()])))
    if max_norm and total > max_norm:
        s = max_norm / total
        for p in params.values():
            p.grad = p.grad * s
    return total


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    learning_rates: list = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = float("inf")

    def to_rows(self) -> list:
        return [
            {"epoch": e, "lr": lr, "train_loss": tr, "val_loss": va}
            for e, (lr, tr, va) in enumerate(zip(self.learning_rates, self.train_loss, self.val_loss))
        ]


def split_validation(pairs: list, fraction: float) -> tuple:
    """Chronological split; the last ``fraction`` of pairs validate."""
    n_val = max(1, int(round(len(pairs) * fraction)))
    if n_val >= len(pairs):
        raise ValidationError(f"need at least 2 window pairs to split, got {len(pairs)}")
    return pairs[:-n_val], pairs[-n_val:]


def validation_loss(model: HSPGNNModel, pairs: list) -> float:
    if not pairs:
        return float("nan")
    with dc.no_grad(), warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyLossSupportWarning)
        return float(np.mean([model.window_loss(p).item() for p in pairs]))


def train(dataset, model: HSPGNNModel, cfg: TrainConfig, val_pairs: list | None = None) -> TrainReport:
    """Mini-batch Adam with per-epoch decay; keeps the best-validation weights.

    ``dataset`` is a list of ``(input_window, target_window)`` pairs. When
    ``val_pairs`` is None the last ``cfg.validation_fraction`` is held out.
    """
    pairs = list(dataset)
    if val_pairs is None:
        pairs, val_pairs = split_validation(pairs, cfg.validation_fraction)
    rng = np.random.default_rng(cfg.seed)
    adam = AdamState()
    report = TrainReport()
    params = model.parameters()
    best_state = model.state_arrays()
    try:
        report.best_val = validation_loss(model, val_pairs)
    except NumericError as exc:
        raise NumericError(f"before training, validation: {exc}") from exc
    report.best_epoch = -1
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(len(pairs)) if cfg.shuffle else np.arange(len(pairs))
        losses = []
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [pairs[i] for i in order[start : start + cfg.batch_size]]
            model.zero_grad()
            for pair in batch:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", EmptyLossSupportWarning)
                    try:
                        loss = model.window_loss(pair, rng, cfg.reconstruction_weight, cfg.reconstruction_rate)
                    except NumericError as exc:
                        raise NumericError(f"epoch {epoch}, batch {b}: {exc}") from exc
                value = loss.item()
                if not np.isfinite(value):
                    raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
                losses.append(value)
                if loss.requires_grad:
                    dc.backward(dc.scale(loss, 1.0 / len(batch)))
            clip_global_norm(params, cfg.clip_norm)
            adam.update(params, lr)
            for name, p in params.items():
                if not np.all(np.isfinite(p.data)):
                    raise NumericError(f"parameter {name} became non-finite at epoch {epoch}, batch {b}")
        try:
            val = validation_loss(model, val_pairs)
        except NumericError as exc:
            raise NumericError(f"epoch {epoch}, validation: {exc}") from exc
        report.train_loss.append(float(np.mean(losses)) if losses else float("nan"))
        report.val_loss.append(val)
        report.learning_rates.append(lr)
        logger.info("epoch %d lr=%.3g train=%.6f val=%.6f", epoch, lr, report.train_loss[-1], val)
        if val < report.best_val:
            report.best_val = val
            report.best_epoch = epoch
            best_state = model.state_arrays()
    model.load_state_arrays(best_state)
    model.trained = True
    return report


def evaluate(model: HSPGNNModel, values, mask, ground_truth, eval_mask=None) -> dict:
    """Impute ``values`` (preprocessed, model units) and score masked positions.

    ``eval_mask`` defaults to ``mask``.
    """
    imputed = model.impute_series(values, mask)
    return imputation_metrics(ground_truth, imputed, mask if eval_mask is None else eval_mask)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"HSPG"
FORMAT_VERSION = 1


def _config_dict(model: HSPGNNModel) -> dict:
    return asdict(model.config)


def checkpoint_save(model: HSPGNNModel, path, extras: dict | None = None) -> None:
    """Write magic, version, config JSON, then named float64 blocks and a CRC32."""
    blocks = dict(model.state_arrays())
    if model.graph is not None:
        blocks["__graph__"] = model.graph.adjacency
    for k, v in (extras or {}).items():
        blocks[f"__extra__.{k}"] = np.asarray(v, dtype=np.float64)
    body = bytearray()
    header = {"config": _config_dict(model), "trained": bool(model.trained)}
    cfg = json.dumps(header, sort_keys=True).encode()
    body += struct.pack("<I", len(cfg)) + cfg
    body += struct.pack("<I", len(blocks))
    for name in sorted(blocks):
        arr = np.ascontiguousarray(blocks[name], dtype="<f8")
        nb = name.encode()
        body += struct.pack("<H", len(nb)) + nb
        body += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        payload = arr.tobytes()
        body += struct.pack("<Q", len(payload)) + payload
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", FORMAT_VERSION) + bytes(body))
        fh.write(struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF))


def _read_checkpoint(path) -> tuple:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an HSPG checkpoint")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version} (expected {FORMAT_VERSION})")
    body, (crc,) = raw[8:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt file)")
    try:
        off = 0
        (n,) = struct.unpack_from("<I", body, off)
        off += 4
        cfg = json.loads(body[off : off + n].decode())
        off += n
        (count,) = struct.unpack_from("<I", body, off)
        off += 4
        blocks = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off : off + ln].decode()
            off += ln
            (ndim,) = struct.unpack_from("<B", body, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", body, off)
            off += 4 * ndim
            (nbytes,) = struct.unpack_from("<Q", body, off)
            off += 8
            if off + nbytes > len(body):
                raise CheckpointError(f"{path}: block {name!r} runs past end of file")
            blocks[name] = np.frombuffer(body[off : off + nbytes], dtype="<f8").reshape(shape).copy()
            off += nbytes
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    return cfg, blocks


def checkpoint_load(path, with_extras: bool = False):
    cfg, blocks = _read_checkpoint(path)
    graph = go.GraphSpec(blocks.pop("__graph__")) if "__graph__" in blocks else None
    extras = {k.split(".", 1)[1]: blocks.pop(k) for k in list(blocks) if k.startswith("__extra__.")}
    try:
        config = ModelConfig(**cfg["config"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: invalid model configuration ({exc})") from exc
    model = HSPGNNModel(config, graph=graph)
    model.load_state_arrays(blocks)
    model.trained = bool(cfg.get("trained", False))
    return (model, extras) if with_extras else model
