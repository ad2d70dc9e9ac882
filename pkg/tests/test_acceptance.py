"""Acceptance criteria 1 to 10, one PASS/FAIL line each.

Thresholds are pinned below. A criterion that fails stays failing; the
printed detail line carries the measured numbers.
"""

import math
import time
import warnings

import numpy as np
import pytest

from hspgnn import bench
from hspgnn import data as dt
from hspgnn import diffcore as dc
from hspgnn import explain as ex
from hspgnn import graphops as go
from hspgnn import layers as ly
from hspgnn import model as md
from hspgnn.cli import ablation_variants, resolve_config
from hspgnn.estimator import HSPGNNImputer, LinearInterpolationImputer, MeanImputer

# pinned tolerances and thresholds
GRAD_TOL = 1e-4
TOEPLITZ_TOL = 1e-14
CHEBYSHEV_TOL = 1e-10
SPECTRUM_TOL = 1e-9
COMBINATION_TOL = 1e-10
EQUIV_TOL = 1e-9
SPEEDUP_MIN = 10.0
LOGDET_TOL = 1e-6
COMPOSED_TOL = 1e-5
MEAN_GAIN_MIN = 0.40  # HSPGNN MAE at least 40% below the mean imputer
LINEAR_GAIN_MIN = 0.15  # and at least 15% below linear interpolation
DETERMINISM_TOL = 1e-12
RATE_TOL = 0.01

# criterion 6 and 7 dataset: seeds fixed after the oracle run
SYNTH = dict(n_nodes=20, T=2000, alpha=0.9, graph_seed=0, noise_sigma=0.01)
MASK_SEED = 1
RUNTIME_LIMIT_S = 600.0
# opt-in training objective reported alongside the default as a diagnostic
RECONSTRUCTION = dict(reconstruction_weight=1.0, learning_rate=0.005, stride=20)

RESULTS = {}


def verdict(n, ok, detail):
    RESULTS[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'} | {detail}"
    print(RESULTS[n])
    assert ok, RESULTS[n]


def leaf(rng, shape):
    return dc.Tensor(rng.uniform(-1, 1, shape), requires_grad=True)


def params_of(*groups):
    return [t for g in groups for t in g.tensors().values()]


@pytest.fixture(scope="module")
def synthetic():
    values, graph = dt.synth_diffusion(**SYNTH)
    mask = dt.apply_missing(values, np.zeros_like(values), dt.MissingPattern("point", point_rate=0.25, seed=MASK_SEED))
    X = np.where(mask.astype(bool), np.nan, values)
    return values, graph, mask, X


_FITS = {}


def fitted_mae(synthetic, name, **kw):
    """Train once per configuration and cache (MAE, seconds)."""
    if name not in _FITS:
        values, graph, mask, X = synthetic
        t0 = time.perf_counter()
        est = HSPGNNImputer(adjacency=graph.adjacency, **kw).fit(X)
        mae = md.imputation_metrics(values, est.transform(X), mask)["mae"]
        _FITS[name] = (mae, time.perf_counter() - t0)
    return _FITS[name]


def test_criterion_01_gradients():
    rng = np.random.default_rng(1)
    worst = 0.0
    graph = go.GraphSpec(np.array([[0, 1, 1, 0], [1, 0, 1, 0], [1, 1, 0, 1], [0, 0, 1, 0]], dtype=float))
    for M, N in [(6, 4), (5, 3), (8, 2)]:
        g = graph if N == 4 else None
        x = leaf(rng, (M, N))
        mlp = ly.MLPParams.init(rng, N, hidden=3)
        worst = max(worst, dc.grad_check(lambda x, *p: dc.sum(dc.tanh(ly.mlp_coarse_impute(x, mlp))), [x] + params_of(mlp)))
        att = ly.SpatialAttentionParams.init(rng, M, N)
        w = dc.Tensor(rng.normal(size=(N, N)))
        worst = max(worst, dc.grad_check(
            lambda x, *p: dc.sum(dc.hadamard(ly.spatial_attention(x, att, g)[1], w)), [x] + params_of(att)))
        phys = [ly.PhysicsParams.init(rng, M, N, K=2, theta_scale=0.3) for _ in range(2)]
        lap = [go.normalized_laplacian(g if g is not None else go.GraphSpec.empty(N))]
        worst = max(worst, dc.grad_check(
            lambda x, *p: dc.sum(dc.tanh(ly.physics_stack(x, lap, phys))), [x] + params_of(*phys)))
        lstm = ly.LSTMParams.init(rng, N, 3)
        worst = max(worst, dc.grad_check(lambda x, *p: dc.sum(ly.lstm_forward(x, lstm)), [x] + params_of(lstm)))
        tatt = ly.TemporalAttentionParams.init(rng, M, N)
        worst = max(worst, dc.grad_check(
            lambda x, *p: dc.sum(dc.tanh(ly.temporal_attention(x, tatt))), [x] + params_of(tatt)))
        model = md.HSPGNNModel(md.ModelConfig(n_nodes=N, M=M, K=1, init="glorot", theta_scale=0.3), g, seed=M)
        src = dt.SeriesWindow(rng.normal(size=(M, N)), (rng.random((M, N)) < 0.3).astype(float))
        tgt = dt.SeriesWindow(rng.normal(size=(M, N)), (rng.random((M, N)) < 0.3).astype(float))
        worst = max(worst, dc.grad_check(lambda *p: model.window_loss((src, tgt)), list(model.parameters().values())))
    verdict(1, worst < GRAD_TOL, f"worst relative gradient error {worst:.2e} over 6 blocks x 3 shapes (tol {GRAD_TOL:g})")


def test_criterion_02_operator_oracles():
    rng = np.random.default_rng(2)
    toe = max(
        np.max(np.abs(go.toeplitz_apply(dc.Tensor(x)).data - go.toeplitz_matrix(M) @ go.natural_to_stacked(x)))
        for M in range(1, 11)
        for x in [rng.normal(size=(M, 5))]
    )
    cheb = 0.0
    for n in range(2, 11):
        a = rng.uniform(-1, 1, (n, n))
        lt = (a + a.T) / 2
        lt /= np.max(np.abs(np.linalg.eigvalsh(lt)))
        basis = go.chebyshev_basis(go.LaplacianMatrix(lt, "rescaled"), 5)
        p = np.linalg.matrix_power
        poly = {0: np.eye(n), 1: lt, 2: 2 * p(lt, 2) - np.eye(n), 3: 4 * p(lt, 3) - 3 * lt,
                4: 8 * p(lt, 4) - 8 * p(lt, 2) + np.eye(n), 5: 16 * p(lt, 5) - 20 * p(lt, 3) + 5 * lt}
        cheb = max(cheb, max(np.max(np.abs(basis[k] - poly[k])) for k in range(6)))
    lo, hi = np.inf, -np.inf
    for n in range(1, 7):  # every unweighted graph on up to 6 nodes
        iu = np.triu_indices(n, 1)
        for bits in range(2 ** len(iu[0])):
            a = np.zeros((n, n))
            a[iu] = [(bits >> k) & 1 for k in range(len(iu[0]))]
            ev = np.linalg.eigvalsh(go.normalized_laplacian(go.GraphSpec(a + a.T)).matrix)
            lo, hi = min(lo, ev.min()), max(hi, ev.max())
    ok = toe <= TOEPLITZ_TOL and cheb <= CHEBYSHEV_TOL and lo >= -SPECTRUM_TOL and hi <= 2 + SPECTRUM_TOL
    verdict(2, ok, f"toeplitz gap {toe:.1e}, chebyshev gap {cheb:.1e}, spectrum [{lo:.2e}, {hi:.12f}] on all graphs N<=6")


def test_criterion_03_derivative_combination():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        M = int(rng.integers(2, 21))
        lambdas = rng.uniform(-2, 2, int(rng.integers(1, M)))
        worst = max(worst, go.solve_derivative_combination(M, lambdas)[1])
    verdict(3, worst < COMBINATION_TOL, f"max residual {worst:.2e} over 100 random lambda vectors, M<=20")


def test_criterion_04_complexity():
    res = {r.method: r.wall_time_ms for r in bench.bench_temporal_mixing(60, 300, 3, repeats=50, warmup=5)}
    speedup = res["explicit_power"] / res["conv_approx"]
    gap = bench.check_equivalence(60, 300, np.random.default_rng(0).uniform(0.5, 1.5, 3))
    scaling = []
    for M in (240, 480, 960):
        r = {x.method: x.wall_time_ms for x in bench.bench_temporal_mixing(M, 300, 3, repeats=10)}
        scaling.append(f"M={M}: {r['explicit_power'] / r['conv_approx']:.1f}x")
    detail = (
        f"M=60 N=300 order 3: explicit {res['explicit_power']:.4f} ms, conv {res['conv_approx']:.4f} ms, "
        f"speedup {speedup:.2f}x (need {SPEEDUP_MIN:g}x); equivalence gap {gap:.1e}; larger windows {', '.join(scaling)}"
    )
    verdict(4, gap <= EQUIV_TOL and speedup >= SPEEDUP_MIN, detail)


def test_criterion_05_flows():
    worst = 0.0
    for d in range(1, 6):
        rng = np.random.default_rng(50 + d)
        for _ in range(100):
            flow = ex.PlanarFlow.from_arrays(rng.normal(size=d), rng.normal(size=d), rng.normal())
            z = rng.normal(size=d)
            jac = _numeric_jacobian(lambda v: ex.planar_forward(v, flow)[0], z)
            worst = max(worst, abs(ex.planar_forward(z, flow)[1] - math.log(abs(np.linalg.det(jac)))))
    composed = 0.0
    rng = np.random.default_rng(5)
    for K in (1, 2, 3):
        for d in (1, 2, 3):
            stack = ex.FlowStack([ex.PlanarFlow.from_arrays(rng.normal(size=d), rng.normal(size=d), rng.normal()) for _ in range(K)])
            z = rng.normal(size=d)
            jac = _numeric_jacobian(lambda v: stack.forward(v[None, :])[0].data[0], z)
            composed = max(composed, abs(stack.forward(z[None, :])[1].item() - math.log(abs(np.linalg.det(jac)))))
    verdict(5, worst < LOGDET_TOL and composed < COMPOSED_TOL,
            f"planar log-det gap {worst:.1e} (500 draws, d<=5); composed gap {composed:.1e} (K<=3, d<=3)")


def _numeric_jacobian(f, z, h=1e-6):
    cols = []
    for k in range(z.size):
        e = np.zeros(z.size)
        e[k] = h
        cols.append((f(z + e) - f(z - e)) / (2 * h))
    return np.stack(cols, axis=1)


@pytest.mark.slow
def test_criterion_06_synthetic_recovery(synthetic):
    values, _, mask, X = synthetic
    mean_mae = md.imputation_metrics(values, MeanImputer().fit_transform(X), mask)["mae"]
    lin_mae = md.imputation_metrics(values, LinearInterpolationImputer().fit_transform(X), mask)["mae"]
    mae, secs = fitted_mae(synthetic, "full")
    diag, diag_secs = fitted_mae(synthetic, "full_reconstruction", **RECONSTRUCTION)
    ok = mae <= (1 - MEAN_GAIN_MIN) * mean_mae and mae <= (1 - LINEAR_GAIN_MIN) * lin_mae and secs < RUNTIME_LIMIT_S
    detail = (
        f"alpha={SYNTH['alpha']} MAE: mean {mean_mae:.5f}, linear {lin_mae:.5f}, HSPGNN {mae:.5f} "
        f"({mae / lin_mae:.3f}x linear, need <= {1 - LINEAR_GAIN_MIN:.2f}x) in {secs:.0f}s; "
        f"diagnostic with reconstruction loss: {diag:.5f} ({diag / lin_mae:.3f}x linear) in {diag_secs:.0f}s"
    )
    verdict(6, ok, detail)


@pytest.mark.slow
def test_criterion_07_ablation_direction(synthetic):
    full, _ = fitted_mae(synthetic, "full")
    no_phys, _ = fitted_mae(synthetic, "without_physics", use_physics=False)
    full_r, _ = fitted_mae(synthetic, "full_reconstruction", **RECONSTRUCTION)
    no_phys_r, _ = fitted_mae(synthetic, "without_physics_reconstruction", use_physics=False, **RECONSTRUCTION)
    cfg = resolve_config("ablate", {"series": "s", "ground_truth": "g"})
    k_rows = [K for name, K, _ in ablation_variants(cfg) if name.startswith("k_hops")]
    table_ok = k_rows == [1, 2, [1, 2]]
    detail = (
        f"full {full:.5f} vs without physics {no_phys:.5f}; "
        f"diagnostic with reconstruction loss: full {full_r:.5f} vs without physics {no_phys_r:.5f}; "
        f"K-hop sweep rows {k_rows}"
    )
    verdict(7, no_phys > full and table_ok, detail)


def test_criterion_08_user_csv_imputed(tmp_path):
    rng = np.random.default_rng(8)
    x = rng.normal(size=(60, 4))
    lines = [",".join("" if rng.random() < 0.2 else repr(float(v)) for v in row) for row in x]
    (tmp_path / "user.csv").write_text("\n".join(lines) + "\n")
    values, mask = dt.load_series_csv(tmp_path / "user.csv")
    X = np.where(mask.astype(bool), np.nan, values)
    out = HSPGNNImputer(M=10, epochs=1).fit_transform(X)
    ok = out.shape == (60, 4) and bool(np.all(np.isfinite(out))) and np.array_equal(out[mask == 0], values[mask == 0])
    verdict(8, ok, "real-dataset benchmark numbers are out of scope; "
                   "user CSV with empty cells ingested and imputed")


def test_criterion_09_determinism():
    x, g = dt.synth_diffusion(n_nodes=6, T=240, alpha=0.9, graph_seed=3, seed=3)
    m = dt.apply_missing(x, np.zeros_like(x), dt.MissingPattern(point_rate=0.25, seed=3))
    filled = dt.preprocess(x, m)
    runs = []
    for _ in range(2):
        model = md.HSPGNNModel(md.ModelConfig(n_nodes=6, M=12), g, seed=9)
        rep = md.train(dt.make_windows(filled, m, 12), model, md.TrainConfig(epochs=5, batch_size=4, seed=9))
        runs.append((rep, md.evaluate(model, filled, m, x)))
    gap = max(
        np.max(np.abs(np.subtract(runs[0][0].train_loss, runs[1][0].train_loss))),
        np.max(np.abs(np.subtract(runs[0][0].val_loss, runs[1][0].val_loss))),
    )
    ok = gap <= DETERMINISM_TOL and runs[0][1] == runs[1][1]
    verdict(9, ok, f"loss trajectory gap {gap:.1e} over 5 epochs; metrics identical: {runs[0][1] == runs[1][1]}")


def test_criterion_10_masking_statistics():
    m = np.zeros((1000, 100))
    rate = dt.apply_missing(m, m, dt.MissingPattern("point", point_rate=0.25, seed=10)).mean()
    pattern = dt.MissingPattern("block", seed=10)
    with warnings.catch_warnings():
        dt.apply_missing(np.zeros((5000, 20)), np.zeros((5000, 20)), pattern)
    durations = [e["duration"] for e in pattern.events]
    ok = abs(rate - 0.25) <= RATE_TOL and durations and min(durations) >= 12 and max(durations) <= 48
    verdict(10, ok, f"point rate {rate:.4f} on 1e5 entries; {len(durations)} block events, "
                    f"durations in [{min(durations)}, {max(durations)}]")
