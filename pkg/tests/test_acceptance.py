"""Acceptance gate: one test per criterion, each reported as a PASS/FAIL line."""

import math
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from uts import numerics as nx
from uts.classes import DEFAULT_PALETTE
from uts.lvit import (AblationConfig, AttentionParams, FeaturePyramid, d_cbam_forward,
                      dat_se_forward, init_params, linear_attention_forward, lvit_forward,
                      mhsa_forward, mlff_fuse, transformer_block_forward)
from uts.lvit.checkpoint import to_bytes
from uts.metrics import (METRIC_NAMES, ConfusionMatrix, complexity_report, macro_metrics,
                         variance_reduction_trial)
from uts.numerics import Tensor
from uts.numerics.gradcheck import sampled_gradient_check
from uts.refine import (DISCRETE, ColorMask, OpCounter, direct_box_mean, discretize, overlay,
                        refine_pipeline, smooth_separable, window_offsets)
from uts.synth import generate_dataset
from uts.train import (TrainConfig, comparison_table, cross_validate, kfold_split, run_ablation,
                       train_epochs)

RED, YELLOW = (255, 0, 0), (255, 255, 0)


def sat_box_mean(px, window):
    """Clamped-window mean from a summed-area table."""
    h, w, _ = px.shape
    left, right = window_offsets(window)
    sat = np.zeros((h + 1, w + 1, 3))
    sat[1:, 1:] = px.cumsum(axis=0).cumsum(axis=1)
    ys, xs = np.arange(h), np.arange(w)
    y0, y1 = np.maximum(0, ys - left), np.minimum(h, ys + right + 1)
    x0, x1 = np.maximum(0, xs - left), np.minimum(w, xs + right + 1)
    total = (sat[y1][:, x1] - sat[y0][:, x1] - sat[y1][:, x0] + sat[y0][:, x0])
    area = np.outer(y1 - y0, x1 - x0)[..., None]
    return total / area


def random_palette_mask(rng):
    h, w = rng.integers(64, 257, size=2)
    block = int(rng.integers(1, 33))
    idx = rng.integers(0, 3, size=(-(-h // block), -(-w // block)))
    idx = np.kron(idx, np.ones((block, block), dtype=int))[:h, :w]
    return np.array(DEFAULT_PALETTE.colors, dtype=np.float64)[idx]


@pytest.mark.criterion(1, "separable smoothing matches the direct windowed mean")
def test_separable_equivalence(record_property):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(50):
        px = random_palette_mask(rng)
        for window in (3, 17, 48):
            got = smooth_separable(ColorMask(px), window).pixels
            worst = max(worst, np.max(np.abs(got - sat_box_mean(px, window))),
                        np.max(np.abs(got - direct_box_mean(ColorMask(px), window))))
    record_property("detail", f"max error {worst:.2e} over 150 cases")
    assert worst <= 1e-9


@pytest.mark.criterion(2, "separable pass costs at most 2w per pixel at w=48")
def test_refinement_complexity(record_property):
    px = random_palette_mask(np.random.default_rng(7))[:96, :96]
    sep, direct = OpCounter(), OpCounter()
    smooth_separable(ColorMask(px), 48, sep)
    direct_box_mean(ColorMask(px), 48, direct)
    ops = refine_pipeline(ColorMask(px), np.zeros(px.shape, np.uint8), window=48).ops
    record_property("detail", f"separable {sep.max_per_sample:g}, direct {direct.max_per_sample:g}, "
                              f"reduction {ops['reduction']:g}x")
    assert sep.max_per_sample <= 2 * 48
    assert direct.max_per_sample == 48 * 48
    assert direct.max_per_sample / sep.max_per_sample >= 24
    assert ops["reduction"] >= 24


@pytest.mark.criterion(3, "512x512 complexity report is exact")
def test_complexity_claim(record_property):
    r = complexity_report(512, 512, 32)
    record_property("detail", f"{r.pixel_ops} / {r.unit_ops} = {r.ratio}")
    assert (r.pixel_ops, r.unit_ops, r.ratio) == (262144, 256, 1024)


# -- criterion 4: one scalar loss per block type ---------------------------------


def _named(rng, shape, name, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale, name)


def _probe_loss(fn, probe):
    return lambda: nx.sum_all(nx.mul(fn(), probe))


def _block_cases():
    rng = np.random.default_rng(11)
    cfg = AblationConfig.preset("all", linear_attention=True)
    p = init_params(cfg, seed=11)
    blk = p.vtm[0]
    tokens = _named(rng, (16, 64), "tokens")
    x_h = _named(rng, (4, 4, 64), "phi_h")
    cases = {}

    x = _named(rng, (8, 8, 3), "x")
    k, b = _named(rng, (3, 3, 3, 4), "kernel", 0.3), _named(rng, (4,), "bias")
    cases["conv"] = ([x, k, b], lambda: nx.conv2d(x, k, b, stride=2), (4, 4, 4))

    xd = _named(rng, (5, 6), "x")
    w, bd = _named(rng, (6, 4), "w"), _named(rng, (4,), "b")
    cases["dense"] = ([xd, w, bd], lambda: nx.dense(xd, w, bd), (5, 4))

    xl = _named(rng, (5, 8), "x")
    g, be = _named(rng, (8,), "gamma"), _named(rng, (8,), "beta")
    cases["layer-norm"] = ([xl, g, be], lambda: nx.layer_norm(xl, g, be), (5, 8))

    se = p.se
    cases["DAT-SE"] = ([x_h, se.w1, se.w2, se.spatial_kernel],
                       lambda: dat_se_forward(x_h, se), (4, 4, 64))
    cb = p.cbam
    cases["D-CBAM"] = ([x_h, cb.w0, cb.w1, cb.dilated_kernel],
                       lambda: d_cbam_forward(x_h, cb), (4, 4, 64))

    levels = [_named(rng, (16, 16, 16), "phi_l"), _named(rng, (8, 8, 32), "phi_m"), x_h]
    m = p.mlff
    cases["MLFF"] = (levels + [m.proj_l, m.proj_m, m.proj_h],
                     lambda: mlff_fuse(FeaturePyramid(*levels, m.proj_l, m.proj_m, m.proj_h)),
                     (4, 4, 64))

    a = blk.attn
    cases["MHSA"] = ([tokens, a.wq, a.wk, a.wv, a.wo], lambda: mhsa_forward(tokens, a), (16, 64))
    cases["linear attention"] = ([tokens, a.wq, a.wk, a.wv, a.wo, a.proj_e, a.proj_f],
                                 lambda: linear_attention_forward(tokens, a), (16, 64))
    block_params = [tokens, a.wq, a.wk, a.wv, a.wo, blk.ffn_w1, blk.ffn_b1, blk.ffn_w2,
                    blk.ffn_b2, blk.ln_gamma, blk.ln_beta]
    cases["transformer block"] = (block_params, lambda: transformer_block_forward(tokens, blk),
                                  (16, 64))
    return cases, p, cfg, rng


@pytest.mark.criterion(4, "reverse-mode gradients match central differences per block")
def test_gradients_per_block(record_property):
    cases, p, cfg, rng = _block_cases()
    worst, lines = 0.0, []
    for name, (params, fn, out_shape) in cases.items():
        probe = rng.normal(size=out_shape)
        res = sampled_gradient_check(_probe_loss(fn, probe), params, rng, per_tensor=5, h=1e-4)
        assert res.ok, (name, res.failures)
        assert all(n >= min(5, t.data.size) for n, t in zip(res.counts.values(), params)), name
        assert res.checked >= 5, name
        worst = max(worst, res.max_rel_error)
        lines.append(name)
    tile = rng.uniform(size=(32, 32, 3))
    res = sampled_gradient_check(lambda: nx.cross_entropy(lvit_forward(tile, p, cfg), [2]),
                                 [p.head.w, p.head.b], rng, per_tensor=5, h=1e-4)
    assert res.ok, res.failures
    assert res.checked >= 5
    worst = max(worst, res.max_rel_error)
    lines.append("head")
    record_property("detail", f"{len(lines)} block types, max rel error {worst:.1e}")
    assert worst <= 1e-3


# -- criterion 5 -------------------------------------------------------------------


def _attention(rng, d=64, heads=4, n=None, r=None):
    ws = [Tensor(rng.normal(size=(d, d)) / np.sqrt(d)) for _ in range(4)]
    e = f = None
    if n is not None:
        e = Tensor(rng.normal(size=(n, r)) / np.sqrt(n))
        f = Tensor(rng.normal(size=(n, r)) / np.sqrt(n))
    return AttentionParams(*ws, heads=heads, proj_e=e, proj_f=f)


def _r_squared(x, y):
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    return 1.0 - resid @ resid / ((y - y.mean()) @ (y - y.mean()))


@pytest.mark.criterion(5, "attention equivalences and linear-attention scaling")
def test_attention_equivalences(record_property):
    rng = np.random.default_rng(5)
    p = _attention(rng)
    x1 = rng.normal(size=(1, 64))
    single = np.max(np.abs(mhsa_forward(x1, p).data - (x1 @ p.wv.data) @ p.wo.data))
    assert single <= 1e-12

    n = 16
    p.proj_e, p.proj_f = Tensor(np.eye(n)), Tensor(np.eye(n))
    xs = rng.normal(size=(n, 64))
    ident = np.max(np.abs(linear_attention_forward(xs, p).data - mhsa_forward(xs, p).data))
    assert ident <= 1e-10

    sizes = np.array([64, 128, 256, 512])
    times = []
    for n in sizes:
        q = _attention(rng, n=int(n), r=8)
        tokens = rng.normal(size=(8, n, 64))
        best = math.inf
        for _ in range(7):
            t0 = time.perf_counter()
            linear_attention_forward(tokens, q)
            best = min(best, time.perf_counter() - t0)
        times.append(best)
    r2 = _r_squared(sizes.astype(float), np.array(times))
    record_property("detail", f"n=1 err {single:.1e}, identity err {ident:.1e}, R^2 {r2:.4f}")
    assert r2 >= 0.95


@pytest.mark.criterion(6, "majority-vote variance trial at k=3, p=0.3")
def test_variance_trial(record_property):
    tail = sum(math.comb(9, j) * 0.3 ** j * 0.7 ** (9 - j) for j in range(5, 10))
    r = variance_reduction_trial(3, 0.3, trials=100000, seed=0)
    bound = r.pixel_variance / 9 + 3 * r.averaged_variance_se
    record_property("detail", f"error {r.tile_majority_error_rate:.4f} vs tail {tail:.4f}; "
                              f"var {r.averaged_variance:.5f} <= {bound:.5f}")
    assert abs(r.tile_majority_error_rate - tail) <= 0.005
    assert r.averaged_variance <= bound
    assert r.bound_holds


@pytest.mark.criterion(7, "DSC/IoU identity and exact macro means")
def test_metric_identities(record_property):
    rng = np.random.default_rng(7)
    worst, checked = 0.0, 0
    while checked < 1000:
        counts = rng.integers(0, 50, size=(3, 3))
        if counts.sum() == 0:
            continue
        r = macro_metrics(ConfusionMatrix(counts))
        iou, dsc = r.per_class["iou"], r.per_class["dsc"]
        ok = ~np.isnan(iou)
        worst = max(worst, float(np.max(np.abs(dsc[ok] - 2 * iou[ok] / (1 + iou[ok])))))
        for m in METRIC_NAMES:
            vals = [v for v in r.per_class[m].tolist() if not math.isnan(v)]
            assert r.macro[m] == sum(vals) / len(vals), (m, counts)
        checked += 1
    record_property("detail", f"1000 matrices, max identity error {worst:.1e}")
    assert worst <= 1e-12


# -- criteria 8 and 9: training on the synthetic corpus ------------------------------


@pytest.fixture(scope="module")
def corpus():
    return generate_dataset(30, width=96, height=96, seed=0)


@pytest.mark.criterion(8, "3-fold synthetic reproduction and deterministic checkpoints")
def test_end_to_end(corpus, record_property):
    cfg = TrainConfig()
    with threadpool_limits(1):
        results = cross_validate(corpus, cfg, k=3, split_seed=0)
    summary = ", ".join(f"fold {r.fold}: acc {r.report.macro['accuracy']:.3f} "
                        f"iou {r.report.macro['iou']:.3f}" for r in results)
    for r in results:
        assert r.report.macro["accuracy"] >= 0.95, summary
        assert r.report.macro["iou"] >= 0.90, summary
    plan = kfold_split(corpus.patient_ids, 3, seed=0)
    x, y = corpus.tiles_and_labels(plan.train_indices(0))
    with threadpool_limits(1):
        again = train_epochs(x, y, cfg)
    first = results[0].train
    same = to_bytes(first.params, first.config) == to_bytes(again.params, again.config)
    record_property("detail", summary + f"; rerun identical: {same}")
    assert same


@pytest.fixture(scope="module")
def ablation_results(corpus):
    return run_ablation(corpus, TrainConfig(), fold=0)


@pytest.mark.criterion(9, "four ablation presets train and are tabulated")
def test_ablation_harness(ablation_results, record_property):
    results = ablation_results
    table = comparison_table(results).splitlines()
    assert [row.split(",")[0] for row in table[1:]] == list(AblationConfig.PRESETS)
    assert all(len(r.train.loss_curve) == 30 for r in results)
    assert all(np.isfinite(r.report.macro["accuracy"]) for r in results)
    print("\n".join(table))
    record_property("detail", "; ".join(
        f"{r.ablation} acc {r.report.macro['accuracy']:.3f}" for r in results))


def test_backbone_reaches_95(ablation_results):
    backbone = next(r for r in ablation_results if r.ablation == "backbone")
    assert backbone.report.macro["accuracy"] >= 0.95


@pytest.mark.criterion(10, "discretization and overlay worked examples are bit-exact")
def test_worked_examples(record_property):
    px = np.array([[[200, 200, 0], [0, 0, 255]]], dtype=np.float64)
    d = discretize(ColorMask(px))
    assert d.pixels[0, 0].tolist() == list(YELLOW)
    assert d.pixels[0, 1].tolist() == list(RED)
    s_d = ColorMask(np.full((1, 1, 3), RED, dtype=np.uint8), DISCRETE)
    out = overlay(s_d, np.full((1, 1, 3), 255, np.uint8), 0.5)
    assert out.dtype == np.uint8 and out[0, 0].tolist() == [255, 128, 128]
    record_property("detail", "yellow, red tie-break, (255,128,128)")
