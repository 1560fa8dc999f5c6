"""End-to-end acceptance checks, one test per criterion.

The ablation criteria train full-width models on the 2000/500 seed-0 corpus;
expect this module to take over an hour on a single CPU.
"""

import math
import os
import subprocess
import sys
import time
from fractions import Fraction

import numpy as np
import pytest

from diffkit import tensorcore as tc
from diffkit.denoiser import DenoiserConfig, denoiser_graph, init_denoiser, step_code
from diffkit.diffusion import forward_gmm, forward_gmm_stepwise, make_schedule
from diffkit.metrics import auc, mpjpe, p_mpjpe, pck
from diffkit.posedist import GmmParams, fit_gmm_em, make_dist, sample_hk
from diffkit.skeleton import gen_dataset, normalized_adjacency, z_histogram
from diffkit.trainer import TrainConfig, build_context, predict, train

ALPHA_50 = 0.9488207074605876  # running product of the default schedule, frozen from an exact-rational oracle
MINUTE = 60.0


# ------------------------------------------------------------- fixtures

@pytest.fixture(scope="session")
def corpus():
    return gen_dataset(n_train=2000, n_test=500, seed=0)


class _Runs:
    """Train each ablation mode once per session and remember the wall time it took."""

    def __init__(self, ds):
        self.ds = ds
        self.gt = np.array([s.pose3d for s in ds.test])
        t0 = time.perf_counter()
        self.ctx = build_context(ds, TrainConfig())
        self.ctx_seconds = time.perf_counter() - t0
        self.ckpt, self.seconds, self.score = {}, {}, {}

    def get(self, mode):
        if mode not in self.ckpt:
            t0 = time.perf_counter()
            ck = train(TrainConfig(mode=mode), self.ds, ctx=self.ctx)
            assert ck.status == "ok", f"{mode} training diverged"
            preds = predict(ck, self.ds, ctx=self.ctx)
            self.ckpt[mode] = ck
            self.score[mode] = mpjpe(preds, self.gt)
            self.seconds[mode] = time.perf_counter() - t0
        return self.ckpt[mode]


@pytest.fixture(scope="session")
def runs(corpus):
    return _Runs(corpus)


# ---------------------------------------------------------------- 1

def test_criterion_01_gradients(record_criterion):
    t0 = time.perf_counter()
    cfg = DenoiserConfig(latent=8, context=8, heads=4, blocks=3)
    adj = tc.Tensor(normalized_adjacency(5, [(0, 1), (1, 2), (2, 3), (0, 4)]))
    rng = np.random.default_rng(0)
    params = init_denoiser(cfg, rng)
    h, f, y = rng.normal(size=(3, 5, 3)), rng.normal(size=(3, 5, 8)), rng.normal(size=(3, 5, 3))
    code = step_code(np.array([1, 17, 50]), cfg)

    def program(p, inputs):
        out = denoiser_graph(p, adj, inputs[0], inputs[1], code, cfg)
        return tc.mul(tc.sum_squares(tc.add(out, tc.mul(inputs[2], -1.0))), 1.0 / inputs[2].size)

    _, grads = tc.evaluate_with_gradients(program, params, (h, f, y))
    fd = tc.finite_difference(program, params, (h, f, y), h=1e-5)
    errs = {k: tc.relative_error(grads[k], fd[k]) for k in params}
    worst = max(errs, key=errs.get)
    seconds = time.perf_counter() - t0
    ok = errs[worst] <= 1e-4 and seconds < 2 * MINUTE
    record_criterion(1, ok, f"{len(errs)} tensors, worst rel err {errs[worst]:.2e} ({worst}), {seconds:.1f}s")
    assert errs[worst] <= 1e-4
    assert seconds < 2 * MINUTE


# ---------------------------------------------------------------- 2

def test_criterion_02_em_monotone(corpus, record_criterion):
    t0 = time.perf_counter()
    zh = z_histogram(corpus)
    n = 1000
    worst, iters = math.inf, []
    picks = np.random.default_rng(0).choice(len(corpus.train), size=100, replace=False)
    for run, idx in enumerate(picks):
        rng = np.random.default_rng([0, run])
        x = sample_hk(make_dist(corpus.train[idx], corpus, zh), rng, n).reshape(n, -1)
        assert x.shape == (1000, 51)
        gmm = fit_gmm_em(x, 5, rng=rng)
        ll = np.array(gmm.history)  # total log-likelihood, the stricter reading of the slack
        iters.append(len(ll))
        if len(ll) > 1:
            worst = min(worst, float(np.diff(ll).min()))
    seconds = time.perf_counter() - t0
    ok = worst >= -1e-9 and seconds < 3 * MINUTE
    record_criterion(2, ok, f"100 fits, min per-iteration change {worst:.2e}, "
                            f"median {int(np.median(iters))} iterations, {seconds:.1f}s")
    assert worst >= -1e-9
    assert seconds < 3 * MINUTE


# ---------------------------------------------------------------- 3

def _moment_check(draws, mean, cov):
    n = len(draws)
    se_mean = np.sqrt(np.diag(cov) / n)
    se_cov = np.sqrt((np.outer(np.diag(cov), np.diag(cov)) + cov ** 2) / n)
    z_mean = np.abs(draws.mean(0) - mean) / se_mean
    z_cov = np.abs(np.cov(draws, rowvar=False) - cov) / se_cov
    return max(z_mean.max(), z_cov.max())


def test_criterion_03_forward_moments(record_criterion):
    t0 = time.perf_counter()
    s = make_schedule()
    # seed 0 for both the fixture and the draws
    fix = np.random.default_rng(0)
    d, m = 6, 3
    covs = []
    for _ in range(m):
        a = 0.3 * fix.normal(size=(d, d))
        covs.append(a @ a.T + 0.2 * np.eye(d))
    gmm = GmmParams(np.full(m, 1.0 / m), fix.normal(size=(m, d)), np.array(covs))
    h0 = fix.normal(size=(2, 3))
    comp = 1
    ks, n = (1, 10, 25, 50), 10_000
    rng = np.random.default_rng(0)

    closed = {k: np.array([forward_gmm(h0, k, s, gmm, comp, rng).ravel() for _ in range(n)]) for k in ks}
    stepwise = {k: np.empty((n, d)) for k in ks}
    for i in range(n):
        h = h0
        for k in range(1, ks[-1] + 1):
            h = forward_gmm_stepwise(h, k, s, gmm, comp, rng)
            if k in stepwise:
                stepwise[k][i] = h.ravel()

    worst = {}
    for k in ks:
        a = s.alpha(k)
        mean = gmm.means[comp] + math.sqrt(a) * (h0.ravel() - gmm.means[comp])
        cov = (1 - a) * gmm.covs[comp]
        worst[k] = (_moment_check(closed[k], mean, cov), _moment_check(stepwise[k], mean, cov))
    seconds = time.perf_counter() - t0
    peak = max(max(v) for v in worst.values())
    ok = peak < 3.0 and seconds < 3 * MINUTE
    detail = ", ".join(f"k={k}: {c:.2f}/{w:.2f}" for k, (c, w) in worst.items())
    record_criterion(3, ok, f"max |z| closed/stepwise {detail}; {seconds:.1f}s")
    assert peak < 3.0
    assert seconds < 3 * MINUTE


# ---------------------------------------------------------------- 4

def test_criterion_04_schedule(record_criterion):
    s = make_schedule()
    exact = Fraction(1)
    for b in s.betas:
        exact *= 1 - Fraction(float(b))
    product = math.prod(1.0 - float(b) for b in s.betas)
    errs = (abs(s.alpha(50) - float(exact)), abs(s.alpha(50) - product), abs(s.alpha(50) - ALPHA_50))
    ok = s.betas[0] == 1e-4 and s.betas[-1] == 2e-3 and max(errs) <= 1e-12
    record_criterion(4, ok, f"beta_1={float(s.betas[0])!r} beta_50={float(s.betas[-1])!r} alpha_50={s.alpha(50)!r} "
                            f"max oracle diff {max(errs):.1e}")
    assert s.betas[0] == 1e-4 and s.betas[-1] == 2e-3
    assert max(errs) <= 1e-12


# ------------------------------------------------------------- 5 and 6

def test_criterion_05_diffusion_beats_single_step(runs, record_criterion):
    runs.get("baseline_a")
    runs.get("diffpose")
    a, d = runs.score["baseline_a"], runs.score["diffpose"]
    seconds = runs.ctx_seconds + runs.seconds["baseline_a"] + runs.seconds["diffpose"]
    margin = (a - d) / a
    ok = d < a and margin >= 0.02 and seconds < 20 * MINUTE
    record_criterion(5, ok, f"diffusion {d:.2f} mm vs single-step {a:.2f} mm, margin {100 * margin:+.2f}%, "
                            f"{seconds / MINUTE:.1f} min")
    assert d < a and margin >= 0.02
    assert seconds < 20 * MINUTE


def test_criterion_06_gmm_vs_standard_forward(runs, record_criterion):
    runs.get("diffpose")
    runs.get("stand_diff")
    g, s = runs.score["diffpose"], runs.score["stand_diff"]
    seconds = runs.ctx_seconds + runs.seconds["diffpose"] + runs.seconds["stand_diff"]
    ok = g <= 1.02 * s and seconds < 25 * MINUTE
    record_criterion(6, ok, f"mixture forward {g:.2f} mm vs standard forward {s:.2f} mm "
                            f"(limit {1.02 * s:.2f}), {seconds / MINUTE:.1f} min")
    assert g <= 1.02 * s
    assert seconds < 25 * MINUTE


# ---------------------------------------------------------------- 7

def test_criterion_07_strided_sampler(runs, record_criterion):
    ck = runs.get("diffpose")
    t0 = time.perf_counter()
    strided = predict(ck, runs.ds, sampler="strided", S=5, ctx=runs.ctx)
    t_strided = time.perf_counter() - t0
    t0 = time.perf_counter()
    full = predict(ck, runs.ds, sampler="full", ctx=runs.ctx)
    t_full = time.perf_counter() - t0
    e_s, e_f = mpjpe(strided, runs.gt), mpjpe(full, runs.gt)
    rel = abs(e_s - e_f) / e_f
    speedup = t_full / t_strided
    seconds = t_strided + t_full
    ok = rel <= 0.10 and speedup >= 5.0 and seconds < 5 * MINUTE
    record_criterion(7, ok, f"strided {e_s:.2f} mm vs full {e_f:.2f} mm ({100 * rel:.1f}%), "
                            f"speedup {speedup:.1f}x, {seconds / MINUTE:.1f} min")
    assert rel <= 0.10
    assert speedup >= 5.0
    assert seconds < 5 * MINUTE


# ---------------------------------------------------------------- 8

def test_criterion_08_more_samples_help(runs, record_criterion):
    ck = runs.get("diffpose")
    e1 = mpjpe(predict(ck, runs.ds, N=1, ctx=runs.ctx), runs.gt)
    e5 = mpjpe(predict(ck, runs.ds, N=5, ctx=runs.ctx), runs.gt)
    record_criterion(8, e5 <= e1, f"N=5 {e5:.2f} mm vs N=1 {e1:.2f} mm")
    assert e5 <= e1


# ---------------------------------------------------------------- 9

def test_criterion_09_metric_suite(record_criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    gt = rng.normal(scale=200.0, size=(17, 3))
    checks = {
        "identical": mpjpe(gt, gt) == 0.0 and p_mpjpe(gt, gt) <= 1e-9,
        "345": abs(mpjpe(gt + np.array([3.0, 4.0, 0.0]), gt) - 5.0) <= 1e-12,
        "pck_all": pck(gt, gt) == 100.0,
        "pck_none": pck(gt + np.array([200.0, 0, 0]), gt) == 0.0,
        "auc_perfect": auc(gt, gt) == 100.0,
        "auc_far": auc(gt + np.array([151.0, 0, 0]), gt) == 0.0,
    }
    half = gt[:16].copy()
    off = np.zeros_like(half)
    off[:8, 0], off[8:, 0] = 10.0, 300.0
    checks["pck_half"] = pck(half + off, half) == 50.0
    c, s_ = math.cos(0.7), math.sin(0.7)
    R = np.array([[c, -s_, 0], [s_, c, 0], [0, 0, 1]])
    checks["rigid"] = p_mpjpe(gt @ R.T + 25.0, gt) <= 1e-9
    checks["scaled"] = p_mpjpe(2.0 * gt, gt) <= 1e-9
    pairs_ok = all(p_mpjpe(a, b) <= mpjpe(a, b) + 1e-9
                   for a, b in (rng.normal(scale=200.0, size=(2, 17, 3)) for _ in range(100)))
    a, b = rng.normal(scale=200.0, size=(2, 20, 17, 3))
    curve = [pck(a, b, t) for t in np.linspace(0, 1500, 301)]
    monotone = all(x <= y for x, y in zip(curve, curve[1:]))
    seconds = time.perf_counter() - t0
    failed = [k for k, v in checks.items() if not v]
    ok = not failed and pairs_ok and monotone and seconds < MINUTE
    record_criterion(9, ok, f"{len(checks) - len(failed)}/{len(checks)} exact examples, "
                            f"p_mpjpe<=mpjpe on 100 pairs: {pairs_ok}, PCK monotone: {monotone}, {seconds:.1f}s")
    assert not failed, failed
    assert pairs_ok and monotone
    assert seconds < MINUTE


# --------------------------------------------------------------- 10

def _cli(*argv):
    env = {**os.environ, "OMP_NUM_THREADS": "1", "OPENBLAS_NUM_THREADS": "1", "MKL_NUM_THREADS": "1"}
    env.pop("DIFFKIT_SEED", None)
    res = subprocess.run([sys.executable, "-m", "diffkit.cli", *argv], env=env, capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    return res


def test_criterion_10_determinism(tmp_path, record_criterion):
    same = {}
    for tag in ("a", "b"):
        d = tmp_path / tag
        d.mkdir()
        _cli("gen-data", "--out", str(d / "data.json"), "--train", "40", "--test", "8", "--seed", "3")
        _cli("train", "--data", str(d / "data.json"), "--out", str(d / "model.json"), "--epochs", "2", "--seed", "3")
        _cli("infer", "--ckpt", str(d / "model.json"), "--data", str(d / "data.json"), "--out", str(d / "preds.json"),
             "--seed", "3")
    for name in ("data.json", "model.json", "preds.json"):
        same[name] = (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    ok = all(same.values())
    record_criterion(10, ok, ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in same.items()))
    assert ok, same
