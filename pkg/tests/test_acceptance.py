"""End-to-end acceptance checks, one test per criterion.

Each test carries a ``criterion`` marker; the terminal summary prints one
PASS/FAIL line per criterion. The two training trend checks take several
minutes and are also marked ``slow``.
"""

import filecmp
import math
import time
from collections import deque
from fractions import Fraction

import numpy as np
import pytest

from ddpm_moco import tensor as tn
from ddpm_moco.cli import main
from ddpm_moco.data import DefectClass, build_dataset
from ddpm_moco.denoiser import denoiser_fn, init_params
from ddpm_moco.diffusion import DdpmConfig, SamplerConfig, ddpm_loss, forward_closed, forward_iterative, sample, sample_step, train_ddpm
from ddpm_moco.evaluation import (
    FeatureGaussian,
    average_precision,
    evaluate_probe,
    extract_features,
    fit_probe,
    frechet_distance,
    inception_style_score,
)
from ddpm_moco.moco import (
    ContrastConfig,
    KeyQueue,
    batch_contrastive,
    contrast_loss,
    encode,
    info_nce,
    init_encoder,
    momentum_update,
    train_moco,
)
from ddpm_moco.schedule import NoiseSchedule, cosine_lr, make_linear_schedule
from ddpm_moco.tensor import Tensor

from gradcases import CASES, check


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


@pytest.mark.criterion(1, "forward marginal: iterated steps match the closed form (T=100, 1e5 paths, 3 sigma)")
def test_forward_marginal_equivalence():
    start = time.perf_counter()
    sched = make_linear_schedule(100)
    n = 100_000
    x = forward_iterative(np.ones(n), 100, np.random.default_rng(2024), sched)
    ab = sched.a_bar[-1]
    mean, var = math.sqrt(ab), 1.0 - ab
    # the paths are Gaussian, so var(sample var) = 2 var^2 / (n - 1)
    assert abs(x.mean() - mean) <= 3 * math.sqrt(var / n)
    assert abs(x.var(ddof=1) - var) <= 3 * math.sqrt(2 * var**2 / (n - 1))
    assert time.perf_counter() - start < 10


@pytest.mark.criterion(2, "gradient suite: every op, ddpm_loss through the 8x8 denoiser, both contrastive losses <= 1e-4")
def test_gradient_suite():
    start = time.perf_counter()
    worst = {name: max(check(name, seed) for seed in range(10)) for name in CASES}
    assert max(worst.values()) <= 1e-4, worst

    rng = np.random.default_rng(3)
    sched = make_linear_schedule(10)
    x0 = rng.uniform(-1, 1, size=(2, 1, 8, 8))
    eps = rng.normal(size=x0.shape)
    f = lambda p: ddpm_loss(p, x0, np.array([3, 8]), eps, sched)
    assert tn.grad_check_params(f, init_params(1, 4), h=1e-6, per_tensor=3) <= 1e-4

    for mode in ("original", "improved"):
        cfg = ContrastConfig(K=8, n=4, dim=8, width=4, total_steps=10, tau=0.2, m=0.9, loss_mode=mode)
        view = rng.uniform(-1, 1, size=(4, 1, 8, 8))
        keys = encode(init_encoder(2, 4, 8), rng.uniform(-1, 1, size=(4, 1, 8, 8))).numpy()
        negatives = _unit(rng.normal(size=(8, 8)))
        g = lambda p: contrast_loss(p, view, keys, negatives, cfg)
        assert tn.grad_check_params(g, init_encoder(1, 4, 8), h=1e-6, per_tensor=4) <= 1e-4
    assert time.perf_counter() - start < 120


@pytest.mark.criterion(3, "loss reductions: n=1, identical positives, uniform logits")
def test_loss_reductions():
    rng = np.random.default_rng(5)
    for _ in range(20):
        q = _unit(rng.normal(size=(1, 6)))
        k = _unit(rng.normal(size=(1, 6)))
        neg = _unit(rng.normal(size=(7, 6)))
        a = batch_contrastive(Tensor(q), Tensor(k), Tensor(neg), 0.1).item()
        b = info_nce(Tensor(q), Tensor(k), Tensor(neg), 0.1).item()
        assert abs(a - b) <= 1e-12

        q = _unit(rng.normal(size=(5, 6)))
        k = np.repeat(_unit(rng.normal(size=(1, 6))), 5, axis=0)
        a = batch_contrastive(Tensor(q), Tensor(k), Tensor(neg), 0.3).item()
        b = info_nce(Tensor(q), Tensor(k), Tensor(neg), 0.3).item()
        assert abs(a - b) <= 1e-9

    # q orthogonal to every key gives all-zero logits
    K = 12
    q = np.zeros((3, K + 2))
    q[:, 0] = 1.0
    k = np.zeros((3, K + 2))
    k[:, 1] = 1.0
    neg = np.eye(K + 2)[2:]
    for loss in (info_nce, batch_contrastive):
        assert abs(loss(Tensor(q), Tensor(k), Tensor(neg), 0.07).item() - math.log(K + 1)) <= 1e-9


@pytest.mark.criterion(4, "momentum update follows m^s; queue matches a list oracle over 1000 pushes")
def test_momentum_and_queue():
    rng = np.random.default_rng(11)
    q = {"w": rng.normal(size=(3, 5)), "b": rng.normal(size=5)}
    k0 = {"w": rng.normal(size=(3, 5)), "b": rng.normal(size=5)}
    m = 0.9
    k = k0
    for _ in range(10):
        k = momentum_update(k, q, m)
    for name in q:
        closed = m**10 * k0[name] + (1 - m**10) * q[name]
        np.testing.assert_allclose(k[name], closed, rtol=0, atol=1e-9)

    capacity, width = 37, 4
    queue = KeyQueue(capacity, width)
    oracle: deque = deque(maxlen=capacity)
    for _ in range(1000):
        keys = _unit(rng.normal(size=(int(rng.integers(1, capacity + 1)), width)))
        queue.push(keys)
        oracle.extend(keys)
        np.testing.assert_array_equal(queue.ordered(), np.array(oracle))
        assert queue.negatives().shape[0] == len(oracle)


@pytest.mark.criterion(5, "sampler: standard single step inverts the forward step; modes agree at t=1")
def test_sampler_inversion():
    rng = np.random.default_rng(8)
    sched = NoiseSchedule.from_beta(np.array([0.36]))
    x0 = rng.uniform(-1, 1, size=(4, 1, 8, 8))
    eps = rng.normal(size=x0.shape)
    x1 = forward_closed(x0, 1, eps, sched)
    oracle = lambda x, t: eps
    out = sample_step(x1, 1, oracle, sched, SamplerConfig("standard", "zero"))
    np.testing.assert_allclose(out, x0, rtol=0, atol=1e-5)

    sched = make_linear_schedule(50)
    x1 = rng.normal(size=(4, 1, 8, 8))
    guess = lambda x, t: np.sin(3 * x)
    a = sample_step(x1, 1, guess, sched, SamplerConfig("standard", "zero"))
    b = sample_step(x1, 1, guess, sched, SamplerConfig("literal_eq3", "zero"))
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-9)


@pytest.fixture(scope="module")
def dataset():
    return build_dataset(400, 16, 0)


@pytest.fixture(scope="module")
def pretrained(dataset):
    """(MoCo state, training seconds) per loss mode (K=512, n=32, 2k steps), trained on first use."""
    cache = {}

    def get(mode: str):
        if mode not in cache:
            xtr, _ = dataset.subset("train")
            start = time.perf_counter()
            state = train_moco(xtr, ContrastConfig(K=512, n=32, total_steps=2000, loss_mode=mode), seed=0)
            cache[mode] = state, time.perf_counter() - start
        return cache[mode]

    return get


@pytest.mark.slow
@pytest.mark.criterion(6, "DDPM smoke on smooth 16x16, T=100, 2k steps: loss halves and sample FID beats noise")
def test_ddpm_smoke_training(dataset, pretrained):
    encoder = pretrained("improved")[0].theta_q
    start = time.perf_counter()
    images, _ = dataset.subset("train", DefectClass.SMOOTH)
    state = train_ddpm(images, DdpmConfig(T=100, total_steps=2000), seed=0)
    losses = np.array([loss for _, loss, _ in state.log])
    assert len(losses) == 2000 and np.all(np.isfinite(losses))
    early = losses[:100].mean()
    late = losses[-100:].mean()
    assert late <= 0.5 * early, (early, late)

    samples = sample(denoiser_fn(state.params, 100), state.sched, SamplerConfig(), 128, np.random.default_rng(1), 16, np.float32)
    noise = np.clip(np.random.default_rng(2).standard_normal(samples.shape), -1, 1)
    real = FeatureGaussian.fit(extract_features(encoder, images))
    fid_samples = frechet_distance(FeatureGaussian.fit(extract_features(encoder, samples)), real)
    fid_noise = frechet_distance(FeatureGaussian.fit(extract_features(encoder, noise)), real)
    assert fid_samples < fid_noise, (fid_samples, fid_noise)
    assert time.perf_counter() - start < 15 * 60


@pytest.mark.slow
@pytest.mark.criterion(7, "MoCo K=512 n=32 2k steps + probe: mAP >= 0.85 for both losses, smooth AP highest")
@pytest.mark.parametrize("mode", ["original", "improved"])
def test_contrastive_trend(dataset, pretrained, mode):
    state, train_seconds = pretrained(mode)
    start = time.perf_counter()
    xtr, ytr = dataset.subset("train")
    xte, yte = dataset.subset("test")
    probe = fit_probe(extract_features(state.theta_q, xtr), ytr, 100, 0.1, 0)
    report = evaluate_probe(probe, extract_features(state.theta_q, xte), yte)
    assert report.map >= 0.85, report.aps
    smooth = report.aps[DefectClass.SMOOTH]
    assert all(smooth >= ap for ap in report.aps), report.aps
    assert train_seconds + time.perf_counter() - start < 20 * 60


def _ranked_sweep(scores, labels) -> list[tuple[int, int]]:
    """(hits so far, rank) at every positive, ties broken by index."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    out, hits = [], 0
    for rank, i in enumerate(order, start=1):
        if labels[i]:
            hits += 1
            out.append((hits, rank))
    return out


@pytest.mark.criterion(8, "metric oracles: AP exact on 1000 sets, 1-D Frechet closed form, IS bounds")
def test_metric_oracles():
    rng = np.random.default_rng(99)
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        labels = rng.random(n) < 0.4
        labels[int(rng.integers(n))] = True
        scores = rng.integers(0, 6, size=n) / 5.0 if rng.random() < 0.3 else rng.random(n)
        sweep = _ranked_sweep(list(scores), [bool(v) for v in labels])
        got = average_precision(scores, labels)
        assert got == math.fsum(h / r for h, r in sweep) / len(sweep)
        exact = sum(Fraction(h, r) for h, r in sweep) / len(sweep)
        assert abs(Fraction(got) - exact) <= Fraction(1, 10**15)

    for _ in range(100):
        m1, m2 = rng.normal(size=2) * 3
        s1, s2 = rng.uniform(0.01, 5, size=2)
        g1 = FeatureGaussian(np.array([m1]), np.array([[s1**2]]))
        g2 = FeatureGaussian(np.array([m2]), np.array([[s2**2]]))
        assert abs(frechet_distance(g1, g2) - ((m1 - m2) ** 2 + (s1 - s2) ** 2)) <= 1e-8

    for _ in range(200):
        logits = rng.normal(size=(int(rng.integers(1, 30)), 4)) * rng.uniform(0.1, 20)
        p = np.exp(logits - logits.max(axis=1, keepdims=True))
        score = inception_style_score(p / p.sum(axis=1, keepdims=True))
        assert 1.0 <= score <= 4.0
    assert inception_style_score(np.eye(4)) == 4.0
    assert inception_style_score(np.full((5, 4), 0.25)) == 1.0
    assert inception_style_score(np.tile([[0.1, 0.2, 0.3, 0.4]], (3, 1))) == 1.0


@pytest.mark.criterion(9, "cosine lr is exactly lr0, lr0/2, 0 at 0, total/2, total")
def test_cosine_endpoints():
    for lr0 in (0.03, 0.1, 1.0, 1e-3):
        for total in (2, 100, 2000, 1001):
            assert cosine_lr(0, total, lr0) == lr0
            assert cosine_lr(total, total, lr0) == 0.0
            if total % 2 == 0:
                assert cosine_lr(total // 2, total, lr0) == lr0 / 2


TINY = "counts=20\nT=10\nddpm_steps=5\nddpm_batch=8\nn_samples=4\ntotal_steps=6\nK=16\nbatch=8\nprobe_epochs=5\n"


@pytest.mark.criterion(10, "pipeline rerun with a fixed seed is byte-identical")
def test_pipeline_determinism(tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY)
    for name in ("a", "b"):
        assert main(["pipeline", "--config", str(cfg), "--seed", "3", "--out", str(tmp_path / name)]) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    kinds = {f.suffix for f in files}
    assert {".dft", ".pgm", ".csv", ".txt"} <= kinds
    mismatched = [str(f) for f in files if not filecmp.cmp(a / f, b / f, shallow=False)]
    assert not mismatched
