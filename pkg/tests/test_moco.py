from collections import deque

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ddpm_moco import tensor as tn
from ddpm_moco.errors import ContractError, ParameterError, StateError
from ddpm_moco.moco import (
    ContrastConfig,
    KeyQueue,
    MocoState,
    batch_contrastive,
    contrast_loss,
    encode,
    info_nce,
    init_encoder,
    moco_step,
    momentum_update,
    train_moco,
)
from ddpm_moco.tensor import Tensor


def unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _batch(seed, n=3, k=5, c=4):
    rng = np.random.default_rng(seed)
    return unit(rng.normal(size=(n, c))), unit(rng.normal(size=(n, c))), unit(rng.normal(size=(k, c)))


def brute_info_nce(q, kp, neg, tau):
    total = 0.0
    for b in range(len(q)):
        pos = np.exp(q[b] @ kp[b] / tau)
        total += -np.log(pos / (pos + sum(np.exp(q[b] @ r / tau) for r in neg)))
    return total / len(q)


def brute_batch(q, kp, neg, tau):
    n = len(q)
    total = 0.0
    for b in range(n):
        denom_neg = sum(np.exp(q[b] @ r / tau) for r in neg)
        for j in range(n):
            pos = np.exp(q[b] @ kp[j] / tau)
            total += -np.log(pos / (pos + denom_neg))
    return total / (n * n)


def test_uniform_logits_give_log_k_plus_one():
    q = np.array([[1.0, 0.0]])
    others = np.array([[0.0, 1.0]] * 6)
    assert info_nce(q, np.array([[0.0, 1.0]]), others, 0.5).item() == pytest.approx(np.log(7), abs=1e-12)


def test_single_negative_value():
    q = np.array([[1.0, 0.0]])
    assert info_nce(q, q, np.array([[0.0, 1.0]]), 1.0).item() == pytest.approx(np.log1p(np.exp(-1)), abs=1e-12)
    assert info_nce(q, q, np.array([[0.0, 1.0]]), 1.0).item() == pytest.approx(0.31326, abs=1e-5)


def test_small_temperature_limit():
    q = np.array([[1.0, 0.0]])
    neg = unit(np.array([[0.2, 1.0], [-1.0, 0.3]]))
    assert info_nce(q, q, neg, 0.01).item() < 1e-30


@given(st.integers(0, 10_000), st.floats(0.05, 2.0))
def test_info_nce_matches_brute_force(seed, tau):
    q, kp, neg = _batch(seed)
    assert info_nce(q, kp, neg, tau).item() == pytest.approx(brute_info_nce(q, kp, neg, tau), rel=1e-10)


@given(st.integers(0, 10_000), st.floats(0.05, 2.0))
def test_batch_contrastive_matches_double_loop(seed, tau):
    q, kp, neg = _batch(seed)
    assert batch_contrastive(q, kp, neg, tau).item() == pytest.approx(brute_batch(q, kp, neg, tau), rel=1e-10)


def test_batch_contrastive_two_by_two_example():
    q = np.array([[1.0, 0.0], [0.0, 1.0]])
    neg = unit(np.array([[-1.0, 0.0]]))
    assert batch_contrastive(q, q, neg, 1.0).item() == pytest.approx(brute_batch(q, q, neg, 1.0), abs=1e-9)


@given(st.integers(0, 10_000))
def test_single_sample_batch_reduces_to_info_nce(seed):
    q, kp, neg = _batch(seed, n=1)
    assert abs(batch_contrastive(q, kp, neg, 0.07).item() - info_nce(q, kp, neg, 0.07).item()) <= 1e-12


@given(st.integers(0, 10_000))
def test_identical_positives_reduce_to_info_nce(seed):
    q, kp, neg = _batch(seed, n=4)
    same = np.repeat(kp[:1], 4, axis=0)
    assert batch_contrastive(q, same, neg, 0.2).item() == pytest.approx(info_nce(q, same, neg, 0.2).item(), abs=1e-9)


@given(st.integers(0, 10_000))
def test_losses_non_negative_and_negative_order_free(seed):
    q, kp, neg = _batch(seed, k=7)
    perm = np.random.default_rng(seed).permutation(7)
    for loss in (info_nce, batch_contrastive):
        value = loss(q, kp, neg, 0.1).item()
        assert value >= 0
        assert loss(q, kp, neg[perm], 0.1).item() == pytest.approx(value, rel=1e-12)


@given(st.integers(0, 10_000))
def test_batch_contrastive_joint_permutation(seed):
    q, kp, neg = _batch(seed, n=5)
    perm = np.random.default_rng(seed).permutation(5)
    assert batch_contrastive(q[perm], kp[perm], neg, 0.3).item() == pytest.approx(
        batch_contrastive(q, kp, neg, 0.3).item(), rel=1e-12
    )


def test_empty_queue_is_allowed():
    q, kp, _ = _batch(0)
    empty = np.zeros((0, 4))
    assert info_nce(q, kp, empty, 0.5).item() == pytest.approx(0.0, abs=1e-12)
    assert batch_contrastive(q, kp, empty, 0.5).item() == pytest.approx(0.0, abs=1e-12)


def test_contract_errors():
    q, kp, neg = _batch(0)
    with pytest.raises(ContractError):
        info_nce(q * 1.01, kp, neg, 0.1)
    with pytest.raises(ContractError):
        batch_contrastive(q, kp, neg * 0.5, 0.1)
    with pytest.raises(ContractError):
        info_nce(q, kp[:2], neg, 0.1)
    with pytest.raises(ParameterError):
        info_nce(q, kp, neg, 0.0)


@pytest.mark.parametrize("loss", [info_nce, batch_contrastive])
def test_loss_gradients(loss):
    q, kp, neg = _batch(4)
    f = lambda x: loss(tn.l2_normalize(x), Tensor(kp), Tensor(neg), 0.2)
    assert tn.grad_check(f, q * 1.3, h=1e-6) <= 1e-4


def test_momentum_update_examples():
    a = {"w": np.ones((2, 2))}
    b = {"w": np.zeros((2, 2))}
    np.testing.assert_array_equal(momentum_update(a, b, 0.0)["w"], b["w"])
    np.testing.assert_allclose(momentum_update(a, b, 0.999)["w"], 0.999)


def test_momentum_geometric_convergence(rng):
    q = {"w": rng.normal(size=(3, 4)), "b": rng.normal(size=4)}
    k0 = {"w": rng.normal(size=(3, 4)), "b": rng.normal(size=4)}
    k = k0
    for _ in range(10):
        k = momentum_update(k, q, 0.9)
    for name in q:
        np.testing.assert_allclose(k[name] - q[name], 0.9**10 * (k0[name] - q[name]), atol=1e-9)


def test_momentum_update_contract():
    with pytest.raises(ContractError):
        momentum_update({"a": np.zeros(2)}, {"b": np.zeros(2)}, 0.5)
    with pytest.raises(ContractError):
        momentum_update({"a": np.zeros(2)}, {"a": np.zeros(3)}, 0.5)
    with pytest.raises(ParameterError):
        momentum_update({"a": np.zeros(2)}, {"a": np.zeros(2)}, 1.0)


def _rows(labels, c=3):
    out = np.zeros((len(labels), c))
    out[np.arange(len(labels)), np.asarray(labels) % c] = 1.0
    return out


def test_queue_fifo_example():
    q = KeyQueue(4, 3)
    A, B, C, D, E, F = _rows(range(6))
    q.push(np.stack([A, B])).push(np.stack([C, D])).push(np.stack([E, F]))
    assert {tuple(r) for r in q.negatives()} == {tuple(r) for r in (C, D, E, F)}
    np.testing.assert_array_equal(q.ordered(), np.stack([C, D, E, F]))


def test_queue_full_push_preserves_order():
    q = KeyQueue(3, 3).push(_rows([0, 1, 2]))
    assert q.filled == 3 and q.full
    np.testing.assert_array_equal(q.ordered(), _rows([0, 1, 2]))


@given(st.integers(0, 10_000))
def test_queue_matches_deque_oracle(seed):
    rng = np.random.default_rng(seed)
    cap, width = int(rng.integers(1, 9)), 3
    q, ref = KeyQueue(cap, width), deque(maxlen=cap)
    for _ in range(50):
        keys = unit(rng.normal(size=(int(rng.integers(1, cap + 1)), width)))
        q.push(keys)
        ref.extend(keys)
        np.testing.assert_array_equal(q.ordered(), np.array(ref))
        assert q.filled == len(ref)


def test_queue_contract():
    q = KeyQueue(4, 3)
    with pytest.raises(ContractError):
        q.push(np.ones((2, 4)) / 2)
    with pytest.raises(ContractError):
        q.push(np.ones((2, 3)))
    with pytest.raises(ContractError):
        q.push(unit(np.ones((5, 3))))


def test_queue_roundtrip_sections():
    q = KeyQueue(4, 3).push(_rows([0, 1, 2]))
    back = KeyQueue.from_sections(q.sections())
    np.testing.assert_array_equal(back.ordered(), q.ordered())
    assert (back.head, back.filled) == (q.head, q.filled)


def test_encoder_outputs_unit_norm(rng):
    z = encode(init_encoder(0, 8, 16), rng.uniform(-1, 1, size=(5, 1, 16, 16))).numpy()
    assert z.shape == (5, 16)
    np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-6)


def _tiny_cfg(**kw):
    base = dict(K=8, n=4, dim=8, width=4, total_steps=10, tau=0.2, m=0.9)
    base.update(kw)
    return ContrastConfig(**base)


def test_step_requires_filled_queue(rng):
    cfg = _tiny_cfg()
    state = MocoState.create(cfg, 0, np.float64)
    with pytest.raises(StateError):
        moco_step(state, rng.uniform(-1, 1, size=(4, 1, 8, 8)), cfg, rng, 0.01)


def test_config_validation():
    with pytest.raises(ParameterError):
        ContrastConfig(K=10, n=4)
    with pytest.raises(ParameterError):
        ContrastConfig(tau=0)
    with pytest.raises(ParameterError):
        ContrastConfig(m=1.0)
    with pytest.raises(ParameterError):
        ContrastConfig(loss_mode="hybrid")


@pytest.mark.parametrize("mode", ["original", "improved"])
def test_step_loss_gradient_wrt_query_encoder(mode, rng):
    cfg = _tiny_cfg(loss_mode=mode)
    theta_q = init_encoder(1, 4, 8)
    view = rng.uniform(-1, 1, size=(4, 1, 8, 8))
    keys = encode(init_encoder(2, 4, 8), rng.uniform(-1, 1, size=(4, 1, 8, 8))).numpy()
    negatives = unit(rng.normal(size=(8, 8)))
    f = lambda p: contrast_loss(p, view, keys, negatives, cfg)
    assert tn.grad_check_params(f, theta_q, h=1e-6, per_tensor=4) <= 1e-4


def test_no_gradient_reaches_key_encoder(rng):
    cfg = _tiny_cfg()
    theta_q = init_encoder(1, 4, 8)
    theta_k = init_encoder(2, 4, 8)
    view_q = rng.uniform(-1, 1, size=(4, 1, 8, 8))
    view_k = rng.uniform(-1, 1, size=(4, 1, 8, 8))
    negatives = unit(rng.normal(size=(8, 8)))

    def query_grads(theta_k):
        keys = encode(theta_k, view_k).numpy()
        tracked = tn.leaves(theta_q)
        return tn.backward(contrast_loss(tracked, view_q, keys, negatives, cfg), tracked)

    base = query_grads(theta_k)
    bumped = {k: v.copy() for k, v in theta_k.items()}
    bumped["block1.conv.w"].flat[3] += 1e-7
    moved = query_grads(bumped)
    for k in base:
        np.testing.assert_allclose(moved[k], base[k], atol=1e-5)
    # keys enter as constants: tracking theta_k as leaves yields no gradient at all
    tracked_k = tn.leaves(theta_k)
    keys = encode(tracked_k, view_k).detach()
    tracked_q = tn.leaves(theta_q)
    grads = tn.backward(contrast_loss(tracked_q, view_q, keys.numpy(), negatives, cfg), {**tracked_q, **{f"k/{n}": t for n, t in tracked_k.items()}})
    assert all(not np.any(grads[f"k/{n}"]) for n in theta_k)


def test_training_modes_agree_for_single_sample_batches(rng):
    images = rng.uniform(-1, 1, size=(6, 1, 8, 8))
    runs = [train_moco(images, _tiny_cfg(n=1, K=2, loss_mode=m), seed=3, dtype=np.float64) for m in ("original", "improved")]
    assert [r[1] for r in runs[0].log] == pytest.approx([r[1] for r in runs[1].log], abs=1e-12)


def test_training_deterministic_and_queue_constant(rng):
    images = rng.uniform(-1, 1, size=(12, 1, 8, 8))
    cfg = _tiny_cfg()
    a = train_moco(images, cfg, seed=5)
    b = train_moco(images, cfg, seed=5)
    assert all(a.theta_q[k].tobytes() == b.theta_q[k].tobytes() for k in a.theta_q)
    assert a.queue.filled == cfg.K and a.queue.negatives().shape == (cfg.K, cfg.dim)
    warm = [r[3] for r in a.log]
    assert warm == [True] * (cfg.K // cfg.n) + [False] * (cfg.total_steps - cfg.K // cfg.n)


def test_resume_matches_uninterrupted(rng):
    images = rng.uniform(-1, 1, size=(12, 1, 8, 8))
    cfg = _tiny_cfg()
    full = train_moco(images, cfg, seed=1)
    half = train_moco(images, cfg, seed=1, until=5)
    resumed = train_moco(images, cfg, seed=1, state=MocoState.from_sections(half.sections(), cfg))
    for k in full.theta_q:
        assert full.theta_q[k].tobytes() == resumed.theta_q[k].tobytes()
        assert full.theta_k[k].tobytes() == resumed.theta_k[k].tobytes()
    np.testing.assert_array_equal(full.queue.ordered(), resumed.queue.ordered())


def test_too_few_images():
    with pytest.raises(ParameterError):
        train_moco(np.zeros((3, 1, 8, 8)), _tiny_cfg(), seed=0)
