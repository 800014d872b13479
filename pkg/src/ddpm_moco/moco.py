"""Momentum-contrast pretraining.

A query encoder is trained by gradient descent against keys from a slowly
moving copy of itself; past keys sit in a FIFO queue and serve as negatives.
Two losses are available: the per-sample InfoNCE loss (``"original"``) and a
batch-level variant (``"improved"``) that scores each query against every key
of its mini-batch.
"""

from __future__ import annotations

from collections.abc import Callable, Mapping
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .data import random_views
from .errors import ContractError, ParameterError, StateError
from .optim import SGD
from .schedule import LrSchedule
from .tensor import Tensor

GROUPS = 4
LOSS_MODES = ("original", "improved")


@dataclass(frozen=True)
class ContrastConfig:
    tau: float = 0.07
    m: float = 0.999
    K: int = 512
    n: int = 32
    loss_mode: str = "improved"
    dim: int = 64
    width: int = 16
    lr0: float = 0.03
    total_steps: int = 2000
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_granularity: str = "step"

    def __post_init__(self):
        if self.tau <= 0:
            raise ParameterError(f"tau must be positive, got {self.tau}")
        if not 0 <= self.m < 1:
            raise ParameterError(f"momentum coefficient must lie in [0, 1), got {self.m}")
        if self.n < 1 or self.K < self.n or self.K % self.n:
            raise ParameterError(f"queue size K={self.K} must be a positive multiple of batch n={self.n}")
        if self.loss_mode not in LOSS_MODES:
            raise ParameterError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")


# ---------------------------------------------------------------------------
# encoder


def encoder_shapes(width: int = 16, dim: int = 64) -> dict[str, tuple[int, ...]]:
    if width < 4 or width % GROUPS:
        raise ParameterError(f"encoder width must be a multiple of {GROUPS}, got {width}")
    chans = [1, width, 2 * width, 4 * width]
    shapes: dict[str, tuple[int, ...]] = {}
    for i in range(3):
        shapes[f"block{i}.conv.w"] = (chans[i + 1], chans[i], 3, 3)
        shapes[f"block{i}.conv.b"] = (chans[i + 1],)
        shapes[f"block{i}.norm.g"] = (chans[i + 1],)
        shapes[f"block{i}.norm.b"] = (chans[i + 1],)
    feat = chans[-1]
    shapes.update({"proj.fc1.w": (feat, feat), "proj.fc1.b": (feat,), "proj.fc2.w": (feat, dim), "proj.fc2.b": (dim,)})
    return shapes


def init_encoder(seed: int, width: int = 16, dim: int = 64, dtype=np.float64) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in encoder_shapes(width, dim).items():
        if name.endswith(".g"):
            value = np.ones(shape)
        elif len(shape) == 1:
            value = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            value = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        params[name] = value.astype(dtype)
    return params


def _tensors(params: Mapping[str, object]) -> Mapping[str, Tensor]:
    return {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}


def encoder_features(params: Mapping[str, object], x) -> Tensor:
    """Globally pooled trunk features, (n, 4*width)."""
    p = _tensors(params)
    h = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=p["block0.conv.w"].dtype))
    for i in range(3):
        h = tn.conv2d(h, p[f"block{i}.conv.w"], p[f"block{i}.conv.b"], padding=1)
        h = tn.silu(tn.group_norm(h, p[f"block{i}.norm.g"], p[f"block{i}.norm.b"], GROUPS))
        h = tn.avg_pool2x2(h)
    return tn.global_avg_pool(h)


def encode(params: Mapping[str, object], x) -> Tensor:
    """Unit-norm embeddings, (n, dim)."""
    p = _tensors(params)
    feats = encoder_features(p, x)
    hidden = tn.relu(feats @ p["proj.fc1.w"] + p["proj.fc1.b"])
    return tn.l2_normalize(hidden @ p["proj.fc2.w"] + p["proj.fc2.b"])


# ---------------------------------------------------------------------------
# losses


def _check_unit(x: Tensor, what: str) -> None:
    if x.shape[0] == 0:
        return
    norms = np.sqrt((np.asarray(x.data, dtype=np.float64) ** 2).sum(axis=-1))
    if np.abs(norms - 1.0).max() > 1e-3:
        raise ContractError(f"{what} rows must be unit-norm (max deviation {np.abs(norms - 1).max():.3g})")


def _prepare(q, k_pos, negatives, tau):
    if tau <= 0:
        raise ParameterError(f"tau must be positive, got {tau}")
    q = tn.tensor(q)
    k_pos, negatives = tn.tensor(k_pos), tn.tensor(negatives)
    if k_pos.shape != q.shape:
        raise ContractError(f"query shape {q.shape} and key shape {k_pos.shape} differ")
    if negatives.ndim != 2 or negatives.shape[1] != q.shape[1]:
        raise ContractError(f"negatives must be (K, {q.shape[1]}), got {negatives.shape}")
    for t, what in ((q, "query"), (k_pos, "positive key"), (negatives, "negative key")):
        _check_unit(t, what)
    return q, k_pos, negatives


def info_nce(q, k_pos, negatives, tau: float) -> Tensor:
    """Mean over queries of -log softmax of the positive among K+1 logits."""
    q, k_pos, negatives = _prepare(q, k_pos, negatives, tau)
    pos = tn.sum_(tn.mul(q, k_pos), axis=1, keepdims=True)
    logits = pos if negatives.shape[0] == 0 else tn.concat([pos, q @ tn.transpose(negatives, (1, 0))], axis=1)
    return tn.softmax_cross_entropy(tn.scale(logits, 1.0 / tau), np.zeros(q.shape[0], dtype=np.int64))


def batch_contrastive(q, k_pos, negatives, tau: float) -> Tensor:
    """Batch-level contrast: every (query b, key j) pair of the mini-batch forms its
    own (K+1)-way softmax with the queue negatives; the loss averages over b and j."""
    q, k_pos, negatives = _prepare(q, k_pos, negatives, tau)
    n = q.shape[0]
    pos = tn.scale(q @ tn.transpose(k_pos, (1, 0)), 1.0 / tau)  # (n, n)
    if negatives.shape[0] == 0:
        lse = pos
    else:
        neg = tn.scale(q @ tn.transpose(negatives, (1, 0)), 1.0 / tau)
        neg_lse = tn.reshape(tn.logsumexp(neg), (n, 1, 1)) + np.zeros((n, n, 1), dtype=pos.dtype)
        lse = tn.logsumexp(tn.concat([tn.reshape(pos, (n, n, 1)), neg_lse], axis=2))
    return tn.mean(lse - pos)


LOSSES: dict[str, Callable[..., Tensor]] = {"original": info_nce, "improved": batch_contrastive}


# ---------------------------------------------------------------------------
# queue and momentum


class KeyQueue:
    """Fixed-capacity FIFO ring of unit-norm key rows."""

    def __init__(self, capacity: int, width: int, dtype=np.float64):
        if capacity < 1 or width < 1:
            raise ParameterError("queue capacity and width must be positive")
        self.capacity = capacity
        self.width = width
        self.storage = np.zeros((capacity, width), dtype=dtype)
        self.head = 0
        self.filled = 0

    @property
    def full(self) -> bool:
        return self.filled == self.capacity

    def push(self, keys) -> KeyQueue:
        keys = np.asarray(keys.data if isinstance(keys, Tensor) else keys)
        if keys.ndim != 2 or keys.shape[1] != self.width:
            raise ContractError(f"keys must be (n, {self.width}), got {keys.shape}")
        n = keys.shape[0]
        if n > self.capacity:
            raise ContractError(f"cannot push {n} keys into a queue of capacity {self.capacity}")
        _check_unit(Tensor(keys), "queued key")
        rows = (self.head + np.arange(n)) % self.capacity
        self.storage[rows] = keys
        self.head = int((self.head + n) % self.capacity)
        self.filled = min(self.capacity, self.filled + n)
        return self

    def negatives(self) -> np.ndarray:
        """Stored rows (storage order); only the written prefix before the first wrap."""
        return self.storage if self.full else self.storage[: self.filled]

    def ordered(self) -> np.ndarray:
        """Stored rows from oldest to newest."""
        if not self.full:
            return self.storage[: self.filled].copy()
        return np.roll(self.storage, -self.head, axis=0)

    def sections(self, prefix: str = "queue") -> dict[str, np.ndarray]:
        return {
            f"{prefix}/storage": self.storage,
            f"{prefix}/head": np.array(float(self.head)),
            f"{prefix}/filled": np.array(float(self.filled)),
        }

    @classmethod
    def from_sections(cls, sections: Mapping[str, np.ndarray], prefix: str = "queue") -> KeyQueue:
        storage = sections[f"{prefix}/storage"]
        q = cls(storage.shape[0], storage.shape[1], storage.dtype)
        q.storage[:] = storage
        q.head = int(sections[f"{prefix}/head"])
        q.filled = int(sections[f"{prefix}/filled"])
        return q


def momentum_update(theta_k: Mapping[str, np.ndarray], theta_q: Mapping[str, np.ndarray], m: float) -> dict[str, np.ndarray]:
    """theta_k <- m * theta_k + (1 - m) * theta_q, tensor by tensor."""
    if not 0 <= m < 1:
        raise ParameterError(f"momentum coefficient must lie in [0, 1), got {m}")
    if theta_k.keys() != theta_q.keys():
        raise ContractError("key and query encoders have different parameter names")
    out = {}
    for name, k in theta_k.items():
        q = theta_q[name]
        if k.shape != q.shape:
            raise ContractError(f"shape mismatch for {name}: {k.shape} vs {q.shape}")
        out[name] = (m * k + (1.0 - m) * q).astype(k.dtype)
    return out


# ---------------------------------------------------------------------------
# training


@dataclass
class MocoState:
    theta_q: dict[str, np.ndarray]
    theta_k: dict[str, np.ndarray]
    queue: KeyQueue
    opt: SGD
    step: int = 0
    log: list[tuple[int, float, float, bool]] = field(default_factory=list)

    @classmethod
    def create(cls, cfg: ContrastConfig, seed: int, dtype=np.float32) -> MocoState:
        theta_q = init_encoder(seed, cfg.width, cfg.dim, dtype)
        theta_k = {k: v.copy() for k, v in theta_q.items()}
        return cls(theta_q, theta_k, KeyQueue(cfg.K, cfg.dim, dtype), SGD(theta_q, cfg.momentum, cfg.weight_decay))

    def sections(self) -> dict[str, np.ndarray]:
        out = {f"theta_q/{k}": v for k, v in self.theta_q.items()}
        out.update({f"theta_k/{k}": v for k, v in self.theta_k.items()})
        out.update(self.queue.sections())
        out.update(self.opt.state())
        out["step"] = np.array(float(self.step))
        return out

    @classmethod
    def from_sections(cls, s: Mapping[str, np.ndarray], cfg: ContrastConfig) -> MocoState:
        theta_q = {k[len("theta_q/") :]: v.copy() for k, v in s.items() if k.startswith("theta_q/")}
        theta_k = {k[len("theta_k/") :]: v.copy() for k, v in s.items() if k.startswith("theta_k/")}
        opt = SGD(theta_q, cfg.momentum, cfg.weight_decay)
        opt.load_state(s)
        return cls(theta_q, theta_k, KeyQueue.from_sections(s), opt, int(s["step"]))


def contrast_loss(theta_q: Mapping[str, object], view_q: np.ndarray, keys: np.ndarray, negatives: np.ndarray, cfg: ContrastConfig) -> Tensor:
    q = encode(theta_q, view_q)
    return LOSSES[cfg.loss_mode](q, Tensor(keys.astype(q.dtype)), Tensor(negatives.astype(q.dtype)), cfg.tau)


def moco_step(
    state: MocoState,
    images: np.ndarray,
    cfg: ContrastConfig,
    rng: np.random.Generator,
    lr: float,
    allow_partial: bool = False,
) -> float:
    """One pretraining step on a batch of raw images; updates ``state`` in place.

    Keys come from the momentum encoder with no gradient path. ``allow_partial``
    permits the warm-up steps that run before the queue has filled.
    """
    if not state.queue.full and not allow_partial:
        raise StateError(f"queue holds {state.queue.filled}/{state.queue.capacity} keys; warm up first")
    view_q = random_views(images, rng)
    view_k = random_views(images, rng)
    keys = encode(state.theta_k, view_k).numpy()
    tracked = tn.leaves(state.theta_q)
    loss = contrast_loss(tracked, view_q, keys, state.queue.negatives(), cfg)
    grads = tn.backward(loss, tracked)
    state.opt.step(state.theta_q, grads, lr)
    state.theta_k = momentum_update(state.theta_k, state.theta_q, cfg.m)
    state.queue.push(keys)
    state.step += 1
    return loss.item()


def train_moco(
    images: np.ndarray,
    cfg: ContrastConfig,
    seed: int = 0,
    state: MocoState | None = None,
    on_step: Callable[[int, float, float, bool], None] | None = None,
    until: int | None = None,
    dtype=np.float32,
) -> MocoState:
    """Run (or resume) pretraining to ``cfg.total_steps`` optimizer steps.

    The first K/n steps fill the queue; they are flagged as warm-up in the log.
    Mini-batches are drawn without replacement per epoch; a trailing partial
    batch is dropped. ``until`` stops early at that step count.
    """
    if images.shape[0] < cfg.n:
        raise ParameterError(f"need at least {cfg.n} images for a batch, got {images.shape[0]}")
    state = state or MocoState.create(cfg, seed, dtype)
    per_epoch = images.shape[0] // cfg.n
    sched = LrSchedule(cfg.lr0, cfg.total_steps, cfg.lr_granularity, per_epoch)
    images = images.astype(dtype)
    stop = cfg.total_steps if until is None else min(until, cfg.total_steps)
    while state.step < stop:
        epoch, offset = divmod(state.step, per_epoch)
        # one permutation per epoch, so a resumed run sees the same batches
        order = np.random.default_rng([seed, 1, epoch]).permutation(images.shape[0])
        idx = order[offset * cfg.n : (offset + 1) * cfg.n]
        rng = np.random.default_rng([seed, 2, state.step])
        lr = sched(state.step)
        warmup = not state.queue.full
        loss = moco_step(state, images[idx], cfg, rng, lr, allow_partial=warmup)
        state.log.append((state.step, loss, lr, warmup))
        if on_step is not None:
            on_step(state.step, loss, lr, warmup)
    return state
