"""Forward noising, the noise-prediction loss, and ancestral sampling."""

from __future__ import annotations

from collections.abc import Callable, Mapping
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .denoiser import denoise_forward, init_params
from .errors import ParameterError, ShapeError
from .optim import Adam
from .schedule import LrSchedule, NoiseSchedule, make_linear_schedule
from .tensor import Tensor

EpsFn = Callable[[np.ndarray, np.ndarray], np.ndarray]

SAMPLER_MODES = ("standard", "literal_eq3")
SIGMA_MODES = ("beta", "zero")


@dataclass(frozen=True)
class SamplerConfig:
    """``mode='standard'`` is the usual DDPM posterior mean; ``'literal_eq3'``
    divides by sqrt(a_bar_t) instead of sqrt(a_t). ``sigma_mode='beta'`` adds
    sqrt(beta_t) * z for t > 1, ``'zero'`` makes sampling deterministic."""

    mode: str = "standard"
    sigma_mode: str = "beta"

    def __post_init__(self):
        if self.mode not in SAMPLER_MODES:
            raise ParameterError(f"sampler mode must be one of {SAMPLER_MODES}, got {self.mode!r}")
        if self.sigma_mode not in SIGMA_MODES:
            raise ParameterError(f"sigma mode must be one of {SIGMA_MODES}, got {self.sigma_mode!r}")


def forward_iterative(x0: np.ndarray, t: int, rng: np.random.Generator, sched: NoiseSchedule, noise=None) -> np.ndarray:
    """Apply x_s = sqrt(a_s) x_{s-1} + sqrt(1 - a_s) eps_{s-1} for s = 1..t.

    ``noise`` (shape (t, *x0.shape)) replaces the draws from ``rng`` when given.
    """
    sched.check_step(t)
    x = np.array(x0, dtype=np.float64)
    for s in range(1, t + 1):
        eps = rng.standard_normal(x.shape) if noise is None else noise[s - 1]
        a = sched.a[s - 1]
        x = np.sqrt(a) * x + np.sqrt(1.0 - a) * eps
    return x


def forward_closed(x0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """sqrt(a_bar_t) x0 + sqrt(1 - a_bar_t) eps; ``t`` may be per batch element, t=0 gives x0."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if eps.shape != x0.shape:
        raise ShapeError(f"eps shape {eps.shape} differs from x0 shape {x0.shape}")
    sched.check_step(t, lo=0)
    ab = sched.a_bar_at(t)
    if ab.ndim:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    ab = ab.astype(x0.dtype) if np.issubdtype(x0.dtype, np.floating) else ab
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def ddpm_loss(params: Mapping[str, object], x0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule, denoise=None) -> Tensor:
    """Mean over batch and pixels of (eps - eps_theta(x_t, t))^2."""
    sched.check_step(t)
    x_t = forward_closed(x0, t, eps, sched)
    fwd = denoise or denoise_forward
    eps_hat = fwd(params, x_t, t, sched.T)
    return tn.mse(Tensor(np.asarray(eps, dtype=eps_hat.dtype)), eps_hat)


def sample_step(
    x_t: np.ndarray,
    t: int,
    eps_fn: EpsFn,
    sched: NoiseSchedule,
    cfg: SamplerConfig,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """One reverse step x_t -> x_{t-1}."""
    if t < 1 or t > sched.T:
        raise ParameterError(f"sampling step must lie in [1, {sched.T}], got {t}")
    n = x_t.shape[0]
    eps = eps_fn(x_t, np.full(n, t, dtype=np.int64))
    a, ab, beta = sched.a[t - 1], sched.a_bar[t - 1], sched.beta[t - 1]
    if cfg.mode == "standard":
        mean = (x_t - ((1.0 - a) / np.sqrt(1.0 - ab)) * eps) / np.sqrt(a)
    else:
        mean = x_t / np.sqrt(ab) - (np.sqrt(1.0 - ab) / np.sqrt(ab)) * eps
    if cfg.sigma_mode == "zero" or t == 1:
        return mean.astype(x_t.dtype)
    if rng is None:
        raise ParameterError("a random generator is required when sigma_mode='beta'")
    z = rng.standard_normal(x_t.shape)
    return (mean + np.sqrt(beta) * z).astype(x_t.dtype)


def sample(
    eps_fn: EpsFn,
    sched: NoiseSchedule,
    cfg: SamplerConfig,
    n: int,
    rng: np.random.Generator,
    size: int = 16,
    dtype=np.float64,
    return_raw: bool = False,
):
    """Ancestral sampling from x_T ~ N(0, I) down to x_0, clamped to [-1, 1] at the end.

    With ``return_raw`` the unclamped x_0 is returned alongside.
    """
    x = rng.standard_normal((n, 1, size, size)).astype(dtype)
    if n:
        for t in range(sched.T, 0, -1):
            x = sample_step(x, t, eps_fn, sched, cfg, rng)
    out = np.clip(x, -1.0, 1.0)
    return (out, x) if return_raw else out


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class DdpmConfig:
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    width: int = 16
    lr0: float = 1e-3
    total_steps: int = 2000
    batch: int = 16
    lr_granularity: str = "step"

    def __post_init__(self):
        if self.batch < 1 or self.total_steps < 1:
            raise ParameterError("batch and total_steps must be positive")
        if self.lr0 <= 0:
            raise ParameterError(f"lr0 must be positive, got {self.lr0}")

    def schedule(self) -> NoiseSchedule:
        return make_linear_schedule(self.T, self.beta_start, self.beta_end)


@dataclass
class DdpmState:
    params: dict[str, np.ndarray]
    opt: Adam
    sched: NoiseSchedule
    step: int = 0
    log: list[tuple[int, float, float]] = field(default_factory=list)

    @classmethod
    def create(cls, cfg: DdpmConfig, seed: int, dtype=np.float32) -> DdpmState:
        params = init_params(seed, cfg.width, dtype)
        return cls(params, Adam(params), cfg.schedule())

    def sections(self) -> dict[str, np.ndarray]:
        out = {f"params/{k}": v for k, v in self.params.items()}
        out.update(self.opt.state())
        out.update(self.sched.sections())
        out["step"] = np.array(float(self.step))
        return out

    @classmethod
    def from_sections(cls, s: Mapping[str, np.ndarray]) -> DdpmState:
        params = {k[len("params/") :]: v.copy() for k, v in s.items() if k.startswith("params/")}
        opt = Adam(params)
        opt.load_state(s)
        return cls(params, opt, NoiseSchedule.from_sections(s), int(s["step"]))


def train_ddpm(
    images: np.ndarray,
    cfg: DdpmConfig,
    seed: int = 0,
    state: DdpmState | None = None,
    on_step: Callable[[int, float, float], None] | None = None,
    until: int | None = None,
    dtype=np.float32,
) -> DdpmState:
    """Fit one unconditional denoiser to ``images`` (n, 1, H, W) for ``cfg.total_steps`` Adam steps.

    Each step draws t uniformly from 1..T and fresh noise per batch element.
    Batches and noise are keyed on (seed, step), so resuming reproduces an
    uninterrupted run exactly. ``until`` stops early at that step count.
    """
    n = images.shape[0]
    if n == 0:
        raise ParameterError("cannot train on an empty image set")
    batch = min(cfg.batch, n)
    per_epoch = n // batch
    state = state or DdpmState.create(cfg, seed, dtype)
    if state.sched.T != cfg.T:
        raise ParameterError(f"checkpoint schedule has T={state.sched.T}, config asks for {cfg.T}")
    lr_at = LrSchedule(cfg.lr0, cfg.total_steps, cfg.lr_granularity, per_epoch)
    images = images.astype(dtype)
    stop = cfg.total_steps if until is None else min(until, cfg.total_steps)
    while state.step < stop:
        epoch, offset = divmod(state.step, per_epoch)
        order = np.random.default_rng([seed, 1, epoch]).permutation(n)
        x0 = images[order[offset * batch : (offset + 1) * batch]]
        rng = np.random.default_rng([seed, 3, state.step])
        t = rng.integers(1, cfg.T + 1, size=batch)
        eps = rng.standard_normal(x0.shape).astype(dtype)
        tracked = tn.leaves(state.params)
        loss = ddpm_loss(tracked, x0, t, eps, state.sched)
        lr = lr_at(state.step)
        state.opt.step(state.params, tn.backward(loss, tracked), lr)
        state.step += 1
        state.log.append((state.step, loss.item(), lr))
        if on_step is not None:
            on_step(state.step, loss.item(), lr)
    return state
