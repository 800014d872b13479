"""Noise estimator: a two-level U-Net with sinusoidal time conditioning and a
linear-attention bottleneck.

Parameters live in a flat ``dict[str, np.ndarray]``; the forward pass accepts
either that store or the same names mapped to :class:`Tensor` leaves.
"""

from __future__ import annotations

from collections.abc import Mapping

import numpy as np

from . import tensor as tn
from .errors import ParameterError, ShapeError
from .tensor import Tensor

SUPPORTED_SIZES = (8, 16, 32)
GROUPS = 4
HEADS = 4


def time_embed(t, dim: int, max_t: int = 1000) -> np.ndarray:
    """Sinusoidal embedding, (n,) steps -> (n, dim); even slots sin, odd slots cos."""
    if dim % 2:
        raise ParameterError(f"embedding width must be even, got {dim}")
    t = np.atleast_1d(np.asarray(t))
    if t.size and (t.min() < 1 or t.max() > max_t):
        raise ParameterError(f"time step must lie in [1, {max_t}]")
    freqs = 10000.0 ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    angles = t.astype(np.float64)[:, None] * freqs[None, :]
    out = np.empty((t.size, dim))
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out


def _widths(width_base: int) -> dict[str, int]:
    return {"c": width_base, "sin": 2 * width_base, "time": 4 * width_base}


def _block_shapes(name: str, cin: int, cout: int, tdim: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{name}.conv1.w": (cout, cin, 3, 3),
        f"{name}.conv1.b": (cout,),
        f"{name}.norm1.g": (cout,),
        f"{name}.norm1.b": (cout,),
        f"{name}.temb.w": (tdim, cout),
        f"{name}.temb.b": (cout,),
        f"{name}.conv2.w": (cout, cout, 3, 3),
        f"{name}.conv2.b": (cout,),
        f"{name}.norm2.g": (cout,),
        f"{name}.norm2.b": (cout,),
    }


def param_shapes(width_base: int = 16) -> dict[str, tuple[int, ...]]:
    """Declared shape of every denoiser parameter, in a fixed order."""
    if width_base < 4 or width_base % GROUPS:
        raise ParameterError(f"width_base must be a multiple of {GROUPS} and >= 4, got {width_base}")
    w = _widths(width_base)
    c, td = w["c"], w["time"]
    shapes: dict[str, tuple[int, ...]] = {
        "time.fc1.w": (w["sin"], td),
        "time.fc1.b": (td,),
        "time.fc2.w": (td, td),
        "time.fc2.b": (td,),
        "in_conv.w": (c, 1, 3, 3),
        "in_conv.b": (c,),
    }
    shapes.update(_block_shapes("down0", c, c, td))
    shapes.update(_block_shapes("down1", c, 2 * c, td))
    shapes.update(_block_shapes("mid", 2 * c, 2 * c, td))
    for proj in ("q", "k", "v", "out"):
        shapes[f"attn.{proj}.w"] = (2 * c, 2 * c)
    shapes["attn.out.b"] = (2 * c,)
    # up-block input = upsampled channels from below + skip channels
    shapes.update(_block_shapes("up1", 2 * c + 2 * c, 2 * c, td))
    shapes.update(_block_shapes("up0", 2 * c + c, c, td))
    shapes["out_conv.w"] = (1, c, 3, 3)
    shapes["out_conv.b"] = (1,)
    return shapes


def init_params(seed: int, width_base: int = 16, dtype=np.float64) -> dict[str, np.ndarray]:
    """He-normal weights, unit norm scales, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(width_base).items():
        if name.endswith(".g"):
            value = np.ones(shape)
        elif len(shape) == 1:
            value = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            value = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        params[name] = value.astype(dtype)
    return params


def width_of(params: Mapping[str, object]) -> int:
    return int(params["in_conv.b"].shape[0])  # type: ignore[union-attr]


def linear_attention(tokens: Tensor, wq, wk, wv, heads: int = HEADS) -> Tensor:
    """Efficient (linear) attention over (n, L, c) tokens, before the output projection.

    Queries are softmax-normalized over channels, keys over tokens; the
    (d x d) key-value context is formed first, so cost is linear in L.
    """
    n, L, c = tokens.shape
    if c % heads:
        raise ShapeError(f"{c} channels not divisible by {heads} heads")
    d = c // heads

    def split(x: Tensor) -> Tensor:
        return tn.transpose(tn.reshape(x, (n, L, heads, d)), (0, 2, 1, 3))  # n, h, L, d

    q = tn.softmax(split(tokens @ wq))
    k = tn.softmax(tn.transpose(split(tokens @ wk), (0, 1, 3, 2)))  # n, h, d, L
    v = split(tokens @ wv)
    out = q @ (k @ v)
    return tn.reshape(tn.transpose(out, (0, 2, 1, 3)), (n, L, c))


def attention_sublayer(p: Mapping[str, Tensor], x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    tokens = tn.transpose(tn.reshape(x, (n, c, h * w)), (0, 2, 1))
    mixed = linear_attention(tokens, p["attn.q.w"], p["attn.k.w"], p["attn.v.w"])
    projected = mixed @ p["attn.out.w"] + p["attn.out.b"]
    return tn.reshape(tn.transpose(projected, (0, 2, 1)), (n, c, h, w))


def _block(p: Mapping[str, Tensor], name: str, x: Tensor, temb: Tensor) -> Tensor:
    h = tn.conv2d(x, p[f"{name}.conv1.w"], p[f"{name}.conv1.b"], padding=1)
    h = tn.group_norm(h, p[f"{name}.norm1.g"], p[f"{name}.norm1.b"], GROUPS)
    bias = temb @ p[f"{name}.temb.w"] + p[f"{name}.temb.b"]
    h = tn.silu(h + tn.reshape(bias, (bias.shape[0], bias.shape[1], 1, 1)))
    h = tn.conv2d(h, p[f"{name}.conv2.w"], p[f"{name}.conv2.b"], padding=1)
    h = tn.group_norm(h, p[f"{name}.norm2.g"], p[f"{name}.norm2.b"], GROUPS)
    return tn.silu(h)


def _as_tensors(params: Mapping[str, object]) -> Mapping[str, Tensor]:
    if all(isinstance(v, Tensor) for v in params.values()):
        return params  # type: ignore[return-value]
    return {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}


def denoise_forward(params: Mapping[str, object], x_t, t, max_t: int = 1000) -> Tensor:
    """Predict the injected noise for a batch ``x_t`` of shape (n, 1, H, W) at steps ``t``."""
    p = _as_tensors(params)
    dtype = p["in_conv.w"].dtype
    x = x_t if isinstance(x_t, Tensor) else Tensor(np.asarray(x_t, dtype=dtype))
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeError(f"expected (n, 1, H, W), got {x.shape}")
    if x.shape[2] != x.shape[3] or x.shape[2] not in SUPPORTED_SIZES:
        raise ParameterError(f"unsupported resolution {x.shape[2]}x{x.shape[3]}; use one of {SUPPORTED_SIZES}")
    n = x.shape[0]
    t = np.broadcast_to(np.asarray(t), (n,))
    sin_dim = p["time.fc1.w"].shape[0]
    emb = Tensor(time_embed(t, sin_dim, max_t).astype(dtype))
    temb = tn.silu(emb @ p["time.fc1.w"] + p["time.fc1.b"])
    temb = tn.silu(temb @ p["time.fc2.w"] + p["time.fc2.b"])

    h = tn.conv2d(x, p["in_conv.w"], p["in_conv.b"], padding=1)
    skip0 = _block(p, "down0", h, temb)
    skip1 = _block(p, "down1", tn.avg_pool2x2(skip0), temb)
    h = _block(p, "mid", tn.avg_pool2x2(skip1), temb)
    h = h + attention_sublayer(p, h)
    h = _block(p, "up1", tn.concat([tn.upsample2x(h), skip1], axis=1), temb)
    h = _block(p, "up0", tn.concat([tn.upsample2x(h), skip0], axis=1), temb)
    return tn.conv2d(h, p["out_conv.w"], p["out_conv.b"], padding=1)


def denoiser_fn(params: Mapping[str, np.ndarray], max_t: int = 1000):
    """Close over a parameter store: ``(x_t, t) -> eps_hat`` as an array."""
    p = _as_tensors(params)

    def eps_fn(x_t: np.ndarray, t) -> np.ndarray:
        return denoise_forward(p, x_t, t, max_t).numpy()

    return eps_fn
