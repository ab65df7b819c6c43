"""Multi-scale BEV fusion: concat -> 1x1 conv -> deformable attention -> residual MLP."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .params import ParamSet, uniform_init
from .tensor import ShapeError, Tensor

PREFIX = "fusion"


def init_deformable_params(params: ParamSet, prefix: str, channels: int, rng: np.random.Generator, points: int = 4, heads: int = 1) -> None:
    if channels % heads:
        raise ShapeError(f"{channels} channels do not split into {heads} heads")
    c = channels
    params.add(f"{prefix}.q.w", uniform_init(rng, (c, c), c))
    params.add(f"{prefix}.q.b", uniform_init(rng, (c,), c))
    # zero offset weights: sampling starts on a fixed ring around each query.
    # The ring is rotated half a step so that with four points it sits on the
    # diagonal half-cell positions, away from the bilinear kinks at whole cells.
    params.add(f"{prefix}.off.w", np.zeros((heads * points * 2, c)))
    ang = 2 * np.pi * (np.arange(points) + 0.5) / points
    radius = np.sqrt(0.5)
    ring = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1) if points > 1 else np.zeros((1, 2))
    params.add(f"{prefix}.off.b", np.tile(ring.reshape(-1), heads))
    params.add(f"{prefix}.attn.w", uniform_init(rng, (heads * points, c), c))
    params.add(f"{prefix}.attn.b", np.zeros(heads * points))
    params.add(f"{prefix}.v.w", uniform_init(rng, (c, c), c))
    params.add(f"{prefix}.v.b", uniform_init(rng, (c,), c))


def init_fusion_params(params: ParamSet, channels: int, scales: int, rng: np.random.Generator, points: int = 4, heads: int = 1) -> None:
    c = channels
    params.add(f"{PREFIX}.conv.w", uniform_init(rng, (c, scales * c, 1, 1), scales * c))
    params.add(f"{PREFIX}.conv.b", uniform_init(rng, (c,), scales * c))
    init_deformable_params(params, f"{PREFIX}.da", c, rng, points, heads)
    params.add(f"{PREFIX}.mlp.w1", uniform_init(rng, (c, c), c))
    params.add(f"{PREFIX}.mlp.b1", uniform_init(rng, (c,), c))
    params.add(f"{PREFIX}.mlp.w2", uniform_init(rng, (c, c), c))
    params.add(f"{PREFIX}.mlp.b2", uniform_init(rng, (c,), c))


def attention_weights(bev, params: ParamSet, prefix: str = f"{PREFIX}.da", heads: int = 1) -> tuple[Tensor, Tensor]:
    """Sampling offsets (N, heads, K, 2) and softmax weights (N, heads, K) per BEV location."""
    bev = T.as_tensor(bev)
    c, h, w = bev.shape
    x = T.transpose(T.reshape(bev, (c, h * w)), (1, 0))
    q = T.linear(x, params[f"{prefix}.q.w"], params[f"{prefix}.q.b"])
    off = T.linear(q, params[f"{prefix}.off.w"], params[f"{prefix}.off.b"])
    k = off.shape[1] // (2 * heads)
    logits = T.linear(q, params[f"{prefix}.attn.w"], params[f"{prefix}.attn.b"])
    return T.reshape(off, (h * w, heads, k, 2)), T.softmax(T.reshape(logits, (h * w, heads, k)), axis=-1)


def deformable_attention(bev, params: ParamSet, prefix: str = f"{PREFIX}.da", heads: int = 1) -> Tensor:
    """Each location attends to K bilinear samples at learned offsets (in cells).

    out(q) = sum_k A_k(q) * V(bev)(q + dp_k(q)), with A softmax-normalised over k.
    """
    bev = T.as_tensor(bev)
    c, h, w = bev.shape
    n = h * w
    offsets, weights = attention_weights(bev, params, prefix, heads)
    k = weights.shape[-1]
    x = T.transpose(T.reshape(bev, (c, n)), (1, 0))
    value = T.linear(x, params[f"{prefix}.v.w"], params[f"{prefix}.v.b"])  # (N, C)
    vmap = T.reshape(T.transpose(value, (1, 0)), (c, h, w))
    jj, ii = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    base = np.stack([ii.reshape(-1), jj.reshape(-1)], axis=1)  # (N, 2) as (u, v)
    ch = c // heads
    outs = []
    for hd in range(heads):
        pts = T.reshape(offsets[:, hd] + base[:, None, :], (n * k, 2))
        vh = vmap if heads == 1 else vmap[hd * ch : (hd + 1) * ch]
        samp, _ = T.bilinear_sample(vh, pts)  # (ch, N*K)
        samp = T.reshape(samp, (ch, n, k))
        outs.append(T.sum_(samp * weights[:, hd], axis=2))
    out = outs[0] if heads == 1 else T.concat(outs, axis=0)
    return T.reshape(out, (c, h, w))


def fuse_multiscale(maps: Sequence, params: ParamSet, heads: int = 1) -> Tensor:
    """MLP(DA(Conv(Concat(maps)))) + DA(Conv(Concat(maps))); the DA term is computed once."""
    maps = [T.as_tensor(m) for m in maps]
    shape = maps[0].shape[1:]
    for m in maps:
        if m.shape[1:] != shape:
            raise ShapeError(f"BEV maps disagree in spatial shape: {[mm.shape for mm in maps]}")
    x = maps[0] if len(maps) == 1 else T.concat(maps, axis=0)
    x = T.conv2d(x, params[f"{PREFIX}.conv.w"], params[f"{PREFIX}.conv.b"])
    y = deformable_attention(x, params, f"{PREFIX}.da", heads)
    c, h, w = y.shape
    yl = T.transpose(T.reshape(y, (c, h * w)), (1, 0))
    z = T.mlp(yl, params, f"{PREFIX}.mlp") + yl
    return T.reshape(T.transpose(z, (1, 0)), (c, h, w))
