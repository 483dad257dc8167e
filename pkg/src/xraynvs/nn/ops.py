"""Primitive layers with paired forward / backward implementations.

Forward functions ending in ``_fwd`` return ``(output, cache)``; the matching
``_bwd`` takes ``(cache, upstream)`` and returns input and parameter
gradients. Tensors are batched with a leading batch axis; token streams are
(B, N, D). Convenience wrappers without the suffix run forward-only.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

LN_EPS = 1e-6

# positional phases are defined on [0,1]-normalized coordinates; this fixed
# scale sets how many radians the lowest-frequency pair spans across the grid
POS_COORD_SCALE = 16.0


# ---------------------------------------------------------------------------
# elementwise activations


def silu_fwd(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s, (x, s)


def silu_bwd(cache, dy):
    x, s = cache
    return dy * s * (1.0 + x * (1.0 - s))


def silu(x):
    return silu_fwd(x)[0]


def gelu_fwd(x):
    phi = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    return x * phi, (x, phi)


def gelu_bwd(cache, dy):
    x, phi = cache
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return dy * (phi + x * pdf)


def gelu(x):
    return gelu_fwd(x)[0]


# ---------------------------------------------------------------------------
# affine / normalization


def linear_fwd(x, w, b):
    return x @ w + b, (x, w)


def linear_bwd(cache, dy):
    x, w = cache
    dx = dy @ w.T
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw = x2.T @ dy2
    db = dy2.sum(axis=0)
    return dx, dw, db


def layer_norm_fwd(x, eps=LN_EPS):
    """Per-token layer norm over the last axis, no learned affine."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat, (xhat, inv)


def layer_norm_bwd(cache, dy):
    xhat, inv = cache
    m1 = dy.mean(axis=-1, keepdims=True)
    m2 = (dy * xhat).mean(axis=-1, keepdims=True)
    return inv * (dy - m1 - xhat * m2)


def layer_norm(x, eps=LN_EPS):
    return layer_norm_fwd(x, eps)[0]


def modulate_fwd(xhat, shift, scale):
    """AdaLN modulation: xhat * (1 + scale) + shift, vectors broadcast over tokens."""
    return xhat * (1.0 + scale[:, None, :]) + shift[:, None, :], (xhat, scale)


def modulate_bwd(cache, dy):
    xhat, scale = cache
    dxhat = dy * (1.0 + scale[:, None, :])
    dscale = (dy * xhat).sum(axis=1)
    dshift = dy.sum(axis=1)
    return dxhat, dshift, dscale


# ---------------------------------------------------------------------------
# patch <-> token layout


def patchify(x, patch_size):
    """(B, C, G*p, G*p) -> (B, G*G, C*p*p), row-major patch order.

    Within a token the layout is channel-major then (py, px); unpatchify is
    the bitwise inverse.
    """
    b, c, hh, ww = x.shape
    p = patch_size
    if hh % p or ww % p:
        raise ValueError(f"spatial dims {(hh, ww)} not divisible by patch size {p}")
    gy, gx = hh // p, ww // p
    t = x.reshape(b, c, gy, p, gx, p)
    t = t.transpose(0, 2, 4, 1, 3, 5)
    return t.reshape(b, gy * gx, c * p * p)


def unpatchify(tokens, channels, patch_size):
    """(B, G*G, C*p*p) -> (B, C, G*p, G*p); inverse of :func:`patchify`."""
    b, n, d = tokens.shape
    p = patch_size
    g = int(round(math.sqrt(n)))
    if g * g != n or d != channels * p * p:
        raise ValueError(f"token matrix {tokens.shape} inconsistent with C={channels}, p={p}")
    t = tokens.reshape(b, g, g, channels, p, p)
    t = t.transpose(0, 3, 1, 4, 2, 5)
    return t.reshape(b, channels, g * p, g * p)


# ---------------------------------------------------------------------------
# embeddings


def sincos_pos_embed(grid: int, model_dim: int) -> np.ndarray:
    """2D sine-cosine positional table, (grid*grid, model_dim).

    Coordinates are normalized to [0, 1] per axis (align-corners), so the
    same physical corner maps to the same phase at every grid size -- the
    property the weak-to-strong interpolation relies on. Row layout per axis:
    [sin(w_k y)..., cos(w_k y)..., sin(w_k x)..., cos(w_k x)...].
    """
    if model_dim % 4:
        raise ValueError(f"model_dim must be divisible by 4, got {model_dim}")
    quarter = model_dim // 4
    freqs = POS_COORD_SCALE / (10000.0 ** (np.arange(quarter) / quarter))
    coords = np.zeros(grid) if grid == 1 else np.arange(grid) / (grid - 1)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")

    def axis_embed(pos):
        ang = pos.reshape(-1, 1) * freqs[None, :]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    return np.concatenate([axis_embed(yy), axis_embed(xx)], axis=1)


def interpolate_pos_embed(pe_lr: np.ndarray, grid_hr: int) -> np.ndarray:
    """Bilinear align-corners resampling of a (g*g, d) positional table.

    The four corners copy exactly; grid_hr == grid_lr returns the input
    unchanged (bitwise).
    """
    n, d = pe_lr.shape
    g = int(round(math.sqrt(n)))
    if g * g != n:
        raise ValueError(f"positional table of {n} rows is not a square grid")
    if grid_hr < g:
        raise ValueError(f"cannot interpolate down: {g} -> {grid_hr}")
    field = pe_lr.reshape(g, g, d)
    if g == 1:
        return np.broadcast_to(field[0, 0], (grid_hr * grid_hr, d)).copy()
    src = np.arange(grid_hr) * ((g - 1) / (grid_hr - 1)) if grid_hr > 1 else np.zeros(1)
    i0 = np.minimum(np.floor(src).astype(np.int64), g - 2)
    f = src - i0
    out = np.empty((grid_hr, grid_hr, d))
    for r in range(grid_hr):
        ry, fy = i0[r], f[r]
        row0 = field[ry] * (1.0 - fy) + field[ry + 1] * fy
        out[r] = row0[i0] * (1.0 - f)[:, None] + row0[i0 + 1] * f[:, None]
    return out.reshape(grid_hr * grid_hr, d)


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding of (possibly fractional) timesteps, (B, dim)."""
    if dim % 2:
        raise ValueError(f"timestep embedding dim must be even, got {dim}")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = 1.0 / (10000.0 ** (np.arange(half) / half))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


# ---------------------------------------------------------------------------
# attention


def _split_heads(x, heads):
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def attention_core_fwd(q, k, v, heads):
    """Scaled dot-product attention on projected (B, N, D) tensors.

    Contractions use batched matmul (BLAS) rather than einsum; at a few
    hundred tokens that is the difference between GEMM and naive loops.
    """
    d = q.shape[-1]
    if d % heads:
        raise ValueError(f"model dim {d} not divisible by {heads} heads")
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    scale = 1.0 / math.sqrt(d // heads)
    logits = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    logits -= logits.max(axis=-1, keepdims=True)  # stable softmax
    expl = np.exp(logits)
    attn = expl / expl.sum(axis=-1, keepdims=True)
    out = attn @ vh
    return _merge_heads(out), (qh, kh, vh, attn, scale)


def attention_core_bwd(cache, dy):
    qh, kh, vh, attn, scale = cache
    heads = qh.shape[1]
    do = _split_heads(dy, heads)
    dattn = do @ vh.transpose(0, 1, 3, 2)
    dv = attn.transpose(0, 1, 3, 2) @ do
    tmp = (dattn * attn).sum(axis=-1, keepdims=True)
    dlogits = attn * (dattn - tmp)
    dq = (dlogits @ kh) * scale
    dk = dlogits.transpose(0, 1, 3, 2) @ qh * scale
    return _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)


def attn_self_fwd(x, qkv_w, qkv_b, out_w, out_b, heads):
    """Self-attention with fused QKV projection, (B, N, D) -> (B, N, D)."""
    qkv, c_in = linear_fwd(x, qkv_w, qkv_b)
    d = x.shape[-1]
    q, k, v = qkv[..., :d], qkv[..., d : 2 * d], qkv[..., 2 * d :]
    core, c_core = attention_core_fwd(q, k, v, heads)
    out, c_out = linear_fwd(core, out_w, out_b)
    return out, (c_in, c_core, c_out, d)


def attn_self_bwd(cache, dy):
    c_in, c_core, c_out, d = cache
    dcore, dout_w, dout_b = linear_bwd(c_out, dy)
    dq, dk, dv = attention_core_bwd(c_core, dcore)
    dqkv = np.concatenate([dq, dk, dv], axis=-1)
    dx, dqkv_w, dqkv_b = linear_bwd(c_in, dqkv)
    return dx, {"qkv_w": dqkv_w, "qkv_b": dqkv_b, "out_w": dout_w, "out_b": dout_b}


def attn_cross_fwd(x, ctx, q_w, q_b, kv_w, kv_b, out_w, out_b, heads):
    """Cross-attention: queries from the stream, keys/values from ctx tokens."""
    q, c_q = linear_fwd(x, q_w, q_b)
    kv, c_kv = linear_fwd(ctx, kv_w, kv_b)
    d = q.shape[-1]
    k, v = kv[..., :d], kv[..., d:]
    core, c_core = attention_core_fwd(q, k, v, heads)
    out, c_out = linear_fwd(core, out_w, out_b)
    return out, (c_q, c_kv, c_core, c_out, d)


def attn_cross_bwd(cache, dy):
    c_q, c_kv, c_core, c_out, d = cache
    dcore, dout_w, dout_b = linear_bwd(c_out, dy)
    dq, dk, dv = attention_core_bwd(c_core, dcore)
    dx, dq_w, dq_b = linear_bwd(c_q, dq)
    dkv = np.concatenate([dk, dv], axis=-1)
    dctx, dkv_w, dkv_b = linear_bwd(c_kv, dkv)
    grads = {"q_w": dq_w, "q_b": dq_b, "kv_w": dkv_w, "kv_b": dkv_b, "out_w": dout_w, "out_b": dout_b}
    return dx, dctx, grads


def attention(q_tokens, kv_tokens, params: dict, heads: int):
    """Projected multi-head attention on (N, D) token matrices.

    ``params`` holds q_w/q_b (queries), kv_w/kv_b (fused keys+values) and
    out_w/out_b. Self-attention is the case where both token arguments are
    the same matrix. Attention weight rows sum to 1 by construction.
    """
    out, _ = attn_cross_fwd(
        q_tokens[None],
        kv_tokens[None],
        params["q_w"],
        params["q_b"],
        params["kv_w"],
        params["kv_b"],
        params["out_w"],
        params["out_b"],
        heads,
    )
    return out[0]
