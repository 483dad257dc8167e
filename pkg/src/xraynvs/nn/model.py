"""View-conditioned diffusion transformer: forward pass and exact gradients.

Architecture (DiT lineage, pre-norm blocks, desk scale):

- the source latent is channel-concatenated with the noised target latent,
  patchified, linearly embedded, and summed with a trainable positional table
  (sine-cosine initialized on [0,1]-normalized coordinates);
- one shared AdaLN computation maps the timestep embedding to a global
  6-tuple of modulation vectors (shift/scale/gate for the attention branches,
  shift/scale/gate for the MLP); every block adds its own learned offsets to
  that tuple rather than running a per-block modulation MLP. Self- and
  cross-attention share the first triple; cross-attention reads
  keys/values from the projected condition tokens;
- condition tokens are source-image patch embeddings plus one relative-view
  token, mapped into the model width by one shared projection;
- the final layer is a modulated linear head (its shift/scale are the global
  tuple's first two entries plus learned offsets), unpatchified back to the
  latent shape.

``vcdit_forward(..., want_cache=True)`` retains every intermediate needed by
``vcdit_backward``, which returns exact reverse-mode gradients for all named
parameters and for the inputs.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from xraynvs.nn import ops


@dataclass(frozen=True)
class ModelConfig:
    grid: int
    model_dim: int
    heads: int
    blocks: int
    cond_dim: int
    latent_channels: int = 4
    patch_size: int = 2
    cond_tokens_count: int = 16
    cond_image_size: int = 32
    t_freq_dim: int = 64
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")
        if self.model_dim % 4:
            raise ValueError("model_dim must be divisible by 4 for sincos embeddings")
        if self.t_freq_dim % 2:
            raise ValueError("t_freq_dim must be even")
        side = int(round(math.sqrt(self.cond_tokens_count)))
        if side * side != self.cond_tokens_count:
            raise ValueError("cond_tokens_count must be a perfect square")
        if self.cond_image_size % side:
            raise ValueError("cond_image_size must be divisible by sqrt(cond_tokens_count)")
        if min(self.grid, self.model_dim, self.heads, self.blocks, self.cond_dim, self.patch_size) < 1:
            raise ValueError("all config fields must be positive")

    @property
    def latent_side(self) -> int:
        return self.grid * self.patch_size

    @property
    def tokens(self) -> int:
        return self.grid * self.grid

    @property
    def cond_patch(self) -> int:
        return self.cond_image_size // int(round(math.sqrt(self.cond_tokens_count)))


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Name -> shape map for every learnable array, in canonical order."""
    d = cfg.model_dim
    in_dim = 2 * cfg.latent_channels * cfg.patch_size**2
    out_dim = cfg.latent_channels * cfg.patch_size**2
    m = cfg.mlp_ratio * d
    shapes: dict[str, tuple] = {
        "patch_embed.w": (in_dim, d),
        "patch_embed.b": (d,),
        "pos_embed": (cfg.tokens, d),
        "t_mlp.w1": (cfg.t_freq_dim, d),
        "t_mlp.b1": (d,),
        "t_mlp.w2": (d, d),
        "t_mlp.b2": (d,),
        "adaln_single.w": (d, 6 * d),
        "adaln_single.b": (6 * d,),
        "cond_projection.w": (cfg.cond_dim, d),
        "cond_projection.b": (d,),
        "cond_image.w": (cfg.cond_patch**2, cfg.cond_dim),
        "cond_image.b": (cfg.cond_dim,),
        "cond_view.w": (4, cfg.cond_dim),
        "cond_view.b": (cfg.cond_dim,),
        "null_cond_tokens": (cfg.cond_tokens_count + 1, cfg.cond_dim),
        "final.mod_offsets": (2, d),
        "final.w": (d, out_dim),
        "final.b": (out_dim,),
    }
    for i in range(cfg.blocks):
        b = f"block{i}"
        shapes[f"{b}.adaln_offsets"] = (6, d)
        shapes[f"{b}.self.qkv_w"] = (d, 3 * d)
        shapes[f"{b}.self.qkv_b"] = (3 * d,)
        shapes[f"{b}.self.out_w"] = (d, d)
        shapes[f"{b}.self.out_b"] = (d,)
        shapes[f"{b}.cross.q_w"] = (d, d)
        shapes[f"{b}.cross.q_b"] = (d,)
        shapes[f"{b}.cross.kv_w"] = (d, 2 * d)
        shapes[f"{b}.cross.kv_b"] = (2 * d,)
        shapes[f"{b}.cross.out_w"] = (d, d)
        shapes[f"{b}.cross.out_b"] = (d,)
        shapes[f"{b}.mlp.w1"] = (d, m)
        shapes[f"{b}.mlp.b1"] = (m,)
        shapes[f"{b}.mlp.w2"] = (m, d)
        shapes[f"{b}.mlp.b2"] = (d,)
    return shapes


def _zero_initialized(name: str) -> bool:
    # biases, plus the DiT-style stable start: modulation tables and the
    # output head at zero so the untrained network predicts zero noise
    last = name.split(".")[-1]
    if last.startswith("b") or last.endswith("_b"):
        return True
    return name in ("adaln_single.w", "final.mod_offsets", "final.w") or last == "adaln_offsets"


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Deterministic parameter init: N(0, 0.02) weights, zeros for biases and
    all modulation tables, sine-cosine positional table."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        if name == "pos_embed":
            params[name] = ops.sincos_pos_embed(cfg.grid, cfg.model_dim)
        elif _zero_initialized(name):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, 0.02, size=shape)
    return params


def _batched(z):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 3:
        return z[None], True
    if z.ndim == 4:
        return z, False
    raise ValueError(f"latent must be (C,H,W) or (B,C,H,W), got shape {z.shape}")


def adaln_single(params: dict, t_vec: np.ndarray, want_cache: bool = False):
    """Shared AdaLN computation: sinusoidal t embedding -> global 6-tuple.

    t_vec is the (B, t_freq_dim) sinusoidal embedding; output is (B, 6, D).
    Blocks add their per-block learned offsets to this single shared result.
    """
    t_vec = np.atleast_2d(np.asarray(t_vec, dtype=np.float64))
    a1, c_l1 = ops.linear_fwd(t_vec, params["t_mlp.w1"], params["t_mlp.b1"])
    h1, c_s1 = ops.silu_fwd(a1)
    e, c_l2 = ops.linear_fwd(h1, params["t_mlp.w2"], params["t_mlp.b2"])
    se, c_s2 = ops.silu_fwd(e)
    g6, c_l3 = ops.linear_fwd(se, params["adaln_single.w"], params["adaln_single.b"])
    d = params["t_mlp.w1"].shape[1]
    glob = g6.reshape(-1, 6, d)
    if want_cache:
        return glob, (c_l1, c_s1, c_l2, c_s2, c_l3)
    return glob


def _adaln_single_bwd(cache, dglob):
    c_l1, c_s1, c_l2, c_s2, c_l3 = cache
    dg6 = dglob.reshape(dglob.shape[0], -1)
    dse, dad_w, dad_b = ops.linear_bwd(c_l3, dg6)
    de = ops.silu_bwd(c_s2, dse)
    dh1, dw2, db2 = ops.linear_bwd(c_l2, de)
    da1 = ops.silu_bwd(c_s1, dh1)
    _, dw1, db1 = ops.linear_bwd(c_l1, da1)
    return {
        "t_mlp.w1": dw1,
        "t_mlp.b1": db1,
        "t_mlp.w2": dw2,
        "t_mlp.b2": db2,
        "adaln_single.w": dad_w,
        "adaln_single.b": dad_b,
    }


def vcdit_forward_tokens(params, cfg: ModelConfig, tokens, cond_tokens, t, want_cache=False):
    """Token-level forward: raw patch tokens (B, N, 2*C*p^2) -> head tokens.

    Exposed separately so permutation/positional behavior can be probed
    without going through patchify.
    """
    b = tokens.shape[0]
    h_emb, c_pe = ops.linear_fwd(tokens, params["patch_embed.w"], params["patch_embed.b"])
    h = h_emb + params["pos_embed"][None]

    t_arr = np.asarray(t, dtype=np.float64).reshape(-1)
    if np.any(t_arr < 1.0):
        raise ValueError(f"timesteps must be >= 1, got {t_arr.min()}")
    if t_arr.size == 1 and b > 1:
        t_arr = np.full(b, t_arr[0])
    t_vec = ops.timestep_embedding(t_arr, cfg.t_freq_dim)
    glob, c_ad = adaln_single(params, t_vec, want_cache=True)

    pc, c_cp = ops.linear_fwd(cond_tokens, params["cond_projection.w"], params["cond_projection.b"])

    blk_caches = []
    for i in range(cfg.blocks):
        p = f"block{i}"
        mod = glob + params[f"{p}.adaln_offsets"][None]
        sh1, sc1, g1 = mod[:, 0], mod[:, 1], mod[:, 2]
        sh2, sc2, g2 = mod[:, 3], mod[:, 4], mod[:, 5]

        xh1, c_ln1 = ops.layer_norm_fwd(h)
        u1, c_m1 = ops.modulate_fwd(xh1, sh1, sc1)
        sa, c_sa = ops.attn_self_fwd(
            u1, params[f"{p}.self.qkv_w"], params[f"{p}.self.qkv_b"],
            params[f"{p}.self.out_w"], params[f"{p}.self.out_b"], cfg.heads,
        )
        h = h + g1[:, None, :] * sa

        xh2, c_ln2 = ops.layer_norm_fwd(h)
        u2, c_m2 = ops.modulate_fwd(xh2, sh1, sc1)
        ca, c_ca = ops.attn_cross_fwd(
            u2, pc, params[f"{p}.cross.q_w"], params[f"{p}.cross.q_b"],
            params[f"{p}.cross.kv_w"], params[f"{p}.cross.kv_b"],
            params[f"{p}.cross.out_w"], params[f"{p}.cross.out_b"], cfg.heads,
        )
        h = h + g1[:, None, :] * ca

        xh3, c_ln3 = ops.layer_norm_fwd(h)
        u3, c_m3 = ops.modulate_fwd(xh3, sh2, sc2)
        a1, c_f1 = ops.linear_fwd(u3, params[f"{p}.mlp.w1"], params[f"{p}.mlp.b1"])
        ag, c_g = ops.gelu_fwd(a1)
        mo, c_f2 = ops.linear_fwd(ag, params[f"{p}.mlp.w2"], params[f"{p}.mlp.b2"])
        h = h + g2[:, None, :] * mo

        blk_caches.append((c_ln1, c_m1, c_sa, sa, g1, c_ln2, c_m2, c_ca, ca, c_ln3, c_m3, c_f1, c_g, c_f2, mo, g2))

    xhf, c_lnf = ops.layer_norm_fwd(h)
    fsh = params["final.mod_offsets"][0][None] + glob[:, 0]
    fsc = params["final.mod_offsets"][1][None] + glob[:, 1]
    uf, c_mf = ops.modulate_fwd(xhf, fsh, fsc)
    y, c_fin = ops.linear_fwd(uf, params["final.w"], params["final.b"])

    if not want_cache:
        return y
    cache = {
        "c_pe": c_pe,
        "c_ad": c_ad,
        "c_cp": c_cp,
        "blocks": blk_caches,
        "c_lnf": c_lnf,
        "c_mf": c_mf,
        "c_fin": c_fin,
        "batch": b,
    }
    return y, cache


def _vcdit_backward_tokens(params, cfg: ModelConfig, cache, dy):
    """Reverse of :func:`vcdit_forward_tokens`; returns (param grads, dtokens, dcond)."""
    grads = {name: None for name in params}
    b = cache["batch"]
    d = cfg.model_dim
    dglob = np.zeros((b, 6, d))

    duf, dfw, dfb = ops.linear_bwd(cache["c_fin"], dy)
    grads["final.w"], grads["final.b"] = dfw, dfb
    dxhf, dfsh, dfsc = ops.modulate_bwd(cache["c_mf"], duf)
    grads["final.mod_offsets"] = np.stack([dfsh.sum(axis=0), dfsc.sum(axis=0)])
    dglob[:, 0] += dfsh
    dglob[:, 1] += dfsc
    dh = ops.layer_norm_bwd(cache["c_lnf"], dxhf)

    dpc = None
    for i in reversed(range(cfg.blocks)):
        p = f"block{i}"
        c_ln1, c_m1, c_sa, sa, g1, c_ln2, c_m2, c_ca, ca, c_ln3, c_m3, c_f1, c_g, c_f2, mo, g2 = cache["blocks"][i]

        # mlp branch
        dmo = dh * g2[:, None, :]
        dg2 = (dh * mo).sum(axis=1)
        dag, dw2, db2 = ops.linear_bwd(c_f2, dmo)
        da1 = ops.gelu_bwd(c_g, dag)
        du3, dw1, db1 = ops.linear_bwd(c_f1, da1)
        grads[f"{p}.mlp.w1"], grads[f"{p}.mlp.b1"] = dw1, db1
        grads[f"{p}.mlp.w2"], grads[f"{p}.mlp.b2"] = dw2, db2
        dxh3, dsh2, dsc2 = ops.modulate_bwd(c_m3, du3)
        dh = dh + ops.layer_norm_bwd(c_ln3, dxh3)

        # cross-attention branch
        dca = dh * g1[:, None, :]
        dg1 = (dh * ca).sum(axis=1)
        du2, dpc_i, gc = ops.attn_cross_bwd(c_ca, dca)
        for k, v in gc.items():
            grads[f"{p}.cross.{k}"] = v
        dpc = dpc_i if dpc is None else dpc + dpc_i
        dxh2, dsh1, dsc1 = ops.modulate_bwd(c_m2, du2)
        dh = dh + ops.layer_norm_bwd(c_ln2, dxh2)

        # self-attention branch (gate g1 is shared with the cross branch)
        dsa = dh * g1[:, None, :]
        dg1 = dg1 + (dh * sa).sum(axis=1)
        du1, gs = ops.attn_self_bwd(c_sa, dsa)
        for k, v in gs.items():
            grads[f"{p}.self.{k}"] = v
        dxh1, dsh1_b, dsc1_b = ops.modulate_bwd(c_m1, du1)
        dsh1 = dsh1 + dsh1_b
        dsc1 = dsc1 + dsc1_b
        dh = dh + ops.layer_norm_bwd(c_ln1, dxh1)

        dmod = np.stack([dsh1, dsc1, dg1, dsh2, dsc2, dg2], axis=1)
        grads[f"{p}.adaln_offsets"] = dmod.sum(axis=0)
        dglob += dmod

    if dpc is None:  # unreachable with blocks >= 1, kept for safety
        ct, cp_w = cache["c_cp"]
        dpc = np.zeros(ct.shape[:-1] + (cp_w.shape[1],))
    dcond, dcp_w, dcp_b = ops.linear_bwd(cache["c_cp"], dpc)
    grads["cond_projection.w"], grads["cond_projection.b"] = dcp_w, dcp_b

    grads.update(_adaln_single_bwd(cache["c_ad"], dglob))

    grads["pos_embed"] = dh.sum(axis=0)
    dtokens, dpe_w, dpe_b = ops.linear_bwd(cache["c_pe"], dh)
    grads["patch_embed.w"], grads["patch_embed.b"] = dpe_w, dpe_b

    for name in params:
        if grads[name] is None:
            grads[name] = np.zeros_like(params[name])
    return grads, dtokens, dcond


def vcdit_forward(params, cfg: ModelConfig, z_t, z_src, cond_tokens, t, want_cache=False):
    """Predict the noise in z_t given the source latent and condition tokens.

    z_t / z_src: (C, H, W) or batched (B, C, H, W); cond_tokens in cond_dim
    space, (n_tokens, cond_dim) or batched; t a scalar (or per-batch vector)
    timestep in [1, T], fractional values allowed by the samplers.
    """
    zt, single = _batched(z_t)
    zs, single_s = _batched(z_src)
    if zt.shape != zs.shape:
        raise ValueError(f"z_t {zt.shape} and z_src {zs.shape} must share shape")
    if zt.shape[1] != cfg.latent_channels or zt.shape[2] != cfg.latent_side or zt.shape[3] != cfg.latent_side:
        raise ValueError(f"latent shape {zt.shape[1:]} inconsistent with config "
                         f"({cfg.latent_channels}, {cfg.latent_side}, {cfg.latent_side})")
    ct = np.asarray(cond_tokens, dtype=np.float64)
    if ct.ndim == 2:
        ct = np.broadcast_to(ct[None], (zt.shape[0],) + ct.shape)
    if ct.shape[-1] != cfg.cond_dim:
        raise ValueError(f"cond tokens dim {ct.shape[-1]} != cond_dim {cfg.cond_dim}")

    x = np.concatenate([zt, zs], axis=1)
    tokens = ops.patchify(x, cfg.patch_size)
    out = vcdit_forward_tokens(params, cfg, tokens, ct, t, want_cache=want_cache)
    if want_cache:
        y, cache = out
        cache["single"] = single and single_s
        eps = ops.unpatchify(y, cfg.latent_channels, cfg.patch_size)
        return (eps[0] if cache["single"] else eps), cache
    eps = ops.unpatchify(out, cfg.latent_channels, cfg.patch_size)
    return eps[0] if (single and single_s) else eps


def vcdit_backward(params, cfg: ModelConfig, cache, upstream_grad):
    """Exact gradients of the forward pass for every named parameter.

    upstream_grad is dLoss/d(eps_hat) in the same shape as the forward
    output. Returns (param_grads, input_grads) where input_grads carries
    'z_t', 'z_src' and 'cond_tokens'.
    """
    if cache is None:
        raise ValueError("vcdit_backward requires the cache from vcdit_forward(want_cache=True)")
    dy = np.asarray(upstream_grad, dtype=np.float64)
    if cache["single"]:
        dy = dy[None]
    dtok_head = ops.patchify(dy, cfg.patch_size)
    grads, dtokens, dcond = _vcdit_backward_tokens(params, cfg, cache, dtok_head)
    dx = ops.unpatchify(dtokens, 2 * cfg.latent_channels, cfg.patch_size)
    c = cfg.latent_channels
    dz_t, dz_src = dx[:, :c], dx[:, c:]
    if cache["single"]:
        dz_t, dz_src, dcond = dz_t[0], dz_src[0], dcond[0]
    return grads, {"z_t": dz_t, "z_src": dz_src, "cond_tokens": dcond}


# ---------------------------------------------------------------------------
# condition encoding (CLIP stand-in: trainable patch encoder + view token)


def encode_condition(params, cfg: ModelConfig, src_pixels, view_enc, want_cache=False):
    """Build condition tokens from the source image and relative view vector.

    src_pixels: (S, S) or (B, S, S) source image at the stage resolution; it
    is box-averaged down to ``cond_image_size`` (S must be a multiple),
    patch-embedded into ``cond_tokens_count`` tokens, and the projected
    4-vector view encoding is appended as one extra token. Output is
    (B, cond_tokens_count + 1, cond_dim).
    """
    px = np.asarray(src_pixels, dtype=np.float64)
    single = px.ndim == 2
    if single:
        px = px[None]
    ve = np.atleast_2d(np.asarray(view_enc, dtype=np.float64))
    s = px.shape[-1]
    cis = cfg.cond_image_size
    if s % cis:
        raise ValueError(f"source side {s} not a multiple of cond_image_size {cis}")
    f = s // cis
    small = px.reshape(px.shape[0], cis, f, cis, f).mean(axis=(2, 4)) if f > 1 else px
    tok = ops.patchify(small[:, None, :, :], cfg.cond_patch)
    img_t, c_img = ops.linear_fwd(tok, params["cond_image.w"], params["cond_image.b"])
    view_t, c_view = ops.linear_fwd(ve, params["cond_view.w"], params["cond_view.b"])
    cond = np.concatenate([img_t, view_t[:, None, :]], axis=1)
    if single:
        cond_out = cond[0]
    else:
        cond_out = cond
    if want_cache:
        return cond_out, (c_img, c_view, single)
    return cond_out


def encode_condition_backward(cache, dcond):
    """Parameter gradients of :func:`encode_condition` (inputs are data)."""
    c_img, c_view, single = cache
    dcond = np.asarray(dcond, dtype=np.float64)
    if single:
        dcond = dcond[None]
    dimg, dview = dcond[:, :-1, :], dcond[:, -1, :]
    _, dw_i, db_i = ops.linear_bwd(c_img, dimg)
    _, dw_v, db_v = ops.linear_bwd(c_view, dview)
    return {"cond_image.w": dw_i, "cond_image.b": db_i, "cond_view.w": dw_v, "cond_view.b": db_v}


# ---------------------------------------------------------------------------
# checkpoints

_CKPT_MAGIC = b"VCKPT1\n"
_CKPT_HEADER_KEYS = {"config", "tensors", "codec"}


def save_checkpoint(path: str, params: dict, cfg: ModelConfig, codec: dict | None = None) -> None:
    """Deterministic container: JSON header + little-endian float32 tensors.

    Saving the same params twice produces identical bytes, and
    save(load(path)) reproduces the file exactly. ``codec`` optionally stores
    the latent codec constants (factor/shift/scale) alongside the model so
    sampling does not need the dataset manifest.
    """
    names = sorted(params)
    header = {
        "config": asdict(cfg),
        "tensors": [{"name": n, "shape": list(params[n].shape)} for n in names],
    }
    if codec is not None:
        header["codec"] = codec
    buf = io.BytesIO()
    buf.write(_CKPT_MAGIC)
    buf.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode("ascii"))
    buf.write(b"\n")
    for n in names:
        buf.write(np.ascontiguousarray(params[n], dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path: str) -> tuple[dict, ModelConfig, dict | None]:
    """Returns (params, config, codec record or None)."""
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(_CKPT_MAGIC):
        raise ValueError(f"{path}: not a model checkpoint")
    nl = blob.index(b"\n", len(_CKPT_MAGIC))
    header = json.loads(blob[len(_CKPT_MAGIC) : nl].decode("ascii"))
    unknown_top = set(header) - _CKPT_HEADER_KEYS
    if unknown_top:
        raise ValueError(f"{path}: unknown checkpoint fields {sorted(unknown_top)}")
    known = {f.name for f in ModelConfig.__dataclass_fields__.values()}  # type: ignore[attr-defined]
    unknown = set(header["config"]) - known
    if unknown:
        raise ValueError(f"{path}: unknown checkpoint config fields {sorted(unknown)}")
    cfg = ModelConfig(**header["config"])
    params = {}
    offset = nl + 1
    for meta in header["tensors"]:
        shape = tuple(meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        offset += count * 4
        params[meta["name"]] = arr.reshape(shape).astype(np.float64)
    want = set(param_shapes(cfg))
    if set(params) != want:
        raise ValueError(f"{path}: checkpoint tensors do not match the config's parameter set")
    return params, cfg, header.get("codec")


def make_denoiser(params, cfg: ModelConfig):
    """Adapt the model to the sampler contract denoiser(z, bundle, t).

    A bundle flagged null substitutes the learned null condition tokens and a
    zeroed source latent (the classifier-free unconditional pass).
    """

    def denoiser(z, bundle, t):
        if bundle is None:
            raise ValueError("model denoiser requires a ConditionBundle")
        if bundle.null_flag:
            tokens = params["null_cond_tokens"]
            z_src = np.zeros_like(z)
        else:
            tokens = bundle.cond_tokens
            z_src = bundle.source_latent
        return vcdit_forward(params, cfg, z, z_src, tokens, t)

    return denoiser
