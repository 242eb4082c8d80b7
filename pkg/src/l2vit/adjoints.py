"""Hand-written reverse-mode vector-Jacobian products.

Every differentiable operation comes as a pair: `*_fwd(..., keep)` runs the
forward pass (identical arithmetic to the plain ops) and, when `keep` is
true, returns a context carrying the residuals its `*_vjp` needs. There is
no autodiff graph; blocks compose the pairs explicitly and return weight
gradients keyed by block-local weight names. With `keep=False` the forwards
are the production inference path.
"""
from __future__ import annotations

import math

import numpy as np

from . import numerics
from .attention import (
    AttentionConfig,
    _factored_parts,
    feature_map_grad,
    pad_to_windows,
    softmax_rows,
    window_partition,
    window_reverse,
)
from .locality import CpeParams, LcmParams, _lcm_parts, merge_heads, split_heads
from .numerics import ConvSpec, _conv_windows

LN_EPS = 1e-5
BN_EPS = 1e-5


# ---------------------------------------------------------------------------
# primitives


def linear_fwd(x, w, b, keep: bool):
    y = x @ w
    if b is not None:
        y = y + b
    return y, ((x, w, b is not None) if keep else None)


def linear_vjp(ctx, gy):
    x, w, has_b = ctx
    gx = gy @ w.T
    gw = x.T @ gy
    gb = gy.sum(axis=0) if has_b else None
    return gx, gw, gb


def layer_norm_fwd(x, gamma, beta, keep: bool):
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    xhat = centered * inv_std
    y = xhat * gamma + beta
    return y, ((xhat, inv_std, gamma) if keep else None)


def layer_norm_vjp(ctx, gy):
    xhat, inv_std, gamma = ctx
    gxhat = gy * gamma
    m1 = gxhat.mean(axis=1, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=1, keepdims=True)
    gx = (gxhat - m1 - xhat * m2) * inv_std
    return gx, (gy * xhat).sum(axis=0), gy.sum(axis=0)


def gelu_fwd(x, keep: bool):
    return numerics.gelu(x), (x if keep else None)


def gelu_vjp(ctx, gy):
    return gy * numerics.gelu_grad(ctx)


def conv2d_fwd(x, w, b, spec: ConvSpec, keep: bool):
    y = numerics.conv2d(x, w, b, spec)
    return y, ((x, w, spec, b is not None) if keep else None)


def conv2d_vjp(ctx, gy):
    x, w, spec, has_b = ctx
    win = _conv_windows(x, spec)  # (C_in, oh, ow, kh, kw), a view
    if spec.depthwise:
        gw = np.einsum("chw,chwij->cij", gy, win, optimize=True)[:, None]
        dwin = gy[:, :, :, None, None] * w[:, 0][:, None, None, :, :]
    elif spec.groups == 1:
        gw = np.einsum("ohw,chwij->ocij", gy, win, optimize=True)
        dwin = np.einsum("ohw,ocij->chwij", gy, w, optimize=True)
    else:
        cpg_in = spec.in_channels // spec.groups
        cpg_out = spec.out_channels // spec.groups
        gw = np.empty_like(w)
        dwin = np.empty(win.shape)
        for g in range(spec.groups):
            so = slice(g * cpg_out, (g + 1) * cpg_out)
            si = slice(g * cpg_in, (g + 1) * cpg_in)
            gw[so] = np.einsum("ohw,chwij->ocij", gy[so], win[si], optimize=True)
            dwin[si] = np.einsum("ohw,ocij->chwij", gy[so], w[so], optimize=True)
    gx = _scatter_windows(dwin, x.shape, spec)
    gb = gy.sum(axis=(1, 2)) if has_b else None
    return gx, gw, gb


def _scatter_windows(dwin, x_shape, spec: ConvSpec):
    """Adjoint of _conv_windows: accumulate window grads back onto the input."""
    c, h, w = x_shape
    p, s = spec.padding, spec.stride
    oh, ow = dwin.shape[1], dwin.shape[2]
    gxp = np.zeros((c, h + 2 * p, w + 2 * p))
    for i in range(spec.kernel_h):
        for j in range(spec.kernel_w):
            gxp[:, i:i + s * oh:s, j:j + s * ow:s] += dwin[:, :, :, i, j]
    return np.ascontiguousarray(gxp[:, p:p + h, p:p + w]) if p else gxp


def batch_norm_fwd(x, mean, var, gamma, beta, keep: bool):
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean[:, None, None]) * inv_std[:, None, None]
    y = xhat * gamma[:, None, None] + beta[:, None, None]
    return y, ((xhat, gamma * inv_std) if keep else None)


def batch_norm_vjp(ctx, gy):
    xhat, scale = ctx
    gx = gy * scale[:, None, None]
    return gx, (gy * xhat).sum(axis=(1, 2)), gy.sum(axis=(1, 2))


def softmax_attention_fwd(q, k, v, scale: float, keep: bool):
    """Batched (B, n, d) softmax attention."""
    scores = np.matmul(q, np.swapaxes(k, -1, -2)) * scale
    p = softmax_rows(scores)
    o = np.matmul(p, v)
    return o, ((q, k, v, p, scale) if keep else None)


def softmax_attention_vjp(ctx, go):
    q, k, v, p, scale = ctx
    gv = np.matmul(np.swapaxes(p, -1, -2), go)
    gp = np.matmul(go, np.swapaxes(v, -1, -2))
    gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True))
    gq = np.matmul(gs, k) * scale
    gk = np.matmul(np.swapaxes(gs, -1, -2), q) * scale
    return gq, gk, gv


def factored_attention_fwd(q, k, v, cfg: AttentionConfig, keep: bool):
    """Batched (H, N, d) key-value-first linear attention."""
    fq, fk, kv, z, num, raw, den, out = _factored_parts(q, k, v, cfg)
    ctx = (q, k, v, fq, fk, kv, z, num, raw, den, cfg) if keep else None
    return out, ctx


def factored_attention_vjp(ctx, go):
    """Returns (gq, gk, gv, g_scale); g_scale is a python float.

    The clamp max(raw, floor) uses the raw > floor branch; on the clamped
    branch the gradient flows into the floor and from there into the scale
    (floor = clamp_floor / s).
    """
    q, k, v, fq, fk, kv, z, num, raw, den, cfg = ctx
    s = cfg.scale_s
    gnum = go / den[..., None]
    gden = -(go * num).sum(axis=-1) / (den * den)
    unclamped = raw > cfg.clamp_floor / s
    gr = gden * unclamped
    gfloor = (gden * ~unclamped).sum()
    gfq = np.matmul(gnum, np.swapaxes(kv, -1, -2)) + gr[..., None] * z[..., None, :]
    gkv = np.matmul(np.swapaxes(fq, -1, -2), gnum)
    gz = (gr[..., None] * fq).sum(axis=-2)
    gv = np.matmul(fk, gkv) / s
    gfk = np.matmul(v, np.swapaxes(gkv, -1, -2)) / s + gz[..., None, :] / s
    g_scale = (-((kv * gkv).sum() + (z * gz).sum()) / s
               - gfloor * cfg.clamp_floor / (s * s))
    gq = feature_map_grad(q, cfg.feature_map, gfq)
    gk = feature_map_grad(k, cfg.feature_map, gfk)
    return gq, gk, gv, g_scale


# ---------------------------------------------------------------------------
# token/grid/window plumbing (permutations and zero padding; the adjoint of
# a permutation is its inverse, the adjoint of zero padding is cropping)


def _crop_tokens(x, padded_hw, hw):
    ph, pw = padded_hw
    h, w = hw
    if (ph, pw) == (h, w):
        return x
    grid = x.reshape(ph, pw, -1)
    return np.ascontiguousarray(grid[:h, :w].reshape(h * w, -1))


def _embed_tokens(g, padded_hw, hw):
    ph, pw = padded_hw
    h, w = hw
    if (ph, pw) == (h, w):
        return g
    grid = np.zeros((ph, pw, g.shape[1]))
    grid[:h, :w] = g.reshape(h, w, -1)
    return grid.reshape(ph * pw, -1)


def _to_head_windows(t, layout, num_heads):
    """(N_pad, C) tokens -> (num_windows * heads, window^2, d)."""
    nw, w2 = layout.num_windows, layout.window ** 2
    d = t.shape[1] // num_heads
    win = window_partition(t, layout).reshape(nw, w2, num_heads, d)
    return np.ascontiguousarray(win.transpose(0, 2, 1, 3).reshape(nw * num_heads, w2, d))


def _from_head_windows(o, layout, num_heads):
    """Inverse of _to_head_windows."""
    nw, w2 = layout.num_windows, layout.window ** 2
    d = o.shape[-1]
    win = o.reshape(nw, num_heads, w2, d).transpose(0, 2, 1, 3)
    return window_reverse(win.reshape(nw, w2, num_heads * d), layout)


# ---------------------------------------------------------------------------
# composite layers; each takes a dict of block-local weights and returns
# gradient dicts under the same keys


def mlp_fwd(x, wd, prefix, keep: bool):
    h, c1 = linear_fwd(x, wd[prefix + "fc1.weight"], wd[prefix + "fc1.bias"], keep)
    a, c2 = gelu_fwd(h, keep)
    y, c3 = linear_fwd(a, wd[prefix + "fc2.weight"], wd[prefix + "fc2.bias"], keep)
    return y, ((c1, c2, c3) if keep else None)


def mlp_vjp(ctx, gy, prefix):
    c1, c2, c3 = ctx
    ga, gw2, gb2 = linear_vjp(c3, gy)
    gh = gelu_vjp(c2, ga)
    gx, gw1, gb1 = linear_vjp(c1, gh)
    grads = {prefix + "fc1.weight": gw1, prefix + "fc1.bias": gb1,
             prefix + "fc2.weight": gw2, prefix + "fc2.bias": gb2}
    return gx, grads


def cpe_fwd(x, hw, wd, keep: bool):
    p = CpeParams(channels=x.shape[1], weight=wd["cpe.conv.weight"],
                  bias=wd["cpe.conv.bias"])
    grid = numerics.tokens_to_grid(x, hw)
    enc, cctx = conv2d_fwd(grid, p.weight, p.bias, p.conv_spec, keep)
    y = x + numerics.grid_to_tokens(enc)
    return y, ((cctx, hw) if keep else None)


def cpe_vjp(ctx, gy):
    cctx, hw = ctx
    genc = numerics.tokens_to_grid(gy, hw)
    ggrid, gw, gb = conv2d_vjp(cctx, genc)
    gx = gy + numerics.grid_to_tokens(ggrid)
    return gx, {"cpe.conv.weight": gw, "cpe.conv.bias": gb}


def lcm_params_from(wd, channels: int, kernel: int) -> LcmParams:
    return LcmParams(
        channels=channels, kernel=kernel,
        conv1_weight=wd["lcm.conv1.weight"], conv1_bias=wd["lcm.conv1.bias"],
        conv2_weight=wd["lcm.conv2.weight"], conv2_bias=wd["lcm.conv2.bias"],
        bn_mean=wd["lcm.bn.mean"], bn_var=wd["lcm.bn.var"],
        bn_gamma=wd["lcm.bn.gamma"], bn_beta=wd["lcm.bn.beta"],
        ln_gamma=wd["lcm.norm.gamma"], ln_beta=wd["lcm.norm.beta"])


def lcm_fwd(x, hw, p: LcmParams, keep: bool):
    return _lcm_parts(x, hw, p, keep)


def lcm_vjp(ctx, gy):
    """Gradients of the conv-GELU-BN-conv core (keys lack the lcm. prefix)."""
    grid, pre, act, normed, hw, p = ctx
    spec = p.conv_spec
    gmixed = numerics.tokens_to_grid(gy, hw)
    gnormed, gw2, gb2 = conv2d_vjp((normed, p.conv2_weight, spec, True), gmixed)
    gact, gbn_gamma, gbn_beta = batch_norm_vjp(
        ((act - p.bn_mean[:, None, None]) / np.sqrt(p.bn_var + BN_EPS)[:, None, None],
         p.bn_gamma / np.sqrt(p.bn_var + BN_EPS)), gnormed)
    gpre = gelu_vjp(pre, gact)
    ggrid, gw1, gb1 = conv2d_vjp((grid, p.conv1_weight, spec, True), gpre)
    gx = numerics.grid_to_tokens(ggrid)
    grads = {"conv1.weight": gw1, "conv1.bias": gb1,
             "conv2.weight": gw2, "conv2.bias": gb2,
             "bn.gamma": gbn_gamma, "bn.beta": gbn_beta}
    return gx, grads


def lcm_residual_fwd(x, hw, p: LcmParams, keep: bool):
    normed, lctx = layer_norm_fwd(x, p.ln_gamma, p.ln_beta, keep)
    mixed, mctx = lcm_fwd(normed, hw, p, keep)
    return mixed + x, ((lctx, mctx) if keep else None)


def lcm_residual_vjp(ctx, gy):
    lctx, mctx = ctx
    gnormed, core = lcm_vjp(mctx, gy)
    gx_ln, g_gamma, g_beta = layer_norm_vjp(lctx, gnormed)
    grads = {"lcm." + k: v for k, v in core.items()}
    grads["lcm.norm.gamma"] = g_gamma
    grads["lcm.norm.beta"] = g_beta
    return gy + gx_ln, grads


def window_msa_fwd(x, hw, wd, num_heads: int, window: int, keep: bool):
    """Window-partitioned multi-head softmax attention with projections.

    Grids whose extent the window does not divide are zero-padded on the
    right/bottom and cropped after the windows are reassembled.
    """
    n, c = x.shape
    d = c // num_heads
    qkv, qkv_ctx = linear_fwd(x, wd["attn.qkv.weight"], wd["attn.qkv.bias"], keep)
    q, k, v = qkv[:, :c], qkv[:, c:2 * c], qkv[:, 2 * c:]
    qp, layout = pad_to_windows(q, hw, window)
    kp, _ = pad_to_windows(k, hw, window)
    vp, _ = pad_to_windows(v, hw, window)
    padded_hw = (layout.feature_h, layout.feature_w)
    qw = _to_head_windows(qp, layout, num_heads)
    kw = _to_head_windows(kp, layout, num_heads)
    vw = _to_head_windows(vp, layout, num_heads)
    ow, actx = softmax_attention_fwd(qw, kw, vw, 1.0 / math.sqrt(d), keep)
    merged = _crop_tokens(_from_head_windows(ow, layout, num_heads), padded_hw, hw)
    y, proj_ctx = linear_fwd(merged, wd["attn.proj.weight"], wd["attn.proj.bias"], keep)
    ctx = (qkv_ctx, actx, proj_ctx, layout, padded_hw, hw, num_heads) if keep else None
    return y, ctx


def window_msa_vjp(ctx, gy):
    qkv_ctx, actx, proj_ctx, layout, padded_hw, hw, num_heads = ctx
    gmerged, gwp, gbp = linear_vjp(proj_ctx, gy)
    gow = _to_head_windows(_embed_tokens(gmerged, padded_hw, hw), layout, num_heads)
    gqw, gkw, gvw = softmax_attention_vjp(actx, gow)
    gq = _crop_tokens(_from_head_windows(gqw, layout, num_heads), padded_hw, hw)
    gk = _crop_tokens(_from_head_windows(gkw, layout, num_heads), padded_hw, hw)
    gv = _crop_tokens(_from_head_windows(gvw, layout, num_heads), padded_hw, hw)
    gqkv = np.concatenate([gq, gk, gv], axis=1)
    gx, gwqkv, gbqkv = linear_vjp(qkv_ctx, gqkv)
    grads = {"attn.qkv.weight": gwqkv, "attn.qkv.bias": gbqkv,
             "attn.proj.weight": gwp, "attn.proj.bias": gbp}
    return gx, grads


def linear_global_attention_fwd(x, wd, num_heads: int, feature_map: str,
                                clamp_floor: float, keep: bool,
                                capture=None, hw=None, name=""):
    """Multi-head factored linear attention with projections.

    When `capture` is a list, the quadratic attention matrix is materialized
    (head-averaged, rows normalized by the clamped denominators) purely for
    analysis; the returned output always comes from the factored order.
    """
    n, c = x.shape
    d = c // num_heads
    cfg = AttentionConfig(num_heads=num_heads, head_dim=d,
                          feature_map=feature_map, clamp_floor=clamp_floor,
                          scale_s=float(wd["attn.scale"]))
    qkv, qkv_ctx = linear_fwd(x, wd["attn.qkv.weight"], wd["attn.qkv.bias"], keep)
    q = split_heads(qkv[:, :c], num_heads)
    k = split_heads(qkv[:, c:2 * c], num_heads)
    v = split_heads(qkv[:, 2 * c:], num_heads)
    fq, fk, kv, z, num, raw, den, out = _factored_parts(q, k, v, cfg)
    if capture is not None:
        capture.append(_capture_attention(name, hw, fq, fk, den, cfg))
    merged = merge_heads(out)
    y, proj_ctx = linear_fwd(merged, wd["attn.proj.weight"], wd["attn.proj.bias"], keep)
    ctx = ((qkv_ctx, (q, k, v, fq, fk, kv, z, num, raw, den, cfg), proj_ctx)
           if keep else None)
    return y, ctx


def linear_global_attention_vjp(ctx, gy):
    qkv_ctx, attn_ctx, proj_ctx = ctx
    gmerged, gwp, gbp = linear_vjp(proj_ctx, gy)
    num_heads = attn_ctx[0].shape[0]
    gout = split_heads(gmerged, num_heads)
    gq, gk, gv, g_scale = factored_attention_vjp(attn_ctx, gout)
    gqkv = np.concatenate(
        [merge_heads(gq), merge_heads(gk), merge_heads(gv)], axis=1)
    gx, gwqkv, gbqkv = linear_vjp(qkv_ctx, gqkv)
    grads = {"attn.qkv.weight": gwqkv, "attn.qkv.bias": gbqkv,
             "attn.proj.weight": gwp, "attn.proj.bias": gbp,
             "attn.scale": np.asarray(g_scale)}
    return gx, grads


def _capture_attention(name, hw, fq, fk, den, cfg):
    """Materialize the per-head attention matrices for analysis.

    Row i of the normalized matrix is phi(q_i) phi(K)^T / max(row sum,
    clamp_floor); the factored denominators already equal the clamped row
    sums divided by the scale.
    """
    a = np.matmul(fq, np.swapaxes(fk, -1, -2))  # (heads, N, N)
    negativity = int((a < 0.0).sum())
    den_direct = den * cfg.scale_s  # == max(row sums, clamp_floor)
    normalized = (a / den_direct[..., None]).mean(axis=0)
    return {"name": name, "hw": hw, "matrix": normalized,
            "negativity": negativity, "heads": cfg.num_heads}


def lwa_block_fwd(x, hw, wd, num_heads: int, window: int, keep: bool):
    x, cctx = cpe_fwd(x, hw, wd, keep)
    n1, n1ctx = layer_norm_fwd(x, wd["norm1.gamma"], wd["norm1.beta"], keep)
    attn, actx = window_msa_fwd(n1, hw, wd, num_heads, window, keep)
    x = x + attn
    n2, n2ctx = layer_norm_fwd(x, wd["norm2.gamma"], wd["norm2.beta"], keep)
    mlp, mctx = mlp_fwd(n2, wd, "mlp.", keep)
    y = x + mlp
    return y, ((cctx, n1ctx, actx, n2ctx, mctx) if keep else None)


def lwa_block_vjp(ctx, gy):
    cctx, n1ctx, actx, n2ctx, mctx = ctx
    grads = {}
    gn2, mlp_grads = mlp_vjp(mctx, gy, "mlp.")
    grads.update(mlp_grads)
    gx, g_gamma2, g_beta2 = layer_norm_vjp(n2ctx, gn2)
    grads["norm2.gamma"], grads["norm2.beta"] = g_gamma2, g_beta2
    gx = gx + gy
    gn1, attn_grads = window_msa_vjp(actx, gx)
    grads.update(attn_grads)
    gpre, g_gamma1, g_beta1 = layer_norm_vjp(n1ctx, gn1)
    grads["norm1.gamma"], grads["norm1.beta"] = g_gamma1, g_beta1
    gx = gx + gpre
    gx, cpe_grads = cpe_vjp(cctx, gx)
    grads.update(cpe_grads)
    return gx, grads


def lga_block_fwd(x, hw, wd, num_heads: int, feature_map: str,
                  clamp_floor: float, lcm_kernel: int, keep: bool,
                  capture=None, name=""):
    x, cctx = cpe_fwd(x, hw, wd, keep)
    n1, n1ctx = layer_norm_fwd(x, wd["norm1.gamma"], wd["norm1.beta"], keep)
    attn, actx = linear_global_attention_fwd(
        n1, wd, num_heads, feature_map, clamp_floor, keep,
        capture=capture, hw=hw, name=name)
    x = x + attn
    p = lcm_params_from(wd, x.shape[1], lcm_kernel)
    x, lctx = lcm_residual_fwd(x, hw, p, keep)
    n2, n2ctx = layer_norm_fwd(x, wd["norm2.gamma"], wd["norm2.beta"], keep)
    mlp, mctx = mlp_fwd(n2, wd, "mlp.", keep)
    y = x + mlp
    return y, ((cctx, n1ctx, actx, lctx, n2ctx, mctx) if keep else None)


def lga_block_vjp(ctx, gy):
    cctx, n1ctx, actx, lctx, n2ctx, mctx = ctx
    grads = {}
    gn2, mlp_grads = mlp_vjp(mctx, gy, "mlp.")
    grads.update(mlp_grads)
    gx, g_gamma2, g_beta2 = layer_norm_vjp(n2ctx, gn2)
    grads["norm2.gamma"], grads["norm2.beta"] = g_gamma2, g_beta2
    gx = gx + gy
    gx, lcm_grads = lcm_residual_vjp(lctx, gx)
    grads.update(lcm_grads)
    gn1, attn_grads = linear_global_attention_vjp(actx, gx)
    grads.update(attn_grads)
    gpre, g_gamma1, g_beta1 = layer_norm_vjp(n1ctx, gn1)
    grads["norm1.gamma"], grads["norm1.beta"] = g_gamma1, g_beta1
    gx = gx + gpre
    gx, cpe_grads = cpe_vjp(cctx, gx)
    grads.update(cpe_grads)
    return gx, grads


def stem_fwd(img, wd, keep: bool):
    """Two stride-2 3x3 convolutions with GELU between, then layer norm
    over the flattened tokens. Requires spatial extents divisible by 4."""
    c_mid = wd["stem.conv1.weight"].shape[0]
    c_out = wd["stem.conv2.weight"].shape[0]
    h, w = img.shape[1], img.shape[2]
    spec1 = ConvSpec(img.shape[0], c_mid, 3, 3, stride=2, padding=1)
    spec2 = ConvSpec(c_mid, c_out, 3, 3, stride=2, padding=1)
    y1, c1 = conv2d_fwd(img, wd["stem.conv1.weight"], wd["stem.conv1.bias"], spec1, keep)
    a1, c2 = gelu_fwd(y1, keep)
    y2, c3 = conv2d_fwd(a1, wd["stem.conv2.weight"], wd["stem.conv2.bias"], spec2, keep)
    hw = (h // 4, w // 4)
    tokens = numerics.grid_to_tokens(y2)
    normed, c4 = layer_norm_fwd(tokens, wd["stem.norm.gamma"], wd["stem.norm.beta"], keep)
    return normed, hw, ((c1, c2, c3, c4, hw) if keep else None)


def stem_vjp(ctx, gy):
    c1, c2, c3, c4, hw = ctx
    grads = {}
    gtok, g_gamma, g_beta = layer_norm_vjp(c4, gy)
    grads["stem.norm.gamma"], grads["stem.norm.beta"] = g_gamma, g_beta
    gy2 = numerics.tokens_to_grid(gtok, hw)
    ga1, gw2, gb2 = conv2d_vjp(c3, gy2)
    grads["stem.conv2.weight"], grads["stem.conv2.bias"] = gw2, gb2
    gy1 = gelu_vjp(c2, ga1)
    gimg, gw1, gb1 = conv2d_vjp(c1, gy1)
    grads["stem.conv1.weight"], grads["stem.conv1.bias"] = gw1, gb1
    return gimg, grads


def patch_merge_fwd(x, hw, wd, prefix: str, keep: bool):
    """2x2 stride-2 convolution doubling channels, then layer norm."""
    h, w = hw
    if h % 2 or w % 2:
        raise numerics.ShapeError(f"patch merge needs even extents, got {hw}")
    c = x.shape[1]
    weight = wd[prefix + "conv.weight"]
    spec = ConvSpec(c, weight.shape[0], 2, 2, stride=2, padding=0)
    grid = numerics.tokens_to_grid(x, hw)
    y, cctx = conv2d_fwd(grid, weight, wd[prefix + "conv.bias"], spec, keep)
    tokens = numerics.grid_to_tokens(y)
    normed, lctx = layer_norm_fwd(tokens, wd[prefix + "norm.gamma"],
                                  wd[prefix + "norm.beta"], keep)
    return normed, (h // 2, w // 2), ((cctx, lctx, hw) if keep else None)


def patch_merge_vjp(ctx, gy, prefix: str):
    cctx, lctx, hw = ctx
    gtok, g_gamma, g_beta = layer_norm_vjp(lctx, gy)
    ggrid = numerics.tokens_to_grid(gtok, (hw[0] // 2, hw[1] // 2))
    gx_grid, gw, gb = conv2d_vjp(cctx, ggrid)
    gx = numerics.grid_to_tokens(gx_grid)
    grads = {prefix + "conv.weight": gw, prefix + "conv.bias": gb,
             prefix + "norm.gamma": g_gamma, prefix + "norm.beta": g_beta}
    return gx, grads


def head_fwd(x, wd, keep: bool):
    """Final layer norm, token mean pooling, and the classifier projection."""
    normed, lctx = layer_norm_fwd(x, wd["norm.gamma"], wd["norm.beta"], keep)
    pooled = normed.mean(axis=0)
    logits = pooled @ wd["head.weight"] + wd["head.bias"]
    ctx = (lctx, normed.shape[0], pooled, wd["head.weight"]) if keep else None
    return logits, ctx


def head_vjp(ctx, glogits):
    lctx, n, pooled, w = ctx
    gpooled = glogits @ w.T
    gw = np.outer(pooled, glogits)
    gb = glogits.copy()
    gnormed = np.broadcast_to(gpooled / n, (n, gpooled.shape[0]))
    gx, g_gamma, g_beta = layer_norm_vjp(lctx, gnormed)
    grads = {"norm.gamma": g_gamma, "norm.beta": g_beta,
             "head.weight": gw, "head.bias": gb}
    return gx, grads
