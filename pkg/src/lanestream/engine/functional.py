"""Differentiable building blocks assembled from the tensor core.

Includes the recurrent BEV fusion cell, bilinear grid sampling, the
sinusoidal point encoding and the training losses. Probabilities fed to
losses are clamped into [PROB_EPS, 1 - PROB_EPS].
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor, as_tensor

PROB_EPS = 1e-7


def linear(x, w, b=None) -> Tensor:
    out = T.matmul(x, w)
    return out if b is None else T.add(out, b)


def mlp(x, layers) -> Tensor:
    """Apply (w, b) pairs with ReLU between layers, none after the last."""
    out = x
    for i, (w, b) in enumerate(layers):
        out = linear(out, w, b)
        if i + 1 < len(layers):
            out = T.relu(out)
    return out


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = T.tmean(x, axis=-1, keepdims=True)
    centered = T.add(x, T.mul(mu, -1.0))
    var = T.tmean(T.mul(centered, centered), axis=-1, keepdims=True)
    inv = T.div(1.0, T.sqrt(T.add(var, eps)))
    return T.add(T.mul(T.mul(centered, inv), gain), bias)


def gru_cell(h, x, params: dict) -> Tensor:
    """Gated recurrent fusion of state h with input x, both (N, C).

    update gate z = 0 keeps the previous state, z = 1 takes the candidate.
    """
    h, x = as_tensor(h), as_tensor(x)
    z = T.sigmoid(linear(x, params["w_z"]) + linear(h, params["u_z"]) + params["b_z"])
    r = T.sigmoid(linear(x, params["w_r"]) + linear(h, params["u_r"]) + params["b_r"])
    n = T.tanh(linear(x, params["w_n"]) + T.mul(r, linear(h, params["u_n"])) + params["b_n"])
    one_minus_z = T.add(T.mul(z, -1.0), 1.0)
    return T.add(T.mul(one_minus_z, h), T.mul(z, n))


def grid_sample_bilinear(features, locations) -> Tensor:
    """Bilinearly sample an (H, W, C) grid at (K, 2) unit-square locations.

    Location (u, v) maps to fractional row u * H - 0.5 and column
    v * W - 0.5, so cell centers are hit exactly. Locations outside
    [0, 1]^2 produce zeros; out-of-grid corner taps contribute zero.
    Differentiable in both the grid and the locations.
    """
    features = as_tensor(features)
    locations = as_tensor(locations)
    H, W, C = features.data.shape
    loc = locations.data
    if loc.ndim != 2 or loc.shape[1] != 2:
        raise ValueError(f"locations must be (K, 2), got {loc.shape}")

    inside = (
        (loc[:, 0] >= 0.0) & (loc[:, 0] <= 1.0) & (loc[:, 1] >= 0.0) & (loc[:, 1] <= 1.0)
    )
    r = loc[:, 0] * H - 0.5
    c = loc[:, 1] * W - 0.5
    # pose-composed lookups drift off exact cell centers by ~1e-14; snap so
    # warps by whole-cell translations stay lossless
    rn, cn = np.rint(r), np.rint(c)
    r = np.where(np.abs(r - rn) < 1e-9, rn, r)
    c = np.where(np.abs(c - cn) < 1e-9, cn, c)
    r0 = np.floor(r).astype(np.int64)
    c0 = np.floor(c).astype(np.int64)
    fr = r - r0
    fc = c - c0

    flat = features.data.reshape(H * W, C)
    corners, weights, valids = [], [], []
    for dr, dc in ((0, 0), (0, 1), (1, 0), (1, 1)):
        ri, ci = r0 + dr, c0 + dc
        valid = inside & (ri >= 0) & (ri < H) & (ci >= 0) & (ci < W)
        idx = np.clip(ri, 0, H - 1) * W + np.clip(ci, 0, W - 1)
        wr = fr if dr else 1.0 - fr
        wc = fc if dc else 1.0 - fc
        corners.append((flat[idx], idx))
        weights.append(wr * wc * valid)
        valids.append(valid)

    out_data = np.zeros((loc.shape[0], C))
    for (vals, _), w in zip(corners, weights):
        out_data += vals * w[:, None]

    def backward(g):
        if features.requires_grad or features._parents:
            gf = np.zeros((H * W, C))
            for (_, idx), w in zip(corners, weights):
                np.add.at(gf, idx, g * w[:, None])
            T._accumulate(features, gf.reshape(H, W, C))
        if locations.requires_grad or locations._parents:
            (f00, _), (f01, _), (f10, _), (f11, _) = corners
            v00, v01, v10, v11 = [v.astype(np.float64) for v in valids]
            # d out / d fr and d fc, with invalid corners already zero
            dfr = (
                (f10 * v10[:, None] - f00 * v00[:, None]) * (1.0 - fc)[:, None]
                + (f11 * v11[:, None] - f01 * v01[:, None]) * fc[:, None]
            )
            dfc = (
                (f01 * v01[:, None] - f00 * v00[:, None]) * (1.0 - fr)[:, None]
                + (f11 * v11[:, None] - f10 * v10[:, None]) * fr[:, None]
            )
            gu = (g * dfr).sum(axis=1) * H * inside
            gv = (g * dfc).sum(axis=1) * W * inside
            T._accumulate(locations, np.stack([gu, gv], axis=1))

    return T._node(out_data, (features, locations), backward, "grid_sample")


def sinusoid_features(points, dim: int, temperature: float = 10000.0) -> Tensor:
    """Fixed sinusoidal features of (N, 3) unit-cube points.

    Per coordinate: dim/6 sine then dim/6 cosine features over geometric
    frequencies, blocks ordered x, y, z.
    """
    if dim % 6 != 0:
        raise ValueError(f"encoding dim must be divisible by 6, got {dim}")
    points = as_tensor(points)
    if points.data.ndim != 2 or points.data.shape[1] != 3:
        raise ValueError(f"points must be (N, 3), got {points.data.shape}")
    k = dim // 6
    inv_freq = (2.0 * np.pi) / (temperature ** (np.arange(k) / k))
    blocks = []
    for axis in range(3):
        coord = points[:, axis : axis + 1]
        args = T.mul(coord, inv_freq[None, :])
        blocks.append(T.sin(args))
        blocks.append(T.cos(args))
    return T.concat(blocks, axis=1)


def pointwise_pe(points, weight, bias, temperature: float = 10000.0) -> Tensor:
    """Sinusoidal point encoding followed by a learned linear map."""
    feats = sinusoid_features(points, weight.shape[0], temperature)
    return linear(feats, weight, bias)


# losses -------------------------------------------------------------

def l1_loss(pred, target) -> Tensor:
    return T.tmean(T.absolute(T.add(pred, T.mul(as_tensor(target), -1.0))))


def cross_entropy(logits, labels) -> Tensor:
    """Mean categorical cross-entropy from (N, K) logits and int labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.data.shape
    shift = logits.data.max(axis=1, keepdims=True)  # constant for stability
    z = T.add(logits, -shift)
    lse = T.log(T.tsum(T.exp(z), axis=1))
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    picked = T.tsum(T.mul(z, onehot), axis=1)
    return T.tmean(T.add(lse, T.mul(picked, -1.0)))


def binary_cross_entropy(probs, targets) -> Tensor:
    p = T.clip(as_tensor(probs), PROB_EPS, 1.0 - PROB_EPS)
    t = np.asarray(targets, dtype=np.float64) if not isinstance(targets, Tensor) else targets
    one_minus_p = T.add(T.mul(p, -1.0), 1.0)
    loss = T.add(T.mul(t, T.log(p)), T.mul(T.add(T.mul(as_tensor(t), -1.0), 1.0), T.log(one_minus_p)))
    return T.tmean(T.mul(loss, -1.0))


def focal_loss(probs, targets, gamma: float = 2.0, alpha: float = 0.25) -> Tensor:
    """Binary focal loss on probabilities with {0, 1} targets, mean-reduced."""
    p = T.clip(as_tensor(probs), PROB_EPS, 1.0 - PROB_EPS)
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    one_minus_p = T.add(T.mul(p, -1.0), 1.0)
    pos = T.mul(T.mul(T.exp(T.mul(T.log(one_minus_p), gamma)), T.mul(T.log(p), -1.0)), alpha * t)
    neg = T.mul(
        T.mul(T.exp(T.mul(T.log(p), gamma)), T.mul(T.log(one_minus_p), -1.0)),
        (1.0 - alpha) * (1.0 - t),
    )
    return T.tmean(T.add(pos, neg))


def dice_loss(probs, targets, eps: float = PROB_EPS) -> Tensor:
    """Mean per-row dice loss between (N, D) probabilities and binary targets."""
    p = as_tensor(probs)
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    if p.data.ndim != 2:
        raise ValueError(f"dice_loss expects (N, D), got {p.data.shape}")
    num = T.add(T.mul(T.tsum(T.mul(p, t), axis=1), 2.0), eps)
    den = T.add(T.add(T.tsum(p, axis=1), t.sum(axis=1)), eps)
    return T.tmean(T.add(T.mul(T.div(num, den), -1.0), 1.0))
