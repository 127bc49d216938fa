"""Shared test helpers: independent oracles and gradient checking."""
from __future__ import annotations

import itertools

import numpy as np

import lanestream.engine as E
from lanestream.engine import Tensor


# independent distance oracles ---------------------------------------

def frechet_bruteforce(a, b) -> float:
    """Discrete Frechet straight from the definition.

    Enumerates every monotone coupling walk from (0, 0) to (n-1, m-1)
    and takes the min over walks of the max pair distance. Exponential;
    only usable for short polylines.
    """
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    n, m = len(a), len(b)

    def dist(i, j):
        return float(np.linalg.norm(a[i] - b[j]))

    best = [np.inf]

    def walk(i, j, worst):
        worst = max(worst, dist(i, j))
        if worst >= best[0]:
            return
        if i == n - 1 and j == m - 1:
            best[0] = worst
            return
        if i + 1 < n:
            walk(i + 1, j, worst)
        if j + 1 < m:
            walk(i, j + 1, worst)
        if i + 1 < n and j + 1 < m:
            walk(i + 1, j + 1, worst)

    walk(0, 0, 0.0)
    return best[0]


def chamfer_bruteforce(a, b) -> float:
    """Chamfer with explicit double loops, no vectorization."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    fwd = sum(min(np.linalg.norm(p - q) for q in b) for p in a) / len(a)
    rev = sum(min(np.linalg.norm(q - p) for p in a) for q in b) / len(b)
    return 0.5 * (fwd + rev)


def hungarian_bruteforce(cost: np.ndarray):
    """Exhaustive assignment search over permutations, lexicographic ties."""
    cost = np.asarray(cost, dtype=float)
    n, m = cost.shape
    k = min(n, m)
    best_cost, best_pairs = np.inf, None
    rows_options = itertools.combinations(range(n), k) if n > m else [tuple(range(n))]
    for rows in rows_options:
        for cols in itertools.permutations(range(m), k):
            c = sum(cost[r, cc] for r, cc in zip(rows, cols))
            if c < best_cost - 1e-12:
                best_cost = c
                best_pairs = list(zip(rows, cols))
    return best_pairs, best_cost


# finite-difference gradient checking --------------------------------

def numeric_grad(f, leaf: Tensor, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of the scalar-valued builder f."""
    base = leaf.data.copy()
    grad = np.zeros_like(base)
    flat = base.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        leaf.data.ravel()[i] = orig + eps
        hi = f().item()
        leaf.data.ravel()[i] = orig - eps
        lo = f().item()
        leaf.data.ravel()[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def check_grad(f, leaves, tol: float = 1e-4, eps: float = 1e-6):
    """Compare autodiff gradients of scalar f() against finite differences."""
    out = f()
    for leaf in leaves:
        leaf.grad = None
    out.backward()
    worst = 0.0
    for leaf in leaves:
        num = numeric_grad(f, leaf, eps)
        got = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        scale = max(np.abs(num).max(), 1e-8)
        rel = np.abs(got - num).max() / scale
        worst = max(worst, rel)
        assert rel < tol, f"gradient mismatch {rel:.3e} on leaf shape {leaf.data.shape}"
    return worst


def gradient_suite(seed: int, tol: float = 1e-4) -> dict[str, float]:
    """Finite-difference check of every engine op; returns max rel errors."""
    rng = np.random.default_rng(seed)
    errs = {}

    def leaf(*shape, low=-1.0, high=1.0):
        return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)

    def run(name, f, leaves):
        # reduce with a fixed random weighting so gradients are non-constant
        cache = {}

        def scalar():
            out = f()
            if "w" not in cache:
                cache["w"] = rng.uniform(0.5, 1.5, size=out.data.shape)
            return E.tsum(E.mul(out, cache["w"]))

        errs[name] = check_grad(scalar, leaves, tol)

    a, b = leaf(3, 4), leaf(3, 4)
    run("add", lambda: E.add(a, b), [a, b])
    bias = leaf(4)
    run("add_broadcast", lambda: E.add(a, bias), [a, bias])
    run("mul", lambda: E.mul(a, b), [a, b])
    c = leaf(3, 4, low=0.5, high=1.5)
    run("div", lambda: E.div(a, c), [a, c])
    m1, m2 = leaf(3, 5), leaf(5, 2)
    run("matmul", lambda: E.matmul(m1, m2), [m1, m2])
    run("concat", lambda: E.concat([a, b], axis=1), [a, b])
    run("slice", lambda: E.narrow(a, (slice(1, 3), slice(0, 2))), [a])
    idx = np.array([0, 2, 2, 1])
    run("take_rows", lambda: E.take_rows(a, idx), [a])
    run("embedding_lookup", lambda: E.embedding_lookup(a, idx), [a])
    run("reshape", lambda: E.reshape(a, (4, 3)), [a])
    t3 = leaf(2, 3, 4)
    run("transpose", lambda: E.transpose(t3, (2, 0, 1)), [t3])
    run("sigmoid", lambda: E.sigmoid(a), [a])
    relu_in = Tensor(
        rng.uniform(0.2, 1.0, size=(3, 4)) * rng.choice([-1.0, 1.0], size=(3, 4)),
        requires_grad=True,
    )
    run("relu", lambda: E.relu(relu_in), [relu_in])
    run("tanh", lambda: E.tanh(a), [a])
    run("exp", lambda: E.exp(a), [a])
    pos = leaf(3, 4, low=0.3, high=2.0)
    run("log", lambda: E.log(pos), [pos])
    run("sqrt", lambda: E.sqrt(pos), [pos])
    run("sin", lambda: E.sin(a), [a])
    run("cos", lambda: E.cos(a), [a])
    abs_in = Tensor(
        rng.uniform(0.2, 1.0, size=(3, 4)) * rng.choice([-1.0, 1.0], size=(3, 4)),
        requires_grad=True,
    )
    run("abs", lambda: E.absolute(abs_in), [abs_in])
    clip_in = leaf(3, 4, low=0.1, high=0.4)  # interior of the clip window
    run("clip", lambda: E.clip(clip_in, 0.0, 0.5), [clip_in])
    run("softmax", lambda: E.softmax(a, axis=1), [a])
    run("sum_axis", lambda: E.tsum(t3, axis=1), [t3])
    run("mean_axis", lambda: E.tmean(t3, axis=2), [t3])
    run("mean_all", lambda: E.tmean(a), [a])
    gain, beta = leaf(4, low=0.5, high=1.5), leaf(4)
    run("layer_norm", lambda: E.layer_norm(a, gain, beta), [a, gain, beta])
    p_in = leaf(3, 4, low=0.2, high=0.8)
    run("inverse_sigmoid", lambda: E.inverse_sigmoid(p_in), [p_in])

    gru_p = {
        k: leaf(4, 4, low=-0.5, high=0.5) if k.startswith(("w", "u")) else leaf(4)
        for k in ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_n", "u_n", "b_n")
    }
    h, x = leaf(3, 4), leaf(3, 4)
    run("gru_cell", lambda: E.gru_cell(h, x, gru_p), [h, x] + list(gru_p.values()))

    H, W = 5, 6
    feats = leaf(H, W, 3)
    # fractional grid coords between cell centers, away from kinks
    r = rng.integers(0, H - 1, size=7) + rng.uniform(0.2, 0.8, size=7)
    cc = rng.integers(0, W - 1, size=7) + rng.uniform(0.2, 0.8, size=7)
    loc = Tensor(np.stack([(r + 0.5) / H, (cc + 0.5) / W], axis=1), requires_grad=True)
    run("grid_sample", lambda: E.grid_sample_bilinear(feats, loc), [feats, loc])

    pts = leaf(4, 3, low=0.1, high=0.9)
    pe_w, pe_b = leaf(12, 12), leaf(12)
    run("pointwise_pe", lambda: E.pointwise_pe(pts, pe_w, pe_b), [pts, pe_w, pe_b])

    pred, target = leaf(3, 4), rng.uniform(-1, 1, size=(3, 4))
    run("l1_loss", lambda: E.l1_loss(pred, target), [pred])
    logits = leaf(4, 3, low=-2.0, high=2.0)
    labels = rng.integers(0, 3, size=4)
    run("cross_entropy", lambda: E.cross_entropy(logits, labels), [logits])
    probs = leaf(3, 4, low=0.1, high=0.9)
    targ01 = rng.integers(0, 2, size=(3, 4)).astype(float)
    run("binary_cross_entropy", lambda: E.binary_cross_entropy(probs, targ01), [probs])
    run("focal_loss", lambda: E.focal_loss(probs, targ01), [probs])
    run("dice_loss", lambda: E.dice_loss(probs, targ01), [probs])
    return errs
