"""Shared test helpers: finite-difference gradient checking and naive oracles."""

from __future__ import annotations

import numpy as np

from coopfuse.tensor import Tensor


def numeric_grad(fn, arrays: list[np.ndarray], wrt: int, h: float = 1e-5, sample: int | None = None, rng=None):
    """Central finite differences of a scalar fn w.r.t. arrays[wrt].

    Returns (flat_indices, numeric_values). With ``sample`` set, only a
    random subset of coordinates is probed.
    """
    base = [a.copy() for a in arrays]
    target = base[wrt]
    n = target.size
    if sample is not None and sample < n:
        rng = rng or np.random.default_rng(0)
        idx = rng.choice(n, size=sample, replace=False)
    else:
        idx = np.arange(n)
    grads = np.zeros(len(idx))
    flat = target.reshape(-1)
    for k, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(*base)
        flat[i] = orig - h
        fm = fn(*base)
        flat[i] = orig
        grads[k] = (fp - fm) / (2 * h)
    return idx, grads


def check_grads(build_loss, arrays: list[np.ndarray], rtol: float = 1e-4, sample: int | None = None, h: float = 1e-5):
    """Compare analytic grads of build_loss(*tensors) against finite differences.

    ``build_loss`` receives Tensors and must return a scalar Tensor.
    """
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    loss = build_loss(*tensors)
    loss.backward()

    def scalar_fn(*arrs):
        return build_loss(*[Tensor(a) for a in arrs]).item()

    rng = np.random.default_rng(1234)
    for wrt, t in enumerate(tensors):
        idx, num = numeric_grad(scalar_fn, arrays, wrt, h=h, sample=sample, rng=rng)
        ana = (t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1)[idx]
        denom = np.maximum(np.abs(num), np.abs(ana))
        err = np.abs(ana - num) / np.maximum(denom, 1e-6)
        assert err.max() <= rtol, f"grad mismatch on input {wrt}: max rel err {err.max():.2e}"


def conv2d_oracle(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """Direct nested-loop cross-correlation."""
    cout, cin, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    ho = (x.shape[1] + 2 * padding - k) // stride + 1
    wo = (x.shape[2] + 2 * padding - k) // stride + 1
    out = np.zeros((cout, ho, wo))
    for o in range(cout):
        for y in range(ho):
            for xx in range(wo):
                acc = 0.0
                for c in range(cin):
                    for i in range(k):
                        for j in range(k):
                            acc += w[o, c, i, j] * xp[c, y * stride + i, xx * stride + j]
                out[o, y, xx] = acc + b[o]
    return out


def conv3d_oracle(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, padding: int) -> np.ndarray:
    cout, cin, k, _, _ = w.shape
    xp = np.pad(x, ((0, 0),) + ((padding, padding),) * 3)
    dims = [(x.shape[a + 1] + 2 * padding - k) // stride + 1 for a in range(3)]
    out = np.zeros((cout, *dims))
    for o in range(cout):
        for z in range(dims[0]):
            for y in range(dims[1]):
                for xx in range(dims[2]):
                    acc = 0.0
                    for c in range(cin):
                        for i in range(k):
                            for j in range(k):
                                for l in range(k):
                                    acc += w[o, c, i, j, l] * xp[c, z * stride + i, y * stride + j, xx * stride + l]
                    out[o, z, y, xx] = acc + b[o]
    return out


def monte_carlo_iou_bev(a, b, n=200_000, seed=0) -> float:
    """Independent IoU estimate by uniform sampling over the joint bounding box."""
    rng = np.random.default_rng(seed)
    corners = np.vstack([a.bev_corners(), b.bev_corners()])
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    pts = rng.uniform(lo, hi, size=(n, 2))

    def inside(bx, p):
        c, s = np.cos(bx.theta), np.sin(bx.theta)
        d = p - np.array([bx.x, bx.y])
        u = d @ np.array([c, s])
        v = d @ np.array([-s, c])
        return (np.abs(u) <= bx.l / 2) & (np.abs(v) <= bx.w / 2)

    ina, inb = inside(a, pts), inside(b, pts)
    union = (ina | inb).sum()
    return (ina & inb).sum() / union if union else 0.0


def brute_force_nms(dets, iou_thresh):
    """O(n^2) reference: keep a box iff no higher-scoring kept box overlaps it."""
    from coopfuse.metrics import iou_bev

    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    kept = []
    for i in order:
        if all(iou_bev(dets[i].box, k.box) <= iou_thresh for k in kept):
            kept.append(dets[i])
    return kept
