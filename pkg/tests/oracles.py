"""Independent brute-force reference implementations used by the tests.

Everything here is written the slow, obvious way on purpose: no shared code
with the package beyond numpy.
"""

import functools

import numpy as np


def finite_difference_grad(f, x, eps=1e-6):
    """Central finite differences of scalar f at array x, all entries."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        fp = f(x)
        flat[i] = keep - eps
        fm = f(x)
        flat[i] = keep
        gf[i] = (fp - fm) / (2.0 * eps)
    return g


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
    return np.max(np.abs(a - b)) / denom


def fd_check_tensor(build_loss, tensors, eps=1e-6, sample=None, rng=None):
    """Compare tape gradients of build_loss() against finite differences.

    tensors: list of Tensor leaves whose .data will be perturbed in place.
    sample: if set, only check that many randomly chosen entries per tensor.
    Returns the worst relative error over all checked entries.
    """
    loss = build_loss()
    for t in tensors:
        t.grad = np.zeros_like(t.data)
    loss.backward()
    analytic = [t.grad.copy() for t in tensors]

    worst = 0.0
    for t, g in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        gf = g.reshape(-1)
        idx = range(flat.size)
        if sample is not None and flat.size > sample:
            idx = (rng or np.random.default_rng(0)).choice(
                flat.size, size=sample, replace=False)
        for i in idx:
            keep = flat[i]
            flat[i] = keep + eps
            fp = float(build_loss().data)
            flat[i] = keep - eps
            fm = float(build_loss().data)
            flat[i] = keep
            fd = (fp - fm) / (2.0 * eps)
            scale = max(abs(fd), abs(gf[i]), 1.0)
            worst = max(worst, abs(fd - gf[i]) / scale)
    return worst


def dense_attention(q, k, v, allowed, scale):
    """O(T^2) single-head masked attention. allowed: list of sets."""
    T = q.shape[0]
    out = np.zeros((T, v.shape[1]))
    for i in range(T):
        js = sorted(allowed[i])
        s = np.array([q[i] @ k[j] * scale for j in js])
        e = np.exp(s - s.max())
        a = e / e.sum()
        for a_j, j in zip(a, js):
            out[i] += a_j * v[j]
    return out


def edit_distance_recursive(a, b):
    """Plain recursive Levenshtein with memoization."""
    a = tuple(a)
    b = tuple(b)

    @functools.lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        cost = 0 if a[i - 1] == b[j - 1] else 1
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + cost)

    return d(len(a), len(b))


def edit_score_oracle(pred_segs, gt_segs):
    p = [s.label for s in pred_segs]
    g = [s.label for s in gt_segs]
    if not p and not g:
        return 1.0
    return 1.0 - edit_distance_recursive(p, g) / max(len(p), len(g))


def iou_oracle(a, b):
    inter = max(0, min(a.end, b.end) - max(a.start, b.start) + 1)
    union = (a.end - a.start + 1) + (b.end - b.start + 1) - inter
    return inter / union


def f1_oracle(pred_segs, gt_segs, threshold, strict=True):
    """Greedy in temporal order: each prediction takes the best unmatched
    same-label ground-truth segment, straightforward double loop."""
    matched = [False] * len(gt_segs)
    tp = 0
    for p in pred_segs:
        best = -1.0
        best_j = -1
        for j, g in enumerate(gt_segs):
            if matched[j] or g.label != p.label:
                continue
            ov = iou_oracle(p, g)
            if ov > best:
                best = ov
                best_j = j
        hit = best > threshold if strict else best >= threshold
        if best_j >= 0 and hit:
            matched[best_j] = True
            tp += 1
    fp = len(pred_segs) - tp
    fn = len(gt_segs) - tp
    if tp == 0:
        return 0.0, float(fp), float(fn), 0.0, 0.0
    prec = tp / (tp + fp)
    rec = tp / (tp + fn)
    return 2 * prec * rec / (prec + rec), float(fp), float(fn), prec, rec


def dswa_oracle(x, exp_mask, shr_mask, params):
    """Dense reference for dual sliding-window attention."""
    from tempseg.attention import dense_attention_oracle

    A = params.attn_dim
    half = slice(0, A // 2)
    other = slice(A // 2, A)
    oe = dense_attention_oracle(x, params, exp_mask.dense(), head_slice=half)
    os_ = dense_attention_oracle(x, params, shr_mask.dense(), head_slice=other)
    return np.concatenate([oe, os_], axis=1) @ params.wo.data + params.bo.data


def _ragged_pool(x, f):
    T = x.shape[0]
    ts = -(-T // f)
    out = np.zeros((ts, x.shape[1]))
    for i in range(ts):
        out[i] = x[i * f : (i + 1) * f].mean(axis=0)
    return out


def hta_oracle(x, scales, params):
    """Dense reference: per-scale pooled scores broadcast to [T, T], combined
    with aggregate_scales per head, applied to frame-level values."""
    import math as _math

    from tempseg.attention import aggregate_scales

    T = x.shape[0]
    H = params.heads
    hd = params.attn_dim // H
    v = x @ params.wv.data + params.bv.data
    out = np.zeros((T, params.attn_dim))
    for h in range(H):
        sl = slice(h * hd, (h + 1) * hd)
        es, nbs = [], []
        for s in scales.scales:
            f = 1 << s
            xp = _ragged_pool(x, f)
            qp = (xp @ params.wq.data + params.bq.data)[:, sl]
            kp = (xp @ params.wk.data + params.bk.data)[:, sl]
            e = np.zeros((T, T))
            nb = np.zeros((T, T), bool)
            for i in range(T):
                for j in range(T):
                    pi, pj = i // f, j // f
                    if abs(pi - pj) <= scales.window:
                        nb[i, j] = True
                        e[i, j] = qp[pi] @ kp[pj] / _math.sqrt(hd)
            es.append(e)
            nbs.append(nb)
        alpha = aggregate_scales(es, scales.weights, nbs)
        out[:, sl] = alpha @ v[:, sl]
    return out @ params.wo.data + params.bo.data
