"""Learner hot loops, each with a numba kernel and a numpy twin.

Gradient statistics arrive as int64 fixed point so histogram sums are exact
and order-independent; split gains are evaluated in float64.
"""

from __future__ import annotations

import math

import numpy as np

from .. import _accel

# ---------------------------------------------------------------- histograms


@_accel.njit
def _hist_nb(indptr, indices, bins, row_node, node_hist, col_offset, gq, hq, out):
    for r in range(row_node.shape[0]):
        nd = row_node[r]
        if nd < 0:
            continue
        slot = node_hist[nd]
        if slot < 0:
            continue
        g = gq[r]
        h = hq[r]
        for k in range(indptr[r], indptr[r + 1]):
            j = col_offset[indices[k]] + bins[k]
            out[slot, j, 0] += g
            out[slot, j, 1] += h
            out[slot, j, 2] += 1


def _hist_np(indptr, indices, bins, row_node, node_hist, col_offset, gq, hq, out):
    lengths = np.diff(indptr)
    row_of = np.repeat(np.arange(len(row_node)), lengths)
    nd = row_node[row_of]
    slot = np.where(nd >= 0, node_hist[np.maximum(nd, 0)], -1)
    sel = slot >= 0
    flat = out.reshape(-1, 3)
    idx = slot[sel] * out.shape[1] + col_offset[indices[sel]] + bins[sel].astype(np.int64)
    r = row_of[sel]
    np.add.at(flat[:, 0], idx, gq[r])
    np.add.at(flat[:, 1], idx, hq[r])
    np.add.at(flat[:, 2], idx, 1)


def accumulate_histograms(indptr, indices, bins, row_node, node_hist, col_offset, gq, hq, out) -> None:
    """Add every row's (g, h, 1) into the finite bins of its node's histogram, in place."""
    fn = _hist_nb if _accel.backend() == "numba" else _hist_np
    fn(indptr, indices, bins, row_node, node_hist, col_offset, gq, hq, out)


def fill_missing(hist: np.ndarray, totals: np.ndarray, col_offset: np.ndarray) -> None:
    """Set each column's MISSING slot to node totals minus its finite bins.

    ``hist`` is (n_nodes, total_bins, 3) with MISSING slots still zero;
    ``totals`` is (n_nodes, 3).
    """
    if hist.shape[1] == 0:
        return
    starts = col_offset[:-1]
    per_col = np.add.reduceat(hist, starts, axis=1)
    missing = col_offset[1:] - 1
    hist[:, missing, :] = totals[:, None, :] - per_col


# ---------------------------------------------------------------- routing


@_accel.njit
def _find(indices, a, b, col):
    lo = a
    hi = b
    while lo < hi:
        mid = (lo + hi) >> 1
        if indices[mid] < col:
            lo = mid + 1
        else:
            hi = mid
    if lo < b and indices[lo] == col:
        return lo
    return -1


@_accel.njit
def _route_nb(indptr, indices, bins, row_node, split_col, split_bin, default_left, left, right):
    for r in range(row_node.shape[0]):
        nd = row_node[r]
        if nd < 0 or split_col[nd] < 0:
            continue
        k = _find(indices, indptr[r], indptr[r + 1], split_col[nd])
        if k >= 0:
            go_left = bins[k] <= split_bin[nd]
        else:
            go_left = default_left[nd]
        row_node[r] = left[nd] if go_left else right[nd]


def _lookup_np(indptr, indices, rows, cols, n_cols):
    """Entry position of (rows[i], cols[i]) in a CSR matrix, or -1."""
    lengths = np.diff(indptr)
    row_of = np.repeat(np.arange(len(lengths), dtype=np.int64), lengths)
    keys = row_of * n_cols + indices
    want = rows.astype(np.int64) * n_cols + cols
    pos = np.searchsorted(keys, want)
    ok = pos < len(keys)
    ok[ok] = keys[pos[ok]] == want[ok]
    return np.where(ok, pos, -1)


def _route_np(indptr, indices, bins, row_node, split_col, split_bin, default_left, left, right):
    nd = row_node
    active = np.flatnonzero((nd >= 0) & (split_col[np.maximum(nd, 0)] >= 0))
    if len(active) == 0:
        return
    node = nd[active]
    n_cols = int(indices.max()) + 1 if len(indices) else 1
    n_cols = max(n_cols, int(split_col.max()) + 1)
    k = _lookup_np(indptr, indices, active, split_col[node], n_cols)
    found = k >= 0
    go_left = default_left[node].copy()
    go_left[found] = bins[k[found]] <= split_bin[node[found]]
    row_node[active] = np.where(go_left, left[node], right[node])


def route_rows(indptr, indices, bins, row_node, split_col, split_bin, default_left, left, right) -> None:
    """Move rows of split nodes to their children, in place."""
    fn = _route_nb if _accel.backend() == "numba" else _route_np
    fn(indptr, indices, bins, row_node, split_col, split_bin, default_left, left, right)


# ---------------------------------------------------------------- split search


@_accel.njit
def _best_split_nb(hist, G, H, C, cols, col_offset, n_finite, lam, gamma, min_child_hessian, inv_scale):
    Gf = G * inv_scale
    Hf = H * inv_scale
    parent = Gf * Gf / (Hf + lam) if Hf + lam > 0 else 0.0
    best_gain = 0.0
    best_col = -1
    best_bin = -1
    best_dl = True
    best_gl = 0
    best_hl = 0
    best_cl = 0
    for ci in range(cols.shape[0]):
        c = cols[ci]
        off = col_offset[c]
        nf = n_finite[c]
        gm = hist[off + nf, 0]
        hm = hist[off + nf, 1]
        cm = hist[off + nf, 2]
        gl = 0
        hl = 0
        cl = 0
        for b in range(nf):
            gl += hist[off + b, 0]
            hl += hist[off + b, 1]
            cl += hist[off + b, 2]
            for d in range(2):
                dl = d == 0
                GL = gl + gm if dl else gl
                HL = hl + hm if dl else hl
                CL = cl + cm if dl else cl
                CR = C - CL
                if CL == 0 or CR == 0:
                    continue
                HLf = HL * inv_scale
                HRf = (H - HL) * inv_scale
                if HLf < min_child_hessian or HRf < min_child_hessian:
                    continue
                if HLf + lam <= 0 or HRf + lam <= 0:
                    continue
                GLf = GL * inv_scale
                GRf = (G - GL) * inv_scale
                gain = 0.5 * (GLf * GLf / (HLf + lam) + GRf * GRf / (HRf + lam) - parent) - gamma
                if gain > best_gain:
                    best_gain = gain
                    best_col = c
                    best_bin = b
                    best_dl = dl
                    best_gl = GL
                    best_hl = HL
                    best_cl = CL
    return best_gain, best_col, best_bin, best_dl, best_gl, best_hl, best_cl


def _best_split_np(hist, G, H, C, cols, col_offset, n_finite, lam, gamma, min_child_hessian, inv_scale):
    Gf = G * inv_scale
    Hf = H * inv_scale
    parent = Gf * Gf / (Hf + lam) if Hf + lam > 0 else 0.0
    none = (0.0, -1, -1, True, 0, 0, 0)
    cols = np.asarray(cols, np.int64)
    nf = n_finite[cols].astype(np.int64)
    total = int(nf.sum())
    if total == 0:
        return none
    # every finite bin of every candidate column, column by column
    starts = np.repeat(np.cumsum(nf) - nf, nf)
    pos = np.arange(total) - starts
    off = np.repeat(col_offset[cols].astype(np.int64), nf)
    fin = hist[off + pos]
    # per-column prefix sums: running total minus the running total before the column
    run = np.cumsum(fin, axis=0)
    base = np.vstack([np.zeros((1, 3), np.int64), run])[np.repeat(np.cumsum(nf) - nf, nf)]
    cum = run - base
    miss = hist[off + np.repeat(nf, nf)]
    # candidate order: column, bin ascending, MISSING-left before MISSING-right
    both = np.stack([cum + miss, cum], axis=1).reshape(-1, 3)
    GL, HL, CL = both[:, 0], both[:, 1], both[:, 2]
    CR = C - CL
    HLf = HL * inv_scale
    HRf = (H - HL) * inv_scale
    ok = (CL > 0) & (CR > 0) & (HLf >= min_child_hessian) & (HRf >= min_child_hessian)
    ok &= (HLf + lam > 0) & (HRf + lam > 0)
    if not ok.any():
        return none
    GLf = GL * inv_scale
    GRf = (G - GL) * inv_scale
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = 0.5 * (GLf * GLf / (HLf + lam) + GRf * GRf / (HRf + lam) - parent) - gamma
    gain = np.where(ok, gain, -np.inf)
    k = int(np.argmax(gain))  # first maximum, like the strict ">" in the loop
    if not gain[k] > 0.0:
        return none
    j = k // 2
    ci = int(np.searchsorted(np.cumsum(nf), j, side="right"))
    return (float(gain[k]), int(cols[ci]), int(pos[j]), k % 2 == 0, int(GL[k]), int(HL[k]), int(CL[k]))


def best_split(hist, G, H, C, cols, col_offset, n_finite, lam, gamma, min_child_hessian, inv_scale):
    """(gain, column, bin, default_left, G_left, H_left, count_left); column -1 means no split."""
    fn = _best_split_nb if _accel.backend() == "numba" else _best_split_np
    out = fn(
        hist,
        np.int64(G),
        np.int64(H),
        np.int64(C),
        cols,
        col_offset,
        n_finite,
        float(lam),
        float(gamma),
        float(min_child_hessian),
        float(inv_scale),
    )
    gain, col, b, dl, gl, hl, cl = out
    return float(gain), int(col), int(b), bool(dl), int(gl), int(hl), int(cl)


# ---------------------------------------------------------------- prediction


@_accel.njit
def _predict_nb(indptr, indices, data, tree_ptr, feature, threshold, default_left, left, right, value, base, eta):
    n = indptr.shape[0] - 1
    out = np.empty(n, np.float64)
    for r in range(n):
        a = indptr[r]
        b = indptr[r + 1]
        s = base
        for t in range(tree_ptr.shape[0] - 1):
            off = tree_ptr[t]
            nd = 0
            while feature[off + nd] >= 0:
                k = _find(indices, a, b, feature[off + nd])
                if k >= 0:
                    go_left = data[k] <= threshold[off + nd]
                else:
                    go_left = default_left[off + nd]
                nd = left[off + nd] if go_left else right[off + nd]
            s += eta * value[off + nd]
        out[r] = s
    return out


def _predict_np(indptr, indices, data, tree_ptr, feature, threshold, default_left, left, right, value, base, eta):
    n = len(indptr) - 1
    out = np.full(n, base, np.float64)
    n_cols = max(int(indices.max()) + 1 if len(indices) else 1, int(feature.max()) + 1 if len(feature) else 1)
    rows = np.arange(n)
    for t in range(len(tree_ptr) - 1):
        off = int(tree_ptr[t])
        nd = np.zeros(n, np.int64)
        while True:
            f = feature[off + nd]
            active = np.flatnonzero(f >= 0)
            if len(active) == 0:
                break
            node = nd[active] + off
            k = _lookup_np(indptr, indices, rows[active], f[active], n_cols)
            found = k >= 0
            go_left = default_left[node].copy()
            go_left[found] = data[k[found]] <= threshold[node[found]]
            nd[active] = np.where(go_left, left[node], right[node])
        out += eta * value[off + nd]
    return out


def predict_scores(indptr, indices, data, tree_ptr, feature, threshold, default_left, left, right, value, base, eta):
    fn = _predict_nb if _accel.backend() == "numba" else _predict_np
    return fn(indptr, indices, data, tree_ptr, feature, threshold, default_left, left, right, value, float(base), float(eta))


# ---------------------------------------------------------------- SGD


@_accel.njit
def _sgd_epoch_nb(indptr, indices, data, y, order, v, scale, bias, lr, lam):
    loss = 0.0
    for oi in range(order.shape[0]):
        r = order[oi]
        z = 0.0
        for k in range(indptr[r], indptr[r + 1]):
            z += v[indices[k]] * data[k]
        z = bias + scale * z
        if z >= 0:
            p = 1.0 / (1.0 + np.exp(-z))
        else:
            e = np.exp(z)
            p = e / (1.0 + e)
        pc = min(max(p, 1e-12), 1.0 - 1e-12)
        loss -= y[r] * np.log(pc) + (1.0 - y[r]) * np.log(1.0 - pc)
        g = p - y[r]
        step = lr * g / scale
        for k in range(indptr[r], indptr[r + 1]):
            v[indices[k]] -= step * data[k]
        bias -= lr * g
        scale /= 1.0 + lr * lam
        if scale < 1e-9:
            for j in range(v.shape[0]):
                v[j] *= scale
            scale = 1.0
    return scale, bias, loss


def _sgd_epoch_np(indptr, indices, data, y, order, v, scale, bias, lr, lam):
    loss = 0.0
    for r in order:
        a, b = indptr[r], indptr[r + 1]
        cols, x = indices[a:b], data[a:b]
        # cumsum adds left to right like the compiled loop; np.dot may not
        z = float(np.cumsum(v[cols] * x)[-1]) if b > a else 0.0
        z = bias + scale * z
        if z >= 0:
            p = 1.0 / (1.0 + math.exp(-z))
        else:
            e = math.exp(z)
            p = e / (1.0 + e)
        pc = min(max(p, 1e-12), 1.0 - 1e-12)
        loss -= y[r] * math.log(pc) + (1.0 - y[r]) * math.log(1.0 - pc)
        g = p - y[r]
        step = lr * g / scale
        v[cols] -= step * x
        bias -= lr * g
        scale /= 1.0 + lr * lam
        if scale < 1e-9:
            v *= scale
            scale = 1.0
    return scale, bias, float(loss)


def sgd_epoch(indptr, indices, data, y, order, v, scale, bias, lr, lam):
    """One pass of proximal-L2 logistic SGD over ``order``; weights are ``scale * v``."""
    fn = _sgd_epoch_nb if _accel.backend() == "numba" else _sgd_epoch_np
    return fn(indptr, indices, data, y, order, v, float(scale), float(bias), float(lr), float(lam))
