"""Rolling-window aggregation kernels.

Observations are pre-collapsed to one record per (row, code) and grouped by
(subject, code). For every group the kernel sweeps the subject's rows with
two pointers into the group's observations: ``hi`` admits observations at
or before the current row, ``lo`` evicts those before the row's window start.

* counts: running integer totals (exact, same as prefix differences)
* sums: two-stack sliding aggregation, so no value is ever subtracted and a
  window summing to exactly zero stays exactly zero
* min/max: monotonic deques

Output is CSR built in two passes (count, then fill). Blocks are visited in
column order and codes ascending, so each row's columns come out sorted.
"""

from __future__ import annotations

import numpy as np

from .. import _accel
from ..errors import InvariantError

AGG_STATIC_PRESENT = 0
AGG_STATIC_FIRST = 1
AGG_CODE_COUNT = 2
AGG_CODE_PRESENT = 3
AGG_VALUE_COUNT = 4
AGG_VALUE_SUM = 5
AGG_VALUE_SUM_SQD = 6
AGG_VALUE_MIN = 7
AGG_VALUE_MAX = 8
AGG_VALUE_MEAN = 9


# ---------------------------------------------------------------- rolling starts


@_accel.njit
def _rolling_starts_nb(row_time, subj_ptr, window_us):
    n = row_time.shape[0]
    out = np.empty(n, np.int64)
    for s in range(subj_ptr.shape[0] - 1):
        a = subj_ptr[s]
        b = subj_ptr[s + 1]
        j = a
        for i in range(a, b):
            if window_us < 0:
                out[i] = a
            else:
                lower = row_time[i] - window_us
                while row_time[j] <= lower:
                    j += 1
                out[i] = j
    return out


def _rolling_starts_np(row_time, subj_ptr, window_us):
    n = row_time.shape[0]
    out = np.empty(n, np.int64)
    for s in range(len(subj_ptr) - 1):
        a, b = int(subj_ptr[s]), int(subj_ptr[s + 1])
        if window_us < 0:
            out[a:b] = a
        else:
            t = row_time[a:b]
            out[a:b] = a + np.searchsorted(t, t - window_us, side="right")
    return out


def rolling_starts(row_time: np.ndarray, subj_ptr: np.ndarray, window_us: int) -> np.ndarray:
    """Global start row of the window ``(t_i - w, t_i]`` for every row.

    Rows are grouped by subject via ``subj_ptr``; times must be strictly
    ascending within each subject. ``window_us < 0`` means full history.
    """
    row_time = np.ascontiguousarray(row_time, dtype=np.int64)
    subj_ptr = np.ascontiguousarray(subj_ptr, dtype=np.int64)
    if len(row_time) > 1:
        step = np.diff(row_time)
        same_subject = np.ones(len(row_time) - 1, bool)
        same_subject[subj_ptr[1:-1][(subj_ptr[1:-1] > 0) & (subj_ptr[1:-1] < len(row_time))] - 1] = False
        if np.any((step <= 0) & same_subject):
            raise InvariantError("row times must be strictly ascending within each subject")
    if _accel.backend() == "numba":
        return _rolling_starts_nb(row_time, subj_ptr, np.int64(window_us))
    return _rolling_starts_np(row_time, subj_ptr, int(window_us))


# ---------------------------------------------------------------- window aggregation


@_accel.njit
def _window_pass(
    fill,
    row_subj_end,
    starts2d,
    obs_row,
    obs_cnt,
    obs_vcnt,
    obs_sum,
    obs_sq,
    obs_min,
    obs_max,
    grp_ptr,
    grp_code,
    grp_subj,
    blk_win,
    blk_agg,
    col_map,
    row_nnz,
    cursor,
    out_idx,
    out_val,
    sfx_sum,
    sfx_sq,
    dq_min,
    dq_max,
):
    n_groups = grp_ptr.shape[0] - 1
    for b in range(blk_agg.shape[0]):
        agg = blk_agg[b]
        st = starts2d[blk_win[b]]
        is_value = agg >= AGG_VALUE_COUNT
        want_sum = agg == AGG_VALUE_SUM or agg == AGG_VALUE_SUM_SQD or agg == AGG_VALUE_MEAN
        for g in range(n_groups):
            col = col_map[b, grp_code[g]]
            if col < 0:
                continue
            k0 = grp_ptr[g]
            k1 = grp_ptr[g + 1]
            r_end = row_subj_end[grp_subj[g]]
            lo = k0
            hi = k0
            fe = k0
            cnt = 0
            vcnt = 0
            back_sum = 0.0
            back_sq = 0.0
            mn_h = k0
            mn_t = k0
            mx_h = k0
            mx_t = k0
            i = obs_row[k0]
            while i < r_end:
                while hi < k1 and obs_row[hi] <= i:
                    cnt += obs_cnt[hi]
                    vcnt += obs_vcnt[hi]
                    if want_sum:
                        back_sum += obs_sum[hi]
                        back_sq += obs_sq[hi]
                    if obs_vcnt[hi] > 0:
                        if agg == AGG_VALUE_MIN:
                            while mn_t > mn_h and obs_min[dq_min[mn_t - 1]] >= obs_min[hi]:
                                mn_t -= 1
                            dq_min[mn_t] = hi
                            mn_t += 1
                        elif agg == AGG_VALUE_MAX:
                            while mx_t > mx_h and obs_max[dq_max[mx_t - 1]] <= obs_max[hi]:
                                mx_t -= 1
                            dq_max[mx_t] = hi
                            mx_t += 1
                    hi += 1
                s = st[i]
                while lo < hi and obs_row[lo] < s:
                    cnt -= obs_cnt[lo]
                    vcnt -= obs_vcnt[lo]
                    if want_sum and lo == fe:
                        acc = 0.0
                        acc_sq = 0.0
                        for k in range(hi - 1, lo - 1, -1):
                            acc += obs_sum[k]
                            acc_sq += obs_sq[k]
                            sfx_sum[k] = acc
                            sfx_sq[k] = acc_sq
                        fe = hi
                        back_sum = 0.0
                        back_sq = 0.0
                    if mn_t > mn_h and dq_min[mn_h] == lo:
                        mn_h += 1
                    if mx_t > mx_h and dq_max[mx_h] == lo:
                        mx_h += 1
                    lo += 1
                if lo == hi:
                    if hi == k1:
                        break
                    i = obs_row[hi]
                    continue
                n_in = vcnt if is_value else cnt
                if n_in > 0:
                    if fill:
                        if agg == AGG_CODE_COUNT:
                            v = float(cnt)
                        elif agg == AGG_CODE_PRESENT:
                            v = 1.0
                        elif agg == AGG_VALUE_COUNT:
                            v = float(vcnt)
                        elif agg == AGG_VALUE_MIN:
                            v = obs_min[dq_min[mn_h]]
                        elif agg == AGG_VALUE_MAX:
                            v = obs_max[dq_max[mx_h]]
                        else:
                            tot = back_sum
                            tot_sq = back_sq
                            if lo < fe:
                                tot += sfx_sum[lo]
                                tot_sq += sfx_sq[lo]
                            if agg == AGG_VALUE_SUM:
                                v = tot
                            elif agg == AGG_VALUE_SUM_SQD:
                                v = tot_sq
                            else:
                                v = tot / vcnt
                        p = cursor[i]
                        out_idx[p] = col
                        out_val[p] = v
                        cursor[i] = p + 1
                    else:
                        row_nnz[i] += 1
                i += 1


def _window_blocks_nb(n_rows, row_subj_end, starts2d, obs, groups, blocks):
    obs_row, obs_cnt, obs_vcnt, obs_sum, obs_sq, obs_min, obs_max = obs
    grp_ptr, grp_code, grp_subj = groups
    blk_win, blk_agg, col_map = blocks
    n_obs = obs_row.shape[0]
    row_nnz = np.zeros(n_rows, np.int64)
    scratch = [np.empty(n_obs, np.float64), np.empty(n_obs, np.float64), np.empty(n_obs, np.int64), np.empty(n_obs, np.int64)]
    dummy_idx = np.empty(0, np.uint32)
    dummy_val = np.empty(0, np.float32)
    args = (row_subj_end, starts2d, obs_row, obs_cnt, obs_vcnt, obs_sum, obs_sq, obs_min, obs_max,
            grp_ptr, grp_code, grp_subj, blk_win, blk_agg, col_map)
    _window_pass(False, *args, row_nnz, row_nnz, dummy_idx, dummy_val, *scratch)
    indptr = np.zeros(n_rows + 1, np.int64)
    np.cumsum(row_nnz, out=indptr[1:])
    out_idx = np.empty(indptr[-1], np.uint32)
    out_val = np.empty(indptr[-1], np.float32)
    cursor = indptr[:-1].copy()
    _window_pass(True, *args, row_nnz, cursor, out_idx, out_val, *scratch)
    return indptr, out_idx, out_val


def _range_reduce(ufunc, arr, lo, hi):
    """``ufunc.reduce(arr[lo[k]:hi[k]])`` for every k; requires lo < hi."""
    if len(lo) == 0:
        return np.zeros(0, arr.dtype)
    ext = np.append(arr, arr[:1])
    idx = np.empty(2 * len(lo), np.int64)
    idx[0::2] = lo
    idx[1::2] = hi
    return ufunc.reduceat(ext, idx)[0::2]


def _window_blocks_np(n_rows, row_subj_end, starts2d, obs, groups, blocks):
    obs_row, obs_cnt, obs_vcnt, obs_sum, obs_sq, obs_min, obs_max = obs
    grp_ptr, grp_code, grp_subj = groups
    blk_win, blk_agg, col_map = blocks
    n_groups = len(grp_ptr) - 1
    big = np.int64(n_rows + 1)
    grp_of_obs = np.repeat(np.arange(n_groups, dtype=np.int64), np.diff(grp_ptr))
    keys = grp_of_obs * big + obs_row
    cum_cnt = np.r_[0, np.cumsum(obs_cnt)]
    cum_vcnt = np.r_[0, np.cumsum(obs_vcnt)]
    first_row = obs_row[grp_ptr[:-1]] if n_groups else np.zeros(0, np.int64)
    end_row = row_subj_end[grp_subj] if n_groups else np.zeros(0, np.int64)

    out_rows, out_cols, out_vals = [], [], []
    for b in range(len(blk_agg)):
        agg = int(blk_agg[b])
        cols = col_map[b, grp_code] if n_groups else np.zeros(0, np.int64)
        sel = np.flatnonzero(cols >= 0)
        lengths = end_row[sel] - first_row[sel]
        total = int(lengths.sum())
        cand_grp = np.repeat(sel, lengths)
        offsets = np.arange(total) - np.repeat(np.cumsum(lengths) - lengths, lengths)
        cand_row = np.repeat(first_row[sel], lengths) + offsets
        st = starts2d[blk_win[b]][cand_row]
        hi = np.searchsorted(keys, cand_grp * big + cand_row, side="right")
        lo = np.searchsorted(keys, cand_grp * big + st, side="left")
        cnt = cum_cnt[hi] - cum_cnt[lo]
        vcnt = cum_vcnt[hi] - cum_vcnt[lo]
        keep = (vcnt if agg >= AGG_VALUE_COUNT else cnt) > 0
        lo, hi, cnt, vcnt = lo[keep], hi[keep], cnt[keep], vcnt[keep]
        if agg == AGG_CODE_COUNT:
            vals = cnt.astype(np.float64)
        elif agg == AGG_CODE_PRESENT:
            vals = np.ones(len(cnt))
        elif agg == AGG_VALUE_COUNT:
            vals = vcnt.astype(np.float64)
        elif agg == AGG_VALUE_SUM:
            vals = _range_reduce(np.add, obs_sum, lo, hi)
        elif agg == AGG_VALUE_SUM_SQD:
            vals = _range_reduce(np.add, obs_sq, lo, hi)
        elif agg == AGG_VALUE_MEAN:
            vals = _range_reduce(np.add, obs_sum, lo, hi) / vcnt
        elif agg == AGG_VALUE_MIN:
            vals = _range_reduce(np.minimum, obs_min, lo, hi)
        elif agg == AGG_VALUE_MAX:
            vals = _range_reduce(np.maximum, obs_max, lo, hi)
        else:
            raise ValueError(f"agg id {agg} is not a time-series aggregation")
        out_rows.append(cand_row[keep])
        out_cols.append(cols[cand_grp[keep]])
        out_vals.append(vals)

    rows = np.concatenate(out_rows) if out_rows else np.zeros(0, np.int64)
    cols = np.concatenate(out_cols) if out_cols else np.zeros(0, np.int64)
    vals = np.concatenate(out_vals) if out_vals else np.zeros(0)
    order = np.lexsort((cols, rows))
    indptr = np.zeros(n_rows + 1, np.int64)
    np.cumsum(np.bincount(rows, minlength=n_rows), out=indptr[1:])
    return indptr, cols[order].astype(np.uint32), vals[order].astype(np.float32)


def window_blocks(n_rows, row_subj_end, starts2d, obs, groups, blocks):
    """Aggregate every (window, agg) block into one CSR (indptr, indices, data).

    ``obs`` = (row, cnt, vcnt, sum, sum_sq, min, max) per collapsed observation,
    ``groups`` = (ptr, code, subject) per (subject, code) run, ``blocks`` =
    (window index into ``starts2d``, agg id, code -> column map or -1).
    """
    if _accel.backend() == "numba":
        return _window_blocks_nb(n_rows, row_subj_end, starts2d, obs, groups, blocks)
    return _window_blocks_np(n_rows, row_subj_end, starts2d, obs, groups, blocks)
