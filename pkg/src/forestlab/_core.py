"""Compiled CART kernels.

Trees are grown on a multiset of row indices into a (p, n) C-contiguous copy
of the feature matrix, so each feature's values are contiguous.  Regression
labels are float64; classification labels are encoded as float64 class
indices in ``y`` with ``n_classes > 0``.
"""

import numpy as np
from numba import njit

_NO_FEATURE = -1


@njit(cache=True, nogil=True)
def _is_pure(y, idx, start, end):
    first = y[idx[start]]
    for i in range(start + 1, end):
        if y[idx[i]] != first:
            return False
    return True


@njit(cache=True, nogil=True)
def _is_constant(Xt, f, idx, start, end):
    first = Xt[f, idx[start]]
    for i in range(start + 1, end):
        if Xt[f, idx[i]] != first:
            return False
    return True


@njit(cache=True, nogil=True)
def _midpoint(a, b):
    thr = 0.5 * (a + b)
    # rounding can push the midpoint onto b, which would send b left
    if thr >= b:
        thr = a
    return thr


@njit(cache=True, nogil=True)
def _scan_regression(Xt, y, idx, start, end, f, min_leaf, best_dec):
    """Best threshold on feature ``f``; returns (decrease, threshold, n_left).

    Only splits strictly better than ``best_dec`` are reported; n_left = 0
    means nothing better was found.
    """
    m = end - start
    vals = np.empty(m)
    ys = np.empty(m)
    mean = 0.0
    for i in range(m):
        mean += y[idx[start + i]]
    mean /= m
    for i in range(m):
        r = idx[start + i]
        vals[i] = Xt[f, r]
        ys[i] = y[r] - mean
    order = np.argsort(vals, kind="mergesort")
    total = 0.0
    for i in range(m):
        total += ys[i]
    base = total * total / m
    s_left = 0.0
    out_dec = best_dec
    out_thr = 0.0
    out_nl = 0
    for i in range(m - 1):
        s_left += ys[order[i]]
        a = vals[order[i]]
        b = vals[order[i + 1]]
        if a == b:
            continue
        nl = i + 1
        nr = m - nl
        if nl < min_leaf or nr < min_leaf:
            continue
        s_right = total - s_left
        dec = s_left * s_left / nl + s_right * s_right / nr - base
        if dec > out_dec:
            out_dec = dec
            out_thr = _midpoint(a, b)
            out_nl = nl
    return out_dec, out_thr, out_nl


@njit(cache=True, nogil=True)
def _scan_classification(Xt, y, idx, start, end, f, min_leaf, n_classes, best_dec):
    m = end - start
    vals = np.empty(m)
    labels = np.empty(m, dtype=np.int64)
    right = np.zeros(n_classes, dtype=np.int64)
    left = np.zeros(n_classes, dtype=np.int64)
    for i in range(m):
        r = idx[start + i]
        vals[i] = Xt[f, r]
        labels[i] = np.int64(y[r])
        right[labels[i]] += 1
    order = np.argsort(vals, kind="mergesort")
    sq_right = 0.0
    for c in range(n_classes):
        sq_right += right[c] * right[c]
    base = sq_right / m
    sq_left = 0.0
    out_dec = best_dec
    out_thr = 0.0
    out_nl = 0
    for i in range(m - 1):
        c = labels[order[i]]
        sq_left += 2.0 * left[c] + 1.0
        left[c] += 1
        sq_right -= 2.0 * right[c] - 1.0
        right[c] -= 1
        a = vals[order[i]]
        b = vals[order[i + 1]]
        if a == b:
            continue
        nl = i + 1
        nr = m - nl
        if nl < min_leaf or nr < min_leaf:
            continue
        dec = sq_left / nl + sq_right / nr - base
        if dec > out_dec:
            out_dec = dec
            out_thr = _midpoint(a, b)
            out_nl = nl
    return out_dec, out_thr, out_nl


@njit(cache=True, nogil=True)
def best_split_on(Xt, y, idx, start, end, candidates, min_leaf, n_classes):
    """Best split over ``candidates`` (ascending feature order wins ties).

    Returns (feature, threshold, decrease); feature = -1 when no split leaves
    two non-empty children or the node is already pure.
    """
    best_f = _NO_FEATURE
    best_thr = 0.0
    best_dec = -np.inf
    if end - start < 2 or _is_pure(y, idx, start, end):
        return best_f, best_thr, 0.0
    for j in range(candidates.shape[0]):
        f = candidates[j]
        if n_classes > 0:
            dec, thr, nl = _scan_classification(Xt, y, idx, start, end, f, min_leaf,
                                                n_classes, best_dec)
        else:
            dec, thr, nl = _scan_regression(Xt, y, idx, start, end, f, min_leaf, best_dec)
        if nl > 0:
            best_f = f
            best_thr = thr
            best_dec = dec
    if best_f == _NO_FEATURE:
        return best_f, best_thr, 0.0
    # weighted-impurity decrease: exact SSE drop (regression) or n * Gini drop
    return best_f, best_thr, best_dec


@njit(cache=True, nogil=True)
def _draw_candidates(Xs, order, start, end, p, k, unif, upos, perm, chosen):
    """Pick up to ``k`` features that are non-constant in the node.

    Features are visited through a lazy Fisher-Yates shuffle driven by
    ``unif``; constant features are skipped without counting against ``k``,
    so a node that can be split always gets a candidate.  Writes the sorted
    candidates into ``chosen`` and returns (count, new buffer position).
    """
    n_chosen = 0
    if k >= p:
        for f in range(p):
            if Xs[f, order[f, start]] != Xs[f, order[f, end - 1]]:
                chosen[n_chosen] = f
                n_chosen += 1
        return n_chosen, upos
    for f in range(p):
        perm[f] = f
    for i in range(p):
        u = unif[upos % unif.shape[0]]
        upos += 1
        j = i + int(u * (p - i))
        if j >= p:
            j = p - 1
        tmp = perm[i]
        perm[i] = perm[j]
        perm[j] = tmp
        f = perm[i]
        if Xs[f, order[f, start]] != Xs[f, order[f, end - 1]]:
            chosen[n_chosen] = f
            n_chosen += 1
            if n_chosen == k:
                break
    chosen[:n_chosen] = np.sort(chosen[:n_chosen])
    return n_chosen, upos


@njit(cache=True, nogil=True)
def _node_split(Xs, ys, order, start, end, chosen, n_chosen, min_leaf, n_classes,
                left_c, right_c):
    """Best split of a node over presorted candidate features.

    ``ys`` holds per-slot labels (class index as float for classification).
    Returns (feature, threshold, decrease, pure).
    """
    m = end - start
    o0 = order[0]
    best_f = _NO_FEATURE
    best_thr = 0.0
    best_dec = -np.inf
    if n_classes > 0:
        for c in range(n_classes):
            right_c[c] = 0
        for i in range(start, end):
            right_c[np.int64(ys[o0[i]])] += 1
        sq_total = 0.0
        n_present = 0
        for c in range(n_classes):
            sq_total += right_c[c] * right_c[c]
            if right_c[c] > 0:
                n_present += 1
        if n_present <= 1:
            return best_f, best_thr, 0.0, True
        base = sq_total / m
        for j in range(n_chosen):
            f = chosen[j]
            of = order[f]
            for c in range(n_classes):
                left_c[c] = 0
            sq_left = 0.0
            sq_right = sq_total
            # right counts start at the node totals
            rc = right_c.copy()
            for i in range(start, end - 1):
                c = np.int64(ys[of[i]])
                sq_left += 2.0 * left_c[c] + 1.0
                left_c[c] += 1
                sq_right -= 2.0 * rc[c] - 1.0
                rc[c] -= 1
                a = Xs[f, of[i]]
                b = Xs[f, of[i + 1]]
                if a == b:
                    continue
                nl = i + 1 - start
                nr = m - nl
                if nl < min_leaf or nr < min_leaf:
                    continue
                dec = sq_left / nl + sq_right / nr - base
                if dec > best_dec:
                    best_dec = dec
                    best_thr = _midpoint(a, b)
                    best_f = f
        return best_f, best_thr, best_dec, False

    first = ys[o0[start]]
    pure = True
    mean = 0.0
    for i in range(start, end):
        v = ys[o0[i]]
        mean += v
        if v != first:
            pure = False
    if pure:
        return best_f, best_thr, 0.0, True
    mean /= m
    total = 0.0
    for i in range(start, end):
        total += ys[o0[i]] - mean
    base = total * total / m
    for j in range(n_chosen):
        f = chosen[j]
        of = order[f]
        s_left = 0.0
        for i in range(start, end - 1):
            s_left += ys[of[i]] - mean
            a = Xs[f, of[i]]
            b = Xs[f, of[i + 1]]
            if a == b:
                continue
            nl = i + 1 - start
            nr = m - nl
            if nl < min_leaf or nr < min_leaf:
                continue
            s_right = total - s_left
            dec = s_left * s_left / nl + s_right * s_right / nr - base
            if dec > best_dec:
                best_dec = dec
                best_thr = _midpoint(a, b)
                best_f = f
    if best_f == _NO_FEATURE:
        return best_f, best_thr, 0.0, False
    return best_f, best_thr, best_dec, False


@njit(cache=True, nogil=True)
def _node_stats(ys, order, start, end, n_classes, counts_row):
    """Fill class counts (classification) and return (value, impurity)."""
    m = end - start
    o0 = order[0]
    if n_classes > 0:
        for c in range(n_classes):
            counts_row[c] = 0.0
        for i in range(start, end):
            counts_row[np.int64(ys[o0[i]])] += 1.0
        best_c = 0
        sq = 0.0
        for c in range(n_classes):
            sq += counts_row[c] * counts_row[c]
            if counts_row[c] > counts_row[best_c]:
                best_c = c
        return float(best_c), 1.0 - sq / (m * m)
    mean = 0.0
    for i in range(start, end):
        mean += ys[o0[i]]
    mean /= m
    sse = 0.0
    for i in range(start, end):
        d = ys[o0[i]] - mean
        sse += d * d
    return mean, sse


@njit(cache=True, nogil=True)
def grow_tree(Xt, y, rows, k, max_leaves, min_leaf, min_split, n_classes, unif):
    """Grow one CART tree on the row multiset ``rows``.

    ``max_leaves < 0`` grows depth-first until no node can be split;
    otherwise nodes are expanded best-first by impurity decrease (earliest
    frontier entry wins ties) until ``max_leaves`` leaves exist.  Nodes with
    fewer than ``min_split`` rows are never split.

    Each feature is sorted once; a node is a segment ``[start, end)`` that is
    shared by every feature's order array and split by stable partitioning.
    """
    p = Xt.shape[0]
    n_rows = rows.shape[0]
    Xs = np.empty((p, n_rows))
    ys = np.empty(n_rows)
    for s in range(n_rows):
        ys[s] = y[rows[s]]
    order = np.empty((p, n_rows), dtype=np.int64)
    for f in range(p):
        for s in range(n_rows):
            Xs[f, s] = Xt[f, rows[s]]
        order[f] = np.argsort(Xs[f], kind="mergesort")

    cap = 2 * n_rows
    n_cls = max(n_classes, 1)
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros(cap)
    impurity = np.zeros(cap)
    n_samples = np.zeros(cap, dtype=np.int64)
    depth = np.zeros(cap, dtype=np.int64)
    counts = np.zeros((cap, n_cls))
    node_start = np.zeros(cap, dtype=np.int64)
    node_end = np.zeros(cap, dtype=np.int64)
    # frontier entries, kept in insertion order
    fr_node = np.empty(cap, dtype=np.int64)
    fr_feat = np.empty(cap, dtype=np.int64)
    fr_thr = np.empty(cap)
    fr_dec = np.empty(cap)
    n_front = 0
    perm = np.empty(p, dtype=np.int64)
    chosen = np.empty(p, dtype=np.int64)
    left_c = np.zeros(n_cls, dtype=np.int64)
    right_c = np.zeros(n_cls, dtype=np.int64)
    goes_left = np.zeros(n_rows, dtype=np.bool_)
    tmp = np.empty(n_rows, dtype=np.int64)
    upos = 0

    node_end[0] = n_rows
    n_samples[0] = n_rows
    v, imp = _node_stats(ys, order, 0, n_rows, n_classes, counts[0])
    value[0] = v
    impurity[0] = imp
    n_nodes = 1
    n_leaves = 1

    min_split = max(min_split, 2)
    f = _NO_FEATURE
    if n_rows >= min_split:
        n_ch, upos = _draw_candidates(Xs, order, 0, n_rows, p, k, unif, upos, perm, chosen)
        f, thr, dec, pure = _node_split(Xs, ys, order, 0, n_rows, chosen, n_ch, min_leaf,
                                        n_classes, left_c, right_c)
    if f >= 0:
        fr_node[0] = 0
        fr_feat[0] = f
        fr_thr[0] = thr
        fr_dec[0] = dec
        n_front = 1

    while n_front > 0 and (max_leaves < 0 or n_leaves < max_leaves):
        if max_leaves < 0:
            pick = n_front - 1
        else:
            pick = 0
            for i in range(1, n_front):
                if fr_dec[i] > fr_dec[pick]:
                    pick = i
        node = fr_node[pick]
        f = fr_feat[pick]
        thr = fr_thr[pick]
        for i in range(pick, n_front - 1):
            fr_node[i] = fr_node[i + 1]
            fr_feat[i] = fr_feat[i + 1]
            fr_thr[i] = fr_thr[i + 1]
            fr_dec[i] = fr_dec[i + 1]
        n_front -= 1

        start = node_start[node]
        end = node_end[node]
        n_left = 0
        for i in range(start, end):
            s = order[f, i]
            gl = Xs[f, s] <= thr
            goes_left[s] = gl
            if gl:
                n_left += 1
        mid = start + n_left
        for g in range(p):
            og = order[g]
            lo = start
            hi = mid
            for i in range(start, end):
                s = og[i]
                if goes_left[s]:
                    tmp[lo] = s
                    lo += 1
                else:
                    tmp[hi] = s
                    hi += 1
            for i in range(start, end):
                og[i] = tmp[i]

        feature[node] = f
        threshold[node] = thr
        for side in range(2):
            child = n_nodes
            n_nodes += 1
            if side == 0:
                left[node] = child
                cs = start
                ce = mid
            else:
                right[node] = child
                cs = mid
                ce = end
            node_start[child] = cs
            node_end[child] = ce
            n_samples[child] = ce - cs
            depth[child] = depth[node] + 1
            v, imp = _node_stats(ys, order, cs, ce, n_classes, counts[child])
            value[child] = v
            impurity[child] = imp
            if ce - cs < min_split:
                continue
            n_ch, upos = _draw_candidates(Xs, order, cs, ce, p, k, unif, upos, perm, chosen)
            cf, cthr, cdec, pure = _node_split(Xs, ys, order, cs, ce, chosen, n_ch,
                                               min_leaf, n_classes, left_c, right_c)
            if cf >= 0:
                fr_node[n_front] = child
                fr_feat[n_front] = cf
                fr_thr[n_front] = cthr
                fr_dec[n_front] = cdec
                n_front += 1
        n_leaves += 1

    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), value[:n_nodes].copy(), impurity[:n_nodes].copy(),
            n_samples[:n_nodes].copy(), depth[:n_nodes].copy(), counts[:n_nodes].copy())


@njit(cache=True, nogil=True)
def apply_tree(feature, threshold, left, right, X):
    """Leaf index reached by each row of ``X`` (go left iff x[f] <= threshold)."""
    n = X.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = node
    return out


@njit(cache=True, nogil=True)
def predict_values(feature, threshold, left, right, value, X):
    n = X.shape[0]
    out = np.empty(n)
    for i in range(n):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = value[node]
    return out
