"""Numba kernels for the sum-of-trees sampler.

Trees live in heap-indexed arrays: children of node ``k`` are ``2k+1`` and
``2k+2``, the depth of ``k`` is ``floor(log2(k+1))``. ``var[k] == -1`` marks a
leaf and ``-2`` an unused slot. Covariates are pre-binned: ``xb[i, f]`` is the
number of cutpoints of feature ``f`` that are ``<= x[i, f]``, so the rule
``x < cutpoint[f, c]`` is the same as ``xb[i, f] <= c``.

All randomness goes through numba's internal generator, seeded by
:func:`seed` at the start of every fit.
"""

import math

import numpy as np
from numba import njit

LEAF = -1
UNUSED = -2

MOVE_GROW, MOVE_PRUNE, MOVE_CHANGE, MOVE_SWAP = 0, 1, 2, 3


@njit(cache=True)
def seed(s):
    np.random.seed(s)


@njit(cache=True)
def node_depth(k):
    d = 0
    k += 1
    while k > 1:
        k >>= 1
        d += 1
    return d


@njit(cache=True)
def p_split(depth, base, power):
    return base * (1.0 + depth) ** (-power)


@njit(cache=True)
def leaf_loglik(sbr, sbb, sigma2, tau2):
    """Log marginal likelihood of one leaf, leaf value integrated out.

    Terms shared by every tree structure (the data sum of squares and the
    Gaussian normalising constants) are dropped; they cancel in MH ratios.
    ``sbr`` is sum(b*r), ``sbb`` is sum(b*b) over the leaf's rows.
    """
    return -0.5 * math.log1p(tau2 * sbb / sigma2) + 0.5 * tau2 * sbr * sbr / (
        sigma2 * (sigma2 + tau2 * sbb)
    )


@njit(cache=True)
def grow_log_alpha(
    sbr_l, sbb_l, sbr_r, sbb_r, depth, sigma2, tau2, base, power,
    n_growable_before, n_prunable_after, p_grow_before, p_prune_after,
):
    """Log MH acceptance ratio for splitting a leaf at ``depth`` in two.

    The reverse (prune) ratio is exactly the negation.
    """
    lik = (
        leaf_loglik(sbr_l, sbb_l, sigma2, tau2)
        + leaf_loglik(sbr_r, sbb_r, sigma2, tau2)
        - leaf_loglik(sbr_l + sbr_r, sbb_l + sbb_r, sigma2, tau2)
    )
    ps = p_split(depth, base, power)
    pc = p_split(depth + 1, base, power)
    prior = math.log(ps) + 2.0 * math.log1p(-pc) - math.log1p(-ps)
    prop = (
        math.log(p_prune_after) - math.log(p_grow_before)
        + math.log(n_growable_before) - math.log(n_prunable_after)
    )
    return lik + prior + prop


@njit(cache=True)
def _goes_left(xb, i, v, c):
    return xb[i, v] <= c


@njit(cache=True)
def _route(var, cut, xb, i, start):
    k = start
    while var[k] >= 0:
        if xb[i, var[k]] <= cut[k]:
            k = 2 * k + 1
        else:
            k = 2 * k + 2
    return k


@njit(cache=True)
def _is_below(k, anc):
    # True when node k lies in the subtree rooted at anc.
    while k > anc:
        k = (k - 1) // 2
    return k == anc


@njit(cache=True)
def _leaf_stats(var, assign, basis, resid, cnt, sbr, sbb):
    m = var.shape[0]
    for k in range(m):
        cnt[k] = 0
        sbr[k] = 0.0
        sbb[k] = 0.0
    for i in range(assign.shape[0]):
        k = assign[i]
        b = basis[i]
        cnt[k] += 1
        sbr[k] += b * resid[i]
        sbb[k] += b * b


@njit(cache=True)
def _choose_rule(rows, nrows, xb, nvar, lo, hi):
    """Pick a variable uniformly among those that vary in ``rows``, then a cut
    uniformly among the cuts that leave both sides non-empty.

    Returns (var, cut), or (-1, -1) when no split is possible.
    """
    for v in range(nvar):
        lo[v] = 1 << 30
        hi[v] = -1
    for j in range(nrows):
        i = rows[j]
        for v in range(nvar):
            b = xb[i, v]
            if b < lo[v]:
                lo[v] = b
            if b > hi[v]:
                hi[v] = b
    nvalid = 0
    for v in range(nvar):
        if hi[v] > lo[v]:
            nvalid += 1
    if nvalid == 0:
        return -1, -1
    pick = np.random.randint(0, nvalid)
    for v in range(nvar):
        if hi[v] > lo[v]:
            if pick == 0:
                c = lo[v] + np.random.randint(0, hi[v] - lo[v])
                return v, c
            pick -= 1
    return -1, -1


@njit(cache=True)
def _counts(var, cnt, maxdepth):
    """(#leaves, #growable leaves, #prunable nodes, #internal, #swap pairs)."""
    m = var.shape[0]
    nleaf = 0
    ngrow = 0
    nprune = 0
    nint = 0
    nswap = 0
    for k in range(m):
        if var[k] == LEAF:
            nleaf += 1
            if cnt[k] >= 2 and node_depth(k) < maxdepth:
                ngrow += 1
        elif var[k] >= 0:
            nint += 1
            l = 2 * k + 1
            r = 2 * k + 2
            if var[l] == LEAF and var[r] == LEAF:
                nprune += 1
            if var[l] >= 0:
                nswap += 1
            if var[r] >= 0:
                nswap += 1
    return nleaf, ngrow, nprune, nint, nswap


@njit(cache=True)
def _subtree_reroute(var, cut, xb, assign, top, rows, nrows, newassign, ncnt, nsbr, nsbb, basis, resid):
    """Route the rows below ``top`` through the (modified) subtree and collect
    leaf statistics. Returns False if some leaf below ``top`` ends up empty."""
    m = var.shape[0]
    # clear stats on the subtree
    stack = np.empty(64, dtype=np.int64)
    sp = 0
    stack[sp] = top
    sp += 1
    while sp > 0:
        sp -= 1
        k = stack[sp]
        ncnt[k] = 0
        nsbr[k] = 0.0
        nsbb[k] = 0.0
        if var[k] >= 0:
            stack[sp] = 2 * k + 1
            stack[sp + 1] = 2 * k + 2
            sp += 2
    for j in range(nrows):
        i = rows[j]
        k = _route(var, cut, xb, i, top)
        newassign[j] = k
        b = basis[i]
        ncnt[k] += 1
        nsbr[k] += b * resid[i]
        nsbb[k] += b * b
    sp = 0
    stack[sp] = top
    sp += 1
    while sp > 0:
        sp -= 1
        k = stack[sp]
        if var[k] >= 0:
            stack[sp] = 2 * k + 1
            stack[sp + 1] = 2 * k + 2
            sp += 2
        elif ncnt[k] == 0:
            return False
    return True


@njit(cache=True)
def _subtree_loglik(var, top, cnt, sbr, sbb, sigma2, tau2):
    out = 0.0
    stack = np.empty(64, dtype=np.int64)
    sp = 0
    stack[sp] = top
    sp += 1
    while sp > 0:
        sp -= 1
        k = stack[sp]
        if var[k] >= 0:
            stack[sp] = 2 * k + 1
            stack[sp + 1] = 2 * k + 2
            sp += 2
        else:
            out += leaf_loglik(sbr[k], sbb[k], sigma2, tau2)
    return out


@njit(cache=True)
def _collect_rows(assign, top, rows):
    n = 0
    for i in range(assign.shape[0]):
        if _is_below(assign[i], top):
            rows[n] = i
            n += 1
    return n


@njit(cache=True)
def _nth_node(var, kind, nth):
    """Index of the nth node of a given kind (0 growable handled by caller)."""
    m = var.shape[0]
    seen = 0
    for k in range(m):
        ok = False
        if kind == 1:  # prunable
            ok = var[k] >= 0 and var[2 * k + 1] == LEAF and var[2 * k + 2] == LEAF
        elif kind == 2:  # internal
            ok = var[k] >= 0
        if ok:
            if seen == nth:
                return k
            seen += 1
    return -1


@njit(cache=True)
def _update_tree(
    var, cut, leaf, assign, xb, basis, resid, sigma2, tau2, base, power,
    probs, maxdepth, work_i, work_j, cnt, sbr, sbb, ncnt, nsbr, nsbb, lo, hi,
):
    """One Metropolis-Hastings structure move plus a Gibbs draw of the leaves.

    ``resid`` must be the partial residual with this tree's contribution
    added back. Returns (move, accepted).
    """
    nvar = xb.shape[1]
    n = assign.shape[0]
    _leaf_stats(var, assign, basis, resid, cnt, sbr, sbb)
    nleaf, ngrow, nprune, nint, nswap = _counts(var, cnt, maxdepth)
    stump = nint == 0
    u = np.random.random()
    if stump:
        move = MOVE_GROW
    elif u < probs[0]:
        move = MOVE_GROW
    elif u < probs[0] + probs[1]:
        move = MOVE_PRUNE
    elif u < probs[0] + probs[1] + probs[2]:
        move = MOVE_CHANGE
    else:
        move = MOVE_SWAP
    accepted = False

    if move == MOVE_GROW and ngrow > 0:
        pick = np.random.randint(0, ngrow)
        node = -1
        for k in range(var.shape[0]):
            if var[k] == LEAF and cnt[k] >= 2 and node_depth(k) < maxdepth:
                if pick == 0:
                    node = k
                    break
                pick -= 1
        nr = 0
        for i in range(n):
            if assign[i] == node:
                work_i[nr] = i
                nr += 1
        v, c = _choose_rule(work_i, nr, xb, nvar, lo, hi)
        if v >= 0:
            sl = 0.0
            bl = 0.0
            for j in range(nr):
                i = work_i[j]
                if xb[i, v] <= c:
                    b = basis[i]
                    sl += b * resid[i]
                    bl += b * b
            sr = sbr[node] - sl
            br = sbb[node] - bl
            nprune_after = nprune + 1
            if node > 0:
                sib = node + 1 if node % 2 == 1 else node - 1
                if var[sib] == LEAF:
                    nprune_after -= 1
            p_grow_before = 1.0 if stump else probs[0]
            la = grow_log_alpha(
                sl, bl, sr, br, node_depth(node), sigma2, tau2, base, power,
                ngrow, nprune_after, p_grow_before, probs[1],
            )
            if math.log(np.random.random()) < la:
                accepted = True
                var[node] = v
                cut[node] = c
                var[2 * node + 1] = LEAF
                var[2 * node + 2] = LEAF
                for j in range(nr):
                    i = work_i[j]
                    if xb[i, v] <= c:
                        assign[i] = 2 * node + 1
                    else:
                        assign[i] = 2 * node + 2

    elif move == MOVE_PRUNE and nprune > 0:
        node = _nth_node(var, 1, np.random.randint(0, nprune))
        l = 2 * node + 1
        r = 2 * node + 2
        # growable count after merging: children leave, merged node joins
        ngrow_after = ngrow + 1
        d_child = node_depth(l)
        if cnt[l] >= 2 and d_child < maxdepth:
            ngrow_after -= 1
        if cnt[r] >= 2 and d_child < maxdepth:
            ngrow_after -= 1
        p_grow_after = 1.0 if nint == 1 else probs[0]
        la = -grow_log_alpha(
            sbr[l], sbb[l], sbr[r], sbb[r], node_depth(node), sigma2, tau2, base, power,
            ngrow_after, nprune, p_grow_after, probs[1],
        )
        if math.log(np.random.random()) < la:
            accepted = True
            var[l] = UNUSED
            var[r] = UNUSED
            var[node] = LEAF
            for i in range(n):
                if assign[i] == l or assign[i] == r:
                    assign[i] = node

    elif move == MOVE_CHANGE and nint > 0:
        node = _nth_node(var, 2, np.random.randint(0, nint))
        nr = _collect_rows(assign, node, work_i)
        v, c = _choose_rule(work_i, nr, xb, nvar, lo, hi)
        if v >= 0:
            old_v = var[node]
            old_c = cut[node]
            var[node] = v
            cut[node] = c
            ok = _subtree_reroute(var, cut, xb, assign, node, work_i, nr, work_j, ncnt, nsbr, nsbb, basis, resid)
            la = -np.inf
            if ok:
                la = _subtree_loglik(var, node, ncnt, nsbr, nsbb, sigma2, tau2) - _subtree_loglik(
                    var, node, cnt, sbr, sbb, sigma2, tau2
                )
            if ok and math.log(np.random.random()) < la:
                accepted = True
                for j in range(nr):
                    assign[work_i[j]] = work_j[j]
            else:
                var[node] = old_v
                cut[node] = old_c

    elif move == MOVE_SWAP and nswap > 0:
        pick = np.random.randint(0, nswap)
        par = -1
        ch = -1
        for k in range(var.shape[0]):
            if var[k] >= 0:
                for cc in (2 * k + 1, 2 * k + 2):
                    if var[cc] >= 0:
                        if pick == 0 and par < 0:
                            par = k
                            ch = cc
                        pick -= 1
        nr = _collect_rows(assign, par, work_i)
        pv, pc_ = var[par], cut[par]
        var[par], cut[par] = var[ch], cut[ch]
        var[ch], cut[ch] = pv, pc_
        ok = _subtree_reroute(var, cut, xb, assign, par, work_i, nr, work_j, ncnt, nsbr, nsbb, basis, resid)
        la = -np.inf
        if ok:
            # old stats: leaves are the same slots, compare against cnt/sbr
            la = _subtree_loglik(var, par, ncnt, nsbr, nsbb, sigma2, tau2) - _subtree_loglik(
                var, par, cnt, sbr, sbb, sigma2, tau2
            )
        if ok and math.log(np.random.random()) < la:
            accepted = True
            for j in range(nr):
                assign[work_i[j]] = work_j[j]
        else:
            var[ch], cut[ch] = var[par], cut[par]
            var[par], cut[par] = pv, pc_

    if accepted:
        _leaf_stats(var, assign, basis, resid, cnt, sbr, sbb)
    for k in range(var.shape[0]):
        if var[k] == LEAF:
            pv_ = 1.0 / (1.0 / tau2 + sbb[k] / sigma2)
            leaf[k] = pv_ * sbr[k] / sigma2 + math.sqrt(pv_) * np.random.standard_normal()
    return move, accepted


@njit(cache=True)
def sweep(
    var, cut, leaf, assign, xb, basis, resid, sigma2, tau2, base, power, probs, maxdepth,
    work_i, work_j, cnt, sbr, sbb, ncnt, nsbr, nsbb, lo, hi, tried, acc,
):
    """Update every tree of one forest in turn (Bayesian backfitting).

    ``resid`` holds target minus the full fit and is kept current.
    ``tried``/``acc`` accumulate per-move proposal and acceptance counts.
    """
    q = var.shape[0]
    n = resid.shape[0]
    for t in range(q):
        vt = var[t]
        lt = leaf[t]
        at = assign[t]
        for i in range(n):
            resid[i] += basis[i] * lt[at[i]]
        move, ok = _update_tree(
            vt, cut[t], lt, at, xb, basis, resid, sigma2, tau2, base, power, probs, maxdepth,
            work_i, work_j, cnt, sbr, sbb, ncnt, nsbr, nsbb, lo, hi,
        )
        tried[move] += 1
        if ok:
            acc[move] += 1
        for i in range(n):
            resid[i] -= basis[i] * lt[at[i]]


@njit(cache=True)
def forest_fit(leaf, assign, out):
    """out[i] = sum over trees (in order) of the leaf value reached by row i."""
    q, n = assign.shape
    for i in range(n):
        out[i] = 0.0
    for t in range(q):
        lt = leaf[t]
        at = assign[t]
        for i in range(n):
            out[i] += lt[at[i]]


@njit(cache=True)
def draw_sigma2(resid, nu, lam):
    n = resid.shape[0]
    sse = 0.0
    for i in range(n):
        sse += resid[i] * resid[i]
    g = np.random.gamma(0.5 * (nu + n), 1.0)
    return 0.5 * (nu * lam + sse) / g


@njit(cache=True)
def _trunc_std_normal_above(a):
    """Standard normal conditioned on being > a."""
    if a <= 0.0:
        while True:
            z = np.random.standard_normal()
            if z > a:
                return z
    alpha = 0.5 * (a + math.sqrt(a * a + 4.0))
    while True:
        z = a + np.random.exponential(1.0 / alpha)
        if np.random.random() <= math.exp(-0.5 * (z - alpha) ** 2):
            return z


@njit(cache=True)
def draw_latent(y, mean, out):
    """Probit augmentation: out[i] ~ N(mean[i], 1) truncated to the side of 0 given by y[i]."""
    for i in range(y.shape[0]):
        m = mean[i]
        if y[i] > 0.5:
            out[i] = m + _trunc_std_normal_above(-m)
        else:
            out[i] = m - _trunc_std_normal_above(m)


@njit(cache=True)
def count_nodes(var):
    q, m = var.shape
    total = 0
    for t in range(q):
        for k in range(m):
            if var[t, k] != UNUSED:
                total += 1
    return total


@njit(cache=True)
def serialize(var, cut, leaf, cutvals, o_var, o_thr, o_left, o_right, o_val, roots, offset):
    """Write every tree in preorder to flat node arrays starting at ``offset``.

    Child links are absolute positions in the flat arrays. Returns the next
    free position.
    """
    q, m = var.shape
    pos = offset
    stack = np.empty(128, dtype=np.int64)
    slot = np.empty(128, dtype=np.int64)
    for t in range(q):
        roots[t] = pos
        sp = 0
        stack[0] = 0
        slot[0] = -1
        sp = 1
        while sp > 0:
            sp -= 1
            k = stack[sp]
            parent_slot = slot[sp]
            here = pos
            pos += 1
            if parent_slot >= 0:
                # parent_slot encodes 2*parent_pos + side
                pp = parent_slot // 2
                if parent_slot % 2 == 0:
                    o_left[pp] = here
                else:
                    o_right[pp] = here
            v = var[t, k]
            if v >= 0:
                o_var[here] = v
                o_thr[here] = cutvals[v, cut[t, k]]
                o_val[here] = 0.0
                o_left[here] = -1
                o_right[here] = -1
                stack[sp] = 2 * k + 2
                slot[sp] = 2 * here + 1
                stack[sp + 1] = 2 * k + 1
                slot[sp + 1] = 2 * here
                sp += 2
            else:
                o_var[here] = -1
                o_thr[here] = np.nan
                o_val[here] = leaf[t, k]
                o_left[here] = -1
                o_right[here] = -1
    return pos


@njit(cache=True)
def predict_flat(x, o_var, o_thr, o_left, o_right, o_val, roots, out):
    """out[i, s] = sum over trees of draw s of the leaf value reached by x[i]."""
    ndraw, q = roots.shape
    n = x.shape[0]
    for s in range(ndraw):
        for i in range(n):
            out[i, s] = 0.0
        for t in range(q):
            r = roots[s, t]
            for i in range(n):
                k = r
                while o_var[k] >= 0:
                    if x[i, o_var[k]] < o_thr[k]:
                        k = o_left[k]
                    else:
                        k = o_right[k]
                out[i, s] += o_val[k]
