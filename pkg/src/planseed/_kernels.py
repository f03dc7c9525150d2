"""Numba kernels for the hot paths: batched trajectory costs, the multi-seed
optimizer loop, and analytic-SDF collision checks.

Everything here is deterministic: no fastmath, no threading, fixed reduction
order. The public API in trajopt/rrt wraps these with dataclass-level types.
"""

from __future__ import annotations

import numpy as np
from numba import njit

# cost term indices in breakdown arrays
GOAL_POS, GOAL_ROT, SMOOTH, SELF, WORLD = 0, 1, 2, 3, 4
N_TERMS = 5


@njit(cache=True, inline="always")
def _wrap(theta):
    return np.pi - ((np.pi - theta) % (2.0 * np.pi))


@njit(cache=True, inline="always")
def _bilinear(values, ox, oy, h, x, y):
    """Bilinear patch value and in-cell gradient; clamps to the grid extent."""
    nx, ny = values.shape
    gx = (x - ox) / h
    gy = (y - oy) / h
    clamped = gx < 0.0 or gx > nx - 1.0 or gy < 0.0 or gy > ny - 1.0
    i = int(np.floor(gx))
    j = int(np.floor(gy))
    if i < 0:
        i = 0
    elif i > nx - 2:
        i = nx - 2
    if j < 0:
        j = 0
    elif j > ny - 2:
        j = ny - 2
    tx = gx - i
    ty = gy - j
    if tx < 0.0:
        tx = 0.0
    elif tx > 1.0:
        tx = 1.0
    if ty < 0.0:
        ty = 0.0
    elif ty > 1.0:
        ty = 1.0
    v00 = values[i, j]
    v10 = values[i + 1, j]
    v01 = values[i, j + 1]
    v11 = values[i + 1, j + 1]
    d = v00 * (1 - tx) * (1 - ty) + v10 * tx * (1 - ty) + v01 * (1 - tx) * ty + v11 * tx * ty
    dgx = ((v10 - v00) * (1 - ty) + (v11 - v01) * ty) / h
    dgy = ((v01 - v00) * (1 - tx) + (v11 - v10) * tx) / h
    return d, dgx, dgy, clamped


@njit(cache=True)
def analytic_sdf(x, y, circles, boxes, cap):
    """Exact signed distance to the nearest obstacle; `cap` when no obstacles."""
    best = cap
    for k in range(circles.shape[0]):
        dx = x - circles[k, 0]
        dy = y - circles[k, 1]
        d = np.sqrt(dx * dx + dy * dy) - circles[k, 2]
        if d < best:
            best = d
    for k in range(boxes.shape[0]):
        cx = 0.5 * (boxes[k, 0] + boxes[k, 2])
        cy = 0.5 * (boxes[k, 1] + boxes[k, 3])
        qx = abs(x - cx) - 0.5 * (boxes[k, 2] - boxes[k, 0])
        qy = abs(y - cy) - 0.5 * (boxes[k, 3] - boxes[k, 1])
        ax = qx if qx > 0.0 else 0.0
        ay = qy if qy > 0.0 else 0.0
        inside = qx if qx > qy else qy
        if inside > 0.0:
            inside = 0.0
        d = np.sqrt(ax * ax + ay * ay) + inside
        if d < best:
            best = d
    return best


@njit(cache=True)
def config_clearance(q, lengths, basex, basey, fracs, circles, boxes, cap):
    """Min analytic SDF over the arm's collision points at configuration q."""
    d = lengths.shape[0]
    m = fracs.shape[0]
    best = cap
    th = 0.0
    px = basex
    py = basey
    for k in range(d):
        th += q[k]
        c = np.cos(th)
        s = np.sin(th)
        for i in range(m):
            x = px + fracs[i] * lengths[k] * c
            y = py + fracs[i] * lengths[k] * s
            v = analytic_sdf(x, y, circles, boxes, cap)
            if v < best:
                best = v
        px += lengths[k] * c
        py += lengths[k] * s
    return best


@njit(cache=True)
def edge_free_conservative(qa, qb, max_spacing, lipschitz, min_advance,
                           lengths, basex, basey, fracs, circles, boxes, cap):
    """Continuum-sound collision check along the joint-space segment [qa, qb].

    Advances by clearance / lipschitz (capped at max_spacing), where lipschitz
    bounds how fast any collision point can move per unit joint-space distance.
    Accepting an edge therefore proves the whole segment collision-free; configs
    hugging a surface closer than lipschitz * min_advance are rejected.
    """
    d_n = qa.shape[0]
    dist = 0.0
    for k in range(d_n):
        dist += (qb[k] - qa[k]) ** 2
    dist = np.sqrt(dist)
    q = np.empty(d_n)
    s = 0.0
    while True:
        t = 1.0 if dist == 0.0 else s / dist
        for k in range(d_n):
            q[k] = qa[k] + t * (qb[k] - qa[k])
        c = config_clearance(q, lengths, basex, basey, fracs, circles, boxes, cap)
        adv = c / lipschitz
        if adv < min_advance:
            return False
        if s >= dist:
            return True
        if adv > max_spacing:
            adv = max_spacing
        s = s + adv
        if s > dist:
            s = dist


@njit(cache=True)
def traj_min_clearance(traj, interp_per_seg, lengths, basex, basey, fracs, circles, boxes, cap):
    """Min clearance over all waypoints plus interp_per_seg configs per segment."""
    t_steps, d = traj.shape
    best = cap
    q = np.empty(d)
    for t in range(t_steps):
        v = config_clearance(traj[t], lengths, basex, basey, fracs, circles, boxes, cap)
        if v < best:
            best = v
        if t + 1 < t_steps:
            for i in range(interp_per_seg):
                f = (i + 1.0) / (interp_per_seg + 1.0)
                for k in range(d):
                    q[k] = traj[t, k] + f * (traj[t + 1, k] - traj[t, k])
                v = config_clearance(q, lengths, basex, basey, fracs, circles, boxes, cap)
                if v < best:
                    best = v
    return best


@njit(cache=True)
def cost_terms_batch(
    qs,            # (S, T, D) joint trajectories
    lengths, basex, basey, fracs,
    pair_a, pair_b,                  # non-adjacent point index pairs
    grid_values, grid_ox, grid_oy, grid_h,
    goal_x, goal_y, goal_th,
    weights,                         # (w_goal_pos, w_goal_rot, w_smooth, w_self, w_world)
    d_act, d_self,
    jerk_mat, jerk_quad,             # (T,T) third-difference operator and 2*J^T J
    want_grad,
):
    """Batched cost terms, total, gradient and out-of-grid flags for S seeds.

    Returns (terms (S,5), totals (S,), grads (S,T,D), clamped (S,) bool).
    When want_grad is False the gradient array is zero-filled and untouched.
    """
    s_n, t_n, d_n = qs.shape
    m = fracs.shape[0]
    p_n = d_n * m
    terms = np.zeros((s_n, N_TERMS))
    totals = np.zeros(s_n)
    grads = np.zeros((s_n, t_n, d_n))
    clamped = np.zeros(s_n, dtype=np.bool_)

    w_gp, w_gr, w_sm, w_self, w_world = weights[0], weights[1], weights[2], weights[3], weights[4]

    ox_ = np.empty(d_n + 1)
    oy_ = np.empty(d_n + 1)
    px = np.empty(p_n)
    py = np.empty(p_n)
    gpx = np.empty(p_n)
    gpy = np.empty(p_n)
    cth = np.empty(d_n)

    for s in range(s_n):
        for t in range(t_n):
            # forward chain
            th = 0.0
            ox_[0] = basex
            oy_[0] = basey
            for k in range(d_n):
                th += qs[s, t, k]
                cth[k] = th
                c = np.cos(th)
                si = np.sin(th)
                for i in range(m):
                    p = k * m + i
                    px[p] = ox_[k] + fracs[i] * lengths[k] * c
                    py[p] = oy_[k] + fracs[i] * lengths[k] * si
                ox_[k + 1] = ox_[k] + lengths[k] * c
                oy_[k + 1] = oy_[k] + lengths[k] * si

            for p in range(p_n):
                gpx[p] = 0.0
                gpy[p] = 0.0
            any_point_grad = False

            # world collision cost
            if w_world > 0.0:
                for p in range(p_n):
                    dval, dgx, dgy, cl = _bilinear(grid_values, grid_ox, grid_oy, grid_h, px[p], py[p])
                    if cl:
                        clamped[s] = True
                    hinge = d_act - dval
                    if hinge > 0.0:
                        terms[s, WORLD] += w_world * hinge * hinge
                        if want_grad:
                            gpx[p] += -2.0 * w_world * hinge * dgx
                            gpy[p] += -2.0 * w_world * hinge * dgy
                            any_point_grad = True

            # self collision cost (min over non-adjacent point pairs)
            if w_self > 0.0 and pair_a.shape[0] > 0:
                best = 1e300
                best_i = 0
                for e in range(pair_a.shape[0]):
                    a = pair_a[e]
                    b = pair_b[e]
                    dd = (px[a] - px[b]) ** 2 + (py[a] - py[b]) ** 2
                    if dd < best:
                        best = dd
                        best_i = e
                mind = np.sqrt(best)
                hinge = d_self - mind
                if hinge > 0.0:
                    terms[s, SELF] += w_self * hinge * hinge
                    if want_grad and mind > 1e-12:
                        a = pair_a[best_i]
                        b = pair_b[best_i]
                        scale = -2.0 * w_self * hinge / mind
                        gpx[a] += scale * (px[a] - px[b])
                        gpy[a] += scale * (py[a] - py[b])
                        gpx[b] += -scale * (px[a] - px[b])
                        gpy[b] += -scale * (py[a] - py[b])
                        any_point_grad = True

            # goal pose cost at the final waypoint
            ee_gx = 0.0
            ee_gy = 0.0
            if t == t_n - 1:
                ex = ox_[d_n] - goal_x
                ey = oy_[d_n] - goal_y
                terms[s, GOAL_POS] = w_gp * (ex * ex + ey * ey)
                dth = _wrap(cth[d_n - 1] - goal_th)
                terms[s, GOAL_ROT] = w_gr * dth * dth
                if want_grad:
                    ee_gx = 2.0 * w_gp * ex
                    ee_gy = 2.0 * w_gp * ey
                    for k in range(d_n):
                        grads[s, t, k] += 2.0 * w_gr * dth

            # backward accumulation: joint j sees all points on links >= j plus the tip
            if want_grad and (any_point_grad or ee_gx != 0.0 or ee_gy != 0.0):
                acc = ee_gy * ox_[d_n] - ee_gx * oy_[d_n]
                bx = ee_gx
                by = ee_gy
                for k in range(d_n - 1, -1, -1):
                    for i in range(m):
                        p = k * m + i
                        acc += gpy[p] * px[p] - gpx[p] * py[p]
                        bx += gpx[p]
                        by += gpy[p]
                    grads[s, t, k] += acc - ox_[k] * by + oy_[k] * bx

        # smoothness: squared third differences at unit waypoint spacing
        if w_sm > 0.0:
            for k in range(d_n):
                for r in range(t_n):
                    y = 0.0
                    for cidx in range(t_n):
                        y += jerk_mat[r, cidx] * qs[s, cidx, k]
                    terms[s, SMOOTH] += w_sm * y * y
                if want_grad:
                    for r in range(t_n):
                        g = 0.0
                        for cidx in range(t_n):
                            g += jerk_quad[r, cidx] * qs[s, cidx, k]
                        grads[s, r, k] += w_sm * g

        # the first waypoint is pinned to the start configuration
        if want_grad:
            for k in range(d_n):
                grads[s, 0, k] = 0.0

        totals[s] = terms[s, 0] + terms[s, 1] + terms[s, 2] + terms[s, 3] + terms[s, 4]

    return terms, totals, grads, clamped


@njit(cache=True)
def optimize_batch(
    seeds,            # (S, T, D)
    n_iters,
    momentum, armijo_c, shrink, max_backtracks, alpha0, alpha_max,
    lengths, basex, basey, fracs, pair_a, pair_b,
    grid_values, grid_ox, grid_oy, grid_h,
    goal_x, goal_y, goal_th,
    weights, d_act, d_self, jerk_mat, jerk_quad,
):
    """Momentum gradient descent with backtracking line search, in lockstep over seeds.

    Runs exactly n_iters iterations per seed; a seed freezes early only when a
    line search along the fresh steepest-descent direction fails, after which
    every remaining iteration would provably repeat the same rejected step.
    Returns (trajs, terms, totals, converged, n_accepted).
    """
    s_n, t_n, d_n = seeds.shape
    x = seeds.copy()
    v = np.zeros_like(x)
    alpha = np.full(s_n, alpha0)
    frozen = np.zeros(s_n, dtype=np.bool_)
    n_accepted = np.zeros(s_n, dtype=np.int64)

    terms, totals, grads, clamped = cost_terms_batch(
        x, lengths, basex, basey, fracs, pair_a, pair_b,
        grid_values, grid_ox, grid_oy, grid_h,
        goal_x, goal_y, goal_th, weights, d_act, d_self, jerk_mat, jerk_quad, True)
    f = totals.copy()

    one = np.empty((1, t_n, d_n))
    for it in range(n_iters):
        active = False
        for s in range(s_n):
            if frozen[s]:
                continue
            active = True
            # gradient at the current iterate
            if it > 0:
                one[0] = x[s]
                _, tot1, g1, _ = cost_terms_batch(
                    one, lengths, basex, basey, fracs, pair_a, pair_b,
                    grid_values, grid_ox, grid_oy, grid_h,
                    goal_x, goal_y, goal_th, weights, d_act, d_self, jerk_mat, jerk_quad, True)
                g = g1[0]
            else:
                g = grads[s]

            gmax = 0.0
            vzero = True
            for r in range(t_n):
                for k in range(d_n):
                    ag = abs(g[r, k])
                    if ag > gmax:
                        gmax = ag
                    if v[s, r, k] != 0.0:
                        vzero = False
            if gmax < 1e-12:
                frozen[s] = True
                continue

            fresh = vzero
            dd = 0.0
            for r in range(t_n):
                for k in range(d_n):
                    v[s, r, k] = momentum * v[s, r, k] - g[r, k]
                    dd += g[r, k] * v[s, r, k]
            if dd >= 0.0:
                fresh = True
                dd = 0.0
                for r in range(t_n):
                    for k in range(d_n):
                        v[s, r, k] = -g[r, k]
                        dd -= g[r, k] * g[r, k]

            a = alpha[s] * 2.0
            if a > alpha_max:
                a = alpha_max
            accepted = False
            fc = 0.0
            for bt in range(max_backtracks):
                for r in range(t_n):
                    for k in range(d_n):
                        one[0, r, k] = x[s, r, k] + a * v[s, r, k]
                _, totc, _, clc = cost_terms_batch(
                    one, lengths, basex, basey, fracs, pair_a, pair_b,
                    grid_values, grid_ox, grid_oy, grid_h,
                    goal_x, goal_y, goal_th, weights, d_act, d_self, jerk_mat, jerk_quad, False)
                fc = totc[0]
                if clc[0]:
                    fc = np.inf
                if fc <= f[s] + armijo_c * a * dd:
                    accepted = True
                    break
                a *= shrink

            if accepted:
                for r in range(t_n):
                    for k in range(d_n):
                        x[s, r, k] = x[s, r, k] + a * v[s, r, k]
                f[s] = fc
                alpha[s] = a
                n_accepted[s] += 1
            else:
                for r in range(t_n):
                    for k in range(d_n):
                        v[s, r, k] = 0.0
                if fresh:
                    frozen[s] = True
        if not active:
            break

    terms, totals, grads, clamped = cost_terms_batch(
        x, lengths, basex, basey, fracs, pair_a, pair_b,
        grid_values, grid_ox, grid_oy, grid_h,
        goal_x, goal_y, goal_th, weights, d_act, d_self, jerk_mat, jerk_quad, False)
    return x, terms, totals, frozen, n_accepted
