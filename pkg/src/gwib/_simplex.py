"""Transportation-problem network simplex (numba kernel).

The bipartite transport graph has ``m`` supply nodes (rows) and ``n`` demand
nodes (columns); a basis is a spanning tree with ``m + n - 1`` cells. Supplies
are perturbed (Orden's rule) so every basis is nondegenerate, which rules out
cycling; the optimal tree is then re-solved with the unperturbed masses.
"""

import numpy as np
import numba

STATUS_OPTIMAL = 0
STATUS_MAX_ITER = 1


@numba.njit(cache=True)
def _initial_basis(cost, supply, demand, basis_r, basis_c, flow):
    # least-cost (matrix minimum) rule; stable sort gives lowest-index ties
    m, n = cost.shape
    order = np.argsort(cost.ravel(), kind="mergesort")
    s = supply.copy()
    d = demand.copy()
    row_done = np.zeros(m, dtype=np.bool_)
    col_done = np.zeros(n, dtype=np.bool_)
    k = 0
    for idx in order:
        if k == m + n - 1:
            break
        i = idx // n
        j = idx % n
        if row_done[i] or col_done[j]:
            continue
        q = min(s[i], d[j])
        basis_r[k] = i
        basis_c[k] = j
        flow[k] = q
        k += 1
        s[i] -= q
        d[j] -= q
        # nondegenerate: exactly one side is exhausted, except on the final cell
        if s[i] <= d[j]:
            row_done[i] = True
        else:
            col_done[j] = True
    return k


@numba.njit(cache=True)
def _build_tree(m, n, basis_r, basis_c, cost, parent, parent_edge, depth, pot,
                adj_start, adj_edge, deg, queue):
    nnodes = m + n
    nb = nnodes - 1
    deg[:] = 0
    for e in range(nb):
        deg[basis_r[e]] += 1
        deg[m + basis_c[e]] += 1
    adj_start[0] = 0
    for v in range(nnodes):
        adj_start[v + 1] = adj_start[v] + deg[v]
    deg[:] = 0
    for e in range(nb):
        a = basis_r[e]
        b = m + basis_c[e]
        adj_edge[adj_start[a] + deg[a]] = e
        deg[a] += 1
        adj_edge[adj_start[b] + deg[b]] = e
        deg[b] += 1

    parent[:] = -2
    parent[0] = -1
    parent_edge[0] = -1
    depth[0] = 0
    pot[0] = 0.0
    head = 0
    tail = 1
    queue[0] = 0
    while head < tail:
        v = queue[head]
        head += 1
        for p in range(adj_start[v], adj_start[v + 1]):
            e = adj_edge[p]
            r = basis_r[e]
            c = m + basis_c[e]
            w = c if v == r else r
            if parent[w] != -2:
                continue
            parent[w] = v
            parent_edge[w] = e
            depth[w] = depth[v] + 1
            # u_r + v_c = cost[r, c]
            pot[w] = cost[basis_r[e], basis_c[e]] - pot[v]
            queue[tail] = w
            tail += 1
    return tail


@numba.njit(cache=True)
def _tree_flows(m, n, basis_r, basis_c, supply, demand, flow, deg, adj_start,
                adj_edge, stack):
    # leaf elimination on the basis tree with the given (unperturbed) masses
    nnodes = m + n
    nb = nnodes - 1
    rem = np.empty(nnodes)
    rem[:m] = supply
    rem[m:] = demand
    edge_done = np.zeros(nb, dtype=np.bool_)
    for v in range(nnodes):
        deg[v] = adj_start[v + 1] - adj_start[v]
    top = 0
    for v in range(nnodes):
        if deg[v] == 1:
            stack[top] = v
            top += 1
    while top > 0:
        top -= 1
        v = stack[top]
        if deg[v] != 1:
            continue
        e = -1
        for p in range(adj_start[v], adj_start[v + 1]):
            if not edge_done[adj_edge[p]]:
                e = adj_edge[p]
                break
        if e < 0:
            continue
        q = rem[v]
        flow[e] = q
        edge_done[e] = True
        w = m + basis_c[e] if v == basis_r[e] else basis_r[e]
        rem[v] = 0.0
        rem[w] -= q
        deg[v] -= 1
        deg[w] -= 1
        if deg[w] == 1:
            stack[top] = w
            top += 1


@numba.njit(cache=True)
def transport_simplex(cost, supply, demand, pert_supply, pert_demand, max_iter,
                      tol, warm_r, warm_c):
    """Solve min <cost, X> s.t. X 1 = supply, X^T 1 = demand, X >= 0.

    ``pert_supply``/``pert_demand`` are the perturbed masses driving pivots.
    ``warm_r``/``warm_c`` optionally give a starting basis (a spanning tree
    that is feasible for the same masses); pass empty arrays for a cold start.
    Returns (plan, status, n_pivots, basis_r, basis_c).
    """
    m, n = cost.shape
    nnodes = m + n
    nb = nnodes - 1
    basis_r = np.empty(nb, dtype=np.int64)
    basis_c = np.empty(nb, dtype=np.int64)
    flow = np.empty(nb)

    parent = np.empty(nnodes, dtype=np.int64)
    parent_edge = np.empty(nnodes, dtype=np.int64)
    depth = np.empty(nnodes, dtype=np.int64)
    pot = np.empty(nnodes)
    adj_start = np.empty(nnodes + 1, dtype=np.int64)
    adj_edge = np.empty(2 * nb, dtype=np.int64)
    deg = np.empty(nnodes, dtype=np.int64)
    queue = np.empty(nnodes, dtype=np.int64)
    side_a = np.empty(nnodes, dtype=np.int64)
    side_b = np.empty(nnodes, dtype=np.int64)

    warm = warm_r.shape[0] == nb
    if warm:
        basis_r[:] = warm_r
        basis_c[:] = warm_c
        reached = _build_tree(m, n, basis_r, basis_c, cost, parent, parent_edge,
                              depth, pot, adj_start, adj_edge, deg, queue)
        if reached != nnodes:
            warm = False
        else:
            _tree_flows(m, n, basis_r, basis_c, pert_supply, pert_demand, flow,
                        deg, adj_start, adj_edge, queue)
            for e in range(nb):
                if not flow[e] > 0.0:
                    warm = False
                    break
    if not warm:
        _initial_basis(cost, pert_supply, pert_demand, basis_r, basis_c, flow)

    in_basis = np.zeros(m * n, dtype=np.bool_)
    for e in range(nb):
        in_basis[basis_r[e] * n + basis_c[e]] = True

    ncells = m * n
    block = max(int(np.sqrt(ncells)), 10)
    if block > ncells:
        block = ncells
    cursor = 0
    status = STATUS_MAX_ITER
    pivots = 0
    while pivots <= max_iter:
        _build_tree(m, n, basis_r, basis_c, cost, parent, parent_edge, depth,
                    pot, adj_start, adj_edge, deg, queue)
        # block search: first block holding a violating cell, most negative
        # reduced cost inside it, lowest scan index on ties
        best = -tol
        enter = -1
        scanned = 0
        while scanned < ncells:
            stop = min(scanned + block, ncells)
            while scanned < stop:
                idx = cursor + scanned
                if idx >= ncells:
                    idx -= ncells
                scanned += 1
                if in_basis[idx]:
                    continue
                i = idx // n
                j = idx % n
                rc = cost[i, j] - pot[i] - pot[m + j]
                if rc < best:
                    best = rc
                    enter = idx
            if enter >= 0:
                break
        if enter < 0:
            status = STATUS_OPTIMAL
            break
        if pivots == max_iter:
            break
        pivots += 1
        cursor = enter
        ei = enter // n
        ej = enter % n

        # cycle: tree path from column node back to row node
        a = ei
        b = m + ej
        na = 0
        nbk = 0
        while depth[a] > depth[b]:
            side_a[na] = parent_edge[a]
            na += 1
            a = parent[a]
        while depth[b] > depth[a]:
            side_b[nbk] = parent_edge[b]
            nbk += 1
            b = parent[b]
        while a != b:
            side_a[na] = parent_edge[a]
            na += 1
            a = parent[a]
            side_b[nbk] = parent_edge[b]
            nbk += 1
            b = parent[b]

        # edges at odd (1-based) positions from either endpoint lose mass
        theta = np.inf
        leave = -1
        for k in range(0, na, 2):
            e = side_a[k]
            if flow[e] < theta:
                theta = flow[e]
                leave = e
        for k in range(0, nbk, 2):
            e = side_b[k]
            if flow[e] < theta or (flow[e] == theta and e < leave):
                theta = flow[e]
                leave = e
        for k in range(na):
            e = side_a[k]
            if k % 2 == 0:
                flow[e] -= theta
            else:
                flow[e] += theta
        for k in range(nbk):
            e = side_b[k]
            if k % 2 == 0:
                flow[e] -= theta
            else:
                flow[e] += theta

        in_basis[basis_r[leave] * n + basis_c[leave]] = False
        basis_r[leave] = ei
        basis_c[leave] = ej
        flow[leave] = theta
        in_basis[enter] = True

    # re-solve the final tree with the true masses
    _build_tree(m, n, basis_r, basis_c, cost, parent, parent_edge, depth, pot,
                adj_start, adj_edge, deg, queue)
    true_flow = np.empty(nb)
    _tree_flows(m, n, basis_r, basis_c, supply, demand, true_flow, deg, adj_start,
                adj_edge, queue)
    plan = np.zeros((m, n))
    for e in range(nb):
        q = true_flow[e]
        if q < 0.0:
            q = 0.0
        plan[basis_r[e], basis_c[e]] = q
    return plan, status, pivots, basis_r, basis_c
