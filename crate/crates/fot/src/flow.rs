//! Static-flow helpers on the instance graph: max-flow restricted to an arc
//! subset, feasible flow with per-arc lower bounds, and lexicographic path
//! decomposition of acyclic flows.

use crate::instance::{ArcId, Instance, NodeId};
use crate::num::Real;

/// Max-flow from source to sink on the arcs with positive capacity in `cap`,
/// by shortest augmenting paths. Returns per-arc flow (indexed like `cap`).
/// Capacities below `tol` are treated as absent.
pub fn max_flow<T: Real>(
    inst: &Instance<T>,
    cap: &[T],
    limit: T,
    tol: T,
) -> (Vec<T>, T) {
    let nodes = inst.node_count();
    let arcs = inst.arc_count();
    let mut flow = vec![T::zero(); arcs];
    let mut value = T::zero();

    loop {
        if value >= limit - tol {
            break;
        }
        // BFS over residual graph; parent[v] = (arc, forward?)
        let mut parent: Vec<Option<(ArcId, bool)>> = vec![None; nodes];
        let mut seen = vec![false; nodes];
        seen[inst.source().0] = true;
        let mut queue = std::collections::VecDeque::new();
        queue.push_back(inst.source());
        'bfs: while let Some(v) = queue.pop_front() {
            for &a in inst.out_arcs(v) {
                let head = inst.arc(a).head;
                if !seen[head.0] && cap[a.0] - flow[a.0] > tol {
                    seen[head.0] = true;
                    parent[head.0] = Some((a, true));
                    if head == inst.sink() {
                        break 'bfs;
                    }
                    queue.push_back(head);
                }
            }
            for &a in inst.in_arcs(v) {
                let tail = inst.arc(a).tail;
                if !seen[tail.0] && flow[a.0] > tol {
                    seen[tail.0] = true;
                    parent[tail.0] = Some((a, false));
                    queue.push_back(tail);
                }
            }
        }
        if !seen[inst.sink().0] {
            break;
        }
        // Bottleneck along the path.
        let mut bottleneck = limit - value;
        let mut v = inst.sink();
        while v != inst.source() {
            let (a, fwd) = parent[v.0].unwrap();
            let room = if fwd {
                cap[a.0] - flow[a.0]
            } else {
                flow[a.0]
            };
            bottleneck = bottleneck.min(room);
            v = if fwd { inst.arc(a).tail } else { inst.arc(a).head };
        }
        let mut v = inst.sink();
        while v != inst.source() {
            let (a, fwd) = parent[v.0].unwrap();
            if fwd {
                flow[a.0] = flow[a.0] + bottleneck;
                v = inst.arc(a).tail;
            } else {
                flow[a.0] = flow[a.0] - bottleneck;
                v = inst.arc(a).head;
            }
        }
        value = value + bottleneck;
    }
    (flow, value)
}

/// Feasible s-t flow of exactly `value` with per-arc bounds `low <= x <= cap`,
/// via the standard excess-node reduction to max-flow on an extended graph.
///
/// `extra_excess[v]` is additional net inflow already delivered to `v` by
/// flows pinned outside this computation; the routed flow must absorb it.
/// Returns `None` if infeasible (within `tol`).
pub fn feasible_flow_with_excess<T: Real>(
    inst: &Instance<T>,
    low: &[T],
    cap: &[T],
    extra_excess: &[T],
    value: T,
    tol: T,
) -> Option<Vec<T>> {
    let nodes = inst.node_count();
    let arcs = inst.arc_count();
    // Extended graph: original nodes + super source S + super sink K.
    // Arc list: original arcs (capacity cap-low), t->s with bounds [value,value]
    // folded into excesses, S->v / v->K for excesses.
    // We solve it with a plain adjacency max-flow since the graph is tiny.
    let s_super = nodes;
    let k_super = nodes + 1;
    let n_ext = nodes + 2;

    struct E<T> {
        to: usize,
        cap: T,
        rev: usize,
    }
    let mut adj: Vec<Vec<E<T>>> = (0..n_ext).map(|_| Vec::new()).collect();
    let mut add_edge = |adj: &mut Vec<Vec<E<T>>>, from: usize, to: usize, cap: T| -> (usize, usize) {
        let a = adj[from].len();
        let b = adj[to].len();
        adj[from].push(E { to, cap, rev: b });
        adj[to].push(E {
            to: from,
            cap: T::zero(),
            rev: a,
        });
        (from, a)
    };

    let mut excess = extra_excess.to_vec();
    let mut arc_slots = Vec::with_capacity(arcs);
    for a in inst.arcs() {
        let arc = inst.arc(a);
        if cap[a.0] < low[a.0] - tol {
            return None;
        }
        let free = (cap[a.0] - low[a.0]).max(T::zero());
        excess[arc.head.0] = excess[arc.head.0] + low[a.0];
        excess[arc.tail.0] = excess[arc.tail.0] - low[a.0];
        arc_slots.push(add_edge(&mut adj, arc.tail.0, arc.head.0, free));
    }
    // Demand `value` from s to t expressed as a t->s arc with low = cap = value.
    excess[inst.source().0] = excess[inst.source().0] + value;
    excess[inst.sink().0] = excess[inst.sink().0] - value;

    let mut required = T::zero();
    for v in 0..nodes {
        if excess[v] > tol {
            required = required + excess[v];
            add_edge(&mut adj, s_super, v, excess[v]);
        } else if excess[v] < -tol {
            add_edge(&mut adj, v, k_super, -excess[v]);
        }
    }

    // Dinic-free simple augmenting on the extended graph.
    let mut pushed = T::zero();
    loop {
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; n_ext];
        let mut seen = vec![false; n_ext];
        seen[s_super] = true;
        let mut queue = std::collections::VecDeque::new();
        queue.push_back(s_super);
        while let Some(v) = queue.pop_front() {
            for (i, e) in adj[v].iter().enumerate() {
                if !seen[e.to] && e.cap > tol {
                    seen[e.to] = true;
                    parent[e.to] = Some((v, i));
                    queue.push_back(e.to);
                }
            }
        }
        if !seen[k_super] {
            break;
        }
        let mut bottleneck = T::infinity();
        let mut v = k_super;
        while v != s_super {
            let (pv, pi) = parent[v].unwrap();
            bottleneck = bottleneck.min(adj[pv][pi].cap);
            v = pv;
        }
        let mut v = k_super;
        while v != s_super {
            let (pv, pi) = parent[v].unwrap();
            let rev = adj[pv][pi].rev;
            adj[pv][pi].cap = adj[pv][pi].cap - bottleneck;
            let to = adj[pv][pi].to;
            adj[to][rev].cap = adj[to][rev].cap + bottleneck;
            v = pv;
        }
        pushed = pushed + bottleneck;
    }
    if pushed < required - tol {
        return None;
    }
    let mut x = vec![T::zero(); arcs];
    for (a, &(from, idx)) in arc_slots.iter().enumerate() {
        let e = &adj[from][idx];
        let used = {
            // Initial free capacity minus remaining.
            let free = (cap[a] - low[a]).max(T::zero());
            free - e.cap
        };
        x[a] = low[a] + used.max(T::zero());
    }
    Some(x)
}

/// Decomposes a nonnegative acyclic s-t flow into path flows, choosing at
/// each step the lexicographically smallest arc-id sequence through the
/// remaining support. Returns `(paths, leftover)` where each path is
/// `(arcs, amount)` and `leftover` is the flow mass that could not be routed
/// (nonzero only if the input was not a clean s-t flow).
pub fn decompose_paths<T: Real>(
    inst: &Instance<T>,
    x: &[T],
    tol: T,
) -> (Vec<(Vec<ArcId>, T)>, T) {
    let mut rem = x.to_vec();
    let mut paths = Vec::new();
    loop {
        // Greedy lexicographic walk over arcs with remaining flow.
        let Some(path) = lex_path(inst, &rem, tol) else {
            break;
        };
        let amount = path
            .iter()
            .map(|a| rem[a.0])
            .fold(T::infinity(), T::min);
        for a in &path {
            rem[a.0] = rem[a.0] - amount;
        }
        paths.push((path, amount));
        if paths.len() > inst.arc_count() * inst.arc_count() + 1 {
            break;
        }
    }
    let leftover = rem.iter().fold(T::zero(), |acc, &r| acc + r.abs());
    (paths, leftover)
}

/// Lexicographically smallest (by arc id at each hop) s-t walk through the
/// support of `rem`, avoiding repeated nodes. Support of a valid thin flow is
/// acyclic, so a simple path always exists while mass remains.
fn lex_path<T: Real>(inst: &Instance<T>, rem: &[T], tol: T) -> Option<Vec<ArcId>> {
    fn dfs<T: Real>(
        inst: &Instance<T>,
        rem: &[T],
        tol: T,
        v: NodeId,
        visited: &mut Vec<bool>,
        path: &mut Vec<ArcId>,
    ) -> bool {
        if v == inst.sink() {
            return true;
        }
        visited[v.0] = true;
        let mut candidates: Vec<ArcId> = inst
            .out_arcs(v)
            .iter()
            .copied()
            .filter(|a| rem[a.0] > tol && !visited[inst.arc(*a).head.0])
            .collect();
        candidates.sort_by(|a, b| inst.arc_name(*a).cmp(inst.arc_name(*b)));
        for a in candidates {
            path.push(a);
            if dfs(inst, rem, tol, inst.arc(a).head, visited, path) {
                return true;
            }
            path.pop();
        }
        visited[v.0] = false;
        false
    }

    let mut visited = vec![false; inst.node_count()];
    let mut path = Vec::new();
    if dfs(inst, rem, tol, inst.source(), &mut visited, &mut path) {
        Some(path)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::fixtures::{parallel4, path3};

    #[test]
    fn max_flow_on_parallel_arcs() {
        let p4 = parallel4();
        let cap = vec![1.0, 1.0, 1.0, 1.0];
        let (flow, value) = max_flow(&p4, &cap, 3.0, 1e-12);
        assert!((value - 3.0).abs() < 1e-12);
        assert!((flow.iter().sum::<f64>() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn feasible_flow_respects_lower_bounds() {
        let p4 = parallel4();
        let zero = vec![0.0; 2];
        let low = vec![1.5, 0.0, 0.0, 0.0];
        let cap = vec![1.5, 3.0, 3.0, 0.0];
        let x = feasible_flow_with_excess(&p4, &low, &cap, &zero, 3.0, 1e-12).unwrap();
        assert!((x[0] - 1.5).abs() < 1e-9);
        assert!((x.iter().sum::<f64>() - 3.0).abs() < 1e-9);
        assert!(x[3].abs() < 1e-9);

        let low_bad = vec![2.0, 2.0, 0.0, 0.0];
        let cap_bad = vec![2.0, 2.0, 0.0, 0.0];
        assert!(feasible_flow_with_excess(&p4, &low_bad, &cap_bad, &zero, 3.0, 1e-12).is_none());
    }

    #[test]
    fn feasible_flow_absorbs_pinned_excess() {
        // Pinned inflow of 1.0 delivered at t must reduce what s routes there.
        let p4 = parallel4();
        let excess = vec![-1.0, 1.0];
        let low = vec![0.0; 4];
        let cap = vec![3.0; 4];
        let x = feasible_flow_with_excess(&p4, &low, &cap, &excess, 3.0, 1e-12).unwrap();
        let total: f64 = x.iter().sum();
        assert!((total - 2.0).abs() < 1e-9, "routed {total}");
    }

    #[test]
    fn decomposition_is_lexicographic() {
        let p4 = parallel4();
        let (paths, leftover) = decompose_paths(&p4, &[1.5, 1.5, 0.0, 0.0], 1e-12);
        assert!(leftover < 1e-12);
        assert_eq!(paths.len(), 2);
        assert_eq!(p4.arc_name(paths[0].0[0]), "e1");
        assert_eq!(p4.arc_name(paths[1].0[0]), "e2");
    }

    #[test]
    fn decomposition_through_interior_node() {
        let path = path3();
        let (paths, leftover) = decompose_paths(&path, &[1.0, 1.0], 1e-12);
        assert!(leftover < 1e-12);
        assert_eq!(paths.len(), 1);
        assert_eq!(paths[0].0.len(), 2);
        assert!((paths[0].1 - 1.0).abs() < 1e-12);
    }
}
