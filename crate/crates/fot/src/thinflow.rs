//! Configurations of active and queueing arcs, and the thin-flow equations
//! that drive equilibrium trajectories.
//!
//! A configuration fixes, for one phase, which arcs lie on current shortest
//! paths (active, `E'`) and which carry queues (resetting, `E*`). The thin
//! flow for a valid configuration is a static s-t flow `x` of value `u0`
//! together with label derivatives `lambda` satisfying
//!
//! ```text
//! lambda_s = 1
//! lambda_w = min over active e=vw of rho_e(lambda_v, x_e)
//! lambda_w = rho_e(lambda_v, x_e)      on flow-carrying active arcs
//! rho_e = x_e / nu_e                   on resetting arcs
//! rho_e = max(lambda_v, x_e / nu_e)    on active non-resetting arcs
//! ```
//!
//! `lambda` is unique; `x` need not be. The production solver is a
//! fixed-point label iteration gated by `check_thin_flow`; it falls back to
//! the exhaustive support-enumeration oracle whenever the iteration fails to
//! produce a certified solution.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::flow::{feasible_flow_with_excess, max_flow};
use crate::instance::{ArcId, Instance, LabelVector, NodeId};
use crate::linalg::solve_dense;
use crate::num::Real;

/// Default arc-count cap for the support-enumeration oracle.
pub const DEFAULT_ORACLE_ARC_CAP: usize = 16;

/// Pair of arc sets (active `E'`, resetting `E*`), stored as dense masks.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Configuration {
    active: Vec<bool>,
    resetting: Vec<bool>,
}

impl Configuration {
    /// Builds a configuration, enforcing `resetting subset-of active`.
    pub fn new(
        arc_count: usize,
        active: impl IntoIterator<Item = ArcId>,
        resetting: impl IntoIterator<Item = ArcId>,
    ) -> Result<Self, InvalidConfiguration> {
        let mut cfg = Configuration {
            active: vec![false; arc_count],
            resetting: vec![false; arc_count],
        };
        for a in active {
            cfg.active[a.0] = true;
        }
        for a in resetting {
            cfg.resetting[a.0] = true;
        }
        match cfg.resetting.iter().zip(&cfg.active).position(|(&r, &a)| r && !a) {
            None => Ok(cfg),
            Some(i) => Err(InvalidConfiguration {
                violations: vec![format!("resetting arc #{i} is not active")],
            }),
        }
    }

    pub(crate) fn from_masks(active: Vec<bool>, resetting: Vec<bool>) -> Self {
        Configuration { active, resetting }
    }

    /// Convenience constructor from arc names; unknown names are an error.
    pub fn from_names<T: Real>(
        inst: &Instance<T>,
        active: &[&str],
        resetting: &[&str],
    ) -> Result<Self, InvalidConfiguration> {
        let resolve = |names: &[&str]| -> Result<Vec<ArcId>, InvalidConfiguration> {
            names
                .iter()
                .map(|n| {
                    inst.arc_id(n).ok_or_else(|| InvalidConfiguration {
                        violations: vec![format!("unknown arc {n}")],
                    })
                })
                .collect()
        };
        Configuration::new(inst.arc_count(), resolve(active)?, resolve(resetting)?)
    }

    pub fn is_active(&self, a: ArcId) -> bool {
        self.active[a.0]
    }

    pub fn is_resetting(&self, a: ArcId) -> bool {
        self.resetting[a.0]
    }

    pub fn active_arcs(&self) -> impl Iterator<Item = ArcId> + '_ {
        self.active
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| ArcId(i))
    }

    pub fn resetting_arcs(&self) -> impl Iterator<Item = ArcId> + '_ {
        self.resetting
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| ArcId(i))
    }
}

/// Generalized subnetwork `(allowed, forced_queue)`: arcs outside `allowed`
/// are permanently inactive, arcs in `forced_queue` are treated as always
/// carrying a queue (their hyperplanes are removed from the arrangement).
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct GeneralizedSubnetwork {
    allowed: Vec<bool>,
    forced_queue: Vec<bool>,
}

impl GeneralizedSubnetwork {
    /// The whole network: all arcs allowed, no forced queues.
    pub fn full<T: Real>(inst: &Instance<T>) -> Self {
        GeneralizedSubnetwork {
            allowed: vec![true; inst.arc_count()],
            forced_queue: vec![false; inst.arc_count()],
        }
    }

    /// Builds a generalized subnetwork; the pair itself must be a valid
    /// configuration of the instance.
    pub fn new<T: Real>(
        inst: &Instance<T>,
        allowed: impl IntoIterator<Item = ArcId>,
        forced_queue: impl IntoIterator<Item = ArcId>,
    ) -> Result<Self, InvalidConfiguration> {
        let cfg = Configuration::new(inst.arc_count(), allowed, forced_queue)?;
        is_valid_configuration(inst, &cfg)?;
        Ok(GeneralizedSubnetwork {
            allowed: cfg.active,
            forced_queue: cfg.resetting,
        })
    }

    pub fn from_names<T: Real>(
        inst: &Instance<T>,
        allowed: &[&str],
        forced_queue: &[&str],
    ) -> Result<Self, InvalidConfiguration> {
        let cfg = Configuration::from_names(inst, allowed, forced_queue)?;
        is_valid_configuration(inst, &cfg)?;
        Ok(GeneralizedSubnetwork {
            allowed: cfg.active,
            forced_queue: cfg.resetting,
        })
    }

    pub fn allows(&self, a: ArcId) -> bool {
        self.allowed[a.0]
    }

    pub fn forces_queue(&self, a: ArcId) -> bool {
        self.forced_queue[a.0]
    }

    /// Arcs whose hyperplane participates in event detection.
    pub fn has_hyperplane(&self, a: ArcId) -> bool {
        self.allowed[a.0] && !self.forced_queue[a.0]
    }
}

/// Static s-t flow plus label derivatives solving the thin-flow equations.
#[derive(Clone, Debug)]
pub struct ThinFlow<T> {
    /// Per-arc flow value, zero outside the active set.
    pub x: Vec<T>,
    /// Per-node label derivative; `lambda_s = 1`.
    pub lambda: LabelVector<T>,
}

impl<T: Real> ThinFlow<T> {
    /// JSON form `{"lambda": {node: value}, "x": {arc: value}}`.
    pub fn to_json(&self, inst: &Instance<T>) -> String {
        let lambda: BTreeMap<&str, f64> = inst
            .nodes()
            .map(|v| (inst.node_name(v), self.lambda.get(v).to_f64_lossy()))
            .collect();
        let x: BTreeMap<&str, f64> = inst
            .arcs()
            .map(|a| (inst.arc_name(a), self.x[a.0].to_f64_lossy()))
            .collect();
        serde_json::to_string_pretty(&serde_json::json!({ "lambda": lambda, "x": x }))
            .expect("thin flow serializes")
    }
}

#[derive(Debug, Error, Clone)]
#[error("invalid configuration: {}", violations.join("; "))]
pub struct InvalidConfiguration {
    pub violations: Vec<String>,
}

#[derive(Debug, Error)]
pub enum ThinFlowError {
    #[error(transparent)]
    Invalid(#[from] InvalidConfiguration),
    #[error("thin-flow solver failed to converge (max residual {residual:.3e}) and oracle found no certified candidate")]
    NotConverged { residual: f64 },
    #[error("oracle cap exceeded: instance has {arcs} arcs, cap is {cap}")]
    OracleCapExceeded { arcs: usize, cap: usize },
    #[error("oracle exhausted all candidate supports without a certified solution")]
    OracleExhausted,
}

/// Classifies arcs at label `l` within a generalized subnetwork: active means
/// `l_w >= l_v + tau_e - eta` (and allowed), resetting means
/// `l_w > l_v + tau_e + eta` (or forced). Arcs within `eta` of their
/// hyperplane are active non-resetting.
pub fn classify_configuration<T: Real>(
    inst: &Instance<T>,
    l: &LabelVector<T>,
    sub: &GeneralizedSubnetwork,
    eta: T,
) -> Configuration {
    let mut active = vec![false; inst.arc_count()];
    let mut resetting = vec![false; inst.arc_count()];
    for a in inst.arcs() {
        if !sub.allows(a) {
            continue;
        }
        let arc = inst.arc(a);
        let slack = l.get(arc.head) - l.get(arc.tail) - arc.tau;
        active[a.0] = slack >= -eta;
        resetting[a.0] = sub.forces_queue(a) || slack > eta;
    }
    Configuration::from_masks(active, resetting)
}

/// Checks the three validity conditions: (i) every node reachable from the
/// source via active arcs, (ii) every resetting arc on an s-t path of active
/// arcs, (iii) no resetting arc on a directed cycle of active arcs. All
/// violations are reported, each naming the condition and the offender.
pub fn is_valid_configuration<T: Real>(
    inst: &Instance<T>,
    cfg: &Configuration,
) -> Result<(), InvalidConfiguration> {
    let mut violations = Vec::new();
    for a in inst.arcs() {
        if cfg.is_resetting(a) && !cfg.is_active(a) {
            violations.push(format!("resetting arc {} is not active", inst.arc_name(a)));
        }
    }

    let fwd = active_reach(inst, cfg, inst.source(), false);
    for v in inst.nodes() {
        if !fwd[v.0] {
            violations.push(format!(
                "(i): node {} unreachable from source via active arcs",
                inst.node_name(v)
            ));
        }
    }

    let bwd = active_reach(inst, cfg, inst.sink(), true);
    for a in inst.arcs() {
        if !cfg.is_resetting(a) {
            continue;
        }
        let arc = inst.arc(a);
        if !(fwd[arc.tail.0] && bwd[arc.head.0]) {
            violations.push(format!(
                "(ii): no s-t path through resetting arc {}",
                inst.arc_name(a)
            ));
        }
        // On a cycle iff head reaches tail over active arcs.
        let back = active_reach(inst, cfg, arc.head, false);
        if back[arc.tail.0] {
            violations.push(format!(
                "(iii): resetting arc {} lies on an active cycle",
                inst.arc_name(a)
            ));
        }
    }

    if violations.is_empty() {
        Ok(())
    } else {
        Err(InvalidConfiguration { violations })
    }
}

fn active_reach<T: Real>(
    inst: &Instance<T>,
    cfg: &Configuration,
    start: NodeId,
    backward: bool,
) -> Vec<bool> {
    let mut seen = vec![false; inst.node_count()];
    seen[start.0] = true;
    let mut stack = vec![start];
    while let Some(v) = stack.pop() {
        let arcs = if backward {
            inst.in_arcs(v)
        } else {
            inst.out_arcs(v)
        };
        for &a in arcs {
            if !cfg.is_active(a) {
                continue;
            }
            let next = if backward {
                inst.arc(a).tail
            } else {
                inst.arc(a).head
            };
            if !seen[next.0] {
                seen[next.0] = true;
                stack.push(next);
            }
        }
    }
    seen
}

/// Residuals of each thin-flow condition; `passes` iff all are at most the
/// checking tolerance. Arcs with `x_e > eta` count as flow-carrying.
#[derive(Clone, Debug)]
pub struct ThinFlowReport<T> {
    pub conservation: T,
    pub flow_value: T,
    pub source_label: T,
    pub min_condition: T,
    pub flow_equality: T,
    pub support: T,
    pub nonnegativity: T,
    pub positivity: T,
    eta: T,
}

impl<T: Real> ThinFlowReport<T> {
    pub fn passes(&self) -> bool {
        self.max_residual() <= self.eta
    }

    pub fn max_residual(&self) -> T {
        [
            self.conservation,
            self.flow_value,
            self.source_label,
            self.min_condition,
            self.flow_equality,
            self.support,
            self.nonnegativity,
            self.positivity,
        ]
        .into_iter()
        .fold(T::zero(), T::max)
    }
}

fn rho<T: Real>(resetting: bool, lambda_tail: T, x: T, nu: T) -> T {
    if resetting {
        x / nu
    } else {
        lambda_tail.max(x / nu)
    }
}

/// Reports the max violation of every thin-flow condition for `(x, lambda)`
/// under `cfg`.
pub fn check_thin_flow<T: Real>(
    inst: &Instance<T>,
    cfg: &Configuration,
    tf: &ThinFlow<T>,
    eta: T,
) -> ThinFlowReport<T> {
    let zero = T::zero();
    let mut report = ThinFlowReport {
        conservation: zero,
        flow_value: zero,
        source_label: (tf.lambda.get(inst.source()) - T::one()).abs(),
        min_condition: zero,
        flow_equality: zero,
        support: zero,
        nonnegativity: zero,
        positivity: zero,
        eta,
    };

    for a in inst.arcs() {
        let x = tf.x[a.0];
        report.nonnegativity = report.nonnegativity.max(-x);
        if !cfg.is_active(a) {
            report.support = report.support.max(x.abs());
        }
    }
    for v in inst.nodes() {
        let mut net = zero;
        for &a in inst.in_arcs(v) {
            net = net + tf.x[a.0];
        }
        for &a in inst.out_arcs(v) {
            net = net - tf.x[a.0];
        }
        if v == inst.source() {
            report.flow_value = report.flow_value.max((net + inst.inflow_rate()).abs());
        } else if v == inst.sink() {
            report.flow_value = report.flow_value.max((net - inst.inflow_rate()).abs());
        } else {
            report.conservation = report.conservation.max(net.abs());
        }
    }
    for v in inst.nodes() {
        report.positivity = report.positivity.max(-tf.lambda.get(v));
        if v == inst.source() {
            continue;
        }
        let mut best = T::infinity();
        for &a in inst.in_arcs(v) {
            if !cfg.is_active(a) {
                continue;
            }
            let arc = inst.arc(a);
            let r = rho(
                cfg.is_resetting(a),
                tf.lambda.get(arc.tail),
                tf.x[a.0],
                arc.nu,
            );
            best = best.min(r);
            if tf.x[a.0] > eta {
                report.flow_equality = report
                    .flow_equality
                    .max((tf.lambda.get(v) - r).abs());
            }
        }
        let gap = if best.is_finite() {
            (tf.lambda.get(v) - best).abs()
        } else {
            T::infinity()
        };
        report.min_condition = report.min_condition.max(gap);
    }
    report
}

/// Solves the thin-flow equations for a valid configuration.
///
/// Strategy: fixed-point label iteration starting from `lambda = kappa`
/// (route `u0` by a flow consistent with the current labels, then recompute
/// labels by the Bellman min over `rho_e`), gated by `check_thin_flow`. On
/// non-convergence or a failed check the support-enumeration oracle takes
/// over for instances within the oracle cap.
pub fn solve_thin_flow<T: Real>(
    inst: &Instance<T>,
    cfg: &Configuration,
    eta: T,
) -> Result<ThinFlow<T>, ThinFlowError> {
    solve_thin_flow_with(inst, cfg, eta, DEFAULT_ORACLE_ARC_CAP)
}

/// As `solve_thin_flow`, with an explicit oracle arc cap.
pub fn solve_thin_flow_with<T: Real>(
    inst: &Instance<T>,
    cfg: &Configuration,
    eta: T,
    oracle_cap: usize,
) -> Result<ThinFlow<T>, ThinFlowError> {
    is_valid_configuration(inst, cfg)?;

    let n = inst.node_count();
    let kappa = inst.kappa();
    let mut lambda = LabelVector(vec![kappa; n]);
    lambda.set(inst.source(), T::one());

    let max_iter = 10 * n;
    for _ in 0..max_iter {
        let x = route_flow(inst, cfg, &lambda, eta);
        let next = bellman_labels(inst, cfg, &x, eta);
        let delta = lambda.inf_distance(&next);
        lambda = next;
        if delta <= eta {
            break;
        }
    }
    let x = route_flow(inst, cfg, &lambda, eta);
    let tf = ThinFlow { x, lambda };
    let report = check_thin_flow(inst, cfg, &tf, eta);
    if report.passes() {
        return Ok(tf);
    }

    match thin_flow_oracle_with(inst, cfg, eta, oracle_cap) {
        Ok(tf) => Ok(tf),
        Err(ThinFlowError::OracleCapExceeded { .. }) => Err(ThinFlowError::NotConverged {
            residual: report.max_residual().to_f64_lossy(),
        }),
        Err(e) => Err(e),
    }
}

/// Routes `u0` units consistently with the min/rho structure induced by the
/// current labels: resetting arcs and active arcs with strictly increasing
/// labels must carry exactly `nu_e * lambda_w`; boundary arcs may carry up to
/// that. Falls back to a plain max-flow when the bounds are infeasible.
fn route_flow<T: Real>(
    inst: &Instance<T>,
    cfg: &Configuration,
    lambda: &LabelVector<T>,
    eta: T,
) -> Vec<T> {
    let m = inst.arc_count();
    let mut low = vec![T::zero(); m];
    let mut cap = vec![T::zero(); m];
    for a in inst.arcs() {
        if !cfg.is_active(a) {
            continue;
        }
        let arc = inst.arc(a);
        let lw = lambda.get(arc.head);
        let lv = lambda.get(arc.tail);
        let target = (arc.nu * lw).max(T::zero());
        if cfg.is_resetting(a) || lw > lv + eta {
            low[a.0] = target;
            cap[a.0] = target;
        } else if lw >= lv - eta {
            cap[a.0] = target;
        }
    }
    let excess = vec![T::zero(); inst.node_count()];
    if let Some(x) = feasible_flow_with_excess(inst, &low, &cap, &excess, inst.inflow_rate(), eta) {
        return x;
    }
    let (x, _) = max_flow(inst, &cap, inst.inflow_rate(), eta);
    x
}

/// Bellman recomputation of labels for a fixed flow: monotone relaxation
/// from above over the active arcs.
fn bellman_labels<T: Real>(
    inst: &Instance<T>,
    cfg: &Configuration,
    x: &[T],
    eta: T,
) -> LabelVector<T> {
    let n = inst.node_count();
    let mut lambda = LabelVector(vec![T::infinity(); n]);
    lambda.set(inst.source(), T::one());
    for _ in 0..n + 1 {
        let mut changed = false;
        for v in inst.nodes() {
            if v == inst.source() {
                continue;
            }
            let mut best = T::infinity();
            for &a in inst.in_arcs(v) {
                if !cfg.is_active(a) {
                    continue;
                }
                let arc = inst.arc(a);
                let lt = lambda.get(arc.tail);
                if !lt.is_finite() {
                    continue;
                }
                best = best.min(rho(cfg.is_resetting(a), lt, x[a.0], arc.nu));
            }
            if best < lambda.get(v) - eta * T::real(0.01) {
                lambda.set(v, best);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    lambda
}

/// Exhaustive thin-flow oracle: enumerates candidate flow supports (subsets
/// of active arcs containing all resetting arcs, closed under s-t paths) and
/// per-support case assignments of each `max(lambda_v, x_e/nu_e)` term, solves
/// the resulting linear systems, and returns the first candidate that passes
/// `check_thin_flow`.
pub fn thin_flow_oracle<T: Real>(
    inst: &Instance<T>,
    cfg: &Configuration,
    eta: T,
) -> Result<ThinFlow<T>, ThinFlowError> {
    thin_flow_oracle_with(inst, cfg, eta, DEFAULT_ORACLE_ARC_CAP)
}

/// As `thin_flow_oracle` with an explicit arc cap.
pub fn thin_flow_oracle_with<T: Real>(
    inst: &Instance<T>,
    cfg: &Configuration,
    eta: T,
    cap: usize,
) -> Result<ThinFlow<T>, ThinFlowError> {
    is_valid_configuration(inst, cfg)?;
    if inst.arc_count() > cap {
        return Err(ThinFlowError::OracleCapExceeded {
            arcs: inst.arc_count(),
            cap,
        });
    }

    let optional: Vec<ArcId> = cfg
        .active_arcs()
        .filter(|&a| !cfg.is_resetting(a))
        .collect();
    let mandatory: Vec<ArcId> = cfg.resetting_arcs().collect();
    let k = optional.len();

    // Supports in descending size: full supports are the common case.
    let mut masks: Vec<u32> = (0..(1u32 << k)).collect();
    masks.sort_by_key(|m| std::cmp::Reverse(m.count_ones()));

    for mask in masks {
        let mut support: Vec<ArcId> = mandatory.clone();
        for (bit, &a) in optional.iter().enumerate() {
            if mask & (1 << bit) != 0 {
                support.push(a);
            }
        }
        if support.is_empty() || !support_is_path_closed(inst, &support) {
            continue;
        }
        // Which support arcs get a case split (non-resetting only).
        let split: Vec<usize> = (0..support.len())
            .filter(|&i| !cfg.is_resetting(support[i]))
            .collect();
        for case in 0..(1u32 << split.len()) {
            // q_bound[i] == true: lambda_w = x_e / nu_e with x_e >= nu lambda_v.
            let mut q_bound = vec![true; support.len()];
            for (bit, &i) in split.iter().enumerate() {
                q_bound[i] = case & (1 << bit) != 0;
            }
            if let Some(tf) = try_candidate(inst, cfg, &support, &q_bound, eta) {
                return Ok(tf);
            }
        }
    }
    Err(ThinFlowError::OracleExhausted)
}

/// Every support arc must lie on an s-t path within the support, and the
/// sink must be reachable; otherwise the support cannot carry a positive
/// acyclic s-t flow on all of its arcs.
fn support_is_path_closed<T: Real>(inst: &Instance<T>, support: &[ArcId]) -> bool {
    let n = inst.node_count();
    let mut in_support = vec![false; inst.arc_count()];
    for &a in support {
        in_support[a.0] = true;
    }
    let reach = |start: NodeId, backward: bool| -> Vec<bool> {
        let mut seen = vec![false; n];
        seen[start.0] = true;
        let mut stack = vec![start];
        while let Some(v) = stack.pop() {
            let arcs = if backward {
                inst.in_arcs(v)
            } else {
                inst.out_arcs(v)
            };
            for &a in arcs {
                if !in_support[a.0] {
                    continue;
                }
                let next = if backward {
                    inst.arc(a).tail
                } else {
                    inst.arc(a).head
                };
                if !seen[next.0] {
                    seen[next.0] = true;
                    stack.push(next);
                }
            }
        }
        seen
    };
    let fwd = reach(inst.source(), false);
    let bwd = reach(inst.sink(), true);
    if !fwd[inst.sink().0] {
        return false;
    }
    support
        .iter()
        .all(|&a| fwd[inst.arc(a).tail.0] && bwd[inst.arc(a).head.0])
}

/// Solves one (support, case-assignment) candidate.
///
/// v-bound arcs (`lambda_w = lambda_v`) merge their endpoints; q-bound and
/// resetting arcs substitute `x_e = nu_e lambda_w`, leaving a square linear
/// system in the merged label classes. Flows on v-bound arcs are then routed
/// by a feasibility computation, and the full checker has the last word.
fn try_candidate<T: Real>(
    inst: &Instance<T>,
    cfg: &Configuration,
    support: &[ArcId],
    q_bound: &[bool],
    eta: T,
) -> Option<ThinFlow<T>> {
    let n = inst.node_count();

    // Union-find over v-bound arc endpoints.
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, v: usize) -> usize {
        if parent[v] != v {
            let root = find(parent, parent[v]);
            parent[v] = root;
        }
        parent[v]
    }
    for (i, &a) in support.iter().enumerate() {
        if !q_bound[i] {
            let arc = inst.arc(a);
            let (rt, rh) = (find(&mut parent, arc.tail.0), find(&mut parent, arc.head.0));
            if rt != rh {
                parent[rt] = rh;
            }
        }
    }
    let mut class_of = vec![usize::MAX; n];
    let mut classes = Vec::new();
    for v in 0..n {
        let root = find(&mut parent, v);
        if class_of[root] == usize::MAX {
            class_of[root] = classes.len();
            classes.push(root);
        }
        class_of[v] = class_of[root];
    }
    let c = classes.len();
    let s_cls = class_of[inst.source().0];
    let t_cls = class_of[inst.sink().0];

    // Square system over class labels. Row layout: the s-class row pins
    // lambda = 1; conservation rows for every other class (save the t-class
    // when separate, whose row is implied); a value row when t is separate.
    let mut matrix = vec![T::zero(); c * c];
    let mut rhs = vec![T::zero(); c];
    let mut row = 0usize;
    matrix[row * c + s_cls] = T::one();
    rhs[row] = T::one();
    row += 1;

    // Net q-flow into `cls`: q-bound arcs contribute nu_e * lambda_cls(head).
    // (v-bound arcs are internal to a class and cancel out of its row.)
    let add_conservation = |matrix: &mut Vec<T>, row: usize, cls: usize| {
        for (i, &a) in support.iter().enumerate() {
            if !q_bound[i] {
                continue;
            }
            let arc = inst.arc(a);
            let head_cls = class_of[arc.head.0];
            let tail_cls = class_of[arc.tail.0];
            if head_cls == cls {
                matrix[row * c + head_cls] = matrix[row * c + head_cls] + arc.nu;
            }
            if tail_cls == cls {
                matrix[row * c + head_cls] = matrix[row * c + head_cls] - arc.nu;
            }
        }
    };

    for cls in 0..c {
        if cls == s_cls || (cls == t_cls && s_cls != t_cls) {
            continue;
        }
        add_conservation(&mut matrix, row, cls);
        row += 1;
    }
    if s_cls != t_cls {
        // Value row at the source class: net q-outflow equals u0.
        add_conservation(&mut matrix, row, s_cls);
        for k in 0..c {
            matrix[row * c + k] = -matrix[row * c + k];
        }
        rhs[row] = inst.inflow_rate();
        row += 1;
    }
    debug_assert_eq!(row, c);

    let pivot_tol = eta * T::real(1e-3);
    let class_lambda = solve_dense(&mut matrix, &mut rhs, c, pivot_tol)?;
    if class_lambda.iter().any(|l| !l.is_finite()) {
        return None;
    }

    // Assemble labels for support-touched nodes; fill the rest by Bellman
    // relaxation over zero-flow active arcs afterwards.
    let mut touched = vec![false; n];
    touched[inst.source().0] = true;
    touched[inst.sink().0] = true;
    for &a in support {
        touched[inst.arc(a).tail.0] = true;
        touched[inst.arc(a).head.0] = true;
    }
    let mut lambda = LabelVector(vec![T::infinity(); n]);
    for v in 0..n {
        if touched[v] {
            lambda.0[v] = class_lambda[class_of[v]];
            // Labels must be positive; reject before routing flow.
            if lambda.0[v] <= T::zero() {
                return None;
            }
        }
    }

    // Flows: q-bound and resetting arcs are pinned; v-bound flows are routed
    // within [0, nu lambda_w] against the pinned divergence.
    let mut x = vec![T::zero(); inst.arc_count()];
    let mut excess = vec![T::zero(); n];
    for (i, &a) in support.iter().enumerate() {
        if q_bound[i] {
            let arc = inst.arc(a);
            let val = arc.nu * lambda.get(arc.head);
            x[a.0] = val;
            excess[arc.head.0] = excess[arc.head.0] + val;
            excess[arc.tail.0] = excess[arc.tail.0] - val;
        }
    }
    let low = vec![T::zero(); inst.arc_count()];
    let mut capacity = vec![T::zero(); inst.arc_count()];
    for (i, &a) in support.iter().enumerate() {
        if !q_bound[i] {
            let arc = inst.arc(a);
            capacity[a.0] = (arc.nu * lambda.get(arc.head)).max(T::zero());
        }
    }
    let routed =
        feasible_flow_with_excess(inst, &low, &capacity, &excess, inst.inflow_rate(), eta)?;
    for (i, &a) in support.iter().enumerate() {
        if !q_bound[i] {
            x[a.0] = routed[a.0];
        }
    }

    // Case inequalities: q-bound needs x >= nu lambda_v, v-bound needs
    // x <= nu lambda_v (loose by eta).
    for (i, &a) in support.iter().enumerate() {
        if cfg.is_resetting(a) {
            continue;
        }
        let arc = inst.arc(a);
        let bound = arc.nu * lambda.get(arc.tail);
        if q_bound[i] {
            if x[a.0] < bound - eta {
                return None;
            }
        } else if x[a.0] > bound + eta {
            return None;
        }
    }

    // Extend labels to untouched nodes: with zero flow, every non-resetting
    // active in-arc contributes rho = lambda_tail.
    for _ in 0..n + 1 {
        let mut changed = false;
        for v in inst.nodes() {
            if v == inst.source() || touched[v.0] {
                continue;
            }
            let mut best = T::infinity();
            for &a in inst.in_arcs(v) {
                if !cfg.is_active(a) || cfg.is_resetting(a) {
                    continue;
                }
                let lt = lambda.get(inst.arc(a).tail);
                if lt.is_finite() {
                    best = best.min(lt);
                }
            }
            if best < lambda.get(v) {
                lambda.set(v, best);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    if lambda.0.iter().any(|l| !l.is_finite()) {
        return None;
    }

    let tf = ThinFlow { x, lambda };
    if check_thin_flow(inst, cfg, &tf, eta).passes() {
        Some(tf)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::fixtures::{parallel4, path3, single_arc};
    use crate::instance::LabelVector;

    fn names(cfg: &Configuration, inst: &Instance<f64>) -> (Vec<String>, Vec<String>) {
        (
            cfg.active_arcs()
                .map(|a| inst.arc_name(a).to_string())
                .collect(),
            cfg.resetting_arcs()
                .map(|a| inst.arc_name(a).to_string())
                .collect(),
        )
    }

    #[test]
    fn classify_parallel4_examples() {
        let p4 = parallel4();
        let full = GeneralizedSubnetwork::full(&p4);
        let eta = 1e-9;

        let cfg = classify_configuration(&p4, &LabelVector(vec![0.0, 3.0]), &full, eta);
        assert_eq!(names(&cfg, &p4), (vec!["e1".to_string()], vec![]));

        let cfg = classify_configuration(&p4, &LabelVector(vec![5.0, 12.0]), &full, eta);
        assert_eq!(
            names(&cfg, &p4),
            (
                vec!["e1".to_string(), "e2".to_string(), "e3".to_string()],
                vec!["e1".to_string(), "e2".to_string()]
            )
        );

        let sub = GeneralizedSubnetwork::from_names(&p4, &["e1", "e2"], &[]).unwrap();
        let cfg = classify_configuration(&p4, &LabelVector(vec![1.0, 6.0]), &sub, eta);
        assert_eq!(
            names(&cfg, &p4),
            (
                vec!["e1".to_string(), "e2".to_string()],
                vec!["e1".to_string()]
            )
        );
    }

    #[test]
    fn validity_examples() {
        let p4 = parallel4();
        let cfg = Configuration::from_names(&p4, &["e1"], &["e1"]).unwrap();
        assert!(is_valid_configuration(&p4, &cfg).is_ok());

        let cfg = Configuration::from_names(&p4, &["e1", "e2", "e3"], &["e1", "e2"]).unwrap();
        assert!(is_valid_configuration(&p4, &cfg).is_ok());

        let path = path3();
        let cfg = Configuration::from_names(&path, &["sv"], &["sv"]).unwrap();
        let err = is_valid_configuration(&path, &cfg).unwrap_err();
        assert!(err
            .violations
            .iter()
            .any(|v| v.contains("(ii): no s-t path through resetting arc sv")));
    }

    #[test]
    fn cycle_condition_detected() {
        let inst: Instance<f64> = Instance::new(
            vec!["s".into(), "v".into(), "w".into(), "t".into()],
            vec![
                ("sv".into(), "s".into(), "v".into(), 1.0, 1.0),
                ("vw".into(), "v".into(), "w".into(), 1.0, 1.0),
                ("wv".into(), "w".into(), "v".into(), 1.0, 1.0),
                ("vt".into(), "v".into(), "t".into(), 1.0, 1.0),
            ],
            "s",
            "t",
            1.0,
        )
        .unwrap();
        let cfg = Configuration::from_names(&inst, &["sv", "vw", "wv", "vt"], &["vw"]).unwrap();
        let err = is_valid_configuration(&inst, &cfg).unwrap_err();
        assert!(err.violations.iter().any(|v| v.contains("(iii)")));
    }

    #[test]
    fn solve_single_arc_spare_capacity() {
        let inst = single_arc(2.0, 1.0, 1.0);
        let cfg = Configuration::from_names(&inst, &["e"], &[]).unwrap();
        let tf = solve_thin_flow(&inst, &cfg, 1e-9).unwrap();
        assert!((tf.lambda.0[0] - 1.0).abs() < 1e-9);
        assert!((tf.lambda.0[1] - 1.0).abs() < 1e-9);
        assert!((tf.x[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn solve_parallel4_phase_two() {
        let p4 = parallel4();
        let cfg = Configuration::from_names(&p4, &["e1", "e2"], &["e1"]).unwrap();
        let tf = solve_thin_flow(&p4, &cfg, 1e-9).unwrap();
        assert!((tf.lambda.0[1] - 1.5).abs() < 1e-9);
        assert!((tf.x[0] - 1.5).abs() < 1e-9);
        assert!((tf.x[1] - 1.5).abs() < 1e-9);
    }

    #[test]
    fn solve_parallel4_steady_phase() {
        let p4 = parallel4();
        let cfg = Configuration::from_names(&p4, &["e1", "e2", "e3"], &["e1", "e2"]).unwrap();
        let tf = solve_thin_flow(&p4, &cfg, 1e-9).unwrap();
        assert!((tf.lambda.0[1] - 1.0).abs() < 1e-9);
        for i in 0..3 {
            assert!((tf.x[i] - 1.0).abs() < 1e-9, "x = {:?}", tf.x);
        }
        assert!(tf.x[3].abs() < 1e-9);
    }

    #[test]
    fn oracle_matches_hand_values() {
        let p4 = parallel4();
        let cfg = Configuration::from_names(&p4, &["e1"], &[]).unwrap();
        let tf = thin_flow_oracle(&p4, &cfg, 1e-9).unwrap();
        assert!((tf.lambda.0[1] - 3.0).abs() < 1e-9);

        let cfg = Configuration::from_names(&p4, &["e1", "e2"], &["e1"]).unwrap();
        let tf = thin_flow_oracle(&p4, &cfg, 1e-9).unwrap();
        assert!((tf.lambda.0[1] - 1.5).abs() < 1e-9);

        let inst = single_arc(2.0, 1.0, 1.0);
        let cfg = Configuration::from_names(&inst, &["e"], &[]).unwrap();
        let tf = thin_flow_oracle(&inst, &cfg, 1e-9).unwrap();
        assert!((tf.lambda.0[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn checker_reports_perturbations() {
        let p4 = parallel4();
        let cfg = Configuration::from_names(&p4, &["e1", "e2"], &["e1"]).unwrap();
        let tf = solve_thin_flow(&p4, &cfg, 1e-9).unwrap();
        let clean = check_thin_flow(&p4, &cfg, &tf, 1e-9);
        assert!(clean.passes());
        assert!(clean.max_residual() <= 1e-12);

        let mut perturbed = tf.clone();
        perturbed.lambda.0[1] = 1.6;
        let report = check_thin_flow(&p4, &cfg, &perturbed, 1e-9);
        assert!(!report.passes());
        assert!((report.flow_equality - 0.1).abs() < 1e-9);

        // Break conservation at the interior node of a path.
        let path = path3();
        let cfg = Configuration::from_names(&path, &["sv", "vt"], &[]).unwrap();
        let tf2 = solve_thin_flow(&path, &cfg, 1e-9).unwrap();
        let mut bad = tf2.clone();
        bad.x[1] -= 0.2;
        let report = check_thin_flow(&path, &cfg, &bad, 1e-9);
        assert!((report.conservation - 0.2).abs() < 1e-9);
    }

    #[test]
    fn resetting_arcs_carry_nu_lambda() {
        let p4 = parallel4();
        let cfg = Configuration::from_names(&p4, &["e1", "e2", "e3"], &["e1", "e2"]).unwrap();
        let tf = solve_thin_flow(&p4, &cfg, 1e-9).unwrap();
        for a in cfg.resetting_arcs() {
            let arc = p4.arc(a);
            assert!((tf.x[a.0] - arc.nu * tf.lambda.get(arc.head)).abs() < 1e-9);
        }
    }

    #[test]
    fn thin_flow_json_shape() {
        let inst = single_arc(1.0, 1.0, 1.0);
        let cfg = Configuration::from_names(&inst, &["e"], &[]).unwrap();
        let tf = solve_thin_flow(&inst, &cfg, 1e-9).unwrap();
        let json = tf.to_json(&inst);
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert!(v["lambda"]["s"].is_number());
        assert!(v["x"]["e"].is_number());
    }
}
