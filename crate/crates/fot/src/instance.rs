//! Network instance model: nodes, capacitated arcs with transit times, a
//! source/sink pair and a constant network inflow rate, plus the elementary
//! label geometry used by the equilibrium machinery.
//!
//! External names are strings; dense integer indices are assigned at parse
//! time and used everywhere internally. Parallel arcs are permitted, so arcs
//! are identified by id, never by endpoint pair.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num::Real;

/// Dense node index, assigned in the order nodes appear in the document.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub struct NodeId(pub usize);

/// Dense arc index, assigned in the order arcs appear in the document.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub struct ArcId(pub usize);

/// Directed arc with free-flow transit time `tau` and service capacity `nu`.
#[derive(Clone, Debug)]
pub struct Arc<T> {
    pub id: String,
    pub tail: NodeId,
    pub head: NodeId,
    pub tau: T,
    pub nu: T,
}

/// Immutable network instance.
#[derive(Clone, Debug)]
pub struct Instance<T> {
    nodes: Vec<String>,
    arcs: Vec<Arc<T>>,
    out_arcs: Vec<Vec<ArcId>>,
    in_arcs: Vec<Vec<ArcId>>,
    source: NodeId,
    sink: NodeId,
    inflow_rate: T,
}

#[derive(Debug, Error)]
pub enum InstanceError {
    #[error("malformed instance document: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("arcs[{index}].tau: tau must be strictly positive (arc {arc})")]
    NonPositiveTau { index: usize, arc: String },
    #[error("arcs[{index}].nu: nu must be strictly positive (arc {arc})")]
    NonPositiveNu { index: usize, arc: String },
    #[error("u0: inflow rate must be strictly positive")]
    NonPositiveInflow,
    #[error("arcs[{index}].id: duplicate arc id {arc}")]
    DuplicateArcId { index: usize, arc: String },
    #[error("nodes[{index}]: duplicate node id {node}")]
    DuplicateNodeId { index: usize, node: String },
    #[error("{field}: unknown node reference {node}")]
    UnknownNode { field: String, node: String },
    #[error("{field}: value must be finite")]
    NonFinite { field: String },
    #[error("source equals sink")]
    SourceIsSink,
}

/// Wire format of an instance document. Keys are part of the CLI contract.
#[derive(Serialize, Deserialize)]
struct InstanceDoc {
    nodes: Vec<String>,
    arcs: Vec<ArcDoc>,
    source: String,
    sink: String,
    u0: f64,
}

#[derive(Serialize, Deserialize)]
struct ArcDoc {
    id: String,
    from: String,
    to: String,
    tau: f64,
    nu: f64,
}

impl<T: Real> Instance<T> {
    /// Builds an instance from parsed parts, assigning dense indices and
    /// checking the field-level invariants (positivity, uniqueness,
    /// known node references). Reachability is `validate`'s concern.
    pub fn new(
        nodes: Vec<String>,
        arcs: Vec<(String, String, String, T, T)>,
        source: &str,
        sink: &str,
        inflow_rate: T,
    ) -> Result<Self, InstanceError> {
        let mut node_index: HashMap<String, NodeId> = HashMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if node_index.insert(n.clone(), NodeId(i)).is_some() {
                return Err(InstanceError::DuplicateNodeId {
                    index: i,
                    node: n.clone(),
                });
            }
        }
        let lookup = |field: String, name: &str| -> Result<NodeId, InstanceError> {
            node_index
                .get(name)
                .copied()
                .ok_or_else(|| InstanceError::UnknownNode {
                    field,
                    node: name.to_string(),
                })
        };

        let mut seen_arc_ids: HashMap<String, usize> = HashMap::new();
        let mut built = Vec::with_capacity(arcs.len());
        for (i, (id, from, to, tau, nu)) in arcs.into_iter().enumerate() {
            if seen_arc_ids.insert(id.clone(), i).is_some() {
                return Err(InstanceError::DuplicateArcId { index: i, arc: id });
            }
            if !tau.is_finite() || !nu.is_finite() {
                return Err(InstanceError::NonFinite {
                    field: format!("arcs[{i}]"),
                });
            }
            if tau <= T::zero() {
                return Err(InstanceError::NonPositiveTau { index: i, arc: id });
            }
            if nu <= T::zero() {
                return Err(InstanceError::NonPositiveNu { index: i, arc: id });
            }
            let tail = lookup(format!("arcs[{i}].from"), &from)?;
            let head = lookup(format!("arcs[{i}].to"), &to)?;
            built.push(Arc {
                id,
                tail,
                head,
                tau,
                nu,
            });
        }

        if !inflow_rate.is_finite() {
            return Err(InstanceError::NonFinite {
                field: "u0".to_string(),
            });
        }
        if inflow_rate <= T::zero() {
            return Err(InstanceError::NonPositiveInflow);
        }
        let source = lookup("source".to_string(), source)?;
        let sink = lookup("sink".to_string(), sink)?;
        if source == sink {
            return Err(InstanceError::SourceIsSink);
        }

        let mut out_arcs = vec![Vec::new(); nodes.len()];
        let mut in_arcs = vec![Vec::new(); nodes.len()];
        for (i, a) in built.iter().enumerate() {
            out_arcs[a.tail.0].push(ArcId(i));
            in_arcs[a.head.0].push(ArcId(i));
        }

        Ok(Instance {
            nodes,
            arcs: built,
            out_arcs,
            in_arcs,
            source,
            sink,
            inflow_rate,
        })
    }

    /// Parses the JSON instance document.
    pub fn from_json(doc: &str) -> Result<Self, InstanceError> {
        let doc: InstanceDoc = serde_json::from_str(doc)?;
        let arcs = doc
            .arcs
            .into_iter()
            .map(|a| (a.id, a.from, a.to, T::real(a.tau), T::real(a.nu)))
            .collect();
        Instance::new(
            doc.nodes,
            arcs,
            &doc.source,
            &doc.sink,
            T::real(doc.u0),
        )
    }

    /// Serializes back to the JSON document format (field-exact round trip).
    pub fn to_json(&self) -> String {
        let doc = InstanceDoc {
            nodes: self.nodes.clone(),
            arcs: self
                .arcs
                .iter()
                .map(|a| ArcDoc {
                    id: a.id.clone(),
                    from: self.nodes[a.tail.0].clone(),
                    to: self.nodes[a.head.0].clone(),
                    tau: a.tau.to_f64_lossy(),
                    nu: a.nu.to_f64_lossy(),
                })
                .collect(),
            source: self.nodes[self.source.0].clone(),
            sink: self.nodes[self.sink.0].clone(),
            u0: self.inflow_rate.to_f64_lossy(),
        };
        serde_json::to_string_pretty(&doc).expect("instance document serializes")
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn arc_count(&self) -> usize {
        self.arcs.len()
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    pub fn arcs(&self) -> impl Iterator<Item = ArcId> {
        (0..self.arcs.len()).map(ArcId)
    }

    pub fn arc(&self, id: ArcId) -> &Arc<T> {
        &self.arcs[id.0]
    }

    pub fn node_name(&self, id: NodeId) -> &str {
        &self.nodes[id.0]
    }

    pub fn arc_name(&self, id: ArcId) -> &str {
        &self.arcs[id.0].id
    }

    pub fn node_id(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n == name).map(NodeId)
    }

    pub fn arc_id(&self, name: &str) -> Option<ArcId> {
        self.arcs.iter().position(|a| a.id == name).map(ArcId)
    }

    pub fn out_arcs(&self, v: NodeId) -> &[ArcId] {
        &self.out_arcs[v.0]
    }

    pub fn in_arcs(&self, v: NodeId) -> &[ArcId] {
        &self.in_arcs[v.0]
    }

    pub fn source(&self) -> NodeId {
        self.source
    }

    pub fn sink(&self) -> NodeId {
        self.sink
    }

    /// Constant network inflow rate `u0`.
    pub fn inflow_rate(&self) -> T {
        self.inflow_rate
    }

    /// Label-derivative bound `kappa = max(1, u0 / min_e nu_e)`.
    pub fn kappa(&self) -> T {
        let min_nu = self
            .arcs
            .iter()
            .map(|a| a.nu)
            .fold(T::infinity(), T::min);
        T::one().max(self.inflow_rate / min_nu)
    }

    /// Sum of all transit times; used for the default trajectory horizon.
    pub fn total_transit(&self) -> T {
        self.arcs.iter().fold(T::zero(), |acc, a| acc + a.tau)
    }

    /// Smallest transit time; the causality window of the network loader.
    pub fn min_transit(&self) -> T {
        self.arcs
            .iter()
            .map(|a| a.tau)
            .fold(T::infinity(), T::min)
    }

    /// Sum of all capacities plus the inflow rate (the paper-style mass-rate
    /// bound used in overtaking and Lipschitz diagnostics).
    pub fn capacity_sum(&self) -> T {
        self.arcs.iter().fold(self.inflow_rate, |acc, a| acc + a.nu)
    }

    /// Checks the reachability invariants: every node is reachable from the
    /// source and can reach the sink via directed arcs. Violations are data,
    /// not failures; an empty list means the instance is valid.
    pub fn validate(&self) -> Vec<String> {
        let mut violations = Vec::new();
        let fwd = self.reachable_from(self.source, |v| self.out_arcs(v), |a| self.arc(a).head);
        let bwd = self.reachable_from(self.sink, |v| self.in_arcs(v), |a| self.arc(a).tail);
        for v in self.nodes() {
            if !fwd[v.0] {
                violations.push(format!("{} unreachable from source", self.node_name(v)));
            }
            if !bwd[v.0] {
                violations.push(format!("{} cannot reach sink", self.node_name(v)));
            }
        }
        violations
    }

    fn reachable_from<'a>(
        &'a self,
        start: NodeId,
        adj: impl Fn(NodeId) -> &'a [ArcId],
        step: impl Fn(ArcId) -> NodeId,
    ) -> Vec<bool> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![start];
        seen[start.0] = true;
        while let Some(v) = stack.pop() {
            for &a in adj(v) {
                let w = step(a);
                if !seen[w.0] {
                    seen[w.0] = true;
                    stack.push(w);
                }
            }
        }
        seen
    }
}

/// One value per node, in dense node order. The source entry is the
/// reference time coordinate.
#[derive(Clone, PartialEq, Debug)]
pub struct LabelVector<T>(pub Vec<T>);

impl<T: Real> LabelVector<T> {
    pub fn get(&self, v: NodeId) -> T {
        self.0[v.0]
    }

    pub fn set(&mut self, v: NodeId, value: T) {
        self.0[v.0] = value;
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `self + t * dir`, the position along a phase direction.
    pub fn advanced(&self, dir: &LabelVector<T>, t: T) -> LabelVector<T> {
        LabelVector(
            self.0
                .iter()
                .zip(&dir.0)
                .map(|(&l, &d)| l + t * d)
                .collect(),
        )
    }

    /// Infinity-norm distance to another label vector.
    pub fn inf_distance(&self, other: &LabelVector<T>) -> T {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

impl<T: fmt::Display> fmt::Display for LabelVector<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, x) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{x}")?;
        }
        write!(f, ")")
    }
}

/// Free-flow shortest-path labels: the labeling of the empty network, with
/// zero queues everywhere. Source label is 0.
pub fn empty_network_labels<T: Real>(inst: &Instance<T>) -> LabelVector<T> {
    let n = inst.node_count();
    let mut dist = vec![T::infinity(); n];
    dist[inst.source().0] = T::zero();
    // Bellman-Ford; instances are small and may have parallel arcs.
    for _ in 0..n {
        let mut changed = false;
        for a in inst.arcs() {
            let arc = inst.arc(a);
            let cand = dist[arc.tail.0] + arc.tau;
            if cand < dist[arc.head.0] {
                dist[arc.head.0] = cand;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    LabelVector(dist)
}

/// Infinity-norm distance from `l` to the hyperplane `{l : l_w - l_v = tau_e}`
/// of arc `e = vw`; equals `|l_w - l_v - tau_e| / 2` because the slack can be
/// split equally between the two endpoint coordinates.
pub fn hyperplane_distance<T: Real>(inst: &Instance<T>, l: &LabelVector<T>, e: ArcId) -> T {
    let arc = inst.arc(e);
    let two = T::real(2.0);
    (l.get(arc.head) - l.get(arc.tail) - arc.tau).abs() / two
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// Two nodes, four parallel arcs with transit times 3, 5, 7, 9 and unit
    /// capacities; inflow rate 3.
    pub fn parallel4() -> Instance<f64> {
        Instance::new(
            vec!["s".into(), "t".into()],
            vec![
                ("e1".into(), "s".into(), "t".into(), 3.0, 1.0),
                ("e2".into(), "s".into(), "t".into(), 5.0, 1.0),
                ("e3".into(), "s".into(), "t".into(), 7.0, 1.0),
                ("e4".into(), "s".into(), "t".into(), 9.0, 1.0),
            ],
            "s",
            "t",
            3.0,
        )
        .unwrap()
    }

    pub fn single_arc(nu: f64, tau: f64, u0: f64) -> Instance<f64> {
        Instance::new(
            vec!["s".into(), "t".into()],
            vec![("e".into(), "s".into(), "t".into(), tau, nu)],
            "s",
            "t",
            u0,
        )
        .unwrap()
    }

    /// Path s -> v -> t with unit transit times and capacities.
    pub fn path3() -> Instance<f64> {
        Instance::new(
            vec!["s".into(), "v".into(), "t".into()],
            vec![
                ("sv".into(), "s".into(), "v".into(), 1.0, 1.0),
                ("vt".into(), "v".into(), "t".into(), 1.0, 1.0),
            ],
            "s",
            "t",
            1.0,
        )
        .unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    const PARALLEL4_DOC: &str = r#"{
        "nodes": ["s", "t"],
        "arcs": [
            {"id": "e1", "from": "s", "to": "t", "tau": 3.0, "nu": 1.0},
            {"id": "e2", "from": "s", "to": "t", "tau": 5.0, "nu": 1.0},
            {"id": "e3", "from": "s", "to": "t", "tau": 7.0, "nu": 1.0},
            {"id": "e4", "from": "s", "to": "t", "tau": 9.0, "nu": 1.0}
        ],
        "source": "s",
        "sink": "t",
        "u0": 3.0
    }"#;

    #[test]
    fn parses_parallel4_document() {
        let inst: Instance<f64> = Instance::from_json(PARALLEL4_DOC).unwrap();
        assert_eq!(inst.arc_count(), 4);
        assert_eq!(inst.node_count(), 2);
        assert_eq!(inst.inflow_rate(), 3.0);
        assert_eq!(inst.arc(ArcId(3)).tau, 9.0);
        assert!(inst.validate().is_empty());
    }

    #[test]
    fn parses_single_arc_document() {
        let doc = r#"{"nodes":["s","t"],"arcs":[{"id":"e","from":"s","to":"t","tau":1.0,"nu":1.0}],"source":"s","sink":"t","u0":1.0}"#;
        let inst: Instance<f64> = Instance::from_json(doc).unwrap();
        assert_eq!(inst.arc_count(), 1);
    }

    #[test]
    fn rejects_zero_tau() {
        let doc = r#"{"nodes":["s","t"],"arcs":[{"id":"e","from":"s","to":"t","tau":0.0,"nu":1.0}],"source":"s","sink":"t","u0":1.0}"#;
        let err = Instance::<f64>::from_json(doc).unwrap_err();
        assert!(err.to_string().contains("tau must be strictly positive"));
    }

    #[test]
    fn rejects_duplicate_arc_id_and_unknown_node() {
        let doc = r#"{"nodes":["s","t"],"arcs":[{"id":"e","from":"s","to":"t","tau":1.0,"nu":1.0},{"id":"e","from":"s","to":"t","tau":2.0,"nu":1.0}],"source":"s","sink":"t","u0":1.0}"#;
        assert!(matches!(
            Instance::<f64>::from_json(doc).unwrap_err(),
            InstanceError::DuplicateArcId { .. }
        ));
        let doc = r#"{"nodes":["s","t"],"arcs":[{"id":"e","from":"s","to":"x","tau":1.0,"nu":1.0}],"source":"s","sink":"t","u0":1.0}"#;
        let err = Instance::<f64>::from_json(doc).unwrap_err();
        assert!(err.to_string().contains("unknown node reference x"));
    }

    #[test]
    fn json_round_trip_is_identity() {
        let inst: Instance<f64> = Instance::from_json(PARALLEL4_DOC).unwrap();
        let again: Instance<f64> = Instance::from_json(&inst.to_json()).unwrap();
        assert_eq!(inst.to_json(), again.to_json());
        assert_eq!(again.arc_count(), 4);
        assert_eq!(again.arc(ArcId(2)).tau, 7.0);
    }

    #[test]
    fn validate_reports_isolated_and_dead_end_nodes() {
        let inst: Instance<f64> = Instance::new(
            vec!["s".into(), "v".into(), "t".into()],
            vec![("e".into(), "s".into(), "t".into(), 1.0, 1.0)],
            "s",
            "t",
            1.0,
        )
        .unwrap();
        let violations = inst.validate();
        assert!(violations.contains(&"v unreachable from source".to_string()));
        assert!(violations.contains(&"v cannot reach sink".to_string()));

        // Reachable but dead-end node.
        let inst: Instance<f64> = Instance::new(
            vec!["s".into(), "v".into(), "t".into()],
            vec![
                ("e".into(), "s".into(), "t".into(), 1.0, 1.0),
                ("f".into(), "s".into(), "v".into(), 1.0, 1.0),
            ],
            "s",
            "t",
            1.0,
        )
        .unwrap();
        assert_eq!(inst.validate(), vec!["v cannot reach sink".to_string()]);
    }

    #[test]
    fn empty_labels_match_free_flow_distances() {
        let p4 = parallel4();
        assert_eq!(empty_network_labels(&p4).0, vec![0.0, 3.0]);
        let single = single_arc(1.0, 1.0, 1.0);
        assert_eq!(empty_network_labels(&single).0, vec![0.0, 1.0]);
        let path = path3();
        assert_eq!(empty_network_labels(&path).0, vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn empty_labels_satisfy_bellman_equations() {
        let p4 = parallel4();
        let l = empty_network_labels(&p4);
        for v in p4.nodes() {
            if v == p4.source() {
                continue;
            }
            let best = p4
                .in_arcs(v)
                .iter()
                .map(|&a| l.get(p4.arc(a).tail) + p4.arc(a).tau)
                .fold(f64::INFINITY, f64::min);
            assert_eq!(l.get(v), best);
        }
    }

    #[test]
    fn hyperplane_distance_examples() {
        let p4 = parallel4();
        let e1 = p4.arc_id("e1").unwrap();
        let e2 = p4.arc_id("e2").unwrap();
        let e4 = p4.arc_id("e4").unwrap();
        assert_eq!(
            hyperplane_distance(&p4, &LabelVector(vec![0.0, 3.0]), e1),
            0.0
        );
        assert_eq!(
            hyperplane_distance(&p4, &LabelVector(vec![5.0, 12.0]), e4),
            1.0
        );
        assert_eq!(
            hyperplane_distance(&p4, &LabelVector(vec![1.0, 6.0]), e2),
            0.0
        );
    }

    #[test]
    fn generic_scalar_f32_works() {
        let inst: Instance<f32> = Instance::new(
            vec!["s".into(), "t".into()],
            vec![("e".into(), "s".into(), "t".into(), 1.0f32, 1.0f32)],
            "s",
            "t",
            1.0f32,
        )
        .unwrap();
        assert_eq!(empty_network_labels(&inst).0, vec![0.0f32, 1.0f32]);
    }
}
