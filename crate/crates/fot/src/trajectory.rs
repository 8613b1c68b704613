//! Piecewise-linear equilibrium trajectories of earliest-arrival labels.
//!
//! Starting from a valid label, the trajectory repeatedly classifies the
//! configuration, solves the thin flow for the phase direction, and advances
//! until the first time the configuration genuinely changes: an arc with a
//! hyperplane crosses it from below, or a queueing arc's slack drains to
//! zero. A phase with no future event extends to infinity (steady state).

use std::collections::BTreeMap;

use thiserror::Error;

use crate::flow::decompose_paths;
use crate::instance::{ArcId, Instance, LabelVector};
use crate::loading::{EntrySpec, NodeWaiting, StrategyClass};
use crate::num::Real;
use crate::thinflow::{
    check_thin_flow, classify_configuration, is_valid_configuration, solve_thin_flow,
    Configuration, GeneralizedSubnetwork, InvalidConfiguration, ThinFlow, ThinFlowError,
};

/// One maximal linear segment of the trajectory.
#[derive(Clone, Debug)]
pub struct Phase<T> {
    pub theta_start: T,
    /// `infinity` for a final steady-state phase.
    pub theta_end: T,
    pub label_start: LabelVector<T>,
    /// Equals `flow.lambda`.
    pub direction: LabelVector<T>,
    /// Configuration holding on the open interior of the phase.
    pub config: Configuration,
    pub flow: ThinFlow<T>,
}

/// Ordered contiguous phases plus the generalized subnetwork they were
/// computed in. The instance is passed to methods separately.
#[derive(Clone, Debug)]
pub struct Trajectory<T> {
    pub phases: Vec<Phase<T>>,
    pub subnetwork: GeneralizedSubnetwork,
    /// Horizon the trajectory was computed for; finite phases never extend
    /// past it, and profile derivation truncates the final infinite phase
    /// here.
    pub horizon: T,
    /// Diagnostic notes, e.g. joint hyperplane crossings that were
    /// reclassified together.
    pub notes: Vec<String>,
}

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("invalid configuration at theta = {theta}: {source}")]
    InvalidAt {
        theta: f64,
        source: InvalidConfiguration,
    },
    #[error(transparent)]
    ThinFlow(#[from] ThinFlowError),
    #[error("phase count cap {cap} exceeded")]
    PhaseCapExceeded { cap: usize },
    #[error("phase at theta = {theta} failed to reach a consistent configuration after {attempts} reclassifications")]
    Unresolved { theta: f64, attempts: usize },
    #[error("theta = {theta} is beyond the computed horizon {horizon}")]
    BeyondHorizon { theta: f64, horizon: f64 },
    #[error("profile derivation requires a full-network trajectory from the empty-network labels")]
    NotFullNetworkProfile,
    #[error("path decomposition residual {residual:.3e} exceeds tolerance")]
    DecompositionResidual { residual: f64 },
    #[error("label projection did not terminate within {steps} steps")]
    ProjectionStalled { steps: usize },
    #[error("horizon must be positive")]
    NonPositiveHorizon,
}

/// Default horizon `4 * (sum of tau) * kappa`.
pub fn default_horizon<T: Real>(inst: &Instance<T>) -> T {
    T::real(4.0) * inst.total_transit() * inst.kappa()
}

/// Default phase-count cap `10 * 2^|E|`.
pub fn default_phase_cap(arc_count: usize) -> usize {
    10usize.saturating_mul(1usize << arc_count.min(20))
}

/// Computes the equilibrium trajectory from `start` in the generalized
/// subnetwork `sub`, up to `horizon`.
pub fn compute_trajectory<T: Real>(
    inst: &Instance<T>,
    sub: &GeneralizedSubnetwork,
    start: &LabelVector<T>,
    horizon: T,
    eta: T,
) -> Result<Trajectory<T>, TrajectoryError> {
    if horizon <= T::zero() {
        return Err(TrajectoryError::NonPositiveHorizon);
    }
    let phase_cap = default_phase_cap(inst.arc_count());
    let mut phases: Vec<Phase<T>> = Vec::new();
    let mut notes = Vec::new();
    let mut theta = T::zero();
    let mut l = start.clone();

    loop {
        if phases.len() >= phase_cap {
            return Err(TrajectoryError::PhaseCapExceeded { cap: phase_cap });
        }

        let (config, tf) = resolve_phase(inst, sub, &l, theta, eta)?;
        let dir = tf.lambda.clone();

        // Earliest genuine configuration change along `l + t * dir`.
        let mut dt_min = T::infinity();
        let mut crossing: Vec<(T, ArcId)> = Vec::new();
        for a in inst.arcs() {
            if !sub.has_hyperplane(a) {
                continue;
            }
            let arc = inst.arc(a);
            let g0 = l.get(arc.head) - l.get(arc.tail) - arc.tau;
            let gdot = dir.get(arc.head) - dir.get(arc.tail);
            let dt = if g0 < -eta && gdot > T::zero() {
                -g0 / gdot
            } else if g0 > eta && gdot < T::zero() {
                -g0 / gdot
            } else {
                continue;
            };
            crossing.push((dt, a));
            dt_min = dt_min.min(dt);
        }

        if !dt_min.is_finite() {
            // No future event: final infinite phase (steady state).
            phases.push(Phase {
                theta_start: theta,
                theta_end: T::infinity(),
                label_start: l,
                direction: dir,
                config,
                flow: tf,
            });
            break;
        }

        let joint: Vec<&str> = crossing
            .iter()
            .filter(|(dt, _)| (*dt - dt_min).abs() <= eta)
            .map(|(_, a)| inst.arc_name(*a))
            .collect();
        if joint.len() > 1 {
            notes.push(format!(
                "joint hyperplane crossing at theta = {}: arcs {} reclassified together",
                (theta + dt_min).to_f64_lossy(),
                joint.join(", ")
            ));
        }

        if theta + dt_min >= horizon {
            phases.push(Phase {
                theta_start: theta,
                theta_end: horizon,
                label_start: l,
                direction: dir,
                config,
                flow: tf,
            });
            break;
        }

        let next_theta = theta + dt_min;
        let next_l = l.advanced(&dir, dt_min);
        phases.push(Phase {
            theta_start: theta,
            theta_end: next_theta,
            label_start: l,
            direction: dir,
            config,
            flow: tf,
        });
        theta = next_theta;
        l = next_l;
    }

    Ok(Trajectory {
        phases,
        subnetwork: sub.clone(),
        horizon,
        notes,
    })
}

/// Resolves the phase configuration at a point: classify, solve the thin
/// flow, and derive the configuration holding on the open interior (boundary
/// arcs join the queue set or drop out according to the direction). If the
/// point solution is inconsistent with the interior configuration the point
/// is reclassified, up to `|E|` times.
fn resolve_phase<T: Real>(
    inst: &Instance<T>,
    sub: &GeneralizedSubnetwork,
    l: &LabelVector<T>,
    theta: T,
    eta: T,
) -> Result<(Configuration, ThinFlow<T>), TrajectoryError> {
    let mut cfg = classify_configuration(inst, l, sub, eta);
    let attempts = inst.arc_count() + 1;
    for _ in 0..attempts {
        is_valid_configuration(inst, &cfg).map_err(|source| TrajectoryError::InvalidAt {
            theta: theta.to_f64_lossy(),
            source,
        })?;
        let tf = solve_thin_flow(inst, &cfg, eta)?;
        let interior = interior_configuration(inst, sub, l, &tf.lambda, eta);
        if check_thin_flow(inst, &interior, &tf, eta).passes() {
            return Ok((interior, tf));
        }
        if interior == cfg {
            break;
        }
        cfg = interior;
    }
    Err(TrajectoryError::Unresolved {
        theta: theta.to_f64_lossy(),
        attempts,
    })
}

/// Configuration on the open interior of a phase starting at `l` with
/// direction `dir`: arcs riding their hyperplane stay active non-resetting,
/// boundary arcs moving up grow a queue, boundary arcs moving down leave the
/// active set.
fn interior_configuration<T: Real>(
    inst: &Instance<T>,
    sub: &GeneralizedSubnetwork,
    l: &LabelVector<T>,
    dir: &LabelVector<T>,
    eta: T,
) -> Configuration {
    let mut active = vec![false; inst.arc_count()];
    let mut resetting = vec![false; inst.arc_count()];
    for a in inst.arcs() {
        if !sub.allows(a) {
            continue;
        }
        if sub.forces_queue(a) {
            active[a.0] = true;
            resetting[a.0] = true;
            continue;
        }
        let arc = inst.arc(a);
        let g0 = l.get(arc.head) - l.get(arc.tail) - arc.tau;
        let gdot = dir.get(arc.head) - dir.get(arc.tail);
        if g0 > eta {
            active[a.0] = true;
            resetting[a.0] = true;
        } else if g0 >= -eta {
            if gdot > eta {
                active[a.0] = true;
                resetting[a.0] = true;
            } else if gdot >= -eta {
                active[a.0] = true;
            }
        }
    }
    Configuration::from_masks(active, resetting)
}

/// Exact piecewise-linear evaluation of the trajectory at `theta`.
pub fn evaluate_trajectory<T: Real>(
    traj: &Trajectory<T>,
    theta: T,
) -> Result<LabelVector<T>, TrajectoryError> {
    let first = traj.phases.first().expect("trajectory has phases");
    if theta < first.theta_start {
        return Err(TrajectoryError::BeyondHorizon {
            theta: theta.to_f64_lossy(),
            horizon: traj.horizon.to_f64_lossy(),
        });
    }
    let last = traj.phases.last().expect("trajectory has phases");
    if !last.theta_end.is_infinite() && theta > last.theta_end {
        return Err(TrajectoryError::BeyondHorizon {
            theta: theta.to_f64_lossy(),
            horizon: traj.horizon.to_f64_lossy(),
        });
    }
    let phase = traj
        .phases
        .iter()
        .rev()
        .find(|p| theta >= p.theta_start)
        .expect("theta is within some phase");
    Ok(phase
        .label_start
        .advanced(&phase.direction, theta - phase.theta_start))
}

/// Steady-state summary of a trajectory.
#[derive(Clone, Debug)]
pub struct SteadyStateInfo<T> {
    pub reached: bool,
    pub t_ss: Option<T>,
    pub lambda_ss: Option<LabelVector<T>>,
    /// Steady-state classification checks at the final phase start: every
    /// arc with increasing slack must be active, and no arc with decreasing
    /// slack may carry a queue.
    pub violations: Vec<String>,
}

pub fn steady_state_info<T: Real>(
    inst: &Instance<T>,
    traj: &Trajectory<T>,
    eta: T,
) -> SteadyStateInfo<T> {
    let last = traj.phases.last().expect("trajectory has phases");
    if !last.theta_end.is_infinite() {
        return SteadyStateInfo {
            reached: false,
            t_ss: None,
            lambda_ss: None,
            violations: Vec::new(),
        };
    }
    let mut violations = Vec::new();
    for a in inst.arcs() {
        if !traj.subnetwork.has_hyperplane(a) {
            continue;
        }
        let arc = inst.arc(a);
        let gdot = last.direction.get(arc.head) - last.direction.get(arc.tail);
        let g0 = last.label_start.get(arc.head) - last.label_start.get(arc.tail) - arc.tau;
        if gdot > eta && g0 < -eta {
            violations.push(format!(
                "arc {} has increasing slack but is inactive at steady state",
                inst.arc_name(a)
            ));
        }
        if gdot < -eta && g0 > eta {
            violations.push(format!(
                "arc {} has decreasing slack but carries a queue at steady state",
                inst.arc_name(a)
            ));
        }
    }
    SteadyStateInfo {
        reached: true,
        t_ss: Some(last.theta_start),
        lambda_ss: Some(last.direction.clone()),
        violations,
    }
}

/// Derives the exact-equilibrium strategy profile from a full-network
/// trajectory started at the empty-network labels: per phase, the thin flow
/// is decomposed into s-t path flows (ties broken lexicographically by arc
/// id) and each path becomes a constant-rate entry class with zero waiting.
pub fn derive_exact_profile<T: Real>(
    inst: &Instance<T>,
    traj: &Trajectory<T>,
    eta: T,
) -> Result<Vec<StrategyClass<T>>, TrajectoryError> {
    let full = GeneralizedSubnetwork::full(inst);
    if traj.subnetwork != full {
        return Err(TrajectoryError::NotFullNetworkProfile);
    }
    let empty = crate::instance::empty_network_labels(inst);
    let start = &traj.phases.first().expect("trajectory has phases").label_start;
    if start.inf_distance(&empty) > T::real(1e-6).max(eta) {
        return Err(TrajectoryError::NotFullNetworkProfile);
    }

    let mut classes = Vec::new();
    for phase in &traj.phases {
        if phase.theta_start >= traj.horizon {
            break;
        }
        let end = phase.theta_end.min(traj.horizon);
        let (paths, leftover) = decompose_paths(inst, &phase.flow.x, eta);
        if leftover > eta {
            return Err(TrajectoryError::DecompositionResidual {
                residual: leftover.to_f64_lossy(),
            });
        }
        for (path, rate) in paths {
            let waiting = vec![NodeWaiting::zero(); path.len() + 1];
            classes.push(StrategyClass {
                path,
                entry: EntrySpec::Interval {
                    start: phase.theta_start,
                    end,
                    rate,
                },
                waiting,
            });
        }
    }
    Ok(classes)
}

/// Projects a label vector onto the valid set by the slack-decreasing
/// procedure: while some node is the head of a queueing arc but has no
/// active path to the sink, uniformly decrease the labels of everything
/// reachable from such nodes until the blocking structure changes.
pub fn project_to_valid<T: Real>(
    inst: &Instance<T>,
    l: &LabelVector<T>,
    eta: T,
) -> Result<LabelVector<T>, TrajectoryError> {
    let full = GeneralizedSubnetwork::full(inst);
    let steps = inst.node_count() * inst.arc_count() + 1;
    let mut l = l.clone();
    for _ in 0..steps {
        let cfg = classify_configuration(inst, &l, &full, eta);
        // Nodes with an active path to the sink.
        let mut to_sink = vec![false; inst.node_count()];
        to_sink[inst.sink().0] = true;
        let mut stack = vec![inst.sink()];
        while let Some(v) = stack.pop() {
            for &a in inst.in_arcs(v) {
                if cfg.is_active(a) && !to_sink[inst.arc(a).tail.0] {
                    to_sink[inst.arc(a).tail.0] = true;
                    stack.push(inst.arc(a).tail);
                }
            }
        }
        // Blocked queue heads.
        let mut blocked = vec![false; inst.node_count()];
        let mut any_blocked = false;
        for a in inst.arcs() {
            if cfg.is_resetting(a) && !to_sink[inst.arc(a).head.0] {
                blocked[inst.arc(a).head.0] = true;
                any_blocked = true;
            }
        }
        if !any_blocked {
            return Ok(l);
        }
        // Forward closure of the blocked set over active arcs.
        let mut in_t = blocked.clone();
        let mut stack: Vec<_> = inst.nodes().filter(|v| in_t[v.0]).collect();
        while let Some(v) = stack.pop() {
            for &a in inst.out_arcs(v) {
                if cfg.is_active(a) && !in_t[inst.arc(a).head.0] {
                    in_t[inst.arc(a).head.0] = true;
                    stack.push(inst.arc(a).head);
                }
            }
        }
        // Largest uniform decrease before the structure changes: arcs leaving
        // the set may not gain a queue, entering queue arcs may not lose
        // their whole slack.
        let mut eps = T::infinity();
        for a in inst.arcs() {
            let arc = inst.arc(a);
            let g = l.get(arc.head) - l.get(arc.tail) - arc.tau;
            if in_t[arc.tail.0] && !in_t[arc.head.0] {
                eps = eps.min(-g);
            } else if !in_t[arc.tail.0] && in_t[arc.head.0] && g > eta {
                eps = eps.min(g);
            }
        }
        if !eps.is_finite() || eps <= T::zero() {
            return Err(TrajectoryError::ProjectionStalled { steps });
        }
        for v in inst.nodes() {
            if in_t[v.0] {
                let cur = l.get(v);
                l.set(v, cur - eps);
            }
        }
    }
    Err(TrajectoryError::ProjectionStalled { steps })
}

/// Trajectory JSON: `{"phases": [{"theta_start": .., "theta_end": .., ...}]}`
/// with `theta_end` null for the final steady-state phase.
pub fn trajectory_to_json<T: Real>(inst: &Instance<T>, traj: &Trajectory<T>) -> String {
    let phases: Vec<serde_json::Value> = traj
        .phases
        .iter()
        .map(|p| {
            let labels: BTreeMap<&str, f64> = inst
                .nodes()
                .map(|v| (inst.node_name(v), p.label_start.get(v).to_f64_lossy()))
                .collect();
            let dir: BTreeMap<&str, f64> = inst
                .nodes()
                .map(|v| (inst.node_name(v), p.direction.get(v).to_f64_lossy()))
                .collect();
            let active: Vec<&str> = p.config.active_arcs().map(|a| inst.arc_name(a)).collect();
            let resetting: Vec<&str> = p
                .config
                .resetting_arcs()
                .map(|a| inst.arc_name(a))
                .collect();
            serde_json::json!({
                "theta_start": p.theta_start.to_f64_lossy(),
                "theta_end": if p.theta_end.is_infinite() {
                    serde_json::Value::Null
                } else {
                    serde_json::json!(p.theta_end.to_f64_lossy())
                },
                "label_start": labels,
                "direction": dir,
                "active": active,
                "resetting": resetting,
            })
        })
        .collect();
    serde_json::to_string_pretty(&serde_json::json!({ "phases": phases }))
        .expect("trajectory serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::empty_network_labels;
    use crate::instance::fixtures::{parallel4, path3, single_arc};

    const ETA: f64 = 1e-9;

    fn golden_parallel4() -> (Instance<f64>, Trajectory<f64>) {
        let p4 = parallel4();
        let full = GeneralizedSubnetwork::full(&p4);
        let start = empty_network_labels(&p4);
        let traj = compute_trajectory(&p4, &full, &start, 40.0, ETA).unwrap();
        (p4, traj)
    }

    #[test]
    fn parallel4_full_network_phases() {
        let (_, traj) = golden_parallel4();
        assert_eq!(traj.phases.len(), 3);
        let p = &traj.phases;
        assert!((p[0].theta_start - 0.0).abs() < ETA);
        assert!((p[0].theta_end - 1.0).abs() < ETA);
        assert_eq!(p[0].direction.0, vec![1.0, 3.0]);
        assert!((p[1].theta_end - 5.0).abs() < ETA);
        assert!(p[1].label_start.inf_distance(&LabelVector(vec![1.0, 6.0])) < ETA);
        assert!((p[1].direction.0[1] - 1.5).abs() < ETA);
        assert!(p[2].theta_end.is_infinite());
        assert!(p[2].label_start.inf_distance(&LabelVector(vec![5.0, 12.0])) < ETA);
        assert_eq!(p[2].direction.0, vec![1.0, 1.0]);
    }

    #[test]
    fn parallel4_restricted_subnetwork() {
        let p4 = parallel4();
        let sub = GeneralizedSubnetwork::from_names(&p4, &["e1", "e2"], &[]).unwrap();
        let start = LabelVector(vec![0.0, 3.0]);
        let traj = compute_trajectory(&p4, &sub, &start, 40.0, ETA).unwrap();
        assert_eq!(traj.phases.len(), 2);
        assert!((traj.phases[0].theta_end - 1.0).abs() < ETA);
        assert_eq!(traj.phases[0].direction.0, vec![1.0, 3.0]);
        assert!(traj.phases[1].theta_end.is_infinite());
        assert!((traj.phases[1].direction.0[1] - 1.5).abs() < ETA);
    }

    #[test]
    fn single_arc_steady_immediately() {
        let inst = single_arc(2.0, 1.0, 1.0);
        let full = GeneralizedSubnetwork::full(&inst);
        let start = empty_network_labels(&inst);
        let traj = compute_trajectory(&inst, &full, &start, 10.0, ETA).unwrap();
        assert_eq!(traj.phases.len(), 1);
        assert!(traj.phases[0].theta_end.is_infinite());
        assert_eq!(traj.phases[0].direction.0, vec![1.0, 1.0]);
        let info = steady_state_info(&inst, &traj, ETA);
        assert!(info.reached);
        assert_eq!(info.t_ss, Some(0.0));
    }

    #[test]
    fn evaluate_at_sample_points() {
        let (_, traj) = golden_parallel4();
        let l = evaluate_trajectory(&traj, 0.5).unwrap();
        assert!(l.inf_distance(&LabelVector(vec![0.5, 4.5])) < ETA);
        let l = evaluate_trajectory(&traj, 1.0).unwrap();
        assert!(l.inf_distance(&LabelVector(vec![1.0, 6.0])) < ETA);
        let l = evaluate_trajectory(&traj, 9.0).unwrap();
        assert!(l.inf_distance(&LabelVector(vec![9.0, 16.0])) < ETA);
    }

    #[test]
    fn steady_state_summary() {
        let (p4, traj) = golden_parallel4();
        let info = steady_state_info(&p4, &traj, ETA);
        assert!(info.reached);
        assert!((info.t_ss.unwrap() - 5.0).abs() < ETA);
        assert_eq!(info.lambda_ss.unwrap().0, vec![1.0, 1.0]);
        assert!(info.violations.is_empty());

        // Truncated before steady state.
        let full = GeneralizedSubnetwork::full(&p4);
        let start = empty_network_labels(&p4);
        let short = compute_trajectory(&p4, &full, &start, 3.0, ETA).unwrap();
        assert!(!steady_state_info(&p4, &short, ETA).reached);
    }

    #[test]
    fn e4_never_active() {
        let (p4, traj) = golden_parallel4();
        let e4 = p4.arc_id("e4").unwrap();
        for phase in &traj.phases {
            assert!(!phase.config.is_active(e4));
        }
    }

    #[test]
    fn exact_profile_decomposition() {
        let (p4, traj) = golden_parallel4();
        let traj = Trajectory { horizon: 10.0, ..traj };
        let classes = derive_exact_profile(&p4, &traj, ETA).unwrap();
        assert_eq!(classes.len(), 1 + 2 + 3);
        // Phase 1: single class on e1 at rate u0.
        match classes[0].entry {
            EntrySpec::Interval { start, end, rate } => {
                assert!((start - 0.0).abs() < ETA);
                assert!((end - 1.0).abs() < ETA);
                assert!((rate - 3.0).abs() < ETA);
            }
            _ => panic!("expected interval entry"),
        }
        // Phase 2: two classes at rate 1.5 on [1, 5).
        for class in &classes[1..3] {
            match class.entry {
                EntrySpec::Interval { start, end, rate } => {
                    assert!((start - 1.0).abs() < ETA);
                    assert!((end - 5.0).abs() < ETA);
                    assert!((rate - 1.5).abs() < ETA);
                }
                _ => panic!("expected interval entry"),
            }
        }
        // Phase 3: three classes at rate 1 on [5, 10).
        for class in &classes[3..6] {
            match class.entry {
                EntrySpec::Interval { start, end, rate } => {
                    assert!((start - 5.0).abs() < ETA);
                    assert!((end - 10.0).abs() < ETA);
                    assert!((rate - 1.0).abs() < ETA);
                }
                _ => panic!("expected interval entry"),
            }
        }
    }

    #[test]
    fn projection_examples() {
        let p4 = parallel4();
        let l = LabelVector(vec![5.0, 12.0]);
        let projected = project_to_valid(&p4, &l, ETA).unwrap();
        assert!(projected.inf_distance(&l) < ETA);

        let path = path3();
        let l = LabelVector(vec![0.0, 2.0, 2.5]);
        let projected = project_to_valid(&path, &l, ETA).unwrap();
        assert!(projected.inf_distance(&LabelVector(vec![0.0, 1.5, 2.5])) < ETA);
        let full = GeneralizedSubnetwork::full(&path);
        let cfg = classify_configuration(&path, &projected, &full, ETA);
        assert!(is_valid_configuration(&path, &cfg).is_ok());
    }

    #[test]
    fn projection_never_increases_labels() {
        let path = path3();
        let l = LabelVector(vec![0.0, 3.0, 2.0]);
        let projected = project_to_valid(&path, &l, ETA).unwrap();
        for v in path.nodes() {
            assert!(projected.get(v) <= l.get(v) + ETA);
        }
        let full = GeneralizedSubnetwork::full(&path);
        let cfg = classify_configuration(&path, &projected, &full, ETA);
        assert!(is_valid_configuration(&path, &cfg).is_ok());
    }

    #[test]
    fn kappa_lipschitz_on_golden_trajectory() {
        let (p4, traj) = golden_parallel4();
        let kappa = p4.kappa();
        let mut theta = 0.0;
        while theta < 9.0 {
            let a = evaluate_trajectory(&traj, theta).unwrap();
            let b = evaluate_trajectory(&traj, theta + 0.37).unwrap();
            assert!(a.inf_distance(&b) <= kappa * 0.37 + ETA);
            theta += 0.53;
        }
    }

    #[test]
    fn continuity_probe_perturbed_start() {
        let p4 = parallel4();
        let full = GeneralizedSubnetwork::full(&p4);
        let a = compute_trajectory(&p4, &full, &LabelVector(vec![0.0, 3.0]), 40.0, ETA).unwrap();
        let b =
            compute_trajectory(&p4, &full, &LabelVector(vec![0.0, 3.001]), 40.0, ETA).unwrap();
        let mut theta = 0.0;
        while theta <= 10.0 {
            let la = evaluate_trajectory(&a, theta).unwrap();
            let lb = evaluate_trajectory(&b, theta).unwrap();
            assert!(la.inf_distance(&lb) <= 1e-2, "diverged at theta = {theta}");
            theta += 0.01;
        }
    }

    #[test]
    fn phase_boundaries_touch_hyperplanes() {
        let (p4, traj) = golden_parallel4();
        for pair in traj.phases.windows(2) {
            let boundary = &pair[1].label_start;
            let touches = p4.arcs().any(|a| {
                traj.subnetwork.has_hyperplane(a)
                    && crate::instance::hyperplane_distance(&p4, boundary, a) <= ETA
            });
            assert!(touches);
        }
    }

    #[test]
    fn queue_delays_continuous_across_phases() {
        let (p4, traj) = golden_parallel4();
        for pair in traj.phases.windows(2) {
            let end_prev = pair[0]
                .label_start
                .advanced(&pair[0].direction, pair[0].theta_end - pair[0].theta_start);
            for a in p4.arcs() {
                let arc = p4.arc(a);
                let d_prev =
                    (end_prev.get(arc.head) - end_prev.get(arc.tail) - arc.tau).max(0.0);
                let next = &pair[1].label_start;
                let d_next = (next.get(arc.head) - next.get(arc.tail) - arc.tau).max(0.0);
                assert!((d_prev - d_next).abs() < ETA);
            }
        }
    }

    #[test]
    fn trajectory_json_shape() {
        let (p4, traj) = golden_parallel4();
        let json = trajectory_to_json(&p4, &traj);
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["phases"].as_array().unwrap().len(), 3);
        assert!(v["phases"][2]["theta_end"].is_null());
        assert!(v["phases"][0]["label_start"]["t"].is_number());
    }
}
