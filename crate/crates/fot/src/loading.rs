//! Continuous network loading for finitely-represented strategy profiles,
//! and the equilibrium-quality meters measured on the loaded outcome.
//!
//! A strategy class sends a mass of agents along one s-t path, entering the
//! network either as an atom or at a constant rate over an interval, with an
//! affine-in-entry-time waiting budget at each path node. Loading resolves
//! the induced queueing exactly: every cumulative flow, queue volume, and
//! per-class departure function is piecewise affine, and the loader works
//! directly on that representation. Causality is handled by advancing a
//! global commit window of length `min_e tau_e`: arc exits inside a window
//! depend only on arc entries committed in earlier windows.
//!
//! Agents within a class are parametrized by their cumulative mass position
//! `m in [0, mass]`, ordered by network entry time; all departure functions
//! are piecewise affine in `m`. FIFO queue exits come from the cumulative
//! inflow/served-mass pair: a rate chunk entering at time `xi` exits the
//! queue at `xi + z(xi)/nu`, and an atom's agents exit over a service window
//! ordered by network entry (simultaneous atoms are served in order of class
//! entry infimum, then class id).

use std::collections::HashMap;

use thiserror::Error;

use crate::instance::{ArcId, Instance, LabelVector, NodeId};
use crate::num::Real;
use crate::thinflow::{GeneralizedSubnetwork, ThinFlow};

/// Entry pattern of a strategy class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EntrySpec<T> {
    /// `mass` agents entering the network at one instant.
    Atom { time: T, mass: T },
    /// Constant-rate entry over the half-open interval `(start, end]`.
    Interval { start: T, end: T, rate: T },
}

impl<T: Real> EntrySpec<T> {
    pub fn mass(&self) -> T {
        match *self {
            EntrySpec::Atom { mass, .. } => mass,
            EntrySpec::Interval { start, end, rate } => rate * (end - start),
        }
    }

    pub fn infimum(&self) -> T {
        match *self {
            EntrySpec::Atom { time, .. } => time,
            EntrySpec::Interval { start, .. } => start,
        }
    }

    pub fn supremum(&self) -> T {
        match *self {
            EntrySpec::Atom { time, .. } => time,
            EntrySpec::Interval { end, .. } => end,
        }
    }

    /// Entry time of the agent at mass position `m`.
    fn theta_at(&self, m: T) -> T {
        match *self {
            EntrySpec::Atom { time, .. } => time,
            EntrySpec::Interval { start, rate, .. } => start + m / rate,
        }
    }

    /// Slope of entry time with respect to mass position.
    fn theta_slope(&self) -> T {
        match *self {
            EntrySpec::Atom { .. } => T::zero(),
            EntrySpec::Interval { rate, .. } => T::one() / rate,
        }
    }
}

/// Affine waiting budget `w(theta) = offset + slope * theta` at one node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NodeWaiting<T> {
    pub offset: T,
    pub slope: T,
}

impl<T: Real> NodeWaiting<T> {
    pub fn zero() -> Self {
        NodeWaiting {
            offset: T::zero(),
            slope: T::zero(),
        }
    }

    pub fn eval(&self, theta: T) -> T {
        self.offset + self.slope * theta
    }
}

/// One strategy class: a path, an entry pattern, and a waiting budget per
/// path node (source first, sink last; length = arcs + 1).
#[derive(Clone, Debug)]
pub struct StrategyClass<T> {
    pub path: Vec<ArcId>,
    pub entry: EntrySpec<T>,
    pub waiting: Vec<NodeWaiting<T>>,
}

#[derive(Debug, Error)]
pub enum LoadingError {
    #[error("class {class}: path is not a simple source-to-sink arc chain ({reason})")]
    BadPath { class: usize, reason: String },
    #[error("class {class}: waiting budget must list one entry per path node")]
    BadWaitingLength { class: usize },
    #[error("class {class}: negative waiting at node index {node}")]
    NegativeWaiting { class: usize, node: usize },
    #[error("class {class}: departure times decrease with entry order")]
    DecreasingDeparture { class: usize },
    #[error("class {class}: entry specification is degenerate")]
    BadEntry { class: usize },
    #[error("entry coverage violated near time {at}: total class rate {found} vs inflow rate {expected}")]
    Coverage { at: f64, found: f64, expected: f64 },
    #[error("loading exceeded the event window cap ({windows} windows)")]
    EventOverflow { windows: usize },
    #[error("no classes to load")]
    EmptyProfile,
    #[error("query time {theta} outside loaded range")]
    BeyondHorizon { theta: f64 },
    #[error("class {class}: node {node} is not on the class path")]
    NodeNotOnPath { class: usize, node: String },
}

/// Affine departure-time piece over a mass range of one class.
#[derive(Clone, Copy, Debug)]
pub struct Piece<T> {
    pub m0: T,
    pub m1: T,
    pub t0: T,
    pub slope: T,
}

impl<T: Real> Piece<T> {
    pub fn time_at(&self, m: T) -> T {
        self.t0 + self.slope * (m - self.m0)
    }

    pub fn t_end(&self) -> T {
        self.time_at(self.m1)
    }

    fn split_at_time(&self, t: T) -> (Piece<T>, Option<Piece<T>>) {
        if self.slope <= T::zero() || self.t_end() <= t {
            return (*self, None);
        }
        let m_split = self.m0 + (t - self.t0) / self.slope;
        let m_split = m_split.min(self.m1).max(self.m0);
        (
            Piece {
                m0: self.m0,
                m1: m_split,
                t0: self.t0,
                slope: self.slope,
            },
            Some(Piece {
                m0: m_split,
                m1: self.m1,
                t0: self.time_at(m_split),
                slope: self.slope,
            }),
        )
    }
}

/// Time breakpoint of one arc's cumulative inflow / queue state.
#[derive(Clone, Copy, Debug)]
struct Breakpoint<T> {
    t: T,
    f_left: T,
    f_right: T,
    z_left: T,
    z_right: T,
    rate_after: T,
    z_slope_after: T,
}

/// Piecewise state of one arc: cumulative inflow `F`, queue volume `z`, and
/// the derived queue-exit cumulative `Q = F - z`.
#[derive(Clone, Debug)]
pub struct ArcFlow<T> {
    nu: T,
    tau: T,
    bps: Vec<Breakpoint<T>>,
    // Frontier state (time, F, z, inflow rate) of the committed prefix.
    last_t: T,
    last_f: T,
    last_z: T,
    last_rate: T,
    // Atom registry for FIFO priority among simultaneous atoms:
    // (time, class entry infimum, class id, mass).
    atoms: Vec<(T, T, usize, T)>,
    finalized: bool,
}

impl<T: Real> ArcFlow<T> {
    fn new(nu: T, tau: T) -> Self {
        let zero = T::zero();
        ArcFlow {
            nu,
            tau,
            bps: vec![Breakpoint {
                t: zero,
                f_left: zero,
                f_right: zero,
                z_left: zero,
                z_right: zero,
                rate_after: zero,
                z_slope_after: zero,
            }],
            last_t: zero,
            last_f: zero,
            last_z: zero,
            last_rate: zero,
            atoms: Vec::new(),
            finalized: false,
        }
    }

    fn z_slope(&self) -> T {
        let net = self.last_rate - self.nu;
        if self.last_z > T::zero() {
            net
        } else {
            net.max(T::zero())
        }
    }

    fn push_bp(&mut self, atom: T) {
        let bp = Breakpoint {
            t: self.last_t,
            f_left: self.last_f - atom,
            f_right: self.last_f,
            z_left: self.last_z - atom,
            z_right: self.last_z,
            rate_after: self.last_rate,
            z_slope_after: self.z_slope(),
        };
        match self.bps.last_mut() {
            Some(last) if last.t == bp.t => *last = Breakpoint {
                f_left: last.f_left.min(bp.f_left),
                z_left: last.z_left.min(bp.z_left),
                ..bp
            },
            _ => self.bps.push(bp),
        }
    }

    /// Extends the committed prefix to `t`, inserting a breakpoint where the
    /// queue drains to zero mid-segment.
    fn advance_to(&mut self, t: T) {
        if t <= self.last_t {
            return;
        }
        loop {
            let slope = self.z_slope();
            if self.last_z > T::zero() && slope < T::zero() {
                let hit = self.last_t + self.last_z / (-slope);
                if hit < t {
                    self.last_f = self.last_f + self.last_rate * (hit - self.last_t);
                    self.last_z = T::zero();
                    self.last_t = hit;
                    self.push_bp(T::zero());
                    continue;
                }
            }
            let dt = t - self.last_t;
            self.last_f = self.last_f + self.last_rate * dt;
            self.last_z = (self.last_z + slope * dt).max(T::zero());
            self.last_t = t;
            break;
        }
    }

    fn add_atom(&mut self, t: T, mass: T, class: usize, entry_inf: T) {
        self.advance_to(t);
        self.last_f = self.last_f + mass;
        self.last_z = self.last_z + mass;
        self.push_bp(mass);
        self.atoms.push((t, entry_inf, class, mass));
    }

    fn add_rate_delta(&mut self, t: T, delta: T) {
        self.advance_to(t);
        self.last_rate = self.last_rate + delta;
        self.push_bp(T::zero());
    }

    fn finalize(&mut self) {
        if self.last_z > T::zero() {
            let drain = self.last_t + self.last_z / self.nu;
            self.advance_to(drain);
        }
        self.push_bp(T::zero());
        self.finalized = true;
    }

    fn bp_index_at(&self, t: T) -> usize {
        // Last breakpoint with bp.t <= t.
        match self
            .bps
            .binary_search_by(|bp| bp.t.partial_cmp(&t).expect("finite times"))
        {
            Ok(mut i) => {
                while i + 1 < self.bps.len() && self.bps[i + 1].t <= t {
                    i += 1;
                }
                i
            }
            Err(0) => 0,
            Err(i) => i - 1,
        }
    }

    /// Queue volume, right-continuous.
    pub fn queue_at(&self, t: T) -> T {
        if t < self.bps[0].t {
            return T::zero();
        }
        let bp = &self.bps[self.bp_index_at(t)];
        (bp.z_right + bp.z_slope_after * (t - bp.t)).max(T::zero())
    }

    /// Queue volume, left limit.
    pub fn queue_before(&self, t: T) -> T {
        if t <= self.bps[0].t {
            return T::zero();
        }
        let i = self.bp_index_at(t);
        let bp = &self.bps[i];
        if bp.t == t {
            bp.z_left
        } else {
            (bp.z_right + bp.z_slope_after * (t - bp.t)).max(T::zero())
        }
    }

    /// Cumulative inflow `F+`, right-continuous.
    pub fn cumulative_in(&self, t: T) -> T {
        if t < self.bps[0].t {
            return T::zero();
        }
        let bp = &self.bps[self.bp_index_at(t)];
        bp.f_right + bp.rate_after * (t - bp.t)
    }

    /// Cumulative outflow `F-` at the arc tail exit: mass that has left the
    /// arc (queue plus transit) by time `t`.
    pub fn cumulative_out(&self, t: T) -> T {
        let shifted = t - self.tau;
        (self.cumulative_in(shifted) - self.queue_at(shifted)).max(T::zero())
    }

    /// Breakpoint times of the committed inflow/queue data.
    pub fn breakpoint_times(&self) -> Vec<T> {
        self.bps.iter().map(|bp| bp.t).collect()
    }

    pub fn transit(&self) -> T {
        self.tau
    }

    pub fn capacity(&self) -> T {
        self.nu
    }

    /// Residual of the queues-operate-at-capacity identity at time `t`:
    /// `| z(t) - max_psi (F(t) - F(psi) - nu (t - psi)) |`, the max taken
    /// over breakpoints and the endpoints.
    pub fn capacity_identity_residual(&self, t: T) -> T {
        let f_t = self.cumulative_in(t);
        let mut best = f_t - self.cumulative_in(t.max(T::zero())); // psi = t term: 0
        let mut consider = |psi: T| {
            if psi < T::zero() || psi > t {
                return;
            }
            // Use the left limit of F at psi as well: the max over psi of a
            // piecewise function can be approached from either side.
            let candidates = [self.cumulative_in(psi), {
                let i = self.bp_index_at(psi);
                if self.bps[i].t == psi {
                    self.bps[i].f_left
                } else {
                    self.cumulative_in(psi)
                }
            }];
            for f_psi in candidates {
                let v = f_t - f_psi - self.nu * (t - psi);
                if v > best {
                    best = v;
                }
            }
        };
        consider(T::zero());
        for bp in &self.bps {
            consider(bp.t);
        }
        (self.queue_at(t) - best.max(T::zero())).abs()
    }

    /// Exit-from-queue pieces for a rate chunk entering over the committed
    /// prefix: `exit(m) = entry(m) + z(entry(m)) / nu`.
    fn rate_chunk_exits(&self, piece: &Piece<T>) -> Vec<Piece<T>> {
        let mut out = Vec::new();
        let t_lo = piece.t0;
        let t_hi = piece.t_end();
        // Mass positions where the arc state changes inside (t_lo, t_hi).
        let mut cuts = vec![piece.m0];
        for bp in &self.bps {
            if bp.t > t_lo && bp.t < t_hi {
                cuts.push(piece.m0 + (bp.t - t_lo) / piece.slope);
            }
        }
        cuts.push(piece.m1);
        cuts.sort_by(|a, b| a.partial_cmp(b).expect("finite mass"));
        for pair in cuts.windows(2) {
            let (ma, mb) = (pair[0], pair[1]);
            if mb <= ma {
                continue;
            }
            let ta = piece.time_at(ma);
            let za = self.queue_at(ta);
            let z_slope = {
                let bp = &self.bps[self.bp_index_at(ta)];
                bp.z_slope_after
            };
            let exit_slope = piece.slope * (T::one() + z_slope / self.nu);
            out.push(Piece {
                m0: ma,
                m1: mb,
                t0: ta + za / self.nu,
                slope: exit_slope.max(T::zero()),
            });
        }
        out
    }

    /// Exit-from-queue piece for an atom chunk: agents leave over a service
    /// window in network-entry order, behind all simultaneous atoms with
    /// higher priority (earlier class entry, then smaller class id).
    fn atom_chunk_exit(&self, piece: &Piece<T>, class: usize, entry_inf: T, t: T) -> Piece<T> {
        let z = self.queue_at(t);
        let mut later_atoms = T::zero();
        for &(at, inf, cls, mass) in &self.atoms {
            if at == t && (inf, cls) > (entry_inf, class) {
                later_atoms = later_atoms + mass;
            }
        }
        let own = piece.m1 - piece.m0;
        let ahead_of_first = (z - own - later_atoms).max(T::zero());
        Piece {
            m0: piece.m0,
            m1: piece.m1,
            t0: t + ahead_of_first / self.nu,
            slope: T::one() / self.nu,
        }
    }
}

/// Per-class loaded data: recorded departure pieces per path node.
#[derive(Clone, Debug)]
pub struct LoadedClass<T> {
    pub path: Vec<ArcId>,
    pub nodes: Vec<NodeId>,
    pub entry: EntrySpec<T>,
    pub waiting: Vec<NodeWaiting<T>>,
    pub mass: T,
    /// `departures[j]` are the pieces of the departure-time function from
    /// path node `j` (entry into arc `j`, or out of the network at the sink).
    pub departures: Vec<Vec<Piece<T>>>,
}

impl<T: Real> LoadedClass<T> {
    /// Departure time of the agent at mass position `m` from path node `j`.
    pub fn departure_at(&self, j: usize, m: T) -> T {
        let pieces = &self.departures[j];
        for p in pieces {
            if m <= p.m1 {
                return p.time_at(m.max(p.m0));
            }
        }
        pieces
            .last()
            .map(|p| p.t_end())
            .expect("class has departure pieces")
    }

    /// Arrival time at path node `j` (departure minus the waiting budget).
    pub fn arrival_at(&self, j: usize, m: T) -> T {
        let theta = self.entry.theta_at(m);
        self.departure_at(j, m) - self.waiting[j].eval(theta)
    }
}

/// Result of network loading: per-arc cumulative flows and queues, plus
/// per-class departure functions.
#[derive(Clone, Debug)]
pub struct Outcome<T> {
    pub arcs: Vec<ArcFlow<T>>,
    pub classes: Vec<LoadedClass<T>>,
    inflow_rate: T,
}

/// One in-flight mass range of a class: its departure piece from node `j`.
struct Fragment<T> {
    class: usize,
    node_j: usize,
    piece: Piece<T>,
}

enum ArcEvent<T> {
    Atom {
        t: T,
        mass: T,
        class: usize,
        entry_inf: T,
    },
    Rate {
        t0: T,
        t1: T,
        rate: T,
    },
}

/// Loads a strategy profile, producing the unique associated outcome.
pub fn load_profile<T: Real>(
    inst: &Instance<T>,
    classes: &[StrategyClass<T>],
    eta: T,
) -> Result<Outcome<T>, LoadingError> {
    if classes.is_empty() {
        return Err(LoadingError::EmptyProfile);
    }
    let loaded = validate_classes(inst, classes, eta)?;
    check_entry_coverage(inst, classes, eta)?;

    let mut arcs: Vec<ArcFlow<T>> = inst
        .arcs()
        .map(|a| ArcFlow::new(inst.arc(a).nu, inst.arc(a).tau))
        .collect();
    let mut out_classes = loaded;

    // Initial fragments: departures from the source.
    let mut pending: Vec<Fragment<T>> = Vec::new();
    for (ci, class) in out_classes.iter().enumerate() {
        if class.mass <= T::zero() {
            continue;
        }
        let theta_slope = class.entry.theta_slope();
        let w = class.waiting[0];
        let theta0 = class.entry.theta_at(T::zero());
        let dep_slope = theta_slope * (T::one() + w.slope);
        if dep_slope < -eta {
            return Err(LoadingError::DecreasingDeparture { class: ci });
        }
        pending.push(Fragment {
            class: ci,
            node_j: 0,
            piece: Piece {
                m0: T::zero(),
                m1: class.mass,
                t0: theta0 + w.eval(theta0),
                slope: dep_slope.max(T::zero()),
            },
        });
    }

    let window = inst.min_transit();
    let max_windows = loading_window_cap(inst, &out_classes, window);
    let mut w_lo = T::zero();
    let mut windows_used = 0usize;

    while !pending.is_empty() {
        windows_used += 1;
        if windows_used > max_windows {
            return Err(LoadingError::EventOverflow {
                windows: max_windows,
            });
        }
        let w_hi = w_lo + window;

        // Phase A: commit the parts of pending fragments landing in this
        // window; gather the induced arc-entry events.
        let mut events: HashMap<usize, Vec<ArcEvent<T>>> = HashMap::new();
        let mut committed: Vec<Fragment<T>> = Vec::new();
        let mut still_pending: Vec<Fragment<T>> = Vec::new();
        for frag in pending.drain(..) {
            if frag.piece.t0 >= w_hi {
                still_pending.push(frag);
                continue;
            }
            let (now, later) = frag.piece.split_at_time(w_hi);
            if let Some(later) = later {
                if later.m1 > later.m0 {
                    still_pending.push(Fragment {
                        class: frag.class,
                        node_j: frag.node_j,
                        piece: later,
                    });
                }
            }
            if now.m1 <= now.m0 {
                continue;
            }
            let class = &mut out_classes[frag.class];
            class.departures[frag.node_j].push(now);
            if frag.node_j < class.path.len() {
                let arc = class.path[frag.node_j];
                let span = now.slope * (now.m1 - now.m0);
                let atom_eps = T::real(1e-12) * (T::one() + now.t0.abs());
                let entry_inf = class.entry.infimum();
                let ev = if span <= atom_eps {
                    ArcEvent::Atom {
                        t: now.t0,
                        mass: now.m1 - now.m0,
                        class: frag.class,
                        entry_inf,
                    }
                } else {
                    ArcEvent::Rate {
                        t0: now.t0,
                        t1: now.t_end(),
                        rate: T::one() / now.slope,
                    }
                };
                events.entry(arc.0).or_default().push(ev);
                committed.push(Fragment {
                    class: frag.class,
                    node_j: frag.node_j,
                    piece: now,
                });
            }
        }
        pending = still_pending;

        // Phase B: apply the window's events to each arc in time order.
        let mut arc_ids: Vec<usize> = events.keys().copied().collect();
        arc_ids.sort_unstable();
        for arc_idx in arc_ids {
            let evts = events.remove(&arc_idx).expect("events present");
            let mut deltas: Vec<(T, i8, T, usize, T)> = Vec::new();
            // (time, kind, amount, class, entry_inf); kind 0 = atom, 1 = rate delta.
            for ev in evts {
                match ev {
                    ArcEvent::Atom {
                        t,
                        mass,
                        class,
                        entry_inf,
                    } => deltas.push((t, 0, mass, class, entry_inf)),
                    ArcEvent::Rate { t0, t1, rate } => {
                        deltas.push((t0, 1, rate, usize::MAX, T::zero()));
                        deltas.push((t1, 1, -rate, usize::MAX, T::zero()));
                    }
                }
            }
            deltas.sort_by(|a, b| {
                (a.0, a.1, a.4, a.3)
                    .partial_cmp(&(b.0, b.1, b.4, b.3))
                    .expect("finite event times")
            });
            for (t, kind, amount, class, entry_inf) in deltas {
                if kind == 0 {
                    arcs[arc_idx].add_atom(t, amount, class, entry_inf);
                } else {
                    arcs[arc_idx].add_rate_delta(t, amount);
                }
            }
            arcs[arc_idx].advance_to(w_hi);
        }

        // Phase C: exits of the chunks committed this window become the
        // next node's departure fragments.
        for frag in committed {
            let class = &out_classes[frag.class];
            let arc_id = class.path[frag.node_j];
            let arc = &arcs[arc_id.0];
            let theta_slope = class.entry.theta_slope();
            let next_wait = class.waiting[frag.node_j + 1];
            let span = frag.piece.slope * (frag.piece.m1 - frag.piece.m0);
            let atom_eps = T::real(1e-12) * (T::one() + frag.piece.t0.abs());
            let exits = if span <= atom_eps {
                vec![arc.atom_chunk_exit(
                    &frag.piece,
                    frag.class,
                    class.entry.infimum(),
                    frag.piece.t0,
                )]
            } else {
                arc.rate_chunk_exits(&frag.piece)
            };
            for exit in exits {
                let theta_a = class.entry.theta_at(exit.m0);
                let arrival_t0 = exit.t0 + arc.tau;
                let dep_t0 = arrival_t0 + next_wait.eval(theta_a);
                let dep_slope = exit.slope + next_wait.slope * theta_slope;
                if dep_slope < -eta {
                    return Err(LoadingError::DecreasingDeparture { class: frag.class });
                }
                if next_wait.eval(theta_a) < -eta
                    || next_wait.eval(class.entry.theta_at(exit.m1)) < -eta
                {
                    return Err(LoadingError::NegativeWaiting {
                        class: frag.class,
                        node: frag.node_j + 1,
                    });
                }
                pending.push(Fragment {
                    class: frag.class,
                    node_j: frag.node_j + 1,
                    piece: Piece {
                        m0: exit.m0,
                        m1: exit.m1,
                        t0: dep_t0,
                        slope: dep_slope.max(T::zero()),
                    },
                });
            }
        }

        w_lo = w_hi;
    }

    for arc in &mut arcs {
        arc.finalize();
    }
    Ok(Outcome {
        arcs,
        classes: out_classes,
        inflow_rate: inst.inflow_rate(),
    })
}

fn loading_window_cap<T: Real>(
    inst: &Instance<T>,
    classes: &[LoadedClass<T>],
    window: T,
) -> usize {
    // Every agent finishes by: last entry + per-arc transit plus worst-case
    // service of the entire mass, plus the waiting budgets.
    let total_mass = classes
        .iter()
        .fold(T::zero(), |acc, c| acc + c.mass);
    let last_entry = classes
        .iter()
        .map(|c| c.entry.supremum())
        .fold(T::zero(), T::max);
    let mut bound = last_entry + inst.total_transit();
    for a in inst.arcs() {
        bound = bound + total_mass / inst.arc(a).nu;
    }
    for c in classes {
        for w in &c.waiting {
            let a = w.eval(c.entry.infimum()).abs();
            let b = w.eval(c.entry.supremum()).abs();
            bound = bound + a.max(b);
        }
    }
    let windows = (bound / window).to_f64_lossy().ceil() as usize;
    windows.saturating_add(8)
}

fn validate_classes<T: Real>(
    inst: &Instance<T>,
    classes: &[StrategyClass<T>],
    eta: T,
) -> Result<Vec<LoadedClass<T>>, LoadingError> {
    let mut out = Vec::with_capacity(classes.len());
    for (ci, class) in classes.iter().enumerate() {
        if class.path.is_empty() {
            return Err(LoadingError::BadPath {
                class: ci,
                reason: "empty".into(),
            });
        }
        let mut nodes = vec![inst.arc(class.path[0]).tail];
        for pair in class.path.windows(2) {
            if inst.arc(pair[0]).head != inst.arc(pair[1]).tail {
                return Err(LoadingError::BadPath {
                    class: ci,
                    reason: "arcs not consecutive".into(),
                });
            }
        }
        for &a in &class.path {
            nodes.push(inst.arc(a).head);
        }
        if nodes[0] != inst.source() || *nodes.last().unwrap() != inst.sink() {
            return Err(LoadingError::BadPath {
                class: ci,
                reason: "must run from source to sink".into(),
            });
        }
        let mut seen = vec![false; inst.node_count()];
        for &v in &nodes {
            if seen[v.0] {
                return Err(LoadingError::BadPath {
                    class: ci,
                    reason: "repeated node".into(),
                });
            }
            seen[v.0] = true;
        }
        if class.waiting.len() != nodes.len() {
            return Err(LoadingError::BadWaitingLength { class: ci });
        }
        match class.entry {
            EntrySpec::Atom { time, mass } => {
                if !(mass > T::zero()) || !(time >= T::zero()) {
                    return Err(LoadingError::BadEntry { class: ci });
                }
            }
            EntrySpec::Interval { start, end, rate } => {
                if !(end > start) || !(rate > T::zero()) || !(start >= T::zero()) {
                    return Err(LoadingError::BadEntry { class: ci });
                }
            }
        }
        for (ni, w) in class.waiting.iter().enumerate() {
            let lo = w.eval(class.entry.infimum());
            let hi = w.eval(class.entry.supremum());
            if lo < -eta || hi < -eta {
                return Err(LoadingError::NegativeWaiting {
                    class: ci,
                    node: ni,
                });
            }
        }
        out.push(LoadedClass {
            path: class.path.clone(),
            nodes,
            entry: class.entry,
            waiting: class.waiting.clone(),
            mass: class.entry.mass(),
            departures: vec![Vec::new(); class.path.len() + 1],
        });
    }
    Ok(out)
}

/// Interval entries must jointly cover their span at exactly the network
/// inflow rate (atoms are instantaneous and exempt).
fn check_entry_coverage<T: Real>(
    inst: &Instance<T>,
    classes: &[StrategyClass<T>],
    eta: T,
) -> Result<(), LoadingError> {
    let mut cuts: Vec<T> = Vec::new();
    for class in classes {
        if let EntrySpec::Interval { start, end, .. } = class.entry {
            cuts.push(start);
            cuts.push(end);
        }
    }
    if cuts.is_empty() {
        return Ok(());
    }
    cuts.sort_by(|a, b| a.partial_cmp(b).expect("finite entry times"));
    cuts.dedup_by(|a, b| *a == *b);
    let tol = T::real(1e-6).max(eta);
    for pair in cuts.windows(2) {
        let mid = (pair[0] + pair[1]) / T::real(2.0);
        let mut total = T::zero();
        for class in classes {
            if let EntrySpec::Interval { start, end, rate } = class.entry {
                if start <= mid && mid < end {
                    total = total + rate;
                }
            }
        }
        if (total - inst.inflow_rate()).abs() > tol {
            return Err(LoadingError::Coverage {
                at: mid.to_f64_lossy(),
                found: total.to_f64_lossy(),
                expected: inst.inflow_rate().to_f64_lossy(),
            });
        }
    }
    Ok(())
}

/// Mass of agents with network entry time in `(a, b]`.
pub fn mass_entering<T: Real>(out: &Outcome<T>, a: T, b: T) -> T {
    let mut total = T::zero();
    for class in &out.classes {
        match class.entry {
            EntrySpec::Atom { time, mass } => {
                if time > a && time <= b {
                    total = total + mass;
                }
            }
            EntrySpec::Interval { start, end, rate } => {
                let lo = start.max(a);
                let hi = end.min(b);
                if hi > lo {
                    total = total + rate * (hi - lo);
                }
            }
        }
    }
    total
}

/// Evaluation side for earliest-arrival labels: `Right` is the standard
/// convention (a probe is delayed by atoms entering exactly at its arrival
/// instant); `Left` takes the limit from earlier entry times.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum LabelSide {
    Left,
    Right,
}

/// Earliest-arrival labels at entry time `theta`: label-setting over the
/// Bellman recursion `l_w = min over e=vw of l_v + tau_e + z_e(l_v)/nu_e`.
pub fn earliest_arrival_labels<T: Real>(
    inst: &Instance<T>,
    out: &Outcome<T>,
    theta: T,
) -> LabelVector<T> {
    earliest_arrival_labels_side(inst, out, theta, LabelSide::Right)
}

pub fn earliest_arrival_labels_side<T: Real>(
    inst: &Instance<T>,
    out: &Outcome<T>,
    theta: T,
    side: LabelSide,
) -> LabelVector<T> {
    let n = inst.node_count();
    let mut labels = LabelVector(vec![T::infinity(); n]);
    labels.set(inst.source(), theta);
    let mut done = vec![false; n];
    // Label-setting: sound because each arc's arrival function is
    // nondecreasing in the entry time (FIFO).
    for _ in 0..n {
        let mut best: Option<NodeId> = None;
        for v in inst.nodes() {
            if !done[v.0] && labels.get(v).is_finite() {
                if best.map_or(true, |b| labels.get(v) < labels.get(b)) {
                    best = Some(v);
                }
            }
        }
        let Some(v) = best else { break };
        done[v.0] = true;
        for &a in inst.out_arcs(v) {
            let arc = inst.arc(a);
            let flow = &out.arcs[a.0];
            let depart = labels.get(v);
            let z = match side {
                LabelSide::Right => flow.queue_at(depart),
                LabelSide::Left => flow.queue_before(depart),
            };
            let arrive = depart + arc.tau + z / arc.nu;
            if arrive < labels.get(arc.head) {
                labels.set(arc.head, arrive);
            }
        }
    }
    labels
}

/// Per-class candidate evaluation points for the equilibrium meters: the
/// endpoints of every recorded departure piece (the functions are piecewise
/// affine, so suprema occur at piece boundaries or at label breakpoints,
/// which the left-side evaluation covers).
fn gap_candidates<T: Real>(class: &LoadedClass<T>, j: usize) -> Vec<T> {
    let mut ms = Vec::new();
    for p in &class.departures[j] {
        ms.push(p.m0);
        ms.push(p.m1);
    }
    ms
}

/// Measured deviation of one outcome from equilibrium at the sink:
/// `sup (arrival at sink) - (earliest possible arrival)`.
pub fn measure_epsilon<T: Real>(inst: &Instance<T>, out: &Outcome<T>) -> T {
    measure_gap(inst, out, GapScope::SinkOnly)
}

/// Strict deviation: the same supremum taken over every node of every
/// class path.
pub fn measure_strict_delta<T: Real>(inst: &Instance<T>, out: &Outcome<T>) -> T {
    measure_gap(inst, out, GapScope::AllNodes)
}

enum GapScope {
    SinkOnly,
    AllNodes,
}

/// The supremum of `arrival_v(a) - l_v(entry(a))` over agents and nodes.
///
/// Arrival at a node is the departure minus the strategy's waiting budget
/// there: an agent is measured on when it reaches each node, so a waiting
/// budget spent after arriving (in particular at the sink) does not count
/// against it. Both label sides are evaluated at each candidate to catch
/// suprema approached from the left of label jumps.
fn measure_gap<T: Real>(inst: &Instance<T>, out: &Outcome<T>, scope: GapScope) -> T {
    let mut worst = T::zero();
    for class in &out.classes {
        let k = class.path.len();
        let range = match scope {
            GapScope::SinkOnly => k..k + 1,
            GapScope::AllNodes => 1..k + 1,
        };
        for j in range {
            let node = class.nodes[j];
            for m in gap_candidates(class, j) {
                let theta = class.entry.theta_at(m);
                let arrival = class.arrival_at(j, m);
                for side in [LabelSide::Right, LabelSide::Left] {
                    let l = earliest_arrival_labels_side(inst, out, theta, side);
                    let gap = arrival - l.get(node);
                    worst = worst.max(gap);
                }
            }
        }
    }
    worst
}

/// Mass of agents entering the network after the earliest member of `class`
/// whose earliest possible arrival at `node` precedes that member's
/// departure from it.
pub fn measure_overtaking<T: Real>(
    inst: &Instance<T>,
    out: &Outcome<T>,
    class: usize,
    node: NodeId,
) -> Result<T, LoadingError> {
    let c = &out.classes[class];
    let Some(j) = c.nodes.iter().position(|&v| v == node) else {
        return Err(LoadingError::NodeNotOnPath {
            class,
            node: inst.node_name(node).to_string(),
        });
    };
    let theta0 = c.entry.infimum();
    let departure = c.departure_at(j, T::zero());
    let label_at = |theta: T| earliest_arrival_labels(inst, out, theta).get(node);
    if label_at(theta0) >= departure {
        return Ok(T::zero());
    }
    // Labels are nondecreasing in theta: bisect the first theta whose label
    // reaches the departure time.
    let mut lo = theta0;
    let mut hi = departure.max(theta0 + T::one());
    for _ in 0..200 {
        let mid = (lo + hi) / T::real(2.0);
        if label_at(mid) < departure {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(mass_entering(out, theta0, hi))
}

/// Residuals comparing measured label/flow increments over `(theta_a,
/// theta_b]` against the thin-flow structure of a generalized subnetwork.
#[derive(Clone, Debug)]
pub struct ThinFlowResiduals<T> {
    /// max over allowed arcs of `dx_e - nu_e * dl_w` (signed).
    pub allowed_upper: T,
    /// max over forced-queue arcs of `|dx_e - nu_e * dl_w|`.
    pub forced_equality: T,
    /// max inflow mass on arcs outside the subnetwork.
    pub outside_flow: T,
    /// max node imbalance of `dx` against an s-t flow of value `u0 * dtheta`.
    pub flow_imbalance: T,
    /// `max_v |dl_v / dtheta - reference lambda_v|`.
    pub direction_gap: T,
}

impl<T: Real> ThinFlowResiduals<T> {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "allowed_upper": self.allowed_upper.to_f64_lossy(),
            "forced_equality": self.forced_equality.to_f64_lossy(),
            "outside_flow": self.outside_flow.to_f64_lossy(),
            "flow_imbalance": self.flow_imbalance.to_f64_lossy(),
            "direction_gap": self.direction_gap.to_f64_lossy(),
        })
    }
}

pub fn thin_flow_residuals<T: Real>(
    inst: &Instance<T>,
    out: &Outcome<T>,
    theta_a: T,
    theta_b: T,
    sub: &GeneralizedSubnetwork,
    reference: &ThinFlow<T>,
) -> ThinFlowResiduals<T> {
    let la = earliest_arrival_labels(inst, out, theta_a);
    let lb = earliest_arrival_labels(inst, out, theta_b);
    let dtheta = theta_b - theta_a;
    let mut dx = vec![T::zero(); inst.arc_count()];
    for a in inst.arcs() {
        let arc = inst.arc(a);
        let flow = &out.arcs[a.0];
        dx[a.0] =
            flow.cumulative_in(lb.get(arc.tail)) - flow.cumulative_in(la.get(arc.tail));
    }
    let mut res = ThinFlowResiduals {
        allowed_upper: T::neg_infinity(),
        forced_equality: T::zero(),
        outside_flow: T::zero(),
        flow_imbalance: T::zero(),
        direction_gap: T::zero(),
    };
    for a in inst.arcs() {
        let arc = inst.arc(a);
        let dl_w = lb.get(arc.head) - la.get(arc.head);
        if sub.allows(a) {
            res.allowed_upper = res.allowed_upper.max(dx[a.0] - arc.nu * dl_w);
            if sub.forces_queue(a) {
                res.forced_equality = res.forced_equality.max((dx[a.0] - arc.nu * dl_w).abs());
            }
        } else {
            res.outside_flow = res.outside_flow.max(dx[a.0]);
        }
    }
    for v in inst.nodes() {
        let mut net = T::zero();
        for &a in inst.in_arcs(v) {
            net = net + dx[a.0];
        }
        for &a in inst.out_arcs(v) {
            net = net - dx[a.0];
        }
        let expected = if v == inst.source() {
            -(inst.inflow_rate() * dtheta)
        } else if v == inst.sink() {
            inst.inflow_rate() * dtheta
        } else {
            T::zero()
        };
        res.flow_imbalance = res.flow_imbalance.max((net - expected).abs());
    }
    for v in inst.nodes() {
        let rate = (lb.get(v) - la.get(v)) / dtheta;
        res.direction_gap = res
            .direction_gap
            .max((rate - reference.lambda.get(v)).abs());
    }
    res
}

/// Outcome CSV: one row per arc breakpoint, `arc,time,F_in,F_out,z`.
pub fn outcome_to_csv<T: Real>(inst: &Instance<T>, out: &Outcome<T>) -> String {
    let mut s = String::from("arc,time,F_in,F_out,z\n");
    for a in inst.arcs() {
        let flow = &out.arcs[a.0];
        let mut times = flow.breakpoint_times();
        let shifted: Vec<T> = times.iter().map(|&t| t + flow.transit()).collect();
        times.extend(shifted);
        times.sort_by(|x, y| x.partial_cmp(y).expect("finite times"));
        times.dedup_by(|x, y| *x == *y);
        for t in times {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                inst.arc_name(a),
                t.to_f64_lossy(),
                flow.cumulative_in(t).to_f64_lossy(),
                flow.cumulative_out(t).to_f64_lossy(),
                flow.queue_at(t).to_f64_lossy(),
            ));
        }
    }
    s
}

impl<T: Real> Outcome<T> {
    pub fn inflow_rate(&self) -> T {
        self.inflow_rate
    }

    /// Latest interval-entry end; sampling labels beyond it measures an
    /// emptying network.
    pub fn coverage_end(&self) -> T {
        self.classes
            .iter()
            .map(|c| c.entry.supremum())
            .fold(T::zero(), T::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::fixtures::single_arc;

    const ETA: f64 = 1e-9;

    fn interval_class(
        inst: &Instance<f64>,
        start: f64,
        end: f64,
        rate: f64,
    ) -> StrategyClass<f64> {
        StrategyClass {
            path: vec![inst.arc_id("e").unwrap()],
            entry: EntrySpec::Interval { start, end, rate },
            waiting: vec![NodeWaiting::zero(), NodeWaiting::zero()],
        }
    }

    #[test]
    fn free_flow_rate_class() {
        let inst = single_arc(1.0, 1.0, 1.0);
        let out = load_profile(&inst, &[interval_class(&inst, 0.0, 10.0, 1.0)], ETA).unwrap();
        let flow = &out.arcs[0];
        assert!((flow.cumulative_in(5.0) - 5.0).abs() < 1e-12);
        assert!(flow.queue_at(5.0).abs() < 1e-12);
        // d_t(theta) = theta + 1.
        let class = &out.classes[0];
        assert!((class.departure_at(1, 3.0) - 4.0).abs() < 1e-12);
        assert!((measure_epsilon(&inst, &out)).abs() < 1e-9);
    }

    #[test]
    fn atom_queue_drains_at_capacity() {
        let inst = single_arc(1.0, 1.0, 1.0);
        let classes = vec![StrategyClass {
            path: vec![inst.arc_id("e").unwrap()],
            entry: EntrySpec::Atom {
                time: 0.0,
                mass: 2.0,
            },
            waiting: vec![NodeWaiting::zero(), NodeWaiting::zero()],
        }];
        let out = load_profile(&inst, &classes, ETA).unwrap();
        let flow = &out.arcs[0];
        assert!((flow.queue_at(0.0) - 2.0).abs() < 1e-12);
        assert!((flow.queue_at(1.0) - 1.0).abs() < 1e-12);
        assert!(flow.queue_at(2.0).abs() < 1e-12);
        // Outflow at the head rises over (1, 3] at rate 1.
        assert!(flow.cumulative_out(1.0).abs() < 1e-12);
        assert!((flow.cumulative_out(2.0) - 1.0).abs() < 1e-12);
        assert!((flow.cumulative_out(3.0) - 2.0).abs() < 1e-12);
        // Last agent departs the arc tail queue at 2 (arrives head at 3).
        let class = &out.classes[0];
        assert!((class.departure_at(1, 2.0) - 3.0).abs() < 1e-12);
        // Capacity identity at sampled times.
        for t in [0.0, 0.5, 1.0, 1.7, 2.0, 3.5] {
            assert!(flow.capacity_identity_residual(t) < 1e-9, "t = {t}");
        }
    }

    #[test]
    fn oversaturated_interval_builds_queue() {
        let inst = single_arc(1.0, 1.0, 2.0);
        let out = load_profile(&inst, &[interval_class(&inst, 0.0, 4.0, 2.0)], ETA).unwrap();
        let flow = &out.arcs[0];
        // Queue grows at rate 1 while inflow is 2 and capacity 1.
        assert!((flow.queue_at(2.0) - 2.0).abs() < 1e-12);
        assert!((flow.queue_at(4.0) - 4.0).abs() < 1e-12);
        // Drains at capacity afterwards.
        assert!((flow.queue_at(6.0) - 2.0).abs() < 1e-12);
        assert!(flow.queue_at(8.0).abs() < 1e-12);
        // Labels: a probe at theta = 4 waits the full queue.
        let l = earliest_arrival_labels(&inst, &out, 4.0);
        assert!((l.get(inst.sink()) - (4.0 + 1.0 + 4.0)).abs() < 1e-9);
    }

    #[test]
    fn coverage_errors() {
        let inst = single_arc(1.0, 1.0, 1.0);
        let under = vec![interval_class(&inst, 0.0, 10.0, 0.5)];
        assert!(matches!(
            load_profile(&inst, &under, ETA).unwrap_err(),
            LoadingError::Coverage { .. }
        ));
        let gap = vec![
            interval_class(&inst, 0.0, 2.0, 1.0),
            interval_class(&inst, 3.0, 5.0, 1.0),
        ];
        assert!(matches!(
            load_profile(&inst, &gap, ETA).unwrap_err(),
            LoadingError::Coverage { .. }
        ));
    }

    #[test]
    fn negative_waiting_rejected() {
        let inst = single_arc(1.0, 1.0, 1.0);
        let mut class = interval_class(&inst, 0.0, 2.0, 1.0);
        class.waiting[1] = NodeWaiting {
            offset: -0.5,
            slope: 0.0,
        };
        assert!(matches!(
            load_profile(&inst, &[class], ETA).unwrap_err(),
            LoadingError::NegativeWaiting { .. }
        ));
    }

    #[test]
    fn mass_entering_counts_atoms_and_intervals() {
        let inst = single_arc(1.0, 1.0, 1.0);
        let classes = vec![
            interval_class(&inst, 0.0, 4.0, 1.0),
            StrategyClass {
                path: vec![inst.arc_id("e").unwrap()],
                entry: EntrySpec::Atom {
                    time: 2.0,
                    mass: 0.5,
                },
                waiting: vec![NodeWaiting::zero(), NodeWaiting::zero()],
            },
        ];
        let out = load_profile(&inst, &classes, ETA).unwrap();
        assert!((mass_entering(&out, 1.0, 3.0) - 2.5).abs() < 1e-12);
        assert!((mass_entering(&out, 2.0, 3.0) - 1.0).abs() < 1e-12);
    }
}
