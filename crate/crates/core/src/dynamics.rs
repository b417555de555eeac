//! Swing-equation time-domain simulation over the Kron-reduced network.
//!
//! Fixed-step classical RK4 with an event scheduler for faults, line trips,
//! generator trips and load trips. Every network-changing event triggers a
//! rebuild of the augmented admittance matrix and a fresh reduction; relay
//! models observe the system at the monitoring cadence and may inject trip
//! events while the run is in progress.

use nalgebra::{Complex, DVector};
use thiserror::Error;

use crate::grid::{
    AdmittanceMatrix, BranchId, BranchStatus, BusId, Elimination, MachineId, NetworkCase, NodeId,
    ReducedNetwork, ReductionError,
};
use crate::powerflow::DynamicInit;
use crate::scalar::{is_finite, num, to_f64, Scalar};

/// Synchronous frequency of the modeled system.
pub const SYNC_FREQ_HZ: f64 = 60.0;

/// Synchronous angular speed, rad/s.
pub fn omega_sync<T: Scalar>() -> T {
    num(2.0 * std::f64::consts::PI * SYNC_FREQ_HZ)
}

/// Rotor state of one machine: angle (rad) and per-unit speed deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MachineState<T> {
    pub delta: T,
    pub omega: T,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind<T> {
    ApplyThreePhaseFault { branch: BranchId, position_fraction: T },
    ClearFault { branch: BranchId, open_branch: bool },
    TripBranch { branch: BranchId },
    TripMachine { machine: MachineId },
    TripLoad { bus: BusId },
}

impl<T: std::fmt::Display> std::fmt::Display for EventKind<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EventKind::ApplyThreePhaseFault { branch, position_fraction } => {
                write!(f, "fault {branch} at {position_fraction}")
            }
            EventKind::ClearFault { branch, open_branch } => {
                write!(f, "clear {branch} open={open_branch}")
            }
            EventKind::TripBranch { branch } => write!(f, "trip branch {branch}"),
            EventKind::TripMachine { machine } => write!(f, "trip machine {machine}"),
            EventKind::TripLoad { bus } => write!(f, "trip load {bus}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event<T> {
    pub time: T,
    pub kind: EventKind<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventSource {
    Schedule,
    DistanceRelay,
    OutOfStepRelay,
    Supervisor,
}

impl std::fmt::Display for EventSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            EventSource::Schedule => "schedule",
            EventSource::DistanceRelay => "distance",
            EventSource::OutOfStepRelay => "rrdot",
            EventSource::Supervisor => "supervisor",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone)]
pub struct LoggedEvent<T> {
    pub time: T,
    pub source: EventSource,
    pub kind: EventKind<T>,
}

#[derive(Debug, Clone)]
pub struct SimConfig<T> {
    /// Integration step, seconds.
    pub dt: T,
    /// End of the run, seconds.
    pub t_end: T,
    /// Steps per recorded trajectory sample.
    pub record_stride: usize,
    /// Steps per relay/monitoring tick.
    pub monitor_stride: usize,
}

impl<T: Scalar> SimConfig<T> {
    pub fn new(dt: T, t_end: T) -> Self {
        SimConfig { dt, t_end, record_stride: 10, monitor_stride: 10 }
    }
}

/// Per-machine constants of the swing equations, on the system base.
#[derive(Debug, Clone)]
pub struct SwingParams<T> {
    pub emf: Vec<T>,
    pub p_mech: Vec<T>,
    /// `2H` per machine (system base), the effective rotor inertia.
    pub inertia: Vec<T>,
    pub damping: Vec<T>,
}

impl<T: Scalar> SwingParams<T> {
    pub fn from_init(case: &NetworkCase<T>, init: &DynamicInit<T>) -> Self {
        let two = num::<T>(2.0);
        SwingParams {
            emf: init.machines.iter().map(|m| m.emf).collect(),
            p_mech: init.machines.iter().map(|m| m.p_mech).collect(),
            inertia: (0..case.machines.len()).map(|i| two * case.h_system(i)).collect(),
            damping: (0..case.machines.len()).map(|i| case.d_system(i)).collect(),
        }
    }
}

/// Classical electrical power at each retained machine:
/// `P_i = E_i^2 G_ii + sum_j E_i E_j (B_ij sin d_ij + G_ij cos d_ij)`.
///
/// `emf` and `delta` are indexed by machine position in the case; the reduced
/// network selects which machines participate.
pub fn electrical_power<T: Scalar>(red: &ReducedNetwork<T>, emf: &[T], delta: &[T]) -> Vec<T> {
    let n = red.order();
    let mut p = vec![T::zero(); n];
    for a in 0..n {
        let ga = red.machine_positions[a];
        let ea = emf[ga];
        let da = delta[ga];
        let mut acc = ea * ea * red.g(a, a);
        for b in 0..n {
            if b == a {
                continue;
            }
            let gb = red.machine_positions[b];
            let dab = da - delta[gb];
            acc += ea * emf[gb] * (red.b(a, b) * dab.sin() + red.g(a, b) * dab.cos());
        }
        p[a] = acc;
    }
    p
}

/// Time derivatives of the full state vector. Machines outside the reduced
/// network hold zero derivatives (frozen).
///
/// `d(delta)/dt = w_s * omega`, `d(omega)/dt = (Pm - Pe - D*omega) / (2H)`.
pub fn swing_derivatives<T: Scalar>(
    red: &ReducedNetwork<T>,
    params: &SwingParams<T>,
    states: &[MachineState<T>],
) -> (Vec<T>, Vec<T>) {
    let ws = omega_sync::<T>();
    let delta: Vec<T> = states.iter().map(|s| s.delta).collect();
    let pe = electrical_power(red, &params.emf, &delta);
    let mut ddelta = vec![T::zero(); states.len()];
    let mut domega = vec![T::zero(); states.len()];
    for (a, &gi) in red.machine_positions.iter().enumerate() {
        let w = states[gi].omega;
        ddelta[gi] = ws * w;
        domega[gi] = (params.p_mech[gi] - pe[a] - params.damping[gi] * w) / params.inertia[gi];
    }
    (ddelta, domega)
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("non-finite machine state produced by the integrator")]
    NonFiniteState,
    #[error("simulation diverged at t = {time} s")]
    Divergence { time: f64 },
    #[error("event references unknown branch {0}")]
    UnknownBranch(BranchId),
    #[error("event references unknown machine {0}")]
    UnknownMachine(MachineId),
    #[error("event references unknown bus {0}")]
    UnknownBus(BusId),
    #[error("event at t = {time} references out-of-service {what}")]
    OutOfService { time: f64, what: String },
    #[error("fault position must lie in [0, 1]")]
    BadFaultPosition,
    #[error("fault on off-nominal-tap branch {0} is not supported")]
    FaultOnTransformer(BranchId),
    #[error("event time must be non-negative")]
    NegativeEventTime,
    #[error("simulation config: {0} must be positive")]
    BadConfig(&'static str),
    #[error(transparent)]
    Reduction(#[from] ReductionError),
}

/// One RK4 step of the swing equations over the reduced network.
pub fn step<T: Scalar>(
    states: &[MachineState<T>],
    dt: T,
    red: &ReducedNetwork<T>,
    params: &SwingParams<T>,
) -> Result<Vec<MachineState<T>>, SimError> {
    if dt <= T::zero() {
        return Err(SimError::BadConfig("dt"));
    }
    let next = rk4(states, dt, red, params);
    for &gi in &red.machine_positions {
        if !is_finite(next[gi].delta) || !is_finite(next[gi].omega) {
            return Err(SimError::NonFiniteState);
        }
    }
    Ok(next)
}

fn rk4<T: Scalar>(
    states: &[MachineState<T>],
    dt: T,
    red: &ReducedNetwork<T>,
    params: &SwingParams<T>,
) -> Vec<MachineState<T>> {
    let half = num::<T>(0.5);
    let sixth = num::<T>(1.0 / 6.0);
    let two = num::<T>(2.0);

    let shifted = |base: &[MachineState<T>], kd: &[T], kw: &[T], h: T| -> Vec<MachineState<T>> {
        base.iter()
            .enumerate()
            .map(|(i, s)| MachineState { delta: s.delta + h * kd[i], omega: s.omega + h * kw[i] })
            .collect()
    };

    let (k1d, k1w) = swing_derivatives(red, params, states);
    let s2 = shifted(states, &k1d, &k1w, half * dt);
    let (k2d, k2w) = swing_derivatives(red, params, &s2);
    let s3 = shifted(states, &k2d, &k2w, half * dt);
    let (k3d, k3w) = swing_derivatives(red, params, &s3);
    let s4 = shifted(states, &k3d, &k3w, dt);
    let (k4d, k4w) = swing_derivatives(red, params, &s4);

    states
        .iter()
        .enumerate()
        .map(|(i, s)| MachineState {
            delta: s.delta + dt * sixth * (k1d[i] + two * k2d[i] + two * k3d[i] + k4d[i]),
            omega: s.omega + dt * sixth * (k1w[i] + two * k2w[i] + two * k3w[i] + k4w[i]),
        })
        .collect()
}

/// Mid-line three-phase fault: branch split at `position`, fault node grounded
/// through a near-zero impedance.
#[derive(Debug, Clone)]
pub struct ActiveFault<T> {
    pub branch: usize,
    pub position: T,
}

fn fault_shunt<T: Scalar>() -> Complex<T> {
    Complex::new(T::one(), T::zero()) / Complex::new(num(1e-6), num(1e-6))
}

/// Mutable switching state of a case during a run.
#[derive(Debug, Clone)]
pub struct TopologyState<T> {
    pub branch_in_service: Vec<bool>,
    pub machine_live: Vec<bool>,
    pub load_connected: Vec<bool>,
    pub bus_energized: Vec<bool>,
    pub faults: Vec<ActiveFault<T>>,
}

impl<T: Scalar> TopologyState<T> {
    pub fn base(case: &NetworkCase<T>) -> Self {
        TopologyState {
            branch_in_service: case
                .branches
                .iter()
                .map(|b| b.status == BranchStatus::InService)
                .collect(),
            machine_live: vec![true; case.machines.len()],
            load_connected: vec![true; case.buses.len()],
            bus_energized: vec![true; case.buses.len()],
            faults: Vec::new(),
        }
    }

    fn fault_on(&self, branch: usize) -> Option<usize> {
        self.faults.iter().position(|f| f.branch == branch)
    }

    /// Connected components over energized buses and in-service branches.
    /// Returns per-bus component ids (`usize::MAX` for de-energized buses).
    pub fn bus_components(&self, case: &NetworkCase<T>) -> Vec<usize> {
        let n = case.buses.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut Vec<usize>, mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        for (bi, br) in case.branches.iter().enumerate() {
            if !self.branch_in_service[bi] {
                continue;
            }
            let f = case.bus_position(br.from_bus).expect("validated");
            let t = case.bus_position(br.to_bus).expect("validated");
            if !self.bus_energized[f] || !self.bus_energized[t] {
                continue;
            }
            let (rf, rt) = (find(&mut parent, f), find(&mut parent, t));
            if rf != rt {
                parent[rf.max(rt)] = rf.min(rt);
            }
        }
        let mut label = vec![usize::MAX; n];
        let mut next = 0;
        for i in 0..n {
            if !self.bus_energized[i] {
                continue;
            }
            let root = find(&mut parent, i);
            if label[root] == usize::MAX {
                label[root] = next;
                next += 1;
            }
            label[i] = label[root];
        }
        label
    }
}

/// Reduced network plus the backsolve data for one topology epoch.
pub struct Assembled<T> {
    pub reduced: ReducedNetwork<T>,
    pub elimination: Elimination<T>,
    eliminated_index: std::collections::HashMap<NodeId, usize>,
}

impl<T: Scalar> Assembled<T> {
    /// Bus voltages recovered from machine internal voltages; `None` for
    /// de-energized buses.
    pub fn bus_voltages(
        &self,
        case: &NetworkCase<T>,
        emf_phasors: &DVector<Complex<T>>,
    ) -> Vec<Option<Complex<T>>> {
        let ve = self.elimination.eliminated_voltages(emf_phasors);
        case.buses
            .iter()
            .map(|b| self.eliminated_index.get(&NodeId::Bus(b.id)).map(|&i| ve[i]))
            .collect()
    }

    pub fn fault_voltage(&self, fault_ordinal: usize, ve: &DVector<Complex<T>>) -> Option<Complex<T>> {
        self.eliminated_index.get(&NodeId::Fault(fault_ordinal)).map(|&i| ve[i])
    }

    pub fn eliminated_voltages(&self, emf_phasors: &DVector<Complex<T>>) -> DVector<Complex<T>> {
        self.elimination.eliminated_voltages(emf_phasors)
    }
}

/// Assembles the augmented admittance matrix for the given topology (load
/// shunts frozen from the base power flow, machine internal branches, active
/// faults) and reduces it to the live machine internal nodes.
pub fn assemble_reduced<T: Scalar>(
    case: &NetworkCase<T>,
    load_shunts: &[Complex<T>],
    topo: &TopologyState<T>,
) -> Result<Assembled<T>, ReductionError> {
    let mut nodes: Vec<NodeId> = Vec::new();
    for (i, b) in case.buses.iter().enumerate() {
        if topo.bus_energized[i] {
            nodes.push(NodeId::Bus(b.id));
        }
    }
    for (fi, _) in topo.faults.iter().enumerate() {
        nodes.push(NodeId::Fault(fi));
    }
    let mut retained = Vec::new();
    for (mi, m) in case.machines.iter().enumerate() {
        let bp = case.bus_position(m.bus).expect("validated");
        if topo.machine_live[mi] && topo.bus_energized[bp] {
            nodes.push(NodeId::Machine(mi));
            retained.push(NodeId::Machine(mi));
        }
    }

    let mut y = AdmittanceMatrix::zeros(nodes);
    for (bi, br) in case.branches.iter().enumerate() {
        if !topo.branch_in_service[bi] {
            continue;
        }
        let fp = case.bus_position(br.from_bus).expect("validated");
        let tp = case.bus_position(br.to_bus).expect("validated");
        if !topo.bus_energized[fp] || !topo.bus_energized[tp] {
            continue;
        }
        let f = y.position(NodeId::Bus(br.from_bus)).expect("energized");
        let t = y.position(NodeId::Bus(br.to_bus)).expect("energized");
        match topo.fault_on(bi) {
            None => y.stamp_branch(f, t, br.r, br.x, br.b_charging, br.tap),
            Some(fi) => {
                let p = topo.faults[fi].position;
                let q = T::one() - p;
                let fnode = y.position(NodeId::Fault(fi)).expect("fault node");
                if p > T::zero() {
                    y.stamp_branch(f, fnode, br.r * p, br.x * p, br.b_charging * p, T::one());
                } else {
                    // Fault at the terminal itself: ground the from bus.
                }
                if q > T::zero() {
                    y.stamp_branch(fnode, t, br.r * q, br.x * q, br.b_charging * q, T::one());
                }
                let node = if p > T::zero() { fnode } else { f };
                y.stamp_shunt(node, fault_shunt::<T>());
            }
        }
    }
    for (i, b) in case.buses.iter().enumerate() {
        if !topo.bus_energized[i] {
            continue;
        }
        let n = y.position(NodeId::Bus(b.id)).expect("energized");
        y.stamp_shunt(n, Complex::new(b.shunt_g, b.shunt_b));
        if topo.load_connected[i] {
            y.stamp_shunt(n, load_shunts[i]);
        }
    }
    for (mi, m) in case.machines.iter().enumerate() {
        let Some(internal) = y.position(NodeId::Machine(mi)) else { continue };
        let terminal = y.position(NodeId::Bus(m.bus)).expect("energized");
        y.stamp_branch(terminal, internal, T::zero(), m.xdp, T::zero(), T::one());
    }

    let (red_matrix, elimination) = crate::grid::kron_reduce(&y, &retained)?;
    let machine_positions: Vec<usize> = retained
        .iter()
        .map(|n| match n {
            NodeId::Machine(mi) => *mi,
            _ => unreachable!(),
        })
        .collect();
    let machine_ids = machine_positions
        .iter()
        .map(|&mi| case.machines[mi].id.clone())
        .collect();
    let eliminated_index = elimination
        .eliminated_nodes
        .iter()
        .enumerate()
        .map(|(i, &n)| (n, i))
        .collect();
    Ok(Assembled {
        reduced: ReducedNetwork { machine_positions, machine_ids, y: red_matrix.y },
        elimination,
        eliminated_index,
    })
}

/// Per-branch terminal quantities at a monitoring tick.
#[derive(Debug, Clone)]
pub struct BranchTick<T> {
    /// Branch position in the case.
    pub branch: usize,
    pub in_service: bool,
    pub energized: bool,
    pub faulted: bool,
    pub v_from: Complex<T>,
    pub i_from: Complex<T>,
    pub v_to: Complex<T>,
    pub i_to: Complex<T>,
}

/// Snapshot handed to relay observers at each monitoring tick.
pub struct TickView<'a, T> {
    pub time: T,
    pub reduced: &'a ReducedNetwork<T>,
    pub machine_live: &'a [bool],
    pub states: &'a [MachineState<T>],
    pub emf: &'a [T],
    /// Per bus position; `None` when the bus is de-energized.
    pub bus_voltages: &'a [Option<Complex<T>>],
    pub branches: &'a [BranchTick<T>],
}

/// Trip requests emitted by a relay observer.
#[derive(Debug, Clone)]
pub struct RelayAction<T> {
    pub source: EventSource,
    pub kind: EventKind<T>,
}

pub trait TickObserver<T: Scalar> {
    fn on_tick(&mut self, view: &TickView<'_, T>) -> Vec<RelayAction<T>>;
}

/// One topology epoch of a finished run.
#[derive(Debug, Clone)]
pub struct EpochRecord<T> {
    pub t_start: T,
    pub reduced: ReducedNetwork<T>,
    /// Machine positions grouped by energized component.
    pub machine_components: Vec<Vec<usize>>,
    /// Bus positions grouped by energized component (same component order).
    pub bus_components: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct DeEnergized<T> {
    pub time: T,
    pub buses: Vec<usize>,
}

/// Recorded run: sampled machine states, applied events, topology epochs.
#[derive(Debug, Clone)]
pub struct SystemTrajectory<T> {
    pub machine_ids: Vec<MachineId>,
    /// `2H` per machine on the system base (for inertia-weighted means).
    pub machine_inertia: Vec<T>,
    pub times: Vec<T>,
    pub states: Vec<Vec<MachineState<T>>>,
    pub live: Vec<Vec<bool>>,
    pub event_log: Vec<LoggedEvent<T>>,
    pub epochs: Vec<EpochRecord<T>>,
    pub de_energized: Vec<DeEnergized<T>>,
    /// Machines quarantined after producing non-finite states.
    pub diverged: Vec<(T, Vec<usize>)>,
}

impl<T: Scalar> SystemTrajectory<T> {
    pub fn final_states(&self) -> &[MachineState<T>] {
        self.states.last().expect("at least the initial sample")
    }
}

struct EventQueue<T> {
    events: Vec<Event<T>>,
    next: usize,
}

impl<T: Scalar> EventQueue<T> {
    fn new(mut events: Vec<Event<T>>) -> Self {
        events.sort_by(|a, b| a.time.partial_cmp(&b.time).expect("finite event times"));
        EventQueue { events, next: 0 }
    }

    fn due(&mut self, t: T, slack: T) -> Vec<Event<T>> {
        let mut out = Vec::new();
        while self.next < self.events.len() && self.events[self.next].time <= t + slack {
            out.push(self.events[self.next].clone());
            self.next += 1;
        }
        out
    }
}

/// Integrates the swing equations from the initialized equilibrium, applying
/// scheduled events and relay-injected trips. Deterministic: identical inputs
/// produce bit-identical trajectories.
pub fn simulate<T: Scalar>(
    case: &NetworkCase<T>,
    init: &DynamicInit<T>,
    events: &[Event<T>],
    cfg: &SimConfig<T>,
    hooks: &mut [&mut dyn TickObserver<T>],
) -> Result<SystemTrajectory<T>, SimError> {
    if cfg.dt <= T::zero() {
        return Err(SimError::BadConfig("dt"));
    }
    if cfg.t_end <= T::zero() {
        return Err(SimError::BadConfig("t_end"));
    }
    validate_events(case, events)?;

    let params = SwingParams::from_init(case, init);
    let mut topo = TopologyState::base(case);
    let mut states: Vec<MachineState<T>> = init
        .machines
        .iter()
        .map(|m| MachineState { delta: m.delta0, omega: T::zero() })
        .collect();

    let mut traj = SystemTrajectory {
        machine_ids: case.machines.iter().map(|m| m.id.clone()).collect(),
        machine_inertia: params.inertia.clone(),
        times: Vec::new(),
        states: Vec::new(),
        live: Vec::new(),
        event_log: Vec::new(),
        epochs: Vec::new(),
        de_energized: Vec::new(),
        diverged: Vec::new(),
    };

    let mut queue = EventQueue::new(events.to_vec());
    let mut assembled = rebuild(case, init, &mut topo, T::zero(), &mut traj)?;

    let steps = to_f64(cfg.t_end / cfg.dt).round() as usize;
    let slack = cfg.dt * num::<T>(1e-9);

    for k in 0..=steps {
        let t = cfg.dt * num::<T>(k as f64);

        let due = queue.due(t, slack);
        let mut changed = false;
        for ev in due {
            changed |= apply_event(case, &mut topo, &ev.kind, t, EventSource::Schedule, &mut traj)?;
        }
        if changed {
            assembled = rebuild(case, init, &mut topo, t, &mut traj)?;
        }

        if k % cfg.monitor_stride == 0 && !hooks.is_empty() {
            let actions = run_hooks(case, &assembled, &params, &topo, &states, t, hooks);
            let mut changed = false;
            for a in actions {
                changed |= apply_event(case, &mut topo, &a.kind, t, a.source, &mut traj)?;
            }
            if changed {
                assembled = rebuild(case, init, &mut topo, t, &mut traj)?;
            }
        }

        if k % cfg.record_stride == 0 || k == steps {
            traj.times.push(t);
            traj.states.push(states.clone());
            traj.live.push(topo.machine_live.clone());
        }

        if k == steps {
            break;
        }

        let next = rk4(&states, cfg.dt, &assembled.reduced, &params);
        let bad: Vec<usize> = assembled
            .reduced
            .machine_positions
            .iter()
            .copied()
            .filter(|&gi| !is_finite(next[gi].delta) || !is_finite(next[gi].omega))
            .collect();
        if bad.is_empty() {
            states = next;
        } else {
            // Quarantine every island touched by a non-finite state: trip its
            // machines, de-energize its buses, keep integrating the rest.
            let t_div = t + cfg.dt;
            let live_before: usize = topo.machine_live.iter().filter(|&&l| l).count();
            let comps = topo.bus_components(case);
            let mut bad_comps: Vec<usize> = bad
                .iter()
                .map(|&mi| comps[case.bus_position(case.machines[mi].bus).expect("validated")])
                .collect();
            bad_comps.sort_unstable();
            bad_comps.dedup();
            let mut quarantined = Vec::new();
            for (mi, m) in case.machines.iter().enumerate() {
                if !topo.machine_live[mi] {
                    continue;
                }
                let c = comps[case.bus_position(m.bus).expect("validated")];
                if bad_comps.contains(&c) {
                    topo.machine_live[mi] = false;
                    quarantined.push(mi);
                }
            }
            if quarantined.len() == live_before {
                return Err(SimError::Divergence { time: to_f64(t_div) });
            }
            for (bi, &c) in comps.iter().enumerate() {
                if c != usize::MAX && bad_comps.contains(&c) {
                    topo.bus_energized[bi] = false;
                }
            }
            traj.diverged.push((t_div, quarantined.clone()));
            for mi in quarantined {
                traj.event_log.push(LoggedEvent {
                    time: t_div,
                    source: EventSource::Supervisor,
                    kind: EventKind::TripMachine { machine: case.machines[mi].id.clone() },
                });
            }
            assembled = rebuild(case, init, &mut topo, t_div, &mut traj)?;
        }
    }

    Ok(traj)
}

fn validate_events<T: Scalar>(case: &NetworkCase<T>, events: &[Event<T>]) -> Result<(), SimError> {
    for ev in events {
        if ev.time < T::zero() {
            return Err(SimError::NegativeEventTime);
        }
        match &ev.kind {
            EventKind::ApplyThreePhaseFault { branch, position_fraction } => {
                let bi = case
                    .branch_position(branch)
                    .ok_or_else(|| SimError::UnknownBranch(branch.clone()))?;
                if *position_fraction < T::zero() || *position_fraction > T::one() {
                    return Err(SimError::BadFaultPosition);
                }
                if case.branches[bi].status == BranchStatus::Out {
                    return Err(SimError::OutOfService {
                        time: to_f64(ev.time),
                        what: format!("branch {branch}"),
                    });
                }
                if case.branches[bi].tap != T::one() {
                    return Err(SimError::FaultOnTransformer(branch.clone()));
                }
            }
            EventKind::ClearFault { branch, .. } | EventKind::TripBranch { branch } => {
                let bi = case
                    .branch_position(branch)
                    .ok_or_else(|| SimError::UnknownBranch(branch.clone()))?;
                if case.branches[bi].status == BranchStatus::Out {
                    return Err(SimError::OutOfService {
                        time: to_f64(ev.time),
                        what: format!("branch {branch}"),
                    });
                }
            }
            EventKind::TripMachine { machine } => {
                case.machine_position(machine)
                    .ok_or_else(|| SimError::UnknownMachine(machine.clone()))?;
            }
            EventKind::TripLoad { bus } => {
                case.bus_position(*bus).ok_or(SimError::UnknownBus(*bus))?;
            }
        }
    }
    Ok(())
}

/// Applies one event to the topology. Returns whether the network changed;
/// redundant events (already-out equipment) are no-ops.
fn apply_event<T: Scalar>(
    case: &NetworkCase<T>,
    topo: &mut TopologyState<T>,
    kind: &EventKind<T>,
    t: T,
    source: EventSource,
    traj: &mut SystemTrajectory<T>,
) -> Result<bool, SimError> {
    let changed = match kind {
        EventKind::ApplyThreePhaseFault { branch, position_fraction } => {
            let bi = case.branch_position(branch).expect("validated");
            if !topo.branch_in_service[bi] || topo.fault_on(bi).is_some() {
                false
            } else {
                topo.faults.push(ActiveFault { branch: bi, position: *position_fraction });
                true
            }
        }
        EventKind::ClearFault { branch, open_branch } => {
            let bi = case.branch_position(branch).expect("validated");
            match topo.fault_on(bi) {
                None => false,
                Some(fi) => {
                    topo.faults.remove(fi);
                    if *open_branch {
                        topo.branch_in_service[bi] = false;
                    }
                    true
                }
            }
        }
        EventKind::TripBranch { branch } => {
            let bi = case.branch_position(branch).expect("validated");
            if !topo.branch_in_service[bi] {
                false
            } else {
                // Opening a faulted branch clears its fault with it.
                if let Some(fi) = topo.fault_on(bi) {
                    topo.faults.remove(fi);
                }
                topo.branch_in_service[bi] = false;
                true
            }
        }
        EventKind::TripMachine { machine } => {
            let mi = case.machine_position(machine).expect("validated");
            if !topo.machine_live[mi] {
                false
            } else {
                topo.machine_live[mi] = false;
                true
            }
        }
        EventKind::TripLoad { bus } => {
            let bp = case.bus_position(*bus).expect("validated");
            if !topo.load_connected[bp] {
                false
            } else {
                topo.load_connected[bp] = false;
                true
            }
        }
    };
    if changed {
        traj.event_log.push(LoggedEvent { time: t, source, kind: kind.clone() });
    }
    Ok(changed)
}

/// De-energizes machine-less components, reassembles and reduces, and records
/// the new topology epoch.
fn rebuild<T: Scalar>(
    case: &NetworkCase<T>,
    init: &DynamicInit<T>,
    topo: &mut TopologyState<T>,
    t: T,
    traj: &mut SystemTrajectory<T>,
) -> Result<Assembled<T>, SimError> {
    // Components without a live machine black out.
    let comps = topo.bus_components(case);
    let ncomp = comps.iter().filter(|&&c| c != usize::MAX).max().map_or(0, |&c| c + 1);
    let mut has_machine = vec![false; ncomp];
    for (mi, m) in case.machines.iter().enumerate() {
        if topo.machine_live[mi] {
            let c = comps[case.bus_position(m.bus).expect("validated")];
            if c != usize::MAX {
                has_machine[c] = true;
            }
        }
    }
    let mut dropped = Vec::new();
    for (bi, &c) in comps.iter().enumerate() {
        if c != usize::MAX && !has_machine[c] {
            topo.bus_energized[bi] = false;
            dropped.push(bi);
        }
    }
    if !dropped.is_empty() {
        traj.de_energized.push(DeEnergized { time: t, buses: dropped });
    }

    let assembled = assemble_reduced(case, &init.load_shunts, topo)?;

    let comps = topo.bus_components(case);
    let ncomp = comps.iter().filter(|&&c| c != usize::MAX).max().map_or(0, |&c| c + 1);
    let mut bus_components = vec![Vec::new(); ncomp];
    for (bi, &c) in comps.iter().enumerate() {
        if c != usize::MAX {
            bus_components[c].push(bi);
        }
    }
    let mut machine_components = vec![Vec::new(); ncomp];
    for (mi, m) in case.machines.iter().enumerate() {
        if topo.machine_live[mi] {
            let c = comps[case.bus_position(m.bus).expect("validated")];
            if c != usize::MAX {
                machine_components[c].push(mi);
            }
        }
    }
    traj.epochs.push(EpochRecord {
        t_start: t,
        reduced: assembled.reduced.clone(),
        machine_components,
        bus_components,
    });
    Ok(assembled)
}

fn run_hooks<T: Scalar>(
    case: &NetworkCase<T>,
    assembled: &Assembled<T>,
    params: &SwingParams<T>,
    topo: &TopologyState<T>,
    states: &[MachineState<T>],
    t: T,
    hooks: &mut [&mut dyn TickObserver<T>],
) -> Vec<RelayAction<T>> {
    let nred = assembled.reduced.order();
    let emf_phasors = DVector::from_iterator(
        nred,
        assembled.reduced.machine_positions.iter().map(|&gi| {
            let (e, d) = (params.emf[gi], states[gi].delta);
            Complex::new(e * d.cos(), e * d.sin())
        }),
    );
    let bus_voltages = assembled.bus_voltages(case, &emf_phasors);
    let branches = branch_ticks(case, topo, &bus_voltages, assembled, &emf_phasors);

    let view = TickView {
        time: t,
        reduced: &assembled.reduced,
        machine_live: &topo.machine_live,
        states,
        emf: &params.emf,
        bus_voltages: &bus_voltages,
        branches: &branches,
    };
    let mut actions = Vec::new();
    for hook in hooks.iter_mut() {
        actions.extend(hook.on_tick(&view));
    }
    actions
}

fn branch_ticks<T: Scalar>(
    case: &NetworkCase<T>,
    topo: &TopologyState<T>,
    bus_voltages: &[Option<Complex<T>>],
    assembled: &Assembled<T>,
    emf_phasors: &DVector<Complex<T>>,
) -> Vec<BranchTick<T>> {
    let zero = Complex::new(T::zero(), T::zero());
    let ve = assembled.eliminated_voltages(emf_phasors);
    case.branches
        .iter()
        .enumerate()
        .map(|(bi, br)| {
            let fp = case.bus_position(br.from_bus).expect("validated");
            let tp = case.bus_position(br.to_bus).expect("validated");
            let in_service = topo.branch_in_service[bi];
            let (vf, vt) = (bus_voltages[fp], bus_voltages[tp]);
            let energized = in_service && vf.is_some() && vt.is_some();
            if !energized {
                return BranchTick {
                    branch: bi,
                    in_service,
                    energized: false,
                    faulted: topo.fault_on(bi).is_some(),
                    v_from: zero,
                    i_from: zero,
                    v_to: zero,
                    i_to: zero,
                };
            }
            let (vf, vt) = (vf.unwrap(), vt.unwrap());
            let (i_from, i_to, faulted) = match topo.fault_on(bi) {
                None => {
                    let z = Complex::new(br.r, br.x);
                    let ys = Complex::new(T::one(), T::zero()) / z;
                    let hb = Complex::new(T::zero(), br.b_charging / num::<T>(2.0));
                    let tap = Complex::new(br.tap, T::zero());
                    let i_f = (vf * (ys + hb) / tap - vt * ys) / tap;
                    let i_t = vt * (ys + hb) - vf * ys / tap;
                    (i_f, i_t, false)
                }
                Some(fi) => {
                    let p = topo.faults[fi].position;
                    let q = T::one() - p;
                    let vx = assembled
                        .fault_voltage(fi, &ve)
                        .unwrap_or(zero);
                    let i_f = if p > T::zero() {
                        let ys = Complex::new(T::one(), T::zero())
                            / Complex::new(br.r * p, br.x * p);
                        let hb = Complex::new(T::zero(), br.b_charging * p / num::<T>(2.0));
                        vf * (ys + hb) - vx * ys
                    } else {
                        zero
                    };
                    let i_t = if q > T::zero() {
                        let ys = Complex::new(T::one(), T::zero())
                            / Complex::new(br.r * q, br.x * q);
                        let hb = Complex::new(T::zero(), br.b_charging * q / num::<T>(2.0));
                        vt * (ys + hb) - vx * ys
                    } else {
                        zero
                    };
                    (i_f, i_t, true)
                }
            };
            BranchTick {
                branch: bi,
                in_service,
                energized: true,
                faulted,
                v_from: vf,
                i_from,
                v_to: vt,
                i_to,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::load_case;
    use crate::powerflow::{init_classical, solve_power_flow};
    use rand::{Rng, SeedableRng};

    fn synthetic_reduced(y: Vec<Vec<(f64, f64)>>) -> ReducedNetwork<f64> {
        let n = y.len();
        let m = nalgebra::DMatrix::from_fn(n, n, |i, j| Complex::new(y[i][j].0, y[i][j].1));
        ReducedNetwork {
            machine_positions: (0..n).collect(),
            machine_ids: (0..n).map(|i| format!("G{}", i + 1)).collect(),
            y: m,
        }
    }

    #[test]
    fn lossless_two_machine_power() {
        // G = 0, B12 = 5, E = 1, d12 = 30 deg.
        let red = synthetic_reduced(vec![
            vec![(0.0, -5.0), (0.0, 5.0)],
            vec![(0.0, 5.0), (0.0, -5.0)],
        ]);
        let emf = vec![1.0, 1.0];
        let delta = vec![30f64.to_radians(), 0.0];
        let p = electrical_power(&red, &emf, &delta);
        assert!((p[0] - 2.5).abs() < 1e-12);
        assert!((p[1] + 2.5).abs() < 1e-12);

        let delta = vec![0.4, 0.4];
        let p = electrical_power(&red, &emf, &delta);
        assert!(p[0].abs() < 1e-12 && p[1].abs() < 1e-12);
    }

    #[test]
    fn electrical_power_matches_naive_double_loop() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let n = 10;
            let mut y = vec![vec![(0.0, 0.0); n]; n];
            for i in 0..n {
                for j in (i + 1)..n {
                    let g = rng.gen_range(-0.5..0.5);
                    let b = rng.gen_range(-3.0..3.0);
                    y[i][j] = (g, b);
                    y[j][i] = (g, b);
                }
                y[i][i] = (rng.gen_range(0.0..2.0), rng.gen_range(-20.0..-1.0));
            }
            let red = synthetic_reduced(y.clone());
            let emf: Vec<f64> = (0..n).map(|_| rng.gen_range(0.9..1.1)).collect();
            let delta: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let p = electrical_power(&red, &emf, &delta);

            for i in 0..n {
                let mut expect = emf[i] * emf[i] * y[i][i].0;
                for j in 0..n {
                    if j != i {
                        let dij = delta[i] - delta[j];
                        expect += emf[i] * emf[j] * (y[i][j].1 * dij.sin() + y[i][j].0 * dij.cos());
                    }
                }
                assert!((p[i] - expect).abs() < 1e-12);
            }
        }
    }

    fn smib(h: f64, b12: f64, delta0: f64) -> (ReducedNetwork<f64>, SwingParams<f64>, Vec<MachineState<f64>>) {
        let red = synthetic_reduced(vec![
            vec![(0.0, -b12), (0.0, b12)],
            vec![(0.0, b12), (0.0, -b12)],
        ]);
        let emf = vec![1.0, 1.0];
        let pe = electrical_power(&red, &emf, &[delta0, 0.0]);
        let params = SwingParams {
            emf,
            p_mech: pe.clone(),
            inertia: vec![2.0 * h, 2.0 * 1e9],
            damping: vec![0.0, 0.0],
        };
        let states = vec![
            MachineState { delta: delta0, omega: 0.0 },
            MachineState { delta: 0.0, omega: 0.0 },
        ];
        (red, params, states)
    }

    #[test]
    fn equilibrium_step_is_stationary() {
        let (red, params, states) = smib(3.0, 2.0, 0.3);
        let next = step(&states, 1e-3, &red, &params).unwrap();
        for (a, b) in states.iter().zip(&next) {
            assert!((a.delta - b.delta).abs() < 1e-14);
            assert!((a.omega - b.omega).abs() < 1e-14);
        }
    }

    #[test]
    fn smib_small_signal_frequency_matches_linearization() {
        let h = 3.0;
        let b12 = 2.0;
        let delta0 = 0.3;
        let (red, params, mut states) = smib(h, b12, delta0);
        states[0].delta += 0.02;

        let dt = 1e-3;
        let mut crossings = Vec::new();
        let mut prev = states[0].delta - delta0;
        for k in 1..5000 {
            states = step(&states, dt, &red, &params).unwrap();
            let x = states[0].delta - delta0;
            if prev < 0.0 && x >= 0.0 {
                crossings.push(k as f64 * dt);
            }
            prev = x;
        }
        assert!(crossings.len() >= 3);
        let period = (crossings[crossings.len() - 1] - crossings[0]) / (crossings.len() - 1) as f64;
        let f_measured = 1.0 / period;

        let ks = b12 * delta0.cos();
        let ws = omega_sync::<f64>();
        let f_expected = (ks * ws / (2.0 * h)).sqrt() / (2.0 * std::f64::consts::PI);
        assert!(
            (f_measured - f_expected).abs() / f_expected < 0.02,
            "measured {f_measured}, expected {f_expected}"
        );
    }

    #[test]
    fn rk4_order_check_on_smib() {
        // Nonlinear swing from a large perturbation; global error vs a dt/8
        // reference should shrink ~16x when dt halves.
        let (red, params, mut base) = smib(3.0, 2.0, 0.3);
        base[0].delta += 0.8;

        let run = |dt: f64, t_end: f64, mut s: Vec<MachineState<f64>>| {
            let steps = (t_end / dt).round() as usize;
            for _ in 0..steps {
                s = step(&s, dt, &red, &params).unwrap();
            }
            s[0].delta
        };
        let t_end = 1.0;
        let fine = run(1e-3 / 8.0, t_end, base.clone());
        let e1 = (run(1e-3, t_end, base.clone()) - fine).abs();
        let e2 = (run(5e-4, t_end, base.clone()) - fine).abs();
        let ratio = e1 / e2;
        assert!((8.0..=32.0).contains(&ratio), "error ratio {ratio}");
    }

    #[test]
    fn lossless_energy_drift_is_small() {
        // Three machines, G = 0, no damping: the energy function
        // ws*sum(H w^2) - sum(Pm d) - sum_{i<j} E E B cos(dij) is conserved.
        let red = synthetic_reduced(vec![
            vec![(0.0, -3.5), (0.0, 2.0), (0.0, 1.5)],
            vec![(0.0, 2.0), (0.0, -3.0), (0.0, 1.0)],
            vec![(0.0, 1.5), (0.0, 1.0), (0.0, -2.5)],
        ]);
        let emf = vec![1.0, 1.0, 1.0];
        let dstar = vec![0.4, 0.1, -0.2];
        let pm = electrical_power(&red, &emf, &dstar);
        let params = SwingParams {
            emf: emf.clone(),
            p_mech: pm.clone(),
            inertia: vec![6.0, 8.0, 10.0],
            damping: vec![0.0; 3],
        };
        let mut states: Vec<MachineState<f64>> = dstar
            .iter()
            .map(|&d| MachineState { delta: d, omega: 0.0 })
            .collect();
        states[0].delta += 0.5;
        states[1].omega -= 0.002;

        let ws = omega_sync::<f64>();
        let energy = |s: &[MachineState<f64>]| {
            let mut e = 0.0;
            for (i, st) in s.iter().enumerate() {
                e += ws * (params.inertia[i] / 2.0) * st.omega * st.omega;
                e -= pm[i] * st.delta;
            }
            for i in 0..3 {
                for j in (i + 1)..3 {
                    e -= emf[i] * emf[j] * red.b(i, j) * (s[i].delta - s[j].delta).cos();
                }
            }
            e
        };

        let e0 = energy(&states);
        let dt = 1e-3;
        let mut worst = 0.0f64;
        for _ in 0..10_000 {
            states = step(&states, dt, &red, &params).unwrap();
            worst = worst.max((energy(&states) - e0).abs());
        }
        assert!(worst / e0.abs() < 1e-3, "drift {} of {}", worst, e0);
    }

    #[test]
    fn accelerating_power_sums_consistently() {
        let (red, params, mut states) = smib(3.0, 2.0, 0.3);
        states[0].delta += 0.4;
        states[0].omega = 0.01;
        let (_, domega) = swing_derivatives(&red, &params, &states);
        let lhs: f64 = (0..2).map(|i| params.inertia[i] * domega[i]).sum();
        let delta: Vec<f64> = states.iter().map(|s| s.delta).collect();
        let pe = electrical_power(&red, &params.emf, &delta);
        let rhs: f64 = (0..2)
            .map(|i| params.p_mech[i] - pe[i] - params.damping[i] * states[i].omega)
            .sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn divergent_step_is_reported() {
        let (red, mut params, mut states) = smib(1e-6, 50.0, 0.3);
        // Negative damping with tiny inertia: exponential speed growth that
        // overflows to infinity within a few steps.
        params.damping[0] = -1.0;
        states[0].omega = 1.0;
        let mut s = states;
        let mut saw_error = false;
        for _ in 0..500 {
            match step(&s, 5.0, &red, &params) {
                Ok(next) => s = next,
                Err(SimError::NonFiniteState) => {
                    saw_error = true;
                    break;
                }
                Err(e) => panic!("unexpected {e}"),
            }
        }
        assert!(saw_error);
    }

    #[test]
    fn zero_event_39_bus_run_holds_equilibrium() {
        let case: NetworkCase<f64> =
            load_case(include_str!("../../../data/cases/ieee39.toml")).unwrap();
        let pf = solve_power_flow(&case, 1e-10, 20).unwrap();
        let init = init_classical(&case, &pf).unwrap();
        let cfg = SimConfig::new(1e-3, 5.0);
        let traj = simulate(&case, &init, &[], &cfg, &mut []).unwrap();

        let d0: Vec<f64> = init.machines.iter().map(|m| m.delta0).collect();
        for sample in &traj.states {
            for (s, &d) in sample.iter().zip(&d0) {
                assert!((s.delta - d).abs() < 1e-6);
            }
        }
        assert_eq!(traj.epochs.len(), 1);
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let case: NetworkCase<f64> =
            load_case(include_str!("../../../data/cases/ieee39.toml")).unwrap();
        let pf = solve_power_flow(&case, 1e-10, 20).unwrap();
        let init = init_classical(&case, &pf).unwrap();
        let events = vec![
            Event {
                time: 1.0,
                kind: EventKind::ApplyThreePhaseFault {
                    branch: "16-17".into(),
                    position_fraction: 0.5,
                },
            },
            Event { time: 1.1, kind: EventKind::ClearFault { branch: "16-17".into(), open_branch: true } },
        ];
        let cfg = SimConfig::new(1e-3, 2.0);
        let a = simulate(&case, &init, &events, &cfg, &mut []).unwrap();
        let b = simulate(&case, &init, &events, &cfg, &mut []).unwrap();
        assert_eq!(a.times, b.times);
        for (sa, sb) in a.states.iter().zip(&b.states) {
            for (x, y) in sa.iter().zip(sb) {
                assert!(x.delta == y.delta && x.omega == y.omega);
            }
        }
    }

    #[test]
    fn fault_events_create_topology_epochs() {
        let case: NetworkCase<f64> =
            load_case(include_str!("../../../data/cases/ieee39.toml")).unwrap();
        let pf = solve_power_flow(&case, 1e-10, 20).unwrap();
        let init = init_classical(&case, &pf).unwrap();
        let events = vec![
            Event {
                time: 0.5,
                kind: EventKind::ApplyThreePhaseFault {
                    branch: "3-4".into(),
                    position_fraction: 0.5,
                },
            },
            Event { time: 0.6, kind: EventKind::ClearFault { branch: "3-4".into(), open_branch: true } },
        ];
        let cfg = SimConfig::new(1e-3, 1.0);
        let traj = simulate(&case, &init, &events, &cfg, &mut []).unwrap();
        assert_eq!(traj.epochs.len(), 3);
        assert_eq!(traj.event_log.len(), 2);
        // The fault must actually disturb the machines.
        let d0 = init.machines[3].delta0;
        let moved = traj
            .states
            .iter()
            .any(|s| (s[3].delta - d0).abs() > 1e-3);
        assert!(moved);
    }

    #[test]
    fn event_on_out_of_service_branch_is_rejected() {
        let mut src = include_str!("../../../data/cases/ieee39.toml").to_string();
        src = src.replace(
            "id = \"3-4\"\nfrom_bus = 3\nto_bus = 4\nr = 0.0013\nx = 0.0213\nb_charging = 0.2214",
            "id = \"3-4\"\nfrom_bus = 3\nto_bus = 4\nr = 0.0013\nx = 0.0213\nb_charging = 0.2214\nstatus = \"out\"",
        );
        let case: NetworkCase<f64> = load_case(&src).unwrap();
        let pf = solve_power_flow(&case, 1e-8, 25).unwrap();
        let init = init_classical(&case, &pf).unwrap();
        let events = vec![Event { time: 0.5, kind: EventKind::TripBranch { branch: "3-4".into() } }];
        let cfg = SimConfig::new(1e-3, 1.0);
        match simulate(&case, &init, &events, &cfg, &mut []) {
            Err(SimError::OutOfService { .. }) => {}
            other => panic!("expected out-of-service error, got {other:?}"),
        }
    }

    #[test]
    fn smib_critical_clearing_time_brackets_equal_area() {
        // Machine behind a single line to a near-infinite bus; fault at the
        // machine end of the line suppresses transfer, clearing restores it.
        let src = r#"
base_mva = 100.0
[[buses]]
id = 1
kind = "PV"
voltage_setpoint = 1.0
[[buses]]
id = 2
kind = "slack"
voltage_setpoint = 1.0
[[branches]]
id = "1-2"
from_bus = 1
to_bus = 2
x = 0.4
[[machines]]
id = "G1"
bus = 1
h = 3.0
d = 0.0
xdp = 0.05
p_gen = 0.9
[[machines]]
id = "INF"
bus = 2
h = 1.0e9
d = 0.0
xdp = 0.001
p_gen = 0.0
"#;
        let case: NetworkCase<f64> = load_case(src).unwrap();
        let pf = solve_power_flow(&case, 1e-12, 40).unwrap();
        let init = init_classical(&case, &pf).unwrap();

        // Equal-area oracle on the reduced two-machine equivalent.
        let red = &init.reduced;
        let e1 = init.machines[0].emf;
        let e2 = init.machines[1].emf;
        let pmax = e1 * e2 * red.b(0, 1);
        let pm = init.machines[0].p_mech;
        let d2 = init.machines[1].delta0;
        let d0 = init.machines[0].delta0 - d2; // angle over the transfer path
        let dmax = std::f64::consts::PI - d0;
        // Accelerating area Pm (dc - d0) = decelerating area
        // integral_{dc}^{dmax} (Pmax sin d - Pm) dd, solved by bisection.
        let area = |dc: f64| {
            pm * (dc - d0) - (pmax * (dc.cos() - dmax.cos()) - pm * (dmax - dc))
        };
        let (mut lo, mut hi) = (d0, dmax);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if area(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let dc = 0.5 * (lo + hi);
        let h = 3.0;
        let ws = omega_sync::<f64>();
        let t_ea = (4.0 * h * (dc - d0) / (ws * pm)).sqrt();

        // Bisection on the simulated clearing time at dt resolution.
        let dt = 1e-3;
        let stable_with = |t_clear: f64| {
            let events = vec![
                Event {
                    time: 0.1,
                    kind: EventKind::ApplyThreePhaseFault {
                        branch: "1-2".into(),
                        position_fraction: 0.0,
                    },
                },
                Event {
                    time: 0.1 + t_clear,
                    kind: EventKind::ClearFault { branch: "1-2".into(), open_branch: false },
                },
            ];
            let cfg = SimConfig::new(dt, 3.0);
            let traj = simulate(&case, &init, &events, &cfg, &mut []).unwrap();
            traj.states
                .iter()
                .all(|s| (s[0].delta - s[1].delta) - d0 < std::f64::consts::PI)
        };

        let mut lo = 0.05f64;
        let mut hi = 0.60f64;
        assert!(stable_with(lo), "lower bracket must be stable");
        assert!(!stable_with(hi), "upper bracket must be unstable");
        while hi - lo > dt {
            let mid = 0.5 * (lo + hi);
            if stable_with(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!(
            t_ea >= lo - dt && t_ea <= hi + dt,
            "equal-area {t_ea} outside simulated bracket [{lo}, {hi}]"
        );
    }
}
