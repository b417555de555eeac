//! Static network model: case ingestion, admittance-matrix assembly and
//! Kron reduction to generator internal nodes.

use std::collections::{BTreeMap, HashMap, HashSet};

use nalgebra::{Complex, ComplexField, DMatrix};
use serde::Deserialize;
use thiserror::Error;

use crate::scalar::{num, Scalar};

/// Bus identifier as it appears in the case file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BusId(pub u32);

impl std::fmt::Display for BusId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Branch identifier (free-form string, e.g. `"1-39"`).
pub type BranchId = String;

/// Machine identifier (free-form string, e.g. `"G1"`).
pub type MachineId = String;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BusKind {
    Slack,
    Pv,
    Pq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchStatus {
    InService,
    Out,
}

#[derive(Debug, Clone)]
pub struct BusRecord<T> {
    pub id: BusId,
    pub kind: BusKind,
    pub voltage_setpoint: T,
    pub base_kv: T,
    pub load_p: T,
    pub load_q: T,
    pub shunt_g: T,
    pub shunt_b: T,
}

#[derive(Debug, Clone)]
pub struct BranchRecord<T> {
    pub id: BranchId,
    pub from_bus: BusId,
    pub to_bus: BusId,
    pub r: T,
    pub x: T,
    pub b_charging: T,
    pub tap: T,
    pub status: BranchStatus,
}

#[derive(Debug, Clone)]
pub struct MachineRecord<T> {
    pub id: MachineId,
    pub bus: BusId,
    /// Inertia constant, seconds on the machine base.
    pub h: T,
    /// Damping, per-unit torque per per-unit speed, machine base.
    pub d: T,
    /// Transient reactance, per-unit on the system base.
    pub xdp: T,
    pub mva_base: T,
    /// Dispatch, per-unit on the system base.
    pub p_gen: T,
    pub q_gen: T,
}

/// Validated static grid description.
#[derive(Debug, Clone)]
pub struct NetworkCase<T> {
    pub base_mva: T,
    pub buses: Vec<BusRecord<T>>,
    pub branches: Vec<BranchRecord<T>>,
    pub machines: Vec<MachineRecord<T>>,
    bus_index: HashMap<BusId, usize>,
    branch_index: HashMap<BranchId, usize>,
    machine_index: HashMap<MachineId, usize>,
}

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("case file does not parse: {0}")]
    Parse(String),
    #[error("duplicate bus id {0}")]
    DuplicateBus(BusId),
    #[error("duplicate branch id {0}")]
    DuplicateBranch(BranchId),
    #[error("duplicate machine id {0}")]
    DuplicateMachine(MachineId),
    #[error("unknown bus kind {0:?} (expected slack, PV or PQ)")]
    UnknownBusKind(String),
    #[error("unknown branch status {0:?} (expected in-service or out)")]
    UnknownBranchStatus(String),
    #[error("case has no slack bus")]
    NoSlack,
    #[error("case has more than one slack bus ({0} and {1})")]
    MultipleSlack(BusId, BusId),
    #[error("{element} references missing bus {bus}")]
    MissingBus { element: String, bus: BusId },
    #[error("branch {0} has zero reactance")]
    ZeroReactance(BranchId),
    #[error("branch {0} connects a bus to itself")]
    SelfLoop(BranchId),
    #[error("{element}: {field} must be positive")]
    NonPositive { element: String, field: &'static str },
    #[error("in-service network is disconnected (bus {0} unreachable from the slack)")]
    Disconnected(BusId),
}

#[derive(Debug, Deserialize)]
struct RawCase {
    base_mva: f64,
    buses: Vec<RawBus>,
    branches: Vec<RawBranch>,
    #[serde(default)]
    machines: Vec<RawMachine>,
}

#[derive(Debug, Deserialize)]
struct RawBus {
    id: u32,
    kind: String,
    #[serde(default = "default_one")]
    voltage_setpoint: f64,
    #[serde(default = "default_base_kv")]
    base_kv: f64,
    #[serde(default)]
    load_p: f64,
    #[serde(default)]
    load_q: f64,
    #[serde(default)]
    shunt_g: f64,
    #[serde(default)]
    shunt_b: f64,
}

#[derive(Debug, Deserialize)]
struct RawBranch {
    id: String,
    from_bus: u32,
    to_bus: u32,
    #[serde(default)]
    r: f64,
    x: f64,
    #[serde(default)]
    b_charging: f64,
    #[serde(default = "default_one")]
    tap: f64,
    #[serde(default = "default_status")]
    status: String,
}

#[derive(Debug, Deserialize)]
struct RawMachine {
    id: String,
    bus: u32,
    h: f64,
    #[serde(default)]
    d: f64,
    xdp: f64,
    #[serde(default = "default_mva")]
    mva_base: f64,
    #[serde(default)]
    p_gen: f64,
    #[serde(default)]
    q_gen: f64,
}

fn default_one() -> f64 {
    1.0
}
fn default_base_kv() -> f64 {
    345.0
}
fn default_mva() -> f64 {
    100.0
}
fn default_status() -> String {
    "in-service".to_string()
}

/// Parses and validates a structured-text case file.
pub fn load_case<T: Scalar>(source: &str) -> Result<NetworkCase<T>, CaseError> {
    let raw: RawCase = toml::from_str(source).map_err(|e| CaseError::Parse(e.to_string()))?;

    let buses = raw
        .buses
        .iter()
        .map(|b| {
            let kind = match b.kind.as_str() {
                "slack" => BusKind::Slack,
                "PV" => BusKind::Pv,
                "PQ" => BusKind::Pq,
                other => return Err(CaseError::UnknownBusKind(other.to_string())),
            };
            Ok(BusRecord {
                id: BusId(b.id),
                kind,
                voltage_setpoint: num(b.voltage_setpoint),
                base_kv: num(b.base_kv),
                load_p: num(b.load_p),
                load_q: num(b.load_q),
                shunt_g: num(b.shunt_g),
                shunt_b: num(b.shunt_b),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let branches = raw
        .branches
        .iter()
        .map(|b| {
            let status = match b.status.as_str() {
                "in-service" => BranchStatus::InService,
                "out" => BranchStatus::Out,
                other => return Err(CaseError::UnknownBranchStatus(other.to_string())),
            };
            Ok(BranchRecord {
                id: b.id.clone(),
                from_bus: BusId(b.from_bus),
                to_bus: BusId(b.to_bus),
                r: num(b.r),
                x: num(b.x),
                b_charging: num(b.b_charging),
                tap: num(b.tap),
                status,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let machines = raw
        .machines
        .iter()
        .map(|m| MachineRecord {
            id: m.id.clone(),
            bus: BusId(m.bus),
            h: num(m.h),
            d: num(m.d),
            xdp: num(m.xdp),
            mva_base: num(m.mva_base),
            p_gen: num(m.p_gen),
            q_gen: num(m.q_gen),
        })
        .collect();

    NetworkCase::new(num(raw.base_mva), buses, branches, machines)
}

impl<T: Scalar> NetworkCase<T> {
    pub fn new(
        base_mva: T,
        buses: Vec<BusRecord<T>>,
        branches: Vec<BranchRecord<T>>,
        machines: Vec<MachineRecord<T>>,
    ) -> Result<Self, CaseError> {
        let mut bus_index = HashMap::new();
        let mut slack: Option<BusId> = None;
        for (i, b) in buses.iter().enumerate() {
            if bus_index.insert(b.id, i).is_some() {
                return Err(CaseError::DuplicateBus(b.id));
            }
            if b.kind == BusKind::Slack {
                match slack {
                    None => slack = Some(b.id),
                    Some(first) => return Err(CaseError::MultipleSlack(first, b.id)),
                }
            }
            if matches!(b.kind, BusKind::Slack | BusKind::Pv) && b.voltage_setpoint <= T::zero() {
                return Err(CaseError::NonPositive {
                    element: format!("bus {}", b.id),
                    field: "voltage_setpoint",
                });
            }
        }
        if slack.is_none() {
            return Err(CaseError::NoSlack);
        }

        let mut branch_index = HashMap::new();
        for (i, br) in branches.iter().enumerate() {
            if branch_index.insert(br.id.clone(), i).is_some() {
                return Err(CaseError::DuplicateBranch(br.id.clone()));
            }
            if br.x == T::zero() {
                return Err(CaseError::ZeroReactance(br.id.clone()));
            }
            if br.from_bus == br.to_bus {
                return Err(CaseError::SelfLoop(br.id.clone()));
            }
            for bus in [br.from_bus, br.to_bus] {
                if !bus_index.contains_key(&bus) {
                    return Err(CaseError::MissingBus {
                        element: format!("branch {}", br.id),
                        bus,
                    });
                }
            }
            if br.tap <= T::zero() {
                return Err(CaseError::NonPositive {
                    element: format!("branch {}", br.id),
                    field: "tap",
                });
            }
        }

        let mut machine_index = HashMap::new();
        for (i, m) in machines.iter().enumerate() {
            if machine_index.insert(m.id.clone(), i).is_some() {
                return Err(CaseError::DuplicateMachine(m.id.clone()));
            }
            if !bus_index.contains_key(&m.bus) {
                return Err(CaseError::MissingBus {
                    element: format!("machine {}", m.id),
                    bus: m.bus,
                });
            }
            if m.h <= T::zero() {
                return Err(CaseError::NonPositive {
                    element: format!("machine {}", m.id),
                    field: "h",
                });
            }
            if m.xdp <= T::zero() {
                return Err(CaseError::NonPositive {
                    element: format!("machine {}", m.id),
                    field: "xdp",
                });
            }
            if m.mva_base <= T::zero() {
                return Err(CaseError::NonPositive {
                    element: format!("machine {}", m.id),
                    field: "mva_base",
                });
            }
        }

        let case = NetworkCase {
            base_mva,
            buses,
            branches,
            machines,
            bus_index,
            branch_index,
            machine_index,
        };

        // Connectivity over in-service branches.
        let n = case.buses.len();
        if n > 0 {
            let mut adjacency = vec![Vec::new(); n];
            for br in &case.branches {
                if br.status == BranchStatus::InService {
                    let f = case.bus_index[&br.from_bus];
                    let t = case.bus_index[&br.to_bus];
                    adjacency[f].push(t);
                    adjacency[t].push(f);
                }
            }
            let mut seen = vec![false; n];
            let mut stack = vec![0usize];
            seen[0] = true;
            while let Some(i) = stack.pop() {
                for &j in &adjacency[i] {
                    if !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
            if let Some(i) = seen.iter().position(|s| !s) {
                return Err(CaseError::Disconnected(case.buses[i].id));
            }
        }

        Ok(case)
    }

    pub fn bus_position(&self, id: BusId) -> Option<usize> {
        self.bus_index.get(&id).copied()
    }

    pub fn branch_position(&self, id: &str) -> Option<usize> {
        self.branch_index.get(id).copied()
    }

    pub fn machine_position(&self, id: &str) -> Option<usize> {
        self.machine_index.get(id).copied()
    }

    pub fn slack_position(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.kind == BusKind::Slack)
            .expect("validated case has a slack bus")
    }

    /// Inertia constant of machine `i` converted to the system base.
    pub fn h_system(&self, i: usize) -> T {
        let m = &self.machines[i];
        m.h * m.mva_base / self.base_mva
    }

    /// Damping of machine `i` converted to the system base.
    pub fn d_system(&self, i: usize) -> T {
        let m = &self.machines[i];
        m.d * m.mva_base / self.base_mva
    }

    /// Deterministic digest of the case identity (ids and base), used to
    /// refuse comparisons across different cases.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        };
        eat(format!("{}", self.base_mva).as_bytes());
        for b in &self.buses {
            eat(&b.id.0.to_le_bytes());
        }
        for br in &self.branches {
            eat(br.id.as_bytes());
        }
        for m in &self.machines {
            eat(m.id.as_bytes());
        }
        h
    }
}

/// Node of an (augmented) admittance matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeId {
    Bus(BusId),
    /// Machine internal node, by machine position in the case.
    Machine(usize),
    /// Mid-line fault node, by active-fault ordinal.
    Fault(usize),
}

/// Dense complex nodal admittance matrix plus its node labels.
#[derive(Debug, Clone)]
pub struct AdmittanceMatrix<T> {
    pub nodes: Vec<NodeId>,
    pub y: DMatrix<Complex<T>>,
    index: HashMap<NodeId, usize>,
}

impl<T: Scalar> AdmittanceMatrix<T> {
    pub fn zeros(nodes: Vec<NodeId>) -> Self {
        let n = nodes.len();
        let index = nodes.iter().enumerate().map(|(i, &n)| (n, i)).collect();
        AdmittanceMatrix {
            nodes,
            y: DMatrix::from_element(n, n, Complex::new(T::zero(), T::zero())),
            index,
        }
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    pub fn position(&self, node: NodeId) -> Option<usize> {
        self.index.get(&node).copied()
    }

    /// Stamps a branch with the standard tap-on-from-side pi model.
    pub fn stamp_branch(&mut self, from: usize, to: usize, r: T, x: T, b_charging: T, tap: T) {
        let z = Complex::new(r, x);
        let y_series = Complex::new(T::one(), T::zero()) / z;
        let half_b = Complex::new(T::zero(), b_charging / num::<T>(2.0));
        let t = Complex::new(tap, T::zero());
        let t2 = Complex::new(tap * tap, T::zero());

        self.y[(from, from)] += (y_series + half_b) / t2;
        self.y[(to, to)] += y_series + half_b;
        self.y[(from, to)] -= y_series / t;
        self.y[(to, from)] -= y_series / t;
    }

    /// Stamps a shunt admittance to ground.
    pub fn stamp_shunt(&mut self, node: usize, y: Complex<T>) {
        self.y[(node, node)] += y;
    }

    /// Maximum absolute asymmetry, `max |Y_ij - Y_ji|`.
    pub fn max_asymmetry(&self) -> T {
        let n = self.order();
        let mut worst = T::zero();
        for i in 0..n {
            for j in (i + 1)..n {
                let d = (self.y[(i, j)] - self.y[(j, i)]).modulus();
                if d > worst {
                    worst = d;
                }
            }
        }
        worst
    }
}

#[derive(Debug, Error)]
pub enum ReductionError {
    #[error("retained node set contains a node absent from the matrix")]
    UnknownRetainedNode,
    #[error("eliminated block is singular: an eliminated island has no path to retained nodes")]
    SingularEliminatedBlock,
}

/// Builds the bus admittance matrix over in-service branches and bus shunts.
///
/// Loads are not included; they enter either as power injections (power flow)
/// or as constant shunts computed from a solved voltage profile (dynamics).
pub fn build_ybus<T: Scalar>(case: &NetworkCase<T>) -> AdmittanceMatrix<T> {
    let nodes = case.buses.iter().map(|b| NodeId::Bus(b.id)).collect();
    let mut m = AdmittanceMatrix::zeros(nodes);
    for br in &case.branches {
        if br.status != BranchStatus::InService {
            continue;
        }
        let f = case.bus_position(br.from_bus).expect("validated");
        let t = case.bus_position(br.to_bus).expect("validated");
        m.stamp_branch(f, t, br.r, br.x, br.b_charging, br.tap);
    }
    for (i, b) in case.buses.iter().enumerate() {
        m.stamp_shunt(i, Complex::new(b.shunt_g, b.shunt_b));
    }
    m
}

/// Schur-complement elimination of all nodes not in `retained`:
/// `Y_red = Y_rr - Y_re * Y_ee^-1 * Y_er`.
///
/// Returns the reduced matrix over `retained` (in the given order) together
/// with the elimination backsolve data needed to recover eliminated-node
/// voltages from retained-node voltages.
pub fn kron_reduce<T: Scalar>(
    y_aug: &AdmittanceMatrix<T>,
    retained: &[NodeId],
) -> Result<(AdmittanceMatrix<T>, Elimination<T>), ReductionError> {
    let retained_set: HashSet<NodeId> = retained.iter().copied().collect();
    let mut keep = Vec::with_capacity(retained.len());
    for node in retained {
        keep.push(
            y_aug
                .position(*node)
                .ok_or(ReductionError::UnknownRetainedNode)?,
        );
    }
    let eliminated: Vec<usize> = (0..y_aug.order())
        .filter(|&i| !retained_set.contains(&y_aug.nodes[i]))
        .collect();

    let nr = keep.len();
    let ne = eliminated.len();
    let zero = Complex::new(T::zero(), T::zero());

    let y_rr = DMatrix::from_fn(nr, nr, |i, j| y_aug.y[(keep[i], keep[j])]);
    if ne == 0 {
        let reduced = AdmittanceMatrix {
            nodes: retained.to_vec(),
            y: y_rr,
            index: retained.iter().enumerate().map(|(i, &n)| (n, i)).collect(),
        };
        return Ok((
            reduced,
            Elimination {
                eliminated_nodes: Vec::new(),
                solve_er: DMatrix::from_element(0, nr, zero),
            },
        ));
    }

    let y_re = DMatrix::from_fn(nr, ne, |i, j| y_aug.y[(keep[i], eliminated[j])]);
    let y_er = DMatrix::from_fn(ne, nr, |i, j| y_aug.y[(eliminated[i], keep[j])]);
    let y_ee = DMatrix::from_fn(ne, ne, |i, j| y_aug.y[(eliminated[i], eliminated[j])]);

    let ee_norm = y_ee.iter().map(|c| c.modulus()).fold(T::zero(), |a, b| if b > a { b } else { a });
    let lu = y_ee.clone().lu();
    let solve_er = lu
        .solve(&y_er)
        .ok_or(ReductionError::SingularEliminatedBlock)?;
    // Partial-pivot LU only rejects exact zero pivots; verify the solve.
    let residual = (&y_ee * &solve_er - &y_er)
        .iter()
        .map(|c| c.modulus())
        .fold(T::zero(), |a, b| if b > a { b } else { a });
    let tol = T::default_epsilon().sqrt() * (ee_norm + T::one());
    if residual > tol {
        return Err(ReductionError::SingularEliminatedBlock);
    }

    let y_red = &y_rr - &y_re * &solve_er;
    let reduced = AdmittanceMatrix {
        nodes: retained.to_vec(),
        y: y_red,
        index: retained.iter().enumerate().map(|(i, &n)| (n, i)).collect(),
    };
    Ok((
        reduced,
        Elimination {
            eliminated_nodes: eliminated.iter().map(|&i| y_aug.nodes[i]).collect(),
            solve_er,
        },
    ))
}

/// Backsolve data from a Kron reduction: recovers eliminated-node voltages
/// as `V_e = -(Y_ee^-1 Y_er) V_r` (eliminated nodes carry no injection).
#[derive(Debug, Clone)]
pub struct Elimination<T> {
    pub eliminated_nodes: Vec<NodeId>,
    solve_er: DMatrix<Complex<T>>,
}

impl<T: Scalar> Elimination<T> {
    pub fn eliminated_voltages(
        &self,
        retained_voltages: &nalgebra::DVector<Complex<T>>,
    ) -> nalgebra::DVector<Complex<T>> {
        -(&self.solve_er * retained_voltages)
    }
}

/// Complex admittance matrix over retained machine internal nodes.
#[derive(Debug, Clone)]
pub struct ReducedNetwork<T> {
    /// Machines retained in the reduction, by position in the case.
    pub machine_positions: Vec<usize>,
    pub machine_ids: Vec<MachineId>,
    pub y: DMatrix<Complex<T>>,
}

impl<T: Scalar> ReducedNetwork<T> {
    pub fn order(&self) -> usize {
        self.machine_positions.len()
    }

    pub fn g(&self, i: usize, j: usize) -> T {
        self.y[(i, j)].re
    }

    pub fn b(&self, i: usize, j: usize) -> T {
        self.y[(i, j)].im
    }
}

/// Constant-impedance load shunts from a solved voltage profile:
/// `y = conj(S) / |V|^2` per bus.
pub fn load_shunts<T: Scalar>(
    case: &NetworkCase<T>,
    voltages: &[Complex<T>],
) -> Vec<Complex<T>> {
    case.buses
        .iter()
        .zip(voltages)
        .map(|(bus, v)| {
            let s = Complex::new(bus.load_p, bus.load_q);
            let v2 = v.modulus_squared();
            if v2 == T::zero() {
                Complex::new(T::zero(), T::zero())
            } else {
                s.conj() / Complex::new(v2, T::zero())
            }
        })
        .collect()
}

/// Sorted map from bus id to bus position, for deterministic iteration.
pub fn bus_order<T: Scalar>(case: &NetworkCase<T>) -> BTreeMap<BusId, usize> {
    case.buses.iter().enumerate().map(|(i, b)| (b.id, i)).collect()
}
