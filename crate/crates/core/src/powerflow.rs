//! AC power flow (full Newton-Raphson, polar form) and classical-model
//! dynamic initialization: internal EMFs, initial rotor angles and mechanical
//! powers on the Kron-reduced network.

use nalgebra::{Complex, ComplexField, DMatrix, DVector};
use thiserror::Error;

use crate::dynamics::{self, TopologyState};
use crate::grid::{load_shunts, BusId, BusKind, NetworkCase, ReducedNetwork};
use crate::scalar::{num, Scalar};

#[derive(Debug, Clone)]
pub struct PowerFlowSolution<T> {
    /// Complex bus voltages, per bus position in the case.
    pub voltages: Vec<Complex<T>>,
    /// Recomputed mismatch infinity norm at the returned voltages, per-unit.
    pub mismatch_inf_norm: T,
    /// Newton corrections applied.
    pub iterations: usize,
}

#[derive(Debug, Error)]
pub enum PowerFlowError {
    #[error("power flow did not converge in {iterations} iterations (mismatch {mismatch})")]
    NonConvergence { iterations: usize, mismatch: String },
    #[error("singular Jacobian at iteration {0}")]
    SingularJacobian(usize),
    #[error("machine at bus {0} sits at zero voltage")]
    ZeroVoltageBus(BusId),
    #[error(transparent)]
    Reduction(#[from] crate::grid::ReductionError),
}

/// Scheduled net injections per bus: machine dispatch minus load.
fn scheduled<T: Scalar>(case: &NetworkCase<T>) -> (Vec<T>, Vec<T>) {
    let mut p = vec![T::zero(); case.buses.len()];
    let mut q = vec![T::zero(); case.buses.len()];
    for (i, b) in case.buses.iter().enumerate() {
        p[i] -= b.load_p;
        q[i] -= b.load_q;
    }
    for m in &case.machines {
        let i = case.bus_position(m.bus).expect("validated");
        p[i] += m.p_gen;
        q[i] += m.q_gen;
    }
    (p, q)
}

/// Complex nodal injections at the given voltages: `S_i = V_i conj((Y V)_i)`.
fn injections<T: Scalar>(
    y: &DMatrix<Complex<T>>,
    v: &DVector<Complex<T>>,
) -> DVector<Complex<T>> {
    let i = y * v;
    DVector::from_iterator(v.len(), v.iter().zip(i.iter()).map(|(v, i)| v * i.conj()))
}

/// Full Newton-Raphson power flow in polar form from a flat start.
pub fn solve_power_flow<T: Scalar>(
    case: &NetworkCase<T>,
    tol: T,
    max_iter: usize,
) -> Result<PowerFlowSolution<T>, PowerFlowError> {
    let n = case.buses.len();
    let ybus = crate::grid::build_ybus(case);
    let (p_sched, q_sched) = scheduled(case);

    let mut theta = vec![T::zero(); n];
    let mut vmag: Vec<T> = case
        .buses
        .iter()
        .map(|b| match b.kind {
            BusKind::Slack | BusKind::Pv => b.voltage_setpoint,
            BusKind::Pq => T::one(),
        })
        .collect();

    let angle_rows: Vec<usize> = (0..n)
        .filter(|&i| case.buses[i].kind != BusKind::Slack)
        .collect();
    let vmag_rows: Vec<usize> = (0..n)
        .filter(|&i| case.buses[i].kind == BusKind::Pq)
        .collect();
    let na = angle_rows.len();
    let nv = vmag_rows.len();

    let voltage_vec = |theta: &[T], vmag: &[T]| {
        DVector::from_iterator(
            n,
            theta
                .iter()
                .zip(vmag)
                .map(|(&t, &v)| Complex::new(v * t.cos(), v * t.sin())),
        )
    };

    let mismatch = |s: &DVector<Complex<T>>| {
        let mut m = DVector::from_element(na + nv, T::zero());
        for (r, &i) in angle_rows.iter().enumerate() {
            m[r] = p_sched[i] - s[i].re;
        }
        for (r, &i) in vmag_rows.iter().enumerate() {
            m[na + r] = q_sched[i] - s[i].im;
        }
        m
    };

    let mut iterations = 0;
    loop {
        let v = voltage_vec(&theta, &vmag);
        let s = injections(&ybus.y, &v);
        let m = mismatch(&s);
        let inf = m
            .iter()
            .fold(T::zero(), |a, &x| if x.abs() > a { x.abs() } else { a });
        if inf <= tol {
            return Ok(PowerFlowSolution {
                voltages: v.iter().copied().collect(),
                mismatch_inf_norm: inf,
                iterations,
            });
        }
        if iterations >= max_iter {
            return Err(PowerFlowError::NonConvergence {
                iterations,
                mismatch: format!("{inf}"),
            });
        }

        // Polar Jacobian, plain dV formulation.
        let mut jac = DMatrix::from_element(na + nv, na + nv, T::zero());
        for (r, &i) in angle_rows.iter().enumerate() {
            let (pi, qi) = (s[i].re, s[i].im);
            for (c, &k) in angle_rows.iter().enumerate() {
                let g = ybus.y[(i, k)].re;
                let b = ybus.y[(i, k)].im;
                jac[(r, c)] = if i == k {
                    -qi - b * vmag[i] * vmag[i]
                } else {
                    let t = theta[i] - theta[k];
                    vmag[i] * vmag[k] * (g * t.sin() - b * t.cos())
                };
            }
            for (c, &k) in vmag_rows.iter().enumerate() {
                let g = ybus.y[(i, k)].re;
                let b = ybus.y[(i, k)].im;
                jac[(r, na + c)] = if i == k {
                    pi / vmag[i] + g * vmag[i]
                } else {
                    let t = theta[i] - theta[k];
                    vmag[i] * (g * t.cos() + b * t.sin())
                };
            }
        }
        for (r, &i) in vmag_rows.iter().enumerate() {
            let (pi, qi) = (s[i].re, s[i].im);
            for (c, &k) in angle_rows.iter().enumerate() {
                let g = ybus.y[(i, k)].re;
                let b = ybus.y[(i, k)].im;
                jac[(na + r, c)] = if i == k {
                    pi - g * vmag[i] * vmag[i]
                } else {
                    let t = theta[i] - theta[k];
                    -vmag[i] * vmag[k] * (g * t.cos() + b * t.sin())
                };
            }
            for (c, &k) in vmag_rows.iter().enumerate() {
                let g = ybus.y[(i, k)].re;
                let b = ybus.y[(i, k)].im;
                jac[(na + r, na + c)] = if i == k {
                    qi / vmag[i] - b * vmag[i]
                } else {
                    let t = theta[i] - theta[k];
                    vmag[i] * (g * t.sin() - b * t.cos())
                };
            }
        }

        let delta = jac
            .lu()
            .solve(&m)
            .ok_or(PowerFlowError::SingularJacobian(iterations))?;
        for (r, &i) in angle_rows.iter().enumerate() {
            theta[i] += delta[r];
        }
        for (r, &i) in vmag_rows.iter().enumerate() {
            vmag[i] += delta[na + r];
        }
        iterations += 1;
    }
}

/// Per-machine classical-model initialization.
#[derive(Debug, Clone)]
pub struct MachineInit<T> {
    /// Internal EMF magnitude, per-unit.
    pub emf: T,
    /// Initial rotor angle, radians.
    pub delta0: T,
    /// Mechanical power, per-unit on the system base.
    pub p_mech: T,
}

/// Dynamic initialization: EMFs, initial angles, mechanical powers, plus the
/// base-topology reduced network and the frozen constant-impedance loads.
#[derive(Debug, Clone)]
pub struct DynamicInit<T> {
    pub machines: Vec<MachineInit<T>>,
    pub reduced: ReducedNetwork<T>,
    pub load_shunts: Vec<Complex<T>>,
    pub pf_voltages: Vec<Complex<T>>,
}

/// Initializes the classical model from a converged power flow:
/// `E∠δ0 = V_t + jX'd·I_t`, mechanical power set to the initial electrical
/// power on the reduced network so the system starts at equilibrium.
pub fn init_classical<T: Scalar>(
    case: &NetworkCase<T>,
    pf: &PowerFlowSolution<T>,
) -> Result<DynamicInit<T>, PowerFlowError> {
    let ybus = crate::grid::build_ybus(case);
    let v = DVector::from_iterator(pf.voltages.len(), pf.voltages.iter().copied());
    let s_inj = injections(&ybus.y, &v);

    // Generator terminal power = injection plus the local load.
    let mut s_gen_bus = vec![Complex::new(T::zero(), T::zero()); case.buses.len()];
    for (i, b) in case.buses.iter().enumerate() {
        s_gen_bus[i] = s_inj[i] + Complex::new(b.load_p, b.load_q);
    }

    // Share a bus's generation across its machines: P by dispatch, Q by size.
    let mut machines = Vec::with_capacity(case.machines.len());
    for m in &case.machines {
        let b = case.bus_position(m.bus).expect("validated");
        let vt = pf.voltages[b];
        if vt.modulus() <= num(1e-9) {
            return Err(PowerFlowError::ZeroVoltageBus(m.bus));
        }
        let peers: Vec<&crate::grid::MachineRecord<T>> =
            case.machines.iter().filter(|x| x.bus == m.bus).collect();
        let (p_share, q_share) = if peers.len() == 1 {
            (T::one(), T::one())
        } else {
            let p_total: T = peers
                .iter()
                .map(|x| x.p_gen.abs())
                .fold(T::zero(), |a, b| a + b);
            let base_total: T = peers
                .iter()
                .map(|x| x.mva_base)
                .fold(T::zero(), |a, b| a + b);
            let p_share = if p_total > T::zero() {
                m.p_gen.abs() / p_total
            } else {
                m.mva_base / base_total
            };
            (p_share, m.mva_base / base_total)
        };
        let s_m = Complex::new(s_gen_bus[b].re * p_share, s_gen_bus[b].im * q_share);
        let i_t = (s_m / vt).conj();
        let e = vt + Complex::new(T::zero(), m.xdp) * i_t;
        machines.push(MachineInit {
            emf: e.modulus(),
            delta0: e.argument(),
            p_mech: T::zero(), // set below from the reduced network
        });
    }

    let shunts = load_shunts(case, &pf.voltages);
    let topology = TopologyState::base(case);
    let assembled = dynamics::assemble_reduced(case, &shunts, &topology)?;

    let emf: Vec<T> = machines.iter().map(|m| m.emf).collect();
    let delta: Vec<T> = machines.iter().map(|m| m.delta0).collect();
    let pe = dynamics::electrical_power(&assembled.reduced, &emf, &delta);
    for (m, p) in machines.iter_mut().zip(pe) {
        m.p_mech = p;
    }

    Ok(DynamicInit {
        machines,
        reduced: assembled.reduced,
        load_shunts: shunts,
        pf_voltages: pf.voltages.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::load_case;

    #[test]
    fn zero_injection_case_needs_no_correction() {
        let src = r#"
base_mva = 100.0
[[buses]]
id = 1
kind = "slack"
[[buses]]
id = 2
kind = "PQ"
[[branches]]
id = "1-2"
from_bus = 1
to_bus = 2
x = 0.1
"#;
        let case: NetworkCase<f64> = load_case(src).unwrap();
        let pf = solve_power_flow(&case, 1e-8, 20).unwrap();
        assert_eq!(pf.iterations, 0);
        assert_eq!(pf.mismatch_inf_norm, 0.0);
        for v in &pf.voltages {
            assert!((v - Complex::new(1.0, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn two_bus_lossless_matches_closed_form() {
        let src = r#"
base_mva = 100.0
[[buses]]
id = 1
kind = "slack"
voltage_setpoint = 1.0
[[buses]]
id = 2
kind = "PQ"
load_p = 0.5
load_q = 0.0
[[branches]]
id = "1-2"
from_bus = 1
to_bus = 2
x = 0.1
"#;
        let case: NetworkCase<f64> = load_case(src).unwrap();
        let pf = solve_power_flow(&case, 1e-12, 30).unwrap();

        // Closed form: S2 = [b + j(a^2 + b^2 - a)]/x with V2 = a + jb.
        let x = 0.1;
        let b = -0.5 * x;
        let a = (1.0 + (1.0 - 4.0 * b * b).sqrt()) / 2.0;
        let v2 = Complex::new(a, b);
        assert!((pf.voltages[1] - v2).norm() < 1e-10);
        assert!((pf.voltages[1].norm() - v2.norm()).abs() < 1e-10);
        assert!((pf.voltages[1].arg() - v2.arg()).abs() < 1e-10);
        assert_eq!(pf.voltages[0].arg(), 0.0);
    }

    #[test]
    fn residual_recomputation_matches_reported_norm() {
        let case: NetworkCase<f64> =
            load_case(include_str!("../../../data/cases/ieee39.toml")).unwrap();
        let pf = solve_power_flow(&case, 1e-8, 20).unwrap();

        let ybus = crate::grid::build_ybus(&case);
        let v = DVector::from_iterator(39, pf.voltages.iter().copied());
        let s = injections(&ybus.y, &v);
        let (p_sched, q_sched) = scheduled(&case);
        let mut inf: f64 = 0.0;
        for (i, bus) in case.buses.iter().enumerate() {
            if bus.kind != BusKind::Slack {
                inf = inf.max((p_sched[i] - s[i].re).abs());
            }
            if bus.kind == BusKind::Pq {
                inf = inf.max((q_sched[i] - s[i].im).abs());
            }
        }
        assert_eq!(inf, pf.mismatch_inf_norm);
    }

    #[test]
    fn complex_power_balance_holds() {
        let case: NetworkCase<f64> =
            load_case(include_str!("../../../data/cases/ieee39.toml")).unwrap();
        let pf = solve_power_flow(&case, 1e-10, 20).unwrap();
        assert!(pf.iterations <= 10);

        // Total injection equals network absorption: branch losses plus shunt
        // and charging consumption, computed branch by branch.
        let v = &pf.voltages;
        let idx = |id: BusId| case.bus_position(id).unwrap();
        let mut absorbed = Complex::new(0.0, 0.0);
        for br in &case.branches {
            let f = idx(br.from_bus);
            let t = idx(br.to_bus);
            let z = Complex::new(br.r, br.x);
            let ys = Complex::new(1.0, 0.0) / z;
            let hb = Complex::new(0.0, br.b_charging / 2.0);
            let tap = Complex::new(br.tap, 0.0);
            let i_f = (v[f] / tap - v[t]) * ys / tap + v[f] * hb / (tap * tap);
            let i_t = (v[t] - v[f] / tap) * ys + v[t] * hb; // mirrors stamp_branch
            absorbed += v[f] * i_f.conj() + v[t] * i_t.conj();
        }
        for (i, b) in case.buses.iter().enumerate() {
            let y = Complex::new(b.shunt_g, b.shunt_b);
            absorbed += v[i] * (y * v[i]).conj();
        }

        let ybus = crate::grid::build_ybus(&case);
        let vv = DVector::from_iterator(39, v.iter().copied());
        let total_inj: Complex<f64> = injections(&ybus.y, &vv).iter().sum();
        assert!((total_inj - absorbed).norm() < 1e-8);
    }

    #[test]
    fn init_example_machine() {
        let src = r#"
base_mva = 100.0
[[buses]]
id = 1
kind = "slack"
voltage_setpoint = 1.0
[[buses]]
id = 2
kind = "PQ"
load_p = 0.8
load_q = 0.2
[[branches]]
id = "1-2"
from_bus = 1
to_bus = 2
x = 0.0001
[[machines]]
id = "G1"
bus = 1
h = 5.0
xdp = 0.3
p_gen = 0.8
"#;
        // Nearly-zero line reactance keeps the load bus voltage ~= slack, so
        // the slack machine sees V = 1∠0, S ≈ 0.8 + j0.2.
        let case: NetworkCase<f64> = load_case(src).unwrap();
        let pf = solve_power_flow(&case, 1e-12, 30).unwrap();
        let init = init_classical(&case, &pf).unwrap();
        let m = &init.machines[0];
        let e = Complex::from_polar(m.emf, m.delta0);
        assert!((e - Complex::new(1.06, 0.24)).norm() < 1e-3);
        assert!((m.emf - 1.0868).abs() < 1e-3);
        assert!((m.delta0.to_degrees() - 12.76).abs() < 0.05);
    }

    #[test]
    fn init_no_current_machine_keeps_terminal_voltage() {
        let src = r#"
base_mva = 100.0
[[buses]]
id = 1
kind = "slack"
[[buses]]
id = 2
kind = "PQ"
[[branches]]
id = "1-2"
from_bus = 1
to_bus = 2
x = 0.1
[[machines]]
id = "G1"
bus = 2
h = 5.0
xdp = 0.3
p_gen = 0.0
"#;
        let case: NetworkCase<f64> = load_case(src).unwrap();
        let pf = solve_power_flow(&case, 1e-12, 30).unwrap();
        let init = init_classical(&case, &pf).unwrap();
        let m = &init.machines[0];
        assert!((m.emf - pf.voltages[1].norm()).abs() < 1e-12);
        assert!((m.delta0 - pf.voltages[1].arg()).abs() < 1e-12);
    }

    #[test]
    fn full_39_bus_init_is_an_equilibrium() {
        let case: NetworkCase<f64> =
            load_case(include_str!("../../../data/cases/ieee39.toml")).unwrap();
        let pf = solve_power_flow(&case, 1e-10, 20).unwrap();
        let init = init_classical(&case, &pf).unwrap();

        let emf: Vec<f64> = init.machines.iter().map(|m| m.emf).collect();
        let delta: Vec<f64> = init.machines.iter().map(|m| m.delta0).collect();
        let pe = dynamics::electrical_power(&init.reduced, &emf, &delta);
        for (m, p) in init.machines.iter().zip(pe) {
            assert!((m.p_mech - p).abs() < 1e-8);
        }
    }

    #[test]
    fn f32_pipeline_compiles_and_roughly_converges() {
        let src = r#"
base_mva = 100.0
[[buses]]
id = 1
kind = "slack"
[[buses]]
id = 2
kind = "PQ"
load_p = 0.5
[[branches]]
id = "1-2"
from_bus = 1
to_bus = 2
x = 0.1
"#;
        let case: NetworkCase<f32> = load_case(src).unwrap();
        let pf = solve_power_flow(&case, 1e-4f32, 30).unwrap();
        assert!(pf.mismatch_inf_norm < 1e-4);
    }
}
