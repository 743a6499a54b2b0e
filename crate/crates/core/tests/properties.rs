use magmove::data::{DataField, TimeProfile};
use magmove::diagnostics::{analyze_refinement, energy_budget_report, gronwall_envelope, EnvelopeInputs};
use magmove::dissipation::Dissipation;
use magmove::energy::{EnergyBreakdown, EnergyFunctional, EnergyModel, MaterialParams};
use magmove::grid::{gradient, integrate_values, Face, Field, FieldRank, GridSpec, Side};
use magmove::io::{read_field, read_series, write_field, write_series, SeriesRow};
use magmove::kinematics::{build_kinematics, ciarlet_necas_residual};
use magmove::stepper::{run_evolution, DataProviders, StepConfig};
use magmove::strayfield::{solve_stray_field, PaddedGrid};
use magmove::trajectory::{InterpolantMode, Snapshot, StepDiagnostics, StepStatus, TrajectoryStore};
use proptest::prelude::*;

fn grid3(n: usize) -> GridSpec {
    GridSpec::unit(3, n, &[Face { axis: 2, side: Side::Low }]).unwrap()
}

/// Smooth field `amp * sum_t a_t sin(k_t . x + p_t)` per component.
fn smooth(grid: &GridSpec, coef: &[f64], amp: f64) -> Vec<f64> {
    let d = grid.dim();
    let mut out = vec![0.0; grid.len() * d];
    for i in 0..grid.len() {
        let x = grid.coords(i);
        for c in 0..d {
            let k = &coef[(c * 5) % (coef.len() - 4)..];
            out[i * d + c] = amp * k[0] * (k[1] * x[0] + k[2] * x[1] + k[3] * x[2] + k[4]).sin();
        }
    }
    out
}

fn identity(grid: &GridSpec) -> Vec<f64> {
    let d = grid.dim();
    (0..grid.len()).flat_map(|i| grid.coords(i)[..d].to_vec()).collect()
}

fn coefs() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, 20)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn snapshot(grid: &GridSpec, t: f64, eta: Vec<f64>, m: Vec<f64>, energy: f64, diss: f64, work: f64) -> Snapshot {
    Snapshot {
        time: t,
        deformation: Field::from_data(grid, FieldRank::Vector, eta).unwrap(),
        magnetization: Field::from_data(grid, FieldRank::Vector, m).unwrap(),
        energy: EnergyBreakdown { elastic_w: energy, total: energy, ..Default::default() },
        dissipation: diss,
        status: StepStatus::Accepted,
        diagnostics: StepDiagnostics { forcing_work: work, functional_prev: energy, functional_min: energy, ..Default::default() },
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn gradient_of_affine_field_is_exact(a in prop::array::uniform9(-3.0f64..3.0), b in prop::array::uniform3(-1.0f64..1.0)) {
        let g = GridSpec::reference(3, [5, 6, 4], [1.0, 1.3, 0.7], &[Face { axis: 0, side: Side::High }]).unwrap();
        let f = Field::vector_from_fn(&g, |x| {
            let mut y = b;
            for r in 0..3 { for c in 0..3 { y[r] += a[r * 3 + c] * x[c]; } }
            y
        });
        let gr = gradient(&f, &g).unwrap();
        for node in gr.data.chunks(9) {
            for (u, v) in node.iter().zip(&a) {
                prop_assert!((u - v).abs() <= 1e-12 * (1.0 + v.abs()) * 10.0);
            }
        }
    }

    #[test]
    fn integration_is_linear_and_monotone(c1 in coefs(), c2 in coefs(), s in -3.0f64..3.0) {
        let g = grid3(5);
        let f = smooth(&g, &c1, 1.0);
        let h = smooth(&g, &c2, 1.0);
        let fs: Vec<f64> = f.iter().step_by(3).copied().collect();
        let hs: Vec<f64> = h.iter().step_by(3).copied().collect();
        let comb: Vec<f64> = fs.iter().zip(&hs).map(|(a, b)| s * a + b).collect();
        let lhs = integrate_values(&comb, &g);
        let rhs = s * integrate_values(&fs, &g) + integrate_values(&hs, &g);
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        let upper: Vec<f64> = fs.iter().zip(&hs).map(|(a, b)| a.max(*b)).collect();
        prop_assert!(integrate_values(&upper, &g) >= integrate_values(&fs, &g));
    }

    #[test]
    fn cofactor_identity(c in coefs()) {
        let g = grid3(5);
        let eta: Vec<f64> = identity(&g).iter().zip(smooth(&g, &c, 0.05)).map(|(a, b)| a + b).collect();
        let st = build_kinematics(&Field::from_data(&g, FieldRank::Vector, eta).unwrap(), &g).unwrap();
        for i in 0..g.len() {
            let j = st.det[i];
            prop_assume!(j > 1e-8);
            let inv = st.node_inv(i);
            for r in 0..3 {
                for cc in 0..3 {
                    let want = j * inv[cc * 3 + r];
                    prop_assert!((st.cof[i * 9 + r * 3 + cc] - want).abs() <= 1e-12 * (1.0 + want.abs()));
                }
            }
        }
    }

    #[test]
    fn volume_identity_is_rigid_invariant(c in coefs(), angle in 0.0f64..6.28, shift in prop::array::uniform3(-2.0f64..2.0)) {
        let g = grid3(6);
        let eta: Vec<f64> = identity(&g).iter().zip(smooth(&g, &c, 0.03)).map(|(a, b)| a + b).collect();
        let (s, co) = angle.sin_cos();
        let moved: Vec<f64> = eta.chunks(3).flat_map(|p| [co * p[0] - s * p[1] + shift[0], s * p[0] + co * p[1] + shift[1], p[2] + shift[2]]).collect();
        let mut res = Vec::new();
        for e in [eta, moved] {
            let f = Field::from_data(&g, FieldRank::Vector, e).unwrap();
            let st = build_kinematics(&f, &g).unwrap();
            res.push(ciarlet_necas_residual(&f, &st, &g, 2).unwrap());
        }
        prop_assert!(res[0].ok && res[1].ok);
        prop_assert!((res[0].residual - res[1].residual).abs() <= res[0].tolerance.max(res[1].tolerance));
    }

    #[test]
    fn energy_total_is_sum_of_parts_and_nonnegative(c in coefs(), stray in any::<bool>()) {
        let g = grid3(5);
        let eta: Vec<f64> = identity(&g).iter().zip(smooth(&g, &c, 0.03)).map(|(a, b)| a + b).collect();
        let m = smooth(&g, &c[3..], 0.8);
        let e = EnergyFunctional::new(&g, EnergyModel::new(MaterialParams { stray, ..Default::default() }), &eta).unwrap();
        let br = e.evaluate(&eta, &m, false).breakdown;
        let parts = br.parts();
        let sum = br.elastic_w + br.det_penalty + br.hessian + br.anisotropy + br.stray + br.exchange + br.saturation;
        prop_assert_eq!(sum.to_bits(), br.total.to_bits());
        for (name, v) in &parts[..7] {
            prop_assert!(*v >= 0.0, "{} = {}", name, v);
        }
    }

    #[test]
    fn dissipation_is_quadratic_nonnegative_and_decoupled(c in coefs(), s in -4.0f64..4.0) {
        let g = grid3(5);
        let eta: Vec<f64> = identity(&g).iter().zip(smooth(&g, &c, 0.03)).map(|(a, b)| a + b).collect();
        let st = build_kinematics(&Field::from_data(&g, FieldRank::Vector, eta).unwrap(), &g).unwrap();
        let r = Dissipation::new(&g, &st, 1.0).unwrap();
        let de = smooth(&g, &c[2..], 1.0);
        let dm = smooth(&g, &c[5..], 1.0);
        let v = r.value(&de, &dm);
        prop_assert!(v >= 0.0);
        let se: Vec<f64> = de.iter().map(|x| s * x).collect();
        let sm: Vec<f64> = dm.iter().map(|x| s * x).collect();
        prop_assert!(rel(r.value(&se, &sm), s * s * v) <= 1e-12);
        let zero = vec![0.0; de.len()];
        let rigid: Vec<f64> = (0..g.len()).flat_map(|_| [0.3, -0.2, 0.1]).collect();
        prop_assert!(r.value(&rigid, &zero) <= 1e-12);
        let (pe, pm) = r.parts(&de, &dm);
        prop_assert_eq!(pe.to_bits(), r.parts(&de, &sm).0.to_bits());
        prop_assert_eq!(pm.to_bits(), r.parts(&se, &dm).1.to_bits());
    }

    #[test]
    fn stray_solver_is_linear_and_self_adjoint(c1 in coefs(), c2 in coefs(), a in -3.0f64..3.0) {
        let inner = grid3(6);
        let pg = PaddedGrid::around(&inner, 2.0).unwrap();
        let pgs = pg.grid_spec();
        let mask = |v: Vec<f64>| -> Vec<f64> {
            v.chunks(3).enumerate().flat_map(|(i, p)| {
                let x = pgs.coords(i);
                let inside = (0..3).all(|k| x[k] >= 0.0 && x[k] <= 1.0);
                if inside { p.to_vec() } else { vec![0.0; 3] }
            }).collect()
        };
        let m1 = mask(smooth(&pgs, &c1, 1.0));
        let m2 = mask(smooth(&pgs, &c2, 1.0));
        let s1 = solve_stray_field(&m1, &pg, 1.0).unwrap();
        let s2 = solve_stray_field(&m2, &pg, 1.0).unwrap();
        let comb: Vec<f64> = m1.iter().zip(&m2).map(|(x, y)| a * x + y).collect();
        let s3 = solve_stray_field(&comb, &pg, 1.0).unwrap();
        let scale = s1.h.iter().chain(&s2.h).fold(0.0f64, |acc, v| acc.max(v.abs())).max(1e-300) * (1.0 + a.abs());
        for (k, h) in s3.h.iter().enumerate() {
            prop_assert!((h - a * s1.h[k] - s2.h[k]).abs() <= 1e-12 * scale);
        }
        let l: f64 = m1.iter().zip(&s2.h).map(|(x, y)| x * y).sum();
        let r: f64 = m2.iter().zip(&s1.h).map(|(x, y)| x * y).sum();
        prop_assert!((l - r).abs() <= 1e-10 * (l.abs().max(r.abs()) + 1e-14));
    }

    #[test]
    fn envelope_is_monotone(c2 in 0.1f64..10.0, c3 in 0.05f64..2.0, f in 0.0f64..5.0, beta in 0.0f64..2.0, t in 0.0f64..2.0, dt in 0.0f64..1.0, df in 0.0f64..1.0, db in 0.0f64..0.5) {
        let base = EnvelopeInputs { c2, c3, volume: 1.0, rho: 1.0, f_sup: f, nu: 1.0, beta };
        let e = gronwall_envelope(&base, t);
        prop_assert!(gronwall_envelope(&base, t + dt) >= e);
        let more_f = EnvelopeInputs { f_sup: f + df, ..base };
        let more_beta = EnvelopeInputs { beta: beta + db, ..base };
        prop_assert!(gronwall_envelope(&more_f, t) >= e);
        prop_assert!(gronwall_envelope(&more_beta, t) >= e);
        prop_assert_eq!(gronwall_envelope(&base, 0.0), c2);
    }

    #[test]
    fn budget_starts_at_initial_energy(e0 in 0.0f64..100.0, c in coefs()) {
        let g = grid3(3);
        let s0 = snapshot(&g, 0.0, identity(&g), smooth(&g, &c, 1.0), e0, 0.0, 0.0);
        let traj = TrajectoryStore::new(g, 0.1, s0).unwrap();
        let r = energy_budget_report(&traj).unwrap();
        prop_assert_eq!(r.lhs[0].to_bits(), e0.to_bits());
        prop_assert_eq!(r.lhs.len(), 1);
    }

    #[test]
    fn refinement_of_constant_solution_is_zero(c in coefs(), dt in 0.01f64..0.2) {
        let g = grid3(3);
        let eta = identity(&g);
        let m = smooth(&g, &c, 1.0);
        let levels: Vec<TrajectoryStore> = (0..3).map(|l| {
            let h = dt / (1 << l) as f64;
            let mut tr = TrajectoryStore::new(g.clone(), h, snapshot(&g, 0.0, eta.clone(), m.clone(), 1.0, 0.0, 0.0)).unwrap();
            for k in 1..=(4usize << l) {
                tr.push(snapshot(&g, k as f64 * h, eta.clone(), m.clone(), 1.0, 0.0, 0.0)).unwrap();
            }
            tr
        }).collect();
        let t = analyze_refinement(&levels).unwrap();
        prop_assert!(t.discrepancies.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn affine_interpolant_is_continuous(c in coefs(), t in 0.0f64..0.3, eps in 1e-9f64..1e-6) {
        let g = grid3(3);
        let mut tr = TrajectoryStore::new(g.clone(), 0.1, snapshot(&g, 0.0, identity(&g), smooth(&g, &c, 1.0), 1.0, 0.0, 0.0)).unwrap();
        for k in 1..=3 {
            let e: Vec<f64> = identity(&g).iter().zip(smooth(&g, &c[k..], 0.1)).map(|(a, b)| a + b).collect();
            tr.push(snapshot(&g, k as f64 * 0.1, e, smooth(&g, &c[2 * k..], 1.0), 1.0, 0.0, 0.0)).unwrap();
        }
        let lo = (t - eps).max(0.0);
        let hi = (t + eps).min(0.3);
        let (a, _) = tr.eval(lo, InterpolantMode::Affine).unwrap();
        let (b, _) = tr.eval(hi, InterpolantMode::Affine).unwrap();
        let jump = a.data.iter().zip(&b.data).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        prop_assert!(jump <= 1e3 * (hi - lo) + 1e-15);
    }

    #[test]
    fn series_and_fields_round_trip_bitwise(c in coefs(), vals in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO | prop::num::f64::INFINITE | prop::num::f64::POSITIVE | prop::num::f64::NEGATIVE, 19)) {
        let dir = tempfile::tempdir().unwrap();
        let g = grid3(4);
        let f = Field::from_data(&g, FieldRank::Vector, smooth(&g, &c, 1e3)).unwrap();
        let p = dir.path().join("m.mmfd");
        write_field(&p, &g, &f, "mtilde", Some(0.5), Some(5)).unwrap();
        let (g2, f2) = read_field(&p).unwrap();
        prop_assert_eq!(&g2, &g);
        prop_assert!(f.data.iter().zip(&f2.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        let mut snap = snapshot(&g, vals[0], identity(&g), f.data.clone(), vals[1], vals[2], vals[3]);
        snap.energy.hessian = vals[4];
        snap.diagnostics.min_det = vals[5];
        snap.diagnostics.cn_residual = vals[6];
        let row = SeriesRow::from_snapshot(3, &snap);
        let sp = dir.path().join("s.csv");
        write_series(std::slice::from_ref(&row), &sp).unwrap();
        let back = read_series(&sp).unwrap();
        let bits = |r: &SeriesRow| [r.t, r.energy, r.elastic_w, r.dissipation, r.forcing_work, r.hessian, r.min_det, r.cn_residual].map(f64::to_bits);
        prop_assert_eq!(bits(&back[0]), bits(&row));
        prop_assert_eq!(back[0].status, row.status);
    }
}

#[test]
fn inertia_off_ignores_density() {
    let g = GridSpec::unit(2, 7, &[Face { axis: 1, side: Side::Low }]).unwrap();
    let eta0 = Field::vector_from_fn(&g, |x| x);
    let m0 = Field::vector_from_fn(&g, |x| [0.8, 0.6 * (1.0 + 0.2 * x[0]), 0.0]);
    let data = DataProviders { force: DataField::zero(), hext: DataField::uniform([0.0, 0.5, 0.0], TimeProfile::Constant), eta0, m0 };
    let cfg = StepConfig { dt: 0.02, t_end: 0.06, inertia: false, ..Default::default() };
    let runs: Vec<_> = [1.0, 7.5]
        .iter()
        .map(|&rho| {
            let p = MaterialParams { stray: false, rho, easy_axis: [0.0, 1.0, 0.0], ..Default::default() };
            run_evolution(&g, EnergyModel::new(p), &data, &cfg).unwrap()
        })
        .collect();
    assert_eq!(runs[0].termination, StepStatus::Accepted);
    for (a, b) in runs[0].trajectory.snapshots.iter().zip(&runs[1].trajectory.snapshots) {
        assert!(a.deformation.data.iter().zip(&b.deformation.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a.magnetization.data.iter().zip(&b.magnetization.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.energy.total.to_bits(), b.energy.total.to_bits());
    }
}
