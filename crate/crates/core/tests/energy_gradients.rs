use magmove::energy::{EnergyFunctional, EnergyModel, MaterialParams};
use magmove::grid::{Face, GridSpec, Side};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn smooth_field(grid: &GridSpec, rng: &mut ChaCha8Rng, amp: f64, vanish_on_p: bool) -> Vec<f64> {
    let d = grid.dim();
    let coef: Vec<[f64; 4]> = (0..d * 3).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(0.5..2.5), rng.gen_range(0.5..2.5), rng.gen_range(0.0..6.0)]).collect();
    let mut out = vec![0.0; grid.len() * d];
    for i in 0..grid.len() {
        let x = grid.coords(i);
        for c in 0..d {
            let mut v = 0.0;
            for t in 0..3 {
                let k = coef[c * 3 + t];
                v += k[0] * (k[1] * x[0] + k[2] * x[1] + 0.7 * x[2] + k[3]).sin();
            }
            if vanish_on_p && grid.is_dirichlet(i) {
                v = 0.0;
            }
            out[i * d + c] = amp * v;
        }
    }
    out
}

fn check(grid: &GridSpec, params: MaterialParams, seed: u64) -> f64 {
    let d = grid.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eta: Vec<f64> = (0..grid.len()).flat_map(|i| grid.coords(i)[..d].to_vec()).collect();
    let pert = smooth_field(grid, &mut rng, 0.03, false);
    for (e, p) in eta.iter_mut().zip(&pert) {
        *e += p;
    }
    let m = smooth_field(grid, &mut rng, 0.6, false);
    let fun = EnergyFunctional::new(grid, EnergyModel::new(params), &eta).unwrap();
    let ev = fun.evaluate(&eta, &m, true);
    assert!(!ev.breakdown.infinite);
    let de = smooth_field(grid, &mut rng, 1.0, true);
    let dm = smooth_field(grid, &mut rng, 1.0, false);
    let mut worst: f64 = 0.0;
    for (dir_e, dir_m) in [(&de, None), (&de, Some(&dm)), (&vec![0.0; de.len()], Some(&dm))] {
        let zero = vec![0.0; de.len()];
        let dir_m = dir_m.unwrap_or(&zero);
        let exact: f64 = ev.grad_eta.iter().zip(dir_e).map(|(a, b)| a * b).sum::<f64>()
            + ev.grad_m.iter().zip(dir_m).map(|(a, b)| a * b).sum::<f64>();
        let mut best = f64::INFINITY;
        for s in [1e-3, 1e-4, 1e-5, 1e-6] {
            let ep: Vec<f64> = eta.iter().zip(dir_e).map(|(a, b)| a + s * b).collect();
            let em: Vec<f64> = eta.iter().zip(dir_e).map(|(a, b)| a - s * b).collect();
            let mp: Vec<f64> = m.iter().zip(dir_m).map(|(a, b)| a + s * b).collect();
            let mm: Vec<f64> = m.iter().zip(dir_m).map(|(a, b)| a - s * b).collect();
            let fp = fun.evaluate(&ep, &mp, false).breakdown.total;
            let fm = fun.evaluate(&em, &mm, false).breakdown.total;
            let fd = (fp - fm) / (2.0 * s);
            best = best.min((fd - exact).abs() / exact.abs().max(1e-300));
        }
        worst = worst.max(best);
    }
    worst
}

#[test]
fn energy_gradient_matches_finite_differences() {
    let g = GridSpec::unit(3, 7, &[Face { axis: 2, side: Side::Low }]).unwrap();
    for seed in 0..3 {
        let err = check(&g, MaterialParams::default(), seed);
        assert!(err <= 1e-6, "seed {seed}: rel err {err:e}");
    }
}

#[test]
fn energy_gradient_2d() {
    let g = GridSpec::unit(2, 9, &[Face { axis: 1, side: Side::Low }]).unwrap();
    let p = MaterialParams { easy_axis: [0.0, 1.0, 0.0], ..Default::default() };
    let err = check(&g, p, 11);
    assert!(err <= 1e-6, "rel err {err:e}");
}
