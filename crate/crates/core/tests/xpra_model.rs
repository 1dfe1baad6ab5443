use phaseless::em::{greens_2d, xpra_contrast};
use phaseless::forward::{cylinder_series, rss_delta, ForwardSolver, SolverOptions};
use phaseless::geometry::Point;
use phaseless::linalg::power_iteration;
use phaseless::scene::{
    enumerate_links, place_nodes, rasterize_permittivity, seeded_rng, PermittivityMap, ScattererSpec, SceneConfig, Shape,
};
use phaseless::xpra::{assemble_kernel, build_diff_operators, ReconstructionState, C0};
use phaseless::Cplx;
use rand::Rng;

fn small_config(n: usize) -> SceneConfig<f64> {
    SceneConfig::new(1.5, 1.5, 0.125, 12, (48, 48), (n, n)).unwrap()
}

fn random_vec(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeded_rng(seed);
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[test]
fn kernel_matches_pointwise_formula() {
    let cfg = small_config(8);
    let op = assemble_kernel(&cfg).unwrap();
    let nodes = place_nodes(&cfg);
    let grid = cfg.inverse();
    let k0 = 2.0 * std::f64::consts::PI / 0.125;
    for (l, (tx, rx)) in op.links().iter().enumerate().step_by(7) {
        for (n, c) in grid.centers().into_iter().enumerate().step_by(5) {
            let g = greens_2d(k0, nodes[rx], c).unwrap();
            let inc = greens_2d(k0, c, nodes[tx]).unwrap();
            let inc_rx = greens_2d(k0, nodes[rx], nodes[tx]).unwrap();
            let want = (g * inc / inc_rx * (C0 * k0 * k0 * grid.cell_area())).conj();
            let got = op.kernel(l, n);
            assert!((got - want).norm() <= 1e-12 * want.norm(), "l={l} n={n}");
        }
    }
}

/// Midpoint kernel entries converge to the cell-integrated kernel at O(h²).
#[test]
fn midpoint_entries_converge_to_cell_integral() {
    let k0 = 2.0 * std::f64::consts::PI / 0.125;
    let tx = Point::new(0.0, 0.3);
    let rx = Point::new(1.5, 1.1);
    let centre = Point::new(0.8, 0.7);
    let integrand = |p: Point<f64>| {
        greens_2d(k0, rx, p).unwrap() * greens_2d(k0, p, tx).unwrap()
    };
    let mut errors = Vec::new();
    for h in [0.04, 0.02, 0.01] {
        let exact = square_quadrature(&integrand, centre, h);
        let mid = integrand(centre) * (h * h);
        errors.push((mid - exact).norm() / exact.norm());
    }
    for w in errors.windows(2) {
        let ratio = w[0] / w[1];
        assert!((3.0..5.5).contains(&ratio), "{errors:?}");
    }
}

// tensor Gauss–Legendre (8 points) on a 4×4 split of the square
fn square_quadrature(f: &impl Fn(Point<f64>) -> Cplx<f64>, c: Point<f64>, h: f64) -> Cplx<f64> {
    const X: [f64; 4] = [0.183_434_642_495_649_8, 0.525_532_409_916_329, 0.796_666_477_413_626_7, 0.960_289_856_497_536_3];
    const W: [f64; 4] = [0.362_683_783_378_362, 0.313_706_645_877_887_3, 0.222_381_034_453_374_5, 0.101_228_536_290_376_3];
    let nodes: Vec<(f64, f64)> = X
        .iter()
        .zip(W)
        .flat_map(|(&x, w)| [(-x, w), (x, w)])
        .collect();
    let parts = 4;
    let s = h / parts as f64;
    let mut sum = Cplx::new(0.0, 0.0);
    for i in 0..parts {
        for j in 0..parts {
            let x0 = c.x - h / 2.0 + (i as f64 + 0.5) * s;
            let y0 = c.y - h / 2.0 + (j as f64 + 0.5) * s;
            for &(u, wu) in &nodes {
                for &(v, wv) in &nodes {
                    let p = Point::new(x0 + u * s / 2.0, y0 + v * s / 2.0);
                    sum += f(p) * (wu * wv * s * s / 4.0);
                }
            }
        }
    }
    sum
}

#[test]
fn adjoint_identity_holds() {
    let op = assemble_kernel(&small_config(10)).unwrap();
    let x = random_vec(2 * op.cells(), 1);
    let y = random_vec(op.rows(), 2);
    let gx = op.stacked().matvec(&x).unwrap();
    let gty = op.adjoint_apply(&y).unwrap();
    let lhs: f64 = gx.iter().zip(&y).map(|(a, b)| a * b).sum();
    let rhs: f64 = x.iter().zip(&gty).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
}

#[test]
fn adjoint_matches_dense_transpose() {
    let op = assemble_kernel(&small_config(6)).unwrap();
    let t = op.stacked().transpose();
    let y = random_vec(op.rows(), 3);
    let a = op.adjoint_apply(&y).unwrap();
    let b = t.matvec(&y).unwrap();
    for (u, v) in a.iter().zip(&b) {
        assert!((u - v).abs() <= 1e-12 * v.abs().max(1.0));
    }
}

#[test]
fn stacked_prediction_equals_complex_prediction() {
    let op = assemble_kernel(&small_config(8)).unwrap();
    let x = random_vec(2 * op.cells(), 4);
    let state = ReconstructionState::from_stacked(&x).unwrap();
    let chi: Vec<Cplx<f64>> = state
        .chi_r
        .iter()
        .zip(&state.chi_i)
        .map(|(&r, &i)| Cplx::new(r, i))
        .collect();
    let a = op.predict(&state).unwrap();
    let b = op.predict_complex(&chi).unwrap();
    for (u, v) in a.iter().zip(&b) {
        assert!((u - v).abs() <= 1e-12 * v.abs().max(1.0));
    }
}

#[test]
fn difference_operators_have_norm_at_most_two() {
    let d = build_diff_operators::<f64>(10, 10).unwrap();
    for m in [&d.dx, &d.dy] {
        let top = power_iteration(
            |v| m.matvec_t(&m.matvec(v).unwrap()).unwrap(),
            m.cols(),
            500,
        );
        assert!(top <= 4.0 + 1e-9, "{top}");
        assert!(top > 3.0);
    }
}

#[test]
fn empty_scene_predicts_nothing() {
    let cfg = small_config(12);
    let op = assemble_kernel(&cfg).unwrap();
    let zero = ReconstructionState::zeros(op.cells());
    assert!(op.predict(&zero).unwrap().iter().all(|v| v.abs() <= 1e-10));
    let solver = ForwardSolver::new(cfg.clone(), SolverOptions::default()).unwrap();
    let perm = PermittivityMap::background(cfg.forward());
    let (m, _) = solver.simulate(&perm, 0.0, &mut seeded_rng(0)).unwrap();
    assert!(m.delta_p.iter().all(|v| v.abs() <= 1e-10));
}

/// In the weak-contrast limit the linear model converges to the exact
/// cylinder series as the inverse grid is refined.
#[test]
fn weak_disc_prediction_converges_to_series() {
    let eps = Cplx::new(1.0005, 0.00005);
    let spec = ScattererSpec::new(Shape::Circle, (0.0, 0.0), 0.25, eps);
    let mut cfg = SceneConfig::reference();
    let nodes = place_nodes(&cfg);
    let c = Point::new(0.75, 0.75);
    let k0 = cfg.k0();
    let links = enumerate_links(cfg.node_count).unwrap();
    let series: Vec<f64> = links
        .iter()
        .map(|(t, r)| {
            let e = cylinder_series(k0, 0.125, eps, c, nodes[t], nodes[r]).unwrap();
            rss_delta(e, greens_2d(k0, nodes[r], nodes[t]).unwrap()).unwrap()
        })
        .collect();
    let mut errors = Vec::new();
    for n in [48, 144] {
        cfg.inverse_grid = (n, n);
        let op = assemble_kernel(&cfg).unwrap();
        let chi_in = xpra_contrast(eps, 0.0, 0.0).unwrap();
        let inv = rasterize_permittivity(&[spec], &cfg.inverse()).unwrap();
        let chi: Vec<Cplx<f64>> = inv
            .values
            .iter()
            .map(|v| if *v == eps { chi_in } else { Cplx::new(0.0, 0.0) })
            .collect();
        let pred = op.predict_complex(&chi).unwrap();
        let num: f64 = pred.iter().zip(&series).map(|(a, b)| (a - b).powi(2)).sum();
        let den: f64 = series.iter().map(|b| b * b).sum();
        errors.push((num / den).sqrt());
    }
    assert!(errors[1] < 0.03 && errors[1] < errors[0], "{errors:?}");
}
