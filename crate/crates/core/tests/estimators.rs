use mvbismut::bismut::{estimate_lions_derivative, BismutOptions, GFunction};
use mvbismut::functions::{ConstantField, Coordinate, Indicator, TestFunction};
use mvbismut::hamiltonian::{estimate_lions_derivative_degenerate, DegenerateOptions};
use mvbismut::initial::GaussianLaw;
use mvbismut::models::{ControlledChain, KineticLangevin, MeanFieldOu, TanhInteraction};
use mvbismut::oracle::{finite_diff_lions, pathwise_lions, FdScheme};
use mvbismut::{simulate, CoefficientModel, TimeGrid};

const N: usize = 20_000;

fn agree(a: &mvbismut::estimate::EstimatorResult, b: &mvbismut::estimate::EstimatorResult, slack: f64) {
    assert!(
        a.agrees_with(b, 3.0, slack),
        "{} = {} +- {} vs {} = {} +- {}",
        a.method,
        a.value,
        a.std_error,
        b.method,
        b.value,
        b.std_error
    );
}

#[test]
fn three_estimators_agree_on_nonlinear_interaction() {
    let model = TanhInteraction::default();
    let grid = TimeGrid::new(1.0, 50).unwrap();
    let law = GaussianLaw::standard(1);
    let phi = ConstantField(vec![1.0]);
    let f = Coordinate(0);
    // pairwise kernel: cost grows like N^2 per step
    let n = 1_500;
    let b = estimate_lions_derivative(&model, &f, &law, &phi, grid, n, 3, &BismutOptions::new(&grid)).unwrap();
    let p = pathwise_lions(&model, &f, &law, &phi, grid, n, 3).unwrap();
    let fd = finite_diff_lions(&model, &f, &law, &phi, 1e-3, grid, n, 3, FdScheme::Forward).unwrap();
    let slack = 1e-3 + grid.dt();
    agree(&b, &p, slack);
    agree(&b, &fd, slack);
    agree(&p, &fd, slack);
}

#[test]
fn indicator_payoff_matches_finite_difference() {
    let model = MeanFieldOu::default();
    let grid = TimeGrid::new(1.0, 50).unwrap();
    let law = GaussianLaw::standard(1);
    let phi = ConstantField(vec![1.0]);
    let f = Indicator {
        index: 0,
        threshold: 0.0,
    };
    let b = estimate_lions_derivative(&model, &f, &law, &phi, grid, N, 8, &BismutOptions::new(&grid)).unwrap();
    let fd = finite_diff_lions(&model, &f, &law, &phi, 1e-2, grid, N, 8, FdScheme::Central).unwrap();
    agree(&b, &fd, 1e-2 + grid.dt());
}

#[test]
fn smoothstep_and_linear_g_agree() {
    let model = MeanFieldOu::default();
    let grid = TimeGrid::new(1.0, 100).unwrap();
    let law = GaussianLaw::standard(1);
    let phi = ConstantField(vec![1.0]);
    let f = Coordinate(0);
    let lin = estimate_lions_derivative(&model, &f, &law, &phi, grid, N, 5, &BismutOptions::new(&grid)).unwrap();
    let opts = BismutOptions {
        g: GFunction::smoothstep(1.0),
        centered: true,
    };
    let smooth = estimate_lions_derivative(&model, &f, &law, &phi, grid, N, 5, &opts).unwrap();
    agree(&lin, &smooth, 0.0);
}

#[test]
fn kinetic_langevin_degenerate_estimates() {
    let model = KineticLangevin::default();
    let grid = TimeGrid::new(1.0, 200).unwrap();
    let law = GaussianLaw::standard(2);
    let f = Coordinate(0);
    for (phi, exact) in [(vec![1.0, 0.0], 1.0), (vec![0.0, 1.0], 1.0)] {
        let phi = ConstantField(phi);
        let est = estimate_lions_derivative_degenerate(
            &model,
            &f,
            &law,
            &phi,
            grid,
            N,
            11,
            &DegenerateOptions::default(),
        )
        .unwrap();
        let fd = finite_diff_lions(&model, &f, &law, &phi, 1e-3, grid, N, 11, FdScheme::Forward).unwrap();
        assert!((fd.value - exact).abs() < 1e-9, "fd {}", fd.value);
        agree(&est, &fd, 1e-3 + grid.dt());
    }
}

#[test]
fn controlled_chain_degenerate_matches_finite_difference() {
    let model = ControlledChain::default();
    let grid = TimeGrid::new(1.0, 200).unwrap();
    let law = GaussianLaw::standard(3);
    let f = Coordinate(0);
    let phi = ConstantField(vec![1.0, 0.5, -0.5]);
    let est =
        estimate_lions_derivative_degenerate(&model, &f, &law, &phi, grid, N, 4, &DegenerateOptions::default())
            .unwrap();
    let fd = finite_diff_lions(&model, &f, &law, &phi, 1e-3, grid, N, 4, FdScheme::Forward).unwrap();
    agree(&est, &fd, 1e-3 + grid.dt());
}

#[test]
fn mean_field_ou_degenerate_reduces_to_bismut_target() {
    // With no position block the degenerate weight is the plain weight for
    // g = t/T without the interaction correction; both target the same value.
    let model = MeanFieldOu::default();
    let grid = TimeGrid::new(1.0, 100).unwrap();
    let law = GaussianLaw::standard(1);
    let phi = ConstantField(vec![1.0]);
    let f = Coordinate(0);
    let deg =
        estimate_lions_derivative_degenerate(&model, &f, &law, &phi, grid, N, 6, &DegenerateOptions::default())
            .unwrap();
    let b = estimate_lions_derivative(&model, &f, &law, &phi, grid, N, 6, &BismutOptions::new(&grid)).unwrap();
    agree(&deg, &b, grid.dt());
}

#[test]
fn variational_moments_stay_below_exponential_bound() {
    let law1 = GaussianLaw::standard(1);
    let law2 = GaussianLaw::standard(2);
    let law3 = GaussianLaw::standard(3);
    let ou = MeanFieldOu::default();
    let tanh = TanhInteraction::default();
    let kin = KineticLangevin::default();
    let chain = ControlledChain::default();
    let cases: [(&dyn CoefficientModel, &GaussianLaw, Vec<f64>); 4] = [
        (&ou, &law1, vec![1.0]),
        (&tanh, &law1, vec![1.0]),
        (&kin, &law2, vec![1.0, 1.0]),
        (&chain, &law3, vec![1.0, -1.0, 0.5]),
    ];
    let grid = TimeGrid::new(1.0, 100).unwrap();
    for (model, law, phi) in cases {
        let traj = simulate(model, law, grid, 500, 1).unwrap();
        let v = mvbismut::flow::propagate_v(&traj, &ConstantField(phi), model).unwrap();
        let norms = v.mean_square_norms();
        for (k, m) in norms.iter().enumerate() {
            let t = grid.time(k);
            let cap = (8.0 * model.bound_k(grid.horizon()) * t).exp() * (1.0 + 10.0 * grid.dt());
            assert!(m / norms[0] <= cap, "{} at t = {t}: {}", model.name(), m / norms[0]);
        }
    }
}

#[test]
fn constant_payoff_gives_zero_everywhere() {
    let model = MeanFieldOu::default();
    let grid = TimeGrid::new(1.0, 20).unwrap();
    let law = GaussianLaw::standard(1);
    let phi = ConstantField(vec![1.0]);
    let f = mvbismut::functions::Constant(2.5);
    let b = estimate_lions_derivative(&model, &f, &law, &phi, grid, 1_000, 1, &BismutOptions::new(&grid)).unwrap();
    assert_eq!(b.value, 0.0);
    let fd = finite_diff_lions(&model, &f, &law, &phi, 1e-3, grid, 1_000, 1, FdScheme::Forward).unwrap();
    assert_eq!(fd.value, 0.0);
    let p = pathwise_lions(&model, &f, &law, &phi, grid, 1_000, 1).unwrap();
    assert_eq!(p.value, 0.0);
    let _ = f.eval(&[0.0]);
}
