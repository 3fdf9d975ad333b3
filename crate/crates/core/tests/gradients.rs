use nrr_core::autodiff::finite_difference_check;
use nrr_core::data::sample_profile;
use nrr_core::model::nrr_forward_train;
use nrr_core::training::combined_loss;
use nrr_core::{soft_round, soft_rr, Graph, Matrix, NrrParams, Result, RngStream, Temperature, Tensor};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;
const TRIALS: u64 = 100;

fn random(rng: &mut RngStream, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.uniform(lo, hi)).collect()).unwrap()
}

/// Reduces any tensor to a scalar with fixed random weights, so that every
/// output entry contributes a distinct gradient.
fn weighted_sum(g: &mut Graph, t: Tensor, seed: u64) -> Result<Tensor> {
    let (r, c) = g.shape(t);
    let w = g.constant(random(&mut RngStream::new(seed ^ 0xabc), r, c, -1.0, 1.0));
    let p = g.mul(t, w)?;
    Ok(g.sum(p))
}

fn near_tie(values: &[f64]) -> bool {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.windows(2).any(|w| w[1] - w[0] < 1e-6)
}

fn check<F>(name: &str, inputs: impl Fn(&mut RngStream) -> Vec<Matrix>, op: F)
where
    F: Fn(&mut Graph, &[Tensor]) -> Result<Tensor> + Copy,
{
    for seed in 0..TRIALS {
        let params = inputs(&mut RngStream::new(seed));
        let err = finite_difference_check(
            |g, t| {
                let out = op(g, t)?;
                weighted_sum(g, out, seed)
            },
            &params,
            STEP,
        )
        .unwrap();
        assert!(err < TOL, "{name}: relative error {err} at seed {seed}");
    }
}

fn one(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Fn(&mut RngStream) -> Vec<Matrix> {
    move |rng| vec![random(rng, rows, cols, lo, hi)]
}

fn two(a: (usize, usize), b: (usize, usize)) -> impl Fn(&mut RngStream) -> Vec<Matrix> {
    move |rng| vec![random(rng, a.0, a.1, -2.0, 2.0), random(rng, b.0, b.1, -2.0, 2.0)]
}

#[test]
fn elementwise_binary_ops() {
    check("add", two((3, 4), (3, 4)), |g, t| g.add(t[0], t[1]));
    check("sub", two((3, 4), (3, 4)), |g, t| g.sub(t[0], t[1]));
    check("mul", two((3, 4), (3, 4)), |g, t| g.mul(t[0], t[1]));
    check(
        "div",
        |rng| vec![random(rng, 3, 4, -2.0, 2.0), random(rng, 3, 4, 0.5, 2.0)],
        |g, t| g.div(t[0], t[1]),
    );
}

#[test]
fn linear_ops() {
    check("matmul", two((3, 4), (4, 2)), |g, t| g.matmul(t[0], t[1]));
    check("transpose", one(3, 4, -2.0, 2.0), |g, t| Ok(g.transpose(t[0])));
    check("scale", one(3, 4, -2.0, 2.0), |g, t| Ok(g.scale(t[0], -1.7)));
    check("add_scalar", one(3, 4, -2.0, 2.0), |g, t| Ok(g.add_scalar(t[0], 0.3)));
    check("add_const", one(3, 4, -2.0, 2.0), |g, t| g.add_const(t[0], &Matrix::filled(3, 4, 2.0)));
    check("broadcast row", one(1, 4, -2.0, 2.0), |g, t| g.broadcast(t[0], 3, 4));
    check("broadcast col", one(3, 1, -2.0, 2.0), |g, t| g.broadcast(t[0], 3, 4));
    check("broadcast scalar", one(1, 1, -2.0, 2.0), |g, t| g.broadcast(t[0], 3, 4));
}

#[test]
fn unary_ops() {
    check("row_softmax", one(3, 4, -3.0, 3.0), |g, t| Ok(g.row_softmax(t[0])));
    check("ln_clamped", one(3, 4, 0.1, 3.0), |g, t| Ok(g.ln_clamped(t[0])));
    check("square", one(3, 4, -2.0, 2.0), |g, t| Ok(g.square(t[0])));
    check("tanh", one(3, 4, -2.0, 2.0), |g, t| Ok(g.tanh(t[0])));
    for seed in 0..TRIALS {
        let x = random(&mut RngStream::new(seed), 3, 4, -2.0, 2.0);
        if x.as_slice().iter().any(|v| v.abs() < 1e-6) {
            continue;
        }
        let err = finite_difference_check(
            |g, t| {
                let r = g.relu(t[0]);
                weighted_sum(g, r, seed)
            },
            &[x],
            STEP,
        )
        .unwrap();
        assert!(err < TOL, "relu: {err}");
    }
}

#[test]
fn reductions() {
    check("row_sum", one(3, 4, -2.0, 2.0), |g, t| Ok(g.row_sum(t[0])));
    check("col_sum", one(3, 4, -2.0, 2.0), |g, t| Ok(g.col_sum(t[0])));
    check("sum", one(3, 4, -2.0, 2.0), |g, t| Ok(g.sum(t[0])));
    check("mean", one(3, 4, -2.0, 2.0), |g, t| Ok(g.mean(t[0])));
    for (name, use_min) in [("row_min", true), ("row_max", false)] {
        for seed in 0..TRIALS {
            let x = random(&mut RngStream::new(seed), 3, 4, -2.0, 2.0);
            if (0..3).any(|i| near_tie(x.row(i))) {
                continue;
            }
            let err = finite_difference_check(
                |g, t| {
                    let r = if use_min { g.row_min(t[0]) } else { g.row_max(t[0]) };
                    weighted_sum(g, r, seed)
                },
                &[x],
                STEP,
            )
            .unwrap();
            assert!(err < TOL, "{name}: {err}");
        }
    }
}

#[test]
fn structural_ops() {
    check("repeat_rows", one(2, 3, -2.0, 2.0), |g, t| g.repeat_rows(t[0], 3));
    check("slice_rows", one(5, 3, -2.0, 2.0), |g, t| g.slice_rows(t[0], 1, 4));
    check("hconcat", two((3, 2), (3, 4)), |g, t| g.hconcat(&[t[0], t[1], t[0]]));
    check("vconcat", two((2, 3), (4, 3)), |g, t| g.vconcat(&[t[1], t[0]]));
}

#[test]
fn soft_relaxations_through_a_linear_map() {
    for tau in [1.0, 0.1] {
        let tau = Temperature::new(tau).unwrap();
        for seed in 0..20 {
            let mut rng = RngStream::new(seed);
            let x = random(&mut rng, 3, 5, 0.0, 1.0);
            let mix = random(&mut rng, 5, 5, 0.0, 1.0);
            for relaxation in [soft_rr, soft_round] {
                let err = finite_difference_check(
                    |g, t| {
                        let m = g.constant(mix.clone());
                        let v = g.matmul(t[0], m)?;
                        let out = relaxation(g, v, tau)?;
                        weighted_sum(g, out, seed)
                    },
                    std::slice::from_ref(&x),
                    STEP,
                )
                .unwrap();
                assert!(err < TOL, "tau {}: {err}", tau.get());
            }
            let plain = finite_difference_check(
                |g, t| {
                    let out = soft_rr(g, t[0], tau)?;
                    Ok(g.sum(out))
                },
                std::slice::from_ref(&x),
                STEP,
            )
            .unwrap();
            assert!(plain < TOL);
        }
    }
}

#[test]
fn full_training_loss() {
    let one = Temperature::new(1.0).unwrap();
    for seed in 0..5 {
        let mut rng = RngStream::new(seed);
        let v = sample_profile(4, 8, &mut rng).unwrap();
        let target = nrr_core::muw_allocation(&v).to_matrix();
        let params = NrrParams::init(3, one, one, 100 + seed).unwrap();
        for lambda in [0.0, 1.0] {
            let err = finite_difference_check(
                |g, t| {
                    let pred = nrr_forward_train(g, &v, &params, t)?;
                    combined_loss(g, &target, pred, &v, lambda)
                },
                &params.tensors(),
                STEP,
            )
            .unwrap();
            assert!(err < TOL, "seed {seed} lambda {lambda}: {err}");
        }
    }
}

#[test]
fn backward_is_deterministic() {
    let v = sample_profile(4, 8, &mut RngStream::new(3)).unwrap();
    let one = Temperature::new(1.0).unwrap();
    let params = NrrParams::init(3, one, one, 3).unwrap();
    let target = nrr_core::muw_allocation(&v).to_matrix();
    let run = || {
        let mut g = Graph::new();
        let w = params.register(&mut g);
        let pred = nrr_forward_train(&mut g, &v, &params, &w).unwrap();
        let loss = combined_loss(&mut g, &target, pred, &v, 0.0).unwrap();
        g.backward(loss).unwrap();
        let first: Vec<Matrix> = w.iter().map(|&t| g.grad(t).unwrap().clone()).collect();
        g.backward(loss).unwrap();
        let second: Vec<Matrix> = w.iter().map(|&t| g.grad(t).unwrap().clone()).collect();
        assert_eq!(first, second);
        first
    };
    assert_eq!(run(), run());
}
