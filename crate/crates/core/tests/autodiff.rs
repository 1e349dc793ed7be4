//! Reverse-mode gradients against central finite differences.

use fedpr::tensor::{sgd_step, ParamTensor, Tape, Tensor, Var};
use fedpr::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Values bounded away from zero so ReLU kinks stay outside the stencil.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// `Σ out ⊙ r` for a fixed random `r`, so every output element matters.
fn scalarize(tape: &mut Tape, out: Var, r: &Tensor) -> Result<Var> {
    let r = tape.constant(r);
    let prod = tape.mul(out, r)?;
    tape.sum(prod)
}

fn evaluate(inputs: &[Tensor], build: &Build<'_>, r: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t)).collect();
    let out = build(&mut tape, &vars).unwrap();
    let loss = scalarize(&mut tape, out, r).unwrap();
    tape.scalar_value(loss).unwrap()
}

/// Worst relative error between analytic and numeric gradients over all
/// inputs.
fn gradient_error(inputs: &[Tensor], build: &Build<'_>, seed: u64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(&t.clone().tracked())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = random(&mut rng, tape.shape(out), -1.0, 1.0);
    let loss = scalarize(&mut tape, out, &r).unwrap();
    tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).unwrap().to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let shifted = |delta: f64| {
                let mut xs = inputs.to_vec();
                let mut data = xs[i].data().to_vec();
                data[j] += delta;
                xs[i] = Tensor::new(xs[i].shape().to_vec(), data).unwrap();
                evaluate(&xs, build, &r)
            };
            *slot = (shifted(H) - shifted(-H)) / (2.0 * H);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = norm(&analytic).max(norm(&numeric)).max(1e-3);
        worst = worst.max(diff / scale);
    }
    worst
}

fn config() -> ProptestConfig {
    ProptestConfig::with_cases(100)
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn matmul_gradients(seed in any::<u64>(), m in 1usize..4, k in 1usize..5, n in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [random(&mut rng, &[m, k], -1.0, 1.0), random(&mut rng, &[k, n], -1.0, 1.0)];
        let err = gradient_error(&inputs, &|t, v| t.matmul(v[0], v[1]), seed);
        prop_assert!(err < TOL, "relative error {err}");
    }

    #[test]
    fn conv2d_gradients(seed in any::<u64>(), b in 1usize..3, cin in 1usize..3, cout in 1usize..3, hw in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [
            random(&mut rng, &[b, cin, hw, hw], -1.0, 1.0),
            random(&mut rng, &[cout, cin, 3, 3], -1.0, 1.0),
            random(&mut rng, &[cout], -1.0, 1.0),
        ];
        let err = gradient_error(&inputs, &|t, v| t.conv2d(v[0], v[1], Some(v[2])), seed);
        prop_assert!(err < TOL, "relative error {err}");
    }

    #[test]
    fn linear_and_log_softmax_gradients(seed in any::<u64>(), b in 1usize..4, n in 1usize..6, m in 2usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [
            random(&mut rng, &[b, n], -1.0, 1.0),
            random(&mut rng, &[m, n], -1.0, 1.0),
            random(&mut rng, &[m], -1.0, 1.0),
        ];
        let err = gradient_error(
            &inputs,
            &|t, v| {
                let z = t.linear(v[0], v[1], Some(v[2]))?;
                t.log_softmax(z)
            },
            seed,
        );
        prop_assert!(err < TOL, "relative error {err}");
    }

    #[test]
    fn relu_and_pool_gradients(seed in any::<u64>(), b in 1usize..3, c in 1usize..3, half in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hw = 2 * half;
        let inputs = [off_zero(&mut rng, &[b, c, hw, hw])];
        let err = gradient_error(
            &inputs,
            &|t, v| {
                let r = t.relu(v[0])?;
                let p = t.avg_pool(r, 2)?;
                let g = t.global_avg_pool(v[0])?;
                let f = t.flatten(p)?;
                let s = t.sum(f)?;
                let gs = t.sum(g)?;
                t.add(s, gs)
            },
            seed,
        );
        prop_assert!(err < TOL, "relative error {err}");
    }

    #[test]
    fn channel_statistic_gradients(seed in any::<u64>(), b in 1usize..3, c in 1usize..3, hw in 2usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [random(&mut rng, &[b, c, hw, hw], -2.0, 2.0)];
        let err = gradient_error(
            &inputs,
            &|t, v| {
                let m = t.channel_mean(v[0])?;
                let s = t.channel_std(v[0], 1e-5)?;
                t.mul(m, s)
            },
            seed,
        );
        prop_assert!(err < TOL, "relative error {err}");
    }

    #[test]
    fn adain_gradients(seed in any::<u64>(), b in 1usize..3, c in 1usize..3, hw in 2usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [
            random(&mut rng, &[b, c, hw, hw], -2.0, 2.0),
            random(&mut rng, &[b, c], -1.0, 1.0),
            random(&mut rng, &[b, c], 0.5, 2.0),
        ];
        let err = gradient_error(&inputs, &|t, v| t.adain(v[0], v[1], v[2], 1e-5), seed);
        prop_assert!(err < TOL, "relative error {err}");
    }

    #[test]
    fn lerp_and_gather_gradients(seed in any::<u64>(), b in 2usize..5, n in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [random(&mut rng, &[b, n], -1.0, 1.0), random(&mut rng, &[b, n], -1.0, 1.0)];
        let weights: Vec<f64> = (0..b).map(|_| rng.random()).collect();
        let index: Vec<usize> = (0..b).map(|_| rng.random_range(0..b)).collect();
        let err = gradient_error(
            &inputs,
            &|t, v| {
                let g = t.gather_rows(v[1], &index)?;
                t.lerp(v[0], g, &weights)
            },
            seed,
        );
        prop_assert!(err < TOL, "relative error {err}");
    }

    #[test]
    fn loss_gradients(seed in any::<u64>(), b in 1usize..5, m in 2usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [random(&mut rng, &[b, m], -2.0, 2.0)];
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..m)).collect();
        let err = gradient_error(
            &inputs,
            &|t, v| {
                let lp = t.log_softmax(v[0])?;
                let nll = t.nll(lp, &labels)?;
                let u = t.uniform_cross_entropy(lp)?;
                t.weighted_sum(&[(nll, 0.7), (u, 0.3)])
            },
            seed,
        );
        prop_assert!(err < TOL, "relative error {err}");
    }

    #[test]
    fn forward_and_backward_are_deterministic(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[2, 2, 4, 4], -1.0, 1.0);
        let w = random(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
        let run = || {
            let mut tape = Tape::new();
            let xv = tape.input(&x.clone().tracked());
            let wv = tape.input(&w.clone().tracked());
            let y = tape.conv2d(xv, wv, None).unwrap();
            let s = tape.channel_std(y, 1e-5).unwrap();
            let l = tape.mean(s).unwrap();
            tape.backward(l).unwrap();
            (tape.data(y).to_vec(), tape.grad(xv).unwrap().to_vec(), tape.grad(wv).unwrap().to_vec())
        };
        let (a, b) = (run(), run());
        prop_assert!(a.0.iter().zip(&b.0).all(|(x, y)| x.to_bits() == y.to_bits()));
        prop_assert!(a.1.iter().zip(&b.1).all(|(x, y)| x.to_bits() == y.to_bits()));
        prop_assert!(a.2.iter().zip(&b.2).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn parameter_gradients_accumulate_until_the_optimizer_step() {
    let mut p = ParamTensor::new("w", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap().tracked());
    for _ in 0..2 {
        let mut tape = Tape::new();
        let w = tape.param(&p, true);
        // w used twice in one graph: d/dw Σ(w·w) = 2w, counted once per pass
        let sq = tape.mul(w, w).unwrap();
        let l = tape.sum(sq).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[2.0, -4.0]);
        p.value.accumulate_grad(tape.grad(w).unwrap()).unwrap();
    }
    assert_eq!(p.value.grad().unwrap(), &[4.0, -8.0]);
    sgd_step([&mut p], 0.25, 0.0).unwrap();
    assert_eq!(p.value.data(), &[0.0, 0.0]);
    assert_eq!(p.value.grad().unwrap(), &[0.0, 0.0]);
}
