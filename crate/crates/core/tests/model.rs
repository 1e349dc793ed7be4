use fedpr::model::{
    forward_mixed, loss_adversarial, loss_personalized, loss_shared, total_loss, Batch, ForgeryModel,
    LossWeights, Mixing, ModelSpec,
};
use fedpr::rng::{derive, Domain};
use fedpr::tensor::{Tape, Tensor, Var};
use proptest::prelude::*;
use rand::Rng;

fn spec() -> ModelSpec {
    ModelSpec {
        in_channels: 1,
        height: 4,
        width: 4,
        hidden_channels: 2,
        feature_channels: 3,
        kernel: 3,
        num_classes: 2,
    }
}

fn model(seed: u64) -> ForgeryModel {
    let mut a = derive(seed, Domain::ServerInit, 0);
    let mut b = derive(seed, Domain::ClientInit, 0);
    ForgeryModel::init(spec(), &mut a, &mut b).unwrap()
}

fn batch(seed: u64, n: usize) -> Batch {
    let mut rng = derive(seed, Domain::ClientData, 0);
    let data = (0..n * 16).map(|_| rng.random_range(-2.0..2.0)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..2)).collect();
    Batch::new(Tensor::new(vec![n, 1, 4, 4], data).unwrap(), labels, 2).unwrap()
}

#[derive(Clone, Copy)]
enum Which {
    Personalized,
    Shared,
    Adversarial,
    Total(LossWeights),
}

/// Loss value and the gradient of every parameter for one loss term.
fn grads(m: &ForgeryModel, b: &Batch, seed: u64, which: Which) -> (f64, Vec<Vec<f64>>) {
    let mut rng = derive(seed, Domain::ClientTrain, 0);
    let mut f = forward_mixed(m, b, &mut rng, Mixing::Random, &|_| true).unwrap();
    let paired = f.paired_labels(&b.labels);
    let t: &mut Tape = &mut f.tape;
    let lp = loss_personalized(t, f.log_probs_p, &b.labels).unwrap();
    let ls = loss_shared(t, f.log_probs_s, &paired).unwrap();
    let la = loss_adversarial(t, f.log_probs_adv).unwrap();
    let l: Var = match which {
        Which::Personalized => lp,
        Which::Shared => ls,
        Which::Adversarial => la,
        Which::Total(w) => total_loss(t, lp, ls, la, w).unwrap(),
    };
    t.backward(l).unwrap();
    let g = f.bound.vars().iter().map(|v| t.grad(*v).map_or_else(Vec::new, <[f64]>::to_vec)).collect();
    (t.scalar_value(l).unwrap(), g)
}

fn weights() -> impl Strategy<Value = LossWeights> {
    (0.0f64..2.0, 0.0f64..2.0, 0.0f64..2.0).prop_map(|(alpha, beta, gamma)| LossWeights { alpha, beta, gamma })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn total_gradient_is_the_weighted_sum_of_routed_gradients(seed in any::<u64>(), n in 2usize..6, w in weights()) {
        let (m, b) = (model(seed), batch(seed, n));
        let (_, gp) = grads(&m, &b, seed, Which::Personalized);
        let (_, gs) = grads(&m, &b, seed, Which::Shared);
        let (_, ga) = grads(&m, &b, seed, Which::Adversarial);
        let (_, gt) = grads(&m, &b, seed, Which::Total(w));
        let at = |g: &Vec<Vec<f64>>, i: usize, j: usize| g[i].get(j).copied().unwrap_or(0.0);
        for (i, param) in gt.iter().enumerate() {
            for (j, got) in param.iter().enumerate() {
                let expect = w.alpha * at(&ga, i, j) + w.beta * at(&gp, i, j) + w.gamma * at(&gs, i, j);
                prop_assert!((got - expect).abs() < 1e-10, "param {i}[{j}]: {got} vs {expect}");
            }
        }
    }

    #[test]
    fn losses_are_non_negative(seed in any::<u64>(), n in 2usize..6) {
        let (m, b) = (model(seed), batch(seed, n));
        for which in [Which::Personalized, Which::Shared, Which::Adversarial] {
            let (l, _) = grads(&m, &b, seed, which);
            prop_assert!(l >= 0.0 && l.is_finite());
        }
    }

    #[test]
    fn seeded_forward_is_bitwise_reproducible(seed in any::<u64>(), n in 2usize..6) {
        let (m, b) = (model(seed), batch(seed, n));
        let run = || {
            let mut rng = derive(seed, Domain::ClientTrain, 1);
            let f = forward_mixed(&m, &b, &mut rng, Mixing::Random, &|_| true).unwrap();
            let bits = |v: Var| f.tape.data(v).iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            (bits(f.log_probs_p), bits(f.log_probs_s), bits(f.log_probs_adv), f.pair_index.clone(), f.lambdas.clone())
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn pairing_never_maps_a_sample_to_itself(seed in any::<u64>(), n in 2usize..40) {
        let mut rng = derive(seed, Domain::ClientTrain, 2);
        let perm = fedpr::model::pair_permutation(n, &mut rng);
        let mut sorted = perm.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        prop_assert!(perm.iter().enumerate().all(|(i, &j)| i != j));
    }
}
