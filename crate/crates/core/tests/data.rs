use fedpr::data::{cue_patterns, generate, ClientData, LabeledSample, SyntheticSpec};
use fedpr::dataset_file;
use proptest::prelude::*;

/// Class-mean-difference probe with a midpoint threshold. Under isotropic
/// Gaussian noise this is the Bayes-optimal linear rule for the estimated
/// means.
struct Probe {
    w: Vec<f64>,
    bias: f64,
}

impl Probe {
    fn fit<'a>(samples: impl Iterator<Item = &'a LabeledSample>) -> Self {
        let mut sums = [Vec::new(), Vec::new()];
        let mut counts = [0.0; 2];
        for s in samples {
            let c = usize::from(s.label);
            if sums[c].is_empty() {
                sums[c] = vec![0.0; s.image.numel()];
            }
            sums[c].iter_mut().zip(s.image.data()).for_each(|(a, x)| *a += x);
            counts[c] += 1.0;
        }
        let mean = |c: usize| sums[c].iter().map(|x| x / counts[c]).collect::<Vec<f64>>();
        let (m0, m1) = (mean(0), mean(1));
        let w: Vec<f64> = m1.iter().zip(&m0).map(|(a, b)| a - b).collect();
        let mid: Vec<f64> = m1.iter().zip(&m0).map(|(a, b)| (a + b) / 2.0).collect();
        let bias = -w.iter().zip(&mid).map(|(a, b)| a * b).sum::<f64>();
        Self { w, bias }
    }

    fn accuracy(&self, samples: &[LabeledSample]) -> f64 {
        let correct = samples
            .iter()
            .filter(|s| {
                let z: f64 = self.w.iter().zip(s.image.data()).map(|(a, b)| a * b).sum::<f64>() + self.bias;
                (z >= 0.0) == (s.label == 1)
            })
            .count();
        correct as f64 / samples.len() as f64
    }
}

#[test]
fn strong_shared_cue_is_linearly_separable_on_every_client() {
    for seed in 0..4 {
        let spec = SyntheticSpec {
            shared_cue_strength: 3.0,
            noise_sigma: 1.0,
            seed,
            ..SyntheticSpec::default()
        };
        for (k, client) in generate(&spec).unwrap().iter().enumerate() {
            let acc = Probe::fit(client.train.iter()).accuracy(&client.test);
            assert!(acc >= 0.95, "seed {seed} client {k}: probe accuracy {acc}");
        }
    }
}

#[test]
fn per_client_probes_beat_one_global_probe() {
    let (mut local, mut global) = (0.0, 0.0);
    for seed in 0..5 {
        let data = generate(&SyntheticSpec {
            seed,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let pooled = Probe::fit(data.iter().flat_map(|d| d.train.iter()));
        let (mut l, mut g) = (0.0, 0.0);
        for d in &data {
            l += Probe::fit(d.train.iter()).accuracy(&d.test);
            g += pooled.accuracy(&d.test);
        }
        let k = data.len() as f64;
        assert!(l / k > g / k, "seed {seed}: per-client {} vs global {}", l / k, g / k);
        local += l / k;
        global += g / k;
    }
    assert!(local > global);
}

#[test]
fn without_personal_cues_clients_share_one_distribution() {
    let spec = SyntheticSpec {
        personal_cue_strength: 0.0,
        samples_per_client: 2000,
        ..SyntheticSpec::default()
    };
    let data = generate(&spec).unwrap();
    // a probe fitted on one client transfers to the others
    let probe = Probe::fit(data[0].train.iter());
    let own = probe.accuracy(&data[0].test);
    for d in &data[1..] {
        assert!((probe.accuracy(&d.test) - own).abs() < 0.05);
    }
}

#[test]
fn cue_patterns_depend_only_on_the_seed() {
    let a = cue_patterns(&SyntheticSpec::default());
    let b = cue_patterns(&SyntheticSpec {
        samples_per_client: 10,
        noise_sigma: 5.0,
        ..SyntheticSpec::default()
    });
    assert_eq!(a, b);
    let c = cue_patterns(&SyntheticSpec {
        seed: 1,
        ..SyntheticSpec::default()
    });
    assert_ne!(a, c);
}

fn small_spec() -> impl Strategy<Value = SyntheticSpec> {
    (1usize..4, 2usize..30, 1usize..3, 2usize..6, any::<u64>(), 0.1f64..0.9).prop_map(|(k, n, c, hw, seed, split)| {
        SyntheticSpec {
            clients: k,
            samples_per_client: n,
            image_size: (c, hw, hw),
            train_fraction: split,
            seed,
            ..SyntheticSpec::default()
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn dataset_file_round_trips(spec in small_spec()) {
        prop_assume!(spec.validate().is_ok());
        let data = generate(&spec).unwrap();
        let bytes = dataset_file::encode(&data).unwrap();
        let back: Vec<ClientData> = dataset_file::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &data);
        prop_assert_eq!(dataset_file::encode(&back).unwrap(), bytes);
    }

    #[test]
    fn damaged_dataset_files_never_panic(spec in small_spec(), pos in any::<prop::sample::Index>(), byte in any::<u8>()) {
        prop_assume!(spec.validate().is_ok());
        let mut bytes = dataset_file::encode(&generate(&spec).unwrap()).unwrap();
        let i = pos.index(bytes.len());
        bytes[i] = byte;
        let _ = dataset_file::decode(&bytes);
        let _ = dataset_file::decode(&bytes[..i]);
    }
}
