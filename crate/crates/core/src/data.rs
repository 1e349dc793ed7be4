//! Synthetic heterogeneous forgery data.
//!
//! Real samples are pure Gaussian noise. Fake samples add a cue shared by all
//! clients plus a cue specific to their client. The `K + 1` cue patterns are
//! mutually orthogonal with unit Frobenius norm, obtained by Gram–Schmidt on
//! seeded Gaussian draws.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::rng::{derive, Domain, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub clients: usize,
    pub samples_per_client: usize,
    /// `(C_in, H, W)`
    pub image_size: (usize, usize, usize),
    pub shared_cue_strength: f64,
    pub personal_cue_strength: f64,
    pub noise_sigma: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            clients: 4,
            samples_per_client: 600,
            image_size: (1, 16, 16),
            shared_cue_strength: 2.0,
            personal_cue_strength: 3.0,
            noise_sigma: 1.0,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn pixels(&self) -> usize {
        let (c, h, w) = self.image_size;
        c * h * w
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let (c, h, w) = self.image_size;
        if self.clients == 0 || c == 0 || h == 0 || w == 0 {
            return bad(format!("clients and image dims must be positive: {self:?}"));
        }
        if self.clients + 1 > self.pixels() {
            return bad(format!(
                "{} orthogonal patterns do not fit in {} pixels",
                self.clients + 1,
                self.pixels()
            ));
        }
        if !(self.shared_cue_strength >= 0.0 && self.personal_cue_strength >= 0.0)
            || !self.shared_cue_strength.is_finite()
            || !self.personal_cue_strength.is_finite()
        {
            return bad("cue strengths must be finite and >= 0".into());
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be > 0".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train_fraction {} outside (0, 1)", self.train_fraction));
        }
        let train = self.train_len();
        if train < 2 || train == self.samples_per_client {
            return bad(format!(
                "{} samples with train_fraction {} leave an empty or unusable split",
                self.samples_per_client, self.train_fraction
            ));
        }
        Ok(())
    }

    fn train_len(&self) -> usize {
        (self.samples_per_client as f64 * self.train_fraction).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    /// `C_in×H×W`
    pub image: Tensor,
    /// 0 = real, 1 = fake.
    pub label: u8,
    pub client_id: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClientData {
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

/// Orthonormal cue patterns: index 0 is shared, `1 + k` belongs to client `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct CuePatterns {
    pub shared: Vec<f64>,
    pub personal: Vec<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Modified Gram–Schmidt over `count` Gaussian vectors of length `dim`.
fn orthonormal_patterns(count: usize, dim: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let proj = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        let norm = dot(&v, &v).sqrt();
        // a degenerate draw is retried with fresh noise
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

pub fn cue_patterns(spec: &SyntheticSpec) -> CuePatterns {
    let mut rng = derive(spec.seed, Domain::Patterns, 0);
    let mut all = orthonormal_patterns(spec.clients + 1, spec.pixels(), &mut rng);
    let personal = all.split_off(1);
    CuePatterns {
        shared: all.pop().expect("count >= 1"),
        personal,
    }
}

/// Per-client `(train, test)` splits.
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<ClientData>> {
    spec.validate()?;
    let patterns = cue_patterns(spec);
    let (c, h, w) = spec.image_size;
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let cue_of = |k: usize| -> Vec<f64> {
        patterns
            .shared
            .iter()
            .zip(&patterns.personal[k])
            .map(|(s, p)| spec.shared_cue_strength * s + spec.personal_cue_strength * p)
            .collect()
    };
    (0..spec.clients)
        .map(|k| {
            let mut rng = derive(spec.seed, Domain::ClientData, k as u32);
            let cue = cue_of(k);
            let n = spec.samples_per_client;
            let mut labels: Vec<u8> = (0..n).map(|i| u8::from(i < n / 2)).collect();
            labels.shuffle(&mut rng);
            let mut samples = Vec::with_capacity(n);
            for label in labels {
                let pixels = cue
                    .iter()
                    .map(|cv| {
                        let x = noise.sample(&mut rng) + if label == 1 { *cv } else { 0.0 };
                        // representable in the f32 dataset file
                        f64::from(x as f32)
                    })
                    .collect();
                samples.push(LabeledSample {
                    image: Tensor::new(vec![c, h, w], pixels)?,
                    label,
                    client_id: k,
                });
            }
            let test = samples.split_off(spec.train_len());
            Ok(ClientData {
                train: samples,
                test,
            })
        })
        .collect()
}

/// Stacks samples into a `B×C×H×W` tensor and a label vector.
pub fn stack(samples: &[&LabeledSample]) -> Result<Batch> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Batch("cannot stack zero samples".into()))?;
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(first.image.shape());
    let mut data = Vec::with_capacity(shape.iter().product());
    for s in samples {
        if s.image.shape() != first.image.shape() {
            return Err(Error::shape("stack", first.image.shape(), s.image.shape()));
        }
        data.extend_from_slice(s.image.data());
    }
    let labels = samples.iter().map(|s| usize::from(s.label)).collect();
    Batch::new(Tensor::new(shape, data)?, labels, 2)
}

/// Shuffled mini-batches over one epoch. A trailing batch is kept if it has
/// at least two samples and dropped otherwise.
pub fn batches<'a>(
    dataset: &'a [LabeledSample],
    batch_size: usize,
    rng: &mut Rng,
) -> Result<impl Iterator<Item = Result<Batch>> + 'a> {
    if dataset.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    if batch_size < 2 {
        return Err(Error::Config(format!("batch size {batch_size} < 2")));
    }
    let order = epoch_order(dataset.len(), batch_size, rng);
    Ok(order.into_iter().map(move |idx| {
        let refs: Vec<&LabeledSample> = idx.iter().map(|&i| &dataset[i]).collect();
        stack(&refs)
    }))
}

/// Index groups for one shuffled epoch.
pub fn epoch_order(len: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..len).collect();
    perm.shuffle(rng);
    perm.chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Number of batches one epoch yields.
pub fn batches_per_epoch(len: usize, batch_size: usize) -> usize {
    let full = len / batch_size;
    full + usize::from(len % batch_size >= 2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            samples_per_client: 40,
            seed: 3,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
        let other = SyntheticSpec { seed: 4, ..small() };
        assert_ne!(generate(&small()).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn patterns_are_orthonormal() {
        let p = cue_patterns(&SyntheticSpec::default());
        let mut all = vec![p.shared.clone()];
        all.extend(p.personal.iter().cloned());
        for (i, a) in all.iter().enumerate() {
            for (j, b) in all.iter().enumerate() {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((dot(a, b) - expected).abs() < 1e-10, "<P{i},P{j}>");
            }
        }
    }

    #[test]
    fn no_personal_cue_gives_identical_fake_distributions() {
        let spec = SyntheticSpec {
            personal_cue_strength: 0.0,
            ..small()
        };
        let p = cue_patterns(&spec);
        let cues: Vec<Vec<f64>> = (0..spec.clients)
            .map(|k| {
                p.shared
                    .iter()
                    .zip(&p.personal[k])
                    .map(|(s, q)| spec.shared_cue_strength * s + spec.personal_cue_strength * q)
                    .collect()
            })
            .collect();
        assert!(cues.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn classes_are_balanced_and_split() {
        let data = generate(&small()).unwrap();
        for (k, client) in data.iter().enumerate() {
            assert_eq!(client.train.len(), 32);
            assert_eq!(client.test.len(), 8);
            let fakes = client.train.iter().chain(&client.test).filter(|s| s.label == 1).count();
            assert_eq!(fakes, 20);
            assert!(client.train.iter().all(|s| s.client_id == k));
        }
    }

    #[test]
    fn pixels_are_f32_representable() {
        let data = generate(&small()).unwrap();
        for v in data[0].train[0].image.data() {
            assert_eq!(f64::from(*v as f32), *v);
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let cases = [
            SyntheticSpec { noise_sigma: 0.0, ..small() },
            SyntheticSpec { train_fraction: 1.0, ..small() },
            SyntheticSpec { shared_cue_strength: -1.0, ..small() },
            SyntheticSpec { clients: 0, ..small() },
            SyntheticSpec { image_size: (1, 2, 2), clients: 4, ..small() },
        ];
        for spec in cases {
            assert!(matches!(generate(&spec), Err(Error::Config(_))), "{spec:?}");
        }
    }

    #[test]
    fn epoch_batching() {
        let mut rng = derive(0, Domain::ClientTrain, 0);
        let groups = epoch_order(100, 16, &mut rng);
        // 6 full batches plus a trailing batch of 4
        assert_eq!(groups.len(), 7);
        assert_eq!(batches_per_epoch(100, 16), 7);
        assert_eq!(groups.iter().take(6).map(Vec::len).sum::<usize>(), 96);
        let seen: HashSet<usize> = groups.iter().flatten().copied().collect();
        assert_eq!(seen.len(), 100);
        assert_eq!(epoch_order(97, 16, &mut rng).len(), 6);
        assert_eq!(batches_per_epoch(97, 16), 6);
    }

    #[test]
    fn batch_order_is_reproducible() {
        let data = generate(&small()).unwrap();
        let run = |seed| {
            let mut rng = derive(seed, Domain::ClientTrain, 0);
            batches(&data[0].train, 8, &mut rng)
                .unwrap()
                .map(|b| b.unwrap().labels)
                .collect::<Vec<_>>()
        };
        assert_eq!(run(1), run(1));
        assert_eq!(run(1).len(), 4);
    }

    #[test]
    fn batching_rejects_bad_input() {
        let mut rng = derive(0, Domain::ClientTrain, 0);
        assert!(batches(&[], 8, &mut rng).is_err());
        let data = generate(&small()).unwrap();
        assert!(batches(&data[0].train, 1, &mut rng).is_err());
    }
}
