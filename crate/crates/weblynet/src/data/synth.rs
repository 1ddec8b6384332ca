//! Synthetic "webly" benchmark generator.
//!
//! Stands in for web retrieval: latent class prototypes on the unit
//! sphere play the role of sound classes, recordings are variable-length
//! mixtures of 1-3 prototypes with additive signal noise, and observed
//! labels are the true labels plus injected per-class false positives
//! (the mislabeled-retrieval analog). True labels and noise flags are
//! kept for diagnostics only.

use super::{DataError, Dataset, NoiseFlag, NoiseModel, Recording, Result, Split};
use crate::seeding;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

const TAG_WORLD: u64 = 0x57_4F52_4C44; // "WORLD"
const TAG_PROTO: u64 = 0x50_524F_544F;
const TAG_RECORDINGS: u64 = 0x52_4543;
const TAG_NOISE: u64 = 0x4E_4F49;
const TAG_SAMPLE: u64 = 0x53_414D;

/// Prototypes may not be more aligned than this (keeps classes
/// separable but not trivially orthogonal at low dimension).
const MAX_PAIRWISE_COS: f64 = 0.5;

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; u1 in (0, 1] keeps the log finite.
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Latent generative world: class prototypes shared by every dataset
/// sampled from it. Pretraining and webly datasets drawn from one world
/// share class structure the way a large curated corpus and scraped web
/// data share the underlying sounds.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    prototypes: Vec<Vec<f64>>,
    pub class_names: Vec<String>,
    pub embed_dim: usize,
}

impl SyntheticWorld {
    pub fn generate(n_classes: usize, embed_dim: usize, seed: u64) -> SyntheticWorld {
        assert!(n_classes >= 1 && embed_dim >= 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(seed, &[TAG_PROTO]));
        let mut prototypes: Vec<Vec<f64>> = Vec::with_capacity(n_classes);
        while prototypes.len() < n_classes {
            let mut candidate: Vec<f64> = (0..embed_dim).map(|_| gaussian(&mut rng)).collect();
            let norm = candidate.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-9 {
                continue;
            }
            candidate.iter_mut().for_each(|v| *v /= norm);
            let ok = prototypes.iter().all(|p| {
                let cos: f64 = p.iter().zip(&candidate).map(|(a, b)| a * b).sum();
                cos.abs() <= MAX_PAIRWISE_COS
            });
            if ok {
                prototypes.push(candidate);
            }
        }
        let class_names = (0..n_classes).map(|c| format!("class_{c:02}")).collect();
        SyntheticWorld {
            prototypes,
            class_names,
            embed_dim,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.len()
    }

    /// Draws a dataset of recordings whose true classes come from the
    /// first `opts.num_classes` prototypes, then injects label noise.
    pub fn sample_dataset(&self, opts: &SampleOptions) -> Result<Dataset> {
        opts.validate(self)?;
        let c = opts.num_classes;
        let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(opts.seed, &[TAG_RECORDINGS]));
        let (seg_lo, seg_hi) = opts.segment_range;
        let d = self.embed_dim;
        let scale = opts.signal_noise / (d as f64).sqrt();

        let mut recordings = Vec::with_capacity(opts.n_recordings);
        for idx in 0..opts.n_recordings {
            let k = rng.random_range(1..=opts.max_cardinality.min(c));
            let mut pool: Vec<usize> = (0..c).collect();
            for j in 0..k {
                let swap = rng.random_range(j..c);
                pool.swap(j, swap);
            }
            let chosen = &pool[..k];

            let n = rng.random_range(seg_lo..=seg_hi);
            let mut view1 = vec![0.0; n * d];
            for seg in 0..n {
                // Mixture weights over the chosen classes (flat Dirichlet).
                let mut weights: Vec<f64> = (0..k)
                    .map(|_| -(1.0 - rng.random::<f64>()).ln().max(1e-12))
                    .collect();
                let total: f64 = weights.iter().sum();
                weights.iter_mut().for_each(|w| *w /= total);
                let row = &mut view1[seg * d..(seg + 1) * d];
                for (w, &class) in weights.iter().zip(chosen) {
                    for (r, p) in row.iter_mut().zip(&self.prototypes[class]) {
                        *r += w * p;
                    }
                }
                for r in row.iter_mut() {
                    *r += scale * gaussian(&mut rng);
                }
            }

            let mut true_labels = vec![0u8; c];
            for &class in chosen {
                true_labels[class] = 1;
            }
            recordings.push(Recording {
                id: format!("{}{idx:05}", opts.id_prefix),
                view1: crate::tensor::Tensor::new(vec![n, d], view1),
                view2: None,
                labels: true_labels.clone(),
                true_labels: Some(true_labels),
                noise_flags: Some(vec![NoiseFlag::Clean; c]),
            });
        }

        // Label noise: for each class, a fixed fraction of the recordings
        // that do not truly contain it get pulled into its positive set.
        for class in 0..c {
            let rate = opts.noise.fp_rate[class];
            if rate == 0.0 {
                continue;
            }
            let mut candidates: Vec<usize> = recordings
                .iter()
                .enumerate()
                .filter(|(_, r)| r.true_labels.as_ref().expect("synthetic")[class] == 0)
                .map(|(i, _)| i)
                .collect();
            let n_fp = (rate * candidates.len() as f64 + 0.5).floor() as usize;
            let mut class_rng = ChaCha8Rng::seed_from_u64(seeding::derive(
                opts.seed,
                &[TAG_NOISE, class as u64],
            ));
            candidates.shuffle(&mut class_rng);
            for &i in candidates.iter().take(n_fp) {
                recordings[i].labels[class] = 1;
                recordings[i].noise_flags.as_mut().expect("synthetic")[class] =
                    NoiseFlag::FalsePositive;
            }
        }

        let ds = Dataset {
            recordings,
            class_names: self.class_names[..c].to_vec(),
            split: opts.split,
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Knobs for one sampled dataset.
#[derive(Debug, Clone)]
pub struct SampleOptions {
    pub n_recordings: usize,
    /// Task classes: the first `num_classes` prototypes of the world.
    pub num_classes: usize,
    pub noise: NoiseModel,
    pub seed: u64,
    pub split: Split,
    /// Inclusive range of per-recording segment counts.
    pub segment_range: (usize, usize),
    /// Maximum number of true classes per recording.
    pub max_cardinality: usize,
    /// Norm of the additive Gaussian perturbation relative to the
    /// unit-norm prototypes.
    pub signal_noise: f64,
    pub embed_dim: usize,
    pub id_prefix: String,
}

impl SampleOptions {
    pub fn new(num_classes: usize, noise: NoiseModel, seed: u64) -> SampleOptions {
        SampleOptions {
            n_recordings: 0,
            num_classes,
            noise,
            seed,
            split: Split::Train,
            segment_range: (8, 24),
            max_cardinality: 3,
            signal_noise: 0.8,
            embed_dim: 128,
            id_prefix: "rec_".into(),
        }
    }

    fn validate(&self, world: &SyntheticWorld) -> Result<()> {
        self.noise.validate()?;
        if self.num_classes == 0 || self.num_classes > world.num_classes() {
            return Err(DataError::Schema(format!(
                "num_classes {} outside the world's {} classes",
                self.num_classes,
                world.num_classes()
            )));
        }
        if self.noise.fp_rate.len() != self.num_classes {
            return Err(DataError::InvalidNoiseModel(format!(
                "{} rates for {} classes",
                self.noise.fp_rate.len(),
                self.num_classes
            )));
        }
        if self.embed_dim != world.embed_dim {
            return Err(DataError::Schema(format!(
                "embed_dim {} does not match the world's {}",
                self.embed_dim, world.embed_dim
            )));
        }
        if self.segment_range.0 == 0 || self.segment_range.0 > self.segment_range.1 {
            return Err(DataError::Schema(format!(
                "bad segment range {:?}",
                self.segment_range
            )));
        }
        if self.max_cardinality == 0 {
            return Err(DataError::Schema("max_cardinality must be positive".into()));
        }
        if self.signal_noise < 0.0 {
            return Err(DataError::Schema("signal_noise must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Self-contained generator: builds a world and samples one noisy
/// dataset from it.
pub fn generate_synthetic(
    n_recordings: usize,
    num_classes: usize,
    noise: NoiseModel,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(DataError::Schema("need at least 2 classes".into()));
    }
    if n_recordings < num_classes {
        return Err(DataError::Schema(format!(
            "n_recordings {n_recordings} < num_classes {num_classes}"
        )));
    }
    let world = SyntheticWorld::generate(num_classes, 128, seeding::derive(seed, &[TAG_WORLD]));
    let opts = SampleOptions {
        n_recordings,
        seed: seeding::derive(seed, &[TAG_SAMPLE]),
        ..SampleOptions::new(num_classes, noise, seed)
    };
    world.sample_dataset(&opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_keeps_labels_equal_to_truth() {
        let ds = generate_synthetic(40, 5, NoiseModel::zero(5), 3).unwrap();
        assert_eq!(ds.len(), 40);
        for r in &ds.recordings {
            assert_eq!(&r.labels, r.true_labels.as_ref().unwrap());
            assert!(r
                .noise_flags
                .as_ref()
                .unwrap()
                .iter()
                .all(|&f| f == NoiseFlag::Clean));
        }
    }

    #[test]
    fn same_seed_reproduces_dataset() {
        let noise = NoiseModel {
            fp_rate: vec![0.3, 0.0, 0.5, 0.1],
        };
        let a = generate_synthetic(30, 4, noise.clone(), 11).unwrap();
        let b = generate_synthetic(30, 4, noise, 11).unwrap();
        for (x, y) in a.recordings.iter().zip(&b.recordings) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.view1.data(), y.view1.data());
            assert_eq!(x.labels, y.labels);
        }
    }

    #[test]
    fn fp_injection_count_matches_rate() {
        // For each seed the number of injected positives per class is
        // deterministically round(rate * candidates).
        for seed in 0..10 {
            let rate = 0.4;
            let noise = NoiseModel {
                fp_rate: vec![rate, 0.0, 0.0, 0.0, 0.0],
            };
            let ds = generate_synthetic(200, 5, noise, seed).unwrap();
            let truth_neg = ds
                .recordings
                .iter()
                .filter(|r| r.true_labels.as_ref().unwrap()[0] == 0)
                .count();
            let fp = ds
                .recordings
                .iter()
                .filter(|r| {
                    r.noise_flags.as_ref().unwrap()[0] == NoiseFlag::FalsePositive
                })
                .count();
            let expected = (rate * truth_neg as f64 + 0.5).floor() as usize;
            assert_eq!(fp, expected, "seed {seed}");
        }
    }

    #[test]
    fn fp_fraction_of_positives_matches_design_expectation() {
        // With cardinality uniform on {1,2,3} each class is truly present
        // with probability E[k]/C = 2/C; the expected fraction of
        // observed positives that are false is
        // rate*(1-p) / (p + rate*(1-p)). Monte-Carlo over seeds.
        let c = 4;
        let rate = 0.5;
        let p = 2.0 / c as f64;
        let expected = rate * (1.0 - p) / (p + rate * (1.0 - p));
        let mut total_pos = 0usize;
        let mut total_fp = 0usize;
        for seed in 0..20 {
            let noise = NoiseModel {
                fp_rate: vec![rate; c],
            };
            let ds = generate_synthetic(150, c, noise, 1000 + seed).unwrap();
            for r in &ds.recordings {
                for class in 0..c {
                    if r.labels[class] == 1 {
                        total_pos += 1;
                        if r.noise_flags.as_ref().unwrap()[class] == NoiseFlag::FalsePositive {
                            total_fp += 1;
                        }
                    }
                }
            }
        }
        let observed = total_fp as f64 / total_pos as f64;
        assert!(
            (observed - expected).abs() < 0.03,
            "observed {observed:.3} vs expected {expected:.3}"
        );
    }

    #[test]
    fn segment_counts_stay_in_range() {
        let ds = generate_synthetic(50, 3, NoiseModel::zero(3), 21).unwrap();
        for r in &ds.recordings {
            let n = r.n_segments();
            assert!((8..=24).contains(&n));
            assert_eq!(r.view1.shape()[1], 128);
        }
    }

    #[test]
    fn world_prototypes_respect_angle_floor() {
        let w = SyntheticWorld::generate(10, 64, 5);
        for i in 0..10 {
            for j in (i + 1)..10 {
                let cos: f64 = w.prototypes[i]
                    .iter()
                    .zip(&w.prototypes[j])
                    .map(|(a, b)| a * b)
                    .sum();
                assert!(cos.abs() <= MAX_PAIRWISE_COS + 1e-12);
            }
        }
    }

    #[test]
    fn preconditions_enforced() {
        assert!(generate_synthetic(10, 1, NoiseModel::zero(1), 0).is_err());
        assert!(generate_synthetic(2, 5, NoiseModel::zero(5), 0).is_err());
        let bad = NoiseModel {
            fp_rate: vec![1.0, 0.0],
        };
        assert!(generate_synthetic(10, 2, bad, 0).is_err());
    }
}
