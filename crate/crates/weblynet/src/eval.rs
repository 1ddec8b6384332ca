//! Per-class average precision and MAP reports.
//!
//! AP is non-interpolated: the mean of precision@k over the ranks k of
//! relevant items under a descending-score ordering, ties broken by
//! stable original order. Classes with no positive test recording have
//! undefined AP; they are excluded from the MAP with the exclusion
//! counted in the report.

use crate::data::{Dataset, TrainItem};
use crate::optim::{self, TrainedSystem, Which};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("average precision needs at least one relevant item")]
    NoRelevantItems,
    #[error("scores and relevance have different lengths ({scores} vs {relevance})")]
    LengthMismatch { scores: usize, relevance: usize },
    #[error("no class has a positive test recording; MAP undefined")]
    NoScorableClass,
    #[error(transparent)]
    Train(#[from] optim::TrainError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Non-interpolated AP of one ranking: `(1/R) Σ precision@k` over the
/// ranks of relevant items, descending scores, stable ties.
pub fn average_precision(scores: &[f64], relevance: &[u8]) -> Result<f64> {
    if scores.len() != relevance.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            relevance: relevance.len(),
        });
    }
    let total_relevant = relevance.iter().filter(|&&r| r == 1).count();
    if total_relevant == 0 {
        return Err(EvalError::NoRelevantItems);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Stable sort keeps original order among tied scores.
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("scores are not NaN"));
    let mut hits = 0usize;
    let mut sum_precision = 0.0;
    for (rank0, &idx) in order.iter().enumerate() {
        if relevance[idx] == 1 {
            hits += 1;
            sum_precision += hits as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(sum_precision / total_relevant as f64)
}

/// Evaluation of one system's per-class rankings over a test set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub system_name: String,
    /// `(class name, AP)` for every scorable class, in class order.
    pub per_class_ap: Vec<(String, f64)>,
    /// Arithmetic mean of the per-class APs.
    pub map: f64,
    pub n_test: usize,
    /// Classes excluded because the test set has no positive for them.
    pub skipped_classes: Vec<String>,
}

impl EvalReport {
    pub fn ap_for(&self, class: &str) -> Option<f64> {
        self.per_class_ap
            .iter()
            .find(|(name, _)| name == class)
            .map(|&(_, ap)| ap)
    }

    /// CSV with one row per class and a final MAP summary row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,ap\n");
        for (name, ap) in &self.per_class_ap {
            out.push_str(&format!("{name},{ap:.6}\n"));
        }
        out.push_str(&format!("MAP,{:.6}\n", self.map));
        out
    }
}

/// Scores every test recording with `predict(..., which)` and computes
/// per-class AP against the test labels plus their mean.
pub fn evaluate(
    system: &TrainedSystem,
    test: &Dataset,
    which: Which,
    system_name: &str,
) -> Result<EvalReport> {
    let items: Vec<TrainItem<'_>> = test.train_view();
    let scores = score_items(system, &items, which)?;
    report_from_scores(&scores, test, system_name)
}

/// Score matrix for a list of recordings: row per recording, column per
/// class. Split out so reports can be recomputed from stored scores.
pub fn score_items(
    system: &TrainedSystem,
    items: &[TrainItem<'_>],
    which: Which,
) -> Result<Vec<Vec<f64>>> {
    items
        .par_iter()
        .map(|item| {
            optim::predict_item(system, item, which)
                .map(crate::tensor::Tensor::into_data)
                .map_err(EvalError::from)
        })
        .collect()
}

pub fn report_from_scores(
    scores: &[Vec<f64>],
    test: &Dataset,
    system_name: &str,
) -> Result<EvalReport> {
    let c = test.num_classes();
    let mut per_class_ap = Vec::new();
    let mut skipped = Vec::new();
    for class in 0..c {
        let class_scores: Vec<f64> = scores.iter().map(|s| s[class]).collect();
        let relevance: Vec<u8> = test.recordings.iter().map(|r| r.labels[class]).collect();
        match average_precision(&class_scores, &relevance) {
            Ok(ap) => per_class_ap.push((test.class_names[class].clone(), ap)),
            Err(EvalError::NoRelevantItems) => skipped.push(test.class_names[class].clone()),
            Err(e) => return Err(e),
        }
    }
    if per_class_ap.is_empty() {
        return Err(EvalError::NoScorableClass);
    }
    let map = per_class_ap.iter().map(|&(_, ap)| ap).sum::<f64>() / per_class_ap.len() as f64;
    Ok(EvalReport {
        system_name: system_name.to_string(),
        per_class_ap,
        map,
        n_test: test.len(),
        skipped_classes: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, NoiseModel};
    use crate::networks::{AnyNetwork, N2Network, N2Spec, Scale};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Straight-from-definition oracle: precision@k recomputed from
    /// scratch for every rank (quadratic, no shared state with the
    /// implementation).
    fn ap_bruteforce(scores: &[f64], relevance: &[u8]) -> f64 {
        let n = scores.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
        let r: usize = relevance.iter().map(|&x| x as usize).sum();
        let mut total = 0.0;
        for k in 1..=n {
            let idx = order[k - 1];
            if relevance[idx] == 1 {
                let rel_at_k = order[..k].iter().filter(|&&i| relevance[i] == 1).count();
                total += rel_at_k as f64 / k as f64;
            }
        }
        total / r as f64
    }

    #[test]
    fn worked_example_two_of_three() {
        // Relevant at ranks 1 and 3: (1/2)(1/1 + 2/3) = 0.8333...
        let scores = [0.9, 0.5, 0.4];
        let relevance = [1, 0, 1];
        let ap = average_precision(&scores, &relevance).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(ap, ap_bruteforce(&scores, &relevance));
    }

    #[test]
    fn all_relevant_is_one() {
        let scores = [0.1, 0.9, 0.5, 0.3];
        let relevance = [1, 1, 1, 1];
        assert_eq!(average_precision(&scores, &relevance).unwrap(), 1.0);
    }

    #[test]
    fn single_relevant_ranked_last() {
        let n = 7;
        let scores: Vec<f64> = (0..n).map(|i| (n - i) as f64).collect();
        let mut relevance = vec![0u8; n];
        relevance[n - 1] = 1;
        let ap = average_precision(&scores, &relevance).unwrap();
        assert!((ap - 1.0 / n as f64).abs() < 1e-15);
    }

    #[test]
    fn no_relevant_items_is_an_error() {
        assert!(matches!(
            average_precision(&[0.4, 0.2], &[0, 0]),
            Err(EvalError::NoRelevantItems)
        ));
    }

    #[test]
    fn matches_bruteforce_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        for _ in 0..1000 {
            let n = rng.random_range(1..=50);
            let scores: Vec<f64> = (0..n)
                .map(|_| {
                    // Coarse grid to provoke ties.
                    (rng.random_range(0..10) as f64) / 10.0
                })
                .collect();
            let mut relevance: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
            if relevance.iter().all(|&r| r == 0) {
                relevance[rng.random_range(0..n)] = 1;
            }
            let fast = average_precision(&scores, &relevance).unwrap();
            let slow = ap_bruteforce(&scores, &relevance);
            assert_eq!(fast, slow);
        }
    }

    #[test]
    fn invariant_under_monotone_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let n = rng.random_range(2..30);
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut relevance: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
            if relevance.iter().all(|&r| r == 0) {
                relevance[0] = 1;
            }
            let base = average_precision(&scores, &relevance).unwrap();
            let squashed: Vec<f64> = scores.iter().map(|&s| 1.0 / (1.0 + (-3.0 * s).exp())).collect();
            let transformed = average_precision(&squashed, &relevance).unwrap();
            assert_eq!(base, transformed);
        }
    }

    #[test]
    fn random_scorer_ap_approaches_class_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 200;
        let relevance: Vec<u8> = (0..n).map(|i| (i % 2 == 0) as u8).collect(); // prior 0.5
        let mut total = 0.0;
        let trials = 300;
        for _ in 0..trials {
            let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            total += average_precision(&scores, &relevance).unwrap();
        }
        let mean = total / trials as f64;
        assert!((mean - 0.5).abs() < 0.03, "mean {mean}");
    }

    fn scored_dataset() -> Dataset {
        let mut ds = generate_synthetic(20, 3, NoiseModel::zero(3), 5).unwrap();
        for r in &mut ds.recordings {
            r.view2 = Some(r.view1_mean());
        }
        ds
    }

    #[test]
    fn perfect_scorer_has_map_one() {
        let ds = scored_dataset();
        let scores: Vec<Vec<f64>> = ds
            .recordings
            .iter()
            .map(|r| r.labels.iter().map(|&l| f64::from(l)).collect())
            .collect();
        let report = report_from_scores(&scores, &ds, "oracle").unwrap();
        assert_eq!(report.map, 1.0);
        assert!(report.skipped_classes.is_empty());
    }

    #[test]
    fn map_is_mean_of_per_class_aps() {
        let ds = scored_dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let scores: Vec<Vec<f64>> = ds
            .recordings
            .iter()
            .map(|_| (0..3).map(|_| rng.random::<f64>()).collect())
            .collect();
        let report = report_from_scores(&scores, &ds, "noise").unwrap();
        let mean = report.per_class_ap.iter().map(|&(_, a)| a).sum::<f64>()
            / report.per_class_ap.len() as f64;
        assert_eq!(report.map, mean);
    }

    #[test]
    fn class_without_positives_is_skipped_with_count() {
        let mut ds = scored_dataset();
        // Erase class 2 positives (keep label vectors non-empty).
        for r in &mut ds.recordings {
            if r.labels[2] == 1 {
                r.labels[2] = 0;
                r.labels[0] = 1;
            }
            r.true_labels = None;
            r.noise_flags = None;
        }
        let scores: Vec<Vec<f64>> = ds
            .recordings
            .iter()
            .map(|r| r.labels.iter().map(|&l| f64::from(l)).collect())
            .collect();
        let report = report_from_scores(&scores, &ds, "sys").unwrap();
        assert_eq!(report.skipped_classes, vec!["class_02".to_string()]);
        assert_eq!(report.per_class_ap.len(), 2);
    }

    #[test]
    fn evaluate_average_of_identical_networks_equals_single() {
        let ds = scored_dataset();
        let spec = N2Spec {
            hidden: [6, 5, 4],
            dropout_p: 0.0,
            num_classes: 3,
            input_dim: 128,
            width_scale: Scale::ONE,
        };
        let net = AnyNetwork::N2(N2Network::init(spec, 77).unwrap());
        let system = TrainedSystem {
            networks: vec![net.clone(), net],
        };
        let single = evaluate(&system, &ds, Which::Network(0), "n1").unwrap();
        let avg = evaluate(&system, &ds, Which::Average, "avg").unwrap();
        assert_eq!(single.map, avg.map);
        assert_eq!(single.per_class_ap, avg.per_class_ap);
    }

    #[test]
    fn csv_has_class_rows_and_summary() {
        let ds = scored_dataset();
        let scores: Vec<Vec<f64>> = ds
            .recordings
            .iter()
            .map(|r| r.labels.iter().map(|&l| f64::from(l)).collect())
            .collect();
        let report = report_from_scores(&scores, &ds, "oracle").unwrap();
        let csv = report.to_csv();
        assert!(csv.starts_with("class,ap\n"));
        assert!(csv.contains("class_00,"));
        assert!(csv.trim_end().ends_with("MAP,1.000000"));
    }
}
