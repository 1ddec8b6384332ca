//! Dataset model, synthetic benchmark generation, and file ingestion.
//!
//! A [`Recording`] is one training example: a variable-length segment
//! feature matrix (view 1), an optional fixed-length transfer vector
//! (view 2), and a multi-hot label vector. Synthetic recordings also
//! carry the true labels and per-class noise flags for diagnostics;
//! training code receives a [`TrainItem`] projection that cannot see
//! either.

mod manifest;
mod synth;

pub use manifest::{
    attach_view2_dir, load_manifest, read_feature_file, write_dataset, write_feature_file,
    write_view2_dir,
};
pub use synth::{generate_synthetic, SampleOptions, SyntheticWorld};

use crate::networks::{InputViews, N1Network, NetworkError};
use crate::tensor::{Tensor, TensorError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("recording {id}: missing feature file {path}")]
    MissingFeatureFile { id: String, path: String },
    #[error("bad feature file {path}: {detail}")]
    BadFeatureFile { path: String, detail: String },
    #[error("invalid noise model: {0}")]
    InvalidNoiseModel(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Per-class provenance of an observed positive label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseFlag {
    Clean,
    FalsePositive,
}

/// One example: segment features, optional transfer features, labels.
#[derive(Debug, Clone)]
pub struct Recording {
    pub id: String,
    /// Segment feature matrix, `[N, d1]` with N ≥ 1.
    pub view1: Tensor,
    /// Transfer feature vector, `[d2]`, present once built.
    pub view2: Option<Tensor>,
    /// Observed multi-hot labels (what retrieval produced), length C.
    pub labels: Vec<u8>,
    /// Ground-truth labels; synthetic data only, diagnostics only.
    pub true_labels: Option<Vec<u8>>,
    /// Per-class flags marking injected false positives.
    pub noise_flags: Option<Vec<NoiseFlag>>,
}

impl Recording {
    pub fn n_segments(&self) -> usize {
        self.view1.shape()[0]
    }

    pub fn label_tensor(&self) -> Tensor {
        Tensor::from_vec(self.labels.iter().map(|&l| f64::from(l)).collect())
    }

    /// Mean of the segment features over the segment axis: the "raw"
    /// fixed-length representation a transfer view competes against.
    pub fn view1_mean(&self) -> Tensor {
        let n = self.view1.shape()[0];
        let d = self.view1.shape()[1];
        let mut out = vec![0.0; d];
        for i in 0..n {
            for (o, v) in out.iter_mut().zip(&self.view1.data()[i * d..(i + 1) * d]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        Tensor::from_vec(out)
    }

    /// The projection handed to training code: no ground truth, no noise
    /// flags.
    pub fn train_item(&self) -> TrainItem<'_> {
        TrainItem {
            id: &self.id,
            view1: &self.view1,
            view2: self.view2.as_ref(),
            labels: &self.labels,
        }
    }

    fn validate(&self, num_classes: usize) -> Result<()> {
        if self.labels.len() != num_classes {
            return Err(DataError::Schema(format!(
                "recording {}: {} labels for {} classes",
                self.id,
                self.labels.len(),
                num_classes
            )));
        }
        if !self.labels.iter().any(|&l| l == 1) {
            return Err(DataError::Schema(format!(
                "recording {}: no positive label (retrieval always assigns at least one class)",
                self.id
            )));
        }
        if let (Some(truth), Some(flags)) = (&self.true_labels, &self.noise_flags) {
            for (c, (&t, &f)) in truth.iter().zip(flags).enumerate() {
                let is_fp = self.labels[c] == 1 && t == 0;
                if is_fp != (f == NoiseFlag::FalsePositive) {
                    return Err(DataError::Schema(format!(
                        "recording {}: inconsistent noise flag for class {c}",
                        self.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// View of a recording with the diagnostics fields structurally removed;
/// what [`crate::optim::train`] consumes.
#[derive(Debug, Clone, Copy)]
pub struct TrainItem<'a> {
    pub id: &'a str,
    pub view1: &'a Tensor,
    pub view2: Option<&'a Tensor>,
    pub labels: &'a [u8],
}

impl<'a> TrainItem<'a> {
    pub fn views(&self) -> InputViews<'a> {
        InputViews {
            view1: self.view1,
            view2: self.view2,
        }
    }

    pub fn label_tensor(&self) -> Tensor {
        Tensor::from_vec(self.labels.iter().map(|&l| f64::from(l)).collect())
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub recordings: Vec<Recording>,
    pub class_names: Vec<String>,
    pub split: Split,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.recordings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recordings.is_empty()
    }

    /// Training projection of every recording, in dataset order.
    pub fn train_view(&self) -> Vec<TrainItem<'_>> {
        self.recordings.iter().map(|r| r.train_item()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for r in &self.recordings {
            if !seen.insert(r.id.as_str()) {
                return Err(DataError::Schema(format!("duplicate id {}", r.id)));
            }
            r.validate(self.num_classes())?;
        }
        Ok(())
    }
}

/// Class-conditional label-noise description: for each class, the
/// fraction of recordings not containing it that get drawn into its
/// positive set anyway. False negatives are not modeled.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseModel {
    pub fp_rate: Vec<f64>,
}

impl NoiseModel {
    pub fn zero(num_classes: usize) -> NoiseModel {
        NoiseModel {
            fp_rate: vec![0.0; num_classes],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (c, &r) in self.fp_rate.iter().enumerate() {
            if !(0.0..1.0).contains(&r) {
                return Err(DataError::InvalidNoiseModel(format!(
                    "fp_rate[{c}] = {r} outside [0, 1)"
                )));
            }
        }
        Ok(())
    }
}

/// Fills in view 2 for every recording from a pretrained segment
/// network's F2 layer (eval mode). Idempotent: rebuilding overwrites
/// with identical values.
///
/// The pretrained network is expected to come from a disjoint, clean
/// pretraining dataset; nothing here can check that, only the dimension.
pub fn build_view2(pretrained: &N1Network, ds: &mut Dataset) -> Result<()> {
    let views: Vec<Tensor> = ds
        .recordings
        .par_iter()
        .map(|r| pretrained.extract_f2_eval(&r.view1))
        .collect::<std::result::Result<_, NetworkError>>()?;
    for (r, v) in ds.recordings.iter_mut().zip(views) {
        r.view2 = Some(v);
    }
    Ok(())
}
