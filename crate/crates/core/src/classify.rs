//! Mutant prediction, cross validation and gradient saliency.

use std::fmt::Write as _;

use thiserror::Error;

use crate::autodiff::{Graph, Tensor};
use crate::metrics::{fmt_rate, summarize, ConfusionMatrix, Phenotype};
use crate::nets::{build, softmax2, NetsError, Network, NetworkKind, NetworkSpec};
use crate::training::{train_classifier, TrainConfig, TrainError};
use crate::volio::{Volume, VolumeError};

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("validation fold {fold} lacks the {missing} class")]
    FoldTooSmall { fold: usize, missing: &'static str },
    #[error("fold index {index} out of range for k = {k}")]
    BadFold { index: usize, k: usize },
    #[error(transparent)]
    Nets(#[from] NetsError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

impl From<crate::autodiff::AutodiffError> for ClassifyError {
    fn from(e: crate::autodiff::AutodiffError) -> Self {
        ClassifyError::Nets(NetsError::from(e))
    }
}

pub type Result<T> = std::result::Result<T, ClassifyError>;

/// Relative gradient threshold for saliency maps.
pub const SALIENCY_FRACTION: f32 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub label: Phenotype,
    pub prob_mutant: f32,
}

impl Prediction {
    /// Mutant only when the probability strictly exceeds one half.
    pub fn from_prob(prob_mutant: f32) -> Self {
        Prediction {
            label: Phenotype::from_mutant(prob_mutant > 0.5),
            prob_mutant,
        }
    }
}

fn check_input(mask: &Volume, net: &Network) -> Result<()> {
    if net.spec().kind != NetworkKind::Classifier {
        return Err(ClassifyError::ShapeMismatch(format!(
            "expected a classifier, got {:?}",
            net.spec().kind
        )));
    }
    if mask.dims() != net.spec().input_dims {
        return Err(ClassifyError::ShapeMismatch(format!(
            "mask {:?} vs classifier input {:?}",
            mask.dims(),
            net.spec().input_dims
        )));
    }
    Ok(())
}

fn input_tensor(masks: &[&Volume], net: &Network) -> Result<Tensor<f32>> {
    let data: Vec<f32> = masks.iter().flat_map(|m| m.to_f32()).collect();
    Ok(Tensor::new(
        net.spec().input_shape(masks.len()).to_vec(),
        data,
    )?)
}

pub fn predict(mask: &Volume, classifier: &Network) -> Result<Prediction> {
    Ok(predict_batch(&[mask], classifier)?[0])
}

pub fn predict_batch(masks: &[&Volume], classifier: &Network) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(masks.len());
    for chunk in masks.chunks(8) {
        for m in chunk {
            check_input(m, classifier)?;
        }
        let logits = classifier.logits(&input_tensor(chunk, classifier)?)?;
        out.extend(
            logits
                .data()
                .chunks_exact(2)
                .map(|l| Prediction::from_prob(softmax2(l[0], l[1]))),
        );
    }
    Ok(out)
}

/// Trains and applies one model per fold.
pub trait FoldTrainer {
    type Model;
    fn fit(&self, train: &[usize], fold: usize) -> Result<Self::Model>;
    fn predict(&self, model: &Self::Model, items: &[usize]) -> Result<Vec<Phenotype>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossValidation {
    pub pooled: ConfusionMatrix,
    pub fold_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    /// Held-out prediction for every item.
    pub predictions: Vec<Phenotype>,
}

impl CrossValidation {
    pub fn report(&self) -> String {
        let s = summarize(&self.pooled);
        let mut r = String::new();
        writeln!(r, "{}", self.pooled).unwrap();
        for (i, a) in self.fold_accuracy.iter().enumerate() {
            writeln!(r, "fold_{i}_accuracy,{a:.6}").unwrap();
        }
        writeln!(r, "mean_fold_accuracy,{:.6}", self.mean_accuracy).unwrap();
        writeln!(r, "pooled_accuracy,{}", fmt_rate(s.accuracy)).unwrap();
        writeln!(r, "sensitivity,{}", fmt_rate(s.sensitivity)).unwrap();
        writeln!(r, "specificity,{}", fmt_rate(s.specificity)).unwrap();
        r
    }
}

/// Runs k-fold cross validation over a fixed fold assignment.
pub fn cross_validate<T: FoldTrainer>(
    labels: &[Phenotype],
    folds: &[usize],
    k: usize,
    trainer: &T,
) -> Result<CrossValidation> {
    if folds.len() != labels.len() {
        return Err(ClassifyError::ShapeMismatch(format!(
            "{} fold indices for {} labels",
            folds.len(),
            labels.len()
        )));
    }
    if let Some(&index) = folds.iter().find(|&&f| f >= k) {
        return Err(ClassifyError::BadFold { index, k });
    }
    for fold in 0..k {
        for class in [Phenotype::Normal, Phenotype::Mutant] {
            if !(0..labels.len()).any(|i| folds[i] == fold && labels[i] == class) {
                return Err(ClassifyError::FoldTooSmall {
                    fold,
                    missing: class.as_str(),
                });
            }
        }
    }
    let mut predictions: Vec<Option<Phenotype>> = vec![None; labels.len()];
    let mut pooled = ConfusionMatrix::default();
    let mut fold_accuracy = Vec::with_capacity(k);
    for fold in 0..k {
        let train: Vec<usize> = (0..labels.len()).filter(|&i| folds[i] != fold).collect();
        let val: Vec<usize> = (0..labels.len()).filter(|&i| folds[i] == fold).collect();
        let model = trainer.fit(&train, fold)?;
        let pred = trainer.predict(&model, &val)?;
        if pred.len() != val.len() {
            return Err(ClassifyError::ShapeMismatch(format!(
                "{} predictions for {} items",
                pred.len(),
                val.len()
            )));
        }
        let mut m = ConfusionMatrix::default();
        for (&i, &p) in val.iter().zip(&pred) {
            assert!(predictions[i].is_none(), "item {i} validated twice");
            predictions[i] = Some(p);
            m.add(labels[i].is_mutant(), p.is_mutant());
        }
        fold_accuracy.push((m.tp + m.tn) as f64 / m.total() as f64);
        pooled.merge(&m);
    }
    let mean_accuracy = fold_accuracy.iter().sum::<f64>() / k as f64;
    Ok(CrossValidation {
        pooled,
        fold_accuracy,
        mean_accuracy,
        predictions: predictions
            .into_iter()
            .map(|p| p.expect("every item validated"))
            .collect(),
    })
}

/// Fold trainer for the volumetric classifier. Fold `f` builds and trains
/// with seed `seed + f`.
pub struct NetworkFoldTrainer<'a> {
    pub masks: &'a [Volume],
    pub labels: &'a [Phenotype],
    pub spec: NetworkSpec,
    pub config: TrainConfig,
}

impl FoldTrainer for NetworkFoldTrainer<'_> {
    type Model = Network;

    fn fit(&self, train: &[usize], fold: usize) -> Result<Network> {
        let seed = self.config.seed.wrapping_add(fold as u64);
        let mut net = build(&self.spec, seed)?;
        let masks: Vec<Volume> = train.iter().map(|&i| self.masks[i].clone()).collect();
        let labels: Vec<Phenotype> = train.iter().map(|&i| self.labels[i]).collect();
        let cfg = TrainConfig {
            seed,
            ..self.config.clone()
        };
        train_classifier(&mut net, &masks, &labels, &cfg)?;
        Ok(net)
    }

    fn predict(&self, model: &Network, items: &[usize]) -> Result<Vec<Phenotype>> {
        let masks: Vec<&Volume> = items.iter().map(|&i| &self.masks[i]).collect();
        Ok(predict_batch(&masks, model)?
            .into_iter()
            .map(|p| p.label)
            .collect())
    }
}

/// Binary map of voxels with `|g| >= 0.2 * max |g|`; empty when the
/// gradient vanishes.
pub fn threshold_saliency(grad: &[f32]) -> Vec<u8> {
    let gmax = grad.iter().fold(0.0f32, |m, g| m.max(g.abs()));
    if gmax == 0.0 {
        return vec![0; grad.len()];
    }
    let t = SALIENCY_FRACTION * gmax;
    grad.iter().map(|g| (g.abs() >= t) as u8).collect()
}

#[derive(Debug, Clone)]
pub struct Saliency {
    pub map: Volume,
    /// Gradient of the predicted-class logit with respect to each voxel.
    pub gradient: Vec<f32>,
    pub prediction: Prediction,
}

/// Gradient saliency of the predicted class's logit.
pub fn saliency(mask: &Volume, classifier: &Network) -> Result<Saliency> {
    check_input(mask, classifier)?;
    let mut g = Graph::<f32>::new();
    let params = classifier.bind(&mut g, false)?;
    let x = g.leaf(input_tensor(&[mask], classifier)?, true)?;
    let logits = classifier.forward(&mut g, x, &params)?;
    let l = g.value(logits).data();
    let prediction = Prediction::from_prob(softmax2(l[0], l[1]));
    let root = g.pick(logits, prediction.label.index() as usize)?;
    let grads = g.backward(root)?;
    let gradient = grads
        .get(x)
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![0.0; mask.len()]);
    let map =
        Volume::label(mask.dims(), threshold_saliency(&gradient))?.with_spacing(mask.spacing())?;
    Ok(Saliency {
        map,
        gradient,
        prediction,
    })
}

/// Centroid of the nonzero voxels of a mask, or `None` when empty.
pub fn mask_centroid(mask: &Volume) -> Option<[f64; 3]> {
    let data = mask.to_f32();
    let mut s = [0.0; 3];
    let mut n = 0usize;
    for (i, &v) in data.iter().enumerate() {
        if v != 0.0 {
            let p = mask.coords(i);
            for a in 0..3 {
                s[a] += p[a] as f64;
            }
            n += 1;
        }
    }
    (n > 0).then(|| s.map(|c| c / n as f64))
}
