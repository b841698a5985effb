//! Dataset assembly and SGD training loops.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{sgd_step, Graph, Tensor};
use crate::inference::scan_windows;
use crate::inference::InferenceError;
use crate::metrics::Phenotype;
use crate::nets::{NetsError, Network, NetworkKind};
use crate::volio::{crop_window, PadPolicy, Volume, VolumeError, Window};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no positive windows in the localizer dataset")]
    NoPositives,
    #[error("empty training set")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("cannot split {items} items into {k} folds")]
    BadFolds { items: usize, k: usize },
    #[error("training diverged at epoch {0}")]
    Diverged(usize),
    #[error(transparent)]
    Nets(#[from] NetsError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
}

impl From<crate::autodiff::AutodiffError> for TrainError {
    fn from(e: crate::autodiff::AutodiffError) -> Self {
        TrainError::Nets(NetsError::from(e))
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub seed: u64,
    /// Cross-entropy share of the segmentation loss; Dice gets the rest.
    pub loss_mix: f32,
    pub neg_pos_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 4,
            lr: 0.01,
            momentum: 0.9,
            seed: 0,
            loss_mix: 0.5,
            neg_pos_ratio: 3.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::BadConfig(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.loss_mix) {
            return bad("loss_mix must lie in [0, 1]");
        }
        if !(self.neg_pos_ratio > 0.0 && self.neg_pos_ratio.is_finite()) {
            return bad("neg_pos_ratio must be positive");
        }
        Ok(())
    }
}

/// A scan window of one volume with its containment label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabeledWindow {
    pub volume: usize,
    pub window: Window,
    pub positive: bool,
}

/// Fraction of ground-truth foreground inside `window`.
pub fn containment(gt: &Volume, window: &Window) -> f64 {
    let data = gt.to_f32();
    let (mut inside, mut total) = (0usize, 0usize);
    for (i, &v) in data.iter().enumerate() {
        if v != 0.0 {
            total += 1;
            inside += window.contains(gt.coords(i)) as usize;
        }
    }
    if total == 0 {
        return 0.0;
    }
    inside as f64 / total as f64
}

/// Labels a window positive when it holds at least `threshold` of the
/// ground-truth foreground.
pub fn label_windows(
    gt: &Volume,
    volume: usize,
    windows: &[Window],
    threshold: f64,
) -> Vec<LabeledWindow> {
    let dims = gt.dims();
    let data = gt.to_f32();
    // prefix counts make each window query O(1)
    let (nx, ny, nz) = (dims[0] + 1, dims[1] + 1, dims[2] + 1);
    let mut pre = vec![0u32; nx * ny * nz];
    let at = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let v = (data[gt.index(x, y, z)] != 0.0) as u32;
                pre[at(x + 1, y + 1, z + 1)] = v
                    + pre[at(x, y + 1, z + 1)]
                    + pre[at(x + 1, y, z + 1)]
                    + pre[at(x + 1, y + 1, z)]
                    - pre[at(x, y, z + 1)]
                    - pre[at(x, y + 1, z)]
                    - pre[at(x + 1, y, z)]
                    + pre[at(x, y, z)];
            }
        }
    }
    let total = pre[at(dims[0], dims[1], dims[2])] as f64;
    windows
        .iter()
        .map(|w| {
            let lo = w.offset;
            let hi: [usize; 3] = std::array::from_fn(|a| (w.offset[a] + w.size[a]).min(dims[a]));
            let inside = if (0..3).any(|a| lo[a] >= hi[a]) {
                0
            } else {
                pre[at(hi[0], hi[1], hi[2])] as i64
                    - pre[at(lo[0], hi[1], hi[2])] as i64
                    - pre[at(hi[0], lo[1], hi[2])] as i64
                    - pre[at(hi[0], hi[1], lo[2])] as i64
                    + pre[at(lo[0], lo[1], hi[2])] as i64
                    + pre[at(lo[0], hi[1], lo[2])] as i64
                    + pre[at(hi[0], lo[1], lo[2])] as i64
                    - pre[at(lo[0], lo[1], lo[2])] as i64
            };
            let positive = total > 0.0 && inside as f64 / total >= threshold;
            LabeledWindow {
                volume,
                window: *w,
                positive,
            }
        })
        .collect()
}

/// (image, mask) patch pairs for every window of a regular scan.
pub fn extract_body_patches(
    image: &Volume,
    mask: &Volume,
    window: [usize; 3],
    stride: [usize; 3],
) -> Result<Vec<(Volume, Volume)>> {
    if image.dims() != mask.dims() {
        return Err(TrainError::ShapeMismatch(format!(
            "image {:?} vs mask {:?}",
            image.dims(),
            mask.dims()
        )));
    }
    scan_windows(image.dims(), window, stride)?
        .iter()
        .map(|w| {
            Ok((
                crop_window(image, w, PadPolicy::Reject)?,
                crop_window(mask, w, PadPolicy::Reject)?,
            ))
        })
        .collect()
}

/// (image, mask) pairs for the ventricle segmenter: every scanned window
/// holding at least `threshold` of the mask, so the ventricle shows up at
/// varied offsets. When no window qualifies, the single window centered on
/// the mask centroid is used.
pub fn extract_bv_patches(
    image: &Volume,
    mask: &Volume,
    window: [usize; 3],
    stride: [usize; 3],
    threshold: f64,
) -> Result<Vec<(Volume, Volume)>> {
    if image.dims() != mask.dims() {
        return Err(TrainError::ShapeMismatch(format!(
            "image {:?} vs mask {:?}",
            image.dims(),
            mask.dims()
        )));
    }
    let windows = scan_windows(image.dims(), window, stride)?;
    let mut chosen: Vec<Window> = label_windows(mask, 0, &windows, threshold)
        .into_iter()
        .filter(|l| l.positive)
        .map(|l| l.window)
        .collect();
    if chosen.is_empty() {
        let data = mask.to_f32();
        let (mut sum, mut n) = ([0usize; 3], 0usize);
        for (i, &v) in data.iter().enumerate() {
            if v != 0.0 {
                let c = mask.coords(i);
                (0..3).for_each(|a| sum[a] += c[a]);
                n += 1;
            }
        }
        if n == 0 {
            return Err(TrainError::NoPositives);
        }
        let center = sum.map(|s| (2 * s + n) / (2 * n));
        chosen.push(Window::centered_clamped(center, window, image.dims()));
    }
    chosen
        .iter()
        .map(|w| {
            Ok((
                crop_window(image, w, PadPolicy::Reject)?,
                crop_window(mask, w, PadPolicy::Reject)?,
            ))
        })
        .collect()
}

/// One line per (epoch, split): mean loss and accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossLog {
    pub records: Vec<LossRecord>,
}

impl LossLog {
    pub fn to_text(&self) -> String {
        let mut s = String::from("epoch,split,loss,accuracy\n");
        for r in &self.records {
            writeln!(s, "{},{},{:.6},{:.6}", r.epoch, r.split, r.loss, r.accuracy).unwrap();
        }
        s
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.split == "train")
            .map(|r| r.loss)
            .collect()
    }
}

/// Supervision for one minibatch.
enum Target {
    /// One class per sample, class-weighted cross entropy.
    Classes { labels: Vec<u8>, weights: [f32; 2] },
    /// One class per voxel, `mix * CE + (1 - mix) * soft Dice`.
    Voxels { labels: Vec<u8>, mix: f32 },
}

const DICE_EPS: f32 = 1.0;

struct StepOutput {
    loss: f32,
    correct: usize,
    count: usize,
    grads: Vec<Tensor<f32>>,
}

fn train_step(net: &Network, input: Tensor<f32>, target: &Target) -> Result<StepOutput> {
    let mut g = Graph::<f32>::new();
    let params = net.bind(&mut g, true)?;
    let x = g.leaf(input, false)?;
    let logits = net.forward(&mut g, x, &params)?;
    let (root, labels) = match target {
        Target::Classes { labels, weights } => {
            (g.softmax_cross_entropy(logits, labels, weights)?, labels)
        }
        Target::Voxels { labels, mix } => {
            let ce = g.softmax_cross_entropy(logits, labels, &[1.0, 1.0])?;
            let p = g.foreground_prob(logits)?;
            let fg: Vec<f32> = labels.iter().map(|&l| l as f32).collect();
            let dice = g.soft_dice_loss(p, &fg, DICE_EPS)?;
            let a = g.scale(ce, *mix)?;
            let b = g.scale(dice, 1.0 - mix)?;
            (g.add(a, b)?, labels)
        }
    };
    let lv = g.value(logits);
    let inner: usize = lv.shape()[2..].iter().product();
    let mut correct = 0;
    for (i, &l) in labels.iter().enumerate() {
        let (n, p) = (i / inner, i % inner);
        let l0 = lv.data()[(2 * n) * inner + p];
        let l1 = lv.data()[(2 * n + 1) * inner + p];
        correct += ((l1 > l0) as u8 == l) as usize;
    }
    let loss = g.value(root).data()[0];
    let mut grads = g.backward(root)?;
    let grads = params
        .iter()
        .zip(net.params())
        .map(|(&id, p)| {
            grads
                .take(id)
                .unwrap_or_else(|| Tensor::zeros(p.tensor.shape()))
        })
        .collect();
    Ok(StepOutput {
        loss,
        correct,
        count: labels.len(),
        grads,
    })
}

/// Runs minibatch SGD. `epoch_items` picks and orders the items of an
/// epoch; `batch` turns item indices into an input and its target.
fn train_loop(
    net: &mut Network,
    cfg: &TrainConfig,
    mut epoch_items: impl FnMut(&mut ChaCha8Rng) -> Vec<usize>,
    mut batch: impl FnMut(&[usize]) -> Result<(Tensor<f32>, Target)>,
) -> Result<LossLog> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = LossLog::default();
    for epoch in 0..cfg.epochs {
        let items = epoch_items(&mut rng);
        let (mut loss_sum, mut n_samples, mut correct, mut count) =
            (0.0f64, 0usize, 0usize, 0usize);
        for chunk in items.chunks(cfg.batch_size) {
            let (input, target) = batch(chunk)?;
            let out = train_step(net, input, &target)?;
            if !out.loss.is_finite() {
                return Err(TrainError::Diverged(epoch));
            }
            sgd_step(net.params_mut(), &out.grads, cfg.lr, cfg.momentum)?;
            loss_sum += out.loss as f64 * chunk.len() as f64;
            n_samples += chunk.len();
            correct += out.correct;
            count += out.count;
        }
        log.records.push(LossRecord {
            epoch,
            split: "train".into(),
            loss: loss_sum / n_samples.max(1) as f64,
            accuracy: correct as f64 / count.max(1) as f64,
        });
    }
    Ok(log)
}

fn expect_kind(net: &Network, kind: NetworkKind) -> Result<()> {
    if net.spec().kind != kind {
        return Err(TrainError::ShapeMismatch(format!(
            "expected a {kind:?} network, got {:?}",
            net.spec().kind
        )));
    }
    Ok(())
}

/// Inverse-frequency class weights normalized so a balanced set gets 1.
pub fn class_weights(labels: &[u8]) -> [f32; 2] {
    let n = labels.len() as f32;
    let pos = labels.iter().filter(|&&l| l == 1).count() as f32;
    let neg = n - pos;
    if pos == 0.0 || neg == 0.0 {
        return [1.0, 1.0];
    }
    [n / (2.0 * neg), n / (2.0 * pos)]
}

/// Volumes and labeled windows for localizer training.
pub struct LocalizerDataset<'a> {
    pub volumes: &'a [Volume],
    pub windows: &'a [LabeledWindow],
}

/// Trains the window classifier. Each epoch draws every positive window
/// and `neg_pos_ratio` times as many negatives, then shuffles.
pub fn train_localizer(
    net: &mut Network,
    data: &LocalizerDataset,
    cfg: &TrainConfig,
) -> Result<LossLog> {
    expect_kind(net, NetworkKind::Localizer)?;
    let pos: Vec<usize> = (0..data.windows.len())
        .filter(|&i| data.windows[i].positive)
        .collect();
    let neg: Vec<usize> = (0..data.windows.len())
        .filter(|&i| !data.windows[i].positive)
        .collect();
    if pos.is_empty() {
        return Err(TrainError::NoPositives);
    }
    let n_neg = ((pos.len() as f64 * cfg.neg_pos_ratio).round() as usize).min(neg.len());
    // every epoch has the same class counts, so the weights are fixed
    let counts: Vec<u8> = std::iter::repeat_n(1, pos.len())
        .chain(std::iter::repeat_n(0, n_neg))
        .collect();
    let weights = class_weights(&counts);
    let spec = net.spec().clone();
    let size = spec.input_dims;
    train_loop(
        net,
        cfg,
        |rng| {
            let mut negs = neg.clone();
            negs.shuffle(rng);
            let mut items: Vec<usize> = pos
                .iter()
                .copied()
                .chain(negs.into_iter().take(n_neg))
                .collect();
            items.shuffle(rng);
            items
        },
        |idx| {
            let mut buf = Vec::with_capacity(idx.len() * size.iter().product::<usize>());
            for &i in idx {
                let lw = &data.windows[i];
                if lw.window.size != size {
                    return Err(TrainError::ShapeMismatch(format!(
                        "window {:?} vs input {size:?}",
                        lw.window.size
                    )));
                }
                let v = data.volumes.get(lw.volume).ok_or_else(|| {
                    TrainError::ShapeMismatch(format!(
                        "window refers to missing volume {}",
                        lw.volume
                    ))
                })?;
                buf.extend(crop_window(v, &lw.window, PadPolicy::ZeroPad)?.to_f32());
            }
            let input = Tensor::new(spec.input_shape(idx.len()).to_vec(), buf)?;
            let labels = idx
                .iter()
                .map(|&i| data.windows[i].positive as u8)
                .collect();
            Ok((input, Target::Classes { labels, weights }))
        },
    )
}

fn shuffled(n: usize) -> impl FnMut(&mut ChaCha8Rng) -> Vec<usize> {
    move |rng| {
        let mut items: Vec<usize> = (0..n).collect();
        items.shuffle(rng);
        items
    }
}

/// Trains an FCN on (image, mask) pairs with `loss_mix * CE + (1 - loss_mix) * Dice`.
pub fn train_segmenter(
    net: &mut Network,
    pairs: &[(Volume, Volume)],
    cfg: &TrainConfig,
) -> Result<LossLog> {
    expect_kind(net, NetworkKind::FcnSegmenter)?;
    if pairs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let spec = net.spec().clone();
    for (img, mask) in pairs {
        if img.dims() != spec.input_dims || mask.dims() != spec.input_dims {
            return Err(TrainError::ShapeMismatch(format!(
                "pair {:?}/{:?} vs input {:?}",
                img.dims(),
                mask.dims(),
                spec.input_dims
            )));
        }
    }
    train_loop(net, cfg, shuffled(pairs.len()), |idx| {
        let mut buf = Vec::new();
        let mut labels = Vec::new();
        for &i in idx {
            buf.extend(pairs[i].0.to_f32());
            labels.extend(pairs[i].1.to_f32().iter().map(|&v| (v != 0.0) as u8));
        }
        let input = Tensor::new(spec.input_shape(idx.len()).to_vec(), buf)?;
        Ok((
            input,
            Target::Voxels {
                labels,
                mix: cfg.loss_mix,
            },
        ))
    })
}

/// Trains the mutant classifier on canonical masks with class weights
/// inversely proportional to class frequency.
pub fn train_classifier(
    net: &mut Network,
    masks: &[Volume],
    labels: &[Phenotype],
    cfg: &TrainConfig,
) -> Result<LossLog> {
    expect_kind(net, NetworkKind::Classifier)?;
    if masks.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if masks.len() != labels.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "{} masks vs {} labels",
            masks.len(),
            labels.len()
        )));
    }
    let spec = net.spec().clone();
    if let Some(m) = masks.iter().find(|m| m.dims() != spec.input_dims) {
        return Err(TrainError::ShapeMismatch(format!(
            "mask {:?} vs input {:?}",
            m.dims(),
            spec.input_dims
        )));
    }
    let all: Vec<u8> = labels.iter().map(|l| l.index()).collect();
    let weights = class_weights(&all);
    train_loop(net, cfg, shuffled(masks.len()), |idx| {
        let buf: Vec<f32> = idx.iter().flat_map(|&i| masks[i].to_f32()).collect();
        let input = Tensor::new(spec.input_shape(idx.len()).to_vec(), buf)?;
        let labels = idx.iter().map(|&i| all[i]).collect();
        Ok((input, Target::Classes { labels, weights }))
    })
}

/// Stratified fold assignment. Items of each class, in shuffled order, are
/// dealt round-robin with the fold counter carried across classes, so fold
/// sizes and per-class counts each differ by at most one.
pub fn assign_folds(labels: &[Phenotype], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 || k > labels.len() {
        return Err(TrainError::BadFolds {
            items: labels.len(),
            k,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![0; labels.len()];
    let mut next = 0;
    for class in [Phenotype::Normal, Phenotype::Mutant] {
        let mut items: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        items.shuffle(&mut rng);
        for i in items {
            folds[i] = next % k;
            next += 1;
        }
    }
    Ok(folds)
}
