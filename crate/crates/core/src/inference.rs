//! Sliding-window localization, patch segmentation and overlap blending.

use thiserror::Error;

use crate::autodiff::Tensor;
use crate::nets::{softmax2, NetsError, Network, NetworkKind};
use crate::volio::{crop_window, paste_window, Dtype, PadPolicy, Volume, VolumeError, Window};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("window {window:?} does not fit volume {dims:?}")]
    WindowTooLarge {
        window: [usize; 3],
        dims: [usize; 3],
    },
    #[error("stride must be positive, got {0:?}")]
    BadStride([usize; 3]),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("voxel {0:?} is not covered by any window")]
    UncoveredVoxel([usize; 3]),
    #[error(transparent)]
    Nets(#[from] NetsError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

pub type Result<T> = std::result::Result<T, InferenceError>;

/// Windows evaluated per network call.
const BATCH: usize = 4;

/// Per-voxel foreground probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub dims: [usize; 3],
    pub values: Vec<f32>,
}

impl ProbabilityMap {
    pub fn new(dims: [usize; 3], values: Vec<f32>) -> Result<Self> {
        if values.len() != dims.iter().product::<usize>() {
            return Err(InferenceError::ShapeMismatch(format!(
                "{} values for dims {dims:?}",
                values.len()
            )));
        }
        Ok(ProbabilityMap { dims, values })
    }

    pub fn constant(dims: [usize; 3], value: f32) -> Self {
        ProbabilityMap {
            dims,
            values: vec![value; dims.iter().product()],
        }
    }

    pub fn to_volume(&self) -> Result<Volume> {
        Ok(Volume::scalar(self.dims, self.values.clone())?)
    }
}

/// Per-axis window offsets `0, s, 2s, ...` plus one flush with the far edge.
/// A stride above the window size is reduced to it so no voxel is skipped.
pub fn axis_offsets(dim: usize, window: usize, stride: usize) -> Vec<usize> {
    let last = dim - window;
    let mut v: Vec<usize> = (0..=last).step_by(stride.min(window)).collect();
    if *v.last().unwrap() != last {
        v.push(last);
    }
    v
}

/// All windows of a regular scan, x varying fastest.
pub fn scan_windows(
    vol_dims: [usize; 3],
    window: [usize; 3],
    stride: [usize; 3],
) -> Result<Vec<Window>> {
    if (0..3).any(|a| window[a] == 0 || window[a] > vol_dims[a]) {
        return Err(InferenceError::WindowTooLarge {
            window,
            dims: vol_dims,
        });
    }
    if stride.contains(&0) {
        return Err(InferenceError::BadStride(stride));
    }
    let o: Vec<Vec<usize>> = (0..3)
        .map(|a| axis_offsets(vol_dims[a], window[a], stride[a]))
        .collect();
    let mut out = Vec::with_capacity(o[0].len() * o[1].len() * o[2].len());
    for &z in &o[2] {
        for &y in &o[1] {
            for &x in &o[0] {
                out.push(Window::new([x, y, z], window));
            }
        }
    }
    Ok(out)
}

/// Probability that each window contains the ventricle.
pub trait WindowScorer {
    fn window_size(&self) -> [usize; 3];
    fn score(&self, vol: &Volume, windows: &[Window]) -> Result<Vec<f32>>;
}

/// Foreground probability maps for windows of a volume.
pub trait PatchSegmenter {
    fn window_size(&self) -> [usize; 3];
    fn segment(&self, vol: &Volume, windows: &[Window]) -> Result<Vec<ProbabilityMap>>;
}

fn expect_kind(net: &Network, kind: NetworkKind) -> Result<()> {
    if net.spec().kind != kind {
        return Err(InferenceError::ShapeMismatch(format!(
            "expected a {kind:?} network, got {:?}",
            net.spec().kind
        )));
    }
    Ok(())
}

/// Stacks windows of `vol` into `[n, 1, z, y, x]` batches and runs the network.
fn batched_logits(net: &Network, vol: &Volume, windows: &[Window]) -> Result<Vec<Tensor<f32>>> {
    let size = net.spec().input_dims;
    let mut out = Vec::new();
    for chunk in windows.chunks(BATCH) {
        let mut data = Vec::with_capacity(chunk.len() * size.iter().product::<usize>());
        for w in chunk {
            if w.size != size {
                return Err(InferenceError::ShapeMismatch(format!(
                    "window {:?} vs network input {size:?}",
                    w.size
                )));
            }
            data.extend(crop_window(vol, w, PadPolicy::ZeroPad)?.to_f32());
        }
        let shape = net.spec().input_shape(chunk.len()).to_vec();
        let input = Tensor::new(shape, data).map_err(NetsError::from)?;
        out.push(net.logits(&input)?);
    }
    Ok(out)
}

impl WindowScorer for Network {
    fn window_size(&self) -> [usize; 3] {
        self.spec().input_dims
    }

    fn score(&self, vol: &Volume, windows: &[Window]) -> Result<Vec<f32>> {
        expect_kind(self, NetworkKind::Localizer)?;
        let mut probs = Vec::with_capacity(windows.len());
        for logits in batched_logits(self, vol, windows)? {
            probs.extend(logits.data().chunks_exact(2).map(|l| softmax2(l[0], l[1])));
        }
        Ok(probs)
    }
}

impl PatchSegmenter for Network {
    fn window_size(&self) -> [usize; 3] {
        self.spec().input_dims
    }

    fn segment(&self, vol: &Volume, windows: &[Window]) -> Result<Vec<ProbabilityMap>> {
        expect_kind(self, NetworkKind::FcnSegmenter)?;
        let dims = self.spec().input_dims;
        let inner: usize = dims.iter().product();
        let mut maps = Vec::with_capacity(windows.len());
        for logits in batched_logits(self, vol, windows)? {
            for sample in logits.data().chunks_exact(2 * inner) {
                let (bg, fg) = sample.split_at(inner);
                let values = bg.iter().zip(fg).map(|(&a, &b)| softmax2(a, b)).collect();
                maps.push(ProbabilityMap::new(dims, values)?);
            }
        }
        Ok(maps)
    }
}

/// Foreground probability of a single patch whose dims equal the network input.
pub fn segment_window(patch: &Volume, fcn: &Network) -> Result<ProbabilityMap> {
    let w = Window::new([0; 3], patch.dims());
    let mut maps = fcn.segment(patch, &[w])?;
    Ok(maps.pop().expect("one map per window"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationResult {
    pub center: [usize; 3],
    pub window: Window,
    pub positive_count: usize,
    pub max_prob: f32,
    /// No window scored positive; `window` is the highest-scoring one.
    pub fallback: bool,
}

/// Mean of integer points, rounded half-down per axis.
pub fn mean_center(points: &[[usize; 3]]) -> [usize; 3] {
    let n = points.len() as i64;
    std::array::from_fn(|a| {
        let s: i64 = points.iter().map(|p| p[a] as i64).sum();
        // ceil(s / n - 1/2) = ceil((2s - n) / 2n)
        let num = 2 * s - n;
        let r = -((-num).div_euclid(2 * n));
        r.max(0) as usize
    })
}

/// Classifies every scanned window and centers the detection on the mean
/// center of the positive windows (probability > 0.5).
pub fn localize_bv(
    vol: &Volume,
    scorer: &dyn WindowScorer,
    stride: [usize; 3],
) -> Result<LocalizationResult> {
    let size = scorer.window_size();
    let windows = scan_windows(vol.dims(), size, stride)?;
    let probs = scorer.score(vol, &windows)?;
    if probs.len() != windows.len() {
        return Err(InferenceError::ShapeMismatch(format!(
            "{} scores for {} windows",
            probs.len(),
            windows.len()
        )));
    }
    let positives: Vec<[usize; 3]> = windows
        .iter()
        .zip(&probs)
        .filter(|(_, &p)| p > 0.5)
        .map(|(w, _)| w.center())
        .collect();
    // first maximum in scan order
    let (best, max_prob) =
        probs
            .iter()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |(bi, bp), (i, &p)| {
                if p > bp {
                    (i, p)
                } else {
                    (bi, bp)
                }
            });
    if positives.is_empty() {
        return Ok(LocalizationResult {
            center: windows[best].center(),
            window: windows[best],
            positive_count: 0,
            max_prob,
            fallback: true,
        });
    }
    let center = mean_center(&positives);
    Ok(LocalizationResult {
        center,
        window: Window::centered_clamped(center, size, vol.dims()),
        positive_count: positives.len(),
        max_prob,
        fallback: false,
    })
}

/// Per-axis tent weight `max(1 - |2(p + 0.5)/W - 1|, 0.05)`.
pub fn tent_weight_1d(size: usize) -> Vec<f64> {
    // evaluated on the nearer half so mirrored positions match bit-for-bit
    (0..size)
        .map(|p| {
            let q = p.min(size - 1 - p) as f64;
            (1.0 - (2.0 * (q + 0.5) / size as f64 - 1.0).abs()).max(0.05)
        })
        .collect()
}

/// Separable center-heavy weights over a window, x fastest.
pub fn tent_weight(size: [usize; 3]) -> Vec<f64> {
    let [wx, wy, wz] = size.map(tent_weight_1d);
    let mut out = Vec::with_capacity(size.iter().product());
    for &z in &wz {
        for &y in &wy {
            for &x in &wx {
                out.push(x * y * z);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BlendMode {
    #[default]
    Weighted,
    Uniform,
}

impl BlendMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "weighted" => Some(BlendMode::Weighted),
            "uniform" => Some(BlendMode::Uniform),
            _ => None,
        }
    }

    fn weights(self, size: [usize; 3]) -> Vec<f64> {
        match self {
            BlendMode::Weighted => tent_weight(size),
            BlendMode::Uniform => vec![1.0; size.iter().product()],
        }
    }
}

fn for_window_voxels(dims: [usize; 3], w: &Window, mut f: impl FnMut(usize, usize)) {
    let [sx, sy, sz] = w.size;
    let mut k = 0;
    for z in 0..sz {
        for y in 0..sy {
            let row = w.offset[0] + dims[0] * (w.offset[1] + y + dims[1] * (w.offset[2] + z));
            for x in 0..sx {
                f(row + x, k);
                k += 1;
            }
        }
    }
}

/// Sum of blending weights per voxel over `windows`.
pub fn weight_sum(vol_dims: [usize; 3], windows: &[Window], mode: BlendMode) -> Vec<f64> {
    let mut den = vec![0.0; vol_dims.iter().product()];
    let mut cache: Option<([usize; 3], Vec<f64>)> = None;
    for w in windows {
        if cache.as_ref().map(|c| c.0) != Some(w.size) {
            cache = Some((w.size, mode.weights(w.size)));
        }
        let wt = &cache.as_ref().unwrap().1;
        for_window_voxels(vol_dims, w, |i, k| den[i] += wt[k]);
    }
    den
}

/// Weighted average of overlapping window predictions, accumulated in
/// window order.
pub fn blend_predictions(
    vol_dims: [usize; 3],
    preds: &[(Window, ProbabilityMap)],
    mode: BlendMode,
) -> Result<ProbabilityMap> {
    let n: usize = vol_dims.iter().product();
    let mut num = vec![0.0f64; n];
    let mut den = vec![0.0f64; n];
    let mut cache: Option<([usize; 3], Vec<f64>)> = None;
    for (w, map) in preds {
        if !w.fits(vol_dims) || map.dims != w.size {
            return Err(InferenceError::ShapeMismatch(format!(
                "window {w:?} with map {:?} in volume {vol_dims:?}",
                map.dims
            )));
        }
        if cache.as_ref().map(|c| c.0) != Some(w.size) {
            cache = Some((w.size, mode.weights(w.size)));
        }
        let wt = &cache.as_ref().unwrap().1;
        for_window_voxels(vol_dims, w, |i, k| {
            num[i] += wt[k] * map.values[k] as f64;
            den[i] += wt[k];
        });
    }
    let mut values = Vec::with_capacity(n);
    for (i, (&a, &b)) in num.iter().zip(&den).enumerate() {
        if b == 0.0 {
            let [x, y] = [i % vol_dims[0], (i / vol_dims[0]) % vol_dims[1]];
            return Err(InferenceError::UncoveredVoxel([
                x,
                y,
                i / (vol_dims[0] * vol_dims[1]),
            ]));
        }
        values.push((a / b) as f32);
    }
    ProbabilityMap::new(vol_dims, values)
}

/// Foreground where probability exceeds `threshold` (strictly); optionally
/// keeps only the largest 6-connected component.
pub fn binarize(
    map: &ProbabilityMap,
    threshold: f32,
    keep_largest_component: bool,
) -> Result<Volume> {
    let mut mask: Vec<u8> = map.values.iter().map(|&p| (p > threshold) as u8).collect();
    if keep_largest_component {
        mask = largest_component(&mask, map.dims);
    }
    Ok(Volume::label(map.dims, mask)?)
}

/// Largest 6-connected foreground component; ties go to the component
/// reached first in scan order.
pub fn largest_component(mask: &[u8], dims: [usize; 3]) -> Vec<u8> {
    let mut comp = vec![0u32; mask.len()];
    let mut best = (0u32, 0usize);
    let mut next = 0u32;
    let mut stack = Vec::new();
    let (sx, sxy) = (dims[0], dims[0] * dims[1]);
    for start in 0..mask.len() {
        if mask[start] == 0 || comp[start] != 0 {
            continue;
        }
        next += 1;
        comp[start] = next;
        stack.push(start);
        let mut size = 0;
        while let Some(i) = stack.pop() {
            size += 1;
            let (x, y, z) = (i % sx, (i / sx) % dims[1], i / sxy);
            let mut visit = |j: usize| {
                if mask[j] != 0 && comp[j] == 0 {
                    comp[j] = next;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < dims[0] {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - sx);
            }
            if y + 1 < dims[1] {
                visit(i + sx);
            }
            if z > 0 {
                visit(i - sxy);
            }
            if z + 1 < dims[2] {
                visit(i + sxy);
            }
        }
        if size > best.1 {
            best = (next, size);
        }
    }
    comp.iter()
        .map(|&c| (c != 0 && c == best.0) as u8)
        .collect()
}

/// Localizes the ventricle, segments the detected window and pastes the
/// mask into an empty full-size volume. `vol` must already be normalized.
pub fn segment_bv(
    vol: &Volume,
    localizer: &dyn WindowScorer,
    fcn: &dyn PatchSegmenter,
    stride: [usize; 3],
    keep_largest_component: bool,
) -> Result<(Volume, LocalizationResult)> {
    let loc = localize_bv(vol, localizer, stride)?;
    let window = Window::centered_clamped(loc.center, fcn.window_size(), vol.dims());
    let map = fcn
        .segment(vol, &[window])?
        .pop()
        .ok_or_else(|| InferenceError::ShapeMismatch("segmenter returned no map".into()))?;
    let patch = binarize(&map, 0.5, keep_largest_component)?;
    let mut out = Volume::zeros(vol.dims(), Dtype::Label8)?;
    paste_window(&mut out, &patch, window.offset)?;
    Ok((out, loc))
}

/// Segments every scanned window and blends the overlapping predictions.
/// `vol` must already be normalized.
pub fn segment_body(
    vol: &Volume,
    fcn: &dyn PatchSegmenter,
    stride: [usize; 3],
    mode: BlendMode,
) -> Result<Volume> {
    let map = body_probability(vol, fcn, stride, mode)?;
    binarize(&map, 0.5, false)
}

pub fn body_probability(
    vol: &Volume,
    fcn: &dyn PatchSegmenter,
    stride: [usize; 3],
    mode: BlendMode,
) -> Result<ProbabilityMap> {
    let windows = scan_windows(vol.dims(), fcn.window_size(), stride)?;
    let maps = fcn.segment(vol, &windows)?;
    let preds: Vec<(Window, ProbabilityMap)> = windows.into_iter().zip(maps).collect();
    blend_predictions(vol.dims(), &preds, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{build, NetworkSpec};
    use proptest::prelude::*;

    /// Scores windows whose center is in a fixed set as positive.
    struct CenterStub {
        size: [usize; 3],
        positive: Vec<[usize; 3]>,
        fallback_prob: Box<dyn Fn(&Window) -> f32>,
    }

    impl WindowScorer for CenterStub {
        fn window_size(&self) -> [usize; 3] {
            self.size
        }
        fn score(&self, _: &Volume, windows: &[Window]) -> Result<Vec<f32>> {
            Ok(windows
                .iter()
                .map(|w| {
                    if self.positive.contains(&w.center()) {
                        0.9
                    } else {
                        (self.fallback_prob)(w)
                    }
                })
                .collect())
        }
    }

    struct ConstSeg([usize; 3], f32);

    impl PatchSegmenter for ConstSeg {
        fn window_size(&self) -> [usize; 3] {
            self.0
        }
        fn segment(&self, _: &Volume, windows: &[Window]) -> Result<Vec<ProbabilityMap>> {
            Ok(windows
                .iter()
                .map(|w| ProbabilityMap::constant(w.size, self.1))
                .collect())
        }
    }

    fn blank(dims: [usize; 3]) -> Volume {
        Volume::zeros(dims, Dtype::Scalar32).unwrap()
    }

    #[test]
    fn degenerate_scan_is_one_window() {
        let w = scan_windows([8, 8, 8], [8, 8, 8], [3, 5, 7]).unwrap();
        assert_eq!(w, vec![Window::new([0; 3], [8; 3])]);
    }

    #[test]
    fn flush_final_offset() {
        assert_eq!(axis_offsets(10, 8, 4), vec![0, 2]);
        assert_eq!(axis_offsets(16, 8, 4), vec![0, 4, 8]);
    }

    #[test]
    fn scan_rejects_bad_inputs() {
        assert!(matches!(
            scan_windows([8, 8, 8], [9, 8, 8], [1; 3]),
            Err(InferenceError::WindowTooLarge { .. })
        ));
        assert!(matches!(
            scan_windows([8, 8, 8], [4; 3], [0, 1, 1]),
            Err(InferenceError::BadStride(_))
        ));
    }

    #[test]
    fn two_positive_centers_average() {
        let stub = CenterStub {
            size: [8; 3],
            positive: vec![[10, 10, 10], [30, 10, 10]],
            fallback_prob: Box::new(|_| 0.1),
        };
        let r = localize_bv(&blank([40, 24, 24]), &stub, [2; 3]).unwrap();
        assert_eq!(r.center, [20, 10, 10]);
        assert_eq!(r.positive_count, 2);
        assert!(!r.fallback);
        assert_eq!(r.window, Window::new([16, 6, 6], [8; 3]));
    }

    #[test]
    fn all_positive_gives_scan_centroid() {
        let stub = CenterStub {
            size: [4; 3],
            positive: vec![],
            fallback_prob: Box::new(|_| 0.7),
        };
        let r = localize_bv(&blank([12, 12, 12]), &stub, [4; 3]).unwrap();
        // offsets 0, 4, 8 -> centers 2, 6, 10
        assert_eq!(r.center, [6, 6, 6]);
        assert_eq!(r.positive_count, 27);
    }

    #[test]
    fn no_positive_falls_back_to_max() {
        let stub = CenterStub {
            size: [4; 3],
            positive: vec![],
            fallback_prob: Box::new(|w| if w.offset == [4, 0, 8] { 0.4 } else { 0.1 }),
        };
        let r = localize_bv(&blank([12, 12, 12]), &stub, [4; 3]).unwrap();
        assert!(r.fallback);
        assert_eq!(r.window.offset, [4, 0, 8]);
        assert_eq!(r.max_prob, 0.4);
    }

    #[test]
    fn half_down_rounding() {
        assert_eq!(mean_center(&[[1, 0, 0], [2, 0, 0]]), [1, 0, 0]);
        assert_eq!(mean_center(&[[1, 0, 0], [2, 0, 0], [2, 0, 0]]), [2, 0, 0]);
        assert_eq!(mean_center(&[[0, 0, 0], [1, 0, 0]]), [0, 0, 0]);
    }

    #[test]
    fn tent_values() {
        assert_eq!(tent_weight_1d(4), vec![0.25, 0.75, 0.75, 0.25]);
        let w = tent_weight([5, 4, 3]);
        let max = w.iter().cloned().fold(0.0, f64::max);
        // center voxel (2, 1..=2, 1)
        assert_eq!(w[2 + 5 * (1 + 4 * 1)], max);
        assert!(w.iter().all(|&v| v > 0.0));
        let idx = |x: usize, y: usize, z: usize| x + 5 * (y + 4 * z);
        for z in 0..3 {
            for y in 0..4 {
                for x in 0..5 {
                    assert_eq!(w[idx(x, y, z)], w[idx(4 - x, y, z)]);
                    assert_eq!(w[idx(x, y, z)], w[idx(x, 3 - y, z)]);
                    assert_eq!(w[idx(x, y, z)], w[idx(x, y, 2 - z)]);
                }
            }
        }
    }

    #[test]
    fn uniform_overlap_is_mean() {
        let dims = [6, 1, 1];
        let a = (
            Window::new([0, 0, 0], [4, 1, 1]),
            ProbabilityMap::constant([4, 1, 1], 0.2),
        );
        let b = (
            Window::new([2, 0, 0], [4, 1, 1]),
            ProbabilityMap::constant([4, 1, 1], 0.6),
        );
        let m = blend_predictions(dims, &[a, b], BlendMode::Uniform).unwrap();
        assert_eq!(m.values[0], 0.2);
        assert!((m.values[2] - 0.4).abs() < 1e-7);
        assert!((m.values[3] - 0.4).abs() < 1e-7);
        assert_eq!(m.values[5], 0.6);
    }

    #[test]
    fn uncovered_voxel_reported() {
        let a = (
            Window::new([0, 0, 0], [2, 1, 1]),
            ProbabilityMap::constant([2, 1, 1], 0.5),
        );
        assert!(matches!(
            blend_predictions([3, 1, 1], &[a], BlendMode::Weighted),
            Err(InferenceError::UncoveredVoxel([2, 0, 0]))
        ));
    }

    #[test]
    fn binarize_is_strict_and_filters_components() {
        let m = ProbabilityMap::constant([2, 2, 2], 0.5);
        assert_eq!(binarize(&m, 0.5, false).unwrap().count_nonzero(), 0);
        let m = ProbabilityMap::constant([2, 2, 2], 0.4);
        assert_eq!(binarize(&m, 0.5, false).unwrap().count_nonzero(), 0);
        // components of size 5 and 3 along a row of 10
        let mut v = vec![0.0; 10];
        for i in [0, 1, 2, 3, 4, 6, 7, 8] {
            v[i] = 0.9;
        }
        let m = ProbabilityMap::new([10, 1, 1], v).unwrap();
        let b = binarize(&m, 0.5, true).unwrap();
        assert_eq!(b.as_label().unwrap(), &[1, 1, 1, 1, 1, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn bv_mask_stays_inside_window() {
        let stub = CenterStub {
            size: [8; 3],
            positive: vec![[12, 12, 12]],
            fallback_prob: Box::new(|_| 0.0),
        };
        let (mask, loc) = segment_bv(
            &blank([24; 3]),
            &stub,
            &ConstSeg([8; 3], 0.9),
            [4; 3],
            false,
        )
        .unwrap();
        assert_eq!(mask.count_nonzero(), 512);
        let w = loc.window;
        for (i, &v) in mask.as_label().unwrap().iter().enumerate() {
            assert_eq!(v == 1, w.contains(mask.coords(i)));
        }
    }

    #[test]
    fn body_constant_segmenter() {
        let m = segment_body(
            &blank([20, 12, 9]),
            &ConstSeg([8, 8, 8], 0.75),
            [4; 3],
            BlendMode::Weighted,
        )
        .unwrap();
        assert_eq!(m.dims(), [20, 12, 9]);
        assert_eq!(m.count_nonzero(), 20 * 12 * 9);
    }

    #[test]
    fn zero_weight_fcn_gives_half() {
        let spec = NetworkSpec::new(NetworkKind::FcnSegmenter, 2, [8; 3]);
        let mut net = build(&spec, 1).unwrap();
        for p in net.params_mut() {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let patch = Volume::scalar([8; 3], (0..512).map(|i| i as f32 / 512.0).collect()).unwrap();
        let m = segment_window(&patch, &net).unwrap();
        assert_eq!(m.dims, [8; 3]);
        assert!(m.values.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn fcn_probabilities_in_range() {
        let spec = NetworkSpec::new(NetworkKind::FcnSegmenter, 2, [8; 3]);
        let net = build(&spec, 4).unwrap();
        let patch = Volume::scalar(
            [8; 3],
            (0..512).map(|i| ((i * 37) % 11) as f32 - 5.0).collect(),
        )
        .unwrap();
        let m = segment_window(&patch, &net).unwrap();
        assert!(m.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    proptest! {
        #[test]
        fn scan_covers_every_voxel(
            dims in prop::array::uniform3(1usize..14),
            wfrac in prop::array::uniform3(0.1f64..1.0),
            stride in prop::array::uniform3(1usize..9),
        ) {
            let window: [usize; 3] = std::array::from_fn(|a| ((dims[a] as f64 * wfrac[a]).ceil() as usize).clamp(1, dims[a]));
            let ws = scan_windows(dims, window, stride).unwrap();
            for z in 0..dims[2] {
                for y in 0..dims[1] {
                    for x in 0..dims[0] {
                        prop_assert!(ws.iter().any(|w| w.contains([x, y, z])));
                    }
                }
            }
            prop_assert!(ws.iter().all(|w| w.fits(dims)));
        }

        #[test]
        fn mean_center_matches_float_oracle(pts in prop::collection::vec(prop::array::uniform3(0usize..50), 1..20)) {
            let c = mean_center(&pts);
            for a in 0..3 {
                let m = pts.iter().map(|p| p[a] as f64).sum::<f64>() / pts.len() as f64;
                // half-down: largest integer r with r - m < 1/2 and r >= m - 1/2
                let want = (m - 0.5).ceil().max(0.0) as usize;
                prop_assert_eq!(c[a], want);
            }
        }
    }
}
