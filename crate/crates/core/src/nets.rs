//! Network architectures (window localizer, FCN segmenter, mutant
//! classifier) and `MCK1` checkpoint persistence.
//!
//! All convolutions are 3×3×3 with padding 1; downsampling is 2×2×2 max
//! pooling. Networks take one input channel and emit two logits (per voxel
//! for the segmenter, per sample for the two classifiers).

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{he_normal, AutodiffError, Graph, NodeId, Parameter, Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MCK1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NetsError {
    #[error("{kind:?} input dims {dims:?} must be positive multiples of {multiple}")]
    BadDims {
        kind: NetworkKind,
        dims: [usize; 3],
        multiple: usize,
    },
    #[error("base width must be positive")]
    BadWidth,
    #[error("bad checkpoint magic {0:?}, expected MCK1")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown network kind code {0}")]
    BadKind(u8),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint spec {found} does not match expected {expected}")]
    SpecMismatch { expected: String, found: String },
    #[error("parameter {name}: {detail}")]
    ShapeMismatch { name: String, detail: String },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

pub type Result<T> = std::result::Result<T, NetsError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NetworkKind {
    Localizer,
    FcnSegmenter,
    Classifier,
}

impl NetworkKind {
    pub fn code(self) -> u8 {
        match self {
            NetworkKind::Localizer => 0,
            NetworkKind::FcnSegmenter => 1,
            NetworkKind::Classifier => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(NetworkKind::Localizer),
            1 => Ok(NetworkKind::FcnSegmenter),
            2 => Ok(NetworkKind::Classifier),
            c => Err(NetsError::BadKind(c)),
        }
    }

    /// Input dims must be a multiple of this (2 per pooling stage).
    pub fn dim_multiple(self) -> usize {
        match self {
            NetworkKind::Localizer => 16,
            NetworkKind::FcnSegmenter | NetworkKind::Classifier => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub kind: NetworkKind,
    pub base_width: usize,
    /// `[x, y, z]`, matching volume dims.
    pub input_dims: [usize; 3],
    pub hyperparams: BTreeMap<String, f64>,
}

impl NetworkSpec {
    pub fn new(kind: NetworkKind, base_width: usize, input_dims: [usize; 3]) -> Self {
        NetworkSpec {
            kind,
            base_width,
            input_dims,
            hyperparams: BTreeMap::new(),
        }
    }

    /// The persisted identity of a spec: kind, width and input dims.
    fn same_architecture(&self, other: &NetworkSpec) -> bool {
        self.kind == other.kind
            && self.base_width == other.base_width
            && self.input_dims == other.input_dims
    }

    fn validate(&self) -> Result<()> {
        if self.base_width == 0 {
            return Err(NetsError::BadWidth);
        }
        let m = self.kind.dim_multiple();
        if self.input_dims.iter().any(|&d| d == 0 || d % m != 0) {
            return Err(NetsError::BadDims {
                kind: self.kind,
                dims: self.input_dims,
                multiple: m,
            });
        }
        Ok(())
    }

    /// Tensor shape `[1, 1, z, y, x]` for a single input volume.
    pub fn input_shape(&self, batch: usize) -> [usize; 5] {
        let [x, y, z] = self.input_dims;
        [batch, 1, z, y, x]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Layer {
    /// Weight at `param`, bias at `param + 1`.
    Conv {
        param: usize,
    },
    Pointwise {
        param: usize,
    },
    Linear {
        param: usize,
    },
    Relu,
    MaxPool,
    Upsample,
    PushSkip,
    ConcatSkip,
    GlobalAvgPool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<Layer>,
    params: Vec<Parameter>,
}

struct Builder<'a> {
    layers: Vec<Layer>,
    params: Vec<Parameter>,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn add_param(&mut self, name: String, weight: Tensor<f32>, out: usize) -> usize {
        let idx = self.params.len();
        self.params
            .push(Parameter::new(format!("{name}.weight"), weight));
        self.params.push(Parameter::new(
            format!("{name}.bias"),
            Tensor::zeros(&[out]),
        ));
        idx
    }

    fn conv_relu(&mut self, name: String, cin: usize, cout: usize) {
        let w = he_normal(&[cout, cin, 3, 3, 3], cin * 27, self.rng);
        let param = self.add_param(name, w, cout);
        self.layers.push(Layer::Conv { param });
        self.layers.push(Layer::Relu);
    }

    fn linear(&mut self, name: String, fin: usize, fout: usize, relu: bool) {
        let w = he_normal(&[fout, fin], fin, self.rng);
        let param = self.add_param(name, w, fout);
        self.layers.push(Layer::Linear { param });
        if relu {
            self.layers.push(Layer::Relu);
        }
    }
}

/// VGG-style window classifier: four stages of two convolutions each
/// (widths w, 2w, 4w, 8w) with pooling, global average pooling, then
/// `8w -> 4w -> 2`. Ten weight layers.
pub fn build_localizer(spec: &NetworkSpec, seed: u64) -> Result<Network> {
    expect_kind(spec, NetworkKind::Localizer)?;
    build(spec, seed)
}

/// Encoder-decoder FCN with three pooling stages and concatenated skips;
/// output is `[N, 2, D, H, W]` at input resolution.
pub fn build_fcn_segmenter(spec: &NetworkSpec, seed: u64) -> Result<Network> {
    expect_kind(spec, NetworkKind::FcnSegmenter)?;
    build(spec, seed)
}

/// VGG-style mutant classifier: stages of 2, 2 and 3 convolutions (widths
/// w, 2w, 4w) with pooling, global average pooling, then `4w -> 2w -> 2`.
/// Nine weight layers.
pub fn build_classifier(spec: &NetworkSpec, seed: u64) -> Result<Network> {
    expect_kind(spec, NetworkKind::Classifier)?;
    build(spec, seed)
}

fn expect_kind(spec: &NetworkSpec, kind: NetworkKind) -> Result<()> {
    if spec.kind != kind {
        return Err(NetsError::SpecMismatch {
            expected: format!("{kind:?}"),
            found: format!("{:?}", spec.kind),
        });
    }
    Ok(())
}

/// Builds the architecture for any kind with He-normal weights and zero
/// biases drawn from `seed`.
pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Network> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder {
        layers: Vec::new(),
        params: Vec::new(),
        rng: &mut rng,
    };
    let w = spec.base_width;
    match spec.kind {
        NetworkKind::Localizer => {
            let mut cin = 1;
            for (s, width) in [w, 2 * w, 4 * w, 8 * w].into_iter().enumerate() {
                for i in 0..2 {
                    b.conv_relu(format!("stage{}.conv{}", s + 1, i + 1), cin, width);
                    cin = width;
                }
                b.layers.push(Layer::MaxPool);
            }
            b.layers.push(Layer::GlobalAvgPool);
            b.linear("fc1".into(), 8 * w, 4 * w, true);
            b.linear("fc2".into(), 4 * w, 2, false);
        }
        NetworkKind::Classifier => {
            let mut cin = 1;
            for (s, (count, width)) in [(2, w), (2, 2 * w), (3, 4 * w)].into_iter().enumerate() {
                for i in 0..count {
                    b.conv_relu(format!("stage{}.conv{}", s + 1, i + 1), cin, width);
                    cin = width;
                }
                b.layers.push(Layer::MaxPool);
            }
            b.layers.push(Layer::GlobalAvgPool);
            b.linear("fc1".into(), 4 * w, 2 * w, true);
            b.linear("fc2".into(), 2 * w, 2, false);
        }
        NetworkKind::FcnSegmenter => {
            let widths = [w, 2 * w, 4 * w];
            let mut cin = 1;
            for (s, &width) in widths.iter().enumerate() {
                b.conv_relu(format!("enc{}.conv1", s + 1), cin, width);
                b.conv_relu(format!("enc{}.conv2", s + 1), width, width);
                b.layers.push(Layer::PushSkip);
                b.layers.push(Layer::MaxPool);
                cin = width;
            }
            b.conv_relu("bottleneck.conv1".into(), cin, 8 * w);
            b.conv_relu("bottleneck.conv2".into(), 8 * w, 8 * w);
            cin = 8 * w;
            for (s, &width) in widths.iter().enumerate().rev() {
                b.layers.push(Layer::Upsample);
                b.layers.push(Layer::ConcatSkip);
                b.conv_relu(format!("dec{}.conv1", s + 1), cin + width, width);
                b.conv_relu(format!("dec{}.conv2", s + 1), width, width);
                cin = width;
            }
            let wt = he_normal(&[2, cin], cin, b.rng);
            let param = b.add_param("head".into(), wt, 2);
            b.layers.push(Layer::Pointwise { param });
        }
    }
    Ok(Network {
        spec: spec.clone(),
        layers: b.layers,
        params: b.params,
    })
}

impl Network {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Convolution and linear layers (the 1×1×1 head counts as a convolution).
    pub fn weight_layer_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| {
                matches!(
                    l,
                    Layer::Conv { .. } | Layer::Pointwise { .. } | Layer::Linear { .. }
                )
            })
            .count()
    }

    /// Places every parameter on `g` as a leaf, in parameter order.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>, requires_grad: bool) -> Result<Vec<NodeId>> {
        self.params
            .iter()
            .map(|p| {
                g.leaf(p.tensor.cast(), requires_grad)
                    .map_err(NetsError::from)
            })
            .collect()
    }

    /// Records the forward pass of `input` (`[N, 1, z, y, x]`) on `g`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        input: NodeId,
        params: &[NodeId],
    ) -> Result<NodeId> {
        let shape = g.value(input).shape().to_vec();
        let expected = self.spec.input_shape(shape.first().copied().unwrap_or(0));
        if shape != expected {
            return Err(NetsError::ShapeMismatch {
                name: "input".into(),
                detail: format!("expected {expected:?}, got {shape:?}"),
            });
        }
        let mut x = input;
        let mut skips = Vec::new();
        for layer in &self.layers {
            x = match *layer {
                Layer::Conv { param } => g.conv3d(x, params[param], params[param + 1])?,
                Layer::Pointwise { param } => {
                    g.pointwise_conv3d(x, params[param], params[param + 1])?
                }
                Layer::Linear { param } => g.linear(x, params[param], params[param + 1])?,
                Layer::Relu => g.relu(x)?,
                Layer::MaxPool => g.maxpool3d(x)?,
                Layer::Upsample => g.upsample_nearest3d(x)?,
                Layer::PushSkip => {
                    skips.push(x);
                    x
                }
                Layer::ConcatSkip => {
                    let skip = skips.pop().expect("balanced skip stack");
                    g.concat_channels(x, skip)?
                }
                Layer::GlobalAvgPool => g.global_avg_pool(x)?,
            };
        }
        Ok(x)
    }

    /// Forward pass without gradient bookkeeping.
    pub fn logits(&self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, false)?;
        let x = g.leaf(input.clone(), false)?;
        let out = self.forward(&mut g, x, &params)?;
        Ok(g.value(out).clone())
    }

    /// Copies parameter values from `other`, which must share names and shapes.
    pub fn load_params(&mut self, other: &[Parameter]) -> Result<()> {
        check_params(
            &self.params,
            other.iter().map(|p| (p.name.as_str(), p.tensor.shape())),
        )?;
        for (p, o) in self.params.iter_mut().zip(other) {
            p.tensor = o.tensor.clone();
            p.velocity = Tensor::zeros(o.tensor.shape());
        }
        Ok(())
    }
}

fn check_params<'a>(
    expected: &[Parameter],
    found: impl ExactSizeIterator<Item = (&'a str, &'a [usize])>,
) -> Result<()> {
    if found.len() != expected.len() {
        return Err(NetsError::ShapeMismatch {
            name: "*".into(),
            detail: format!(
                "expected {} parameters, found {}",
                expected.len(),
                found.len()
            ),
        });
    }
    for (p, (name, shape)) in expected.iter().zip(found) {
        if p.name != name || p.tensor.shape() != shape {
            return Err(NetsError::ShapeMismatch {
                name: p.name.clone(),
                detail: format!(
                    "expected {} {:?}, found {} {:?}",
                    p.name,
                    p.tensor.shape(),
                    name,
                    shape
                ),
            });
        }
    }
    Ok(())
}

/// Serializes a network to the `MCK1` layout.
pub fn checkpoint_bytes(net: &Network) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(net.spec.kind.code());
    out.extend_from_slice(&(net.spec.base_width as u32).to_le_bytes());
    for d in net.spec.input_dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(net.params.len() as u32).to_le_bytes());
    for p in &net.params {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.tensor.shape().len() as u8);
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(NetsError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(NetsError::Truncated)?;
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses `MCK1` bytes, rebuilding the architecture and checking every
/// parameter name and shape against it.
pub fn network_from_checkpoint(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if &magic != CHECKPOINT_MAGIC {
        return Err(NetsError::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(NetsError::UnsupportedVersion(version));
    }
    let kind = NetworkKind::from_code(r.u8()?)?;
    let base_width = r.u32()? as usize;
    let input_dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let spec = NetworkSpec::new(kind, base_width, input_dims);
    let mut net = build(&spec, 0)?;
    let count = r.u32()? as usize;
    let mut loaded = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8_lossy(r.take(name_len)?).into_owned();
        let ndim = r.u8()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or(NetsError::Truncated)?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape.clone(), data).map_err(|_| NetsError::ShapeMismatch {
            name: name.clone(),
            detail: format!("invalid shape {shape:?}"),
        })?;
        loaded.push(Parameter::new(name, tensor));
    }
    if r.pos != bytes.len() {
        return Err(NetsError::ShapeMismatch {
            name: "*".into(),
            detail: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    net.load_params(&loaded)?;
    Ok(net)
}

pub fn save_checkpoint(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint_bytes(net)).map_err(|source| NetsError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| NetsError::Io {
        path: path.display().to_string(),
        source,
    })?;
    network_from_checkpoint(&bytes)
}

/// Loads a checkpoint and requires its architecture to equal `expected`.
pub fn load_checkpoint_as(path: impl AsRef<Path>, expected: &NetworkSpec) -> Result<Network> {
    let net = load_checkpoint(path)?;
    if !net.spec.same_architecture(expected) {
        return Err(NetsError::SpecMismatch {
            expected: describe(expected),
            found: describe(&net.spec),
        });
    }
    Ok(net)
}

fn describe(s: &NetworkSpec) -> String {
    format!("{:?}(w={}, dims={:?})", s.kind, s.base_width, s.input_dims)
}

/// Probability of class 1 from a pair of logits.
pub fn softmax2(l0: f32, l1: f32) -> f32 {
    let d = (l1 - l0) as f64;
    let p = if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    };
    p as f32
}
