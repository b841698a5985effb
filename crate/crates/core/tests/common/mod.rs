//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use embryoseg::autodiff::{
    grad_check_sampled, CustomOp, GradCheckReport, Graph, NodeId, Result, Tensor,
};
use embryoseg::nets::{build, NetworkKind, NetworkSpec};
use embryoseg::volio::Volume;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// `Σ r ⊙ x` for a fixed tensor `r`, so every element of `x` gets a distinct
/// upstream gradient.
pub struct Project(pub Tensor<f64>);

impl CustomOp<f64> for Project {
    fn name(&self) -> &'static str {
        "project"
    }

    fn forward(&self, inputs: &[&Tensor<f64>]) -> Result<Tensor<f64>> {
        let s = inputs[0]
            .data()
            .iter()
            .zip(self.0.data())
            .map(|(a, b)| a * b)
            .sum();
        Ok(Tensor::scalar(s))
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<f64>],
        _output: &Tensor<f64>,
        grad_out: &Tensor<f64>,
    ) -> Result<Vec<Tensor<f64>>> {
        let g = grad_out.data()[0];
        let data = self.0.data().iter().map(|r| r * g).collect();
        Ok(vec![Tensor::new(self.0.shape().to_vec(), data)?])
    }
}

/// Reduces `x` to a scalar through a random projection.
pub fn project(g: &mut Graph<f64>, x: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = random_tensor(g.value(x).shape(), &mut rng);
    g.custom(&[x], Box::new(Project(r)))
}

/// Named scalar-valued graph over a fixed set of inputs.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    /// Bound on the max relative error.
    pub bound: f64,
    pub build: Box<dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>>,
}

/// One case per differentiable operator.
pub fn op_cases() -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut t = |s: &[usize]| random_tensor(s, &mut rng);
    let mut relu_in = t(&[1, 2, 3, 3, 3]);
    // keep inputs away from the kink
    for v in relu_in.data_mut() {
        *v += 0.1f64.copysign(*v);
    }
    let ce_labels: Vec<u8> = (0..16).map(|i| (i * 7 % 3) as u8).collect();
    let dice_target: Vec<f64> = (0..24).map(|i| f64::from(i % 3 == 0)).collect();
    vec![
        OpCase {
            name: "conv3d",
            inputs: vec![t(&[2, 2, 3, 4, 5]), t(&[3, 2, 3, 3, 3]), t(&[3])],
            bound: 1e-6,
            build: Box::new(|g, ids| {
                let y = g.conv3d(ids[0], ids[1], ids[2])?;
                project(g, y, 10)
            }),
        },
        OpCase {
            name: "pointwise_conv3d",
            inputs: vec![t(&[2, 3, 2, 3, 4]), t(&[2, 3]), t(&[2])],
            bound: 1e-6,
            build: Box::new(|g, ids| {
                let y = g.pointwise_conv3d(ids[0], ids[1], ids[2])?;
                project(g, y, 11)
            }),
        },
        OpCase {
            name: "linear",
            inputs: vec![t(&[3, 5]), t(&[2, 5]), t(&[2])],
            bound: 1e-5,
            build: Box::new(|g, ids| {
                let y = g.linear(ids[0], ids[1], ids[2])?;
                project(g, y, 12)
            }),
        },
        OpCase {
            name: "relu",
            inputs: vec![relu_in],
            bound: 1e-5,
            build: Box::new(|g, ids| {
                let y = g.relu(ids[0])?;
                project(g, y, 13)
            }),
        },
        OpCase {
            name: "maxpool3d",
            inputs: vec![t(&[2, 2, 4, 4, 6])],
            bound: 1e-5,
            build: Box::new(|g, ids| {
                let y = g.maxpool3d(ids[0])?;
                project(g, y, 14)
            }),
        },
        OpCase {
            name: "global_avg_pool",
            inputs: vec![t(&[2, 3, 2, 3, 4])],
            bound: 1e-5,
            build: Box::new(|g, ids| {
                let y = g.global_avg_pool(ids[0])?;
                project(g, y, 15)
            }),
        },
        OpCase {
            name: "upsample_nearest3d+concat_channels",
            inputs: vec![t(&[1, 2, 2, 3, 2]), t(&[1, 1, 4, 6, 4])],
            bound: 1e-6,
            build: Box::new(|g, ids| {
                let u = g.upsample_nearest3d(ids[0])?;
                let c = g.concat_channels(u, ids[1])?;
                project(g, c, 16)
            }),
        },
        OpCase {
            name: "softmax_cross_entropy [N, C]",
            inputs: vec![t(&[4, 2])],
            bound: 1e-6,
            build: Box::new(|g, ids| g.softmax_cross_entropy(ids[0], &[0, 1, 1, 0], &[0.7, 1.6])),
        },
        OpCase {
            name: "softmax_cross_entropy [N, C, D, H, W]",
            inputs: vec![t(&[2, 3, 2, 2, 2])],
            bound: 1e-6,
            build: Box::new(move |g, ids| {
                g.softmax_cross_entropy(ids[0], &ce_labels, &[1.0, 0.5, 2.0])
            }),
        },
        OpCase {
            name: "foreground_prob+soft_dice_loss",
            inputs: vec![t(&[2, 2, 2, 3, 2])],
            bound: 1e-6,
            build: Box::new(move |g, ids| {
                let p = g.foreground_prob(ids[0])?;
                g.soft_dice_loss(p, &dice_target, 1.0)
            }),
        },
        OpCase {
            name: "sum+scale+add+pick",
            inputs: vec![t(&[2, 3]), t(&[2, 3])],
            bound: 1e-6,
            build: Box::new(|g, ids| {
                let a = g.add(ids[0], ids[1])?;
                let s = g.scale(a, -1.5)?;
                let total = g.sum(s)?;
                let one = g.pick(ids[0], 4)?;
                g.add(total, one)
            }),
        },
    ]
}

pub const OP_STEP: f64 = 1e-5;

/// Whole-network gradient of a training loss on a random input of two
/// samples at base width 2, probing up to 12 elements per parameter.
pub fn network_grad_check(kind: NetworkKind, dims: [usize; 3], seed: u64) -> GradCheckReport {
    let net = build(&NetworkSpec::new(kind, 2, dims), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let mut inputs: Vec<Tensor<f64>> = net.params().iter().map(|p| p.tensor.cast()).collect();
    inputs.push(random_tensor(&net.spec().input_shape(2), &mut rng));
    let voxels = dims.iter().product::<usize>();
    grad_check_sampled(
        |g, ids| {
            let (params, x) = ids.split_at(ids.len() - 1);
            let logits = net.forward(g, x[0], params).unwrap();
            match kind {
                NetworkKind::FcnSegmenter => {
                    let labels: Vec<u8> = (0..2 * voxels).map(|i| u8::from(i % 5 < 2)).collect();
                    let target: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
                    let ce = g.softmax_cross_entropy(logits, &labels, &[1.0, 1.0])?;
                    let p = g.foreground_prob(logits)?;
                    let dice = g.soft_dice_loss(p, &target, 1.0)?;
                    g.add(ce, dice)
                }
                _ => g.softmax_cross_entropy(logits, &[0, 1], &[1.0, 1.0]),
            }
        },
        &inputs,
        // small enough not to cross ReLU or pooling kinks in the coarse levels
        1e-6,
        12,
    )
    .unwrap()
}

/// The networks checked at desk scale: kind, input dims, seed.
pub const NETWORK_CASES: [(NetworkKind, [usize; 3], u64); 3] = [
    (NetworkKind::Localizer, [16; 3], 1),
    (NetworkKind::FcnSegmenter, [8, 8, 16], 2),
    (NetworkKind::Classifier, [8; 3], 3),
];

/// A random 3x3x3 convolution problem.
pub struct ConvCase {
    pub n: usize,
    pub c: usize,
    pub k: usize,
    pub sp: [usize; 3],
    pub x: Vec<f64>,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub gy: Vec<f64>,
}

impl ConvCase {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let n = rng.random_range(1..=2);
        let c = rng.random_range(1..=5);
        let k = rng.random_range(1..=9);
        let sp = [
            rng.random_range(1..=6),
            rng.random_range(1..=6),
            rng.random_range(1..=19),
        ];
        let vol = sp[0] * sp[1] * sp[2];
        let mut v = |len: usize| {
            (0..len)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect::<Vec<f64>>()
        };
        ConvCase {
            n,
            c,
            k,
            sp,
            x: v(n * c * vol),
            w: v(k * c * 27),
            b: v(k),
            gy: v(n * k * vol),
        }
    }

    /// Visits every (sample, out channel, in channel, output voxel, tap)
    /// with an in-bounds source voxel as flat offsets into x, w and y.
    pub fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [d, h, w] = self.sp;
        let vol = d * h * w;
        for ni in 0..self.n {
            for ko in 0..self.k {
                for ci in 0..self.c {
                    for z in 0..d {
                        for y in 0..h {
                            for x in 0..w {
                                for t in 0..27 {
                                    let (sz, sy, sx) = (z + t / 9, y + (t / 3) % 3, x + t % 3);
                                    if sz < 1 || sy < 1 || sx < 1 || sz > d || sy > h || sx > w {
                                        continue;
                                    }
                                    let src =
                                        (ni * self.c + ci) * vol + ((sz - 1) * h + sy - 1) * w + sx
                                            - 1;
                                    let wi = (ko * self.c + ci) * 27 + t;
                                    let yi = (ni * self.k + ko) * vol + (z * h + y) * w + x;
                                    f(src, wi, yi);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Direct-loop forward pass in the precision of `cast`.
    pub fn naive_forward<T: Copy + std::ops::AddAssign + std::ops::Mul<Output = T>>(
        &self,
        cast: impl Fn(f64) -> T,
    ) -> Vec<T> {
        let vol: usize = self.sp.iter().product();
        let mut y = Vec::with_capacity(self.n * self.k * vol);
        for _ in 0..self.n {
            for ko in 0..self.k {
                y.extend(std::iter::repeat_n(cast(self.b[ko]), vol));
            }
        }
        self.for_each_tap(|src, wi, yi| y[yi] += cast(self.w[wi]) * cast(self.x[src]));
        y
    }
}

/// Mask of voxels inside any of the given rotated ellipsoids, each given as
/// (center, semi-axes, row-major rotation).
pub fn ellipsoid_union(dims: [usize; 3], parts: &[([f64; 3], [f64; 3], [[f64; 3]; 3])]) -> Volume {
    let mut d = vec![0u8; dims.iter().product()];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let p = [x as f64, y as f64, z as f64];
                let inside = parts.iter().any(|(c, r, rot)| {
                    let q = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
                    (0..3)
                        .map(|a| {
                            let u = rot[a][0] * q[0] + rot[a][1] * q[1] + rot[a][2] * q[2];
                            (u / r[a]).powi(2)
                        })
                        .sum::<f64>()
                        <= 1.0
                });
                d[x + dims[0] * (y + dims[1] * z)] = inside as u8;
            }
        }
    }
    Volume::label(dims, d).unwrap()
}

/// The 24 proper rotations of a cube as signed axis permutations:
/// output axis `a` reads input axis `perm[a]`, flipped when `flip[a]`.
pub fn cube_rotations() -> Vec<([usize; 3], [bool; 3])> {
    let perms = [
        [0, 1, 2],
        [1, 2, 0],
        [2, 0, 1],
        [0, 2, 1],
        [2, 1, 0],
        [1, 0, 2],
    ];
    let mut out = Vec::new();
    for (pi, perm) in perms.iter().enumerate() {
        let even = pi < 3;
        for bits in 0..8u8 {
            let flip = [bits & 1 != 0, bits & 2 != 0, bits & 4 != 0];
            let odd_flips = flip.iter().filter(|&&f| f).count() % 2 == 1;
            if even != odd_flips {
                out.push((*perm, flip));
            }
        }
    }
    out
}

/// Applies a signed axis permutation to a mask on a cubic grid.
pub fn rotate_grid(v: &Volume, (perm, flip): ([usize; 3], [bool; 3])) -> Volume {
    let dims = v.dims();
    assert!(
        dims[0] == dims[1] && dims[1] == dims[2],
        "cubic grid expected"
    );
    let n = dims[0];
    let src = v.as_label().unwrap();
    let mut d = vec![0u8; src.len()];
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let o = [x, y, z];
                let i: [usize; 3] = std::array::from_fn(|a| {
                    let c = o[perm.iter().position(|&p| p == a).unwrap()];
                    if flip[a] {
                        n - 1 - c
                    } else {
                        c
                    }
                });
                d[x + n * (y + n * z)] = src[v.index(i[0], i[1], i[2])];
            }
        }
    }
    Volume::label(dims, d).unwrap()
}
