//! Direct 3×3×3 convolution kernels (pad 1, stride 1).
//!
//! Every output element is accumulated as `bias`, then over input channel,
//! `kd`, `kh`, `kw` in that order, one multiply and one add per tap. The
//! vectorized kernel runs that same sequence in each SIMD lane, so its
//! results are bit-identical to a scalar loop nest with the same order.
//! Work is split over disjoint output blocks; no reduction crosses threads.

use rayon::prelude::*;

use super::Real;

const TAPS: usize = 27;
/// Output channels computed together per task.
const KBLOCK: usize = 4;

/// Spatial extent `[depth, height, width]`.
pub type Spatial = [usize; 3];

fn round_up(x: usize, m: usize) -> usize {
    x.div_ceil(m) * m
}

fn lanes_for(width: usize) -> usize {
    if width <= 8 {
        8
    } else {
        16
    }
}

/// Zero-padded copy of an `[N, C, D, H, W]` tensor with one voxel of border on
/// each side and rows widened so every lane-sized read stays in bounds.
struct Padded<T> {
    data: Vec<T>,
    plane: usize,
    row: usize,
    chan: usize,
}

impl<T: Real> Padded<T> {
    fn new(x: &[T], n: usize, c: usize, [d, h, w]: Spatial, lanes: usize) -> Self {
        let row = round_up(w, lanes) + 2;
        let plane = (h + 2) * row;
        let chan = (d + 2) * plane;
        let mut data = vec![T::zero(); n * c * chan];
        let vol = d * h * w;
        for nc in 0..n * c {
            let src = &x[nc * vol..(nc + 1) * vol];
            let dst = &mut data[nc * chan..(nc + 1) * chan];
            for z in 0..d {
                for y in 0..h {
                    let s = (z * h + y) * w;
                    let o = (z + 1) * plane + (y + 1) * row + 1;
                    dst[o..o + w].copy_from_slice(&src[s..s + w]);
                }
            }
        }
        Padded {
            data,
            plane,
            row,
            chan,
        }
    }
}

/// Repacks `[K, C, 27]` weights into `[K/KBLOCK, C, 27, KBLOCK]`, zero-filling
/// the last block.
fn pack_weights<T: Real>(weight: &[T], k: usize, c: usize) -> Vec<T> {
    let blocks = k.div_ceil(KBLOCK);
    let mut packed = vec![T::zero(); blocks * c * TAPS * KBLOCK];
    for ko in 0..k {
        let (kb, j) = (ko / KBLOCK, ko % KBLOCK);
        for ci in 0..c {
            for t in 0..TAPS {
                packed[((kb * c + ci) * TAPS + t) * KBLOCK + j] = weight[(ko * c + ci) * TAPS + t];
            }
        }
    }
    packed
}

/// Forward convolution of `x: [N, C, D, H, W]` with `weight: [K, C, 3, 3, 3]`.
pub fn conv3x3_forward<T: Real>(
    x: &[T],
    n: usize,
    c: usize,
    sp: Spatial,
    weight: &[T],
    k: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    match lanes_for(sp[2]) {
        8 => forward_impl::<T, 8>(x, n, c, sp, weight, k, bias),
        _ => forward_impl::<T, 16>(x, n, c, sp, weight, k, bias),
    }
}

fn forward_impl<T: Real, const L: usize>(
    x: &[T],
    n: usize,
    c: usize,
    sp: Spatial,
    weight: &[T],
    k: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let [d, h, w] = sp;
    let vol = d * h * w;
    let xp = Padded::new(x, n, c, sp, L);
    let packed = pack_weights(weight, k, c);
    let mut out = vec![T::zero(); n * k * vol];
    out.par_chunks_mut(k * vol)
        .enumerate()
        .for_each(|(ni, out_n)| {
            out_n
                .par_chunks_mut(KBLOCK * vol)
                .enumerate()
                .for_each(|(kb, out_blk)| {
                    let kvalid = out_blk.len() / vol;
                    let mut init = [T::zero(); KBLOCK];
                    if let Some(b) = bias {
                        for j in 0..kvalid {
                            init[j] = b[kb * KBLOCK + j];
                        }
                    }
                    let wblk = &packed[kb * c * TAPS * KBLOCK..(kb + 1) * c * TAPS * KBLOCK];
                    let xn = &xp.data[ni * c * xp.chan..(ni + 1) * c * xp.chan];
                    for z in 0..d {
                        for y in 0..h {
                            for x0 in (0..w).step_by(L) {
                                let base = z * xp.plane + y * xp.row + x0;
                                let acc = forward_tile::<T, L>(xn, base, &xp, c, wblk, init);
                                let valid = L.min(w - x0);
                                let o = (z * h + y) * w + x0;
                                for j in 0..kvalid {
                                    out_blk[j * vol + o..j * vol + o + valid]
                                        .copy_from_slice(&acc[j][..valid]);
                                }
                            }
                        }
                    }
                });
        });
    out
}

/// Padded-buffer offsets of the 27 taps in `kd, kh, kw` order.
fn tap_offsets(plane: usize, row: usize) -> [usize; TAPS] {
    std::array::from_fn(|t| (t / 9) * plane + ((t / 3) % 3) * row + t % 3)
}

/// Lanes per weight-gradient accumulator; 4 x 3 of these stay in registers.
const WG_LANES: usize = 8;

type WgAcc<T> = [[[T; WG_LANES]; 3]; KBLOCK];

/// Accumulates `g[j][p] * x[p + kw]` for one `(kd, kh)` tap row over a
/// whole sample. `x` starts at the tap's padded offset.
#[inline(never)]
fn weight_grad_pass<T: Real>(
    mut acc: WgAcc<T>,
    g: &[&[T]; KBLOCK],
    x: &[T],
    [d, h, wr]: Spatial,
    plane: usize,
    row: usize,
) -> WgAcc<T> {
    const V: usize = WG_LANES;
    for z in 0..d {
        for y in 0..h {
            for x0 in (0..wr).step_by(V) {
                let go = (z * h + y) * wr + x0;
                let xo = z * plane + y * row + x0;
                let xs: &[T; V + 2] = x[xo..xo + V + 2].try_into().unwrap();
                for j in 0..KBLOCK {
                    let gv: &[T; V] = g[j][go..go + V].try_into().unwrap();
                    for kw in 0..3 {
                        for l in 0..V {
                            acc[j][kw][l] = acc[j][kw][l] + gv[l] * xs[kw + l];
                        }
                    }
                }
            }
        }
    }
    acc
}

/// One `KBLOCK × L` output tile: all input channels and taps, fixed order.
#[inline(never)]
fn forward_tile<T: Real, const L: usize>(
    xn: &[T],
    base: usize,
    xp: &Padded<T>,
    c: usize,
    wblk: &[T],
    init: [T; KBLOCK],
) -> [[T; L]; KBLOCK] {
    let mut acc = [[T::zero(); L]; KBLOCK];
    for j in 0..KBLOCK {
        acc[j] = [init[j]; L];
    }
    let offs = tap_offsets(xp.plane, xp.row);
    for ci in 0..c {
        let cbase = ci * xp.chan + base;
        let wc = &wblk[ci * TAPS * KBLOCK..(ci + 1) * TAPS * KBLOCK];
        for (t, &off) in offs.iter().enumerate() {
            let src: &[T; L] = xn[cbase + off..cbase + off + L].try_into().unwrap();
            let wt: &[T; KBLOCK] = wc[t * KBLOCK..(t + 1) * KBLOCK].try_into().unwrap();
            for j in 0..KBLOCK {
                let wv = wt[j];
                for l in 0..L {
                    acc[j][l] = acc[j][l] + wv * src[l];
                }
            }
        }
    }
    acc
}

/// Gradient with respect to the input: a convolution of `grad_out` with the
/// spatially flipped, channel-transposed kernel.
pub fn conv3x3_backward_input<T: Real>(
    grad_out: &[T],
    n: usize,
    k: usize,
    sp: Spatial,
    weight: &[T],
    c: usize,
) -> Vec<T> {
    let mut flipped = vec![T::zero(); c * k * TAPS];
    for ko in 0..k {
        for ci in 0..c {
            for t in 0..TAPS {
                flipped[(ci * k + ko) * TAPS + (TAPS - 1 - t)] = weight[(ko * c + ci) * TAPS + t];
            }
        }
    }
    conv3x3_forward(grad_out, n, k, sp, &flipped, c, None)
}

/// Gradients of weight `[K, C, 27]` and bias `[K]`.
pub fn conv3x3_backward_params<T: Real>(
    x: &[T],
    grad_out: &[T],
    n: usize,
    c: usize,
    k: usize,
    sp: Spatial,
) -> (Vec<T>, Vec<T>) {
    match lanes_for(sp[2]) {
        8 => backward_params_impl::<T, 8>(x, grad_out, n, c, k, sp),
        _ => backward_params_impl::<T, 16>(x, grad_out, n, c, k, sp),
    }
}

fn backward_params_impl<T: Real, const L: usize>(
    x: &[T],
    grad_out: &[T],
    n: usize,
    c: usize,
    k: usize,
    sp: Spatial,
) -> (Vec<T>, Vec<T>) {
    let [d, h, w] = sp;
    let vol = d * h * w;
    let xp = Padded::new(x, n, c, sp, L);
    // grad_out rows widened with zeros so tail lanes contribute nothing
    let wr = round_up(w, L);
    let mut gp = vec![T::zero(); n * k * d * h * wr];
    for (dst, src) in gp.chunks_exact_mut(wr).zip(grad_out.chunks_exact(w)) {
        dst[..w].copy_from_slice(src);
    }
    let kblocks = k.div_ceil(KBLOCK);
    let plane_g = d * h * wr;
    let blocks: Vec<[[T; TAPS]; KBLOCK]> = (0..kblocks * c)
        .into_par_iter()
        .map(|task| {
            let (kb, ci) = (task / c, task % c);
            let kvalid = KBLOCK.min(k - kb * KBLOCK);
            let mut res = [[T::zero(); TAPS]; KBLOCK];
            for grp in 0..9 {
                let shift = (grp / 3) * xp.plane + (grp % 3) * xp.row;
                let mut acc: WgAcc<T> = [[[T::zero(); WG_LANES]; 3]; KBLOCK];
                for ni in 0..n {
                    let xc = &xp.data[(ni * c + ci) * xp.chan..(ni * c + ci + 1) * xp.chan];
                    // channels past `kvalid` reuse the last valid one; their sums are dropped
                    let g: [&[T]; KBLOCK] = std::array::from_fn(|j| {
                        let ko = kb * KBLOCK + j.min(kvalid - 1);
                        &gp[(ni * k + ko) * plane_g..(ni * k + ko + 1) * plane_g]
                    });
                    acc = weight_grad_pass(acc, &g, &xc[shift..], [d, h, wr], xp.plane, xp.row);
                }
                for (j, r) in res.iter_mut().enumerate() {
                    for kw in 0..3 {
                        r[grp * 3 + kw] = acc[j][kw].iter().fold(T::zero(), |s, &v| s + v);
                    }
                }
            }
            res
        })
        .collect();
    let mut gw = vec![T::zero(); k * c * TAPS];
    for (task, res) in blocks.iter().enumerate() {
        let (kb, ci) = (task / c, task % c);
        for (j, r) in res.iter().enumerate().take(KBLOCK.min(k - kb * KBLOCK)) {
            let ko = kb * KBLOCK + j;
            gw[(ko * c + ci) * TAPS..(ko * c + ci + 1) * TAPS].copy_from_slice(r);
        }
    }
    let mut gb = vec![T::zero(); k];
    for ni in 0..n {
        for (ko, b) in gb.iter_mut().enumerate() {
            let s = &grad_out[(ni * k + ko) * vol..(ni * k + ko + 1) * vol];
            *b = s.iter().fold(*b, |a, &v| a + v);
        }
    }
    (gw, gb)
}
