//! Synthetic embryo volumes with body and ventricle ground truth.
//!
//! The body is a randomly rotated ellipsoid. The ventricle is three small
//! ellipsoidal lobes in the body's head region: two lateral lobes and one
//! midline lobe, which mutants enlarge.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::metrics::Phenotype;
use crate::volio::{write_volume, Volume, VolumeError};

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("no valid geometry after {0} attempts")]
    GeometryFailure(usize),
    #[error("invalid phantom config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, PhantomError>;

pub const BACKGROUND_LEVEL: f32 = 0.5;
pub const BODY_LEVEL: f32 = 1.0;
pub const BV_LEVEL: f32 = 0.15;

const MAX_ATTEMPTS: usize = 100;
/// Allowed relative deviation of the rasterized body fraction from target.
const BODY_FRACTION_SLACK: f64 = 0.3;

/// Lobe ids in [`PhantomSample::bv_parts`].
pub const LOBE_LEFT: u8 = 1;
pub const LOBE_RIGHT: u8 = 2;
pub const LOBE_MID: u8 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomConfig {
    pub vol_dims: [usize; 3],
    pub body_fraction_target: f64,
    pub bv_fraction_max: f64,
    pub mutant_lobe_scale: f64,
    /// Variance of the unit-mean multiplicative speckle.
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            vol_dims: [64; 3],
            body_fraction_target: 0.10,
            bv_fraction_max: 0.005,
            mutant_lobe_scale: 1.8,
            noise_level: 0.15,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PhantomError::BadConfig(m.into()));
        if self.vol_dims.iter().any(|&d| d < 8) {
            return bad("vol_dims must be at least 8 per axis");
        }
        if !(self.body_fraction_target > 0.0 && self.body_fraction_target < 1.0) {
            return bad("body_fraction_target must lie in (0, 1)");
        }
        if !(self.bv_fraction_max > 0.0 && self.bv_fraction_max < 1.0) {
            return bad("bv_fraction_max must lie in (0, 1)");
        }
        if !(self.mutant_lobe_scale > 1.0) {
            return bad("mutant_lobe_scale must exceed 1");
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return bad("noise_level must be finite and non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PhantomSample {
    pub image: Volume,
    pub body_mask: Volume,
    pub bv_mask: Volume,
    /// Ventricle voxels tagged by lobe ([`LOBE_LEFT`], [`LOBE_RIGHT`],
    /// [`LOBE_MID`]), 0 elsewhere; same layout as the masks.
    pub bv_parts: Vec<u8>,
    pub label: Phenotype,
    pub params: BTreeMap<String, f64>,
}

impl PhantomSample {
    /// Binary mask of one ventricle lobe.
    pub fn lobe_mask(&self, lobe: u8) -> Volume {
        let d = self.bv_parts.iter().map(|&p| (p == lobe) as u8).collect();
        Volume::label(self.bv_mask.dims(), d).expect("lobe mask matches dims")
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, u: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((u[a] - self.center[a]) / self.semi[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

/// Geometry drawn for one attempt; lobes live in the body frame.
struct Geometry {
    /// Columns are the body axes in volume coordinates.
    rotation: [[f64; 3]; 3],
    center: [f64; 3],
    body: Ellipsoid,
    lobes: [Ellipsoid; 3],
}

struct Raster {
    body: Vec<u8>,
    parts: Vec<u8>,
    body_count: usize,
    bv_count: usize,
    contained: bool,
}

impl Geometry {
    fn sample(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Option<Geometry> {
        let total: f64 = cfg.vol_dims.iter().map(|&d| d as f64).product();
        let frac = cfg.body_fraction_target * rng.random_range(0.85..1.15);
        let ba = rng.random_range(0.5..0.6);
        let cb = rng.random_range(0.85..1.0);
        let a = (3.0 * frac * total / (4.0 * std::f64::consts::PI * ba * ba * cb)).cbrt();
        let semi = [a, a * ba, a * ba * cb];
        let rotation = random_rotation(rng);
        let mut center = [0.0; 3];
        for (ax, c) in center.iter_mut().enumerate() {
            let extent = (0..3)
                .map(|k| (rotation[ax][k] * semi[k]).powi(2))
                .sum::<f64>()
                .sqrt();
            let lo = extent + 1.0;
            let hi = cfg.vol_dims[ax] as f64 - 2.0 - extent;
            let u: f64 = rng.random();
            if hi < lo {
                return None;
            }
            *c = lo + u * (hi - lo);
        }
        let b = semi[1];
        let c = semi[2];
        let mut jitter = || -> [f64; 3] { std::array::from_fn(|_| rng.random_range(0.85..1.15)) };
        let (jl, jr, jm) = (jitter(), jitter(), jitter());
        let lat = 0.27 * b;
        let mid = 0.17 * b;
        let lobes = [
            Ellipsoid {
                center: [0.45 * a, 0.3 * b, 0.15 * c],
                semi: jl.map(|j| j * lat),
            },
            Ellipsoid {
                center: [0.45 * a, -0.3 * b, 0.15 * c],
                semi: jr.map(|j| j * lat),
            },
            Ellipsoid {
                center: [0.2 * a, 0.0, 0.15 * c],
                semi: jm.map(|j| j * mid),
            },
        ];
        Some(Geometry {
            rotation,
            center,
            body: Ellipsoid {
                center: [0.0; 3],
                semi,
            },
            lobes,
        })
    }

    fn with_mid_scale(&self, s: f64) -> Geometry {
        let mut lobes = self.lobes;
        lobes[2].semi = lobes[2].semi.map(|x| x * s);
        Geometry { lobes, ..*self }
    }

    fn raster(&self, dims: [usize; 3]) -> Raster {
        let n = dims.iter().product();
        let mut body = vec![0u8; n];
        let mut parts = vec![0u8; n];
        let (mut body_count, mut bv_count, mut contained) = (0, 0, true);
        let r = &self.rotation;
        let mut i = 0;
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let d = [
                        x as f64 - self.center[0],
                        y as f64 - self.center[1],
                        z as f64 - self.center[2],
                    ];
                    let u: [f64; 3] =
                        std::array::from_fn(|k| r[0][k] * d[0] + r[1][k] * d[1] + r[2][k] * d[2]);
                    let in_body = self.body.contains(u);
                    if in_body {
                        body[i] = 1;
                        body_count += 1;
                    }
                    // later lobes win where lobes overlap
                    for (id, lobe) in self.lobes.iter().enumerate() {
                        if lobe.contains(u) {
                            parts[i] = id as u8 + 1;
                        }
                    }
                    if parts[i] != 0 {
                        bv_count += 1;
                        contained &= in_body;
                    }
                    i += 1;
                }
            }
        }
        Raster {
            body,
            parts,
            body_count,
            bv_count,
            contained,
        }
    }

    fn record(&self, out: &mut BTreeMap<String, f64>) {
        for a in 0..3 {
            out.insert(format!("body_center_{a}"), self.center[a]);
            out.insert(format!("body_semi_{a}"), self.body.semi[a]);
            for k in 0..3 {
                out.insert(format!("body_axis_{k}_{a}"), self.rotation[a][k]);
            }
            for (id, lobe) in ["left", "right", "mid"].iter().zip(&self.lobes) {
                out.insert(format!("lobe_{id}_center_{a}"), lobe.center[a]);
                out.insert(format!("lobe_{id}_semi_{a}"), lobe.semi[a]);
            }
        }
    }
}

/// Uniform random rotation from a normalized Gaussian quaternion.
fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let mut q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    q = q.map(|v| v / norm);
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Draws one phantom. Output is a pure function of `(cfg, label)`, and a
/// normal and a mutant drawn from the same config share all geometry except
/// the size of the midline lobe.
pub fn generate_phantom(cfg: &PhantomConfig, label: Phenotype) -> Result<PhantomSample> {
    cfg.validate()?;
    let dims = cfg.vol_dims;
    let total = dims.iter().product::<usize>() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ok = |r: &Raster| {
        let bf = r.body_count as f64 / total;
        r.contained
            && r.bv_count > 0
            && r.bv_count < r.body_count
            && (bf / cfg.body_fraction_target - 1.0).abs() <= BODY_FRACTION_SLACK
            && (r.bv_count as f64 / total) < cfg.bv_fraction_max
    };
    for attempt in 0..MAX_ATTEMPTS {
        let Some(geom) = Geometry::sample(cfg, &mut rng) else {
            continue;
        };
        // both variants must pass so accepted draws never depend on the label
        let normal = geom.raster(dims);
        if !ok(&normal) {
            continue;
        }
        let mutant_geom = geom.with_mid_scale(cfg.mutant_lobe_scale);
        let mutant = mutant_geom.raster(dims);
        if !ok(&mutant) {
            continue;
        }
        let (g, r) = match label {
            Phenotype::Normal => (geom, normal),
            Phenotype::Mutant => (mutant_geom, mutant),
        };
        let mut params = BTreeMap::new();
        g.record(&mut params);
        params.insert("attempts".into(), (attempt + 1) as f64);
        params.insert("body_fraction".into(), r.body_count as f64 / total);
        params.insert("bv_fraction".into(), r.bv_count as f64 / total);
        let image = render(&r, cfg)?;
        let bv: Vec<u8> = r.parts.iter().map(|&p| (p != 0) as u8).collect();
        return Ok(PhantomSample {
            image,
            body_mask: Volume::label(dims, r.body)?,
            bv_mask: Volume::label(dims, bv)?,
            bv_parts: r.parts,
            label,
            params,
        });
    }
    Err(PhantomError::GeometryFailure(MAX_ATTEMPTS))
}

fn render(r: &Raster, cfg: &PhantomConfig) -> Result<Volume> {
    let mut data: Vec<f32> = r
        .body
        .iter()
        .zip(&r.parts)
        .map(|(&b, &p)| match (b, p) {
            (_, p) if p != 0 => BV_LEVEL,
            (1, _) => BODY_LEVEL,
            _ => BACKGROUND_LEVEL,
        })
        .collect();
    if cfg.noise_level > 0.0 {
        // unit mean, variance noise_level; separate stream from the geometry
        let gamma = Gamma::new(1.0 / cfg.noise_level, cfg.noise_level)
            .map_err(|e| PhantomError::BadConfig(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        for v in &mut data {
            *v *= gamma.sample(&mut rng) as f32;
        }
    }
    Ok(Volume::scalar(cfg.vol_dims, data)?)
}

/// One row of a dataset manifest; paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub body_mask: PathBuf,
    pub bv_mask: PathBuf,
    pub label: Phenotype,
}

pub const MANIFEST_NAME: &str = "manifest.csv";
pub const MANIFEST_HEADER: &str = "image_path,body_mask_path,bv_mask_path,label";

/// Labels for `n` items with `round(n * mutant_fraction)` mutants spread
/// evenly through the sequence.
pub fn dataset_labels(n: usize, mutant_fraction: f64) -> Vec<Phenotype> {
    let m = ((n as f64) * mutant_fraction.clamp(0.0, 1.0)).round() as usize;
    (0..n)
        .map(|i| Phenotype::from_mutant((i + 1) * m / n.max(1) > i * m / n.max(1)))
        .collect()
}

/// Item `i` uses seed `cfg.seed + i`.
pub fn dataset_samples(
    n: usize,
    mutant_fraction: f64,
    cfg: &PhantomConfig,
) -> Result<Vec<PhantomSample>> {
    dataset_labels(n, mutant_fraction)
        .into_par_iter()
        .enumerate()
        .map(|(i, label)| {
            let c = PhantomConfig {
                seed: cfg.seed.wrapping_add(i as u64),
                ..cfg.clone()
            };
            generate_phantom(&c, label)
        })
        .collect()
}

/// Writes `n` phantoms as `MVF1` files plus a manifest under `out_dir`.
pub fn generate_dataset(
    n: usize,
    mutant_fraction: f64,
    cfg: &PhantomConfig,
    out_dir: &Path,
) -> Result<Vec<ManifestEntry>> {
    let samples = dataset_samples(n, mutant_fraction, cfg)?;
    for sub in ["images", "body", "bv"] {
        let p = out_dir.join(sub);
        fs::create_dir_all(&p).map_err(|source| PhantomError::Io { path: p, source })?;
    }
    let mut entries = Vec::with_capacity(n);
    for (i, s) in samples.iter().enumerate() {
        let name = format!("case_{i:04}.mvf");
        let e = ManifestEntry {
            image: Path::new("images").join(&name),
            body_mask: Path::new("body").join(&name),
            bv_mask: Path::new("bv").join(&name),
            label: s.label,
        };
        write_volume(&s.image, out_dir.join(&e.image))?;
        write_volume(&s.body_mask, out_dir.join(&e.body_mask))?;
        write_volume(&s.bv_mask, out_dir.join(&e.bv_mask))?;
        entries.push(e);
    }
    write_manifest(&out_dir.join(MANIFEST_NAME), &entries)?;
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::new();
    writeln!(text, "{MANIFEST_HEADER}").unwrap();
    for e in entries {
        writeln!(
            text,
            "{},{},{},{}",
            e.image.display(),
            e.body_mask.display(),
            e.bv_mask.display(),
            e.label.as_str()
        )
        .unwrap();
    }
    fs::write(path, text).map_err(|source| PhantomError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Parses a manifest. A header line is optional.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|source| PhantomError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = |line: usize, msg: &str| {
        PhantomError::BadConfig(format!("{}:{}: {msg}", path.display(), line + 1))
    };
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line == MANIFEST_HEADER {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 4 {
            return Err(bad(ln, "expected 4 comma-separated fields"));
        }
        let label =
            Phenotype::parse(f[3]).ok_or_else(|| bad(ln, "label must be mutant or normal"))?;
        out.push(ManifestEntry {
            image: f[0].into(),
            body_mask: f[1].into(),
            bv_mask: f[2].into(),
            label,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> PhantomConfig {
        PhantomConfig {
            vol_dims: [48; 3],
            seed,
            ..PhantomConfig::default()
        }
    }

    #[test]
    fn noiseless_regions_hit_base_levels() {
        let cfg = PhantomConfig {
            noise_level: 0.0,
            ..small(3)
        };
        let s = generate_phantom(&cfg, Phenotype::Normal).unwrap();
        let img = s.image.as_scalar().unwrap();
        let body = s.body_mask.as_label().unwrap();
        let bv = s.bv_mask.as_label().unwrap();
        for i in 0..img.len() {
            let want = if bv[i] == 1 {
                BV_LEVEL
            } else if body[i] == 1 {
                BODY_LEVEL
            } else {
                BACKGROUND_LEVEL
            };
            assert_eq!(img[i], want);
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_phantom(&small(5), Phenotype::Mutant).unwrap();
        let b = generate_phantom(&small(5), Phenotype::Mutant).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.bv_mask, b.bv_mask);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn mutant_differs_only_near_mid_lobe() {
        let cfg = small(11);
        let n = generate_phantom(&cfg, Phenotype::Normal).unwrap();
        let m = generate_phantom(&cfg, Phenotype::Mutant).unwrap();
        assert_eq!(n.body_mask, m.body_mask);
        let mid: Vec<usize> = (0..m.bv_parts.len())
            .filter(|&i| m.bv_parts[i] == LOBE_MID)
            .collect();
        assert!(!mid.is_empty());
        let bbox = |axis: usize| {
            let c = mid.iter().map(|&i| m.bv_mask.coords(i)[axis]);
            (c.clone().min().unwrap(), c.max().unwrap())
        };
        let bb = [bbox(0), bbox(1), bbox(2)];
        let (ni, mi) = (n.image.as_scalar().unwrap(), m.image.as_scalar().unwrap());
        let (nb, mb) = (n.bv_mask.as_label().unwrap(), m.bv_mask.as_label().unwrap());
        let mut differing = 0;
        for i in 0..ni.len() {
            if ni[i] != mi[i] || nb[i] != mb[i] {
                differing += 1;
                let p = m.bv_mask.coords(i);
                assert!((0..3).all(|a| p[a] >= bb[a].0 && p[a] <= bb[a].1));
            }
        }
        assert!(differing > 0);
        assert!(m.bv_mask.count_nonzero() > n.bv_mask.count_nonzero());
    }

    #[test]
    fn bv_strictly_inside_body_and_fractions_hold() {
        let mut fractions = Vec::new();
        for seed in 0..12 {
            for label in [Phenotype::Normal, Phenotype::Mutant] {
                let s = generate_phantom(&small(seed), label).unwrap();
                let body = s.body_mask.as_label().unwrap();
                let bv = s.bv_mask.as_label().unwrap();
                assert!(bv.iter().zip(body).all(|(&v, &b)| v == 0 || b == 1));
                let total = body.len() as f64;
                let bf = s.body_mask.count_nonzero() as f64 / total;
                assert!((0.07..=0.13).contains(&bf), "{bf}");
                assert!((s.bv_mask.count_nonzero() as f64 / total) < 0.005);
                assert!(s.bv_mask.count_nonzero() < s.body_mask.count_nonzero());
                fractions.push(bf);
            }
        }
        let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
        assert!((0.07..=0.13).contains(&mean));
    }

    #[test]
    fn speckle_has_unit_mean() {
        let cfg = PhantomConfig {
            noise_level: 0.15,
            ..small(2)
        };
        let s = generate_phantom(&cfg, Phenotype::Normal).unwrap();
        let img = s.image.as_scalar().unwrap();
        let body = s.body_mask.as_label().unwrap();
        let bv = s.bv_mask.as_label().unwrap();
        let bg: Vec<f64> = (0..img.len())
            .filter(|&i| body[i] == 0 && bv[i] == 0)
            .map(|i| img[i] as f64 / BACKGROUND_LEVEL as f64)
            .collect();
        let mean = bg.iter().sum::<f64>() / bg.len() as f64;
        let var = bg.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / bg.len() as f64;
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
        assert!((var - 0.15).abs() < 0.01, "{var}");
    }

    #[test]
    fn labels_split_by_fraction() {
        let l = dataset_labels(10, 0.5);
        assert_eq!(l.iter().filter(|p| p.is_mutant()).count(), 5);
        assert_eq!(
            dataset_labels(7, 0.0)
                .iter()
                .filter(|p| p.is_mutant())
                .count(),
            0
        );
        assert_eq!(
            dataset_labels(7, 1.0)
                .iter()
                .filter(|p| p.is_mutant())
                .count(),
            7
        );
    }

    #[test]
    fn bad_config_rejected() {
        let cfg = PhantomConfig {
            mutant_lobe_scale: 1.0,
            ..PhantomConfig::default()
        };
        assert!(matches!(
            generate_phantom(&cfg, Phenotype::Normal),
            Err(PhantomError::BadConfig(_))
        ));
    }

    #[test]
    fn dataset_round_trips_and_repeats() {
        let cfg = PhantomConfig {
            vol_dims: [32; 3],
            ..PhantomConfig::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ea = generate_dataset(4, 0.5, &cfg, a.path()).unwrap();
        generate_dataset(4, 0.5, &cfg, b.path()).unwrap();
        assert_eq!(read_manifest(&a.path().join(MANIFEST_NAME)).unwrap(), ea);
        assert_eq!(ea.iter().filter(|e| e.label.is_mutant()).count(), 2);
        for e in &ea {
            for p in [&e.image, &e.body_mask, &e.bv_mask] {
                assert_eq!(
                    fs::read(a.path().join(p)).unwrap(),
                    fs::read(b.path().join(p)).unwrap()
                );
            }
        }
        let manifest = fs::read_to_string(a.path().join(MANIFEST_NAME)).unwrap();
        assert!(manifest.starts_with(MANIFEST_HEADER));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(8))]
            #[test]
            fn emitted_samples_respect_fractions(seed in any::<u64>(), mutant in any::<bool>(), edge in 40usize..56) {
                let cfg = PhantomConfig { vol_dims: [edge; 3], seed, ..PhantomConfig::default() };
                let s = generate_phantom(&cfg, Phenotype::from_mutant(mutant)).unwrap();
                let body = s.body_mask.as_label().unwrap();
                let bv = s.bv_mask.as_label().unwrap();
                prop_assert!(bv.iter().zip(body).all(|(&v, &b)| v == 0 || b == 1));
                prop_assert!(s.bv_mask.count_nonzero() < s.body_mask.count_nonzero());
                let total = body.len() as f64;
                let bf = s.body_mask.count_nonzero() as f64 / total;
                prop_assert!((0.07..=0.13).contains(&bf), "body fraction {}", bf);
                prop_assert!((s.bv_mask.count_nonzero() as f64 / total) < 0.005);
            }
        }
    }
}
