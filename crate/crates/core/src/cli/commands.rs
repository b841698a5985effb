use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{CliError, InferStage, RunConfig, TrainStage};
use crate::classify::{cross_validate, predict, saliency as saliency_map, NetworkFoldTrainer};
use crate::inference::scan_windows;
use crate::inference::{segment_body, segment_bv, BlendMode, InferenceError};
use crate::metrics::{dice, fmt_rate, summarize, ConfusionMatrix, Phenotype};
use crate::nets::{build, load_checkpoint, save_checkpoint, Network, NetworkKind, NetworkSpec};
use crate::phantom::{generate_dataset, read_manifest, PhantomConfig};
use crate::pose::{
    canonical_rotation, canonicalize as canonical_mask, foreground_moments, resample_canonical,
};
use crate::training::{
    assign_folds, extract_body_patches, extract_bv_patches, label_windows, train_classifier,
    train_localizer, train_segmenter, LocalizerDataset, LossLog, TrainConfig,
};
use crate::volio::{normalize_intensity, read_volume, write_volume, Volume, VolumeError};

type Result<T> = std::result::Result<T, CliError>;

/// One manifest row with paths resolved against the manifest directory.
struct Case {
    name: String,
    image: PathBuf,
    body: PathBuf,
    bv: PathBuf,
    label: Phenotype,
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn cases(cfg: &RunConfig) -> Result<Vec<Case>> {
    let manifest = cfg.path("manifest")?;
    let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let entries = read_manifest(&manifest)?;
    if entries.is_empty() {
        return Err(CliError::at(&manifest, "manifest lists no cases"));
    }
    Ok(entries
        .into_iter()
        .map(|e| Case {
            name: stem(&e.image),
            image: base.join(&e.image),
            body: base.join(&e.body_mask),
            bv: base.join(&e.bv_mask),
            label: e.label,
        })
        .collect())
}

fn read(path: &Path) -> Result<Volume> {
    read_volume(path).map_err(|e| match e {
        VolumeError::Io { .. } => CliError::Volume(e),
        other => CliError::at(path, other),
    })
}

/// Reads an image and z-scores it.
fn read_image(path: &Path) -> Result<Volume> {
    normalize_intensity(&read(path)?).map_err(|e| CliError::at(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::at(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::at(path, e))
}

fn load_kind(cfg: &RunConfig, key: &str, kind: NetworkKind) -> Result<Network> {
    let path = cfg.path(key)?;
    let net = load_checkpoint(&path).map_err(|e| CliError::at(&path, e))?;
    if net.spec().kind != kind {
        return Err(CliError::at(
            &path,
            format!(
                "expected a {kind:?} checkpoint, found {:?}",
                net.spec().kind
            ),
        ));
    }
    Ok(net)
}

fn train_config(cfg: &RunConfig) -> Result<TrainConfig> {
    let tc = TrainConfig {
        epochs: cfg.usize("epochs")?,
        batch_size: cfg.usize("batch_size")?,
        lr: cfg.f32("lr")?,
        momentum: cfg.f32("momentum")?,
        seed: cfg.u64("seed")?,
        loss_mix: cfg.f32("loss_mix")?,
        neg_pos_ratio: cfg.f64("neg_pos_ratio")?,
    };
    tc.validate()?;
    Ok(tc)
}

pub fn phantom(cfg: &RunConfig, out: &Path) -> Result<()> {
    let pc = PhantomConfig {
        vol_dims: cfg.dims("vol_dims")?,
        body_fraction_target: cfg.f64("body_fraction_target")?,
        bv_fraction_max: cfg.f64("bv_fraction_max")?,
        mutant_lobe_scale: cfg.f64("mutant_lobe_scale")?,
        noise_level: cfg.f64("noise_level")?,
        seed: cfg.u64("seed")?,
    };
    let n = cfg.usize("n")?;
    let entries = generate_dataset(n, cfg.f64("mutant_fraction")?, &pc, out)?;
    println!("wrote {} phantoms to {}", entries.len(), out.display());
    Ok(())
}

pub fn train(cfg: &RunConfig, out: &Path, stage: TrainStage) -> Result<()> {
    let tc = train_config(cfg)?;
    let threshold = cfg.f64("containment_threshold")?;
    let (net, log, name): (Network, LossLog, &str) = match stage {
        TrainStage::Localizer => {
            let window = cfg.dims("localizer_window")?;
            let stride = cfg.dims_or("localizer_stride", window, 4)?;
            let mut volumes = Vec::new();
            let mut windows = Vec::new();
            for (i, c) in cases(cfg)?.iter().enumerate() {
                let img = read_image(&c.image)?;
                let scan = scan_windows(img.dims(), window, stride)?;
                windows.extend(label_windows(&read(&c.bv)?, i, &scan, threshold));
                volumes.push(img);
            }
            let spec = NetworkSpec::new(
                NetworkKind::Localizer,
                cfg.usize("localizer_width")?,
                window,
            );
            let mut net = build(&spec, tc.seed)?;
            let data = LocalizerDataset {
                volumes: &volumes,
                windows: &windows,
            };
            let log = train_localizer(&mut net, &data, &tc)?;
            (net, log, "localizer")
        }
        TrainStage::BvSeg => {
            let window = cfg.dims("bv_window")?;
            let stride = cfg.dims_or("localizer_stride", window, 4)?;
            let mut pairs = Vec::new();
            for c in cases(cfg)? {
                let p = extract_bv_patches(
                    &read_image(&c.image)?,
                    &read(&c.bv)?,
                    window,
                    stride,
                    threshold,
                )
                .map_err(|e| CliError::at(&c.bv, e))?;
                pairs.extend(p);
            }
            let spec = NetworkSpec::new(
                NetworkKind::FcnSegmenter,
                cfg.usize("segmenter_width")?,
                window,
            );
            let mut net = build(&spec, tc.seed)?;
            let log = train_segmenter(&mut net, &pairs, &tc)?;
            (net, log, "bv_seg")
        }
        TrainStage::BodySeg => {
            let window = cfg.dims("body_window")?;
            let stride = cfg.dims("body_train_stride")?;
            let mut pairs = Vec::new();
            for c in cases(cfg)? {
                pairs.extend(extract_body_patches(
                    &read_image(&c.image)?,
                    &read(&c.body)?,
                    window,
                    stride,
                )?);
            }
            let spec = NetworkSpec::new(
                NetworkKind::FcnSegmenter,
                cfg.usize("segmenter_width")?,
                window,
            );
            let mut net = build(&spec, tc.seed)?;
            let log = train_segmenter(&mut net, &pairs, &tc)?;
            (net, log, "body_seg")
        }
        TrainStage::Classifier => {
            let set = classifier_inputs(cfg)?;
            let labels = set.labels()?;
            let spec = NetworkSpec::new(
                NetworkKind::Classifier,
                cfg.usize("classifier_width")?,
                cfg.dims("canonical_dims")?,
            );
            let mut net = build(&spec, tc.seed)?;
            let log = train_classifier(&mut net, &set.masks, &labels, &tc)?;
            (net, log, "classifier")
        }
    };
    let ckpt = out.join(format!("{name}.mck"));
    save_checkpoint(&net, &ckpt).map_err(|e| CliError::at(&ckpt, e))?;
    write_text(&out.join("loss.csv"), &log.to_text())?;
    println!("wrote {}", ckpt.display());
    Ok(())
}

pub fn infer(cfg: &RunConfig, out: &Path, stage: InferStage) -> Result<()> {
    match stage {
        InferStage::Bv => {
            let localizer = load_kind(cfg, "localizer_checkpoint", NetworkKind::Localizer)?;
            let fcn = load_kind(cfg, "bv_checkpoint", NetworkKind::FcnSegmenter)?;
            let stride = cfg.dims_or("localizer_stride", localizer.spec().input_dims, 4)?;
            let keep = cfg.bool("keep_largest_component")?;
            let dir = out.join("bv");
            mkdir(&dir)?;
            let mut log = String::from(
                "case,center_x,center_y,center_z,positive_windows,max_prob,fallback\n",
            );
            for c in cases(cfg)? {
                let raw = read(&c.image)?;
                let img = normalize_intensity(&raw).map_err(|e| CliError::at(&c.image, e))?;
                let (mask, loc) =
                    segment_bv(&img, &localizer, &fcn, stride, keep).map_err(|e| at_case(&c, e))?;
                write_volume(
                    &mask.with_spacing(raw.spacing())?,
                    dir.join(format!("{}.mvf", c.name)),
                )?;
                let [x, y, z] = loc.center;
                writeln!(
                    log,
                    "{},{x},{y},{z},{},{:.6},{}",
                    c.name, loc.positive_count, loc.max_prob, loc.fallback
                )
                .unwrap();
            }
            write_text(&out.join("localization.csv"), &log)
        }
        InferStage::Body => {
            let fcn = load_kind(cfg, "body_checkpoint", NetworkKind::FcnSegmenter)?;
            let stride = cfg.dims_or("body_stride", fcn.spec().input_dims, 2)?;
            let mode = blend_mode(cfg)?;
            let dir = out.join("body");
            mkdir(&dir)?;
            for c in cases(cfg)? {
                let raw = read(&c.image)?;
                let img = normalize_intensity(&raw).map_err(|e| CliError::at(&c.image, e))?;
                let mask = segment_body(&img, &fcn, stride, mode).map_err(|e| at_case(&c, e))?;
                write_volume(
                    &mask.with_spacing(raw.spacing())?,
                    dir.join(format!("{}.mvf", c.name)),
                )?;
            }
            Ok(())
        }
        InferStage::Classify => {
            let net = load_kind(cfg, "classifier_checkpoint", NetworkKind::Classifier)?;
            let set = classifier_inputs(cfg)?;
            let mut text = String::from(PREDICTIONS_HEADER);
            text.push('\n');
            for (name, m) in set.names.iter().zip(&set.masks) {
                let p = predict(m, &net)?;
                writeln!(text, "{name},{},{:.6}", p.label.as_str(), p.prob_mutant).unwrap();
            }
            write_text(&out.join(PREDICTIONS_NAME), &text)
        }
    }
}

const PREDICTIONS_NAME: &str = "predictions.csv";
const PREDICTIONS_HEADER: &str = "case,label,prob_mutant";

fn at_case(c: &Case, e: InferenceError) -> CliError {
    CliError::at(&c.image, e)
}

fn blend_mode(cfg: &RunConfig) -> Result<BlendMode> {
    let v = cfg.require("blend_mode")?;
    BlendMode::parse(v).ok_or_else(|| {
        CliError::Config(format!("blend_mode must be weighted or uniform, got `{v}`"))
    })
}

/// Masks named for their case, from `masks_dir` when set and the
/// manifest's ventricle masks otherwise.
fn mask_sources(cfg: &RunConfig) -> Result<Vec<(String, PathBuf)>> {
    if let Some(dir) = cfg.get("masks_dir") {
        let dir = PathBuf::from(dir);
        let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| CliError::at(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "mvf"))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(CliError::at(&dir, "no .mvf masks found"));
        }
        Ok(paths.into_iter().map(|p| (stem(&p), p)).collect())
    } else {
        Ok(cases(cfg)?.into_iter().map(|c| (c.name, c.bv)).collect())
    }
}

struct ClassifierInputs {
    names: Vec<String>,
    masks: Vec<Volume>,
    labels: Vec<Option<Phenotype>>,
}

impl ClassifierInputs {
    fn labels(&self) -> Result<Vec<Phenotype>> {
        self.names
            .iter()
            .zip(&self.labels)
            .map(|(n, l)| {
                l.ok_or_else(|| CliError::Config(format!("no manifest label for case `{n}`")))
            })
            .collect()
    }
}

/// Canonical masks for the classifier. Masks already on the canonical grid
/// are used as is; others are canonicalized first. Labels come from the
/// manifest when one is configured.
fn classifier_inputs(cfg: &RunConfig) -> Result<ClassifierInputs> {
    let dims = cfg.dims("canonical_dims")?;
    let known: BTreeMap<String, Phenotype> = match cfg.get("manifest") {
        Some(_) => cases(cfg)?.into_iter().map(|c| (c.name, c.label)).collect(),
        None => BTreeMap::new(),
    };
    let mut set = ClassifierInputs {
        names: Vec::new(),
        masks: Vec::new(),
        labels: Vec::new(),
    };
    for (name, path) in mask_sources(cfg)? {
        let m = read(&path)?;
        let m = if m.dims() == dims {
            m
        } else {
            canonical_mask(&m, dims).map_err(|e| CliError::at(&path, e))?
        };
        set.labels.push(known.get(&name).copied());
        set.names.push(name);
        set.masks.push(m);
    }
    Ok(set)
}

pub fn canonicalize(cfg: &RunConfig, out: &Path) -> Result<()> {
    let dims = cfg.dims("canonical_dims")?;
    let dir = out.join("canonical");
    mkdir(&dir)?;
    let mut poses = String::from("case,r00,r01,r02,r10,r11,r12,r20,r21,r22,centroid_x,centroid_y,centroid_z,ambiguous_order\n");
    for (name, path) in mask_sources(cfg)? {
        let m = read(&path)?;
        let t = foreground_moments(&m)
            .and_then(|mo| canonical_rotation(&mo, dims))
            .map_err(|e| CliError::at(&path, e))?;
        write_volume(
            &resample_canonical(&m, &t)?,
            dir.join(format!("{name}.mvf")),
        )?;
        write!(poses, "{name}").unwrap();
        for v in t.rotation.iter().flatten().chain(t.centroid().iter()) {
            write!(poses, ",{v:.9}").unwrap();
        }
        writeln!(poses, ",{}", t.ambiguous_order).unwrap();
    }
    write_text(&out.join("poses.csv"), &poses)
}

pub fn evaluate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let target = cfg.require("evaluate_target")?;
    let pred_dir = cfg.path("predictions_dir")?;
    let cases = cases(cfg)?;
    let mut report = String::new();
    match target {
        "bv" | "body" => {
            writeln!(report, "case,dice").unwrap();
            let mut total = 0.0;
            for c in &cases {
                let gt = read(if target == "bv" { &c.bv } else { &c.body })?;
                let path = pred_dir.join(format!("{}.mvf", c.name));
                let d = dice(&read(&path)?, &gt).map_err(|e| CliError::at(&path, e))?;
                total += d;
                writeln!(report, "{},{d:.6}", c.name).unwrap();
            }
            writeln!(report, "mean_dice,{:.6}", total / cases.len() as f64).unwrap();
        }
        "classify" => {
            let path = pred_dir.join(PREDICTIONS_NAME);
            let predicted = read_predictions(&path)?;
            let mut m = ConfusionMatrix::default();
            for c in &cases {
                let p = predicted.get(&c.name).ok_or_else(|| {
                    CliError::at(&path, format!("no prediction for case `{}`", c.name))
                })?;
                m.add(c.label.is_mutant(), p.is_mutant());
            }
            let s = summarize(&m);
            writeln!(report, "{m}").unwrap();
            writeln!(report, "accuracy,{}", fmt_rate(s.accuracy)).unwrap();
            writeln!(report, "sensitivity,{}", fmt_rate(s.sensitivity)).unwrap();
            writeln!(report, "specificity,{}", fmt_rate(s.specificity)).unwrap();
        }
        other => {
            return Err(CliError::Config(format!(
                "evaluate_target must be bv, body or classify, got `{other}`"
            )))
        }
    }
    write_text(&out.join("evaluation.txt"), &report)?;
    print!("{report}");
    Ok(())
}

fn read_predictions(path: &Path) -> Result<BTreeMap<String, Phenotype>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::at(path, e))?;
    let mut out = BTreeMap::new();
    for (ln, line) in text.lines().enumerate() {
        if line.is_empty() || line == PREDICTIONS_HEADER {
            continue;
        }
        let mut f = line.split(',');
        let (Some(name), Some(label)) = (f.next(), f.next()) else {
            return Err(CliError::at(
                path,
                format!("line {}: expected case,label,...", ln + 1),
            ));
        };
        let label = Phenotype::parse(label.trim())
            .ok_or_else(|| CliError::at(path, format!("line {}: bad label `{label}`", ln + 1)))?;
        out.insert(name.trim().to_string(), label);
    }
    Ok(out)
}

pub fn crossval(cfg: &RunConfig, out: &Path) -> Result<()> {
    let set = classifier_inputs(cfg)?;
    let labels = set.labels()?;
    let k = cfg.usize("folds")?;
    let tc = train_config(cfg)?;
    let folds = assign_folds(&labels, k, tc.seed)?;
    let trainer = NetworkFoldTrainer {
        masks: &set.masks,
        labels: &labels,
        spec: NetworkSpec::new(
            NetworkKind::Classifier,
            cfg.usize("classifier_width")?,
            cfg.dims("canonical_dims")?,
        ),
        config: tc,
    };
    let cv = cross_validate(&labels, &folds, k, &trainer)?;
    let mut per_case = String::from("case,fold,truth,prediction\n");
    for (i, name) in set.names.iter().enumerate() {
        writeln!(
            per_case,
            "{name},{},{},{}",
            folds[i],
            labels[i].as_str(),
            cv.predictions[i].as_str()
        )
        .unwrap();
    }
    write_text(&out.join("folds.csv"), &per_case)?;
    let report = cv.report();
    write_text(&out.join("report.txt"), &report)?;
    print!("{report}");
    Ok(())
}

pub fn saliency(cfg: &RunConfig, out: &Path) -> Result<()> {
    let net = load_kind(cfg, "classifier_checkpoint", NetworkKind::Classifier)?;
    let set = classifier_inputs(cfg)?;
    let dir = out.join("saliency");
    mkdir(&dir)?;
    let mut table = String::from("case,label,prob_mutant,salient_voxels\n");
    for (name, m) in set.names.iter().zip(&set.masks) {
        let s = saliency_map(m, &net)?;
        write_volume(&s.map, dir.join(format!("{name}.mvf")))?;
        writeln!(
            table,
            "{name},{},{:.6},{}",
            s.prediction.label.as_str(),
            s.prediction.prob_mutant,
            s.map.count_nonzero()
        )
        .unwrap();
    }
    write_text(&out.join("saliency.csv"), &table)
}
