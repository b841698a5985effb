//! `key = value` run configuration with typed getters.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::CliError;

/// Every key a config file may set, with its default (empty: no default).
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("workers", "1"),
    // dataset generation
    ("n", "10"),
    ("mutant_fraction", "0.5"),
    ("vol_dims", "64"),
    ("body_fraction_target", "0.10"),
    ("bv_fraction_max", "0.005"),
    ("mutant_lobe_scale", "1.8"),
    ("noise_level", "0.15"),
    // inputs
    ("manifest", ""),
    ("masks_dir", ""),
    ("predictions_dir", ""),
    ("evaluate_target", "bv"),
    // training
    ("epochs", "10"),
    ("batch_size", "4"),
    ("lr", "0.01"),
    ("momentum", "0.9"),
    ("loss_mix", "0.5"),
    ("neg_pos_ratio", "3"),
    ("containment_threshold", "0.95"),
    ("localizer_width", "4"),
    ("segmenter_width", "4"),
    ("classifier_width", "4"),
    // windows
    ("localizer_window", "32"),
    ("localizer_stride", ""),
    ("bv_window", "32"),
    ("body_window", "32"),
    ("body_train_stride", "16"),
    ("body_stride", ""),
    ("blend_mode", "weighted"),
    ("keep_largest_component", "true"),
    // classification
    ("canonical_dims", "32"),
    ("folds", "6"),
    // checkpoints
    ("localizer_checkpoint", ""),
    ("bv_checkpoint", ""),
    ("body_checkpoint", ""),
    ("classifier_checkpoint", ""),
];

/// Keys whose values are paths, resolved against the config file's directory.
const PATH_KEYS: &[&str] = &[
    "manifest",
    "masks_dir",
    "predictions_dir",
    "localizer_checkpoint",
    "bv_checkpoint",
    "body_checkpoint",
    "classifier_checkpoint",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    /// Paths from the file are relative to this directory.
    base_dir: PathBuf,
}

fn known(key: &str) -> bool {
    KEYS.iter().any(|(k, _)| *k == key)
}

impl RunConfig {
    pub fn defaults() -> Self {
        RunConfig {
            values: KEYS
                .iter()
                .filter(|(_, v)| !v.is_empty())
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
            base_dir: PathBuf::from("."),
        }
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, CliError> {
        let mut cfg = RunConfig::defaults();
        cfg.base_dir = base_dir.to_path_buf();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    ln + 1
                ))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !known(k) {
                return Err(CliError::Config(format!(
                    "unknown key `{k}` on line {}",
                    ln + 1
                )));
            }
            let v = if PATH_KEYS.contains(&k) && !v.is_empty() {
                base_dir.join(v).to_string_lossy().into_owned()
            } else {
                v.to_string()
            };
            cfg.values.insert(k.to_string(), v);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base)
    }

    /// Sets a key from the command line. Paths are taken relative to the
    /// working directory.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        if !known(key) {
            return Err(CliError::Config(format!("unknown key `{key}`")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        debug_assert!(known(key), "undocumented key {key}");
        self.values
            .get(key)
            .map(String::as_str)
            .filter(|v| !v.is_empty())
    }

    pub fn require(&self, key: &str) -> Result<&str, CliError> {
        self.get(key)
            .ok_or_else(|| CliError::Config(format!("missing required key `{key}`")))
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T, CliError> {
        let v = self.require(key)?;
        v.parse()
            .map_err(|_| CliError::Config(format!("key `{key}`: cannot parse `{v}`")))
    }

    pub fn usize(&self, key: &str) -> Result<usize, CliError> {
        self.parsed(key)
    }

    pub fn u64(&self, key: &str) -> Result<u64, CliError> {
        self.parsed(key)
    }

    pub fn f64(&self, key: &str) -> Result<f64, CliError> {
        self.parsed(key)
    }

    pub fn f32(&self, key: &str) -> Result<f32, CliError> {
        self.parsed(key)
    }

    pub fn bool(&self, key: &str) -> Result<bool, CliError> {
        self.parsed(key)
    }

    pub fn path(&self, key: &str) -> Result<PathBuf, CliError> {
        Ok(PathBuf::from(self.require(key)?))
    }

    /// `n` for a cube or `x,y,z`.
    pub fn dims(&self, key: &str) -> Result<[usize; 3], CliError> {
        let v = self.require(key)?;
        let parts: Vec<&str> = v.split(',').map(str::trim).collect();
        let bad = || CliError::Config(format!("key `{key}`: expected `n` or `x,y,z`, got `{v}`"));
        let nums: Vec<usize> = parts
            .iter()
            .map(|p| p.parse().map_err(|_| bad()))
            .collect::<Result<_, _>>()?;
        match nums[..] {
            [n] => Ok([n; 3]),
            [x, y, z] => Ok([x, y, z]),
            _ => Err(bad()),
        }
    }

    /// Dims from `key`, or `fallback` divided by `div` when unset.
    pub fn dims_or(
        &self,
        key: &str,
        fallback: [usize; 3],
        div: usize,
    ) -> Result<[usize; 3], CliError> {
        if self.get(key).is_some() {
            self.dims(key)
        } else {
            Ok(fallback.map(|d| (d / div).max(1)))
        }
    }

    /// Effective configuration, one sorted `key = value` line per set key.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            if !v.is_empty() {
                writeln!(s, "{k} = {v}").unwrap();
            }
        }
        s
    }
}
