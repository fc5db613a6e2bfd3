//! Run configuration: flat `key=value` lines with dotted section prefixes.
//! Blank lines and `#` comments are ignored; unknown keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;
use vexkit::metrics::CostParams;
use vexkit::train::TrainConfig;
use vexkit::trunk::{Family, TrunkConfig, WidthMultiplier};
use vexkit_ndgrad::SgdConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("missing required key `{0}`")]
    Missing(&'static str),
    #[error("bad value for `{key}`: {msg}")]
    Value { key: String, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// Random (whole-set) trial pairs to generate.
    pub trials: usize,
    /// Same nationality and gender pairs; 0 disables the hard list.
    pub hard_trials: usize,
    pub min_group: usize,
    pub cost: CostParams,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            trials: 2000,
            hard_trials: 2000,
            min_group: vexkit::trials::DEFAULT_MIN_GROUP,
            cost: CostParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub manifest: PathBuf,
    pub workdir: PathBuf,
    /// Frames mirrored on each side of every utterance spectrogram.
    pub pad_frames: usize,
    pub trunk: TrunkConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Defaults for everything except the mandatory seed and paths.
    pub fn with_defaults(seed: u64, manifest: PathBuf, workdir: PathBuf) -> Self {
        Self {
            seed,
            manifest,
            workdir,
            pad_frames: 1,
            trunk: TrunkConfig::default(),
            train: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
        }
    }

    /// Settings sized for the synthetic toy corpus on one CPU core.
    pub fn toy(seed: u64, manifest: PathBuf, workdir: PathBuf, n_speakers: usize) -> Self {
        let mut c = Self::with_defaults(seed, manifest, workdir);
        c.trunk.family = Family::Resnet34;
        c.trunk.width = WidthMultiplier::new(1, 16).expect("valid");
        c.trunk.num_classes = n_speakers;
        c.train.pretrain = SgdConfig {
            lr_initial: 0.05,
            lr_final: 0.005,
            epochs: 6,
            batch_size: 16,
            ..SgdConfig::default()
        };
        c.train.finetune = SgdConfig {
            lr_initial: 0.005,
            lr_final: 0.005,
            epochs: 1,
            batch_size: 16,
            ..SgdConfig::default()
        };
        c.train.pairs_per_epoch = 320;
        c.eval.trials = 800;
        c.eval.hard_trials = 800;
        c
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.trunk.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.eval.cost.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.train.seed != self.seed {
            return Err(ConfigError::Invalid("train seed must equal the run seed".into()));
        }
        if self.eval.min_group < 2 {
            return Err(ConfigError::Invalid("eval.min_group must be at least 2".into()));
        }
        Ok(())
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let mut v = vec![
            ("seed", self.seed.to_string()),
            ("manifest", self.manifest.display().to_string()),
            ("workdir", self.workdir.display().to_string()),
            ("frontend.pad_frames", self.pad_frames.to_string()),
            ("trunk.family", self.trunk.family.to_string()),
            ("trunk.width", self.trunk.width.to_string()),
            ("trunk.num_classes", self.trunk.num_classes.to_string()),
            ("trunk.embed_dim", self.trunk.embed_dim.to_string()),
        ];
        for (prefix, s) in [("pretrain", &t.pretrain), ("finetune", &t.finetune)] {
            let keys: [(&'static str, &'static str, String); 6] = [
                ("pretrain.epochs", "finetune.epochs", s.epochs.to_string()),
                ("pretrain.batch_size", "finetune.batch_size", s.batch_size.to_string()),
                ("pretrain.lr_initial", "finetune.lr_initial", s.lr_initial.to_string()),
                ("pretrain.lr_final", "finetune.lr_final", s.lr_final.to_string()),
                ("pretrain.momentum", "finetune.momentum", s.momentum.to_string()),
                ("pretrain.weight_decay", "finetune.weight_decay", s.weight_decay.to_string()),
            ];
            for (a, b, value) in keys {
                v.push((if prefix == "pretrain" { a } else { b }, value));
            }
        }
        v.extend([
            ("train.patience", t.patience.to_string()),
            ("train.margin", t.margin.to_string()),
            ("train.pos_fraction", t.pos_fraction.to_string()),
            ("train.keep_fraction", t.keep_fraction.to_string()),
            ("train.hard_mix", t.hard_mix.to_string()),
            ("train.pairs_per_epoch", t.pairs_per_epoch.to_string()),
            ("train.pool_factor", t.pool_factor.to_string()),
            ("train.crop_frames", t.crop_frames.to_string()),
            ("train.f32_storage", t.f32_storage.to_string()),
            ("eval.trials", self.eval.trials.to_string()),
            ("eval.hard_trials", self.eval.hard_trials.to_string()),
            ("eval.min_group", self.eval.min_group.to_string()),
            ("eval.p_target", self.eval.cost.p_target.to_string()),
            ("eval.c_miss", self.eval.cost.c_miss.to_string()),
            ("eval.c_fa", self.eval.cost.c_fa.to_string()),
        ]);
        v
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    /// Parses config text; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut kv: BTreeMap<String, String> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                msg: "expected key=value".into(),
            })?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if kv.insert(k.clone(), v).is_some() {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    msg: format!("duplicate key `{k}`"),
                });
            }
        }
        let seed: u64 = take(&mut kv, "seed")?.ok_or(ConfigError::Missing("seed"))?;
        let path = |p: String| {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        let manifest = path(take::<String>(&mut kv, "manifest")?.ok_or(ConfigError::Missing("manifest"))?);
        let workdir = path(take::<String>(&mut kv, "workdir")?.ok_or(ConfigError::Missing("workdir"))?);
        let mut c = Self::with_defaults(seed, manifest, workdir);
        set(&mut kv, "frontend.pad_frames", &mut c.pad_frames)?;
        set(&mut kv, "trunk.family", &mut c.trunk.family)?;
        set(&mut kv, "trunk.width", &mut c.trunk.width)?;
        set(&mut kv, "trunk.num_classes", &mut c.trunk.num_classes)?;
        set(&mut kv, "trunk.embed_dim", &mut c.trunk.embed_dim)?;
        for (prefix, s) in [("pretrain", &mut c.train.pretrain), ("finetune", &mut c.train.finetune)] {
            set(&mut kv, &format!("{prefix}.epochs"), &mut s.epochs)?;
            set(&mut kv, &format!("{prefix}.batch_size"), &mut s.batch_size)?;
            set(&mut kv, &format!("{prefix}.lr_initial"), &mut s.lr_initial)?;
            set(&mut kv, &format!("{prefix}.lr_final"), &mut s.lr_final)?;
            set(&mut kv, &format!("{prefix}.momentum"), &mut s.momentum)?;
            set(&mut kv, &format!("{prefix}.weight_decay"), &mut s.weight_decay)?;
        }
        let t = &mut c.train;
        set(&mut kv, "train.patience", &mut t.patience)?;
        set(&mut kv, "train.margin", &mut t.margin)?;
        set(&mut kv, "train.pos_fraction", &mut t.pos_fraction)?;
        set(&mut kv, "train.keep_fraction", &mut t.keep_fraction)?;
        set(&mut kv, "train.hard_mix", &mut t.hard_mix)?;
        set(&mut kv, "train.pairs_per_epoch", &mut t.pairs_per_epoch)?;
        set(&mut kv, "train.pool_factor", &mut t.pool_factor)?;
        set(&mut kv, "train.crop_frames", &mut t.crop_frames)?;
        set(&mut kv, "train.f32_storage", &mut t.f32_storage)?;
        let e = &mut c.eval;
        set(&mut kv, "eval.trials", &mut e.trials)?;
        set(&mut kv, "eval.hard_trials", &mut e.hard_trials)?;
        set(&mut kv, "eval.min_group", &mut e.min_group)?;
        set(&mut kv, "eval.p_target", &mut e.cost.p_target)?;
        set(&mut kv, "eval.c_miss", &mut e.cost.c_miss)?;
        set(&mut kv, "eval.c_fa", &mut e.cost.c_fa)?;
        if let Some(k) = kv.keys().next() {
            return Err(ConfigError::UnknownKey(k.clone()));
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }
}

fn take<T: std::str::FromStr>(kv: &mut BTreeMap<String, String>, key: &str) -> Result<Option<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    kv.remove(key)
        .map(|v| {
            v.parse::<T>().map_err(|e| ConfigError::Value {
                key: key.to_string(),
                msg: format!("`{v}`: {e}"),
            })
        })
        .transpose()
}

fn set<T: std::str::FromStr>(kv: &mut BTreeMap<String, String>, key: &str, slot: &mut T) -> Result<(), ConfigError>
where
    T::Err: std::fmt::Display,
{
    if let Some(v) = take(kv, key)? {
        *slot = v;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let c = RunConfig::toy(11, "/data/m.txt".into(), "/work".into(), 20);
        let back = RunConfig::parse(&c.to_text(), Path::new("/")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn relative_paths_and_defaults() {
        let c = RunConfig::parse("seed=3\nmanifest=m.txt\nworkdir=w\n# comment\n", Path::new("/base")).unwrap();
        assert_eq!(c.manifest, PathBuf::from("/base/m.txt"));
        assert_eq!(c.trunk.num_classes, 5994);
        assert_eq!(c.train.seed, 3);
    }

    #[test]
    fn errors() {
        let base = Path::new("/");
        assert!(matches!(RunConfig::parse("manifest=a\nworkdir=b\n", base), Err(ConfigError::Missing("seed"))));
        assert!(matches!(
            RunConfig::parse("seed=1\nmanifest=a\nworkdir=b\ntrunk.colour=red\n", base),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            RunConfig::parse("seed=1\nmanifest=a\nworkdir=b\ntrunk.family=alexnet\n", base),
            Err(ConfigError::Value { .. })
        ));
        assert!(matches!(RunConfig::parse("seed=1\nnonsense\n", base), Err(ConfigError::Syntax { line: 2, .. })));
        assert!(matches!(
            RunConfig::parse("seed=1\nmanifest=a\nworkdir=b\ntrain.margin=-1\n", base),
            Err(ConfigError::Invalid(_))
        ));
    }
}
