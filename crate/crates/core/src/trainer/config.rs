//! Experiment configuration as flat `key = value` text.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are rejected by
//! name. [`TrainConfig::to_text`] writes every key, so a parsed file can be
//! reproduced exactly (checkpoints embed it).

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::dataio::{Augment, FeatureKind};
use crate::{Error, Result};

/// Loss composition of one experiment arm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    /// Student alone, weighted cross-entropy only.
    B1,
    /// Adds the mean teacher with KL distillation.
    B2,
    B2Ccd,
    B2Crp,
    /// B2 with both CCD and CRP.
    Full,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::B1,
        Method::B2,
        Method::B2Ccd,
        Method::B2Crp,
        Method::Full,
    ];

    pub fn uses_teacher(self) -> bool {
        self != Method::B1
    }

    pub fn uses_ccd(self) -> bool {
        matches!(self, Method::B2Ccd | Method::Full)
    }

    pub fn uses_crp(self) -> bool {
        matches!(self, Method::B2Crp | Method::Full)
    }

    pub fn uses_banks(self) -> bool {
        self.uses_ccd() || self.uses_crp()
    }

    pub fn key(self) -> &'static str {
        match self {
            Method::B1 => "b1",
            Method::B2 => "b2",
            Method::B2Ccd => "b2_ccd",
            Method::B2Crp => "b2_crp",
            Method::Full => "full",
        }
    }

    /// Row label used in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            Method::B1 => "B1",
            Method::B2 => "B2 (B1+MT)",
            Method::B2Ccd => "B2+CCD",
            Method::B2Crp => "B2+CRP",
            Method::Full => "CRCKD (B2+CCD+CRP)",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace(['+', '-'], "_").as_str() {
            "b1" | "baseline" => Ok(Method::B1),
            "b2" | "mt" | "mean_teacher" => Ok(Method::B2),
            "b2_ccd" | "ccd" => Ok(Method::B2Ccd),
            "b2_crp" | "crp" => Ok(Method::B2Crp),
            "full" | "crckd" => Ok(Method::Full),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    OneCycle,
    Constant,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSpec {
    Blobs {
        counts: Vec<usize>,
        dim: usize,
        spread: f64,
    },
    Manifest {
        train: PathBuf,
        /// Separate evaluation manifest; when absent the holdout split applies.
        eval: Option<PathBuf>,
        features: FeatureKind,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub seed: u64,
    pub data_seed: u64,
    pub epochs: usize,
    pub ramp_t: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub schedule: LrSchedule,
    pub tau: f64,
    pub k_p: usize,
    pub k_n: usize,
    pub hidden: usize,
    pub feature_dim: usize,
    pub proj_dim: usize,
    pub ema_alpha: f64,
    pub bank_momentum: f64,
    pub lambda1_max: f64,
    pub lambda2_ramp: f64,
    pub lambda2_after: f64,
    pub lambda3_max: f64,
    pub bank_warmup: bool,
    pub checkpoint_every: usize,
    pub classes: usize,
    /// Evaluation samples held out (stratified) when no separate eval set
    /// exists; 0 disables evaluation.
    pub holdout: usize,
    /// When positive, a stratified `folds`-way split replaces the holdout and
    /// fold `fold` is evaluated.
    pub folds: usize,
    pub fold: usize,
    pub dataset: DatasetSpec,
    pub augment: Augment,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Full,
            seed: 0,
            data_seed: 0,
            epochs: 80,
            ramp_t: 30,
            batch_size: 64,
            lr: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            schedule: LrSchedule::OneCycle,
            tau: 0.07,
            k_p: 20,
            k_n: 256,
            hidden: 256,
            feature_dim: 64,
            proj_dim: 32,
            ema_alpha: 0.99,
            bank_momentum: 0.5,
            lambda1_max: 1.0,
            lambda2_ramp: 0.1,
            lambda2_after: 0.01,
            lambda3_max: 1.0,
            bank_warmup: true,
            checkpoint_every: 10,
            classes: 3,
            holdout: 100,
            folds: 0,
            fold: 0,
            dataset: DatasetSpec::Blobs {
                counts: vec![400, 150, 50],
                dim: 16,
                spread: 1.0,
            },
            augment: Augment::Jitter { sigma: 0.1 },
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("key `{key}`: expected a boolean, got `{value}`"))),
    }
}

fn parse_features(value: &str) -> Result<FeatureKind> {
    let bad = || Error::Config(format!("key `features`: expected vector:D or image:CxHxW, got `{value}`"));
    let (kind, dims) = value.split_once(':').ok_or_else(bad)?;
    let dims: Vec<usize> = dims
        .split('x')
        .map(|d| d.trim().parse().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    match (kind.trim(), dims.as_slice()) {
        ("vector", &[dim]) => Ok(FeatureKind::Vector { dim }),
        ("image", &[channels, height, width]) => Ok(FeatureKind::Image {
            channels,
            height,
            width,
        }),
        _ => Err(bad()),
    }
}

fn format_features(f: FeatureKind) -> String {
    match f {
        FeatureKind::Vector { dim } => format!("vector:{dim}"),
        FeatureKind::Image {
            channels,
            height,
            width,
        } => format!("image:{channels}x{height}x{width}"),
    }
}

/// Parsed-but-unassembled dataset keys.
#[derive(Default)]
struct DatasetKeys {
    kind: Option<String>,
    counts: Option<Vec<usize>>,
    dim: Option<usize>,
    spread: Option<f64>,
    manifest: Option<PathBuf>,
    eval_manifest: Option<PathBuf>,
    features: Option<FeatureKind>,
}

impl TrainConfig {
    /// Parses config text. Relative manifest paths resolve against `base`.
    pub fn parse(text: &str, base: Option<&std::path::Path>) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut ds = DatasetKeys::default();
        let mut augment_kind: Option<String> = None;
        let mut jitter_sigma = 0.1;
        let mut max_rotation = 15.0;
        let mut max_shift = 0.1;
        let resolve = |p: &str| -> PathBuf {
            let p = PathBuf::from(p);
            match base {
                Some(b) if p.is_relative() => b.join(p),
                _ => p,
            }
        };
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "method" => cfg.method = value.parse()?,
                "seed" => cfg.seed = parse(key, value)?,
                "data_seed" => cfg.data_seed = parse(key, value)?,
                "epochs" => cfg.epochs = parse(key, value)?,
                "ramp_t" => cfg.ramp_t = parse(key, value)?,
                "batch_size" => cfg.batch_size = parse(key, value)?,
                "lr" => cfg.lr = parse(key, value)?,
                "adam_beta1" => cfg.adam_beta1 = parse(key, value)?,
                "adam_beta2" => cfg.adam_beta2 = parse(key, value)?,
                "schedule" => {
                    cfg.schedule = match value {
                        "one_cycle" => LrSchedule::OneCycle,
                        "constant" => LrSchedule::Constant,
                        _ => return Err(Error::Config(format!("key `schedule`: unknown `{value}`"))),
                    }
                }
                "tau" => cfg.tau = parse(key, value)?,
                "k_p" => cfg.k_p = parse(key, value)?,
                "k_n" => cfg.k_n = parse(key, value)?,
                "hidden" => cfg.hidden = parse(key, value)?,
                "feature_dim" => cfg.feature_dim = parse(key, value)?,
                "proj_dim" => cfg.proj_dim = parse(key, value)?,
                "ema_alpha" => cfg.ema_alpha = parse(key, value)?,
                "bank_momentum" => cfg.bank_momentum = parse(key, value)?,
                "lambda1_max" => cfg.lambda1_max = parse(key, value)?,
                "lambda2_ramp" => cfg.lambda2_ramp = parse(key, value)?,
                "lambda2_after" => cfg.lambda2_after = parse(key, value)?,
                "lambda3_max" => cfg.lambda3_max = parse(key, value)?,
                "bank_warmup" => cfg.bank_warmup = parse_bool(key, value)?,
                "checkpoint_every" => cfg.checkpoint_every = parse(key, value)?,
                "classes" => cfg.classes = parse(key, value)?,
                "holdout" => cfg.holdout = parse(key, value)?,
                "folds" => cfg.folds = parse(key, value)?,
                "fold" => cfg.fold = parse(key, value)?,
                "dataset" => ds.kind = Some(value.to_string()),
                "blob_counts" => {
                    ds.counts = Some(
                        value
                            .split(',')
                            .map(|c| parse(key, c.trim()))
                            .collect::<Result<_>>()?,
                    )
                }
                "blob_dim" => ds.dim = Some(parse(key, value)?),
                "blob_spread" => ds.spread = Some(parse(key, value)?),
                "manifest" => ds.manifest = Some(resolve(value)),
                "eval_manifest" => ds.eval_manifest = Some(resolve(value)),
                "features" => ds.features = Some(parse_features(value)?),
                "augment" => augment_kind = Some(value.to_string()),
                "jitter_sigma" => jitter_sigma = parse(key, value)?,
                "max_rotation_deg" => max_rotation = parse(key, value)?,
                "max_shift_frac" => max_shift = parse(key, value)?,
                _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
            }
        }
        cfg.dataset = match ds.kind.as_deref().unwrap_or("blobs") {
            "blobs" => {
                let DatasetSpec::Blobs { counts, dim, spread } = TrainConfig::default().dataset else {
                    unreachable!("default dataset is blobs")
                };
                DatasetSpec::Blobs {
                    counts: ds.counts.unwrap_or(counts),
                    dim: ds.dim.unwrap_or(dim),
                    spread: ds.spread.unwrap_or(spread),
                }
            }
            "manifest" => DatasetSpec::Manifest {
                train: ds
                    .manifest
                    .ok_or_else(|| Error::Config("key `manifest` is required for dataset = manifest".into()))?,
                eval: ds.eval_manifest,
                features: ds
                    .features
                    .ok_or_else(|| Error::Config("key `features` is required for dataset = manifest".into()))?,
            },
            other => return Err(Error::Config(format!("key `dataset`: unknown `{other}`"))),
        };
        cfg.augment = match augment_kind.as_deref() {
            None => match cfg.feature_kind() {
                FeatureKind::Image { .. } => Augment::FlipAffine {
                    max_rotation_deg: max_rotation,
                    max_shift_frac: max_shift,
                },
                FeatureKind::Vector { .. } => Augment::Jitter { sigma: jitter_sigma },
            },
            Some("jitter") => Augment::Jitter { sigma: jitter_sigma },
            Some("affine") => Augment::FlipAffine {
                max_rotation_deg: max_rotation,
                max_shift_frac: max_shift,
            },
            Some("none") => Augment::None,
            Some(other) => return Err(Error::Config(format!("key `augment`: unknown `{other}`"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn feature_kind(&self) -> FeatureKind {
        match &self.dataset {
            DatasetSpec::Blobs { dim, .. } => FeatureKind::Vector { dim: *dim },
            DatasetSpec::Manifest { features, .. } => *features,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return fail("epochs must be positive".into());
        }
        if self.ramp_t == 0 || self.ramp_t > self.epochs {
            return fail(format!("ramp_t must be in [1, epochs], got {}", self.ramp_t));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        for (name, v) in [("lr", self.lr), ("tau", self.tau)] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
            ("ema_alpha", self.ema_alpha),
            ("bank_momentum", self.bank_momentum),
        ] {
            if !(0.0..1.0).contains(&v) {
                return fail(format!("{name} must be in [0, 1), got {v}"));
            }
        }
        for (name, v) in [
            ("lambda1_max", self.lambda1_max),
            ("lambda2_ramp", self.lambda2_ramp),
            ("lambda2_after", self.lambda2_after),
            ("lambda3_max", self.lambda3_max),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be non-negative, got {v}"));
            }
        }
        if self.k_p == 0 || self.k_n == 0 {
            return fail("k_p and k_n must be positive".into());
        }
        if self.proj_dim >= self.feature_dim {
            return fail(format!(
                "proj_dim ({}) must be smaller than feature_dim ({})",
                self.proj_dim, self.feature_dim
            ));
        }
        if self.classes < 2 {
            return fail("classes must be at least 2".into());
        }
        if self.folds == 1 || (self.folds > 1 && self.fold >= self.folds) {
            return fail(format!("fold {} of {} is not a valid split", self.fold, self.folds));
        }
        if let DatasetSpec::Blobs { counts, dim, spread } = &self.dataset {
            if counts.len() != self.classes {
                return fail(format!(
                    "blob_counts lists {} classes but classes = {}",
                    counts.len(),
                    self.classes
                ));
            }
            if *dim == 0 || !(*spread >= 0.0) {
                return fail("blob_dim must be positive and blob_spread non-negative".into());
            }
        }
        Ok(())
    }

    /// Every key, one per line; [`TrainConfig::parse`] reads it back.
    pub fn to_text(&self) -> String {
        let mut lines = vec![
            format!("method = {}", self.method),
            format!("seed = {}", self.seed),
            format!("data_seed = {}", self.data_seed),
            format!("epochs = {}", self.epochs),
            format!("ramp_t = {}", self.ramp_t),
            format!("batch_size = {}", self.batch_size),
            format!("lr = {:?}", self.lr),
            format!("adam_beta1 = {:?}", self.adam_beta1),
            format!("adam_beta2 = {:?}", self.adam_beta2),
            format!(
                "schedule = {}",
                match self.schedule {
                    LrSchedule::OneCycle => "one_cycle",
                    LrSchedule::Constant => "constant",
                }
            ),
            format!("tau = {:?}", self.tau),
            format!("k_p = {}", self.k_p),
            format!("k_n = {}", self.k_n),
            format!("hidden = {}", self.hidden),
            format!("feature_dim = {}", self.feature_dim),
            format!("proj_dim = {}", self.proj_dim),
            format!("ema_alpha = {:?}", self.ema_alpha),
            format!("bank_momentum = {:?}", self.bank_momentum),
            format!("lambda1_max = {:?}", self.lambda1_max),
            format!("lambda2_ramp = {:?}", self.lambda2_ramp),
            format!("lambda2_after = {:?}", self.lambda2_after),
            format!("lambda3_max = {:?}", self.lambda3_max),
            format!("bank_warmup = {}", self.bank_warmup),
            format!("checkpoint_every = {}", self.checkpoint_every),
            format!("classes = {}", self.classes),
            format!("holdout = {}", self.holdout),
            format!("folds = {}", self.folds),
            format!("fold = {}", self.fold),
        ];
        match &self.dataset {
            DatasetSpec::Blobs { counts, dim, spread } => {
                lines.push("dataset = blobs".into());
                let counts: Vec<String> = counts.iter().map(usize::to_string).collect();
                lines.push(format!("blob_counts = {}", counts.join(",")));
                lines.push(format!("blob_dim = {dim}"));
                lines.push(format!("blob_spread = {spread:?}"));
            }
            DatasetSpec::Manifest {
                train,
                eval,
                features,
            } => {
                lines.push("dataset = manifest".into());
                lines.push(format!("manifest = {}", train.display()));
                if let Some(e) = eval {
                    lines.push(format!("eval_manifest = {}", e.display()));
                }
                lines.push(format!("features = {}", format_features(*features)));
            }
        }
        match self.augment {
            Augment::Jitter { sigma } => {
                lines.push("augment = jitter".into());
                lines.push(format!("jitter_sigma = {sigma:?}"));
            }
            Augment::FlipAffine {
                max_rotation_deg,
                max_shift_frac,
            } => {
                lines.push("augment = affine".into());
                lines.push(format!("max_rotation_deg = {max_rotation_deg:?}"));
                lines.push(format!("max_shift_frac = {max_shift_frac:?}"));
            }
            Augment::None => lines.push("augment = none".into()),
        }
        lines.push(String::new());
        lines.join("\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.ramp_t, c.batch_size), (80, 30, 64));
        assert_eq!((c.lr, c.adam_beta1, c.adam_beta2), (1e-4, 0.5, 0.999));
        assert_eq!((c.tau, c.k_p), (0.07, 20));
        assert_eq!((c.lambda2_ramp, c.lambda2_after), (0.1, 0.01));
    }

    #[test]
    fn text_round_trip() {
        let text = "method = b2_crp\nlr = 3e-3\nblob_counts = 10,5\nclasses = 2\nepochs = 5\nramp_t = 2 # short\n";
        let cfg = TrainConfig::parse(text, None).unwrap();
        assert_eq!(cfg.method, Method::B2Crp);
        assert_eq!(cfg.lr, 3e-3);
        assert_eq!(TrainConfig::parse(&cfg.to_text(), None).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = TrainConfig::parse("learning_rate = 1", None).unwrap_err();
        assert!(err.to_string().contains("learning_rate"));
    }

    #[test]
    fn manifest_config() {
        let text = "dataset = manifest\nmanifest = data/train.csv\nfeatures = image:1x8x8\nclasses = 2\n";
        let cfg = TrainConfig::parse(text, Some(std::path::Path::new("/exp"))).unwrap();
        match &cfg.dataset {
            DatasetSpec::Manifest { train, features, .. } => {
                assert_eq!(train, &PathBuf::from("/exp/data/train.csv"));
                assert_eq!(
                    *features,
                    FeatureKind::Image {
                        channels: 1,
                        height: 8,
                        width: 8
                    }
                );
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(cfg.augment, Augment::FlipAffine { .. }));
    }

    #[test]
    fn invariants_enforced() {
        assert!(TrainConfig::parse("ramp_t = 100", None).is_err());
        assert!(TrainConfig::parse("proj_dim = 64", None).is_err());
        assert!(TrainConfig::parse("lr = 0", None).is_err());
    }
}
