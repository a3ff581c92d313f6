//! Line-oriented `key = value` run configuration. `#` starts a comment;
//! unknown keys are rejected by name, as are malformed values.

use crate::data::AugmentPolicy;
use crate::{Error, Result};
use nusg_core::model::Arch;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Bce,
    Focal,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub arch: Arch,
    pub data_root: PathBuf,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub input_size: usize,
    pub train_fraction: f64,
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub loss: LossKind,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub focal_lambda_max: f64,
    pub focal_mu_ref: f64,
    pub augment: bool,
    pub aug: AugmentPolicy,
    /// Checkpoint every this many steps (0 = final checkpoint only).
    pub checkpoint_every: u64,
}

impl RunConfig {
    fn with_required(arch: Arch, data_root: PathBuf) -> Self {
        Self {
            arch,
            data_root,
            checkpoint: PathBuf::from("checkpoint.nusg"),
            log: PathBuf::from("train_log.csv"),
            input_size: 320,
            train_fraction: 0.8,
            seed: 0,
            steps: 1000,
            batch_size: 4,
            base_lr: 0.001,
            warmup_steps: u64::MAX, // placeholder; resolved after parsing

            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            loss: LossKind::Bce,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            focal_lambda_max: 3.0,
            focal_mu_ref: 0.25,
            augment: true,
            aug: AugmentPolicy::default(),
            checkpoint_every: 100,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut arch: Option<Arch> = None;
        let mut data_root: Option<PathBuf> = None;
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected 'key = value', got '{raw}'",
                    lineno + 1
                )));
            };
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            match k.as_str() {
                "arch" => arch = Some(Arch::parse(&v).map_err(|e| Error::Config(format!("arch: {e}")))?),
                "data_root" => data_root = Some(PathBuf::from(&v)),
                _ => pairs.push((k, v)),
            }
        }
        let arch = arch.ok_or_else(|| Error::Config("missing required key 'arch'".into()))?;
        let data_root =
            data_root.ok_or_else(|| Error::Config("missing required key 'data_root'".into()))?;
        let mut cfg = Self::with_required(arch, data_root);
        let mut warmup_explicit = false;

        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("{k}: cannot parse '{v}'")))
        }

        for (k, v) in pairs {
            match k.as_str() {
                "checkpoint" => cfg.checkpoint = PathBuf::from(v),
                "log" => cfg.log = PathBuf::from(v),
                "input_size" => cfg.input_size = num(&k, &v)?,
                "train_fraction" => cfg.train_fraction = num(&k, &v)?,
                "seed" => cfg.seed = num(&k, &v)?,
                "steps" => cfg.steps = num(&k, &v)?,
                "batch_size" => cfg.batch_size = num(&k, &v)?,
                "base_lr" => cfg.base_lr = num(&k, &v)?,
                "warmup_steps" => {
                    cfg.warmup_steps = num(&k, &v)?;
                    warmup_explicit = true;
                }
                "weight_decay" => cfg.weight_decay = num(&k, &v)?,
                "beta1" => cfg.beta1 = num(&k, &v)?,
                "beta2" => cfg.beta2 = num(&k, &v)?,
                "adam_eps" => cfg.adam_eps = num(&k, &v)?,
                "loss" => {
                    cfg.loss = match v.as_str() {
                        "bce" => LossKind::Bce,
                        "focal" => LossKind::Focal,
                        _ => return Err(Error::Config(format!("loss: unknown kind '{v}' (bce|focal)"))),
                    }
                }
                "focal_gamma" => cfg.focal_gamma = num(&k, &v)?,
                "focal_alpha" => cfg.focal_alpha = num(&k, &v)?,
                "focal_lambda_max" => cfg.focal_lambda_max = num(&k, &v)?,
                "focal_mu_ref" => cfg.focal_mu_ref = num(&k, &v)?,
                "augment" => cfg.augment = num(&k, &v)?,
                "aug_hflip_p" => cfg.aug.hflip_p = num(&k, &v)?,
                "aug_vflip_p" => cfg.aug.vflip_p = num(&k, &v)?,
                "aug_zoom_p" => cfg.aug.zoom_p = num(&k, &v)?,
                "aug_zoom_max" => cfg.aug.zoom_max = num(&k, &v)?,
                "aug_rotate_p" => cfg.aug.rotate_p = num(&k, &v)?,
                "aug_rotate_deg" => cfg.aug.rotate_deg = num(&k, &v)?,
                "checkpoint_every" => cfg.checkpoint_every = num(&k, &v)?,
                _ => return Err(Error::Config(format!("unknown key '{k}'"))),
            }
        }
        if !warmup_explicit {
            // a tenth of the run, at most 50 steps, always below `steps`
            cfg.warmup_steps = (cfg.steps / 10).min(50).min(cfg.steps.saturating_sub(1));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    fn validate(&self) -> Result<()> {
        let fail = |k: &str, why: String| Err(Error::Config(format!("{k}: {why}")));
        if self.input_size < 64 || self.input_size % 32 != 0 {
            return fail("input_size", format!("{} must be >= 64 and divisible by 32", self.input_size));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return fail("train_fraction", format!("{} outside (0, 1)", self.train_fraction));
        }
        if self.steps == 0 {
            return fail("steps", "must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size", "must be positive".into());
        }
        if self.base_lr <= 0.0 {
            return fail("base_lr", "must be positive".into());
        }
        if self.warmup_steps >= self.steps {
            return fail("warmup_steps", format!("{} must be below steps {}", self.warmup_steps, self.steps));
        }
        for (k, p) in [
            ("aug_hflip_p", self.aug.hflip_p),
            ("aug_vflip_p", self.aug.vflip_p),
            ("aug_zoom_p", self.aug.zoom_p),
            ("aug_rotate_p", self.aug.rotate_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(k, format!("probability {p} outside [0, 1]"));
            }
        }
        if self.aug.zoom_max < 1.0 {
            return fail("aug_zoom_max", format!("{} must be >= 1 (zoom-in only)", self.aug.zoom_max));
        }
        if self.aug.rotate_deg < 0.0 {
            return fail("aug_rotate_deg", "must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            return fail("focal_alpha", format!("{} outside [0, 1]", self.focal_alpha));
        }
        if self.focal_gamma < 0.0 {
            return fail("focal_gamma", "must be non-negative".into());
        }
        if self.focal_lambda_max < 1.0 {
            return fail("focal_lambda_max", "must be >= 1".into());
        }
        if !(self.focal_mu_ref > 0.0 && self.focal_mu_ref <= 1.0) {
            return fail("focal_mu_ref", format!("{} outside (0, 1]", self.focal_mu_ref));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "arch = u2net-lite\ndata_root = /tmp/data\n";

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.arch, Arch::U2NetLite);
        assert_eq!(cfg.input_size, 320);
        assert_eq!(cfg.loss, LossKind::Bce);
        assert!((cfg.base_lr - 0.001).abs() < 1e-12);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::parse(&format!("{MINIMAL}bogus_key = 3\n")).unwrap_err();
        assert!(format!("{err}").contains("bogus_key"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn bad_arch_is_named() {
        let err = RunConfig::parse("arch = foo\ndata_root = /x\n").unwrap_err();
        assert!(format!("{err}").contains("arch"));
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let cfg = RunConfig::parse(&format!("# comment\n\n{MINIMAL}steps = 10 # inline\n")).unwrap();
        assert_eq!(cfg.steps, 10);
    }

    #[test]
    fn validation_catches_bad_size() {
        let err = RunConfig::parse(&format!("{MINIMAL}input_size = 100\n")).unwrap_err();
        assert!(format!("{err}").contains("input_size"));
    }
}
