//! Run configuration and its flat `key = value` text form.
//!
//! Every field has exactly one key. The same keys are accepted as
//! `--key value` overrides on the command line.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Environment variable consulted for the seed when no flag sets it.
pub const SEED_ENV: &str = "VSPCN_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub depth: usize,
    /// Number of leading blocks that run without strong fusion.
    pub layer_split: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Raw values per patch.
    pub patch_dim: usize,
    pub mlp_ratio: usize,
    /// Std of the prompt and CLS token initialisation.
    pub prompt_init_std: f64,
}

impl ModelConfig {
    pub fn num_patches(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn seq_len(&self) -> usize {
        self.num_patches() + 3
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            heads: 4,
            depth: 8,
            layer_split: 4,
            grid_rows: 4,
            grid_cols: 4,
            patch_dim: 16,
            mlp_ratio: 4,
            prompt_init_std: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub n_seen: usize,
    pub n_unseen: usize,
    pub n_attr: usize,
    /// Active attributes per class; 0 means `max(n_attr / 4, 1)`.
    pub attrs_per_class: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise: f64,
}

impl DataConfig {
    pub fn active_attrs(&self) -> usize {
        if self.attrs_per_class == 0 {
            (self.n_attr / 4).max(1)
        } else {
            self.attrs_per_class
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n_seen + self.n_unseen
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_seen: 8,
            n_unseen: 4,
            n_attr: 8,
            attrs_per_class: 0,
            train_per_class: 20,
            test_per_class: 10,
            noise: 0.1,
        }
    }
}

/// Weights of the training objective.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    /// Attribute regression weight inside the base loss.
    pub gamma: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub lambda_ced: f64,
    pub lambda_skd: f64,
    /// Floor on the KL denominator of the divergence term.
    pub eps_kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            gamma: 1.0,
            eta1: 1.0,
            eta2: 1.0,
            lambda_ced: 0.8,
            lambda_skd: 0.9,
            eps_kl: 1e-8,
        }
    }
}

/// What the divergence term's KL compares.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KlSource {
    /// Softmax over the raw D-dim tokens.
    Tokens,
    /// Softmax over the classifier logits of each token.
    Logits,
}

/// How per-sample hits are averaged into an accuracy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Averaging {
    /// Mean of per-class accuracies.
    Macro,
    /// Fraction of all samples.
    Micro,
}

/// Component switches, one per ablation column.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Toggles {
    pub pv: bool,
    pub ps: bool,
    pub wvpf: bool,
    pub wspf: bool,
    pub svpf: bool,
    pub sspf: bool,
    pub adapter: bool,
}

impl Toggles {
    pub const FULL: Toggles = Toggles {
        pv: true,
        ps: true,
        wvpf: true,
        wspf: true,
        svpf: true,
        sspf: true,
        adapter: true,
    };

    pub const BASELINE: Toggles = Toggles {
        pv: false,
        ps: false,
        wvpf: false,
        wspf: false,
        svpf: false,
        sspf: false,
        adapter: false,
    };

    pub fn validate(&self) -> Result<()> {
        let need = |on: bool, what: &str, dep: bool, dep_name: &str| {
            if on && !dep {
                Err(Error::Config(format!("{what} requires {dep_name}")))
            } else {
                Ok(())
            }
        };
        need(self.wvpf, "wvpf", self.pv, "pv")?;
        need(self.svpf, "svpf", self.pv, "pv")?;
        need(self.wspf, "wspf", self.ps, "ps")?;
        need(self.sspf, "sspf", self.ps, "ps")?;
        need(self.adapter, "adapter", self.sspf, "sspf")
    }
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles::FULL
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 200,
            batch_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub loss: LossWeights,
    pub alpha_v: f64,
    pub alpha_s: f64,
    pub alpha_a: f64,
    pub optim: OptimConfig,
    pub toggles: Toggles,
    pub kl_source: KlSource,
    pub averaging: Averaging,
    pub tau: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            data: DataConfig::default(),
            loss: LossWeights::default(),
            alpha_v: 0.05,
            alpha_s: 0.8,
            alpha_a: 0.5,
            optim: OptimConfig::default(),
            toggles: Toggles::FULL,
            kl_source: KlSource::Tokens,
            averaging: Averaging::Macro,
            tau: 0.0,
            seed: 7,
        }
    }
}

/// All keys in canonical order.
pub const KEYS: &[&str] = &[
    "d_model",
    "heads",
    "depth",
    "layer_split",
    "grid_rows",
    "grid_cols",
    "patch_dim",
    "mlp_ratio",
    "prompt_init_std",
    "n_seen",
    "n_unseen",
    "n_attr",
    "attrs_per_class",
    "train_per_class",
    "test_per_class",
    "noise",
    "gamma",
    "eta1",
    "eta2",
    "lambda_ced",
    "lambda_skd",
    "eps_kl",
    "alpha_v",
    "alpha_s",
    "alpha_a",
    "lr",
    "weight_decay",
    "beta1",
    "beta2",
    "adam_eps",
    "epochs",
    "batch_size",
    "pv",
    "ps",
    "wvpf",
    "wspf",
    "svpf",
    "sspf",
    "adapter",
    "kl_source",
    "averaging",
    "tau",
    "seed",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for key `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "1" | "true" | "on" | "yes" => Ok(true),
        "0" | "false" | "off" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "bad boolean {value:?} for key `{key}`"
        ))),
    }
}

impl RunConfig {
    /// Assigns one key. Hyphens in `key` are treated as underscores.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let v = value.trim();
        let k = key.as_str();
        match k {
            "d_model" => self.model.d_model = parse_value(k, v)?,
            "heads" => self.model.heads = parse_value(k, v)?,
            "depth" => self.model.depth = parse_value(k, v)?,
            "layer_split" => self.model.layer_split = parse_value(k, v)?,
            "grid_rows" => self.model.grid_rows = parse_value(k, v)?,
            "grid_cols" => self.model.grid_cols = parse_value(k, v)?,
            "patch_dim" => self.model.patch_dim = parse_value(k, v)?,
            "mlp_ratio" => self.model.mlp_ratio = parse_value(k, v)?,
            "prompt_init_std" => self.model.prompt_init_std = parse_value(k, v)?,
            "n_seen" => self.data.n_seen = parse_value(k, v)?,
            "n_unseen" => self.data.n_unseen = parse_value(k, v)?,
            "n_attr" => self.data.n_attr = parse_value(k, v)?,
            "attrs_per_class" => self.data.attrs_per_class = parse_value(k, v)?,
            "train_per_class" => self.data.train_per_class = parse_value(k, v)?,
            "test_per_class" => self.data.test_per_class = parse_value(k, v)?,
            "noise" => self.data.noise = parse_value(k, v)?,
            "gamma" => self.loss.gamma = parse_value(k, v)?,
            "eta1" => self.loss.eta1 = parse_value(k, v)?,
            "eta2" => self.loss.eta2 = parse_value(k, v)?,
            "lambda_ced" => self.loss.lambda_ced = parse_value(k, v)?,
            "lambda_skd" => self.loss.lambda_skd = parse_value(k, v)?,
            "eps_kl" => self.loss.eps_kl = parse_value(k, v)?,
            "alpha_v" => self.alpha_v = parse_value(k, v)?,
            "alpha_s" => self.alpha_s = parse_value(k, v)?,
            "alpha_a" => self.alpha_a = parse_value(k, v)?,
            "lr" => self.optim.lr = parse_value(k, v)?,
            "weight_decay" => self.optim.weight_decay = parse_value(k, v)?,
            "beta1" => self.optim.beta1 = parse_value(k, v)?,
            "beta2" => self.optim.beta2 = parse_value(k, v)?,
            "adam_eps" => self.optim.adam_eps = parse_value(k, v)?,
            "epochs" => self.optim.epochs = parse_value(k, v)?,
            "batch_size" => self.optim.batch_size = parse_value(k, v)?,
            "pv" => self.toggles.pv = parse_bool(k, v)?,
            "ps" => self.toggles.ps = parse_bool(k, v)?,
            "wvpf" => self.toggles.wvpf = parse_bool(k, v)?,
            "wspf" => self.toggles.wspf = parse_bool(k, v)?,
            "svpf" => self.toggles.svpf = parse_bool(k, v)?,
            "sspf" => self.toggles.sspf = parse_bool(k, v)?,
            "adapter" => self.toggles.adapter = parse_bool(k, v)?,
            "kl_source" => {
                self.kl_source = match v {
                    "tokens" => KlSource::Tokens,
                    "logits" => KlSource::Logits,
                    _ => return Err(Error::Config(format!("bad kl_source {v:?}"))),
                }
            }
            "averaging" => {
                self.averaging = match v {
                    "macro" => Averaging::Macro,
                    "micro" => Averaging::Micro,
                    _ => return Err(Error::Config(format!("bad averaging {v:?}"))),
                }
            }
            "tau" => self.tau = parse_value(k, v)?,
            "seed" => self.seed = parse_value(k, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Current value of `key`, formatted as [`RunConfig::set`] accepts it.
    pub fn get(&self, key: &str) -> Option<String> {
        let s = match key {
            "d_model" => self.model.d_model.to_string(),
            "heads" => self.model.heads.to_string(),
            "depth" => self.model.depth.to_string(),
            "layer_split" => self.model.layer_split.to_string(),
            "grid_rows" => self.model.grid_rows.to_string(),
            "grid_cols" => self.model.grid_cols.to_string(),
            "patch_dim" => self.model.patch_dim.to_string(),
            "mlp_ratio" => self.model.mlp_ratio.to_string(),
            "prompt_init_std" => self.model.prompt_init_std.to_string(),
            "n_seen" => self.data.n_seen.to_string(),
            "n_unseen" => self.data.n_unseen.to_string(),
            "n_attr" => self.data.n_attr.to_string(),
            "attrs_per_class" => self.data.attrs_per_class.to_string(),
            "train_per_class" => self.data.train_per_class.to_string(),
            "test_per_class" => self.data.test_per_class.to_string(),
            "noise" => self.data.noise.to_string(),
            "gamma" => self.loss.gamma.to_string(),
            "eta1" => self.loss.eta1.to_string(),
            "eta2" => self.loss.eta2.to_string(),
            "lambda_ced" => self.loss.lambda_ced.to_string(),
            "lambda_skd" => self.loss.lambda_skd.to_string(),
            "eps_kl" => self.loss.eps_kl.to_string(),
            "alpha_v" => self.alpha_v.to_string(),
            "alpha_s" => self.alpha_s.to_string(),
            "alpha_a" => self.alpha_a.to_string(),
            "lr" => self.optim.lr.to_string(),
            "weight_decay" => self.optim.weight_decay.to_string(),
            "beta1" => self.optim.beta1.to_string(),
            "beta2" => self.optim.beta2.to_string(),
            "adam_eps" => self.optim.adam_eps.to_string(),
            "epochs" => self.optim.epochs.to_string(),
            "batch_size" => self.optim.batch_size.to_string(),
            "pv" => self.toggles.pv.to_string(),
            "ps" => self.toggles.ps.to_string(),
            "wvpf" => self.toggles.wvpf.to_string(),
            "wspf" => self.toggles.wspf.to_string(),
            "svpf" => self.toggles.svpf.to_string(),
            "sspf" => self.toggles.sspf.to_string(),
            "adapter" => self.toggles.adapter.to_string(),
            "kl_source" => match self.kl_source {
                KlSource::Tokens => "tokens".into(),
                KlSource::Logits => "logits".into(),
            },
            "averaging" => match self.averaging {
                Averaging::Macro => "macro".into(),
                Averaging::Micro => "micro".into(),
            },
            "tau" => self.tau.to_string(),
            "seed" => self.seed.to_string(),
            _ => return None,
        };
        Some(s)
    }

    /// Parses `key = value` lines on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Applies `key = value` lines. Blank lines, `#`/`;` comments and
    /// `[section]` headers are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if line.starts_with('[') && line.ends_with(']') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            self.set(k, v).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Canonical text form; [`RunConfig::parse`] inverts it exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("known key"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let bad = |msg: String| Err(Error::Config(msg));
        if m.d_model == 0 || m.heads == 0 || !m.d_model.is_multiple_of(m.heads) {
            return bad(format!(
                "heads ({}) must divide d_model ({})",
                m.heads, m.d_model
            ));
        }
        if m.depth == 0 || m.layer_split > m.depth {
            return bad(format!(
                "need 0 < depth and layer_split <= depth, got depth={} layer_split={}",
                m.depth, m.layer_split
            ));
        }
        if m.num_patches() == 0 || m.patch_dim == 0 || m.mlp_ratio == 0 {
            return bad("grid, patch_dim and mlp_ratio must be positive".into());
        }
        let d = &self.data;
        if d.n_seen == 0 || d.n_unseen == 0 || d.n_attr == 0 {
            return bad("n_seen, n_unseen and n_attr must be positive".into());
        }
        if d.train_per_class == 0 {
            return bad("train_per_class must be positive".into());
        }
        if d.active_attrs() > d.n_attr {
            return bad("attrs_per_class exceeds n_attr".into());
        }
        let w = &self.loss;
        for (name, v) in [
            ("gamma", w.gamma),
            ("eta1", w.eta1),
            ("eta2", w.eta2),
            ("lambda_ced", w.lambda_ced),
            ("lambda_skd", w.lambda_skd),
            ("noise", d.noise),
            ("prompt_init_std", m.prompt_init_std),
            ("weight_decay", self.optim.weight_decay),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(w.eps_kl.is_finite() && w.eps_kl > 0.0) {
            return bad("eps_kl must be positive".into());
        }
        for (name, v) in [
            ("alpha_v", self.alpha_v),
            ("alpha_s", self.alpha_s),
            ("alpha_a", self.alpha_a),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        let o = &self.optim;
        if !(o.lr.is_finite() && o.lr > 0.0) || o.batch_size == 0 {
            return bad("lr and batch_size must be positive".into());
        }
        if !(o.adam_eps.is_finite() && o.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)".into());
        }
        if !self.tau.is_finite() {
            return bad("tau must be finite".into());
        }
        self.toggles.validate()
    }
}

/// Seed from the environment, if set and numeric.
pub fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an integer"))),
        Err(_) => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let cfg = RunConfig {
            alpha_v: 0.125,
            toggles: Toggles::BASELINE,
            kl_source: KlSource::Logits,
            tau: -0.3,
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn every_key_is_settable_and_gettable() {
        let mut cfg = RunConfig::default();
        for key in KEYS {
            let v = cfg.get(key).unwrap();
            cfg.set(key, &v).unwrap();
        }
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn comments_sections_and_hyphens() {
        let cfg = RunConfig::parse("# c\n[model]\nd-model = 32\n; x\nheads=2\n").unwrap();
        assert_eq!(cfg.model.d_model, 32);
        assert_eq!(cfg.model.heads, 2);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = RunConfig::parse("seed = 1\nbogus = 3\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = RunConfig::parse("seed = 1\n\nno equals sign\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn validation_catches_inconsistent_settings() {
        let mut cfg = RunConfig::default();
        cfg.model.layer_split = 9;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.model.heads = 3;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.toggles.pv = false;
        assert!(cfg.validate().is_err(), "wvpf without pv");

        let mut cfg = RunConfig::default();
        cfg.toggles.sspf = false;
        assert!(cfg.validate().is_err(), "adapter without sspf");

        let cfg = RunConfig {
            alpha_s: 1.5,
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
