//! Run configuration: a flat key-value text format with typed parsing and
//! unknown-key rejection. The canonical emission order doubles as the
//! input to the config hash, so equal configs hash equal and any field
//! change shows up.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::c2c::C2cCfg;
use crate::detector::ModelConfig;
use crate::embed::EmbedConfig;
use crate::eval::EvalSettings;
use crate::matching::DetectorLossCfg;
use crate::scene::SceneGenConfig;
use crate::{rng, Error, Result};

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value '{}' for key '{}'", value.trim(), key)))
}

macro_rules! run_config {
    ($( $key:ident : $ty:ty = $default:expr ),+ $(,)?) => {
        #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
        pub struct RunConfig {
            $( pub $key: $ty, )+
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $( $key: $default, )+ }
            }
        }

        impl RunConfig {
            fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($key) => self.$key = parse_value(key, value)?, )+
                    _ => return Err(Error::Config(format!("unknown key '{}'", key))),
                }
                Ok(())
            }

            /// Canonical text form: one `key = value` line per field, in
            /// declaration order. Round-trips through [`RunConfig::parse`].
            pub fn to_text(&self) -> String {
                let mut s = String::new();
                $( s.push_str(&format!("{} = {}\n", stringify!($key), self.$key)); )+
                s
            }
        }
    };
}

run_config! {
    // Reproducibility root; every stream derives from it by name.
    seed: u64 = 0,
    // Data split sizes; test scenes use ids after the training range.
    n_train_scenes: usize = 500,
    n_test_scenes: usize = 200,
    // Scene generator.
    n_triplets: usize = 3,
    sibling_rate: f64 = 0.6,
    zipf_exponent: f64 = 1.0,
    noise_sigma: f64 = 0.05,
    grid_h: usize = 8,
    grid_w: usize = 8,
    // Shared feature width (embedding dim and decoder width).
    width: usize = 64,
    n_queries: usize = 8,
    layers: usize = 2,
    heads: usize = 2,
    ffn_hidden: usize = 128,
    d_spatial: usize = 16,
    // Objective weights: detector, contrastive, calibration, merge, split.
    lambda1: f64 = 1.0,
    lambda2: f64 = 1.0,
    lambda3: f64 = 0.5,
    lambda4: f64 = 1.0,
    lambda5: f64 = 0.5,
    // Detector internals.
    lambda_box: f64 = 2.5,
    lambda_iou: f64 = 1.0,
    lambda_cls: f64 = 1.0,
    focal_alpha: f64 = 0.25,
    focal_gamma: f64 = 2.0,
    background_weight: f64 = 0.1,
    // Temperatures.
    tau_con: f64 = 0.07,
    tau_split: f64 = 0.07,
    // Category regrouping sizes.
    k1: usize = 3,
    k2: usize = 10,
    m1: usize = 5,
    m2: usize = 5,
    // Optimizer.
    learning_rate: f64 = 0.05,
    momentum: f64 = 0.9,
    weight_decay: f64 = 1e-4,
    epochs: usize = 20,
    decay_epoch: usize = 14,
    decay_factor: f64 = 0.1,
    batch_size: usize = 8,
    // Objective toggles.
    hor_mask: bool = true,
    contrastive: bool = true,
    calibration: bool = true,
    merge: bool = true,
    split: bool = true,
    // Evaluation.
    eval_top_k: usize = 16,
    iou_thresh: f64 = 0.5,
    rare_threshold: usize = 10,
}

impl RunConfig {
    /// Parse the flat text form. Lines are `key = value`; `#` starts a
    /// comment; blank lines are skipped. Keys not in the schema are errors.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", ln + 1))
            })?;
            cfg.set(key.trim(), value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        RunConfig::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
            ("lambda5", self.lambda5),
            ("lambda_box", self.lambda_box),
            ("lambda_iou", self.lambda_iou),
            ("lambda_cls", self.lambda_cls),
            ("learning_rate", self.learning_rate),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("focal_alpha", self.focal_alpha),
            ("focal_gamma", self.focal_gamma),
            ("background_weight", self.background_weight),
            ("noise_sigma", self.noise_sigma),
            ("zipf_exponent", self.zipf_exponent),
            ("decay_factor", self.decay_factor),
        ];
        for (name, v) in weights {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{} must be finite and non-negative, got {}",
                    name, v
                )));
            }
        }
        for (name, v) in [("tau_con", self.tau_con), ("tau_split", self.tau_split)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Config(format!(
                    "{} must be a positive temperature, got {}",
                    name, v
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.sibling_rate) {
            return Err(Error::Config(format!(
                "sibling_rate must lie in [0, 1], got {}",
                self.sibling_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.iou_thresh) {
            return Err(Error::Config(format!(
                "iou_thresh must lie in [0, 1], got {}",
                self.iou_thresh
            )));
        }
        for (name, v) in [
            ("n_triplets", self.n_triplets),
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("width", self.width),
            ("n_queries", self.n_queries),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ffn_hidden", self.ffn_hidden),
            ("d_spatial", self.d_spatial),
            ("k1", self.k1),
            ("k2", self.k2),
            ("m1", self.m1),
            ("m2", self.m2),
            ("batch_size", self.batch_size),
            ("eval_top_k", self.eval_top_k),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{} must be at least 1", name)));
            }
        }
        Ok(())
    }

    /// FNV over the canonical text; identifies a config in checkpoints and
    /// run records.
    pub fn hash(&self) -> u64 {
        rng::fnv1a(self.to_text().as_bytes())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_queries: self.n_queries,
            c: self.width,
            layers: self.layers,
            heads: self.heads,
            ffn_hidden: self.ffn_hidden,
            d_spatial: self.d_spatial,
            grid_h: self.grid_h,
            grid_w: self.grid_w,
        }
    }

    pub fn gen_config(&self) -> SceneGenConfig {
        SceneGenConfig {
            n_triplets: self.n_triplets,
            sibling_rate: self.sibling_rate,
            zipf_exponent: self.zipf_exponent,
            noise_sigma: self.noise_sigma,
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            seed: self.seed,
        }
    }

    pub fn embed_config(&self) -> EmbedConfig {
        EmbedConfig {
            dim: self.width,
            seed: self.seed,
            ..Default::default()
        }
    }

    pub fn detector_loss_cfg(&self) -> DetectorLossCfg {
        DetectorLossCfg {
            lambda_box: self.lambda_box,
            lambda_iou: self.lambda_iou,
            lambda_cls: self.lambda_cls,
            focal_alpha: self.focal_alpha,
            focal_gamma: self.focal_gamma,
            background_weight: self.background_weight,
            ..Default::default()
        }
    }

    pub fn c2c_cfg(&self) -> C2cCfg {
        C2cCfg {
            tau: self.tau_con,
            ..Default::default()
        }
    }

    pub fn eval_settings(&self) -> EvalSettings {
        EvalSettings {
            iou_thresh: self.iou_thresh,
            rare_threshold: self.rare_threshold,
        }
    }
}
