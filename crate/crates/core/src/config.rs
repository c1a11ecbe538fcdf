//! Run configuration as flat `key = value` text with dotted namespaces.
//!
//! ```text
//! # comment
//! data.window = 300
//! diffattn.k = 2
//! encoder.eye.channels = 16,32,32
//! ablation.no_alignment = true
//! ```
//!
//! Unknown keys are rejected and the whole configuration is validated
//! before anything runs.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffattn::AttentionVariant;
use crate::encoders::Modality;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;
use crate::video::Backbone;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Seconds between window starts.
    pub stride: usize,
    /// Permute training labels across windows (chance-level control).
    pub shuffle_labels: bool,
    pub folds: usize,
    pub fold_seed: u64,
    pub parallel_folds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            stride: 30,
            shuffle_labels: false,
            folds: 5,
            fold_seed: 0,
            parallel_folds: 1,
        }
    }
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("expected a boolean, got `{v}`")),
    }
}

fn parse_list(v: &str) -> std::result::Result<Vec<usize>, String> {
    v.split(',').map(|x| x.trim().parse::<usize>().map_err(|e| format!("`{x}`: {e}"))).collect()
}

fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("`{v}`: {e}"))
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        let r: std::result::Result<(), String> = (|| {
            if let Some(rest) = key.strip_prefix("encoder.") {
                let (name, field) = rest.split_once('.').ok_or("expected encoder.<modality>.<field>")?;
                let idx = Modality::ALL.iter().position(|x| x.name() == name).ok_or(format!("unknown modality `{name}`"))?;
                let e = &mut m.encoders[idx];
                match field {
                    "channels" => e.channels = parse_list(v)?,
                    "kernels" => e.kernels = parse_list(v)?,
                    "pool" => e.pool = num(v)?,
                    "dropout" => e.dropout = num(v)?,
                    _ => return Err("unknown key".into()),
                }
                return Ok(());
            }
            if let Some(flag) = key.strip_prefix("ablation.") {
                return m.ablations.set(flag, parse_bool(v)?).map_err(|_| "unknown key".to_string());
            }
            match key {
                "data.window" => m.window = num(v)?,
                "data.stride" => self.stride = num(v)?,
                "data.shuffle_labels" => self.shuffle_labels = parse_bool(v)?,
                "gcn.hidden" => m.gcn_hidden = num(v)?,
                "gcn.out" => m.gcn_out = num(v)?,
                "diffattn.d" => m.dae.d = num(v)?,
                "diffattn.heads" => m.dae.heads = num(v)?,
                "diffattn.k" => m.dae.k = num(v)?,
                "diffattn.ffn_hidden" => m.dae.ffn_hidden = num(v)?,
                "diffattn.dropout" => m.dae.dropout = num(v)?,
                "diffattn.variant" => {
                    m.dae.variant = match v {
                        "difference" => AttentionVariant::Difference,
                        "standard" => AttentionVariant::Standard,
                        _ => return Err(format!("expected difference or standard, got `{v}`")),
                    }
                }
                "diffattn.concat_difference" => m.dae.concat_difference = parse_bool(v)?,
                "diffattn.inter_link" => m.dae.inter_link = num(v)?,
                "diffattn.lambda_init" => m.lambda_init = num(v)?,
                "video.backbone" => m.video.backbone = Backbone::parse(v).ok_or(format!("expected linear or tinyconv, got `{v}`"))?,
                "video.feature_dim" => m.video.feature_dim = num(v)?,
                "video.hidden" => m.video.hidden = num(v)?,
                "video.segments" => m.video.segments = num(v)?,
                "video.frame_size" => m.video.frame_size = num(v)?,
                "video.conv_channels" => {
                    let c = parse_list(v)?;
                    m.video.conv_channels = c.try_into().map_err(|_| "expected two channel counts".to_string())?;
                }
                "video.render_seed" => m.render_seed = num(v)?,
                "loss.beta" => m.beta = num(v)?,
                "loss.bidirectional" => m.bidirectional = parse_bool(v)?,
                "loss.probe_weight" => m.probe_weight = num(v)?,
                "train.epochs" => self.train.epochs = num(v)?,
                "train.batch_size" => self.train.batch_size = num(v)?,
                "train.lr" => self.train.lr = num(v)?,
                "train.weight_decay" => self.train.weight_decay = num(v)?,
                "train.patience" => self.train.patience = num(v)?,
                "train.seed" => self.train.seed = num(v)?,
                "train.validation_subjects" => self.train.validation_subjects = num(v)?,
                "eval.folds" => self.folds = num(v)?,
                "eval.fold_seed" => self.fold_seed = num(v)?,
                "eval.parallel_folds" => self.parallel_folds = num(v)?,
                _ => return Err("unknown key".into()),
            }
            Ok(())
        })();
        r.map_err(|detail| Error::config(key, detail))
    }

    /// Parses configuration text over the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", i + 1), format!("expected `key = value`, got `{line}`")))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.stride == 0 {
            return Err(Error::config("data.stride", "must be positive"));
        }
        if self.folds < 2 {
            return Err(Error::config("eval.folds", "need at least two folds"));
        }
        if self.parallel_folds == 0 {
            return Err(Error::config("eval.parallel_folds", "must be positive"));
        }
        Ok(())
    }

    /// Every key with its current value, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut lines = vec![
            format!("data.window = {}", m.window),
            format!("data.stride = {}", self.stride),
            format!("data.shuffle_labels = {}", self.shuffle_labels),
        ];
        for (e, mo) in m.encoders.iter().zip(Modality::ALL) {
            let n = mo.name();
            lines.push(format!("encoder.{n}.channels = {}", list(&e.channels)));
            lines.push(format!("encoder.{n}.kernels = {}", list(&e.kernels)));
            lines.push(format!("encoder.{n}.pool = {}", e.pool));
            lines.push(format!("encoder.{n}.dropout = {}", e.dropout));
        }
        let variant = match m.dae.variant {
            AttentionVariant::Difference => "difference",
            AttentionVariant::Standard => "standard",
        };
        let backbone = match m.video.backbone {
            Backbone::Linear => "linear",
            Backbone::TinyConv => "tinyconv",
        };
        lines.extend([
            format!("gcn.hidden = {}", m.gcn_hidden),
            format!("gcn.out = {}", m.gcn_out),
            format!("diffattn.d = {}", m.dae.d),
            format!("diffattn.heads = {}", m.dae.heads),
            format!("diffattn.k = {}", m.dae.k),
            format!("diffattn.ffn_hidden = {}", m.dae.ffn_hidden),
            format!("diffattn.dropout = {}", m.dae.dropout),
            format!("diffattn.variant = {variant}"),
            format!("diffattn.concat_difference = {}", m.dae.concat_difference),
            format!("diffattn.inter_link = {}", m.dae.inter_link),
            format!("diffattn.lambda_init = {}", m.lambda_init),
            format!("video.backbone = {backbone}"),
            format!("video.feature_dim = {}", m.video.feature_dim),
            format!("video.hidden = {}", m.video.hidden),
            format!("video.segments = {}", m.video.segments),
            format!("video.frame_size = {}", m.video.frame_size),
            format!("video.conv_channels = {}", list(&m.video.conv_channels)),
            format!("video.render_seed = {}", m.render_seed),
            format!("loss.beta = {}", m.beta),
            format!("loss.bidirectional = {}", m.bidirectional),
            format!("loss.probe_weight = {}", m.probe_weight),
            format!("train.epochs = {}", self.train.epochs),
            format!("train.batch_size = {}", self.train.batch_size),
            format!("train.lr = {}", self.train.lr),
            format!("train.weight_decay = {}", self.train.weight_decay),
            format!("train.patience = {}", self.train.patience),
            format!("train.seed = {}", self.train.seed),
            format!("train.validation_subjects = {}", self.train.validation_subjects),
            format!("eval.folds = {}", self.folds),
            format!("eval.fold_seed = {}", self.fold_seed),
            format!("eval.parallel_folds = {}", self.parallel_folds),
        ]);
        let a = m.ablations;
        for (flag, on) in crate::model::Ablations::FLAGS.iter().zip([a.no_diffattention, a.no_alignment, a.shuffled_baseline, a.adjacency_normalized]) {
            lines.push(format!("ablation.{flag} = {on}"));
        }
        lines.join("\n") + "\n"
    }
}

/// Hex SHA-256 of the canonical JSON form of a model configuration.
pub fn config_hash(cfg: &ModelConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serialises");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}
