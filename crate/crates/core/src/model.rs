//! Full two-branch model: sensor branch (per-modality encoders, graph
//! convolution, difference attention, linear probe) and video branch
//! (segment encoder, projection, classifier).
//!
//! Parameter names are prefixed `sensor.` or `video.` so the sensor branch
//! can be dropped wholesale for video-only inference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::diffattn::{align_time, dae_forward, init_dae, static_adjacency, AttentionVariant, DaeConfig};
use crate::encoders::{encode_modality, init_encoder, EncoderConfig, Modality};
use crate::error::{Error, Result};
use crate::graph::{apply_gcn, init_gcn};
use crate::losses::{sensor_probe, total_loss};
use crate::numerics::{ParamStore, Scalar, Tape, Tensor, Var};
use crate::video::{classify, encode_video, init_video, project_stored, Backbone, FrameRenderer, VideoConfig, LEVELS};

pub const SENSOR: &str = "sensor";
pub const VIDEO: &str = "video";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablations {
    /// Standard attention energies instead of difference-enhanced ones.
    pub no_diffattention: bool,
    /// Drop the alignment term (beta forced to zero).
    pub no_alignment: bool,
    /// Align each video embedding to another sample's sensor embedding.
    pub shuffled_baseline: bool,
    /// Symmetric degree normalisation of the learned adjacency.
    pub adjacency_normalized: bool,
}

impl Ablations {
    pub const FLAGS: [&'static str; 4] = ["no_diffattention", "no_alignment", "shuffled_baseline", "adjacency_normalized"];

    /// Parses a comma-separated flag list; an empty string means none.
    pub fn parse(s: &str) -> Result<Self> {
        let mut a = Ablations::default();
        for flag in s.split(',').map(str::trim).filter(|f| !f.is_empty()) {
            a.set(flag, true)?;
        }
        Ok(a)
    }

    pub fn set(&mut self, flag: &str, on: bool) -> Result<()> {
        match flag {
            "no_diffattention" => self.no_diffattention = on,
            "no_alignment" => self.no_alignment = on,
            "shuffled_baseline" => self.shuffled_baseline = on,
            "adjacency_normalized" => self.adjacency_normalized = on,
            _ => return Err(Error::config("ablation", format!("unknown flag `{flag}`, expected one of {}", Self::FLAGS.join(", ")))),
        }
        Ok(())
    }

    pub fn names(&self) -> Vec<&'static str> {
        let on = [self.no_diffattention, self.no_alignment, self.shuffled_baseline, self.adjacency_normalized];
        Self::FLAGS.iter().zip(on).filter(|(_, o)| *o).map(|(f, _)| *f).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Window length in seconds.
    pub window: usize,
    /// Graph nodes per modality; the recording schema fixes 38, 12 and 3.
    pub nodes: [usize; 3],
    pub encoders: [EncoderConfig; 3],
    pub gcn_hidden: usize,
    pub gcn_out: usize,
    pub dae: DaeConfig,
    /// Initial fusion weight of the static prior.
    pub lambda_init: f64,
    pub video: VideoConfig,
    /// Seed of the frame renderer used by the conv backbone.
    pub render_seed: u64,
    pub beta: f64,
    pub bidirectional: bool,
    /// Weight of the sensor probe cross entropy.
    pub probe_weight: f64,
    pub ablations: Ablations,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            window: 300,
            nodes: Modality::ALL.map(Modality::nodes),
            encoders: Modality::ALL.map(EncoderConfig::default_for),
            gcn_hidden: 32,
            gcn_out: 32,
            dae: DaeConfig::default(),
            lambda_init: 0.5,
            video: VideoConfig::default(),
            render_seed: 7,
            beta: 1.0,
            bidirectional: false,
            probe_weight: 1.0,
            ablations: Ablations::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (cfg, m) in self.encoders.iter().zip(Modality::ALL) {
            cfg.validate()?;
            if cfg.modality != m || cfg.in_channels != m.features() {
                return Err(Error::config(format!("encoder.{}", m.name()), "modality or input width does not match its slot"));
            }
            if cfg.out_len(self.window).is_none() {
                return Err(Error::config(
                    format!("encoder.{}", m.name()),
                    format!("window of {} steps is shorter than the required minimum {}", self.window, cfg.min_window()),
                ));
            }
        }
        if self.nodes.contains(&0) {
            return Err(Error::config("model.nodes", "every modality needs at least one node"));
        }
        if self.gcn_hidden == 0 || self.gcn_out == 0 {
            return Err(Error::config("gcn", "widths must be positive"));
        }
        self.dae.validate()?;
        let kernel = 2 * self.dae.k + 1;
        if kernel > self.window {
            return Err(Error::config("diffattn.k", format!("difference window {kernel} exceeds the window of {} steps", self.window)));
        }
        if !(self.lambda_init > 0.0 && self.lambda_init < 1.0) {
            return Err(Error::config("diffattn.lambda_init", "must lie strictly between 0 and 1"));
        }
        self.video.validate()?;
        if !(self.beta >= 0.0) {
            return Err(Error::config("loss.beta", format!("must be non-negative, got {}", self.beta)));
        }
        if !(self.probe_weight >= 0.0) {
            return Err(Error::config("loss.probe_weight", "must be non-negative"));
        }
        Ok(())
    }

    /// Alignment weight after ablations.
    pub fn effective_beta(&self) -> f64 {
        if self.ablations.no_alignment {
            0.0
        } else {
            self.beta
        }
    }

    pub fn dae_config(&self) -> DaeConfig {
        let mut d = self.dae.clone();
        if self.ablations.no_diffattention {
            d.variant = AttentionVariant::Standard;
        }
        d
    }

    pub fn prior<T: Scalar>(&self) -> Tensor<T> {
        static_adjacency(&self.nodes, self.dae.inter_link)
    }

    pub fn renderer(&self) -> Option<FrameRenderer> {
        (self.video.backbone == Backbone::TinyConv)
            .then(|| FrameRenderer::new(self.video.feature_dim, self.video.frame_size, self.render_seed))
    }
}

fn enc_prefix(m: Modality) -> String {
    format!("{SENSOR}.enc.{}", m.name())
}

pub(crate) fn gcn_prefix(m: Modality) -> String {
    format!("{SENSOR}.gcn.{}", m.name())
}

pub fn init_model<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut dims = Vec::new();
    for ((enc, m), &n) in cfg.encoders.iter().zip(Modality::ALL).zip(&cfg.nodes) {
        init_encoder(&mut store, &enc_prefix(m), enc, &mut rng)?;
        init_gcn(&mut store, &gcn_prefix(m), n, enc.out_dim(), cfg.gcn_hidden, cfg.gcn_out, &mut rng);
        dims.push((m, cfg.gcn_out));
    }
    let dae = format!("{SENSOR}.dae");
    init_dae(&mut store, &dae, &dims, &cfg.dae, &mut rng)?;
    let rho = (cfg.lambda_init / (1.0 - cfg.lambda_init)).ln();
    *store.get_mut(&format!("{dae}.att.rho"))? = Tensor::from_f64([1], &[rho])?;
    store.param_normal(&format!("{SENSOR}.probe.w"), &[cfg.dae.d, LEVELS], (1.0 / cfg.dae.d as f64).sqrt(), &mut rng);
    store.param(format!("{SENSOR}.probe.b"), Tensor::zeros([LEVELS]));
    init_video(&mut store, VIDEO, &cfg.video, cfg.dae.d, &mut rng)?;
    Ok(store)
}

pub struct SensorOut {
    /// `[B, d]`.
    pub z_p: Var,
    pub probe_logits: Var,
    /// `[B, T', heads, N, N]` fused adjacency.
    pub fused: Var,
}

/// Sensor branch on `[B, T, N, D]` windows in [`Modality::ALL`] order.
pub fn sensor_forward<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, cfg: &ModelConfig, streams: &[Tensor<T>; 3]) -> Result<SensorOut> {
    let mut inputs = Vec::with_capacity(3);
    for ((enc, m), x) in cfg.encoders.iter().zip(Modality::ALL).zip(streams) {
        let x = tape.constant(x.clone());
        let e = encode_modality(tape, store, &enc_prefix(m), x, enc)?;
        let z = apply_gcn(tape, store, &gcn_prefix(m), e, cfg.ablations.adjacency_normalized)?;
        inputs.push(z);
    }
    let aligned = align_time(tape, &inputs)?;
    let inputs: Vec<(Modality, Var)> = Modality::ALL.into_iter().zip(aligned).collect();
    let out = dae_forward(tape, store, &format!("{SENSOR}.dae"), &inputs, &cfg.prior(), &cfg.dae_config())?;
    let probe_logits = sensor_probe(tape, store, &format!("{SENSOR}.probe"), out.z_p)?;
    Ok(SensorOut { z_p: out.z_p, probe_logits, fused: out.fused })
}

pub struct VideoOut {
    pub z_v: Var,
    pub logits: Var,
}

/// Converts a `[B, S, F]` feature clip to the backbone's input layout.
pub fn video_input<T: Scalar>(cfg: &ModelConfig, renderer: Option<&FrameRenderer>, clip: &Tensor<T>) -> Result<Tensor<T>> {
    match (cfg.video.backbone, renderer) {
        (Backbone::Linear, _) => Ok(clip.clone()),
        (Backbone::TinyConv, Some(r)) => r.render(clip),
        (Backbone::TinyConv, None) => Err(Error::config("video.backbone", "tinyconv needs a frame renderer")),
    }
}

/// Video path on a prepared backbone input.
pub fn video_forward<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, cfg: &ModelConfig, input: &Tensor<T>) -> Result<VideoOut> {
    let x = tape.constant(input.clone());
    let f_v = encode_video(tape, store, VIDEO, x, &cfg.video)?;
    let z_v = project_stored(tape, store, VIDEO, f_v)?;
    let logits = classify(tape, store, VIDEO, z_v)?;
    Ok(VideoOut { z_v, logits })
}

/// Cyclic shift by one: every sample is paired with a different one.
pub fn shifted_rows<T: Scalar>(tape: &mut Tape<T>, z: Var) -> Result<Var> {
    let b = tape.shape(z)[0];
    if b < 2 {
        return Ok(z);
    }
    let head = tape.slice(z, 0, 1, b - 1)?;
    let tail = tape.slice(z, 0, 0, 1)?;
    tape.concat(&[head, tail], 0)
}

pub struct StepOut {
    pub loss: Var,
    pub video: VideoOut,
    pub sensor: SensorOut,
}

/// Joint objective: video cross entropy, weighted probe cross entropy, and
/// weighted alignment of `z_v` to `z_p`.
pub fn joint_loss<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    renderer: Option<&FrameRenderer>,
    batch: &Batch<T>,
) -> Result<StepOut> {
    let sensor = sensor_forward(tape, store, cfg, &batch.streams)?;
    let video = video_forward(tape, store, cfg, &video_input(cfg, renderer, &batch.clip)?)?;
    let target = if cfg.ablations.shuffled_baseline { shifted_rows(tape, sensor.z_p)? } else { sensor.z_p };
    let loss = total_loss(tape, video.logits, &batch.labels, video.z_v, target, cfg.effective_beta(), cfg.bidirectional)?;
    let loss = if cfg.probe_weight > 0.0 {
        let probe = tape.cross_entropy(sensor.probe_logits, &batch.labels)?;
        let probe = tape.scale(probe, cfg.probe_weight);
        tape.add(loss, probe)?
    } else {
        loss
    };
    Ok(StepOut { loss, video, sensor })
}

/// Video-only prediction; touches no `sensor.` parameter.
pub fn infer_level<T: Scalar>(store: &ParamStore<T>, cfg: &ModelConfig, renderer: Option<&FrameRenderer>, clip: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new(crate::numerics::Mode::Eval, 0);
    let out = video_forward(&mut tape, store, cfg, &video_input(cfg, renderer, clip)?)?;
    Ok(tape.value(out.logits).clone())
}
