//! Segment-pooled video encoder, projection head, and level classifier.
//!
//! A clip is a handful of frames sampled one per temporal segment. A shared
//! frame encoder is applied to each segment and the results are averaged.
//! Two frame encoders exist: a one-layer MLP over precomputed frame features,
//! and a small strided 2D CNN over rendered single-channel frames followed by
//! a global spatial mean.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Scalar, Tape, Tensor, Var};

pub const LEVELS: usize = 11;
const PTGV_MAGIC: &[u8; 5] = b"PTGV1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Linear,
    TinyConv,
}

impl Backbone {
    pub fn parse(s: &str) -> Option<Backbone> {
        match s {
            "linear" => Some(Backbone::Linear),
            "tinyconv" => Some(Backbone::TinyConv),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoConfig {
    pub backbone: Backbone,
    pub feature_dim: usize,
    /// Width of the per-segment MLP (linear backbone).
    pub hidden: usize,
    pub segments: usize,
    pub frame_size: usize,
    pub conv_channels: [usize; 2],
}

impl Default for VideoConfig {
    fn default() -> Self {
        VideoConfig { backbone: Backbone::Linear, feature_dim: 128, hidden: 64, segments: 8, frame_size: 32, conv_channels: [8, 16] }
    }
}

impl VideoConfig {
    /// Width of the pooled clip feature.
    pub fn pooled_dim(&self) -> usize {
        match self.backbone {
            Backbone::Linear => self.hidden,
            Backbone::TinyConv => self.conv_channels[1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.hidden == 0 || self.segments == 0 {
            return Err(Error::config("video", "feature_dim, hidden and segments must be positive"));
        }
        if self.backbone == Backbone::TinyConv && (self.frame_size < 4 || self.conv_channels.contains(&0)) {
            return Err(Error::config("video.frame_size", "tinyconv needs frames of at least 4x4 and positive channels"));
        }
        Ok(())
    }
}

/// Stacks per-segment feature vectors into a `[T_seg, F]` clip.
pub fn clip_from_segments<T: Scalar>(segments: &[Vec<T>]) -> Result<Tensor<T>> {
    let f = segments.first().ok_or_else(|| Error::dim("clip", "clip has no segments"))?.len();
    if f == 0 || segments.iter().any(|s| s.len() != f) {
        return Err(Error::dim("clip", "segments must share a positive feature width"));
    }
    Tensor::new([segments.len(), f], segments.concat())
}

/// Fixed random linear map from frame features to `size x size` images,
/// standing in for decoded pixels.
#[derive(Clone, Debug)]
pub struct FrameRenderer {
    size: usize,
    basis: Vec<f64>,
    features: usize,
}

impl FrameRenderer {
    pub fn new(features: usize, size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (features as f64).sqrt()).expect("scale");
        let basis = (0..features * size * size).map(|_| normal.sample(&mut rng)).collect();
        FrameRenderer { size, basis, features }
    }

    /// `[.., F]` features -> `[.., 1, size, size]` frames.
    pub fn render<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let f = *x.shape().last().unwrap();
        if f != self.features {
            return Err(Error::dim("render", format!("renderer expects {} features, got {f}", self.features)));
        }
        let px = self.size * self.size;
        let mut out = Vec::with_capacity(x.len() / f * px);
        for row in x.data().chunks(f) {
            for p in 0..px {
                let v: f64 = row.iter().enumerate().map(|(i, &r)| r.f64() * self.basis[i * px + p]).sum();
                out.push(T::c(v));
            }
        }
        let mut shape = x.shape()[..x.rank() - 1].to_vec();
        shape.extend([1, self.size, self.size]);
        Tensor::new(shape, out)
    }
}

pub fn init_video<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, cfg: &VideoConfig, d: usize, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    match cfg.backbone {
        Backbone::Linear => {
            let f = cfg.feature_dim;
            store.param_normal(&format!("{prefix}.phi.w"), &[f, cfg.hidden], (2.0 / f as f64).sqrt(), rng);
            store.param(format!("{prefix}.phi.b"), Tensor::zeros([cfg.hidden]));
        }
        Backbone::TinyConv => {
            let [c1, c2] = cfg.conv_channels;
            store.param_normal(&format!("{prefix}.conv1.w"), &[c1, 1, 3, 3], (2.0 / 9.0f64).sqrt(), rng);
            store.param(format!("{prefix}.conv1.b"), Tensor::zeros([c1]));
            store.param_normal(&format!("{prefix}.conv2.w"), &[c2, c1, 3, 3], (2.0 / (9 * c1) as f64).sqrt(), rng);
            store.param(format!("{prefix}.conv2.b"), Tensor::zeros([c2]));
        }
    }
    let fp = cfg.pooled_dim();
    store.param_normal(&format!("{prefix}.proj.w"), &[fp, d], (1.0 / fp as f64).sqrt(), rng);
    store.param(format!("{prefix}.proj.b"), Tensor::zeros([d]));
    store.param_normal(&format!("{prefix}.cls.w1"), &[d, d], (2.0 / d as f64).sqrt(), rng);
    store.param(format!("{prefix}.cls.b1"), Tensor::zeros([d]));
    store.param_normal(&format!("{prefix}.cls.w2"), &[d, LEVELS], (1.0 / d as f64).sqrt(), rng);
    store.param(format!("{prefix}.cls.b2"), Tensor::zeros([LEVELS]));
    Ok(())
}

fn affine<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, w: &str, b: &str) -> Result<Var> {
    let w = tape.param(store, w)?;
    let b = tape.param(store, b)?;
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// Pooled clip feature `[B, F']` from `[B, S, F]` features (linear) or
/// `[B, S, 1, H, W]` frames (tinyconv).
pub fn encode_video<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, prefix: &str, clip: Var, cfg: &VideoConfig) -> Result<Var> {
    let s = tape.shape(clip).to_vec();
    let per_segment = match cfg.backbone {
        Backbone::Linear => {
            if s.len() != 3 || s[2] != cfg.feature_dim {
                return Err(Error::dim("encode_video", format!("clip {s:?}, expected [B, S, {}]", cfg.feature_dim)));
            }
            let h = affine(tape, store, clip, &format!("{prefix}.phi.w"), &format!("{prefix}.phi.b"))?;
            tape.relu(h)
        }
        Backbone::TinyConv => {
            if s.len() != 5 || s[2] != 1 {
                return Err(Error::dim("encode_video", format!("clip {s:?}, expected [B, S, 1, H, W]")));
            }
            let x = tape.reshape(clip, &[s[0] * s[1], 1, s[3], s[4]])?;
            let mut h = x;
            for layer in ["conv1", "conv2"] {
                let w = tape.param(store, &format!("{prefix}.{layer}.w"))?;
                let b = tape.param(store, &format!("{prefix}.{layer}.b"))?;
                h = tape.conv2d(h, w, b, 2, 1)?;
                h = tape.relu(h);
            }
            let hs = tape.shape(h).to_vec();
            let h = tape.reshape(h, &[hs[0], hs[1], hs[2] * hs[3]])?;
            let h = tape.mean(h, 2)?;
            tape.reshape(h, &[s[0], s[1], hs[1]])?
        }
    };
    tape.mean(per_segment, 1)
}

/// `z_v = f_v W + b`.
pub fn project_video<T: Scalar>(tape: &mut Tape<T>, f_v: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(f_v, w)?;
    tape.add(y, b)
}

pub fn project_stored<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, prefix: &str, f_v: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.proj.w"))?;
    let b = tape.param(store, &format!("{prefix}.proj.b"))?;
    project_video(tape, f_v, w, b)
}

/// Two-layer head `d -> d -> 11`.
pub fn classify<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, prefix: &str, z_v: Var) -> Result<Var> {
    let h = affine(tape, store, z_v, &format!("{prefix}.cls.w1"), &format!("{prefix}.cls.b1"))?;
    let h = tape.relu(h);
    affine(tape, store, h, &format!("{prefix}.cls.w2"), &format!("{prefix}.cls.b2"))
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn write_ptgv(path: &Path, clip: &Tensor<f32>) -> Result<()> {
    if clip.rank() != 2 {
        return Err(Error::dim("write_ptgv", format!("clip must be [T_seg, F], got {:?}", clip.shape())));
    }
    let mut buf = Vec::with_capacity(13 + clip.len() * 4);
    buf.extend_from_slice(PTGV_MAGIC);
    buf.extend_from_slice(&(clip.shape()[0] as u32).to_le_bytes());
    buf.extend_from_slice(&(clip.shape()[1] as u32).to_le_bytes());
    for v in clip.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_ptgv(path: &Path) -> Result<Tensor<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    let bad = |what: &str| Error::schema(path.display().to_string(), what.to_string());
    if bytes.len() < 13 || &bytes[..5] != PTGV_MAGIC {
        return Err(bad("missing PTGV1 header"));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (t, f) = (word(5), word(9));
    if t == 0 || f == 0 || bytes.len() != 13 + t * f * 4 {
        return Err(bad("payload size does not match header"));
    }
    let data = bytes[13..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new([t, f], data)
}
