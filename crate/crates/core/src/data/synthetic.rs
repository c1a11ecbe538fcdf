//! Planted-pattern recordings.
//!
//! Each subject watches a sequence of scenes, each with a discomfort level
//! in 0..=10. The level drives, scaled by a per-subject susceptibility:
//! jitter amplitude on a subset of gaze channels, jitter on a subset of head
//! channels, and step offsets on EDA, BVP (up) and skin temperature (down).
//! Frame features carry an orthonormal code of the level plus per-scene
//! nuisance content in the orthogonal complement. Projecting the mean frame
//! onto the level codes recovers the label exactly when noise is zero.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{channel_names, Stream, SubjectRecording, FRAME_RATE};
use crate::encoders::Modality;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::video::LEVELS;

/// Gaze and head channels that respond to the level.
pub const RESPONSIVE_EYE: usize = 12;
pub const RESPONSIVE_HEAD: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub subjects: usize,
    /// Scenes per level per subject; every subject sees each level equally.
    pub scenes_per_level: usize,
    pub scene_seconds: usize,
    /// Standard deviation of additive sensor noise.
    pub noise: f64,
    pub feature_dim: usize,
    /// Amplitude of the level code in frame features.
    pub code_gain: f64,
    /// Amplitude of per-scene nuisance content in frame features.
    pub nuisance_gain: f64,
    /// Frame noise is `noise * frame_noise_gain`.
    pub frame_noise_gain: f64,
    /// Susceptibility is drawn uniformly from `[1 - spread, 1 + spread]`.
    pub susceptibility_spread: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            subjects: 10,
            scenes_per_level: 2,
            scene_seconds: 32,
            noise: 0.1,
            feature_dim: 128,
            code_gain: 1.0,
            nuisance_gain: 1.0,
            frame_noise_gain: 5.0,
            susceptibility_spread: 0.4,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Parses `key=value` pairs separated by commas, e.g.
    /// `subjects=4,noise=0,seed=3`. Unlisted keys keep their defaults.
    pub fn parse(s: &str) -> Result<Self> {
        let mut spec = SyntheticSpec::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::config("synthetic", format!("expected key=value, got `{part}`")))?;
            let bad = |e: String| Error::config(format!("synthetic.{k}"), e);
            let int = || v.parse::<usize>().map_err(|e| bad(e.to_string()));
            let float = || v.parse::<f64>().map_err(|e| bad(e.to_string()));
            match k {
                "subjects" => spec.subjects = int()?,
                "scenes_per_level" => spec.scenes_per_level = int()?,
                "scene_seconds" => spec.scene_seconds = int()?,
                "noise" => spec.noise = float()?,
                "feature_dim" => spec.feature_dim = int()?,
                "code_gain" => spec.code_gain = float()?,
                "nuisance_gain" => spec.nuisance_gain = float()?,
                "frame_noise_gain" => spec.frame_noise_gain = float()?,
                "susceptibility_spread" => spec.susceptibility_spread = float()?,
                "seed" => spec.seed = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                _ => return Err(Error::config(format!("synthetic.{k}"), "unknown key")),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects == 0 || self.scenes_per_level == 0 || self.scene_seconds == 0 {
            return Err(Error::config("synthetic", "subjects, scenes_per_level and scene_seconds must be positive"));
        }
        if self.feature_dim <= LEVELS {
            return Err(Error::config("synthetic.feature_dim", format!("must exceed {LEVELS}")));
        }
        if !(self.noise >= 0.0) || !(0.0..1.0).contains(&self.susceptibility_spread) {
            return Err(Error::config("synthetic.noise", "noise must be >= 0 and spread in [0, 1)"));
        }
        Ok(())
    }

    pub fn seconds_per_subject(&self) -> usize {
        self.scenes_per_level * LEVELS * self.scene_seconds
    }

    /// Orthonormal basis of the frame feature space; the first [`LEVELS`]
    /// rows are the level codes.
    pub fn basis(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, u64::MAX));
        let f = self.feature_dim;
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(f);
        while rows.len() < f {
            let mut v: Vec<f64> = (0..f).map(|_| rng.sample(StandardNormal)).collect();
            for r in &rows {
                let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-6 {
                rows.push(v.into_iter().map(|a| a / norm).collect());
            }
        }
        rows
    }
}

fn mix(seed: u64, id: u64) -> u64 {
    let mut z = seed ^ id.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Level whose code has the largest projection of the mean frame.
pub fn closed_form_level(spec: &SyntheticSpec, basis: &[Vec<f64>], frames: &[f32]) -> u8 {
    let f = spec.feature_dim;
    let n = (frames.len() / f) as f64;
    let mean: Vec<f64> = (0..f).map(|j| frames.iter().skip(j).step_by(f).map(|&v| v as f64).sum::<f64>() / n).collect();
    let scores: Vec<f64> = basis[..LEVELS].iter().map(|u| u.iter().zip(&mean).map(|(a, b)| a * b).sum()).collect();
    crate::video::argmax(&scores) as u8
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<SubjectRecording>> {
    spec.validate()?;
    let basis = spec.basis();
    (0..spec.subjects as u32).map(|id| generate_subject(spec, &basis, id)).collect()
}

fn generate_subject(spec: &SyntheticSpec, basis: &[Vec<f64>], id: u32) -> Result<SubjectRecording> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, id as u64));
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::config("synthetic.noise", e.to_string()))?;
    let frame_noise = Normal::new(0.0, spec.noise * spec.frame_noise_gain).map_err(|e| Error::config("synthetic.noise", e.to_string()))?;
    let sus = 1.0 + rng.random_range(-1.0..=1.0) * spec.susceptibility_spread;

    let mut levels: Vec<u8> = (0..LEVELS as u8).flat_map(|l| std::iter::repeat_n(l, spec.scenes_per_level)).collect();
    levels.shuffle(&mut rng);

    let secs = spec.seconds_per_subject();
    let baseline = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect() };
    let eye_base = baseline(&mut rng, 38);
    let head_base = baseline(&mut rng, 12);
    let phy_base = baseline(&mut rng, 3);
    let eye_freq: Vec<f64> = (0..38).map(|_| rng.random_range(2.0..6.0)).collect();
    let head_freq: Vec<f64> = (0..12).map(|_| rng.random_range(1.0..4.0)).collect();

    let mut eye = Vec::with_capacity(secs * 30 * 38);
    let mut head = Vec::with_capacity(secs * 30 * 12);
    let mut phy = Vec::with_capacity(secs * 3);
    let f = spec.feature_dim;
    let mut frames = Vec::with_capacity(secs * FRAME_RATE * f);
    let mut labels = Vec::with_capacity(secs);

    for &level in &levels {
        let q = level as f64 / (LEVELS - 1) as f64;
        let drive = sus * q;
        let content: Vec<f64> = (LEVELS..f).map(|_| rng.sample::<f64, _>(StandardNormal) * spec.nuisance_gain / ((f - LEVELS) as f64).sqrt()).collect();
        let mut scene_frame = vec![0.0; f];
        for (j, b) in basis[level as usize].iter().enumerate() {
            scene_frame[j] += spec.code_gain * b;
        }
        for (c, row) in content.iter().zip(&basis[LEVELS..]) {
            scene_frame.iter_mut().zip(row).for_each(|(a, b)| *a += c * b);
        }
        let phase: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
        for _ in 0..spec.scene_seconds {
            let t0 = labels.len();
            for s in 0..30 {
                let tau = (t0 * 30 + s) as f64 / 30.0;
                for c in 0..38 {
                    let jitter = if c < RESPONSIVE_EYE { drive * (std::f64::consts::TAU * eye_freq[c] * tau + phase[c]).sin() } else { 0.0 };
                    eye.push((eye_base[c] + jitter + noise.sample(&mut rng)) as f32);
                }
                for c in 0..12 {
                    let jitter = if c < RESPONSIVE_HEAD { drive * (std::f64::consts::TAU * head_freq[c] * tau + phase[38 + c]).sin() } else { 0.0 };
                    head.push((head_base[c] + jitter + noise.sample(&mut rng)) as f32);
                }
            }
            let steps = [1.0, 0.5, -0.3];
            for c in 0..3 {
                phy.push((phy_base[c] + steps[c] * drive + noise.sample(&mut rng)) as f32);
            }
            for _ in 0..FRAME_RATE {
                frames.extend(scene_frame.iter().map(|&v| (v + frame_noise.sample(&mut rng)) as f32));
            }
            labels.push(level);
        }
    }
    let stream = |m: Modality, data: Vec<f32>| Stream { names: channel_names(m), rate: m.rate(), data };
    Ok(SubjectRecording {
        subject_id: id,
        eye: stream(Modality::Eye, eye),
        head: stream(Modality::Head, head),
        phy: stream(Modality::Phy, phy),
        frames: Tensor::new([secs * FRAME_RATE, f], frames)?,
        labels,
    })
}
