//! Recording schema, preprocessing, windowing, and batching.

mod io;
mod synthetic;

pub use io::{load_dataset, load_recording, save_dataset, save_recording};
pub use synthetic::{closed_form_level, generate_synthetic, SyntheticSpec};

use crate::encoders::Modality;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::video::LEVELS;

/// Samples per one-second statistics interval for 30 Hz motion streams.
pub const MOTION_INTERVAL: usize = 30;
pub const FRAME_RATE: usize = 30;

/// Row-major `samples x channels` signal.
#[derive(Clone, Debug, PartialEq)]
pub struct Stream {
    pub names: Vec<String>,
    pub rate: usize,
    pub data: Vec<f32>,
}

impl Stream {
    pub fn channels(&self) -> usize {
        self.names.len()
    }

    pub fn samples(&self) -> usize {
        self.data.len() / self.channels().max(1)
    }
}

/// One participant's synchronized session.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectRecording {
    pub subject_id: u32,
    pub eye: Stream,
    pub head: Stream,
    pub phy: Stream,
    /// `[n_frames, F]` per-frame features at [`FRAME_RATE`].
    pub frames: Tensor<f32>,
    /// One level per second.
    pub labels: Vec<u8>,
}

pub fn channel_names(m: Modality) -> Vec<String> {
    match m {
        Modality::Phy => vec!["eda".into(), "bvp".into(), "skt".into()],
        _ => (0..m.nodes()).map(|i| format!("{}_{i:02}", m.name())).collect(),
    }
}

impl SubjectRecording {
    pub fn seconds(&self) -> usize {
        self.labels.len()
    }

    pub fn stream(&self, m: Modality) -> &Stream {
        match m {
            Modality::Eye => &self.eye,
            Modality::Head => &self.head,
            Modality::Phy => &self.phy,
        }
    }

    /// Checks channel counts, rates, label range, and that every stream
    /// covers the label timeline exactly.
    pub fn validate(&self) -> Result<()> {
        let secs = self.seconds();
        if secs == 0 {
            return Err(Error::Data(format!("subject {} has an empty recording", self.subject_id)));
        }
        for m in Modality::ALL {
            let s = self.stream(m);
            let field = format!("subject_{}/{}", self.subject_id, m.name());
            if s.channels() != m.nodes() {
                return Err(Error::schema(field, format!("expected {} channels, found {}", m.nodes(), s.channels())));
            }
            if s.rate != m.rate() {
                return Err(Error::schema(field, format!("expected {} Hz, found {} Hz", m.rate(), s.rate)));
            }
            if s.data.len() % s.channels() != 0 || s.samples() != secs * m.rate() {
                return Err(Error::schema(
                    field,
                    format!("{} samples do not cover {secs} s at {} Hz", s.samples(), m.rate()),
                ));
            }
        }
        if self.frames.rank() != 2 || self.frames.shape()[0] != secs * FRAME_RATE {
            return Err(Error::schema(
                format!("subject_{}/frames", self.subject_id),
                format!("frame tensor {:?} does not cover {secs} s at {FRAME_RATE} fps", self.frames.shape()),
            ));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l as usize >= LEVELS) {
            return Err(Error::schema(format!("subject_{}/labels", self.subject_id), format!("level {bad} outside 0..10")));
        }
        Ok(())
    }
}

/// Per interval and channel, `(mean, population std)` of a row-major
/// `samples x channels` stream. A trailing partial interval is dropped.
/// Output is `[intervals, channels, 2]` flattened.
pub fn downsample_motion(data: &[f32], channels: usize, interval: usize) -> Result<Vec<f32>> {
    let samples = data.len() / channels.max(1);
    if interval == 0 || samples < interval {
        return Err(Error::Data(format!("stream of {samples} samples is shorter than one {interval}-sample interval")));
    }
    let n = samples / interval;
    let mut out = Vec::with_capacity(n * channels * 2);
    for i in 0..n {
        let block = &data[i * interval * channels..(i + 1) * interval * channels];
        for c in 0..channels {
            let vals = block.iter().skip(c).step_by(channels).map(|&v| v as f64);
            let mean = vals.clone().sum::<f64>() / interval as f64;
            let var = vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / interval as f64;
            out.push(mean as f32);
            out.push(var.sqrt() as f32);
        }
    }
    Ok(out)
}

/// A recording reduced to 1 Hz node features.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub subject_id: u32,
    /// `[L, N, D]` per modality, in [`Modality::ALL`] order.
    pub streams: [Vec<f32>; 3],
    pub frames: Tensor<f32>,
    pub labels: Vec<u8>,
}

impl Prepared {
    pub fn seconds(&self) -> usize {
        self.labels.len()
    }
}

pub fn prepare(rec: &SubjectRecording) -> Result<Prepared> {
    rec.validate()?;
    let eye = downsample_motion(&rec.eye.data, rec.eye.channels(), MOTION_INTERVAL)?;
    let head = downsample_motion(&rec.head.data, rec.head.channels(), MOTION_INTERVAL)?;
    Ok(Prepared {
        subject_id: rec.subject_id,
        streams: [eye, head, rec.phy.data.clone()],
        frames: rec.frames.clone(),
        labels: rec.labels.clone(),
    })
}

/// One training example.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub subject_id: u32,
    pub start: usize,
    /// `[T, N, D]` per modality.
    pub streams: [Vec<f32>; 3],
    /// `[segments, F]` centre frames of equal temporal segments.
    pub clip: Vec<f32>,
    pub label: u8,
}

pub fn window_count(len: usize, t: usize, stride: usize) -> usize {
    if len < t || t == 0 || stride == 0 {
        0
    } else {
        (len - t) / stride + 1
    }
}

/// Index of the centre frame of each of `segments` equal parts of
/// `[first, first + span)`.
pub fn segment_centres(first: usize, span: usize, segments: usize) -> Vec<usize> {
    (0..segments).map(|j| first + ((2 * j + 1) * span) / (2 * segments)).collect()
}

/// Sliding windows of `t` seconds every `stride` seconds, each labelled with
/// the level of its final second.
pub fn make_windows(p: &Prepared, t: usize, stride: usize, segments: usize) -> Result<Vec<Window>> {
    let len = p.seconds();
    if len == 0 {
        return Err(Error::Data(format!("subject {} has no samples", p.subject_id)));
    }
    if t == 0 || stride == 0 || segments == 0 {
        return Err(Error::config("data.window", "window, stride and segments must be positive"));
    }
    if t > len {
        return Err(Error::Data(format!("window of {t} s exceeds the {len} s recording of subject {}", p.subject_id)));
    }
    let f = p.frames.shape()[1];
    let widths: Vec<usize> = Modality::ALL.iter().map(|m| m.nodes() * m.features()).collect();
    let frames = p.frames.data();
    let mut out = Vec::with_capacity(window_count(len, t, stride));
    for w in 0..window_count(len, t, stride) {
        let start = w * stride;
        let streams = std::array::from_fn(|i| p.streams[i][start * widths[i]..(start + t) * widths[i]].to_vec());
        let mut clip = Vec::with_capacity(segments * f);
        for c in segment_centres(start * FRAME_RATE, t * FRAME_RATE, segments) {
            clip.extend_from_slice(&frames[c * f..(c + 1) * f]);
        }
        out.push(Window { subject_id: p.subject_id, start, streams, clip, label: p.labels[start + t - 1] });
    }
    Ok(out)
}

/// Per-channel z-score statistics of one or more prepared recordings.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: [Vec<f32>; 3],
    pub std: [Vec<f32>; 3],
}

impl Normalizer {
    pub fn fit(train: &[&Prepared]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Data("cannot fit normalisation on zero subjects".into()));
        }
        let mut mean: [Vec<f32>; 3] = Default::default();
        let mut std: [Vec<f32>; 3] = Default::default();
        for (i, m) in Modality::ALL.iter().enumerate() {
            let w = m.nodes() * m.features();
            let mut sum = vec![0.0f64; w];
            let mut sq = vec![0.0f64; w];
            let mut count = 0usize;
            for p in train {
                for row in p.streams[i].chunks(w) {
                    for (j, &v) in row.iter().enumerate() {
                        sum[j] += v as f64;
                        sq[j] += (v as f64) * (v as f64);
                    }
                    count += 1;
                }
            }
            let n = count as f64;
            mean[i] = sum.iter().map(|s| (s / n) as f32).collect();
            std[i] = sum
                .iter()
                .zip(&sq)
                .map(|(s, q)| {
                    let var = (q / n - (s / n) * (s / n)).max(0.0);
                    (var.sqrt().max(1e-6)) as f32
                })
                .collect();
        }
        Ok(Normalizer { mean, std })
    }

    pub fn apply(&self, w: &mut Window) {
        for i in 0..3 {
            let width = self.mean[i].len();
            for row in w.streams[i].chunks_mut(width) {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (*v - self.mean[i][j]) / self.std[i][j];
                }
            }
        }
    }
}

/// Stacked model inputs for a set of windows.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    /// `[B, T, N, D]` per modality.
    pub streams: [Tensor<T>; 3],
    /// `[B, S, F]`.
    pub clip: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    pub fn from_windows(windows: &[&Window], segments: usize) -> Result<Self> {
        let first = windows.first().ok_or_else(|| Error::Data("empty batch".into()))?;
        let b = windows.len();
        let streams = std::array::from_fn(|i| {
            let m = Modality::ALL[i];
            let t = first.streams[i].len() / (m.nodes() * m.features());
            let data = windows.iter().flat_map(|w| w.streams[i].iter().map(|&v| T::c(v as f64))).collect();
            Tensor::new([b, t, m.nodes(), m.features()], data)
        });
        let [a, bb, c] = streams;
        let f = first.clip.len() / segments;
        let clip = Tensor::new([b, segments, f], windows.iter().flat_map(|w| w.clip.iter().map(|&v| T::c(v as f64))).collect())?;
        Ok(Batch { streams: [a?, bb?, c?], clip, labels: windows.iter().map(|w| w.label as usize).collect() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}
