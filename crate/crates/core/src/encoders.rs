//! Per-modality temporal CNN encoders.
//!
//! Each node's signal is convolved along time independently; node mixing is
//! left to the graph layer. A stage is conv -> batch norm -> relu -> max pool,
//! with dropout after the first stage only.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{conv_out_len, BatchStats, ParamStore, Scalar, Tape, Tensor, Var};

pub const STAGES: usize = 3;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Eye,
    Head,
    Phy,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Eye, Modality::Head, Modality::Phy];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Eye => "eye",
            Modality::Head => "head",
            Modality::Phy => "phy",
        }
    }

    /// Sensor channels, which become graph nodes.
    pub fn nodes(self) -> usize {
        match self {
            Modality::Eye => 38,
            Modality::Head => 12,
            Modality::Phy => 3,
        }
    }

    /// Native sampling rate in Hz.
    pub fn rate(self) -> usize {
        match self {
            Modality::Eye | Modality::Head => 30,
            Modality::Phy => 1,
        }
    }

    /// Features per node after preprocessing: motion streams carry
    /// (mean, std) per second, physiology its raw value.
    pub fn features(self) -> usize {
        match self {
            Modality::Eye | Modality::Head => 2,
            Modality::Phy => 1,
        }
    }

    pub fn parse(s: &str) -> Option<Modality> {
        Modality::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub modality: Modality,
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub kernels: Vec<usize>,
    pub pool: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn default_for(modality: Modality) -> Self {
        EncoderConfig {
            modality,
            in_channels: modality.features(),
            channels: vec![16, 32, 32],
            kernels: vec![5, 3, 3],
            pool: if modality == Modality::Phy { 1 } else { 2 },
            dropout: 0.1,
        }
    }

    /// Embedding depth of the encoder output.
    pub fn out_dim(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        let field = |f: &str| format!("encoder.{}.{f}", self.modality.name());
        if self.channels.len() != STAGES {
            return Err(Error::config(field("channels"), format!("expected {STAGES} stages, got {}", self.channels.len())));
        }
        if self.kernels.len() != STAGES {
            return Err(Error::config(field("kernels"), format!("expected {STAGES} stages, got {}", self.kernels.len())));
        }
        if self.in_channels == 0 || self.channels.contains(&0) {
            return Err(Error::config(field("channels"), "channel counts must be positive"));
        }
        if self.kernels.contains(&0) {
            return Err(Error::config(field("kernels"), "kernel sizes must be positive"));
        }
        if self.pool == 0 {
            return Err(Error::config(field("pool"), "pool window must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(field("dropout"), "rate must lie in [0, 1)"));
        }
        Ok(())
    }

    fn padding(k: usize) -> usize {
        (k - 1) / 2
    }

    /// Output length for an input of `t` steps, `None` if some stage runs out.
    pub fn out_len(&self, t: usize) -> Option<usize> {
        let mut len = t;
        for &k in &self.kernels {
            len = conv_out_len(len, k, 1, Self::padding(k))?;
            len = conv_out_len(len, self.pool, self.pool, 0)?;
        }
        Some(len)
    }

    /// Shortest window the three stages accept.
    pub fn min_window(&self) -> usize {
        (1..).find(|&t| self.out_len(t).is_some()).expect("some window length fits")
    }
}

/// Learnable scalars of one stage: kernel, bias, and batch-norm affine.
pub fn stage_param_count(c_in: usize, c_out: usize, k: usize) -> usize {
    c_out * c_in * k + c_out + 2 * c_out
}

pub fn param_count(cfg: &EncoderConfig) -> Result<usize> {
    cfg.validate()?;
    let mut c_in = cfg.in_channels;
    let mut total = 0;
    for (&c, &k) in cfg.channels.iter().zip(&cfg.kernels) {
        total += stage_param_count(c_in, c, k);
        c_in = c;
    }
    Ok(total)
}

pub fn init_encoder<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    let mut c_in = cfg.in_channels;
    for (s, (&c, &k)) in cfg.channels.iter().zip(&cfg.kernels).enumerate() {
        let p = format!("{prefix}.s{s}");
        store.param_normal(&format!("{p}.w"), &[c, c_in, k], (2.0 / (c_in * k) as f64).sqrt(), rng);
        store.param(format!("{p}.b"), Tensor::zeros([c]));
        store.param(format!("{p}.gamma"), Tensor::full([c], T::one()));
        store.param(format!("{p}.beta"), Tensor::zeros([c]));
        store.buffer(format!("{p}.mean"), Tensor::zeros([c]));
        store.buffer(format!("{p}.var"), Tensor::full([c], T::one()));
        c_in = c;
    }
    Ok(())
}

/// Maps `[B, T, N, C_in]` windows to `[B, T', N, C_3]` node embeddings.
///
/// In training mode batch statistics are used and running-average updates
/// are queued on the tape.
pub fn encode_modality<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    cfg: &EncoderConfig,
) -> Result<Var> {
    cfg.validate()?;
    let shape = tape.shape(x).to_vec();
    let name = cfg.modality.name();
    if shape.len() != 4 || shape[3] != cfg.in_channels {
        return Err(Error::dim("encode_modality", format!("{name} input {shape:?}, expected [B, T, N, {}]", cfg.in_channels)));
    }
    let (b, t, n) = (shape[0], shape[1], shape[2]);
    if cfg.out_len(t).is_none() {
        return Err(Error::config(
            format!("encoder.{name}"),
            format!("window of {t} steps is shorter than the required minimum {}", cfg.min_window()),
        ));
    }
    let h = tape.permute(x, &[0, 2, 3, 1])?;
    let mut h = tape.reshape(h, &[b * n, cfg.in_channels, t])?;
    for (s, &k) in cfg.kernels.iter().enumerate() {
        let p = format!("{prefix}.s{s}");
        let w = tape.param(store, &format!("{p}.w"))?;
        let bias = tape.param(store, &format!("{p}.b"))?;
        h = tape.conv1d(h, w, bias, 1, EncoderConfig::padding(k))?;
        let gamma = tape.param(store, &format!("{p}.gamma"))?;
        let beta = tape.param(store, &format!("{p}.beta"))?;
        let (mean_name, var_name) = (format!("{p}.mean"), format!("{p}.var"));
        // register the buffers so inference bookkeeping sees them
        tape.param(store, &mean_name)?;
        tape.param(store, &var_name)?;
        let running = BatchStats { mean: store.get(&mean_name)?.data().to_vec(), var: store.get(&var_name)?.data().to_vec() };
        let (y, stats) = tape.batchnorm(h, gamma, beta, Some(&running), BN_EPS)?;
        if let Some(stats) = stats {
            let m = T::c(BN_MOMENTUM);
            let blend = |old: &[T], new: &[T]| old.iter().zip(new).map(|(&o, &v)| (T::one() - m) * o + m * v).collect();
            tape.record_buffer_update(mean_name, blend(&running.mean, &stats.mean));
            tape.record_buffer_update(var_name, blend(&running.var, &stats.var));
        }
        h = tape.relu(y);
        h = tape.maxpool1d(h, cfg.pool, cfg.pool)?;
        if s == 0 {
            h = tape.dropout(h, cfg.dropout)?;
        }
    }
    let c = cfg.out_dim();
    let t_out = tape.shape(h)[2];
    let h = tape.reshape(h, &[b, n, c, t_out])?;
    tape.permute(h, &[0, 3, 1, 2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, GradCheckConfig, Mode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(cfg: &EncoderConfig) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        init_encoder(&mut store, "enc", cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        store
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn run(store: &ParamStore<f64>, cfg: &EncoderConfig, x: Tensor<f64>, mode: Mode) -> Tensor<f64> {
        let mut tape = Tape::new(mode, 0);
        let v = tape.constant(x);
        let out = encode_modality(&mut tape, store, "enc", v, cfg).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let cfg = EncoderConfig::default_for(Modality::Head);
        let out = run(&setup(&cfg), &cfg, Tensor::zeros([2, 16, 12, 2]), Mode::Eval);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_kernels_keep_constants() {
        let cfg = EncoderConfig {
            modality: Modality::Phy,
            in_channels: 1,
            channels: vec![1, 1, 1],
            kernels: vec![1, 1, 1],
            pool: 1,
            dropout: 0.0,
        };
        let mut store = setup(&cfg);
        for s in 0..3 {
            store.get_mut(&format!("enc.s{s}.w")).unwrap().data_mut()[0] = 1.0;
            // running variance of 1 - eps cancels the normaliser exactly
            store.get_mut(&format!("enc.s{s}.var")).unwrap().data_mut()[0] = 1.0 - BN_EPS;
        }
        let x = Tensor::from_f64([1, 5, 3, 1], &[0.5, 1.5, 2.5].repeat(5)).unwrap();
        let out = run(&store, &cfg, x, Mode::Eval);
        assert_eq!(out.shape(), &[1, 5, 3, 1]);
        for t in 0..5 {
            for (node, want) in [0.5, 1.5, 2.5].iter().enumerate() {
                assert!((out.at(&[0, t, node, 0]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn default_shape_follows_pool_arithmetic() {
        let cfg = EncoderConfig { in_channels: 1, ..EncoderConfig::default_for(Modality::Eye) };
        let out = run(&setup(&cfg), &cfg, random(&[1, 16, 3, 1], 1), Mode::Eval);
        // same-padded convs keep length; three pools of 2: 16 -> 8 -> 4 -> 2
        assert_eq!(out.shape(), &[1, 2, 3, 32]);
    }

    #[test]
    fn short_window_names_minimum() {
        let cfg = EncoderConfig::default_for(Modality::Eye);
        assert_eq!(cfg.min_window(), 8);
        let mut tape = Tape::new(Mode::Eval, 0);
        let v = tape.constant(Tensor::<f64>::zeros([1, 7, 38, 2]));
        let err = encode_modality(&mut tape, &setup(&cfg), "enc", v, &cfg).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
        assert!(err.to_string().contains("minimum 8"), "{err}");
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(stage_param_count(1, 2, 3), 12);
        let cfg = EncoderConfig::default_for(Modality::Eye);
        // 16*2*5+16+32, 32*16*3+32+64, 32*32*3+32+64
        assert_eq!(param_count(&cfg).unwrap(), 208 + 1632 + 3168);
        let store = setup(&cfg);
        assert_eq!(store.trainable_scalars(), 208 + 1632 + 3168);
        let none = EncoderConfig { channels: vec![], kernels: vec![], ..cfg };
        assert!(param_count(&none).is_err());
    }

    #[test]
    fn node_permutation_is_equivariant() {
        let cfg = EncoderConfig::default_for(Modality::Phy);
        let store = setup(&cfg);
        let x = random(&[2, 8, 3, 1], 5);
        let perm = [2usize, 0, 1];
        let mut xp = x.clone();
        for b in 0..2 {
            for t in 0..8 {
                for (dst, &src) in perm.iter().enumerate() {
                    xp.set(&[b, t, dst, 0], x.at(&[b, t, src, 0]));
                }
            }
        }
        let (a, p) = (run(&store, &cfg, x, Mode::Eval), run(&store, &cfg, xp, Mode::Eval));
        let s = a.shape().to_vec();
        for b in 0..s[0] {
            for t in 0..s[1] {
                for (dst, &src) in perm.iter().enumerate() {
                    for c in 0..s[3] {
                        assert_eq!(p.at(&[b, t, dst, c]), a.at(&[b, t, src, c]));
                    }
                }
            }
        }
    }

    #[test]
    fn training_mode_queues_running_stats() {
        let cfg = EncoderConfig::default_for(Modality::Phy);
        let mut store = setup(&cfg);
        let mut tape = Tape::new(Mode::Train, 0);
        let v = tape.constant(random(&[2, 8, 3, 1], 9));
        encode_modality(&mut tape, &store, "enc", v, &cfg).unwrap();
        let updates = tape.take_buffer_updates();
        assert_eq!(updates.len(), 6);
        store.apply_buffer_updates(updates).unwrap();
        assert!(store.get("enc.s0.mean").unwrap().data().iter().any(|&m| m != 0.0));
    }

    #[test]
    fn gradient_through_three_stages() {
        let cfg = EncoderConfig {
            modality: Modality::Phy,
            in_channels: 1,
            channels: vec![2, 3, 2],
            kernels: vec![3, 3, 1],
            pool: 1,
            dropout: 0.1,
        };
        let store = setup(&cfg);
        let x = random(&[2, 6, 2, 1], 11);
        let w = random(&[2, 6, 2, 2], 12);
        let r = grad_check(
            |tape, s| {
                let v = tape.constant(x.clone());
                let out = encode_modality(tape, s, "enc", v, &cfg)?;
                let c = tape.constant(w.clone());
                let p = tape.mul(out, c)?;
                Ok(tape.sum_all(p))
            },
            &store,
            &GradCheckConfig::f64(),
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }
}
