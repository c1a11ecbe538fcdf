//! Difference-aware attention encoder.
//!
//! Graph features from every modality are projected to a shared width,
//! concatenated along the node axis in the fixed order eye, head, phy, and
//! passed through one pre-norm transformer block whose attention routing is a
//! learnable convex mix of a static prior graph and data-driven attention.
//! Attention energies come from node representations with their local
//! temporal change removed, `r = h - diff(h)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::Modality;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Scalar, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;
const ENERGY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionVariant {
    /// Energies from `h - diff(h)`.
    Difference,
    /// Energies from raw `h`.
    Standard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DaeConfig {
    pub d: usize,
    pub heads: usize,
    /// Half-width of the temporal difference window.
    pub k: usize,
    pub ffn_hidden: usize,
    pub dropout: f64,
    pub variant: AttentionVariant,
    /// Feed `[h || diff(h)]` to the energy instead of `h - diff(h)`.
    pub concat_difference: bool,
    /// Inter-modality weight of the static prior before row normalisation.
    pub inter_link: f64,
}

impl Default for DaeConfig {
    fn default() -> Self {
        DaeConfig {
            d: 64,
            heads: 4,
            k: 2,
            ffn_hidden: 128,
            dropout: 0.1,
            variant: AttentionVariant::Difference,
            concat_difference: false,
            inter_link: 0.01,
        }
    }
}

impl DaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.ffn_hidden == 0 {
            return Err(Error::config("diffattn.d", "widths and head count must be positive"));
        }
        if self.d % self.heads != 0 {
            return Err(Error::config("diffattn.heads", format!("{} heads do not divide d = {}", self.heads, self.d)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("diffattn.dropout", "rate must lie in [0, 1)"));
        }
        if self.inter_link < 0.0 {
            return Err(Error::config("diffattn.inter_link", "must be non-negative"));
        }
        Ok(())
    }

    fn energy_in(&self) -> usize {
        if self.concat_difference {
            2 * self.d
        } else {
            self.d
        }
    }
}

/// Row-stochastic prior: weight 1 within a modality block, `inter_link`
/// across blocks, then each row divided by its sum.
pub fn static_adjacency<T: Scalar>(counts: &[usize], inter_link: f64) -> Tensor<T> {
    let n: usize = counts.iter().sum();
    let block: Vec<usize> = counts.iter().enumerate().flat_map(|(i, &c)| std::iter::repeat_n(i, c)).collect();
    let mut data = vec![T::zero(); n * n];
    for i in 0..n {
        let row: Vec<f64> = (0..n).map(|j| if block[i] == block[j] { 1.0 } else { inter_link }).collect();
        let s: f64 = row.iter().sum();
        for j in 0..n {
            data[i * n + j] = T::c(row[j] / s);
        }
    }
    Tensor::new([n, n], data).expect("square")
}

pub fn init_dae<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    inputs: &[(Modality, usize)],
    cfg: &DaeConfig,
    rng: &mut impl Rng,
) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d;
    for &(m, dim) in inputs {
        store.param_normal(&format!("{prefix}.proj.{}.w", m.name()), &[dim, d], (1.0 / dim as f64).sqrt(), rng);
        store.param(format!("{prefix}.proj.{}.b", m.name()), Tensor::zeros([d]));
    }
    for ln in ["ln1", "ln2", "lnf"] {
        store.param(format!("{prefix}.{ln}.g"), Tensor::full([d], T::one()));
        store.param(format!("{prefix}.{ln}.b"), Tensor::zeros([d]));
    }
    let e = cfg.energy_in();
    store.param_normal(&format!("{prefix}.att.wa"), &[e, cfg.heads], (1.0 / e as f64).sqrt(), rng);
    store.param_normal(&format!("{prefix}.att.wb"), &[e, cfg.heads], (1.0 / e as f64).sqrt(), rng);
    store.param(format!("{prefix}.att.rho"), Tensor::zeros([1]));
    store.param_normal(&format!("{prefix}.att.wv"), &[d, d], (1.0 / d as f64).sqrt(), rng);
    store.param_normal(&format!("{prefix}.att.wo"), &[d, d], (1.0 / d as f64).sqrt(), rng);
    store.param_normal(&format!("{prefix}.ffn.w1"), &[d, cfg.ffn_hidden], (2.0 / d as f64).sqrt(), rng);
    store.param(format!("{prefix}.ffn.b1"), Tensor::zeros([cfg.ffn_hidden]));
    store.param_normal(&format!("{prefix}.ffn.w2"), &[cfg.ffn_hidden, d], (1.0 / cfg.ffn_hidden as f64).sqrt(), rng);
    store.param(format!("{prefix}.ffn.b2"), Tensor::zeros([d]));
    Ok(())
}

/// Truncates `[B, T_i, ..]` inputs to the shortest time extent, keeping the
/// most recent steps.
pub fn align_time<T: Scalar>(tape: &mut Tape<T>, xs: &[Var]) -> Result<Vec<Var>> {
    let t_min = xs.iter().map(|&x| tape.shape(x)[1]).min().ok_or_else(|| Error::dim("align_time", "no inputs"))?;
    xs.iter()
        .map(|&x| {
            let t = tape.shape(x)[1];
            if t == t_min {
                Ok(x)
            } else {
                tape.slice(x, 1, t - t_min, t_min)
            }
        })
        .collect()
}

/// Affine map of each modality's `[B, T, N_i, D_i]` features to width `d`,
/// then concatenation along the node axis.
pub fn project_and_concat<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    inputs: &[(Modality, Var)],
) -> Result<Var> {
    let (first_m, first) = *inputs.first().ok_or_else(|| Error::dim("project_and_concat", "no modalities"))?;
    let lead = tape.shape(first)[..2].to_vec();
    let mut parts = Vec::with_capacity(inputs.len());
    for &(m, x) in inputs {
        if tape.shape(x)[..2] != lead[..] {
            return Err(Error::contract(
                "project_and_concat",
                format!("{} has leading extents {:?} but {} has {:?}", m.name(), &tape.shape(x)[..2], first_m.name(), lead),
            ));
        }
        let w = tape.param(store, &format!("{prefix}.proj.{}.w", m.name()))?;
        let b = tape.param(store, &format!("{prefix}.proj.{}.b", m.name()))?;
        let y = tape.matmul(x, w)?;
        parts.push(tape.add(y, b)?);
    }
    tape.concat(&parts, 2)
}

/// `x_t - mean(x_{t-k} .. x_{t+k})` along the time axis of `[B, T, N, d]`.
pub fn difference_operator<T: Scalar>(tape: &mut Tape<T>, x: Var, k: usize) -> Result<Var> {
    tape.difference(x, 1, k)
}

/// Node representation fed to the energy function.
fn energy_input<T: Scalar>(tape: &mut Tape<T>, h: Var, cfg: &DaeConfig) -> Result<Var> {
    match cfg.variant {
        AttentionVariant::Standard if cfg.concat_difference => {
            let zeros = tape.constant(Tensor::zeros(tape.shape(h).to_vec()));
            tape.concat(&[h, zeros], 3)
        }
        AttentionVariant::Standard => Ok(h),
        AttentionVariant::Difference => {
            let dh = difference_operator(tape, h, cfg.k)?;
            if cfg.concat_difference {
                tape.concat(&[h, dh], 3)
            } else {
                tape.sub(h, dh)
            }
        }
    }
}

/// Row-softmaxed attention `[B, T, heads, N, N]` from additive energies
/// `leaky_relu(r_i . a + r_j . b) / sqrt(d)`.
pub fn attention_weights<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    h: Var,
    cfg: &DaeConfig,
) -> Result<Var> {
    cfg.validate()?;
    let r = energy_input(tape, h, cfg)?;
    let s = tape.shape(r).to_vec();
    let (b, t, n) = (s[0], s[1], s[2]);
    let wa = tape.param(store, &format!("{prefix}.att.wa"))?;
    let wb = tape.param(store, &format!("{prefix}.att.wb"))?;
    let p = tape.matmul(r, wa)?;
    let q = tape.matmul(r, wb)?;
    let p = tape.permute(p, &[0, 1, 3, 2])?;
    let p = tape.reshape(p, &[b, t, cfg.heads, n, 1])?;
    let q = tape.permute(q, &[0, 1, 3, 2])?;
    let q = tape.reshape(q, &[b, t, cfg.heads, 1, n])?;
    let e = tape.add(p, q)?;
    let e = tape.leaky_relu(e, ENERGY_SLOPE);
    let e = tape.scale(e, 1.0 / (cfg.d as f64).sqrt());
    tape.softmax(e, 4)
}

/// `lambda * prior + (1 - lambda) * attn` with `lambda: [1]`.
pub fn fuse<T: Scalar>(tape: &mut Tape<T>, attn: Var, prior: Var, lambda: Var) -> Result<Var> {
    let a = tape.mul(lambda, prior)?;
    let neg = tape.scale(lambda, -1.0);
    let rest = tape.add_scalar(neg, 1.0);
    let b = tape.mul(rest, attn)?;
    tape.add(a, b)
}

/// Stored fusion coefficient `sigmoid(rho)`.
pub fn fusion_lambda<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, prefix: &str) -> Result<Var> {
    let rho = tape.param(store, &format!("{prefix}.att.rho"))?;
    Ok(tape.sigmoid(rho))
}

pub struct AttentionOut {
    pub attn: Var,
    pub fused: Var,
}

pub fn attention<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    h: Var,
    prior: Var,
    cfg: &DaeConfig,
) -> Result<AttentionOut> {
    let attn = attention_weights(tape, store, prefix, h, cfg)?;
    let lambda = fusion_lambda(tape, store, prefix)?;
    let fused = fuse(tape, attn, prior, lambda)?;
    Ok(AttentionOut { attn, fused })
}

/// Same pipeline with raw features driving the energies.
pub fn standard_attention_variant<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    h: Var,
    prior: Var,
    cfg: &DaeConfig,
) -> Result<AttentionOut> {
    let cfg = DaeConfig { variant: AttentionVariant::Standard, ..cfg.clone() };
    attention(tape, store, prefix, h, prior, &cfg)
}

fn layer_norm<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let g = tape.param(store, &format!("{name}.g"))?;
    let b = tape.param(store, &format!("{name}.b"))?;
    tape.layernorm(x, g, b, LN_EPS)
}

pub struct DaeOut {
    /// `[B, d]` node- and time-pooled embedding.
    pub z_p: Var,
    pub attn: Var,
    pub fused: Var,
}

/// Full encoder block on time-aligned per-modality graph features.
pub fn dae_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    inputs: &[(Modality, Var)],
    prior: &Tensor<T>,
    cfg: &DaeConfig,
) -> Result<DaeOut> {
    cfg.validate()?;
    let x = project_and_concat(tape, store, prefix, inputs)?;
    let s = tape.shape(x).to_vec();
    let (b, t, n, d) = (s[0], s[1], s[2], s[3]);
    if prior.shape() != [n, n] {
        return Err(Error::dim("dae_forward", format!("prior {:?} for {n} nodes", prior.shape())));
    }
    let prior = tape.constant(prior.clone());
    let h = layer_norm(tape, store, &format!("{prefix}.ln1"), x)?;
    let AttentionOut { attn, fused } = attention(tape, store, prefix, h, prior, cfg)?;

    let heads = cfg.heads;
    let wv = tape.param(store, &format!("{prefix}.att.wv"))?;
    let v = tape.matmul(h, wv)?;
    let v = tape.reshape(v, &[b, t, n, heads, d / heads])?;
    let v = tape.permute(v, &[0, 1, 3, 2, 4])?;
    let y = tape.matmul(fused, v)?;
    let y = tape.permute(y, &[0, 1, 3, 2, 4])?;
    let y = tape.reshape(y, &[b, t, n, d])?;
    let wo = tape.param(store, &format!("{prefix}.att.wo"))?;
    let y = tape.matmul(y, wo)?;
    let y = tape.dropout(y, cfg.dropout)?;
    let x1 = tape.add(x, y)?;

    let h2 = layer_norm(tape, store, &format!("{prefix}.ln2"), x1)?;
    let w1 = tape.param(store, &format!("{prefix}.ffn.w1"))?;
    let b1 = tape.param(store, &format!("{prefix}.ffn.b1"))?;
    let w2 = tape.param(store, &format!("{prefix}.ffn.w2"))?;
    let b2 = tape.param(store, &format!("{prefix}.ffn.b2"))?;
    let f = tape.matmul(h2, w1)?;
    let f = tape.add(f, b1)?;
    let f = tape.relu(f);
    let f = tape.matmul(f, w2)?;
    let f = tape.add(f, b2)?;
    let f = tape.dropout(f, cfg.dropout)?;
    let x2 = tape.add(x1, f)?;

    let out = layer_norm(tape, store, &format!("{prefix}.lnf"), x2)?;
    let pooled = tape.mean(out, 2)?;
    let z_p = tape.mean(pooled, 1)?;
    Ok(DaeOut { z_p, attn, fused })
}
