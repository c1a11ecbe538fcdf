//! Acceptance suite. Each test prints one `[PASS]`/`[FAIL]` line straight to
//! stderr, bypassing output capture, then asserts.
//!
//! Criteria 3 to 5 train full cross-validations on the synthetic task and
//! take several minutes each on one core.

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use ptgnn::bench::bench;
use ptgnn::checkpoint::Checkpoint;
use ptgnn::config::RunConfig;
use ptgnn::data::{generate_synthetic, Batch, SyntheticSpec};
use ptgnn::diffattn::{attention_weights, difference_operator, fuse, init_dae, static_adjacency, AttentionVariant, DaeConfig};
use ptgnn::encoders::Modality;
use ptgnn::eval::{confusion, dataset_windows, fit, macro_f1, run_cv, top1, topk_accuracy, MetricsReport};
use ptgnn::graph::{effective_adjacency, gcn_forward, init_gcn};
use ptgnn::losses::align_loss;
use ptgnn::model::{infer_level, init_model, joint_loss, ModelConfig};
use ptgnn::numerics::{adam_step, grad_check, AdamConfig, AdamState, GradCheckConfig, Mode, ParamStore, Scalar, Tape, Tensor};
use ptgnn::train::predict;
use ptgnn::video::{VideoConfig, LEVELS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const SYNTHETIC_CFG: &str = include_str!("../../../configs/synthetic.cfg");

// criterion 1
const GRAD_TOL_F32: f64 = 1e-3;
const GRAD_TOL_F64: f64 = 1e-5;
const GRAD_SECONDS: f64 = 60.0;
// criterion 2
const QUADRATIC_TOL: f64 = 1e-6;
const GCN_TOL: f64 = 1e-5;
const ROW_SUM_TOL: f64 = 1e-6;
const ALIGN_TOL: f64 = 1e-6;
// criterion 3
const COSINE_GAIN_OVER_UNALIGNED: f64 = 0.1;
const COSINE_GAIN_OVER_SHUFFLED: f64 = 0.3;
const TRAIN_SECONDS: f64 = 15.0 * 60.0;
// criterion 4
const ABLATION_MARGIN: f64 = 3.0;
// criterion 5
const CLEAN_TOP1: f64 = 95.0;
const CHANCE_BAND: f64 = 5.0;
// criterion 7
const LATENCY_BUDGET_MS: f64 = 100.0;
const BENCH_SAMPLES: usize = 1000;
const BENCH_WARMUP: usize = 50;
// criterion 10
const OFFSET_TOL: f64 = 1e-6;

fn report(id: u32, pass: bool, detail: &str) {
    let line = format!("[{}] criterion {id:>2}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut err = std::io::stderr().lock();
    let _ = err.write_all(line.as_bytes());
    let _ = err.flush();
    assert!(pass, "criterion {id} failed: {detail}");
}

fn normal<T: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::c(StandardNormal.sample(rng))).collect()).unwrap()
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- criterion 1

/// Six graph nodes in total, two per modality.
fn toy_config() -> ModelConfig {
    let mut cfg = ModelConfig { window: 8, nodes: [2, 2, 2], gcn_hidden: 4, gcn_out: 4, bidirectional: true, ..Default::default() };
    for e in cfg.encoders.iter_mut() {
        e.channels = vec![2, 2, 2];
        e.kernels = vec![3, 3, 3];
        e.dropout = 0.0;
    }
    cfg.dae = DaeConfig { d: 8, heads: 2, k: 1, ffn_hidden: 8, dropout: 0.0, ..Default::default() };
    cfg.video = VideoConfig { feature_dim: 16, hidden: 8, segments: 2, ..Default::default() };
    cfg
}

fn toy_batch<T: Scalar>(cfg: &ModelConfig) -> Batch<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let streams = std::array::from_fn(|i| normal(&[2, cfg.window, cfg.nodes[i], cfg.encoders[i].in_channels], &mut rng));
    Batch { streams, clip: normal(&[2, cfg.video.segments, cfg.video.feature_dim], &mut rng), labels: vec![3, 8] }
}

fn full_loss_check<T: Scalar>(gc: &GradCheckConfig) -> ptgnn::numerics::GradCheckReport {
    let cfg = toy_config();
    let store = init_model::<T>(&cfg, 5).unwrap();
    let batch = toy_batch::<T>(&cfg);
    grad_check(|tape: &mut Tape<T>, s: &ParamStore<T>| Ok(joint_loss(tape, s, &cfg, None, &batch)?.loss), &store, gc).unwrap()
}

#[test]
fn c01_gradient_integrity() {
    let t = Instant::now();
    let r32 = full_loss_check::<f32>(&GradCheckConfig { tol: GRAD_TOL_F32, ..GradCheckConfig::f32() });
    let r64 = full_loss_check::<f64>(&GradCheckConfig { tol: GRAD_TOL_F64, ..GradCheckConfig::f64() });
    let secs = t.elapsed().as_secs_f64();
    let worst = |r: &ptgnn::numerics::GradCheckReport| r.worst.as_ref().map_or(String::from("-"), |c| format!("{}[{}]", c.param, c.index));
    report(
        1,
        r32.passed() && r64.passed() && secs < GRAD_SECONDS,
        &format!(
            "full-loss grad check, f32 max rel {:.2e} at {} (tol {GRAD_TOL_F32:e}, {} coords), f64 max rel {:.2e} at {} (tol {GRAD_TOL_F64:e}, {} coords), {secs:.1}s",
            r32.max_rel_error,
            worst(&r32),
            r32.checked,
            r64.max_rel_error,
            worst(&r64),
            r64.checked
        ),
    );
}

// ---------------------------------------------------------------- criterion 2

fn difference_of(x: &[f64], k: usize) -> Vec<f64> {
    let mut tape = Tape::<f64>::new(Mode::Eval, 0);
    let v = tape.constant(Tensor::from_f64([1, x.len(), 1, 1], x).unwrap());
    let d = difference_operator(&mut tape, v, k).unwrap();
    tape.value(d).data().to_vec()
}

/// Deviation from the edge-replicated window mean, with the window sum of
/// an affine signal `a*t + b` computed in integers.
fn affine_oracle(a: i64, n: usize, k: usize) -> Vec<f64> {
    (0..n as i64)
        .map(|t| {
            let offsets: i64 = (t - k as i64..=t + k as i64).map(|tau| tau.clamp(0, n as i64 - 1) - t).sum();
            -((a * offsets) as f64) / (2 * k + 1) as f64
        })
        .collect()
}

fn quadratic_oracle(x: &[f64], k: usize) -> Vec<f64> {
    let n = x.len() as i64;
    (0..n)
        .map(|t| {
            let mean = (t - k as i64..=t + k as i64).map(|tau| x[tau.clamp(0, n - 1) as usize]).sum::<f64>() / (2 * k + 1) as f64;
            x[t as usize] - mean
        })
        .collect()
}

fn gcn_oracle(e: &[f64], a: &[f64], w1: &[f64], w2: &[f64], n: usize, d: usize, h: usize, o: usize, steps: usize) -> Vec<f64> {
    let mut out = vec![0.0; steps * n * o];
    for s in 0..steps {
        let e = &e[s * n * d..(s + 1) * n * d];
        let mut hid = vec![0.0; n * h];
        for i in 0..n {
            for j in 0..h {
                let mut acc = 0.0;
                for m in 0..n {
                    for c in 0..d {
                        acc += a[i * n + m] * e[m * d + c] * w1[c * h + j];
                    }
                }
                hid[i * h + j] = acc.max(0.0);
            }
        }
        for i in 0..n {
            for q in 0..o {
                let mut acc = 0.0;
                for m in 0..n {
                    for j in 0..h {
                        acc += a[i * n + m] * hid[m * h + j] * w2[j * o + q];
                    }
                }
                out[s * n * o + i * o + q] = acc;
            }
        }
    }
    out
}

fn attention_store<T: Scalar>(cfg: &DaeConfig, seed: u64) -> ParamStore<T> {
    let mut store = ParamStore::new();
    let dims: Vec<(Modality, usize)> = Modality::ALL.iter().map(|&m| (m, 4)).collect();
    init_dae(&mut store, "dae", &dims, cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    store
}

#[test]
fn c02_equation_oracles() {
    let k = 2;
    let constant_ok = difference_of(&[2.75; 9], k).iter().all(|&v| v == 0.0);
    let ramp: Vec<f64> = (0..12).map(|t| (3 * t - 7) as f64).collect();
    let linear_ok = difference_of(&ramp, k) == affine_oracle(3, 12, k);
    let quad: Vec<f64> = (0..12).map(|t| 0.25 * (t * t) as f64 - t as f64).collect();
    let quad_err = max_abs(&difference_of(&quad, k), &quadratic_oracle(&quad, k));

    let mut gcn_err: f64 = 0.0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 1 + (seed as usize % 4);
        let (d, h, o, steps) = (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..4), 3);
        let e = normal::<f32>(&[1, steps, n, d], &mut rng);
        let raw = normal::<f32>(&[n, n], &mut rng);
        let w1 = normal::<f32>(&[d, h], &mut rng);
        let w2 = normal::<f32>(&[h, o], &mut rng);
        let mut tape = Tape::<f32>::new(Mode::Eval, 0);
        let vars = [&e, &raw, &w1, &w2].map(|t| tape.constant(t.clone()));
        let a = effective_adjacency(&mut tape, vars[1], false).unwrap();
        let a_val = tape.value(a).to_f64_vec();
        let z = gcn_forward(&mut tape, vars[0], a, vars[2], vars[3]).unwrap();
        let expect = gcn_oracle(&e.to_f64_vec(), &a_val, &w1.to_f64_vec(), &w2.to_f64_vec(), n, d, h, o, steps);
        gcn_err = gcn_err.max(max_abs(&tape.value(z).to_f64_vec(), &expect));
    }

    let cfg = DaeConfig { d: 4, heads: 2, k: 1, ffn_hidden: 8, ..Default::default() };
    let store = attention_store::<f64>(&cfg, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut tape = Tape::<f64>::new(Mode::Eval, 0);
    let h = tape.constant(normal(&[2, 5, 6, 4], &mut rng));
    let attn = attention_weights(&mut tape, &store, "dae", h, &cfg).unwrap();
    let row_err = tape.value(attn).data().chunks(6).map(|r| (r.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
    let prior_t = static_adjacency::<f64>(&[2, 2, 2], cfg.inter_link);
    let prior = tape.constant(prior_t.clone());
    let one = tape.constant(Tensor::from_f64([1], &[1.0]).unwrap());
    let fused = fuse(&mut tape, attn, prior, one).unwrap();
    let prior_exact = tape.value(fused).data().chunks(36).all(|m| m == prior_t.data());

    let mut tape = Tape::<f64>::new(Mode::Eval, 0);
    let zv = tape.constant(Tensor::from_f64([2, 3], &[1.0, 2.0, -1.0, 0.5, 0.0, 3.0]).unwrap());
    let zp = tape.constant(Tensor::from_f64([2, 3], &[0.0, 2.0, 1.0, 0.5, -2.0, 1.0]).unwrap());
    let loss = align_loss(&mut tape, zv, zp, false).unwrap();
    // rows: 1 + 0 + 4 = 5 and 0 + 4 + 4 = 8, mean 6.5
    let align_err = (tape.value(loss).data()[0] - 6.5).abs();

    report(
        2,
        constant_ok && linear_ok && quad_err <= QUADRATIC_TOL && gcn_err <= GCN_TOL && row_err <= ROW_SUM_TOL && prior_exact && align_err <= ALIGN_TOL,
        &format!(
            "difference constant exact {constant_ok}, linear exact {linear_ok}, quadratic err {quad_err:.1e}; gcn oracle err {gcn_err:.1e} over 100 seeds; \
             attention row err {row_err:.1e}; fused equals prior at lambda 1 {prior_exact}; align err {align_err:.1e}"
        ),
    );
}

// ------------------------------------------------------- criteria 3, 4 and 5

fn synthetic_config() -> RunConfig {
    RunConfig::parse(SYNTHETIC_CFG).unwrap()
}

struct Run {
    report: MetricsReport,
    seconds: f64,
}

fn cross_validate(spec: &SyntheticSpec, edit: impl FnOnce(&mut RunConfig)) -> Run {
    let mut cfg = synthetic_config();
    edit(&mut cfg);
    cfg.parallel_folds = std::thread::available_parallelism().map_or(1, |n| n.get()).min(cfg.folds);
    let data = generate_synthetic(spec).unwrap();
    let t = Instant::now();
    let report = run_cv(&data, &cfg).unwrap();
    Run { report, seconds: t.elapsed().as_secs_f64() }
}

fn full_run() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| cross_validate(&SyntheticSpec::default(), |_| {}))
}

fn unaligned_run() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| cross_validate(&SyntheticSpec::default(), |c| c.model.ablations.no_alignment = true))
}

fn standard_attention_run() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| cross_validate(&SyntheticSpec::default(), |c| c.model.ablations.no_diffattention = true))
}

#[test]
fn c03_alignment_ordering() {
    let (full, unaligned) = (full_run(), unaligned_run());
    let f = &full.report.pooled;
    let u = &unaligned.report.pooled;
    let pass = f.cosine - u.cosine >= COSINE_GAIN_OVER_UNALIGNED
        && f.cosine - f.shuffled_cosine >= COSINE_GAIN_OVER_SHUFFLED
        && full.seconds < TRAIN_SECONDS
        && unaligned.seconds < TRAIN_SECONDS;
    report(
        3,
        pass,
        &format!(
            "cosine aligned {:.3}, unaligned {:.3} (need +{COSINE_GAIN_OVER_UNALIGNED}), shuffled pairs {:.3} (need +{COSINE_GAIN_OVER_SHUFFLED}); \
             mse aligned {:.2}, unaligned {:.2}, shuffled {:.2}; {:.0}s and {:.0}s",
            f.cosine, u.cosine, f.shuffled_cosine, f.align_mse, u.align_mse, f.shuffled_mse, full.seconds, unaligned.seconds
        ),
    );
}

#[test]
fn c04_ablation_ordering() {
    let runs = [("full", full_run()), ("no_diffattention", standard_attention_run()), ("no_alignment", unaligned_run())];
    let top1: Vec<f64> = runs.iter().map(|(_, r)| r.report.top1()).collect();
    let monotone = runs.iter().all(|(_, r)| r.report.pooled.top3 >= r.report.pooled.top1 && r.report.folds.iter().all(|f| f.metrics.top3 >= f.metrics.top1));
    let pass = top1[0] - top1[1] >= ABLATION_MARGIN && top1[0] - top1[2] >= ABLATION_MARGIN && monotone;
    let listing: Vec<String> = runs.iter().map(|(n, r)| format!("{n} {:.1}/{:.1}", r.report.top1(), r.report.pooled.top3)).collect();
    report(4, pass, &format!("top1/top3 {} (full must lead both by {ABLATION_MARGIN}); top3 >= top1 everywhere {monotone}", listing.join(", ")));
}

#[test]
fn c05_learnability() {
    let clean = cross_validate(&SyntheticSpec { noise: 0.0, ..Default::default() }, |_| {});
    let control = cross_validate(&SyntheticSpec::default(), |c| c.shuffle_labels = true);
    let chance = 100.0 / LEVELS as f64;
    let pass = clean.report.top1() >= CLEAN_TOP1 && (control.report.top1() - chance).abs() <= CHANCE_BAND;
    report(
        5,
        pass,
        &format!(
            "zero-noise held-out top1 {:.1} (need {CLEAN_TOP1}); shuffled-label control {:.1} (chance {chance:.1} +/- {CHANCE_BAND}); {:.0}s and {:.0}s",
            clean.report.top1(),
            control.report.top1(),
            clean.seconds,
            control.seconds
        ),
    );
}

// ---------------------------------------------------------------- criterion 6

fn random_clips(cfg: &ModelConfig, count: usize, seed: u64) -> Vec<Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| normal(&[1, cfg.video.segments, cfg.video.feature_dim], &mut rng)).collect()
}

#[test]
fn c06_video_only_isolation() {
    let cfg = ModelConfig::default();
    let full = Checkpoint::new(cfg.clone(), init_model::<f32>(&cfg, 21).unwrap());
    let mut stripped = Checkpoint::from_bytes(&full.to_bytes().unwrap()).unwrap();
    let sizes = stripped.strip();
    let stripped = Checkpoint::from_bytes(&stripped.to_bytes().unwrap()).unwrap();
    let renderer = cfg.renderer();
    let identical = random_clips(&cfg, 100, 3).iter().all(|clip| {
        let a = infer_level(&full.store, &full.config, renderer.as_ref(), clip).unwrap();
        let b = infer_level(&stripped.store, &stripped.config, renderer.as_ref(), clip).unwrap();
        a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
    });
    let sensor_left = stripped.store.names().any(|n| n.starts_with("sensor."));
    report(
        6,
        identical && sizes.bytes_after < sizes.bytes_before && !sensor_left,
        &format!("100 clips bit-identical {identical}; parameter bytes {} -> {}", sizes.bytes_before, sizes.bytes_after),
    );
}

// ---------------------------------------------------------------- criterion 7

#[test]
fn c07_latency_budget() {
    let cfg = ModelConfig::default();
    let mut ck = Checkpoint::new(cfg.clone(), init_model::<f32>(&cfg, 0).unwrap());
    ck.strip();
    let r = bench(&ck, BENCH_SAMPLES, BENCH_WARMUP, 0).unwrap();
    let l = &r.latency;
    report(
        7,
        l.mean_ms <= LATENCY_BUDGET_MS && l.samples >= BENCH_SAMPLES,
        &format!(
            "batch-1 video path mean {:.3} ms, p50 {:.3}, p95 {:.3}, p99 {:.3} over {} samples after {} warmup (budget {LATENCY_BUDGET_MS} ms); {:.3} MB; {} logical cpus",
            l.mean_ms, l.p50_ms, l.p95_ms, l.p99_ms, l.samples, l.warmup, r.model_mb, r.machine.logical_cpus
        ),
    );
}

// ---------------------------------------------------------------- criterion 8

const SMALL_CFG: &str = "\
data.window = 8
data.stride = 8
encoder.eye.channels = 4,4,4
encoder.head.channels = 4,4,4
encoder.phy.channels = 4,4,4
gcn.hidden = 4
gcn.out = 4
diffattn.d = 8
diffattn.heads = 2
diffattn.k = 1
diffattn.ffn_hidden = 8
train.epochs = 3
eval.folds = 3
";

#[test]
fn c08_determinism_and_persistence() {
    let spec = SyntheticSpec { subjects: 3, scenes_per_level: 1, scene_seconds: 8, ..Default::default() };
    let data = generate_synthetic(&spec).unwrap();
    let cfg = RunConfig::parse(SMALL_CFG).unwrap();

    let fit_bytes = || {
        let f = fit(&data, &cfg, None).unwrap();
        (Checkpoint::new(cfg.model.clone(), f.outcome.store).to_bytes().unwrap(), f.report.unwrap().to_json())
    };
    let (ck_a, rep_a) = fit_bytes();
    let (ck_b, rep_b) = fit_bytes();
    let fits_equal = ck_a == ck_b && rep_a == rep_b;

    let serial = run_cv(&data, &cfg).unwrap().to_json();
    let again = run_cv(&data, &cfg).unwrap().to_json();
    let parallel = run_cv(&data, &RunConfig { parallel_folds: 3, ..cfg.clone() }).unwrap().to_json();
    let cv_equal = serial == again && serial == parallel;

    let loaded = Checkpoint::from_bytes(&ck_a).unwrap();
    let windows = dataset_windows(&data, &cfg).unwrap();
    let original = Checkpoint::from_bytes(&ck_a).unwrap();
    let p = predict(&original.store, &cfg.model, &windows, 16).unwrap();
    let q = predict(&loaded.store, &loaded.config, &windows, 16).unwrap();
    let bits = |rows: &[Vec<f32>]| rows.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>();
    let round_trip = loaded.to_bytes().unwrap() == ck_a && bits(&p.video_logits) == bits(&q.video_logits) && bits(&p.z_p) == bits(&q.z_p);

    report(
        8,
        fits_equal && cv_equal && round_trip,
        &format!("repeat fits byte-identical {fits_equal}; cross-validation reports identical across repeats and thread counts {cv_equal}; round trip bit-exact {round_trip}"),
    );
}

// ---------------------------------------------------------------- criterion 9

fn brute_topk(logits: &[Vec<i32>], labels: &[usize], k: usize) -> f64 {
    let hits = logits
        .iter()
        .zip(labels)
        .filter(|(row, &l)| {
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &b| row[b].cmp(&row[a]).then(a.cmp(&b)));
            order[..k].contains(&l)
        })
        .count();
    100.0 * hits as f64 / labels.len() as f64
}

fn brute_macro_f1(pred: &[usize], labels: &[usize], classes: usize) -> f64 {
    let (mut sum, mut supported) = (0.0, 0usize);
    for c in 0..classes {
        let tp = pred.iter().zip(labels).filter(|&(&p, &l)| p == c && l == c).count();
        let fp = pred.iter().zip(labels).filter(|&(&p, &l)| p == c && l != c).count();
        let fn_ = pred.iter().zip(labels).filter(|&(&p, &l)| p != c && l == c).count();
        if tp + fn_ == 0 {
            continue;
        }
        supported += 1;
        sum += (2 * tp) as f64 / (2 * tp + fp + fn_) as f64;
    }
    100.0 * sum / supported as f64
}

#[test]
fn c09_metric_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..60);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..LEVELS)).collect();
        let logits: Vec<Vec<i32>> = (0..n).map(|_| (0..LEVELS).map(|_| rng.random_range(-3..4)).collect()).collect();
        for k in [1, 3] {
            if topk_accuracy(&logits, &labels, k).unwrap() != brute_topk(&logits, &labels, k) {
                mismatches += 1;
            }
        }
        let pred: Vec<usize> = logits.iter().map(|r| top1(r)).collect();
        if macro_f1(&confusion(&pred, &labels, LEVELS).unwrap()) != brute_macro_f1(&pred, &labels, LEVELS) {
            mismatches += 1;
        }
    }
    report(9, mismatches == 0, &format!("{mismatches} mismatches against brute-force top-1/top-3/macro-F1 on 1000 random instances"));
}

// --------------------------------------------------------------- criterion 10

#[test]
fn c10_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let n = 5;
    let mut store = ParamStore::<f64>::new();
    init_gcn(&mut store, "g", n, 3, 4, 2, &mut rng);
    let e = normal::<f64>(&[2, 3, n, 3], &mut rng);
    let target = normal::<f64>(&[2, 3, n, 2], &mut rng);
    let mut adam = AdamState::default();
    let cfg = AdamConfig { lr: 0.05, ..Default::default() };
    for _ in 0..100 {
        let mut tape = Tape::new(Mode::Train, 0);
        let x = tape.constant(e.clone());
        let raw = tape.param(&store, "g.adj").unwrap();
        let a = effective_adjacency(&mut tape, raw, false).unwrap();
        let w1 = tape.param(&store, "g.w1").unwrap();
        let w2 = tape.param(&store, "g.w2").unwrap();
        let z = gcn_forward(&mut tape, x, a, w1, w2).unwrap();
        let t = tape.constant(target.clone());
        let loss = tape.mse(z, t).unwrap();
        tape.backward(loss).unwrap();
        let grads = store.gradients(&tape);
        adam_step(&mut store, &grads, &mut adam, &cfg).unwrap();
    }
    let mut asym: f64 = 0.0;
    for normalized in [false, true] {
        let mut tape = Tape::<f64>::new(Mode::Eval, 0);
        let raw = tape.param(&store, "g.adj").unwrap();
        let a = effective_adjacency(&mut tape, raw, normalized).unwrap();
        let v = tape.value(a);
        for i in 0..n {
            for j in 0..n {
                asym = asym.max((v.at(&[i, j]) - v.at(&[j, i])).abs());
            }
        }
    }

    let x = normal::<f64>(&[2, 10, 3, 4], &mut rng);
    let offsets: Vec<f64> = (0..12).map(|_| rng.random_range(-50.0..50.0)).collect();
    let shifted = Tensor::new(x.shape().to_vec(), x.data().iter().enumerate().map(|(i, v)| v + offsets[i % 12]).collect()).unwrap();
    let mut tape = Tape::<f64>::new(Mode::Eval, 0);
    let (a, b) = (tape.constant(x), tape.constant(shifted));
    let (da, db) = (difference_operator(&mut tape, a, 2).unwrap(), difference_operator(&mut tape, b, 2).unwrap());
    let offset_err = max_abs(&tape.value(da).to_f64_vec(), &tape.value(db).to_f64_vec());

    let dcfg = DaeConfig { d: 4, heads: 2, k: 2, ffn_hidden: 8, ..Default::default() };
    let store = attention_store::<f32>(&dcfg, 6);
    let frame = normal::<f32>(&[2, 1, 6, 4], &mut rng);
    let constant = Tensor::new([2, 7, 6, 4], (0..2).flat_map(|b| (0..7).flat_map(move |_| b * 24..(b + 1) * 24)).map(|i| frame.data()[i]).collect()).unwrap();
    let weights = |variant| {
        let mut tape = Tape::<f32>::new(Mode::Eval, 0);
        let h = tape.constant(constant.clone());
        let w = attention_weights(&mut tape, &store, "dae", h, &DaeConfig { variant, ..dcfg.clone() }).unwrap();
        tape.value(w).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    let variants_equal = weights(AttentionVariant::Difference) == weights(AttentionVariant::Standard);

    report(
        10,
        asym == 0.0 && offset_err <= OFFSET_TOL && variants_equal,
        &format!("adjacency asymmetry after 100 Adam steps {asym:e}; offset invariance err {offset_err:.1e}; constant-input variants bit-equal {variants_equal}"),
    );
}
