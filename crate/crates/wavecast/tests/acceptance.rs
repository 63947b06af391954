//! Acceptance run: one PASS/FAIL/SKIP line per criterion, nonzero exit on
//! any failure. Criterion 14 needs `WAVECAST_ETTH1=<path to ETTh1.csv>`.

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use wavecast::checkpoint::Checkpoint;
use wavecast::config::RunConfig;
use wavecast::runner::{self, Log};
use wavecast_core::backbone::lora::{lora_wrap, LoraConfig};
use wavecast_core::backbone::BackboneConfig;
use wavecast_core::data::{
    few_shot_prefix, normalize, synth_generate, window, window_count, window_train, Sinusoid, SplitSpec, SynthSpec,
};
use wavecast_core::metrics::{mae, mase, mse, msae, owa, owa_relative, seasonal_naive, smape, smape_percent};
use wavecast_core::model::{Forecaster, ModelConfig, Stage};
use wavecast_core::mscnn::{receptive_field_probe, MscnnBlock, MscnnBlockConfig, MscnnConfig};
use wavecast_core::pipeline::{
    self, evaluate, mean_time_loss, model_predictor, objective, prepare, pretrain_t2t, EvalOptions, Protocol,
    TrainConfig, NOISE_FACTORS,
};
use wavecast_core::substrate::layers::{Conv1d, Linear, MultiHeadAttention};
use wavecast_core::substrate::{grad_check, ParamSet, Session, Tensor, Var};
use wavecast_core::t2t::{mask_patches_seeded, patchify, T2tConfig, T2tModel};
use wavecast_core::wavelet::{
    decouple, dwt_multilevel, idwt_multilevel, long_term_operator, pad_to_multiple, FilterBank,
};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn config_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn tiny_config(out: &Path) -> Result<RunConfig, String> {
    let mut cfg = RunConfig::load(Some(&config_dir().join("tiny.toml")), &[]).map_err(err)?;
    cfg.output_dir = out.to_path_buf();
    Ok(cfg)
}

const QUIET: Log = Log { quiet: true };

fn c1_reconstruction() -> Outcome {
    let bank = FilterBank::db4();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let len = [64, 96, 128][i % 3];
        let levels = 1 + (i / 3) % 3;
        let x = random(len, &mut rng);
        let padded = pad_to_multiple(&x, 1 << levels);
        let c = dwt_multilevel(&padded, levels, &bank).map_err(err)?;
        let y = idwt_multilevel(&c, &bank).map_err(err)?;
        worst = worst.max(max_abs(&x, &y[..len]));
    }
    let took = start.elapsed();
    ensure(worst < 1e-9, format!("max error {worst:e}"))?;
    ensure(took < Duration::from_secs(1), format!("took {took:?}"))?;
    Ok(format!("max error {worst:.1e} in {took:.1?}"))
}

fn c2_filter_bank() -> Outcome {
    let bank = FilterBank::db4();
    let c = bank.check();
    ensure(c.orthonormality <= 1e-10, format!("|Σh² − 1| = {:e}", c.orthonormality))?;
    ensure(c.vanishing_moments.iter().all(|&m| m <= 1e-8), format!("moments {:?}", c.vanishing_moments))?;
    ensure(c.qmf_exact, "g[k] ≠ (−1)^k h[N−1−k]")?;
    Ok(format!("|Σh² − 1| = {:.1e}, max moment {:.1e}", c.orthonormality, c.vanishing_moments.iter().fold(0.0, |a: f64, &b| a.max(b))))
}

fn c3_additivity() -> Outcome {
    let bank = FilterBank::db4();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let len = 64 + 8 * (i % 9);
        let x = random(len, &mut rng);
        let d = decouple(&x, 1 + i % 3, &bank).map_err(err)?;
        let sum: Vec<f64> = d.short.iter().zip(&d.long).map(|(a, b)| a + b).collect();
        worst = worst.max(max_abs(&x, &sum));
    }
    let mut flat: f64 = 0.0;
    for (i, v) in [-3.0, 0.0, 1.0, 42.5].iter().enumerate() {
        let d = decouple(&vec![*v; 96], 1 + i % 3, &bank).map_err(err)?;
        flat = flat.max(d.short.iter().map(|s| s.abs()).fold(0.0, f64::max));
    }
    ensure(worst < 1e-9, format!("‖x − P_S − P_L‖∞ = {worst:e}"))?;
    ensure(flat < 1e-9, format!("constant ‖P_S‖∞ = {flat:e}"))?;
    Ok(format!("additivity {worst:.1e}, constant ‖P_S‖∞ {flat:.1e}"))
}

fn spectral_energy(x: &[f64]) -> f64 {
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    buf.iter().map(|c| c.norm_sqr()).sum::<f64>() / x.len() as f64
}

fn c4_separation() -> Outcome {
    let bank = FilterBank::db4();
    let tone: Vec<f64> = (0..128).map(|i| (2.0 * std::f64::consts::PI * i as f64 / 32.0).sin()).collect();
    let d = decouple(&tone, 3, &bank).map_err(err)?;
    let long_share = spectral_energy(&d.long) / spectral_energy(&tone);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let normal = rand_distr_normal(&mut rng, 128);
    let d = decouple(&normal, 3, &bank).map_err(err)?;
    let short_share = spectral_energy(&d.short) / spectral_energy(&normal);
    ensure(long_share >= 0.9, format!("sinusoid keeps {:.1}% in P_L", 100.0 * long_share))?;
    ensure(short_share >= 0.5, format!("white noise keeps {:.1}% in P_S", 100.0 * short_share))?;
    Ok(format!("sinusoid {:.1}% in P_L, noise {:.1}% in P_S", 100.0 * long_share, 100.0 * short_share))
}

fn rand_distr_normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    Tensor::randn([n], 1.0, rng).into_data()
}

fn c5_receptive_fields() -> Outcome {
    let cfg = MscnnBlockConfig { channels: 16, branches: 4, kernel: 3, ..MscnnBlockConfig::default() };
    let rf = receptive_field_probe(&cfg).map_err(err)?;
    ensure(rf == [3, 5, 7, 9], format!("got {rf:?}"))?;
    Ok(format!("{rf:?}"))
}

const GC_SEEDS: std::ops::Range<u64> = 0..5;

fn probe(s: &mut Session, out: Var, seed: u64) -> wavecast_core::Result<Var> {
    let n = s.value(out).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let w = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let weighted = s.tape.mul_const(out, w)?;
    Ok(s.tape.sum(weighted))
}

fn input(shape: [usize; 2], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x1234))
}

fn tiny_t2t() -> T2tConfig {
    T2tConfig {
        patches: 4,
        patch_size: 4,
        hidden: 8,
        ff_hidden: 16,
        output: 4,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        mask_ratio: 0.5,
        vocab_size: 20,
        embed_dim: 6,
        top_k: 10,
        seed_words: 3,
        ..T2tConfig::default()
    }
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        input_len: 16,
        horizon: 4,
        mscnn: MscnnConfig {
            block: MscnnBlockConfig { channels: 4, branches: 2, kernel: 3, wavelet_levels: 2, assembling: true },
            depth: 1,
        },
        t2t: tiny_t2t(),
        backbone: BackboneConfig {
            layers: 1,
            d_model: 8,
            heads: 2,
            ff_hidden: 16,
            token_chunk: 4,
            lora: LoraConfig { rank: 2, alpha: 4.0, dropout: 0.1 },
            ..BackboneConfig::default()
        },
        vocab_seed: 1,
    }
}

fn c6_gradients() -> Outcome {
    let mut rows = Vec::new();
    let mut check = |name: &str,
                     build: &dyn Fn(u64) -> (ParamSet, Box<dyn Fn(&mut Session) -> wavecast_core::Result<Var>>)|
     -> Result<(), String> {
        let mut worst: f64 = 0.0;
        for seed in GC_SEEDS {
            let (p, f) = build(seed);
            let r = grad_check(&p, 1e-4, f).map_err(err)?;
            ensure(r.checked > 0, format!("{name}: no trainable parameters"))?;
            ensure(r.max_rel_error < 1e-4, format!("{name} seed {seed}: {:e} at {:?}", r.max_rel_error, r.worst))?;
            worst = worst.max(r.max_rel_error);
        }
        rows.push(format!("{name} {worst:.0e}"));
        Ok(())
    };
    check("linear", &|seed| {
        let lin = Linear::new("lin", 5, 3);
        let mut p = ParamSet::new();
        lin.init(&mut p, &mut ChaCha8Rng::seed_from_u64(seed));
        let x = input([4, 5], seed);
        (p, Box::new(move |s| {
            let xv = s.constant(x.clone());
            let y = lin.forward(s, xv)?;
            probe(s, y, seed)
        }))
    })?;
    check("conv", &|seed| {
        let conv = Conv1d::same("conv", 3, 4, 3).unwrap();
        let mut p = ParamSet::new();
        conv.init(&mut p, &mut ChaCha8Rng::seed_from_u64(seed));
        let x = input([3, 10], seed);
        (p, Box::new(move |s| {
            let xv = s.constant(x.clone());
            let y = conv.forward(s, xv)?;
            probe(s, y, seed)
        }))
    })?;
    check("attention", &|seed| {
        let attn = MultiHeadAttention::new("attn", 8, 2).unwrap();
        let mut p = ParamSet::new();
        attn.init(&mut p, &mut ChaCha8Rng::seed_from_u64(seed));
        let x = input([5, 8], seed);
        (p, Box::new(move |s| {
            let xv = s.constant(x.clone());
            let y = attn.forward(s, xv)?.out;
            probe(s, y, seed)
        }))
    })?;
    check("mscnn block", &|seed| {
        let cfg = MscnnBlockConfig { channels: 4, branches: 2, kernel: 3, wavelet_levels: 2, assembling: true };
        let block = MscnnBlock::new("blk", cfg).unwrap();
        let mut p = ParamSet::new();
        block.init(&mut p, &mut ChaCha8Rng::seed_from_u64(seed));
        let x = input([4, 16], seed);
        let op = long_term_operator(16, 2, &FilterBank::db4()).unwrap();
        (p, Box::new(move |s| {
            let xv = s.constant(x.clone());
            let m = s.constant(op.clone());
            let y = block.forward(s, xv, Some(m))?.out;
            probe(s, y, seed)
        }))
    })?;
    check("t2t", &|seed| {
        let model = T2tModel::new("t2t", tiny_t2t()).unwrap();
        let vocab = model.build_vocabulary(seed).unwrap();
        let mut p = ParamSet::new();
        model.init(&mut p, &mut ChaCha8Rng::seed_from_u64(seed), &vocab).unwrap();
        let ps = mask_patches_seeded(&patchify(&input([16, 2], seed), 4, 0).unwrap(), 0.5, seed).unwrap();
        (p, Box::new(move |s| {
            let fwd = model.forward(s, &ps)?;
            model.loss(s, &ps, &fwd)
        }))
    })?;
    check("lora", &|seed| {
        let layer = lora_wrap(Linear::new("q", 6, 5), &LoraConfig { rank: 2, alpha: 4.0, dropout: 0.1 }).unwrap();
        let mut p = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        layer.base.init(&mut p, &mut rng);
        layer.attach(&mut p, &mut rng).unwrap();
        // A zero B would hide the gradient of A.
        p.insert(layer.adapter.b_name(), Tensor::randn([2, 5], 0.5, &mut rng));
        let x = input([3, 6], seed);
        (p, Box::new(move |s| {
            let xv = s.constant(x.clone());
            let y = layer.forward(s, xv)?;
            probe(s, y, seed)
        }))
    })?;
    check("objective", &|seed| {
        let model = Forecaster::new(tiny_model()).unwrap();
        let mut p = model.init(seed).unwrap();
        model.set_stage(&mut p, Stage::Main).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for a in model.backbone.adapters() {
            p.insert(a.b_name(), Tensor::randn([a.rank, a.d_out], 0.3, &mut rng));
        }
        let x = input([16, 2], seed);
        let y = input([4, 2], seed + 7);
        let f_t2t = model.semantic_features(&p, &x).unwrap();
        (p, Box::new(move |s| {
            let out = model.forward(s, &x)?;
            Ok(objective(s, &y, out.y_hat, &out.f_ms, &f_t2t, 0.5)?.total)
        }))
    })?;
    Ok(rows.join(", "))
}

fn c7_lora() -> Outcome {
    let model = Forecaster::new(ModelConfig { horizon: 24, ..ModelConfig::default() }).map_err(err)?;
    let mut params = model.init(0).map_err(err)?;
    model.set_stage(&mut params, Stage::Main).map_err(err)?;

    // Identity at init: the adapted backbone matches one with the adapters removed.
    let mut plain = model.clone();
    for l in &mut plain.backbone.layers {
        l.attn.q_lora = None;
        l.attn.v_lora = None;
    }
    let x = Tensor::randn([96, 2], 1.0, &mut ChaCha8Rng::seed_from_u64(70));
    let deviation = model.predict(&params, &x).map_err(err)?.max_abs_diff(&plain.predict(&params, &x).map_err(err)?);
    ensure(deviation < 1e-12, format!("fresh adapters change the forecast by {deviation:e}"))?;

    let expected: usize = model.backbone.adapters().map(|a| a.rank * (a.d_in + a.d_out)).sum();
    let trainable: usize = params
        .trainable_names()
        .filter(|n| n.starts_with("backbone."))
        .map(|n| params.get(n).map_or(0, |t| t.len()))
        .sum();
    ensure(trainable == expected, format!("{trainable} trainable backbone values, expected {expected}"))?;

    let base: Vec<(String, Tensor)> = params
        .iter()
        .filter(|(n, _)| n.starts_with("backbone.") && !n.contains(".lora_"))
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect();
    let ts = synth_generate(&SynthSpec::default(), 96 + 24 + 15, 2, 5).map_err(err)?;
    let w = window(&ts, 96, 24, 1).map_err(err)?;
    let prepared = prepare(&model, &params, &w).map_err(err)?;
    let cfg = TrainConfig { batch_size: 4, max_steps: Some(100), max_epochs: 1000, patience: 1000, ..TrainConfig::default() };
    let out = pipeline::train(&model, params.clone(), &prepared, &[], &cfg, &mut |_| {}).map_err(err)?;
    ensure(out.steps == 100, format!("ran {} steps", out.steps))?;
    for (n, t) in &base {
        let after = out.params.get(n).ok_or(format!("{n} missing"))?;
        ensure(after.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()), format!("{n} changed"))?;
    }
    let moved = model
        .backbone
        .adapters()
        .any(|a| out.params.get(&a.b_name()).is_some_and(|b| b.data().iter().any(|&v| v != 0.0)));
    ensure(moved, "adapters did not train")?;
    Ok(format!("deviation {deviation:.0e}, {} base tensors unchanged, {expected} adapter values", base.len()))
}

fn c8_masking() -> Outcome {
    let x = Tensor::randn([96, 1], 1.0, &mut ChaCha8Rng::seed_from_u64(8));
    let ps = patchify(&x, 16, 0).map_err(err)?;
    let mut seen = HashSet::new();
    for seed in 0..1000 {
        let m = mask_patches_seeded(&ps, 0.75, seed).map_err(err)?;
        ensure(m.masked_count() == 12, format!("seed {seed} masked {}", m.masked_count()))?;
        seen.insert(m.mask.clone());
    }
    ensure(seen.len() > 100, format!("only {} distinct masks", seen.len()))?;
    Ok(format!("12 of 16 every draw, {} distinct masks", seen.len()))
}

fn sinusoid_windows(seed: u64, len: usize, stride: usize) -> Result<Vec<Tensor>, String> {
    let spec = SynthSpec {
        sinusoids: vec![
            Sinusoid { freq: 1.0 / 24.0, amp: 1.0, phase: seed as f64 },
            Sinusoid { freq: 1.0 / 48.0, amp: 0.5, phase: 0.5 * seed as f64 },
        ],
        trend: 0.0,
        noise: 0.0,
        channel_phase: 0.0,
    };
    let ts = synth_generate(&spec, len, 1, seed).map_err(err)?;
    Ok(window(&ts, 96, 1, stride).map_err(err)?.iter().map(|w| normalize(w).x).collect())
}

fn c9_pretraining() -> Outcome {
    let model = Forecaster::new(ModelConfig { horizon: 24, ..ModelConfig::default() }).map_err(err)?;
    let params = model.init(0).map_err(err)?;
    let train = sinusoid_windows(1, 1200, 1)?;
    let val = sinusoid_windows(2, 400, 9)?;
    let cfg = TrainConfig { t2t_steps: 500, ..TrainConfig::default() };
    let start = Instant::now();
    let out = pretrain_t2t(&model, params, &train, &val, &cfg, &mut |_| {}).map_err(err)?;
    let took = start.elapsed();
    let ratio = out.final_masked_mse / out.initial_masked_mse;
    ensure(ratio <= 0.3, format!("masked MSE {:.4} -> {:.4}", out.initial_masked_mse, out.final_masked_mse))?;
    ensure(took < Duration::from_secs(300), format!("took {took:?}"))?;
    Ok(format!(
        "masked MSE {:.4} -> {:.4} ({:.0}%) in {:.0?}",
        out.initial_masked_mse,
        out.final_masked_mse,
        100.0 * ratio,
        took
    ))
}

fn c10_overfit() -> Outcome {
    let model = Forecaster::new(ModelConfig { horizon: 24, ..ModelConfig::default() }).map_err(err)?;
    let params = model.init(0).map_err(err)?;
    let spec = SynthSpec { noise: 0.0, ..SynthSpec::default() };
    let ts = synth_generate(&spec, 96 + 24 + 63, 2, 3).map_err(err)?;
    let w = window(&ts, 96, 24, 1).map_err(err)?;
    ensure(w.len() == 64, format!("{} windows", w.len()))?;
    let start = Instant::now();
    let prepared = prepare(&model, &params, &w).map_err(err)?;
    let cfg = TrainConfig {
        batch_size: 8,
        max_epochs: 10_000,
        max_steps: Some(2000),
        patience: 10_000,
        ..TrainConfig::default()
    };
    let out = pipeline::train(&model, params, &prepared, &[], &cfg, &mut |_| {}).map_err(err)?;
    let l_time = mean_time_loss(&model, &out.params, &prepared).map_err(err)?;
    let eval = evaluate(&w, 24, &EvalOptions::default(), model_predictor(&model, &out.params)).map_err(err)?;
    let took = start.elapsed();
    ensure(l_time < 0.05, format!("L_TIME {l_time:.4} after {} steps", out.steps))?;
    ensure(eval.normalized.mse < 0.05, format!("MSE {:.4}", eval.normalized.mse))?;
    ensure(took < Duration::from_secs(600), format!("took {took:?}"))?;
    Ok(format!("L_TIME {l_time:.4}, MSE {:.5} after {} steps in {:.0?}", eval.normalized.mse, out.steps, took))
}

fn col(v: &[f64]) -> Tensor {
    Tensor::new([v.len(), 1], v.to_vec()).unwrap()
}

fn c11_metrics() -> Outcome {
    let close = |a: f64, b: f64, what: &str| ensure((a - b).abs() <= 1e-12, format!("{what}: {a} vs {b}"));
    close(mse(&col(&[0.0]), &col(&[2.0])).map_err(err)?, 4.0, "mse")?;
    close(mse(&col(&[1.0, 2.0]), &col(&[2.0, 4.0])).map_err(err)?, 2.5, "mse")?;
    close(mae(&col(&[0.0]), &col(&[-3.0])).map_err(err)?, 3.0, "mae")?;
    close(mae(&col(&[1.0, 2.0]), &col(&[2.0, 4.0])).map_err(err)?, 1.5, "mae")?;
    close(msae(&col(&[2.0]), &col(&[1.0])).map_err(err)?, 0.5, "msae")?;
    close(msae(&col(&[0.0, 2.0]), &col(&[5.0, 1.0])).map_err(err)?, 0.5, "msae")?;
    ensure(msae(&col(&[0.0]), &col(&[1.0])).is_err(), "msae on all-zero targets")?;
    close(smape(&col(&[100.0]), &col(&[110.0])).map_err(err)?, 20.0 / 210.0, "smape")?;
    close(smape_percent(&col(&[100.0]), &col(&[110.0])).map_err(err)?, 2000.0 / 210.0, "smape %")?;
    close(smape(&col(&[1.0]), &col(&[-1.0])).map_err(err)?, 2.0, "smape")?;
    close(owa(&[1.0, 2.0], &[0.5, 0.5]).map_err(err)?, 1.5, "owa")?;
    close(owa(&[3.0, 7.0], &[0.0, 1.0]).map_err(err)?, 7.0, "owa")?;
    close(owa_relative(1.0, 2.0, 2.0, 2.0).map_err(err)?, 0.75, "owa relative")?;
    close(mase(&col(&[1.0]), &col(&[3.0]), &col(&[0.0, 1.0, 0.0, 3.0]), 1).map_err(err)?, 1.2, "mase")?;
    let naive = seasonal_naive(&col(&[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]), 3, 4).map_err(err)?;
    ensure(naive.data() == [1.0, 2.0, 3.0, 1.0], format!("seasonal naive {:?}", naive.data()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..1000 {
        let n = 1 + i % 17;
        let shape = [n, 1 + i % 3];
        let y = Tensor::randn(shape, 1.0 + (i % 5) as f64, &mut rng);
        let p = Tensor::randn(shape, 1.0, &mut rng);
        let (m, a, s) = (mse(&y, &p).map_err(err)?, mae(&y, &p).map_err(err)?, smape(&y, &p).map_err(err)?);
        ensure(a <= m.sqrt() * (1.0 + 1e-12), format!("batch {i}: MAE {a} > √MSE {}", m.sqrt()))?;
        ensure((0.0..=2.0).contains(&s), format!("batch {i}: SMAPE {s}"))?;
    }
    Ok("15 hand examples, 1000 random batches".into())
}

fn c12_protocols() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let cfg = tiny_config(dir.path())?;
    let ds = runner::load_dataset(&cfg, None).map_err(err)?;
    let sp = runner::split_dataset(&cfg, &ds).map_err(err)?;

    let few = runner::train(&cfg, &ds, Protocol::Few, None, QUIET).map_err(err)?;
    for h in &few {
        let all = window_train(&sp.train, cfg.data.input_len, h.horizon, cfg.data.train_stride).map_err(err)?;
        let n = window_count(sp.train.len(), cfg.data.input_len, h.horizon, cfg.data.train_stride);
        let k = n / 10;
        let prefix = few_shot_prefix(&all, 0.1);
        ensure(prefix.len() == k && h.checkpoint.meta.train_windows == k, format!(
            "T={}: trained on {} windows, ⌊0.1·{n}⌋ = {k}",
            h.horizon, h.checkpoint.meta.train_windows
        ))?;
        ensure(prefix.iter().zip(&all).all(|(a, b)| a.origin == b.origin), "few-shot windows are not a prefix")?;
    }

    runner::train(&cfg, &ds, Protocol::Long, None, QUIET).map_err(err)?;
    let shapes = runner::protocol_shapes(&cfg, Protocol::Long);
    let hashes = |dir: &Path| -> Result<Vec<Vec<u8>>, String> {
        shapes
            .iter()
            .map(|&(_, t)| std::fs::read(runner::checkpoint_path(dir, Protocol::Long, t)).map_err(err))
            .collect()
    };
    let before = hashes(dir.path())?;
    let param_hash: Vec<String> = shapes
        .iter()
        .map(|&(_, t)| Checkpoint::load(&runner::checkpoint_path(dir.path(), Protocol::Long, t)).map(|c| c.hash()))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let other = runner::load_dataset(&cfg, Some("synthetic:77")).map_err(err)?;
    let zero = runner::evaluate(&cfg, Protocol::Zero, dir.path(), None, &other, QUIET).map_err(err)?;
    ensure(zero.dataset == "synthetic→synthetic:77", format!("zero-shot tagged {:?}", zero.dataset))?;
    ensure(hashes(dir.path())? == before, "zero-shot evaluation rewrote a checkpoint")?;
    for (&(_, t), h) in shapes.iter().zip(&param_hash) {
        let c = Checkpoint::load(&runner::checkpoint_path(dir.path(), Protocol::Long, t)).map_err(err)?;
        ensure(&c.hash() == h, "checkpoint parameters changed")?;
    }

    let clean = runner::evaluate(&cfg, Protocol::Long, dir.path(), None, &ds, QUIET).map_err(err)?;
    let noisy = runner::evaluate(&cfg, Protocol::Noise, dir.path(), None, &ds, QUIET).map_err(err)?;
    let factors: Vec<f64> = noisy.noise.iter().map(|n| n.factor).collect();
    ensure(factors == NOISE_FACTORS, format!("noise factors {factors:?}"))?;
    let zero_noise = &noisy.noise[0].horizons;
    ensure(
        serde_json::to_string(zero_noise).map_err(err)? == serde_json::to_string(&clean.horizons).map_err(err)?,
        "factor 0.0 differs from the noiseless report",
    )?;
    Ok(format!(
        "few-shot {:?} windows, zero-shot hashes unchanged, noise factors {factors:?}",
        few.iter().map(|h| h.checkpoint.meta.train_windows).collect::<Vec<_>>()
    ))
}

fn c13_determinism() -> Outcome {
    let run = || -> Result<String, String> {
        let dir = tempfile::tempdir().map_err(err)?;
        let cfg = tiny_config(dir.path())?;
        let ds = runner::load_dataset(&cfg, None).map_err(err)?;
        runner::train(&cfg, &ds, Protocol::Long, None, QUIET).map_err(err)?;
        let r = runner::evaluate(&cfg, Protocol::Noise, dir.path(), None, &ds, QUIET).map_err(err)?;
        serde_json::to_string(&r.without_runtime()).map_err(err)
    };
    let (a, b) = (run()?, run()?);
    ensure(a == b, "reports differ between identical runs")?;
    Ok(format!("{} identical report bytes", a.len()))
}

fn c14_etth1(path: &Path) -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let mut cfg = RunConfig::load(Some(&config_dir().join("desk.toml")), &[]).map_err(err)?;
    cfg.output_dir = dir.path().to_path_buf();
    cfg.data.source = path.display().to_string();
    cfg.data.name = None;
    cfg.data.input_len = 96;
    cfg.data.horizons = vec![96];
    cfg.data.split = SplitSpec::Months { train: 12, val: 4, test: 4 };
    let log = Log { quiet: std::env::var_os("WAVECAST_VERBOSE").is_none() };
    let start = Instant::now();
    let ds = runner::load_dataset(&cfg, None).map_err(err)?;
    let t2t = runner::pretrain(&cfg, &ds, 96, log).map_err(err)?;
    runner::train(&cfg, &ds, Protocol::Long, Some(&t2t.checkpoint), log).map_err(err)?;
    let r = runner::evaluate(&cfg, Protocol::Long, dir.path(), None, &ds, log).map_err(err)?;
    let took = start.elapsed();
    let m = r.horizons.get("96").ok_or("no T=96 result")?;
    ensure(m.mse < 1.5, format!("test MSE {:.4}", m.mse))?;
    ensure(took <= Duration::from_secs(1800), format!("took {took:?}"))?;
    Ok(format!("test MSE {:.4}, MAE {:.4} in {:.0?}", m.mse, m.mae, took))
}

enum Status {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn guarded(f: impl FnOnce() -> Outcome) -> Status {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(s)) => Status::Pass(s),
        Ok(Err(s)) => Status::Fail(s),
        Err(p) => Status::Fail(
            p.downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()),
        ),
    }
}

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: Vec<(usize, &str, Box<dyn FnOnce() -> Status>)> = vec![
        (1, "wavelet perfect reconstruction", Box::new(|| guarded(c1_reconstruction))),
        (2, "filter bank", Box::new(|| guarded(c2_filter_bank))),
        (3, "decoupling additivity", Box::new(|| guarded(c3_additivity))),
        (4, "spectral separation", Box::new(|| guarded(c4_separation))),
        (5, "receptive fields", Box::new(|| guarded(c5_receptive_fields))),
        (6, "gradient checks", Box::new(|| guarded(c6_gradients))),
        (7, "LoRA contracts", Box::new(|| guarded(c7_lora))),
        (8, "masking statistics", Box::new(|| guarded(c8_masking))),
        (9, "semantic pretraining", Box::new(|| guarded(c9_pretraining))),
        (10, "end-to-end overfit", Box::new(|| guarded(c10_overfit))),
        (11, "metric oracles", Box::new(|| guarded(c11_metrics))),
        (12, "protocol plumbing", Box::new(|| guarded(c12_protocols))),
        (13, "determinism", Box::new(|| guarded(c13_determinism))),
        (
            14,
            "ETTh1 smoke run",
            Box::new(|| match std::env::var_os("WAVECAST_ETTH1") {
                Some(p) => guarded(|| c14_etth1(Path::new(&p))),
                None => Status::Skip("set WAVECAST_ETTH1 to an ETTh1 CSV to run".into()),
            }),
        ),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let status = run();
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match status {
            Status::Pass(d) => ("PASS", d),
            Status::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Status::Skip(d) => ("SKIP", d),
        };
        println!("{tag} {id:>2} {name:<32} {detail} [{secs:.1}s]");
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
