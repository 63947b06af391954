//! Quick numerical checks of the building blocks, one line per check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wavecast_core::backbone::lora::LoraConfig;
use wavecast_core::backbone::BackboneConfig;
use wavecast_core::data::{normalize, synth_generate, window, NormStats, SynthSpec};
use wavecast_core::metrics::{mae, mse, smape};
use wavecast_core::model::{Forecaster, ModelConfig, Stage};
use wavecast_core::mscnn::{MscnnBlockConfig, MscnnConfig};
use wavecast_core::pipeline::objective;
use wavecast_core::substrate::{grad_check, Tensor};
use wavecast_core::t2t::{filter_vocabulary, kl_divergence, EmbeddingTable, T2tConfig};
use wavecast_core::wavelet::{decouple, dwt_multilevel, idwt_multilevel, FilterBank};

use crate::checkpoint::{Checkpoint, CheckpointMeta};

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Options {
    /// Swaps one filtered word for the worst-scoring one, so the
    /// vocabulary check must fail.
    pub corrupt_filter: bool,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<String, String>) -> CheckResult {
    match f() {
        Ok(detail) => CheckResult { name, passed: true, detail },
        Err(detail) => CheckResult { name, passed: false, detail },
    }
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn random(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn filter_bank() -> Result<String, String> {
    let c = FilterBank::db4().check();
    ensure(c.orthonormality < 1e-12, format!("energy off by {:e}", c.orthonormality))?;
    ensure(c.qmf_exact, "highpass is not the alternating flip of lowpass")?;
    ensure(c.vanishing_moments.iter().all(|&m| m < 1e-9), format!("moments {:?}", c.vanishing_moments))?;
    Ok("orthonormal, 4 vanishing moments".into())
}

fn wavelet_round_trip() -> Result<String, String> {
    let bank = FilterBank::db4();
    let x = random(128, 1);
    let c = dwt_multilevel(&x, 3, &bank).map_err(|e| e.to_string())?;
    let y = idwt_multilevel(&c, &bank).map_err(|e| e.to_string())?;
    let err = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let ex: f64 = x.iter().map(|v| v * v).sum();
    let ec: f64 = c.approx.iter().chain(c.details.iter().flatten()).map(|v| v * v).sum();
    ensure(err < 1e-10, format!("reconstruction error {err:e}"))?;
    ensure((ex - ec).abs() < 1e-9 * ex, format!("energy {ex} vs {ec}"))?;
    Ok(format!("max error {err:.1e}"))
}

fn decoupling() -> Result<String, String> {
    let bank = FilterBank::db4();
    let x = random(100, 2);
    let d = decouple(&x, 3, &bank).map_err(|e| e.to_string())?;
    let add = x.iter().enumerate().map(|(i, v)| (v - d.short[i] - d.long[i]).abs()).fold(0.0, f64::max);
    ensure(add < 1e-10, format!("short + long misses x by {add:e}"))?;
    let c = decouple(&[3.5; 64], 3, &bank).map_err(|e| e.to_string())?;
    let flat = c.short.iter().map(|v| v.abs()).fold(0.0, f64::max);
    ensure(flat < 1e-10, format!("constant has short-term part {flat:e}"))?;
    Ok(format!("additivity {add:.1e}, constant short {flat:.1e}"))
}

fn vocabulary(opts: Options) -> Result<String, String> {
    let (w, d, k) = (300, 16, 40);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let table = EmbeddingTable::new(Tensor::randn([w, d], 1.0, &mut rng), (0..w).map(|i| format!("w{i}")).collect())
        .map_err(|e| e.to_string())?;
    let seeds = [5usize, 77, 201];
    let filtered = filter_vocabulary(&table, &seeds, k).map_err(|e| e.to_string())?;
    let mut got: Vec<usize> = filtered.words.iter().map(|w| w[1..].parse().unwrap_or(usize::MAX)).collect();

    let cos = |a: usize, b: usize| {
        let (ra, rb) = (table.vectors.row(a), table.vectors.row(b));
        let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
        dot / (ra.iter().map(|x| x * x).sum::<f64>().sqrt() * rb.iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    let mut scored: Vec<(f64, usize)> = (0..w)
        .filter(|r| !seeds.contains(r))
        .map(|r| (seeds.iter().map(|&s| cos(s, r)).fold(f64::MIN, f64::max), r))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    if opts.corrupt_filter {
        if let Some(last) = got.last_mut() {
            *last = scored.last().map_or(0, |s| s.1);
        }
    }
    let mut expected: Vec<usize> = seeds.to_vec();
    expected.extend(scored.iter().take(k - seeds.len()).map(|s| s.1));
    ensure(got[..seeds.len()] == seeds, "seed words are not first")?;
    got.sort_unstable();
    expected.sort_unstable();
    ensure(got == expected, "filtered set differs from brute-force top-k")?;
    Ok(format!("top {k} of {w} match brute force"))
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        input_len: 16,
        horizon: 4,
        mscnn: MscnnConfig {
            block: MscnnBlockConfig { channels: 4, branches: 2, kernel: 3, wavelet_levels: 2, assembling: true },
            depth: 1,
        },
        t2t: T2tConfig {
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
        },
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

fn gradients() -> Result<String, String> {
    let e = |e: wavecast_core::Error| e.to_string();
    let model = Forecaster::new(tiny_model()).map_err(e)?;
    let mut p = model.init(4).map_err(e)?;
    model.set_stage(&mut p, Stage::Main).map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for a in model.backbone.adapters() {
        p.insert(a.b_name(), Tensor::randn([a.rank, a.d_out], 0.3, &mut rng));
    }
    let x = Tensor::randn([16, 2], 1.0, &mut rng);
    let y = Tensor::randn([4, 2], 1.0, &mut rng);
    let f_t2t = model.semantic_features(&p, &x).map_err(e)?;
    let r = grad_check(&p, 1e-4, |s| {
        let out = model.forward(s, &x)?;
        Ok(objective(s, &y, out.y_hat, &out.f_ms, &f_t2t, 0.5)?.total)
    })
    .map_err(e)?;
    ensure(r.max_rel_error < 1e-4, format!("relative error {:e} at {:?}", r.max_rel_error, r.worst))?;
    Ok(format!("{} parameters, max relative error {:.1e}", r.checked, r.max_rel_error))
}

fn metrics() -> Result<String, String> {
    let y = Tensor::new([3, 1], vec![1.0, -2.0, 3.0]).map_err(|e| e.to_string())?;
    let yh = Tensor::new([3, 1], vec![2.0, -2.0, 1.0]).map_err(|e| e.to_string())?;
    let (m, a) = (mse(&y, &yh).map_err(|e| e.to_string())?, mae(&y, &yh).map_err(|e| e.to_string())?);
    ensure((m - 5.0 / 3.0).abs() < 1e-12, format!("MSE {m}"))?;
    ensure((a - 1.0).abs() < 1e-12, format!("MAE {a}"))?;
    ensure(a * a <= m + 1e-12, "MAE² exceeds MSE")?;
    let s = smape(&y, &yh).map_err(|e| e.to_string())?;
    ensure((0.0..=2.0).contains(&s), format!("SMAPE {s} out of range"))?;
    let kl = kl_divergence(&[0.2, 0.8], &[0.5, 0.5]);
    ensure(kl > 0.0 && kl_divergence(&[0.3, 0.7], &[0.3, 0.7]).abs() < 1e-15, format!("KL {kl}"))?;
    Ok(format!("MSE {m:.4}, MAE {a:.4}, SMAPE {s:.4}"))
}

fn normalization() -> Result<String, String> {
    let ts = synth_generate(&SynthSpec::default(), 200, 2, 4).map_err(|e| e.to_string())?;
    let w = window(&ts, 48, 12, 50).map_err(|e| e.to_string())?;
    ensure(!w.is_empty(), "no windows")?;
    let mut worst: f64 = 0.0;
    for s in &w {
        let n = normalize(s);
        ensure(n.stats == NormStats::of(&s.x), "statistics use more than the input window")?;
        worst = worst.max(n.stats.invert(&n.x).max_abs_diff(&s.x));
    }
    ensure(worst < 1e-10, format!("round trip error {worst:e}"))?;
    Ok(format!("{} windows, round trip {worst:.1e}", w.len()))
}

fn checkpoint() -> Result<String, String> {
    let cfg = tiny_model();
    let model = Forecaster::new(cfg.clone()).map_err(|e| e.to_string())?;
    let params = model.init(9).map_err(|e| e.to_string())?;
    let meta = CheckpointMeta {
        stage: "forecast".into(),
        protocol: "long".into(),
        dataset: "selftest".into(),
        config_hash: String::new(),
        seed: 9,
        train_windows: 0,
        steps: 0,
        model: cfg,
    };
    let ck = Checkpoint { meta, params };
    let mut bytes = ck.to_bytes().map_err(|e| e.to_string())?;
    let back = Checkpoint::from_bytes(&bytes).map_err(|e| e.to_string())?;
    ensure(back.hash() == ck.hash(), "hash changed across the round trip")?;
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    ensure(Checkpoint::from_bytes(&bytes).is_err(), "corrupted blob was accepted")?;
    Ok(format!("{} tensors", back.params.len()))
}

pub fn run(opts: Options) -> Vec<CheckResult> {
    vec![
        check("filter bank", filter_bank),
        check("wavelet round trip", wavelet_round_trip),
        check("decoupling", decoupling),
        check("vocabulary filter", || vocabulary(opts)),
        check("gradients", gradients),
        check("metrics", metrics),
        check("normalization", normalization),
        check("checkpoint", checkpoint),
    ]
}
