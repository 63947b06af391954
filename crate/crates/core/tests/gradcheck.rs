//! Tape gradients against central finite differences on tiny configurations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wavecast_core::backbone::lora::{lora_wrap, LoraConfig};
use wavecast_core::backbone::BackboneConfig;
use wavecast_core::model::{Forecaster, ModelConfig, Stage};
use wavecast_core::mscnn::{MscnnBlock, MscnnBlockConfig, MscnnConfig};
use wavecast_core::pipeline::objective;
use wavecast_core::substrate::layers::{Conv1d, Linear, MultiHeadAttention};
use wavecast_core::substrate::{grad_check, ParamSet, Session, Tensor, Var};
use wavecast_core::t2t::{mask_patches_seeded, patchify, T2tConfig, T2tModel};
use wavecast_core::wavelet::{long_term_operator, FilterBank};

const SEEDS: std::ops::Range<u64> = 0..20;
const TOL: f64 = 1e-4;
// Large enough that roundoff stays below 1e-4 relative on gradients near 1e-7.
const EPS: f64 = 1e-4;

/// Random projection of `out` to a scalar so no gradient cancels by symmetry.
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

fn assert_checked(name: &str, seed: u64, params: &ParamSet, f: impl Fn(&mut Session) -> wavecast_core::Result<Var>) {
    let r = grad_check(params, EPS, f).unwrap();
    assert!(r.checked > 0, "{name}: nothing checked");
    assert!(r.max_rel_error < TOL, "{name} seed {seed}: rel error {} at {:?}", r.max_rel_error, r.worst);
}

#[test]
fn linear_layer() {
    for seed in SEEDS {
        let lin = Linear::new("lin", 5, 3);
        let mut p = ParamSet::new();
        lin.init(&mut p, &mut ChaCha8Rng::seed_from_u64(seed));
        let x = input([4, 5], seed);
        assert_checked("linear", seed, &p, |s| {
            let xv = s.constant(x.clone());
            let y = lin.forward(s, xv)?;
            probe(s, y, seed)
        });
    }
}

#[test]
fn temporal_convolution() {
    for seed in SEEDS {
        let conv = Conv1d::same("conv", 3, 4, 3).unwrap();
        let strided = Conv1d { prefix: "strided".into(), c_in: 3, c_out: 2, kernel: 4, stride: 2, padding: 1 };
        let mut p = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        conv.init(&mut p, &mut rng);
        strided.init(&mut p, &mut rng);
        let x = input([3, 10], seed);
        assert_checked("conv", seed, &p, |s| {
            let xv = s.constant(x.clone());
            let a = conv.forward(s, xv)?;
            let b = strided.forward(s, xv)?;
            let pa = probe(s, a, seed)?;
            let pb = probe(s, b, seed + 1)?;
            s.tape.add(pa, pb)
        });
    }
}

#[test]
fn multi_head_attention() {
    for seed in SEEDS {
        let attn = MultiHeadAttention::new("attn", 8, 2).unwrap();
        let mut p = ParamSet::new();
        attn.init(&mut p, &mut ChaCha8Rng::seed_from_u64(seed));
        let x = input([5, 8], seed);
        assert_checked("attention", seed, &p, |s| {
            let xv = s.constant(x.clone());
            let y = attn.forward(s, xv)?.out;
            probe(s, y, seed)
        });
    }
}

#[test]
fn mscnn_block_with_assembling() {
    for seed in SEEDS {
        let cfg = MscnnBlockConfig { channels: 4, branches: 2, kernel: 3, wavelet_levels: 2, assembling: true };
        let block = MscnnBlock::new("blk", cfg).unwrap();
        let mut p = ParamSet::new();
        block.init(&mut p, &mut ChaCha8Rng::seed_from_u64(seed));
        let x = input([4, 16], seed);
        let op = long_term_operator(16, 2, &FilterBank::db4()).unwrap();
        assert_checked("mscnn block", seed, &p, |s| {
            let xv = s.constant(x.clone());
            let m = s.constant(op.clone());
            let y = block.forward(s, xv, Some(m))?.out;
            probe(s, y, seed)
        });
    }
}

fn tiny_t2t() -> T2tConfig {
    T2tConfig {
        patches: 4,
        overlap: 0,
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

#[test]
fn t2t_encoder_decoder() {
    for seed in SEEDS {
        let model = T2tModel::new("t2t", tiny_t2t()).unwrap();
        let vocab = model.build_vocabulary(seed).unwrap();
        let mut p = ParamSet::new();
        model.init(&mut p, &mut ChaCha8Rng::seed_from_u64(seed), &vocab).unwrap();
        let ps = mask_patches_seeded(&patchify(&input([16, 2], seed), 4, 0).unwrap(), 0.5, seed).unwrap();
        assert_checked("t2t", seed, &p, |s| {
            let fwd = model.forward(s, &ps)?;
            model.loss(s, &ps, &fwd)
        });
    }
}

#[test]
fn lora_layer() {
    for seed in SEEDS {
        let cfg = LoraConfig { rank: 2, alpha: 4.0, dropout: 0.1 };
        let layer = lora_wrap(Linear::new("q", 6, 5), &cfg).unwrap();
        let mut p = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        layer.base.init(&mut p, &mut rng);
        layer.attach(&mut p, &mut rng).unwrap();
        // A zero B would hide the gradient of A.
        p.insert(layer.adapter.b_name(), Tensor::randn([2, 5], 0.5, &mut rng));
        let x = input([3, 6], seed);
        assert_checked("lora", seed, &p, |s| {
            let xv = s.constant(x.clone());
            let y = layer.forward(s, xv)?;
            probe(s, y, seed)
        });
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

#[test]
fn full_objective() {
    for seed in SEEDS {
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
        assert_checked("objective", seed, &p, |s| {
            let out = model.forward(s, &x)?;
            Ok(objective(s, &y, out.y_hat, &out.f_ms, &f_t2t, 0.5)?.total)
        });
    }
}
