//! Shape and normalization invariants on full-size configurations.

use xflood_core::cctfrm;
use xflood_core::config::ModelConfig;
use xflood_core::data::{generate, DataShape};
use xflood_core::graph::{Graph, Mode, Var};
use xflood_core::hcamam;
use xflood_core::mfim::{self, AttentionLevelConfig, Level};
use xflood_core::model::Model;
use xflood_core::params::ParamStore;
use xflood_core::tensor::Tensor;

use super::oracles::{rand_vec, rng, tensor};
use super::Check;

fn desk_batch(n: usize, seed: u64) -> (Model, ParamStore, xflood_core::model::SampleBatch) {
    let cfg = ModelConfig::desk();
    let model = Model::new(cfg.clone()).unwrap();
    let store = model.init_params(seed).unwrap();
    let samples = generate(n, seed, 0.5, DataShape::from(&cfg)).unwrap();
    let batch = model.encode(&samples).unwrap();
    (model, store, batch)
}

/// Largest `|row sum − 1|` over every attention matrix of a desk forward pass;
/// also fails on any negative weight.
pub fn attention_rows() -> Check {
    let (model, store, batch) = desk_batch(4, 31);
    let mut g = Graph::new(Mode::Train, 1);
    let out = model.forward(&mut g, &store, &batch).unwrap();
    if out.attention_weights.is_empty() {
        return Check::failed("attention rows sum to 1", "no attention weights");
    }
    let mut worst: f64 = 0.0;
    let mut negative = false;
    for &w in &out.attention_weights {
        let t = g.value(w);
        for row in t.data().chunks(t.last_dim()) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            negative |= row.iter().any(|v| *v < 0.0);
        }
    }
    let mut c = Check::abs("attention rows sum to 1", &[worst], &[0.0], 1e-9);
    if negative {
        c = c.max(Check::failed("", "negative attention weight"));
    }
    c
}

fn strictly_unit(g: &Graph, vars: &[Var]) -> bool {
    vars.iter().all(|&v| g.value(v).data().iter().all(|x| *x > 0.0 && *x < 1.0))
}

/// FEECA's attention map, FMSA's spatial and refined maps and the
/// harmonizer gate all lie strictly inside (0, 1).
pub fn sigmoid_maps() -> Check {
    let (model, store, batch) = desk_batch(4, 32);
    let cfg = &model.cfg;
    let mut g = Graph::new(Mode::Train, 2);
    let images: Vec<Var> = batch.images.iter().map(|t| g.input(t.clone())).collect();
    let globals: Vec<Option<Var>> = (0..images.len())
        .map(|i| {
            let t = g.input(batch.text[i].clone());
            let gr = g.input(batch.grid[i].clone());
            Some(mfim::global_features(&mut g, t, gr).unwrap())
        })
        .collect();
    let hc = hcamam::forward(&mut g, &store, cfg, &images, &globals).unwrap();
    let cc = cctfrm::forward(&mut g, &store, cfg, &images).unwrap();
    let mut maps = Vec::new();
    for s in &hc {
        maps.push(s.feeca.as_ref().unwrap().y_att);
        let f = s.fmsa.as_ref().unwrap();
        maps.push(f.a_spatial);
        maps.push(f.a_refined);
    }
    maps.extend(&cc.gates);
    if strictly_unit(&g, &maps) {
        Check::ok("sigmoid-gated maps lie in (0, 1)", 0.0)
    } else {
        Check::failed("sigmoid-gated maps lie in (0, 1)", "value outside the open interval")
    }
}

/// Feature enhancement keeps every even extent; the encoder halves the
/// input once per stage.
pub fn spatial_extents() -> Check {
    let name = "feature enhancement and encoder extents";
    let mut store = ParamStore::new(0);
    cctfrm::declare_gated_block(&mut store, "fe", 2, 3).unwrap();
    for (h, w) in [(2, 2), (4, 6), (8, 8), (16, 4), (6, 10)] {
        let mut g = Graph::new(Mode::Train, 0);
        let x = g.input(Tensor::full(&[h, w, 2], 0.1).unwrap());
        let y = cctfrm::feature_enhancement(&mut g, &store, "fe", &[x], 0.2).unwrap()[0].output;
        if g.shape(y) != [h, w, 3] {
            return Check::failed(name, &format!("{h}×{w} became {:?}", g.shape(y)));
        }
    }
    let (model, store, batch) = desk_batch(2, 33);
    let mut g = Graph::new(Mode::Eval, 0);
    let images: Vec<Var> = batch.images.iter().map(|t| g.input(t.clone())).collect();
    let cc = cctfrm::forward(&mut g, &store, &model.cfg, &images).unwrap();
    let [h, w] = model.cfg.image_size;
    for (i, maps) in cc.encoder_maps.iter().enumerate() {
        let expect = [h >> i, w >> i, model.cfg.encoder_plan[i]];
        if g.shape(maps[0]) != expect {
            return Check::failed(name, &format!("block {i} map {:?}", g.shape(maps[0])));
        }
    }
    let stages = model.cfg.encoder_plan.len();
    let [bh, bw] = model.cfg.bottleneck_size();
    if [bh, bw] != [h >> stages, w >> stages] {
        return Check::failed(name, "bottleneck is not input/2^stages");
    }
    let expect_c: usize = model.cfg.decoder_plan.iter().sum();
    if g.shape(cc.cascades[0]) != [bh, bw, expect_c] {
        return Check::failed(name, &format!("cascade {:?}", g.shape(cc.cascades[0])));
    }
    Check::ok(name, 0.0)
}

/// Coarse/medium/fine head split for `d_se = 512`, `h = 8`.
pub fn head_arithmetic() -> Check {
    let got: Vec<f64> = Level::ALL
        .iter()
        .flat_map(|&l| {
            let c = AttentionLevelConfig::new(l, 512, 8).unwrap();
            [c.heads as f64, c.head_dim as f64]
        })
        .collect();
    Check::abs(
        "head split for d_se=512, h=8 is 4×128, 8×64, 16×32",
        &got,
        &[4.0, 128.0, 8.0, 64.0, 16.0, 32.0],
        0.0,
    )
}

/// `Σ|x|² = Σ|X|² / (H·W)` at desk sizes.
pub fn parseval() -> Check {
    let mut rg = rng(34);
    let mut c = Check::ok("FFT satisfies Parseval", 1e-8);
    for (h, w, ch) in [(8, 8, 12), (16, 16, 3), (5, 7, 2)] {
        let x = rand_vec(&mut rg, h * w * ch, 1.0);
        let mut g = Graph::new(Mode::Eval, 0);
        let xv = g.input(tensor(&[h, w, ch], x.clone()));
        let f = g.fft2d_magnitude(xv).unwrap();
        let lhs: f64 = x.iter().map(|v| v * v).sum();
        let rhs: f64 = g.value(f).data().iter().map(|v| v * v).sum::<f64>() / (h * w) as f64;
        c = c.max(Check::abs("", &[(lhs - rhs).abs() / lhs], &[0.0], 1e-8));
    }
    c
}

/// Same seed gives bit-identical initialization; replaying a forward pass
/// (train mode with its dropout seed, and eval mode) gives identical values.
pub fn determinism() -> Check {
    let name = "initialization and forward replay are bit-identical";
    let (model, store, batch) = desk_batch(3, 35);
    let again = model.init_params(35).unwrap();
    if !store.bit_identical(&again) {
        return Check::failed(name, "initialization differs");
    }
    for mode in [Mode::Train, Mode::Eval] {
        let run = || {
            let mut g = Graph::new(mode, 9);
            let out = model.forward(&mut g, &store, &batch).unwrap();
            g.value(out.logits).data().iter().map(|v| v.to_bits()).collect::<Vec<u64>>()
        };
        if run() != run() {
            return Check::failed(name, &format!("{mode:?} replay differs"));
        }
    }
    Check::ok(name, 0.0)
}

pub fn all() -> Vec<(&'static str, fn() -> Check)> {
    vec![
        ("attention_rows", attention_rows),
        ("sigmoid_maps", sigmoid_maps),
        ("spatial_extents", spatial_extents),
        ("head_arithmetic", head_arithmetic),
        ("parseval", parseval),
        ("determinism", determinism),
    ]
}
