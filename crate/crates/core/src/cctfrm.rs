//! Cascading convolutional transformer refinement: a gated-convolution
//! encoder, a transformer over the bottleneck positions, a decoder whose
//! stage outputs are concatenated, and the reverse feature harmonizer that
//! blends the cascade with an adapted copy of the raw image.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn;
use crate::params::{Init, ParamStore};

pub const GATE_KERNEL: usize = 3;

pub fn declare_gated_block(store: &mut ParamStore, prefix: &str, c_in: usize, c_out: usize) -> Result<()> {
    nn::declare_conv(store, &format!("{prefix}.conv"), GATE_KERNEL, c_in, c_out)?;
    nn::declare_batch_norm(store, &format!("{prefix}.bn"), c_out)
}

/// Output of a gated block for one sample.
#[derive(Clone, Copy, Debug)]
pub struct GatedOut {
    /// `ReLU(G ⊙ σ(G))` at the input resolution (the Grad-CAM target).
    pub gated: Var,
    /// Dropout → batch norm → 2×2 max pool.
    pub output: Var,
}

/// `maxpool(BN(dropout(ReLU(G ⊙ σ(G)))))` with `G = conv3×3(x)`, batch
/// norm pooled across the batch.
pub fn gated_block(g: &mut Graph, store: &ParamStore, prefix: &str, xs: &[Var], dropout: f64) -> Result<Vec<GatedOut>> {
    let kernel = g.param(store, &format!("{prefix}.conv"))?;
    let mut gated = Vec::with_capacity(xs.len());
    let mut dropped = Vec::with_capacity(xs.len());
    for &x in xs {
        let gm = g.conv2d(x, kernel, 1)?;
        let s = g.sigmoid(gm);
        let gs = g.mul(gm, s)?;
        let r = g.relu(gs);
        gated.push(r);
        dropped.push(g.dropout(r, dropout)?);
    }
    let normed = nn::batch_norm(g, store, &format!("{prefix}.bn"), &dropped)?;
    gated
        .into_iter()
        .zip(normed)
        .map(|(gated, n)| Ok(GatedOut { gated, output: g.max_pool2(n)? }))
        .collect()
}

/// Upsample ×2 then a gated block: spatial extents are preserved.
pub fn feature_enhancement(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    xs: &[Var],
    dropout: f64,
) -> Result<Vec<GatedOut>> {
    let ups: Vec<Var> = xs.iter().map(|&x| g.upsample_nearest(x, 2)).collect::<Result<_>>()?;
    gated_block(g, store, prefix, &ups, dropout)
}

pub fn declare_transformer(store: &mut ParamStore, prefix: &str, depth: usize, d: usize, ff: usize) -> Result<()> {
    for l in 0..depth {
        let p = format!("{prefix}{l}");
        for w in ["wq", "wk", "wv", "wo"] {
            store.declare(&format!("{p}.{w}"), &[d, d], Init::FanIn(d))?;
        }
        nn::declare_linear(store, &format!("{p}.ff1"), d, ff, true)?;
        nn::declare_linear(store, &format!("{p}.ff2"), ff, d, true)?;
    }
    Ok(())
}

pub struct TransformerOut {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// Pre-LN transformer layers `x += MHA(LN(x)); x += FF(LN(x))` over an
/// `n × d` token matrix. When `positions` is set, the sinusoidal table is
/// added once before the first layer.
pub fn transformer(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    tokens: Var,
    depth: usize,
    heads: usize,
    positions: bool,
) -> Result<TransformerOut> {
    let [n, d] = g.shape(tokens)[..] else {
        return Err(Error::shape("transformer", "tokens must be n×d"));
    };
    if heads == 0 || d % heads != 0 {
        return Err(Error::config("transformer_heads", format!("{heads} must divide d_model = {d}")));
    }
    let mut x = tokens;
    if positions {
        let pe = g.input(nn::sinusoidal_positions(n, d)?);
        x = g.add(x, pe)?;
    }
    let mut weights = Vec::new();
    for l in 0..depth {
        let p = format!("{prefix}{l}");
        let h = g.layer_norm(x);
        let proj = |name: &str, g: &mut Graph| -> Result<Var> {
            let w = g.param(store, &format!("{p}.{name}"))?;
            g.matmul(h, w)
        };
        let q = proj("wq", g)?;
        let k = proj("wk", g)?;
        let v = proj("wv", g)?;
        let att = nn::scaled_dot_product(g, q, k, v, heads)?;
        weights.extend(att.weights);
        let wo = g.param(store, &format!("{p}.wo"))?;
        let o = g.matmul(att.output, wo)?;
        x = g.add(x, o)?;
        let h = g.layer_norm(x);
        let f = nn::linear(g, store, &format!("{p}.ff1"), h)?;
        let f = g.relu(f);
        let f = nn::linear(g, store, &format!("{p}.ff2"), f)?;
        x = g.add(x, f)?;
    }
    Ok(TransformerOut { output: x, weights })
}

const SCALARS: [&str; 5] = ["beta", "g_cascade", "g_image", "alpha_cascade", "alpha_sub"];

pub fn declare_harmonizer(store: &mut ParamStore, prefix: &str, c_t: usize) -> Result<()> {
    nn::declare_conv(store, &format!("{prefix}.adapter"), 3, 3, c_t)?;
    store.declare(&format!("{prefix}.adapter.b"), &[c_t], Init::Zeros)?;
    nn::declare_batch_norm(store, &format!("{prefix}.bn_image"), c_t)?;
    nn::declare_batch_norm(store, &format!("{prefix}.bn_cascade"), c_t)?;
    for s in SCALARS {
        store.declare(&format!("{prefix}.{s}"), &[1], Init::Ones)?;
    }
    Ok(())
}

/// Adapter from a raw image to the cascade's `H_t × W_t × C_t`: average
/// pooling down to `H_t × W_t`, then a 3×3 convolution with bias.
pub fn adapt_image(g: &mut Graph, store: &ParamStore, prefix: &str, image: Var, target: [usize; 2]) -> Result<Var> {
    let [h, w, _] = g.shape(image)[..] else {
        return Err(Error::shape("adapt_image", "image must be H×W×3"));
    };
    if h % target[0] != 0 || w % target[1] != 0 || h / target[0] != w / target[1] {
        return Err(Error::config(
            "image_size",
            format!("{h}×{w} cannot be pooled to {}×{}", target[0], target[1]),
        ));
    }
    let f = h / target[0];
    let pooled = if f == 1 { image } else { g.avg_pool(image, f)? };
    let k = g.param(store, &format!("{prefix}.adapter"))?;
    let b = g.param(store, &format!("{prefix}.adapter.b"))?;
    let c = g.conv2d(pooled, k, 1)?;
    g.add(c, b)
}

/// Output of [`harmonize`] for one sample.
#[derive(Clone, Copy, Debug)]
pub struct Harmonized {
    /// `H_t × W_t × C_t` gate in (0, 1).
    pub gate: Var,
    /// Flattened blend, `[d_r]`.
    pub output: Var,
}

/// Gated subtraction and scaling of the normalized cascade `Y` and adapted
/// image `X`:
/// `Y_sub = β·X − σ(Y)`, `gate = σ(g_c·Y + g_i·X)`,
/// `O = gate ⊙ (α_c·Y + α_s·Y_sub)`, flattened.
pub fn harmonize(g: &mut Graph, store: &ParamStore, prefix: &str, y_norm: Var, x_norm: Var) -> Result<Harmonized> {
    let [beta, gc, gi, ac, asub] = SCALARS.map(|s| g.param(store, &format!("{prefix}.{s}")));
    let (beta, gc, gi, ac, asub) = (beta?, gc?, gi?, ac?, asub?);
    let bx = g.mul(x_norm, beta)?;
    let sy = g.sigmoid(y_norm);
    let y_sub = g.sub(bx, sy)?;
    let a = g.mul(y_norm, gc)?;
    let b = g.mul(x_norm, gi)?;
    let z = g.add(a, b)?;
    let gate = g.sigmoid(z);
    let a = g.mul(y_norm, ac)?;
    let b = g.mul(y_sub, asub)?;
    let mix = g.add(a, b)?;
    let o = g.mul(gate, mix)?;
    Ok(Harmonized {
        gate,
        output: g.flatten(o)?,
    })
}

/// Batched harmonizer: both inputs are batch-normalized before blending.
pub fn harmonizer(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    cascades: &[Var],
    images: &[Var],
) -> Result<Vec<Harmonized>> {
    let [ht, wt, _] = g.shape(cascades[0])[..] else {
        return Err(Error::shape("harmonizer", "cascade must be H×W×C"));
    };
    let adapted: Vec<Var> = images
        .iter()
        .map(|&im| adapt_image(g, store, prefix, im, [ht, wt]))
        .collect::<Result<_>>()?;
    let xn = nn::batch_norm(g, store, &format!("{prefix}.bn_image"), &adapted)?;
    let yn = nn::batch_norm(g, store, &format!("{prefix}.bn_cascade"), cascades)?;
    xn.iter()
        .zip(&yn)
        .map(|(&x, &y)| harmonize(g, store, prefix, y, x))
        .collect()
}

pub fn declare(store: &mut ParamStore, cfg: &ModelConfig) -> Result<()> {
    if !cfg.ablation.cctfrm {
        return Ok(());
    }
    let mut c_in = 3;
    for (i, &c) in cfg.encoder_plan.iter().enumerate() {
        declare_gated_block(store, &format!("cctfrm.enc{i}"), c_in, c)?;
        c_in = c;
    }
    declare_transformer(store, "cctfrm.tf", cfg.transformer_depth, c_in, cfg.transformer_ff)?;
    for (i, &c) in cfg.decoder_plan.iter().enumerate() {
        declare_gated_block(store, &format!("cctfrm.dec{i}"), c_in, c)?;
        c_in = c;
    }
    declare_harmonizer(store, "cctfrm.harm", cfg.cascade_channels())
}

pub struct CctfrmOut {
    /// Per encoder block, the gated map of every sample.
    pub encoder_maps: Vec<Vec<Var>>,
    pub attention_weights: Vec<Var>,
    /// Cascaded decoder output per sample, `H_t × W_t × C_t`.
    pub cascades: Vec<Var>,
    /// Harmonizer gate per sample, `H_t × W_t × C_t`.
    pub gates: Vec<Var>,
    /// Harmonized vector per sample, `[d_r]`.
    pub refined: Vec<Var>,
}

pub fn forward(g: &mut Graph, store: &ParamStore, cfg: &ModelConfig, images: &[Var]) -> Result<CctfrmOut> {
    let mut xs = images.to_vec();
    let mut encoder_maps = Vec::with_capacity(cfg.encoder_plan.len());
    for i in 0..cfg.encoder_plan.len() {
        let outs = gated_block(g, store, &format!("cctfrm.enc{i}"), &xs, cfg.dropout)?;
        encoder_maps.push(outs.iter().map(|o| o.gated).collect());
        xs = outs.iter().map(|o| o.output).collect();
    }
    let mut attention_weights = Vec::new();
    for x in xs.iter_mut() {
        let [h, w, c] = g.shape(*x)[..] else { unreachable!() };
        let tokens = g.reshape(*x, &[h * w, c])?;
        let t = transformer(
            g,
            store,
            "cctfrm.tf",
            tokens,
            cfg.transformer_depth,
            cfg.transformer_heads,
            true,
        )?;
        attention_weights.extend(t.weights);
        *x = g.reshape(t.output, &[h, w, c])?;
    }
    let mut stages: Vec<Vec<Var>> = Vec::with_capacity(cfg.decoder_plan.len());
    for i in 0..cfg.decoder_plan.len() {
        let outs = feature_enhancement(g, store, &format!("cctfrm.dec{i}"), &xs, cfg.dropout)?;
        xs = outs.iter().map(|o| o.output).collect();
        stages.push(xs.clone());
    }
    let cascades: Vec<Var> = (0..images.len())
        .map(|s| {
            let parts: Vec<Var> = stages.iter().map(|st| st[s]).collect();
            if parts.len() == 1 {
                Ok(parts[0])
            } else {
                g.concat(&parts, 2)
            }
        })
        .collect::<Result<_>>()?;
    let harmonized = harmonizer(g, store, "cctfrm.harm", &cascades, images)?;
    Ok(CctfrmOut {
        encoder_maps,
        attention_weights,
        cascades,
        gates: harmonized.iter().map(|h| h.gate).collect(),
        refined: harmonized.iter().map(|h| h.output).collect(),
    })
}
