//! Heterogeneous convolutional attention: residual group/point convolutions
//! (HREN), frequency-enhanced channel attention (FEECA), frequency-modulated
//! spatial attention (FMSA) and the attention fusion block.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, NormAxis, Var};
use crate::nn;
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;

const MS_KERNELS: [usize; 3] = [3, 5, 7];
const SPATIAL_KERNEL: usize = 7;
const REDUCTION: usize = 4;

fn hw_c(g: &Graph, x: Var, op: &'static str) -> Result<(usize, usize, usize)> {
    match *g.shape(x) {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(Error::shape(op, format!("expected H×W×C, got {s:?}"))),
    }
}

pub fn declare_hren(
    store: &mut ParamStore,
    prefix: &str,
    k: usize,
    c_in: usize,
    c_out: usize,
    groups: usize,
) -> Result<()> {
    if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
        return Err(Error::config(
            "hren_groups",
            format!("{groups} must divide C_in={c_in} and C_out={c_out}"),
        ));
    }
    nn::declare_conv(store, &format!("{prefix}.group"), k, c_in / groups, c_out)?;
    nn::declare_conv(store, &format!("{prefix}.pre"), 1, c_in, c_out)?;
    nn::declare_batch_norm(store, &format!("{prefix}.bn"), c_out)?;
    nn::declare_conv(store, &format!("{prefix}.point"), 1, c_out, c_out)?;
    if c_in != c_out {
        nn::declare_conv(store, &format!("{prefix}.res"), 1, c_in, c_out)?;
    }
    Ok(())
}

/// `groupconv(x) + pointconv(BN(pre(x))) + Res(x)` for every sample in the
/// batch; batch normalization pools statistics across the batch.
pub fn hren(g: &mut Graph, store: &ParamStore, prefix: &str, xs: &[Var], groups: usize) -> Result<Vec<Var>> {
    let group = g.param(store, &format!("{prefix}.group"))?;
    let pre = g.param(store, &format!("{prefix}.pre"))?;
    let point = g.param(store, &format!("{prefix}.point"))?;
    let res_name = format!("{prefix}.res");
    let res = match store.value(&res_name) {
        Some(_) => Some(g.param(store, &res_name)?),
        None => None,
    };
    let pres: Vec<Var> = xs.iter().map(|&x| g.conv2d(x, pre, 1)).collect::<Result<_>>()?;
    let normed = nn::batch_norm(g, store, &format!("{prefix}.bn"), &pres)?;
    let mut out = Vec::with_capacity(xs.len());
    for (&x, &n) in xs.iter().zip(&normed) {
        let gw = g.conv2d(x, group, groups)?;
        let pw = g.conv2d(n, point, 1)?;
        let agp = g.add(gw, pw)?;
        let r = match res {
            Some(k) => g.conv2d(x, k, 1)?,
            None => x,
        };
        out.push(g.add(agp, r)?);
    }
    Ok(out)
}

pub fn declare_feeca(store: &mut ParamStore, prefix: &str, c: usize) -> Result<()> {
    store.declare(&format!("{prefix}.conv"), &[3], Init::FanIn(3))?;
    store.declare(&format!("{prefix}.conv_b"), &[1], Init::Zeros)?;
    nn::declare_linear(store, &format!("{prefix}.proj"), c, c, true)?;
    store.declare(&format!("{prefix}.scale"), &[1, 1, c], Init::Ones)?;
    Ok(())
}

/// Intermediate maps of [`feeca`].
pub struct FeecaMaps {
    /// `1 × C` channel descriptor after the channel convolution and dense layer.
    pub y_proj: Var,
    /// `H × W × 1` attention map in (0, 1).
    pub y_att: Var,
    pub output: Var,
}

/// Channel attention whose descriptor is correlated with the scaled FFT
/// magnitude at every position:
/// `Y_att(h,w) = σ(Σ_c Y_proj(c)·S(c)·|FFT(x)|(h,w,c))`,
/// output `LN_space(Y_att) ⊙ LN_channels(x)`.
pub fn feeca(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<FeecaMaps> {
    let (h, w, c) = hw_c(g, x, "feeca")?;
    let gap = g.global_avg_pool(x)?;
    let desc = g.flatten(gap)?;
    let kernel = g.param(store, &format!("{prefix}.conv"))?;
    let kb = g.param(store, &format!("{prefix}.conv_b"))?;
    let conv = g.conv1d(desc, kernel)?;
    let conv = g.add(conv, kb)?;
    let conv = g.reshape(conv, &[1, c])?;
    let y_proj = nn::linear(g, store, &format!("{prefix}.proj"), conv)?;

    let freq = g.fft2d_magnitude(x)?;
    let s = g.param(store, &format!("{prefix}.scale"))?;
    let sff = g.mul(s, freq)?;
    let sff = g.reshape(sff, &[h * w, c])?;
    let yt = g.transpose(y_proj)?;
    let logits = g.matmul(sff, yt)?;
    let y_att = g.sigmoid(logits);
    let y_att = g.reshape(y_att, &[h, w, 1])?;

    let flat = g.reshape(y_att, &[h * w])?;
    let att_n = g.layer_norm(flat);
    let att_n = g.reshape(att_n, &[h, w, 1])?;
    let x_n = g.layer_norm(x);
    let output = g.mul(att_n, x_n)?;
    Ok(FeecaMaps { y_proj, y_att, output })
}

pub fn declare_fmsa(store: &mut ParamStore, prefix: &str, c: usize) -> Result<()> {
    if c % REDUCTION != 0 {
        return Err(Error::config("hren_channels", format!("{c} must be divisible by {REDUCTION}")));
    }
    for k in MS_KERNELS {
        nn::declare_conv(store, &format!("{prefix}.ms{k}"), k, c, 1)?;
    }
    nn::declare_linear(store, &format!("{prefix}.proj"), c, c, false)?;
    nn::declare_conv(store, &format!("{prefix}.spatial"), SPATIAL_KERNEL, 1, c)?;
    nn::declare_linear(store, &format!("{prefix}.reduce"), c, c / REDUCTION, false)?;
    nn::declare_linear(store, &format!("{prefix}.expand"), c / REDUCTION, c, false)?;
    store.declare(&format!("{prefix}.w_att"), &[1], Init::Ones)?;
    store.declare(&format!("{prefix}.w_refined"), &[1], Init::Ones)?;
    Ok(())
}

/// Intermediate maps of [`fmsa`].
pub struct FmsaMaps {
    /// `H × W × 1` map in (0, 1).
    pub a_spatial: Var,
    pub a_proj: Var,
    /// `H × W × C` map in (0, 1).
    pub a_refined: Var,
    pub output: Var,
}

/// Spatial attention from multi-scale convolutions, modulated by the
/// per-channel FFT magnitude and refined through a depthwise 7×7 conv and a
/// reduce/expand bottleneck: `Y = x ⊙ (w_att·A_proj ⊙ w_refined·A_refined)`.
pub fn fmsa(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<FmsaMaps> {
    let (h, w, c) = hw_c(g, x, "fmsa")?;
    let mut z = None;
    for k in MS_KERNELS {
        let kernel = g.param(store, &format!("{prefix}.ms{k}"))?;
        let zk = g.conv2d(x, kernel, 1)?;
        z = Some(match z {
            None => zk,
            Some(acc) => g.add(acc, zk)?,
        });
    }
    let a_spatial = g.sigmoid(z.expect("three kernels"));

    let freq = g.fft2d_magnitude(x)?;
    let a_agg = g.mul(a_spatial, freq)?;
    let f_norm = g.normalize(freq, NormAxis::Channels);
    let combined = g.mul(a_agg, f_norm)?;
    let combined = g.reshape(combined, &[h * w, c])?;
    let a_proj = nn::linear(g, store, &format!("{prefix}.proj"), combined)?;
    let a_proj = g.reshape(a_proj, &[h, w, c])?;

    let spatial = g.param(store, &format!("{prefix}.spatial"))?;
    let smoothed = g.conv2d(a_proj, spatial, c)?;
    let smoothed = g.reshape(smoothed, &[h * w, c])?;
    let r = nn::linear(g, store, &format!("{prefix}.reduce"), smoothed)?;
    let r = g.relu(r);
    let e = nn::linear(g, store, &format!("{prefix}.expand"), r)?;
    let a_refined = g.sigmoid(e);
    let a_refined = g.reshape(a_refined, &[h, w, c])?;

    let w_att = g.param(store, &format!("{prefix}.w_att"))?;
    let w_ref = g.param(store, &format!("{prefix}.w_refined"))?;
    let left = g.mul(a_proj, w_att)?;
    let right = g.mul(a_refined, w_ref)?;
    let gate = g.mul(left, right)?;
    let output = g.mul(x, gate)?;
    Ok(FmsaMaps {
        a_spatial,
        a_proj,
        a_refined,
        output,
    })
}

/// `ReLU(W·[flatten(channel_concat(maps)), globals] + b)`; either part may
/// be empty.
pub fn attention_fusion(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    maps: &[Var],
    globals: Option<Var>,
) -> Result<Var> {
    let mut parts = Vec::with_capacity(2);
    if !maps.is_empty() {
        let cat = if maps.len() == 1 { maps[0] } else { g.concat(maps, 2)? };
        parts.push(g.flatten(cat)?);
    }
    if let Some(gl) = globals {
        parts.push(gl);
    }
    if parts.is_empty() {
        return Err(Error::Contract("attention fusion needs at least one input".into()));
    }
    let v = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 0)? };
    let n = g.shape(v)[0];
    let row = g.reshape(v, &[1, n])?;
    let y = nn::linear(g, store, prefix, row)?;
    let y = g.relu(y);
    g.flatten(y)
}

pub fn declare(store: &mut ParamStore, cfg: &ModelConfig) -> Result<()> {
    let a = cfg.ablation;
    if a.hcamam {
        let c = cfg.hren_channels;
        declare_hren(store, "hcamam.hren", cfg.hren_kernel, 3, c, cfg.hren_groups)?;
        if a.feeca {
            declare_feeca(store, "hcamam.feeca", c)?;
        }
        if a.fmsa {
            declare_fmsa(store, "hcamam.fmsa", c)?;
        }
    }
    if a.uses_attention_fusion() {
        nn::declare_linear(store, "hcamam.fusion", cfg.attention_fusion_width(), cfg.d_fused, true)?;
    }
    Ok(())
}

/// Per-sample maps, kept for inspection.
pub struct HcamamSample {
    pub features: Option<Var>,
    pub feeca: Option<FeecaMaps>,
    pub fmsa: Option<FmsaMaps>,
    /// `[d_fused]`, absent when both HCAMAM and the global features are off.
    pub fused: Option<Var>,
}

/// Runs the module on a batch of raw images, combining each with its global
/// features (if any). Images are average-pooled to `hcamam_size` first.
pub fn forward(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    images: &[Var],
    globals: &[Option<Var>],
) -> Result<Vec<HcamamSample>> {
    let a = cfg.ablation;
    let mut samples: Vec<HcamamSample> = images
        .iter()
        .map(|_| HcamamSample {
            features: None,
            feeca: None,
            fmsa: None,
            fused: None,
        })
        .collect();
    if a.hcamam {
        let f = cfg.image_size[0] / cfg.hcamam_size[0];
        let pooled: Vec<Var> = images
            .iter()
            .map(|&x| if f == 1 { Ok(x) } else { g.avg_pool(x, f) })
            .collect::<Result<_>>()?;
        let feats = hren(g, store, "hcamam.hren", &pooled, cfg.hren_groups)?;
        for (s, x) in samples.iter_mut().zip(feats) {
            s.features = Some(x);
            if a.feeca {
                s.feeca = Some(feeca(g, store, "hcamam.feeca", x)?);
            }
            if a.fmsa {
                s.fmsa = Some(fmsa(g, store, "hcamam.fmsa", x)?);
            }
        }
    }
    if a.uses_attention_fusion() {
        for (s, gl) in samples.iter_mut().zip(globals) {
            let mut maps = Vec::with_capacity(2);
            if let Some(m) = &s.feeca {
                maps.push(m.output);
            }
            if let Some(m) = &s.fmsa {
                maps.push(m.output);
            }
            if maps.is_empty() {
                if let Some(x) = s.features {
                    maps.push(x);
                }
            }
            let gl = if a.uses_globals() { *gl } else { None };
            s.fused = Some(attention_fusion(g, store, "hcamam.fusion", &maps, gl)?);
        }
    }
    Ok(samples)
}

/// Identity `1×1×C×C` kernel, handy for constructing pass-through layers.
pub fn identity_pointwise(c: usize) -> Result<Tensor> {
    let mut k = Tensor::zeros(&[1, 1, c, c])?;
    for i in 0..c {
        k.set(&[0, 0, i, i], 1.0);
    }
    Ok(k)
}
