//! Small layer helpers shared by the model modules: dense layers, batch
//! normalization with running statistics, and scaled dot-product attention.

use crate::error::Result;
use crate::graph::{Graph, Mode, NormAxis, Var};
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

pub fn declare_linear(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, bias: bool) -> Result<()> {
    store.declare(&format!("{prefix}.w"), &[d_in, d_out], Init::FanIn(d_in))?;
    if bias {
        store.declare(&format!("{prefix}.b"), &[d_out], Init::Zeros)?;
    }
    Ok(())
}

/// `x·W (+ b)` for a row-major `n×d_in` input.
pub fn linear(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.w"))?;
    let b_name = format!("{prefix}.b");
    let b = match store.value(&b_name) {
        Some(_) => Some(g.param(store, &b_name)?),
        None => None,
    };
    g.linear(x, w, b)
}

/// `K×K×(C_in/G)×C_out` kernel with fan-in `K·K·C_in/G`.
pub fn declare_conv(store: &mut ParamStore, name: &str, k: usize, cin_per_group: usize, cout: usize) -> Result<()> {
    store.declare(name, &[k, k, cin_per_group, cout], Init::FanIn(k * k * cin_per_group))
}

pub fn declare_batch_norm(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<()> {
    store.declare(&format!("{prefix}.gamma"), &[channels], Init::Ones)?;
    store.declare(&format!("{prefix}.beta"), &[channels], Init::Zeros)?;
    store.declare_buffer(&format!("{prefix}.running_mean"), Tensor::zeros(&[channels])?)?;
    store.declare_buffer(&format!("{prefix}.running_var"), Tensor::ones(&[channels])?)?;
    Ok(())
}

/// Batch normalization over a batch of equally shaped channels-last maps.
///
/// In train mode the statistics of each channel are taken over every sample
/// and spatial position, and the running statistics are blended with
/// momentum 0.9 (recorded on the graph; the trainer commits them). In eval
/// mode the running statistics are used; before any training step they are
/// the initial mean 0 / variance 1.
pub fn batch_norm(g: &mut Graph, store: &ParamStore, prefix: &str, xs: &[Var]) -> Result<Vec<Var>> {
    let gamma = g.param(store, &format!("{prefix}.gamma"))?;
    let beta = g.param(store, &format!("{prefix}.beta"))?;
    let mean_name = format!("{prefix}.running_mean");
    let var_name = format!("{prefix}.running_var");

    let stacked = g.stack(xs)?;
    let normed = match g.mode() {
        Mode::Train => {
            let n = g.normalize(stacked, NormAxis::Channels);
            let (bm, bv) = g.norm_stats(n).expect("normalize node");
            let (bm, bv) = (bm.to_vec(), bv.to_vec());
            let rm = store.value(&mean_name).expect("declared running mean");
            let rv = store.value(&var_name).expect("declared running var");
            let blend = |r: &Tensor, b: &[f64]| {
                let data = r
                    .data()
                    .iter()
                    .zip(b)
                    .map(|(r, b)| BN_MOMENTUM * r + (1.0 - BN_MOMENTUM) * b)
                    .collect();
                Tensor::new(r.shape(), data)
            };
            let (new_m, new_v) = (blend(rm, &bm)?, blend(rv, &bv)?);
            g.record_buffer_update(mean_name, new_m);
            g.record_buffer_update(var_name, new_v);
            n
        }
        Mode::Eval => {
            let rm = store.value(&mean_name).expect("declared running mean").clone();
            let inv = store
                .value(&var_name)
                .expect("declared running var")
                .map(|v| 1.0 / (v + BN_EPS).sqrt());
            let m = g.input(rm);
            let s = g.input(inv);
            let centered = g.sub(stacked, m)?;
            g.mul(centered, s)?
        }
    };
    let scaled = g.mul(normed, gamma)?;
    let out = g.add(scaled, beta)?;
    (0..xs.len()).map(|i| g.select(out, i)).collect()
}

/// Result of multi-head scaled dot-product attention.
pub struct Attended {
    /// Concatenated head outputs, `n_q × (heads·head_dim)`.
    pub output: Var,
    /// One `n_q × n_k` row-stochastic weight matrix per head.
    pub weights: Vec<Var>,
}

/// Splits the columns of `q`, `k`, `v` into `heads` equal blocks and applies
/// `softmax(q_h k_hᵀ / sqrt(head_dim)) v_h` per block.
pub fn scaled_dot_product(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize) -> Result<Attended> {
    let d = g.shape(q)[1];
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice(q, 1, h * dh, dh)?,
                g.slice(k, 1, h * dh, dh)?,
                g.slice(v, 1, h * dh, dh)?,
            )
        };
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let p = g.softmax(scores);
        weights.push(p);
        outs.push(g.matmul(p, vh)?);
    }
    let output = if heads == 1 { outs[0] } else { g.concat(&outs, 1)? };
    Ok(Attended { output, weights })
}

/// Fixed sinusoidal position table, `n × d`.
pub fn sinusoidal_positions(n: usize, d: usize) -> Result<Tensor> {
    let mut data = vec![0.0; n * d];
    for pos in 0..n {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(&[n, d], data)
}
