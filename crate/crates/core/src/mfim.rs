//! Multimodal feature interaction: stub encoders, global features, local
//! feature projection (BiLSTM for text, multi-scale convolutions for image),
//! self-gating, coarse/medium/fine self-attention, contextual gating,
//! cross-modal attention and joint fusion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{self, Attended};
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;

pub const MAX_TOKENS: usize = 512;
const MS_KERNELS: [usize; 3] = [3, 5, 7];

/// Fixed, seeded replacements for the pretrained text and image encoders.
#[derive(Clone, Debug)]
pub struct StubEncoders {
    /// `vocab × d_t` embedding table.
    pub text_table: Tensor,
    /// `3 × d_i` patch projection.
    pub image_map: Tensor,
    pub grid: [usize; 2],
}

impl StubEncoders {
    pub fn new(vocab: usize, d_t: usize, d_i: usize, grid: [usize; 2], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text = (0..vocab * d_t).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let image = (0..3 * d_i).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Ok(StubEncoders {
            text_table: Tensor::new(&[vocab, d_t], text)?,
            image_map: Tensor::new(&[3, d_i], image)?,
            grid,
        })
    }

    pub fn from_config(cfg: &ModelConfig) -> Result<Self> {
        Self::new(cfg.vocab, cfg.d_t, cfg.d_i, cfg.grid, cfg.encoder_seed)
    }

    /// Row `k` of the table for every token id `k`: `n_t × d_t`.
    pub fn encode_text(&self, tokens: &[usize]) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token list".into()));
        }
        if tokens.len() > MAX_TOKENS {
            return Err(Error::Input(format!(
                "{} tokens exceeds the limit of {MAX_TOKENS}",
                tokens.len()
            )));
        }
        let [vocab, d] = self.text_table.shape()[..] else { unreachable!() };
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            if t >= vocab {
                return Err(Error::Input(format!("token id {t} outside vocabulary of {vocab}")));
            }
            data.extend_from_slice(&self.text_table.data()[t * d..(t + 1) * d]);
        }
        Tensor::new(&[tokens.len(), d], data)
    }

    /// Patch means on the region grid followed by the fixed `3 → d_i` map:
    /// `H_g × W_g × d_i`.
    pub fn encode_image(&self, image: &Tensor) -> Result<Tensor> {
        let [h, w, c] = image.shape()[..] else {
            return Err(Error::Input(format!("image must be H×W×3, got {:?}", image.shape())));
        };
        let [gh, gw] = self.grid;
        if c != 3 || h % gh != 0 || w % gw != 0 {
            return Err(Error::Input(format!(
                "image {h}×{w}×{c} is not divisible into a {gh}×{gw} grid of RGB patches"
            )));
        }
        let (ph, pw) = (h / gh, w / gw);
        let mut means = vec![0.0; gh * gw * 3];
        for y in 0..h {
            for x in 0..w {
                let cell = (y / ph) * gw + x / pw;
                for ch in 0..3 {
                    means[cell * 3 + ch] += image.data()[(y * w + x) * 3 + ch];
                }
            }
        }
        let n = (ph * pw) as f64;
        means.iter_mut().for_each(|m| *m /= n);
        let patches = Tensor::new(&[gh * gw, 3], means)?;
        let d_i = self.image_map.shape()[1];
        patches.matmul(&self.image_map)?.reshape(&[gh, gw, d_i])
    }
}

/// Token mean (`d_t`) followed by the grid average (`d_i`).
pub fn global_features(g: &mut Graph, text: Var, grid: Var) -> Result<Var> {
    let t = g.mean_axis(text, 0)?;
    let gap = g.global_avg_pool(grid)?;
    let i = g.flatten(gap)?;
    g.concat(&[t, i], 0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Coarse,
    Medium,
    Fine,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Coarse, Level::Medium, Level::Fine];

    fn name(self) -> &'static str {
        match self {
            Level::Coarse => "coarse",
            Level::Medium => "medium",
            Level::Fine => "fine",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionLevelConfig {
    pub level: Level,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttentionLevelConfig {
    /// Coarse uses `h/2` heads, medium `h`, fine `2h`.
    pub fn new(level: Level, d_se: usize, h: usize) -> Result<Self> {
        if h == 0 || h % 2 != 0 {
            return Err(Error::config("h", format!("{h} must be positive and even")));
        }
        if d_se % (2 * h) != 0 {
            return Err(Error::config("d_se", format!("{d_se} must be divisible by 2h = {}", 2 * h)));
        }
        let heads = match level {
            Level::Coarse => h / 2,
            Level::Medium => h,
            Level::Fine => 2 * h,
        };
        Ok(AttentionLevelConfig {
            level,
            heads,
            head_dim: d_se / heads,
        })
    }

    /// Softmax denominator; equals `sqrt(head_dim)`.
    pub fn scale(&self) -> f64 {
        (self.head_dim as f64).sqrt()
    }
}

fn split3(d: usize) -> [usize; 3] {
    let base = d / 3;
    let rem = d % 3;
    [base + usize::from(rem > 0), base + usize::from(rem > 1), base]
}

fn declare_square(store: &mut ParamStore, name: &str, d: usize) -> Result<()> {
    store.declare(name, &[d, d], Init::FanIn(d))
}

pub fn declare_lstm(store: &mut ParamStore, prefix: &str, d_in: usize, hidden: usize) -> Result<()> {
    for dir in ["fw", "bw"] {
        store.declare(&format!("{prefix}.{dir}.w_ih"), &[d_in, 4 * hidden], Init::FanIn(d_in))?;
        store.declare(&format!("{prefix}.{dir}.w_hh"), &[hidden, 4 * hidden], Init::FanIn(hidden))?;
        store.declare(&format!("{prefix}.{dir}.b"), &[4 * hidden], Init::Zeros)?;
    }
    Ok(())
}

pub fn declare_attention_level(store: &mut ParamStore, prefix: &str, d: usize) -> Result<()> {
    for w in ["wq", "wk", "wv", "wo"] {
        declare_square(store, &format!("{prefix}.{w}"), d)?;
    }
    Ok(())
}

/// Declares every MFIM parameter enabled by the configuration.
pub fn declare(store: &mut ParamStore, cfg: &ModelConfig) -> Result<()> {
    if !cfg.ablation.uses_joint_fusion() {
        return Ok(());
    }
    let d = cfg.d_se;
    nn::declare_linear(store, "mfim.text.proj", cfg.d_t, d, true)?;
    declare_lstm(store, "mfim.text.lstm", d, d / 2)?;
    nn::declare_linear(store, "mfim.image.proj", cfg.d_i, d, true)?;
    for (k, c) in MS_KERNELS.iter().zip(split3(d)) {
        nn::declare_conv(store, &format!("mfim.image.ms{k}"), *k, d, c)?;
        store.declare(&format!("mfim.image.ms{k}.b"), &[c], Init::Zeros)?;
    }
    nn::declare_linear(store, "mfim.image.merge", d, d, true)?;
    for m in ["text", "image"] {
        nn::declare_linear(store, &format!("mfim.{m}.gate"), d, d, true)?;
        for level in Level::ALL {
            declare_attention_level(store, &format!("mfim.{m}.{}", level.name()), d)?;
        }
        nn::declare_linear(store, &format!("mfim.{m}.ctx"), d, d, true)?;
    }
    for dir in ["t2i", "i2t"] {
        for w in ["wq", "wk", "wv"] {
            declare_square(store, &format!("mfim.cross.{dir}.{w}"), d)?;
        }
    }
    nn::declare_linear(store, "mfim.fusion.l1", d, d, true)?;
    nn::declare_linear(store, "mfim.fusion.l2", d, d, true)?;
    Ok(())
}

/// Single-layer bidirectional LSTM with zero initial states. Gates are laid
/// out `[i, f, g, o]`; the output row `t` is `[h_fw(t), h_bw(t)]`.
pub fn bilstm(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let n = g.shape(x)[0];
    let rows: Vec<Var> = (0..n).map(|t| g.slice(x, 0, t, 1)).collect::<Result<_>>()?;
    let fw = lstm_direction(g, store, &format!("{prefix}.fw"), rows.iter().copied())?;
    let mut bw = lstm_direction(g, store, &format!("{prefix}.bw"), rows.iter().rev().copied())?;
    bw.reverse();
    let fw = g.concat(&fw, 0)?;
    let bw = g.concat(&bw, 0)?;
    g.concat(&[fw, bw], 1)
}

fn lstm_direction(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    rows: impl Iterator<Item = Var>,
) -> Result<Vec<Var>> {
    let w_ih = g.param(store, &format!("{prefix}.w_ih"))?;
    let w_hh = g.param(store, &format!("{prefix}.w_hh"))?;
    let b = g.param(store, &format!("{prefix}.b"))?;
    let hidden = g.shape(w_hh)[0];
    let mut h = g.input(Tensor::zeros(&[1, hidden])?);
    let mut c = h;
    let mut out = Vec::new();
    for x in rows {
        let zx = g.matmul(x, w_ih)?;
        let zh = g.matmul(h, w_hh)?;
        let z = g.add(zx, zh)?;
        let z = g.add(z, b)?;
        let i = g.slice(z, 1, 0, hidden)?;
        let f = g.slice(z, 1, hidden, hidden)?;
        let cand = g.slice(z, 1, 2 * hidden, hidden)?;
        let o = g.slice(z, 1, 3 * hidden, hidden)?;
        let (i, f, o) = (g.sigmoid(i), g.sigmoid(f), g.sigmoid(o));
        let cand = g.tanh(cand);
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        c = g.add(keep, write)?;
        let tc = g.tanh(c);
        h = g.mul(o, tc)?;
        out.push(h);
    }
    Ok(out)
}

/// Text basis: projection then BiLSTM, `n_t × d_se`.
pub fn text_local(g: &mut Graph, store: &ParamStore, text: Var) -> Result<Var> {
    let p = nn::linear(g, store, "mfim.text.proj", text)?;
    bilstm(g, store, "mfim.text.lstm", p)
}

/// Image basis: projection, three same-padded convolutions (3, 5, 7) whose
/// outputs are concatenated and merged back to `d_se`, flattened to
/// `n_i × d_se`.
pub fn image_local(g: &mut Graph, store: &ParamStore, grid: Var) -> Result<Var> {
    let [gh, gw, d_i] = g.shape(grid)[..] else {
        return Err(Error::shape("image_local", "grid must be H×W×d_i"));
    };
    let flat = g.reshape(grid, &[gh * gw, d_i])?;
    let p = nn::linear(g, store, "mfim.image.proj", flat)?;
    let d = g.shape(p)[1];
    let map = g.reshape(p, &[gh, gw, d])?;
    let mut branches = Vec::with_capacity(3);
    for k in MS_KERNELS {
        let kernel = g.param(store, &format!("mfim.image.ms{k}"))?;
        let bias = g.param(store, &format!("mfim.image.ms{k}.b"))?;
        let z = g.conv2d(map, kernel, 1)?;
        branches.push(g.add(z, bias)?);
    }
    let ms = g.concat(&branches, 2)?;
    let ms = g.reshape(ms, &[gh * gw, d])?;
    nn::linear(g, store, "mfim.image.merge", ms)
}

/// `x ⊙ σ(x·W + b)`.
pub fn self_gate(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let z = nn::linear(g, store, prefix, x)?;
    let s = g.sigmoid(z);
    g.mul(x, s)
}

/// Multi-head self-attention at one granularity, projected by the level's
/// own output matrix.
pub fn attention_level(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    level: AttentionLevelConfig,
) -> Result<Attended> {
    let proj = |name: &str, g: &mut Graph| -> Result<Var> {
        let w = g.param(store, &format!("{prefix}.{name}"))?;
        g.matmul(x, w)
    };
    let q = proj("wq", g)?;
    let k = proj("wk", g)?;
    let v = proj("wv", g)?;
    let att = nn::scaled_dot_product(g, q, k, v, level.heads)?;
    let wo = g.param(store, &format!("{prefix}.wo"))?;
    let output = g.matmul(att.output, wo)?;
    Ok(Attended {
        output,
        weights: att.weights,
    })
}

/// `σ(LN(h_raw·W + b)) ⊙ att`.
pub fn contextual_gate(g: &mut Graph, store: &ParamStore, prefix: &str, att: Var, h_raw: Var) -> Result<Var> {
    let z = nn::linear(g, store, prefix, h_raw)?;
    let z = g.layer_norm(z);
    let s = g.sigmoid(z);
    g.mul(s, att)
}

/// Single-head attention with queries from `from` and keys/values from `to`,
/// scaled by `sqrt(d_se)`.
pub fn cross_attention(g: &mut Graph, store: &ParamStore, prefix: &str, from: Var, to: Var) -> Result<Attended> {
    let wq = g.param(store, &format!("{prefix}.wq"))?;
    let wk = g.param(store, &format!("{prefix}.wk"))?;
    let wv = g.param(store, &format!("{prefix}.wv"))?;
    let q = g.matmul(from, wq)?;
    let k = g.matmul(to, wk)?;
    let v = g.matmul(to, wv)?;
    nn::scaled_dot_product(g, q, k, v, 1)
}

/// Row concat, `A ⊙ σ(A)`, mean over rows, then a two-layer perceptron.
pub fn joint_fusion(g: &mut Graph, store: &ParamStore, t2i: Var, i2t: Var) -> Result<Var> {
    let a = g.concat(&[t2i, i2t], 0)?;
    let s = g.sigmoid(a);
    let a = g.mul(a, s)?;
    let m = g.mean_axis(a, 0)?;
    let d = g.shape(m)[0];
    let m = g.reshape(m, &[1, d])?;
    let h = nn::linear(g, store, "mfim.fusion.l1", m)?;
    let h = g.relu(h);
    let out = nn::linear(g, store, "mfim.fusion.l2", h)?;
    g.flatten(out)
}

/// One modality through self-gate, the three attention levels and the
/// contextual gate.
fn hierarchical(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    modality: &str,
    basis: Var,
    weights: &mut Vec<Var>,
) -> Result<Var> {
    let mut x = self_gate(g, store, &format!("mfim.{modality}.gate"), basis)?;
    for level in Level::ALL {
        let lc = AttentionLevelConfig::new(level, cfg.d_se, cfg.h)?;
        let att = attention_level(g, store, &format!("mfim.{modality}.{}", level.name()), x, lc)?;
        weights.extend(att.weights);
        x = att.output;
    }
    contextual_gate(g, store, &format!("mfim.{modality}.ctx"), x, basis)
}

pub struct MfimOutput {
    /// Global features `[d_t + d_i]`, absent when MFIM is disabled.
    pub globals: Option<Var>,
    /// Joint-fusion vector `[d_se]`, absent when MFIM or HCGAM is disabled.
    pub fused: Option<Var>,
    /// Every attention weight matrix computed on the way.
    pub attention_weights: Vec<Var>,
}

/// Full module for one sample: `text` is `n_t × d_t`, `grid` is `H×W×d_i`.
pub fn forward(g: &mut Graph, store: &ParamStore, cfg: &ModelConfig, text: Var, grid: Var) -> Result<MfimOutput> {
    let mut out = MfimOutput {
        globals: None,
        fused: None,
        attention_weights: Vec::new(),
    };
    if !cfg.ablation.mfim {
        return Ok(out);
    }
    out.globals = Some(global_features(g, text, grid)?);
    if !cfg.ablation.uses_joint_fusion() {
        return Ok(out);
    }
    let ht = text_local(g, store, text)?;
    let hi = image_local(g, store, grid)?;
    let gt = hierarchical(g, store, cfg, "text", ht, &mut out.attention_weights)?;
    let gi = hierarchical(g, store, cfg, "image", hi, &mut out.attention_weights)?;
    let t2i = cross_attention(g, store, "mfim.cross.t2i", gt, gi)?;
    let i2t = cross_attention(g, store, "mfim.cross.i2t", gi, gt)?;
    out.attention_weights.extend(t2i.weights);
    out.attention_weights.extend(i2t.weights);
    out.fused = Some(joint_fusion(g, store, t2i.output, i2t.output)?);
    Ok(out)
}
