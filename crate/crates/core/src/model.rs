//! The assembled classifier.

use crate::cctfrm;
use crate::config::ModelConfig;
use crate::data::SyntheticSample;
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, Var};
use crate::hcamam;
use crate::mfim::{self, StubEncoders};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::uffm;

/// Stub-encoded features of a batch, ready to enter a graph.
#[derive(Clone, Debug)]
pub struct SampleBatch {
    /// `n_t × d_t` per sample.
    pub text: Vec<Tensor>,
    /// `H_g × W_g × d_i` per sample.
    pub grid: Vec<Tensor>,
    /// `H × W × 3` per sample.
    pub images: Vec<Tensor>,
    pub labels: Vec<f64>,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub struct ForwardOutput {
    /// Pre-sigmoid scores, `[N]`.
    pub logits: Var,
    /// Flood probabilities, `[N]`.
    pub probs: Var,
    /// Gated map of every encoder block, indexed `[block][sample]`.
    pub encoder_maps: Vec<Vec<Var>>,
    /// Every attention weight matrix (MFIM levels, cross-modal, transformer).
    pub attention_weights: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoders: StubEncoders,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let encoders = StubEncoders::from_config(&cfg)?;
        Ok(Model { cfg, encoders })
    }

    /// Declares every parameter and buffer of the enabled components.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new(seed);
        mfim::declare(&mut store, &self.cfg)?;
        hcamam::declare(&mut store, &self.cfg)?;
        cctfrm::declare(&mut store, &self.cfg)?;
        uffm::declare(&mut store, &self.cfg)?;
        Ok(store)
    }

    pub fn encode(&self, samples: &[SyntheticSample]) -> Result<SampleBatch> {
        let [h, w] = self.cfg.image_size;
        let mut b = SampleBatch {
            text: Vec::with_capacity(samples.len()),
            grid: Vec::with_capacity(samples.len()),
            images: Vec::with_capacity(samples.len()),
            labels: Vec::with_capacity(samples.len()),
        };
        for s in samples {
            if s.image.shape() != [h, w, 3] {
                return Err(Error::Input(format!(
                    "image {:?} does not match configured {h}×{w}×3",
                    s.image.shape()
                )));
            }
            b.text.push(self.encoders.encode_text(&s.tokens)?);
            b.grid.push(self.encoders.encode_image(&s.image)?);
            b.images.push(s.image.clone());
            b.labels.push(f64::from(s.label));
        }
        Ok(b)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, batch: &SampleBatch) -> Result<ForwardOutput> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let cfg = &self.cfg;
        let n = batch.len();
        let images: Vec<Var> = batch.images.iter().map(|t| g.input(t.clone())).collect();
        let mut attention_weights = Vec::new();

        let mut globals = Vec::with_capacity(n);
        let mut joint = Vec::with_capacity(n);
        for i in 0..n {
            let t = g.input(batch.text[i].clone());
            let gr = g.input(batch.grid[i].clone());
            let m = mfim::forward(g, store, cfg, t, gr)?;
            attention_weights.extend(m.attention_weights);
            globals.push(m.globals);
            joint.push(m.fused);
        }
        let hc = hcamam::forward(g, store, cfg, &images, &globals)?;
        let cc = if cfg.ablation.cctfrm {
            let out = cctfrm::forward(g, store, cfg, &images)?;
            attention_weights.extend(out.attention_weights.iter().copied());
            Some(out)
        } else {
            None
        };

        let mut logits = Vec::with_capacity(n);
        let mut probs = Vec::with_capacity(n);
        for i in 0..n {
            let mut parts = Vec::with_capacity(3);
            parts.extend(hc[i].fused);
            parts.extend(joint[i]);
            if let Some(c) = &cc {
                parts.push(c.refined[i]);
            }
            let head = uffm::forward(g, store, &parts)?;
            logits.push(head.logit);
            probs.push(head.prob);
        }
        let cat = |g: &mut Graph, v: &[Var]| if v.len() == 1 { Ok(v[0]) } else { g.concat(v, 0) };
        Ok(ForwardOutput {
            logits: cat(g, &logits)?,
            probs: cat(g, &probs)?,
            encoder_maps: cc.map(|c| c.encoder_maps).unwrap_or_default(),
            attention_weights,
        })
    }

    /// Eval-mode probabilities, evaluated in chunks of `batch_size`.
    pub fn predict_probs(&self, store: &ParamStore, samples: &[SyntheticSample]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(self.cfg.batch_size.max(1)) {
            let batch = self.encode(chunk)?;
            let mut g = Graph::new(Mode::Eval, 0);
            let f = self.forward(&mut g, store, &batch)?;
            out.extend_from_slice(g.value(f.probs).data());
        }
        Ok(out)
    }
}
