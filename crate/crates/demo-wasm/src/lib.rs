//! Browser bindings: a small flood classifier over synthetic scenes, exposing
//! image spectra, FEECA/FMSA attention maps and Grad-CAM heatmaps.
//!
//! Every binding wraps a plain method of the same name prefixed `try_`, so
//! the logic also runs and is tested natively.

use wasm_bindgen::prelude::*;

use xflood_core::data::{generate, DataShape, SyntheticSample};
use xflood_core::graph::{Graph, Mode};
use xflood_core::{hcamam, mfim};
use xflood_core::train::train_step;
use xflood_core::{gradcam, Error, Model, ModelConfig, ParamStore, Result};

const SAMPLES: usize = 16;
const BATCH: usize = 8;

/// Configuration small enough to train interactively.
pub fn demo_config(seed: u64) -> ModelConfig {
    ModelConfig {
        image_size: [32, 32],
        hcamam_size: [8, 8],
        encoder_plan: vec![4, 8, 16],
        decoder_plan: vec![16, 8, 4],
        seed,
        ..ModelConfig::tiny()
    }
}

#[wasm_bindgen]
pub struct Demo {
    model: Model,
    store: ParamStore,
    samples: Vec<SyntheticSample>,
    steps: usize,
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Centres the zero frequency of an `h × w` map.
fn fft_shift(map: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[((y + h / 2) % h) * w + (x + w / 2) % w] = map[y * w + x];
        }
    }
    out
}

impl Demo {
    pub fn try_new(seed: u64, difficulty: f64) -> Result<Demo> {
        let cfg = demo_config(seed);
        cfg.validate()?;
        let samples = generate(SAMPLES, seed, difficulty, DataShape::from(&cfg))?;
        let model = Model::new(cfg)?;
        let store = model.init_params(seed)?;
        Ok(Demo { model, store, samples, steps: 0 })
    }

    fn sample(&self, i: usize) -> Result<&SyntheticSample> {
        self.samples
            .get(i)
            .ok_or_else(|| Error::Input(format!("sample {i} out of range; there are {}", self.samples.len())))
    }

    /// `log(1 + |FFT|)` averaged over colour channels, zero frequency centred.
    pub fn try_spectrum(&self, i: usize) -> Result<Vec<f64>> {
        let s = self.sample(i)?;
        let [h, w] = self.model.cfg.image_size;
        let mut g = Graph::new(Mode::Eval, 0);
        let x = g.input(s.image.clone());
        let f = g.fft2d_magnitude(x)?;
        let mag: Vec<f64> = g.value(f).data().chunks(3).map(|px| (px.iter().sum::<f64>() / 3.0).ln_1p()).collect();
        Ok(fft_shift(&mag, h, w))
    }

    /// FEECA attention map followed by the FMSA spatial map, each
    /// `hcamam_size[0] × hcamam_size[1]`.
    pub fn try_attention_maps(&self, i: usize) -> Result<Vec<f64>> {
        let s = self.sample(i)?;
        let cfg = &self.model.cfg;
        let batch = self.model.encode(std::slice::from_ref(s))?;
        let mut g = Graph::new(Mode::Eval, 0);
        let x = g.input(s.image.clone());
        let t = g.input(batch.text[0].clone());
        let grid = g.input(batch.grid[0].clone());
        let globals = mfim::global_features(&mut g, t, grid)?;
        let out = hcamam::forward(&mut g, &self.store, cfg, &[x], &[Some(globals)])?;
        let maps = &out[0];
        let (fe, fm) = match (&maps.feeca, &maps.fmsa) {
            (Some(fe), Some(fm)) => (fe.y_att, fm.a_spatial),
            _ => return Err(Error::Contract("demo model has FEECA and FMSA enabled".into())),
        };
        let mut v = g.value(fe).data().to_vec();
        v.extend_from_slice(g.value(fm).data());
        Ok(v)
    }

    /// Runs `steps` optimizer steps over rotating mini-batches; returns the
    /// last batch loss.
    pub fn try_train(&mut self, steps: usize) -> Result<f64> {
        let mut last = f64::NAN;
        for _ in 0..steps {
            let start = (self.steps * BATCH) % self.samples.len();
            let batch: Vec<SyntheticSample> =
                (0..BATCH).map(|k| self.samples[(start + k) % self.samples.len()].clone()).collect();
            last = train_step(&self.model, &mut self.store, &batch, self.steps as u64)?;
            self.steps += 1;
        }
        Ok(last)
    }

    /// Heatmap values followed by its height and width.
    pub fn try_grad_cam(&self, i: usize, layer: usize) -> Result<Vec<f64>> {
        let map = gradcam::grad_cam(&self.model, &self.store, self.sample(i)?, layer)?;
        let mut v = map.values;
        v.extend([map.height as f64, map.width as f64]);
        Ok(v)
    }

    pub fn try_probability(&self, i: usize) -> Result<f64> {
        let s = self.sample(i)?.clone();
        Ok(self.model.predict_probs(&self.store, &[s])?[0])
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, difficulty: f64) -> std::result::Result<Demo, JsError> {
        Demo::try_new(seed, difficulty).map_err(js)
    }

    pub fn count(&self) -> usize {
        self.samples.len()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn label(&self, i: usize) -> std::result::Result<u8, JsError> {
        self.sample(i).map(|s| s.label).map_err(js)
    }

    /// `[height, width]` of the raw images.
    pub fn image_size(&self) -> Vec<usize> {
        self.model.cfg.image_size.to_vec()
    }

    /// `[height, width]` of the attention maps.
    pub fn attention_size(&self) -> Vec<usize> {
        self.model.cfg.hcamam_size.to_vec()
    }

    pub fn layers(&self) -> Vec<usize> {
        gradcam::valid_layers(&self.model)
    }

    /// Channels-last RGB values of sample `i`.
    pub fn image(&self, i: usize) -> std::result::Result<Vec<f64>, JsError> {
        self.sample(i).map(|s| s.image.data().to_vec()).map_err(js)
    }

    pub fn spectrum(&self, i: usize) -> std::result::Result<Vec<f64>, JsError> {
        self.try_spectrum(i).map_err(js)
    }

    pub fn attention_maps(&self, i: usize) -> std::result::Result<Vec<f64>, JsError> {
        self.try_attention_maps(i).map_err(js)
    }

    pub fn train(&mut self, steps: usize) -> std::result::Result<f64, JsError> {
        self.try_train(steps).map_err(js)
    }

    pub fn grad_cam(&self, i: usize, layer: usize) -> std::result::Result<Vec<f64>, JsError> {
        self.try_grad_cam(i, layer).map_err(js)
    }

    pub fn probability(&self, i: usize) -> std::result::Result<f64, JsError> {
        self.try_probability(i).map_err(js)
    }
}
