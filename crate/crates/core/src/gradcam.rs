//! Grad-CAM heatmaps over the gated maps of the image encoder.

use std::path::Path;

use serde::Serialize;

use crate::data::SyntheticSample;
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Heatmap {
    pub layer: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major values in [0, 1].
    pub values: Vec<f64>,
    pub logit: f64,
    pub probability: f64,
}

pub fn valid_layers(model: &Model) -> Vec<usize> {
    if model.cfg.ablation.cctfrm {
        (0..model.cfg.encoder_plan.len()).collect()
    } else {
        Vec::new()
    }
}

/// `ReLU(Σ_c α_c·A_c)` with `α_c` the spatial mean of the gradient of
/// channel `c`, divided by its maximum (all zeros when the maximum is 0).
pub fn cam(map: &Tensor, grad: &Tensor) -> Result<Vec<f64>> {
    let [h, w, c] = map.shape()[..] else {
        return Err(Error::shape("grad_cam", format!("map must be H×W×C, got {:?}", map.shape())));
    };
    if grad.shape() != map.shape() {
        return Err(Error::shape("grad_cam", "gradient and map shapes differ"));
    }
    let mut alpha = vec![0.0; c];
    for px in grad.data().chunks(c) {
        for (a, g) in alpha.iter_mut().zip(px) {
            *a += g / (h * w) as f64;
        }
    }
    let mut out: Vec<f64> = map
        .data()
        .chunks(c)
        .map(|px| px.iter().zip(&alpha).map(|(a, w)| a * w).sum::<f64>().max(0.0))
        .collect();
    let max = out.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        out.iter_mut().for_each(|v| *v /= max);
    }
    Ok(out)
}

/// Heatmap of the pre-sigmoid logit for `sample` at encoder block `layer`.
pub fn grad_cam(model: &Model, store: &ParamStore, sample: &SyntheticSample, layer: usize) -> Result<Heatmap> {
    let valid = valid_layers(model);
    if !valid.contains(&layer) {
        return Err(Error::config(
            "layer",
            format!("{layer} is not an encoder block; valid ids: {valid:?}"),
        ));
    }
    let batch = model.encode(std::slice::from_ref(sample))?;
    let mut g = Graph::new(Mode::Eval, 0);
    let out = model.forward(&mut g, store, &batch)?;
    let map = out.encoder_maps[layer][0];
    let grads = g.gradients(out.logits)?;
    let zero = g.value(map).zeros_like();
    let grad = grads.get(map).unwrap_or(&zero);
    let values = cam(g.value(map), grad)?;
    let s = g.shape(map);
    Ok(Heatmap {
        layer,
        height: s[0],
        width: s[1],
        values,
        logit: g.value(out.logits).item()?,
        probability: g.value(out.probs).item()?,
    })
}

impl Heatmap {
    /// Binary greyscale PGM (P5), 0 → black, 1 → white.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    /// Writes `<stem>.pgm` and `<stem>.json`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::write(dir.join(format!("{stem}.pgm")), self.to_pgm())?;
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}
