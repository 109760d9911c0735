//! Model, training and data configuration, loaded from a single JSON document
//! whose keys mirror the field names below.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::AdamWConfig;

/// A component that can be switched off for sensitivity studies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Mfim,
    Hcamam,
    Cctfrm,
    Hcgam,
    Feeca,
    Fmsa,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::Mfim,
        Component::Hcamam,
        Component::Cctfrm,
        Component::Hcgam,
        Component::Feeca,
        Component::Fmsa,
    ];

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.to_string().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Component::Mfim => "mfim",
            Component::Hcamam => "hcamam",
            Component::Cctfrm => "cctfrm",
            Component::Hcgam => "hcgam",
            Component::Feeca => "feeca",
            Component::Fmsa => "fmsa",
        };
        f.write_str(s)
    }
}

/// Which components are active. Everything is on by default.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub mfim: bool,
    pub hcamam: bool,
    pub cctfrm: bool,
    pub hcgam: bool,
    pub feeca: bool,
    pub fmsa: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            mfim: true,
            hcamam: true,
            cctfrm: true,
            hcgam: true,
            feeca: true,
            fmsa: true,
        }
    }
}

impl Ablation {
    pub fn without(components: &[Component]) -> Self {
        let mut a = Ablation::default();
        for c in components {
            *a.flag_mut(*c) = false;
        }
        a
    }

    fn flag_mut(&mut self, c: Component) -> &mut bool {
        match c {
            Component::Mfim => &mut self.mfim,
            Component::Hcamam => &mut self.hcamam,
            Component::Cctfrm => &mut self.cctfrm,
            Component::Hcgam => &mut self.hcgam,
            Component::Feeca => &mut self.feeca,
            Component::Fmsa => &mut self.fmsa,
        }
    }

    /// Global features feed the attention-fusion vector.
    pub fn uses_globals(&self) -> bool {
        self.mfim
    }

    /// The hierarchical gated attention path produces the joint-fusion vector.
    pub fn uses_joint_fusion(&self) -> bool {
        self.mfim && self.hcgam
    }

    /// The attention-fusion block has at least one input.
    pub fn uses_attention_fusion(&self) -> bool {
        self.hcamam || self.uses_globals()
    }
}

/// Synthetic dataset parameters used by `train` and `eval`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub difficulty: f64,
    pub seed: u64,
    pub val_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_train: 200,
            n_val: 100,
            difficulty: 0.0,
            seed: 42,
            val_seed: 43,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Stub text-encoder embedding width.
    pub d_t: usize,
    /// Stub image-encoder embedding width.
    pub d_i: usize,
    /// Shared embedding width.
    pub d_se: usize,
    /// Base head count; coarse/medium/fine attention use h/2, h, 2h heads.
    pub h: usize,
    /// Tokens per caption.
    pub n_t: usize,
    pub vocab: usize,
    /// Region grid of the stub image encoder (H, W).
    pub grid: [usize; 2],
    /// Raw image extents (H, W); images have 3 channels.
    pub image_size: [usize; 2],
    /// Resolution the raw image is average-pooled to before HREN.
    pub hcamam_size: [usize; 2],
    pub hren_channels: usize,
    pub hren_groups: usize,
    pub hren_kernel: usize,
    pub encoder_plan: Vec<usize>,
    pub decoder_plan: Vec<usize>,
    pub transformer_depth: usize,
    pub transformer_heads: usize,
    pub transformer_ff: usize,
    pub d_fused: usize,
    pub dropout: f64,
    pub adamw: AdamWConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Seed of the fixed stub encoders.
    pub encoder_seed: u64,
    pub ablation: Ablation,
    pub data: DataConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_t: 32,
            d_i: 32,
            d_se: 64,
            h: 4,
            n_t: 8,
            vocab: 64,
            grid: [4, 4],
            image_size: [64, 64],
            hcamam_size: [8, 8],
            hren_channels: 12,
            hren_groups: 3,
            hren_kernel: 3,
            encoder_plan: vec![8, 16, 32, 64],
            decoder_plan: vec![64, 32, 16, 8],
            transformer_depth: 3,
            transformer_heads: 4,
            transformer_ff: 128,
            d_fused: 64,
            dropout: 0.2,
            adamw: AdamWConfig::default(),
            epochs: 100,
            batch_size: 32,
            seed: 42,
            encoder_seed: 7,
            ablation: Ablation::default(),
            data: DataConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration (the default).
    pub fn desk() -> Self {
        Self::default()
    }

    /// A very small configuration for fast tests.
    pub fn tiny() -> Self {
        ModelConfig {
            d_t: 6,
            d_i: 5,
            d_se: 12,
            h: 2,
            n_t: 3,
            vocab: 16,
            grid: [2, 2],
            image_size: [16, 16],
            hcamam_size: [4, 4],
            hren_channels: 12,
            hren_groups: 3,
            hren_kernel: 3,
            encoder_plan: vec![4, 8],
            decoder_plan: vec![8, 4],
            transformer_depth: 1,
            transformer_heads: 2,
            transformer_ff: 8,
            d_fused: 8,
            batch_size: 4,
            epochs: 2,
            data: DataConfig {
                n_train: 8,
                n_val: 4,
                ..DataConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(s)
            .map_err(|e| Error::config("<json>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Spatial extents of the encoder output (and of every decoder stage).
    pub fn bottleneck_size(&self) -> [usize; 2] {
        let f = 1usize << self.encoder_plan.len();
        [self.image_size[0] / f, self.image_size[1] / f]
    }

    pub fn n_i(&self) -> usize {
        self.grid[0] * self.grid[1]
    }

    /// Channel count of the cascaded decoder output.
    pub fn cascade_channels(&self) -> usize {
        self.decoder_plan.iter().sum()
    }

    /// Length of the flattened harmonizer output.
    pub fn d_r(&self) -> usize {
        let [h, w] = self.bottleneck_size();
        h * w * self.cascade_channels()
    }

    /// Length of the flattened attention-map part of the fusion vector.
    pub fn d_prime(&self) -> usize {
        if !self.ablation.hcamam {
            return 0;
        }
        let maps = usize::from(self.ablation.feeca) + usize::from(self.ablation.fmsa);
        self.hcamam_size[0] * self.hcamam_size[1] * self.hren_channels * maps.max(1)
    }

    /// Input width of the global contextual network.
    pub fn attention_fusion_width(&self) -> usize {
        let globals = if self.ablation.uses_globals() { self.d_t + self.d_i } else { 0 };
        self.d_prime() + globals
    }

    /// Width of the concatenated vector entering the classification head.
    pub fn head_width(&self) -> usize {
        let a = self.ablation;
        let mut w = 0;
        if a.uses_attention_fusion() {
            w += self.d_fused;
        }
        if a.uses_joint_fusion() {
            w += self.d_se;
        }
        if a.cctfrm {
            w += self.d_r();
        }
        w
    }

    /// Checks every cross-field constraint, naming the offending field.
    pub fn validate(&self) -> Result<()> {
        let pos = |field: &str, v: usize| -> Result<()> {
            if v == 0 {
                Err(Error::config(field, "must be positive"))
            } else {
                Ok(())
            }
        };
        for (f, v) in [
            ("d_t", self.d_t),
            ("d_i", self.d_i),
            ("d_se", self.d_se),
            ("h", self.h),
            ("n_t", self.n_t),
            ("hren_channels", self.hren_channels),
            ("hren_groups", self.hren_groups),
            ("transformer_heads", self.transformer_heads),
            ("transformer_ff", self.transformer_ff),
            ("d_fused", self.d_fused),
            ("batch_size", self.batch_size),
        ] {
            pos(f, v)?;
        }
        if self.n_t > 512 {
            return Err(Error::config("n_t", format!("{} exceeds 512", self.n_t)));
        }
        if self.vocab < 4 || self.vocab % 4 != 0 {
            return Err(Error::config("vocab", "must be a positive multiple of 4"));
        }
        if self.h % 2 != 0 {
            return Err(Error::config("h", format!("{} must be even", self.h)));
        }
        if self.d_se % (2 * self.h) != 0 {
            return Err(Error::config(
                "d_se",
                format!("{} must be divisible by 2h = {}", self.d_se, 2 * self.h),
            ));
        }
        if self.d_se < 3 {
            return Err(Error::config("d_se", "must be at least 3 for the multi-scale split"));
        }
        for (i, f) in ["grid[0]", "grid[1]"].iter().enumerate() {
            pos(f, self.grid[i])?;
            if self.image_size[i] % self.grid[i] != 0 {
                return Err(Error::config(
                    *f,
                    format!("{} must divide image_size {}", self.grid[i], self.image_size[i]),
                ));
            }
        }
        for (i, f) in ["hcamam_size[0]", "hcamam_size[1]"].iter().enumerate() {
            pos(f, self.hcamam_size[i])?;
            if self.image_size[i] % self.hcamam_size[i] != 0 {
                return Err(Error::config(
                    *f,
                    format!("{} must divide image_size {}", self.hcamam_size[i], self.image_size[i]),
                ));
            }
        }
        if self.hcamam_size[0] != self.hcamam_size[1] || self.grid[0] != self.grid[1] {
            // Resizing uses a single integer pooling factor.
            let fy = self.image_size[0] / self.hcamam_size[0];
            let fx = self.image_size[1] / self.hcamam_size[1];
            if fy != fx {
                return Err(Error::config("hcamam_size", "must scale both axes by the same factor"));
            }
        }
        if self.image_size[0] / self.grid[0] != self.image_size[1] / self.grid[1] {
            return Err(Error::config("grid", "must scale both axes by the same factor"));
        }
        if 3 % self.hren_groups != 0 || self.hren_channels % self.hren_groups != 0 {
            return Err(Error::config(
                "hren_groups",
                format!(
                    "{} must divide the 3 image channels and hren_channels = {}",
                    self.hren_groups, self.hren_channels
                ),
            ));
        }
        if self.hren_channels % 4 != 0 {
            return Err(Error::config(
                "hren_channels",
                format!("{} must be divisible by 4", self.hren_channels),
            ));
        }
        if self.hren_kernel % 2 == 0 {
            return Err(Error::config("hren_kernel", "must be odd"));
        }
        if self.encoder_plan.is_empty() || self.encoder_plan.contains(&0) {
            return Err(Error::config("encoder_plan", "must be a non-empty list of positive channel counts"));
        }
        if self.decoder_plan.is_empty() || self.decoder_plan.contains(&0) {
            return Err(Error::config("decoder_plan", "must be a non-empty list of positive channel counts"));
        }
        let f = 1usize << self.encoder_plan.len();
        for (i, name) in ["image_size[0]", "image_size[1]"].iter().enumerate() {
            if self.image_size[i] % f != 0 {
                return Err(Error::config(
                    *name,
                    format!("{} must be divisible by 2^{} = {f}", self.image_size[i], self.encoder_plan.len()),
                ));
            }
        }
        if self.image_size[0] / f != self.image_size[1] / f {
            return Err(Error::config("image_size", "bottleneck must be square for the harmonizer adapter"));
        }
        let c_last = *self.encoder_plan.last().expect("non-empty");
        if c_last % self.transformer_heads != 0 {
            return Err(Error::config(
                "transformer_heads",
                format!("{} must divide the last encoder channel count {c_last}", self.transformer_heads),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", format!("{} outside [0, 1)", self.dropout)));
        }
        if !(0.0..=1.0).contains(&self.data.difficulty) {
            return Err(Error::config("data.difficulty", "must lie in [0, 1]"));
        }
        if self.data.n_train < 2 {
            return Err(Error::config("data.n_train", "must be at least 2"));
        }
        if self.data.n_val < 2 {
            return Err(Error::config("data.n_val", "must be at least 2"));
        }
        self.adamw.validate()?;
        if self.head_width() == 0 {
            return Err(Error::config("ablation", "every feature branch is disabled"));
        }
        Ok(())
    }
}
