//! Finite-difference gradient checks.
//!
//! A check builds a scalar `L = Σ out ⊙ R` from some forward function and a
//! fixed random `R`, then compares the analytic gradient of every sampled
//! parameter coordinate with the central difference
//! `(L(θ + h) − L(θ − h)) / 2h`, `h = 1e-5`.
//!
//! ReLU and max-pool make `L` piecewise smooth. When a switch point falls
//! within `±h` of a sampled coordinate the central difference `D(h)` measures
//! a blend of two slopes rather than the derivative. Such coordinates are
//! detected with two further evaluations at `±2h` and replaced by fresh draws.
//! A smooth `L` satisfies `D(2h) ≈ D(h)` and `S(2h) ≈ 4·S(h)` for the second
//! difference `S(s) = L(θ+s) − 2L(θ) + L(θ−s)`. A slope jump `J` at offset
//! `t ≤ h` breaks the first by `J·t/4h` and the second by `J·(3t − 2h)/h`,
//! so one of them always exceeds `2J/13` while its bias on `D(h)` is at most
//! `J/2`. A kink that passes both at threshold `½·REL_TOL` of the error
//! denominator therefore biases an accepted coordinate by less than the
//! tolerance.
//!
//! The rounding noise of `L` is measured from second differences along random
//! directions with a step far too small for curvature to register, and is
//! never taken below one ulp of `Σ|out⊙R|`.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cctfrm;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, NormAxis, Var};
use crate::hcamam;
use crate::mfim;
use crate::model::Model;
use crate::nn;
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;
use crate::uffm;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Smallest relative-error denominator.
pub const REL_FLOOR: f64 = 1e-6;
pub const MIN_COORDS: usize = 20;
/// Draws allowed per required coordinate before a check gives up.
pub const MAX_DRAWS_PER_COORD: usize = 10;

/// Step of the random directions used to measure rounding noise.
pub const NOISE_STEP: f64 = 1e-11;
pub const NOISE_PROBES: usize = 6;

/// Denominator floor for a loss with rounding noise `noise`: the larger of
/// [`REL_FLOOR`] and `noise/(h·REL_TOL)`. Below it a central difference cannot
/// resolve the gradient to the tolerance, so the error is judged in absolute
/// terms.
pub fn denominator_floor(noise: f64) -> f64 {
    REL_FLOOR.max(noise / (FD_STEP * REL_TOL))
}

/// Error between an analytic and a numeric derivative.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub coords: usize,
    /// Coordinates redrawn because `L` has a kink within one step of them.
    pub kinks: usize,
    /// Relative-error denominator floor used for this check.
    pub floor: f64,
    /// Measured rounding noise of the loss.
    pub noise: f64,
    pub max_rel_err: f64,
    /// Coordinate with the largest error, as `name[index]`.
    pub worst: String,
    pub passed: bool,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<28} coords={:<4} kinks={:<3} max_rel_err={:.3e} (worst {})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.coords,
            self.kinks,
            self.max_rel_err,
            self.worst
        )
    }
}

/// Forward function under test: builds an output node from the parameters.
pub type Forward<'a> = dyn Fn(&mut Graph, &ParamStore) -> Result<Var> + 'a;

fn eval_loss(build: &Forward, store: &ParamStore, mode: Mode, graph_seed: u64, r: &Tensor) -> Result<f64> {
    let mut g = Graph::new(mode, graph_seed);
    let out = build(&mut g, store)?;
    let v = g.value(out);
    Ok(v.data().iter().zip(r.data()).map(|(a, b)| a * b).sum())
}

/// Checks `build` at `n_coords` random coordinates (at least one per
/// parameter tensor).
pub fn check(
    name: &str,
    store: &ParamStore,
    mode: Mode,
    n_coords: usize,
    seed: u64,
    build: &Forward,
) -> Result<CheckResult> {
    let graph_seed = seed ^ 0x5eed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut g = Graph::new(mode, graph_seed);
    let out = build(&mut g, store)?;
    let shape = g.shape(out).to_vec();
    let r = Tensor::new(&shape, (0..g.value(out).numel()).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let rv = g.input(r.clone());
    let weighted = g.mul(out, rv)?;
    let loss = g.sum(weighted);
    let magnitude: f64 = g.value(weighted).data().iter().map(|v| v.abs()).sum();
    let mut work = store.clone();
    work.zero_grad();
    g.backward(loss, &mut work)?;

    let names: Vec<(String, usize)> = store.params().map(|(n, e)| (n.to_string(), e.value.numel())).collect();
    if names.is_empty() {
        return Err(Error::Contract(format!("gradient check `{name}` has no parameters")));
    }
    let base = eval_loss(build, store, mode, graph_seed, &r)?;
    // Never below one ulp of the summed terms.
    let mut noise = f64::EPSILON * magnitude;
    for _ in 0..NOISE_PROBES {
        let dir: Vec<Vec<f64>> = names
            .iter()
            .map(|(_, n)| (0..*n).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect())
            .collect();
        let side = |sign: f64| -> Result<f64> {
            let mut probe = store.clone();
            for ((pname, _), u) in names.iter().zip(&dir) {
                let v = store.value(pname).expect("parameter");
                let data = v.data().iter().zip(u).map(|(x, u)| x + sign * NOISE_STEP * u).collect();
                probe.set_value(pname, Tensor::new(v.shape(), data)?)?;
            }
            eval_loss(build, &probe, mode, graph_seed, &r)
        };
        let second = side(1.0)? - 2.0 * base + side(-1.0)?;
        noise = noise.max(second.abs() / 2.0);
    }
    let floor = denominator_floor(noise);

    // Returns the relative error at a coordinate, or `None` on a kink.
    let probe_coord = |ti: usize, idx: usize, max_err: &mut f64, worst: &mut String| -> Result<Option<f64>> {
        let pname = &names[ti].0;
        let analytic = work.grad(pname).expect("parameter").data()[idx];
        let orig = store.value(pname).expect("parameter");
        let mut probe = store.clone();
        let mut bumped = |delta: f64| -> Result<f64> {
            let mut data = orig.clone().into_data();
            data[idx] += delta;
            probe.set_value(pname, Tensor::new(orig.shape(), data)?)?;
            eval_loss(build, &probe, mode, graph_seed, &r)
        };
        let (up, down) = (bumped(FD_STEP)?, bumped(-FD_STEP)?);
        let (up2, down2) = (bumped(2.0 * FD_STEP)?, bumped(-2.0 * FD_STEP)?);
        let numeric = (up - down) / (2.0 * FD_STEP);
        let numeric2 = (up2 - down2) / (4.0 * FD_STEP);
        let curvature = ((up2 - 2.0 * base + down2) - 4.0 * (up - 2.0 * base + down)) / FD_STEP;
        let denom = analytic.abs().max(numeric.abs()).max(floor);
        let limit = 0.5 * REL_TOL * denom;
        if (numeric2 - numeric).abs() > limit + 2.0 * noise / FD_STEP
            || curvature.abs() > limit + 20.0 * noise / FD_STEP
        {
            return Ok(None);
        }
        let err = rel_error(analytic, numeric, floor);
        if !(err <= *max_err) {
            *max_err = err;
            *worst = format!("{pname}[{idx}] analytic={analytic:.6e} numeric={numeric:.6e}");
        }
        Ok(Some(err))
    };

    let mut max_err = 0.0f64;
    let mut worst = String::new();
    let (mut accepted, mut kinks) = (0usize, 0usize);
    let budget = MAX_DRAWS_PER_COORD * n_coords.max(names.len());
    let mut draws = 0usize;
    let mut order: Vec<usize> = (0..names.len()).collect();
    order.shuffle(&mut rng);
    let mut uncovered = Vec::new();
    // One coordinate per tensor first, then uniform draws.
    for &ti in &order {
        let mut done = false;
        for _ in 0..MAX_DRAWS_PER_COORD {
            draws += 1;
            let idx = rng.gen_range(0..names[ti].1);
            if probe_coord(ti, idx, &mut max_err, &mut worst)?.is_some() {
                accepted += 1;
                done = true;
                break;
            }
            kinks += 1;
        }
        if !done {
            uncovered.push(names[ti].0.clone());
        }
    }
    while accepted < n_coords && draws < budget {
        draws += 1;
        let ti = rng.gen_range(0..names.len());
        let idx = rng.gen_range(0..names[ti].1);
        match probe_coord(ti, idx, &mut max_err, &mut worst)? {
            Some(_) => accepted += 1,
            None => kinks += 1,
        }
    }
    let enough = accepted >= n_coords && uncovered.is_empty();
    if !enough {
        worst = if uncovered.is_empty() {
            format!("only {accepted} smooth coordinates in {draws} draws")
        } else {
            format!("no smooth coordinate found in {}", uncovered.join(", "))
        };
    }
    Ok(CheckResult {
        name: name.to_string(),
        coords: accepted,
        kinks,
        max_rel_err: max_err,
        floor,
        noise,
        passed: enough && max_err <= REL_TOL,
        worst,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selector {
    TensorCore,
    Mfim,
    Hcamam,
    Cctfrm,
    Uffm,
    Model,
    All,
}

impl FromStr for Selector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "tensor_core" | "tensor-core" => Selector::TensorCore,
            "mfim" => Selector::Mfim,
            "hcamam" => Selector::Hcamam,
            "cctfrm" => Selector::Cctfrm,
            "uffm" | "uffm_train" => Selector::Uffm,
            "model" => Selector::Model,
            "all" => Selector::All,
            other => {
                return Err(Error::config(
                    "module",
                    format!("unknown selector `{other}`; expected tensor_core, mfim, hcamam, cctfrm, uffm, model or all"),
                ))
            }
        })
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Result<Tensor> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect())
}

fn store_with(seed: u64, tensors: &[(&str, &[usize])]) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new(seed);
    for (name, shape) in tensors {
        s.declare(name, shape, Init::Zeros)?;
        s.set_value(name, rand_tensor(&mut rng, shape, 1.0)?)?;
    }
    Ok(s)
}

type OpCheck = (&'static str, Vec<(&'static str, Vec<usize>)>, Mode, Box<Forward<'static>>);

/// One check per differentiable primitive.
pub fn tensor_core_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let p = |g: &mut Graph, s: &ParamStore, n: &str| g.param(s, n);
    let cases: Vec<OpCheck> = vec![
        (
            "matmul",
            vec![("a", vec![5, 7]), ("b", vec![7, 3])],
            Mode::Eval,
            Box::new(move |g, s| {
                let (a, b) = (p(g, s, "a")?, p(g, s, "b")?);
                g.matmul(a, b)
            }),
        ),
        (
            "conv2d_grouped",
            vec![("x", vec![6, 6, 4]), ("k", vec![3, 3, 2, 4])],
            Mode::Eval,
            Box::new(move |g, s| {
                let (x, k) = (p(g, s, "x")?, p(g, s, "k")?);
                g.conv2d(x, k, 2)
            }),
        ),
        (
            "conv2d_pointwise",
            vec![("x", vec![3, 4, 3]), ("k", vec![1, 1, 3, 5])],
            Mode::Eval,
            Box::new(move |g, s| {
                let (x, k) = (p(g, s, "x")?, p(g, s, "k")?);
                g.conv2d(x, k, 1)
            }),
        ),
        (
            "conv1d",
            vec![("x", vec![7]), ("k", vec![3])],
            Mode::Eval,
            Box::new(move |g, s| {
                let (x, k) = (p(g, s, "x")?, p(g, s, "k")?);
                g.conv1d(x, k)
            }),
        ),
        (
            "fft2d_magnitude",
            vec![("x", vec![5, 7, 2])],
            Mode::Eval,
            Box::new(move |g, s| {
                let x = p(g, s, "x")?;
                g.fft2d_magnitude(x)
            }),
        ),
        (
            "sigmoid_relu_tanh",
            vec![("x", vec![4, 5])],
            Mode::Eval,
            Box::new(move |g, s| {
                let x = p(g, s, "x")?;
                let a = g.sigmoid(x);
                let b = g.relu(x);
                let c = g.tanh(x);
                g.concat(&[a, b, c], 1)
            }),
        ),
        (
            "softmax",
            vec![("x", vec![3, 6])],
            Mode::Eval,
            Box::new(move |g, s| {
                let x = p(g, s, "x")?;
                Ok(g.softmax(x))
            }),
        ),
        (
            "layer_norm",
            vec![("x", vec![3, 8])],
            Mode::Eval,
            Box::new(move |g, s| {
                let x = p(g, s, "x")?;
                Ok(g.layer_norm(x))
            }),
        ),
        (
            "normalize_channels",
            vec![("x", vec![2, 3, 3, 2])],
            Mode::Eval,
            Box::new(move |g, s| {
                let x = p(g, s, "x")?;
                Ok(g.normalize(x, NormAxis::Channels))
            }),
        ),
        (
            "max_pool2_odd",
            vec![("x", vec![5, 5, 2])],
            Mode::Eval,
            Box::new(move |g, s| {
                let x = p(g, s, "x")?;
                g.max_pool2(x)
            }),
        ),
        (
            "pool_upsample",
            vec![("x", vec![4, 4, 3])],
            Mode::Eval,
            Box::new(move |g, s| {
                let x = p(g, s, "x")?;
                let a = g.avg_pool(x, 2)?;
                let u = g.upsample_nearest(a, 2)?;
                let gap = g.global_avg_pool(x)?;
                let y = g.mul(u, x)?;
                g.add(y, gap)
            }),
        ),
        (
            "dropout_train",
            vec![("x", vec![6, 6])],
            Mode::Train,
            Box::new(move |g, s| {
                let x = p(g, s, "x")?;
                g.dropout(x, 0.3)
            }),
        ),
        (
            "shape_ops",
            vec![("x", vec![3, 4]), ("y", vec![2, 4])],
            Mode::Eval,
            Box::new(move |g, s| {
                let (x, y) = (p(g, s, "x")?, p(g, s, "y")?);
                let c = g.concat(&[x, y], 0)?;
                let t = g.transpose(c)?;
                let sl = g.slice(t, 1, 1, 3)?;
                let st = g.stack(&[sl, sl])?;
                let se = g.select(st, 1)?;
                let m = g.mean_axis(se, 0)?;
                let r = g.reshape(c, &[20])?;
                let sq = g.mul(r, r)?;
                g.concat(&[m, sq], 0)
            }),
        ),
        (
            "broadcast_arith",
            vec![("x", vec![3, 4]), ("b", vec![4]), ("c", vec![3, 1])],
            Mode::Eval,
            Box::new(move |g, s| {
                let (x, b, c) = (p(g, s, "x")?, p(g, s, "b")?, p(g, s, "c")?);
                let a = g.add(x, b)?;
                let m = g.mul(a, c)?;
                let d = g.sub(m, b)?;
                let e = g.scale(d, -1.7);
                Ok(g.add_const(e, 0.3))
            }),
        ),
        (
            "bce",
            vec![("z", vec![6])],
            Mode::Eval,
            Box::new(move |g, s| {
                let z = p(g, s, "z")?;
                let pr = g.sigmoid(z);
                g.bce(pr, &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0])
            }),
        ),
        (
            "batch_norm_train",
            vec![("x", vec![2, 2, 3]), ("y", vec![2, 2, 3]), ("bn.gamma", vec![3]), ("bn.beta", vec![3])],
            Mode::Train,
            Box::new(move |g, s| {
                let (x, y) = (p(g, s, "x")?, p(g, s, "y")?);
                let out = nn::batch_norm(g, s, "bn", &[x, y])?;
                g.stack(&out)
            }),
        ),
    ];
    let mut results = Vec::with_capacity(cases.len());
    for (i, (name, tensors, mode, build)) in cases.into_iter().enumerate() {
        let spec: Vec<(&str, &[usize])> = tensors.iter().map(|(n, s)| (*n, s.as_slice())).collect();
        let mut store = store_with(seed.wrapping_add(i as u64), &spec)?;
        if name == "batch_norm_train" {
            store.declare_buffer("bn.running_mean", Tensor::zeros(&[3])?)?;
            store.declare_buffer("bn.running_var", Tensor::ones(&[3])?)?;
        }
        results.push(check(name, &store, mode, MIN_COORDS, seed, build.as_ref())?);
    }
    Ok(results)
}

fn random_inputs(cfg: &ModelConfig, n: usize, seed: u64) -> Result<Vec<(Tensor, Tensor, Tensor)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [h, w] = cfg.image_size;
    (0..n)
        .map(|_| {
            Ok((
                rand_tensor(&mut rng, &[cfg.n_t, cfg.d_t], 1.0)?,
                rand_tensor(&mut rng, &[cfg.grid[0], cfg.grid[1], cfg.d_i], 1.0)?,
                rand_tensor(&mut rng, &[h, w, 3], 1.0)?,
            ))
        })
        .collect()
}

fn module_check(
    name: &str,
    cfg: &ModelConfig,
    seed: u64,
    declare: impl Fn(&mut ParamStore, &ModelConfig) -> Result<()>,
    build: &Forward,
) -> Result<CheckResult> {
    let mut store = ParamStore::new(seed);
    declare(&mut store, cfg)?;
    check(name, &store, Mode::Train, MIN_COORDS, seed, build)
}

pub fn mfim_check(cfg: &ModelConfig, seed: u64) -> Result<CheckResult> {
    let inputs = random_inputs(cfg, 1, seed)?;
    let (t, gr, _) = inputs[0].clone();
    let build = move |g: &mut Graph, s: &ParamStore| -> Result<Var> {
        let tv = g.input(t.clone());
        let gv = g.input(gr.clone());
        let out = mfim::forward(g, s, cfg, tv, gv)?;
        out.fused.ok_or_else(|| Error::Contract("joint fusion disabled".into()))
    };
    module_check("mfim", cfg, seed, mfim::declare, &build)
}

pub fn hcamam_check(cfg: &ModelConfig, seed: u64) -> Result<CheckResult> {
    let inputs = random_inputs(cfg, 2, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    let globals: Vec<Tensor> = (0..2)
        .map(|_| rand_tensor(&mut rng, &[cfg.d_t + cfg.d_i], 1.0))
        .collect::<Result<_>>()?;
    let build = move |g: &mut Graph, s: &ParamStore| -> Result<Var> {
        let imgs: Vec<Var> = inputs.iter().map(|x| g.input(x.2.clone())).collect();
        let gl: Vec<Option<Var>> = globals.iter().map(|x| Some(g.input(x.clone()))).collect();
        let out = hcamam::forward(g, s, cfg, &imgs, &gl)?;
        let fused: Vec<Var> = out.iter().filter_map(|o| o.fused).collect();
        g.stack(&fused)
    };
    module_check("hcamam", cfg, seed, hcamam::declare, &build)
}

/// Runs on generated scenes: white noise packs so many near-ties into the
/// ReLU and max-pool decisions that the first encoder block has no smooth
/// neighbourhood of width `2h`.
pub fn cctfrm_check(cfg: &ModelConfig, seed: u64) -> Result<CheckResult> {
    let images: Vec<Tensor> = crate::data::generate(2, seed, 0.5, cfg.into())?
        .into_iter()
        .map(|s| s.image)
        .collect();
    let build = move |g: &mut Graph, s: &ParamStore| -> Result<Var> {
        let imgs: Vec<Var> = images.iter().map(|x| g.input(x.clone())).collect();
        let out = cctfrm::forward(g, s, cfg, &imgs)?;
        g.stack(&out.refined)
    };
    module_check("cctfrm", cfg, seed, cctfrm::declare, &build)
}

pub fn uffm_check(cfg: &ModelConfig, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let part = rand_tensor(&mut rng, &[cfg.head_width()], 1.0)?;
    let build = move |g: &mut Graph, s: &ParamStore| -> Result<Var> {
        let x = g.input(part.clone());
        let h = uffm::forward(g, s, &[x])?;
        g.bce(h.prob, &[1.0])
    };
    module_check("uffm", cfg, seed, uffm::declare, &build)
}

/// Full model, BCE loss over a two-sample batch.
pub fn model_check(cfg: &ModelConfig, seed: u64) -> Result<CheckResult> {
    let model = Model::new(cfg.clone())?;
    let store = model.init_params(seed)?;
    let samples = crate::data::generate(2, seed, 0.5, cfg.into())?;
    let batch = model.encode(&samples)?;
    let build = move |g: &mut Graph, s: &ParamStore| -> Result<Var> {
        let out = model.forward(g, s, &batch)?;
        g.bce(out.probs, &batch.labels)
    };
    check("model", &store, Mode::Train, MIN_COORDS, seed, &build)
}

pub fn run(selector: Selector, cfg: &ModelConfig, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let all = selector == Selector::All;
    if all || selector == Selector::TensorCore {
        out.extend(tensor_core_checks(seed)?);
    }
    if all || selector == Selector::Mfim {
        out.push(mfim_check(cfg, seed)?);
    }
    if all || selector == Selector::Hcamam {
        out.push(hcamam_check(cfg, seed)?);
    }
    if all || selector == Selector::Cctfrm {
        out.push(cctfrm_check(cfg, seed)?);
    }
    if all || selector == Selector::Uffm {
        out.push(uffm_check(cfg, seed)?);
    }
    if all || selector == Selector::Model {
        out.push(model_check(cfg, seed)?);
    }
    Ok(out)
}
