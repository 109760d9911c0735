//! Library outputs compared against the loop references in `reference`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xflood_core::cctfrm;
use xflood_core::checkpoint;
use xflood_core::config::ModelConfig;
use xflood_core::data::{generate, DataShape};
use xflood_core::gradcam;
use xflood_core::graph::{Graph, Mode, Var};
use xflood_core::hcamam;
use xflood_core::metrics::{compute_metrics, mcnemar_test};
use xflood_core::mfim::{self, AttentionLevelConfig, Level, StubEncoders};
use xflood_core::model::Model;
use xflood_core::nn;
use xflood_core::optim::{adamw_step, AdamWConfig};
use xflood_core::params::{Init, ParamStore};
use xflood_core::tensor::Tensor;
use xflood_core::uffm;

use super::reference as r;
use super::Check;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

pub fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).unwrap()
}

/// Overwrites (declaring first if needed) `name` with random values.
pub fn put_rand(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, shape: &[usize]) -> Vec<f64> {
    let data = rand_vec(rng, shape.iter().product(), 1.0);
    put(store, name, shape, data.clone());
    data
}

pub fn put(store: &mut ParamStore, name: &str, shape: &[usize], data: Vec<f64>) {
    if store.value(name).is_none() {
        store.declare(name, shape, Init::Zeros).unwrap();
    }
    store.set_value(name, tensor(shape, data)).unwrap();
}

fn input(g: &mut Graph, shape: &[usize], data: &[f64]) -> Var {
    g.input(tensor(shape, data.to_vec()))
}

fn val(g: &Graph, v: Var) -> Vec<f64> {
    g.value(v).data().to_vec()
}

pub fn matmul() -> Check {
    let mut rg = rng(1);
    let (a, b) = (rand_vec(&mut rg, 35, 1.0), rand_vec(&mut rg, 21, 1.0));
    let mut g = Graph::new(Mode::Eval, 0);
    let (av, bv) = (input(&mut g, &[5, 7], &a), input(&mut g, &[7, 3], &b));
    let y = g.matmul(av, bv).unwrap();
    Check::rel("matmul vs triple loop", &val(&g, y), &r::matmul(&a, &b, 5, 7, 3), 1e-12)
}

pub fn conv2d() -> Check {
    let mut rg = rng(2);
    let mut worst = Check::ok("conv2d vs nested loops", 1e-12);
    // (h, w, cin, k, cout, groups)
    for (h, w, cin, k, cout, groups) in [(6, 6, 4, 3, 4, 2), (5, 7, 6, 5, 3, 3), (4, 3, 2, 1, 5, 1)] {
        let x = rand_vec(&mut rg, h * w * cin, 1.0);
        let kern = rand_vec(&mut rg, k * k * (cin / groups) * cout, 1.0);
        let mut g = Graph::new(Mode::Eval, 0);
        let xv = input(&mut g, &[h, w, cin], &x);
        let kv = input(&mut g, &[k, k, cin / groups, cout], &kern);
        let y = g.conv2d(xv, kv, groups).unwrap();
        let expect = r::conv2d(&x, h, w, cin, &kern, k, cout, groups);
        worst = worst.max(Check::rel("", &val(&g, y), &expect, 1e-12));
    }
    worst
}

pub fn fft_magnitude() -> Check {
    let mut rg = rng(3);
    let x = rand_vec(&mut rg, 5 * 7 * 2, 1.0);
    let mut g = Graph::new(Mode::Eval, 0);
    let xv = input(&mut g, &[5, 7, 2], &x);
    let y = g.fft2d_magnitude(xv).unwrap();
    Check::abs("fft2d magnitude vs direct DFT", &val(&g, y), &r::dft2_magnitude(&x, 5, 7, 2), 1e-9)
}

pub fn pooling() -> Check {
    let mut rg = rng(4);
    let mut worst = Check::ok("pooling vs window scan", 0.0);
    for (h, w, c) in [(8, 8, 3), (5, 7, 2)] {
        let x = rand_vec(&mut rg, h * w * c, 1.0);
        let mut g = Graph::new(Mode::Eval, 0);
        let xv = input(&mut g, &[h, w, c], &x);
        let y = g.max_pool2(xv).unwrap();
        worst = worst.max(Check::abs("", &val(&g, y), &r::max_pool2(&x, h, w, c), 0.0));
    }
    let x = rand_vec(&mut rg, 8 * 8 * 3, 1.0);
    let mut g = Graph::new(Mode::Eval, 0);
    let xv = input(&mut g, &[8, 8, 3], &x);
    let up = g.upsample_nearest(xv, 2).unwrap();
    worst = worst.max(Check::abs("", &val(&g, up), &r::upsample(&x, 8, 8, 3, 2), 0.0));
    // Averages sum in a different order, so allow rounding.
    let ap = g.avg_pool(xv, 2).unwrap();
    worst = worst.max(Check::abs("", &val(&g, ap), &r::avg_pool(&x, 8, 8, 3, 2), 1e-15));
    let gap = g.global_avg_pool(xv).unwrap();
    worst.max(Check::abs("", &val(&g, gap), &r::avg_pool(&x, 8, 8, 3, 8), 1e-15))
}

pub fn softmax_and_layer_norm() -> Check {
    let mut rg = rng(5);
    let x = rand_vec(&mut rg, 4 * 6, 3.0);
    let mut g = Graph::new(Mode::Eval, 0);
    let xv = input(&mut g, &[4, 6], &x);
    let s = g.softmax(xv);
    let ln = g.layer_norm(xv);
    Check::rel("softmax and layer norm vs direct formulas", &val(&g, s), &r::softmax_rows(&x, 6), 1e-12)
        .max(Check::rel("", &val(&g, ln), &r::layer_norm_rows(&x, 6), 1e-12))
}

pub fn batch_norm() -> Check {
    let mut rg = rng(6);
    let mut store = ParamStore::new(0);
    nn::declare_batch_norm(&mut store, "bn", 3).unwrap();
    let gamma = put_rand(&mut store, &mut rg, "bn.gamma", &[3]);
    let beta = put_rand(&mut store, &mut rg, "bn.beta", &[3]);
    let xs: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(&mut rg, 4 * 5 * 3, 2.0)).collect();
    let mut g = Graph::new(Mode::Train, 0);
    let vars: Vec<Var> = xs.iter().map(|x| input(&mut g, &[4, 5, 3], x)).collect();
    let ys = nn::batch_norm(&mut g, &store, "bn", &vars).unwrap();
    let expect = r::batch_norm(&xs, 3, &gamma, &beta);
    let mut c = Check::ok("batch norm vs statistics oracle", 1e-12);
    for (y, e) in ys.iter().zip(&expect) {
        c = c.max(Check::rel("", &val(&g, *y), e, 1e-12));
    }
    // Running mean after one step: 0.9·0 + 0.1·batch mean.
    let mut mean = [0.0; 3];
    for x in &xs {
        for (i, v) in x.iter().enumerate() {
            mean[i % 3] += v / 60.0;
        }
    }
    let ups = g.take_buffer_updates();
    let rm = &ups.iter().find(|(n, _)| n == "bn.running_mean").unwrap().1;
    let expect_rm: Vec<f64> = mean.iter().map(|m| 0.1 * m).collect();
    c.max(Check::rel("", rm.data(), &expect_rm, 1e-12))
}

pub fn bilstm() -> Check {
    let mut rg = rng(7);
    let (d_in, hidden) = (4, 2);
    let mut store = ParamStore::new(0);
    mfim::declare_lstm(&mut store, "l", d_in, hidden).unwrap();
    let mut w = Vec::new();
    for dir in ["fw", "bw"] {
        let ih = put_rand(&mut store, &mut rg, &format!("l.{dir}.w_ih"), &[d_in, 4 * hidden]);
        let hh = put_rand(&mut store, &mut rg, &format!("l.{dir}.w_hh"), &[hidden, 4 * hidden]);
        let b = put_rand(&mut store, &mut rg, &format!("l.{dir}.b"), &[4 * hidden]);
        w.push((ih, hh, b));
    }
    let x = rand_vec(&mut rg, 3 * d_in, 1.0);
    let mut g = Graph::new(Mode::Eval, 0);
    let xv = input(&mut g, &[3, d_in], &x);
    let y = mfim::bilstm(&mut g, &store, "l", xv).unwrap();

    let rows: Vec<Vec<f64>> = x.chunks(d_in).map(|c| c.to_vec()).collect();
    let fw = r::lstm(&rows, &w[0].0, &w[0].1, &w[0].2, hidden);
    let rev: Vec<Vec<f64>> = rows.iter().rev().cloned().collect();
    let mut bw = r::lstm(&rev, &w[1].0, &w[1].1, &w[1].2, hidden);
    bw.reverse();
    let expect: Vec<f64> = fw.iter().zip(&bw).flat_map(|(f, b)| f.iter().chain(b).copied()).collect();
    Check::abs("BiLSTM vs unrolled cells", &val(&g, y), &expect, 1e-10)
}

pub fn attention_levels() -> Check {
    let mut rg = rng(8);
    let (n, d, h) = (3, 4, 2);
    let x = rand_vec(&mut rg, n * d, 1.0);
    let mut c = Check::ok("coarse/medium/fine attention vs loops", 1e-10);
    for (li, level) in Level::ALL.into_iter().enumerate() {
        let lc = AttentionLevelConfig::new(level, d, h).unwrap();
        let prefix = format!("lvl{li}");
        let mut store = ParamStore::new(0);
        mfim::declare_attention_level(&mut store, &prefix, d).unwrap();
        let ws: Vec<Vec<f64>> = ["wq", "wk", "wv", "wo"]
            .iter()
            .map(|w| put_rand(&mut store, &mut rg, &format!("{prefix}.{w}"), &[d, d]))
            .collect();
        let mut g = Graph::new(Mode::Eval, 0);
        let xv = input(&mut g, &[n, d], &x);
        let att = mfim::attention_level(&mut g, &store, &prefix, xv, lc).unwrap();
        let (heads_out, weights) = r::attention(&x, &x, n, n, d, &ws[0], &ws[1], &ws[2], lc.heads);
        let expect = r::matmul(&heads_out, &ws[3], n, d, d);
        c = c.max(Check::abs("", &val(&g, att.output), &expect, 1e-10));
        if att.weights.len() != weights.len() {
            return Check::failed("coarse/medium/fine attention vs loops", "head count differs");
        }
        for (wv, we) in att.weights.iter().zip(&weights) {
            c = c.max(Check::abs("", &val(&g, *wv), we, 1e-10));
        }
    }
    c
}

pub fn gates() -> Check {
    let mut rg = rng(9);
    let (n, d) = (3, 4);
    let mut store = ParamStore::new(0);
    nn::declare_linear(&mut store, "sg", d, d, true).unwrap();
    nn::declare_linear(&mut store, "cg", d, d, true).unwrap();
    let (sw, sb) = (put_rand(&mut store, &mut rg, "sg.w", &[d, d]), put_rand(&mut store, &mut rg, "sg.b", &[d]));
    let (cw, cb) = (put_rand(&mut store, &mut rg, "cg.w", &[d, d]), put_rand(&mut store, &mut rg, "cg.b", &[d]));
    let x = rand_vec(&mut rg, n * d, 1.0);
    let att = rand_vec(&mut rg, n * d, 1.0);
    let mut g = Graph::new(Mode::Eval, 0);
    let xv = input(&mut g, &[n, d], &x);
    let av = input(&mut g, &[n, d], &att);
    let sg = mfim::self_gate(&mut g, &store, "sg", xv).unwrap();
    let cg = mfim::contextual_gate(&mut g, &store, "cg", av, xv).unwrap();

    let z = r::dense(&x, &sw, Some(&sb), n, d, d);
    let expect_sg: Vec<f64> = x.iter().zip(&z).map(|(a, z)| a * r::sigmoid(*z)).collect();
    let z = r::layer_norm_rows(&r::dense(&x, &cw, Some(&cb), n, d, d), d);
    let expect_cg: Vec<f64> = att.iter().zip(&z).map(|(a, z)| a * r::sigmoid(*z)).collect();
    Check::abs("self-gate and contextual gate vs formulas", &val(&g, sg), &expect_sg, 1e-12)
        .max(Check::abs("", &val(&g, cg), &expect_cg, 1e-12))
}

pub fn cross_attention() -> Check {
    let mut rg = rng(10);
    let d = 4;
    let mut store = ParamStore::new(0);
    let ws: Vec<Vec<f64>> = ["wq", "wk", "wv"]
        .iter()
        .map(|w| put_rand(&mut store, &mut rg, &format!("x.{w}"), &[d, d]))
        .collect();
    let from = rand_vec(&mut rg, 2 * d, 1.0);
    let to = rand_vec(&mut rg, 3 * d, 1.0);
    let mut g = Graph::new(Mode::Eval, 0);
    let fv = input(&mut g, &[2, d], &from);
    let tv = input(&mut g, &[3, d], &to);
    let a = mfim::cross_attention(&mut g, &store, "x", fv, tv).unwrap();
    let (out, w) = r::attention(&from, &to, 2, 3, d, &ws[0], &ws[1], &ws[2], 1);
    Check::abs("cross-modal attention vs loops", &val(&g, a.output), &out, 1e-10)
        .max(Check::abs("", &val(&g, a.weights[0]), &w[0], 1e-10))
}

pub fn joint_fusion() -> Check {
    let mut rg = rng(11);
    let d = 4;
    let mut store = ParamStore::new(0);
    let w1 = put_rand(&mut store, &mut rg, "mfim.fusion.l1.w", &[d, d]);
    let b1 = put_rand(&mut store, &mut rg, "mfim.fusion.l1.b", &[d]);
    let w2 = put_rand(&mut store, &mut rg, "mfim.fusion.l2.w", &[d, d]);
    let b2 = put_rand(&mut store, &mut rg, "mfim.fusion.l2.b", &[d]);
    let t2i = rand_vec(&mut rg, 2 * d, 1.0);
    let i2t = rand_vec(&mut rg, 3 * d, 1.0);
    let mut g = Graph::new(Mode::Eval, 0);
    let a = input(&mut g, &[2, d], &t2i);
    let b = input(&mut g, &[3, d], &i2t);
    let y = mfim::joint_fusion(&mut g, &store, a, b).unwrap();

    let rows: Vec<f64> = t2i.iter().chain(&i2t).copied().collect();
    let mut mean = vec![0.0; d];
    for (i, v) in rows.iter().enumerate() {
        mean[i % d] += v * r::sigmoid(*v) / 5.0;
    }
    let h: Vec<f64> = r::dense(&mean, &w1, Some(&b1), 1, d, d).iter().map(|v| v.max(0.0)).collect();
    let expect = r::dense(&h, &w2, Some(&b2), 1, d, d);
    Check::abs("joint fusion vs composition", &val(&g, y), &expect, 1e-12)
}

pub fn stub_encoders_and_globals() -> Check {
    let mut rg = rng(12);
    let enc = StubEncoders::new(10, 3, 5, [2, 2], 9).unwrap();
    let ids = [3usize, 0, 9, 3];
    let text = enc.encode_text(&ids).unwrap();
    let table = enc.text_table.data();
    let expect_text: Vec<f64> = ids.iter().flat_map(|&k| table[k * 3..k * 3 + 3].to_vec()).collect();
    let mut c = Check::abs("stub encoders and global features vs loops", text.data(), &expect_text, 0.0);

    let (h, w) = (8, 6);
    let img = rand_vec(&mut rg, h * w * 3, 1.0);
    let grid = enc.encode_image(&tensor(&[h, w, 3], img.clone())).unwrap();
    let mut means = vec![0.0; 4 * 3];
    for y in 0..h {
        for x in 0..w {
            let cell = (y / 4) * 2 + x / 3;
            for ch in 0..3 {
                means[cell * 3 + ch] += img[(y * w + x) * 3 + ch] / 12.0;
            }
        }
    }
    let expect_grid = r::matmul(&means, enc.image_map.data(), 4, 3, 5);
    c = c.max(Check::abs("", grid.data(), &expect_grid, 1e-12));

    let mut g = Graph::new(Mode::Eval, 0);
    let tv = g.input(text.clone());
    let gv = g.input(grid.clone());
    let gl = mfim::global_features(&mut g, tv, gv).unwrap();
    let mut expect = vec![0.0; 3 + 5];
    for (i, v) in text.data().iter().enumerate() {
        expect[i % 3] += v / 4.0;
    }
    for (i, v) in grid.data().iter().enumerate() {
        expect[3 + i % 5] += v / 4.0;
    }
    c.max(Check::abs("", &val(&g, gl), &expect, 1e-12))
}

pub fn hren() -> Check {
    let mut rg = rng(13);
    let (cin, cout, groups, k) = (3, 6, 3, 3);
    let mut store = ParamStore::new(0);
    hcamam::declare_hren(&mut store, "h", k, cin, cout, groups).unwrap();
    let group = put_rand(&mut store, &mut rg, "h.group", &[k, k, cin / groups, cout]);
    let pre = put_rand(&mut store, &mut rg, "h.pre", &[1, 1, cin, cout]);
    let point = put_rand(&mut store, &mut rg, "h.point", &[1, 1, cout, cout]);
    let res = put_rand(&mut store, &mut rg, "h.res", &[1, 1, cin, cout]);
    let gamma = put_rand(&mut store, &mut rg, "h.bn.gamma", &[cout]);
    let beta = put_rand(&mut store, &mut rg, "h.bn.beta", &[cout]);
    let xs: Vec<Vec<f64>> = (0..2).map(|_| rand_vec(&mut rg, 4 * 4 * cin, 1.0)).collect();
    let mut g = Graph::new(Mode::Train, 0);
    let vars: Vec<Var> = xs.iter().map(|x| input(&mut g, &[4, 4, cin], x)).collect();
    let ys = hcamam::hren(&mut g, &store, "h", &vars, groups).unwrap();

    let pres: Vec<Vec<f64>> = xs.iter().map(|x| r::conv2d(x, 4, 4, cin, &pre, 1, cout, 1)).collect();
    let normed = r::batch_norm(&pres, cout, &gamma, &beta);
    let mut c = Check::ok("HREN vs composed convolutions", 1e-10);
    for ((x, n), y) in xs.iter().zip(&normed).zip(&ys) {
        let a = r::conv2d(x, 4, 4, cin, &group, k, cout, groups);
        let b = r::conv2d(n, 4, 4, cout, &point, 1, cout, 1);
        let rr = r::conv2d(x, 4, 4, cin, &res, 1, cout, 1);
        let expect: Vec<f64> = (0..a.len()).map(|i| a[i] + b[i] + rr[i]).collect();
        c = c.max(Check::abs("", &val(&g, *y), &expect, 1e-10));
    }
    c
}

pub fn feeca() -> Check {
    let mut rg = rng(14);
    let (h, w, c) = (4, 4, 4);
    let mut store = ParamStore::new(0);
    hcamam::declare_feeca(&mut store, "fe", c).unwrap();
    let k = put_rand(&mut store, &mut rg, "fe.conv", &[3]);
    let kb = put_rand(&mut store, &mut rg, "fe.conv_b", &[1]);
    let pw = put_rand(&mut store, &mut rg, "fe.proj.w", &[c, c]);
    let pb = put_rand(&mut store, &mut rg, "fe.proj.b", &[c]);
    let s = put_rand(&mut store, &mut rg, "fe.scale", &[1, 1, c]);
    let x = rand_vec(&mut rg, h * w * c, 1.0);
    let mut g = Graph::new(Mode::Eval, 0);
    let xv = input(&mut g, &[h, w, c], &x);
    let maps = hcamam::feeca(&mut g, &store, "fe", xv).unwrap();

    let mut desc = vec![0.0; c];
    for (i, v) in x.iter().enumerate() {
        desc[i % c] += v / (h * w) as f64;
    }
    let conv: Vec<f64> = r::conv1d(&desc, &k).iter().map(|v| v + kb[0]).collect();
    let y_proj = r::dense(&conv, &pw, Some(&pb), 1, c, c);
    let freq = r::dft2_magnitude(&x, h, w, c);
    let y_att: Vec<f64> = (0..h * w)
        .map(|p| r::sigmoid((0..c).map(|ch| y_proj[ch] * s[ch] * freq[p * c + ch]).sum()))
        .collect();
    let att_n = r::layer_norm_rows(&y_att, h * w);
    let x_n = r::layer_norm_rows(&x, c);
    let out: Vec<f64> = (0..h * w * c).map(|i| att_n[i / c] * x_n[i]).collect();
    Check::abs("FEECA vs scripted pipeline", &val(&g, maps.y_att), &y_att, 1e-9)
        .max(Check::abs("", &val(&g, maps.y_proj), &y_proj, 1e-9))
        .max(Check::abs("", &val(&g, maps.output), &out, 1e-9))
}

pub fn fmsa() -> Check {
    let mut rg = rng(15);
    let (h, w, c) = (4, 4, 4);
    let mut store = ParamStore::new(0);
    hcamam::declare_fmsa(&mut store, "fm", c).unwrap();
    let ms: Vec<(usize, Vec<f64>)> = [3, 5, 7]
        .iter()
        .map(|&k| (k, put_rand(&mut store, &mut rg, &format!("fm.ms{k}"), &[k, k, c, 1])))
        .collect();
    let pw = put_rand(&mut store, &mut rg, "fm.proj.w", &[c, c]);
    let sp = put_rand(&mut store, &mut rg, "fm.spatial", &[7, 7, 1, c]);
    let rw = put_rand(&mut store, &mut rg, "fm.reduce.w", &[c, c / 4]);
    let ew = put_rand(&mut store, &mut rg, "fm.expand.w", &[c / 4, c]);
    put(&mut store, "fm.w_att", &[1], vec![0.7]);
    put(&mut store, "fm.w_refined", &[1], vec![1.3]);
    let x = rand_vec(&mut rg, h * w * c, 1.0);
    let mut g = Graph::new(Mode::Eval, 0);
    let xv = input(&mut g, &[h, w, c], &x);
    let maps = hcamam::fmsa(&mut g, &store, "fm", xv).unwrap();

    let n = h * w;
    let mut z = vec![0.0; n];
    for (k, kern) in &ms {
        for (zi, v) in z.iter_mut().zip(r::conv2d(&x, h, w, c, kern, *k, 1, 1)) {
            *zi += v;
        }
    }
    let a_sp: Vec<f64> = z.iter().map(|v| r::sigmoid(*v)).collect();
    let freq = r::dft2_magnitude(&x, h, w, c);
    // Per-channel standardization over positions.
    let f_t = r::transpose(&freq, n, c);
    let f_norm = r::transpose(&r::layer_norm_rows(&f_t, n), c, n);
    let combined: Vec<f64> = (0..n * c).map(|i| a_sp[i / c] * freq[i] * f_norm[i]).collect();
    let a_proj = r::matmul(&combined, &pw, n, c, c);
    let smoothed = r::conv2d(&a_proj, h, w, c, &sp, 7, c, c);
    let red: Vec<f64> = r::matmul(&smoothed, &rw, n, c, c / 4).iter().map(|v| v.max(0.0)).collect();
    let a_ref: Vec<f64> = r::matmul(&red, &ew, n, c / 4, c).iter().map(|v| r::sigmoid(*v)).collect();
    let out: Vec<f64> = (0..n * c).map(|i| x[i] * (0.7 * a_proj[i]) * (1.3 * a_ref[i])).collect();
    Check::abs("FMSA vs scripted pipeline", &val(&g, maps.a_spatial), &a_sp, 1e-9)
        .max(Check::abs("", &val(&g, maps.a_proj), &a_proj, 1e-9))
        .max(Check::abs("", &val(&g, maps.a_refined), &a_ref, 1e-9))
        .max(Check::abs("", &val(&g, maps.output), &out, 1e-9))
}

pub fn attention_fusion() -> Check {
    let mut rg = rng(16);
    let (px, c, ng, dout) = (4, 3, 3, 5);
    let d_in = px * 2 * c + ng;
    let mut store = ParamStore::new(0);
    let w = put_rand(&mut store, &mut rg, "af.w", &[d_in, dout]);
    let b = put_rand(&mut store, &mut rg, "af.b", &[dout]);
    let m1 = rand_vec(&mut rg, px * c, 1.0);
    let m2 = rand_vec(&mut rg, px * c, 1.0);
    let gl = rand_vec(&mut rg, ng, 1.0);
    let mut g = Graph::new(Mode::Eval, 0);
    let a = input(&mut g, &[2, 2, c], &m1);
    let bb = input(&mut g, &[2, 2, c], &m2);
    let gv = input(&mut g, &[ng], &gl);
    let y = hcamam::attention_fusion(&mut g, &store, "af", &[a, bb], Some(gv)).unwrap();
    let mut flat = Vec::new();
    for p in 0..px {
        flat.extend_from_slice(&m1[p * c..(p + 1) * c]);
        flat.extend_from_slice(&m2[p * c..(p + 1) * c]);
    }
    flat.extend_from_slice(&gl);
    let expect: Vec<f64> = r::dense(&flat, &w, Some(&b), 1, d_in, dout).iter().map(|v| v.max(0.0)).collect();
    Check::abs("attention fusion vs concat+matmul", &val(&g, y), &expect, 1e-12)
}

pub fn gated_block() -> Check {
    let mut rg = rng(17);
    let (cin, cout) = (2, 3);
    let mut store = ParamStore::new(0);
    cctfrm::declare_gated_block(&mut store, "gb", cin, cout).unwrap();
    let k = put_rand(&mut store, &mut rg, "gb.conv", &[3, 3, cin, cout]);
    let gamma = put_rand(&mut store, &mut rg, "gb.bn.gamma", &[cout]);
    let beta = put_rand(&mut store, &mut rg, "gb.bn.beta", &[cout]);
    let xs: Vec<Vec<f64>> = (0..2).map(|_| rand_vec(&mut rg, 4 * 4 * cin, 1.0)).collect();
    let mut g = Graph::new(Mode::Train, 0);
    let vars: Vec<Var> = xs.iter().map(|x| input(&mut g, &[4, 4, cin], x)).collect();
    let outs = cctfrm::gated_block(&mut g, &store, "gb", &vars, 0.0).unwrap();

    let gated: Vec<Vec<f64>> = xs
        .iter()
        .map(|x| {
            r::conv2d(x, 4, 4, cin, &k, 3, cout, 1)
                .iter()
                .map(|v| (v * r::sigmoid(*v)).max(0.0))
                .collect()
        })
        .collect();
    let normed = r::batch_norm(&gated, cout, &gamma, &beta);
    let mut c = Check::ok("gated convolution block vs scripted steps", 1e-10);
    for ((o, gt), n) in outs.iter().zip(&gated).zip(&normed) {
        c = c.max(Check::abs("", &val(&g, o.gated), gt, 1e-10));
        c = c.max(Check::abs("", &val(&g, o.output), &r::max_pool2(n, 4, 4, cout), 1e-10));
    }
    c
}

pub fn transformer() -> Check {
    let mut rg = rng(18);
    let (n, d, ff, heads) = (2, 4, 5, 2);
    let mut store = ParamStore::new(0);
    cctfrm::declare_transformer(&mut store, "tf", 1, d, ff).unwrap();
    let ws: Vec<Vec<f64>> = ["wq", "wk", "wv", "wo"]
        .iter()
        .map(|w| put_rand(&mut store, &mut rg, &format!("tf0.{w}"), &[d, d]))
        .collect();
    let w1 = put_rand(&mut store, &mut rg, "tf0.ff1.w", &[d, ff]);
    let b1 = put_rand(&mut store, &mut rg, "tf0.ff1.b", &[ff]);
    let w2 = put_rand(&mut store, &mut rg, "tf0.ff2.w", &[ff, d]);
    let b2 = put_rand(&mut store, &mut rg, "tf0.ff2.b", &[d]);
    let x = rand_vec(&mut rg, n * d, 1.0);
    let mut g = Graph::new(Mode::Eval, 0);
    let xv = input(&mut g, &[n, d], &x);
    let t = cctfrm::transformer(&mut g, &store, "tf", xv, 1, heads, false).unwrap();

    let h = r::layer_norm_rows(&x, d);
    let (att, weights) = r::attention(&h, &h, n, n, d, &ws[0], &ws[1], &ws[2], heads);
    let o = r::matmul(&att, &ws[3], n, d, d);
    let x1: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
    let h2 = r::layer_norm_rows(&x1, d);
    let f: Vec<f64> = r::dense(&h2, &w1, Some(&b1), n, d, ff).iter().map(|v| v.max(0.0)).collect();
    let f2 = r::dense(&f, &w2, Some(&b2), n, ff, d);
    let out: Vec<f64> = x1.iter().zip(&f2).map(|(a, b)| a + b).collect();
    let mut c = Check::abs("transformer layer vs hand composition", &val(&g, t.output), &out, 1e-9);
    for (wv, we) in t.weights.iter().zip(&weights) {
        c = c.max(Check::abs("", &val(&g, *wv), we, 1e-9));
    }
    c
}

pub fn harmonizer() -> Check {
    let mut rg = rng(19);
    let ct = 3;
    let mut store = ParamStore::new(0);
    cctfrm::declare_harmonizer(&mut store, "hm", ct).unwrap();
    let ak = put_rand(&mut store, &mut rg, "hm.adapter", &[3, 3, 3, ct]);
    let ab = put_rand(&mut store, &mut rg, "hm.adapter.b", &[ct]);
    let gi = put_rand(&mut store, &mut rg, "hm.bn_image.gamma", &[ct]);
    let bi = put_rand(&mut store, &mut rg, "hm.bn_image.beta", &[ct]);
    let gc = put_rand(&mut store, &mut rg, "hm.bn_cascade.gamma", &[ct]);
    let bc = put_rand(&mut store, &mut rg, "hm.bn_cascade.beta", &[ct]);
    let sc: Vec<f64> = ["beta", "g_cascade", "g_image", "alpha_cascade", "alpha_sub"]
        .iter()
        .map(|s| put_rand(&mut store, &mut rg, &format!("hm.{s}"), &[1])[0])
        .collect();
    let cascades: Vec<Vec<f64>> = (0..2).map(|_| rand_vec(&mut rg, 2 * 2 * ct, 1.0)).collect();
    let images: Vec<Vec<f64>> = (0..2).map(|_| rand_vec(&mut rg, 4 * 4 * 3, 1.0)).collect();
    let mut g = Graph::new(Mode::Train, 0);
    let cv: Vec<Var> = cascades.iter().map(|x| input(&mut g, &[2, 2, ct], x)).collect();
    let iv: Vec<Var> = images.iter().map(|x| input(&mut g, &[4, 4, 3], x)).collect();
    let outs = cctfrm::harmonizer(&mut g, &store, "hm", &cv, &iv).unwrap();

    let adapted: Vec<Vec<f64>> = images
        .iter()
        .map(|im| {
            let p = r::avg_pool(im, 4, 4, 3, 2);
            r::conv2d(&p, 2, 2, 3, &ak, 3, ct, 1)
                .iter()
                .enumerate()
                .map(|(i, v)| v + ab[i % ct])
                .collect()
        })
        .collect();
    let xn = r::batch_norm(&adapted, ct, &gi, &bi);
    let yn = r::batch_norm(&cascades, ct, &gc, &bc);
    let mut c = Check::ok("harmonizer vs scripted blend", 1e-10);
    for ((x, y), o) in xn.iter().zip(&yn).zip(&outs) {
        let mut gate = Vec::new();
        let mut out = Vec::new();
        for (xv, yv) in x.iter().zip(y) {
            let y_sub = sc[0] * xv - r::sigmoid(*yv);
            let gt = r::sigmoid(sc[1] * yv + sc[2] * xv);
            gate.push(gt);
            out.push(gt * (sc[3] * yv + sc[4] * y_sub));
        }
        c = c.max(Check::abs("", &val(&g, o.gate), &gate, 1e-10));
        c = c.max(Check::abs("", &val(&g, o.output), &out, 1e-10));
    }
    c
}

/// The whole CCTFRM forward equals chaining its public blocks by hand.
pub fn cctfrm_chaining() -> Check {
    let cfg = ModelConfig {
        dropout: 0.0,
        ..ModelConfig::tiny()
    };
    let model = Model::new(cfg.clone()).unwrap();
    let store = model.init_params(5).unwrap();
    let samples = generate(3, 1, 0.3, DataShape::from(&cfg)).unwrap();
    let batch = model.encode(&samples).unwrap();

    let mut g = Graph::new(Mode::Train, 0);
    let images: Vec<Var> = batch.images.iter().map(|t| g.input(t.clone())).collect();
    let whole = cctfrm::forward(&mut g, &store, &cfg, &images).unwrap();

    let mut h = Graph::new(Mode::Train, 0);
    let mut xs: Vec<Var> = batch.images.iter().map(|t| h.input(t.clone())).collect();
    for i in 0..cfg.encoder_plan.len() {
        let o = cctfrm::gated_block(&mut h, &store, &format!("cctfrm.enc{i}"), &xs, 0.0).unwrap();
        xs = o.iter().map(|b| b.output).collect();
    }
    let expect_shape = [cfg.image_size[0] >> cfg.encoder_plan.len(), cfg.image_size[1] >> cfg.encoder_plan.len()];
    if h.shape(xs[0])[..2] != expect_shape {
        return Check::failed("CCTFRM forward vs manual block chaining", "encoder output extent");
    }
    for x in xs.iter_mut() {
        let s = h.shape(*x).to_vec();
        let tok = h.reshape(*x, &[s[0] * s[1], s[2]]).unwrap();
        let t = cctfrm::transformer(&mut h, &store, "cctfrm.tf", tok, cfg.transformer_depth, cfg.transformer_heads, true)
            .unwrap();
        *x = h.reshape(t.output, &s).unwrap();
    }
    let mut stages: Vec<Vec<Var>> = Vec::new();
    for i in 0..cfg.decoder_plan.len() {
        let o = cctfrm::feature_enhancement(&mut h, &store, &format!("cctfrm.dec{i}"), &xs, 0.0).unwrap();
        xs = o.iter().map(|b| b.output).collect();
        stages.push(xs.clone());
    }
    let cascades: Vec<Var> = (0..3)
        .map(|s| {
            let parts: Vec<Var> = stages.iter().map(|st| st[s]).collect();
            h.concat(&parts, 2).unwrap()
        })
        .collect();
    let hv: Vec<Var> = batch.images.iter().map(|t| h.input(t.clone())).collect();
    let refined = cctfrm::harmonizer(&mut h, &store, "cctfrm.harm", &cascades, &hv).unwrap();
    let mut c = Check::ok("CCTFRM forward vs manual block chaining", 1e-10);
    for (a, b) in whole.refined.iter().zip(&refined) {
        c = c.max(Check::abs("", &val(&g, *a), &val(&h, b.output), 1e-10));
    }
    c
}

pub fn head() -> Check {
    let mut rg = rng(20);
    let mut store = ParamStore::new(0);
    let w1 = put_rand(&mut store, &mut rg, "head.l1.w", &[7, 4]);
    let b1 = put_rand(&mut store, &mut rg, "head.l1.b", &[4]);
    let w2 = put_rand(&mut store, &mut rg, "head.l2.w", &[4, 1]);
    let b2 = put_rand(&mut store, &mut rg, "head.l2.b", &[1]);
    let p1 = rand_vec(&mut rg, 3, 1.0);
    let p2 = rand_vec(&mut rg, 4, 1.0);
    let mut g = Graph::new(Mode::Eval, 0);
    let a = input(&mut g, &[3], &p1);
    let b = input(&mut g, &[4], &p2);
    let out = uffm::forward(&mut g, &store, &[a, b]).unwrap();
    let cat: Vec<f64> = p1.iter().chain(&p2).copied().collect();
    let hid: Vec<f64> = r::dense(&cat, &w1, Some(&b1), 1, 7, 4).iter().map(|v| v.max(0.0)).collect();
    let logit = r::dense(&hid, &w2, Some(&b2), 1, 4, 1);
    Check::abs("classification head vs matmul+sigmoid", &val(&g, out.logit), &logit, 1e-12)
        .max(Check::abs("", &val(&g, out.prob), &[r::sigmoid(logit[0])], 1e-12))
}

pub fn bce() -> Check {
    let mut rg = rng(21);
    let mut probs: Vec<f64> = (0..10).map(|_| rg.gen_range(0.0..1.0)).collect();
    probs.extend([0.0, 1.0, 1e-9, 1.0 - 1e-9]);
    let labels: Vec<f64> = (0..probs.len()).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let mut g = Graph::new(Mode::Eval, 0);
    let pv = input(&mut g, &[probs.len()], &probs);
    let loss = g.bce(pv, &labels).unwrap();
    let mut s = 0.0;
    for (p, y) in probs.iter().zip(&labels) {
        let p = p.clamp(1e-7, 1.0 - 1e-7);
        s += if *y == 1.0 { -p.ln() } else { -(1.0 - p).ln() };
    }
    let expect = s / probs.len() as f64;
    Check::abs("BCE vs per-sample sum", &val(&g, loss), &[expect], 1e-12)
}

pub fn adamw() -> Check {
    let cfg = AdamWConfig {
        learning_rate: 0.05,
        weight_decay: 0.01,
        ..AdamWConfig::default()
    };
    let target = 3.0;
    let mut store = ParamStore::new(0);
    store.declare("w", &[1], Init::Constant(-1.0)).unwrap();
    let mut lib = Vec::new();
    for _ in 0..10 {
        let w = store.value("w").unwrap().data()[0];
        store.accumulate_grad("w", &Tensor::scalar(2.0 * (w - target))).unwrap();
        adamw_step(&mut store, &cfg);
        lib.push(store.value("w").unwrap().data()[0]);
    }
    // Standalone reference.
    let (mut w, mut m, mut v) = (-1.0f64, 0.0f64, 0.0f64);
    let mut reference = Vec::new();
    for t in 1..=10 {
        let grad = 2.0 * (w - target);
        w -= cfg.learning_rate * cfg.weight_decay * w;
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad;
        let mh = m / (1.0 - cfg.beta1.powi(t));
        let vh = v / (1.0 - cfg.beta2.powi(t));
        w -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
        reference.push(w);
    }
    Check::abs("AdamW 10-step trajectory vs reference", &lib, &reference, 1e-10)
}

/// Predictions/labels realizing TP=3, FP=1, FN=2, TN=4.
pub fn fixed_confusion() -> (Vec<u8>, Vec<u8>, Vec<f64>) {
    let preds = vec![1, 1, 1, 1, 0, 0, 0, 0, 0, 0];
    let labels = vec![1, 1, 1, 0, 1, 1, 0, 0, 0, 0];
    let probs = vec![0.9, 0.8, 0.6, 0.7, 0.4, 0.2, 0.1, 0.3, 0.45, 0.05];
    (preds, labels, probs)
}

pub fn metrics() -> Check {
    let (preds, labels, probs) = fixed_confusion();
    let m = compute_metrics(&preds, &probs, &labels).unwrap();
    let (tp, fp, fn_, tn) = (3.0f64, 1.0f64, 2.0f64, 4.0f64);
    let n = tp + fp + fn_ + tn;
    let prec = tp / (tp + fp);
    let rec = tp / (tp + fn_);
    let f1 = 2.0 * prec * rec / (prec + rec);
    let mcc = (tp * tn - fp * fn_) / ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    let po = (tp + tn) / n;
    let pe = ((tp + fp) / n) * ((tp + fn_) / n) + ((tn + fn_) / n) * ((tn + fp) / n);
    let kappa = (po - pe) / (1.0 - pe);
    let ll = probs
        .iter()
        .zip(&labels)
        .map(|(p, y)| if *y == 1 { -p.ln() } else { -(1.0 - p).ln() })
        .sum::<f64>()
        / n;
    let got = [m.accuracy, m.precision, m.recall, m.f1, m.mcc, m.cohen_kappa, m.log_loss];
    let expect = [po, prec, rec, f1, mcc, kappa, ll];
    Check::abs("metrics vs hand formulas (TP=3 FP=1 FN=2 TN=4)", &got, &expect, 1e-12)
}

pub fn mcnemar() -> Check {
    let mut rg = rng(22);
    let mut c = Check::ok("McNemar exact test vs brute-force binomial sum", 1e-12);
    for _ in 0..20 {
        let n = rg.gen_range(5..40);
        let labels: Vec<u8> = (0..n).map(|_| rg.gen_range(0..2)).collect();
        let a: Vec<u8> = (0..n).map(|_| rg.gen_range(0..2)).collect();
        let b: Vec<u8> = (0..n).map(|_| rg.gen_range(0..2)).collect();
        let t = mcnemar_test(&a, &b, &labels).unwrap();
        let (mut nb, mut nc) = (0usize, 0usize);
        for i in 0..n {
            if a[i] == labels[i] && b[i] != labels[i] {
                nb += 1;
            }
            if a[i] != labels[i] && b[i] == labels[i] {
                nc += 1;
            }
        }
        let m = nb + nc;
        let tail: f64 = (0..=nb.min(nc)).map(|i| r::choose(m, i)).sum::<f64>() / 2f64.powi(m as i32);
        let p = if m == 0 { 1.0 } else { (2.0 * tail).min(1.0) };
        c = c.max(Check::abs("", &[t.b as f64, t.c as f64, t.p_value], &[nb as f64, nc as f64, p], 1e-12));
    }
    c
}

pub fn checkpoint_size() -> Check {
    let model = Model::new(ModelConfig::tiny()).unwrap();
    let store = model.init_params(3).unwrap();
    let bytes = checkpoint::to_bytes(&store);
    let expect: usize = 4 + 1 + 8
        + store
            .tensors()
            .map(|(name, t)| 4 + name.len() + 1 + 8 * t.shape().len() + 8 * t.numel())
            .sum::<usize>();
    Check::abs("checkpoint size accounting", &[bytes.len() as f64], &[expect as f64], 0.0)
}

pub fn brightness_threshold() -> Check {
    let cfg = ModelConfig::desk();
    let samples = generate(200, 42, 0.0, DataShape::from(&cfg)).unwrap();
    let mean = |t: &Tensor| t.data().iter().sum::<f64>() / t.numel() as f64;
    let max0 = samples.iter().filter(|s| s.label == 0).map(|s| mean(&s.image)).fold(f64::MIN, f64::max);
    let min1 = samples.iter().filter(|s| s.label == 1).map(|s| mean(&s.image)).fold(f64::MAX, f64::min);
    let threshold = 0.5 * (max0 + min1);
    let correct = samples
        .iter()
        .filter(|s| u8::from(mean(&s.image) > threshold) == s.label)
        .count();
    let acc = correct as f64 / samples.len() as f64;
    Check::abs("difficulty-0 data separable by mean brightness", &[acc], &[1.0], 0.0)
}

pub fn grad_cam() -> Check {
    // One channel active at a single pixel with a positive gradient there:
    // the heatmap is one-hot at that pixel.
    let (h, w, c) = (3, 3, 2);
    let mut rg = rng(23);
    let mut map = vec![0.0; h * w * c];
    let mut grad = vec![0.0; h * w * c];
    let p = 5;
    map[p * c] = 0.8;
    grad[p * c] = 2.0;
    for px in 0..h * w {
        map[px * c + 1] = rg.gen_range(0.0..1.0);
    }
    let got = gradcam::cam(&tensor(&[h, w, c], map), &tensor(&[h, w, c], grad)).unwrap();
    let mut onehot = vec![0.0; h * w];
    onehot[p] = 1.0;
    let mut check = Check::abs("Grad-CAM vs hand-computed weighted sum", &got, &onehot, 1e-12);

    let map = rand_vec(&mut rg, 4 * 5 * 3, 1.0);
    let grad = rand_vec(&mut rg, 4 * 5 * 3, 1.0);
    let got = gradcam::cam(&tensor(&[4, 5, 3], map.clone()), &tensor(&[4, 5, 3], grad.clone())).unwrap();
    let mut alpha = [0.0; 3];
    for (i, gv) in grad.iter().enumerate() {
        alpha[i % 3] += gv / 20.0;
    }
    let raw: Vec<f64> = map
        .chunks(3)
        .map(|px| px.iter().zip(&alpha).map(|(a, b)| a * b).sum::<f64>().max(0.0))
        .collect();
    let mx = raw.iter().cloned().fold(0.0, f64::max);
    let expect: Vec<f64> = raw.iter().map(|v| if mx > 0.0 { v / mx } else { 0.0 }).collect();
    check = check.max(Check::abs("", &got, &expect, 1e-12));
    check
}

/// Every oracle, in a fixed order.
pub fn all() -> Vec<(&'static str, fn() -> Check)> {
    vec![
        ("matmul", matmul),
        ("conv2d", conv2d),
        ("fft_magnitude", fft_magnitude),
        ("pooling", pooling),
        ("softmax_and_layer_norm", softmax_and_layer_norm),
        ("batch_norm", batch_norm),
        ("bilstm", bilstm),
        ("attention_levels", attention_levels),
        ("gates", gates),
        ("cross_attention", cross_attention),
        ("joint_fusion", joint_fusion),
        ("stub_encoders_and_globals", stub_encoders_and_globals),
        ("hren", hren),
        ("feeca", feeca),
        ("fmsa", fmsa),
        ("attention_fusion", attention_fusion),
        ("gated_block", gated_block),
        ("transformer", transformer),
        ("harmonizer", harmonizer),
        ("cctfrm_chaining", cctfrm_chaining),
        ("head", head),
        ("bce", bce),
        ("adamw", adamw),
        ("metrics", metrics),
        ("mcnemar", mcnemar),
        ("checkpoint_size", checkpoint_size),
        ("brightness_threshold", brightness_threshold),
        ("grad_cam", grad_cam),
    ]
}
