//! Loop-based reference implementations. Everything here works on plain
//! slices and shares no code with the library.

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `a` is m×k, `b` is k×n.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

pub fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// Same-padded, stride-1 grouped convolution, channels-last, kernel
/// `k×k×(cin/groups)×cout`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(x: &[f64], h: usize, w: usize, cin: usize, kernel: &[f64], k: usize, cout: usize, groups: usize) -> Vec<f64> {
    let (cig, cog) = (cin / groups, cout / groups);
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; h * w * cout];
    for y in 0..h {
        for xx in 0..w {
            for co in 0..cout {
                let grp = co / cog;
                let mut s = 0.0;
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = y as isize + ky as isize - pad;
                        let ix = xx as isize + kx as isize - pad;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        for ci in 0..cig {
                            let xv = x[(iy as usize * w + ix as usize) * cin + grp * cig + ci];
                            let kv = kernel[((ky * k + kx) * cig + ci) * cout + co];
                            s += xv * kv;
                        }
                    }
                }
                out[(y * w + xx) * cout + co] = s;
            }
        }
    }
    out
}

/// `|Σ x(y,x)·e^{−2πi(uy/H + vx/W)}|` per channel, computed directly.
pub fn dft2_magnitude(x: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w * c];
    for u in 0..h {
        for v in 0..w {
            for ch in 0..c {
                let (mut re, mut im) = (0.0, 0.0);
                for y in 0..h {
                    for xx in 0..w {
                        let angle = -2.0 * std::f64::consts::PI * ((u * y) as f64 / h as f64 + (v * xx) as f64 / w as f64);
                        let val = x[(y * w + xx) * c + ch];
                        re += val * angle.cos();
                        im += val * angle.sin();
                    }
                }
                out[(u * w + v) * c + ch] = (re * re + im * im).sqrt();
            }
        }
    }
    out
}

/// 2×2 max pooling; windows hanging off an odd edge use the cells that exist.
pub fn max_pool2(x: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![f64::NEG_INFINITY; oh * ow * c];
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                let o = &mut out[((y / 2) * ow + xx / 2) * c + ch];
                *o = o.max(x[(y * w + xx) * c + ch]);
            }
        }
    }
    out
}

pub fn avg_pool(x: &[f64], h: usize, w: usize, c: usize, f: usize) -> Vec<f64> {
    let (oh, ow) = (h / f, w / f);
    let mut out = vec![0.0; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut s = 0.0;
                for dy in 0..f {
                    for dx in 0..f {
                        s += x[((oy * f + dy) * w + ox * f + dx) * c + ch];
                    }
                }
                out[(oy * ow + ox) * c + ch] = s / (f * f) as f64;
            }
        }
    }
    out
}

pub fn upsample(x: &[f64], h: usize, w: usize, c: usize, f: usize) -> Vec<f64> {
    let ow = w * f;
    let mut out = vec![0.0; h * f * ow * c];
    for y in 0..h * f {
        for xx in 0..ow {
            for ch in 0..c {
                out[(y * ow + xx) * c + ch] = x[((y / f) * w + xx / f) * c + ch];
            }
        }
    }
    out
}

pub fn softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(n) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    out
}

pub const EPS: f64 = 1e-5;

/// Row-wise standardization with biased variance.
pub fn layer_norm_rows(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(n) {
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        out.extend(row.iter().map(|v| (v - mean) / (var + EPS).sqrt()));
    }
    out
}

/// Per-channel standardization over every leading position of every map in
/// `xs` (channels-last), followed by `gamma·x̂ + beta`.
pub fn batch_norm(xs: &[Vec<f64>], c: usize, gamma: &[f64], beta: &[f64]) -> Vec<Vec<f64>> {
    let mut mean = vec![0.0; c];
    let mut count = 0.0;
    for x in xs {
        for (i, v) in x.iter().enumerate() {
            mean[i % c] += v;
        }
        count += (x.len() / c) as f64;
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; c];
    for x in xs {
        for (i, v) in x.iter().enumerate() {
            var[i % c] += (v - mean[i % c]).powi(2);
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    xs.iter()
        .map(|x| {
            x.iter()
                .enumerate()
                .map(|(i, v)| gamma[i % c] * (v - mean[i % c]) / (var[i % c] + EPS).sqrt() + beta[i % c])
                .collect()
        })
        .collect()
}

/// Multi-head attention of `x_q` (nq×d) over `x_kv` (nk×d) with column-block
/// heads; returns the concatenated head outputs (before any output
/// projection) and each head's weight matrix.
#[allow(clippy::too_many_arguments)]
pub fn attention(
    x_q: &[f64],
    x_kv: &[f64],
    nq: usize,
    nk: usize,
    d: usize,
    wq: &[f64],
    wk: &[f64],
    wv: &[f64],
    heads: usize,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let q = matmul(x_q, wq, nq, d, d);
    let k = matmul(x_kv, wk, nk, d, d);
    let v = matmul(x_kv, wv, nk, d, d);
    let dh = d / heads;
    let mut out = vec![0.0; nq * d];
    let mut weights = Vec::new();
    for hd in 0..heads {
        let mut wmat = vec![0.0; nq * nk];
        for i in 0..nq {
            let mut scores = vec![0.0; nk];
            for (j, s) in scores.iter_mut().enumerate() {
                for p in 0..dh {
                    *s += q[i * d + hd * dh + p] * k[j * d + hd * dh + p];
                }
                *s /= (dh as f64).sqrt();
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for j in 0..nk {
                wmat[i * nk + j] = (scores[j] - m).exp() / z;
            }
            for p in 0..dh {
                out[i * d + hd * dh + p] = (0..nk).map(|j| wmat[i * nk + j] * v[j * d + hd * dh + p]).sum();
            }
        }
        weights.push(wmat);
    }
    (out, weights)
}

/// One LSTM direction with gates `[i, f, g, o]` and zero initial state.
pub fn lstm(xs: &[Vec<f64>], w_ih: &[f64], w_hh: &[f64], b: &[f64], hidden: usize) -> Vec<Vec<f64>> {
    let d_in = xs[0].len();
    let mut h = vec![0.0; hidden];
    let mut c = vec![0.0; hidden];
    let mut out = Vec::new();
    for x in xs {
        let mut z = b.to_vec();
        for (j, zj) in z.iter_mut().enumerate() {
            for p in 0..d_in {
                *zj += x[p] * w_ih[p * 4 * hidden + j];
            }
            for p in 0..hidden {
                *zj += h[p] * w_hh[p * 4 * hidden + j];
            }
        }
        for u in 0..hidden {
            let i = sigmoid(z[u]);
            let f = sigmoid(z[hidden + u]);
            let g = z[2 * hidden + u].tanh();
            let o = sigmoid(z[3 * hidden + u]);
            c[u] = f * c[u] + i * g;
            h[u] = o * c[u].tanh();
        }
        out.push(h.clone());
    }
    out
}

/// `x·W + b` row by row.
pub fn dense(x: &[f64], w: &[f64], b: Option<&[f64]>, n: usize, d_in: usize, d_out: usize) -> Vec<f64> {
    let mut y = matmul(x, w, n, d_in, d_out);
    if let Some(b) = b {
        for row in y.chunks_mut(d_out) {
            row.iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
        }
    }
    y
}

/// Same-padded 1-D correlation.
pub fn conv1d(x: &[f64], k: &[f64]) -> Vec<f64> {
    let pad = (k.len() / 2) as isize;
    (0..x.len() as isize)
        .map(|i| {
            k.iter()
                .enumerate()
                .map(|(j, kv)| {
                    let s = i + j as isize - pad;
                    if s < 0 || s >= x.len() as isize {
                        0.0
                    } else {
                        kv * x[s as usize]
                    }
                })
                .sum()
        })
        .collect()
}

/// `C(n, k)` for small `n`, from Pascal's triangle (exact in f64 up to n ≈ 50).
pub fn choose(n: usize, k: usize) -> f64 {
    let mut row = vec![1.0f64];
    for _ in 0..n {
        let mut next = vec![1.0; row.len() + 1];
        for i in 1..row.len() {
            next[i] = row[i - 1] + row[i];
        }
        row = next;
    }
    row[k]
}
