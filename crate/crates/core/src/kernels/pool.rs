/// 2×2 max pooling over an `h×w×c` map. Odd extents are padded by edge
/// replication, so the output is `ceil(h/2)×ceil(w/2)×c`. Returns the pooled
/// values and, per output element, the flat input index that won (first
/// maximum in scan order).
pub(crate) fn max_pool2_forward(x: &[f64], h: usize, w: usize, c: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![0.0; oh * ow * c];
    let mut arg = vec![0usize; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for dy in 0..2 {
                    let iy = (2 * oy + dy).min(h - 1);
                    for dx in 0..2 {
                        let ix = (2 * ox + dx).min(w - 1);
                        let i = (iy * w + ix) * c + ch;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                let o = (oy * ow + ox) * c + ch;
                out[o] = best;
                arg[o] = best_i;
            }
        }
    }
    (out, arg)
}

/// Non-overlapping `f×f` average pooling; `h` and `w` must be multiples of `f`.
pub(crate) fn avg_pool_forward(x: &[f64], h: usize, w: usize, c: usize, f: usize) -> Vec<f64> {
    let (oh, ow) = (h / f, w / f);
    let norm = 1.0 / (f * f) as f64;
    let mut out = vec![0.0; oh * ow * c];
    for y in 0..h {
        for xx in 0..w {
            let o = ((y / f) * ow + xx / f) * c;
            let i = (y * w + xx) * c;
            for ch in 0..c {
                out[o + ch] += x[i + ch] * norm;
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward(dout: &[f64], h: usize, w: usize, c: usize, f: usize) -> Vec<f64> {
    let ow = w / f;
    let norm = 1.0 / (f * f) as f64;
    let mut dx = vec![0.0; h * w * c];
    for y in 0..h {
        for xx in 0..w {
            let o = ((y / f) * ow + xx / f) * c;
            let i = (y * w + xx) * c;
            for ch in 0..c {
                dx[i + ch] = dout[o + ch] * norm;
            }
        }
    }
    dx
}

/// Nearest-neighbour upsampling by `f` in both spatial axes.
pub(crate) fn upsample_forward(x: &[f64], h: usize, w: usize, c: usize, f: usize) -> Vec<f64> {
    let (oh, ow) = (h * f, w * f);
    let mut out = vec![0.0; oh * ow * c];
    for y in 0..oh {
        for xx in 0..ow {
            let i = ((y / f) * w + xx / f) * c;
            let o = (y * ow + xx) * c;
            out[o..o + c].copy_from_slice(&x[i..i + c]);
        }
    }
    out
}

pub(crate) fn upsample_backward(dout: &[f64], h: usize, w: usize, c: usize, f: usize) -> Vec<f64> {
    let ow = w * f;
    let mut dx = vec![0.0; h * w * c];
    for y in 0..h * f {
        for xx in 0..ow {
            let i = ((y / f) * w + xx / f) * c;
            let o = (y * ow + xx) * c;
            for ch in 0..c {
                dx[i + ch] += dout[o + ch];
            }
        }
    }
    dx
}
