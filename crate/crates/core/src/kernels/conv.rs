/// Geometry of a same-padded, stride-1 grouped convolution.
///
/// Kernel layout is `K×K×(C_in/G)×C_out`; group `g` reads input channels
/// `g*C_in/G..` and writes output channels `g*C_out/G..`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub groups: usize,
}

impl ConvGeom {
    fn cig(&self) -> usize {
        self.cin / self.groups
    }
    fn cog(&self) -> usize {
        self.cout / self.groups
    }
}

/// Visits every (output pixel, kernel tap) pair whose input pixel lies inside
/// the image, handing the callback the output pixel offset, input pixel
/// offset and the tap index `ky*K + kx`.
#[inline]
fn for_each_tap(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize)) {
    let pad = (g.k / 2) as isize;
    let (h, w) = (g.h as isize, g.w as isize);
    for y in 0..h {
        for x in 0..w {
            let out_px = (y * w + x) as usize;
            for ky in 0..g.k as isize {
                let iy = y + ky - pad;
                if iy < 0 || iy >= h {
                    continue;
                }
                for kx in 0..g.k as isize {
                    let ix = x + kx - pad;
                    if ix < 0 || ix >= w {
                        continue;
                    }
                    f(out_px, (iy * w + ix) as usize, (ky as usize) * g.k + kx as usize);
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(input: &[f64], kernel: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (cig, cog) = (g.cig(), g.cog());
    let mut out = vec![0.0; g.h * g.w * g.cout];
    for_each_tap(g, |opx, ipx, tap| {
        let inp = &input[ipx * g.cin..(ipx + 1) * g.cin];
        let outp = &mut out[opx * g.cout..(opx + 1) * g.cout];
        for grp in 0..g.groups {
            let o_slice = &mut outp[grp * cog..(grp + 1) * cog];
            for i in 0..cig {
                let xv = inp[grp * cig + i];
                if xv == 0.0 {
                    continue;
                }
                let base = (tap * cig + i) * g.cout + grp * cog;
                for (o, &kv) in o_slice.iter_mut().zip(&kernel[base..base + cog]) {
                    *o += xv * kv;
                }
            }
        }
    });
    out
}

/// Returns `(d_input, d_kernel)` for upstream gradient `dout`.
pub(crate) fn conv2d_backward(
    input: &[f64],
    kernel: &[f64],
    dout: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>) {
    let (cig, cog) = (g.cig(), g.cog());
    let mut dx = vec![0.0; input.len()];
    let mut dk = vec![0.0; kernel.len()];
    for_each_tap(g, |opx, ipx, tap| {
        let d_o = &dout[opx * g.cout..(opx + 1) * g.cout];
        for grp in 0..g.groups {
            let d_slice = &d_o[grp * cog..(grp + 1) * cog];
            for i in 0..cig {
                let ci = ipx * g.cin + grp * cig + i;
                let xv = input[ci];
                let base = (tap * cig + i) * g.cout + grp * cog;
                let krow = &kernel[base..base + cog];
                let dkrow = &mut dk[base..base + cog];
                let mut acc = 0.0;
                for ((dkv, &kv), &dv) in dkrow.iter_mut().zip(krow).zip(d_slice) {
                    acc += dv * kv;
                    *dkv += xv * dv;
                }
                dx[ci] += acc;
            }
        }
    });
    (dx, dk)
}

/// Same-padded 1-D correlation of a vector with an odd-length kernel.
pub(crate) fn conv1d_forward(x: &[f64], kernel: &[f64]) -> Vec<f64> {
    let n = x.len() as isize;
    let pad = (kernel.len() / 2) as isize;
    (0..n)
        .map(|c| {
            kernel
                .iter()
                .enumerate()
                .filter_map(|(j, &kv)| {
                    let src = c + j as isize - pad;
                    (0..n).contains(&src).then(|| kv * x[src as usize])
                })
                .sum()
        })
        .collect()
}

pub(crate) fn conv1d_backward(x: &[f64], kernel: &[f64], dout: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = x.len() as isize;
    let pad = (kernel.len() / 2) as isize;
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; kernel.len()];
    for c in 0..n {
        for (j, &kv) in kernel.iter().enumerate() {
            let src = c + j as isize - pad;
            if (0..n).contains(&src) {
                dx[src as usize] += kv * dout[c as usize];
                dk[j] += x[src as usize] * dout[c as usize];
            }
        }
    }
    (dx, dk)
}
