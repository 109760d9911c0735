use rustfft::num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

/// In-place 2-D DFT of an `h×w` row-major complex plane.
fn dft2_in_place(plane: &mut [Complex64], h: usize, w: usize, dir: FftDirection) {
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft(w, dir);
    row_fft.process(plane);

    let col_fft = planner.plan_fft(h, dir);
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = plane[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            plane[y * w + x] = col[y];
        }
    }
}

/// Per-channel 2-D DFT of an `h×w×c` real map. Returns the complex spectrum
/// (same layout) and its magnitude.
pub(crate) fn fft2_magnitude_forward(
    x: &[f64],
    h: usize,
    w: usize,
    c: usize,
) -> (Vec<Complex64>, Vec<f64>) {
    let mut spectrum = vec![Complex64::new(0.0, 0.0); x.len()];
    let mut plane = vec![Complex64::new(0.0, 0.0); h * w];
    for ch in 0..c {
        for p in 0..h * w {
            plane[p] = Complex64::new(x[p * c + ch], 0.0);
        }
        dft2_in_place(&mut plane, h, w, FftDirection::Forward);
        for p in 0..h * w {
            spectrum[p * c + ch] = plane[p];
        }
    }
    let mag = spectrum.iter().map(|z| z.norm()).collect();
    (spectrum, mag)
}

/// Gradient of `Σ g·|DFT(x)|` with respect to the real input.
///
/// With `u = g·X/|X|` (zero where `|X| = 0`), the input gradient is
/// `Re(Fᴴ u)`, i.e. the real part of the unnormalised inverse transform.
pub(crate) fn fft2_magnitude_backward(
    spectrum: &[Complex64],
    dout: &[f64],
    h: usize,
    w: usize,
    c: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; spectrum.len()];
    let mut plane = vec![Complex64::new(0.0, 0.0); h * w];
    for ch in 0..c {
        for p in 0..h * w {
            let z = spectrum[p * c + ch];
            let n = z.norm();
            plane[p] = if n > 0.0 {
                z * (dout[p * c + ch] / n)
            } else {
                Complex64::new(0.0, 0.0)
            };
        }
        dft2_in_place(&mut plane, h, w, FftDirection::Inverse);
        for p in 0..h * w {
            dx[p * c + ch] = plane[p].re;
        }
    }
    dx
}
