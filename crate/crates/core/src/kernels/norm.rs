pub(crate) const NORM_EPS: f64 = 1e-5;

/// How elements are grouped for normalization statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormAxis {
    /// Each contiguous run along the last axis is one group (layer norm).
    Last,
    /// Each channel (last-axis index) pooled over all leading axes is one
    /// group (batch-norm style statistics).
    Channels,
}

/// Saved state of a normalization: the normalized values and per-group
/// statistics.
#[derive(Clone, Debug)]
pub(crate) struct NormStats {
    pub xhat: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Group id of flat element `i` and the number of groups.
#[inline]
fn group_of(axis: NormAxis, i: usize, last: usize) -> usize {
    match axis {
        NormAxis::Last => i / last,
        NormAxis::Channels => i % last,
    }
}

fn n_groups(axis: NormAxis, len: usize, last: usize) -> usize {
    match axis {
        NormAxis::Last => len / last,
        NormAxis::Channels => last,
    }
}

/// `(x − mean)/sqrt(var + 1e-5)` with biased variance per group.
pub(crate) fn normalize_forward(x: &[f64], last: usize, axis: NormAxis) -> NormStats {
    let groups = n_groups(axis, x.len(), last);
    let m = (x.len() / groups) as f64;
    let mut mean = vec![0.0; groups];
    for (i, &v) in x.iter().enumerate() {
        mean[group_of(axis, i, last)] += v;
    }
    mean.iter_mut().for_each(|s| *s /= m);
    let mut var = vec![0.0; groups];
    for (i, &v) in x.iter().enumerate() {
        let gi = group_of(axis, i, last);
        let d = v - mean[gi];
        var[gi] += d * d;
    }
    var.iter_mut().for_each(|s| *s /= m);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
    let xhat = x
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let gi = group_of(axis, i, last);
            (v - mean[gi]) * inv_std[gi]
        })
        .collect();
    NormStats {
        xhat,
        mean,
        var,
        inv_std,
    }
}

/// `dx = inv_std/m · (m·dy − Σdy − x̂·Σ(dy·x̂))` per group.
pub(crate) fn normalize_backward(stats: &NormStats, dout: &[f64], last: usize, axis: NormAxis) -> Vec<f64> {
    let groups = stats.inv_std.len();
    let m = (dout.len() / groups) as f64;
    let mut sum_dy = vec![0.0; groups];
    let mut sum_dy_xhat = vec![0.0; groups];
    for (i, &dy) in dout.iter().enumerate() {
        let gi = group_of(axis, i, last);
        sum_dy[gi] += dy;
        sum_dy_xhat[gi] += dy * stats.xhat[i];
    }
    dout.iter()
        .enumerate()
        .map(|(i, &dy)| {
            let gi = group_of(axis, i, last);
            stats.inv_std[gi] / m * (m * dy - sum_dy[gi] - stats.xhat[i] * sum_dy_xhat[gi])
        })
        .collect()
}
