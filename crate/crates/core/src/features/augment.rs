//! Random segment-wise time resampling.

use rand::Rng;

use crate::nn::Tensor;

/// Segment lengths (frames, inclusive) and resampling rates (inclusive).
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ResampleRanges {
    pub seg_min: usize,
    pub seg_max: usize,
    pub rate_min: f32,
    pub rate_max: f32,
}

impl Default for ResampleRanges {
    fn default() -> Self {
        Self {
            seg_min: 19,
            seg_max: 32,
            rate_min: 0.5,
            rate_max: 1.5,
        }
    }
}

/// Linear interpolation of `seq` (rows are time) to `out_len` rows with the
/// first and last rows pinned to the endpoints.
pub fn interpolate_rows(seq: &Tensor, out_len: usize) -> Tensor {
    let n = seq.rows();
    if out_len == n {
        return seq.clone();
    }
    let cols = seq.cols();
    let mut out = Tensor::zeros(out_len, cols);
    for i in 0..out_len {
        let pos = if out_len == 1 || n == 1 {
            0.0
        } else {
            i as f64 * (n - 1) as f64 / (out_len - 1) as f64
        };
        let lo = (pos.floor() as usize).min(n - 1);
        let hi = (lo + 1).min(n - 1);
        let frac = (pos - lo as f64) as f32;
        let (a, b) = (seq.row(lo), seq.row(hi));
        for (c, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = lerp(a[c], b[c], frac);
        }
    }
    out
}

#[inline]
fn lerp(a: f32, b: f32, frac: f32) -> f32 {
    if frac == 0.0 || a == b {
        return a;
    }
    (a + frac * (b - a)).clamp(a.min(b), a.max(b))
}

/// Splits `seq` into segments with lengths uniform in `[seg_min, seg_max]`
/// and resamples each by a rate uniform in `[rate_min, rate_max]`: a
/// segment of `n` frames becomes `max(1, round(n * rate))` frames.
pub fn random_resample<R: Rng + ?Sized>(seq: &Tensor, ranges: &ResampleRanges, rng: &mut R) -> Tensor {
    let mut pieces = Vec::new();
    let mut start = 0;
    let n = seq.rows();
    while start < n {
        let seg = if ranges.seg_min >= ranges.seg_max {
            ranges.seg_min
        } else {
            rng.random_range(ranges.seg_min..=ranges.seg_max)
        }
        .max(1);
        let end = (start + seg).min(n);
        let rate = if ranges.rate_min >= ranges.rate_max {
            ranges.rate_min
        } else {
            rng.random_range(ranges.rate_min..=ranges.rate_max)
        };
        let len = end - start;
        let out_len = ((len as f64 * rate as f64).round() as usize).max(1);
        pieces.push(interpolate_rows(&seq.slice_rows(start, end), out_len));
        start = end;
    }
    let refs: Vec<&Tensor> = pieces.iter().collect();
    Tensor::concat_rows(&refs).expect("segments share the channel count")
}

/// Truncates or pads with `pad_row` to exactly `len` rows.
pub fn fit_rows(seq: &Tensor, len: usize, pad_row: &[f32]) -> Tensor {
    debug_assert_eq!(pad_row.len(), seq.cols());
    if seq.rows() >= len {
        return seq.slice_rows(0, len);
    }
    let mut out = Tensor::zeros(len, seq.cols());
    out.data_mut()[..seq.len()].copy_from_slice(seq.data());
    for r in seq.rows()..len {
        out.row_mut(r).copy_from_slice(pad_row);
    }
    out
}
