use super::PixelSaliencyMap;
use crate::error::{Error, Result};

/// Values below this percentile of a map are zeroed before blurring.
pub const DEFAULT_PERCENTILE: f64 = 90.0;

/// Standard deviation of the 3×3 display blur.
pub const BLUR_SIGMA: f64 = 0.8;

/// Normalized 3×3 Gaussian stencil, row-major.
pub fn gaussian_kernel3(sigma: f64) -> [f64; 9] {
    let mut k = [0.0; 9];
    for di in 0..3 {
        for dj in 0..3 {
            let (a, b) = (di as f64 - 1.0, dj as f64 - 1.0);
            k[di * 3 + dj] = (-(a * a + b * b) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

fn blur3(values: &[f64], h: usize, w: usize, kernel: &[f64; 9]) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for di in 0..3 {
                for dj in 0..3 {
                    let (y, x) = (i + di, j + dj);
                    // zero padding outside the image
                    if y >= 1 && x >= 1 && y - 1 < h && x - 1 < w {
                        acc += kernel[di * 3 + dj] * values[(y - 1) * w + (x - 1)];
                    }
                }
            }
            out[i * w + j] = acc;
        }
    }
    out
}

/// Display form: values below the `percentile`-th percentile are zeroed (ties at the
/// cutoff survive), an optional 3×3 Gaussian blur is applied, and the result is rescaled
/// to `[0, 1]`. A constant map yields all zeros with `degenerate` set.
pub fn postprocess_map(map: &PixelSaliencyMap, percentile: f64, blur: bool) -> Result<PixelSaliencyMap> {
    if !(0.0..100.0).contains(&percentile) {
        return Err(Error::invalid(format!("percentile must lie in [0, 100), got {percentile}")));
    }
    let n = map.values.len();
    let mut out = map.clone();
    out.postprocessed = true;
    let (lo, hi) = map.values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if n == 0 || lo == hi {
        out.values = vec![0.0; n];
        out.degenerate = true;
        return Ok(out);
    }
    let keep = ((1.0 - percentile / 100.0) * n as f64).ceil() as usize;
    let mut sorted = map.values.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let cutoff = sorted[keep.clamp(1, n) - 1];
    let mut v: Vec<f64> = map.values.iter().map(|&x| if x >= cutoff { x } else { 0.0 }).collect();
    if blur {
        v = blur3(&v, map.height, map.width, &gaussian_kernel3(BLUR_SIGMA));
    }
    let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    if lo == hi {
        out.values = vec![0.0; n];
        out.degenerate = true;
    } else {
        out.values = v.into_iter().map(|x| (x - lo) / (hi - lo)).collect();
    }
    Ok(out)
}
