//! Slice-wise image similarity: MAE, RMSE and Gaussian-window SSIM, plus the
//! per-volume evaluation report.

use crate::data::Volume;
use crate::error::{Error, Result};
use crate::translate::SliceTranslator;
use std::fmt::Write as _;

fn check_same(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a} vs {b} elements")));
    }
    if a == 0 {
        return Err(Error::Empty(format!("{op} of empty images")));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn mae<T: Copy + Into<f64>>(a: &[T], b: &[T]) -> Result<f64> {
    check_same("mae", a.len(), b.len())?;
    let sum: f64 = a.iter().zip(b).map(|(&x, &y)| (x.into() - y.into()).abs()).sum();
    Ok(sum / a.len() as f64)
}

/// Root of the mean squared difference.
pub fn rmse<T: Copy + Into<f64>>(a: &[T], b: &[T]) -> Result<f64> {
    check_same("rmse", a.len(), b.len())?;
    let sum: f64 = a.iter().zip(b).map(|(&x, &y)| (x.into() - y.into()).powi(2)).sum();
    Ok((sum / a.len() as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    /// Side of the square Gaussian window.
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Value span `L` of the data; stabilizers are `(k1·L)²` and `(k2·L)²`.
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, dynamic_range: 1.0 }
    }
}

impl SsimParams {
    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let c = (self.window as f64 - 1.0) / 2.0;
        let raw: Vec<f64> = (0..self.window).map(|i| (-(i as f64 - c).powi(2) / (2.0 * self.sigma * self.sigma)).exp()).collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }
}

/// Valid-mode separable filtering of an `h × w` image.
fn filter(img: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let src = &img[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&src[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity over every fully contained Gaussian window of
/// two `height × width` images.
pub fn ssim<T: Copy + Into<f64>>(a: &[T], b: &[T], height: usize, width: usize, params: &SsimParams) -> Result<f64> {
    check_same("ssim", a.len(), b.len())?;
    if a.len() != height * width {
        return Err(Error::shape("ssim", format!("{} elements for {height}×{width}", a.len())));
    }
    if params.window == 0 || height < params.window || width < params.window {
        return Err(Error::shape("ssim", format!("{height}×{width} image is smaller than the {0}×{0} window", params.window)));
    }
    if !(params.sigma > 0.0 && params.dynamic_range > 0.0) {
        return Err(Error::InvalidArgument("SSIM sigma and dynamic range must be positive".into()));
    }
    let a: Vec<f64> = a.iter().map(|&v| v.into()).collect();
    let b: Vec<f64> = b.iter().map(|&v| v.into()).collect();
    let taps = params.taps();
    let f = |img: &[f64]| filter(img, height, width, &taps);
    let mu_a = f(&a);
    let mu_b = f(&b);
    let aa = f(&a.iter().map(|v| v * v).collect::<Vec<_>>());
    let bb = f(&b.iter().map(|v| v * v).collect::<Vec<_>>());
    let ab = f(&a.iter().zip(&b).map(|(x, y)| x * y).collect::<Vec<_>>());
    let c1 = (params.k1 * params.dynamic_range).powi(2);
    let c2 = (params.k2 * params.dynamic_range).powi(2);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SliceMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub ssim: f64,
}

impl SliceMetrics {
    pub fn between(a: &[f32], b: &[f32], size: usize, params: &SsimParams) -> Result<Self> {
        Ok(Self { mae: mae(a, b)?, rmse: rmse(a, b)?, ssim: ssim(a, b, size, size, params)? })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvaluationReport {
    pub slices: Vec<SliceMetrics>,
    /// Mean of the per-slice metrics.
    pub mean: SliceMetrics,
}

impl EvaluationReport {
    pub fn from_slices(slices: Vec<SliceMetrics>) -> Result<Self> {
        if slices.is_empty() {
            return Err(Error::Empty("no slices to evaluate".into()));
        }
        let n = slices.len() as f64;
        let mean = SliceMetrics {
            mae: slices.iter().map(|s| s.mae).sum::<f64>() / n,
            rmse: slices.iter().map(|s| s.rmse).sum::<f64>() / n,
            ssim: slices.iter().map(|s| s.ssim).sum::<f64>() / n,
        };
        Ok(Self { slices, mean })
    }

    /// Header, one `slice_index,mae,rmse,ssim` record per slice and a final
    /// `mean` row.
    pub fn to_text(&self) -> String {
        let mut out = String::from("slice_index,mae,rmse,ssim\n");
        for (i, s) in self.slices.iter().enumerate() {
            let _ = writeln!(out, "{i},{:.9},{:.9},{:.9}", s.mae, s.rmse, s.ssim);
        }
        let m = &self.mean;
        let _ = writeln!(out, "mean,{:.9},{:.9},{:.9}", m.mae, m.rmse, m.ssim);
        out
    }
}

/// Slice-wise comparison of two index-aligned volumes.
pub fn compare_volumes(a: &Volume, b: &Volume, params: &SsimParams) -> Result<EvaluationReport> {
    if a.depth != b.depth || a.size() != b.size() {
        return Err(Error::shape(
            "evaluate",
            format!("{}×{}×{} vs {}×{}×{}", a.depth, a.height, a.width, b.depth, b.height, b.width),
        ));
    }
    let slices = (0..a.depth)
        .map(|i| SliceMetrics::between(a.slice_data(i), b.slice_data(i), a.size(), params))
        .collect::<Result<_>>()?;
    EvaluationReport::from_slices(slices)
}

/// Translates every source slice and compares it with the target slice at
/// the same index. The identity translator gives the no-transfer baseline.
pub fn evaluate_translation(
    translator: &dyn SliceTranslator,
    source: &Volume,
    target: &Volume,
    params: &SsimParams,
) -> Result<EvaluationReport> {
    if source.depth != target.depth {
        return Err(Error::shape("evaluate", format!("{} source slices vs {} target slices", source.depth, target.depth)));
    }
    let translated = translator.translate_volume(source)?;
    compare_volumes(&translated, target, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_are_normalized_and_symmetric() {
        let taps = SsimParams::default().taps();
        assert_eq!(taps.len(), 11);
        assert!((taps.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..5 {
            assert_eq!(taps[i], taps[10 - i]);
            assert!(taps[i] < taps[i + 1]);
        }
    }

    #[test]
    fn filter_is_valid_mode() {
        let img: Vec<f64> = (0..20).map(f64::from).collect();
        assert_eq!(filter(&img, 4, 5, &[1.0]), img);
        // [0.5, 0.5] averages neighbours along both axes.
        let out = filter(&img, 4, 5, &[0.5, 0.5]);
        assert_eq!(out.len(), 3 * 4);
        assert_eq!(out[0], (0.0 + 1.0 + 5.0 + 6.0) / 4.0);
        assert_eq!(out[11], (13.0 + 14.0 + 18.0 + 19.0) / 4.0);
    }
}
