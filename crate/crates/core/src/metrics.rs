//! Image-quality metrics on real (magnitude) images, optionally restricted
//! to a region.

use serde::{Deserialize, Serialize};

use crate::csm::{fov_support, DEFAULT_FOV_THRESHOLD};
use crate::error::{Error, Result};
use crate::numerics::{ComplexImage, MultiCoilImage};

fn check(test: &[f64], reference: &[f64], region: Option<&[bool]>) -> Result<()> {
    if test.len() != reference.len() {
        return Err(Error::shape(format!("{} vs {} pixels", test.len(), reference.len())));
    }
    if let Some(r) = region {
        if r.len() != reference.len() {
            return Err(Error::shape("region does not match the image"));
        }
        if !r.iter().any(|&v| v) {
            return Err(Error::invalid("empty evaluation region"));
        }
    }
    Ok(())
}

fn in_region(region: Option<&[bool]>, i: usize) -> bool {
    region.map_or(true, |r| r[i])
}

/// Peak of `reference` over the region.
pub fn dynamic_range(reference: &[f64], region: Option<&[bool]>) -> f64 {
    reference
        .iter()
        .enumerate()
        .filter(|&(i, _)| in_region(region, i))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// `10 log10(max(ref)² / mse)` over the region; `+∞` for identical images.
pub fn psnr(test: &[f64], reference: &[f64], region: Option<&[bool]>) -> Result<f64> {
    check(test, reference, region)?;
    let peak = dynamic_range(reference, region);
    if !(peak > 0.0) {
        return Err(Error::invalid("reference is zero over the region"));
    }
    let (mut se, mut n) = (0.0, 0usize);
    for i in (0..test.len()).filter(|&i| in_region(region, i)) {
        se += (test[i] - reference[i]).powi(2);
        n += 1;
    }
    let mse = se / n as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (peak * peak / mse).log10() })
}

/// `‖test − ref‖² / ‖ref‖²` over the region.
pub fn nmse(test: &[f64], reference: &[f64], region: Option<&[bool]>) -> Result<f64> {
    check(test, reference, region)?;
    let (mut num, mut den) = (0.0, 0.0);
    for i in (0..test.len()).filter(|&i| in_region(region, i)) {
        num += (test[i] - reference[i]).powi(2);
        den += reference[i].powi(2);
    }
    if den == 0.0 {
        return Err(Error::invalid("reference is zero over the region"));
    }
    Ok(num / den)
}

/// Mean local SSIM (11×11 Gaussian window, σ = 1.5, K1 = 0.01, K2 = 0.03)
/// over the region, with the dynamic range taken from the reference.
pub fn ssim(test: &[f64], reference: &[f64], height: usize, width: usize, region: Option<&[bool]>) -> Result<f64> {
    check(test, reference, region)?;
    let range = dynamic_range(reference, region);
    ssim_with_range(test, reference, height, width, region, range)
}

/// As [`ssim`] with an explicit dynamic range. Window weights are
/// renormalized where the window leaves the image.
pub fn ssim_with_range(test: &[f64], reference: &[f64], height: usize, width: usize, region: Option<&[bool]>, range: f64) -> Result<f64> {
    check(test, reference, region)?;
    if test.len() != height * width {
        return Err(Error::shape("image size does not match height × width"));
    }
    if !(range > 0.0) {
        return Err(Error::invalid("dynamic range must be positive"));
    }
    const HALF: usize = 5;
    let g: Vec<f64> = (0..=2 * HALF)
        .map(|i| {
            let d = i as f64 - HALF as f64;
            (-d * d / (2.0 * 1.5 * 1.5)).exp()
        })
        .collect();
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let (mut total, mut count) = (0.0, 0usize);
    for r in 0..height {
        for c in 0..width {
            if !in_region(region, r * width + c) {
                continue;
            }
            let (mut sw, mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            for (i, gi) in g.iter().enumerate() {
                let rr = r as isize + i as isize - HALF as isize;
                if rr < 0 || rr >= height as isize {
                    continue;
                }
                for (j, gj) in g.iter().enumerate() {
                    let cc = c as isize + j as isize - HALF as isize;
                    if cc < 0 || cc >= width as isize {
                        continue;
                    }
                    let wgt = gi * gj;
                    let p = rr as usize * width + cc as usize;
                    let (a, b) = (test[p], reference[p]);
                    sw += wgt;
                    mx += wgt * a;
                    my += wgt * b;
                    sxx += wgt * a * a;
                    syy += wgt * b * b;
                    sxy += wgt * a * b;
                }
            }
            let (mx, my) = (mx / sw, my / sw);
            let vx = sxx / sw - mx * mx;
            let vy = syy / sw - my * my;
            let cov = sxy / sw - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Evaluation region for a ground-truth image: the support rule applied to
/// the object itself.
pub fn reference_region(x: &ComplexImage) -> Vec<bool> {
    let single = MultiCoilImage::from_vec(1, x.height(), x.width(), x.data().to_vec()).expect("valid image shape");
    fov_support(&single, DEFAULT_FOV_THRESHOLD)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub psnr: f64,
    pub ssim: f64,
    pub nmse: f64,
}

/// Scores of `recon` against `truth` on magnitudes.
pub fn score(recon: &ComplexImage, truth: &ComplexImage, region: Option<&[bool]>) -> Result<ImageScores> {
    if recon.shape() != truth.shape() {
        return Err(Error::shape("reconstruction and reference differ in shape"));
    }
    let (a, b) = (recon.magnitude(), truth.magnitude());
    Ok(ImageScores {
        psnr: psnr(&a, &b, region)?,
        ssim: ssim(&a, &b, truth.height(), truth.width(), region)?,
        nmse: nmse(&a, &b, region)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Fov,
    Full,
}

/// One table row: mean and sample standard deviation per metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub method: String,
    pub n_cases: usize,
    #[serde(with = "finite_or_inf")]
    pub psnr_mean: f64,
    #[serde(with = "finite_or_inf")]
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub nmse_mean: f64,
    pub nmse_std: f64,
    pub region: Region,
}

impl MetricsSummary {
    pub fn from_scores(method: impl Into<String>, scores: &[ImageScores], region: Region) -> Self {
        let stats = |f: fn(&ImageScores) -> f64| mean_std(&scores.iter().map(f).collect::<Vec<_>>());
        let (psnr_mean, psnr_std) = stats(|s| s.psnr);
        let (ssim_mean, ssim_std) = stats(|s| s.ssim);
        let (nmse_mean, nmse_std) = stats(|s| s.nmse);
        Self {
            method: method.into(),
            n_cases: scores.len(),
            psnr_mean,
            psnr_std,
            ssim_mean,
            ssim_std,
            nmse_mean,
            nmse_std,
            region,
        }
    }

    /// `method  PSNR ± std  SSIM ± std  NMSE ± std`
    pub fn table_row(&self) -> String {
        format!(
            "{:<16} {:>7.2} ± {:<5.2} {:>6.4} ± {:<6.4} {:>8.5} ± {:<8.5}",
            self.method, self.psnr_mean, self.psnr_std, self.ssim_mean, self.ssim_std, self.nmse_mean, self.nmse_std
        )
    }
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 || mean.is_infinite() {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// JSON has no infinity; identical images are written as the string "inf".
mod finite_or_inf {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Either {
            Num(f64),
            Str(String),
        }
        match Either::deserialize(d)? {
            Either::Num(v) => Ok(v),
            Either::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Either::Str(s) => Err(serde::de::Error::custom(format!("expected a number or \"inf\", got {s:?}"))),
        }
    }
}
