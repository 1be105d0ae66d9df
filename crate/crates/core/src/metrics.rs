//! Scalar evaluation metrics: dissimilarity, attack success rate, L-infinity
//! distance, and SSIM.

use serde::{Deserialize, Serialize};

use crate::authsys::AuthSystem;
use crate::data::Image;
use crate::embedding::FeatureVector;
use crate::error::{Error, Result};

/// SSIM sliding-window side length (uniform window, stride 1).
pub const SSIM_WINDOW: usize = 8;

/// Normalized cosine dissimilarity between unit-norm templates:
/// `(1 - cos_sim) / 2`. 0 for identical, 1 for antipodal.
pub fn dissimilarity(f1: &FeatureVector, f2: &FeatureVector) -> Result<f64> {
    let cos = f1.dot(f2)?;
    Ok(((1.0 - cos) / 2.0).clamp(0.0, 1.0))
}

/// Attack success rate: fraction of adversarial probes the system accepts
/// when claiming their target identity.
pub fn asr(adversarials: &[(Image, String)], system: &AuthSystem) -> Result<f64> {
    if adversarials.is_empty() {
        return Err(Error::invalid("empty adversarial set"));
    }
    let mut accepted = 0usize;
    for (image, identity) in adversarials {
        let (ok, _) = system.verify(identity, image)?;
        if ok {
            accepted += 1;
        }
    }
    Ok(accepted as f64 / adversarials.len() as f64)
}

/// Per-example success fraction against N enrollments of the target user:
/// `(1/N) * sum_i [d(f_adv, f_i) <= tau]`.
pub fn acceptance_fraction(
    f_adv: &FeatureVector,
    enrollments: &[FeatureVector],
    tau: f64,
) -> Result<f64> {
    if enrollments.is_empty() {
        return Err(Error::invalid("empty enrollment set"));
    }
    let mut accepted = 0usize;
    for template in enrollments {
        if dissimilarity(f_adv, template)? <= tau {
            accepted += 1;
        }
    }
    Ok(accepted as f64 / enrollments.len() as f64)
}

/// Maximum absolute pixel difference.
pub fn linf_distance(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(Error::dims(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(a.pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max))
}

/// Mean local SSIM over 8x8 uniform sliding windows (stride 1), stabilizers
/// C1 = (0.01 L)^2 and C2 = (0.03 L)^2 with pixel range L = 1. Multi-channel
/// images are averaged over channels. Value in [-1, 1]; 1 iff identical.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    ssim_windowed(a, b, SSIM_WINDOW)
}

/// SSIM with a configurable uniform window side.
pub fn ssim_windowed(a: &Image, b: &Image, window: usize) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(Error::dims(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let (w, h, c) = a.dims();
    if window == 0 || w < window || h < window {
        return Err(Error::invalid(format!(
            "image {w}x{h} smaller than SSIM window {window}"
        )));
    }

    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let area = (window * window) as f64;

    let mut channel_sum = 0.0;
    for ch in 0..c {
        let plane_a = channel_plane(a, ch);
        let plane_b = channel_plane(b, ch);
        let mut total = 0.0;
        let mut count = 0usize;
        for y0 in 0..=h - window {
            for x0 in 0..=w - window {
                let mut sa = 0.0;
                let mut sb = 0.0;
                let mut saa = 0.0;
                let mut sbb = 0.0;
                let mut sab = 0.0;
                for dy in 0..window {
                    let row = (y0 + dy) * w + x0;
                    for dx in 0..window {
                        let pa = plane_a[row + dx];
                        let pb = plane_b[row + dx];
                        sa += pa;
                        sb += pb;
                        saa += pa * pa;
                        sbb += pb * pb;
                        sab += pa * pb;
                    }
                }
                let ma = sa / area;
                let mb = sb / area;
                let va = saa / area - ma * ma;
                let vb = sbb / area - mb * mb;
                let cov = sab / area - ma * mb;
                let s = ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
                    / ((ma * ma + mb * mb + C1) * (va + vb + C2));
                total += s;
                count += 1;
            }
        }
        channel_sum += total / count as f64;
    }
    Ok(channel_sum / c as f64)
}

fn channel_plane(img: &Image, channel: usize) -> Vec<f64> {
    let c = img.channels();
    img.pixels()
        .iter()
        .skip(channel)
        .step_by(c)
        .copied()
        .collect()
}

/// Table-shaped aggregate for one attack technique.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub technique: String,
    pub tau: f64,
    pub eer: f64,
    pub asr_white: f64,
    pub asr_gray: f64,
    pub mean_dissimilarity: f64,
    pub mean_ssim: f64,
    pub mean_linf: f64,
}
