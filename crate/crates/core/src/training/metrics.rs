//! Pixel metrics over masked and unmasked regions.

use serde::Serialize;

use crate::codec::Video;
use crate::error::{Error, Result};
use crate::mask::PixelMask;

pub const SSIM_WINDOW: usize = 8;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegionMetrics {
    pub mse: f64,
    pub mae: f64,
    /// `+∞` when the region matches exactly.
    pub psnr: f64,
    /// `None` when no full window fits inside the region.
    pub ssim: Option<f64>,
    pub pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EditMetrics {
    pub unmasked: Option<RegionMetrics>,
    pub masked: Option<RegionMetrics>,
}

pub fn psnr(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Formats a PSNR value, spelling the exact-match case as `inf`.
pub fn format_psnr(p: f64) -> String {
    if p.is_infinite() {
        "inf".into()
    } else {
        format!("{p:.4}")
    }
}

fn check(out: &Video, reference: &Video, m: &PixelMask) -> Result<()> {
    if out.dims() != reference.dims() {
        return Err(Error::shape("metrics", format!("{:?} vs {:?}", out.dims(), reference.dims())));
    }
    m.check_video(out)
}

/// Metrics over pixels where the mask equals `inside`.
pub fn region_metrics(out: &Video, reference: &Video, m: &PixelMask, inside: bool) -> Result<RegionMetrics> {
    check(out, reference, m)?;
    let c = out.channels();
    let (mut se, mut ae, mut n) = (0.0, 0.0, 0usize);
    for (k, &bit) in m.bits().iter().enumerate() {
        if bit != inside {
            continue;
        }
        for ch in 0..c {
            let d = (out.data()[k * c + ch] - reference.data()[k * c + ch]) as f64;
            se += d * d;
            ae += d.abs();
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Config(format!("{} region is empty", if inside { "masked" } else { "unmasked" })));
    }
    let count = (n * c) as f64;
    let mse = se / count;
    Ok(RegionMetrics { mse, mae: ae / count, psnr: psnr(mse), ssim: ssim(out, reference, m, inside), pixels: n })
}

/// `unmasked` covers pixels outside `footprint`, the region the edit must not touch;
/// `masked` covers pixels inside `m`.
pub fn edit_metrics(out: &Video, reference: &Video, m: &PixelMask, footprint: &PixelMask) -> Result<EditMetrics> {
    check(out, reference, m)?;
    check(out, reference, footprint)?;
    Ok(EditMetrics {
        unmasked: region_metrics(out, reference, footprint, false).ok(),
        masked: region_metrics(out, reference, m, true).ok(),
    })
}

/// Mean SSIM over 8×8 uniform windows lying entirely in the region, per channel.
pub fn ssim(out: &Video, reference: &Video, m: &PixelMask, inside: bool) -> Option<f64> {
    let (f, h, w, c) = (out.frames(), out.height(), out.width(), out.channels());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return None;
    }
    let nw = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let (mut total, mut count) = (0.0, 0usize);
    for fr in 0..f {
        for y0 in 0..=h - SSIM_WINDOW {
            for x0 in 0..=w - SSIM_WINDOW {
                let valid = (y0..y0 + SSIM_WINDOW).all(|y| (x0..x0 + SSIM_WINDOW).all(|x| m.get(fr, y, x) == inside));
                if !valid {
                    continue;
                }
                for ch in 0..c {
                    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for y in y0..y0 + SSIM_WINDOW {
                        for x in x0..x0 + SSIM_WINDOW {
                            let a = out.pixel(fr, y, x)[ch] as f64;
                            let b = reference.pixel(fr, y, x)[ch] as f64;
                            sa += a;
                            sb += b;
                            saa += a * a;
                            sbb += b * b;
                            sab += a * b;
                        }
                    }
                    let (ma, mb) = (sa / nw, sb / nw);
                    let va = saa / nw - ma * ma;
                    let vb = sbb / nw - mb * mb;
                    let cov = sab / nw - ma * mb;
                    total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
                    count += 1;
                }
            }
        }
    }
    (count > 0).then(|| total / count as f64)
}
