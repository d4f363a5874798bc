//! Image quality metrics: MSE, PSNR, SSIM and the UIQM family.
//!
//! Full-reference metrics take an image and its ground truth; UICM, UISM,
//! UIConM and UIQM look at the enhanced image alone. Images are `[3,H,W]`
//! tensors in `[0,1]`.

use std::fmt;

use crate::error::{FusionError, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Normalized 1-D Gaussian taps centred on the middle sample.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let centre = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - centre;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(FusionError::shape(format!(
            "images differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    a.chw()?;
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.len() as f64)
}

/// Peak signal-to-noise ratio; identical images give [`Psnr::Infinite`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Finite(f64),
    Infinite,
}

impl Psnr {
    pub fn from_mse(mse: f64, peak: f64) -> Self {
        if mse == 0.0 {
            Psnr::Infinite
        } else {
            Psnr::Finite(10.0 * (peak * peak / mse).log10())
        }
    }

    /// Decibels, with `f64::INFINITY` standing in for the sentinel.
    pub fn db(self) -> f64 {
        match self {
            Psnr::Finite(v) => v,
            Psnr::Infinite => f64::INFINITY,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Psnr::Infinite)
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Finite(v) => write!(f, "{v:.4}"),
            Psnr::Infinite => f.write_str("inf"),
        }
    }
}

pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<Psnr> {
    Ok(Psnr::from_mse(mse(a, b)?, peak))
}

/// Gaussian filter of one plane over valid window positions.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = 0.0;
            for i in 0..n {
                let row = &plane[(oy + i) * w + ox..(oy + i) * w + ox + n];
                let ri: f64 = row.iter().zip(k).map(|(v, kj)| v * kj).sum();
                acc += k[i] * ri;
            }
            out[oy * ow + ox] = acc;
        }
    }
    out
}

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), dynamic
/// range 1, computed per channel and averaged.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b)?;
    let (c, h, w) = a.chw()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(FusionError::shape(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let k = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (SSIM_K1 * 1.0) * (SSIM_K1 * 1.0);
    let c2 = (SSIM_K2 * 1.0) * (SSIM_K2 * 1.0);
    let plane = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let pa = &a.data()[ch * plane..(ch + 1) * plane];
        let pb = &b.data()[ch * plane..(ch + 1) * plane];
        let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(pb).map(|(x, y)| x * y).collect();
        let mu_a = filter_valid(pa, h, w, &k);
        let mu_b = filter_valid(pb, h, w, &k);
        let e_aa = filter_valid(&aa, h, w, &k);
        let e_bb = filter_valid(&bb, h, w, &k);
        let e_ab = filter_valid(&ab, h, w, &k);
        let mut sum = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = e_aa[i] - ma * ma;
            let var_b = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (var_a + var_b + c2);
            sum += num / den;
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / c as f64)
}

/// Constants of the no-reference underwater quality measure.
#[derive(Debug, Clone, PartialEq)]
pub struct UiqmConstants {
    pub c_uicm: f64,
    pub c_uism: f64,
    pub c_uiconm: f64,
    pub alpha_low: f64,
    pub alpha_high: f64,
    pub uicm_mean_weight: f64,
    pub uicm_spread_weight: f64,
    pub channel_weights: [f64; 3],
    pub block: usize,
    pub log_eps: f64,
}

impl Default for UiqmConstants {
    fn default() -> Self {
        Self {
            c_uicm: 0.0282,
            c_uism: 0.2953,
            c_uiconm: 3.5753,
            alpha_low: 0.1,
            alpha_high: 0.1,
            uicm_mean_weight: -0.0268,
            uicm_spread_weight: 0.1586,
            channel_weights: [0.299, 0.587, 0.114],
            block: 8,
            log_eps: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UiqmScores {
    pub uicm: f64,
    pub uism: f64,
    pub uiconm: f64,
    pub uiqm: f64,
}

/// Asymmetric alpha-trimmed mean.
fn trimmed_mean(values: &mut [f64], alpha_low: f64, alpha_high: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let k = values.len();
    let lo = (alpha_low * k as f64).ceil() as usize;
    let hi = (alpha_high * k as f64).floor() as usize;
    let kept = &values[lo.min(k)..k.saturating_sub(hi).max(lo.min(k))];
    if kept.is_empty() {
        return values.iter().sum::<f64>() / k as f64;
    }
    kept.iter().sum::<f64>() / kept.len() as f64
}

fn uicm(r: &[f64], g: &[f64], b: &[f64], k: &UiqmConstants) -> f64 {
    let mut rg: Vec<f64> = r.iter().zip(g).map(|(r, g)| r - g).collect();
    let mut yb: Vec<f64> = r
        .iter()
        .zip(g)
        .zip(b)
        .map(|((r, g), b)| (r + g) / 2.0 - b)
        .collect();
    let spread = |v: &[f64], mu: f64| v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / v.len() as f64;
    let mu_rg = trimmed_mean(&mut rg, k.alpha_low, k.alpha_high);
    let mu_yb = trimmed_mean(&mut yb, k.alpha_low, k.alpha_high);
    let var_rg = spread(&rg, mu_rg);
    let var_yb = spread(&yb, mu_yb);
    k.uicm_mean_weight * (mu_rg * mu_rg + mu_yb * mu_yb).sqrt()
        + k.uicm_spread_weight * (var_rg + var_yb).sqrt()
}

/// Sobel gradient magnitude with replicated borders.
fn sobel_magnitude(p: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        p[y * w + x]
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            out[y as usize * w + x as usize] = gx.hypot(gy);
        }
    }
    out
}

/// Iterates `(min, max)` over non-overlapping `block x block` tiles of one
/// or more planes; trailing partial tiles are dropped.
fn block_extrema(planes: &[&[f64]], h: usize, w: usize, block: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for by in 0..h / block {
        for bx in 0..w / block {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for p in planes {
                for y in by * block..(by + 1) * block {
                    for &v in &p[y * w + bx * block..y * w + (bx + 1) * block] {
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
            }
            out.push((lo, hi));
        }
    }
    out
}

/// Measure of enhancement over blocks; flat blocks contribute zero.
fn eme(plane: &[f64], h: usize, w: usize, k: &UiqmConstants) -> f64 {
    let blocks = block_extrema(&[plane], h, w, k.block);
    let sum: f64 = blocks
        .iter()
        .map(|&(lo, hi)| {
            if hi <= lo {
                0.0
            } else {
                ((hi + k.log_eps) / (lo + k.log_eps)).ln()
            }
        })
        .sum();
    2.0 * sum / blocks.len() as f64
}

fn uism(channels: [&[f64]; 3], h: usize, w: usize, k: &UiqmConstants) -> f64 {
    channels
        .iter()
        .zip(k.channel_weights)
        .map(|(p, weight)| {
            let edges = sobel_magnitude(p, h, w);
            let edge_map: Vec<f64> = edges.iter().zip(p.iter()).map(|(e, v)| e * v).collect();
            weight * eme(&edge_map, h, w, k)
        })
        .sum()
}

/// Log-AMEE contrast over blocks spanning all three channels.
fn uiconm(channels: [&[f64]; 3], h: usize, w: usize, k: &UiqmConstants) -> f64 {
    let blocks = block_extrema(&channels, h, w, k.block);
    let sum: f64 = blocks
        .iter()
        .map(|&(lo, hi)| {
            let top = hi - lo;
            let bot = hi + lo;
            if top <= 0.0 || bot <= 0.0 {
                0.0
            } else {
                let ratio = top / bot;
                ratio * (ratio + k.log_eps).ln()
            }
        })
        .sum();
    -sum / blocks.len() as f64
}

pub fn uiqm(img: &Tensor) -> Result<UiqmScores> {
    uiqm_with(img, &UiqmConstants::default())
}

/// No-reference quality scores on the 8-bit intensity scale.
pub fn uiqm_with(img: &Tensor, k: &UiqmConstants) -> Result<UiqmScores> {
    let (c, h, w) = img.chw()?;
    if c != 3 {
        return Err(FusionError::shape(format!("uiqm needs an RGB image, got {c} channels")));
    }
    if h < k.block || w < k.block {
        return Err(FusionError::shape(format!(
            "uiqm needs at least {0}x{0} pixels, got {h}x{w}",
            k.block
        )));
    }
    let scaled: Vec<f64> = img.data().iter().map(|v| v * 255.0).collect();
    let plane = h * w;
    let (r, rest) = scaled.split_at(plane);
    let (g, b) = rest.split_at(plane);
    let uicm = uicm(r, g, b, k);
    let uism = uism([r, g, b], h, w, k);
    let uiconm = uiconm([r, g, b], h, w, k);
    let uiqm = k.c_uicm * uicm + k.c_uism * uism + k.c_uiconm * uiconm;
    Ok(UiqmScores {
        uicm,
        uism,
        uiconm,
        uiqm,
    })
}

/// Scores for one image; full-reference fields are empty without a ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub path: String,
    pub mse: Option<f64>,
    pub psnr: Option<Psnr>,
    pub ssim: Option<f64>,
    pub scores: UiqmScores,
}

impl MetricRecord {
    pub fn evaluate(path: impl Into<String>, enhanced: &Tensor, reference: Option<&Tensor>) -> Result<Self> {
        let (mse_v, psnr_v, ssim_v) = match reference {
            Some(r) => {
                let m = mse(enhanced, r)?;
                (Some(m), Some(Psnr::from_mse(m, 1.0)), Some(ssim(enhanced, r)?))
            }
            None => (None, None, None),
        };
        Ok(Self {
            path: path.into(),
            mse: mse_v,
            psnr: psnr_v,
            ssim: ssim_v,
            scores: uiqm(enhanced)?,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub records: Vec<MetricRecord>,
}

/// Arithmetic means over a report.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSummary {
    pub count: usize,
    pub mse: Option<f64>,
    pub psnr: Option<Psnr>,
    pub ssim: Option<f64>,
    pub uicm: f64,
    pub uism: f64,
    pub uiconm: f64,
    pub uiqm: f64,
}

fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn opt_mean(values: Vec<Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.into_iter().collect();
    v.filter(|v| !v.is_empty()).map(|v| mean_of(v.into_iter()))
}

impl MetricReport {
    pub fn push(&mut self, record: MetricRecord) {
        self.records.push(record);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn summary(&self) -> MetricSummary {
        let psnr = {
            let all: Option<Vec<Psnr>> = self.records.iter().map(|r| r.psnr).collect();
            all.filter(|v| !v.is_empty()).map(|v| {
                if v.iter().any(|p| p.is_infinite()) {
                    Psnr::Infinite
                } else {
                    Psnr::Finite(mean_of(v.iter().map(|p| p.db())))
                }
            })
        };
        MetricSummary {
            count: self.records.len(),
            mse: opt_mean(self.records.iter().map(|r| r.mse).collect()),
            psnr,
            ssim: opt_mean(self.records.iter().map(|r| r.ssim).collect()),
            uicm: mean_of(self.records.iter().map(|r| r.scores.uicm)),
            uism: mean_of(self.records.iter().map(|r| r.scores.uism)),
            uiconm: mean_of(self.records.iter().map(|r| r.scores.uiconm)),
            uiqm: mean_of(self.records.iter().map(|r| r.scores.uiqm)),
        }
    }

    pub const CSV_HEADER: &'static str = "path,mse,psnr_db,ssim,uicm,uism,uiconm,uiqm";

    /// CSV with one row per image. Missing full-reference values are empty
    /// fields; infinite PSNR is written as `inf`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let opt = |v: Option<f64>| v.map(|v| format!("{v:.8}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
                r.path,
                opt(r.mse),
                r.psnr.map(|p| p.to_string()).unwrap_or_default(),
                opt(r.ssim),
                r.scores.uicm,
                r.scores.uism,
                r.scores.uiconm,
                r.scores.uiqm
            ));
        }
        out
    }

    pub fn summary_text(&self) -> String {
        let s = self.summary();
        let mut out = format!("images: {}\n", s.count);
        if let (Some(m), Some(p), Some(ss)) = (s.mse, s.psnr, s.ssim) {
            out.push_str("full-reference:\n");
            out.push_str(&format!("  mse   {m:.6}\n  psnr  {p} dB\n  ssim  {ss:.4}\n"));
        }
        out.push_str("no-reference:\n");
        out.push_str(&format!(
            "  uicm  {:.4}\n  uism  {:.4}\n  uiconm {:.4}\n  uiqm  {:.4}\n",
            s.uicm, s.uism, s.uiconm, s.uiqm
        ));
        out
    }
}
