//! PSNR under a 12-bit raw convention, windowed SSIM, blending, and
//! per-cascade evaluation reports.

use std::fmt::{self, Write as _};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cascade::{denoise_chain, CascadeChain};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Peak raw value of a 12-bit image.
pub const RAW_MAX: f64 = 4095.0;
/// Offset from HU to raw values.
pub const RAW_OFFSET: f64 = 1024.0;
/// Display and SSIM window in HU.
pub const WINDOW_HU: (f64, f64) = (-160.0, 240.0);
pub const DEFAULT_BLEND: f64 = 0.7;

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_pair(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<()> {
    a.expect_same_shape(b, "image comparison")
}

fn to_raw(hu: f32) -> f64 {
    (hu as f64 + RAW_OFFSET).clamp(0.0, RAW_MAX)
}

/// Peak signal-to-noise ratio in dB; identical images give +infinity.
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    check_pair(a, b)?;
    if a.is_empty() {
        return Err(Error::shape("psnr of empty images"));
    }
    let se: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (to_raw(x) - to_raw(y)).powi(2))
        .sum();
    let mse = se / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (RAW_MAX * RAW_MAX / mse).log10())
}

fn to_window(hu: f32) -> f64 {
    let (lo, hi) = WINDOW_HU;
    ((hu as f64).clamp(lo, hi) - lo) / (hi - lo)
}

fn gaussian_kernel() -> Vec<f64> {
    let n = 2 * SSIM_RADIUS + 1;
    let raw: Vec<f64> = (0..n)
        .map(|i| {
            let d = i as f64 - SSIM_RADIUS as f64;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian filter over the valid region, (H-10) x (W-10).
fn filter_valid(img: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let n = kernel.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..n).map(|t| kernel[t] * img[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..n).map(|t| kernel[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Mean structural similarity over every 11x11 Gaussian window position
/// fully inside the image, after mapping both images through the display
/// window onto [0, 1]. Expressions are arranged so swapping the arguments
/// gives a bitwise identical result.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    check_pair(a, b)?;
    let (h, w) = (a.height(), a.width());
    let n = 2 * SSIM_RADIUS + 1;
    if a.batch() * a.channels() != 1 || h < n || w < n {
        return Err(Error::shape(format!("ssim needs a single image of at least {n}x{n}")));
    }
    let x: Vec<f64> = a.data().iter().map(|&v| to_window(v)).collect();
    let y: Vec<f64> = b.data().iter().map(|&v| to_window(v)).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let k = gaussian_kernel();
    let (mx, my) = (filter_valid(&x, h, w, &k), filter_valid(&y, h, w, &k));
    let (sxx, syy, sxy) = (
        filter_valid(&xx, h, w, &k),
        filter_valid(&yy, h, w, &k),
        filter_valid(&xy, h, w, &k),
    );
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (m1, m2) = (mx[i], my[i]);
        let cross = m1 * m2;
        let (m1sq, m2sq) = (m1 * m1, m2 * m2);
        let v1 = sxx[i] - m1sq;
        let v2 = syy[i] - m2sq;
        let cov = sxy[i] - cross;
        total += ((2.0 * cross + c1) * (2.0 * cov + c2)) / ((m1sq + m2sq + c1) * (v1 + v2 + c2));
    }
    Ok(total / mx.len() as f64)
}

/// alpha * denoised + (1 - alpha) * low_dose, in HU.
pub fn blend(denoised: &Tensor<f32>, low_dose: &Tensor<f32>, alpha: f64) -> Result<Tensor<f32>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::param(format!("blend fraction {alpha} outside [0, 1]")));
    }
    check_pair(denoised, low_dose)?;
    denoised.zip_map(low_dose, |d, l| (alpha * d as f64 + (1.0 - alpha) * l as f64) as f32)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Original,
    Blended,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Original => "original",
            Variant::Blended => "blended",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    /// 0 denotes the low-dose input itself.
    pub cascade: usize,
    pub psnr_db: f64,
    pub ssim: f64,
    pub n_slices: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: Variant,
    pub blend_alpha: Option<f64>,
    /// One row per cascade, 1..=K.
    pub rows: Vec<EvalRow>,
}

/// Result of [`evaluate_chain`]: the low-dose baseline and both variants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub baseline: EvalRow,
    pub original: EvalReport,
    pub blended: EvalReport,
}

impl Evaluation {
    /// `variant,cascade,psnr_db,ssim,n_slices`, original rows first.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,cascade,psnr_db,ssim,n_slices\n");
        for report in [&self.original, &self.blended] {
            for r in &report.rows {
                let _ = writeln!(s, "{},{},{:.6},{:.6},{}", report.variant, r.cascade, r.psnr_db, r.ssim, r.n_slices);
            }
        }
        s
    }
}

/// Per-slice outputs kept for optional image export.
#[derive(Clone, Debug)]
pub struct SliceOutputs {
    pub patient: usize,
    pub slice: usize,
    pub intermediates: Vec<Tensor<f32>>,
    pub blended: Vec<Tensor<f32>>,
}

struct SliceScores {
    input: (f64, f64),
    original: Vec<(f64, f64)>,
    blended: Vec<(f64, f64)>,
    outputs: Option<SliceOutputs>,
}

fn score(a: &Tensor<f32>, reference: &Tensor<f32>) -> Result<(f64, f64)> {
    Ok((psnr(a, reference)?, ssim(a, reference)?))
}

fn mean_row(cascade: usize, values: impl Iterator<Item = (f64, f64)>) -> EvalRow {
    let (mut p, mut s, mut n) = (0.0, 0.0, 0usize);
    for (a, b) in values {
        p += a;
        s += b;
        n += 1;
    }
    EvalRow {
        cascade,
        psnr_db: p / n as f64,
        ssim: s / n as f64,
        n_slices: n,
    }
}

/// Denoises every test slice and averages PSNR and SSIM against the
/// normal-dose slice per cascade, for raw and blended intermediates. Slices
/// are scored independently and aggregated in manifest order.
pub fn evaluate_chain(
    chain: &CascadeChain,
    dataset: &Dataset,
    alpha: f64,
    keep_outputs: bool,
) -> Result<(Evaluation, Vec<SliceOutputs>)> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::param(format!("blend fraction {alpha} outside [0, 1]")));
    }
    let pairs: Vec<_> = dataset.pairs(Split::Test).collect();
    if pairs.is_empty() {
        return Err(Error::param("dataset has no test slices"));
    }
    let scores: Vec<SliceScores> = pairs
        .par_iter()
        .map(|&(patient, slice, pair)| {
            let (_, intermediates) = denoise_chain(chain, &pair.low)?;
            let blended = intermediates
                .iter()
                .map(|d| blend(d, &pair.low, alpha))
                .collect::<Result<Vec<_>>>()?;
            Ok(SliceScores {
                input: score(&pair.low, &pair.normal)?,
                original: intermediates.iter().map(|d| score(d, &pair.normal)).collect::<Result<_>>()?,
                blended: blended.iter().map(|d| score(d, &pair.normal)).collect::<Result<_>>()?,
                outputs: keep_outputs.then(|| SliceOutputs {
                    patient,
                    slice,
                    intermediates,
                    blended,
                }),
            })
        })
        .collect::<Result<_>>()?;

    let rows = |pick: fn(&SliceScores) -> &Vec<(f64, f64)>| -> Vec<EvalRow> {
        (0..chain.len())
            .map(|k| mean_row(k + 1, scores.iter().map(|s| pick(s)[k])))
            .collect()
    };
    let evaluation = Evaluation {
        baseline: mean_row(0, scores.iter().map(|s| s.input)),
        original: EvalReport {
            variant: Variant::Original,
            blend_alpha: None,
            rows: rows(|s| &s.original),
        },
        blended: EvalReport {
            variant: Variant::Blended,
            blend_alpha: Some(alpha),
            rows: rows(|s| &s.blended),
        },
    };
    let outputs = scores.into_iter().filter_map(|s| s.outputs).collect();
    Ok((evaluation, outputs))
}

/// Maps HU through the [-160, 240] display window onto 0..=255.
pub fn window_to_u8(slice: &Tensor<f32>) -> Vec<u8> {
    slice
        .data()
        .iter()
        .map(|&v| (to_window(v) * 255.0).round() as u8)
        .collect()
}

/// Writes a single-channel HU slice as an 8-bit grayscale PNG.
pub fn export_png(slice: &Tensor<f32>, path: &Path) -> Result<()> {
    if slice.batch() * slice.channels() != 1 {
        return Err(Error::shape("png export takes a single-channel slice"));
    }
    let img = image::GrayImage::from_raw(slice.width() as u32, slice.height() as u32, window_to_u8(slice))
        .ok_or_else(|| Error::shape("pixel buffer does not match the slice extents"))?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn constant(h: usize, w: usize, v: f32) -> Tensor<f32> {
        Tensor::full([1, 1, h, w], v)
    }

    fn noisy(h: usize, w: usize, seed: u64, spread: f32) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new([1, 1, h, w], (0..h * w).map(|_| rng.random_range(-spread..spread)).collect()).unwrap()
    }

    #[test]
    fn psnr_closed_forms() {
        let a = constant(16, 16, 0.0);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        for d in [1.0f32, 64.0, 512.0] {
            let got = psnr(&a, &constant(16, 16, d)).unwrap();
            let want = 20.0 * (4095.0 / d as f64).log10();
            assert!((got - want).abs() <= 0.01, "d={d}: {got} vs {want}");
        }
        assert!((psnr(&a, &constant(16, 16, 64.0)).unwrap() - 36.12).abs() <= 0.01);
        // raw 0 vs raw 4095
        assert!(psnr(&constant(4, 4, -1024.0), &constant(4, 4, 3071.0)).unwrap().abs() < 1e-12);
        assert!(psnr(&a, &constant(4, 4, 0.0)).is_err());
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let a = noisy(20, 24, 1, 300.0);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let got = ssim(&constant(16, 16, 0.0), &constant(16, 16, 100.0)).unwrap();
        let (m1, m2) = (160.0 / 400.0, 260.0 / 400.0);
        let c1 = 0.01f64 * 0.01;
        let want = (2.0 * m1 * m2 + c1) / (m1 * m1 + m2 * m2 + c1);
        assert!((got - want).abs() <= 1e-6, "{got} vs {want}");
    }

    #[test]
    fn ssim_rejects_small_or_mismatched_images() {
        assert!(ssim(&constant(8, 16, 0.0), &constant(8, 16, 0.0)).is_err());
        assert!(ssim(&constant(16, 16, 0.0), &constant(16, 12, 0.0)).is_err());
    }

    #[test]
    fn blend_reference_values() {
        let d = constant(2, 2, 100.0);
        let l = constant(2, 2, 200.0);
        assert_eq!(blend(&d, &l, 0.7).unwrap().data()[0], 130.0);
        assert_eq!(blend(&d, &l, 1.0).unwrap(), d);
        assert_eq!(blend(&d, &l, 0.0).unwrap(), l);
        assert!(blend(&d, &l, 1.2).is_err());
        assert!(blend(&d, &l, -0.1).is_err());
    }

    #[test]
    fn window_mapping_endpoints() {
        let t = Tensor::new([1, 1, 1, 4], vec![-1000.0, -160.0, 40.0, 500.0]).unwrap();
        assert_eq!(window_to_u8(&t), vec![0, 0, 128, 255]);
    }

    #[test]
    fn png_export_round_trips_through_decoder() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.png");
        let t = noisy(9, 7, 3, 300.0);
        export_png(&t, &path).unwrap();
        let back = image::open(&path).unwrap().to_luma8();
        assert_eq!(back.dimensions(), (7, 9));
        assert_eq!(back.into_raw(), window_to_u8(&t));
    }

    proptest! {
        #[test]
        fn ssim_is_bitwise_symmetric(seed in any::<u64>(), spread in 1.0f32..800.0) {
            let a = noisy(14, 17, seed, spread);
            let b = noisy(14, 17, seed ^ 0xabc, spread);
            prop_assert_eq!(ssim(&a, &b).unwrap().to_bits(), ssim(&b, &a).unwrap().to_bits());
            let s = ssim(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
        }

        #[test]
        fn psnr_is_symmetric_and_monotone(seed in any::<u64>(), scale in 1.0f32..4.0) {
            let a = noisy(8, 8, seed, 500.0);
            let diff = noisy(8, 8, seed.wrapping_add(1), 50.0);
            let b = a.add(&diff).unwrap();
            let c = a.add(&diff.scale(scale)).unwrap();
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            prop_assert!(psnr(&a, &c).unwrap() <= psnr(&a, &b).unwrap() + 1e-9);
        }

        #[test]
        fn blend_is_linear(seed in any::<u64>(), alpha in 0.0f64..=1.0) {
            let d = noisy(6, 6, seed, 1000.0);
            let l = noisy(6, 6, seed ^ 1, 1000.0);
            let out = blend(&d, &l, alpha).unwrap();
            for ((o, dv), lv) in out.data().iter().zip(d.data()).zip(l.data()) {
                let lhs = *o as f64 - *lv as f64;
                let rhs = alpha * (*dv as f64 - *lv as f64);
                // exact in f64, then a single f32 rounding of the output
                prop_assert!((lhs - rhs).abs() <= (*o as f64).abs() * f32::EPSILON as f64);
            }
        }
    }
}
