//! Ellipse phantoms. Coordinates are normalized so that the field of view
//! spans [-1, 1] on both axes, with +y pointing up.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Grid, MU_WATER};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    /// Semi-axis along the (rotated) x direction.
    pub a: f64,
    pub b: f64,
    /// Rotation in radians, counter-clockwise.
    pub angle: f64,
    /// Attenuation added inside the ellipse, 1/mm.
    pub delta_mu: f64,
}

impl Ellipse {
    pub fn contains(&self, u: f64, v: f64) -> bool {
        let (du, dv) = (u - self.cx, v - self.cy);
        let (s, c) = self.angle.sin_cos();
        let x = du * c + dv * s;
        let y = -du * s + dv * c;
        (x / self.a).powi(2) + (y / self.b).powi(2) <= 1.0
    }

    fn circle(cx: f64, cy: f64, r: f64, delta_mu: f64) -> Self {
        Self {
            cx,
            cy,
            a: r,
            b: r,
            angle: 0.0,
            delta_mu,
        }
    }
}

fn hu_delta(hu: f64, mu_water: f64) -> f64 {
    hu / 1000.0 * mu_water
}

/// What a generated phantom may contain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub body: bool,
    pub organs: bool,
    pub max_lesions: usize,
    /// Band for |delta_mu / mu_water| of lesions.
    pub lesion_contrast: (f64, f64),
    pub mu_water: f64,
}

impl PhantomSpec {
    /// Nothing at all; rasterizes to an all-zero map.
    pub fn empty() -> Self {
        Self {
            body: false,
            organs: false,
            max_lesions: 0,
            lesion_contrast: (0.01, 0.05),
            mu_water: MU_WATER,
        }
    }

    /// Abdominal cross-section: body, organs, and 0-3 liver lesions.
    pub fn abdomen() -> Self {
        Self {
            body: true,
            organs: true,
            max_lesions: 3,
            lesion_contrast: (0.01, 0.05),
            mu_water: MU_WATER,
        }
    }
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self::abdomen()
    }
}

#[derive(Clone, Debug)]
pub struct Phantom {
    /// Attenuation map in 1/mm.
    pub attenuation: Grid,
    pub pixel_spacing_mm: f64,
    pub ellipses: Vec<Ellipse>,
    pub lesions: Vec<Ellipse>,
}

impl Phantom {
    /// Point-samples the summed ellipses at pixel centres, clamped at zero.
    pub fn rasterize(size: usize, pixel_spacing_mm: f64, ellipses: Vec<Ellipse>, lesions: Vec<Ellipse>) -> Self {
        let mut grid = Grid::zeros(size, size);
        let n = size as f64;
        for i in 0..size {
            let v = 1.0 - 2.0 * (i as f64 + 0.5) / n;
            for j in 0..size {
                let u = 2.0 * (j as f64 + 0.5) / n - 1.0;
                let mu: f64 = ellipses
                    .iter()
                    .chain(&lesions)
                    .filter(|e| e.contains(u, v))
                    .map(|e| e.delta_mu)
                    .sum();
                grid.set(i, j, mu.max(0.0));
            }
        }
        Self {
            attenuation: grid,
            pixel_spacing_mm,
            ellipses,
            lesions,
        }
    }
}

/// Modified Shepp-Logan head phantom, scaled so the brain matter equals
/// water attenuation.
pub fn head_phantom(size: usize, pixel_spacing_mm: f64) -> Phantom {
    let scale = MU_WATER / 0.2;
    #[rustfmt::skip]
    let table: [(f64, f64, f64, f64, f64, f64); 10] = [
        (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
        (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
        (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
        (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
        (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
        (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
        (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
        (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
        (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
        (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
    ];
    let ellipses = table
        .iter()
        .map(|&(v, a, b, cx, cy, deg)| Ellipse {
            cx,
            cy,
            a,
            b,
            angle: deg * PI / 180.0,
            delta_mu: v * scale,
        })
        .collect();
    Phantom::rasterize(size, pixel_spacing_mm, ellipses, Vec::new())
}

/// Pixels well inside the head phantom's skull: the brain ellipse shrunk
/// to 80% of its squared radius.
pub fn head_interior_mask(size: usize) -> Vec<bool> {
    let brain = Ellipse {
        cx: 0.0,
        cy: -0.0184,
        a: 0.6624 * 0.8f64.sqrt(),
        b: 0.874 * 0.8f64.sqrt(),
        angle: 0.0,
        delta_mu: 0.0,
    };
    let n = size as f64;
    let mut mask = Vec::with_capacity(size * size);
    for i in 0..size {
        let v = 1.0 - 2.0 * (i as f64 + 0.5) / n;
        for j in 0..size {
            mask.push(brain.contains(2.0 * (j as f64 + 0.5) / n - 1.0, v));
        }
    }
    mask
}

#[derive(Clone, Debug)]
struct Part {
    base: Ellipse,
    /// Relative axis modulation amplitude along z.
    wobble: f64,
    phase: f64,
    /// Centre drift along z in normalized units.
    drift: (f64, f64),
    /// Lesions exist only within |z - z0| < half_extent.
    z_extent: Option<(f64, f64)>,
    lesion: bool,
}

/// A patient: ellipse parts whose size and position vary smoothly with the
/// axial coordinate `z` in [0, 1].
#[derive(Clone, Debug)]
pub struct Anatomy {
    parts: Vec<Part>,
}

impl Anatomy {
    pub fn sample<R: Rng + ?Sized>(spec: &PhantomSpec, rng: &mut R) -> Self {
        let mw = spec.mu_water;
        let mut parts = Vec::new();
        let mut push = |rng: &mut R, base: Ellipse, wobble: f64| {
            parts.push(Part {
                base,
                wobble: rng.random_range(0.0..wobble),
                phase: rng.random_range(0.0..2.0 * PI),
                drift: (rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03)),
                z_extent: None,
                lesion: false,
            });
        };
        if spec.body {
            let a = rng.random_range(0.78..0.9);
            let b = rng.random_range(0.55..0.7);
            // subcutaneous fat shell, then soft tissue
            push(rng, Ellipse { cx: 0.0, cy: 0.0, a, b, angle: 0.0, delta_mu: mw * 0.9 }, 0.04);
            let inner = rng.random_range(0.86..0.92);
            push(rng, Ellipse { cx: 0.0, cy: -0.01, a: a * inner, b: b * inner, angle: 0.0, delta_mu: hu_delta(140.0, mw) }, 0.04);
        }
        let liver = Ellipse {
            cx: rng.random_range(-0.35..-0.22),
            cy: rng.random_range(0.02..0.15),
            a: rng.random_range(0.28..0.38),
            b: rng.random_range(0.22..0.32),
            angle: rng.random_range(-0.35..0.35),
            delta_mu: hu_delta(rng.random_range(15.0..30.0), mw),
        };
        if spec.organs {
            push(rng, liver, 0.15);
            let spleen = Ellipse {
                cx: rng.random_range(0.38..0.5),
                cy: rng.random_range(0.0..0.15),
                a: rng.random_range(0.08..0.13),
                b: rng.random_range(0.12..0.18),
                angle: rng.random_range(-0.5..0.5),
                delta_mu: hu_delta(rng.random_range(5.0..15.0), mw),
            };
            push(rng, spleen, 0.2);
            for side in [-1.0, 1.0] {
                let kidney = Ellipse {
                    cx: side * rng.random_range(0.22..0.3),
                    cy: rng.random_range(-0.3..-0.2),
                    a: rng.random_range(0.06..0.09),
                    b: rng.random_range(0.1..0.14),
                    angle: side * rng.random_range(0.1..0.4),
                    delta_mu: hu_delta(rng.random_range(20.0..40.0), mw),
                };
                push(rng, kidney, 0.25);
            }
            let spine_y = rng.random_range(-0.5..-0.42);
            push(rng, Ellipse::circle(0.0, spine_y, 0.09, hu_delta(660.0, mw)), 0.05);
            push(rng, Ellipse::circle(0.0, spine_y, 0.05, hu_delta(-400.0, mw)), 0.05);
            let aorta_x = rng.random_range(-0.08..0.0);
            push(rng, Ellipse::circle(aorta_x, -0.28, 0.045, hu_delta(10.0, mw)), 0.05);
            if rng.random_bool(0.5) {
                // bowel gas pocket
                let gas = Ellipse {
                    cx: rng.random_range(0.05..0.3),
                    cy: rng.random_range(0.2..0.4),
                    a: rng.random_range(0.04..0.08),
                    b: rng.random_range(0.03..0.06),
                    angle: rng.random_range(0.0..PI),
                    delta_mu: hu_delta(-1040.0, mw),
                };
                push(rng, gas, 0.3);
            }
        }
        let n_lesions = if spec.max_lesions > 0 {
            rng.random_range(0..=spec.max_lesions)
        } else {
            0
        };
        let (lo, hi) = spec.lesion_contrast;
        for _ in 0..n_lesions {
            let r: f64 = rng.random_range(0.0..0.6);
            let t: f64 = rng.random_range(0.0..2.0 * PI);
            let contrast = rng.random_range(lo..=hi) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let radius = rng.random_range(0.03..0.07);
            let z0 = rng.random_range(0.2..0.8);
            parts.push(Part {
                base: Ellipse::circle(
                    liver.cx + r * liver.a * t.cos(),
                    liver.cy + r * liver.b * t.sin(),
                    radius,
                    contrast * mw,
                ),
                wobble: 0.0,
                phase: 0.0,
                drift: (0.0, 0.0),
                z_extent: Some((z0, rng.random_range(0.1..0.3))),
                lesion: true,
            });
        }
        Self { parts }
    }

    /// Ellipses of the axial slice at `z` in [0, 1]: (anatomy, lesions).
    pub fn slice(&self, z: f64) -> (Vec<Ellipse>, Vec<Ellipse>) {
        let mut anatomy = Vec::new();
        let mut lesions = Vec::new();
        for p in &self.parts {
            let mut e = p.base;
            if let Some((z0, half)) = p.z_extent {
                let d = (z - z0) / half;
                if d.abs() >= 1.0 {
                    continue;
                }
                let s = (1.0 - d * d).sqrt();
                e.a *= s;
                e.b *= s;
            } else {
                let k = 1.0 + p.wobble * (2.0 * PI * z + p.phase).sin();
                e.a *= k;
                e.b *= k;
                e.cx += p.drift.0 * (z - 0.5);
                e.cy += p.drift.1 * (z - 0.5);
            }
            if p.lesion {
                lesions.push(e);
            } else {
                anatomy.push(e);
            }
        }
        (anatomy, lesions)
    }
}

/// A single random phantom slice (the middle of a freshly sampled anatomy).
pub fn make_phantom<R: Rng + ?Sized>(size: usize, pixel_spacing_mm: f64, rng: &mut R, spec: &PhantomSpec) -> Phantom {
    let anatomy = Anatomy::sample(spec, rng);
    let (ellipses, lesions) = anatomy.slice(0.5);
    Phantom::rasterize(size, pixel_spacing_mm, ellipses, lesions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn same_seed_same_phantom() {
        let a = make_phantom(64, 5.0, &mut ChaCha8Rng::seed_from_u64(4), &PhantomSpec::abdomen());
        let b = make_phantom(64, 5.0, &mut ChaCha8Rng::seed_from_u64(4), &PhantomSpec::abdomen());
        assert_eq!(a.attenuation, b.attenuation);
    }

    #[test]
    fn empty_spec_is_all_zero() {
        let p = make_phantom(32, 1.0, &mut ChaCha8Rng::seed_from_u64(0), &PhantomSpec::empty());
        assert!(p.attenuation.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lesion_contrast_stays_in_band() {
        let spec = PhantomSpec::abdomen();
        let mut seen = 0;
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let anatomy = Anatomy::sample(&spec, &mut rng);
            for z in [0.2, 0.35, 0.5, 0.65, 0.8] {
                for l in anatomy.slice(z).1 {
                    let c = (l.delta_mu / spec.mu_water).abs();
                    assert!((0.01..=0.05 + 1e-12).contains(&c), "seed {seed}: contrast {c}");
                    seen += 1;
                }
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn attenuation_is_non_negative() {
        for seed in 0..20 {
            let p = make_phantom(48, 6.0, &mut ChaCha8Rng::seed_from_u64(seed), &PhantomSpec::abdomen());
            assert!(p.attenuation.data.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn anatomy_varies_smoothly() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let anatomy = Anatomy::sample(&PhantomSpec { max_lesions: 0, ..PhantomSpec::abdomen() }, &mut rng);
        let a = Phantom::rasterize(64, 5.0, anatomy.slice(0.50).0, vec![]);
        let b = Phantom::rasterize(64, 5.0, anatomy.slice(0.51).0, vec![]);
        let changed = a.attenuation.data.iter().zip(&b.attenuation.data).filter(|(x, y)| x != y).count();
        assert!(changed < 64 * 64 / 20, "{changed} pixels changed between adjacent slices");
    }

    #[test]
    fn head_phantom_brain_is_water() {
        let p = head_phantom(128, 1.0);
        let centre = p.attenuation.get(64, 64);
        assert!((centre - MU_WATER).abs() < 1e-12, "{centre}");
    }
}
