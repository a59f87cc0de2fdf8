//! Procedural face images with analytic 68-point landmarks, region-local
//! forgeries, and the evaluation perturbations.
//!
//! Everything here is a pure function of its seed. Geometry is defined in
//! normalised `[0, 1]` coordinates and rasterised at any square size, with
//! pixel `(x, y)` sampled at `(x/S, y/S)`.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{read_ppm, write_ppm};
use crate::mask::{self, parse_landmarks, region_groups, render_gaussian_masks, write_landmarks, LandmarkSet};
use crate::numerics::{sigmoid, Tensor};
use crate::par;

/// Mask value above which a pixel belongs to a region's support.
pub const SUPPORT_LEVEL: f64 = 0.1;
const SIGMA_SCALE: f64 = 0.25;

/// SplitMix64 step; derives independent per-item seeds.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub image: Tensor,
    pub landmarks: LandmarkSet,
    /// `true` for fake.
    pub label: bool,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
}

impl Ellipse {
    /// Approximate signed distance, negative inside.
    fn sdf(&self, x: f64, y: f64) -> f64 {
        let f = ((x - self.cx) / self.a).powi(2) + ((y - self.cy) / self.b).powi(2);
        (f.sqrt() - 1.0) * self.a.min(self.b)
    }

    fn at(&self, angle: f64, shrink: f64) -> (f64, f64) {
        (self.cx + shrink * self.a * angle.cos(), self.cy + shrink * self.b * angle.sin())
    }

    fn scaled(&self, s: f64) -> Self {
        Self {
            a: self.a * s,
            b: self.b * s,
            ..*self
        }
    }
}

/// Parametric face layout in normalised coordinates.
#[derive(Clone, Debug)]
struct Face {
    face: Ellipse,
    eyes: [Ellipse; 2],
    iris: f64,
    /// Darkening of the skin around each eye.
    eye_shadow: [f64; 2],
    brows: [[(f64, f64); 5]; 2],
    brow_width: f64,
    nose_top: (f64, f64),
    nose_base: [(f64, f64); 5],
    mouth: Ellipse,
    inner: Ellipse,
    skin: [f64; 3],
    background: [[f64; 3]; 2],
    hair: [f64; 3],
    iris_color: [f64; 3],
    lips: [f64; 3],
    noise_seed: u64,
}

fn coverage(sdf: f64, px: f64) -> f64 {
    (0.5 - sdf / px).clamp(0.0, 1.0)
}

fn mix(dst: &mut [f64; 3], src: [f64; 3], alpha: f64) {
    for c in 0..3 {
        dst[c] += alpha * (src[c] - dst[c]);
    }
}

fn seg_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

fn in_triangle(p: (f64, f64), a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> bool {
    let s = |u: (f64, f64), v: (f64, f64)| (v.0 - u.0) * (p.1 - u.1) - (v.1 - u.1) * (p.0 - u.0);
    let (d1, d2, d3) = (s(a, b), s(b, c), s(c, a));
    !((d1 < 0.0 || d2 < 0.0 || d3 < 0.0) && (d1 > 0.0 || d2 > 0.0 || d3 > 0.0))
}

impl Face {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let (cx, cy) = (0.5 + u(-0.03, 0.03), 0.52 + u(-0.03, 0.03));
        let face = Ellipse {
            cx,
            cy,
            a: u(0.31, 0.36),
            b: u(0.39, 0.44),
        };
        let eye_y = cy - u(0.09, 0.12);
        let eye_dx = u(0.13, 0.16);
        let (ea, eb) = (u(0.055, 0.07), u(0.026, 0.034));
        let eyes = [-1.0, 1.0].map(|s| Ellipse {
            cx: cx + s * eye_dx,
            cy: eye_y,
            a: ea,
            b: eb,
        });
        let brow_y = eye_y - u(0.07, 0.09);
        let arch = u(0.01, 0.025);
        let brows = eyes.map(|e| {
            let mut pts = [(0.0, 0.0); 5];
            for (i, p) in pts.iter_mut().enumerate() {
                let t = i as f64 / 4.0 - 0.5;
                *p = (e.cx + 2.4 * e.a * t, brow_y - arch * (1.0 - 4.0 * t * t));
            }
            pts
        });
        let nose_y = cy + u(0.06, 0.09);
        let nose_w = u(0.045, 0.06);
        let mut nose_base = [(0.0, 0.0); 5];
        for (i, p) in nose_base.iter_mut().enumerate() {
            let t = i as f64 / 4.0 - 0.5;
            *p = (cx + 2.0 * nose_w * t, nose_y + 0.012 * (1.0 - 4.0 * t * t));
        }
        let mouth = Ellipse {
            cx,
            cy: cy + u(0.19, 0.23),
            a: u(0.09, 0.12),
            b: u(0.03, 0.042),
        };
        let inner = Ellipse {
            a: mouth.a * 0.7,
            b: mouth.b * 0.4,
            ..mouth
        };
        let tone = u(0.55, 0.75);
        let skin = [tone, tone * u(0.72, 0.85), tone * u(0.55, 0.7)];
        let g = u(0.35, 0.65);
        let bg = [g + u(-0.05, 0.05), g + u(-0.05, 0.05), g + u(-0.05, 0.05)];
        let bg2 = bg.map(|v| (v + u(-0.08, 0.08)).clamp(0.0, 1.0));
        let h = u(0.1, 0.25);
        Self {
            face,
            eyes,
            iris: u(0.45, 0.6),
            eye_shadow: [0.0; 2],
            brows,
            brow_width: u(0.009, 0.014),
            nose_top: (cx, eye_y + 0.02),
            nose_base,
            mouth,
            inner,
            skin,
            background: [bg, bg2],
            hair: [h, h * 0.8, h * 0.6],
            iris_color: [u(0.1, 0.2), u(0.08, 0.18), u(0.08, 0.18)],
            lips: [u(0.6, 0.75), u(0.24, 0.32), u(0.24, 0.32)],
            noise_seed: rng.random(),
        }
    }

    fn render(&self, size: usize) -> Tensor {
        let px = 1.0 / size as f64;
        let noise = Normal::new(0.0, 0.01).expect("valid sigma");
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
        let mut data = Vec::with_capacity(size * size * 3);
        for yi in 0..size {
            for xi in 0..size {
                let (x, y) = (xi as f64 * px, yi as f64 * px);
                let mut c = self.background[0];
                mix(&mut c, self.background[1], y);

                let f = &self.face;
                let r2 = ((x - f.cx) / f.a).powi(2) + ((y - f.cy) / f.b).powi(2);
                let shade = 1.0 - 0.2 * r2.min(1.0) + 0.05 * (f.cx - x);
                mix(&mut c, self.skin.map(|v| v * shade), coverage(f.sdf(x, y), px));

                if in_triangle((x, y), self.nose_top, self.nose_base[0], self.nose_base[4]) {
                    mix(&mut c, self.skin.map(|v| v * 0.82), 0.8);
                }
                for i in 0..4 {
                    let d = seg_dist((x, y), self.nose_base[i], self.nose_base[i + 1]);
                    mix(&mut c, self.skin.map(|v| v * 0.6), coverage(d - 0.006, px));
                }
                for brow in &self.brows {
                    for i in 0..4 {
                        let d = seg_dist((x, y), brow[i], brow[i + 1]);
                        mix(&mut c, self.hair, coverage(d - self.brow_width, px));
                    }
                }
                for (eye, &shadow) in self.eyes.iter().zip(&self.eye_shadow) {
                    if shadow > 0.0 {
                        let dark = c.map(|v| v * (1.0 - shadow));
                        mix(&mut c, dark, coverage(eye.scaled(1.7).sdf(x, y), px));
                    }
                    mix(&mut c, [0.95, 0.94, 0.92], coverage(eye.sdf(x, y), px));
                    let iris = Ellipse {
                        a: eye.b * 1.1,
                        b: eye.b * 1.1,
                        ..*eye
                    };
                    let clip = coverage(eye.sdf(x, y), px);
                    mix(&mut c, self.iris_color, clip * coverage(iris.sdf(x, y), px) * self.iris / 0.5);
                }
                mix(&mut c, self.lips, coverage(self.mouth.sdf(x, y), px));
                mix(&mut c, self.lips.map(|v| v * 0.35), coverage(self.inner.sdf(x, y), px));

                for v in c {
                    data.push((v + noise.sample(&mut rng)).clamp(0.0, 1.0));
                }
            }
        }
        Tensor::new(vec![size, size, 3], data).expect("image shape")
    }

    /// The 68 points in the standard ordering, in pixels.
    fn landmarks(&self, size: usize) -> Result<LandmarkSet> {
        let s = size as f64;
        let mut pts = Vec::with_capacity(mask::NUM_LANDMARKS);
        for i in 0..17 {
            pts.push(self.face.at(PI - PI * i as f64 / 16.0, 0.97));
        }
        for brow in &self.brows {
            pts.extend_from_slice(brow);
        }
        for i in 0..4 {
            let t = i as f64 / 3.0;
            let (top, tip) = (self.nose_top, self.nose_base[2]);
            pts.push((top.0, top.1 + t * (tip.1 - 0.012 - top.1)));
        }
        pts.extend_from_slice(&self.nose_base);
        for eye in &self.eyes {
            for k in 0..6 {
                pts.push(eye.at(PI + TAU * k as f64 / 6.0, 0.95));
            }
        }
        for k in 0..12 {
            pts.push(self.mouth.at(PI + TAU * k as f64 / 12.0, 0.95));
        }
        for k in 0..8 {
            pts.push(self.inner.at(PI + TAU * k as f64 / 8.0, 0.95));
        }
        LandmarkSet::new(pts.into_iter().map(|(x, y)| (x * s, y * s)).collect(), size, size)
    }
}

/// A real face.
pub fn gen_face(seed: u64, size: usize) -> Result<SampleRecord> {
    let face = Face::sample(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(SampleRecord {
        image: face.render(size),
        landmarks: face.landmarks(size)?,
        label: false,
        seed,
    })
}

/// Region-local forgery types.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Artifact {
    EyeAsymmetry,
    TextureShift,
    BlendSeam,
    BrightnessStep,
}

impl Artifact {
    pub const ALL: [Artifact; 4] = [
        Artifact::EyeAsymmetry,
        Artifact::TextureShift,
        Artifact::BlendSeam,
        Artifact::BrightnessStep,
    ];
}

/// Which region channels (by index) an artifact may touch, and the edit.
struct Edit {
    regions: Vec<usize>,
    pixels: Tensor,
}

fn support(lm: &LandmarkSet, regions: &[usize]) -> Vec<bool> {
    let stack = render_gaussian_masks(lm, &region_groups(), SIGMA_SCALE);
    let n = stack.height() * stack.width();
    (0..n)
        .map(|i| regions.iter().any(|&k| stack.channel(k)[i] > SUPPORT_LEVEL))
        .collect()
}

fn apply_edit(image: &mut Tensor, lm: &LandmarkSet, edit: &Edit) {
    let keep = support(lm, &edit.regions);
    for (i, &inside) in keep.iter().enumerate() {
        if inside {
            for c in 0..3 {
                image.data_mut()[3 * i + c] = edit.pixels.data()[3 * i + c].clamp(0.0, 1.0);
            }
        }
    }
}

fn artifact_edit(kind: Artifact, face: &Face, image: &Tensor, size: usize, rng: &mut ChaCha8Rng) -> Edit {
    let s = size as f64;
    match kind {
        Artifact::EyeAsymmetry => {
            let side = rng.random_range(0..2);
            let scale = rng.random_range(1.1..1.3);
            let mut altered = face.clone();
            altered.eyes[side] = face.eyes[side].scaled(scale);
            altered.iris *= rng.random_range(1.3..1.6);
            let tint = rng.random_range(0.45..0.6);
            altered.iris_color = face.iris_color.map(|c| c + tint);
            altered.eye_shadow[side] = rng.random_range(0.4..0.55);
            Edit {
                regions: vec![[mask::LEFT_EYE, mask::RIGHT_EYE][side]],
                pixels: altered.render(size),
            }
        }
        Artifact::TextureShift => {
            let k = [mask::NOSE, mask::OUTER_MOUTH][rng.random_range(0..2)];
            let sigma = rng.random_range(0.3..0.4);
            let shift: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.3) * if rng.random_bool(0.5) { 1.0 } else { -1.0 });
            let noise = Normal::new(0.0, sigma).expect("valid sigma");
            let mut px = image.clone();
            for (i, v) in px.data_mut().iter_mut().enumerate() {
                *v += shift[i % 3] + noise.sample(rng);
            }
            Edit {
                regions: vec![k],
                pixels: px,
            }
        }
        Artifact::BlendSeam => {
            let k = [mask::LEFT_EYE, mask::RIGHT_EYE, mask::NOSE, mask::OUTER_MOUTH][rng.random_range(0..4)];
            let reach = (s / 64.0 * 4.0).round().max(2.0) as i64;
            let dx = rng.random_range(3..=reach.max(3)) * if rng.random_bool(0.5) { 1 } else { -1 };
            let dy = rng.random_range(-reach..=reach);
            let alpha = rng.random_range(0.75..0.95);
            let gain = 1.0 + rng.random_range(0.4..0.6) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let mut px = image.clone();
            let n = size as i64;
            for y in 0..n {
                for x in 0..n {
                    let (sx, sy) = ((x - dx).clamp(0, n - 1), (y - dy).clamp(0, n - 1));
                    for c in 0..3 {
                        let src = image.data()[((sy * n + sx) * 3 + c) as usize] * gain;
                        let dst = &mut px.data_mut()[((y * n + x) * 3 + c) as usize];
                        *dst += alpha * (src - *dst);
                    }
                }
            }
            Edit {
                regions: vec![k],
                pixels: px,
            }
        }
        Artifact::BrightnessStep => {
            let boundary = (face.nose_base[2].1 + face.mouth.cy - face.mouth.b) / 2.0 * s;
            let delta = rng.random_range(0.18..0.3) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let mut px = image.clone();
            for y in 0..size {
                let d = if (y as f64) > boundary { delta } else { -0.5 * delta };
                for v in &mut px.data_mut()[y * size * 3..(y + 1) * size * 3] {
                    *v += d;
                }
            }
            Edit {
                regions: vec![mask::NOSE, mask::OUTER_MOUTH],
                pixels: px,
            }
        }
    }
}

/// A fake: the real face of the same seed with 1–3 distinct artifacts.
pub fn gen_fake(seed: u64, size: usize) -> Result<SampleRecord> {
    let (record, _) = gen_fake_with_artifacts(seed, size)?;
    Ok(record)
}

pub fn gen_fake_with_artifacts(seed: u64, size: usize) -> Result<(SampleRecord, Vec<Artifact>)> {
    let face = Face::sample(&mut ChaCha8Rng::seed_from_u64(seed));
    let landmarks = face.landmarks(size)?;
    let mut image = face.render(size);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xFA4E));
    let count = rng.random_range(1..=3);
    let mut kinds = Artifact::ALL.to_vec();
    for i in 0..count {
        let j = rng.random_range(i..kinds.len());
        kinds.swap(i, j);
    }
    kinds.truncate(count);
    for &kind in &kinds {
        let edit = artifact_edit(kind, &face, &image, size, &mut rng);
        apply_edit(&mut image, &landmarks, &edit);
    }
    Ok((
        SampleRecord {
            image,
            landmarks,
            label: true,
            seed,
        },
        kinds,
    ))
}

/// Region channels an artifact list may have modified (for diagnostics).
pub fn artifact_support(lm: &LandmarkSet) -> Vec<bool> {
    support(lm, &[mask::LEFT_EYE, mask::RIGHT_EYE, mask::NOSE, mask::OUTER_MOUTH])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbationKind {
    None,
    Noise,
    Jpeg,
    Blur,
    Cropping,
    Combined,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 6] = [
        PerturbationKind::None,
        PerturbationKind::Noise,
        PerturbationKind::Jpeg,
        PerturbationKind::Blur,
        PerturbationKind::Cropping,
        PerturbationKind::Combined,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbationKind::None => "none",
            PerturbationKind::Noise => "noise",
            PerturbationKind::Jpeg => "jpeg",
            PerturbationKind::Blur => "blur",
            PerturbationKind::Cropping => "cropping",
            PerturbationKind::Combined => "combined",
        }
    }
}

impl std::str::FromStr for PerturbationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown perturbation {s:?}")))
    }
}

/// Perturbation settings; `jpeg_quality` pins the otherwise random quality.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PerturbOptions {
    pub jpeg_quality: Option<u32>,
}

pub fn gaussian_noise(image: &Tensor, sigma: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let noise = Normal::new(0.0, sigma).expect("valid sigma");
    let data = image.data().iter().map(|&v| (v + noise.sample(rng)).clamp(0.0, 1.0)).collect();
    Tensor::new(image.shape().to_vec(), data).expect("same shape")
}

fn image_dims(image: &Tensor) -> (usize, usize) {
    (image.shape()[0], image.shape()[1])
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur(image: &Tensor, sigma: f64) -> Tensor {
    let (h, w) = image_dims(image);
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let src = image.data();
    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                tmp[(y * w + x) * 3 + c] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, wt)| {
                        let sx = (x as i64 + k as i64 - radius).clamp(0, w as i64 - 1) as usize;
                        wt * src[(y * w + sx) * 3 + c]
                    })
                    .sum();
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out[(y * w + x) * 3 + c] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, wt)| {
                        let sy = (y as i64 + k as i64 - radius).clamp(0, h as i64 - 1) as usize;
                        wt * tmp[(sy * w + x) * 3 + c]
                    })
                    .sum();
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out).expect("same shape")
}

/// Crops `[x0, x0+cw) × [y0, y0+ch)` and resamples bilinearly to the input size.
pub fn crop_and_resize(image: &Tensor, x0: f64, y0: f64, cw: f64, ch: f64) -> Tensor {
    let (h, w) = image_dims(image);
    let src = image.data();
    let at = |x: usize, y: usize, c: usize| src[(y * w + x) * 3 + c];
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in 0..w {
            let sx = (x0 + (x as f64 + 0.5) * cw / w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let sy = (y0 + (y as f64 + 0.5) * ch / h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
            let (xa, ya) = (sx.floor() as usize, sy.floor() as usize);
            let (xb, yb) = ((xa + 1).min(w - 1), (ya + 1).min(h - 1));
            let (fx, fy) = (sx - xa as f64, sy - ya as f64);
            for c in 0..3 {
                let top = at(xa, ya, c) * (1.0 - fx) + at(xb, ya, c) * fx;
                let bottom = at(xa, yb, c) * (1.0 - fx) + at(xb, yb, c) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out).expect("same shape")
}

const LUMA_BASE: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., 12., 12., 14., 19., 26., 58., 60., 55., 14., 13., 16., 24., 40., 57., 69., 56., 14.,
    17., 22., 29., 51., 87., 80., 62., 18., 22., 37., 56., 68., 109., 103., 77., 24., 35., 55., 64., 81., 104., 113., 92., 49.,
    64., 78., 87., 103., 121., 120., 101., 72., 92., 95., 98., 112., 100., 103., 99.,
];
const CHROMA_BASE: [f64; 64] = [
    17., 18., 24., 47., 99., 99., 99., 99., 18., 21., 26., 66., 99., 99., 99., 99., 24., 26., 56., 99., 99., 99., 99., 99., 47.,
    66., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99.,
    99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99.,
];

/// Baseline tables scaled for `quality ∈ 1..=100` as in the IJG encoder.
/// Quality 100 yields all-ones tables.
pub fn quant_tables(quality: u32) -> ([f64; 64], [f64; 64]) {
    let q = quality.clamp(1, 100) as f64;
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    let f = |b: f64| ((b * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0);
    (LUMA_BASE.map(f), CHROMA_BASE.map(f))
}

fn dct_matrix() -> [[f64; 8]; 8] {
    let mut m = [[0.0; 8]; 8];
    for (k, row) in m.iter_mut().enumerate() {
        let a = if k == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (n, v) in row.iter_mut().enumerate() {
            *v = a * (PI * (2 * n + 1) as f64 * k as f64 / 16.0).cos();
        }
    }
    m
}

/// 8×8 block DCT quantisation in YCbCr (no subsampling, no entropy coding).
/// Steps of at most 1 leave their coefficient untouched.
pub fn jpeg_with_tables(image: &Tensor, luma: &[f64; 64], chroma: &[f64; 64]) -> Tensor {
    let (h, w) = image_dims(image);
    let src = image.data();
    let n = h * w;
    let mut planes = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for i in 0..n {
        let (r, g, b) = (src[3 * i] * 255.0, src[3 * i + 1] * 255.0, src[3 * i + 2] * 255.0);
        planes[0][i] = 0.299 * r + 0.587 * g + 0.114 * b - 128.0;
        planes[1][i] = -0.168_736 * r - 0.331_264 * g + 0.5 * b;
        planes[2][i] = 0.5 * r - 0.418_688 * g - 0.081_312 * b;
    }
    let m = dct_matrix();
    for (p, plane) in planes.iter_mut().enumerate() {
        let table = if p == 0 { luma } else { chroma };
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                let mut block = [[0.0; 8]; 8];
                for (y, row) in block.iter_mut().enumerate() {
                    for (x, v) in row.iter_mut().enumerate() {
                        let (yy, xx) = ((by + y).min(h - 1), (bx + x).min(w - 1));
                        *v = plane[yy * w + xx];
                    }
                }
                let mut coef = [[0.0; 8]; 8];
                for u in 0..8 {
                    for v in 0..8 {
                        let mut s = 0.0;
                        for y in 0..8 {
                            for x in 0..8 {
                                s += m[u][y] * m[v][x] * block[y][x];
                            }
                        }
                        let q = table[u * 8 + v];
                        coef[u][v] = if q <= 1.0 { s } else { (s / q).round() * q };
                    }
                }
                for y in 0..8 {
                    for x in 0..8 {
                        if by + y >= h || bx + x >= w {
                            continue;
                        }
                        let mut s = 0.0;
                        for u in 0..8 {
                            for v in 0..8 {
                                s += m[u][y] * m[v][x] * coef[u][v];
                            }
                        }
                        plane[(by + y) * w + bx + x] = s;
                    }
                }
            }
        }
    }
    let mut out = Vec::with_capacity(3 * n);
    for i in 0..n {
        let (y, cb, cr) = (planes[0][i] + 128.0, planes[1][i], planes[2][i]);
        let rgb = [y + 1.402 * cr, y - 0.344_136 * cb - 0.714_136 * cr, y + 1.772 * cb];
        out.extend(rgb.map(|v| (v / 255.0).clamp(0.0, 1.0)));
    }
    Tensor::new(image.shape().to_vec(), out).expect("same shape")
}

pub fn jpeg(image: &Tensor, quality: u32) -> Tensor {
    let (luma, chroma) = quant_tables(quality);
    jpeg_with_tables(image, &luma, &chroma)
}

fn random_crop(image: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
    let (h, w) = image_dims(image);
    let frac = rng.random_range(0.05..0.15);
    let (cw, ch) = (w as f64 * (1.0 - frac), h as f64 * (1.0 - frac));
    let x0 = rng.random_range(0.0..=w as f64 - cw);
    let y0 = rng.random_range(0.0..=h as f64 - ch);
    crop_and_resize(image, x0, y0, cw, ch)
}

fn jpeg_random(image: &Tensor, opts: PerturbOptions, rng: &mut ChaCha8Rng) -> Tensor {
    let q = rng.random_range(30..=90);
    jpeg(image, opts.jpeg_quality.unwrap_or(q))
}

/// Applies one perturbation unconditionally (the 50 % rule is the caller's).
/// `Combined` applies crop, blur, JPEG and noise, each with probability 0.5.
pub fn perturb(image: &Tensor, kind: PerturbationKind, seed: u64, opts: PerturbOptions) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        PerturbationKind::None => image.clone(),
        PerturbationKind::Noise => {
            let sigma = rng.random_range(0.01..0.05);
            gaussian_noise(image, sigma, &mut rng)
        }
        PerturbationKind::Jpeg => jpeg_random(image, opts, &mut rng),
        PerturbationKind::Blur => gaussian_blur(image, rng.random_range(0.5..1.5)),
        PerturbationKind::Cropping => random_crop(image, &mut rng),
        PerturbationKind::Combined => {
            let mut out = image.clone();
            if rng.random_bool(0.5) {
                out = random_crop(&out, &mut rng);
            }
            if rng.random_bool(0.5) {
                out = gaussian_blur(&out, rng.random_range(0.5..1.5));
            }
            if rng.random_bool(0.5) {
                out = jpeg_random(&out, opts, &mut rng);
            }
            if rng.random_bool(0.5) {
                let sigma = rng.random_range(0.01..0.05);
                out = gaussian_noise(&out, sigma, &mut rng);
            }
            out
        }
    }
}

/// Evaluation-time perturbation of sample `index`: `Some` with probability
/// 0.5, decided by a generator seeded from `(seed, index)`.
pub fn perturb_for_eval(image: &Tensor, kind: PerturbationKind, seed: u64, index: usize, opts: PerturbOptions) -> Option<Tensor> {
    if kind == PerturbationKind::None {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, index as u64));
    rng.random_bool(0.5).then(|| perturb(image, kind, rng.random(), opts))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub image: String,
    pub landmarks: String,
    pub label: u8,
    pub seed: u64,
}

/// A manifest plus the directory its relative paths resolve against.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<DatasetEntry>,
}

impl Dataset {
    pub fn load(manifest: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest).map_err(|e| Error::io(format!("reading {}", manifest.display()), e))?;
        let entries: Vec<DatasetEntry> = serde_json::from_str(&text)?;
        if let Some(bad) = entries.iter().find(|e| e.label > 1) {
            return Err(Error::Config(format!("{}: label must be 0 or 1", bad.image)));
        }
        Ok(Self {
            root: manifest.parent().unwrap_or(Path::new(".")).to_path_buf(),
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.entries.iter().map(|e| e.label == 1).collect()
    }

    /// Reads image and landmarks of entry `i`.
    pub fn read(&self, i: usize) -> Result<(Tensor, LandmarkSet)> {
        let e = &self.entries[i];
        let image = read_ppm(&self.root.join(&e.image))?;
        let size = (image.shape()[0], image.shape()[1]);
        let lm = parse_landmarks(&self.root.join(&e.landmarks), size)?;
        Ok((image, lm))
    }
}

/// Sample `i` of a corpus: labels are a seeded shuffle of
/// `round(n·fake_ratio)` fakes and the rest reals.
pub fn generate(n: usize, fake_ratio: f64, seed: u64, size: usize) -> Result<Vec<SampleRecord>> {
    if n < 2 || !(fake_ratio > 0.0 && fake_ratio < 1.0) {
        return Err(Error::Config(format!("need n ≥ 2 and fake_ratio in (0, 1), got {n} and {fake_ratio}")));
    }
    let fakes = (n as f64 * fake_ratio).round() as usize;
    let mut labels: Vec<bool> = (0..n).map(|i| i < fakes).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        labels.swap(i, rng.random_range(0..=i));
    }
    par::map_range(n, |i| {
        let s = derive_seed(seed, i as u64);
        if labels[i] {
            gen_fake(s, size)
        } else {
            gen_face(s, size)
        }
    })
    .into_iter()
    .collect()
}

/// Writes `img_XXXXX.ppm`, `lm_XXXXX.csv` and `manifest.json` under `out_dir`.
pub fn make_dataset(n: usize, fake_ratio: f64, seed: u64, size: usize, out_dir: &Path) -> Result<Dataset> {
    let samples = generate(n, fake_ratio, seed, size)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let mut entries = Vec::with_capacity(n);
    for (i, s) in samples.iter().enumerate() {
        let image = format!("img_{i:05}.ppm");
        let landmarks = format!("lm_{i:05}.csv");
        write_ppm(&out_dir.join(&image), &s.image)?;
        write_landmarks(&out_dir.join(&landmarks), &s.landmarks)?;
        entries.push(DatasetEntry {
            image,
            landmarks,
            label: s.label as u8,
            seed: s.seed,
        });
    }
    let path = out_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&entries)?;
    fs::write(&path, json).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(Dataset {
        root: out_dir.to_path_buf(),
        entries,
    })
}

/// Mask-weighted mean colour of each region: `K·3` features.
pub fn region_features(sample: &SampleRecord) -> Vec<f64> {
    let stack = render_gaussian_masks(&sample.landmarks, &region_groups(), SIGMA_SCALE);
    let px = sample.image.data();
    let mut out = Vec::with_capacity(stack.regions() * 3);
    for k in 0..stack.regions() {
        let m = stack.channel(k);
        let total: f64 = m.iter().sum();
        for c in 0..3 {
            out.push(m.iter().enumerate().map(|(i, w)| w * px[3 * i + c]).sum::<f64>() / total);
        }
    }
    out
}

/// Logistic regression on [`region_features`]: fits on the first two thirds,
/// returns accuracy on the remaining third.
pub fn separability_probe(samples: &[SampleRecord]) -> f64 {
    let feats: Vec<Vec<f64>> = par::map(samples, region_features);
    let split = samples.len() * 2 / 3;
    let d = feats[0].len();
    let (mut mean, mut std) = (vec![0.0; d], vec![0.0; d]);
    for f in &feats[..split] {
        for j in 0..d {
            mean[j] += f[j] / split as f64;
        }
    }
    for f in &feats[..split] {
        for j in 0..d {
            std[j] += (f[j] - mean[j]).powi(2) / split as f64;
        }
    }
    let x: Vec<Vec<f64>> = feats
        .iter()
        .map(|f| (0..d).map(|j| (f[j] - mean[j]) / std[j].sqrt().max(1e-9)).collect())
        .collect();
    let (mut w, mut b) = (vec![0.0; d], 0.0);
    for _ in 0..500 {
        let (mut gw, mut gb) = (vec![0.0; d], 0.0);
        for (xi, s) in x[..split].iter().zip(samples) {
            let z: f64 = b + xi.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let err = sigmoid(z) - s.label as u8 as f64;
            for j in 0..d {
                gw[j] += err * xi[j] / split as f64;
            }
            gb += err / split as f64;
        }
        for j in 0..d {
            w[j] -= 0.5 * (gw[j] + 1e-3 * w[j]);
        }
        b -= 0.5 * gb;
    }
    let test = &x[split..];
    let hits = test
        .iter()
        .zip(&samples[split..])
        .filter(|(xi, s)| (b + xi.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() > 0.0) == s.label)
        .count();
    hits as f64 / test.len() as f64
}
