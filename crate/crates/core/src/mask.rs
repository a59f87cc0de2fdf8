//! From 68 facial landmarks to the per-head, patch-level mask tensor.
//!
//! The pipeline is: landmarks → one Gaussian map per facial region →
//! block-mean projection onto the patch grid → learnable convex combinations
//! for the heads beyond the base regions → a zero CLS column in front.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{NodeId, Tape, Tensor};

pub const NUM_LANDMARKS: usize = 68;

/// Smallest Gaussian width in pixels.
pub const SIGMA_FLOOR: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    points: Vec<(f64, f64)>,
    height: usize,
    width: usize,
}

impl LandmarkSet {
    /// Points are `(x, y)` pixel coordinates; every point must lie in
    /// `[0, width) × [0, height)`.
    pub fn new(points: Vec<(f64, f64)>, height: usize, width: usize) -> Result<Self> {
        if points.len() != NUM_LANDMARKS {
            return Err(Error::Config(format!(
                "expected {NUM_LANDMARKS} landmarks, found {}",
                points.len()
            )));
        }
        if let Some(i) = points.iter().position(|&p| !in_bounds(p, height, width)) {
            let (x, y) = points[i];
            return Err(Error::Config(format!(
                "landmark {i} at ({x}, {y}) outside {width}x{height} image"
            )));
        }
        Ok(Self { points, height, width })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    /// `(height, width)` of the source image.
    pub fn image_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Result<Self> {
        let pts = self.points.iter().map(|&(x, y)| (x + dx, y + dy)).collect();
        Self::new(pts, self.height, self.width)
    }
}

fn in_bounds((x, y): (f64, f64), height: usize, width: usize) -> bool {
    x.is_finite() && y.is_finite() && x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64
}

/// Reads a landmark CSV: 68 rows of `x,y`, optionally preceded by an `x,y`
/// header line. Blank lines are ignored.
pub fn parse_landmarks(path: &Path, image_size: (usize, usize)) -> Result<LandmarkSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_landmarks_str(&text, path, image_size)
}

pub fn parse_landmarks_str(text: &str, path: &Path, (height, width): (usize, usize)) -> Result<LandmarkSet> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut points = Vec::with_capacity(NUM_LANDMARKS);
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if points.is_empty() && line.replace(' ', "").eq_ignore_ascii_case("x,y") {
            continue;
        }
        let mut fields = line.split(',');
        let (Some(xs), Some(ys), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(parse_err(line_no, format!("expected `x,y`, got `{line}`")));
        };
        let x: f64 = xs
            .trim()
            .parse()
            .map_err(|_| parse_err(line_no, format!("non-numeric x `{}`", xs.trim())))?;
        let y: f64 = ys
            .trim()
            .parse()
            .map_err(|_| parse_err(line_no, format!("non-numeric y `{}`", ys.trim())))?;
        if !in_bounds((x, y), height, width) {
            return Err(parse_err(line_no, format!("({x}, {y}) outside {width}x{height} image")));
        }
        points.push((x, y));
    }
    if points.len() != NUM_LANDMARKS {
        return Err(Error::LandmarkCount {
            path: path.to_path_buf(),
            found: points.len(),
        });
    }
    LandmarkSet::new(points, height, width)
}

pub fn landmarks_to_csv(lm: &LandmarkSet) -> String {
    let mut s = String::from("x,y\n");
    for (x, y) in &lm.points {
        let _ = writeln!(s, "{x},{y}");
    }
    s
}

pub fn write_landmarks(path: &Path, lm: &LandmarkSet) -> Result<()> {
    fs::write(path, landmarks_to_csv(lm)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub name: &'static str,
    pub indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionSpec {
    pub regions: Vec<Region>,
}

impl RegionSpec {
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.regions.iter().position(|r| r.name == name)
    }
}

pub const JAWLINE: usize = 0;
pub const LEFT_BROW: usize = 1;
pub const RIGHT_BROW: usize = 2;
pub const NOSE: usize = 3;
pub const LEFT_EYE: usize = 4;
pub const RIGHT_EYE: usize = 5;
pub const OUTER_MOUTH: usize = 6;
pub const INNER_MOUTH: usize = 7;

/// The eight regions of the standard 68-point layout. "Left" and "right"
/// follow image coordinates (left = smaller x).
pub fn region_groups() -> RegionSpec {
    let r = |name, range: std::ops::RangeInclusive<usize>| Region {
        name,
        indices: range.collect(),
    };
    RegionSpec {
        regions: vec![
            r("jawline", 0..=16),
            r("left_eyebrow", 17..=21),
            r("right_eyebrow", 22..=26),
            r("nose", 27..=35),
            r("left_eye", 36..=41),
            r("right_eye", 42..=47),
            r("outer_mouth", 48..=59),
            r("inner_mouth", 60..=67),
        ],
    }
}

/// `K×H×W` stack of region maps with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMaskStack {
    pub maps: Tensor,
}

impl RegionMaskStack {
    pub fn regions(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.maps.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.maps.shape()[2]
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        let n = self.height() * self.width();
        &self.maps.data()[k * n..(k + 1) * n]
    }

    pub fn channel_tensor(&self, k: usize) -> Tensor {
        Tensor::new(vec![self.height(), self.width()], self.channel(k).to_vec()).expect("valid channel")
    }
}

/// Gaussian width for one region: `sigma_scale · bbox diagonal`, floored at
/// [`SIGMA_FLOOR`] pixels.
pub fn region_sigma(lm: &LandmarkSet, region: &Region, sigma_scale: f64) -> f64 {
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for &i in &region.indices {
        let (x, y) = lm.points[i];
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let diag = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt();
    (sigma_scale * diag).max(SIGMA_FLOOR)
}

/// Renders the raw (unnormalized) map of one region:
/// `max_p exp(−‖(x, y) − p‖² / 2σ²)` over the region's landmarks, with pixel
/// `(x, y)` at integer coordinates.
pub fn render_region(lm: &LandmarkSet, region: &Region, sigma: f64) -> Vec<f64> {
    let (h, w) = (lm.height, lm.width);
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut out = vec![0.0f64; h * w];
    // The Gaussian factorizes over axes.
    for &i in &region.indices {
        let (px, py) = lm.points[i];
        let gx: Vec<f64> = (0..w).map(|x| (-(x as f64 - px).powi(2) * inv).exp()).collect();
        for y in 0..h {
            let gy = (-(y as f64 - py).powi(2) * inv).exp();
            if gy == 0.0 {
                continue;
            }
            let row = &mut out[y * w..(y + 1) * w];
            for (o, g) in row.iter_mut().zip(&gx) {
                *o = o.max(g * gy);
            }
        }
    }
    out
}

/// Renders every region and rescales each channel so its peak is
/// exactly 1.
pub fn render_gaussian_masks(lm: &LandmarkSet, spec: &RegionSpec, sigma_scale: f64) -> RegionMaskStack {
    let (h, w) = lm.image_size();
    let mut data = Vec::with_capacity(spec.len() * h * w);
    for region in &spec.regions {
        let sigma = region_sigma(lm, region, sigma_scale);
        let mut map = render_region(lm, region, sigma);
        let peak = map.iter().fold(0.0f64, |m, &v| m.max(v));
        if peak > 0.0 {
            map.iter_mut().for_each(|v| *v = (*v / peak).min(1.0));
        }
        data.extend(map);
    }
    RegionMaskStack {
        maps: Tensor::new(vec![spec.len(), h, w], data).expect("consistent mask shape"),
    }
}

/// Block-mean pooling of each `H×W` map onto the `(H/P)×(W/P)` patch grid,
/// patches in row-major order. Returns `K×N_p`.
pub fn project_to_patches(stack: &RegionMaskStack, patch: usize) -> Result<Tensor> {
    let (k, h, w) = (stack.regions(), stack.height(), stack.width());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape("project_to_patches", &[h, w], &[patch]));
    }
    let (gh, gw) = (h / patch, w / patch);
    let area = (patch * patch) as f64;
    let mut out = Vec::with_capacity(k * gh * gw);
    for c in 0..k {
        let map = stack.channel(c);
        for py in 0..gh {
            for px in 0..gw {
                let mut s = 0.0;
                for y in py * patch..(py + 1) * patch {
                    s += map[y * w + px * patch..y * w + (px + 1) * patch].iter().sum::<f64>();
                }
                out.push(s / area);
            }
        }
    }
    Tensor::new(vec![k, gh * gw], out)
}

const GROUP_LOGIT: f64 = 3.0;

/// Initial mixing logits for the `heads − K` combined masks: favour
/// {eyes}, {eyebrows}, {nose, outer mouth}, then a uniform mix, cycling.
/// `None` when no combined masks are needed.
pub fn combination_init(heads: usize, regions: usize) -> Result<Option<Tensor>> {
    if heads < regions {
        return Err(Error::Config(format!(
            "{heads} heads cannot carry {regions} region masks"
        )));
    }
    let extra = heads - regions;
    if extra == 0 {
        return Ok(None);
    }
    let groups: [&[usize]; 4] = [&[LEFT_EYE, RIGHT_EYE], &[LEFT_BROW, RIGHT_BROW], &[NOSE, OUTER_MOUTH], &[]];
    let mut data = vec![0.0; extra * regions];
    for r in 0..extra {
        for &k in groups[r % groups.len()] {
            if k < regions {
                data[r * regions + k] = GROUP_LOGIT;
            }
        }
    }
    Ok(Some(Tensor::new(vec![extra, regions], data)?))
}

/// Stacks the `K` base vectors with `softmax_rows(logits) · base`.
pub fn combine_masks(base: &Tensor, logits: Option<&Tensor>) -> Result<Tensor> {
    let Some(logits) = logits else {
        return Ok(base.clone());
    };
    if logits.cols() != base.rows() {
        return Err(Error::shape("combine_masks", logits.shape(), base.shape()));
    }
    let mixed = logits.softmax_rows().matmul(base)?;
    let mut data = base.data().to_vec();
    data.extend_from_slice(mixed.data());
    Tensor::new(vec![base.rows() + mixed.rows(), base.cols()], data)
}

/// Tape version of [`combine_masks`] followed by [`prepend_cls`]; gradients
/// flow into the mixing logits.
pub fn mask_tensor_on_tape(t: &mut Tape, base: NodeId, logits: Option<NodeId>) -> Result<NodeId> {
    let stacked = match logits {
        Some(l) => {
            let w = t.softmax_rows(l)?;
            let mixed = t.matmul(w, base)?;
            t.concat_rows(&[base, mixed])?
        }
        None => base,
    };
    let heads = t.value(stacked).rows();
    let zeros = t.input(Tensor::zeros(&[heads, 1]))?;
    t.concat_cols(&[zeros, stacked])
}

/// Prepends a zero column (the CLS entry) to every head's vector.
///
/// Not idempotent: applying it to an already-prefixed tensor adds another
/// column.
pub fn prepend_cls(vectors: &Tensor) -> MaskTensor {
    let (h, n) = (vectors.rows(), vectors.cols());
    let mut data = Vec::with_capacity(h * (n + 1));
    for r in 0..h {
        data.push(0.0);
        data.extend_from_slice(vectors.row_slice(r));
    }
    MaskTensor(Tensor::new(vec![h, n + 1], data).expect("consistent shape"))
}

/// `H_heads × (N_p+1)` mask tensor; column 0 belongs to the CLS token.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskTensor(pub Tensor);

impl MaskTensor {
    pub fn heads(&self) -> usize {
        self.0.rows()
    }

    pub fn tokens(&self) -> usize {
        self.0.cols()
    }

    pub fn head(&self, h: usize) -> &[f64] {
        self.0.row_slice(h)
    }
}

/// The whole pipeline with fixed mixing logits.
pub fn build_mask_tensor(
    lm: &LandmarkSet,
    spec: &RegionSpec,
    sigma_scale: f64,
    patch: usize,
    logits: Option<&Tensor>,
) -> Result<MaskTensor> {
    let stack = render_gaussian_masks(lm, spec, sigma_scale);
    let base = project_to_patches(&stack, patch)?;
    Ok(prepend_cls(&combine_masks(&base, logits)?))
}
