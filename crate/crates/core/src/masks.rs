//! Hole masks (`1` = synthesize) for training and evaluation.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::SemanticMap;
use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

/// `[1, 1, H, W]` with values in `{0, 1}`.
pub type HoleMask = Tensor<f32>;

pub const MAX_ATTEMPTS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Irregular,
    Rectangular,
    Segmentation,
    Outpainting,
    Quadrants,
}

impl MaskKind {
    pub const ALL: [MaskKind; 5] = [
        MaskKind::Irregular,
        MaskKind::Rectangular,
        MaskKind::Segmentation,
        MaskKind::Outpainting,
        MaskKind::Quadrants,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MaskKind::Irregular => "irregular",
            MaskKind::Rectangular => "rectangular",
            MaskKind::Segmentation => "segmentation",
            MaskKind::Outpainting => "outpainting",
            MaskKind::Quadrants => "quadrants",
        }
    }
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mask kind `{s}`")))
    }
}

/// Half-open hole-ratio interval `[lo, hi)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioInterval {
    pub lo: f64,
    pub hi: f64,
}

impl RatioInterval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        ensure!(
            lo > 0.0 && lo < hi && hi <= 1.0,
            Config,
            "invalid ratio interval [{lo}, {hi})"
        );
        Ok(Self { lo, hi })
    }

    pub fn contains(&self, r: f64) -> bool {
        r >= self.lo && r < self.hi
    }

    /// `"10-20"` style percent label.
    pub fn label(&self) -> String {
        format!("{}-{}", pct(self.lo), pct(self.hi))
    }
}

fn pct(v: f64) -> String {
    let p = v * 100.0;
    if (p - p.round()).abs() < 1e-9 {
        format!("{}", p.round() as i64)
    } else {
        format!("{p:.1}")
    }
}

impl fmt::Display for RatioInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.lo, self.hi)
    }
}

impl FromStr for RatioInterval {
    type Err = Error;

    /// Accepts `lo,hi` as fractions.
    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once(',')
            .ok_or_else(|| Error::Config(format!("interval `{s}` is not `lo,hi`")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad interval bound `{v}`")))
        };
        Self::new(parse(a)?, parse(b)?)
    }
}

/// The evaluation grid: 1-10%, then 10% steps up to 50%.
pub const EVAL_INTERVALS: [RatioInterval; 5] = [
    RatioInterval { lo: 0.01, hi: 0.10 },
    RatioInterval { lo: 0.10, hi: 0.20 },
    RatioInterval { lo: 0.20, hi: 0.30 },
    RatioInterval { lo: 0.30, hi: 0.40 },
    RatioInterval { lo: 0.40, hi: 0.50 },
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub kind: MaskKind,
    pub interval: RatioInterval,
    pub height: usize,
    pub width: usize,
}

/// Stroke constants for irregular masks; widths are in pixels at 512 columns.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrokeParams {
    pub vertices: (usize, usize),
    pub width_px: (f64, f64),
    pub reference_width: usize,
}

pub const STROKES: StrokeParams = StrokeParams {
    vertices: (4, 12),
    width_px: (2.0, 25.0),
    reference_width: 512,
};

pub fn mask_ratio(m: &HoleMask) -> f64 {
    m.data().iter().filter(|&&v| v != 0.0).count() as f64 / m.len() as f64
}

fn empty(h: usize, w: usize) -> HoleMask {
    Tensor::zeros([1, 1, h, w])
}

fn check_dims(spec: &MaskSpec) -> Result<()> {
    ensure!(
        spec.height > 0 && spec.width > 0,
        Config,
        "mask dims {}x{} must be positive",
        spec.height,
        spec.width
    );
    Ok(())
}

fn exhausted(spec: &MaskSpec) -> Error {
    Error::Mask(format!(
        "{} mask: no sample hit ratio interval {} in {MAX_ATTEMPTS} attempts",
        spec.kind, spec.interval
    ))
}

/// Counts holes while painting, wrapping columns and clamping rows.
struct Canvas {
    m: HoleMask,
    ones: usize,
}

impl Canvas {
    fn new(h: usize, w: usize) -> Self {
        Self { m: empty(h, w), ones: 0 }
    }

    fn ratio(&self) -> f64 {
        self.ones as f64 / self.m.len() as f64
    }

    fn paint(&mut self, y: i64, x: i64) {
        let (h, w) = (self.m.height() as i64, self.m.width() as i64);
        if y < 0 || y >= h {
            return;
        }
        let x = x.rem_euclid(w);
        let i = (y * w + x) as usize;
        let d = self.m.data_mut();
        if d[i] == 0.0 {
            d[i] = 1.0;
            self.ones += 1;
        }
    }

    fn disc(&mut self, cy: f64, cx: f64, r: f64) {
        let ri = r.ceil() as i64;
        for dy in -ri..=ri {
            for dx in -ri..=ri {
                let (py, px) = (cy.floor() as i64 + dy, cx.floor() as i64 + dx);
                let (ey, ex) = (py as f64 + 0.5 - cy, px as f64 + 0.5 - cx);
                if ey * ey + ex * ex <= r * r {
                    self.paint(py, px);
                }
            }
        }
    }

    fn segment(&mut self, a: (f64, f64), b: (f64, f64), r: f64) {
        let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
        let steps = (len / (r * 0.5).max(0.5)).ceil().max(1.0) as usize;
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            self.disc(a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t, r);
        }
    }
}

/// Random polyline strokes, added until the ratio reaches `lo`; an attempt
/// that overshoots `hi` is discarded.
pub fn irregular_mask(spec: &MaskSpec, rng: &mut impl Rng) -> Result<HoleMask> {
    check_dims(spec)?;
    let (h, w) = (spec.height, spec.width);
    let scale = w as f64 / STROKES.reference_width as f64;
    let max_len = (w as f64 / 8.0).max(2.0);
    for _ in 0..MAX_ATTEMPTS {
        let mut c = Canvas::new(h, w);
        'strokes: while c.ratio() < spec.interval.lo {
            let r = (rng.gen_range(STROKES.width_px.0..=STROKES.width_px.1) * scale).max(1.0) / 2.0;
            let vertices = rng.gen_range(STROKES.vertices.0..=STROKES.vertices.1);
            let mut p = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
            let mut angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            c.disc(p.0, p.1, r);
            for _ in 1..vertices {
                if c.ratio() >= spec.interval.lo {
                    break 'strokes;
                }
                angle += rng.gen_range(-1.2..1.2);
                let len = rng.gen_range(1.0..max_len);
                let q = (
                    (p.0 + len * angle.sin()).clamp(0.0, h as f64 - 1e-6),
                    p.1 + len * angle.cos(),
                );
                c.segment(p, q, r);
                p = q;
            }
        }
        if spec.interval.contains(c.ratio()) {
            return Ok(c.m);
        }
    }
    Err(exhausted(spec))
}

/// Axis-aligned rectangles with random aspect ratios, each sized to a
/// fraction of the remaining area budget.
pub fn rectangular_mask(spec: &MaskSpec, rng: &mut impl Rng) -> Result<HoleMask> {
    check_dims(spec)?;
    let (h, w) = (spec.height, spec.width);
    let total = (h * w) as f64;
    for _ in 0..MAX_ATTEMPTS {
        let target = rng.gen_range(spec.interval.lo..spec.interval.hi) * total;
        let mut c = Canvas::new(h, w);
        for _ in 0..64 {
            if c.ratio() >= spec.interval.lo {
                break;
            }
            let budget = (target - c.ones as f64).max(1.0);
            let area = budget * rng.gen_range(0.3..1.0);
            let aspect: f64 = rng.gen_range(-(4f64.ln())..4f64.ln()).exp();
            let rw = ((area * aspect).sqrt().round() as usize).clamp(1, w);
            let rh = ((area / rw as f64).round() as usize).clamp(1, h);
            let y0 = rng.gen_range(0..=h - rh);
            let x0 = rng.gen_range(0..w);
            for y in y0..y0 + rh {
                for x in x0..x0 + rw {
                    c.paint(y as i64, x as i64);
                }
            }
        }
        if spec.interval.contains(c.ratio()) {
            return Ok(c.m);
        }
    }
    Err(exhausted(spec))
}

/// One 3x3 dilation step; columns wrap, rows clamp.
pub fn dilate(m: &HoleMask) -> HoleMask {
    let (h, w) = (m.height(), m.width());
    Tensor::from_fn([1, 1, h, w], |_, _, y, x| {
        for dy in -1i64..=1 {
            let yy = y as i64 + dy;
            if yy < 0 || yy >= h as i64 {
                continue;
            }
            for dx in -1i64..=1 {
                let xx = (x as i64 + dx).rem_euclid(w as i64) as usize;
                if m.at(0, 0, yy as usize, xx) != 0.0 {
                    return 1.0;
                }
            }
        }
        0.0
    })
}

#[derive(Clone, Debug)]
pub struct SegmentationOutcome {
    pub mask: HoleMask,
    /// Ratio of the clutter mask, then after every dilation.
    pub ratios: Vec<f64>,
    pub fallback: bool,
}

/// Clutter pixels dilated until the ratio reaches `lo`. One step may jump
/// past `hi`; that mask is kept. Rooms without clutter get a rectangular mask.
pub fn segmentation_mask(sem: &SemanticMap, spec: &MaskSpec, rng: &mut impl Rng) -> Result<SegmentationOutcome> {
    check_dims(spec)?;
    ensure!(
        sem.height == spec.height && sem.width == spec.width,
        Shape,
        "semantic map {}x{} for a {}x{} mask",
        sem.height,
        sem.width,
        spec.height,
        spec.width
    );
    let mut m = Tensor::from_fn([1, 1, spec.height, spec.width], |_, _, y, x| {
        if sem.is_clutter(y, x) {
            1.0
        } else {
            0.0
        }
    });
    let mut ratio = mask_ratio(&m);
    if ratio == 0.0 {
        log::debug!("no clutter; rectangular fallback");
        let spec = MaskSpec {
            kind: MaskKind::Rectangular,
            ..*spec
        };
        return Ok(SegmentationOutcome {
            mask: rectangular_mask(&spec, rng)?,
            ratios: vec![],
            fallback: true,
        });
    }
    let mut ratios = vec![ratio];
    while ratio < spec.interval.lo {
        let next = dilate(&m);
        let r = mask_ratio(&next);
        if r == ratio {
            break;
        }
        m = next;
        ratio = r;
        ratios.push(r);
    }
    Ok(SegmentationOutcome {
        mask: m,
        ratios,
        fallback: false,
    })
}

/// Inclusive range of band thicknesses along an axis of length `n`.
fn band_range(n: usize, interval: &RatioInterval) -> Option<(usize, usize)> {
    let lo = (interval.lo * n as f64 - 1e-9).ceil().max(1.0) as usize;
    let hi = ((interval.hi * n as f64 - 1e-9).ceil() as usize).saturating_sub(1);
    let hi = hi.min(n);
    (lo <= hi).then_some((lo, hi))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Edge {
    Left,
    Right,
    Top,
    Bottom,
}

/// A full-extent band from a random edge inward.
pub fn outpainting_mask(spec: &MaskSpec, rng: &mut impl Rng) -> Result<HoleMask> {
    check_dims(spec)?;
    let edge = [Edge::Left, Edge::Right, Edge::Top, Edge::Bottom][rng.gen_range(0..4)];
    outpainting_band(spec, edge, rng)
}

pub fn outpainting_band(spec: &MaskSpec, edge: Edge, rng: &mut impl Rng) -> Result<HoleMask> {
    let (h, w) = (spec.height, spec.width);
    let n = match edge {
        Edge::Left | Edge::Right => w,
        Edge::Top | Edge::Bottom => h,
    };
    let (lo, hi) = band_range(n, &spec.interval).ok_or_else(|| exhausted(spec))?;
    let b = rng.gen_range(lo..=hi);
    Ok(Tensor::from_fn([1, 1, h, w], |_, _, y, x| {
        let inside = match edge {
            Edge::Left => x < b,
            Edge::Right => x >= w - b,
            Edge::Top => y < b,
            Edge::Bottom => y >= h - b,
        };
        if inside {
            1.0
        } else {
            0.0
        }
    }))
}

/// A rectangle anchored at a random corner.
pub fn quadrant_mask(spec: &MaskSpec, rng: &mut impl Rng) -> Result<HoleMask> {
    check_dims(spec)?;
    let (h, w) = (spec.height, spec.width);
    let total = (h * w) as f64;
    for _ in 0..MAX_ATTEMPTS {
        let target = rng.gen_range(spec.interval.lo..spec.interval.hi) * total;
        let min_w = (target / h as f64).ceil().max(1.0) as usize;
        if min_w > w {
            continue;
        }
        let rw = rng.gen_range(min_w..=w);
        let rh = ((target / rw as f64).round() as usize).clamp(1, h);
        if !spec.interval.contains((rw * rh) as f64 / total) {
            continue;
        }
        let (top, left) = (rng.gen_bool(0.5), rng.gen_bool(0.5));
        return Ok(Tensor::from_fn([1, 1, h, w], |_, _, y, x| {
            let iy = if top { y < rh } else { y >= h - rh };
            let ix = if left { x < rw } else { x >= w - rw };
            if iy && ix {
                1.0
            } else {
                0.0
            }
        }));
    }
    Err(exhausted(spec))
}

/// Dispatches on `spec.kind`; segmentation needs `sem`.
pub fn generate_mask(spec: &MaskSpec, sem: Option<&SemanticMap>, rng: &mut impl Rng) -> Result<HoleMask> {
    match spec.kind {
        MaskKind::Irregular => irregular_mask(spec, rng),
        MaskKind::Rectangular => rectangular_mask(spec, rng),
        MaskKind::Segmentation => {
            let sem = sem.ok_or_else(|| Error::Mask("segmentation masks need a semantic map".into()))?;
            Ok(segmentation_mask(sem, spec, rng)?.mask)
        }
        MaskKind::Outpainting => outpainting_mask(spec, rng),
        MaskKind::Quadrants => quadrant_mask(spec, rng),
    }
}

/// Training-time ratio distribution: `r ~ U(lo, hi)`, then an interval of
/// half-width `half_width` around it, clipped to the range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainMaskConfig {
    pub ratio_lo: f64,
    pub ratio_hi: f64,
    pub half_width: f64,
}

impl Default for TrainMaskConfig {
    fn default() -> Self {
        Self {
            ratio_lo: 0.01,
            ratio_hi: 0.5,
            half_width: 0.025,
        }
    }
}

impl TrainMaskConfig {
    pub fn validate(&self) -> Result<()> {
        RatioInterval::new(self.ratio_lo, self.ratio_hi)?;
        ensure!(self.half_width > 0.0, Config, "mask half_width must be positive");
        Ok(())
    }
}

pub fn sample_training_mask(
    cfg: &TrainMaskConfig,
    h: usize,
    w: usize,
    sem: Option<&SemanticMap>,
    rng: &mut impl Rng,
) -> Result<(MaskKind, HoleMask)> {
    let kinds: Vec<MaskKind> = MaskKind::ALL
        .into_iter()
        .filter(|&k| k != MaskKind::Segmentation || sem.is_some())
        .collect();
    let kind = kinds[rng.gen_range(0..kinds.len())];
    let r = rng.gen_range(cfg.ratio_lo..cfg.ratio_hi);
    let interval = RatioInterval::new(
        (r - cfg.half_width).max(cfg.ratio_lo),
        (r + cfg.half_width).min(cfg.ratio_hi),
    )?;
    let spec = MaskSpec {
        kind,
        interval,
        height: h,
        width: w,
    };
    match generate_mask(&spec, sem, rng) {
        Ok(m) => Ok((kind, m)),
        Err(Error::Mask(msg)) => {
            log::debug!("{msg}; using a rectangular mask");
            let spec = MaskSpec {
                kind: MaskKind::Rectangular,
                ..spec
            };
            Ok((kind, rectangular_mask(&spec, rng)?))
        }
        Err(e) => Err(e),
    }
}

/// 8-bit grayscale, 255 = hole.
pub fn save_mask_png(path: &Path, m: &HoleMask) -> Result<()> {
    let (h, w) = (m.height(), m.width());
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if m.at(0, 0, y as usize, x as usize) != 0.0 { 255 } else { 0 }])
    });
    img.save(path)?;
    Ok(())
}

/// Values above 127 are holes.
pub fn load_mask_png(path: &Path) -> Result<HoleMask> {
    let img = image::open(path)
        .map_err(|e| Error::Mask(format!("cannot read mask {}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Tensor::from_fn([1, 1, h, w], |_, _, y, x| {
        if img.get_pixel(x as u32, y as u32).0[0] > 127 {
            1.0
        } else {
            0.0
        }
    }))
}

pub fn mask_file_name(kind: MaskKind, interval: &RatioInterval, seed: u64, index: usize) -> String {
    format!("{}_{}_s{seed}_{index:04}.png", kind.name(), interval.label())
}
