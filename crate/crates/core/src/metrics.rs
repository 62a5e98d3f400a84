//! Full-reference metrics and the mask-kind x ratio-interval protocol.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ScenePair;
use crate::error::{ensure, Result};
use crate::generator::composite;
use crate::masks::{generate_mask, MaskKind, MaskSpec, RatioInterval, EVAL_INTERVALS};
use crate::tensor::Tensor;

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn same_shape(x: &Tensor<f32>, y: &Tensor<f32>) -> Result<()> {
    ensure!(
        x.shape() == y.shape(),
        Shape,
        "metric inputs {:?} vs {:?}",
        x.shape(),
        y.shape()
    );
    Ok(())
}

pub fn mae(x: &Tensor<f32>, y: &Tensor<f32>) -> Result<f64> {
    same_shape(x, y)?;
    let s: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (*a as f64 - *b as f64).abs()).sum();
    Ok(s / x.len() as f64)
}

pub fn mse(x: &Tensor<f32>, y: &Tensor<f32>) -> Result<f64> {
    same_shape(x, y)?;
    let s: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
    Ok(s / x.len() as f64)
}

fn psnr_of(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    }
}

/// Data range 1; identical images give [`PSNR_CAP`].
pub fn psnr(x: &Tensor<f32>, y: &Tensor<f32>) -> Result<f64> {
    Ok(psnr_of(mse(x, y)?))
}

/// PSNR over the hole pixels (`m = 1`) of every channel.
pub fn psnr_masked(x: &Tensor<f32>, y: &Tensor<f32>, m: &Tensor<f32>) -> Result<f64> {
    same_shape(x, y)?;
    let [n, c, h, w] = x.shape();
    ensure!(m.shape() == [n, 1, h, w], Shape, "mask {:?} for {:?}", m.shape(), x.shape());
    let (mut s, mut k) = (0.0, 0usize);
    for b in 0..n {
        for ch in 0..c {
            for yy in 0..h {
                for xx in 0..w {
                    if m.at(b, 0, yy, xx) != 0.0 {
                        s += (x.at(b, ch, yy, xx) as f64 - y.at(b, ch, yy, xx) as f64).powi(2);
                        k += 1;
                    }
                }
            }
        }
    }
    ensure!(k > 0, Precondition, "mask has no holes");
    Ok(psnr_of(s / k as f64))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-region filtering of one plane.
fn filter(plane: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean local SSIM (11x11 Gaussian, sigma 1.5, valid region), averaged over
/// channels and batch.
pub fn ssim(x: &Tensor<f32>, y: &Tensor<f32>) -> Result<f64> {
    same_shape(x, y)?;
    let [n, c, h, w] = x.shape();
    ensure!(
        h >= SSIM_WINDOW && w >= SSIM_WINDOW,
        Precondition,
        "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
    );
    let k = gaussian_window();
    let plane = h * w;
    let mut total = 0.0;
    for p in 0..n * c {
        let a: Vec<f64> = x.data()[p * plane..(p + 1) * plane].iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = y.data()[p * plane..(p + 1) * plane].iter().map(|&v| v as f64).collect();
        let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).collect::<Vec<_>>();
        let (ma, _, _) = filter(&a, h, w, &k);
        let (mb, _, _) = filter(&b, h, w, &k);
        let (saa, _, _) = filter(&prod(&a, &a), h, w, &k);
        let (sbb, _, _) = filter(&prod(&b, &b), h, w, &k);
        let (sab, _, _) = filter(&prod(&a, &b), h, w, &k);
        let mut s = 0.0;
        for i in 0..ma.len() {
            let (mu_a, mu_b) = (ma[i], mb[i]);
            let va = saa[i] - mu_a * mu_a;
            let vb = sbb[i] - mu_b * mu_b;
            let cov = sab[i] - mu_a * mu_b;
            s += ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (va + vb + SSIM_C2));
        }
        total += s / ma.len() as f64;
    }
    Ok(total / (n * c) as f64)
}

/// Anything mapping (image, hole mask) to a full output image.
pub trait Inpainter {
    fn inpaint(&self, x: &Tensor<f32>, m: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl<F: Fn(&Tensor<f32>, &Tensor<f32>) -> Result<Tensor<f32>>> Inpainter for F {
    fn inpaint(&self, x: &Tensor<f32>, m: &Tensor<f32>) -> Result<Tensor<f32>> {
        self(x, m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalGrid {
    pub kinds: Vec<MaskKind>,
    pub intervals: Vec<RatioInterval>,
    pub seed: u64,
}

impl Default for EvalGrid {
    fn default() -> Self {
        Self {
            kinds: MaskKind::ALL.to_vec(),
            intervals: EVAL_INTERVALS.to_vec(),
            seed: 0,
        }
    }
}

impl EvalGrid {
    /// Validation grid used between training epochs.
    pub fn mini() -> Self {
        Self {
            kinds: vec![MaskKind::Rectangular, MaskKind::Segmentation],
            intervals: vec![EVAL_INTERVALS[1], EVAL_INTERVALS[3]],
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub kind: MaskKind,
    pub interval: RatioInterval,
    pub mae: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub composite: bool,
    pub cells: Vec<CellMetrics>,
}

/// FNV-1a; stable across platforms and releases.
fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for p in parts {
        for &b in *p {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Mask seed of one (scene, cell); independent of iteration order.
pub fn cell_seed(grid_seed: u64, scene: &str, kind: MaskKind, interval: usize) -> u64 {
    fnv1a(&[
        &grid_seed.to_le_bytes(),
        scene.as_bytes(),
        kind.name().as_bytes(),
        &(interval as u64).to_le_bytes(),
    ])
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalOptions {
    /// Replace kept pixels with the input before scoring.
    pub composite: bool,
}

/// Scores `model` on every cell of `grid`. Per-scene values are sorted by
/// scene id before averaging, so the report ignores iteration order.
pub fn evaluate<M: Inpainter + ?Sized>(
    model: &M,
    scenes: impl IntoIterator<Item = Result<ScenePair>>,
    grid: &EvalGrid,
    opts: EvalOptions,
) -> Result<MetricsReport> {
    let cells = grid.kinds.len() * grid.intervals.len();
    ensure!(cells > 0, Config, "evaluation grid is empty");
    let mut per_cell: Vec<Vec<(String, [f64; 3])>> = vec![Vec::new(); cells];
    let mut count = 0;
    for scene in scenes {
        let scene = scene?;
        count += 1;
        let (h, w) = (scene.empty.height(), scene.empty.width());
        for (ki, &kind) in grid.kinds.iter().enumerate() {
            for (ii, &interval) in grid.intervals.iter().enumerate() {
                let spec = MaskSpec {
                    kind,
                    interval,
                    height: h,
                    width: w,
                };
                let mut rng = ChaCha8Rng::seed_from_u64(cell_seed(grid.seed, &scene.id, kind, ii));
                let m = generate_mask(&spec, Some(&scene.semantics), &mut rng)?;
                let mut y = model.inpaint(&scene.empty, &m)?;
                if opts.composite {
                    y = composite(&scene.empty, &y, &m)?;
                }
                let v = [mae(&scene.empty, &y)?, psnr(&scene.empty, &y)?, ssim(&scene.empty, &y)?];
                per_cell[ki * grid.intervals.len() + ii].push((scene.id.clone(), v));
            }
        }
    }
    ensure!(count > 0, Data, "evaluation dataset is empty");
    let mut out = Vec::with_capacity(cells);
    for (ci, mut vals) in per_cell.into_iter().enumerate() {
        vals.sort_by(|a, b| a.0.cmp(&b.0));
        let n = vals.len();
        let mean = |j: usize| vals.iter().map(|v| v.1[j]).sum::<f64>() / n as f64;
        out.push(CellMetrics {
            kind: grid.kinds[ci / grid.intervals.len()],
            interval: grid.intervals[ci % grid.intervals.len()],
            mae: mean(0),
            psnr: mean(1),
            ssim: mean(2),
            n,
        });
    }
    Ok(MetricsReport {
        composite: opts.composite,
        cells: out,
    })
}

#[derive(Serialize)]
struct CsvRow<'a> {
    kind: &'a str,
    interval: String,
    mae: f64,
    psnr: f64,
    ssim: f64,
    n: usize,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for c in &self.cells {
            w.serialize(CsvRow {
                kind: c.kind.name(),
                interval: c.interval.label(),
                mae: c.mae,
                psnr: c.psnr,
                ssim: c.ssim,
                n: c.n,
            })
            .map_err(|e| crate::Error::Data(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| crate::Error::Data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Rows per mask kind, one MAE/PSNR/SSIM column group per interval.
    pub fn to_markdown(&self) -> String {
        let mut intervals: Vec<RatioInterval> = Vec::new();
        let mut rows: BTreeMap<MaskKind, BTreeMap<String, &CellMetrics>> = BTreeMap::new();
        for c in &self.cells {
            if !intervals.contains(&c.interval) {
                intervals.push(c.interval);
            }
            rows.entry(c.kind).or_default().insert(c.interval.label(), c);
        }
        let mut s = String::from("| Mask |");
        for iv in &intervals {
            let l = iv.label();
            s += &format!(" {l}% MAE | {l}% PSNR | {l}% SSIM |");
        }
        s += "\n|---|";
        s += &"---:|".repeat(3 * intervals.len());
        s.push('\n');
        for (kind, cells) in rows {
            s += &format!("| {kind} |");
            for iv in &intervals {
                match cells.get(&iv.label()) {
                    Some(c) => s += &format!(" {:.4} | {:.3} | {:.4} |", c.mae, c.psnr, c.ssim),
                    None => s += " | | |",
                }
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_is_normalized_and_symmetric() {
        let k = gaussian_window();
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(k[0], k[10]);
    }

    #[test]
    fn fnv_reference_value() {
        // FNV-1a of "a" before the separator step
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        h ^= b'a' as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
        assert_eq!(h, 0xaf63_dc4c_8601_ec8c);
    }
}
