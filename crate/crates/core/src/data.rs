//! Scene pairs: a procedural equirectangular room renderer, the
//! Structured3D directory adapter, and PNG helpers.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::generator::masked_input;
use crate::kernels::area_resize;
use crate::tensor::Tensor;

pub use image::RgbImage;

pub const VOID: u8 = 0;
pub const WALL: u8 = 1;
pub const FLOOR: u8 = 2;
pub const CEILING: u8 = 3;
pub const CLUTTER: u8 = 4;

/// NYU40 colors used by the semantic renders.
pub const WALL_RGB: [u8; 3] = [174, 199, 232];
pub const FLOOR_RGB: [u8; 3] = [152, 223, 138];
pub const CEILING_RGB: [u8; 3] = [78, 71, 183];
pub const DOOR_RGB: [u8; 3] = [214, 39, 40];
pub const WINDOW_RGB: [u8; 3] = [197, 176, 213];
/// Written for clutter by the toy renderer (NYU40 "otherfurniture").
pub const CLUTTER_RGB: [u8; 3] = [82, 84, 163];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemanticMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl SemanticMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        ensure!(
            labels.len() == height * width,
            Shape,
            "{} labels for a {height}x{width} map",
            labels.len()
        );
        Ok(Self { height, width, labels })
    }

    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn is_clutter(&self, y: usize, x: usize) -> bool {
        self.at(y, x) == CLUTTER
    }

    pub fn clutter_ratio(&self) -> f64 {
        self.labels.iter().filter(|&&l| l == CLUTTER).count() as f64 / self.labels.len() as f64
    }

    /// Nearest-neighbor resampling (labels must not blend).
    pub fn resize(&self, h: usize, w: usize) -> Self {
        let labels = (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                self.at(y * self.height / h, x * self.width / w)
            })
            .collect();
        Self {
            height: h,
            width: w,
            labels,
        }
    }

    pub fn from_rgb(img: &image::RgbImage) -> Self {
        let labels = img.pixels().map(|p| label_of(p.0)).collect();
        Self {
            height: img.height() as usize,
            width: img.width() as usize,
            labels,
        }
    }

    pub fn to_rgb(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Rgb(match self.at(y as usize, x as usize) {
                WALL => WALL_RGB,
                FLOOR => FLOOR_RGB,
                CEILING => CEILING_RGB,
                CLUTTER => CLUTTER_RGB,
                _ => [0, 0, 0],
            })
        })
    }
}

/// Doors and windows stay in the empty renders, so they count as wall.
fn label_of(rgb: [u8; 3]) -> u8 {
    match rgb {
        [0, 0, 0] => VOID,
        WALL_RGB | DOOR_RGB | WINDOW_RGB => WALL,
        FLOOR_RGB => FLOOR,
        CEILING_RGB => CEILING,
        _ => CLUTTER,
    }
}

/// One room: the empty render is the target, the cluttered one only feeds semantics.
#[derive(Clone, Debug)]
pub struct ScenePair {
    pub id: String,
    /// `[1, 3, H, W]` in `[0, 1]`.
    pub empty: Tensor<f32>,
    pub cluttered: Tensor<f32>,
    pub semantics: SemanticMap,
}

pub fn load_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?
        .to_rgb8();
    Ok(rgb_to_tensor(&img))
}

pub fn rgb_to_tensor(img: &image::RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::from_fn([1, 3, h, w], |_, c, y, x| img.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0)
}

pub fn tensor_to_rgb(t: &Tensor<f32>) -> Result<image::RgbImage> {
    let [_, c, h, w] = t.shape();
    ensure!(c == 3, Shape, "expected an RGB tensor, got {c} channels");
    Ok(image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch| (t.at(0, ch, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    }))
}

pub fn save_rgb(path: &Path, t: &Tensor<f32>) -> Result<()> {
    tensor_to_rgb(t)?.save(path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Procedural rooms

#[derive(Clone, Copy)]
struct Aabb {
    lo: [f64; 3],
    hi: [f64; 3],
}

impl Aabb {
    /// Entry distance of a ray from outside, if it hits.
    fn hit(&self, o: [f64; 3], d: [f64; 3]) -> Option<(f64, usize)> {
        let (mut t0, mut t1, mut axis) = (f64::NEG_INFINITY, f64::INFINITY, 0);
        for a in 0..3 {
            if d[a].abs() < 1e-12 {
                if o[a] < self.lo[a] || o[a] > self.hi[a] {
                    return None;
                }
                continue;
            }
            let (mut n, mut f) = ((self.lo[a] - o[a]) / d[a], (self.hi[a] - o[a]) / d[a]);
            if n > f {
                std::mem::swap(&mut n, &mut f);
            }
            if n > t0 {
                t0 = n;
                axis = a;
            }
            t1 = t1.min(f);
        }
        (t0 <= t1 && t0 > 0.0).then_some((t0, axis))
    }

    /// Exit distance of a ray starting inside.
    fn exit(&self, o: [f64; 3], d: [f64; 3]) -> (f64, usize, bool) {
        let mut best = (f64::INFINITY, 0, false);
        for a in 0..3 {
            if d[a].abs() < 1e-12 {
                continue;
            }
            let (plane, positive) = if d[a] > 0.0 { (self.hi[a], true) } else { (self.lo[a], false) };
            let t = (plane - o[a]) / d[a];
            if t < best.0 {
                best = (t, a, positive);
            }
        }
        best
    }
}

struct Room {
    bounds: Aabb,
    boxes: Vec<(Aabb, [f64; 3])>,
    wall_colors: [[f64; 3]; 4],
    stripe: f64,
    floor_a: [f64; 3],
    floor_b: [f64; 3],
    tile: f64,
    ceiling: [f64; 3],
    yaw: f64,
}

fn random_color(rng: &mut impl Rng, lo: f64, hi: f64) -> [f64; 3] {
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

fn scale(c: [f64; 3], k: f64) -> [f64; 3] {
    [c[0] * k, c[1] * k, c[2] * k]
}

impl Room {
    fn random(rng: &mut impl Rng) -> Self {
        let (hx, hz) = (rng.gen_range(2.0..5.0), rng.gen_range(2.0..5.0));
        let cam_h = rng.gen_range(1.2..1.7);
        let height = rng.gen_range(2.5..3.2);
        let (cx, cz) = (rng.gen_range(-0.4..0.4) * hx, rng.gen_range(-0.4..0.4) * hz);
        // camera at the origin
        let bounds = Aabb {
            lo: [-hx - cx, -cam_h, -hz - cz],
            hi: [hx - cx, height - cam_h, hz - cz],
        };
        let n_boxes = rng.gen_range(1..=5);
        let mut boxes = Vec::new();
        let mut tries = 0;
        while boxes.len() < n_boxes && tries < 100 {
            tries += 1;
            let (sx, sz) = (rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8));
            let h = rng.gen_range(0.3..1.5);
            let x = rng.gen_range(bounds.lo[0] + sx..bounds.hi[0] - sx);
            let z = rng.gen_range(bounds.lo[2] + sz..bounds.hi[2] - sz);
            // keep the camera outside every box footprint
            if (x.abs() < sx + 0.3) && (z.abs() < sz + 0.3) {
                continue;
            }
            let b = Aabb {
                lo: [x - sx, bounds.lo[1], z - sz],
                hi: [x + sx, bounds.lo[1] + h, z + sz],
            };
            boxes.push((b, random_color(rng, 0.1, 0.9)));
        }
        let base = random_color(rng, 0.45, 0.85);
        let wall_colors = std::array::from_fn(|i| scale(base, 1.0 - 0.08 * i as f64));
        Self {
            bounds,
            boxes,
            wall_colors,
            stripe: rng.gen_range(0.3..0.6),
            floor_a: random_color(rng, 0.2, 0.5),
            floor_b: random_color(rng, 0.4, 0.7),
            tile: rng.gen_range(0.4..0.8),
            ceiling: random_color(rng, 0.8, 0.95),
            yaw: rng.gen_range(0.0..2.0 * PI),
        }
    }

    fn direction(&self, row: usize, col: usize, h: usize, w: usize) -> [f64; 3] {
        let lon = (col as f64 + 0.5) / w as f64 * 2.0 * PI - PI + self.yaw;
        let lat = PI / 2.0 - (row as f64 + 0.5) / h as f64 * PI;
        [lat.cos() * lon.sin(), lat.sin(), lat.cos() * lon.cos()]
    }

    /// Structural color and label along `d`, plus the wall-hit distance.
    fn structure(&self, d: [f64; 3]) -> ([f64; 3], u8, f64) {
        let (t, axis, positive) = self.bounds.exit([0.0; 3], d);
        let p = [d[0] * t, d[1] * t, d[2] * t];
        match axis {
            1 if !positive => {
                let checker = ((p[0] / self.tile).floor() + (p[2] / self.tile).floor()) as i64;
                let c = if checker.rem_euclid(2) == 0 { self.floor_a } else { self.floor_b };
                (c, FLOOR, t)
            }
            1 => (self.ceiling, CEILING, t),
            _ => {
                let wall = axis / 2 * 2 + positive as usize;
                let along = if axis == 0 { p[2] } else { p[0] };
                let band = ((along / self.stripe).floor() as i64).rem_euclid(2) as f64;
                (scale(self.wall_colors[wall], 0.9 + 0.1 * band), WALL, t)
            }
        }
    }

    fn clutter(&self, d: [f64; 3], limit: f64) -> Option<[f64; 3]> {
        let mut best: Option<(f64, [f64; 3])> = None;
        for (b, color) in &self.boxes {
            if let Some((t, axis)) = b.hit([0.0; 3], d) {
                if t < limit && best.is_none_or(|(bt, _)| t < bt) {
                    let shade = [0.75, 1.0, 0.88][axis];
                    best = Some((t, scale(*color, shade)));
                }
            }
        }
        best.map(|(_, c)| c)
    }
}

/// Random cuboid room rendered twice: without and with 1-5 boxes.
pub fn toy_scene(rng: &mut impl Rng, h: usize, w: usize) -> Result<ScenePair> {
    ensure!(h >= 32, Data, "toy scenes need height >= 32, got {h}");
    ensure!(w == 2 * h, Data, "equirectangular panoramas need W = 2H, got {w}x{h}");
    let room = Room::random(rng);
    let mut empty = Tensor::zeros([1, 3, h, w]);
    let mut cluttered = Tensor::zeros([1, 3, h, w]);
    let mut labels = vec![VOID; h * w];
    for y in 0..h {
        for x in 0..w {
            let d = room.direction(y, x, h, w);
            let (c, label, t) = room.structure(d);
            let (cc, cl) = match room.clutter(d, t) {
                Some(bc) => (bc, CLUTTER),
                None => (c, label),
            };
            for ch in 0..3 {
                empty.set(0, ch, y, x, c[ch] as f32);
                cluttered.set(0, ch, y, x, cc[ch] as f32);
            }
            labels[y * w + x] = cl;
        }
    }
    Ok(ScenePair {
        id: String::new(),
        empty,
        cluttered,
        semantics: SemanticMap::new(h, w, labels)?,
    })
}

// ---------------------------------------------------------------------------
// On-disk corpora

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    /// Scene-id range of the official split.
    pub fn scene_range(self) -> std::ops::Range<u32> {
        match self {
            Split::Train => 0..3000,
            Split::Val => 3000..3250,
            Split::Test => 3250..3500,
        }
    }

    pub fn expected_panoramas(self) -> usize {
        match self {
            Split::Train => 18362,
            Split::Val => 1776,
            Split::Test => 1697,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

/// File locations of one panorama pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneEntry {
    pub id: String,
    pub empty: PathBuf,
    pub cluttered: PathBuf,
    pub semantic: PathBuf,
}

impl SceneEntry {
    /// Loads and resizes to `h x w` (area for images, nearest for labels).
    pub fn load(&self, h: usize, w: usize) -> Result<ScenePair> {
        let fit = |t: Tensor<f32>| {
            if t.height() == h && t.width() == w {
                t
            } else {
                area_resize(&t, h, w)
            }
        };
        let empty = fit(load_rgb(&self.empty)?);
        let cluttered = fit(load_rgb(&self.cluttered)?);
        let sem = image::open(&self.semantic)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", self.semantic.display())))?
            .to_rgb8();
        let mut semantics = SemanticMap::from_rgb(&sem);
        if semantics.height != h || semantics.width != w {
            semantics = semantics.resize(h, w);
        }
        Ok(ScenePair {
            id: self.id.clone(),
            empty,
            cluttered,
            semantics,
        })
    }
}

pub const TOY_INDEX: &str = "index.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ToyIndex {
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub scenes: Vec<ToyRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ToyRecord {
    pub id: String,
    pub empty: String,
    pub cluttered: String,
    pub semantic: String,
}

/// Scene `i` of a toy corpus is rendered from its own seed, so corpora
/// with different sizes share their prefixes.
pub fn toy_scene_seed(corpus_seed: u64, i: usize) -> u64 {
    corpus_seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(i as u64)
}

pub fn toy_corpus(n: usize, h: usize, w: usize, seed: u64) -> Result<Vec<ScenePair>> {
    use rand::SeedableRng;
    (0..n)
        .map(|i| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(toy_scene_seed(seed, i));
            let mut s = toy_scene(&mut rng, h, w)?;
            s.id = format!("toy_{i:05}");
            Ok(s)
        })
        .collect()
}

/// Writes PNG triplets plus `index.json`.
pub fn write_toy_corpus(dir: &Path, n: usize, h: usize, w: usize, seed: u64) -> Result<ToyIndex> {
    fs::create_dir_all(dir)?;
    let mut scenes = Vec::with_capacity(n);
    for s in toy_corpus(n, h, w, seed)? {
        let rec = ToyRecord {
            empty: format!("{}_empty.png", s.id),
            cluttered: format!("{}_full.png", s.id),
            semantic: format!("{}_semantic.png", s.id),
            id: s.id.clone(),
        };
        save_rgb(&dir.join(&rec.empty), &s.empty)?;
        save_rgb(&dir.join(&rec.cluttered), &s.cluttered)?;
        s.semantics.to_rgb().save(dir.join(&rec.semantic))?;
        scenes.push(rec);
    }
    let index = ToyIndex {
        height: h,
        width: w,
        seed,
        scenes,
    };
    fs::write(dir.join(TOY_INDEX), serde_json::to_vec_pretty(&index)?)?;
    Ok(index)
}

/// Lists the panoramas of `split` under `root`.
///
/// A directory holding `index.json` is a toy corpus and forms a single
/// split. Otherwise the Structured3D layout is expected:
/// `scene_XXXXX/2D_rendering/<room>/panorama/{empty,full}/rgb_<lighting>light.png`
/// and `full/semantic.png`.
pub fn list_split(root: &Path, split: Split, lighting: &str) -> Result<Vec<SceneEntry>> {
    let toy = root.join(TOY_INDEX);
    if toy.exists() {
        let index: ToyIndex = serde_json::from_slice(&fs::read(&toy)?)?;
        return Ok(index
            .scenes
            .into_iter()
            .map(|r| SceneEntry {
                id: r.id,
                empty: root.join(r.empty),
                cluttered: root.join(r.cluttered),
                semantic: root.join(r.semantic),
            })
            .collect());
    }
    let mut out = Vec::new();
    let range = split.scene_range();
    let mut scenes: Vec<(u32, PathBuf)> = match fs::read_dir(root) {
        Ok(rd) => rd
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                let id: u32 = name.strip_prefix("scene_")?.parse().ok()?;
                range.contains(&id).then(|| (id, e.path()))
            })
            .collect(),
        Err(e) => {
            log::warn!("dataset root {} unreadable: {e}", root.display());
            Vec::new()
        }
    };
    scenes.sort();
    let rgb = format!("rgb_{lighting}light.png");
    for (id, dir) in scenes {
        let render = dir.join("2D_rendering");
        let mut rooms: Vec<PathBuf> = match fs::read_dir(&render) {
            Ok(rd) => rd.filter_map(|e| e.ok()).map(|e| e.path()).collect(),
            Err(_) => continue,
        };
        rooms.sort();
        for room in rooms {
            let pano = room.join("panorama");
            let entry = SceneEntry {
                id: format!(
                    "scene_{id:05}/{}",
                    room.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
                ),
                empty: pano.join("empty").join(&rgb),
                cluttered: pano.join("full").join(&rgb),
                semantic: pano.join("full").join("semantic.png"),
            };
            if !entry.empty.exists() {
                log::info!("skipping {}: no empty-room rendering", entry.id);
                continue;
            }
            if !entry.cluttered.exists() || !entry.semantic.exists() {
                log::info!("skipping {}: incomplete full-room rendering", entry.id);
                continue;
            }
            out.push(entry);
        }
    }
    if out.len() != split.expected_panoramas() {
        log::warn!(
            "{split:?} split under {} has {} panoramas, the official split has {}",
            root.display(),
            out.len(),
            split.expected_panoramas()
        );
    }
    Ok(out)
}

/// Network input, target and mask for one pair. The cluttered render is
/// never read here.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub input: Tensor<f32>,
    pub target: Tensor<f32>,
    pub mask: Tensor<f32>,
}

pub fn make_training_sample(pair: &ScenePair, mask: &Tensor<f32>) -> Result<TrainingSample> {
    Ok(TrainingSample {
        input: masked_input(&pair.empty, mask)?,
        target: pair.empty.clone(),
        mask: mask.clone(),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ClutterStats {
    pub ratios: Vec<f64>,
    /// 5% bins over `[0, 1]`.
    pub histogram: Vec<usize>,
    pub mean: f64,
    pub p75: f64,
}

pub fn clutter_statistics<'a>(maps: impl IntoIterator<Item = &'a SemanticMap>) -> Result<ClutterStats> {
    let mut ratios: Vec<f64> = maps.into_iter().map(SemanticMap::clutter_ratio).collect();
    ensure!(!ratios.is_empty(), Data, "no scenes to summarize");
    let mut histogram = vec![0; 20];
    for &r in &ratios {
        histogram[((r / 0.05) as usize).min(19)] += 1;
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let mut sorted = ratios.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite ratios"));
    let rank = 0.75 * (sorted.len() - 1) as f64;
    let (lo, hi) = (rank.floor() as usize, rank.ceil() as usize);
    let p75 = sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64);
    ratios.shrink_to_fit();
    Ok(ClutterStats {
        ratios,
        histogram,
        mean,
        p75,
    })
}
