//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every function returns RGBA bytes ready for `ImageData`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;
use wfm_core::data::{tensor_to_rgb, toy_scene, ScenePair};
use wfm_core::fourier::{MixerVariant, StandaloneMixer};
use wfm_core::masks::{generate_mask, mask_ratio, MaskKind, MaskSpec, RatioInterval};
use wfm_core::Tensor;

fn err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn rgba(img: &wfm_core::data::RgbImage) -> Vec<u8> {
    img.pixels().flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

fn scene(seed: u64, height: usize) -> wfm_core::Result<ScenePair> {
    toy_scene(&mut ChaCha8Rng::seed_from_u64(seed), height, 2 * height)
}

/// A rendered room: empty, cluttered and semantic layers.
#[wasm_bindgen]
pub struct Room {
    width: usize,
    height: usize,
    empty: Vec<u8>,
    cluttered: Vec<u8>,
    semantic: Vec<u8>,
    clutter_ratio: f64,
}

#[wasm_bindgen]
impl Room {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }
    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn empty(&self) -> Vec<u8> {
        self.empty.clone()
    }
    pub fn cluttered(&self) -> Vec<u8> {
        self.cluttered.clone()
    }
    pub fn semantic(&self) -> Vec<u8> {
        self.semantic.clone()
    }
    #[wasm_bindgen(getter, js_name = clutterRatio)]
    pub fn clutter_ratio(&self) -> f64 {
        self.clutter_ratio
    }
}

pub fn render_room_impl(seed: u64, height: usize) -> wfm_core::Result<Room> {
    let s = scene(seed, height)?;
    Ok(Room {
        width: 2 * height,
        height,
        empty: rgba(&tensor_to_rgb(&s.empty)?),
        cluttered: rgba(&tensor_to_rgb(&s.cluttered)?),
        semantic: rgba(&s.semantics.to_rgb()),
        clutter_ratio: s.semantics.clutter_ratio(),
    })
}

/// Renders toy room `seed` at `height x 2*height`.
#[wasm_bindgen(js_name = renderRoom)]
pub fn render_room(seed: u64, height: usize) -> Result<Room, JsError> {
    render_room_impl(seed, height).map_err(err)
}

/// Masked view plus the hole ratio that was drawn.
#[wasm_bindgen]
pub struct MaskPreview {
    pixels: Vec<u8>,
    ratio: f64,
}

#[wasm_bindgen]
impl MaskPreview {
    pub fn pixels(&self) -> Vec<u8> {
        self.pixels.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn ratio(&self) -> f64 {
        self.ratio
    }
}

pub fn preview_mask_impl(kind: &str, lo: f64, hi: f64, room_seed: u64, mask_seed: u64, height: usize) -> wfm_core::Result<MaskPreview> {
    let kind: MaskKind = kind.parse()?;
    let s = scene(room_seed, height)?;
    let spec = MaskSpec {
        kind,
        interval: RatioInterval::new(lo, hi)?,
        height,
        width: 2 * height,
    };
    let m = generate_mask(&spec, Some(&s.semantics), &mut ChaCha8Rng::seed_from_u64(mask_seed))?;
    let img = tensor_to_rgb(&s.empty)?;
    let w = 2 * height;
    let pixels = img
        .pixels()
        .enumerate()
        .flat_map(|(i, p)| {
            if m.at(0, 0, i / w, i % w) != 0.0 {
                [255, 255, 255, 255]
            } else {
                [p[0], p[1], p[2], 255]
            }
        })
        .collect();
    Ok(MaskPreview { pixels, ratio: mask_ratio(&m) })
}

/// Draws a `kind` mask with hole ratio in `[lo, hi)` over toy room `room_seed`.
#[wasm_bindgen(js_name = previewMask)]
pub fn preview_mask(kind: &str, lo: f64, hi: f64, room_seed: u64, mask_seed: u64, height: usize) -> Result<MaskPreview, JsError> {
    preview_mask_impl(kind, lo, hi, room_seed, mask_seed, height).map_err(err)
}

/// Magnitude of an untrained mixer's response to a unit impulse, as a heat map.
pub fn impulse_response_impl(variant: &str, seed: u64, height: usize, row: usize, col: usize) -> wfm_core::Result<Vec<u8>> {
    let variant: MixerVariant = variant.parse()?;
    let (h, w, c) = (height, 2 * height, 4);
    let mixer = StandaloneMixer::<f32>::new(c, variant, 3, seed)?;
    let zero = Tensor::<f32>::zeros([1, c, h, w]);
    let base = mixer.apply(&zero)?;
    let x = Tensor::from_fn([1, c, h, w], |_, _, y, xx| if y == row % h && xx == col % w { 1.0 } else { 0.0 });
    let y = mixer.apply(&x)?;
    let mut mag = vec![0.0f32; h * w];
    for ch in 0..c {
        for yy in 0..h {
            for xx in 0..w {
                mag[yy * w + xx] += (y.at(0, ch, yy, xx) - base.at(0, ch, yy, xx)).abs();
            }
        }
    }
    let peak = mag.iter().cloned().fold(0.0f32, f32::max).max(1e-12);
    Ok(mag
        .iter()
        .flat_map(|&v| {
            let t = (v / peak).sqrt();
            [(255.0 * t) as u8, (255.0 * t * t) as u8, (255.0 * (1.0 - t) * 0.4) as u8, 255]
        })
        .collect())
}

/// Heat map of how far a single pixel at `(row, col)` spreads through one mixer.
#[wasm_bindgen(js_name = impulseResponse)]
pub fn impulse_response(variant: &str, seed: u64, height: usize, row: usize, col: usize) -> Result<Vec<u8>, JsError> {
    impulse_response_impl(variant, seed, height, row, col).map_err(err)
}
