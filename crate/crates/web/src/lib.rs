//! Three small views into pmss for the browser: a synthetic sample, the
//! receptive field of a pyramid dilated convolution block, and the maps an
//! SPM refines over its recurrent iterations.
//!
//! Every export returns a flat typed array; `www/index.html` knows the layout.

use pmss::backbone::BackboneConfig;
use pmss::data::{generate, SynthSpec};
use pmss::numerics::{seeded, Tape};
use pmss::spm::{class_prior, init_m0, spm_forward, PdcParams, SpmConfig, SpmParams};
use pmss::Tensor;
use rand::Rng;
use wasm_bindgen::prelude::*;

/// Side of every image the demo shows.
pub const SIZE: usize = 64;

const LABEL_COLORS: [[u8; 3]; 5] = [[20, 20, 28], [230, 80, 60], [70, 190, 100], [80, 110, 230], [240, 200, 60]];

fn spec(seed: u64, vessels: bool) -> SynthSpec {
    let base = if vessels { SynthSpec::vessels() } else { SynthSpec::default() };
    SynthSpec { seed, size: SIZE, train: 1, val: 0, ..base }
}

fn rgba(pixels: impl Iterator<Item = [u8; 3]>) -> Vec<u8> {
    pixels.flat_map(|[r, g, b]| [r, g, b, 255]).collect()
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// RGBA image followed by RGBA label colors, each `SIZE×SIZE×4` bytes.
pub fn sample_rgba(seed: u64, vessels: bool) -> Result<Vec<u8>, String> {
    let data = generate(&spec(seed, vessels)).map_err(|e| e.to_string())?;
    let s = &data.samples[0];
    let plane = SIZE * SIZE;
    let img = s.image.data();
    let mut out = rgba((0..plane).map(|p| [to_byte(img[p]), to_byte(img[plane + p]), to_byte(img[2 * plane + p])]));
    out.extend(rgba(s.label.labels.iter().map(|&l| LABEL_COLORS[l as usize % LABEL_COLORS.len()])));
    Ok(out)
}

/// |∂ y_center / ∂ x| of a randomly initialized PDC block, summed over
/// channels and scaled to `[0, 1]`; `side×side` values.
pub fn pdc_field(dilations: [usize; 4], side: usize, seed: u64) -> Result<Vec<f64>, String> {
    let c = 8;
    let mut rng = seeded(seed);
    let block = PdcParams::new("pdc", c, 1, dilations, false, &mut rng).map_err(|e| e.to_string())?;
    let x = Tensor::from_fn(&[1, c, side, side], |_| rng.gen_range(-1.0..1.0));
    let mut tape = Tape::new();
    let xv = tape.leaf(x, true);
    let y = block.forward(&mut tape, xv).map_err(|e| e.to_string())?;
    // select the center pixel of every output channel with a constant mask
    let center = side / 2 * side + side / 2;
    let mask = Tensor::from_fn(&[1, c, side, side], |i| if i % (side * side) == center { 1.0 } else { 0.0 });
    let mv = tape.constant(mask);
    let picked = tape.mul(y, mv).map_err(|e| e.to_string())?;
    let loss = tape.sum(picked);
    let grads = tape.backward(loss).map_err(|e| e.to_string())?;
    let g = grads.get(xv).ok_or("no gradient reached the input")?.data();
    let plane = side * side;
    let mut field: Vec<f64> = (0..plane).map(|p| (0..c).map(|ch| g[ch * plane + p].abs()).sum()).collect();
    let max = field.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        field.iter_mut().for_each(|v| *v /= max);
    }
    Ok(field)
}

/// Refined maps of one SPM (random weights) on the stem features of a
/// sample: `iterations` RGBA images of `side×side` pixels, each pixel the
/// probability-weighted label color. The first 4 bytes hold `side` (LE u32).
pub fn spm_rgba(seed: u64, iterations: usize, vessels: bool) -> Result<Vec<u8>, String> {
    let err = |e: pmss::Error| e.to_string();
    let spec = spec(seed, vessels);
    let data = generate(&spec).map_err(err)?;
    let sample = &data.samples[0];
    let bb = BackboneConfig::Cnn { channels: vec![16, 32], depths: vec![1, 1], seed }.build().map_err(err)?;
    let mut rng = seeded(seed);
    let cfg = SpmConfig { channels: 8, ..SpmConfig::default() };
    let mut spm = SpmParams::new("spm", bb.channels_at(0), spec.classes, &cfg, &mut rng).map_err(err)?;
    // a fresh matcher leaves features untouched; wake it so iterations differ
    for p in spm.b2_out.params_mut() {
        p.value = Tensor::from_fn(p.value.shape(), |_| rng.gen_range(-0.3..0.3));
    }
    let prior = class_prior([&sample.label], spec.classes, None).map_err(err)?;
    let mut tape = Tape::new();
    let x = tape.constant(sample.image.clone());
    let f = bb.run_stage(&mut tape, 0, x).map_err(err)?;
    let m0 = tape.constant(init_m0(&prior, 1, 1, 1).map_err(err)?.into_tensor());
    let out = spm_forward(&mut tape, f, m0, &spm, iterations).map_err(err)?;
    let (_, k, h, w) = tape.value(out.map).dims4().map_err(err)?;
    let mut bytes = (h as u32).to_le_bytes().to_vec();
    for &m in &out.interim {
        let d = tape.value(m).data();
        let plane = h * w;
        bytes.extend(rgba((0..plane).map(|p| {
            let mut rgb = [0.0; 3];
            for c in 0..k {
                let col = LABEL_COLORS[c % LABEL_COLORS.len()];
                (0..3).for_each(|j| rgb[j] += d[c * plane + p] * col[j] as f64);
            }
            rgb.map(|v| v.round().clamp(0.0, 255.0) as u8)
        })));
    }
    Ok(bytes)
}

#[wasm_bindgen]
pub fn sample(seed: u32, vessels: bool) -> Result<Vec<u8>, JsError> {
    sample_rgba(seed as u64, vessels).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn receptive_field(d1: usize, d2: usize, d3: usize, d4: usize, side: usize) -> Result<Vec<f64>, JsError> {
    pdc_field([d1, d2, d3, d4], side, 0).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn spm_maps(seed: u32, iterations: usize, vessels: bool) -> Result<Vec<u8>, JsError> {
    spm_rgba(seed as u64, iterations, vessels).map_err(|e| JsError::new(&e))
}
