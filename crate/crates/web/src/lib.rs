//! Browser demo: synthetic pedestrians, color deprivation and caption
//! color masking, compiled to WebAssembly.
//!
//! The plain functions take and return RGBA bytes as used by a canvas
//! `ImageData`; the `#[wasm_bindgen]` exports are thin wrappers over them.

use caibc::color_ops::{deprive_color, extract_color_prior, mask_colors, ColorBank, RgbImage, DEFAULT_LEXICON};
use caibc::data::{synth_generate, tokenize, SynthSpec};
use caibc::{Error, Result};
use serde::Serialize;
use wasm_bindgen::prelude::*;

pub fn rgba_to_image(rgba: &[u8], width: usize, height: usize) -> Result<RgbImage> {
    if rgba.len() != width * height * 4 {
        return Err(Error::Shape(format!(
            "expected {} rgba bytes for {width}x{height}, got {}",
            width * height * 4,
            rgba.len()
        )));
    }
    let pixels = rgba.chunks_exact(4).flat_map(|p| p[..3].iter().map(|&v| f64::from(v))).collect();
    RgbImage::new(height, width, pixels)
}

pub fn image_to_rgba(image: &RgbImage) -> Vec<u8> {
    image
        .pixels()
        .chunks_exact(3)
        .flat_map(|p| [p[0], p[1], p[2]].map(|v| v.round().clamp(0.0, 255.0) as u8).into_iter().chain([255]))
        .collect()
}

/// The image the grayscale branch sees.
pub fn grayscale_view(rgba: &[u8], width: usize, height: usize) -> Result<Vec<u8>> {
    Ok(image_to_rgba(&deprive_color(&rgba_to_image(rgba, width, height)?)))
}

/// Pixel-level color residual, RGB minus its grayscale, offset to mid gray.
pub fn color_residual_view(rgba: &[u8], width: usize, height: usize) -> Result<Vec<u8>> {
    let image = rgba_to_image(rgba, width, height)?;
    let gray = deprive_color(&image);
    let pixels = image
        .pixels()
        .iter()
        .zip(gray.pixels())
        .map(|(c, g)| (c - g + 128.0).clamp(0.0, 255.0))
        .collect();
    Ok(image_to_rgba(&RgbImage::new(height, width, pixels)?))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskedCaption {
    pub tokens: Vec<String>,
    pub masked: Vec<String>,
    pub prior: Vec<String>,
}

/// Masks color words of `caption` with the shipped lexicon plus any
/// comma or whitespace separated `extra_words`.
pub fn mask_caption(caption: &str, extra_words: &str) -> Result<MaskedCaption> {
    let words = caibc::color_ops::parse_word_list(DEFAULT_LEXICON)
        .into_iter()
        .chain(extra_words.split([',', ' ', '\n']).map(str::to_string));
    let bank = ColorBank::new(words)?;
    let seq = tokenize(caption)?;
    Ok(MaskedCaption {
        tokens: seq.tokens().to_vec(),
        masked: mask_colors(&seq, &bank).tokens().to_vec(),
        prior: extract_color_prior(&seq, &bank),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Person {
    pub width: usize,
    pub height: usize,
    pub rgba: Vec<u8>,
    pub caption: String,
    /// Index of the identity's color twin, if it has one.
    pub twin: Option<usize>,
}

/// Renders identity `index` of a small synthetic population.
pub fn synth_person(seed: u64, index: usize) -> Result<Person> {
    let spec = SynthSpec {
        identities: 16,
        images_per_identity: 1,
        captions_per_image: 1,
        seed,
        ..SynthSpec::default()
    };
    let data = synth_generate(&spec)?;
    let record = data
        .manifest
        .records
        .iter()
        .find(|r| r.identity == index)
        .ok_or_else(|| Error::Data(format!("identity {index} out of range (0..{})", spec.identities)))?;
    let image = &data.manifest.images[record.image].image;
    Ok(Person {
        width: image.width(),
        height: image.height(),
        rgba: image_to_rgba(image),
        caption: record.caption.clone(),
        twin: data.twin[index],
    })
}

fn js_err(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(js_name = grayscaleView)]
pub fn grayscale_view_js(rgba: &[u8], width: usize, height: usize) -> std::result::Result<Vec<u8>, JsError> {
    grayscale_view(rgba, width, height).map_err(js_err)
}

#[wasm_bindgen(js_name = colorResidualView)]
pub fn color_residual_view_js(rgba: &[u8], width: usize, height: usize) -> std::result::Result<Vec<u8>, JsError> {
    color_residual_view(rgba, width, height).map_err(js_err)
}

/// JSON `{tokens, masked, prior}`.
#[wasm_bindgen(js_name = maskCaption)]
pub fn mask_caption_js(caption: &str, extra_words: &str) -> std::result::Result<String, JsError> {
    let m = mask_caption(caption, extra_words).map_err(js_err)?;
    serde_json::to_string(&m).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = SynthPerson)]
pub struct SynthPersonJs(Person);

#[wasm_bindgen(js_class = SynthPerson)]
impl SynthPersonJs {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, index: usize) -> std::result::Result<SynthPersonJs, JsError> {
        synth_person(u64::from(seed), index).map(SynthPersonJs).map_err(js_err)
    }

    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.0.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.0.height
    }

    #[wasm_bindgen(getter)]
    pub fn rgba(&self) -> Vec<u8> {
        self.0.rgba.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn caption(&self) -> String {
        self.0.caption.clone()
    }

    /// -1 when the identity has no twin.
    #[wasm_bindgen(getter)]
    pub fn twin(&self) -> i32 {
        self.0.twin.map_or(-1, |t| t as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgba_round_trip() {
        let rgba = vec![10, 20, 30, 255, 200, 100, 0, 255];
        let image = rgba_to_image(&rgba, 2, 1).unwrap();
        assert_eq!(image.get(0, 1), [200.0, 100.0, 0.0]);
        assert_eq!(image_to_rgba(&image), rgba);
        assert!(rgba_to_image(&rgba, 3, 1).is_err());
    }

    #[test]
    fn gray_view_has_equal_channels() {
        let rgba = vec![255, 0, 0, 255, 0, 0, 255, 255];
        let g = grayscale_view(&rgba, 2, 1).unwrap();
        assert_eq!(&g[..4], &[76, 76, 76, 255]);
        assert_eq!(&g[4..], &[29, 29, 29, 255]);
    }

    #[test]
    fn residual_of_gray_is_flat() {
        let rgba = vec![90, 90, 90, 255, 0, 0, 0, 255];
        assert_eq!(color_residual_view(&rgba, 2, 1).unwrap(), vec![128, 128, 128, 255, 128, 128, 128, 255]);
    }

    #[test]
    fn caption_masking() {
        let m = mask_caption("A man in a Red shirt and teal shoes", "teal").unwrap();
        assert_eq!(m.prior, vec!["red", "teal"]);
        assert_eq!(m.masked.len(), m.tokens.len());
        assert_eq!(m.masked.iter().filter(|t| *t == "[CLR]").count(), 2);
    }

    #[test]
    fn synthetic_people_are_deterministic() {
        let a = synth_person(3, 5).unwrap();
        assert_eq!(a, synth_person(3, 5).unwrap());
        assert_eq!(a.rgba.len(), a.width * a.height * 4);
        assert!(!a.caption.is_empty());
        assert!(synth_person(3, 16).is_err());
    }
}
