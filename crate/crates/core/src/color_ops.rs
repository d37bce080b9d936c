//! Parameter-free color manipulation of raw inputs.
//!
//! Images are stored row-major with interleaved channels, values kept as
//! reals in `[0, 255]` (no 8-bit quantization).

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Luma weights for R, G and B.
pub const GRAY_COEFFS: [f64; 3] = [0.299, 0.587, 0.114];

/// Reserved token that replaces masked color words.
pub const MASK_TOKEN: &str = "[CLR]";

/// Seed list of candidate color words shipped with the crate.
pub const DEFAULT_LEXICON: &str = include_str!("../assets/color_lexicon.txt");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RgbImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("image must be non-empty, got {height}x{width}")));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "expected {} rgb values for {height}x{width}, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=255.0).contains(*v)) {
            return Err(Error::Data(format!("pixel value {v} outside [0, 255]")));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            pixels.extend_from_slice(&rgb);
        }
        Self { height, width, pixels }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Interleaved `[r, g, b, r, g, b, ...]` values, row-major.
    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let i = (row * self.width + col) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for r in 0..self.height {
            for c in 0..self.width {
                out.set(r, c, self.get(r, self.width - 1 - c));
            }
        }
        out
    }

    /// Bilinear resize using half-pixel centers.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut out = RgbImage::filled(height, width, [0.0; 3]);
        for r in 0..height {
            let fy = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for c in 0..width {
                let fx = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                let (a, b, cc, d) = (self.get(y0, x0), self.get(y0, x1), self.get(y1, x0), self.get(y1, x1));
                let mut px = [0.0; 3];
                for ch in 0..3 {
                    let top = a[ch] * (1.0 - wx) + b[ch] * wx;
                    let bottom = cc[ch] * (1.0 - wx) + d[ch] * wx;
                    px[ch] = top * (1.0 - wy) + bottom * wy;
                }
                out.set(r, c, px);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::Shape(format!(
                "expected {} gray values for {height}x{width}, got {}",
                height * width,
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=255.0).contains(*v)) {
            return Err(Error::Data(format!("pixel value {v} outside [0, 255]")));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }
}

/// Color deprivation: `0.299 R + 0.587 G + 0.114 B` per pixel, unrounded.
pub fn rgb_to_grayscale(image: &RgbImage) -> GrayImage {
    let pixels = image
        .pixels
        .chunks_exact(3)
        .map(|p| {
            let v = GRAY_COEFFS[0] * p[0] + GRAY_COEFFS[1] * p[1] + GRAY_COEFFS[2] * p[2];
            // the weights sum to 1 only up to rounding
            v.clamp(0.0, 255.0)
        })
        .collect();
    GrayImage {
        height: image.height,
        width: image.width,
        pixels,
    }
}

pub fn gray_to_three_channel(image: &GrayImage) -> RgbImage {
    let pixels = image.pixels.iter().flat_map(|&v| [v, v, v]).collect();
    RgbImage {
        height: image.height,
        width: image.width,
        pixels,
    }
}

/// Grayscale conversion followed by channel duplication, the input of the
/// grayscale branch's visual backbone.
pub fn deprive_color(image: &RgbImage) -> RgbImage {
    gray_to_three_channel(&rgb_to_grayscale(image))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence(Vec<String>);

impl TokenSequence {
    pub fn new<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Result<Self> {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        if tokens.iter().any(|t| t.is_empty()) {
            return Err(Error::Data("token sequence contains an empty token".into()));
        }
        Ok(Self(tokens))
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join(" "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColorBank {
    words: BTreeSet<String>,
    mask_token: String,
}

impl ColorBank {
    /// Builds a bank from explicit words; entries are lowercased and
    /// deduplicated.
    pub fn new<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Result<Self> {
        Self::with_mask_token(words, MASK_TOKEN)
    }

    pub fn with_mask_token<S: AsRef<str>>(
        words: impl IntoIterator<Item = S>,
        mask_token: &str,
    ) -> Result<Self> {
        let words: BTreeSet<String> = words
            .into_iter()
            .map(|w| w.as_ref().trim().to_lowercase())
            .filter(|w| !w.is_empty())
            .collect();
        if words.contains(&mask_token.to_lowercase()) {
            return Err(Error::Config(format!("mask token {mask_token} cannot be a color word")));
        }
        if words.is_empty() {
            return Err(Error::EmptyBank { min_count: 0 });
        }
        Ok(Self {
            words,
            mask_token: mask_token.to_string(),
        })
    }

    /// Reads a bank file: one word per line, `#` comment lines ignored.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::new(parse_word_list(&text))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from("# color bank\n");
        for w in &self.words {
            out.push_str(w);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn words(&self) -> &BTreeSet<String> {
        &self.words
    }

    pub fn mask_token(&self) -> &str {
        &self.mask_token
    }

    pub fn contains(&self, token: &str) -> bool {
        self.words.contains(&token.to_lowercase())
    }
}

/// Parses the one-word-per-line list format used by lexicon and bank files.
pub fn parse_word_list(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_lowercase)
        .collect()
}

pub fn default_lexicon() -> BTreeSet<String> {
    parse_word_list(DEFAULT_LEXICON).into_iter().collect()
}

/// Keeps lexicon words whose case-insensitive corpus count reaches `min_count`.
pub fn build_color_bank(
    corpus: &[TokenSequence],
    color_lexicon: &BTreeSet<String>,
    min_count: usize,
) -> Result<ColorBank> {
    if corpus.is_empty() {
        return Err(Error::Data("color bank corpus is empty".into()));
    }
    if color_lexicon.is_empty() {
        return Err(Error::Data("color lexicon is empty".into()));
    }
    if min_count == 0 {
        return Err(Error::Config("min_count must be positive".into()));
    }
    let lexicon: BTreeSet<String> = color_lexicon.iter().map(|w| w.to_lowercase()).collect();
    let mut counts: HashMap<String, usize> = HashMap::new();
    for sentence in corpus {
        for token in sentence.tokens() {
            let lower = token.to_lowercase();
            if lexicon.contains(&lower) {
                *counts.entry(lower).or_default() += 1;
            }
        }
    }
    let words: Vec<String> = lexicon
        .into_iter()
        .filter(|w| counts.get(w).copied().unwrap_or(0) >= min_count)
        .collect();
    if words.is_empty() {
        return Err(Error::EmptyBank { min_count });
    }
    ColorBank::new(words)
}

/// Replaces every bank word with the mask token; length is preserved.
pub fn mask_colors(sentence: &TokenSequence, bank: &ColorBank) -> TokenSequence {
    let tokens = sentence
        .tokens()
        .iter()
        .map(|t| {
            if bank.contains(t) {
                bank.mask_token.clone()
            } else {
                t.clone()
            }
        })
        .collect();
    TokenSequence(tokens)
}

/// Color words of the sentence in order, with their original casing.
pub fn extract_color_prior(sentence: &TokenSequence, bank: &ColorBank) -> Vec<String> {
    sentence
        .tokens()
        .iter()
        .filter(|t| bank.contains(t))
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(words: &[&str]) -> TokenSequence {
        TokenSequence::new(words.iter().copied()).unwrap()
    }

    fn pixel(rgb: [f64; 3]) -> f64 {
        let img = RgbImage::new(1, 1, rgb.to_vec()).unwrap();
        rgb_to_grayscale(&img).pixels()[0]
    }

    #[test]
    fn grayscale_fixed_points_and_primaries() {
        assert!((pixel([255.0, 255.0, 255.0]) - 255.0).abs() < 1e-9);
        assert_eq!(pixel([0.0, 0.0, 0.0]), 0.0);
        assert!((pixel([255.0, 0.0, 0.0]) - 76.245).abs() < 1e-9);
        assert!((pixel([0.0, 255.0, 0.0]) - 149.685).abs() < 1e-9);
        assert!((pixel([0.0, 0.0, 255.0]) - 29.07).abs() < 1e-9);
    }

    #[test]
    fn duplication_of_single_pixel() {
        let g = GrayImage::new(1, 1, vec![42.0]).unwrap();
        let rgb = gray_to_three_channel(&g);
        assert_eq!(rgb.pixels(), &[42.0, 42.0, 42.0]);
        let back = rgb_to_grayscale(&rgb);
        assert!((back.pixels()[0] - 42.0).abs() < 1e-6);
    }

    #[test]
    fn constant_gray_duplicates_to_constant_channels() {
        let g = GrayImage::new(2, 3, vec![10.0; 6]).unwrap();
        assert!(gray_to_three_channel(&g).pixels().iter().all(|&v| v == 10.0));
    }

    #[test]
    fn image_validation() {
        assert!(RgbImage::new(0, 1, vec![]).is_err());
        assert!(RgbImage::new(1, 1, vec![0.0, 0.0]).is_err());
        assert!(RgbImage::new(1, 1, vec![0.0, 300.0, 0.0]).is_err());
    }

    #[test]
    fn bank_from_counts() {
        let corpus = vec![
            seq(&["red", "shirt", "blue"]),
            seq(&["Red", "pink", "bag"]),
            seq(&["red", "blue", "pants"]),
        ];
        let lexicon: BTreeSet<String> = ["red", "blue", "pink"].iter().map(|s| s.to_string()).collect();
        let bank = build_color_bank(&corpus, &lexicon, 2).unwrap();
        let words: Vec<&str> = bank.words().iter().map(String::as_str).collect();
        assert_eq!(words, vec!["blue", "red"]);

        let all = build_color_bank(&corpus, &lexicon, 1).unwrap();
        assert_eq!(all.words(), &lexicon);

        let with_absent: BTreeSet<String> = ["red", "teal"].iter().map(|s| s.to_string()).collect();
        let bank = build_color_bank(&corpus, &with_absent, 1).unwrap();
        assert!(!bank.contains("teal"));

        assert!(matches!(
            build_color_bank(&corpus, &lexicon, 10),
            Err(Error::EmptyBank { min_count: 10 })
        ));
    }

    #[test]
    fn masking_examples() {
        let bank = ColorBank::new(["red", "blue"]).unwrap();
        assert_eq!(mask_colors(&seq(&["a", "red", "shirt"]), &bank), seq(&["a", "[CLR]", "shirt"]));
        let plain = seq(&["the", "man", "walks"]);
        assert_eq!(mask_colors(&plain, &bank), plain);
        assert_eq!(
            mask_colors(&seq(&["blue", "and", "red", "bag"]), &bank),
            seq(&["[CLR]", "and", "[CLR]", "bag"])
        );
        assert_eq!(mask_colors(&seq(&["Blue", "hat"]), &bank), seq(&["[CLR]", "hat"]));
    }

    #[test]
    fn color_prior_examples() {
        let bank = ColorBank::new(["red", "blue"]).unwrap();
        assert_eq!(
            extract_color_prior(&seq(&["a", "red", "shirt", "red", "shoes"]), &bank),
            vec!["red", "red"]
        );
        assert!(extract_color_prior(&seq(&["the", "man"]), &bank).is_empty());
        assert_eq!(extract_color_prior(&seq(&["Blue", "hat"]), &bank), vec!["Blue"]);
    }

    #[test]
    fn bank_rejects_mask_token_and_normalizes() {
        assert!(ColorBank::new(["red", "[clr]"]).is_err());
        let bank = ColorBank::new(["Red", "red", "BLUE"]).unwrap();
        assert_eq!(bank.words().len(), 2);
        assert!(bank.contains("blue"));
    }

    #[test]
    fn lexicon_file_parses() {
        let lex = default_lexicon();
        for w in ["red", "blue", "black", "white", "green", "yellow", "pink", "purple", "gray", "orange"] {
            assert!(lex.contains(w), "{w} missing from lexicon");
        }
        assert!(lex.iter().all(|w| !w.starts_with('#')));
    }

    #[test]
    fn empty_sequence_rejected() {
        assert!(matches!(TokenSequence::new(Vec::<String>::new()), Err(Error::EmptySequence)));
    }

    #[test]
    fn resize_and_flip() {
        let mut img = RgbImage::filled(2, 2, [0.0; 3]);
        img.set(0, 0, [255.0, 0.0, 0.0]);
        let flipped = img.flip_horizontal();
        assert_eq!(flipped.get(0, 1), [255.0, 0.0, 0.0]);
        assert_eq!(flipped.flip_horizontal(), img);
        let same = img.resize_bilinear(2, 2);
        assert_eq!(same, img);
        let constant = RgbImage::filled(6, 4, [9.0, 8.0, 7.0]).resize_bilinear(3, 2);
        assert!(constant.pixels().chunks(3).all(|p| p == [9.0, 8.0, 7.0]));
    }
}
