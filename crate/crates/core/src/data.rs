//! Dataset manifests, tokenization, batch sampling and the synthetic
//! pedestrian generator.
//!
//! A manifest is a JSON-lines file. The first line is a header
//! `{"format": "caibc-manifest/1", "split": "train"}`; every following line
//! is a record `{"image": "<path>", "caption": "<text>", "identity": <int>}`
//! with image paths relative to the manifest. Images are binary PPM (P6).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::color_ops::{RgbImage, TokenSequence};
use crate::error::{Error, Result};

pub const MANIFEST_FORMAT: &str = "caibc-manifest/1";
pub const SYNTH_FORMAT: &str = "caibc-synth/1";

/// Lowercases, turns punctuation into spaces (hyphens between two
/// alphanumerics survive) and splits on whitespace.
pub fn tokenize(caption: &str) -> Result<TokenSequence> {
    let chars: Vec<char> = caption.chars().collect();
    let mut cleaned = String::with_capacity(caption.len());
    for (i, &ch) in chars.iter().enumerate() {
        if ch.is_alphanumeric() {
            cleaned.extend(ch.to_lowercase());
        } else if ch == '-'
            && i > 0
            && chars[i - 1].is_alphanumeric()
            && chars.get(i + 1).is_some_and(|c| c.is_alphanumeric())
        {
            cleaned.push('-');
        } else {
            cleaned.push(' ');
        }
    }
    let tokens: Vec<&str> = cleaned.split_whitespace().collect();
    if tokens.is_empty() {
        return Err(Error::EmptySequence);
    }
    TokenSequence::new(tokens)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEntry {
    /// Path relative to the manifest, if the image came from disk.
    pub path: Option<String>,
    pub image: RgbImage,
}

/// One image-caption pair. `image` indexes [`DatasetManifest::images`].
#[derive(Debug, Clone, PartialEq)]
pub struct PersonRecord {
    pub image: usize,
    pub caption: String,
    pub identity: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub split: Split,
    pub images: Vec<ImageEntry>,
    pub records: Vec<PersonRecord>,
    pub num_identities: usize,
    /// Identity as written in the file -> contiguous index.
    pub identity_map: BTreeMap<i64, usize>,
}

impl DatasetManifest {
    /// Builds a manifest from raw identities, remapping them to `0..Q` in
    /// ascending order.
    pub fn from_raw(split: Split, images: Vec<ImageEntry>, raw: Vec<(usize, String, i64)>) -> Result<Self> {
        let mut bad = Vec::new();
        for (line, (img, caption, _)) in raw.iter().enumerate() {
            if caption.trim().is_empty() || tokenize(caption).is_err() {
                bad.push(format!("record {line}: empty caption"));
            }
            if *img >= images.len() {
                bad.push(format!("record {line}: image index {img} out of range"));
            }
        }
        if !bad.is_empty() {
            return Err(Error::Data(bad.join("; ")));
        }
        let identity_map: BTreeMap<i64, usize> = raw
            .iter()
            .map(|r| r.2)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .enumerate()
            .map(|(i, id)| (id, i))
            .collect();
        let records = raw
            .into_iter()
            .map(|(image, caption, id)| PersonRecord {
                image,
                caption,
                identity: identity_map[&id],
            })
            .collect();
        Ok(Self {
            split,
            images,
            records,
            num_identities: identity_map.len(),
            identity_map,
        })
    }

    pub fn is_remapped(&self) -> bool {
        self.identity_map.iter().any(|(k, v)| *k != *v as i64)
    }

    pub fn records_of(&self, identity: usize) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].identity == identity).collect()
    }

    /// Identity of every image (taken from its first record).
    pub fn image_identities(&self) -> Vec<usize> {
        let mut ids = vec![usize::MAX; self.images.len()];
        for r in &self.records {
            if ids[r.image] == usize::MAX {
                ids[r.image] = r.identity;
            }
        }
        ids
    }

    /// Keeps only the given identities (in their original label order),
    /// dropping unused images and relabelling to `0..Q'`.
    pub fn subset_identities(&self, keep: &BTreeSet<usize>, split: Split) -> Result<Self> {
        let mut image_map = BTreeMap::new();
        let mut images = Vec::new();
        let mut raw = Vec::new();
        for r in self.records.iter().filter(|r| keep.contains(&r.identity)) {
            let idx = *image_map.entry(r.image).or_insert_with(|| {
                images.push(self.images[r.image].clone());
                images.len() - 1
            });
            raw.push((idx, r.caption.clone(), r.identity as i64));
        }
        Self::from_raw(split, images, raw)
    }

    /// Keeps only the given images and their records; labels are unchanged.
    pub fn subset_images(&self, keep: &BTreeSet<usize>, split: Split) -> Self {
        let mut image_map = BTreeMap::new();
        let mut images = Vec::new();
        for &i in keep {
            image_map.insert(i, images.len());
            images.push(self.images[i].clone());
        }
        let records = self
            .records
            .iter()
            .filter(|r| keep.contains(&r.image))
            .map(|r| PersonRecord {
                image: image_map[&r.image],
                caption: r.caption.clone(),
                identity: r.identity,
            })
            .collect();
        Self {
            split,
            images,
            records,
            num_identities: self.num_identities,
            identity_map: self.identity_map.clone(),
        }
    }

    /// Returns a copy with identity labels replaced by `perm[label]`.
    pub fn relabel(&self, perm: &[usize]) -> Self {
        let mut out = self.clone();
        for r in &mut out.records {
            r.identity = perm[r.identity];
        }
        out
    }

    pub fn captions(&self) -> Result<Vec<TokenSequence>> {
        self.records.iter().map(|r| tokenize(&r.caption)).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    split: Split,
}

#[derive(Serialize, Deserialize)]
struct RawRecord {
    image: String,
    caption: String,
    identity: i64,
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let base = path.parent().unwrap_or(Path::new("."));
    let file = fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let header: Header = loop {
        match lines.next() {
            None => return Err(Error::parse(path, "missing header line")),
            Some((_, line)) => {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line).map_err(|e| Error::parse(path, format!("header: {e}")))?;
            }
        }
    };
    if header.format != MANIFEST_FORMAT {
        return Err(Error::Version {
            expected: MANIFEST_FORMAT.into(),
            found: header.format,
        });
    }
    let mut images = Vec::new();
    let mut by_path: BTreeMap<String, usize> = BTreeMap::new();
    let mut raw = Vec::new();
    for (n, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawRecord =
            serde_json::from_str(&line).map_err(|e| Error::parse(path, format!("line {}: {e}", n + 1)))?;
        let idx = match by_path.get(&rec.image) {
            Some(&i) => i,
            None => {
                let image = read_ppm(&base.join(&rec.image))?;
                images.push(ImageEntry {
                    path: Some(rec.image.clone()),
                    image,
                });
                by_path.insert(rec.image.clone(), images.len() - 1);
                images.len() - 1
            }
        };
        raw.push((idx, rec.caption, rec.identity));
    }
    DatasetManifest::from_raw(header.split, images, raw)
}

/// Writes `<dir>/<name>` and any images without a path to
/// `<dir>/images/<name stem>_<index>.ppm`.
pub fn save_manifest(manifest: &DatasetManifest, dir: &Path, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("images"))?;
    let stem = Path::new(name).file_stem().and_then(|s| s.to_str()).unwrap_or("img");
    let mut paths = Vec::with_capacity(manifest.images.len());
    for (i, entry) in manifest.images.iter().enumerate() {
        let rel = match &entry.path {
            Some(p) => p.clone(),
            None => format!("images/{stem}_{i:05}.ppm"),
        };
        write_ppm(&dir.join(&rel), &entry.image)?;
        paths.push(rel);
    }
    let reverse: BTreeMap<usize, i64> = manifest.identity_map.iter().map(|(k, v)| (*v, *k)).collect();
    let out_path = dir.join(name);
    let mut out = std::io::BufWriter::new(fs::File::create(&out_path)?);
    let header = Header {
        format: MANIFEST_FORMAT.into(),
        split: manifest.split,
    };
    writeln!(out, "{}", serde_json::to_string(&header)?)?;
    for r in &manifest.records {
        let rec = RawRecord {
            image: paths[r.image].clone(),
            caption: r.caption.clone(),
            identity: reverse.get(&r.identity).copied().unwrap_or(r.identity as i64),
        };
        writeln!(out, "{}", serde_json::to_string(&rec)?)?;
    }
    out.flush()?;
    Ok(out_path)
}

pub fn write_ppm(path: &Path, image: &RgbImage) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut bytes = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    bytes.extend(image.pixels().iter().map(|v| v.round().clamp(0.0, 255.0) as u8));
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path)?;
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(path, "truncated PPM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(Error::parse(path, format!("expected P6, found {}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::parse(path, format!("bad PPM number {s:?}")));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(Error::parse(path, "only 8-bit PPM is supported"));
    }
    let data = bytes.get(pos..pos + w * h * 3).ok_or_else(|| Error::parse(path, "truncated PPM data"))?;
    RgbImage::new(h, w, data.iter().map(|&b| b as f64).collect())
}

/// Draws `ids_per_batch` distinct identities and `batch_size / ids_per_batch`
/// records of each (with replacement only when an identity has too few).
pub fn identity_batch_sample(
    manifest: &DatasetManifest,
    batch_size: usize,
    ids_per_batch: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if ids_per_batch == 0 || !batch_size.is_multiple_of(ids_per_batch) {
        return Err(Error::Config(format!(
            "batch size {batch_size} is not divisible by {ids_per_batch} identities"
        )));
    }
    if manifest.num_identities < 2 {
        return Err(Error::Data("identity sampling needs at least two identities".into()));
    }
    if ids_per_batch > manifest.num_identities {
        return Err(Error::Config(format!(
            "{ids_per_batch} identities per batch but only {} exist",
            manifest.num_identities
        )));
    }
    let per_id = batch_size / ids_per_batch;
    let mut by_id = vec![Vec::new(); manifest.num_identities];
    for (i, r) in manifest.records.iter().enumerate() {
        by_id[r.identity].push(i);
    }
    let mut out = Vec::with_capacity(batch_size);
    for id in index::sample(rng, manifest.num_identities, ids_per_batch) {
        let pool = &by_id[id];
        if pool.len() >= per_id {
            out.extend(index::sample(rng, pool.len(), per_id).into_iter().map(|j| pool[j]));
        } else {
            out.extend((0..per_id).map(|_| *pool.choose(rng).expect("every identity has a record")));
        }
    }
    Ok(out)
}

/// Uniform sample of distinct records, ignoring identity labels.
pub fn uniform_batch_sample(manifest: &DatasetManifest, batch_size: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if batch_size < 2 || batch_size > manifest.records.len() {
        return Err(Error::Config(format!(
            "batch size {batch_size} needs between 2 and {} records",
            manifest.records.len()
        )));
    }
    Ok(index::sample(rng, manifest.records.len(), batch_size).into_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motif {
    Plain,
    Striped,
    Dotted,
    Checkered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Accessory {
    None,
    Bag,
    Hat,
    Backpack,
}

pub const MOTIFS: [Motif; 4] = [Motif::Plain, Motif::Striped, Motif::Dotted, Motif::Checkered];
pub const ACCESSORIES: [Accessory; 4] = [Accessory::None, Accessory::Bag, Accessory::Hat, Accessory::Backpack];

/// Named garment colors used by the generator.
pub const PALETTE: [(&str, [u8; 3]); 10] = [
    ("red", [200, 30, 30]),
    ("blue", [30, 60, 200]),
    ("green", [30, 150, 50]),
    ("yellow", [230, 210, 40]),
    ("black", [25, 25, 25]),
    ("white", [235, 235, 235]),
    ("orange", [240, 130, 20]),
    ("purple", [120, 40, 160]),
    ("pink", [240, 140, 180]),
    ("gray", [128, 128, 128]),
];

const SKIN: [u8; 3] = [210, 170, 140];
const SHOES: [u8; 3] = [70, 50, 40];
const GEAR: [u8; 3] = [95, 70, 50];
const DARK_MARK: [u8; 3] = [15, 15, 15];
const LIGHT_MARK: [u8; 3] = [245, 245, 245];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Attributes {
    /// Index into [`PALETTE`].
    pub upper: usize,
    pub lower: usize,
    pub motif: Motif,
    pub accessory: Accessory,
}

impl Attributes {
    pub fn colors(&self) -> [&'static str; 2] {
        [PALETTE[self.upper].0, PALETTE[self.lower].0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub format: String,
    pub identities: usize,
    pub images_per_identity: usize,
    pub captions_per_image: usize,
    /// Fraction of identities that have a color twin.
    pub ambiguity: f64,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Maximum figure offset in pixels.
    pub jitter: usize,
    /// Amplitude of uniform pixel noise.
    pub noise: u8,
    /// Maximum relative deviation of the per-image, per-channel gain that
    /// simulates camera color casts.
    pub color_cast: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            format: SYNTH_FORMAT.into(),
            identities: 40,
            images_per_identity: 4,
            captions_per_image: 2,
            ambiguity: 0.5,
            seed: 0,
            height: 48,
            width: 16,
            jitter: 1,
            noise: 6,
            color_cast: 0.0,
        }
    }
}

impl SynthSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(format!("generator spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn twin_pairs(&self) -> usize {
        (self.ambiguity * self.identities as f64 / 2.0).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != SYNTH_FORMAT {
            return Err(Error::Version {
                expected: SYNTH_FORMAT.into(),
                found: self.format.clone(),
            });
        }
        if self.identities == 0 || self.images_per_identity == 0 || self.captions_per_image == 0 {
            return Err(Error::Config("identity, image and caption counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.color_cast) {
            return Err(Error::Config(format!("color cast must lie in [0, 1), got {}", self.color_cast)));
        }
        if !(0.0..=1.0).contains(&self.ambiguity) {
            return Err(Error::Config(format!("ambiguity must lie in [0, 1], got {}", self.ambiguity)));
        }
        if self.height != 48 || self.width != 16 {
            return Err(Error::Config("the figure template is drawn at 48x16".into()));
        }
        let pairs = self.twin_pairs();
        let color_groups = pairs + self.identities - 2 * pairs;
        let available = PALETTE.len() * (PALETTE.len() - 1);
        if color_groups > available {
            return Err(Error::Config(format!(
                "{color_groups} distinct color combinations needed but only {available} exist"
            )));
        }
        Ok(())
    }
}

/// A generated dataset plus the attributes behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub manifest: DatasetManifest,
    pub attributes: Vec<Attributes>,
    /// The color twin of each identity, if any.
    pub twin: Vec<Option<usize>>,
}

fn assign_attributes(spec: &SynthSpec, rng: &mut impl Rng) -> (Vec<Attributes>, Vec<Option<usize>>) {
    let mut combos: Vec<(usize, usize)> = (0..PALETTE.len())
        .flat_map(|u| (0..PALETTE.len()).filter(move |&l| l != u).map(move |l| (u, l)))
        .collect();
    combos.shuffle(rng);
    let shape = |rng: &mut dyn rand::RngCore| (*MOTIFS.choose(rng).unwrap(), *ACCESSORIES.choose(rng).unwrap());
    let pairs = spec.twin_pairs();
    let mut attrs = Vec::with_capacity(spec.identities);
    let mut twin = vec![None; spec.identities];
    let mut next = combos.into_iter();
    for p in 0..pairs {
        let (upper, lower) = next.next().expect("validated");
        let (m0, a0) = shape(rng);
        let m1 = *MOTIFS.iter().filter(|&&m| m != m0).collect::<Vec<_>>().choose(rng).unwrap();
        attrs.push(Attributes { upper, lower, motif: m0, accessory: a0 });
        attrs.push(Attributes { upper, lower, motif: *m1, accessory: a0 });
        twin[2 * p] = Some(2 * p + 1);
        twin[2 * p + 1] = Some(2 * p);
    }
    for _ in 2 * pairs..spec.identities {
        let (upper, lower) = next.next().expect("validated");
        let (motif, accessory) = shape(rng);
        attrs.push(Attributes { upper, lower, motif, accessory });
    }
    // interleave twins with singles so that label order carries no structure
    let mut order: Vec<usize> = (0..spec.identities).collect();
    order.shuffle(rng);
    let mut position = vec![0; spec.identities];
    for (new, &old) in order.iter().enumerate() {
        position[old] = new;
    }
    let attrs_out = order.iter().map(|&o| attrs[o]).collect();
    let twin_out = order.iter().map(|&o| twin[o].map(|t| position[t])).collect();
    (attrs_out, twin_out)
}

fn mark_color(base: [u8; 3]) -> [u8; 3] {
    let lum = 0.299 * base[0] as f64 + 0.587 * base[1] as f64 + 0.114 * base[2] as f64;
    if lum > 110.0 {
        DARK_MARK
    } else {
        LIGHT_MARK
    }
}

/// Renders a figure; `noise` is added to every channel of every pixel.
pub fn render_person(attrs: &Attributes, dy: isize, dx: isize, noise: u8, rng: &mut impl Rng) -> RgbImage {
    let (h, w) = (48usize, 16usize);
    let mut canvas = vec![[0u8; 3]; h * w];
    for px in canvas.iter_mut() {
        let v = rng.random_range(105..=150u8);
        *px = [v, v, v];
    }
    let fill = |r0: isize, r1: isize, c0: isize, c1: isize, color: [u8; 3], canvas: &mut [[u8; 3]]| {
        for r in r0..r1 {
            for c in c0..c1 {
                let (rr, cc) = (r + dy, c + dx);
                if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                    canvas[rr as usize * w + cc as usize] = color;
                }
            }
        }
    };
    let upper = PALETTE[attrs.upper].1;
    let lower = PALETTE[attrs.lower].1;
    let mark = mark_color(upper);
    fill(2, 9, 5, 11, SKIN, &mut canvas);
    fill(9, 26, 3, 13, upper, &mut canvas);
    match attrs.motif {
        Motif::Plain => {}
        Motif::Striped => {
            for r in (11..25).step_by(3) {
                fill(r, r + 1, 3, 13, mark, &mut canvas);
            }
        }
        Motif::Dotted => {
            for r in (11..25).step_by(4) {
                for c in (4..13).step_by(3) {
                    fill(r, r + 2, c, c + 1, mark, &mut canvas);
                }
            }
        }
        Motif::Checkered => {
            for r in (10..26).step_by(2) {
                for c in (3..13).step_by(2) {
                    if ((r - 10) / 2 + (c - 3) / 2) % 2 == 0 {
                        fill(r, r + 2, c, c + 2, mark, &mut canvas);
                    }
                }
            }
        }
    }
    fill(26, 43, 4, 7, lower, &mut canvas);
    fill(26, 43, 9, 12, lower, &mut canvas);
    fill(26, 29, 4, 12, lower, &mut canvas);
    fill(43, 46, 3, 7, SHOES, &mut canvas);
    fill(43, 46, 9, 13, SHOES, &mut canvas);
    match attrs.accessory {
        Accessory::None => {}
        Accessory::Bag => {
            fill(12, 13, 12, 14, GEAR, &mut canvas);
            fill(13, 24, 13, 14, GEAR, &mut canvas);
            fill(22, 29, 12, 16, GEAR, &mut canvas);
        }
        Accessory::Hat => fill(0, 4, 3, 13, GEAR, &mut canvas),
        Accessory::Backpack => {
            fill(10, 24, 0, 3, GEAR, &mut canvas);
            fill(9, 26, 3, 4, GEAR, &mut canvas);
        }
    }
    let mut pixels = Vec::with_capacity(h * w * 3);
    for px in canvas {
        for ch in px {
            let jitter = if noise == 0 {
                0
            } else {
                rng.random_range(-(noise as i16)..=noise as i16)
            };
            pixels.push((ch as i16 + jitter).clamp(0, 255) as f64);
        }
    }
    RgbImage::new(h, w, pixels).expect("valid canvas")
}

/// Multiplies every channel by its gain, rounding and clamping to [0, 255].
pub fn apply_gains(image: &RgbImage, gains: [f64; 3]) -> RgbImage {
    let pixels = image
        .pixels()
        .iter()
        .enumerate()
        .map(|(i, v)| (v * gains[i % 3]).round().clamp(0.0, 255.0))
        .collect();
    RgbImage::new(image.height(), image.width(), pixels).expect("same shape")
}

fn motif_phrases(m: Motif) -> (&'static [&'static str], &'static [&'static str]) {
    match m {
        Motif::Plain => (&["plain"], &["with no pattern", "without any pattern"]),
        Motif::Striped => (&["striped"], &["with stripes", "with horizontal stripes"]),
        Motif::Dotted => (&["dotted", "spotted"], &["with dots", "with small spots"]),
        Motif::Checkered => (&["checkered", "plaid"], &["with a checkered pattern", "with checks"]),
    }
}

/// A caption built from shuffled attribute clauses.
pub fn describe(attrs: &Attributes, rng: &mut impl Rng) -> String {
    let [upper, lower] = attrs.colors();
    let top = ["shirt", "top", "jacket", "sweater"].choose(rng).unwrap();
    let bottom = ["pants", "trousers", "slacks"].choose(rng).unwrap();
    let (adjs, suffixes) = motif_phrases(attrs.motif);
    let upper_clause = if rng.random_bool(0.5) {
        format!("wearing a {} {upper} {top}", adjs.choose(rng).unwrap())
    } else {
        format!("wearing a {upper} {top} {}", suffixes.choose(rng).unwrap())
    };
    let lower_clause = format!("{} {lower} {bottom}", ["with", "and", "in"].choose(rng).unwrap());
    let acc_clause = match attrs.accessory {
        Accessory::None => ["carrying nothing", "with empty hands"].choose(rng).unwrap().to_string(),
        Accessory::Bag => ["carrying a shoulder bag", "with a bag on the side"].choose(rng).unwrap().to_string(),
        Accessory::Hat => ["wearing a hat", "with a hat on the head"].choose(rng).unwrap().to_string(),
        Accessory::Backpack => ["carrying a backpack", "with a backpack"].choose(rng).unwrap().to_string(),
    };
    let mut clauses = [upper_clause, lower_clause, acc_clause];
    clauses.shuffle(rng);
    let subject = ["a person", "the pedestrian", "a walker", "this person"].choose(rng).unwrap();
    format!("{subject} {}, {} and {}.", clauses[0], clauses[1], clauses[2])
}

/// Deterministic synthetic dataset in a single manifest.
pub fn synth_generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (attributes, twin) = assign_attributes(spec, &mut rng);
    let j = spec.jitter as i32;
    let mut images = Vec::new();
    let mut raw = Vec::new();
    for (id, attrs) in attributes.iter().enumerate() {
        for _ in 0..spec.images_per_identity {
            let (dy, dx) = (rng.random_range(-j..=j) as isize, rng.random_range(-j..=j) as isize);
            let mut image = render_person(attrs, dy, dx, spec.noise, &mut rng);
            if spec.color_cast > 0.0 {
                let c = spec.color_cast;
                let gains: [f64; 3] = std::array::from_fn(|_| rng.random_range(1.0 - c..=1.0 + c));
                image = apply_gains(&image, gains);
            }
            images.push(ImageEntry { path: None, image });
            for _ in 0..spec.captions_per_image {
                raw.push((images.len() - 1, describe(attrs, &mut rng), id as i64));
            }
        }
    }
    let manifest = DatasetManifest::from_raw(Split::Train, images, raw)?;
    Ok(SynthDataset {
        manifest,
        attributes,
        twin,
    })
}

/// Held-out selection for a synthetic dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum SplitMode {
    /// The last `test_images` images of every identity are held out.
    Instance { test_images: usize },
    /// `test_identities` unseen identities are held out; color twins stay
    /// on the same side.
    Identity { test_identities: usize, seed: u64 },
}

impl Default for SplitMode {
    fn default() -> Self {
        SplitMode::Instance { test_images: 1 }
    }
}

pub fn split_dataset(data: &SynthDataset, mode: SplitMode) -> Result<(DatasetManifest, DatasetManifest)> {
    let m = &data.manifest;
    match mode {
        SplitMode::Instance { test_images } => {
            let ids = m.image_identities();
            let mut per_id: Vec<Vec<usize>> = vec![Vec::new(); m.num_identities];
            for (img, &id) in ids.iter().enumerate() {
                per_id[id].push(img);
            }
            if per_id.iter().any(|v| v.len() <= test_images) {
                return Err(Error::Config(format!(
                    "holding out {test_images} images leaves an identity without training images"
                )));
            }
            let test: BTreeSet<usize> = per_id.iter().flat_map(|v| v[v.len() - test_images..].to_vec()).collect();
            let train: BTreeSet<usize> = (0..m.images.len()).filter(|i| !test.contains(i)).collect();
            Ok((m.subset_images(&train, Split::Train), m.subset_images(&test, Split::Test)))
        }
        SplitMode::Identity { test_identities, seed } => {
            let mut groups: Vec<Vec<usize>> = Vec::new();
            let mut seen = BTreeSet::new();
            for id in 0..m.num_identities {
                if seen.insert(id) {
                    let mut group = vec![id];
                    if let Some(t) = data.twin[id] {
                        seen.insert(t);
                        group.push(t);
                    }
                    groups.push(group);
                }
            }
            groups.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut test = BTreeSet::new();
            for g in &groups {
                if test.len() >= test_identities {
                    break;
                }
                test.extend(g.iter().copied());
            }
            let train: BTreeSet<usize> = (0..m.num_identities).filter(|i| !test.contains(i)).collect();
            if train.len() < 2 || test.is_empty() {
                return Err(Error::Config(format!(
                    "{test_identities} held-out identities leave too few for training"
                )));
            }
            Ok((m.subset_identities(&train, Split::Train)?, m.subset_identities(&test, Split::Test)?))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_examples() {
        let t = tokenize("A red, cross-body bag.").unwrap();
        assert_eq!(t.tokens(), ["a", "red", "cross-body", "bag"]);
        assert_eq!(tokenize("Blue  jeans").unwrap().tokens(), ["blue", "jeans"]);
        assert!(tokenize("!!!").is_err());
        assert_eq!(tokenize("-dash- a--b").unwrap().tokens(), ["dash", "a", "b"]);
    }

    fn tiny_manifest(ids: &[i64], captions: &[&str]) -> Result<DatasetManifest> {
        let images = ids
            .iter()
            .map(|_| ImageEntry {
                path: None,
                image: RgbImage::filled(2, 2, [1.0, 2.0, 3.0]),
            })
            .collect();
        let raw = ids.iter().enumerate().map(|(i, &id)| (i, captions[i].to_string(), id)).collect();
        DatasetManifest::from_raw(Split::Train, images, raw)
    }

    #[test]
    fn identity_remapping() {
        let m = tiny_manifest(&[0, 2], &["a", "b"]).unwrap();
        assert_eq!(m.num_identities, 2);
        assert_eq!(m.records[1].identity, 1);
        assert!(m.is_remapped());
        assert_eq!(m.identity_map[&2], 1);
        let err = tiny_manifest(&[0, 1], &["ok", " ,. "]).unwrap_err();
        assert!(err.to_string().contains("record 1"));
    }

    #[test]
    fn ppm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::new(2, 3, (0..18).map(|v| (v * 13) as f64).collect()).unwrap();
        let p = dir.path().join("x.ppm");
        write_ppm(&p, &img).unwrap();
        assert_eq!(read_ppm(&p).unwrap(), img);
        fs::write(&p, b"P3\n1 1\n255\n1 2 3").unwrap();
        assert!(read_ppm(&p).is_err());
    }

    #[test]
    fn sampler_rules() {
        let m = tiny_manifest(&[0, 0, 1, 1, 2, 2, 3, 3], &["a"; 8]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = identity_batch_sample(&m, 8, 4, &mut rng).unwrap();
        assert_eq!(b.len(), 8);
        for chunk in b.chunks(2) {
            assert_eq!(m.records[chunk[0]].identity, m.records[chunk[1]].identity);
        }
        let again = identity_batch_sample(&m, 8, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(b, again);
        assert!(identity_batch_sample(&m, 7, 4, &mut rng).is_err());
        let single = tiny_manifest(&[5, 5], &["a", "b"]).unwrap();
        assert!(identity_batch_sample(&single, 2, 1, &mut rng).is_err());
        // fewer records than requested per identity -> with replacement
        let b = identity_batch_sample(&m, 6, 2, &mut rng).unwrap();
        assert_eq!(b.len(), 6);
    }

    #[test]
    fn synth_counts_and_determinism() {
        let spec = SynthSpec {
            identities: 2,
            images_per_identity: 1,
            captions_per_image: 1,
            ambiguity: 0.0,
            ..SynthSpec::default()
        };
        let a = synth_generate(&spec).unwrap();
        assert_eq!(a.manifest.records.len(), 2);
        assert_eq!(a, synth_generate(&spec).unwrap());
        let other = synth_generate(&SynthSpec { seed: 9, ..spec.clone() }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn synth_spec_validation() {
        assert!(SynthSpec::from_toml("identities = 4\nambiguity = 1.5").is_err());
        assert!(matches!(
            SynthSpec::from_toml("format = \"caibc-synth/0\""),
            Err(Error::Version { .. })
        ));
        assert!(SynthSpec::from_toml("identities = 200").is_err());
        let spec = SynthSpec::from_toml("identities = 6\nseed = 3").unwrap();
        assert_eq!(spec.identities, 6);
        assert_eq!(spec.captions_per_image, 2);
    }

    #[test]
    fn twins_share_colors_only() {
        let spec = SynthSpec {
            identities: 10,
            ambiguity: 1.0,
            ..SynthSpec::default()
        };
        let d = synth_generate(&spec).unwrap();
        for (i, t) in d.twin.iter().enumerate() {
            let t = t.expect("every identity has a twin");
            assert_eq!(d.twin[t], Some(i));
            assert_eq!(d.attributes[i].colors(), d.attributes[t].colors());
            assert_ne!(d.attributes[i].motif, d.attributes[t].motif);
            assert_eq!(d.attributes[i].accessory, d.attributes[t].accessory);
        }
    }

    #[test]
    fn color_cast_scales_channels() {
        let img = RgbImage::new(1, 2, vec![100.0, 200.0, 50.0, 0.0, 255.0, 128.0]).unwrap();
        let out = apply_gains(&img, [1.1, 0.5, 2.0]);
        assert_eq!(out.pixels(), &[110.0, 100.0, 100.0, 0.0, 128.0, 255.0]);
        assert!(SynthSpec { color_cast: 1.0, ..SynthSpec::default() }.validate().is_err());
        let plain = synth_generate(&SynthSpec::default()).unwrap();
        let cast = synth_generate(&SynthSpec { color_cast: 0.2, ..SynthSpec::default() }).unwrap();
        assert_eq!(plain.attributes, cast.attributes);
        assert_ne!(plain.manifest.images[0].image, cast.manifest.images[0].image);
    }

    #[test]
    fn splits_are_disjoint() {
        let spec = SynthSpec {
            identities: 8,
            images_per_identity: 3,
            ambiguity: 1.0,
            ..SynthSpec::default()
        };
        let d = synth_generate(&spec).unwrap();
        let (train, test) = split_dataset(&d, SplitMode::Instance { test_images: 1 }).unwrap();
        assert_eq!(train.images.len(), 16);
        assert_eq!(test.images.len(), 8);
        assert_eq!(test.num_identities, 8);
        let (train, test) = split_dataset(
            &d,
            SplitMode::Identity {
                test_identities: 2,
                seed: 0,
            },
        )
        .unwrap();
        assert_eq!(test.num_identities, 2);
        assert_eq!(train.num_identities, 6);
        assert!(split_dataset(&d, SplitMode::Instance { test_images: 3 }).is_err());
    }

    #[test]
    fn manifest_roundtrip() {
        let spec = SynthSpec {
            identities: 3,
            images_per_identity: 2,
            ..SynthSpec::default()
        };
        let d = synth_generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = save_manifest(&d.manifest, dir.path(), "train.jsonl").unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded.records, d.manifest.records);
        for (a, b) in loaded.images.iter().zip(&d.manifest.images) {
            assert_eq!(a.image, b.image);
        }
        let text = fs::read_to_string(&path).unwrap().replace(MANIFEST_FORMAT, "caibc-manifest/9");
        fs::write(&path, text).unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::Version { .. })));
    }
}
