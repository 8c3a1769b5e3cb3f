//! Synthetic caption and forensic question-answer sets, and their JSONL
//! codec.
//!
//! Images are a 3x3 grid of flat colored blocks. A fake image has one block
//! overwritten by a per-patch checkerboard of random sign and jittered
//! magnitude, which averages out under global mixing but is plain to a
//! per-patch encoder.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::vision::Image;

pub const CAPTION_QUESTION: &str = "Describe the image.";
pub const IMAGE_QUESTION: &str = "Does the image look real or fake?";

const REGION_NAMES: [&str; 9] = [
    "top left",
    "top middle",
    "top right",
    "middle left",
    "center",
    "middle right",
    "bottom left",
    "bottom middle",
    "bottom right",
];

const ROW_NAMES: [&str; 3] = ["top", "middle", "bottom"];

/// Block colors; every channel is one of 0.2, 0.5, 0.8.
pub const PALETTE: [(&str, [f32; 3]); 9] = [
    ("red", [0.8, 0.2, 0.2]),
    ("green", [0.2, 0.8, 0.2]),
    ("blue", [0.2, 0.2, 0.8]),
    ("yellow", [0.8, 0.8, 0.2]),
    ("cyan", [0.2, 0.8, 0.8]),
    ("magenta", [0.8, 0.2, 0.8]),
    ("gray", [0.5, 0.5, 0.5]),
    ("white", [0.8, 0.8, 0.8]),
    ("black", [0.2, 0.2, 0.2]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Real => "real",
            Label::Fake => "fake",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One `(image, question, answer)` triplet. `label` and `region` describe
/// the image: `region` names the corrupted block and is present exactly when
/// the image is fake. A question about an untouched block of a fake image is
/// answered "real".
#[derive(Debug, Clone, PartialEq)]
pub struct ForensicExample {
    pub image: Image,
    pub question: String,
    pub answer: String,
    pub label: Label,
    pub region: Option<String>,
}

pub type Dataset = Vec<ForensicExample>;

/// Named 3x3 partition of a square patch grid. Outer bands take three
/// eighths of the side each, the middle band the rest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionGrid {
    grid: usize,
    edges: [usize; 4],
}

impl RegionGrid {
    pub fn new(grid: usize) -> Result<Self> {
        if grid < 3 {
            return Err(Error::Config(format!(
                "a {grid}x{grid} patch grid cannot hold 3x3 regions"
            )));
        }
        let outer = ((3 * grid + 4) / 8).max(1);
        Ok(Self {
            grid,
            edges: [0, outer, grid - outer, grid],
        })
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn names(&self) -> &'static [&'static str] {
        &REGION_NAMES
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        REGION_NAMES.iter().position(|&n| n == name)
    }

    /// Patch-grid row and column ranges of region `r` (raster order).
    pub fn bands(&self, r: usize) -> ((usize, usize), (usize, usize)) {
        let (br, bc) = (r / 3, r % 3);
        (
            (self.edges[br], self.edges[br + 1]),
            (self.edges[bc], self.edges[bc + 1]),
        )
    }

    /// Raster indices of the patches in region `r`.
    pub fn patches(&self, r: usize) -> Vec<usize> {
        let ((r0, r1), (c0, c1)) = self.bands(r);
        (r0..r1)
            .flat_map(|y| (c0..c1).map(move |x| y * self.grid + x))
            .collect()
    }

    pub fn region_of_patch(&self, patch: usize) -> usize {
        let band = |v: usize| (0..3).find(|&b| v < self.edges[b + 1]).unwrap_or(2);
        3 * band(patch / self.grid) + band(patch % self.grid)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub image_size: usize,
    pub patch_size: usize,
    /// Peak checkerboard amplitude; zero leaves fake images untouched.
    pub amplitude: f64,
    /// Fraction of questions asking about one named region.
    pub region_question_rate: f64,
    /// For region questions on fake images, the chance that the queried
    /// region is the corrupted one.
    pub region_hit_rate: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub n_captions: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            amplitude: 0.2,
            region_question_rate: 0.5,
            region_hit_rate: 0.75,
            n_train: 2000,
            n_test: 400,
            n_captions: 2000,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} is not a multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        RegionGrid::new(self.image_size / self.patch_size)?;
        if !(0.0..=0.3).contains(&self.amplitude) {
            return Err(Error::Config(format!(
                "amplitude {} outside [0, 0.3]",
                self.amplitude
            )));
        }
        for (name, p) in [
            ("region_question_rate", self.region_question_rate),
            ("region_hit_rate", self.region_hit_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn regions(&self) -> RegionGrid {
        RegionGrid::new(self.image_size / self.patch_size).expect("validated grid")
    }
}

fn block_image(cfg: &GenConfig, grid: &RegionGrid, colors: &[usize; 9]) -> Image {
    let mut img = Image::filled(cfg.image_size, [0.0; 3]);
    let p = cfg.patch_size;
    for (r, &c) in colors.iter().enumerate() {
        let ((r0, r1), (c0, c1)) = grid.bands(r);
        for y in r0 * p..r1 * p {
            for x in c0 * p..c1 * p {
                for (ch, &v) in PALETTE[c].1.iter().enumerate() {
                    img.set(y, x, ch, v);
                }
            }
        }
    }
    img
}

fn random_colors(rng: &mut Rng) -> [usize; 9] {
    let mut colors = [0; 9];
    for c in colors.iter_mut() {
        *c = rng.below(PALETTE.len());
    }
    colors
}

/// Overwrites region `r` with a checkerboard whose sign is drawn per patch
/// and whose magnitude is `amplitude * U(0.5, 1)` per pixel. The same number
/// of draws is made for any amplitude.
fn corrupt(img: &mut Image, cfg: &GenConfig, grid: &RegionGrid, r: usize, rng: &mut Rng) {
    let p = cfg.patch_size;
    for patch in grid.patches(r) {
        let (py, px) = (patch / grid.grid(), patch % grid.grid());
        let sign = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
        for y in py * p..(py + 1) * p {
            for x in px * p..(px + 1) * p {
                let checker = if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
                let mag = cfg.amplitude * rng.uniform_range(0.5, 1.0);
                let delta = (sign * checker * mag) as f32;
                for ch in 0..3 {
                    let v = img.get(y, x, ch) + delta;
                    img.set(y, x, ch, v);
                }
            }
        }
    }
}

fn caption_text(colors: &[usize; 9]) -> String {
    ROW_NAMES
        .iter()
        .enumerate()
        .map(|(row, name)| {
            let names: Vec<&str> = (0..3).map(|c| PALETTE[colors[3 * row + c]].0).collect();
            format!("{} row: {}.", capitalize(name), names.join(", "))
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    Ok(())
}

/// Block images described row by row, e.g. "Top row: red, blue, green. ...".
pub fn gen_caption_set(n: usize, seed: u64, cfg: &GenConfig) -> Result<Dataset> {
    check_n(n)?;
    cfg.validate()?;
    let grid = cfg.regions();
    let root = Rng::new(seed);
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = root.split(i as u64);
            let colors = random_colors(&mut rng);
            ForensicExample {
                image: block_image(cfg, &grid, &colors),
                question: CAPTION_QUESTION.into(),
                answer: caption_text(&colors),
                label: Label::Real,
                region: None,
            }
        })
        .collect())
}

pub fn region_question(region: &str) -> String {
    format!("Does the {region} region look real or fake?")
}

/// Even indices are real, odd indices fake, so the split is exactly
/// `ceil(n/2)` real to `floor(n/2)` fake.
pub fn gen_forensic_set(n: usize, seed: u64, cfg: &GenConfig) -> Result<Dataset> {
    check_n(n)?;
    cfg.validate()?;
    let grid = cfg.regions();
    let root = Rng::new(seed);
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = root.split(i as u64);
            let colors = random_colors(&mut rng);
            let label = if i % 2 == 0 { Label::Real } else { Label::Fake };
            let corrupted = rng.below(9);
            let region_query = rng.bernoulli(cfg.region_question_rate);
            let hit = rng.bernoulli(cfg.region_hit_rate);
            let other = (corrupted + 1 + rng.below(8)) % 9;
            let mut image = block_image(cfg, &grid, &colors);
            let mut noise = rng.split(1);
            if label == Label::Fake {
                corrupt(&mut image, cfg, &grid, corrupted, &mut noise);
            }
            let (question, answer) = match (region_query, label) {
                (false, Label::Real) => (IMAGE_QUESTION.to_string(), "The image looks real.".to_string()),
                (false, Label::Fake) => (
                    IMAGE_QUESTION.to_string(),
                    format!(
                        "The image looks fake. The {} region has unnatural texture.",
                        REGION_NAMES[corrupted]
                    ),
                ),
                (true, Label::Real) => (
                    region_question(REGION_NAMES[rng.below(9)]),
                    "It looks real.".to_string(),
                ),
                (true, Label::Fake) if hit => (
                    region_question(REGION_NAMES[corrupted]),
                    "It looks fake. It has unnatural texture.".to_string(),
                ),
                (true, Label::Fake) => (
                    region_question(REGION_NAMES[other]),
                    "It looks real.".to_string(),
                ),
            };
            ForensicExample {
                image,
                question,
                answer,
                label,
                region: (label == Label::Fake).then(|| REGION_NAMES[corrupted].to_string()),
            }
        })
        .collect())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageRecord {
    shape: [usize; 3],
    data: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExampleRecord {
    image: ImageRecord,
    question: String,
    answer: String,
    label: Label,
    region: Option<String>,
}

fn encode_image(img: &Image) -> ImageRecord {
    let mut bytes = Vec::with_capacity(img.data().len() * 4);
    for v in img.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    ImageRecord {
        shape: [img.size(), img.size(), 3],
        data: B64.encode(bytes),
    }
}

fn decode_image(rec: &ImageRecord) -> Result<Image> {
    let bytes = B64
        .decode(&rec.data)
        .map_err(|e| Error::Format(format!("image data is not base64: {e}")))?;
    if bytes.len() % 4 != 0 || rec.shape[2] != 3 {
        return Err(Error::Format("image data is not an RGB float array".into()));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Image::new(rec.shape[0], rec.shape[1], data)
}

fn to_record(ex: &ForensicExample) -> ExampleRecord {
    ExampleRecord {
        image: encode_image(&ex.image),
        question: ex.question.clone(),
        answer: ex.answer.clone(),
        label: ex.label,
        region: ex.region.clone(),
    }
}

/// One JSON object per line; images as base64 of little-endian `f32`.
pub fn save_jsonl(dataset: &[ForensicExample], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in dataset {
        let line = serde_json::to_string(&to_record(ex))
            .map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_jsonl(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            line: i + 1,
            message,
        };
        let rec: ExampleRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let image = decode_image(&rec.image).map_err(|e| parse_err(e.to_string()))?;
        out.push(ForensicExample {
            image,
            question: rec.question,
            answer: rec.answer,
            label: rec.label,
            region: rec.region,
        });
    }
    Ok(out)
}

/// Single image as a JSON object `{"shape": [h, w, 3], "data": base64}`.
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let json = serde_json::to_string(&encode_image(img)).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_image(path: &Path) -> Result<Image> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rec: ImageRecord = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    decode_image(&rec)
}

/// All question and answer strings, for building a vocabulary.
pub fn corpus<'a>(sets: &[&'a [ForensicExample]]) -> Vec<&'a str> {
    sets.iter()
        .flat_map(|s| s.iter())
        .flat_map(|ex| [ex.question.as_str(), ex.answer.as_str()])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{split_words, Vocab, UNK};
    use std::collections::HashSet;

    fn small() -> GenConfig {
        GenConfig::default()
    }

    #[test]
    fn region_grid_partitions_patches() {
        let g = RegionGrid::new(8).unwrap();
        let mut seen = vec![0; 64];
        for r in 0..9 {
            let ps = g.patches(r);
            assert!(!ps.is_empty());
            for p in ps {
                seen[p] += 1;
                assert_eq!(g.region_of_patch(p), r);
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert_eq!(g.patches(0).len(), 9);
        assert_eq!(g.patches(4).len(), 4);
        assert_eq!(g.index_of("center"), Some(4));
    }

    #[test]
    fn caption_set_is_deterministic_and_closed() {
        let a = gen_caption_set(20, 3, &small()).unwrap();
        let b = gen_caption_set(20, 3, &small()).unwrap();
        assert_eq!(a, b);
        let mut grammar: HashSet<String> = ["top", "middle", "bottom", "row", ":", ",", "."]
            .iter()
            .map(|s| s.to_string())
            .collect();
        grammar.extend(PALETTE.iter().map(|(n, _)| n.to_string()));
        for ex in &a {
            assert_eq!(ex.question, CAPTION_QUESTION);
            for w in split_words(&ex.answer) {
                assert!(grammar.contains(&w), "{w}");
            }
        }
        assert!(gen_caption_set(0, 3, &small()).is_err());
    }

    #[test]
    fn forensic_set_is_balanced_and_consistent() {
        for n in [1, 2, 7, 40] {
            let d = gen_forensic_set(n, 11, &small()).unwrap();
            let real = d.iter().filter(|e| e.label == Label::Real).count();
            assert_eq!(real, n.div_ceil(2));
            for e in &d {
                assert_eq!(e.label == Label::Fake, e.region.is_some());
                if e.label == Label::Real {
                    assert!(REGION_NAMES.iter().all(|r| !e.answer.to_lowercase().contains(r)));
                }
                if e.question == IMAGE_QUESTION {
                    assert!(e.answer.contains(e.label.as_str()));
                }
            }
        }
    }

    #[test]
    fn region_questions_follow_the_hit_rule() {
        let cfg = GenConfig {
            region_question_rate: 1.0,
            ..small()
        };
        let d = gen_forensic_set(200, 5, &cfg).unwrap();
        let mut hits = 0;
        for e in d.iter().filter(|e| e.label == Label::Fake) {
            let queried = REGION_NAMES
                .iter()
                .find(|r| e.question == region_question(r))
                .unwrap();
            let hit = Some(queried.to_string()) == e.region;
            assert_eq!(e.answer.contains("fake"), hit);
            hits += hit as usize;
        }
        assert!(hits > 20 && hits < 80);
    }

    #[test]
    fn zero_amplitude_fakes_equal_their_real_counterparts() {
        let loud = gen_forensic_set(30, 9, &small()).unwrap();
        let silent = gen_forensic_set(
            30,
            9,
            &GenConfig {
                amplitude: 0.0,
                ..small()
            },
        )
        .unwrap();
        let grid = small().regions();
        for (a, b) in loud.iter().zip(&silent) {
            assert_eq!(a.question, b.question);
            if a.label == Label::Real {
                assert_eq!(a.image, b.image);
                continue;
            }
            // The clean image differs from the fake only inside the
            // corrupted region.
            let region = grid.index_of(a.region.as_deref().unwrap()).unwrap();
            let inside: HashSet<usize> = grid.patches(region).into_iter().collect();
            let mut changed = 0;
            for y in 0..64 {
                for x in 0..64 {
                    let patch = (y / 8) * 8 + x / 8;
                    for c in 0..3 {
                        if a.image.get(y, x, c) != b.image.get(y, x, c) {
                            assert!(inside.contains(&patch));
                            changed += 1;
                        }
                    }
                }
            }
            assert_eq!(changed, inside.len() * 64 * 3);
        }
    }

    #[test]
    fn answers_tokenize_without_unknowns() {
        let caps = gen_caption_set(50, 1, &small()).unwrap();
        let d = gen_forensic_set(100, 1, &small()).unwrap();
        let v = Vocab::build(&corpus(&[&caps, &d]), 512).unwrap();
        for e in caps.iter().chain(&d) {
            assert!(!v.tokenize(&e.answer).contains(&UNK));
        }
    }

    #[test]
    fn distinct_seeds_give_distinct_sets() {
        let mut seen = HashSet::new();
        for seed in 0..20 {
            let d = gen_forensic_set(8, seed, &small()).unwrap();
            let bytes: Vec<u32> = d
                .iter()
                .flat_map(|e| e.image.data().iter().map(|v| v.to_bits()))
                .collect();
            assert!(seen.insert(bytes));
        }
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let d = gen_forensic_set(6, 2, &small()).unwrap();
        save_jsonl(&d, &path).unwrap();
        assert_eq!(load_jsonl(&path).unwrap(), d);

        std::fs::write(&path, "").unwrap();
        assert!(load_jsonl(&path).unwrap().is_empty());

        save_jsonl(&d[..1], &path).unwrap();
        let first = std::fs::read_to_string(&path).unwrap();
        let broken = first.replace("\"question\"", "\"query\"");
        std::fs::write(&path, format!("{first}{broken}")).unwrap();
        match load_jsonl(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn image_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.json");
        let img = gen_caption_set(1, 4, &small()).unwrap().remove(0).image;
        save_image(&img, &path).unwrap();
        assert_eq!(load_image(&path).unwrap(), img);
    }
}
