//! Paired image/report studies: a synthetic generator with known ground
//! truth, a JSONL manifest loader, seeded splitting and model-ready
//! preparation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{McrError, Result};
use crate::preprocessing::{
    load_image, normalize_patch_targets, patchify, save_image, split_sentences, split_words, wordpiece_tokenize,
    Image, PatchGrid, TokenSeq, Vocabulary,
};
use crate::rng::{purpose, stream};

/// Reports with fewer words than this are dropped on load.
pub const MIN_REPORT_WORDS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct StudyPair {
    pub study_id: String,
    pub images: Vec<Image>,
    pub report: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Glyph {
    Disc,
    Bar,
}

/// One renderable finding and the words used to report it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub glyph: Glyph,
    /// Grid cell `(row, col)` on the `grid x grid` layout.
    pub cell: (usize, usize),
    /// Added brightness in `[0, 1]`.
    pub intensity: f32,
    /// Lowercase description, e.g. `dense nodule`.
    pub description: String,
    /// Lowercase location without the trailing `zone`.
    pub region: String,
}

impl Finding {
    /// The two report phrasings of this finding.
    pub fn sentences(&self) -> [String; 2] {
        [
            capitalize(&format!("{} in the {} zone.", self.description, self.region)),
            capitalize(&format!("{} zone shows {}.", self.region, self.description)),
        ]
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

pub const FILLER_SENTENCES: [&str; 10] = [
    "The heart size is normal.",
    "No pleural effusion is seen.",
    "There is no pneumothorax.",
    "The mediastinal contours are unremarkable.",
    "Osseous structures are intact.",
    "The trachea is midline.",
    "No free air below the diaphragm.",
    "Hilar structures are within normal limits.",
    "Lines and tubes are absent.",
    "Soft tissues are unremarkable.",
];

const ROW_WORDS: [&str; 4] = ["apical", "upper", "mid", "basal"];
const COL_WORDS: [&str; 4] = ["right lateral", "right medial", "left medial", "left lateral"];

/// Default catalog: one finding per cell of a 4x4 grid, glyph alternating in a
/// checkerboard and intensity alternating by row pair.
pub fn default_catalog() -> Vec<Finding> {
    let mut out = Vec::new();
    for r in 0..4 {
        for c in 0..4 {
            let glyph = if (r + c) % 2 == 0 { Glyph::Disc } else { Glyph::Bar };
            let dense = (r / 2 + c / 2) % 2 == 0;
            let shape = match glyph {
                Glyph::Disc => "nodule",
                Glyph::Bar => "atelectasis",
            };
            out.push(Finding {
                glyph,
                cell: (r, c),
                intensity: if dense { 0.8 } else { 0.45 },
                description: format!("{} {shape}", if dense { "dense" } else { "faint" }),
                region: format!("{} {}", ROW_WORDS[r], COL_WORDS[c]),
            });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_studies: usize,
    pub catalog: Vec<Finding>,
    /// Side of the square cell grid the catalog positions refer to.
    pub grid: usize,
    pub findings_per_study: (usize, usize),
    pub views_per_study: (usize, usize),
    /// Range of filler sentences appended after the findings.
    pub filler_sentences: (usize, usize),
    /// Standard deviation of additive pixel noise; also scales view jitter.
    pub noise: f32,
    pub image_size: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_studies: 2200,
            catalog: default_catalog(),
            grid: 4,
            findings_per_study: (1, 3),
            views_per_study: (1, 3),
            filler_sentences: (0, 8),
            noise: 0.05,
            image_size: 64,
            channels: 1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| Err(McrError::config(field.to_string(), reason.to_string()));
        if self.catalog.is_empty() {
            return bad("catalog", "findings catalog is empty");
        }
        let (lo, hi) = self.findings_per_study;
        if lo == 0 || lo > hi || hi > self.catalog.len() {
            return bad("findings_per_study", "need 1 <= min <= max <= catalog size");
        }
        let (lo, hi) = self.views_per_study;
        if lo == 0 || lo > hi {
            return bad("views_per_study", "need 1 <= min <= max");
        }
        if self.filler_sentences.0 > self.filler_sentences.1 || self.filler_sentences.1 > FILLER_SENTENCES.len() {
            return bad("filler_sentences", "need min <= max <= number of filler templates");
        }
        if self.grid == 0 || !self.image_size.is_multiple_of(self.grid) {
            return bad("grid", "image size must be divisible by the grid");
        }
        if self.catalog.iter().any(|f| f.cell.0 >= self.grid || f.cell.1 >= self.grid) {
            return bad("catalog", "finding cell outside the grid");
        }
        if self.channels == 0 {
            return bad("channels", "must be positive");
        }
        if !(self.noise >= 0.0) {
            return bad("noise", "must be non-negative");
        }
        Ok(())
    }
}

/// What the generator put into one study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub study_id: String,
    /// Catalog indices, sorted.
    pub findings: Vec<usize>,
    pub n_views: usize,
    pub n_sentences: usize,
}

const BACKGROUND: f32 = 0.1;

fn render(spec: &SyntheticSpec, findings: &[usize], shift: (i64, i64), contrast: f32) -> Array2<f32> {
    let s = spec.image_size;
    let cell = s / spec.grid;
    let mut img = Array2::from_elem((s, s), BACKGROUND);
    for &f in findings {
        let fd = &spec.catalog[f];
        let cy = (fd.cell.0 * cell) as f32 + cell as f32 / 2.0 - 0.5 + shift.0 as f32;
        let cx = (fd.cell.1 * cell) as f32 + cell as f32 / 2.0 - 0.5 + shift.1 as f32;
        let r = cell as f32 * 0.3;
        for y in 0..s {
            for x in 0..s {
                let (dy, dx) = (y as f32 - cy, x as f32 - cx);
                let inside = match fd.glyph {
                    Glyph::Disc => dy * dy + dx * dx <= r * r,
                    Glyph::Bar => dy.abs() <= r * 0.45 && dx.abs() <= r * 1.4,
                };
                if inside {
                    img[[y, x]] += fd.intensity * contrast;
                }
            }
        }
    }
    img
}

/// Generates `spec.n_studies` studies together with their ground truth.
///
/// Each study draws from its own stream keyed to its index, so the output is
/// independent of generation order.
pub fn generate_corpus(spec: &SyntheticSpec) -> Result<(Vec<StudyPair>, Vec<GroundTruth>)> {
    spec.validate()?;
    let mut pairs = Vec::with_capacity(spec.n_studies);
    let mut truth = Vec::with_capacity(spec.n_studies);
    let noise = Normal::new(0.0f32, spec.noise.max(f32::MIN_POSITIVE)).expect("valid normal");
    let catalog: Vec<usize> = (0..spec.catalog.len()).collect();
    for i in 0..spec.n_studies {
        let mut rng = stream(spec.seed, &[purpose::CORPUS, i as u64]);
        let k = rng.random_range(spec.findings_per_study.0..=spec.findings_per_study.1);
        let mut findings: Vec<usize> = catalog.choose_multiple(&mut rng, k).copied().collect();
        let n_views = rng.random_range(spec.views_per_study.0..=spec.views_per_study.1);
        let n_fill = rng.random_range(spec.filler_sentences.0..=spec.filler_sentences.1);

        let mut sentences: Vec<String> = findings
            .iter()
            .map(|&f| spec.catalog[f].sentences()[rng.random_range(0..2)].clone())
            .collect();
        let fillers: Vec<&str> = FILLER_SENTENCES.choose_multiple(&mut rng, n_fill).copied().collect();
        sentences.extend(fillers.iter().map(|s| s.to_string()));
        let report = sentences.join(" ");

        let mut images = Vec::with_capacity(n_views);
        for v in 0..n_views {
            // The first view is canonical; later views are jittered in
            // proportion to the noise level.
            let (shift, contrast) = if v == 0 {
                ((0, 0), 1.0)
            } else {
                let j = spec.noise * 20.0;
                (
                    (
                        (rng.random_range(-1.0f32..=1.0) * j).round() as i64,
                        (rng.random_range(-1.0f32..=1.0) * j).round() as i64,
                    ),
                    1.0 + rng.random_range(-1.0f32..=1.0) * spec.noise * 2.0,
                )
            };
            let base = render(spec, &findings, shift, contrast);
            let img = Array3::from_shape_fn((spec.image_size, spec.image_size, spec.channels), |(y, x, _)| {
                let n = if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                (base[[y, x]] + n).clamp(0.0, 1.0)
            });
            images.push(img);
        }

        findings.sort_unstable();
        let study_id = format!("s{i:05}");
        truth.push(GroundTruth {
            study_id: study_id.clone(),
            findings,
            n_views,
            n_sentences: sentences.len(),
        });
        pairs.push(StudyPair {
            study_id,
            images,
            report,
        });
    }
    Ok((pairs, truth))
}

/// Every word the synthetic reports can contain, in a stable order.
pub fn synthetic_vocabulary(catalog: &[Finding]) -> Vocabulary {
    let mut words = BTreeSet::new();
    let text = catalog
        .iter()
        .flat_map(|f| f.sentences())
        .chain(FILLER_SENTENCES.iter().map(|s| s.to_string()))
        .collect::<Vec<_>>()
        .join(" ");
    words.extend(split_words(&text));
    Vocabulary::with_words(words)
}

/// Vocabulary of the `max_size - 5` most frequent words (ties alphabetical).
pub fn build_vocabulary<'a, I>(reports: I, max_size: usize) -> Vocabulary
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for r in reports {
        for w in split_words(r) {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let keep = max_size.saturating_sub(crate::preprocessing::RESERVED_TOKENS.len());
    Vocabulary::with_words(ranked.into_iter().take(keep).map(|(w, _)| w))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRow {
    study_id: String,
    report: String,
    image_paths: Vec<String>,
}

/// Reads a JSONL manifest of `{study_id, report, image_paths}` rows. Image
/// paths are resolved against the manifest's directory. Reports with fewer
/// than three words are skipped.
pub fn load_manifest(path: &Path) -> Result<Vec<StudyPair>> {
    let file = File::open(path).map_err(|e| McrError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let row = i + 1;
        let line = line.map_err(|e| McrError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let m: ManifestRow = serde_json::from_str(&line).map_err(|e| McrError::Manifest {
            row,
            reason: e.to_string(),
        })?;
        if m.image_paths.is_empty() {
            return Err(McrError::Manifest {
                row,
                reason: "no image paths".into(),
            });
        }
        if !seen.insert(m.study_id.clone()) {
            return Err(McrError::Manifest {
                row,
                reason: format!("duplicate study_id `{}`", m.study_id),
            });
        }
        if split_words(&m.report).iter().filter(|w| w.chars().any(char::is_alphanumeric)).count() < MIN_REPORT_WORDS {
            log::debug!("manifest row {row}: report shorter than {MIN_REPORT_WORDS} words, skipped");
            continue;
        }
        let mut images = Vec::with_capacity(m.image_paths.len());
        for p in &m.image_paths {
            let full = base.join(p);
            if !full.is_file() {
                return Err(McrError::Manifest {
                    row,
                    reason: format!("missing image file {}", full.display()),
                });
            }
            images.push(load_image(&full)?);
        }
        out.push(StudyPair {
            study_id: m.study_id,
            images,
            report: m.report,
        });
    }
    Ok(out)
}

/// Writes images as PNGs under `dir/images`, plus `manifest.jsonl`,
/// `ground_truth.jsonl` (when given) and `vocab.txt`.
pub fn write_corpus(
    dir: &Path,
    pairs: &[StudyPair],
    truth: Option<&[GroundTruth]>,
    vocab: &Vocabulary,
) -> Result<()> {
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| McrError::io(&img_dir, e))?;
    let manifest = dir.join("manifest.jsonl");
    let mut w = BufWriter::new(File::create(&manifest).map_err(|e| McrError::io(&manifest, e))?);
    for p in pairs {
        let mut paths = Vec::with_capacity(p.images.len());
        for (v, img) in p.images.iter().enumerate() {
            let rel = format!("images/{}_v{v}.png", p.study_id);
            save_image(&dir.join(&rel), img)?;
            paths.push(rel);
        }
        let row = ManifestRow {
            study_id: p.study_id.clone(),
            report: p.report.clone(),
            image_paths: paths,
        };
        writeln!(w, "{}", serde_json::to_string(&row).expect("row serializes")).map_err(|e| McrError::io(&manifest, e))?;
    }
    w.flush().map_err(|e| McrError::io(&manifest, e))?;
    if let Some(truth) = truth {
        let gt = dir.join("ground_truth.jsonl");
        let mut w = BufWriter::new(File::create(&gt).map_err(|e| McrError::io(&gt, e))?);
        for t in truth {
            writeln!(w, "{}", serde_json::to_string(t).expect("row serializes")).map_err(|e| McrError::io(&gt, e))?;
        }
        w.flush().map_err(|e| McrError::io(&gt, e))?;
    }
    vocab.save(&dir.join("vocab.txt"))
}

/// Seeded disjoint split into train/val/test by fractions summing to one.
///
/// Sizes are `round(f_train * n)`, `round(f_val * n)` and the remainder.
pub fn split_dataset<T: Clone>(items: &[T], fractions: (f64, f64, f64), seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(McrError::config(
            "fractions",
            format!("split fractions ({a}, {b}, {c}) must be in [0, 1] and sum to 1"),
        ));
    }
    let n = items.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, &[purpose::SPLIT]));
    let n_train = ((a * n as f64).round() as usize).min(n);
    let n_val = ((b * n as f64).round() as usize).min(n - n_train);
    let pick = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect::<Vec<T>>();
    Ok((
        pick(&order[..n_train]),
        pick(&order[n_train..n_train + n_val]),
        pick(&order[n_train + n_val..]),
    ))
}

/// Seeded split holding out `test_size` items; returns `(train, test)`.
pub fn split_train_test<T: Clone>(items: &[T], test_size: usize, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    let n = items.len();
    if test_size > n {
        return Err(McrError::config("test_size", format!("{test_size} exceeds the {n} available studies")));
    }
    if n == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    let f_test = test_size as f64 / n as f64;
    let (train, _, test) = split_dataset(items, (1.0 - f_test, 0.0, f_test), seed)?;
    Ok((train, test))
}

/// A study converted to model inputs.
#[derive(Clone, Debug)]
pub struct PreparedStudy {
    pub study_id: String,
    /// Raw patch rows per view.
    pub views: Vec<PatchGrid>,
    /// Per-patch normalized reconstruction targets per view.
    pub targets: Vec<PatchGrid>,
    pub tokens: TokenSeq,
    pub report: String,
    pub n_sentences: usize,
}

pub fn prepare_studies(pairs: &[StudyPair], vocab: &Vocabulary, cfg: &ExperimentConfig) -> Result<Vec<PreparedStudy>> {
    if vocab.len() > cfg.vocab_size {
        return Err(McrError::config(
            "vocab_size",
            format!("vocabulary has {} tokens, more than vocab_size {}", vocab.len(), cfg.vocab_size),
        ));
    }
    let want = (cfg.image_size, cfg.image_size, cfg.channels);
    pairs
        .iter()
        .map(|p| {
            if p.images.is_empty() {
                return Err(McrError::Data(format!("study {} has no images", p.study_id)));
            }
            let mut views = Vec::with_capacity(p.images.len());
            let mut targets = Vec::with_capacity(p.images.len());
            for img in &p.images {
                if img.dim() != want {
                    return Err(McrError::Data(format!(
                        "study {}: image shape {:?}, expected {want:?}",
                        p.study_id,
                        img.dim()
                    )));
                }
                let grid = patchify(img.view(), cfg.patch_size)?;
                targets.push(normalize_patch_targets(&grid));
                views.push(grid);
            }
            Ok(PreparedStudy {
                study_id: p.study_id.clone(),
                views,
                targets,
                tokens: wordpiece_tokenize(&p.report, vocab, cfg.max_text_len)?,
                report: p.report.clone(),
                n_sentences: split_sentences(&p.report).len(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> SyntheticSpec {
        SyntheticSpec {
            n_studies: n,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn zero_studies() {
        let (p, t) = generate_corpus(&small(0)).unwrap();
        assert!(p.is_empty() && t.is_empty());
    }

    #[test]
    fn noiseless_views_are_identical() {
        let spec = SyntheticSpec {
            n_studies: 40,
            noise: 0.0,
            findings_per_study: (1, 1),
            views_per_study: (2, 2),
            ..SyntheticSpec::default()
        };
        let (pairs, _) = generate_corpus(&spec).unwrap();
        for p in pairs {
            assert_eq!(p.images[0], p.images[1]);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_corpus(&small(5)).unwrap();
        let b = generate_corpus(&small(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn catalog_validation() {
        let spec = SyntheticSpec {
            catalog: vec![],
            ..small(1)
        };
        assert!(generate_corpus(&spec).is_err());
        let spec = SyntheticSpec {
            findings_per_study: (3, 2),
            ..small(1)
        };
        assert!(generate_corpus(&spec).is_err());
    }

    #[test]
    fn reports_tokenize_without_unknowns() {
        let spec = small(50);
        let vocab = synthetic_vocabulary(&spec.catalog);
        let (pairs, _) = generate_corpus(&spec).unwrap();
        for p in &pairs {
            let t = wordpiece_tokenize(&p.report, &vocab, 1000).unwrap();
            assert!(!t.ids.contains(&vocab.reserved().unk), "{}", p.report);
        }
        assert!(vocab.len() <= ExperimentConfig::default().vocab_size);
    }

    #[test]
    fn findings_fit_in_default_text_length() {
        let spec = SyntheticSpec::default();
        let vocab = synthetic_vocabulary(&spec.catalog);
        for f in &spec.catalog {
            for s in f.sentences() {
                let t = wordpiece_tokenize(&s, &vocab, 1000).unwrap();
                assert!(t.body_len() * spec.findings_per_study.1 <= 32, "{s}");
            }
        }
    }

    #[test]
    fn split_sizes() {
        let items: Vec<usize> = (0..100).collect();
        let (a, b, c) = split_dataset(&items, (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (80, 10, 10));
        let (a, b, c) = split_dataset(&items, (1.0, 0.0, 0.0), 3).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (100, 0, 0));
        assert!(split_dataset(&items, (0.5, 0.1, 0.1), 3).is_err());
    }

    #[test]
    fn vocabulary_by_frequency() {
        let v = build_vocabulary(["b b a c", "b a"], 7);
        assert_eq!(&v.tokens()[5..], &["b".to_string(), "a".to_string()]);
    }
}
