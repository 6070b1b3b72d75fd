//! Cross-modal retrieval scoring, text metrics for retrieved reports, grouped
//! recall and top-K dumps.
//!
//! Image-to-report queries run once per image. Report-to-image queries credit
//! a report with `|top-K ∩ own images| / min(K, own image count)`. Ties in
//! similarity rank the lower candidate index first.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Real};
use crate::data::PreparedStudy;
use crate::error::{McrError, Result};
use crate::model::McrModel;
use crate::preprocessing::split_words;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "i2r")]
    ImageToReport,
    #[serde(rename = "r2i")]
    ReportToImage,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::ImageToReport, Direction::ReportToImage];

    pub fn tag(self) -> &'static str {
        match self {
            Direction::ImageToReport => "i2r",
            Direction::ReportToImage => "r2i",
        }
    }
}

/// Image and report embeddings with image ownership.
#[derive(Clone, Debug)]
pub struct RetrievalIndex {
    /// `n_images x d`, unit rows.
    pub images: Array2<f32>,
    /// Report index owning each image.
    pub image_owner: Vec<usize>,
    /// View number of each image within its study.
    pub image_view: Vec<usize>,
    /// `n_reports x d`, unit rows.
    pub reports: Array2<f32>,
    pub report_ids: Vec<String>,
}

impl RetrievalIndex {
    pub fn new(
        images: Array2<f32>,
        image_owner: Vec<usize>,
        image_view: Vec<usize>,
        reports: Array2<f32>,
        report_ids: Vec<String>,
    ) -> Result<Self> {
        if images.nrows() == 0 || reports.nrows() == 0 {
            return Err(McrError::Empty("retrieval corpus"));
        }
        if images.ncols() != reports.ncols() {
            return Err(McrError::Shape(format!(
                "image width {} vs report width {}",
                images.ncols(),
                reports.ncols()
            )));
        }
        if image_owner.len() != images.nrows() || image_view.len() != images.nrows() {
            return Err(McrError::Shape("one owner and view per image required".into()));
        }
        if report_ids.len() != reports.nrows() {
            return Err(McrError::Shape("one id per report required".into()));
        }
        if let Some(&bad) = image_owner.iter().find(|&&o| o >= reports.nrows()) {
            return Err(McrError::OutOfRange {
                index: bad,
                len: reports.nrows(),
            });
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = report_ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(McrError::Data(format!("duplicate report id {dup}")));
        }
        Ok(Self {
            images,
            image_owner,
            image_view,
            reports,
            report_ids,
        })
    }

    /// Index with one image per report, image `i` owned by report `i`.
    pub fn paired(images: Array2<f32>, reports: Array2<f32>) -> Result<Self> {
        let n = images.nrows();
        let ids = (0..reports.nrows()).map(|i| format!("s{i:05}")).collect();
        Self::new(images, (0..n).collect(), vec![0; n], reports, ids)
    }

    pub fn n_images(&self) -> usize {
        self.images.nrows()
    }

    pub fn n_reports(&self) -> usize {
        self.reports.nrows()
    }

    /// Image-by-report similarities in double precision.
    pub fn scores(&self) -> Array2<f64> {
        let i = self.images.mapv(|x| x as f64);
        let r = self.reports.mapv(|x| x as f64);
        i.dot(&r.t())
    }

    pub fn report_position(&self, study_id: &str) -> Option<usize> {
        self.report_ids.iter().position(|id| id == study_id)
    }
}

/// Unmasked embeddings of every view and every report of `studies`.
pub fn embed_corpus<T: Real>(
    model: &McrModel,
    store: &ParamStore<T>,
    studies: &[PreparedStudy],
    chunk: usize,
) -> Result<RetrievalIndex> {
    if studies.is_empty() {
        return Err(McrError::Empty("corpus to embed"));
    }
    let mut grids = Vec::new();
    let mut owner = Vec::new();
    let mut view = Vec::new();
    for (s, study) in studies.iter().enumerate() {
        for (v, grid) in study.views.iter().enumerate() {
            grids.push(grid);
            owner.push(s);
            view.push(v);
        }
    }
    let images = model.embed_images(store, &grids, chunk)?;
    let seqs: Vec<_> = studies.iter().map(|s| &s.tokens).collect();
    let reports = model.embed_reports(store, &seqs, chunk)?;
    let ids = studies.iter().map(|s| s.study_id.clone()).collect();
    RetrievalIndex::new(images, owner, view, reports, ids)
}

fn check_scores(scores: ArrayView2<f64>, owner: &[usize]) -> Result<()> {
    if scores.nrows() == 0 || scores.ncols() == 0 {
        return Err(McrError::Empty("similarity matrix"));
    }
    if owner.len() != scores.nrows() {
        return Err(McrError::Shape(format!("{} owners for {} images", owner.len(), scores.nrows())));
    }
    if let Some(&bad) = owner.iter().find(|&&o| o >= scores.ncols()) {
        return Err(McrError::OutOfRange {
            index: bad,
            len: scores.ncols(),
        });
    }
    if scores.iter().any(|x| !x.is_finite()) {
        return Err(McrError::Numerical("non-finite similarity".into()));
    }
    Ok(())
}

fn effective_k(k: usize, candidates: usize) -> Result<usize> {
    if k == 0 {
        return Err(McrError::config("k", "recall needs K >= 1"));
    }
    if k > candidates {
        log::warn!("K={k} exceeds the {candidates} candidates, clamped");
        return Ok(candidates);
    }
    Ok(k)
}

/// Zero-based rank of candidate `target` among `row`.
fn rank_of(row: impl Iterator<Item = f64> + Clone, target: usize, s: f64) -> usize {
    row.enumerate()
        .filter(|&(j, x)| x > s || (x == s && j < target))
        .count()
}

/// Per-query credit in `[0, 1]`: one entry per image for image-to-report,
/// one per report for report-to-image.
pub fn query_credits(scores: ArrayView2<f64>, owner: &[usize], direction: Direction, k: usize) -> Result<Vec<f64>> {
    check_scores(scores, owner)?;
    match direction {
        Direction::ImageToReport => {
            let k = effective_k(k, scores.ncols())?;
            Ok(scores
                .rows()
                .into_iter()
                .zip(owner)
                .map(|(row, &o)| {
                    let r = rank_of(row.iter().copied(), o, row[o]);
                    if r < k {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect())
        }
        Direction::ReportToImage => {
            let k = effective_k(k, scores.nrows())?;
            let mut own: Vec<Vec<usize>> = vec![Vec::new(); scores.ncols()];
            for (i, &o) in owner.iter().enumerate() {
                own[o].push(i);
            }
            Ok(own
                .iter()
                .enumerate()
                .map(|(r, imgs)| {
                    if imgs.is_empty() {
                        return 0.0;
                    }
                    let col = scores.column(r);
                    let hits = imgs
                        .iter()
                        .filter(|&&i| rank_of(col.iter().copied(), i, col[i]) < k)
                        .count();
                    hits as f64 / k.min(imgs.len()) as f64
                })
                .collect())
        }
    }
}

fn mean_percent(credits: &[f64]) -> f64 {
    100.0 * credits.iter().sum::<f64>() / credits.len() as f64
}

/// Recall@K in percent over raw similarities (`images x reports`).
pub fn recall_from_scores(scores: ArrayView2<f64>, owner: &[usize], direction: Direction, k: usize) -> Result<f64> {
    let credits = query_credits(scores, owner, direction, k)?;
    Ok(mean_percent(&credits))
}

pub fn recall_at_k(index: &RetrievalIndex, direction: Direction, k: usize) -> Result<f64> {
    recall_from_scores(index.scores().view(), &index.image_owner, direction, k)
}

/// Candidate indices of one query, best first, ties by index.
fn full_ranking(sims: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]));
    order
}

/// Reference implementation that sorts every query's candidates.
pub fn brute_force_from_scores(scores: ArrayView2<f64>, owner: &[usize], direction: Direction, k: usize) -> Result<f64> {
    check_scores(scores, owner)?;
    let mut total = 0.0;
    let queries = match direction {
        Direction::ImageToReport => {
            let k = effective_k(k, scores.ncols())?;
            for (i, row) in scores.rows().into_iter().enumerate() {
                let order = full_ranking(&row.to_vec());
                if order[..k].contains(&owner[i]) {
                    total += 1.0;
                }
            }
            scores.nrows()
        }
        Direction::ReportToImage => {
            let k = effective_k(k, scores.nrows())?;
            for r in 0..scores.ncols() {
                let m = owner.iter().filter(|&&o| o == r).count();
                if m == 0 {
                    continue;
                }
                let order = full_ranking(&scores.column(r).to_vec());
                let hits = order[..k].iter().filter(|&&i| owner[i] == r).count();
                total += hits as f64 / k.min(m) as f64;
            }
            scores.ncols()
        }
    };
    Ok(100.0 * total / queries as f64)
}

pub fn brute_force_recall(index: &RetrievalIndex, direction: Direction, k: usize) -> Result<f64> {
    brute_force_from_scores(index.scores().view(), &index.image_owner, direction, k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallRow {
    pub direction: Direction,
    pub k: usize,
    pub recall: f64,
}

pub fn recall_table(index: &RetrievalIndex, ks: &[usize]) -> Result<Vec<RecallRow>> {
    let scores = index.scores();
    let mut rows = Vec::new();
    for d in Direction::BOTH {
        for &k in ks {
            rows.push(RecallRow {
                direction: d,
                k,
                recall: recall_from_scores(scores.view(), &index.image_owner, d, k)?,
            });
        }
    }
    Ok(rows)
}

/// Tokens seen by the text metrics: lowercase words with punctuation removed.
pub fn metric_tokens(text: &str) -> Vec<String> {
    split_words(text)
        .into_iter()
        .filter(|w| w.chars().any(|c| c.is_alphanumeric()))
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<String, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.join(" ")).or_insert(0) += 1;
        }
    }
    out
}

/// BLEU-4 against one or more references, without smoothing.
pub fn bleu4(candidate: &str, references: &[&str]) -> Result<f64> {
    bleu4_with(candidate, references, false)
}

/// BLEU-4; with `smooth` every precision above unigrams gets add-one counts.
pub fn bleu4_with(candidate: &str, references: &[&str], smooth: bool) -> Result<f64> {
    if references.is_empty() {
        return Err(McrError::Empty("BLEU reference list"));
    }
    let cand = metric_tokens(candidate);
    if cand.is_empty() {
        return Ok(0.0);
    }
    let refs: Vec<Vec<String>> = references.iter().map(|r| metric_tokens(r)).collect();
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let counts = ngram_counts(&cand, n);
        let mut max_ref: HashMap<&str, usize> = HashMap::new();
        let ref_counts: Vec<_> = refs.iter().map(|r| ngram_counts(r, n)).collect();
        for rc in &ref_counts {
            for (g, &c) in rc {
                let e = max_ref.entry(g.as_str()).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let matched: usize = counts
            .iter()
            .map(|(g, &c)| c.min(max_ref.get(g.as_str()).copied().unwrap_or(0)))
            .sum();
        let total = cand.len().saturating_sub(n - 1);
        let (num, den) = if smooth && n > 1 {
            (matched as f64 + 1.0, total as f64 + 1.0)
        } else {
            (matched as f64, total as f64)
        };
        if num == 0.0 || den == 0.0 {
            return Ok(0.0);
        }
        log_sum += (num / den).ln();
    }
    let c = cand.len();
    let r = refs
        .iter()
        .map(|x| x.len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .expect("non-empty references");
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * (log_sum / 4.0).exp())
}

pub const ROUGE_BETA: f64 = 1.2;

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure with recall weighted by `beta = 1.2`.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    rouge_l_tokens(&metric_tokens(candidate), &metric_tokens(reference))
}

fn rouge_l_tokens(c: &[String], r: &[String]) -> f64 {
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(c, r) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / c.len() as f64;
    let rec = lcs / r.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * rec / (rec + b2 * p)
}

pub const CIDER_SIGMA: f64 = 6.0;

/// Document frequencies of n-grams (n = 1..4) over a reference corpus.
#[derive(Clone, Debug)]
pub struct CiderStats {
    df: HashMap<String, f64>,
    log_docs: f64,
}

impl CiderStats {
    /// Each entry of `documents` is the reference set of one item.
    pub fn new(documents: &[Vec<&str>]) -> Result<Self> {
        if documents.is_empty() {
            return Err(McrError::Empty("CIDEr reference corpus"));
        }
        let mut df = HashMap::new();
        for refs in documents {
            let mut seen = std::collections::HashSet::new();
            for r in refs {
                let toks = metric_tokens(r);
                for n in 1..=4 {
                    seen.extend(ngram_counts(&toks, n).into_keys());
                }
            }
            for g in seen {
                *df.entry(g).or_insert(0.0) += 1.0;
            }
        }
        Ok(Self {
            df,
            log_docs: (documents.len() as f64).ln(),
        })
    }

    /// Corpus where every report is its own document.
    pub fn from_reports<S: AsRef<str>>(reports: &[S]) -> Result<Self> {
        let docs: Vec<Vec<&str>> = reports.iter().map(|r| vec![r.as_ref()]).collect();
        Self::new(&docs)
    }

    fn vector(&self, tokens: &[String]) -> CiderVec {
        let mut grams = Vec::with_capacity(4);
        let mut norms = [0.0; 4];
        for n in 1..=4 {
            let v: HashMap<String, f64> = ngram_counts(tokens, n)
                .into_iter()
                .map(|(g, c)| {
                    let df = self.df.get(&g).copied().unwrap_or(0.0).max(1.0);
                    let w = c as f64 * (self.log_docs - df.ln());
                    (g, w)
                })
                .collect();
            norms[n - 1] = v.values().map(|x| x * x).sum::<f64>().sqrt();
            grams.push(v);
        }
        CiderVec {
            grams,
            norms,
            len: tokens.len(),
        }
    }
}

struct CiderVec {
    grams: Vec<HashMap<String, f64>>,
    norms: [f64; 4],
    len: usize,
}

fn cider_pair(c: &CiderVec, r: &CiderVec) -> f64 {
    let delta = c.len as f64 - r.len as f64;
    let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let mut total = 0.0;
    for n in 0..4 {
        let mut dot = 0.0;
        for (g, &w) in &c.grams[n] {
            if let Some(&rw) = r.grams[n].get(g) {
                dot += w.min(rw) * rw;
            }
        }
        if c.norms[n] > 0.0 && r.norms[n] > 0.0 {
            total += dot / (c.norms[n] * r.norms[n]) * penalty;
        }
    }
    10.0 * total / 4.0
}

/// CIDEr-D of `candidate` against `references` under corpus `stats`.
pub fn cider(candidate: &str, references: &[&str], stats: &CiderStats) -> Result<f64> {
    if references.is_empty() {
        return Err(McrError::Empty("CIDEr reference list"));
    }
    let c = stats.vector(&metric_tokens(candidate));
    let sum: f64 = references
        .iter()
        .map(|r| cider_pair(&c, &stats.vector(&metric_tokens(r))))
        .sum();
    Ok(sum / references.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NlgScores {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NlgRow {
    pub direction: Direction,
    pub k: usize,
    #[serde(flatten)]
    pub scores: NlgScores,
}

/// Scores the K-th ranked retrieval against the truth for K = 1..=k_max.
///
/// Image queries compare the K-th report with the image's own report. Report
/// queries compare the report owning the K-th image with the query report.
/// `reports[i]` is the text of report `i` of the index.
pub fn nlg_curves<S: AsRef<str>>(index: &RetrievalIndex, reports: &[S], k_max: usize) -> Result<Vec<NlgRow>> {
    if reports.len() != index.n_reports() {
        return Err(McrError::Shape(format!(
            "{} report texts for {} indexed reports",
            reports.len(),
            index.n_reports()
        )));
    }
    if k_max == 0 {
        return Err(McrError::config("k", "K_max must be >= 1"));
    }
    let stats = CiderStats::from_reports(reports)?;
    let tokens: Vec<Vec<String>> = reports.iter().map(|r| metric_tokens(r.as_ref())).collect();
    let vectors: Vec<CiderVec> = tokens.iter().map(|t| stats.vector(t)).collect();
    let mut cache: HashMap<(usize, usize), NlgScores> = HashMap::new();
    let mut score = |cand: usize, truth: usize| -> Result<NlgScores> {
        if let Some(s) = cache.get(&(cand, truth)) {
            return Ok(*s);
        }
        let s = NlgScores {
            bleu4: bleu4_tokens(&tokens[cand], &tokens[truth]),
            rouge_l: rouge_l_tokens(&tokens[cand], &tokens[truth]),
            cider: cider_pair(&vectors[cand], &vectors[truth]),
        };
        cache.insert((cand, truth), s);
        Ok(s)
    };
    let scores = index.scores();
    let mut rows = Vec::new();
    for direction in Direction::BOTH {
        let rankings: Vec<(Vec<usize>, usize)> = match direction {
            Direction::ImageToReport => scores
                .rows()
                .into_iter()
                .zip(&index.image_owner)
                .map(|(row, &o)| {
                    (full_ranking(&row.to_vec()), o)
                })
                .collect(),
            Direction::ReportToImage => (0..index.n_reports())
                .map(|r| {
                    let order = full_ranking(&scores.column(r).to_vec());
                    (order.into_iter().map(|i| index.image_owner[i]).collect(), r)
                })
                .collect(),
        };
        let k_top = k_max.min(rankings[0].0.len());
        if k_top < k_max {
            log::warn!("K_max={k_max} exceeds the {k_top} candidates, clamped");
        }
        for k in 1..=k_top {
            let mut acc = NlgScores::default();
            for (order, truth) in &rankings {
                let s = score(order[k - 1], *truth)?;
                acc.bleu4 += s.bleu4;
                acc.rouge_l += s.rouge_l;
                acc.cider += s.cider;
            }
            let n = rankings.len() as f64;
            rows.push(NlgRow {
                direction,
                k,
                scores: NlgScores {
                    bleu4: acc.bleu4 / n,
                    rouge_l: acc.rouge_l / n,
                    cider: acc.cider / n,
                },
            });
        }
    }
    Ok(rows)
}

fn bleu4_tokens(c: &[String], r: &[String]) -> f64 {
    bleu4_with(&c.join(" "), &[&r.join(" ")], false).unwrap_or(0.0)
}

/// Inclusive sentence-count ranges; the last may be open.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub ranges: Vec<(usize, Option<usize>)>,
}

impl Default for GroupSpec {
    fn default() -> Self {
        Self {
            ranges: vec![(1, Some(5)), (6, Some(10)), (11, None)],
        }
    }
}

impl GroupSpec {
    /// Checks the ranges are contiguous from 1 and end open.
    pub fn validate(&self) -> Result<()> {
        let mut next = 1;
        for (i, &(lo, hi)) in self.ranges.iter().enumerate() {
            if lo != next {
                return Err(McrError::config("groups", format!("range {i} starts at {lo}, expected {next}")));
            }
            match hi {
                Some(h) if h >= lo => next = h + 1,
                Some(h) => return Err(McrError::config("groups", format!("range {lo}-{h} is empty"))),
                None if i + 1 == self.ranges.len() => return Ok(()),
                None => return Err(McrError::config("groups", "only the last range may be open")),
            }
        }
        Err(McrError::config("groups", "the last range must be open"))
    }

    /// Group of a report with `n` sentences; empty reports join the first group.
    pub fn group_of(&self, n: usize) -> usize {
        let n = n.max(1);
        self.ranges
            .iter()
            .position(|&(lo, hi)| n >= lo && hi.is_none_or(|h| n <= h))
            .expect("validated groups cover every count")
    }

    pub fn label(&self, g: usize) -> String {
        match self.ranges[g] {
            (lo, Some(hi)) => format!("{lo}-{hi}"),
            (lo, None) => format!("{lo}+"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRecall {
    pub group: String,
    pub n_reports: usize,
    pub n_images: usize,
    /// Recall in percent per direction and K; `None` for an empty group.
    pub recalls: Vec<(Direction, usize, Option<f64>)>,
}

/// Recall restricted to queries whose report falls in each sentence-count group.
pub fn grouped_recall(
    index: &RetrievalIndex,
    n_sentences: &[usize],
    groups: &GroupSpec,
    ks: &[usize],
) -> Result<Vec<GroupRecall>> {
    groups.validate()?;
    if n_sentences.len() != index.n_reports() {
        return Err(McrError::Shape("one sentence count per report required".into()));
    }
    let report_group: Vec<usize> = n_sentences.iter().map(|&n| groups.group_of(n)).collect();
    let scores = index.scores();
    let mut credits = HashMap::new();
    for d in Direction::BOTH {
        for &k in ks {
            credits.insert((d, k), query_credits(scores.view(), &index.image_owner, d, k)?);
        }
    }
    Ok((0..groups.ranges.len())
        .map(|g| {
            let image_members: Vec<usize> = (0..index.n_images())
                .filter(|&i| report_group[index.image_owner[i]] == g)
                .collect();
            let report_members: Vec<usize> = (0..index.n_reports()).filter(|&r| report_group[r] == g).collect();
            let mut recalls = Vec::new();
            for d in Direction::BOTH {
                let members = match d {
                    Direction::ImageToReport => &image_members,
                    Direction::ReportToImage => &report_members,
                };
                for &k in ks {
                    let c = &credits[&(d, k)];
                    let value = (!members.is_empty())
                        .then(|| 100.0 * members.iter().map(|&q| c[q]).sum::<f64>() / members.len() as f64);
                    recalls.push((d, k, value));
                }
            }
            GroupRecall {
                group: groups.label(g),
                n_reports: report_members.len(),
                n_images: image_members.len(),
                recalls,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopKEntry {
    pub rank: usize,
    pub study_id: String,
    /// View number for image candidates.
    pub view: Option<usize>,
    pub similarity: f64,
    pub report: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopKDump {
    pub direction: Direction,
    pub query_id: String,
    pub query_view: Option<usize>,
    pub query_report: String,
    pub entries: Vec<TopKEntry>,
    /// One-based rank of the best true match among all candidates.
    pub paired_rank: usize,
}

/// Ranked candidates of one query. Image queries use view `view` of the study.
pub fn topk_dump<S: AsRef<str>>(
    index: &RetrievalIndex,
    reports: &[S],
    direction: Direction,
    query_id: &str,
    view: usize,
    k: usize,
) -> Result<TopKDump> {
    if reports.len() != index.n_reports() {
        return Err(McrError::Shape("one report text per indexed report required".into()));
    }
    let r = index
        .report_position(query_id)
        .ok_or_else(|| McrError::Data(format!("unknown study {query_id}")))?;
    let scores = index.scores();
    let text = |i: usize| reports[i].as_ref().to_string();
    match direction {
        Direction::ImageToReport => {
            let img = (0..index.n_images())
                .find(|&i| index.image_owner[i] == r && index.image_view[i] == view)
                .ok_or_else(|| McrError::Data(format!("study {query_id} has no view {view}")))?;
            let row = scores.row(img).to_vec();
            let order = full_ranking(&row);
            let k = effective_k(k, order.len())?;
            Ok(TopKDump {
                direction,
                query_id: query_id.into(),
                query_view: Some(view),
                query_report: text(r),
                entries: order[..k]
                    .iter()
                    .enumerate()
                    .map(|(rank, &c)| TopKEntry {
                        rank: rank + 1,
                        study_id: index.report_ids[c].clone(),
                        view: None,
                        similarity: row[c],
                        report: text(c),
                    })
                    .collect(),
                paired_rank: order.iter().position(|&c| c == r).expect("owner is ranked") + 1,
            })
        }
        Direction::ReportToImage => {
            let col = scores.column(r).to_vec();
            let order = full_ranking(&col);
            let k = effective_k(k, order.len())?;
            Ok(TopKDump {
                direction,
                query_id: query_id.into(),
                query_view: None,
                query_report: text(r),
                entries: order[..k]
                    .iter()
                    .enumerate()
                    .map(|(rank, &i)| TopKEntry {
                        rank: rank + 1,
                        study_id: index.report_ids[index.image_owner[i]].clone(),
                        view: Some(index.image_view[i]),
                        similarity: col[i],
                        report: text(index.image_owner[i]),
                    })
                    .collect(),
                paired_rank: order
                    .iter()
                    .position(|&i| index.image_owner[i] == r)
                    .ok_or_else(|| McrError::Data(format!("study {query_id} has no images")))?
                    + 1,
            })
        }
    }
}

/// Recall table as CSV with header `direction,k,recall`.
pub fn recall_csv(rows: &[RecallRow]) -> String {
    let mut out = String::from("direction,k,recall\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:.6}", r.direction.tag(), r.k, r.recall);
    }
    out
}

pub fn nlg_csv(rows: &[NlgRow]) -> String {
    let mut out = String::from("direction,k,bleu4,rouge_l,cider\n");
    for r in rows {
        let s = r.scores;
        let _ = writeln!(out, "{},{},{:.6},{:.6},{:.6}", r.direction.tag(), r.k, s.bleu4, s.rouge_l, s.cider);
    }
    out
}

pub fn grouped_csv(rows: &[GroupRecall]) -> String {
    let mut out = String::from("group,n_reports,n_images,direction,k,recall\n");
    for g in rows {
        for (d, k, v) in &g.recalls {
            let v = v.map_or(String::new(), |x| format!("{x:.6}"));
            let _ = writeln!(out, "{},{},{},{},{},{}", g.group, g.n_reports, g.n_images, d.tag(), k, v);
        }
    }
    out
}

/// Writes `value` as pretty JSON.
pub fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| McrError::Parse {
        what: "json output".into(),
        reason: e.to_string(),
    })?;
    let mut f = std::fs::File::create(path).map_err(|e| McrError::io(path, e))?;
    f.write_all(text.as_bytes())
        .and_then(|_| f.write_all(b"\n"))
        .map_err(|e| McrError::io(path, e))
}

/// Everything the evaluation command reports for one embedded corpus.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_reports: usize,
    pub n_images: usize,
    pub recall: Vec<RecallRow>,
    pub nlg: Vec<NlgRow>,
    pub grouped: Vec<GroupRecall>,
    pub modality_gap: f64,
}

impl EvalReport {
    pub fn recall(&self, direction: Direction, k: usize) -> Option<f64> {
        self.recall
            .iter()
            .find(|r| r.direction == direction && r.k == k)
            .map(|r| r.recall)
    }
}

pub fn evaluate_index<S: AsRef<str>>(
    index: &RetrievalIndex,
    reports: &[S],
    n_sentences: &[usize],
    ks: &[usize],
    k_max: usize,
) -> Result<EvalReport> {
    Ok(EvalReport {
        n_reports: index.n_reports(),
        n_images: index.n_images(),
        recall: recall_table(index, ks)?,
        nlg: nlg_curves(index, reports, k_max)?,
        grouped: grouped_recall(index, n_sentences, &GroupSpec::default(), ks)?,
        modality_gap: crate::alignment::modality_gap(index.images.view(), index.reports.view())?.gap,
    })
}

/// Embeds `studies` with the trained model and scores them.
pub fn evaluate_studies<T: Real>(
    model: &McrModel,
    store: &ParamStore<T>,
    studies: &[PreparedStudy],
    ks: &[usize],
    k_max: usize,
) -> Result<(RetrievalIndex, EvalReport)> {
    let index = embed_corpus(model, store, studies, 64)?;
    let reports: Vec<&str> = studies.iter().map(|s| s.report.as_str()).collect();
    let sentences: Vec<usize> = studies.iter().map(|s| s.n_sentences).collect();
    let report = evaluate_index(&index, &reports, &sentences, ks, k_max)?;
    Ok((index, report))
}

/// Trains a fresh model under `cfg` on `train_set`, then scores `test_set`.
pub fn train_and_evaluate(
    cfg: &crate::config::ExperimentConfig,
    train_set: &[PreparedStudy],
    test_set: &[PreparedStudy],
    ks: &[usize],
    k_max: usize,
) -> Result<(crate::training::TrainState, EvalReport)> {
    let mut state = crate::training::TrainState::new(cfg)?;
    crate::training::train(&mut state, train_set, None, |_| Ok(()))?;
    let (_, report) = evaluate_studies(&state.model, &state.store, test_set, ks, k_max)?;
    Ok((state, report))
}
