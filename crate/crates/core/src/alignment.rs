//! Mapping token features into the common space and pooling them into global
//! embeddings, in either order.
//!
//! With mapping-before-aggregation (MbA) every token is projected and the
//! projected tokens are pooled; with aggregation-before-mapping (AbM) the
//! encoder tokens are pooled first and the same-shaped projection is applied
//! to the pooled vector. Both orders use identical parameters.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Aggregation, Graph, LrGroup, ParamStore, Real, Var};
use crate::config::AlignStrategy;
use crate::encoders::{Modality, TokenFeatures};
use crate::error::{McrError, Result};
use crate::nn::Mlp;

/// Per-modality projections into the common space.
#[derive(Clone, Debug)]
pub struct Projections {
    pub vision: Mlp,
    pub text: Mlp,
}

impl Projections {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        dim: usize,
        hidden: usize,
        common_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            vision: Mlp::new(store, "proj.vision", dim, hidden, common_dim, LrGroup::Rest, rng),
            text: Mlp::new(store, "proj.text", dim, hidden, common_dim, LrGroup::Rest, rng),
        }
    }

    pub fn for_modality(&self, m: Modality) -> &Mlp {
        match m {
            Modality::Vision => &self.vision,
            Modality::Text => &self.text,
        }
    }
}

/// Unit-norm global vector in the common space.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedEmbedding<T> {
    pub vector: Array1<T>,
    pub modality: Modality,
    pub study_id: String,
}

/// Rows that take part in pooling: valid rows, minus [CLS] unless `pool_cls`.
pub fn pool_mask(batch: usize, seq_len: usize, valid: Option<&[bool]>, pool_cls: bool) -> Vec<bool> {
    (0..batch * seq_len)
        .map(|r| valid.is_none_or(|m| m[r]) && (pool_cls || r % seq_len != 0))
        .collect()
}

/// Batched global embeddings, `batch x common_dim`, each row unit-norm.
///
/// `features` holds `batch` sequences of `seq_len` rows.
#[allow(clippy::too_many_arguments)]
pub fn align_batch<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    features: Var,
    seq_len: usize,
    pool_valid: &[bool],
    strategy: AlignStrategy,
    agg: Aggregation,
    proj: &Mlp,
) -> Result<Var> {
    let width = g.value(features).ncols();
    if width != proj.in_dim() {
        return Err(McrError::Shape(format!(
            "feature width {width} does not match projection input {}",
            proj.in_dim()
        )));
    }
    let global = match strategy {
        AlignStrategy::Mba => {
            let mapped = proj.forward(g, store, features);
            g.pool(mapped, seq_len, agg, Some(pool_valid))?
        }
        AlignStrategy::Abm => {
            let pooled = g.pool(features, seq_len, agg, Some(pool_valid))?;
            proj.forward(g, store, pooled)
        }
    };
    g.l2_normalize(global)
}

/// Applies the projection to every token.
pub fn project<T: Real>(tokens: &TokenFeatures<T>, proj: &Mlp, store: &ParamStore<T>) -> Result<TokenFeatures<T>> {
    if tokens.features.ncols() != proj.in_dim() {
        return Err(McrError::Shape(format!(
            "token width {} does not match projection input {}",
            tokens.features.ncols(),
            proj.in_dim()
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(tokens.features.clone());
    let y = proj.forward(&mut g, store, x);
    Ok(TokenFeatures {
        features: g.value(y).clone(),
        ..tokens.clone()
    })
}

/// Element-wise max or mean over the token axis.
pub fn aggregate<T: Real>(tokens: ArrayView2<T>, mode: Aggregation) -> Result<Array1<T>> {
    if tokens.nrows() == 0 {
        return Err(McrError::Empty("aggregate over zero tokens"));
    }
    Ok(match mode {
        Aggregation::Max => tokens.fold_axis(Axis(0), T::neg_infinity(), |&a, &b| a.max(b)),
        Aggregation::Mean => tokens.mean_axis(Axis(0)).expect("non-empty"),
    })
}

fn unit<T: Real>(v: Array1<T>) -> Result<Array1<T>> {
    let n = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    if !(n.as_f64() >= 1e-12) {
        return Err(McrError::Numerical(format!("cannot normalize vector of norm {n}")));
    }
    Ok(v / n)
}

/// Global embedding of one sequence under `strategy`.
pub fn align_one<T: Real>(
    tokens: &TokenFeatures<T>,
    strategy: AlignStrategy,
    agg: Aggregation,
    proj: &Mlp,
    store: &ParamStore<T>,
) -> Result<Array1<T>> {
    match strategy {
        AlignStrategy::Mba => {
            let mapped = project(tokens, proj, store)?;
            unit(aggregate(mapped.features.view(), agg)?)
        }
        AlignStrategy::Abm => {
            let pooled = aggregate(tokens.features.view(), agg)?;
            let pooled = TokenFeatures {
                features: pooled.insert_axis(Axis(0)),
                modality: tokens.modality,
                positions: vec![0],
                has_cls: false,
            };
            let mapped = project(&pooled, proj, store)?;
            unit(mapped.features.row(0).to_owned())
        }
    }
}

/// Aligned image and report embeddings of one study.
pub fn align_pair<T: Real>(
    fv: &TokenFeatures<T>,
    fr: &TokenFeatures<T>,
    study_id: &str,
    strategy: AlignStrategy,
    agg: Aggregation,
    proj: &Projections,
    store: &ParamStore<T>,
) -> Result<(AlignedEmbedding<T>, AlignedEmbedding<T>)> {
    let sv = align_one(fv, strategy, agg, &proj.vision, store)?;
    let sr = align_one(fr, strategy, agg, &proj.text, store)?;
    Ok((
        AlignedEmbedding {
            vector: sv,
            modality: Modality::Vision,
            study_id: study_id.to_string(),
        },
        AlignedEmbedding {
            vector: sr,
            modality: Modality::Text,
            study_id: study_id.to_string(),
        },
    ))
}

/// Distance between the two modality centroids plus a 2-D principal-component
/// view of both clouds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModalityGap {
    pub gap: f64,
    /// Image points first, then report points, projected on the top two
    /// principal axes of the pooled cloud.
    pub scatter: Vec<[f64; 2]>,
    pub n_images: usize,
    pub n_reports: usize,
}

pub fn modality_gap(images: ArrayView2<f32>, reports: ArrayView2<f32>) -> Result<ModalityGap> {
    if images.nrows() == 0 || reports.nrows() == 0 {
        return Err(McrError::Empty("modality gap needs both embedding sets"));
    }
    if images.ncols() != reports.ncols() {
        return Err(McrError::Shape("embedding widths differ".into()));
    }
    let to64 = |m: ArrayView2<f32>| m.mapv(|x| x as f64);
    let (iv, rv) = (to64(images), to64(reports));
    let ci = iv.mean_axis(Axis(0)).expect("non-empty");
    let cr = rv.mean_axis(Axis(0)).expect("non-empty");
    let gap = (&ci - &cr).mapv(|x| x * x).sum().sqrt();
    let all = ndarray::concatenate(Axis(0), &[iv.view(), rv.view()]).expect("same width");
    let scatter = pca_2d(&all);
    Ok(ModalityGap {
        gap,
        scatter,
        n_images: images.nrows(),
        n_reports: reports.nrows(),
    })
}

/// Projection on the top two principal axes via power iteration with deflation.
fn pca_2d(x: &Array2<f64>) -> Vec<[f64; 2]> {
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let centered = x - &mean;
    let mut cov = centered.t().dot(&centered) / (x.nrows().max(2) - 1) as f64;
    let d = cov.nrows();
    let mut axes: Vec<Array1<f64>> = Vec::new();
    for k in 0..2.min(d) {
        let mut v = Array1::from_shape_fn(d, |i| 1.0 + ((i + k) % 7) as f64 * 0.1);
        let mut lambda = 0.0;
        for _ in 0..500 {
            let w = cov.dot(&v);
            let n = w.dot(&w).sqrt();
            if n < 1e-15 {
                break;
            }
            v = w / n;
            lambda = n;
        }
        let vv = v.clone().insert_axis(Axis(1));
        cov = cov - vv.dot(&vv.t()) * lambda;
        axes.push(v);
    }
    centered
        .rows()
        .into_iter()
        .map(|r| {
            let p = |i: usize| axes.get(i).map_or(0.0, |a| a.dot(&r));
            [p(0), p(1)]
        })
        .collect()
}

/// Magic bytes of the embedding matrix file.
pub const EMBEDDING_MAGIC: &[u8; 8] = b"MCREMB01";

/// Sidecar row describing one matrix row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingRow {
    pub study_id: String,
    pub modality: Modality,
    pub row: usize,
    /// View number for image rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view: Option<usize>,
}

/// Writes `matrix` as magic, `u64` rows, `u64` cols, then `f32` values, all
/// little-endian and row-major, plus one JSON line per row in `sidecar`.
pub fn export_embeddings(matrix: ArrayView2<f32>, rows: &[EmbeddingRow], bin: &Path, sidecar: &Path) -> Result<()> {
    if rows.len() != matrix.nrows() {
        return Err(McrError::Shape(format!("{} sidecar rows for {} matrix rows", rows.len(), matrix.nrows())));
    }
    let mut bytes = Vec::with_capacity(24 + matrix.len() * 4);
    bytes.extend_from_slice(EMBEDDING_MAGIC);
    bytes.extend_from_slice(&(matrix.nrows() as u64).to_le_bytes());
    bytes.extend_from_slice(&(matrix.ncols() as u64).to_le_bytes());
    for x in matrix.iter() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    std::fs::write(bin, bytes).map_err(|e| McrError::io(bin, e))?;
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r).expect("plain struct serializes"));
        text.push('\n');
    }
    std::fs::write(sidecar, text).map_err(|e| McrError::io(sidecar, e))
}

pub fn import_embeddings(bin: &Path, sidecar: &Path) -> Result<(Array2<f32>, Vec<EmbeddingRow>)> {
    let bytes = std::fs::read(bin).map_err(|e| McrError::io(bin, e))?;
    let bad = |reason: &str| McrError::Parse {
        what: bin.display().to_string(),
        reason: reason.into(),
    };
    if bytes.len() < 24 || &bytes[..8] != EMBEDDING_MAGIC {
        return Err(bad("not an embedding matrix"));
    }
    let word = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes")) as usize;
    let (n, d) = (word(8), word(16));
    if n.checked_mul(d).and_then(|x| x.checked_mul(4)) != Some(bytes.len() - 24) {
        return Err(bad("size does not match header"));
    }
    let values: Vec<f32> = bytes[24..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let matrix = Array2::from_shape_vec((n, d), values).expect("checked size");
    let text = std::fs::read_to_string(sidecar).map_err(|e| McrError::io(sidecar, e))?;
    let rows: Vec<EmbeddingRow> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| McrError::Parse {
                what: format!("{} line {}", sidecar.display(), i + 1),
                reason: e.to_string(),
            })
        })
        .collect::<Result<_>>()?;
    if rows.len() != n {
        return Err(McrError::Shape(format!("{} sidecar rows for {n} matrix rows", rows.len())));
    }
    if let Some((i, r)) = rows.iter().enumerate().find(|(i, r)| r.row != *i) {
        return Err(McrError::Data(format!("sidecar line {} names row {}", i + 1, r.row)));
    }
    Ok((matrix, rows))
}
