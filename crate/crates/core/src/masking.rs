//! Random mask plans shared by the contrastive and reconstruction objectives.
//!
//! Index sets are drawn with a partial Fisher-Yates shuffle driven by 32-bit
//! draws from the caller's stream, so a seeded stream yields the same plan on
//! every platform.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{McrError, Result};
use crate::preprocessing::{PatchGrid, TokenSeq};

/// `clamp(floor(rate * n), 1, n - 1)`; both proxy tasks always have a visible
/// and a masked item.
pub fn mask_count(n_items: usize, rate: f64) -> usize {
    let raw = (rate * n_items as f64).floor() as usize;
    raw.clamp(1, n_items.saturating_sub(1).max(1))
}

/// Uniformly random sorted subset of `[0, n_items)` of size [`mask_count`].
pub fn sample_mask<R: Rng + ?Sized>(n_items: usize, rate: f64, rng: &mut R) -> Result<Vec<usize>> {
    if n_items < 2 {
        return Err(McrError::Mask(format!("need at least 2 items, got {n_items}")));
    }
    if !(rate > 0.0 && rate < 1.0) {
        return Err(McrError::Mask(format!("rate {rate} not inside (0, 1)")));
    }
    if n_items > u32::MAX as usize {
        return Err(McrError::Mask("too many items".into()));
    }
    let k = mask_count(n_items, rate);
    let mut pool: Vec<usize> = (0..n_items).collect();
    for i in 0..k {
        let j = rng.random_range(i as u32..n_items as u32) as usize;
        pool.swap(i, j);
    }
    let mut chosen = pool[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Masked index sets for one image and its report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    /// Masked patch indices, sorted, within `[0, N)`.
    pub image_masked_idx: Vec<usize>,
    /// Masked body positions, sorted, within `[1, body_len]` of the framed sequence.
    pub text_masked_idx: Vec<usize>,
    pub num_patches: usize,
    pub body_len: usize,
}

impl MaskPlan {
    pub fn sample<R: Rng + ?Sized>(
        num_patches: usize,
        image_rate: f64,
        body_len: usize,
        text_rate: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let image_masked_idx = sample_mask(num_patches, image_rate, rng)?;
        let text_masked_idx = if body_len >= 2 {
            sample_mask(body_len, text_rate, rng)?
                .into_iter()
                .map(|i| i + 1)
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            image_masked_idx,
            text_masked_idx,
            num_patches,
            body_len,
        })
    }

    pub fn realized_image_rate(&self) -> f64 {
        self.image_masked_idx.len() as f64 / self.num_patches as f64
    }

    pub fn realized_text_rate(&self) -> f64 {
        if self.body_len == 0 {
            0.0
        } else {
            self.text_masked_idx.len() as f64 / self.body_len as f64
        }
    }

    /// Visible patch indices in increasing order.
    pub fn kept_positions(&self) -> Vec<usize> {
        let mut masked = self.image_masked_idx.iter().peekable();
        (0..self.num_patches)
            .filter(|i| {
                if masked.peek() == Some(&i) {
                    masked.next();
                    false
                } else {
                    true
                }
            })
            .collect()
    }
}

fn check_sorted_unique(idx: &[usize], len: usize, what: &str) -> Result<()> {
    for w in idx.windows(2) {
        if w[0] >= w[1] {
            return Err(McrError::Mask(format!("{what} indices not strictly increasing")));
        }
    }
    if let Some(&last) = idx.last() {
        if last >= len {
            return Err(McrError::OutOfRange { index: last, len });
        }
    }
    Ok(())
}

/// Drops masked patches. Returns the visible rows in original order and their
/// original indices.
pub fn apply_image_mask(grid: &PatchGrid, plan: &MaskPlan) -> Result<(Array2<f32>, Vec<usize>)> {
    let n = grid.num_patches();
    check_sorted_unique(&plan.image_masked_idx, n, "image")?;
    if plan.image_masked_idx.is_empty() {
        return Err(McrError::Mask("image mask is empty".into()));
    }
    if plan.image_masked_idx.len() >= n {
        return Err(McrError::Mask("image mask hides every patch".into()));
    }
    let kept = MaskPlan {
        num_patches: n,
        ..plan.clone()
    }
    .kept_positions();
    Ok((grid.patches.select(Axis(0), &kept), kept))
}

/// Masked report tokens plus the original ids they replaced.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedTokens {
    pub seq: TokenSeq,
    /// `(position, original id)` for every masked position.
    pub targets: Vec<(usize, u32)>,
}

/// Replaces every planned body position with `mask_id`.
pub fn apply_text_mask(seq: &TokenSeq, plan: &MaskPlan, mask_id: u32) -> Result<MaskedTokens> {
    let len = seq.ids.len();
    check_sorted_unique(&plan.text_masked_idx, len, "text")?;
    let mut out = seq.clone();
    let mut targets = Vec::with_capacity(plan.text_masked_idx.len());
    for &p in &plan.text_masked_idx {
        if p == 0 || p + 1 >= len {
            return Err(McrError::Mask(format!(
                "position {p} is [CLS] or [SEP] in a sequence of length {len}"
            )));
        }
        targets.push((p, seq.ids[p]));
        out.ids[p] = mask_id;
    }
    Ok(MaskedTokens { seq: out, targets })
}

#[derive(Serialize)]
struct PlanRecord<'a> {
    study_id: &'a str,
    image_masked_idx: &'a [usize],
    text_masked_idx: &'a [usize],
}

/// Writes one JSON object per plan: `study_id`, `image_masked_idx`, `text_masked_idx`.
pub fn write_plans_jsonl<'a, I>(path: &Path, plans: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a MaskPlan)>,
{
    let file = std::fs::File::create(path).map_err(|e| McrError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for (study_id, plan) in plans {
        let rec = PlanRecord {
            study_id,
            image_masked_idx: &plan.image_masked_idx,
            text_masked_idx: &plan.text_masked_idx,
        };
        let line = serde_json::to_string(&rec).expect("plan serializes");
        writeln!(w, "{line}").map_err(|e| McrError::io(path, e))?;
    }
    w.flush().map_err(|e| McrError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::Array2;

    #[test]
    fn counts_follow_floor_and_clamp() {
        let mut r = rng::stream(0, &[]);
        assert_eq!(sample_mask(196, 0.5, &mut r).unwrap().len(), 98);
        assert_eq!(sample_mask(32, 0.25, &mut r).unwrap().len(), 8);
        assert_eq!(sample_mask(4, 0.01, &mut r).unwrap().len(), 1);
        assert_eq!(sample_mask(4, 0.99, &mut r).unwrap().len(), 3);
        assert_eq!(sample_mask(2, 0.5, &mut r).unwrap().len(), 1);
        assert!(sample_mask(1, 0.5, &mut r).is_err());
        assert!(sample_mask(10, 1.0, &mut r).is_err());
    }

    #[test]
    fn sample_is_sorted_and_in_range() {
        let mut r = rng::stream(1, &[]);
        for _ in 0..100 {
            let m = sample_mask(20, 0.3, &mut r).unwrap();
            assert!(m.windows(2).all(|w| w[0] < w[1]));
            assert!(m.iter().all(|&i| i < 20));
        }
    }

    fn grid(n: usize) -> PatchGrid {
        PatchGrid {
            patches: Array2::from_shape_fn((n, 2), |(r, c)| (r * 10 + c) as f32),
            grid_rows: 1,
            grid_cols: n,
        }
    }

    fn plan(image: Vec<usize>, n: usize) -> MaskPlan {
        MaskPlan {
            image_masked_idx: image,
            text_masked_idx: vec![],
            num_patches: n,
            body_len: 0,
        }
    }

    #[test]
    fn image_mask_keeps_original_order() {
        let (kept, pos) = apply_image_mask(&grid(4), &plan(vec![1, 3], 4)).unwrap();
        assert_eq!(pos, vec![0, 2]);
        assert_eq!(kept, ndarray::array![[0.0, 1.0], [20.0, 21.0]]);
    }

    #[test]
    fn image_mask_error_paths() {
        assert!(apply_image_mask(&grid(4), &plan(vec![], 4)).is_err());
        assert!(apply_image_mask(&grid(4), &plan(vec![0, 1, 2, 3], 4)).is_err());
        assert!(apply_image_mask(&grid(4), &plan(vec![4], 4)).is_err());
        assert!(apply_image_mask(&grid(4), &plan(vec![2, 1], 4)).is_err());
    }

    #[test]
    fn kept_plus_masked_rows_reassemble_the_grid() {
        let mut r = rng::stream(5, &[]);
        let g = grid(16);
        for _ in 0..20 {
            let p = MaskPlan::sample(16, 0.5, 0, 0.25, &mut r).unwrap();
            let (kept, pos) = apply_image_mask(&g, &p).unwrap();
            assert!(pos.windows(2).all(|w| w[0] < w[1]));
            let mut rows: Vec<(usize, Vec<f32>)> = pos
                .iter()
                .zip(kept.rows())
                .map(|(&i, r)| (i, r.to_vec()))
                .chain(p.image_masked_idx.iter().map(|&i| (i, g.patches.row(i).to_vec())))
                .collect();
            rows.sort_by_key(|(i, _)| *i);
            let flat: Vec<f32> = rows.into_iter().flat_map(|(_, r)| r).collect();
            assert_eq!(flat, g.patches.iter().copied().collect::<Vec<_>>());
        }
    }

    fn seq(body: usize) -> TokenSeq {
        let mut ids = vec![2];
        ids.extend((0..body as u32).map(|i| 10 + i));
        ids.push(3);
        TokenSeq {
            offsets: vec![(0, 0); ids.len()],
            ids,
        }
    }

    #[test]
    fn text_mask_minimum_and_maximum() {
        let mut r = rng::stream(2, &[]);
        let p = MaskPlan::sample(4, 0.5, 2, 0.01, &mut r).unwrap();
        let m = apply_text_mask(&seq(2), &p, 4).unwrap();
        assert_eq!(m.seq.ids.iter().filter(|&&i| i == 4).count(), 1);
        let p = MaskPlan::sample(4, 0.5, 5, 0.99, &mut r).unwrap();
        assert_eq!(p.text_masked_idx.len(), 4);
    }

    #[test]
    fn text_mask_places_mask_ids_at_plan_positions() {
        let mut r = rng::stream(3, &[]);
        let s = seq(10);
        let p = MaskPlan::sample(4, 0.5, 10, 0.25, &mut r).unwrap();
        let m = apply_text_mask(&s, &p, 4).unwrap();
        let positions: Vec<usize> = (0..m.seq.ids.len()).filter(|&i| m.seq.ids[i] == 4).collect();
        assert_eq!(positions, p.text_masked_idx);
        assert_eq!(positions.len(), 2);
        assert_eq!(m.seq.ids.len(), s.ids.len());
        for &(pos, orig) in &m.targets {
            assert_eq!(s.ids[pos], orig);
        }
    }

    #[test]
    fn text_mask_refuses_frame_tokens() {
        let s = seq(3);
        let mut p = plan(vec![0], 2);
        p.text_masked_idx = vec![0];
        assert!(apply_text_mask(&s, &p, 4).is_err());
        p.text_masked_idx = vec![4];
        assert!(apply_text_mask(&s, &p, 4).is_err());
    }

    #[test]
    fn same_seed_same_plans() {
        let draw = || {
            let mut r = rng::stream(11, &[rng::purpose::MASK]);
            (0..50)
                .map(|_| MaskPlan::sample(64, 0.5, 20, 0.25, &mut r).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn plans_serialize_to_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plans.jsonl");
        let p = MaskPlan {
            image_masked_idx: vec![1, 2],
            text_masked_idx: vec![3],
            num_patches: 4,
            body_len: 4,
        };
        write_plans_jsonl(&path, [("s1", &p), ("s2", &p)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["study_id"], "s1");
        assert_eq!(first["image_masked_idx"], serde_json::json!([1, 2]));
        assert_eq!(text.lines().count(), 2);
    }
}
