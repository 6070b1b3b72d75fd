use ndarray::{s, Array2, Array3, ArrayView3};

use crate::error::{McrError, Result};

/// An image cut into non-overlapping square patches.
///
/// Row `k` holds the patch at grid cell `(k / grid_cols, k % grid_cols)`,
/// flattened in `(row, col, channel)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub patches: Array2<f32>,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl PatchGrid {
    pub fn num_patches(&self) -> usize {
        self.patches.nrows()
    }

    pub fn patch_dim(&self) -> usize {
        self.patches.ncols()
    }
}

pub fn patchify(image: ArrayView3<f32>, patch: usize) -> Result<PatchGrid> {
    let (h, w, c) = image.dim();
    if patch == 0 || h % patch != 0 || w % patch != 0 || h == 0 || w == 0 {
        return Err(McrError::Shape(format!(
            "image {h}x{w} not divisible into {patch}x{patch} patches"
        )));
    }
    let (rows, cols) = (h / patch, w / patch);
    let dim = patch * patch * c;
    let mut out = Array2::zeros((rows * cols, dim));
    for gr in 0..rows {
        for gc in 0..cols {
            let block = image.slice(s![gr * patch..(gr + 1) * patch, gc * patch..(gc + 1) * patch, ..]);
            let mut row = out.row_mut(gr * cols + gc);
            for (dst, &src) in row.iter_mut().zip(block.iter()) {
                *dst = src;
            }
        }
    }
    Ok(PatchGrid {
        patches: out,
        grid_rows: rows,
        grid_cols: cols,
    })
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(grid: &PatchGrid, patch: usize) -> Result<Array3<f32>> {
    let n = grid.grid_rows * grid.grid_cols;
    if patch == 0 || grid.patches.nrows() != n || !grid.patches.ncols().is_multiple_of(patch * patch) {
        return Err(McrError::Shape(format!(
            "patch matrix {:?} inconsistent with a {}x{} grid of {patch}x{patch} patches",
            grid.patches.dim(),
            grid.grid_rows,
            grid.grid_cols
        )));
    }
    let c = grid.patches.ncols() / (patch * patch);
    let mut img = Array3::zeros((grid.grid_rows * patch, grid.grid_cols * patch, c));
    for k in 0..n {
        let (gr, gc) = (k / grid.grid_cols, k % grid.grid_cols);
        let mut block = img.slice_mut(s![gr * patch..(gr + 1) * patch, gc * patch..(gc + 1) * patch, ..]);
        for (dst, &src) in block.iter_mut().zip(grid.patches.row(k).iter()) {
            *dst = src;
        }
    }
    Ok(img)
}

pub const PATCH_NORM_EPS: f64 = 1e-6;

/// Standardizes each patch to zero mean and unit variance; these are the
/// pixel-reconstruction targets.
pub fn normalize_patch_targets(grid: &PatchGrid) -> PatchGrid {
    let mut out = grid.clone();
    let n = grid.patch_dim() as f64;
    for mut row in out.patches.rows_mut() {
        let mean = row.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = row.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + PATCH_NORM_EPS).sqrt();
        row.mapv_inplace(|x| ((x as f64 - mean) * inv) as f32);
    }
    out
}
