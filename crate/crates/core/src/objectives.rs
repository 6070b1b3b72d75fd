//! Training losses: bidirectional contrastive alignment, masked image
//! reconstruction, masked report modeling, and their weighted sum.
//!
//! Each loss has a plain function over arrays and a graph node whose input
//! gradients are computed in closed form.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_rows_inplace, trunc_normal, Graph, LrGroup, ParamId, ParamStore, Real, Var};
use crate::config::ExperimentConfig;
use crate::error::{McrError, Result};
use crate::nn::{LayerNorm, Linear, TransformerStack, INIT_STD};

/// Loss values for one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_vrc: f64,
    pub l_mim: f64,
    pub l_mrm: f64,
    pub l_total: f64,
    pub tau_current: f64,
}

/// Value and gradients of the contrastive loss.
#[derive(Clone, Debug)]
pub struct ContrastiveGrad<T> {
    pub loss: T,
    pub d_sv: Array2<T>,
    pub d_sr: Array2<T>,
    /// Derivative with respect to `ln(tau)`.
    pub d_log_tau: T,
}

// Allow tau a hair below the floor: exp(ln(tau_min)) need not round-trip.
const TAU_SLACK: f64 = 1e-6;

/// `lambda_v * L(v->r) + lambda_r * L(r->v)`, each direction summed over the batch.
///
/// `sv` and `sr` are `B x d_s` with matching rows as positives.
pub fn contrastive_loss_grad<T: Real>(
    sv: ArrayView2<T>,
    sr: ArrayView2<T>,
    tau: T,
    tau_min: f64,
    lambda_v: f64,
    lambda_r: f64,
) -> Result<ContrastiveGrad<T>> {
    if sv.dim() != sr.dim() {
        return Err(McrError::Shape(format!(
            "contrastive batch mismatch: {:?} vs {:?}",
            sv.dim(),
            sr.dim()
        )));
    }
    let b = sv.nrows();
    if b == 0 {
        return Err(McrError::Empty("contrastive batch"));
    }
    if !(tau.as_f64() >= tau_min * (1.0 - TAU_SLACK)) {
        return Err(McrError::Numerical(format!("tau {tau} below floor {tau_min}")));
    }
    let inv_tau = T::one() / tau;
    let s = sv.dot(&sr.t()) * inv_tau;
    let mut p_row = s.clone();
    softmax_rows_inplace(&mut p_row);
    let mut p_col = s.t().to_owned();
    softmax_rows_inplace(&mut p_col);
    let p_col = p_col.reversed_axes();

    let (lv, lr) = (T::of(lambda_v), T::of(lambda_r));
    let mut loss_v = T::zero();
    let mut loss_r = T::zero();
    for i in 0..b {
        loss_v -= p_row[[i, i]].ln();
        loss_r -= p_col[[i, i]].ln();
    }
    let mut grad = &p_row * lv + &p_col * lr;
    for i in 0..b {
        grad[[i, i]] -= lv + lr;
    }
    let d_sv = grad.dot(&sr) * inv_tau;
    let d_sr = grad.t().dot(&sv) * inv_tau;
    let d_log_tau = -(&grad * &s).sum();
    Ok(ContrastiveGrad {
        loss: lv * loss_v + lr * loss_r,
        d_sv,
        d_sr,
        d_log_tau,
    })
}

pub fn contrastive_loss<T: Real>(
    sv: ArrayView2<T>,
    sr: ArrayView2<T>,
    tau: T,
    tau_min: f64,
    lambda_v: f64,
    lambda_r: f64,
) -> Result<T> {
    Ok(contrastive_loss_grad(sv, sr, tau, tau_min, lambda_v, lambda_r)?.loss)
}

/// Contrastive loss as a graph node; `log_tau` is a `1 x 1` node.
pub fn contrastive_node<T: Real>(
    g: &mut Graph<T>,
    sv: Var,
    sr: Var,
    log_tau: Var,
    tau_min: f64,
    lambda_v: f64,
    lambda_r: f64,
) -> Result<Var> {
    let tau = g.scalar(log_tau).exp();
    let out = contrastive_loss_grad(g.value(sv).view(), g.value(sr).view(), tau, tau_min, lambda_v, lambda_r)?;
    Ok(g.custom_loss(
        vec![sv, sr, log_tau],
        out.loss,
        vec![out.d_sv, out.d_sr, Array2::from_elem((1, 1), out.d_log_tau)],
    ))
}

fn check_masked(idx: &[usize], len: usize, what: &'static str) -> Result<()> {
    if idx.is_empty() {
        return Err(McrError::Empty(what));
    }
    if let Some(&bad) = idx.iter().find(|&&k| k >= len) {
        return Err(McrError::OutOfRange { index: bad, len });
    }
    Ok(())
}

/// Mean over masked patches of the per-patch mean squared error.
///
/// `pred` and `target` are `N x (P*P*C)`; `masked` indexes patches.
pub fn mim_loss(pred: ArrayView2<f64>, target: ArrayView2<f64>, masked: &[usize]) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(McrError::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    check_masked(masked, pred.nrows(), "masked patch set")?;
    let per_patch: f64 = masked
        .iter()
        .map(|&k| {
            let d = &pred.row(k) - &target.row(k);
            d.mapv(|x| x * x).mean().unwrap_or(0.0)
        })
        .sum();
    Ok(per_patch / masked.len() as f64)
}

/// Batched reconstruction loss, averaged over samples.
///
/// `pred` and `target` hold `batch` blocks of `n` patch rows; `masked[i]`
/// indexes patches of sample `i`.
pub fn mim_node<T: Real>(g: &mut Graph<T>, pred: Var, target: &Array2<T>, masked: &[Vec<usize>]) -> Result<Var> {
    let pv = g.value(pred);
    if pv.dim() != target.dim() {
        return Err(McrError::Shape(format!(
            "prediction {:?} vs target {:?}",
            pv.dim(),
            target.dim()
        )));
    }
    let batch = masked.len();
    if batch == 0 || !pv.nrows().is_multiple_of(batch) {
        return Err(McrError::Shape("reconstruction batch layout".into()));
    }
    let n = pv.nrows() / batch;
    let width = T::of(pv.ncols() as f64);
    let mut grad = Array2::zeros(pv.dim());
    let mut total = T::zero();
    for (i, idx) in masked.iter().enumerate() {
        check_masked(idx, n, "masked patch set")?;
        let w = T::one() / (T::of(idx.len() as f64) * width * T::of(batch as f64));
        for &k in idx {
            let r = i * n + k;
            for c in 0..pv.ncols() {
                let d = pv[[r, c]] - target[[r, c]];
                total += w * d * d;
                grad[[r, c]] = T::of(2.0) * w * d;
            }
        }
    }
    Ok(g.custom_loss(vec![pred], total, vec![grad]))
}

/// Mean cross-entropy over masked positions.
///
/// `masked` lists `(position, original id)` pairs.
pub fn mrm_loss(logits: ArrayView2<f64>, masked: &[(usize, u32)]) -> Result<f64> {
    if masked.is_empty() {
        return Err(McrError::Empty("masked token set"));
    }
    let mut total = 0.0;
    for &(pos, id) in masked {
        if pos >= logits.nrows() {
            return Err(McrError::OutOfRange {
                index: pos,
                len: logits.nrows(),
            });
        }
        if id as usize >= logits.ncols() {
            return Err(McrError::OutOfRange {
                index: id as usize,
                len: logits.ncols(),
            });
        }
        let row = logits.row(pos);
        let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = mx + row.mapv(|x| (x - mx).exp()).sum().ln();
        total += lse - row[id as usize];
    }
    Ok(total / masked.len() as f64)
}

/// Batched masked-token loss over `logits` of `batch * seq_len` rows, averaged
/// over samples that have at least one masked token.
pub fn mrm_node<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    seq_len: usize,
    masked: &[Vec<(usize, u32)>],
) -> Result<Var> {
    let lv = g.value(logits);
    let (rows, classes) = lv.dim();
    if rows != seq_len * masked.len() {
        return Err(McrError::Shape("masked-token batch layout".into()));
    }
    let active = masked.iter().filter(|m| !m.is_empty()).count();
    if active == 0 {
        return Err(McrError::Empty("masked token set"));
    }
    let mut grad = Array2::zeros(lv.dim());
    let mut total = T::zero();
    for (i, targets) in masked.iter().enumerate() {
        if targets.is_empty() {
            continue;
        }
        let w = T::one() / (T::of(targets.len() as f64) * T::of(active as f64));
        for &(pos, id) in targets {
            if pos >= seq_len || id as usize >= classes {
                return Err(McrError::OutOfRange {
                    index: if pos >= seq_len { pos } else { id as usize },
                    len: if pos >= seq_len { seq_len } else { classes },
                });
            }
            let r = i * seq_len + pos;
            let mut p = lv.row(r).to_owned().insert_axis(Axis(0));
            softmax_rows_inplace(&mut p);
            total -= w * p[[0, id as usize]].ln();
            p[[0, id as usize]] -= T::one();
            grad.row_mut(r).scaled_add(w, &p.row(0));
        }
    }
    Ok(g.custom_loss(vec![logits], total, vec![grad]))
}

/// Weighted sum of the three parts.
pub fn total_loss(l_vrc: f64, l_mim: f64, l_mrm: f64, tau: f64, cfg: &ExperimentConfig) -> Result<LossBundle> {
    for (name, v) in [("l_vrc", l_vrc), ("l_mim", l_mim), ("l_mrm", l_mrm)] {
        if !v.is_finite() {
            return Err(McrError::Numerical(format!("{name} is {v}")));
        }
    }
    Ok(LossBundle {
        l_vrc,
        l_mim,
        l_mrm,
        l_total: cfg.lambda_vrc * l_vrc + cfg.lambda_mim * l_mim + cfg.lambda_mrm * l_mrm,
        tau_current: tau,
    })
}

/// Reconstructs full-length sequences from encoded visible patches and predicts
/// pixels for every patch.
#[derive(Clone, Debug)]
pub struct ImageDecoder {
    pub embed: Linear,
    pub mask_token: ParamId,
    pub pos: ParamId,
    pub stack: TransformerStack,
    pub head: Linear,
    pub num_patches: usize,
}

impl ImageDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        num_patches: usize,
        dim: usize,
        patch_dim: usize,
        depth: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Self {
        let g = LrGroup::Rest;
        Self {
            embed: Linear::new(store, "decoder.embed", dim, dim, g, rng),
            mask_token: store.add("decoder.mask_token", trunc_normal(1, dim, INIT_STD, rng), g, false),
            pos: store.add(
                "decoder.pos",
                trunc_normal(num_patches + 1, dim, INIT_STD, rng),
                g,
                false,
            ),
            stack: TransformerStack::new(store, "decoder", depth, dim, heads, mlp_ratio, g, rng),
            head: Linear::new(store, "decoder.head", dim, patch_dim, g, rng),
            num_patches,
        }
    }

    /// Pixel predictions `(batch * N) x patch_dim` from encoder output laid out
    /// as `batch` sequences of `[CLS] + kept patches`.
    ///
    /// `kept` holds the sorted visible indices of each sample.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        encoded: Var,
        kept: &[Vec<usize>],
    ) -> Result<Var> {
        let batch = kept.len();
        let n = self.num_patches;
        let Some(n_kept) = kept.first().map(Vec::len) else {
            return Err(McrError::Empty("decoder batch"));
        };
        if g.value(encoded).nrows() != batch * (n_kept + 1) {
            return Err(McrError::Shape(format!(
                "decoder expects {} rows, got {}",
                batch * (n_kept + 1),
                g.value(encoded).nrows()
            )));
        }
        let mask_row = batch * (n_kept + 1);
        let mut order = Vec::with_capacity(batch * (n + 1));
        for (i, pos) in kept.iter().enumerate() {
            if pos.len() != n_kept || pos.windows(2).any(|w| w[0] >= w[1]) {
                return Err(McrError::Mask(format!(
                    "sample {i}: kept positions must be {n_kept} strictly increasing indices"
                )));
            }
            if let Some(&bad) = pos.iter().find(|&&p| p >= n) {
                return Err(McrError::OutOfRange { index: bad, len: n });
            }
            let base = i * (n_kept + 1);
            order.push(base);
            let mut next = pos.iter().enumerate().peekable();
            for k in 0..n {
                match next.peek() {
                    Some(&(j, &p)) if p == k => {
                        order.push(base + 1 + j);
                        next.next();
                    }
                    _ => order.push(mask_row),
                }
            }
        }
        let x = self.embed.forward(g, store, encoded);
        let mask = g.param(store, self.mask_token);
        let rows = g.concat(&[x, mask]);
        let full = g.gather(rows, order);
        let table = g.param(store, self.pos);
        let pos = g.gather(table, (0..batch).flat_map(|_| 0..=n).collect());
        let x = g.add(full, pos);
        let x = self.stack.forward(g, store, x, n + 1, None)?;
        let patches = g.gather(
            x,
            (0..batch).flat_map(|i| (1..=n).map(move |k| i * (n + 1) + k)).collect(),
        );
        Ok(self.head.forward(g, store, patches))
    }

    /// Single-sample predictions `N x patch_dim`.
    pub fn decode_image<T: Real>(
        &self,
        store: &ParamStore<T>,
        encoded: ArrayView2<T>,
        kept: &[usize],
    ) -> Result<Array2<T>> {
        let mut g = Graph::new();
        let x = g.constant(encoded.to_owned());
        let out = self.forward(&mut g, store, x, &[kept.to_vec()])?;
        Ok(g.value(out).clone())
    }
}

/// Per-position vocabulary logits: dense, GELU, layer norm, output affine.
#[derive(Clone, Debug)]
pub struct TextHead {
    pub dense: Linear,
    pub norm: LayerNorm,
    pub out: Linear,
}

impl TextHead {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, dim: usize, vocab: usize, rng: &mut R) -> Self {
        let g = LrGroup::Rest;
        Self {
            dense: Linear::new(store, "text_head.dense", dim, dim, g, rng),
            norm: LayerNorm::new(store, "text_head.norm", dim, g),
            out: Linear::new(store, "text_head.out", dim, vocab, g, rng),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let width = g.value(x).ncols();
        if width != self.dense.in_dim {
            return Err(McrError::Shape(format!(
                "text head expects width {}, got {width}",
                self.dense.in_dim
            )));
        }
        let h = self.dense.forward(g, store, x);
        let h = g.gelu(h);
        let h = self.norm.forward(g, store, h);
        Ok(self.out.forward(g, store, h))
    }

    pub fn decode_text<T: Real>(&self, store: &ParamStore<T>, features: ArrayView2<T>) -> Result<Array2<T>> {
        let mut g = Graph::new();
        let x = g.constant(features.to_owned());
        let out = self.forward(&mut g, store, x)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn single_pair_has_zero_loss() {
        let v = array![[0.6, 0.8]];
        assert_abs_diff_eq!(contrastive_loss(v.view(), v.view(), 0.07, 0.01, 0.75, 0.25).unwrap(), 0.0);
    }

    #[test]
    fn uniform_similarities() {
        let v = Array2::from_elem((4, 1), 1.0);
        let l = contrastive_loss(v.view(), v.view(), 0.5, 0.01, 0.75, 0.25).unwrap();
        assert_abs_diff_eq!(l, 4.0 * 4f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(l, 5.54518, epsilon = 1e-5);
    }

    #[test]
    fn identity_basis_at_unit_temperature() {
        let e = Array2::<f64>::eye(2);
        let l = contrastive_loss(e.view(), e.view(), 1.0, 0.01, 0.75, 0.25).unwrap();
        assert_abs_diff_eq!(l, 0.626_523_4, epsilon = 1e-6);
    }

    #[test]
    fn contrastive_rejects_bad_inputs() {
        let a = Array2::<f64>::eye(2);
        let b = Array2::<f64>::eye(3);
        assert!(contrastive_loss(a.view(), b.view(), 0.1, 0.01, 0.75, 0.25).is_err());
        assert!(contrastive_loss(a.view(), a.view(), 0.005, 0.01, 0.75, 0.25).is_err());
    }

    #[test]
    fn mim_cases() {
        let t = array![[0.0, 1.0], [2.0, 3.0], [4.0, 5.0]];
        assert_eq!(mim_loss(t.view(), t.view(), &[0, 2]).unwrap(), 0.0);
        let p = &t + 0.1;
        assert_abs_diff_eq!(mim_loss(p.view(), t.view(), &[1]).unwrap(), 0.01, epsilon = 1e-12);
        assert!(mim_loss(p.view(), t.view(), &[]).is_err());
    }

    #[test]
    fn mrm_cases() {
        let uniform = Array2::<f64>::zeros((3, 100));
        assert_abs_diff_eq!(mrm_loss(uniform.view(), &[(1, 7)]).unwrap(), 100f64.ln(), epsilon = 1e-12);
        let mut sharp = Array2::<f64>::zeros((3, 5));
        sharp[[2, 3]] = 20.0;
        assert!(mrm_loss(sharp.view(), &[(2, 3)]).unwrap() < 1e-8);
        assert!(mrm_loss(sharp.view(), &[]).is_err());
    }

    #[test]
    fn total_weights() {
        let cfg = ExperimentConfig::default();
        let b = total_loss(1.0, 1.0, 1.0, 0.07, &cfg).unwrap();
        assert_abs_diff_eq!(b.l_total, 2.1, epsilon = 1e-12);
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.07, &cfg).unwrap().l_total, 0.0);
        assert!(total_loss(f64::NAN, 0.0, 0.0, 0.07, &cfg).is_err());
    }

    #[test]
    fn decoder_output_shape_and_zero_params() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng::stream(1, &[]);
        let dec = ImageDecoder::new(&mut store, 4, 8, 12, 0, 2, 2, &mut r);
        let enc = Array2::from_elem((3, 8), 0.3);
        let out = dec.decode_image(&store, enc.view(), &[0, 2]).unwrap();
        assert_eq!(out.dim(), (4, 12));
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).fill(0.0);
        }
        let out = dec.decode_image(&store, enc.view(), &[0, 2]).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
        assert!(dec.decode_image(&store, enc.view(), &[2, 0]).is_err());
        assert!(dec.decode_image(&store, enc.view(), &[0, 9]).is_err());
    }

    #[test]
    fn text_head_zero_params_give_zero_logits() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng::stream(2, &[]);
        let head = TextHead::new(&mut store, 8, 20, &mut r);
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).fill(0.0);
        }
        let logits = head.decode_text(&store, Array2::from_elem((34, 8), 1.0).view()).unwrap();
        assert_eq!(logits.dim(), (34, 20));
        assert!(logits.iter().all(|&v| v == 0.0));
        assert!(head.decode_text(&store, Array2::zeros((3, 5)).view()).is_err());
    }
}
