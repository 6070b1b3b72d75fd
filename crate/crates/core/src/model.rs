//! The full model: encoders, projections, decoders and the learnable
//! temperature, plus the batched loss graph for both input modes.

use ndarray::{Array2, Axis};

use crate::alignment::{align_batch, pool_mask, Projections};
use crate::autograd::{Graph, LrGroup, ParamId, ParamStore, Real, Var};
use crate::config::{ExperimentConfig, InputMode};
use crate::encoders::{TextEncoder, TextInput, VisionEncoder, VisionInput};
use crate::error::{McrError, Result};
use crate::masking::{apply_text_mask, MaskPlan};
use crate::objectives::{contrastive_node, mim_node, mrm_node, ImageDecoder, TextHead};
use crate::preprocessing::{PatchGrid, TokenSeq};
use crate::rng::purpose;

/// Ids of [PAD] and [MASK]; fixed by the canonical reserved-token layout.
pub const PAD_ID: u32 = 0;
pub const MASK_ID: u32 = 4;

#[derive(Clone, Debug)]
pub struct McrModel {
    pub cfg: ExperimentConfig,
    pub vision: VisionEncoder,
    pub text: TextEncoder,
    pub proj: Projections,
    pub image_decoder: ImageDecoder,
    pub text_head: TextHead,
    /// `1 x 1` natural log of the temperature.
    pub log_tau: ParamId,
}

/// One training sample: a chosen view, its targets, the report and a mask plan.
#[derive(Clone, Copy, Debug)]
pub struct BatchItem<'a> {
    pub patches: &'a PatchGrid,
    pub targets: &'a PatchGrid,
    pub tokens: &'a TokenSeq,
    pub plan: &'a MaskPlan,
}

/// Loss nodes of one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub vrc: Var,
    pub mim: Option<Var>,
    pub mrm: Option<Var>,
    pub total: Var,
}

impl McrModel {
    /// Builds the model and registers its parameters, initialized from the
    /// config's init stream.
    pub fn new<T: Real>(cfg: &ExperimentConfig, store: &mut ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let mut rng = cfg.rng(&[purpose::INIT]);
        let n = cfg.num_patches();
        let vision = VisionEncoder::new(
            store,
            n,
            cfg.patch_dim(),
            cfg.embed_dim,
            cfg.vision_depth,
            cfg.num_heads,
            cfg.mlp_ratio,
            &mut rng,
        );
        let text = TextEncoder::new(
            store,
            cfg.vocab_size,
            cfg.text_len(),
            cfg.embed_dim,
            cfg.text_depth,
            cfg.num_heads,
            cfg.mlp_ratio,
            &mut rng,
        );
        let proj = Projections::new(store, cfg.embed_dim, cfg.proj_hidden, cfg.proj_dim, &mut rng);
        let image_decoder = ImageDecoder::new(
            store,
            n,
            cfg.embed_dim,
            cfg.patch_dim(),
            cfg.decoder_depth,
            cfg.num_heads,
            cfg.mlp_ratio,
            &mut rng,
        );
        let text_head = TextHead::new(store, cfg.embed_dim, cfg.vocab_size, &mut rng);
        let log_tau = store.add(
            "log_tau",
            Array2::from_elem((1, 1), T::of(cfg.tau_init.ln())),
            LrGroup::Rest,
            false,
        );
        Ok(Self {
            cfg: cfg.clone(),
            vision,
            text,
            proj,
            image_decoder,
            text_head,
            log_tau,
        })
    }

    pub fn tau<T: Real>(&self, store: &ParamStore<T>) -> f64 {
        store.get(self.log_tau)[[0, 0]].as_f64().exp()
    }

    /// Unit-norm image embeddings of `images` (patch rows), batched, `n x d_s`.
    pub fn vision_embeddings<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        patches: &[&Array2<f32>],
        kept: &[Vec<usize>],
    ) -> Result<(Var, Var)> {
        let samples: Vec<_> = patches
            .iter()
            .zip(kept)
            .map(|(p, k)| (p.view(), k.as_slice()))
            .collect();
        let input = VisionInput::<T>::new(&samples)?;
        let enc = self.vision.forward(g, store, &input)?;
        let valid = pool_mask(input.batch, input.seq_len(), None, self.cfg.pool_cls);
        let s = align_batch(
            g,
            store,
            enc,
            input.seq_len(),
            &valid,
            self.cfg.align_strategy,
            self.cfg.agg,
            &self.proj.vision,
        )?;
        Ok((enc, s))
    }

    /// Unit-norm report embeddings, `n x d_s`, and the encoder output.
    pub fn text_embeddings<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        seqs: &[&TokenSeq],
    ) -> Result<(Var, Var)> {
        let input = TextInput::new(seqs, self.cfg.text_len(), PAD_ID, MASK_ID)?;
        let enc = self.text.forward(g, store, &input)?;
        let key_valid = input.key_valid();
        let valid = pool_mask(input.batch, input.seq_len, Some(&key_valid), self.cfg.pool_cls);
        let s = align_batch(
            g,
            store,
            enc,
            input.seq_len,
            &valid,
            self.cfg.align_strategy,
            self.cfg.agg,
            &self.proj.text,
        )?;
        Ok((enc, s))
    }

    /// Builds the full loss graph for one batch.
    ///
    /// Masked-only: the masked forwards feed the contrastive term and both
    /// reconstructions. Dual-input: extra complete forwards feed the
    /// contrastive term.
    pub fn loss_graph<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &[BatchItem<'_>],
    ) -> Result<LossNodes> {
        if batch.is_empty() {
            return Err(McrError::Empty("training batch"));
        }
        let cfg = &self.cfg;
        let n = cfg.num_patches();
        let mut kept = Vec::with_capacity(batch.len());
        let mut visible = Vec::with_capacity(batch.len());
        let mut masked_seqs = Vec::with_capacity(batch.len());
        let mut text_targets = Vec::with_capacity(batch.len());
        for item in batch {
            if item.patches.num_patches() != n || item.plan.num_patches != n {
                return Err(McrError::Shape(format!(
                    "batch item has {} patches / plan for {}, expected {n}",
                    item.patches.num_patches(),
                    item.plan.num_patches
                )));
            }
            let k = item.plan.kept_positions();
            visible.push(item.patches.patches.select(Axis(0), &k));
            kept.push(k);
            let m = apply_text_mask(item.tokens, item.plan, MASK_ID)?;
            text_targets.push(m.targets);
            masked_seqs.push(m.seq);
        }
        let visible_refs: Vec<&Array2<f32>> = visible.iter().collect();
        let masked_refs: Vec<&TokenSeq> = masked_seqs.iter().collect();
        let (enc_v, sv_masked) = self.vision_embeddings(g, store, &visible_refs, &kept)?;
        let (enc_r, sr_masked) = self.text_embeddings(g, store, &masked_refs)?;

        let (sv, sr) = match cfg.input_mode {
            InputMode::MaskedOnly => (sv_masked, sr_masked),
            InputMode::DualInput => {
                let full: Vec<&Array2<f32>> = batch.iter().map(|b| &b.patches.patches).collect();
                let all: Vec<Vec<usize>> = vec![(0..n).collect(); batch.len()];
                let (_, sv) = self.vision_embeddings(g, store, &full, &all)?;
                let originals: Vec<&TokenSeq> = batch.iter().map(|b| b.tokens).collect();
                let (_, sr) = self.text_embeddings(g, store, &originals)?;
                (sv, sr)
            }
        };
        let log_tau = g.param(store, self.log_tau);
        let vrc = contrastive_node(g, sv, sr, log_tau, cfg.tau_min, cfg.lambda_v, cfg.lambda_r)?;
        let mut terms = vec![(vrc, T::of(cfg.lambda_vrc))];

        let mim = if cfg.lambda_mim > 0.0 {
            let pred = self.image_decoder.forward(g, store, enc_v, &kept)?;
            let rows: Vec<_> = batch.iter().map(|b| b.targets.patches.view()).collect();
            let target = ndarray::concatenate(Axis(0), &rows)
                .map_err(|e| McrError::Shape(e.to_string()))?
                .mapv(|x| T::of(x as f64));
            let masked: Vec<Vec<usize>> = batch.iter().map(|b| b.plan.image_masked_idx.clone()).collect();
            let l = mim_node(g, pred, &target, &masked)?;
            terms.push((l, T::of(cfg.lambda_mim)));
            Some(l)
        } else {
            None
        };
        let mrm = if cfg.lambda_mrm > 0.0 && text_targets.iter().any(|t| !t.is_empty()) {
            let logits = self.text_head.forward(g, store, enc_r)?;
            let l = mrm_node(g, logits, cfg.text_len(), &text_targets)?;
            terms.push((l, T::of(cfg.lambda_mrm)));
            Some(l)
        } else {
            None
        };
        let total = g.weighted_sum(&terms);
        Ok(LossNodes { vrc, mim, mrm, total })
    }

    /// Unmasked image embeddings, `images.len() x d_s`, in chunks of `chunk`.
    pub fn embed_images<T: Real>(&self, store: &ParamStore<T>, images: &[&PatchGrid], chunk: usize) -> Result<Array2<f32>> {
        let n = self.cfg.num_patches();
        let mut out = Array2::zeros((images.len(), self.cfg.proj_dim));
        for (c, part) in images.chunks(chunk.max(1)).enumerate() {
            let mut g = Graph::new();
            let patches: Vec<&Array2<f32>> = part.iter().map(|p| &p.patches).collect();
            let all = vec![(0..n).collect(); part.len()];
            let (_, s) = self.vision_embeddings(&mut g, store, &patches, &all)?;
            let start = c * chunk.max(1);
            out.slice_mut(ndarray::s![start..start + part.len(), ..])
                .assign(&g.value(s).mapv(|x| x.as_f64() as f32));
        }
        Ok(out)
    }

    /// Unmasked report embeddings, `seqs.len() x d_s`.
    pub fn embed_reports<T: Real>(&self, store: &ParamStore<T>, seqs: &[&TokenSeq], chunk: usize) -> Result<Array2<f32>> {
        let mut out = Array2::zeros((seqs.len(), self.cfg.proj_dim));
        for (c, part) in seqs.chunks(chunk.max(1)).enumerate() {
            let mut g = Graph::new();
            let (_, s) = self.text_embeddings(&mut g, store, part)?;
            let start = c * chunk.max(1);
            out.slice_mut(ndarray::s![start..start + part.len(), ..])
                .assign(&g.value(s).mapv(|x| x.as_f64() as f32));
        }
        Ok(out)
    }
}
