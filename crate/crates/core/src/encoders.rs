//! Vision and text encoders fed with masked (or, at inference, complete) inputs.
//!
//! Positional tables hold one row per possible position plus row 0 for
//! [CLS]; a visible patch with original index `k` always reads row `k + 1`.

use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{trunc_normal, Graph, LrGroup, ParamId, ParamStore, Real, Var};
use crate::error::{McrError, Result};
use crate::nn::{Linear, TransformerStack, INIT_STD};
use crate::preprocessing::TokenSeq;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Vision,
    Text,
}

/// Per-token features of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenFeatures<T> {
    pub features: Array2<T>,
    pub modality: Modality,
    /// Original position of each row; [CLS] is reported as position 0 and
    /// patch `k` as `k + 1`, text tokens by their framed index.
    pub positions: Vec<usize>,
    pub has_cls: bool,
}

/// Batch of visible patches; every sequence holds `n_kept` patches.
#[derive(Clone, Debug)]
pub struct VisionInput<T> {
    /// `(batch * n_kept) x patch_dim`.
    pub patches: Array2<T>,
    /// Original patch index of every row of `patches`.
    pub positions: Vec<usize>,
    pub batch: usize,
    pub n_kept: usize,
}

impl<T: Real> VisionInput<T> {
    pub fn new(samples: &[(ArrayView2<f32>, &[usize])]) -> Result<Self> {
        let Some((first, _)) = samples.first() else {
            return Err(McrError::Empty("vision batch"));
        };
        let (n_kept, dim) = first.dim();
        let mut patches = Array2::zeros((samples.len() * n_kept, dim));
        let mut positions = Vec::with_capacity(samples.len() * n_kept);
        for (i, (p, pos)) in samples.iter().enumerate() {
            if p.dim() != (n_kept, dim) || pos.len() != n_kept {
                return Err(McrError::Shape(format!(
                    "vision sample {i}: {:?} patches / {} positions, expected ({n_kept}, {dim})",
                    p.dim(),
                    pos.len()
                )));
            }
            for (r, row) in p.rows().into_iter().enumerate() {
                for (c, &v) in row.iter().enumerate() {
                    patches[[i * n_kept + r, c]] = T::of(v as f64);
                }
            }
            positions.extend_from_slice(pos);
        }
        Ok(Self {
            patches,
            positions,
            batch: samples.len(),
            n_kept,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.n_kept + 1
    }
}

/// Batch of framed token sequences padded to a common length.
#[derive(Clone, Debug)]
pub struct TextInput {
    /// `batch * seq_len` ids, row-major.
    pub ids: Vec<u32>,
    pub batch: usize,
    pub seq_len: usize,
    pub pad_id: u32,
    pub mask_id: u32,
}

impl TextInput {
    pub fn new(seqs: &[&TokenSeq], seq_len: usize, pad_id: u32, mask_id: u32) -> Result<Self> {
        if seqs.is_empty() {
            return Err(McrError::Empty("text batch"));
        }
        let mut ids = Vec::with_capacity(seqs.len() * seq_len);
        for (i, s) in seqs.iter().enumerate() {
            if s.ids.len() > seq_len {
                return Err(McrError::Shape(format!(
                    "text sample {i} has {} tokens, longer than {seq_len}",
                    s.ids.len()
                )));
            }
            ids.extend_from_slice(&s.ids);
            ids.extend(std::iter::repeat_n(pad_id, seq_len - s.ids.len()));
        }
        Ok(Self {
            ids,
            batch: seqs.len(),
            seq_len,
            pad_id,
            mask_id,
        })
    }

    /// `false` at [PAD] positions.
    pub fn key_valid(&self) -> Vec<bool> {
        self.ids.iter().map(|&i| i != self.pad_id).collect()
    }
}

/// Counts encoder forwards by whether the input was masked.
#[derive(Debug, Default)]
pub struct ForwardCounter {
    masked: AtomicUsize,
    full: AtomicUsize,
}

impl ForwardCounter {
    fn record(&self, full: bool, n: usize) {
        let slot = if full { &self.full } else { &self.masked };
        slot.fetch_add(n, Ordering::Relaxed);
    }

    /// Sequences encoded from masked input.
    pub fn masked(&self) -> usize {
        self.masked.load(Ordering::Relaxed)
    }

    /// Sequences encoded from complete input.
    pub fn full(&self) -> usize {
        self.full.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.masked.store(0, Ordering::Relaxed);
        self.full.store(0, Ordering::Relaxed);
    }
}

impl Clone for ForwardCounter {
    fn clone(&self) -> Self {
        Self {
            masked: AtomicUsize::new(self.masked()),
            full: AtomicUsize::new(self.full()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct VisionEncoder {
    pub patch_embed: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub stack: TransformerStack,
    pub num_patches: usize,
    pub counter: ForwardCounter,
}

impl VisionEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        num_patches: usize,
        patch_dim: usize,
        dim: usize,
        depth: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Self {
        let g = LrGroup::Encoder;
        let patch_embed = Linear::new(store, "vision.patch_embed", patch_dim, dim, g, rng);
        let cls = store.add("vision.cls", trunc_normal(1, dim, INIT_STD, rng), g, false);
        let pos = store.add(
            "vision.pos",
            trunc_normal(num_patches + 1, dim, INIT_STD, rng),
            g,
            false,
        );
        let stack = TransformerStack::new(store, "vision", depth, dim, heads, mlp_ratio, g, rng);
        Self {
            patch_embed,
            cls,
            pos,
            stack,
            num_patches,
            counter: ForwardCounter::default(),
        }
    }

    /// `[CLS] + pos[0]`, then `affine(patch_j) + pos[position_j + 1]` per sequence.
    pub fn embed<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        input: &VisionInput<T>,
    ) -> Result<Var> {
        if let Some(&bad) = input.positions.iter().find(|&&p| p >= self.num_patches) {
            return Err(McrError::OutOfRange {
                index: bad,
                len: self.num_patches,
            });
        }
        let (b, n) = (input.batch, input.n_kept);
        let x = g.constant(input.patches.clone());
        let e = self.patch_embed.forward(g, store, x);
        let cls = g.param(store, self.cls);
        let rows = g.concat(&[e, cls]);
        let mut order = Vec::with_capacity(b * (n + 1));
        let mut pos_rows = Vec::with_capacity(b * (n + 1));
        for i in 0..b {
            order.push(b * n);
            pos_rows.push(0);
            for j in 0..n {
                order.push(i * n + j);
                pos_rows.push(input.positions[i * n + j] + 1);
            }
        }
        let tokens = g.gather(rows, order);
        let table = g.param(store, self.pos);
        let pos = g.gather(table, pos_rows);
        Ok(g.add(tokens, pos))
    }

    /// Encoded features, `(batch * (n_kept + 1)) x d`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        input: &VisionInput<T>,
    ) -> Result<Var> {
        let x = self.embed(g, store, input)?;
        let out = self.stack.forward(g, store, x, input.seq_len(), None)?;
        self.counter.record(input.n_kept == self.num_patches, input.batch);
        Ok(out)
    }

    /// Single-sequence convenience wrapper around [`Self::forward`].
    pub fn encode_visual<T: Real>(
        &self,
        store: &ParamStore<T>,
        kept_patches: ArrayView2<f32>,
        kept_positions: &[usize],
    ) -> Result<TokenFeatures<T>> {
        let input = VisionInput::new(&[(kept_patches, kept_positions)])?;
        let mut g = Graph::new();
        let out = self.forward(&mut g, store, &input)?;
        let mut positions = vec![0];
        positions.extend(kept_positions.iter().map(|p| p + 1));
        Ok(TokenFeatures {
            features: g.value(out).clone(),
            modality: Modality::Vision,
            positions,
            has_cls: true,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub word_emb: ParamId,
    pub pos: ParamId,
    pub stack: TransformerStack,
    pub vocab_size: usize,
    pub text_len: usize,
    pub counter: ForwardCounter,
}

impl TextEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        vocab_size: usize,
        text_len: usize,
        dim: usize,
        depth: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Self {
        let g = LrGroup::Encoder;
        let word_emb = store.add("text.word_emb", trunc_normal(vocab_size, dim, INIT_STD, rng), g, false);
        let pos = store.add("text.pos", trunc_normal(text_len, dim, INIT_STD, rng), g, false);
        let stack = TransformerStack::new(store, "text", depth, dim, heads, mlp_ratio, g, rng);
        Self {
            word_emb,
            pos,
            stack,
            vocab_size,
            text_len,
            counter: ForwardCounter::default(),
        }
    }

    pub fn embed<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, input: &TextInput) -> Result<Var> {
        if input.seq_len != self.text_len {
            return Err(McrError::Shape(format!(
                "text length {} differs from positional table {}",
                input.seq_len, self.text_len
            )));
        }
        if let Some(&bad) = input.ids.iter().find(|&&i| i as usize >= self.vocab_size) {
            return Err(McrError::OutOfRange {
                index: bad as usize,
                len: self.vocab_size,
            });
        }
        let table = g.param(store, self.word_emb);
        let words = g.gather(table, input.ids.iter().map(|&i| i as usize).collect());
        let pos_table = g.param(store, self.pos);
        let pos = g.gather(
            pos_table,
            (0..input.batch).flat_map(|_| 0..input.seq_len).collect(),
        );
        Ok(g.add(words, pos))
    }

    /// Encoded features, `(batch * seq_len) x d`; [PAD] keys are excluded from attention.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, input: &TextInput) -> Result<Var> {
        let x = self.embed(g, store, input)?;
        let valid = input.key_valid();
        let out = self.stack.forward(g, store, x, input.seq_len, Some(&valid))?;
        let masked = input
            .ids
            .chunks(input.seq_len)
            .filter(|s| s.contains(&input.mask_id))
            .count();
        self.counter.record(false, masked);
        self.counter.record(true, input.batch - masked);
        Ok(out)
    }

    /// Encodes one framed sequence padded to the table length.
    pub fn encode_text<T: Real>(
        &self,
        store: &ParamStore<T>,
        seq: &TokenSeq,
        pad_id: u32,
        mask_id: u32,
    ) -> Result<TokenFeatures<T>> {
        let input = TextInput::new(&[seq], self.text_len, pad_id, mask_id)?;
        let mut g = Graph::new();
        let out = self.forward(&mut g, store, &input)?;
        Ok(TokenFeatures {
            features: g.value(out).clone(),
            modality: Modality::Text,
            positions: (0..self.text_len).collect(),
            has_cls: true,
        })
    }
}
