use std::cell::RefCell;
use std::rc::Rc;

use super::params::{BlockIds, LinearIds, ModelParams, NormIds, ParamId, SpatialIds};
use crate::error::{bail, Result};
use crate::masking::InteractionMask;
use crate::numerics::{concat, Gradients, Tape, Tensor, Var};

pub const SOS_ID: usize = 0;
pub const EOS_ID: usize = 1;

/// Additive score for blocked pairs. `exp` of it underflows to exactly zero.
const BLOCKED: f64 = -1e30;
/// Additive score for future tokens in the causal text encoder.
const CAUSAL: f64 = -1e9;

/// How an interaction mask enters attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    /// Multiply the gate into the softmax output and leave rows as they are.
    Literal,
    /// Multiply, then rescale each row to sum to one. Computed as a softmax
    /// restricted to the open entries, so blocked tokens do not even reach
    /// the normalizer.
    Renormalized,
}

/// Output of the frame encoder.
pub struct SpatialOutput<'t> {
    /// Projected CLS token per frame, `[G, e]`.
    pub embeddings: Var<'t>,
    /// Final-layer attention, `[G, H, T, T]`.
    pub attn_last: Rc<Tensor>,
    /// Token states after the last block, `[G, T, d]`.
    pub tokens: Var<'t>,
}

/// One forward pass over a parameter snapshot.
///
/// Parameters become tape leaves on first use; every use of a [`ParamId`]
/// within the session resolves to the same leaf, so shared groups collect
/// summed gradients.
pub struct Forward<'t, 'p> {
    tape: &'t Tape,
    params: &'p ModelParams,
    leaves: RefCell<Vec<Option<Var<'t>>>>,
    trainable: bool,
}

impl<'t, 'p> Forward<'t, 'p> {
    /// With `trainable` false every parameter is a constant and no backward
    /// closures are recorded.
    pub fn new(tape: &'t Tape, params: &'p ModelParams, trainable: bool) -> Self {
        let n = params.store.len();
        Self { tape, params, leaves: RefCell::new(vec![None; n]), trainable }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn params(&self) -> &'p ModelParams {
        self.params
    }

    pub fn var(&self, id: ParamId) -> Var<'t> {
        if let Some(v) = self.leaves.borrow()[id.0] {
            return v;
        }
        let t = self.params.store.get(id).clone();
        let v = if self.trainable { self.tape.leaf(t) } else { self.tape.constant(t) };
        self.leaves.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Gradient per parameter, indexed by [`ParamId`]. Parameters the pass
    /// never touched get zeros.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        let leaves = self.leaves.borrow();
        self.params
            .store
            .entries()
            .iter()
            .zip(leaves.iter())
            .map(|(e, leaf)| match leaf {
                Some(v) => grads.wrt(*v),
                None => Tensor::zeros(e.tensor.shape().to_vec()),
            })
            .collect()
    }

    fn gate_mode(&self) -> GateMode {
        if self.params.config.renormalize_gated_attention {
            GateMode::Renormalized
        } else {
            GateMode::Literal
        }
    }

    /// Affine map over the trailing dimension of any-rank input.
    pub fn linear(&self, x: Var<'t>, ids: LinearIds) -> Result<Var<'t>> {
        let shape = x.shape();
        let d_in = *shape.last().unwrap_or(&0);
        let rows = x.value().numel() / d_in.max(1);
        let w = self.var(ids.weight);
        let d_out = w.value().shape()[1];
        let y = x.reshape([rows, d_in])?.matmul(w)?.add_bias(self.var(ids.bias))?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = d_out;
        y.reshape(out_shape)
    }

    fn norm(&self, x: Var<'t>, ids: NormIds) -> Result<Var<'t>> {
        x.layer_norm(self.var(ids.gain), self.var(ids.bias), self.params.config.ln_eps)
    }

    /// Pre-norm transformer block over `x: [G, T, d]`.
    ///
    /// `bias` is an additive score mask `[G, T, T]`; `gate` an interaction
    /// mask stack `[G, T, T]`. Returns the new states and the attention
    /// weights actually applied to the values, `[G, H, T, T]`.
    pub fn block(
        &self,
        ids: &BlockIds,
        x: Var<'t>,
        bias: Option<&Tensor>,
        gate: Option<&Tensor>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let shape = x.shape();
        if shape.len() != 3 {
            bail!(Dimension, "block input must be [G, T, d], got {shape:?}");
        }
        let (g, t, d) = (shape[0], shape[1], shape[2]);
        let heads = ids.heads;
        let dh = d / heads;

        let h = self.norm(x, ids.ln1)?;
        let qkv = self.linear(h, ids.qkv)?.reshape([g, t, 3, heads, dh])?.permute(&[2, 0, 3, 1, 4])?;
        let part = |k: usize| qkv.select(0, k)?.reshape([g * heads, t, dh]);
        let (q, k, v) = (part(0)?, part(1)?, part(2)?);
        let (ctx, attn) = attend(q, k, v, heads, bias, gate, self.gate_mode())?;
        let ctx = ctx.reshape([g, heads, t, dh])?.permute(&[0, 2, 1, 3])?.reshape([g, t, d])?;
        let x = x.add(self.linear(ctx, ids.out)?)?;

        let h = self.norm(x, ids.ln2)?;
        let h = self.linear(self.linear(h, ids.fc1)?.gelu()?, ids.fc2)?;
        Ok((x.add(h)?, attn.reshape([g, heads, t, t])?))
    }

    /// Encodes `[G, h, w, 3]` frames independently. `masks`, when given, holds
    /// one spatial interaction mask per frame, applied in every layer.
    pub fn spatial_encode(
        &self,
        ids: &SpatialIds,
        frames: &Tensor,
        masks: Option<&[InteractionMask]>,
    ) -> Result<SpatialOutput<'t>> {
        let c = &self.params.config;
        let s = frames.shape();
        if s.len() != 4 || s[1] != c.image_height || s[2] != c.image_width || s[3] != 3 {
            bail!(
                Config,
                "frames {s:?} do not match [G, {}, {}, 3]",
                c.image_height,
                c.image_width
            );
        }
        let g = s[0];
        let t = c.seq_len();
        let gate = masks.map(|m| stack_masks(m, g, t)).transpose()?;

        let x = patch_embed(self, ids, frames)?;
        let mut x = x;
        let mut attn = None;
        for b in &ids.blocks {
            let (y, a) = self.block(b, x, None, gate.as_ref())?;
            x = y;
            attn = Some(a);
        }
        let cls = self.norm(x.select(1, 0)?, ids.ln_post)?;
        let embeddings = cls.matmul(self.var(ids.proj))?;
        let attn_last = attn.map(|a| a.value()).unwrap_or_else(|| Rc::new(Tensor::zeros([g, c.n_heads, t, t])));
        Ok(SpatialOutput { embeddings, attn_last, tokens: x })
    }

    /// Causal text encoder over a batch of equal-length captions. Returns
    /// projected token states `[B, N, e]`.
    pub fn text_encode(&self, captions: &[Vec<usize>]) -> Result<Var<'t>> {
        let c = &self.params.config;
        let Some(first) = captions.first() else {
            bail!(Input, "empty caption batch");
        };
        let n = first.len();
        for cap in captions {
            validate_caption(cap, c.vocab_size, c.text_len)?;
            if cap.len() != n {
                bail!(Input, "captions in a batch must share one length ({} vs {n})", cap.len());
            }
        }
        let b = captions.len();
        let ids = &self.params.text;
        let flat: Vec<usize> = captions.iter().flatten().copied().collect();
        let tok = self.var(ids.token).gather_rows(&flat)?.reshape([b, n, c.d_model])?;
        let pos = self.var(ids.pos).gather_rows(&(0..n).collect::<Vec<_>>())?.repeat_axis(0, b)?;
        let mut x = tok.add(pos)?;
        let causal = Tensor::from_fn([b, n, n], |k| if k % n > (k / n) % n { CAUSAL } else { 0.0 })?;
        for blk in &ids.blocks {
            x = self.block(blk, x, Some(&causal), None)?.0;
        }
        self.norm(x, ids.ln_final)?.reshape([b * n, c.d_model])?.matmul(self.var(ids.proj))?.reshape([b, n, c.embed_dim])
    }

    /// Bidirectional temporal encoder over `[B, M, e]` frame tokens.
    pub fn temporal_encode(&self, frame_tokens: Var<'t>) -> Result<Var<'t>> {
        let c = &self.params.config;
        let s = frame_tokens.shape();
        if s.len() != 3 || s[1] != c.n_frames || s[2] != c.embed_dim {
            bail!(Dimension, "temporal input {s:?} does not match [B, {}, {}]", c.n_frames, c.embed_dim);
        }
        let ids = &self.params.temporal;
        let mut x = frame_tokens.add(self.var(ids.pos).repeat_axis(0, s[0])?)?;
        for blk in &ids.blocks {
            x = self.block(blk, x, None, None)?.0;
        }
        Ok(x)
    }

    /// Single gated attention block over `[B, M, e]`, one temporal
    /// interaction mask per clip.
    pub fn reconstruct(&self, frame_tokens: Var<'t>, masks: &[InteractionMask]) -> Result<Var<'t>> {
        let s = frame_tokens.shape();
        if s.len() != 3 {
            bail!(Contract, "reconstructor input must be [B, M, e], got {s:?}");
        }
        let gate = stack_masks(masks, s[0], s[1])?;
        Ok(self.block(&self.params.reconstructor, frame_tokens, None, Some(&gate))?.0)
    }

    /// Class probabilities `[B, 2]` (index 0 masked, 1 unmasked) from
    /// mean-pooled video tokens.
    pub fn discriminate(&self, video_tokens: Var<'t>) -> Result<Var<'t>> {
        let ids = &self.params.discriminator;
        let pooled = video_tokens.mean_axis(1)?;
        let h = self.linear(pooled, ids.fc1)?.gelu()?;
        self.linear(h, ids.fc2)?.softmax_lastdim()
    }
}

/// Patch tokens with CLS prepended and positions added, `[G, n+1, d]`.
pub fn patch_embed<'t>(fw: &Forward<'t, '_>, ids: &SpatialIds, frames: &Tensor) -> Result<Var<'t>> {
    let c = &fw.params.config;
    let g = frames.shape()[0];
    let patches = patchify(frames, c.patch_size)?;
    let n = patches.shape()[1];
    let tokens = fw.linear(fw.tape.constant(patches), ids.patch)?;
    let cls = fw.var(ids.cls).repeat_axis(0, g)?.reshape([g, 1, c.d_model])?;
    let x = concat(&[cls, tokens], 1)?;
    if n + 1 != c.seq_len() {
        bail!(Config, "frame yields {} patches, config expects {}", n, c.n_patches());
    }
    x.add(fw.var(ids.pos).repeat_axis(0, g)?)
}

/// Flattens `[G, h, w, 3]` frames into `[G, n, p*p*3]` patch vectors,
/// patches in row-major grid order and pixels `(y, x, channel)` within each.
pub fn patchify(frames: &Tensor, p: usize) -> Result<Tensor> {
    let s = frames.shape();
    if s.len() != 4 || s[3] != 3 || p == 0 || s[1] % p != 0 || s[2] % p != 0 {
        bail!(Config, "cannot cut {s:?} into {p}px patches");
    }
    let (g, h, w) = (s[0], s[1], s[2]);
    let (rows, cols) = (h / p, w / p);
    let pd = p * p * 3;
    let mut out = Vec::with_capacity(frames.numel());
    for f in 0..g {
        for py in 0..rows {
            for px in 0..cols {
                for y in py * p..(py + 1) * p {
                    let base = ((f * h + y) * w + px * p) * 3;
                    out.extend_from_slice(&frames.data()[base..base + p * 3]);
                }
            }
        }
    }
    Tensor::new([g, rows * cols, pd], out)
}

/// Scaled dot-product attention over `[G*H, T, dh]` inputs.
///
/// `bias` and `gate` are `[G, T, T]` and shared by the `heads` consecutive
/// groups of each item. Returns the context and the weights applied to `v`.
pub fn attend<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    heads: usize,
    bias: Option<&Tensor>,
    gate: Option<&Tensor>,
    mode: GateMode,
) -> Result<(Var<'t>, Var<'t>)> {
    let s = q.shape();
    let (gh, t, dh) = (s[0], s[1], s[2]);
    let mut scores = q.bmm(k, true)?.scale(1.0 / (dh as f64).sqrt())?;
    let mut additive = bias.map(|b| per_head(b, heads, gh, t)).transpose()?;
    let gate = gate.map(|u| per_head(u, heads, gh, t)).transpose()?;
    if let (Some(u), GateMode::Renormalized) = (&gate, mode) {
        let blocked = u.data().iter().map(|&x| if x == 0.0 { BLOCKED } else { 0.0 });
        let data = match &additive {
            Some(a) => a.data().iter().zip(blocked).map(|(a, b)| a + b).collect(),
            None => blocked.collect(),
        };
        additive = Some(Tensor::new([gh, t, t], data)?);
    }
    if let Some(a) = &additive {
        scores = scores.add_const(a)?;
    }
    let mut attn = scores.softmax_lastdim()?;
    if let (Some(u), GateMode::Literal) = (&gate, mode) {
        attn = attn.mul_const(u)?;
    }
    Ok((attn.bmm(v, false)?, attn))
}

fn per_head(m: &Tensor, heads: usize, gh: usize, t: usize) -> Result<Tensor> {
    if m.shape() != [gh / heads, t, t] {
        bail!(Contract, "mask stack {:?} does not match [{}, {t}, {t}]", m.shape(), gh / heads);
    }
    let mut out = Vec::with_capacity(gh * t * t);
    for chunk in m.data().chunks_exact(t * t) {
        for _ in 0..heads {
            out.extend_from_slice(chunk);
        }
    }
    Ok(Tensor::raw(vec![gh, t, t], out))
}

/// Stacks per-item interaction masks into `[G, T, T]`.
pub fn stack_masks(masks: &[InteractionMask], g: usize, t: usize) -> Result<Tensor> {
    if masks.len() != g {
        bail!(Contract, "{} interaction masks for {g} sequences", masks.len());
    }
    let mut data = Vec::with_capacity(g * t * t);
    for m in masks {
        if m.len() != t {
            bail!(Contract, "interaction mask is {0}x{0}, sequence length is {t}", m.len());
        }
        data.extend_from_slice(m.matrix().data());
    }
    Tensor::new([g, t, t], data)
}

/// Checks ids, the start token and the presence of an end token.
pub fn validate_caption(tokens: &[usize], vocab: usize, max_len: usize) -> Result<()> {
    if tokens.len() < 2 || tokens.len() > max_len {
        bail!(Input, "caption length {} outside [2, {max_len}]", tokens.len());
    }
    if let Some(bad) = tokens.iter().find(|&&t| t >= vocab) {
        bail!(Input, "token id {bad} outside vocabulary of {vocab}");
    }
    if tokens[0] != SOS_ID {
        bail!(Input, "caption must start with the start token");
    }
    if !tokens.contains(&EOS_ID) {
        bail!(Input, "caption has no end token");
    }
    Ok(())
}
