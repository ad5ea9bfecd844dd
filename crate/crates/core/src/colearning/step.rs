use rand::Rng;

use super::config::{MaskStrategy, TrainConfig};
use crate::data::Batch;
use crate::encoders::{Forward, ModelParams};
use crate::error::{bail, Result};
use crate::masking::{
    apply_pixel_mask, baseline_mask, extract_cls_weights, informed_mask, sample_tube, spatial_interaction_mask,
    temporal_interaction_mask, InteractionMask, MaskKind, Order, VideoMask,
};
use crate::numerics::{Tape, Tensor, Var};
use crate::objectives::{adversarial_loss, contrastive_loss, wti, LossParts};

/// Everything random about one branch of one step, fixed up front so the
/// objective is a smooth function of the parameters.
#[derive(Clone, Debug)]
pub struct BranchPlan {
    pub masks: Vec<VideoMask>,
    /// Pixel-masked frames, `[B*M, h, w, 3]`.
    pub frames: Tensor,
    /// One spatial mask per frame.
    pub spatial: Vec<InteractionMask>,
    /// One temporal mask per clip.
    pub temporal: Vec<InteractionMask>,
}

#[derive(Clone, Debug)]
pub struct StepPlan {
    pub high: Option<BranchPlan>,
    pub low: Option<BranchPlan>,
    /// Clip-averaged CLS weights per item from the unmasked pass.
    pub cls_weights: Vec<Vec<f64>>,
    /// Visual targets to use in place of this pass's own, when given.
    pub targets: Option<VisualTargets>,
}

/// Stop-gradient visual targets of the contrastive completer terms.
#[derive(Clone, Debug)]
pub struct VisualTargets {
    /// Frame outputs `[B, M, e]`.
    pub ev: Tensor,
    /// Token gate logits `[B, M]`.
    pub gv: Tensor,
}

/// Where the masks of a step come from.
pub enum PlanSource<'a, R: Rng> {
    Sample(&'a mut R),
    Fixed(&'a StepPlan),
}

/// Loss components of one forward, with the plan that produced them.
pub struct ObjectiveOutput<'t> {
    pub parts: LossParts<Var<'t>>,
    pub plan: StepPlan,
    /// Targets computed by this pass.
    pub targets: VisualTargets,
}

fn item_attention(attn: &Tensor, b: usize, m: usize) -> Result<Tensor> {
    let s = attn.shape();
    let per = s[1] * s[2] * s[3];
    Tensor::new([m, s[1], s[2], s[3]], attn.data()[b * m * per..(b + 1) * m * per].to_vec())
}

fn build_branch(
    cfg: &TrainConfig,
    batch: &Batch,
    attn: &Tensor,
    kind: MaskKind,
    rng: &mut impl Rng,
) -> Result<BranchPlan> {
    let c = &cfg.encoder;
    let (b, m, n) = (batch.indices.len(), c.n_frames, c.n_patches());
    let r = if kind == MaskKind::High { cfg.r_h } else { cfg.r_l };
    let frame_len = c.image_height * c.image_width * 3;
    let mut masks = Vec::with_capacity(b);
    let mut frames = Vec::with_capacity(batch.videos.numel());
    let mut spatial = Vec::with_capacity(b * m);
    let mut temporal = Vec::with_capacity(b);
    for i in 0..b {
        let mask = match cfg.strategy {
            MaskStrategy::Informed => {
                let (a_s, a_e) = sample_tube(m, rng);
                let w = extract_cls_weights(&item_attention(attn, i, m)?, a_s, a_e)?;
                let order = if kind == MaskKind::High { Order::Descending } else { Order::Ascending };
                VideoMask::Tube(informed_mask(&w, r, order)?)
            }
            MaskStrategy::Random => baseline_mask(n, m, r, MaskKind::Random, rng)?,
            MaskStrategy::RandomTube => baseline_mask(n, m, r, MaskKind::RandomTube, rng)?,
        };
        let clip = Tensor::new(
            [m, c.image_height, c.image_width, 3],
            batch.videos.data()[i * m * frame_len..(i + 1) * m * frame_len].to_vec(),
        )?;
        frames.extend_from_slice(apply_pixel_mask(&clip, &mask, c.patch_size, rng)?.data());
        for f in 0..m {
            spatial.push(spatial_interaction_mask(&mask.token_flags(f, n))?);
        }
        temporal.push(temporal_interaction_mask(&mask.frame_flags(m))?);
        masks.push(mask);
    }
    let frames = Tensor::new([b * m, c.image_height, c.image_width, 3], frames)?;
    Ok(BranchPlan { masks, frames, spatial, temporal })
}

/// Clip-averaged CLS-to-patch weights per item, from `[B*M, H, T, T]`.
pub fn clip_cls_weights(attn: &Tensor, b: usize, m: usize) -> Result<Vec<Vec<f64>>> {
    (0..b).map(|i| Ok(extract_cls_weights(&item_attention(attn, i, m)?, 0, m - 1)?.weights)).collect()
}

fn token_logits<'t>(fw: &Forward<'t, '_>, x: Var<'t>, gate: crate::encoders::LinearIds) -> Result<Var<'t>> {
    let s = x.shape();
    fw.linear(x, gate)?.reshape([s[0], s[1]])
}

/// Runs the unmasked targets and every active branch, returning the six
/// loss components. Inactive components are constant zeros.
///
/// With `grl` false the reversal node in front of the discriminator is left
/// out; only the sign-law check wants that.
pub fn forward_objective<'t, R: Rng>(
    fw: &Forward<'t, '_>,
    batch: &Batch,
    cfg: &TrainConfig,
    source: PlanSource<'_, R>,
    grl: bool,
) -> Result<ObjectiveOutput<'t>> {
    let p = fw.params();
    let c = &cfg.encoder;
    let tape = fw.tape();
    let b = batch.indices.len();
    let (m, e) = (c.n_frames, c.embed_dim);
    let vs = batch.videos.shape();
    if vs.len() != 5 || vs[0] != b || vs[1] != m {
        bail!(Dimension, "batch videos {vs:?} do not match [{b}, {m}, h, w, 3]");
    }
    let frames = batch.videos.reshape([b * m, vs[2], vs[3], vs[4]])?;

    // (1) unmasked targets
    let sp = fw.spatial_encode(&p.spatial, &frames, None)?;
    let ev = fw.temporal_encode(sp.embeddings.reshape([b, m, e])?)?;
    let et = fw.text_encode(&batch.captions)?;
    let gt = token_logits(fw, et, p.gates.text)?;
    let gv = token_logits(fw, ev, p.gates.video)?;
    let inv_tau = fw.var(p.log_tau).neg()?.exp()?;
    let vtc = contrastive_loss(wti(et, gt, ev, gv)?, inv_tau)?;

    let (h_on, l_on) = cfg.active_branches();
    let plan = match source {
        PlanSource::Fixed(plan) => plan.clone(),
        PlanSource::Sample(rng) => {
            let high = if h_on { Some(build_branch(cfg, batch, &sp.attn_last, MaskKind::High, rng)?) } else { None };
            let low = if l_on { Some(build_branch(cfg, batch, &sp.attn_last, MaskKind::Low, rng)?) } else { None };
            StepPlan { high, low, cls_weights: clip_cls_weights(&sp.attn_last, b, m)?, targets: None }
        }
    };
    if plan.high.is_some() != h_on || plan.low.is_some() != l_on {
        bail!(Contract, "step plan does not match the active branches");
    }

    let zero = || tape.constant(Tensor::scalar(0.0).expect("finite"));
    let targets = VisualTargets { ev: (*ev.value()).clone(), gv: (*gv.value()).clone() };
    let (ev_t, gv_t) = match &plan.targets {
        Some(t) => {
            if t.ev.shape() != targets.ev.shape() || t.gv.shape() != targets.gv.shape() {
                bail!(Dimension, "frozen targets {:?} do not match {:?}", t.ev.shape(), targets.ev.shape());
            }
            (tape.constant(t.ev.clone()), tape.constant(t.gv.clone()))
        }
        None => (ev.detach(), gv.detach()),
    };
    let mut parts = LossParts { vtc, vtc_h: zero(), vvc_h: zero(), vtc_l: zero(), vvc_l: zero(), adv: zero() };

    // (2) high-informed completer
    if let Some(h) = &plan.high {
        let co = fw.spatial_encode(p.co_encoder(), &h.frames, Some(&h.spatial))?;
        let rec = fw.reconstruct(co.embeddings.reshape([b, m, e])?, &h.temporal)?;
        let evh = fw.temporal_encode(rec)?;
        let gvh = token_logits(fw, evh, p.gates.video)?;
        parts.vtc_h = contrastive_loss(wti(et, gt, evh, gvh)?, inv_tau)?;
        parts.vvc_h = contrastive_loss(wti(evh, gvh, ev_t, gv_t)?, inv_tau)?;
    }

    // (3) low-informed completer and the discriminator
    if let Some(l) = &plan.low {
        let co = fw.spatial_encode(p.co_encoder(), &l.frames, Some(&l.spatial))?;
        let evl = fw.temporal_encode(co.embeddings.reshape([b, m, e])?)?;
        let gvl = token_logits(fw, evl, p.gates.video)?;
        parts.vtc_l = contrastive_loss(wti(et, gt, evl, gvl)?, inv_tau)?;
        parts.vvc_l = contrastive_loss(wti(evl, gvl, ev_t, gv_t)?, inv_tau)?;
        let (dm_in, du_in) = if grl {
            (evl.grl(cfg.grl_lambda)?, ev.grl(cfg.grl_lambda)?)
        } else {
            (evl, ev)
        };
        parts.adv = adversarial_loss(fw.discriminate(dm_in)?, fw.discriminate(du_in)?)?;
    }
    Ok(ObjectiveOutput { parts, plan, targets })
}

/// Text-to-video scores `[B_t, B_v]` under a frozen snapshot.
pub fn similarity_matrix(params: &ModelParams, batch: &Batch) -> Result<Tensor> {
    let tape = Tape::new();
    let fw = Forward::new(&tape, params, false);
    let c = &params.config;
    let b = batch.indices.len();
    let vs = batch.videos.shape();
    let frames = batch.videos.reshape([b * c.n_frames, vs[2], vs[3], vs[4]])?;
    let sp = fw.spatial_encode(&params.spatial, &frames, None)?;
    let ev = fw.temporal_encode(sp.embeddings.reshape([b, c.n_frames, c.embed_dim])?)?;
    let et = fw.text_encode(&batch.captions)?;
    let gt = token_logits(&fw, et, params.gates.text)?;
    let gv = token_logits(&fw, ev, params.gates.video)?;
    Ok((*wti(et, gt, ev, gv)?.value()).clone())
}

/// Clip-averaged CLS weights of every item under a frozen snapshot.
pub fn probe_cls_weights(params: &ModelParams, batch: &Batch) -> Result<Vec<Vec<f64>>> {
    let tape = Tape::new();
    let fw = Forward::new(&tape, params, false);
    let c = &params.config;
    let b = batch.indices.len();
    let vs = batch.videos.shape();
    let frames = batch.videos.reshape([b * c.n_frames, vs[2], vs[3], vs[4]])?;
    let sp = fw.spatial_encode(&params.spatial, &frames, None)?;
    clip_cls_weights(&sp.attn_last, b, c.n_frames)
}
