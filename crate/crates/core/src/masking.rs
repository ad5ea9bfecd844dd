//! Attention-informed tube masks, random baselines, and the interaction
//! matrices that gate attention between masked and unmasked tokens.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenFlag {
    Masked,
    Unmasked,
}

impl TokenFlag {
    pub fn is_masked(self) -> bool {
        self == TokenFlag::Masked
    }
}

/// CLS-to-patch attention weights averaged over heads and over a frame range.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub weights: Vec<f64>,
    /// Inclusive frame range the weights were averaged over.
    pub frame_range: (usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    High,
    Low,
    Random,
    RandomTube,
}

/// Ranking direction for [`informed_mask`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Order {
    /// Largest weights first (high-informed).
    Descending,
    /// Smallest weights first (low-informed).
    Ascending,
}

/// One spatial patch set masked on every frame of `[a_s, a_e]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TubeMask {
    pub kind: MaskKind,
    pub r: f64,
    pub a_s: usize,
    pub a_e: usize,
    pub patch_indices: Vec<usize>,
}

/// Any mask over a clip: a tube, or an independent patch set per frame.
#[derive(Clone, Debug, PartialEq)]
pub enum VideoMask {
    Tube(TubeMask),
    PerFrame { r: f64, frames: Vec<Vec<usize>> },
}

impl VideoMask {
    /// Patches erased on frame `f`.
    pub fn frame_patches(&self, f: usize) -> &[usize] {
        match self {
            VideoMask::Tube(t) if (t.a_s..=t.a_e).contains(&f) => &t.patch_indices,
            VideoMask::Tube(_) => &[],
            VideoMask::PerFrame { frames, .. } => frames.get(f).map(Vec::as_slice).unwrap_or(&[]),
        }
    }

    /// Flags for the `n + 1` tokens (CLS first) of frame `f`.
    pub fn token_flags(&self, f: usize, n: usize) -> Vec<TokenFlag> {
        let mut flags = vec![TokenFlag::Unmasked; n + 1];
        for &p in self.frame_patches(f) {
            flags[p + 1] = TokenFlag::Masked;
        }
        flags
    }

    /// Per-frame flags: a frame is masked when any of its patches is.
    pub fn frame_flags(&self, n_frames: usize) -> Vec<TokenFlag> {
        (0..n_frames)
            .map(|f| if self.frame_patches(f).is_empty() { TokenFlag::Unmasked } else { TokenFlag::Masked })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskLevel {
    Spatial,
    Temporal,
}

/// Binary token-by-token matrix multiplied into post-softmax attention.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionMask {
    u: Tensor,
    level: MaskLevel,
}

impl InteractionMask {
    /// Validates a raw matrix: square, entries in {0, 1}, and for the spatial
    /// level a unit diagonal.
    pub fn new(level: MaskLevel, u: Tensor) -> Result<Self> {
        if u.ndim() != 2 || u.shape()[0] != u.shape()[1] {
            bail!(Contract, "interaction mask must be square, got {:?}", u.shape());
        }
        if u.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            bail!(Contract, "interaction mask entries must be 0 or 1");
        }
        let t = u.shape()[0];
        if level == MaskLevel::Spatial && (0..t).any(|i| u.data()[i * t + i] != 1.0) {
            bail!(Contract, "spatial interaction mask needs a unit diagonal");
        }
        Ok(Self { u, level })
    }

    pub fn all_ones(level: MaskLevel, t: usize) -> Self {
        Self { u: Tensor::full([t, t], 1.0), level }
    }

    pub fn matrix(&self) -> &Tensor {
        &self.u
    }

    pub fn level(&self) -> MaskLevel {
        self.level
    }

    pub fn len(&self) -> usize {
        self.u.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.u.data()[i * self.len() + j]
    }
}

/// Head-averaged CLS row of the final attention map, without the CLS column,
/// averaged over frames `a_s..=a_e`. `attn` is `[M, H, n+1, n+1]`.
pub fn extract_cls_weights(attn: &Tensor, a_s: usize, a_e: usize) -> Result<AttentionWeights> {
    let s = attn.shape();
    if s.len() != 4 || s[2] != s[3] || s[2] < 2 {
        bail!(Dimension, "attention map must be [M, H, T, T], got {s:?}");
    }
    let (m, h, t) = (s[0], s[1], s[2]);
    if a_s > a_e || a_e >= m {
        bail!(Input, "frame range [{a_s}, {a_e}] invalid for {m} frames");
    }
    let n = t - 1;
    let mut w = vec![0.0; n];
    for f in a_s..=a_e {
        for head in 0..h {
            let row = &attn.data()[((f * h + head) * t) * t..((f * h + head) * t + 1) * t];
            w.iter_mut().zip(&row[1..]).for_each(|(acc, v)| *acc += v);
        }
    }
    let denom = (h * (a_e - a_s + 1)) as f64;
    w.iter_mut().for_each(|v| *v /= denom);
    Ok(AttentionWeights { weights: w, frame_range: (a_s, a_e) })
}

/// Uniform draw over the `M(M+1)/2` frame pairs with `a_s <= a_e`.
pub fn sample_tube(n_frames: usize, rng: &mut impl Rng) -> (usize, usize) {
    assert!(n_frames >= 1, "sample_tube needs at least one frame");
    let total = n_frames * (n_frames + 1) / 2;
    let mut k = rng.gen_range(0..total);
    for a_s in 0..n_frames {
        let span = n_frames - a_s;
        if k < span {
            return (a_s, a_s + k);
        }
        k -= span;
    }
    unreachable!()
}

/// `floor(r * n)`, tolerant of representation error in `r`.
pub fn mask_count(r: f64, n: usize) -> usize {
    (((r * n as f64) + 1e-9).floor() as usize).min(n)
}

fn check_ratio(r: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&r) {
        bail!(Config, "mask ratio {r} outside [0, 1]");
    }
    Ok(())
}

/// Top-k (descending) or bottom-k (ascending) patches by weight, with
/// `k = floor(r n)`. Ties go to the lower index.
pub fn informed_mask(w: &AttentionWeights, r: f64, order: Order) -> Result<TubeMask> {
    check_ratio(r)?;
    let n = w.weights.len();
    let k = mask_count(r, n);
    let mut idx: Vec<usize> = (0..n).collect();
    match order {
        Order::Descending => idx.sort_by(|&a, &b| w.weights[b].total_cmp(&w.weights[a])),
        Order::Ascending => idx.sort_by(|&a, &b| w.weights[a].total_cmp(&w.weights[b])),
    }
    let mut chosen = idx[..k].to_vec();
    chosen.sort_unstable();
    let kind = match order {
        Order::Descending => MaskKind::High,
        Order::Ascending => MaskKind::Low,
    };
    Ok(TubeMask { kind, r, a_s: w.frame_range.0, a_e: w.frame_range.1, patch_indices: chosen })
}

fn random_subset(n: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut v = sample(rng, n, k).into_vec();
    v.sort_unstable();
    v
}

/// Random baselines: an independent subset per frame (`Random`) or one subset
/// over a sampled tube (`RandomTube`).
pub fn baseline_mask(n: usize, n_frames: usize, r: f64, kind: MaskKind, rng: &mut impl Rng) -> Result<VideoMask> {
    check_ratio(r)?;
    let k = mask_count(r, n);
    match kind {
        MaskKind::Random => {
            Ok(VideoMask::PerFrame { r, frames: (0..n_frames).map(|_| random_subset(n, k, rng)).collect() })
        }
        MaskKind::RandomTube => {
            let (a_s, a_e) = sample_tube(n_frames, rng);
            Ok(VideoMask::Tube(TubeMask { kind, r, a_s, a_e, patch_indices: random_subset(n, k, rng) }))
        }
        other => bail!(Config, "{other:?} is not a baseline mask kind"),
    }
}

/// Replaces the pixels of every masked patch with uniform noise in `[0, 1)`.
/// `video` is `[M, h, w, 3]`; the input is left untouched.
pub fn apply_pixel_mask(video: &Tensor, mask: &VideoMask, patch_size: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let s = video.shape();
    if s.len() != 4 || s[3] != 3 || s[1] % patch_size != 0 || s[2] % patch_size != 0 {
        bail!(Dimension, "video must be [M, h, w, 3] with patch-aligned sides, got {s:?}");
    }
    let (m, h, w) = (s[0], s[1], s[2]);
    let per_row = w / patch_size;
    let n = per_row * (h / patch_size);
    let mut out = video.clone();
    let data = out.data_mut();
    for f in 0..m {
        for &p in mask.frame_patches(f) {
            if p >= n {
                bail!(Input, "patch index {p} out of range {n}");
            }
            let (py, px) = (p / per_row * patch_size, p % per_row * patch_size);
            for y in py..py + patch_size {
                for x in px..px + patch_size {
                    let base = ((f * h + y) * w + x) * 3;
                    for c in 0..3 {
                        data[base + c] = rng.gen::<f64>();
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Spatial gate: `u(i, j) = 0` iff token `j` is masked and `i != j`.
pub fn spatial_interaction_mask(flags: &[TokenFlag]) -> Result<InteractionMask> {
    if flags.first() != Some(&TokenFlag::Unmasked) {
        bail!(Contract, "the CLS token (index 0) must be unmasked");
    }
    let t = flags.len();
    let u = Tensor::from_fn([t, t], |k| {
        let (i, j) = (k / t, k % t);
        if flags[j].is_masked() && i != j {
            0.0
        } else {
            1.0
        }
    })?;
    Ok(InteractionMask { u, level: MaskLevel::Spatial })
}

/// Temporal gate: `u(i, j) = 0` iff frame `i` is unmasked and frame `j` masked.
pub fn temporal_interaction_mask(flags: &[TokenFlag]) -> Result<InteractionMask> {
    let t = flags.len();
    if t == 0 {
        bail!(Input, "no frames");
    }
    let u = Tensor::from_fn([t, t], |k| {
        let (i, j) = (k / t, k % t);
        if !flags[i].is_masked() && flags[j].is_masked() {
            0.0
        } else {
            1.0
        }
    })?;
    Ok(InteractionMask { u, level: MaskLevel::Temporal })
}
