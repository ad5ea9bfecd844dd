use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::EncoderConfig;
use crate::error::{bail, Result};
use crate::numerics::Tensor;

/// Learning-rate group of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Frame (spatial) and text encoders.
    Backbone,
    /// Temporal encoder, reconstructor, discriminator, similarity gates, temperature.
    New,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

/// Flat, ordered storage for every trainable tensor. Encoders refer to
/// entries by [`ParamId`]; two encoders that hold the same id share storage.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    fn add(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor) -> ParamId {
        self.entries.push(ParamEntry { name: name.into(), group, tensor });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, id: ParamId, tensor: Tensor) -> Result<()> {
        let slot = &mut self.entries[id.0];
        if slot.tensor.shape() != tensor.shape() {
            bail!(
                Dimension,
                "parameter {} has shape {:?}, got {:?}",
                slot.name,
                slot.tensor.shape(),
                tensor.shape()
            );
        }
        slot.tensor = tensor;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

/// One pre-norm transformer block: attention then MLP, each residual.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockIds {
    pub heads: usize,
    pub ln1: NormIds,
    pub qkv: LinearIds,
    pub out: LinearIds,
    pub ln2: NormIds,
    pub fc1: LinearIds,
    pub fc2: LinearIds,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpatialIds {
    pub patch: LinearIds,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<BlockIds>,
    pub ln_post: NormIds,
    pub proj: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextIds {
    pub token: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<BlockIds>,
    pub ln_final: NormIds,
    pub proj: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemporalIds {
    pub pos: ParamId,
    pub blocks: Vec<BlockIds>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiscriminatorIds {
    pub fc1: LinearIds,
    pub fc2: LinearIds,
}

/// Per-modality token gates for weighted token interaction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GateIds {
    pub text: LinearIds,
    pub video: LinearIds,
}

/// Initial temperature and its allowed range.
pub const TAU_INIT: f64 = 0.05;
pub const TAU_MIN: f64 = 0.001;
pub const TAU_MAX: f64 = 0.5;

/// Every trainable tensor plus the wiring of each encoder into the store.
///
/// The co-encoder is the spatial encoder ([`ModelParams::co_encoder`] returns
/// the same ids), and both completers run the one temporal encoder.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: EncoderConfig,
    pub store: ParamStore,
    pub spatial: SpatialIds,
    pub text: TextIds,
    pub temporal: TemporalIds,
    pub reconstructor: BlockIds,
    pub discriminator: DiscriminatorIds,
    pub gates: GateIds,
    pub log_tau: ParamId,
}

/// Sharing groups recorded in checkpoints: each group names the encoder
/// roles that resolve to one set of tensors.
pub fn sharing_groups() -> Vec<(&'static str, Vec<&'static str>)> {
    vec![
        ("spatial", vec!["spatial_encoder", "co_encoder"]),
        ("temporal", vec!["h_completer.video_encoder", "l_completer.video_encoder"]),
    ]
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn normal(&mut self, name: String, group: ParamGroup, shape: Vec<usize>, std: f64) -> ParamId {
        let t = Tensor::randn(shape, std, &mut self.rng);
        self.store.add(name, group, t)
    }

    fn constant(&mut self, name: String, group: ParamGroup, shape: Vec<usize>, v: f64) -> ParamId {
        self.store.add(name, group, Tensor::full(shape, v))
    }

    fn linear(&mut self, name: &str, group: ParamGroup, fan_in: usize, fan_out: usize, std: f64) -> LinearIds {
        LinearIds {
            weight: self.normal(format!("{name}.weight"), group, vec![fan_in, fan_out], std),
            bias: self.constant(format!("{name}.bias"), group, vec![fan_out], 0.0),
        }
    }

    fn norm(&mut self, name: &str, group: ParamGroup, d: usize) -> NormIds {
        NormIds {
            gain: self.constant(format!("{name}.gain"), group, vec![d], 1.0),
            bias: self.constant(format!("{name}.bias"), group, vec![d], 0.0),
        }
    }

    fn block(&mut self, name: &str, group: ParamGroup, d: usize, heads: usize, mlp_ratio: usize, depth: usize) -> BlockIds {
        let std = (1.0 / d as f64).sqrt();
        let resid = std / ((2 * depth) as f64).sqrt();
        let hidden = d * mlp_ratio;
        BlockIds {
            heads,
            ln1: self.norm(&format!("{name}.ln1"), group, d),
            qkv: self.linear(&format!("{name}.qkv"), group, d, 3 * d, std),
            out: self.linear(&format!("{name}.out"), group, d, d, resid),
            ln2: self.norm(&format!("{name}.ln2"), group, d),
            fc1: self.linear(&format!("{name}.fc1"), group, d, hidden, std),
            fc2: self.linear(&format!("{name}.fc2"), group, hidden, d, resid * (d as f64 / hidden as f64).sqrt()),
        }
    }
}

impl ModelParams {
    /// Random initialization from a seed.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut store = ParamStore::default();
        let mut init = Init { store: &mut store, rng: ChaCha8Rng::seed_from_u64(seed) };
        use ParamGroup::{Backbone, New};

        let (d, e) = (c.d_model, c.embed_dim);
        let spatial = SpatialIds {
            patch: init.linear("spatial.patch", Backbone, c.patch_dim(), d, (1.0 / c.patch_dim() as f64).sqrt()),
            cls: init.normal("spatial.cls".into(), Backbone, vec![d], 0.02),
            pos: init.normal("spatial.pos".into(), Backbone, vec![c.seq_len(), d], 0.02),
            blocks: (0..c.n_layers)
                .map(|l| init.block(&format!("spatial.block{l}"), Backbone, d, c.n_heads, c.mlp_ratio, c.n_layers))
                .collect(),
            ln_post: init.norm("spatial.ln_post", Backbone, d),
            proj: init.normal("spatial.proj".into(), Backbone, vec![d, e], (1.0 / d as f64).sqrt()),
        };
        let text = TextIds {
            token: init.normal("text.token".into(), Backbone, vec![c.vocab_size, d], 0.02),
            pos: init.normal("text.pos".into(), Backbone, vec![c.text_len, d], 0.01),
            blocks: (0..c.text_layers)
                .map(|l| init.block(&format!("text.block{l}"), Backbone, d, c.n_heads, c.mlp_ratio, c.text_layers))
                .collect(),
            ln_final: init.norm("text.ln_final", Backbone, d),
            proj: init.normal("text.proj".into(), Backbone, vec![d, e], (1.0 / d as f64).sqrt()),
        };
        let temporal = TemporalIds {
            pos: init.normal("temporal.pos".into(), New, vec![c.n_frames, e], 0.01),
            blocks: (0..c.temporal_layers)
                .map(|l| {
                    init.block(&format!("temporal.block{l}"), New, e, c.temporal_heads, c.mlp_ratio, c.temporal_layers)
                })
                .collect(),
        };
        let reconstructor = init.block("reconstructor", New, e, c.temporal_heads, c.mlp_ratio, 1);
        let discriminator = DiscriminatorIds {
            fc1: init.linear("discriminator.fc1", New, e, c.disc_hidden, (1.0 / e as f64).sqrt()),
            fc2: init.linear("discriminator.fc2", New, c.disc_hidden, 2, 0.02),
        };
        let gates = GateIds {
            text: init.linear("gate.text", New, e, 1, 0.02),
            video: init.linear("gate.video", New, e, 1, 0.02),
        };
        let log_tau = init.constant("log_tau".into(), New, vec![], TAU_INIT.ln());

        Ok(Self { config: config.clone(), store, spatial, text, temporal, reconstructor, discriminator, gates, log_tau })
    }

    /// The encoder applied to masked video. Same tensors as [`Self::spatial`].
    pub fn co_encoder(&self) -> &SpatialIds {
        &self.spatial
    }

    /// Temporal encoder used by the high-informed completer.
    pub fn h_video_encoder(&self) -> &TemporalIds {
        &self.temporal
    }

    /// Temporal encoder used by the low-informed completer.
    pub fn l_video_encoder(&self) -> &TemporalIds {
        &self.temporal
    }

    pub fn tau(&self) -> f64 {
        self.store.get(self.log_tau).data()[0].exp()
    }

    /// Clamps the learned temperature into `[TAU_MIN, TAU_MAX]`.
    pub fn clamp_tau(&mut self) {
        let v = &mut self.store.get_mut(self.log_tau).data_mut()[0];
        *v = v.clamp(TAU_MIN.ln(), TAU_MAX.ln());
    }

    /// Ids of every tensor in one encoder role, used to check aliasing.
    pub fn role_ids(&self, role: &str) -> Option<Vec<ParamId>> {
        fn block(b: &BlockIds) -> Vec<ParamId> {
            let l = |x: &LinearIds| [x.weight, x.bias];
            let n = |x: &NormIds| [x.gain, x.bias];
            [n(&b.ln1), l(&b.qkv), l(&b.out), n(&b.ln2), l(&b.fc1), l(&b.fc2)].concat()
        }
        let spatial = |s: &SpatialIds| {
            let mut v = vec![s.patch.weight, s.patch.bias, s.cls, s.pos, s.ln_post.gain, s.ln_post.bias, s.proj];
            s.blocks.iter().for_each(|b| v.extend(block(b)));
            v
        };
        let temporal = |t: &TemporalIds| {
            let mut v = vec![t.pos];
            t.blocks.iter().for_each(|b| v.extend(block(b)));
            v
        };
        match role {
            "spatial_encoder" => Some(spatial(&self.spatial)),
            "co_encoder" => Some(spatial(self.co_encoder())),
            "h_completer.video_encoder" => Some(temporal(self.h_video_encoder())),
            "l_completer.video_encoder" => Some(temporal(self.l_video_encoder())),
            "reconstructor" => Some(block(&self.reconstructor)),
            "discriminator" => {
                let d = &self.discriminator;
                Some(vec![d.fc1.weight, d.fc1.bias, d.fc2.weight, d.fc2.bias])
            }
            _ => None,
        }
    }
}
