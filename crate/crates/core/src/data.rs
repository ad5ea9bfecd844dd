//! Procedural video-caption corpus: a colored shape moving over a
//! background, captioned by its five attributes.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::{EncoderConfig, EOS_ID, SOS_ID};
use crate::error::{bail, Result};
use crate::numerics::{load_tns, save_tns, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    Left,
    Right,
    Up,
    Down,
    Still,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speed {
    Slow,
    Fast,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    Plain,
    Striped,
}

const SHAPES: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];
const COLORS: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];
const MOTIONS: [Motion; 5] = [Motion::Left, Motion::Right, Motion::Up, Motion::Down, Motion::Still];
const SPEEDS: [Speed; 2] = [Speed::Slow, Speed::Fast];
const BACKGROUNDS: [Background; 2] = [Background::Plain, Background::Striped];

/// Number of distinct scenes.
pub const SCENE_COUNT: usize = 240;
/// Caption vocabulary: start, end, then every attribute value.
pub const VOCAB_SIZE: usize = 18;
pub const CAPTION_LEN: usize = 7;

const COLOR_BASE: usize = 2;
const SHAPE_BASE: usize = COLOR_BASE + 4;
const MOTION_BASE: usize = SHAPE_BASE + 3;
const SPEED_BASE: usize = MOTION_BASE + 5;
const BACKGROUND_BASE: usize = SPEED_BASE + 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scene {
    pub shape: Shape,
    pub color: Color,
    pub motion: Motion,
    pub speed: Speed,
    pub background: Background,
}

fn position<T: PartialEq>(all: &[T], v: &T) -> usize {
    all.iter().position(|x| x == v).expect("value from its own table")
}

impl Scene {
    /// Every scene, in a fixed order.
    pub fn all() -> Vec<Scene> {
        let mut out = Vec::with_capacity(SCENE_COUNT);
        for &shape in &SHAPES {
            for &color in &COLORS {
                for &motion in &MOTIONS {
                    for &speed in &SPEEDS {
                        for &background in &BACKGROUNDS {
                            out.push(Scene { shape, color, motion, speed, background });
                        }
                    }
                }
            }
        }
        out
    }

    /// `[SOS, color, shape, motion, speed, background, EOS]`.
    pub fn caption(&self) -> Vec<usize> {
        vec![
            SOS_ID,
            COLOR_BASE + position(&COLORS, &self.color),
            SHAPE_BASE + position(&SHAPES, &self.shape),
            MOTION_BASE + position(&MOTIONS, &self.motion),
            SPEED_BASE + position(&SPEEDS, &self.speed),
            BACKGROUND_BASE + position(&BACKGROUNDS, &self.background),
            EOS_ID,
        ]
    }

    pub fn from_caption(tokens: &[usize]) -> Result<Scene> {
        if tokens.len() != CAPTION_LEN || tokens[0] != SOS_ID || tokens[6] != EOS_ID {
            bail!(Input, "malformed caption {tokens:?}");
        }
        fn pick<T: Copy>(all: &[T], base: usize, tok: usize) -> Result<T> {
            match tok.checked_sub(base).and_then(|i| all.get(i)) {
                Some(v) => Ok(*v),
                None => bail!(Input, "token {tok} is not in its attribute slot"),
            }
        }
        Ok(Scene {
            color: pick(&COLORS, COLOR_BASE, tokens[1])?,
            shape: pick(&SHAPES, SHAPE_BASE, tokens[2])?,
            motion: pick(&MOTIONS, MOTION_BASE, tokens[3])?,
            speed: pick(&SPEEDS, SPEED_BASE, tokens[4])?,
            background: pick(&BACKGROUNDS, BACKGROUND_BASE, tokens[5])?,
        })
    }
}

fn rgb(c: Color) -> [f64; 3] {
    match c {
        Color::Red => [0.9, 0.1, 0.1],
        Color::Green => [0.1, 0.8, 0.2],
        Color::Blue => [0.15, 0.25, 0.95],
        Color::Yellow => [0.95, 0.9, 0.1],
    }
}

fn background(b: Background, x: usize) -> f64 {
    match b {
        Background::Plain => 0.25,
        Background::Striped if (x / 4) % 2 == 0 => 0.1,
        Background::Striped => 0.45,
    }
}

fn inside(shape: Shape, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        Shape::Square => dx.abs() <= r && dy.abs() <= r,
        Shape::Circle => dx * dx + dy * dy <= r * r,
        Shape::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
    }
}

/// Shape coverage per pixel, `[M, h, w]` in {0, 1}.
pub fn alpha_mask(scene: &Scene, variation: u64, h: usize, w: usize, frames: usize) -> Vec<f64> {
    let r = (h.min(w) as f64 / 6.0).max(1.0);
    let step = match scene.speed {
        Speed::Slow => 1.0,
        Speed::Fast => 3.0,
    };
    let (vx, vy) = match scene.motion {
        Motion::Left => (-step, 0.0),
        Motion::Right => (step, 0.0),
        Motion::Up => (0.0, -step),
        Motion::Down => (0.0, step),
        Motion::Still => (0.0, 0.0),
    };
    let travel = (frames.saturating_sub(1)) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(variation);
    // start point such that the whole path stays inside the frame
    let start = |extent: usize, v: f64, rng: &mut ChaCha8Rng| {
        let lo = r + (-v * travel).max(0.0);
        let hi = extent as f64 - 1.0 - r - (v * travel).max(0.0);
        if hi > lo {
            rng.gen_range(lo..=hi)
        } else {
            (extent as f64 - 1.0) / 2.0 - v * travel / 2.0
        }
    };
    let cx0 = start(w, vx, &mut rng);
    let cy0 = start(h, vy, &mut rng);
    let mut out = vec![0.0; frames * h * w];
    for f in 0..frames {
        let (cx, cy) = (cx0 + vx * f as f64, cy0 + vy * f as f64);
        for y in 0..h {
            for x in 0..w {
                if inside(scene.shape, x as f64 - cx, y as f64 - cy, r) {
                    out[(f * h + y) * w + x] = 1.0;
                }
            }
        }
    }
    out
}

/// Renders a clip `[M, h, w, 3]` with values in `[0, 1]`. `variation` picks
/// the start position.
pub fn render(scene: &Scene, variation: u64, h: usize, w: usize, frames: usize) -> Tensor {
    let alpha = alpha_mask(scene, variation, h, w, frames);
    let color = rgb(scene.color);
    let mut data = Vec::with_capacity(frames * h * w * 3);
    for f in 0..frames {
        for y in 0..h {
            for x in 0..w {
                let a = alpha[(f * h + y) * w + x];
                let bg = background(scene.background, x);
                data.extend(color.iter().map(|c| a * c + (1.0 - a) * bg));
            }
        }
    }
    Tensor::new([frames, h, w, 3], data).expect("rendered clip is finite")
}

/// Video and caption for one scene.
pub fn gen_pair(scene: &Scene, variation: u64, c: &EncoderConfig) -> (Tensor, Vec<usize>) {
    (render(scene, variation, c.image_height, c.image_width, c.n_frames), scene.caption())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: usize,
    pub scene: Scene,
    pub variation: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub count: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub n_frames: usize,
    pub config_hash: String,
    pub with_replacement: bool,
    pub warning: Option<String>,
    pub pairs: Vec<PairRecord>,
}

/// An in-memory corpus.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub videos: Vec<Tensor>,
    pub captions: Vec<Vec<usize>>,
}

/// One training batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    /// `[B, M, h, w, 3]`.
    pub videos: Tensor,
    pub captions: Vec<Vec<usize>>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of a value's JSON form.
pub fn json_hash<T: Serialize>(v: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(v)?))
}

/// Samples `count` scenes (distinct while possible) and renders them.
pub fn gen_dataset(count: usize, seed: u64, c: &EncoderConfig) -> Result<Dataset> {
    if count == 0 {
        bail!(Input, "dataset count must be at least 1");
    }
    c.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all = Scene::all();
    let mut order: Vec<usize> = (0..SCENE_COUNT).collect();
    order.shuffle(&mut rng);
    let mut picks: Vec<usize> = order.into_iter().take(count).collect();
    let with_replacement = count > SCENE_COUNT;
    let mut warning = None;
    if with_replacement {
        while picks.len() < count {
            picks.push(rng.gen_range(0..SCENE_COUNT));
        }
        let msg = format!("{count} pairs requested but only {SCENE_COUNT} distinct scenes exist; sampled with replacement");
        log::warn!("{msg}");
        warning = Some(msg);
    }
    let pairs: Vec<PairRecord> =
        picks.iter().enumerate().map(|(id, &s)| PairRecord { id, scene: all[s], variation: rng.gen() }).collect();
    let manifest = Manifest {
        seed,
        count,
        image_height: c.image_height,
        image_width: c.image_width,
        n_frames: c.n_frames,
        config_hash: json_hash(c)?,
        with_replacement,
        warning,
        pairs,
    };
    Ok(Dataset::from_manifest(manifest))
}

impl Dataset {
    fn from_manifest(manifest: Manifest) -> Self {
        let (h, w, m) = (manifest.image_height, manifest.image_width, manifest.n_frames);
        let videos = manifest.pairs.iter().map(|p| render(&p.scene, p.variation, h, w, m)).collect();
        let captions = manifest.pairs.iter().map(|p| p.scene.caption()).collect();
        Self { manifest, videos, captions }
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    /// Hash of the manifest, which determines every rendered byte.
    pub fn hash(&self) -> Result<String> {
        json_hash(&self.manifest)
    }

    /// Writes `manifest.json`, `pairs/<id>.tns` and `pairs/<id>.cap`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("pairs"))?;
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest)?)?;
        for (p, (v, cap)) in self.manifest.pairs.iter().zip(self.videos.iter().zip(&self.captions)) {
            save_tns(dir.join("pairs").join(format!("{:05}.tns", p.id)), Some(&format!("video{}", p.id)), v)?;
            let text: String = cap.iter().map(|t| format!("{t}\n")).collect();
            fs::write(dir.join("pairs").join(format!("{:05}.cap", p.id)), text)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let mut videos = Vec::with_capacity(manifest.pairs.len());
        let mut captions = Vec::with_capacity(manifest.pairs.len());
        let want = [manifest.n_frames, manifest.image_height, manifest.image_width, 3];
        for p in &manifest.pairs {
            let (_, v) = load_tns(dir.join("pairs").join(format!("{:05}.tns", p.id)))?;
            if v.shape() != want {
                bail!(Input, "pair {} has shape {:?}, manifest says {:?}", p.id, v.shape(), want);
            }
            let text = fs::read_to_string(dir.join("pairs").join(format!("{:05}.cap", p.id)))?;
            let cap = text
                .lines()
                .map(|l| l.trim().parse::<usize>().map_err(|e| crate::Error::Input(format!("caption {}: {e}", p.id))))
                .collect::<Result<Vec<_>>>()?;
            videos.push(v);
            captions.push(cap);
        }
        if manifest.pairs.is_empty() {
            bail!(Input, "dataset at {} has no pairs", dir.display());
        }
        Ok(Self { manifest, videos, captions })
    }

    /// Stacks the given pairs into one batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let Some(&first) = indices.first() else {
            bail!(Input, "empty batch");
        };
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            bail!(Input, "pair index {bad} out of range {}", self.len());
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.videos[first].shape());
        let mut data = Vec::with_capacity(shape.iter().product());
        for &i in indices {
            data.extend_from_slice(self.videos[i].data());
        }
        Ok(Batch {
            indices: indices.to_vec(),
            videos: Tensor::new(shape, data)?,
            captions: indices.iter().map(|&i| self.captions[i].clone()).collect(),
        })
    }

    /// The whole corpus as one batch.
    pub fn all(&self) -> Result<Batch> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }
}

/// Shuffled index batches for one epoch; the ragged tail is dropped.
pub fn batches(n: usize, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size > n {
        bail!(Config, "batch size {batch_size} must be in [1, {n}]");
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    Ok(order.chunks_exact(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn scene_space_and_caption_roundtrip() {
        let all = Scene::all();
        assert_eq!(all.len(), 3 * 4 * 5 * 2 * 2);
        let caps: HashSet<_> = all.iter().map(Scene::caption).collect();
        assert_eq!(caps.len(), SCENE_COUNT);
        for s in &all {
            let cap = s.caption();
            assert_eq!(cap.len(), CAPTION_LEN);
            assert!(cap.iter().all(|&t| t < VOCAB_SIZE));
            assert_eq!(Scene::from_caption(&cap).unwrap(), *s);
        }
        assert!(Scene::from_caption(&[SOS_ID, 6, 2, 9, 14, 16, EOS_ID]).is_err());
    }

    #[test]
    fn still_scene_frames_identical() {
        let s = Scene {
            shape: Shape::Circle,
            color: Color::Blue,
            motion: Motion::Still,
            speed: Speed::Fast,
            background: Background::Striped,
        };
        let v = render(&s, 9, 32, 32, 6);
        let f = 32 * 32 * 3;
        for k in 1..6 {
            assert_eq!(v.data()[..f], v.data()[k * f..(k + 1) * f]);
        }
        assert!(v.data().iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn color_changes_channels_not_alpha() {
        let a = Scene {
            shape: Shape::Triangle,
            color: Color::Red,
            motion: Motion::Right,
            speed: Speed::Slow,
            background: Background::Plain,
        };
        let b = Scene { color: Color::Green, ..a };
        assert_eq!(alpha_mask(&a, 4, 32, 32, 6), alpha_mask(&b, 4, 32, 32, 6));
        let (va, vb) = (render(&a, 4, 32, 32, 6), render(&b, 4, 32, 32, 6));
        let alpha = alpha_mask(&a, 4, 32, 32, 6);
        assert!(alpha.iter().any(|&x| x == 1.0));
        for (p, &al) in alpha.iter().enumerate() {
            let same = va.data()[p * 3..p * 3 + 3] == vb.data()[p * 3..p * 3 + 3];
            assert_eq!(same, al == 0.0);
        }
    }

    #[test]
    fn moving_shape_stays_in_frame() {
        for s in Scene::all() {
            let alpha = alpha_mask(&s, 17, 32, 32, 6);
            for f in alpha.chunks(32 * 32) {
                assert!(f.iter().sum::<f64>() > 10.0, "{s:?} leaves the frame");
            }
        }
    }

    #[test]
    fn exhaustive_dataset_covers_every_scene() {
        let c = EncoderConfig::default();
        let d = gen_dataset(SCENE_COUNT, 3, &c).unwrap();
        let seen: HashSet<_> = d.manifest.pairs.iter().map(|p| p.scene).collect();
        assert_eq!(seen.len(), SCENE_COUNT);
        assert!(!d.manifest.with_replacement);
        let over = gen_dataset(SCENE_COUNT + 5, 3, &c).unwrap();
        assert!(over.manifest.with_replacement && over.manifest.warning.is_some());
        assert_eq!(over.len(), SCENE_COUNT + 5);
        assert!(gen_dataset(0, 3, &c).is_err());
    }

    #[test]
    fn dataset_hash_is_stable() {
        let c = EncoderConfig::default();
        let a = gen_dataset(64, 11, &c).unwrap();
        let b = gen_dataset(64, 11, &c).unwrap();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.videos, b.videos);
        assert_ne!(a.hash().unwrap(), gen_dataset(64, 12, &c).unwrap().hash().unwrap());
    }

    #[test]
    fn batching() {
        let one = batches(8, 8, 1).unwrap();
        assert_eq!(one.len(), 1);
        let mut p = one[0].clone();
        p.sort_unstable();
        assert_eq!(p, (0..8).collect::<Vec<_>>());
        assert_eq!(batches(10, 3, 5).unwrap(), batches(10, 3, 5).unwrap());
        let bs = batches(10, 3, 5).unwrap();
        assert_eq!(bs.len(), 3);
        let covered: HashSet<usize> = bs.iter().flatten().copied().collect();
        assert_eq!(covered.len(), 9);
        assert!(batches(3, 4, 0).is_err());
    }
}
