use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::Sample;
use crate::error::{Error, Result};

use super::{generate_scene, render_target, Condition, Mask, TaskConfig, ToyObject, ToyScene};

const TENSOR_MAGIC: &[u8; 4] = b"DPTN";

/// Mixes a base seed with a stream id and an index (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03)
        ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub seed: u64,
    pub scene: ToyScene,
    pub condition: Condition,
    pub target: usize,
    pub mask: Mask,
}

impl Example {
    pub fn generate(cfg: &TaskConfig, seed: u64) -> Result<Self> {
        let r = generate_scene(cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(Self {
            seed,
            scene: r.scene,
            condition: r.condition,
            target: r.target,
            mask: r.mask,
        })
    }

    /// Rendered clean target.
    pub fn target_image(&self) -> Sample {
        render_target(&self.scene.image, &self.mask).expect("mask matches scene")
    }

    pub fn is_hard(&self) -> bool {
        self.scene.attribute_sharing_distractors(self.target) >= 2
    }
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    seed: u64,
    objects: Vec<ToyObject>,
    condition: Condition,
    target: usize,
}

#[derive(Serialize, Deserialize)]
struct DatasetIndex {
    grid: usize,
    config: TaskConfig,
    examples: Vec<IndexEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: TaskConfig,
    pub examples: Vec<Example>,
}

impl Dataset {
    /// `count` scenes whose seeds derive from `(base_seed, stream, index)`.
    pub fn generate(cfg: &TaskConfig, base_seed: u64, stream: u64, count: usize) -> Result<Self> {
        cfg.validate()?;
        let examples = (0..count as u64)
            .map(|i| Example::generate(cfg, derive_seed(base_seed, stream, i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: cfg.clone(),
            examples,
        })
    }

    pub fn train_split(cfg: &TaskConfig) -> Result<Self> {
        Self::generate(cfg, cfg.seed, 0, cfg.train_size)
    }

    pub fn val_split(cfg: &TaskConfig) -> Result<Self> {
        Self::generate(cfg, cfg.seed, 1, cfg.val_size)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn grid(&self) -> usize {
        self.config.grid
    }

    /// Examples with at least two distractors sharing an attribute with the
    /// referred object.
    pub fn hard_subset(&self) -> Self {
        Self {
            config: self.config.clone(),
            examples: self.examples.iter().filter(|e| e.is_hard()).cloned().collect(),
        }
    }

    pub fn head(&self, n: usize) -> Self {
        Self {
            config: self.config.clone(),
            examples: self.examples.iter().take(n).cloned().collect(),
        }
    }

    /// Writes `index.json` plus `images.bin`, `targets.bin` and `masks.bin`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let g = self.grid();
        let index = DatasetIndex {
            grid: g,
            config: self.config.clone(),
            examples: self
                .examples
                .iter()
                .map(|e| IndexEntry {
                    seed: e.seed,
                    objects: e.scene.objects.clone(),
                    condition: e.condition,
                    target: e.target,
                })
                .collect(),
        };
        let path = dir.join("index.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&index)?).map_err(|e| Error::io(&path, e))?;
        let n = self.len();
        let (images, targets, masks) = self.tensors();
        write_tensor(&dir.join("images.bin"), &[n, 3, g, g], &TensorData::F64(images))?;
        write_tensor(&dir.join("targets.bin"), &[n, 3, g, g], &TensorData::F64(targets))?;
        write_tensor(&dir.join("masks.bin"), &[n, g, g], &TensorData::U8(masks))?;
        Ok(())
    }

    fn tensors(&self) -> (Vec<f64>, Vec<f64>, Vec<u8>) {
        let mut images = Vec::new();
        let mut targets = Vec::new();
        let mut masks = Vec::new();
        for e in &self.examples {
            images.extend_from_slice(e.scene.image.as_slice());
            targets.extend_from_slice(e.target_image().as_slice());
            masks.extend(e.mask.bits().iter().map(|b| *b as u8));
        }
        (images, targets, masks)
    }

    /// Rebuilds scenes from the index and checks them against the blobs.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("index.json");
        let text = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let index: DatasetIndex = serde_json::from_slice(&text)?;
        index.config.validate()?;
        let g = index.grid;
        let mut examples = Vec::with_capacity(index.examples.len());
        for (i, e) in index.examples.into_iter().enumerate() {
            let scene = ToyScene::from_objects(g, e.objects)?;
            if e.target >= scene.objects.len() {
                return Err(Error::format("dataset index", format!("example {i}: bad target")));
            }
            if !e.condition.is_unique_for(&scene, e.target) {
                return Err(Error::format(
                    "dataset index",
                    format!("example {i}: condition `{}` is ambiguous", e.condition),
                ));
            }
            examples.push(Example {
                seed: e.seed,
                mask: scene.masks[e.target].clone(),
                scene,
                condition: e.condition,
                target: e.target,
            });
        }
        let ds = Self {
            config: index.config,
            examples,
        };
        let n = ds.len();
        let (images, targets, masks) = ds.tensors();
        let expect = [
            ("images.bin", vec![n, 3, g, g], TensorData::F64(images)),
            ("targets.bin", vec![n, 3, g, g], TensorData::F64(targets)),
            ("masks.bin", vec![n, g, g], TensorData::U8(masks)),
        ];
        for (name, shape, data) in expect {
            let (s, d) = read_tensor(&dir.join(name))?;
            if s != shape || d != data {
                return Err(Error::format("dataset blob", format!("{name} disagrees with index.json")));
            }
        }
        Ok(ds)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }
}

/// Flat tensor file: magic `DPTN`, dtype byte (1 = f64, 2 = u8), rank byte,
/// two reserved bytes, `u32` LE dims, then LE data.
pub fn write_tensor(path: &Path, shape: &[usize], data: &TensorData) -> Result<()> {
    if shape.iter().product::<usize>() != data.len() {
        return Err(Error::Shape {
            expected: shape.to_vec(),
            actual: vec![data.len()],
        });
    }
    let mut buf = Vec::with_capacity(8 + 4 * shape.len() + data.len() * 8);
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.push(match data {
        TensorData::F64(_) => 1,
        TensorData::U8(_) => 2,
    });
    buf.push(shape.len() as u8);
    buf.extend_from_slice(&[0, 0]);
    for d in shape {
        buf.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    match data {
        TensorData::F64(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        TensorData::U8(v) => buf.extend_from_slice(v),
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<(Vec<usize>, TensorData)> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::format("tensor file", format!("{}: {m}", path.display()));
    if buf.len() < 8 || &buf[..4] != TENSOR_MAGIC {
        return Err(bad("bad magic"));
    }
    let ndim = buf[5] as usize;
    let data_start = 8 + 4 * ndim;
    if buf.len() < data_start {
        return Err(bad("truncated header"));
    }
    let shape: Vec<usize> = buf[8..data_start]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let n: usize = shape.iter().product();
    let body = &buf[data_start..];
    let data = match buf[4] {
        1 if body.len() == n * 8 => TensorData::F64(
            body.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        2 if body.len() == n => TensorData::U8(body.to_vec()),
        1 | 2 => return Err(bad("payload size disagrees with shape")),
        _ => return Err(bad("unknown dtype")),
    };
    Ok((shape, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip() {
        let cfg = TaskConfig::default();
        let ds = Dataset::generate(&cfg, 5, 0, 12).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
        let (shape, _) = read_tensor(&dir.path().join("masks.bin")).unwrap();
        assert_eq!(shape, vec![12, 16, 16]);
    }

    #[test]
    fn corrupted_blob_is_rejected() {
        let ds = Dataset::generate(&TaskConfig::default(), 5, 0, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let p = dir.path().join("masks.bin");
        let mut bytes = std::fs::read(&p).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        std::fs::write(&p, bytes).unwrap();
        assert!(Dataset::load(dir.path()).is_err());
    }

    #[test]
    fn splits_differ_and_repeat() {
        let cfg = TaskConfig {
            train_size: 4,
            val_size: 4,
            ..TaskConfig::default()
        };
        let a = Dataset::train_split(&cfg).unwrap();
        assert_eq!(a, Dataset::train_split(&cfg).unwrap());
        assert_ne!(a.examples[0].seed, Dataset::val_split(&cfg).unwrap().examples[0].seed);
    }
}
