//! On-disk synthetic corpus: a JSON manifest plus one raw tensor file per
//! image.
//!
//! Tensor files start with a 16-byte header (`"EVT1"`, then `C`, `H`, `W` as
//! little-endian `u32`) followed by `C·H·W` little-endian `f32` values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{render_scene, ObjectAnnotation, OodObject, SceneAnnotation, SceneConfig, GENERATOR_VERSION};
use crate::targets::{build_targets, TrainingSample};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: [u8; 4] = *b"EVT1";
pub const MANIFEST_FILE: &str = "manifest.json";
const HEADER_LEN: usize = 16;

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    let shape = t.shape();
    if shape.len() != 3 {
        return Err(Error::validation(format!("image tensors are [C, H, W], got {shape:?}")));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t.len());
    out.extend_from_slice(&TENSOR_MAGIC);
    for &extent in shape {
        let e = u32::try_from(extent).map_err(|_| Error::validation(format!("extent {extent} exceeds u32")))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::validation(format!("tensor file is {} bytes, shorter than its header", bytes.len())));
    }
    if bytes[..4] != TENSOR_MAGIC {
        return Err(Error::validation(format!("bad tensor magic {:?} at offset 0", &bytes[..4])));
    }
    let extent = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let shape = vec![extent(0), extent(1), extent(2)];
    let count: usize = shape.iter().product();
    if count == 0 || bytes.len() != HEADER_LEN + 4 * count {
        return Err(Error::validation(format!(
            "tensor header {shape:?} needs {} payload bytes, file has {}",
            4 * count,
            bytes.len() - HEADER_LEN
        )));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::new(shape, data)
}

pub fn write_tensor_file(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t)?).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes).map_err(|e| match e {
        Error::Validation(msg) => Error::validation(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub tensor_file: String,
    pub width: usize,
    pub height: usize,
    pub annotations: Vec<ObjectAnnotation>,
    pub ood_objects: Vec<OodObject>,
    /// Whether the scene was rendered with an out-of-distribution ring.
    pub ood: bool,
    /// Seed of this image's generator stream.
    pub seed: u64,
    pub dataset_seed: u64,
    pub generator: String,
}

impl ManifestEntry {
    pub fn annotation(&self) -> SceneAnnotation {
        SceneAnnotation {
            id: self.id.clone(),
            width: self.width,
            height: self.height,
            objects: self.annotations.clone(),
            ood_objects: self.ood_objects.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub ood_frac: f64,
    pub seed: u64,
    pub scene: SceneConfig,
}

/// SplitMix64 finaliser.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of image `index` in `split`; independent of generation order.
pub fn image_seed(dataset_seed: u64, split: Split, index: usize) -> u64 {
    let lane = match split {
        Split::Train => 1u64,
        Split::Val => 2u64,
    };
    splitmix64(splitmix64(dataset_seed ^ (lane << 56)) ^ index as u64)
}

/// Whether validation image `index` of `n` carries a ring. Exactly
/// `round(frac · n)` images are flagged, spread evenly.
pub fn is_ood_slot(index: usize, n: usize, frac: f64) -> bool {
    let count = (frac * n as f64).round() as usize;
    (index + 1) * count / n > index * count / n
}

/// Renders every image of the corpus and its manifest entry.
pub fn synthesize(spec: &SynthSpec) -> Result<Vec<(ManifestEntry, Tensor)>> {
    if !(0.0..=1.0).contains(&spec.ood_frac) {
        return Err(Error::validation(format!("ood fraction {} outside [0, 1]", spec.ood_frac)));
    }
    if spec.scene.width == 0 || spec.scene.height == 0 {
        return Err(Error::validation("image size must be positive"));
    }
    let mut out = Vec::with_capacity(spec.n_train + spec.n_val);
    for (split, n) in [(Split::Train, spec.n_train), (Split::Val, spec.n_val)] {
        for index in 0..n {
            let seed = image_seed(spec.seed, split, index);
            let ood = split == Split::Val && is_ood_slot(index, n, spec.ood_frac);
            let (image, ann) = render_scene(seed, ood, &spec.scene);
            let id = match split {
                Split::Train => format!("train-{index:05}"),
                Split::Val => format!("val-{index:05}"),
            };
            let entry = ManifestEntry {
                tensor_file: format!("images/{id}.evt"),
                id,
                split,
                width: ann.width,
                height: ann.height,
                annotations: ann.objects,
                ood_objects: ann.ood_objects,
                ood,
                seed,
                dataset_seed: spec.seed,
                generator: GENERATOR_VERSION.to_string(),
            };
            out.push((entry, image));
        }
    }
    Ok(out)
}

/// Writes the corpus under `dir` (created if missing).
pub fn write_dataset(dir: &Path, spec: &SynthSpec) -> Result<Vec<ManifestEntry>> {
    let items = synthesize(spec)?;
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    for (entry, image) in &items {
        write_tensor_file(&dir.join(&entry.tensor_file), image)?;
    }
    let entries: Vec<ManifestEntry> = items.into_iter().map(|(e, _)| e).collect();
    let path = dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_string_pretty(&entries).map_err(|e| Error::json(&path, e))?;
    json.push('\n');
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(entries)
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub entry: ManifestEntry,
    /// `[1, H, W]`.
    pub image: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub root: PathBuf,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let entries: Vec<ManifestEntry> = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let samples = entries
            .into_iter()
            .map(|entry| {
                let image = read_tensor_file(&dir.join(&entry.tensor_file))?;
                if image.shape() != [1, entry.height, entry.width] {
                    return Err(Error::validation(format!(
                        "{}: image shape {:?} disagrees with manifest size {}x{}",
                        entry.id,
                        image.shape(),
                        entry.height,
                        entry.width
                    )));
                }
                Ok(Sample { entry, image })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            root: dir.to_path_buf(),
            samples,
        })
    }

    /// In-memory corpus, identical to what [`write_dataset`] then [`Dataset::load`]
    /// would produce.
    pub fn from_spec(spec: &SynthSpec) -> Result<Self> {
        let samples = synthesize(spec)?
            .into_iter()
            .map(|(entry, image)| Sample { entry, image })
            .collect();
        Ok(Self {
            root: PathBuf::new(),
            samples,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.entry.split == split).collect()
    }

    pub fn training_samples(&self, split: Split, classes: usize, stride: usize) -> Result<Vec<TrainingSample>> {
        self.split(split)
            .into_iter()
            .map(|s| build_targets(s.image.clone(), &s.entry.annotation(), classes, stride))
            .collect()
    }
}
