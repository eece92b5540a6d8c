//! Planted-rule worlds with known ground truth.
//!
//! A world plants one basis direction per concept. Spatial concepts add
//! their direction to every frame at the joints of their body part; temporal
//! and interaction concepts add a direction modulated by a zero-mean sinusoid
//! over frames, applied at every joint. Distinct sinusoid frequencies keep
//! the signals orthogonal over the frame grid, so a least-squares decode
//! recovers the planted concept set exactly on noiseless samples; the test
//! suite uses that decode as an oracle.
//!
//! Samples carry their post-flip concept vector as ground truth: the label
//! noise flips bits first and the features are rendered from the flipped
//! set, so `true_concepts` is exactly what the features encode.

use crate::concept_bank::{
    AssociationMatrix, BodyPart, Concept, ConceptCategory, ConceptVocabulary,
};
use crate::error::{Error, Result};
use crate::rng;
use ndarray::{Array1, Array2, Array4};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct WorldConfig {
    pub frames: usize,
    pub joints: usize,
    pub channels: usize,
    pub noise_std: f64,
    pub flip_prob: f64,
    pub text_dim: usize,
    /// Body part of each joint, indexed by joint id.
    pub part_map: Vec<BodyPart>,
    pub vocabulary: ConceptVocabulary,
    pub matrix: AssociationMatrix,
}

/// Joints split into six contiguous runs, one per body part, remainder
/// spread over the leading parts.
pub fn default_part_map(joints: usize) -> Vec<BodyPart> {
    let base = joints / 6;
    let rem = joints % 6;
    let mut map = Vec::with_capacity(joints);
    for (i, part) in BodyPart::PARTS.iter().enumerate() {
        let run = base + usize::from(i < rem);
        map.extend(std::iter::repeat(*part).take(run));
    }
    map
}

impl WorldConfig {
    /// Desk-scale geometry: 16 frames, 20 joints, 32 channels, noise 0.1,
    /// flip probability 0.05.
    pub fn desk(vocabulary: ConceptVocabulary, matrix: AssociationMatrix) -> Self {
        WorldConfig {
            frames: 16,
            joints: 20,
            channels: 32,
            noise_std: 0.1,
            flip_prob: 0.05,
            text_dim: 32,
            part_map: default_part_map(20),
            vocabulary,
            matrix,
        }
    }

    pub fn num_actions(&self) -> usize {
        self.matrix.num_actions()
    }

    pub fn num_concepts(&self) -> usize {
        self.vocabulary.len()
    }

    fn signal_concepts(&self) -> usize {
        self.vocabulary.len() - self.vocabulary.count(ConceptCategory::Spatial)
    }

    pub fn validate(&self) -> Result<()> {
        self.matrix.bind(&self.vocabulary)?;
        if self.channels < 8 {
            return Err(Error::validation(format!(
                "channels = {} too small for near-orthogonal bases (require >= 8)",
                self.channels
            )));
        }
        if !(0.0..0.5).contains(&self.flip_prob) {
            return Err(Error::validation(format!(
                "flip_prob = {} must lie in [0, 0.5)",
                self.flip_prob
            )));
        }
        if self.noise_std < 0.0 {
            return Err(Error::validation("noise_std must be non-negative"));
        }
        if self.part_map.len() != self.joints {
            return Err(Error::validation(format!(
                "part_map covers {} joints, world has {}",
                self.part_map.len(),
                self.joints
            )));
        }
        if self.part_map.iter().any(|p| *p == BodyPart::None) {
            return Err(Error::validation("part_map entries must name a body part"));
        }
        let signals = self.signal_concepts();
        if signals > self.frames / 2 {
            return Err(Error::validation(format!(
                "{} temporal/interaction concepts need distinct frequencies; \
                 {} frames support at most {}",
                signals,
                self.frames,
                self.frames / 2
            )));
        }
        if self.text_dim == 0 {
            return Err(Error::validation("text_dim must be positive"));
        }
        for c in self.vocabulary.concepts() {
            if c.category == ConceptCategory::Spatial
                && !self.part_map.contains(&c.part)
            {
                return Err(Error::validation(format!(
                    "spatial concept '{}' targets part '{}' with no joints",
                    c.name, c.part
                )));
            }
        }
        Ok(())
    }
}

enum ConceptBasis {
    /// Added to every frame at the part's joints.
    Spatial { dir: Array1<f64>, joints: Vec<usize> },
    /// `dir * signal(t)` added at every joint; signal is zero-mean and
    /// unit-RMS over the frame grid.
    Signal { dir: Array1<f64>, freq: usize, phase: f64 },
}

pub struct World {
    pub config: WorldConfig,
    pub seed: u64,
    bases: Vec<ConceptBasis>,
    /// Unit row per action, the stand-in for language-model name embeddings.
    pub text_embeddings: Array2<f64>,
}

fn unit_gaussian(rng: &mut impl Rng, dim: usize) -> Array1<f64> {
    loop {
        let v = Array1::from_shape_fn(dim, |_| rng.sample::<f64, _>(StandardNormal));
        let norm = v.dot(&v).sqrt();
        if norm > 1e-9 {
            return v / norm;
        }
    }
}

/// Draws concept bases and action text embeddings for `config`.
pub fn generate_world(config: WorldConfig, seed: u64) -> Result<World> {
    config.validate()?;
    let mut basis_rng = rng::stream(seed, "world/basis");
    let d = config.channels;
    let t = config.frames;
    let mut signal_index = 0usize;
    let mut bases = Vec::with_capacity(config.num_concepts());
    for c in config.vocabulary.concepts() {
        let dir = unit_gaussian(&mut basis_rng, d);
        match c.category {
            ConceptCategory::Spatial => {
                let joints: Vec<usize> = (0..config.joints)
                    .filter(|&j| config.part_map[j] == c.part)
                    .collect();
                bases.push(ConceptBasis::Spatial { dir, joints });
            }
            ConceptCategory::Temporal | ConceptCategory::Interaction => {
                signal_index += 1;
                // Phase away from the grid zeros keeps the Nyquist-frequency
                // signal from vanishing.
                let phase = 0.1 + 0.8 * basis_rng.gen::<f64>();
                bases.push(ConceptBasis::Signal { dir, freq: signal_index, phase });
            }
        }
    }
    debug_assert!(signal_index <= t / 2);

    let mut text_rng = rng::stream(seed, "world/text");
    let a = config.num_actions();
    let mut text_embeddings = Array2::zeros((a, config.text_dim));
    for i in 0..a {
        text_embeddings
            .row_mut(i)
            .assign(&unit_gaussian(&mut text_rng, config.text_dim));
    }

    Ok(World { config, seed, bases, text_embeddings })
}

impl World {
    /// The signal value of concept `c` at frame `t`, zero for spatial
    /// concepts. Zero-mean and unit-RMS over the frame grid.
    pub fn signal_value(&self, c: usize, t: usize) -> f64 {
        match &self.bases[c] {
            ConceptBasis::Spatial { .. } => 0.0,
            ConceptBasis::Signal { freq, phase, .. } => {
                let frames = self.config.frames as f64;
                let raw = (2.0 * PI * (*freq as f64) * (t as f64 + phase) / frames).sin();
                raw / self.signal_rms(*freq, *phase)
            }
        }
    }

    fn signal_rms(&self, freq: usize, phase: f64) -> f64 {
        let frames = self.config.frames;
        if 2 * freq == frames {
            (PI * phase).sin().abs()
        } else {
            0.5f64.sqrt()
        }
    }

    pub fn basis_direction(&self, c: usize) -> &Array1<f64> {
        match &self.bases[c] {
            ConceptBasis::Spatial { dir, .. } => dir,
            ConceptBasis::Signal { dir, .. } => dir,
        }
    }

    pub fn spatial_joints(&self, c: usize) -> Option<&[usize]> {
        match &self.bases[c] {
            ConceptBasis::Spatial { joints, .. } => Some(joints),
            ConceptBasis::Signal { .. } => None,
        }
    }

    /// Renders one noiseless sample from an active-concept vector.
    pub fn render(&self, active: &[u8]) -> Array4<f64> {
        let (t, v, d) = (self.config.frames, self.config.joints, self.config.channels);
        let mut f = ndarray::Array3::<f64>::zeros((t, v, d));
        for (c, &on) in active.iter().enumerate() {
            if on == 0 {
                continue;
            }
            match &self.bases[c] {
                ConceptBasis::Spatial { dir, joints } => {
                    for ti in 0..t {
                        for &j in joints {
                            for di in 0..d {
                                f[[ti, j, di]] += dir[di];
                            }
                        }
                    }
                }
                ConceptBasis::Signal { dir, .. } => {
                    for ti in 0..t {
                        let s = self.signal_value(c, ti);
                        for j in 0..v {
                            for di in 0..d {
                                f[[ti, j, di]] += dir[di] * s;
                            }
                        }
                    }
                }
            }
        }
        f.insert_axis(ndarray::Axis(0))
    }
}

/// A batch of rendered samples. Features are stored in the file precision
/// (little-endian f32) so in-memory training matches training from disk.
#[derive(Debug, Clone)]
pub struct FeatureBatch {
    /// (n, frames, joints, channels), row-major.
    pub features: Array4<f32>,
    pub labels: Vec<usize>,
    /// Post-flip concept vectors, one row per sample.
    pub true_concepts: Vec<Vec<u8>>,
}

impl FeatureBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// One sample's features widened back to f64 as (frames, joints, channels).
    pub fn sample_features(&self, i: usize) -> ndarray::Array3<f64> {
        self.features
            .index_axis(ndarray::Axis(0), i)
            .mapv(|x| x as f64)
    }
}

/// Per-split sampling seed, so splits are independent of each other and
/// of the world stream.
pub fn split_seed(seed: u64, index: u64) -> u64 {
    use rand::Rng;
    rng::substream(seed, "data/split", index).gen()
}

/// Draws `n` samples: uniform action, per-concept Bernoulli flips of the
/// action's signature, features rendered from the flipped set plus Gaussian
/// noise. Identical `(world, n, seed)` give identical batches.
pub fn sample_batch(world: &World, n: usize, seed: u64) -> FeatureBatch {
    let mut rng = rng::stream(seed, "world/sample");
    let cfg = &world.config;
    let (t, v, d) = (cfg.frames, cfg.joints, cfg.channels);
    let mut features = Array4::<f32>::zeros((n, t, v, d));
    let mut labels = Vec::with_capacity(n);
    let mut concepts = Vec::with_capacity(n);
    for i in 0..n {
        let a = rng.gen_range(0..cfg.num_actions());
        let mut active = cfg.matrix.rows[a].clone();
        for bit in active.iter_mut() {
            if rng.gen::<f64>() < cfg.flip_prob {
                *bit ^= 1;
            }
        }
        let mut sample = world.render(&active);
        if cfg.noise_std > 0.0 {
            for e in sample.iter_mut() {
                *e += cfg.noise_std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        features
            .index_axis_mut(ndarray::Axis(0), i)
            .assign(&sample.index_axis(ndarray::Axis(0), 0).mapv(|x| x as f32));
        labels.push(a);
        concepts.push(active);
    }
    FeatureBatch { features, labels, true_concepts: concepts }
}

// ---------------------------------------------------------------------------
// Planted banks
// ---------------------------------------------------------------------------

/// Deterministic synthetic vocabulary and association matrix. Signatures are
/// unique with pairwise Hamming distance >= 4 whenever the concept budget
/// permits, so single label flips rarely cross action boundaries.
pub fn planted_bank(
    num_actions: usize,
    num_concepts: usize,
    seed: u64,
) -> Result<(ConceptVocabulary, AssociationMatrix)> {
    if num_actions < 2 {
        return Err(Error::validation("planted bank needs at least 2 actions"));
    }
    if num_concepts < 6 {
        return Err(Error::validation("planted bank needs at least 6 concepts"));
    }
    let n_int = usize::from(num_concepts >= 8);
    let n_t = ((num_concepts - n_int) * 2 / 5).max(1);
    let n_s = num_concepts - n_int - n_t;

    let mut concepts = Vec::with_capacity(num_concepts);
    for i in 0..n_s {
        let part = BodyPart::PARTS[i % 6];
        concepts.push(Concept {
            id: i,
            name: format!("sp{i:02}_{part}"),
            category: ConceptCategory::Spatial,
            part,
        });
    }
    for i in 0..n_t {
        concepts.push(Concept {
            id: n_s + i,
            name: format!("tm{i:02}"),
            category: ConceptCategory::Temporal,
            part: BodyPart::None,
        });
    }
    for i in 0..n_int {
        concepts.push(Concept {
            id: n_s + n_t + i,
            name: format!("ix{i:02}"),
            category: ConceptCategory::Interaction,
            part: BodyPart::None,
        });
    }
    let vocabulary = ConceptVocabulary::new(concepts)?;

    let mut rng = rng::stream(seed, "world/bank");
    let max_weight = 8.min(num_concepts);
    let min_dist = if num_concepts >= 12 { 4 } else { 2 };
    let mut rows: Vec<Vec<u8>> = Vec::new();
    let mut attempts = 0;
    while rows.len() < num_actions {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::validation(
                "could not plant distinct action signatures; too many actions \
                 for the concept budget",
            ));
        }
        let weight = rng.gen_range(3..=max_weight);
        let mut row = vec![0u8; num_concepts];
        while row.iter().filter(|&&b| b == 1).count() < weight {
            row[rng.gen_range(0..num_concepts)] = 1;
        }
        let ok = rows.iter().all(|r| {
            let dist: usize = r
                .iter()
                .zip(row.iter())
                .filter(|(a, b)| a != b)
                .count();
            dist >= min_dist
        });
        if ok {
            rows.push(row);
        }
    }
    let actions = (0..num_actions).map(|a| format!("action_{a:02}")).collect();
    let matrix = AssociationMatrix::new(actions, vocabulary.names(), rows)?;
    Ok((vocabulary, matrix))
}

// ---------------------------------------------------------------------------
// Dataset directories
// ---------------------------------------------------------------------------

/// Serialized form of a world configuration, with the bank inlined so a
/// dataset directory is self-contained.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfigFile {
    pub frames: usize,
    pub joints: usize,
    pub channels: usize,
    pub noise_std: f64,
    pub flip_prob: f64,
    pub text_dim: usize,
    pub part_map: Vec<BodyPart>,
    pub concepts: Vec<Concept>,
    pub actions: Vec<String>,
    pub matrix_rows: Vec<Vec<u8>>,
}

impl WorldConfigFile {
    pub fn from_config(cfg: &WorldConfig) -> Self {
        WorldConfigFile {
            frames: cfg.frames,
            joints: cfg.joints,
            channels: cfg.channels,
            noise_std: cfg.noise_std,
            flip_prob: cfg.flip_prob,
            text_dim: cfg.text_dim,
            part_map: cfg.part_map.clone(),
            concepts: cfg.vocabulary.concepts().to_vec(),
            actions: cfg.actions_for_file(),
            matrix_rows: cfg.matrix.rows.clone(),
        }
    }

    pub fn into_config(self) -> Result<WorldConfig> {
        let vocabulary = ConceptVocabulary::new(self.concepts)?;
        let matrix = AssociationMatrix::new(self.actions, vocabulary.names(), self.matrix_rows)?;
        let cfg = WorldConfig {
            frames: self.frames,
            joints: self.joints,
            channels: self.channels,
            noise_std: self.noise_std,
            flip_prob: self.flip_prob,
            text_dim: self.text_dim,
            part_map: self.part_map,
            vocabulary,
            matrix,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl WorldConfig {
    fn actions_for_file(&self) -> Vec<String> {
        self.matrix.actions.clone()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorldFile {
    schema_version: u32,
    config_hash: String,
    seed: u64,
    world: WorldConfigFile,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitHeader {
    schema_version: u32,
    config_hash: String,
    seed: u64,
    /// (samples, frames, joints, channels)
    shape: [usize; 4],
    dtype: String,
    order: String,
    labels: Vec<usize>,
    concepts: Vec<Vec<u8>>,
}

/// Everything a training or evaluation run reads back from a dataset
/// directory. Splits are keyed by name (`train`, `eval`).
pub struct LoadedDataset {
    pub world: World,
    /// Configuration hash recorded when the dataset was generated.
    pub config_hash: String,
    pub splits: BTreeMap<String, FeatureBatch>,
}

fn features_to_le_bytes(features: &Array4<f32>) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(features.len() * 4);
    for &x in features.iter() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    bytes
}

fn features_from_le_bytes(bytes: &[u8], shape: [usize; 4], source: &str) -> Result<Array4<f32>> {
    let expect = shape.iter().product::<usize>() * 4;
    if bytes.len() != expect {
        return Err(Error::schema(
            source.to_string(),
            format!("expected {expect} bytes for shape {shape:?}, found {}", bytes.len()),
        ));
    }
    let vals: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Array4::from_shape_vec(shape, vals)
        .map_err(|e| Error::schema(source.to_string(), e.to_string()))
}

/// Writes `world.json` plus `<name>.json` / `<name>.bin` per split.
pub fn save_dataset(
    dir: &Path,
    world: &World,
    config_hash: &str,
    splits: &[(&str, &FeatureBatch)],
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let wf = WorldFile {
        schema_version: crate::SCHEMA_VERSION,
        config_hash: config_hash.to_string(),
        seed: world.seed,
        world: WorldConfigFile::from_config(&world.config),
    };
    std::fs::write(
        dir.join("world.json"),
        crate::concept_bank::to_canonical_json(&wf),
    )?;
    for (name, batch) in splits {
        let header = SplitHeader {
            schema_version: crate::SCHEMA_VERSION,
            config_hash: config_hash.to_string(),
            seed: world.seed,
            shape: [
                batch.len(),
                world.config.frames,
                world.config.joints,
                world.config.channels,
            ],
            dtype: "f32le".to_string(),
            order: "row_major".to_string(),
            labels: batch.labels.clone(),
            concepts: batch.true_concepts.clone(),
        };
        std::fs::write(
            dir.join(format!("{name}.json")),
            crate::concept_bank::to_canonical_json(&header),
        )?;
        std::fs::write(dir.join(format!("{name}.bin")), features_to_le_bytes(&batch.features))?;
    }
    Ok(())
}

/// Reads a dataset directory back, rebuilding the world (bases included)
/// from the stored configuration and seed.
pub fn load_dataset(dir: &Path) -> Result<LoadedDataset> {
    let world_path = dir.join("world.json");
    let text = std::fs::read_to_string(&world_path)?;
    let wf: WorldFile = serde_json::from_str(&text)
        .map_err(|e| Error::schema(world_path.display().to_string(), e.to_string()))?;
    if wf.schema_version != crate::SCHEMA_VERSION {
        return Err(Error::schema(
            world_path.display().to_string(),
            format!("unsupported schema_version {}", wf.schema_version),
        ));
    }
    let world = generate_world(wf.world.into_config()?, wf.seed)?;

    let mut splits = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let Some(split) = name.strip_suffix(".json") else { continue };
        if split == "world" {
            continue;
        }
        let htext = std::fs::read_to_string(&path)?;
        let header: SplitHeader = serde_json::from_str(&htext)
            .map_err(|e| Error::schema(path.display().to_string(), e.to_string()))?;
        if header.schema_version != crate::SCHEMA_VERSION {
            return Err(Error::schema(
                path.display().to_string(),
                format!("unsupported schema_version {}", header.schema_version),
            ));
        }
        if header.dtype != "f32le" || header.order != "row_major" {
            return Err(Error::schema(
                path.display().to_string(),
                format!("unsupported layout {}/{}", header.dtype, header.order),
            ));
        }
        let bin = dir.join(format!("{split}.bin"));
        let bytes = std::fs::read(&bin)?;
        let features = features_from_le_bytes(&bytes, header.shape, &bin.display().to_string())?;
        if header.labels.len() != header.shape[0] || header.concepts.len() != header.shape[0] {
            return Err(Error::schema(
                path.display().to_string(),
                "label/concept counts disagree with sample count".to_string(),
            ));
        }
        splits.insert(
            split.to_string(),
            FeatureBatch {
                features,
                labels: header.labels,
                true_concepts: header.concepts,
            },
        );
    }
    Ok(LoadedDataset { world, config_hash: wf.config_hash, splits })
}
