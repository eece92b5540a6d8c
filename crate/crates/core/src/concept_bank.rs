//! Motion-concept vocabularies and action-concept association matrices.
//!
//! A vocabulary is an ordered list of named concepts, each tagged with a
//! category (spatial / temporal / interaction) and, for spatial concepts, the
//! body part it describes. An association matrix rows actions against the
//! vocabulary with 0/1 entries; each row is the action's concept signature.
//!
//! The clustering half of the module (k-means with farthest-point seeding and
//! the elbow rule) is what turns raw motion-pattern embeddings into a
//! vocabulary-sized set of clusters; at desk scale it runs on small synthetic
//! embedding sets but keeps the exact procedure.

use crate::error::{Error, Result};
use crate::rng;
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConceptCategory {
    Spatial,
    Temporal,
    Interaction,
}

impl fmt::Display for ConceptCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ConceptCategory::Spatial => "spatial",
            ConceptCategory::Temporal => "temporal",
            ConceptCategory::Interaction => "interaction",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BodyPart {
    Head,
    Hand,
    Arm,
    Hip,
    Leg,
    Foot,
    None,
}

impl BodyPart {
    pub const PARTS: [BodyPart; 6] = [
        BodyPart::Head,
        BodyPart::Hand,
        BodyPart::Arm,
        BodyPart::Hip,
        BodyPart::Leg,
        BodyPart::Foot,
    ];
}

impl fmt::Display for BodyPart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BodyPart::Head => "head",
            BodyPart::Hand => "hand",
            BodyPart::Arm => "arm",
            BodyPart::Hip => "hip",
            BodyPart::Leg => "leg",
            BodyPart::Foot => "foot",
            BodyPart::None => "none",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Concept {
    pub id: usize,
    pub name: String,
    pub category: ConceptCategory,
    pub part: BodyPart,
}

/// Ordered concept list. Construction enforces: ids contiguous from 0 in
/// list order, names unique, spatial concepts carry a real body part, and
/// temporal/interaction concepts carry `part: none`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptVocabulary {
    concepts: Vec<Concept>,
}

impl ConceptVocabulary {
    pub fn new(concepts: Vec<Concept>) -> Result<Self> {
        if concepts.is_empty() {
            return Err(Error::validation("vocabulary has no concepts"));
        }
        let mut seen = HashSet::new();
        for (i, c) in concepts.iter().enumerate() {
            if c.id != i {
                return Err(Error::validation(format!(
                    "concept ids must be contiguous from 0: position {i} has id {}",
                    c.id
                )));
            }
            if !seen.insert(c.name.clone()) {
                return Err(Error::validation(format!(
                    "duplicate concept name '{}'",
                    c.name
                )));
            }
            match c.category {
                ConceptCategory::Spatial => {
                    if c.part == BodyPart::None {
                        return Err(Error::validation(format!(
                            "spatial concept '{}' must name a body part",
                            c.name
                        )));
                    }
                }
                ConceptCategory::Temporal | ConceptCategory::Interaction => {
                    if c.part != BodyPart::None {
                        return Err(Error::validation(format!(
                            "{} concept '{}' must have part 'none'",
                            c.category, c.name
                        )));
                    }
                }
            }
        }
        Ok(ConceptVocabulary { concepts })
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    pub fn names(&self) -> Vec<String> {
        self.concepts.iter().map(|c| c.name.clone()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.concepts.iter().position(|c| c.name == name)
    }

    pub fn count(&self, category: ConceptCategory) -> usize {
        self.concepts.iter().filter(|c| c.category == category).count()
    }

    /// True when concepts are laid out as one spatial block, then one
    /// temporal block, then one interaction block. The decoder requires this
    /// layout because its two branches emit the spatial block first.
    pub fn is_block_ordered(&self) -> bool {
        let rank = |c: &Concept| match c.category {
            ConceptCategory::Spatial => 0,
            ConceptCategory::Temporal => 1,
            ConceptCategory::Interaction => 2,
        };
        self.concepts.windows(2).all(|w| rank(&w[0]) <= rank(&w[1]))
    }
}

/// 0/1 matrix of actions against a vocabulary's concepts. Every action must
/// activate at least one concept; duplicate signatures are legal here and
/// surfaced by [`check_signature_uniqueness`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssociationMatrix {
    pub actions: Vec<String>,
    pub concepts: Vec<String>,
    pub rows: Vec<Vec<u8>>,
}

impl AssociationMatrix {
    pub fn new(actions: Vec<String>, concepts: Vec<String>, rows: Vec<Vec<u8>>) -> Result<Self> {
        if actions.len() != rows.len() {
            return Err(Error::validation(format!(
                "matrix has {} actions but {} rows",
                actions.len(),
                rows.len()
            )));
        }
        let mut seen = HashSet::new();
        for a in &actions {
            if !seen.insert(a.clone()) {
                return Err(Error::validation(format!("duplicate action name '{a}'")));
            }
        }
        for (a, row) in actions.iter().zip(rows.iter()) {
            if row.len() != concepts.len() {
                return Err(Error::validation(format!(
                    "row for '{a}' has {} entries, vocabulary has {}",
                    row.len(),
                    concepts.len()
                )));
            }
            if row.iter().any(|&v| v > 1) {
                return Err(Error::validation(format!(
                    "row for '{a}' contains a non-binary entry"
                )));
            }
            if row.iter().all(|&v| v == 0) {
                return Err(Error::validation(format!(
                    "action '{a}' has no associated concepts"
                )));
            }
        }
        Ok(AssociationMatrix { actions, concepts, rows })
    }

    pub fn num_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn num_concepts(&self) -> usize {
        self.concepts.len()
    }

    /// Errors unless this matrix's concept list matches the vocabulary,
    /// name for name in order.
    pub fn bind(&self, vocab: &ConceptVocabulary) -> Result<()> {
        let names = vocab.names();
        if self.concepts != names {
            return Err(Error::validation(
                "matrix concept list does not match the vocabulary".to_string(),
            ));
        }
        Ok(())
    }
}

/// All pairs of actions (by index, `i < j`) sharing an identical signature.
pub fn check_signature_uniqueness(matrix: &AssociationMatrix) -> Vec<(usize, usize)> {
    let mut dups = Vec::new();
    for i in 0..matrix.rows.len() {
        for j in i + 1..matrix.rows.len() {
            if matrix.rows[i] == matrix.rows[j] {
                dups.push((i, j));
            }
        }
    }
    dups
}

// ---------------------------------------------------------------------------
// Embeddings and clustering
// ---------------------------------------------------------------------------

/// Motion-pattern embeddings with one source label per vector.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    pub vectors: Array2<f64>,
    pub labels: Vec<String>,
}

impl EmbeddingSet {
    pub fn new(vectors: Array2<f64>, labels: Vec<String>) -> Result<Self> {
        if vectors.nrows() == 0 {
            return Err(Error::validation("embedding set is empty"));
        }
        if vectors.nrows() != labels.len() {
            return Err(Error::validation(format!(
                "{} embeddings but {} labels",
                vectors.nrows(),
                labels.len()
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding set".to_string()));
        }
        Ok(EmbeddingSet { vectors, labels })
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct KmeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Array2<f64>,
    /// Sum of squared distances of each point to its centroid.
    pub sse: f64,
    /// SSE after each Lloyd iteration; non-increasing.
    pub sse_history: Vec<f64>,
    /// Most frequent label in each cluster, ties broken lexicographically.
    pub representatives: Vec<String>,
}

fn sq_dist(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

const KMEANS_MAX_ITERS: usize = 500;

/// Lloyd's algorithm. The first centroid is a uniformly random point from
/// the seeded stream; the rest are chosen farthest-first. Empty clusters are
/// reseeded with the point currently farthest from its centroid. Runs until
/// assignments are stable.
pub fn kmeans_cluster(set: &EmbeddingSet, k: usize, seed: u64) -> Result<KmeansResult> {
    let n = set.len();
    if k == 0 {
        return Err(Error::validation("k must be at least 1"));
    }
    if k > n {
        return Err(Error::validation(format!(
            "k = {k} exceeds the {n} embeddings available"
        )));
    }

    let mut rng = rng::stream(seed, "kmeans");
    let first = rng.gen_range(0..n);
    let mut centroids = Array2::zeros((k, set.vectors.ncols()));
    centroids.row_mut(0).assign(&set.vectors.row(first));
    let mut nearest: Vec<f64> = (0..n)
        .map(|i| sq_dist(set.vectors.row(i), centroids.row(0)))
        .collect();
    for c in 1..k {
        let mut far = 0;
        for i in 1..n {
            if nearest[i] > nearest[far] {
                far = i;
            }
        }
        centroids.row_mut(c).assign(&set.vectors.row(far));
        for i in 0..n {
            let d = sq_dist(set.vectors.row(i), centroids.row(c));
            if d < nearest[i] {
                nearest[i] = d;
            }
        }
    }

    let assign = |centroids: &Array2<f64>| -> Vec<usize> {
        (0..n)
            .map(|i| {
                let mut best = 0;
                let mut best_d = sq_dist(set.vectors.row(i), centroids.row(0));
                for c in 1..k {
                    let d = sq_dist(set.vectors.row(i), centroids.row(c));
                    if d < best_d {
                        best_d = d;
                        best = c;
                    }
                }
                best
            })
            .collect()
    };

    let mut assignments = assign(&centroids);
    let mut sse_history = Vec::new();
    for _ in 0..KMEANS_MAX_ITERS {
        // Reseed empty clusters before the mean update so every centroid
        // owns at least one point.
        let mut counts = vec![0usize; k];
        for &a in &assignments {
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] == 0 {
                let mut far = 0;
                let mut far_d = -1.0;
                for i in 0..n {
                    if counts[assignments[i]] <= 1 {
                        continue;
                    }
                    let d = sq_dist(set.vectors.row(i), centroids.row(assignments[i]));
                    if d > far_d {
                        far_d = d;
                        far = i;
                    }
                }
                counts[assignments[far]] -= 1;
                assignments[far] = c;
                counts[c] = 1;
            }
        }

        centroids.fill(0.0);
        for (i, &a) in assignments.iter().enumerate() {
            let mut row = centroids.row_mut(a);
            row += &set.vectors.row(i);
        }
        for c in 0..k {
            let mut row = centroids.row_mut(c);
            row /= counts[c] as f64;
        }

        let sse: f64 = (0..n)
            .map(|i| sq_dist(set.vectors.row(i), centroids.row(assignments[i])))
            .sum();
        sse_history.push(sse);

        let next = assign(&centroids);
        if next == assignments {
            break;
        }
        assignments = next;
    }

    let sse = *sse_history.last().expect("at least one iteration");
    let mut representatives = Vec::with_capacity(k);
    for c in 0..k {
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for (i, &a) in assignments.iter().enumerate() {
            if a == c {
                *freq.entry(set.labels[i].as_str()).or_insert(0) += 1;
            }
        }
        let rep = freq
            .iter()
            .max_by(|(la, ca), (lb, cb)| ca.cmp(cb).then(lb.cmp(la)))
            .map(|(l, _)| l.to_string())
            .unwrap_or_default();
        representatives.push(rep);
    }

    Ok(KmeansResult {
        assignments,
        centroids,
        sse,
        sse_history,
        representatives,
    })
}

/// Elbow rule: runs k-means for k = 1..=k_max and returns the k in
/// [2, k_max - 1] maximizing the second difference
/// sse(k-1) - 2 sse(k) + sse(k+1), ties resolved toward smaller k.
pub fn elbow_select_k(set: &EmbeddingSet, k_max: usize, seed: u64) -> Result<usize> {
    if k_max < 3 {
        return Err(Error::validation(
            "elbow selection needs k_max >= 3 so the window [2, k_max-1] is nonempty",
        ));
    }
    if k_max > set.len() {
        return Err(Error::validation(format!(
            "k_max = {k_max} exceeds the {} embeddings available",
            set.len()
        )));
    }
    let sse: Vec<f64> = (1..=k_max)
        .map(|k| kmeans_cluster(set, k, seed).map(|r| r.sse))
        .collect::<Result<_>>()?;
    let mut best_k = 2;
    let mut best = f64::NEG_INFINITY;
    for k in 2..=k_max - 1 {
        let d2 = sse[k - 2] - 2.0 * sse[k - 1] + sse[k];
        if d2 > best {
            best = d2;
            best_k = k;
        }
    }
    Ok(best_k)
}

// ---------------------------------------------------------------------------
// Building a matrix from annotation records
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionRecord {
    pub action: String,
    pub concepts: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordsFile {
    pub schema_version: u32,
    pub actions: Vec<String>,
    pub records: Vec<ActionRecord>,
}

pub fn load_records(path: &Path) -> Result<RecordsFile> {
    let text = std::fs::read_to_string(path)?;
    let file: RecordsFile = serde_json::from_str(&text)
        .map_err(|e| Error::schema(path.display().to_string(), e.to_string()))?;
    if file.schema_version != crate::SCHEMA_VERSION {
        return Err(Error::schema(
            path.display().to_string(),
            format!("unsupported schema_version {}", file.schema_version),
        ));
    }
    Ok(file)
}

/// Builds the 0/1 matrix for `actions` (rows, in order) from annotation
/// records. Multiple records for one action are unioned. Errors on a record
/// naming an unknown action or concept, and on an action left without
/// concepts.
pub fn build_association_matrix(
    vocab: &ConceptVocabulary,
    actions: &[String],
    records: &[ActionRecord],
) -> Result<AssociationMatrix> {
    let action_idx: HashMap<&str, usize> = actions
        .iter()
        .enumerate()
        .map(|(i, a)| (a.as_str(), i))
        .collect();
    let mut rows = vec![vec![0u8; vocab.len()]; actions.len()];
    for rec in records {
        let &ai = action_idx
            .get(rec.action.as_str())
            .ok_or_else(|| Error::validation(format!("unknown action '{}'", rec.action)))?;
        for cname in &rec.concepts {
            let ci = vocab
                .index_of(cname)
                .ok_or_else(|| Error::validation(format!("unknown concept name '{cname}'")))?;
            rows[ai][ci] = 1;
        }
    }
    AssociationMatrix::new(actions.to_vec(), vocab.names(), rows)
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabularyFile {
    schema_version: u32,
    concepts: Vec<Concept>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixFile {
    schema_version: u32,
    actions: Vec<String>,
    concepts: Vec<String>,
    rows: Vec<Vec<u8>>,
}

/// Canonical JSON used for all bank artifacts: two-space pretty printing
/// with a trailing newline. Saving a loaded canonical file reproduces it
/// byte for byte.
pub(crate) fn to_canonical_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

pub fn vocabulary_to_json(vocab: &ConceptVocabulary) -> String {
    to_canonical_json(&VocabularyFile {
        schema_version: crate::SCHEMA_VERSION,
        concepts: vocab.concepts.clone(),
    })
}

pub fn save_vocabulary(vocab: &ConceptVocabulary, path: &Path) -> Result<()> {
    std::fs::write(path, vocabulary_to_json(vocab))?;
    Ok(())
}

pub fn vocabulary_from_json(text: &str, source: &str) -> Result<ConceptVocabulary> {
    let file: VocabularyFile =
        serde_json::from_str(text).map_err(|e| Error::schema(source.to_string(), e.to_string()))?;
    if file.schema_version != crate::SCHEMA_VERSION {
        return Err(Error::schema(
            source.to_string(),
            format!("unsupported schema_version {}", file.schema_version),
        ));
    }
    ConceptVocabulary::new(file.concepts)
}

pub fn load_vocabulary(path: &Path) -> Result<ConceptVocabulary> {
    let text = std::fs::read_to_string(path)?;
    vocabulary_from_json(&text, &path.display().to_string())
}

pub fn matrix_to_json(matrix: &AssociationMatrix) -> String {
    to_canonical_json(&MatrixFile {
        schema_version: crate::SCHEMA_VERSION,
        actions: matrix.actions.clone(),
        concepts: matrix.concepts.clone(),
        rows: matrix.rows.clone(),
    })
}

pub fn save_matrix(matrix: &AssociationMatrix, path: &Path) -> Result<()> {
    std::fs::write(path, matrix_to_json(matrix))?;
    Ok(())
}

pub fn matrix_from_json(text: &str, source: &str) -> Result<AssociationMatrix> {
    let file: MatrixFile =
        serde_json::from_str(text).map_err(|e| Error::schema(source.to_string(), e.to_string()))?;
    if file.schema_version != crate::SCHEMA_VERSION {
        return Err(Error::schema(
            source.to_string(),
            format!("unsupported schema_version {}", file.schema_version),
        ));
    }
    AssociationMatrix::new(file.actions, file.concepts, file.rows)
}

pub fn load_matrix(path: &Path) -> Result<AssociationMatrix> {
    let text = std::fs::read_to_string(path)?;
    matrix_from_json(&text, &path.display().to_string())
}

// ---------------------------------------------------------------------------
// Bundled fixtures
// ---------------------------------------------------------------------------

pub mod fixtures {
    //! Vocabularies shipped with the crate, selectable on the CLI via
    //! `--fixture`. `ntu74` is the dataset-scale layout (52 spatial over six
    //! body parts, 21 temporal, 1 interaction); `desk67` is the trimmed desk
    //! layout (51 / 15 / 1) used by the synthetic pipelines.

    use super::*;

    pub const NTU74_JSON: &str = include_str!("../fixtures/ntu74_vocabulary.json");
    pub const DESK67_JSON: &str = include_str!("../fixtures/desk67_vocabulary.json");
    pub const DEMO_RECORDS_JSON: &str = include_str!("../fixtures/demo_records.json");

    pub fn fixture_names() -> &'static [&'static str] {
        &["ntu74", "desk67"]
    }

    pub fn fixture_vocabulary(name: &str) -> Result<ConceptVocabulary> {
        match name {
            "ntu74" => vocabulary_from_json(NTU74_JSON, "fixture:ntu74"),
            "desk67" => vocabulary_from_json(DESK67_JSON, "fixture:desk67"),
            other => Err(Error::validation(format!(
                "unknown fixture '{other}' (expected ntu74 or desk67)"
            ))),
        }
    }

    fn spatial(names: &[(&str, BodyPart)]) -> Vec<(String, ConceptCategory, BodyPart)> {
        names
            .iter()
            .map(|(n, p)| (n.to_string(), ConceptCategory::Spatial, *p))
            .collect()
    }

    fn tagged(names: &[&str], cat: ConceptCategory) -> Vec<(String, ConceptCategory, BodyPart)> {
        names
            .iter()
            .map(|n| (n.to_string(), cat, BodyPart::None))
            .collect()
    }

    fn assemble(parts: Vec<Vec<(String, ConceptCategory, BodyPart)>>) -> ConceptVocabulary {
        let mut concepts = Vec::new();
        for (id, (name, category, part)) in parts.into_iter().flatten().enumerate() {
            concepts.push(Concept { id, name, category, part });
        }
        ConceptVocabulary::new(concepts).expect("fixture vocabulary is valid")
    }

    const HEAD: [(&str, BodyPart); 6] = [
        ("head_tilt_up", BodyPart::Head),
        ("head_tilt_down", BodyPart::Head),
        ("head_turn_left", BodyPart::Head),
        ("head_turn_right", BodyPart::Head),
        ("head_nod", BodyPart::Head),
        ("head_shake", BodyPart::Head),
    ];
    const HAND: [(&str, BodyPart); 11] = [
        ("hand_grasp", BodyPart::Hand),
        ("hand_release", BodyPart::Hand),
        ("hand_wave", BodyPart::Hand),
        ("hand_clap", BodyPart::Hand),
        ("hand_point", BodyPart::Hand),
        ("hand_push", BodyPart::Hand),
        ("hand_pull", BodyPart::Hand),
        ("hand_lift_to_face", BodyPart::Hand),
        ("hand_write", BodyPart::Hand),
        ("hand_rub", BodyPart::Hand),
        ("hand_static", BodyPart::Hand),
    ];
    const ARM: [(&str, BodyPart); 11] = [
        ("arm_raise", BodyPart::Arm),
        ("arm_lower", BodyPart::Arm),
        ("arm_swing", BodyPart::Arm),
        ("arm_extend", BodyPart::Arm),
        ("arm_bend", BodyPart::Arm),
        ("arm_cross", BodyPart::Arm),
        ("arm_circle", BodyPart::Arm),
        ("arm_throw", BodyPart::Arm),
        ("arm_reach_out", BodyPart::Arm),
        ("arm_rotate", BodyPart::Arm),
        ("arm_static", BodyPart::Arm),
    ];
    const HIP: [(&str, BodyPart); 8] = [
        ("hip_flex", BodyPart::Hip),
        ("hip_extend", BodyPart::Hip),
        ("hip_rotate", BodyPart::Hip),
        ("hip_shift", BodyPart::Hip),
        ("hip_bend_forward", BodyPart::Hip),
        ("hip_sway", BodyPart::Hip),
        ("hip_drop", BodyPart::Hip),
        ("hip_static", BodyPart::Hip),
    ];
    const LEG: [(&str, BodyPart); 9] = [
        ("leg_jump", BodyPart::Leg),
        ("leg_squat", BodyPart::Leg),
        ("leg_kick", BodyPart::Leg),
        ("leg_step", BodyPart::Leg),
        ("leg_run", BodyPart::Leg),
        ("leg_raise", BodyPart::Leg),
        ("leg_bend", BodyPart::Leg),
        ("leg_cross", BodyPart::Leg),
        ("leg_static", BodyPart::Leg),
    ];
    const FOOT: [(&str, BodyPart); 7] = [
        ("foot_step", BodyPart::Foot),
        ("foot_stomp", BodyPart::Foot),
        ("foot_kick", BodyPart::Foot),
        ("foot_raise", BodyPart::Foot),
        ("foot_pivot", BodyPart::Foot),
        ("foot_drag", BodyPart::Foot),
        ("foot_static", BodyPart::Foot),
    ];
    const DIRECTION: [&str; 7] = [
        "motion_upward",
        "motion_downward",
        "motion_forward",
        "motion_backward",
        "motion_sideways",
        "motion_converging",
        "motion_diverging",
    ];
    const SEQUENCE: [&str; 6] = [
        "hands_first",
        "legs_first",
        "body_first",
        "head_first",
        "simultaneous",
        "alternating",
    ];
    const DYNAMICS: [&str; 8] = [
        "speed_slow",
        "speed_fast",
        "accelerating",
        "decelerating",
        "rhythm_regular",
        "rhythm_irregular",
        "duration_brief",
        "duration_sustained",
    ];
    const INTERACTION: [&str; 1] = ["two_person_exchange"];

    /// 74 concepts: 52 spatial (6 head, 11 hand, 11 arm, 8 hip, 9 leg,
    /// 7 foot), 21 temporal, 1 interaction.
    pub fn ntu74() -> ConceptVocabulary {
        assemble(vec![
            spatial(&HEAD),
            spatial(&HAND),
            spatial(&ARM),
            spatial(&HIP),
            spatial(&LEG),
            spatial(&FOOT),
            tagged(&DIRECTION, ConceptCategory::Temporal),
            tagged(&SEQUENCE, ConceptCategory::Temporal),
            tagged(&DYNAMICS, ConceptCategory::Temporal),
            tagged(&INTERACTION, ConceptCategory::Interaction),
        ])
    }

    /// 67 concepts: 51 spatial, 15 temporal, 1 interaction. The spatial
    /// block drops `head_shake`; the temporal block keeps 6 direction,
    /// 4 sequence and 5 dynamics concepts.
    pub fn desk67() -> ConceptVocabulary {
        let head: Vec<_> = HEAD.iter().copied().filter(|(n, _)| *n != "head_shake").collect();
        let direction: Vec<&str> = DIRECTION
            .iter()
            .copied()
            .filter(|n| *n != "motion_sideways")
            .collect();
        let sequence = ["hands_first", "legs_first", "simultaneous", "alternating"];
        let dynamics = ["speed_slow", "speed_fast", "accelerating", "decelerating", "rhythm_regular"];
        assemble(vec![
            spatial(&head),
            spatial(&HAND),
            spatial(&ARM),
            spatial(&HIP),
            spatial(&LEG),
            spatial(&FOOT),
            tagged(&direction, ConceptCategory::Temporal),
            tagged(&sequence, ConceptCategory::Temporal),
            tagged(&dynamics, ConceptCategory::Temporal),
            tagged(&INTERACTION, ConceptCategory::Interaction),
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn set_1d(points: &[f64]) -> EmbeddingSet {
        let vectors = Array2::from_shape_vec((points.len(), 1), points.to_vec()).unwrap();
        let labels = (0..points.len()).map(|i| format!("p{i}")).collect();
        EmbeddingSet::new(vectors, labels).unwrap()
    }

    /// Optimal SSE over every assignment of points to k clusters.
    fn brute_force_sse(set: &EmbeddingSet, k: usize) -> f64 {
        let n = set.len();
        let mut best = f64::INFINITY;
        let total = (k as u64).pow(n as u32);
        for code in 0..total {
            let mut c = code;
            let mut assign = vec![0usize; n];
            for a in assign.iter_mut() {
                *a = (c % k as u64) as usize;
                c /= k as u64;
            }
            let mut sums = vec![vec![0.0; set.vectors.ncols()]; k];
            let mut counts = vec![0usize; k];
            for (i, &a) in assign.iter().enumerate() {
                counts[a] += 1;
                for (j, s) in sums[a].iter_mut().enumerate() {
                    *s += set.vectors[[i, j]];
                }
            }
            let mut sse = 0.0;
            for (i, &a) in assign.iter().enumerate() {
                for j in 0..set.vectors.ncols() {
                    let mean = sums[a][j] / counts[a] as f64;
                    let d = set.vectors[[i, j]] - mean;
                    sse += d * d;
                }
            }
            if sse < best {
                best = sse;
            }
        }
        best
    }

    #[test]
    fn two_cluster_1d_example() {
        let set = set_1d(&[0.0, 0.1, 5.0, 5.1]);
        let r = kmeans_cluster(&set, 2, 0).unwrap();
        let mut cs: Vec<f64> = r.centroids.column(0).to_vec();
        cs.sort_by(f64::total_cmp);
        assert!((cs[0] - 0.05).abs() < 1e-9);
        assert!((cs[1] - 5.05).abs() < 1e-9);
        assert!((r.sse - 0.01).abs() < 1e-9);
    }

    #[test]
    fn kmeans_matches_exhaustive_partition_on_small_sets() {
        for seed in 0..5u64 {
            let set = set_1d(&[0.0, 0.2, 0.1, 4.0, 4.3, 4.1, 9.0, 9.2]);
            let r = kmeans_cluster(&set, 2, seed).unwrap();
            let opt = brute_force_sse(&set, 2);
            assert!(
                (r.sse - opt).abs() < 1e-9,
                "seed {seed}: kmeans sse {} vs optimal {opt}",
                r.sse
            );
        }
    }

    #[test]
    fn sse_history_is_non_increasing() {
        let set = set_1d(&[0.0, 0.7, 1.1, 2.9, 3.4, 5.0, 5.2, 7.7, 8.1, 9.0]);
        for k in 1..=5 {
            let r = kmeans_cluster(&set, k, 11).unwrap();
            for w in r.sse_history.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "k={k}: sse increased {w:?}");
            }
        }
    }

    #[test]
    fn elbow_finds_two_and_three_blobs() {
        let two = set_1d(&[0.0, 0.05, 0.1, 6.0, 6.05, 6.1]);
        assert_eq!(elbow_select_k(&two, 5, 3).unwrap(), 2);

        // Blobs at the corners of an equilateral triangle: splitting into two
        // clusters barely improves on one, so the knee sits at three.
        let h = 3.0f64.sqrt() * 3.0;
        let mut pts = Vec::new();
        for (cx, cy) in [(0.0, 0.0), (6.0, 0.0), (3.0, h)] {
            for (dx, dy) in [(0.0, 0.0), (0.05, 0.0), (0.0, 0.05)] {
                pts.push([cx + dx, cy + dy]);
            }
        }
        pts.pop(); // 8 points keep the exhaustive oracle below cheap
        let vectors =
            Array2::from_shape_vec((8, 2), pts.iter().flatten().copied().collect()).unwrap();
        let labels = (0..8).map(|i| format!("p{i}")).collect();
        let three = EmbeddingSet::new(vectors, labels).unwrap();
        assert_eq!(elbow_select_k(&three, 5, 3).unwrap(), 3);

        // Oracle: the same decision from exhaustively optimal SSE values.
        let sse: Vec<f64> = (1..=5).map(|k| brute_force_sse(&three, k)).collect();
        let mut best_k = 2;
        let mut best = f64::NEG_INFINITY;
        for k in 2..=4usize {
            let d2 = sse[k - 2] - 2.0 * sse[k - 1] + sse[k];
            if d2 > best {
                best = d2;
                best_k = k;
            }
        }
        assert_eq!(best_k, 3);
    }

    #[test]
    fn degenerate_identical_embeddings_pick_smallest_k() {
        let set = set_1d(&[1.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(elbow_select_k(&set, 4, 0).unwrap(), 2);
    }

    #[test]
    fn kmeans_rejects_bad_k() {
        let set = set_1d(&[0.0, 1.0]);
        assert!(kmeans_cluster(&set, 0, 0).is_err());
        assert!(kmeans_cluster(&set, 3, 0).is_err());
    }

    #[test]
    fn representatives_use_most_frequent_label() {
        let vectors = arr2(&[[0.0], [0.1], [0.2], [9.0]]);
        let labels = vec!["walk".into(), "walk".into(), "run".into(), "jump".into()];
        let set = EmbeddingSet::new(vectors, labels).unwrap();
        let r = kmeans_cluster(&set, 2, 1).unwrap();
        let mut reps = r.representatives.clone();
        reps.sort();
        assert_eq!(reps, vec!["jump".to_string(), "walk".to_string()]);
    }

    #[test]
    fn fixture_counts() {
        let ntu = fixtures::ntu74();
        assert_eq!(ntu.len(), 74);
        assert_eq!(ntu.count(ConceptCategory::Spatial), 52);
        assert_eq!(ntu.count(ConceptCategory::Temporal), 21);
        assert_eq!(ntu.count(ConceptCategory::Interaction), 1);
        assert!(ntu.is_block_ordered());

        let desk = fixtures::desk67();
        assert_eq!(desk.len(), 67);
        assert_eq!(desk.count(ConceptCategory::Spatial), 51);
        assert_eq!(desk.count(ConceptCategory::Temporal), 15);
        assert_eq!(desk.count(ConceptCategory::Interaction), 1);
        assert!(desk.is_block_ordered());
    }

    #[test]
    fn shipped_fixture_files_are_canonical() {
        assert_eq!(fixtures::NTU74_JSON, vocabulary_to_json(&fixtures::ntu74()));
        assert_eq!(fixtures::DESK67_JSON, vocabulary_to_json(&fixtures::desk67()));
        let v = fixtures::fixture_vocabulary("ntu74").unwrap();
        assert_eq!(v, fixtures::ntu74());
    }

    #[test]
    fn vocabulary_validation_errors() {
        let mut concepts = fixtures::ntu74().concepts().to_vec();
        concepts[1].name = concepts[0].name.clone();
        let err = ConceptVocabulary::new(concepts).unwrap_err();
        assert!(err.to_string().contains("duplicate concept name"));

        let bad_part = vec![Concept {
            id: 0,
            name: "x".into(),
            category: ConceptCategory::Spatial,
            part: BodyPart::None,
        }];
        assert!(ConceptVocabulary::new(bad_part).is_err());

        let bad_temporal = vec![Concept {
            id: 0,
            name: "x".into(),
            category: ConceptCategory::Temporal,
            part: BodyPart::Leg,
        }];
        assert!(ConceptVocabulary::new(bad_temporal).is_err());

        let gap = vec![Concept {
            id: 1,
            name: "x".into(),
            category: ConceptCategory::Temporal,
            part: BodyPart::None,
        }];
        assert!(ConceptVocabulary::new(gap).is_err());
    }

    #[test]
    fn unknown_category_is_a_schema_error() {
        let text = r#"{"schema_version":1,"concepts":[{"id":0,"name":"x","category":"spectral","part":"none"}]}"#;
        let err = vocabulary_from_json(text, "inline").unwrap_err();
        assert!(matches!(err, Error::Schema { .. }));
    }

    #[test]
    fn matrix_rejects_empty_rows_and_binds_to_vocabulary() {
        let vocab = fixtures::desk67();
        let err = AssociationMatrix::new(
            vec!["A".into()],
            vocab.names(),
            vec![vec![0; vocab.len()]],
        )
        .unwrap_err();
        assert!(err.to_string().contains("no associated concepts"));

        let mut row = vec![0u8; vocab.len()];
        row[3] = 1;
        let m = AssociationMatrix::new(vec!["A".into()], vocab.names(), vec![row]).unwrap();
        m.bind(&vocab).unwrap();
        assert!(m.bind(&fixtures::ntu74()).is_err());
    }

    #[test]
    fn demo_records_build_unique_signatures() {
        let vocab = fixtures::ntu74();
        let file: RecordsFile = serde_json::from_str(fixtures::DEMO_RECORDS_JSON).unwrap();
        let m = build_association_matrix(&vocab, &file.actions, &file.records).unwrap();
        assert!(check_signature_uniqueness(&m).is_empty());

        // The glasses pair is separated only by motion direction.
        let wear = file.actions.iter().position(|a| a == "WearGlasses").unwrap();
        let takeoff = file.actions.iter().position(|a| a == "TakeOffGlasses").unwrap();
        let diff: Vec<usize> = (0..vocab.len())
            .filter(|&c| m.rows[wear][c] != m.rows[takeoff][c])
            .collect();
        assert_eq!(diff.len(), 2);
        let names: Vec<&str> = diff.iter().map(|&c| vocab.concepts()[c].name.as_str()).collect();
        assert!(names.contains(&"motion_upward"));
        assert!(names.contains(&"motion_downward"));
    }

    #[test]
    fn duplicate_signatures_are_reported_in_pairs() {
        let vocab = fixtures::desk67();
        let mut row = vec![0u8; vocab.len()];
        row[0] = 1;
        row[5] = 1;
        let m = AssociationMatrix::new(
            vec!["A".into(), "B".into(), "C".into()],
            vocab.names(),
            vec![row.clone(), vec![0, 1].into_iter().chain(vec![0; vocab.len() - 2]).collect(), row],
        )
        .unwrap();
        assert_eq!(check_signature_uniqueness(&m), vec![(0, 2)]);
    }

    #[test]
    fn build_rejects_unknown_names() {
        let vocab = fixtures::ntu74();
        let actions = vec!["Jump".to_string()];
        let bad_concept = vec![ActionRecord {
            action: "Jump".into(),
            concepts: vec!["leg_teleport".into()],
        }];
        let err = build_association_matrix(&vocab, &actions, &bad_concept).unwrap_err();
        assert!(err.to_string().contains("leg_teleport"));

        let bad_action = vec![ActionRecord {
            action: "Fly".into(),
            concepts: vec!["leg_jump".into()],
        }];
        let err = build_association_matrix(&vocab, &actions, &bad_action).unwrap_err();
        assert!(err.to_string().contains("Fly"));
    }

    /// Rewrites the bundled vocabulary fixtures from their builders. Run
    /// explicitly after editing the concept lists:
    /// `cargo test -p reason-core regenerate_fixture_files -- --ignored`
    #[test]
    #[ignore]
    fn regenerate_fixture_files() {
        let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
        std::fs::write(
            dir.join("ntu74_vocabulary.json"),
            vocabulary_to_json(&fixtures::ntu74()),
        )
        .unwrap();
        std::fs::write(
            dir.join("desk67_vocabulary.json"),
            vocabulary_to_json(&fixtures::desk67()),
        )
        .unwrap();
    }

    #[test]
    fn vocabulary_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        let vocab = fixtures::ntu74();
        save_vocabulary(&vocab, &path).unwrap();
        let loaded = load_vocabulary(&path).unwrap();
        assert_eq!(loaded, vocab);
        // Canonical file content is reproduced byte for byte.
        let bytes = std::fs::read(&path).unwrap();
        save_vocabulary(&loaded, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
    }

    #[test]
    fn matrix_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("matrix.json");
        let vocab = fixtures::ntu74();
        let file: RecordsFile = serde_json::from_str(fixtures::DEMO_RECORDS_JSON).unwrap();
        let m = build_association_matrix(&vocab, &file.actions, &file.records).unwrap();
        save_matrix(&m, &path).unwrap();
        let loaded = load_matrix(&path).unwrap();
        assert_eq!(loaded, m);
    }
}
