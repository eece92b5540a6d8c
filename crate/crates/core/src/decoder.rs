//! Feature-to-concept decoder.
//!
//! Two branches share one shape of machinery. The spatial branch averages
//! the feature tensor over frames and attends over joints; the temporal
//! branch averages over joints and attends over frames. Each branch runs
//! parameter-free cross-attention from a small set of learnable group
//! queries (no key/value projections, scores are scaled dot products with
//! the input rows), a residual layer norm, a two-layer feed-forward block
//! with its own residual layer norm, and a group-local linear read-out
//! where group g's logits see only group g's descriptor. Spatial concepts
//! come from the spatial branch; temporal and interaction concepts from
//! the temporal branch. Sigmoid of the concatenated logits is the concept
//! activation vector.

use crate::autodiff::{NodeId, Tape};
use crate::concept_bank::{BodyPart, ConceptCategory, ConceptVocabulary};
use crate::error::{Error, Result};
use crate::rng;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    /// Channel width of the input features and of every descriptor.
    pub dim: usize,
    /// Feed-forward hidden width.
    pub hidden: usize,
    pub spatial_groups: usize,
    pub temporal_groups: usize,
    /// Channel-split attention heads; scores scale by sqrt(dim / heads).
    pub heads: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig { dim: 32, hidden: 64, spatial_groups: 8, temporal_groups: 4, heads: 1 }
    }
}

/// How many concepts each branch emits. `signal` covers temporal plus
/// interaction concepts; the vocabulary's block order keeps the
/// concatenated logits aligned with concept ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConceptCounts {
    pub spatial: usize,
    pub signal: usize,
}

impl ConceptCounts {
    pub fn of(vocab: &ConceptVocabulary) -> Result<Self> {
        if !vocab.is_block_ordered() {
            return Err(Error::validation(
                "vocabulary must list spatial, then temporal, then interaction concepts",
            ));
        }
        let spatial = vocab.count(ConceptCategory::Spatial);
        let signal = vocab.len() - spatial;
        if spatial == 0 || signal == 0 {
            return Err(Error::validation(
                "decoder needs at least one spatial and one temporal/interaction concept",
            ));
        }
        Ok(ConceptCounts { spatial, signal })
    }

    pub fn total(&self) -> usize {
        self.spatial + self.signal
    }
}

impl DecoderConfig {
    pub fn validate(&self, counts: ConceptCounts) -> Result<()> {
        if self.dim == 0 || self.hidden == 0 {
            return Err(Error::validation("decoder dim and hidden must be positive"));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::validation(format!(
                "heads = {} must divide dim = {}",
                self.heads, self.dim
            )));
        }
        if self.spatial_groups == 0 || self.temporal_groups == 0 {
            return Err(Error::validation("group counts must be positive"));
        }
        let _ = counts;
        Ok(())
    }

    /// Read-out width per group, rounded up so every concept has a slot.
    pub fn spatial_slot(&self, counts: ConceptCounts) -> usize {
        counts.spatial.div_ceil(self.spatial_groups)
    }

    pub fn temporal_slot(&self, counts: ConceptCounts) -> usize {
        counts.signal.div_ceil(self.temporal_groups)
    }
}

/// One branch's tensors. Group read-out weights have shape
/// (groups, dim, slot); everything else is conventional.
#[derive(Debug, Clone)]
pub struct BranchParams {
    pub queries: Arc<ArrayD<f64>>,
    pub ln1_gamma: Arc<ArrayD<f64>>,
    pub ln1_beta: Arc<ArrayD<f64>>,
    pub ffn_w1: Arc<ArrayD<f64>>,
    pub ffn_b1: Arc<ArrayD<f64>>,
    pub ffn_w2: Arc<ArrayD<f64>>,
    pub ffn_b2: Arc<ArrayD<f64>>,
    pub ln2_gamma: Arc<ArrayD<f64>>,
    pub ln2_beta: Arc<ArrayD<f64>>,
    pub group_w: Arc<ArrayD<f64>>,
    pub group_b: Arc<ArrayD<f64>>,
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub spatial: BranchParams,
    pub temporal: BranchParams,
}

fn gaussian(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Arc<ArrayD<f64>> {
    Arc::new(ArrayD::from_shape_fn(IxDyn(shape), |_| {
        scale * rng.sample::<f64, _>(StandardNormal)
    }))
}

fn constant(shape: &[usize], value: f64) -> Arc<ArrayD<f64>> {
    Arc::new(ArrayD::from_elem(IxDyn(shape), value))
}

fn init_branch(
    cfg: &DecoderConfig,
    groups: usize,
    slot: usize,
    seed: u64,
    prefix: &str,
) -> BranchParams {
    let d = cfg.dim;
    let h = cfg.hidden;
    let draw = |name: &str, shape: &[usize], fan_in: usize| {
        let mut rng = rng::stream(seed, &format!("init/decoder/{prefix}/{name}"));
        gaussian(&mut rng, shape, 1.0 / (fan_in as f64).sqrt())
    };
    BranchParams {
        queries: draw("queries", &[groups, d], d),
        ln1_gamma: constant(&[d], 1.0),
        ln1_beta: constant(&[d], 0.0),
        ffn_w1: draw("ffn_w1", &[d, h], d),
        ffn_b1: constant(&[h], 0.0),
        ffn_w2: draw("ffn_w2", &[h, d], h),
        ffn_b2: constant(&[d], 0.0),
        ln2_gamma: constant(&[d], 1.0),
        ln2_beta: constant(&[d], 0.0),
        group_w: draw("group_w", &[groups, d, slot], d),
        group_b: constant(&[groups * slot], 0.0),
    }
}

impl DecoderParams {
    pub fn init(cfg: &DecoderConfig, counts: ConceptCounts, seed: u64) -> Result<Self> {
        cfg.validate(counts)?;
        Ok(DecoderParams {
            spatial: init_branch(
                cfg,
                cfg.spatial_groups,
                cfg.spatial_slot(counts),
                seed,
                "spatial",
            ),
            temporal: init_branch(
                cfg,
                cfg.temporal_groups,
                cfg.temporal_slot(counts),
                seed,
                "temporal",
            ),
        })
    }

    /// Tensor names mirror the init streams so checkpoints and optimizer
    /// state key the same way.
    pub fn for_each(&self, f: &mut dyn FnMut(&str, &Arc<ArrayD<f64>>)) {
        for (prefix, b) in [("spatial", &self.spatial), ("temporal", &self.temporal)] {
            f(&format!("decoder/{prefix}/queries"), &b.queries);
            f(&format!("decoder/{prefix}/ln1_gamma"), &b.ln1_gamma);
            f(&format!("decoder/{prefix}/ln1_beta"), &b.ln1_beta);
            f(&format!("decoder/{prefix}/ffn_w1"), &b.ffn_w1);
            f(&format!("decoder/{prefix}/ffn_b1"), &b.ffn_b1);
            f(&format!("decoder/{prefix}/ffn_w2"), &b.ffn_w2);
            f(&format!("decoder/{prefix}/ffn_b2"), &b.ffn_b2);
            f(&format!("decoder/{prefix}/ln2_gamma"), &b.ln2_gamma);
            f(&format!("decoder/{prefix}/ln2_beta"), &b.ln2_beta);
            f(&format!("decoder/{prefix}/group_w"), &b.group_w);
            f(&format!("decoder/{prefix}/group_b"), &b.group_b);
        }
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut Arc<ArrayD<f64>>)) {
        for (prefix, b) in [
            ("spatial", &mut self.spatial),
            ("temporal", &mut self.temporal),
        ] {
            f(&format!("decoder/{prefix}/queries"), &mut b.queries);
            f(&format!("decoder/{prefix}/ln1_gamma"), &mut b.ln1_gamma);
            f(&format!("decoder/{prefix}/ln1_beta"), &mut b.ln1_beta);
            f(&format!("decoder/{prefix}/ffn_w1"), &mut b.ffn_w1);
            f(&format!("decoder/{prefix}/ffn_b1"), &mut b.ffn_b1);
            f(&format!("decoder/{prefix}/ffn_w2"), &mut b.ffn_w2);
            f(&format!("decoder/{prefix}/ffn_b2"), &mut b.ffn_b2);
            f(&format!("decoder/{prefix}/ln2_gamma"), &mut b.ln2_gamma);
            f(&format!("decoder/{prefix}/ln2_beta"), &mut b.ln2_beta);
            f(&format!("decoder/{prefix}/group_w"), &mut b.group_w);
            f(&format!("decoder/{prefix}/group_b"), &mut b.group_b);
        }
    }
}

/// Branch parameter leaves on a tape, so gradients can be read back by name.
pub struct BranchNodes {
    pub queries: NodeId,
    pub ln1_gamma: NodeId,
    pub ln1_beta: NodeId,
    pub ffn_w1: NodeId,
    pub ffn_b1: NodeId,
    pub ffn_w2: NodeId,
    pub ffn_b2: NodeId,
    pub ln2_gamma: NodeId,
    pub ln2_beta: NodeId,
    pub group_w: NodeId,
    pub group_b: NodeId,
}

impl BranchNodes {
    fn leaves(tape: &mut Tape, p: &BranchParams) -> Self {
        BranchNodes {
            queries: tape.leaf_shared(p.queries.clone()),
            ln1_gamma: tape.leaf_shared(p.ln1_gamma.clone()),
            ln1_beta: tape.leaf_shared(p.ln1_beta.clone()),
            ffn_w1: tape.leaf_shared(p.ffn_w1.clone()),
            ffn_b1: tape.leaf_shared(p.ffn_b1.clone()),
            ffn_w2: tape.leaf_shared(p.ffn_w2.clone()),
            ffn_b2: tape.leaf_shared(p.ffn_b2.clone()),
            ln2_gamma: tape.leaf_shared(p.ln2_gamma.clone()),
            ln2_beta: tape.leaf_shared(p.ln2_beta.clone()),
            group_w: tape.leaf_shared(p.group_w.clone()),
            group_b: tape.leaf_shared(p.group_b.clone()),
        }
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, NodeId)> {
        vec![
            (format!("decoder/{prefix}/queries"), self.queries),
            (format!("decoder/{prefix}/ln1_gamma"), self.ln1_gamma),
            (format!("decoder/{prefix}/ln1_beta"), self.ln1_beta),
            (format!("decoder/{prefix}/ffn_w1"), self.ffn_w1),
            (format!("decoder/{prefix}/ffn_b1"), self.ffn_b1),
            (format!("decoder/{prefix}/ffn_w2"), self.ffn_w2),
            (format!("decoder/{prefix}/ffn_b2"), self.ffn_b2),
            (format!("decoder/{prefix}/ln2_gamma"), self.ln2_gamma),
            (format!("decoder/{prefix}/ln2_beta"), self.ln2_beta),
            (format!("decoder/{prefix}/group_w"), self.group_w),
            (format!("decoder/{prefix}/group_b"), self.group_b),
        ]
    }
}

pub struct DecoderOut {
    /// Sigmoid concept activations, length = vocabulary size.
    pub chat: NodeId,
    pub logits: NodeId,
    /// Time-mean features (joints, dim), input to the spatial branch.
    pub spatial_mean: NodeId,
    /// Joint-mean features (frames, dim), input to the temporal branch.
    pub temporal_mean: NodeId,
    pub spatial_nodes: BranchNodes,
    pub temporal_nodes: BranchNodes,
}

fn branch_forward(
    tape: &mut Tape,
    cfg: &DecoderConfig,
    nodes: &BranchNodes,
    input_rows: NodeId,
    emit: usize,
) -> NodeId {
    let dh = cfg.dim / cfg.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut head_outs = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let q = tape.slice_cols(nodes.queries, h * dh, dh);
        let x = tape.slice_cols(input_rows, h * dh, dh);
        let xt = tape.transpose(x);
        let scores = tape.matmul(q, xt);
        let scores = tape.scale(scores, scale);
        let attn = tape.row_softmax(scores);
        head_outs.push(tape.matmul(attn, x));
    }
    let attended = if cfg.heads == 1 {
        head_outs[0]
    } else {
        tape.concat_cols(&head_outs)
    };
    let res = tape.add(nodes.queries, attended);
    let u = tape.layer_norm_rows(res, nodes.ln1_gamma, nodes.ln1_beta, LN_EPS);

    let mid = tape.matmul(u, nodes.ffn_w1);
    let mid = tape.add_row(mid, nodes.ffn_b1);
    let mid = tape.relu(mid);
    let back = tape.matmul(mid, nodes.ffn_w2);
    let back = tape.add_row(back, nodes.ffn_b2);
    let res2 = tape.add(u, back);
    let u2 = tape.layer_norm_rows(res2, nodes.ln2_gamma, nodes.ln2_beta, LN_EPS);

    let flat = tape.block_dot(u2, nodes.group_w);
    let flat = tape.add(flat, nodes.group_b);
    tape.slice_vec(flat, 0, emit)
}

/// Runs both branches on one sample's feature tensor (frames, joints, dim).
pub fn forward(
    tape: &mut Tape,
    cfg: &DecoderConfig,
    counts: ConceptCounts,
    params: &DecoderParams,
    features: Arc<ArrayD<f64>>,
) -> DecoderOut {
    let f = tape.leaf_shared(features);
    let spatial_mean = tape.mean_axis(f, 0);
    let temporal_mean = tape.mean_axis(f, 1);

    let spatial_nodes = BranchNodes::leaves(tape, &params.spatial);
    let temporal_nodes = BranchNodes::leaves(tape, &params.temporal);

    let ls = branch_forward(tape, cfg, &spatial_nodes, spatial_mean, counts.spatial);
    let lt = branch_forward(tape, cfg, &temporal_nodes, temporal_mean, counts.signal);
    let logits = tape.concat_vec(&[ls, lt]);
    let chat = tape.sigmoid(logits);
    DecoderOut { chat, logits, spatial_mean, temporal_mean, spatial_nodes, temporal_nodes }
}

/// Binary cross-entropy of the activations against a planted concept
/// vector, mean over concepts.
pub fn concept_loss(tape: &mut Tape, chat: NodeId, target: &[u8]) -> NodeId {
    let t = ArrayD::from_shape_vec(
        IxDyn(&[target.len()]),
        target.iter().map(|&b| f64::from(b)).collect(),
    )
    .unwrap();
    tape.bce_mean(chat, t)
}

/// Joint index lists per body part, in part declaration order. Parts with
/// no joints are dropped.
pub fn part_joint_lists(part_map: &[BodyPart]) -> Vec<Vec<usize>> {
    BodyPart::PARTS
        .iter()
        .map(|p| {
            part_map
                .iter()
                .enumerate()
                .filter(|(_, q)| *q == p)
                .map(|(j, _)| j)
                .collect::<Vec<_>>()
        })
        .filter(|joints: &Vec<usize>| !joints.is_empty())
        .collect()
}

/// Mean over ordered part pairs of relu(cosine) between part-pooled
/// feature vectors. Small when parts carry distinct directions.
pub fn part_divergence(features: &ndarray::Array3<f64>, part_map: &[BodyPart]) -> f64 {
    let parts = part_joint_lists(part_map);
    if parts.len() < 2 {
        return 0.0;
    }
    let mut tape = Tape::new();
    let f = tape.leaf(features.clone().into_dyn());
    let pooled = tape.part_pool(f, parts);
    let div = tape.relu_cos_pairs_mean(pooled);
    tape.value(div)[IxDyn(&[])]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concept_bank::Concept;
    use ndarray::Array3;

    fn tiny_setup() -> (DecoderConfig, ConceptCounts, DecoderParams) {
        let cfg = DecoderConfig { dim: 4, hidden: 5, spatial_groups: 2, temporal_groups: 2, heads: 2 };
        let counts = ConceptCounts { spatial: 3, signal: 2 };
        let params = DecoderParams::init(&cfg, counts, 7).unwrap();
        (cfg, counts, params)
    }

    fn tiny_features(seed: u64) -> Arc<ArrayD<f64>> {
        let mut rng = rng::stream(seed, "test/features");
        Arc::new(ArrayD::from_shape_fn(IxDyn(&[3, 4, 4]), |_| {
            rng.sample::<f64, _>(StandardNormal)
        }))
    }

    #[test]
    fn counts_require_block_order_and_both_branches() {
        let vocab = ConceptVocabulary::new(vec![
            Concept {
                id: 0,
                name: "t".into(),
                category: ConceptCategory::Temporal,
                part: BodyPart::None,
            },
            Concept {
                id: 1,
                name: "s".into(),
                category: ConceptCategory::Spatial,
                part: BodyPart::Hand,
            },
        ])
        .unwrap();
        assert!(ConceptCounts::of(&vocab).is_err());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let (cfg, counts, a) = tiny_setup();
        let b = DecoderParams::init(&cfg, counts, 7).unwrap();
        let c = DecoderParams::init(&cfg, counts, 8).unwrap();
        assert_eq!(a.spatial.queries, b.spatial.queries);
        assert_eq!(a.temporal.ffn_w1, b.temporal.ffn_w1);
        assert_ne!(a.spatial.queries, c.spatial.queries);
        // Branches draw from distinct streams.
        assert_ne!(a.spatial.queries.as_slice().unwrap()[0], a.temporal.queries.as_slice().unwrap()[0]);
    }

    #[test]
    fn forward_shapes_and_range() {
        let (cfg, counts, params) = tiny_setup();
        let mut tape = Tape::new();
        let out = forward(&mut tape, &cfg, counts, &params, tiny_features(1));
        let chat = tape.value(out.chat);
        assert_eq!(chat.shape(), &[5]);
        assert!(chat.iter().all(|&c| c > 0.0 && c < 1.0));
        assert_eq!(tape.value(out.spatial_mean).shape(), &[4, 4]);
        assert_eq!(tape.value(out.temporal_mean).shape(), &[3, 4]);
    }

    #[test]
    fn heads_must_divide_dim() {
        let cfg = DecoderConfig { dim: 6, hidden: 4, spatial_groups: 2, temporal_groups: 2, heads: 4 };
        let counts = ConceptCounts { spatial: 2, signal: 2 };
        assert!(DecoderParams::init(&cfg, counts, 0).is_err());
    }

    /// Logits of group g never move when another group's read-out block
    /// changes.
    #[test]
    fn read_out_is_group_local() {
        let (cfg, counts, mut params) = tiny_setup();
        let feats = tiny_features(2);
        let run = |p: &DecoderParams| {
            let mut tape = Tape::new();
            let out = forward(&mut tape, &cfg, counts, p, feats.clone());
            tape.value(out.logits).as_slice().unwrap().to_vec()
        };
        let before = run(&params);
        // Spatial slot width is 2: group 0 owns logits 0..2, group 1 owns 2..3.
        {
            let w = Arc::make_mut(&mut params.spatial.group_w);
            for d in 0..4 {
                for s in 0..2 {
                    w[[1, d, s]] += 0.5;
                }
            }
        }
        let after = run(&params);
        assert_eq!(before[0..2], after[0..2]);
        assert_ne!(before[2], after[2]);
        assert_eq!(before[3..5], after[3..5]);
    }

    /// Central differences over every branch tensor match the tape
    /// gradients of the concept loss.
    #[test]
    fn concept_loss_gradients_match_finite_differences() {
        let (cfg, counts, mut params) = tiny_setup();
        // Move the read-outs off their zero init so the trunk gradients
        // probed below are nonzero.
        let mut rng = rng::stream(9, "test/readout");
        for b in [&mut params.spatial, &mut params.temporal] {
            for w in Arc::make_mut(&mut b.group_w).iter_mut() {
                *w = rng.sample::<f64, _>(StandardNormal);
            }
        }
        let feats = tiny_features(3);
        let target = vec![1u8, 0, 1, 0, 1];

        let loss_of = |p: &DecoderParams| -> f64 {
            let mut tape = Tape::new();
            let out = forward(&mut tape, &cfg, counts, p, feats.clone());
            let loss = concept_loss(&mut tape, out.chat, &target);
            tape.value(loss)[IxDyn(&[])]
        };

        let mut tape = Tape::new();
        let out = forward(&mut tape, &cfg, counts, &params, feats.clone());
        let loss = concept_loss(&mut tape, out.chat, &target);
        let grads = tape.backward(loss);

        let h = 1e-5;
        for (name, node) in out
            .spatial_nodes
            .named("spatial")
            .into_iter()
            .chain(out.temporal_nodes.named("temporal"))
        {
            let g = grads.get(node).cloned().unwrap_or_else(|| {
                ArrayD::zeros(tape.value(node).raw_dim())
            });
            let len = tape.value(node).len();
            // Probe a handful of coordinates per tensor.
            for k in 0..len.min(4) {
                let idx = k * len.div_ceil(4).max(1) % len;
                let probe = |p: &DecoderParams, delta: f64| -> f64 {
                    let mut q = p.clone();
                    q.for_each_mut(&mut |n, t| {
                        if n == name {
                            Arc::make_mut(t).as_slice_mut().unwrap()[idx] += delta;
                        }
                    });
                    loss_of(&q)
                };
                let fd = (probe(&params, h) - probe(&params, -h)) / (2.0 * h);
                let an = g.as_slice().unwrap()[idx];
                let denom = fd.abs().max(an.abs()).max(1.0);
                assert!(
                    ((fd - an) / denom).abs() < 1e-6,
                    "{name}[{idx}]: fd {fd} vs tape {an}"
                );
            }
        }
    }

    #[test]
    fn part_divergence_known_values() {
        // Two joints, two parts, one frame. Orthogonal part features give
        // zero divergence; identical features give one.
        let part_map = vec![BodyPart::Head, BodyPart::Hand];
        let mut f = Array3::<f64>::zeros((1, 2, 2));
        f[[0, 0, 0]] = 1.0;
        f[[0, 1, 1]] = 1.0;
        assert!(part_divergence(&f, &part_map).abs() < 1e-12);

        let mut g = Array3::<f64>::zeros((1, 2, 2));
        g[[0, 0, 0]] = 1.0;
        g[[0, 1, 0]] = 2.0;
        assert!((part_divergence(&g, &part_map) - 1.0).abs() < 1e-12);

        // Opposite directions clamp at zero.
        let mut h = Array3::<f64>::zeros((1, 2, 2));
        h[[0, 0, 0]] = 1.0;
        h[[0, 1, 0]] = -1.0;
        assert!(part_divergence(&h, &part_map).abs() < 1e-12);
    }

    #[test]
    fn part_lists_follow_declaration_order() {
        let map = vec![BodyPart::Leg, BodyPart::Head, BodyPart::Leg, BodyPart::Hand];
        let lists = part_joint_lists(&map);
        assert_eq!(lists, vec![vec![1], vec![3], vec![0, 2]]);
    }
}
