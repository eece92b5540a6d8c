//! Central-difference verification of every differentiable component.
//!
//! Each named component builds a small scalar-valued computation with
//! seeded leaves, then compares tape gradients against central
//! differences at a fixed set of probe coordinates. These run from the
//! command line as a diagnostics pass and in the test suite as a gate.

use crate::autodiff::{NodeId, Tape};
use crate::decoder::{self, ConceptCounts, DecoderConfig, DecoderParams};
use crate::error::{Error, Result};
use crate::logic::{LogicConfig, LogicNetwork};
use crate::rng;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;

const FD_STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-5;
const PROBES_PER_LEAF: usize = 10;

#[derive(Debug, Clone)]
pub struct ComponentReport {
    pub component: String,
    pub max_rel_err: f64,
    pub probes: usize,
    pub pass: bool,
}

fn seeded(shape: &[usize], lo: f64, hi: f64, seed: u64, name: &str) -> ArrayD<f64> {
    let mut r = rng::stream(seed, &format!("gradcheck/{name}"));
    ArrayD::from_shape_fn(IxDyn(shape), |_| lo + (hi - lo) * r.gen::<f64>())
}

/// Runs one component: builds the computation at the base point and at
/// shifted points, comparing analytic and numeric derivatives.
fn check(
    component: &str,
    leaves: Vec<ArrayD<f64>>,
    build: impl Fn(&mut Tape, &[NodeId]) -> NodeId,
) -> ComponentReport {
    let eval = |points: &[ArrayD<f64>]| -> (f64, Vec<Option<ArrayD<f64>>>) {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = points.iter().map(|p| tape.leaf(p.clone())).collect();
        let root = build(&mut tape, &ids);
        assert!(tape.value(root).ndim() == 0, "gradcheck root must be scalar");
        let value = tape.value(root)[IxDyn(&[])];
        let grads = tape.backward(root);
        let gs = ids.iter().map(|&id| grads.get(id).cloned()).collect();
        (value, gs)
    };

    let (_, grads) = eval(&leaves);
    let mut max_rel = 0.0f64;
    let mut probes = 0usize;
    for (li, leaf) in leaves.iter().enumerate() {
        let n = leaf.len();
        let stride = n.div_ceil(PROBES_PER_LEAF).max(1);
        for k in (0..n).step_by(stride) {
            let mut plus = leaves.clone();
            let mut minus = leaves.clone();
            plus[li].as_slice_mut().unwrap()[k] += FD_STEP;
            minus[li].as_slice_mut().unwrap()[k] -= FD_STEP;
            let (vp, _) = eval(&plus);
            let (vm, _) = eval(&minus);
            let fd = (vp - vm) / (2.0 * FD_STEP);
            let an = grads[li]
                .as_ref()
                .map(|g| g.as_slice().unwrap()[k])
                .unwrap_or(0.0);
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1.0);
            max_rel = max_rel.max(rel);
            probes += 1;
        }
    }
    ComponentReport {
        component: component.to_string(),
        max_rel_err: max_rel,
        probes,
        pass: max_rel < REL_TOL,
    }
}

pub const COMPONENTS: &[&str] = &[
    "attention",
    "layer_norm",
    "ffn",
    "group_fc",
    "sigmoid_bce",
    "divergence",
    "decoder",
    "soft_logic",
    "alignment",
    "classifier_ce",
];

pub fn run_component(name: &str, seed: u64) -> Result<ComponentReport> {
    let report = match name {
        "attention" => {
            let q = seeded(&[2, 4], -1.0, 1.0, seed, "attention/q");
            let x = seeded(&[5, 4], -1.0, 1.0, seed, "attention/x");
            check("attention", vec![q, x], |t, ids| {
                let xt = t.transpose(ids[1]);
                let scores = t.matmul(ids[0], xt);
                let scaled = t.scale(scores, 0.5);
                let attn = t.row_softmax(scaled);
                let out = t.matmul(attn, ids[1]);
                let s = t.sigmoid(out);
                t.sum_all(s)
            })
        }
        "layer_norm" => {
            let x = seeded(&[3, 6], -2.0, 2.0, seed, "ln/x");
            let gamma = seeded(&[6], 0.5, 1.5, seed, "ln/gamma");
            let beta = seeded(&[6], -0.5, 0.5, seed, "ln/beta");
            check("layer_norm", vec![x, gamma, beta], |t, ids| {
                let y = t.layer_norm_rows(ids[0], ids[1], ids[2], 1e-5);
                let s = t.sigmoid(y);
                t.sum_all(s)
            })
        }
        "ffn" => {
            let x = seeded(&[3, 4], -1.0, 1.0, seed, "ffn/x");
            let w1 = seeded(&[4, 6], -0.7, 0.7, seed, "ffn/w1");
            let b1 = seeded(&[6], -0.2, 0.2, seed, "ffn/b1");
            let w2 = seeded(&[6, 4], -0.7, 0.7, seed, "ffn/w2");
            let b2 = seeded(&[4], -0.2, 0.2, seed, "ffn/b2");
            check("ffn", vec![x, w1, b1, w2, b2], |t, ids| {
                let h = t.matmul(ids[0], ids[1]);
                let h = t.add_row(h, ids[2]);
                let h = t.relu(h);
                let y = t.matmul(h, ids[3]);
                let y = t.add_row(y, ids[4]);
                let r = t.add(ids[0], y);
                let s = t.sigmoid(r);
                t.sum_all(s)
            })
        }
        "group_fc" => {
            let u = seeded(&[3, 4], -1.0, 1.0, seed, "groupfc/u");
            let w = seeded(&[3, 4, 2], -1.0, 1.0, seed, "groupfc/w");
            let b = seeded(&[6], -0.3, 0.3, seed, "groupfc/b");
            check("group_fc", vec![u, w, b], |t, ids| {
                let flat = t.block_dot(ids[0], ids[1]);
                let flat = t.add(flat, ids[2]);
                let s = t.sigmoid(flat);
                t.sum_all(s)
            })
        }
        "sigmoid_bce" => {
            let logits = seeded(&[7], -2.0, 2.0, seed, "bce/logits");
            let target = seeded(&[7], 0.0, 1.0, seed, "bce/target")
                .mapv(|v| f64::from(v > 0.5));
            check("sigmoid_bce", vec![logits], move |t, ids| {
                let p = t.sigmoid(ids[0]);
                t.bce_mean(p, target.clone())
            })
        }
        "divergence" => {
            let f = seeded(&[3, 4, 5], -1.0, 1.0, seed, "div/f");
            check("divergence", vec![f], |t, ids| {
                let pooled = t.part_pool(ids[0], vec![vec![0, 2], vec![1], vec![3]]);
                t.relu_cos_pairs_mean(pooled)
            })
        }
        "decoder" => {
            let cfg = DecoderConfig {
                dim: 4,
                hidden: 5,
                spatial_groups: 2,
                temporal_groups: 2,
                heads: 2,
            };
            let counts = ConceptCounts { spatial: 3, signal: 2 };
            let params = DecoderParams::init(&cfg, counts, seed).unwrap();
            let feats = seeded(&[3, 4, 4], -1.0, 1.0, seed, "decoder/features");
            let target = vec![1u8, 0, 1, 0, 1];
            // Leaves are the branch tensors in visitor order (spatial then
            // temporal); the feature tensor stays fixed.
            let mut leaves = Vec::new();
            params.for_each(&mut |_, tns| leaves.push((**tns).clone()));
            check("decoder", leaves, move |t, ids| {
                build_decoder_loss(t, &cfg, counts, ids, &feats, &target)
            })
        }
        "soft_logic" => {
            let net = LogicNetwork::init(
                LogicConfig { layers: 2, width: 3, skip: true, negation: true },
                3,
                seed,
            )
            .unwrap();
            let p = seeded(&[6], 0.05, 0.95, seed, "logic/p");
            let mut leaves = vec![p];
            net.for_each(&mut |_, w| leaves.push((**w).clone()));
            let cfg = net.config.clone();
            check("soft_logic", leaves, move |t, ids| {
                let r = build_soft_logic(t, &cfg, ids);
                let s = t.sigmoid(r);
                t.sum_all(s)
            })
        }
        "alignment" => {
            let pooled = seeded(&[4, 5], -1.0, 1.0, seed, "align/pooled");
            let texts = seeded(&[4, 3], -1.0, 1.0, seed, "align/texts");
            let fw = seeded(&[5, 4], -0.6, 0.6, seed, "align/fw");
            let fb = seeded(&[4], -0.2, 0.2, seed, "align/fb");
            let tw = seeded(&[3, 4], -0.6, 0.6, seed, "align/tw");
            let tb = seeded(&[4], -0.2, 0.2, seed, "align/tb");
            let lt = ArrayD::from_elem(IxDyn(&[]), 0.07f64.ln());
            check(
                "alignment",
                vec![pooled, texts, fw, fb, tw, tb, lt],
                |t, ids| {
                    let u = t.matmul(ids[0], ids[2]);
                    let u = t.add_row(u, ids[3]);
                    let u = t.row_normalize(u, 1e-12);
                    let v = t.matmul(ids[1], ids[4]);
                    let v = t.add_row(v, ids[5]);
                    let v = t.row_normalize(v, 1e-12);
                    let vt = t.transpose(v);
                    let sims = t.matmul(u, vt);
                    let neg = t.scale(ids[6], -1.0);
                    let inv_tau = t.exp(neg);
                    let logits = t.scale_by_node(sims, inv_tau);
                    t.ce_rows_mean(logits, vec![0, 1, 2, 3])
                },
            )
        }
        "classifier_ce" => {
            let w = seeded(&[3, 8], -0.8, 0.8, seed, "cls/w");
            let b = seeded(&[3], -0.2, 0.2, seed, "cls/b");
            let r = seeded(&[8], 0.0, 1.0, seed, "cls/r").mapv(|v| f64::from(v > 0.5));
            check("classifier_ce", vec![w, b], move |t, ids| {
                let rn = t.leaf(r.clone());
                let s = t.matvec(ids[0], rn);
                let s = t.add(s, ids[1]);
                let rows = t.reshape(s, &[1, 3]);
                t.ce_rows_mean(rows, vec![1])
            })
        }
        other => {
            return Err(Error::validation(format!(
                "unknown gradcheck component '{other}'; known: {}",
                COMPONENTS.join(", ")
            )))
        }
    };
    Ok(report)
}

/// Decoder branch pass wired to explicit leaf ids, visitor order, both
/// branches, ending in the concept loss.
fn build_decoder_loss(
    t: &mut Tape,
    cfg: &DecoderConfig,
    counts: ConceptCounts,
    ids: &[NodeId],
    feats: &ArrayD<f64>,
    target: &[u8],
) -> NodeId {
    let f = t.leaf(feats.clone());
    let spatial_mean = t.mean_axis(f, 0);
    let temporal_mean = t.mean_axis(f, 1);
    let ls = branch_from_ids(t, cfg, &ids[0..11], spatial_mean, counts.spatial);
    let lt = branch_from_ids(t, cfg, &ids[11..22], temporal_mean, counts.signal);
    let logits = t.concat_vec(&[ls, lt]);
    let chat = t.sigmoid(logits);
    decoder::concept_loss(t, chat, target)
}

fn branch_from_ids(
    t: &mut Tape,
    cfg: &DecoderConfig,
    ids: &[NodeId],
    input: NodeId,
    emit: usize,
) -> NodeId {
    // Visitor order: queries, ln1 pair, ffn quad, ln2 pair, group pair.
    let [queries, ln1_g, ln1_b, w1, b1, w2, b2, ln2_g, ln2_b, gw, gb] = ids else {
        panic!("branch tensor count");
    };
    let dh = cfg.dim / cfg.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::new();
    for h in 0..cfg.heads {
        let q = t.slice_cols(*queries, h * dh, dh);
        let x = t.slice_cols(input, h * dh, dh);
        let xt = t.transpose(x);
        let s = t.matmul(q, xt);
        let s = t.scale(s, scale);
        let a = t.row_softmax(s);
        heads.push(t.matmul(a, x));
    }
    let attended = if cfg.heads == 1 { heads[0] } else { t.concat_cols(&heads) };
    let res = t.add(*queries, attended);
    let u = t.layer_norm_rows(res, *ln1_g, *ln1_b, 1e-5);
    let mid = t.matmul(u, *w1);
    let mid = t.add_row(mid, *b1);
    let mid = t.relu(mid);
    let back = t.matmul(mid, *w2);
    let back = t.add_row(back, *b2);
    let res2 = t.add(u, back);
    let u2 = t.layer_norm_rows(res2, *ln2_g, *ln2_b, 1e-5);
    let flat = t.block_dot(u2, *gw);
    let flat = t.add(flat, *gb);
    t.slice_vec(flat, 0, emit)
}

/// Soft switchboard pass over leaf ids: predicates first, then per layer
/// the conjunction and disjunction weights.
fn build_soft_logic(t: &mut Tape, cfg: &LogicConfig, ids: &[NodeId]) -> NodeId {
    let predicates = ids[0];
    let mut input = predicates;
    let mut bands = Vec::new();
    for l in 0..cfg.layers {
        let wa = ids[1 + 2 * l];
        let wo = ids[2 + 2 * l];
        let a = t.soft_and(wa, input);
        let b = t.soft_or(wo, input);
        bands.push((a, b));
        input = if cfg.skip {
            t.concat_vec(&[a, b, predicates])
        } else {
            t.concat_vec(&[a, b])
        };
    }
    if cfg.skip {
        let mut parts = vec![predicates];
        for (a, b) in &bands {
            parts.push(*a);
            parts.push(*b);
        }
        t.concat_vec(&parts)
    } else {
        let (a, b) = *bands.last().unwrap();
        t.concat_vec(&[a, b])
    }
}

pub fn run_all(seed: u64) -> Result<Vec<ComponentReport>> {
    COMPONENTS.iter().map(|c| run_component(c, seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_component_passes() {
        for report in run_all(17).unwrap() {
            assert!(
                report.pass,
                "{}: max rel err {} over {} probes",
                report.component, report.max_rel_err, report.probes
            );
            assert!(report.probes > 0);
        }
    }

    #[test]
    fn unknown_component_is_rejected() {
        assert!(run_component("warp_drive", 0).is_err());
    }

    #[test]
    fn reports_are_seed_stable() {
        let a = run_component("attention", 3).unwrap();
        let b = run_component("attention", 3).unwrap();
        assert_eq!(a.max_rel_err, b.max_rel_err);
    }
}
