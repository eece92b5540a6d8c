//! Training loop, optimizer, and evaluation.
//!
//! One optimizer step per batch. Every sample gets its own tape: decoder
//! forward, concept loss, straight-through binarization, grafted
//! switchboard, classifier cross-entropy. Gradients accumulate into a
//! name-keyed map in a fixed order, so the result is identical however
//! the work is scheduled. The alignment head trains on a separate
//! batch-level tape; its projections read pooled features as data, which
//! keeps its gradients out of the decoder. Part divergence is measured on
//! the pooled input features and enters the objective as a value.
//!
//! Two schedules gate the early epochs. While the switchboard is frozen
//! it receives no updates of any kind. While the decoder warms up, the
//! task loss reads a detached copy of the activations, so only the
//! concept loss shapes the decoder.

use crate::autodiff::Tape;
use crate::checkpoint::{self, CheckpointMeta};
use crate::concept_bank::BodyPart;
use crate::decoder;
use crate::error::{Error, Result};
use crate::logic;
use crate::model::Model;
use crate::rng;
use crate::rules;
use crate::synthetic::FeatureBatch;
use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Concept supervision weight.
    pub concept: f64,
    /// Alignment weight.
    pub align: f64,
    /// Part divergence weight.
    pub divergence: f64,
    /// Switchboard L1 weight.
    pub sparsity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { concept: 1.0, align: 0.1, divergence: 1.0, sparsity: 1e-6 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Decoder and alignment learning rate.
    pub lr_base: f64,
    /// Switchboard and classifier learning rate.
    pub lr_logic: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Epochs during which the task loss does not reach the decoder.
    pub warmup_detach_epochs: usize,
    /// Epochs during which switchboard and classifier stay untouched.
    pub freeze_logic_epochs: usize,
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 32,
            lr_base: 1e-4,
            lr_logic: 1e-3,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            warmup_detach_epochs: 5,
            freeze_logic_epochs: 15,
            loss_weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::validation("epochs and batch_size must be positive"));
        }
        if self.lr_base <= 0.0 || self.lr_logic <= 0.0 {
            return Err(Error::validation("learning rates must be positive"));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::validation("clip_norm must be positive"));
        }
        let w = &self.loss_weights;
        if w.concept < 0.0 || w.align < 0.0 || w.divergence < 0.0 || w.sparsity < 0.0 {
            return Err(Error::validation("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// Cosine decay over 1-based epochs: 1 at the first epoch, exactly 0 at
/// the last.
pub fn cosine_multiplier(epoch: usize, total: usize) -> f64 {
    debug_assert!(epoch >= 1 && epoch <= total);
    0.5 * (1.0 + (PI * (epoch - 1) as f64 / (total - 1).max(1) as f64).cos())
}

fn logic_group(name: &str) -> bool {
    name.starts_with("logic/") || name.starts_with("classifier/")
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct Moments {
    m: ArrayD<f64>,
    v: ArrayD<f64>,
}

pub struct Optimizer {
    moments: BTreeMap<String, Moments>,
    step: u64,
}

impl Optimizer {
    pub fn new() -> Self {
        Optimizer { moments: BTreeMap::new(), step: 0 }
    }

    /// Decoupled-decay Adam over the accumulated gradients. Frozen tensors
    /// are skipped entirely: no decay, no moment drift. The shared clip
    /// rescales all live gradients by one factor computed from their
    /// global norm. Switchboard weights are clamped back into [0, 1]
    /// after the move.
    pub fn apply(
        &mut self,
        model: &mut Model,
        grads: &mut BTreeMap<String, ArrayD<f64>>,
        cfg: &TrainConfig,
        epoch: usize,
    ) {
        let frozen_logic = epoch <= cfg.freeze_logic_epochs;
        let mult = cosine_multiplier(epoch, cfg.epochs);

        let mut sq = 0.0;
        for (name, g) in grads.iter() {
            if frozen_logic && logic_group(name) {
                continue;
            }
            sq += g.iter().map(|&x| x * x).sum::<f64>();
        }
        let norm = sq.sqrt();
        let scale = if norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };

        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);

        model.for_each_mut(&mut |name, tensor| {
            if frozen_logic && logic_group(name) {
                return;
            }
            let Some(g) = grads.get_mut(name) else { return };
            let lr = mult * if logic_group(name) { cfg.lr_logic } else { cfg.lr_base };
            let t = Arc::make_mut(tensor);
            if cfg.weight_decay > 0.0 {
                t.mapv_inplace(|x| x * (1.0 - lr * cfg.weight_decay));
            }
            let slot = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: ArrayD::zeros(g.raw_dim()),
                v: ArrayD::zeros(g.raw_dim()),
            });
            let (ts, gs) = (t.as_slice_mut().unwrap(), g.as_slice_mut().unwrap());
            let ms = slot.m.as_slice_mut().unwrap();
            let vs = slot.v.as_slice_mut().unwrap();
            for i in 0..ts.len() {
                let gi = gs[i] * scale;
                ms[i] = BETA1 * ms[i] + (1.0 - BETA1) * gi;
                vs[i] = BETA2 * vs[i] + (1.0 - BETA2) * gi * gi;
                let mhat = ms[i] / bc1;
                let vhat = vs[i] / bc2;
                ts[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
            if name.starts_with("logic/") {
                t.mapv_inplace(|x| x.clamp(0.0, 1.0));
            }
        });
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean feature vector of one sample over frames and joints.
pub fn pooled_feature(features: &ndarray::Array3<f64>) -> Array1<f64> {
    let (t, v, d) = (features.shape()[0], features.shape()[1], features.shape()[2]);
    let mut out = Array1::zeros(d);
    for ti in 0..t {
        for vi in 0..v {
            for di in 0..d {
                out[di] += features[[ti, vi, di]];
            }
        }
    }
    out / (t * v) as f64
}

/// Contrastive alignment over one batch: pooled features and the text
/// embeddings of the sample labels project into a shared space, rows are
/// normalized, and each row's own column is the positive. Returns the
/// loss value and the gradient contributions for the alignment tensors,
/// already weighted.
fn align_loss_and_grads(
    model: &Model,
    pooled: &Array2<f64>,
    texts: &Array2<f64>,
    weight: f64,
    grads: &mut BTreeMap<String, ArrayD<f64>>,
) -> f64 {
    let n = pooled.nrows();
    let mut tape = Tape::new();
    let fp = tape.leaf(pooled.clone().into_dyn());
    let tx = tape.leaf(texts.clone().into_dyn());
    let fw = tape.leaf_shared(model.align.feat_w.clone());
    let fb = tape.leaf_shared(model.align.feat_b.clone());
    let tw = tape.leaf_shared(model.align.text_w.clone());
    let tb = tape.leaf_shared(model.align.text_b.clone());
    let lt = tape.leaf_shared(model.align.log_tau.clone());

    let u = tape.matmul(fp, fw);
    let u = tape.add_row(u, fb);
    let u = tape.row_normalize(u, 1e-12);
    let v = tape.matmul(tx, tw);
    let v = tape.add_row(v, tb);
    let v = tape.row_normalize(v, 1e-12);
    let vt = tape.transpose(v);
    let sims = tape.matmul(u, vt);
    let neg = tape.scale(lt, -1.0);
    let inv_tau = tape.exp(neg);
    let logits = tape.scale_by_node(sims, inv_tau);
    let loss = tape.ce_rows_mean(logits, (0..n).collect());
    let value = tape.value(loss)[IxDyn(&[])];

    let weighted = tape.scale(loss, weight);
    let g = tape.backward(weighted);
    for (name, node) in [
        ("align/feat_w", fw),
        ("align/feat_b", fb),
        ("align/text_w", tw),
        ("align/text_b", tb),
        ("align/log_tau", lt),
    ] {
        if let Some(dg) = g.get(node) {
            accumulate(grads, name, dg, 1.0);
        }
    }
    value
}

fn accumulate(grads: &mut BTreeMap<String, ArrayD<f64>>, name: &str, g: &ArrayD<f64>, k: f64) {
    match grads.get_mut(name) {
        Some(acc) => {
            ndarray::Zip::from(acc).and(g).for_each(|a, &b| *a += k * b);
        }
        None => {
            grads.insert(name.to_string(), g * k);
        }
    }
}

struct BatchOutcome {
    task: f64,
    concept: f64,
}

/// Per-sample tapes for one batch; gradients land in `grads` scaled by
/// 1 / batch size, accumulated in sample order.
fn batch_backward(
    model: &Model,
    batch: &FeatureBatch,
    idx: &[usize],
    detach_decoder: bool,
    concept_weight: f64,
    grads: &mut BTreeMap<String, ArrayD<f64>>,
) -> Result<BatchOutcome> {
    let inv = 1.0 / idx.len() as f64;
    let mut task_sum = 0.0;
    let mut concept_sum = 0.0;
    for &i in idx {
        let features = Arc::new(batch.sample_features(i).into_dyn());
        let mut tape = Tape::new();
        let out = decoder::forward(
            &mut tape,
            &model.decoder_config,
            model.counts,
            &model.decoder,
            features,
        );
        let concept = decoder::concept_loss(&mut tape, out.chat, &batch.true_concepts[i]);

        let chat_for_logic = if detach_decoder {
            let vals = tape.value(out.chat).clone();
            tape.leaf(vals)
        } else {
            out.chat
        };
        let predicates =
            logic::grafted_predicates(&mut tape, chat_for_logic, model.logic.config.negation);
        let (rep, weight_nodes) = model.logic.forward_grafted(&mut tape, predicates);
        let (scores, cw, cb) = rules::classify(&mut tape, &model.classifier, rep);
        let label = batch.labels[i];
        let task = rules::task_loss(&mut tape, scores, label);

        let tv = tape.value(task)[IxDyn(&[])];
        let cv = tape.value(concept)[IxDyn(&[])];
        if !tv.is_finite() || !cv.is_finite() {
            return Err(Error::NonFinite(format!(
                "sample {i}: task {tv}, concept {cv}"
            )));
        }
        task_sum += tv;
        concept_sum += cv;

        let scaled_concept = tape.scale(concept, concept_weight);
        let root = tape.add(task, scaled_concept);
        let g = tape.backward(root);

        for (name, node) in out
            .spatial_nodes
            .named("spatial")
            .into_iter()
            .chain(out.temporal_nodes.named("temporal"))
        {
            if let Some(dg) = g.get(node) {
                accumulate(grads, &name, dg, inv);
            }
        }
        for (l, (wa, wo)) in weight_nodes.iter().enumerate() {
            if let Some(dg) = g.get(*wa) {
                accumulate(grads, &format!("logic/layer{l}/and"), dg, inv);
            }
            if let Some(dg) = g.get(*wo) {
                accumulate(grads, &format!("logic/layer{l}/or"), dg, inv);
            }
        }
        if let Some(dg) = g.get(cw) {
            accumulate(grads, "classifier/weights", dg, inv);
        }
        if let Some(dg) = g.get(cb) {
            accumulate(grads, "classifier/bias", dg, inv);
        }
    }
    Ok(BatchOutcome { task: task_sum * inv, concept: concept_sum * inv })
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// One-vs-rest F1 per class, averaged. Classes absent from both
/// predictions and labels score zero.
pub fn macro_f1(preds: &[usize], labels: &[usize], classes: usize) -> f64 {
    let mut f1_sum = 0.0;
    for c in 0..classes {
        let tp = preds
            .iter()
            .zip(labels)
            .filter(|(p, l)| **p == c && **l == c)
            .count() as f64;
        let fp = preds
            .iter()
            .zip(labels)
            .filter(|(p, l)| **p == c && **l != c)
            .count() as f64;
        let fnr = preds
            .iter()
            .zip(labels)
            .filter(|(p, l)| **p != c && **l == c)
            .count() as f64;
        let denom = 2.0 * tp + fp + fnr;
        if denom > 0.0 {
            f1_sum += 2.0 * tp / denom;
        }
    }
    f1_sum / classes as f64
}

/// Macro F1 over concepts of thresholded activations against the planted
/// bits.
pub fn concept_macro_f1(chats: &[Vec<u8>], truth: &[Vec<u8>]) -> f64 {
    let c = chats[0].len();
    let mut f1_sum = 0.0;
    for j in 0..c {
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut fnr = 0.0;
        for (p, t) in chats.iter().zip(truth) {
            match (p[j], t[j]) {
                (1, 1) => tp += 1.0,
                (1, 0) => fp += 1.0,
                (0, 1) => fnr += 1.0,
                _ => {}
            }
        }
        let denom = 2.0 * tp + fp + fnr;
        if denom > 0.0 {
            f1_sum += 2.0 * tp / denom;
        }
    }
    f1_sum / c as f64
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub concept_f1: f64,
    pub predictions: Vec<usize>,
}

/// Discrete inference over a batch.
pub fn evaluate(model: &Model, batch: &FeatureBatch) -> EvalSummary {
    let mut preds = Vec::with_capacity(batch.len());
    let mut cbars = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let inf = model.forward_sample(&batch.sample_features(i));
        preds.push(inf.predicted);
        cbars.push(inf.cbar);
    }
    let correct = preds
        .iter()
        .zip(batch.labels.iter())
        .filter(|(p, l)| p == l)
        .count();
    EvalSummary {
        accuracy: correct as f64 / batch.len() as f64,
        macro_f1: macro_f1(&preds, &batch.labels, model.actions.len()),
        concept_f1: concept_macro_f1(&cbars, &batch.true_concepts),
        predictions: preds,
    }
}

// ---------------------------------------------------------------------------
// The loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_task: f64,
    pub l_concept: f64,
    pub l_align: f64,
    pub l_div: f64,
    pub l_sparsity: f64,
    pub acc: f64,
    pub concept_f1: f64,
    pub active_weights: usize,
}

#[derive(Debug)]
pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
    /// Composite objective per epoch, assembled as
    /// task + concept*w + align*w + div*w + sparsity*w in that order.
    pub totals: Vec<f64>,
}

pub struct TrainInputs<'a> {
    pub train: &'a FeatureBatch,
    pub eval: &'a FeatureBatch,
    /// Unit text embedding per action, row-indexed by action id.
    pub text_embeddings: &'a Array2<f64>,
    pub part_map: &'a [BodyPart],
}

/// Runs the full schedule. Per-epoch metrics stream to
/// `out/metrics.ndjson` when an output directory is given; on a
/// non-finite loss or gradient the state from the last completed epoch is
/// saved to `out/last-good` and the error is returned.
pub fn train(
    model: &mut Model,
    inputs: &TrainInputs,
    cfg: &TrainConfig,
    seed: u64,
    out: Option<&Path>,
    meta: &CheckpointMeta,
) -> Result<TrainReport> {
    train_until(model, inputs, cfg, seed, out, meta, None)
}

/// Same loop with an optional stop rule checked after each epoch's
/// metrics are in. The learning-rate schedule still spans the configured
/// epoch count, so a stopped run is an exact prefix of the full run.
pub fn train_until(
    model: &mut Model,
    inputs: &TrainInputs,
    cfg: &TrainConfig,
    seed: u64,
    out: Option<&Path>,
    meta: &CheckpointMeta,
    stop: Option<&dyn Fn(&EpochMetrics) -> bool>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let n = inputs.train.len();
    if n == 0 {
        return Err(Error::validation("training split is empty"));
    }

    let mut metrics_file = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::io::BufWriter::new(std::fs::File::create(
                dir.join("metrics.ndjson"),
            )?))
        }
        None => None,
    };

    // Mean divergence of the training features is fixed by the data; the
    // weighted value still belongs in the objective read-out.
    let mut div_sum = 0.0;
    for i in 0..n {
        div_sum += decoder::part_divergence(&inputs.train.sample_features(i), inputs.part_map);
    }
    let div_mean = div_sum / n as f64;

    let mut optimizer = Optimizer::new();
    let mut report = TrainReport { metrics: Vec::new(), totals: Vec::new() };
    let mut last_good = model.clone();

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = rng::substream(seed, "batch/shuffle", epoch as u64);
        order.shuffle(&mut shuffle_rng);

        let detach = epoch <= cfg.warmup_detach_epochs;
        let mut task_sum = 0.0;
        let mut concept_sum = 0.0;
        let mut align_sum = 0.0;
        let mut batches = 0usize;

        let outcome: Result<()> = (|| {
            for chunk in order.chunks(cfg.batch_size) {
                let mut grads: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
                let b = batch_backward(
                    model,
                    inputs.train,
                    chunk,
                    detach,
                    cfg.loss_weights.concept,
                    &mut grads,
                )?;

                let pooled = {
                    let mut p = Array2::zeros((chunk.len(), model.decoder_config.dim));
                    for (row, &i) in chunk.iter().enumerate() {
                        p.row_mut(row)
                            .assign(&pooled_feature(&inputs.train.sample_features(i)));
                    }
                    p
                };
                let texts = {
                    let mut t =
                        Array2::zeros((chunk.len(), inputs.text_embeddings.ncols()));
                    for (row, &i) in chunk.iter().enumerate() {
                        t.row_mut(row)
                            .assign(&inputs.text_embeddings.row(inputs.train.labels[i]));
                    }
                    t
                };
                let av = align_loss_and_grads(
                    model,
                    &pooled,
                    &texts,
                    cfg.loss_weights.align,
                    &mut grads,
                );
                if !av.is_finite() {
                    return Err(Error::NonFinite(format!("alignment loss {av}")));
                }

                // Sparsity reaches the switchboard as a constant push per
                // entry; weights stay in [0, 1], so the sign is fixed.
                if cfg.loss_weights.sparsity > 0.0 && epoch > cfg.freeze_logic_epochs {
                    model.logic.for_each(&mut |name, w| {
                        let push = ArrayD::from_elem(w.raw_dim(), cfg.loss_weights.sparsity);
                        accumulate(&mut grads, name, &push, 1.0);
                    });
                }

                for (name, g) in grads.iter() {
                    if g.iter().any(|x| !x.is_finite()) {
                        return Err(Error::NonFinite(format!("gradient for {name}")));
                    }
                }
                optimizer.apply(model, &mut grads, cfg, epoch);

                task_sum += b.task;
                concept_sum += b.concept;
                align_sum += av;
                batches += 1;
            }
            Ok(())
        })();

        if let Err(e) = outcome {
            if let Some(dir) = out {
                checkpoint::save_model(&dir.join("last-good"), &last_good, meta)?;
            }
            return Err(Error::NonFinite(format!(
                "epoch {epoch}: {e}; last completed epoch saved"
            )));
        }

        let nb = batches.max(1) as f64;
        let l_task = task_sum / nb;
        let l_concept = concept_sum / nb;
        let l_align = align_sum / nb;
        let l_sparsity = model.logic.l1_penalty();
        let w = &cfg.loss_weights;
        let total = l_task
            + w.concept * l_concept
            + w.align * l_align
            + w.divergence * div_mean
            + w.sparsity * l_sparsity;

        let eval = evaluate(model, inputs.eval);
        let m = EpochMetrics {
            epoch,
            l_task,
            l_concept,
            l_align,
            l_div: div_mean,
            l_sparsity,
            acc: eval.accuracy,
            concept_f1: eval.concept_f1,
            active_weights: model.logic.active_weights(),
        };
        if let Some(f) = metrics_file.as_mut() {
            let line = serde_json::to_string(&m)?;
            writeln!(f, "{line}")?;
        }
        report.metrics.push(m);
        report.totals.push(total);
        last_good = model.clone();
        if stop.is_some_and(|pred| pred(report.metrics.last().unwrap())) {
            break;
        }
    }
    if let Some(f) = metrics_file.as_mut() {
        f.flush()?;
    }
    Ok(TrainReport { metrics: report.metrics, totals: report.totals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::DecoderConfig;
    use crate::logic::LogicConfig;
    use crate::synthetic::{self, WorldConfig};

    fn tiny_world(seed: u64) -> synthetic::World {
        let (vocab, matrix) = synthetic::planted_bank(4, 10, seed).unwrap();
        let mut wc = WorldConfig::desk(vocab, matrix);
        wc.frames = 12;
        wc.joints = 12;
        wc.channels = 16;
        wc.part_map = synthetic::default_part_map(12);
        synthetic::generate_world(wc, seed).unwrap()
    }

    fn tiny_model(world: &synthetic::World, seed: u64) -> Model {
        Model::init(
            world.config.vocabulary.clone(),
            &world.config.matrix,
            DecoderConfig { dim: 16, hidden: 8, spatial_groups: 2, temporal_groups: 2, heads: 1 },
            LogicConfig { layers: 2, width: 4, skip: true, negation: true },
            16,
            world.config.text_dim,
            8,
            seed,
        )
        .unwrap()
    }

    fn tiny_meta(world: &synthetic::World, seed: u64) -> CheckpointMeta {
        CheckpointMeta {
            config_hash: "test".to_string(),
            seed,
            epoch: 0,
            matrix_rows: world.config.matrix.rows.clone(),
            channels: 16,
            text_dim: world.config.text_dim,
            proj_dim: 8,
        }
    }

    fn quick_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 8,
            lr_base: 1e-3,
            lr_logic: 1e-2,
            warmup_detach_epochs: 1,
            freeze_logic_epochs: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn cosine_schedule_hits_both_endpoints() {
        assert_eq!(cosine_multiplier(1, 10), 1.0);
        assert!(cosine_multiplier(10, 10).abs() < 1e-15);
        assert!((cosine_multiplier(2, 3) - 0.5).abs() < 1e-12);
        assert_eq!(cosine_multiplier(1, 1), 1.0);
    }

    #[test]
    fn adamw_single_step_matches_hand_computation() {
        let world = tiny_world(0);
        let mut model = tiny_model(&world, 0);
        let cfg = TrainConfig {
            epochs: 1,
            freeze_logic_epochs: 0,
            warmup_detach_epochs: 0,
            clip_norm: 1e9,
            weight_decay: 0.01,
            lr_logic: 0.1,
            ..TrainConfig::default()
        };
        let before = model.classifier.bias.as_slice().unwrap()[0];
        let mut grads = BTreeMap::new();
        let mut g = ArrayD::zeros(model.classifier.bias.raw_dim());
        g.as_slice_mut().unwrap()[0] = 2.0;
        grads.insert("classifier/bias".to_string(), g);
        let mut opt = Optimizer::new();
        opt.apply(&mut model, &mut grads, &cfg, 1);
        // Step 1 with zero moments: mhat = g, vhat = g^2; decay shrinks
        // the weight first.
        let lr = 0.1;
        let decayed = before * (1.0 - lr * 0.01);
        let expect = decayed - lr * 2.0 / (2.0f64 + 1e-8);
        let after = model.classifier.bias.as_slice().unwrap()[0];
        assert!((after - expect).abs() < 1e-12, "{after} vs {expect}");
    }

    #[test]
    fn clip_rescales_by_global_norm() {
        let world = tiny_world(1);
        let mut model = tiny_model(&world, 1);
        let cfg = TrainConfig {
            epochs: 1,
            freeze_logic_epochs: 0,
            warmup_detach_epochs: 0,
            clip_norm: 1.0,
            weight_decay: 0.0,
            lr_logic: 1.0,
            ..TrainConfig::default()
        };
        let before = model.classifier.bias.as_slice().unwrap().to_vec();
        let mut grads = BTreeMap::new();
        let mut g = ArrayD::zeros(model.classifier.bias.raw_dim());
        g.as_slice_mut().unwrap()[0] = 3.0;
        g.as_slice_mut().unwrap()[1] = 4.0;
        grads.insert("classifier/bias".to_string(), g);
        let mut opt = Optimizer::new();
        opt.apply(&mut model, &mut grads, &cfg, 1);
        let after = model.classifier.bias.as_slice().unwrap();
        // Norm 5 clips to 1: effective gradients 0.6 and 0.8, both still
        // positive, and Adam's first step moves each by lr * g/(|g|+eps),
        // which is lr up to the epsilon.
        let d0 = before[0] - after[0];
        let d1 = before[1] - after[1];
        assert!(d0 > 0.0 && d1 > 0.0);
        assert!((d0 - 1.0).abs() < 1e-6 && (d1 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn frozen_epochs_leave_switchboard_and_classifier_untouched() {
        let world = tiny_world(2);
        let mut model = tiny_model(&world, 2);
        let train = synthetic::sample_batch(&world, 24, 1);
        let eval = synthetic::sample_batch(&world, 8, 2);
        let inputs = TrainInputs {
            train: &train,
            eval: &eval,
            text_embeddings: &world.text_embeddings,
            part_map: &world.config.part_map,
        };
        let logic_before = model.logic.layers[0].and_w.clone();
        let cls_before = model.classifier.weights.clone();
        let decoder_before = model.decoder.spatial.queries.clone();

        let cfg = TrainConfig { epochs: 2, freeze_logic_epochs: 2, ..quick_cfg(2) };
        train_run(&mut model, &inputs, &cfg, &world);

        assert_eq!(*model.logic.layers[0].and_w, *logic_before);
        assert_eq!(*model.classifier.weights, *cls_before);
        assert_ne!(*model.decoder.spatial.queries, *decoder_before);
    }

    fn train_run(
        model: &mut Model,
        inputs: &TrainInputs,
        cfg: &TrainConfig,
        world: &synthetic::World,
    ) -> TrainReport {
        train(model, inputs, cfg, 0, None, &tiny_meta(world, 0)).unwrap()
    }

    #[test]
    fn unfrozen_switchboard_moves() {
        let world = tiny_world(3);
        let mut model = tiny_model(&world, 3);
        let train_b = synthetic::sample_batch(&world, 24, 1);
        let eval_b = synthetic::sample_batch(&world, 8, 2);
        let inputs = TrainInputs {
            train: &train_b,
            eval: &eval_b,
            text_embeddings: &world.text_embeddings,
            part_map: &world.config.part_map,
        };
        let logic_before = model.logic.layers[0].and_w.clone();
        let cfg = TrainConfig { epochs: 3, freeze_logic_epochs: 1, ..quick_cfg(3) };
        train_run(&mut model, &inputs, &cfg, &world);
        assert_ne!(*model.logic.layers[0].and_w, *logic_before);
        // Clamping keeps the relaxed weights in the unit interval.
        model.logic.for_each(&mut |_, w| {
            assert!(w.iter().all(|&x| (0.0..=1.0).contains(&x)));
        });
    }

    /// With the concept loss off, a detached decoder receives no gradient
    /// at all during warmup, then starts moving when the detach lifts.
    #[test]
    fn warmup_detach_blocks_task_gradient_into_decoder() {
        let world = tiny_world(4);
        let mut model = tiny_model(&world, 4);
        let train_b = synthetic::sample_batch(&world, 16, 1);
        let eval_b = synthetic::sample_batch(&world, 8, 2);
        let inputs = TrainInputs {
            train: &train_b,
            eval: &eval_b,
            text_embeddings: &world.text_embeddings,
            part_map: &world.config.part_map,
        };
        let mut cfg = quick_cfg(2);
        cfg.loss_weights.concept = 0.0;
        cfg.warmup_detach_epochs = 2;
        cfg.freeze_logic_epochs = 0;
        cfg.weight_decay = 0.0;
        let decoder_before = model.decoder.spatial.queries.clone();
        train_run(&mut model, &inputs, &cfg, &world);
        assert_eq!(*model.decoder.spatial.queries, *decoder_before);

        let mut cfg2 = quick_cfg(2);
        cfg2.loss_weights.concept = 0.0;
        cfg2.warmup_detach_epochs = 0;
        cfg2.freeze_logic_epochs = 0;
        cfg2.weight_decay = 0.0;
        let mut model2 = tiny_model(&world, 4);
        train_run(&mut model2, &inputs, &cfg2, &world);
        assert_ne!(*model2.decoder.spatial.queries, *decoder_before);
    }

    #[test]
    fn reported_totals_decompose_into_components() {
        let world = tiny_world(5);
        let mut model = tiny_model(&world, 5);
        let train_b = synthetic::sample_batch(&world, 16, 1);
        let eval_b = synthetic::sample_batch(&world, 8, 2);
        let inputs = TrainInputs {
            train: &train_b,
            eval: &eval_b,
            text_embeddings: &world.text_embeddings,
            part_map: &world.config.part_map,
        };
        let cfg = quick_cfg(3);
        let report = train_run(&mut model, &inputs, &cfg, &world);
        assert_eq!(report.metrics.len(), 3);
        for (m, &total) in report.metrics.iter().zip(report.totals.iter()) {
            let w = &cfg.loss_weights;
            let recomputed = m.l_task
                + w.concept * m.l_concept
                + w.align * m.l_align
                + w.divergence * m.l_div
                + w.sparsity * m.l_sparsity;
            assert_eq!(recomputed, total, "epoch {}", m.epoch);
        }
    }

    #[test]
    fn same_seed_same_run_bitwise() {
        let world = tiny_world(6);
        let train_b = synthetic::sample_batch(&world, 16, 1);
        let eval_b = synthetic::sample_batch(&world, 8, 2);
        let inputs = TrainInputs {
            train: &train_b,
            eval: &eval_b,
            text_embeddings: &world.text_embeddings,
            part_map: &world.config.part_map,
        };
        let cfg = quick_cfg(3);
        let mut m1 = tiny_model(&world, 7);
        let mut m2 = tiny_model(&world, 7);
        let r1 = train_run(&mut m1, &inputs, &cfg, &world);
        let r2 = train_run(&mut m2, &inputs, &cfg, &world);
        assert_eq!(r1.totals, r2.totals);
        let mut t1 = Vec::new();
        m1.for_each(&mut |_, t| t1.push(t.clone()));
        let mut i = 0;
        m2.for_each(&mut |_, t| {
            assert_eq!(
                t.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                t1[i].iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
            i += 1;
        });
    }

    #[test]
    fn poisoned_weights_abort_and_save_last_good() {
        let world = tiny_world(8);
        let mut model = tiny_model(&world, 8);
        {
            let w = Arc::make_mut(&mut model.decoder.spatial.queries);
            w.as_slice_mut().unwrap()[0] = f64::NAN;
        }
        let train_b = synthetic::sample_batch(&world, 8, 1);
        let eval_b = synthetic::sample_batch(&world, 4, 2);
        let inputs = TrainInputs {
            train: &train_b,
            eval: &eval_b,
            text_embeddings: &world.text_embeddings,
            part_map: &world.config.part_map,
        };
        let dir = tempfile::tempdir().unwrap();
        let err = train(
            &mut model,
            &inputs,
            &quick_cfg(2),
            0,
            Some(dir.path()),
            &tiny_meta(&world, 8),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert!(dir.path().join("last-good/manifest.json").exists());
        let (recovered, _) = checkpoint::load_model(&dir.path().join("last-good")).unwrap();
        // The saved state predates the poison only in the sense of being
        // the initial state; it must at least load cleanly and stay finite
        // everywhere except the poisoned entry it inherited.
        let _ = recovered;
    }

    #[test]
    fn final_epoch_learning_rate_is_zero() {
        let world = tiny_world(9);
        let mut model = tiny_model(&world, 9);
        let train_b = synthetic::sample_batch(&world, 8, 1);
        let eval_b = synthetic::sample_batch(&world, 4, 2);
        let inputs = TrainInputs {
            train: &train_b,
            eval: &eval_b,
            text_embeddings: &world.text_embeddings,
            part_map: &world.config.part_map,
        };
        let mut cfg = quick_cfg(3);
        cfg.warmup_detach_epochs = 0;
        cfg.freeze_logic_epochs = 0;
        // Run two epochs, snapshot, then run the final epoch via a fresh
        // schedule of the same length: the last epoch's multiplier is 0,
        // so nothing moves in it.
        train_run(&mut model, &inputs, &cfg, &world);
        let snapshot: Vec<ArrayD<f64>> = {
            let mut v = Vec::new();
            model.for_each(&mut |_, t| v.push((**t).clone()));
            v
        };
        let mut opt = Optimizer::new();
        let mut grads = BTreeMap::new();
        let mut g = ArrayD::zeros(model.classifier.bias.raw_dim());
        g.as_slice_mut().unwrap()[0] = 1.0;
        grads.insert("classifier/bias".to_string(), g);
        opt.apply(&mut model, &mut grads, &cfg, 3);
        let mut i = 0;
        model.for_each(&mut |_, t| {
            assert_eq!(**t, snapshot[i]);
            i += 1;
        });
    }
}
