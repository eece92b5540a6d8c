//! The trainable bundle: decoder, switchboard, classifier, alignment head.
//!
//! Tensors are addressed by stable slash-separated names. The same names
//! seed initialization streams, key optimizer state, and label checkpoint
//! entries, so a tensor renames nowhere or everywhere.

use crate::concept_bank::{AssociationMatrix, ConceptVocabulary};
use crate::decoder::{ConceptCounts, DecoderConfig, DecoderParams};
use crate::error::{Error, Result};
use crate::logic::{self, LogicConfig, LogicNetwork};
use crate::rng;
use crate::rules::{self, ClassifierParams};
use ndarray::{Array3, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;
use std::sync::Arc;

/// Projections into the shared alignment space and the learned
/// temperature, stored as its logarithm.
#[derive(Debug, Clone)]
pub struct AlignParams {
    pub feat_w: Arc<ArrayD<f64>>,
    pub feat_b: Arc<ArrayD<f64>>,
    pub text_w: Arc<ArrayD<f64>>,
    pub text_b: Arc<ArrayD<f64>>,
    pub log_tau: Arc<ArrayD<f64>>,
}

impl AlignParams {
    pub fn init(channels: usize, text_dim: usize, proj_dim: usize, seed: u64) -> Self {
        let draw = |name: &str, rows: usize, cols: usize| {
            let mut r = rng::stream(seed, &format!("init/align/{name}"));
            let scale = 1.0 / (rows as f64).sqrt();
            Arc::new(ArrayD::from_shape_fn(IxDyn(&[rows, cols]), |_| {
                scale * r.sample::<f64, _>(StandardNormal)
            }))
        };
        AlignParams {
            feat_w: draw("feat_w", channels, proj_dim),
            feat_b: Arc::new(ArrayD::zeros(IxDyn(&[proj_dim]))),
            text_w: draw("text_w", text_dim, proj_dim),
            text_b: Arc::new(ArrayD::zeros(IxDyn(&[proj_dim]))),
            log_tau: Arc::new(ArrayD::from_elem(IxDyn(&[]), 0.07f64.ln())),
        }
    }

    pub fn for_each(&self, f: &mut dyn FnMut(&str, &Arc<ArrayD<f64>>)) {
        f("align/feat_w", &self.feat_w);
        f("align/feat_b", &self.feat_b);
        f("align/text_w", &self.text_w);
        f("align/text_b", &self.text_b);
        f("align/log_tau", &self.log_tau);
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut Arc<ArrayD<f64>>)) {
        f("align/feat_w", &mut self.feat_w);
        f("align/feat_b", &mut self.feat_b);
        f("align/text_w", &mut self.text_w);
        f("align/text_b", &mut self.text_b);
        f("align/log_tau", &mut self.log_tau);
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub vocabulary: ConceptVocabulary,
    pub actions: Vec<String>,
    pub counts: ConceptCounts,
    pub decoder_config: DecoderConfig,
    pub decoder: DecoderParams,
    pub logic: LogicNetwork,
    pub classifier: ClassifierParams,
    pub align: AlignParams,
}

impl Model {
    pub fn init(
        vocabulary: ConceptVocabulary,
        matrix: &AssociationMatrix,
        decoder_config: DecoderConfig,
        logic_config: LogicConfig,
        channels: usize,
        text_dim: usize,
        proj_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        matrix.bind(&vocabulary)?;
        if decoder_config.dim != channels {
            return Err(Error::validation(format!(
                "decoder dim {} must match feature channels {}",
                decoder_config.dim, channels
            )));
        }
        if proj_dim == 0 {
            return Err(Error::validation("proj_dim must be positive"));
        }
        let counts = ConceptCounts::of(&vocabulary)?;
        let decoder = DecoderParams::init(&decoder_config, counts, seed)?;
        let logic = LogicNetwork::init(logic_config, vocabulary.len(), seed)?;
        let classifier = ClassifierParams::init(
            matrix.num_actions(),
            logic.representation_width(),
            seed,
        );
        let align = AlignParams::init(channels, text_dim, proj_dim, seed);
        Ok(Model {
            vocabulary,
            actions: matrix.actions.clone(),
            counts,
            decoder_config,
            decoder,
            logic,
            classifier,
            align,
        })
    }

    pub fn for_each(&self, f: &mut dyn FnMut(&str, &Arc<ArrayD<f64>>)) {
        self.decoder.for_each(f);
        self.logic.for_each(f);
        self.classifier.for_each(f);
        self.align.for_each(f);
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut Arc<ArrayD<f64>>)) {
        self.decoder.for_each_mut(f);
        self.logic.for_each_mut(f);
        self.classifier.for_each_mut(f);
        self.align.for_each_mut(f);
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.for_each(&mut |n, _| names.push(n.to_string()));
        names
    }
}

/// Discrete inference for one sample.
pub struct SampleInference {
    pub chat: Vec<f64>,
    pub cbar: Vec<u8>,
    pub representation: Vec<u8>,
    pub scores: Vec<f64>,
    pub predicted: usize,
}

impl Model {
    /// Decoder activations, thresholded concepts, hardened switchboard,
    /// argmax score. No gradients, fresh tape per call.
    pub fn forward_sample(&self, features: &Array3<f64>) -> SampleInference {
        let mut tape = crate::autodiff::Tape::new();
        let out = crate::decoder::forward(
            &mut tape,
            &self.decoder_config,
            self.counts,
            &self.decoder,
            Arc::new(features.clone().into_dyn()),
        );
        let chat = tape.value(out.chat).as_slice().unwrap().to_vec();
        self.infer_from_chat(&chat)
    }

    /// The symbolic half alone, for interventions on the concept vector.
    pub fn infer_from_chat(&self, chat: &[f64]) -> SampleInference {
        let cbar = logic::binarize(chat);
        let predicates = logic::augment(&cbar, self.logic.config.negation);
        let trace = self.logic.forward_discrete(&predicates);
        let (predicted, scores) = rules::predict(&self.classifier, &trace.representation);
        SampleInference {
            chat: chat.to_vec(),
            cbar,
            representation: trace.representation,
            scores,
            predicted,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{self, WorldConfig};
    use std::collections::BTreeSet;

    fn tiny_model(seed: u64) -> (Model, synthetic::World) {
        let (vocab, matrix) = synthetic::planted_bank(4, 10, seed).unwrap();
        let mut wc = WorldConfig::desk(vocab.clone(), matrix.clone());
        wc.frames = 12;
        wc.joints = 12;
        wc.channels = 16;
        wc.part_map = synthetic::default_part_map(12);
        let world = synthetic::generate_world(wc, seed).unwrap();
        let model = Model::init(
            vocab,
            &matrix,
            DecoderConfig { dim: 16, hidden: 8, spatial_groups: 2, temporal_groups: 2, heads: 1 },
            LogicConfig { layers: 2, width: 4, skip: true, negation: true },
            16,
            32,
            8,
            seed,
        )
        .unwrap();
        (model, world)
    }

    #[test]
    fn tensor_names_are_unique_and_cover_all_parts() {
        let (model, _) = tiny_model(0);
        let names = model.tensor_names();
        let set: BTreeSet<_> = names.iter().collect();
        assert_eq!(set.len(), names.len(), "duplicate tensor name");
        // 11 per decoder branch, 2 per logic layer, classifier pair,
        // alignment head of 5.
        assert_eq!(names.len(), 22 + 4 + 2 + 5);
        assert!(names.iter().any(|n| n == "align/log_tau"));
        assert!(names.iter().any(|n| n == "logic/layer1/or"));
    }

    #[test]
    fn init_rejects_channel_mismatch() {
        let (vocab, matrix) = synthetic::planted_bank(3, 10, 1).unwrap();
        let err = Model::init(
            vocab,
            &matrix,
            DecoderConfig { dim: 16, hidden: 8, spatial_groups: 2, temporal_groups: 2, heads: 1 },
            LogicConfig::default(),
            32,
            8,
            8,
            1,
        );
        assert!(err.is_err());
    }

    #[test]
    fn forward_sample_is_deterministic_and_well_shaped() {
        let (model, world) = tiny_model(2);
        let batch = synthetic::sample_batch(&world, 3, 8);
        let f = batch.sample_features(0);
        let a = model.forward_sample(&f);
        let b = model.forward_sample(&f);
        assert_eq!(a.chat.len(), 10);
        assert_eq!(a.cbar.len(), 10);
        assert_eq!(a.representation.len(), model.logic.representation_width());
        assert_eq!(a.scores.len(), 4);
        assert!(a.predicted < 4);
        assert_eq!(a.cbar, b.cbar);
        assert_eq!(a.scores, b.scores);
        // Threshold consistency between the reported pieces.
        for (c, &bit) in a.chat.iter().zip(a.cbar.iter()) {
            assert_eq!(bit, u8::from(*c > 0.5));
        }
    }

    #[test]
    fn intervention_on_chat_reuses_symbolic_path() {
        let (model, world) = tiny_model(3);
        let batch = synthetic::sample_batch(&world, 1, 9);
        let inf = model.forward_sample(&batch.sample_features(0));
        let redo = model.infer_from_chat(&inf.chat);
        assert_eq!(inf.representation, redo.representation);
        assert_eq!(inf.predicted, redo.predicted);
    }
}
