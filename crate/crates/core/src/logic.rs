//! Differentiable logic switchboard.
//!
//! Concept activations are binarized, augmented with their complements,
//! and fed through stacked bands of soft conjunctions and disjunctions.
//! Soft gates use relaxed weights in [0, 1]; hardening a weight matrix
//! thresholds at 0.5 and the soft gates reduce exactly to Boolean AND/OR
//! on binary inputs and binary weights. A node with no selected inputs is
//! the unit of its gate: conjunction 1, disjunction 0.
//!
//! Training runs the discrete network in the forward direction and routes
//! gradients through the relaxed network evaluated at the discrete layer
//! inputs. Each band output is a graft node: its value comes from the
//! Boolean gate, its backward pass from the soft gate. The same trick
//! binarizes the decoder's activations: the straight-through estimate is
//! a graft of the soft activation with its thresholded value.

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::rng;
use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogicConfig {
    /// Stacked layers, each with one conjunction and one disjunction band.
    pub layers: usize,
    /// Nodes per band.
    pub width: usize,
    /// Feed the predicate vector to every layer and expose all bands to
    /// the classifier. Without it only the last layer's bands are visible.
    pub skip: bool,
    /// Augment predicates with complements.
    pub negation: bool,
}

impl Default for LogicConfig {
    fn default() -> Self {
        LogicConfig { layers: 2, width: 128, skip: true, negation: true }
    }
}

impl LogicConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.width == 0 {
            return Err(Error::validation("logic layers and width must be positive"));
        }
        Ok(())
    }

    /// Predicates seen by layer 1, for `concepts` concept activations.
    pub fn predicate_width(&self, concepts: usize) -> usize {
        if self.negation { 2 * concepts } else { concepts }
    }

    /// Width of the input to `layer` (zero-based).
    pub fn input_width(&self, concepts: usize, layer: usize) -> usize {
        let p = self.predicate_width(concepts);
        if layer == 0 {
            p
        } else if self.skip {
            2 * self.width + p
        } else {
            2 * self.width
        }
    }

    /// Width of the representation handed to the classifier.
    pub fn representation_width(&self, concepts: usize) -> usize {
        if self.skip {
            self.predicate_width(concepts) + self.layers * 2 * self.width
        } else {
            2 * self.width
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub and_w: Arc<ArrayD<f64>>,
    pub or_w: Arc<ArrayD<f64>>,
}

#[derive(Debug, Clone)]
pub struct LogicNetwork {
    pub config: LogicConfig,
    pub concepts: usize,
    pub layers: Vec<LayerWeights>,
}

impl LogicNetwork {
    /// Relaxed weights start uniform in [0.4, 0.6]: near the threshold, so
    /// early training can move selections in either direction cheaply.
    pub fn init(config: LogicConfig, concepts: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if concepts == 0 {
            return Err(Error::validation("logic network needs at least one concept"));
        }
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let m = config.input_width(concepts, l);
            let draw = |band: &str| {
                let mut r = rng::stream(seed, &format!("init/logic/layer{l}/{band}"));
                Arc::new(
                    ArrayD::from_shape_fn(IxDyn(&[config.width, m]), |_| {
                        0.4 + 0.2 * r.gen::<f64>()
                    }),
                )
            };
            layers.push(LayerWeights { and_w: draw("and"), or_w: draw("or") });
        }
        Ok(LogicNetwork { config, concepts, layers })
    }

    pub fn representation_width(&self) -> usize {
        self.config.representation_width(self.concepts)
    }

    pub fn for_each(&self, f: &mut dyn FnMut(&str, &Arc<ArrayD<f64>>)) {
        for (l, w) in self.layers.iter().enumerate() {
            f(&format!("logic/layer{l}/and"), &w.and_w);
            f(&format!("logic/layer{l}/or"), &w.or_w);
        }
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut Arc<ArrayD<f64>>)) {
        for (l, w) in self.layers.iter_mut().enumerate() {
            f(&format!("logic/layer{l}/and"), &mut w.and_w);
            f(&format!("logic/layer{l}/or"), &mut w.or_w);
        }
    }

    /// Sum of relaxed weight magnitudes. Weights live in [0, 1], so this
    /// is also the count-weighted selection mass the sparsity term shrinks.
    pub fn l1_penalty(&self) -> f64 {
        let mut s = 0.0;
        self.for_each(&mut |_, w| s += w.iter().map(|x| x.abs()).sum::<f64>());
        s
    }

    pub fn weight_count(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, w| n += w.len());
        n
    }

    /// Hardened selection masks, thresholded at 0.5.
    pub fn binarize_weights(&self) -> Vec<(Array2<u8>, Array2<u8>)> {
        self.layers
            .iter()
            .map(|w| (harden(&w.and_w), harden(&w.or_w)))
            .collect()
    }

    /// Count of selected entries after hardening.
    pub fn active_weights(&self) -> usize {
        self.binarize_weights()
            .iter()
            .map(|(a, o)| {
                a.iter().filter(|&&b| b == 1).count() + o.iter().filter(|&&b| b == 1).count()
            })
            .sum()
    }
}

fn harden(w: &ArrayD<f64>) -> Array2<u8> {
    let v = w.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    Array2::from_shape_fn((v.nrows(), v.ncols()), |(i, j)| u8::from(v[[i, j]] > 0.5))
}

/// Strict threshold at 0.5, shared by activations and weights.
pub fn binarize(x: &[f64]) -> Vec<u8> {
    x.iter().map(|&v| u8::from(v > 0.5)).collect()
}

/// Predicate vector over binary activations: the bits then their
/// complements when negation is on, the bits alone otherwise.
pub fn augment(bits: &[u8], negation: bool) -> Vec<u8> {
    let mut p = bits.to_vec();
    if negation {
        p.extend(bits.iter().map(|&b| 1 - b));
    }
    p
}

/// One discrete evaluation: all band outputs layer by layer plus the final
/// representation.
pub struct DiscreteTrace {
    /// Per layer: (conjunction band, disjunction band).
    pub bands: Vec<(Vec<u8>, Vec<u8>)>,
    pub representation: Vec<u8>,
}

fn hard_and(w: &Array2<u8>, x: &[u8]) -> Vec<u8> {
    (0..w.nrows())
        .map(|i| {
            u8::from(
                (0..w.ncols()).all(|j| w[[i, j]] == 0 || x[j] == 1),
            )
        })
        .collect()
}

fn hard_or(w: &Array2<u8>, x: &[u8]) -> Vec<u8> {
    (0..w.nrows())
        .map(|i| {
            u8::from(
                (0..w.ncols()).any(|j| w[[i, j]] == 1 && x[j] == 1),
            )
        })
        .collect()
}

impl LogicNetwork {
    /// Boolean forward pass over hardened weights.
    pub fn forward_discrete(&self, predicates: &[u8]) -> DiscreteTrace {
        assert_eq!(predicates.len(), self.config.input_width(self.concepts, 0));
        let hard = self.binarize_weights();
        let mut bands = Vec::with_capacity(self.config.layers);
        let mut input = predicates.to_vec();
        for (l, (wa, wo)) in hard.iter().enumerate() {
            let a = hard_and(wa, &input);
            let b = hard_or(wo, &input);
            input = if self.config.skip {
                let mut next: Vec<u8> = a.iter().chain(b.iter()).copied().collect();
                next.extend_from_slice(predicates);
                next
            } else {
                a.iter().chain(b.iter()).copied().collect()
            };
            bands.push((a, b));
            let _ = l;
        }
        let representation = if self.config.skip {
            let mut r = predicates.to_vec();
            for (a, b) in &bands {
                r.extend_from_slice(a);
                r.extend_from_slice(b);
            }
            r
        } else {
            let (a, b) = bands.last().unwrap();
            a.iter().chain(b.iter()).copied().collect()
        };
        DiscreteTrace { bands, representation }
    }

    /// Fully relaxed forward pass on a tape. Used by the gradient checker
    /// and the property tests; training uses `forward_grafted`.
    pub fn forward_soft(&self, tape: &mut Tape, predicates: NodeId) -> (NodeId, Vec<(NodeId, NodeId)>) {
        let mut weight_nodes = Vec::with_capacity(self.layers.len());
        let mut band_nodes = Vec::with_capacity(self.layers.len());
        let mut input = predicates;
        for w in &self.layers {
            let wa = tape.leaf_shared(w.and_w.clone());
            let wo = tape.leaf_shared(w.or_w.clone());
            weight_nodes.push((wa, wo));
            let a = tape.soft_and(wa, input);
            let b = tape.soft_or(wo, input);
            band_nodes.push((a, b));
            input = if self.config.skip {
                tape.concat_vec(&[a, b, predicates])
            } else {
                tape.concat_vec(&[a, b])
            };
        }
        let r = if self.config.skip {
            let mut parts = vec![predicates];
            for (a, b) in &band_nodes {
                parts.push(*a);
                parts.push(*b);
            }
            tape.concat_vec(&parts)
        } else {
            let (a, b) = *band_nodes.last().unwrap();
            tape.concat_vec(&[a, b])
        };
        (r, weight_nodes)
    }

    /// Discrete-valued forward pass whose backward runs through the soft
    /// gates at the discrete layer inputs. `predicates` must already carry
    /// binary forward values (the straight-through graft upstream provides
    /// them); each band is re-grafted so deeper layers keep seeing binary
    /// values while gradients keep flowing.
    pub fn forward_grafted(
        &self,
        tape: &mut Tape,
        predicates: NodeId,
    ) -> (NodeId, Vec<(NodeId, NodeId)>) {
        let pred_bits: Vec<u8> = tape
            .value(predicates)
            .iter()
            .map(|&v| {
                debug_assert!(v == 0.0 || v == 1.0, "grafted input must be binary");
                v as u8
            })
            .collect();
        let trace = self.forward_discrete(&pred_bits);

        let mut weight_nodes = Vec::with_capacity(self.layers.len());
        let mut input = predicates;
        let mut grafted_bands = Vec::with_capacity(self.layers.len());
        for (l, w) in self.layers.iter().enumerate() {
            let wa = tape.leaf_shared(w.and_w.clone());
            let wo = tape.leaf_shared(w.or_w.clone());
            weight_nodes.push((wa, wo));
            let a_soft = tape.soft_and(wa, input);
            let b_soft = tape.soft_or(wo, input);
            let (ha, hb) = &trace.bands[l];
            let a = tape.graft(a_soft, bits_to_array(ha));
            let b = tape.graft(b_soft, bits_to_array(hb));
            grafted_bands.push((a, b));
            input = if self.config.skip {
                tape.concat_vec(&[a, b, predicates])
            } else {
                tape.concat_vec(&[a, b])
            };
        }
        let r = if self.config.skip {
            let mut parts = vec![predicates];
            for (a, b) in &grafted_bands {
                parts.push(*a);
                parts.push(*b);
            }
            tape.concat_vec(&parts)
        } else {
            let (a, b) = *grafted_bands.last().unwrap();
            tape.concat_vec(&[a, b])
        };
        (r, weight_nodes)
    }
}

fn bits_to_array(bits: &[u8]) -> ArrayD<f64> {
    Array1::from_iter(bits.iter().map(|&b| f64::from(b))).into_dyn()
}

/// Straight-through binarization of the decoder activations plus predicate
/// augmentation, on the tape. Forward values are binary; backward is the
/// identity into `chat`.
pub fn grafted_predicates(tape: &mut Tape, chat: NodeId, negation: bool) -> NodeId {
    let bits = binarize(tape.value(chat).as_slice().unwrap());
    let hard = bits_to_array(&bits);
    let cbar = tape.graft(chat, hard);
    if negation {
        let ncbar = tape.one_minus(cbar);
        tape.concat_vec(&[cbar, ncbar])
    } else {
        cbar
    }
}
