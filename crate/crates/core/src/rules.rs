//! Linear read-out and rule extraction.
//!
//! The classifier scores actions from the logic representation with a
//! single affine map, so every score is a signed vote sum over named
//! Boolean formulas. Extraction walks the hardened switchboard and
//! rebuilds, per representation slot, the formula that slot computes over
//! the concept literals. The formulas are canonicalized (flattened,
//! sorted, deduplicated, units collapsed) and rendered in prefix notation.

use crate::autodiff::{NodeId, Tape};
use crate::concept_bank::ConceptVocabulary;
use crate::error::Result;
use crate::logic::LogicNetwork;
use crate::rng;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Debug, Clone)]
pub struct ClassifierParams {
    /// (actions, representation width)
    pub weights: Arc<ArrayD<f64>>,
    /// (actions,)
    pub bias: Arc<ArrayD<f64>>,
}

impl ClassifierParams {
    pub fn init(actions: usize, rep_width: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, "init/classifier/weights");
        let scale = 1.0 / (rep_width as f64).sqrt();
        ClassifierParams {
            weights: Arc::new(ArrayD::from_shape_fn(IxDyn(&[actions, rep_width]), |_| {
                scale * rng.sample::<f64, _>(StandardNormal)
            })),
            bias: Arc::new(ArrayD::zeros(IxDyn(&[actions]))),
        }
    }

    pub fn for_each(&self, f: &mut dyn FnMut(&str, &Arc<ArrayD<f64>>)) {
        f("classifier/weights", &self.weights);
        f("classifier/bias", &self.bias);
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut Arc<ArrayD<f64>>)) {
        f("classifier/weights", &mut self.weights);
        f("classifier/bias", &mut self.bias);
    }

    pub fn num_actions(&self) -> usize {
        self.weights.shape()[0]
    }
}

/// Action scores for one representation vector, on the tape.
pub fn classify(
    tape: &mut Tape,
    params: &ClassifierParams,
    representation: NodeId,
) -> (NodeId, NodeId, NodeId) {
    let w = tape.leaf_shared(params.weights.clone());
    let b = tape.leaf_shared(params.bias.clone());
    let wr = tape.matvec(w, representation);
    let scores = tape.add(wr, b);
    (scores, w, b)
}

/// Cross-entropy of one sample's scores against its action label.
pub fn task_loss(tape: &mut Tape, scores: NodeId, label: usize) -> NodeId {
    let n = tape.value(scores).len();
    let rows = tape.reshape(scores, &[1, n]);
    tape.ce_rows_mean(rows, vec![label])
}

/// Plain argmax scoring outside any tape, for inference.
pub fn predict(params: &ClassifierParams, representation: &[u8]) -> (usize, Vec<f64>) {
    let w = params.weights.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let b = params.bias.as_slice().unwrap();
    let scores: Vec<f64> = (0..w.nrows())
        .map(|a| {
            b[a] + representation
                .iter()
                .enumerate()
                .map(|(j, &r)| w[[a, j]] * f64::from(r))
                .sum::<f64>()
        })
        .collect();
    let best = scores
        .iter()
        .enumerate()
        .max_by(|(_, x), (_, y)| x.total_cmp(y))
        .map(|(i, _)| i)
        .unwrap();
    (best, scores)
}

// ---------------------------------------------------------------------------
// Formulas
// ---------------------------------------------------------------------------

/// Boolean formula over concept literals. Ordering is derived so
/// canonical forms are unique: constants, then literals by concept id,
/// then nested formulas.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum RuleExpr {
    True,
    False,
    Lit { concept: usize, negated: bool },
    And(Vec<RuleExpr>),
    Or(Vec<RuleExpr>),
}

impl RuleExpr {
    /// Flattens same-operator nesting, sorts and deduplicates children,
    /// collapses units: an empty conjunction is true, an empty disjunction
    /// false, a one-child gate its child.
    pub fn canon(self) -> RuleExpr {
        match self {
            RuleExpr::And(children) => {
                let mut flat = Vec::new();
                for c in children {
                    match c.canon() {
                        RuleExpr::True => {}
                        RuleExpr::And(inner) => flat.extend(inner),
                        RuleExpr::False => return RuleExpr::False,
                        other => flat.push(other),
                    }
                }
                flat.sort();
                flat.dedup();
                match flat.len() {
                    0 => RuleExpr::True,
                    1 => flat.pop().unwrap(),
                    _ => RuleExpr::And(flat),
                }
            }
            RuleExpr::Or(children) => {
                let mut flat = Vec::new();
                for c in children {
                    match c.canon() {
                        RuleExpr::False => {}
                        RuleExpr::Or(inner) => flat.extend(inner),
                        RuleExpr::True => return RuleExpr::True,
                        other => flat.push(other),
                    }
                }
                flat.sort();
                flat.dedup();
                match flat.len() {
                    0 => RuleExpr::False,
                    1 => flat.pop().unwrap(),
                    _ => RuleExpr::Or(flat),
                }
            }
            leaf => leaf,
        }
    }

    pub fn eval(&self, bits: &[u8]) -> bool {
        match self {
            RuleExpr::True => true,
            RuleExpr::False => false,
            RuleExpr::Lit { concept, negated } => (bits[*concept] == 1) != *negated,
            RuleExpr::And(cs) => cs.iter().all(|c| c.eval(bits)),
            RuleExpr::Or(cs) => cs.iter().any(|c| c.eval(bits)),
        }
    }

    /// Prefix notation with concept names: `(and walk (not run))`.
    pub fn render(&self, vocab: &ConceptVocabulary) -> String {
        match self {
            RuleExpr::True => "true".to_string(),
            RuleExpr::False => "false".to_string(),
            RuleExpr::Lit { concept, negated } => {
                let name = &vocab.concepts()[*concept].name;
                if *negated {
                    format!("(not {name})")
                } else {
                    name.clone()
                }
            }
            RuleExpr::And(cs) => {
                let inner: Vec<String> = cs.iter().map(|c| c.render(vocab)).collect();
                format!("(and {})", inner.join(" "))
            }
            RuleExpr::Or(cs) => {
                let inner: Vec<String> = cs.iter().map(|c| c.render(vocab)).collect();
                format!("(or {})", inner.join(" "))
            }
        }
    }
}

/// The formula each representation slot computes, in slot order. Mirrors
/// the discrete forward pass exactly: gate semantics, skip layout, final
/// concatenation order.
pub fn representation_exprs(net: &LogicNetwork) -> Vec<RuleExpr> {
    let negation = net.config.negation;
    let c = net.concepts;
    let mut predicates: Vec<RuleExpr> = (0..c)
        .map(|i| RuleExpr::Lit { concept: i, negated: false })
        .collect();
    if negation {
        predicates.extend((0..c).map(|i| RuleExpr::Lit { concept: i, negated: true }));
    }

    let hard = net.binarize_weights();
    let mut bands: Vec<(Vec<RuleExpr>, Vec<RuleExpr>)> = Vec::with_capacity(hard.len());
    let mut input = predicates.clone();
    for (wa, wo) in &hard {
        let pick = |w: &ndarray::Array2<u8>, i: usize| -> Vec<RuleExpr> {
            (0..w.ncols())
                .filter(|&j| w[[i, j]] == 1)
                .map(|j| input[j].clone())
                .collect()
        };
        let a: Vec<RuleExpr> = (0..wa.nrows())
            .map(|i| RuleExpr::And(pick(wa, i)).canon())
            .collect();
        let b: Vec<RuleExpr> = (0..wo.nrows())
            .map(|i| RuleExpr::Or(pick(wo, i)).canon())
            .collect();
        input = if net.config.skip {
            a.iter().chain(b.iter()).cloned().chain(predicates.iter().cloned()).collect()
        } else {
            a.iter().chain(b.iter()).cloned().collect()
        };
        bands.push((a, b));
    }

    if net.config.skip {
        let mut out = predicates;
        for (a, b) in bands {
            out.extend(a);
            out.extend(b);
        }
        out
    } else {
        let (a, b) = bands.pop().unwrap();
        a.into_iter().chain(b).collect()
    }
}

// ---------------------------------------------------------------------------
// Extracted rule files
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleTerm {
    pub slot: usize,
    pub weight: f64,
    pub expr: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionRules {
    pub action: String,
    pub terms: Vec<RuleTerm>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RulesFile {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub representation_width: usize,
    pub actions: Vec<ActionRules>,
}

/// Per action, the `top_k` slots with the largest absolute classifier
/// weight, strongest first; ties resolve to the smaller slot.
pub fn extract_rules(
    net: &LogicNetwork,
    classifier: &ClassifierParams,
    vocab: &ConceptVocabulary,
    action_names: &[String],
    top_k: usize,
    config_hash: &str,
    seed: u64,
) -> Result<RulesFile> {
    let exprs = representation_exprs(net);
    let w = classifier.weights.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let mut actions = Vec::with_capacity(action_names.len());
    for (a, name) in action_names.iter().enumerate() {
        let mut order: Vec<usize> = (0..w.ncols()).collect();
        order.sort_by(|&i, &j| {
            w[[a, j]].abs().total_cmp(&w[[a, i]].abs()).then(i.cmp(&j))
        });
        let terms = order
            .into_iter()
            .take(top_k)
            .map(|slot| RuleTerm {
                slot,
                weight: w[[a, slot]],
                expr: exprs[slot].render(vocab),
            })
            .collect();
        actions.push(ActionRules { action: name.clone(), terms });
    }
    Ok(RulesFile {
        schema_version: crate::SCHEMA_VERSION,
        config_hash: config_hash.to_string(),
        seed,
        representation_width: exprs.len(),
        actions,
    })
}

/// Slots that fired for one sample, ranked by signed contribution to the
/// predicted action's score.
pub fn explain_instance(
    net: &LogicNetwork,
    classifier: &ClassifierParams,
    vocab: &ConceptVocabulary,
    representation: &[u8],
    action: usize,
    top_k: usize,
) -> Vec<RuleTerm> {
    let exprs = representation_exprs(net);
    let w = classifier.weights.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let mut fired: Vec<usize> = (0..representation.len())
        .filter(|&j| representation[j] == 1)
        .collect();
    fired.sort_by(|&i, &j| {
        w[[action, j]].abs().total_cmp(&w[[action, i]].abs()).then(i.cmp(&j))
    });
    fired
        .into_iter()
        .take(top_k)
        .map(|slot| RuleTerm {
            slot,
            weight: w[[action, slot]],
            expr: exprs[slot].render(vocab),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logic::{augment, LogicConfig};
    use approx::assert_relative_eq;

    fn lit(c: usize) -> RuleExpr {
        RuleExpr::Lit { concept: c, negated: false }
    }

    fn neg(c: usize) -> RuleExpr {
        RuleExpr::Lit { concept: c, negated: true }
    }

    #[test]
    fn canonicalization_flattens_sorts_and_collapses() {
        let e = RuleExpr::And(vec![
            RuleExpr::And(vec![lit(2), lit(0)]),
            lit(1),
            lit(0),
            RuleExpr::True,
        ]);
        assert_eq!(e.canon(), RuleExpr::And(vec![lit(0), lit(1), lit(2)]));

        assert_eq!(RuleExpr::And(vec![]).canon(), RuleExpr::True);
        assert_eq!(RuleExpr::Or(vec![]).canon(), RuleExpr::False);
        assert_eq!(RuleExpr::Or(vec![lit(3)]).canon(), lit(3));
        assert_eq!(
            RuleExpr::And(vec![lit(1), RuleExpr::False]).canon(),
            RuleExpr::False
        );
        assert_eq!(
            RuleExpr::Or(vec![lit(1), RuleExpr::True]).canon(),
            RuleExpr::True
        );
        // Negated literal sorts directly after its positive form.
        assert_eq!(
            RuleExpr::Or(vec![neg(0), lit(1), lit(0)]).canon(),
            RuleExpr::Or(vec![lit(0), neg(0), lit(1)])
        );
    }

    #[test]
    fn rendering_uses_concept_names() {
        let vocab = crate::concept_bank::fixtures::fixture_vocabulary("desk67").unwrap();
        let e = RuleExpr::And(vec![lit(0), RuleExpr::Or(vec![neg(1), lit(2)])]).canon();
        let s = e.render(&vocab);
        let names = vocab.names();
        assert!(s.starts_with("(and "));
        assert!(s.contains(&names[0]));
        assert!(s.contains(&format!("(not {})", names[1])));
    }

    /// Every representation slot's extracted formula computes exactly the
    /// bit the discrete network computes, for every possible concept
    /// input. Covers skip and no-skip, negation and no-negation.
    #[test]
    fn extracted_formulas_match_network_on_all_inputs() {
        for (skip, negation, seed) in
            [(true, true, 0u64), (true, false, 1), (false, true, 2), (false, false, 3)]
        {
            let net = LogicNetwork::init(
                LogicConfig { layers: 2, width: 3, skip, negation },
                3,
                seed,
            )
            .unwrap();
            let exprs = representation_exprs(&net);
            assert_eq!(exprs.len(), net.representation_width());
            for mask in 0u32..8 {
                let bits: Vec<u8> = (0..3).map(|i| ((mask >> i) & 1) as u8).collect();
                let p = augment(&bits, negation);
                let trace = net.forward_discrete(&p);
                for (slot, expr) in exprs.iter().enumerate() {
                    assert_eq!(
                        expr.eval(&bits),
                        trace.representation[slot] == 1,
                        "skip={skip} negation={negation} mask={mask} slot={slot}"
                    );
                }
            }
        }
    }

    #[test]
    fn classify_matches_predict_and_gradients_flow() {
        let params = ClassifierParams::init(4, 6, 3);
        let rep = vec![1u8, 0, 1, 1, 0, 1];
        let (pred, scores) = predict(&params, &rep);

        let mut tape = Tape::new();
        let r = tape.leaf(
            ndarray::Array1::from_iter(rep.iter().map(|&b| f64::from(b))).into_dyn(),
        );
        let (snode, w, _) = classify(&mut tape, &params, r);
        let tape_scores = tape.value(snode).as_slice().unwrap().to_vec();
        for (a, b) in scores.iter().zip(tape_scores.iter()) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
        let loss = task_loss(&mut tape, snode, pred);
        let grads = tape.backward(loss);
        assert!(grads.get(w).is_some());
    }

    #[test]
    fn task_loss_matches_finite_differences() {
        let params = ClassifierParams::init(3, 4, 9);
        let rep_f: Vec<f64> = vec![1.0, 0.0, 1.0, 1.0];
        let label = 2usize;
        let loss_at = |p: &ClassifierParams| {
            let mut tape = Tape::new();
            let r = tape.leaf(ndarray::Array1::from_vec(rep_f.clone()).into_dyn());
            let (s, _, _) = classify(&mut tape, p, r);
            let l = task_loss(&mut tape, s, label);
            tape.value(l)[IxDyn(&[])]
        };
        let mut tape = Tape::new();
        let r = tape.leaf(ndarray::Array1::from_vec(rep_f.clone()).into_dyn());
        let (s, w, b) = classify(&mut tape, &params, r);
        let l = task_loss(&mut tape, s, label);
        let grads = tape.backward(l);
        let h = 1e-6;
        for (node, pick) in [(w, 0usize), (b, 1usize)] {
            let g = grads.get(node).unwrap().clone();
            for idx in 0..g.len() {
                let mut plus = params.clone();
                let mut minus = params.clone();
                {
                    let t = if pick == 0 { &mut plus.weights } else { &mut plus.bias };
                    Arc::make_mut(t).as_slice_mut().unwrap()[idx] += h;
                }
                {
                    let t = if pick == 0 { &mut minus.weights } else { &mut minus.bias };
                    Arc::make_mut(t).as_slice_mut().unwrap()[idx] -= h;
                }
                let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                let an = g.as_slice().unwrap()[idx];
                assert!(
                    (fd - an).abs() / fd.abs().max(an.abs()).max(1.0) < 1e-5,
                    "idx {idx}: fd {fd} vs {an}"
                );
            }
        }
    }

    #[test]
    fn extraction_ranks_by_absolute_weight() {
        let net = LogicNetwork::init(
            LogicConfig { layers: 1, width: 2, skip: true, negation: true },
            3,
            5,
        )
        .unwrap();
        let mut classifier = ClassifierParams::init(2, net.representation_width(), 5);
        {
            let w = Arc::make_mut(&mut classifier.weights);
            let s = w.as_slice_mut().unwrap();
            for e in s.iter_mut() {
                *e = 0.0;
            }
            // Action 0: strongest slots 4 (negative) then 1 (positive).
            s[4] = -2.0;
            s[1] = 1.5;
            s[0] = 0.1;
        }
        let vocab = planted_vocab();
        let names = vec!["a".to_string(), "b".to_string()];
        let rules =
            extract_rules(&net, &classifier, &vocab, &names, 2, "hash", 0).unwrap();
        assert_eq!(rules.actions.len(), 2);
        let terms = &rules.actions[0].terms;
        assert_eq!(terms.len(), 2);
        assert_eq!(terms[0].slot, 4);
        assert_eq!(terms[0].weight, -2.0);
        assert_eq!(terms[1].slot, 1);
        // Slot 1 is the positive literal for concept 1.
        assert_eq!(terms[1].expr, vocab.names()[1]);
    }

    /// Three named concepts, enough for the three-concept nets here.
    fn planted_vocab() -> ConceptVocabulary {
        let (vocab, _) = crate::synthetic::planted_bank(2, 6, 0).unwrap();
        ConceptVocabulary::new(vocab.concepts()[..3].to_vec()).unwrap()
    }

    #[test]
    fn instance_explanations_list_only_fired_slots() {
        let net = LogicNetwork::init(
            LogicConfig { layers: 1, width: 2, skip: true, negation: true },
            3,
            6,
        )
        .unwrap();
        let classifier = ClassifierParams::init(2, net.representation_width(), 6);
        let vocab = planted_vocab();
        let rep: Vec<u8> = (0..net.representation_width())
            .map(|i| u8::from(i % 3 == 0))
            .collect();
        let terms = explain_instance(&net, &classifier, &vocab, &rep, 1, 4);
        assert!(!terms.is_empty());
        for t in &terms {
            assert_eq!(rep[t.slot], 1, "explanation cites an unfired slot");
        }
        // Ranked by absolute weight, descending.
        for pair in terms.windows(2) {
            assert!(pair[0].weight.abs() >= pair[1].weight.abs());
        }
    }

    #[test]
    fn rules_file_round_trips() {
        let net = LogicNetwork::init(
            LogicConfig { layers: 1, width: 2, skip: false, negation: false },
            3,
            8,
        )
        .unwrap();
        let classifier = ClassifierParams::init(2, net.representation_width(), 8);
        let vocab = planted_vocab();
        let names = vec!["x".to_string(), "y".to_string()];
        let rules = extract_rules(&net, &classifier, &vocab, &names, 3, "h", 1).unwrap();
        let text = serde_json::to_string_pretty(&rules).unwrap();
        let back: RulesFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back.actions.len(), rules.actions.len());
        assert_eq!(back.actions[0].terms[0].expr, rules.actions[0].terms[0].expr);
        assert_eq!(back.representation_width, net.representation_width());
    }
}
