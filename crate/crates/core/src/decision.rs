//! Collective wisdom decision: class distributions from the expert output
//! and the citizen cognitions, blended by weighted voting into the final
//! verdict.
//!
//! Linear classification heads precede each softmax so that d- and
//! 2d-dimensional activations map onto C classes; the voting matrices are
//! learned and initialized to identity.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::Param;

/// How the n citizen distributions are combined before voting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CitizenAggregate {
    Mean,
    Sum,
}

/// Classification heads. Either side may be absent in ablated models; an
/// absent side carries no parameters at all. One citizen head is shared by
/// default; per-citizen heads are a configuration option.
#[derive(Debug, Clone)]
pub struct DecisionHeads {
    /// `d x C` map from the expert output.
    pub expert_head: Option<Param>,
    /// `2d x C` maps from fused citizen cognitions: empty, one shared, or
    /// one per citizen.
    pub citizen_heads: Vec<Param>,
    pub classes: usize,
}

pub struct DecisionHeadsVars {
    expert_head: Option<Var>,
    citizen_heads: Vec<Var>,
}

impl DecisionHeadsVars {
    pub(crate) fn param_vars(&self) -> Vec<Var> {
        self.expert_head
            .into_iter()
            .chain(self.citizen_heads.iter().copied())
            .collect()
    }
}

impl DecisionHeads {
    /// `citizen_head_count`: 0 for no citizen branch, 1 for a shared head,
    /// n for per-citizen heads.
    pub fn new(
        name: &str,
        d: usize,
        classes: usize,
        with_expert: bool,
        citizen_head_count: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!(
                "class count must be at least 2, got {classes}"
            )));
        }
        let citizen_heads = match citizen_head_count {
            0 => Vec::new(),
            1 => vec![Param::glorot(format!("{name}.citizen"), 2 * d, classes, rng)],
            n => (0..n)
                .map(|j| Param::glorot(format!("{name}.citizen.{j}"), 2 * d, classes, rng))
                .collect(),
        };
        Ok(DecisionHeads {
            expert_head: with_expert
                .then(|| Param::glorot(format!("{name}.expert"), d, classes, rng)),
            citizen_heads,
            classes,
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> DecisionHeadsVars {
        DecisionHeadsVars {
            expert_head: self.expert_head.as_ref().map(|p| p.bind(tape)),
            citizen_heads: self.citizen_heads.iter().map(|p| p.bind(tape)).collect(),
        }
    }

    /// softmax(expert_head(h))
    pub fn expert_decide_on(
        &self,
        tape: &mut Tape,
        vars: &DecisionHeadsVars,
        h: Var,
    ) -> Result<Var> {
        let head = vars
            .expert_head
            .ok_or_else(|| Error::Config("model has no expert head".into()))?;
        let logits = tape.matmul(h, head)?;
        tape.softmax(logits, 0)
    }

    /// softmax(citizen_head_j(c_row)), applied independently per citizen.
    pub fn citizen_decide_on(
        &self,
        tape: &mut Tape,
        vars: &DecisionHeadsVars,
        c_row: Var,
        citizen: usize,
    ) -> Result<Var> {
        if vars.citizen_heads.is_empty() {
            return Err(Error::Config("model has no citizen head".into()));
        }
        let idx = if vars.citizen_heads.len() == 1 { 0 } else { citizen };
        let head = *vars
            .citizen_heads
            .get(idx)
            .ok_or_else(|| Error::Config(format!("no head for citizen {citizen}")))?;
        let logits = tape.matmul(c_row, head)?;
        tape.softmax(logits, 0)
    }

    pub fn expert_decide(&self, h: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let hv = tape.constant_vector(h);
        let out = self.expert_decide_on(&mut tape, &vars, hv)?;
        Ok(tape.value(out).to_vec())
    }

    /// Decide with the shared head (or head 0).
    pub fn citizen_decide(&self, c_row: &[f64]) -> Result<Vec<f64>> {
        self.citizen_decide_for(c_row, 0)
    }

    pub fn citizen_decide_for(&self, c_row: &[f64], citizen: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let cv = tape.constant_vector(c_row);
        let out = self.citizen_decide_on(&mut tape, &vars, cv, citizen)?;
        Ok(tape.value(out).to_vec())
    }
}

/// The `C x C` voting matrices. Learned and identity-initialized by default;
/// the no-weighted-voting ablation freezes them at identity.
#[derive(Debug, Clone)]
pub struct VotingWeights {
    pub expert_weight: Option<Param>,
    pub citizen_weight: Option<Param>,
}

pub struct VotingWeightsVars {
    expert_weight: Option<Var>,
    citizen_weight: Option<Var>,
}

impl VotingWeightsVars {
    pub(crate) fn param_vars(&self) -> Vec<Var> {
        self.expert_weight
            .into_iter()
            .chain(self.citizen_weight)
            .collect()
    }
}

impl VotingWeights {
    pub fn learned(name: &str, classes: usize, with_expert: bool, with_citizen: bool) -> Self {
        VotingWeights {
            expert_weight: with_expert.then(|| Param::identity(format!("{name}.expert"), classes)),
            citizen_weight: with_citizen
                .then(|| Param::identity(format!("{name}.citizen"), classes)),
        }
    }

    pub fn identity_frozen(name: &str, classes: usize) -> Self {
        VotingWeights {
            expert_weight: Some(Param::identity(format!("{name}.expert"), classes).frozen()),
            citizen_weight: Some(Param::identity(format!("{name}.citizen"), classes).frozen()),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> VotingWeightsVars {
        VotingWeightsVars {
            expert_weight: self.expert_weight.as_ref().map(|p| p.bind(tape)),
            citizen_weight: self.citizen_weight.as_ref().map(|p| p.bind(tape)),
        }
    }
}

/// Final class distribution plus its argmax reading.
#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub probabilities: Vec<f64>,
    pub label: usize,
    pub confidence: f64,
    pub class_names: Vec<String>,
}

impl Verdict {
    /// Assemble from a probability vector; ties break toward the lower index.
    pub fn new(probabilities: Vec<f64>, class_names: Vec<String>) -> Result<Self> {
        if probabilities.is_empty() || probabilities.len() != class_names.len() {
            return Err(Error::shape(
                "Verdict::new",
                &[probabilities.len()],
                &[class_names.len()],
            ));
        }
        let mut label = 0;
        for (i, &p) in probabilities.iter().enumerate() {
            if p > probabilities[label] {
                label = i;
            }
        }
        let confidence = probabilities[label];
        Ok(Verdict {
            probabilities,
            label,
            confidence,
            class_names,
        })
    }

    pub fn label_name(&self) -> &str {
        &self.class_names[self.label]
    }

    /// `{"label": str, "confidence": float, "probabilities": {class: float}}`
    pub fn to_json(&self) -> serde_json::Value {
        let mut probs = serde_json::Map::new();
        for (name, p) in self.class_names.iter().zip(&self.probabilities) {
            probs.insert(name.clone(), serde_json::json!(p));
        }
        serde_json::json!({
            "label": self.label_name(),
            "confidence": self.confidence,
            "probabilities": probs,
        })
    }
}

pub fn default_class_names(classes: usize) -> Vec<String> {
    if classes == 2 {
        vec!["non-rumor".to_string(), "rumor".to_string()]
    } else {
        (0..classes).map(|c| format!("class-{c}")).collect()
    }
}

/// Voting on the tape. Either branch may be absent; at least one must be
/// present, and an absent branch contributes nothing to the logits.
pub fn vote_on(
    tape: &mut Tape,
    expert_probs: Option<Var>,
    citizen_probs: Option<&[Var]>,
    vars: &VotingWeightsVars,
    aggregate: CitizenAggregate,
) -> Result<Var> {
    let mut logits: Option<Var> = None;
    if let Some(e) = expert_probs {
        let w = vars
            .expert_weight
            .ok_or_else(|| Error::Config("voting has no expert weight matrix".into()))?;
        logits = Some(tape.matmul(w, e)?);
    }
    if let Some(rows) = citizen_probs {
        if rows.is_empty() {
            return Err(Error::data("collective_vote requires at least one citizen"));
        }
        let stacked = tape.stack_rows(rows)?;
        let combined = match aggregate {
            CitizenAggregate::Mean => tape.mean_rows(stacked)?,
            CitizenAggregate::Sum => tape.sum_rows(stacked)?,
        };
        let w = vars
            .citizen_weight
            .ok_or_else(|| Error::Config("voting has no citizen weight matrix".into()))?;
        let term = tape.matmul(w, combined)?;
        logits = Some(match logits {
            None => term,
            Some(prev) => tape.add(prev, term)?,
        });
    }
    let logits = logits.ok_or_else(|| Error::Config("voting requires at least one branch".into()))?;
    tape.softmax(logits, 0)
}

/// softmax(W_e . E + W_c . mean_j D_j) over plain slices.
pub fn collective_vote(
    expert_probs: &[f64],
    citizen_probs: &[Vec<f64>],
    weights: &VotingWeights,
    aggregate: CitizenAggregate,
    class_names: Vec<String>,
) -> Result<Verdict> {
    let mut tape = Tape::new();
    let vars = weights.bind(&mut tape);
    let e = tape.constant_vector(expert_probs);
    let rows: Vec<Var> = citizen_probs
        .iter()
        .map(|r| tape.constant_vector(r))
        .collect();
    let f = vote_on(&mut tape, Some(e), Some(&rows), &vars, aggregate)?;
    Verdict::new(tape.value(f).to_vec(), class_names)
}
