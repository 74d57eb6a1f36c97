//! The assembled two-branch classifier: routing plus experts on one side,
//! citizen diversification, recurrent encoding and graph attention on the
//! other, fused by weighted voting.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::citizen::{
    fuse_cognition_on, CitizenResolver, CitizenResolverVars, GraphAttention, GraphAttentionVars,
    SequenceEncoder, SequenceEncoderVars,
};
use crate::decision::{
    default_class_names, vote_on, CitizenAggregate, DecisionHeads, DecisionHeadsVars, Verdict,
    VotingWeights, VotingWeightsVars,
};
use crate::error::{Error, Result};
use crate::expert::{ExpertBank, ExpertBankVars};
use crate::params::Param;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    NoCitizen,
    NoExpert,
    NoWeightedVoting,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant::Full,
        AblationVariant::NoCitizen,
        AblationVariant::NoExpert,
        AblationVariant::NoWeightedVoting,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoCitizen => "no_citizen",
            AblationVariant::NoExpert => "no_expert",
            AblationVariant::NoWeightedVoting => "no_weighted_voting",
        }
    }

    pub fn has_expert(self) -> bool {
        self != AblationVariant::NoExpert
    }

    pub fn has_citizen(self) -> bool {
        self != AblationVariant::NoCitizen
    }
}

impl std::str::FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation variant \"{s}\"")))
    }
}

/// Architecture hyperparameters. Travels with the weights when a model is
/// serialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_experts")]
    pub experts: usize,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_citizens")]
    pub citizens: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default)]
    pub expert_hidden: Option<usize>,
    #[serde(default)]
    pub mlp_hidden: Option<usize>,
    #[serde(default)]
    pub lstm_hidden: Option<usize>,
    #[serde(default = "default_true")]
    pub attention_scaling: bool,
    #[serde(default = "default_variant")]
    pub variant: AblationVariant,
    #[serde(default = "default_aggregate")]
    pub citizen_aggregate: CitizenAggregate,
    #[serde(default)]
    pub class_names: Vec<String>,
}

fn default_true() -> bool {
    true
}

fn default_d() -> usize {
    768
}

fn default_experts() -> usize {
    10
}

fn default_top_k() -> usize {
    2
}

fn default_citizens() -> usize {
    10
}

fn default_classes() -> usize {
    2
}

fn default_variant() -> AblationVariant {
    AblationVariant::Full
}

fn default_aggregate() -> CitizenAggregate {
    CitizenAggregate::Mean
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: default_d(),
            experts: default_experts(),
            top_k: default_top_k(),
            citizens: default_citizens(),
            classes: default_classes(),
            expert_hidden: None,
            mlp_hidden: None,
            lstm_hidden: None,
            attention_scaling: true,
            variant: AblationVariant::Full,
            citizen_aggregate: CitizenAggregate::Mean,
            class_names: Vec::new(),
        }
    }
}

impl ModelConfig {
    pub fn expert_hidden(&self) -> usize {
        self.expert_hidden.unwrap_or(self.d)
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_hidden.unwrap_or(self.d)
    }

    pub fn lstm_hidden(&self) -> usize {
        self.lstm_hidden.unwrap_or((self.d / 2).max(1))
    }

    pub fn class_names(&self) -> Vec<String> {
        if self.class_names.is_empty() {
            default_class_names(self.classes)
        } else {
            self.class_names.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("d must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("classes must be at least 2".into()));
        }
        if self.variant.has_expert() && (self.top_k == 0 || self.top_k > self.experts) {
            return Err(Error::Config(format!(
                "need 1 <= top_k <= experts, got top_k={} experts={}",
                self.top_k, self.experts
            )));
        }
        if self.variant.has_citizen() && self.citizens == 0 {
            return Err(Error::Config("citizens must be at least 1".into()));
        }
        if !self.class_names.is_empty() && self.class_names.len() != self.classes {
            return Err(Error::Config(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.classes
            )));
        }
        Ok(())
    }
}

/// The citizen branch components.
#[derive(Debug, Clone)]
pub struct CitizenParts {
    pub resolver: CitizenResolver,
    pub encoder: SequenceEncoder,
    pub attention: GraphAttention,
}

pub struct CitizenPartsVars {
    resolver: CitizenResolverVars,
    encoder: SequenceEncoderVars,
    attention: GraphAttentionVars,
}

/// All learnable state of the classifier.
#[derive(Debug, Clone)]
pub struct EccwModel {
    pub config: ModelConfig,
    pub expert: Option<ExpertBank>,
    pub citizen: Option<CitizenParts>,
    pub heads: DecisionHeads,
    pub voting: VotingWeights,
}

pub struct EccwModelVars {
    expert: Option<ExpertBankVars>,
    citizen: Option<CitizenPartsVars>,
    heads: DecisionHeadsVars,
    voting: VotingWeightsVars,
}

impl EccwModel {
    /// Build a model with Glorot-uniform initialization drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let variant = config.variant;

        let expert = variant
            .has_expert()
            .then(|| {
                ExpertBank::new(
                    "expert",
                    config.d,
                    config.expert_hidden(),
                    config.experts,
                    config.top_k,
                    &mut rng,
                )
            })
            .transpose()?;

        let citizen = variant
            .has_citizen()
            .then(|| -> Result<CitizenParts> {
                Ok(CitizenParts {
                    resolver: CitizenResolver::new(
                        "citizen",
                        config.citizens,
                        config.d,
                        config.mlp_hidden(),
                        &mut rng,
                    )?,
                    encoder: SequenceEncoder::new(
                        "encoder",
                        config.d,
                        config.lstm_hidden(),
                        &mut rng,
                    ),
                    attention: GraphAttention::new(
                        "attention",
                        config.d,
                        config.citizens,
                        config.attention_scaling,
                        &mut rng,
                    ),
                })
            })
            .transpose()?;

        let heads = DecisionHeads::new(
            "head",
            config.d,
            config.classes,
            variant.has_expert(),
            variant.has_citizen(),
            &mut rng,
        )?;

        let voting = if variant == AblationVariant::NoWeightedVoting {
            VotingWeights::identity_frozen("vote", config.classes)
        } else {
            VotingWeights::learned(
                "vote",
                config.classes,
                variant.has_expert(),
                variant.has_citizen(),
            )
        };

        Ok(EccwModel {
            config,
            expert,
            citizen,
            heads,
            voting,
        })
    }

    /// Every parameter in a fixed traversal order.
    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        if let Some(bank) = &self.expert {
            out.extend(bank.params());
        }
        if let Some(parts) = &self.citizen {
            for mlp in &parts.resolver.mlps {
                out.extend(mlp.params());
            }
            for cell in [&parts.encoder.forward_cell, &parts.encoder.backward_cell] {
                out.extend(cell.params());
            }
            out.push(&parts.encoder.projection);
            out.push(&parts.attention.query);
            out.push(&parts.attention.key);
            out.push(&parts.attention.value);
        }
        if let Some(p) = &self.heads.expert_head {
            out.push(p);
        }
        if let Some(p) = &self.heads.citizen_head {
            out.push(p);
        }
        if let Some(p) = &self.voting.expert_weight {
            out.push(p);
        }
        if let Some(p) = &self.voting.citizen_weight {
            out.push(p);
        }
        out
    }

    /// Same traversal as [`EccwModel::params`], mutably.
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        if let Some(bank) = &mut self.expert {
            out.extend(bank.params_mut());
        }
        if let Some(parts) = &mut self.citizen {
            for mlp in &mut parts.resolver.mlps {
                out.extend(mlp.params_mut());
            }
            for cell in [
                &mut parts.encoder.forward_cell,
                &mut parts.encoder.backward_cell,
            ] {
                out.extend(cell.params_mut());
            }
            out.push(&mut parts.encoder.projection);
            out.push(&mut parts.attention.query);
            out.push(&mut parts.attention.key);
            out.push(&mut parts.attention.value);
        }
        if let Some(p) = &mut self.heads.expert_head {
            out.push(p);
        }
        if let Some(p) = &mut self.heads.citizen_head {
            out.push(p);
        }
        if let Some(p) = &mut self.voting.expert_weight {
            out.push(p);
        }
        if let Some(p) = &mut self.voting.citizen_weight {
            out.push(p);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> EccwModelVars {
        EccwModelVars {
            expert: self.expert.as_ref().map(|b| b.bind(tape)),
            citizen: self.citizen.as_ref().map(|c| CitizenPartsVars {
                resolver: c.resolver.bind(tape),
                encoder: c.encoder.bind(tape),
                attention: c.attention.bind(tape),
            }),
            heads: self.heads.bind(tape),
            voting: self.voting.bind(tape),
        }
    }

    /// Tape vars aligned with [`EccwModel::params`]. Frozen parameters bind
    /// as constants and surface no gradient.
    pub fn param_vars(&self, vars: &EccwModelVars) -> Vec<Var> {
        // Rebinding yields the same vars only on a fresh tape, so collect from
        // the existing binding structs instead.
        let mut out = Vec::new();
        if let (Some(bank), Some(bv)) = (&self.expert, &vars.expert) {
            out.extend(bank.param_vars(bv));
        }
        if let Some(cv) = &vars.citizen {
            out.extend(cv.resolver.param_vars());
            out.extend(cv.encoder.param_vars());
            out.extend(cv.attention.param_vars());
        }
        out.extend(vars.heads.param_vars());
        out.extend(vars.voting.param_vars());
        out
    }

    /// Full forward pass producing the class distribution F.
    pub fn forward_on(&self, tape: &mut Tape, vars: &EccwModelVars, s: Var) -> Result<Var> {
        let expert_probs = match (&self.expert, &vars.expert) {
            (Some(bank), Some(bv)) => {
                let (h, _) = bank.moe_forward_on(tape, bv, s)?;
                Some(self.heads.expert_decide_on(tape, &vars.heads, h)?)
            }
            _ => None,
        };

        let citizen_rows: Option<Vec<Var>> = match (&self.citizen, &vars.citizen) {
            (Some(parts), Some(cv)) => {
                let initial = parts.resolver.diversify_on(tape, &cv.resolver, s)?;
                let encoded = parts.encoder.encode_on(tape, &cv.encoder, &initial)?;
                let attended = parts.attention.attend_on(tape, &cv.attention, &encoded)?;
                let fused = fuse_cognition_on(tape, &initial, &attended)?;
                let mut rows = Vec::with_capacity(fused.len());
                for row in fused {
                    rows.push(self.heads.citizen_decide_on(tape, &vars.heads, row)?);
                }
                Some(rows)
            }
            _ => None,
        };

        vote_on(
            tape,
            expert_probs,
            citizen_rows.as_deref(),
            &vars.voting,
            self.config.citizen_aggregate,
        )
    }

    /// Embedded claim in, verdict out.
    pub fn forward_full(&self, s: &[f64]) -> Result<Verdict> {
        if s.len() != self.config.d {
            return Err(Error::shape("forward_full", &[s.len()], &[self.config.d]));
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let sv = tape.constant_vector(s);
        let f = self.forward_on(&mut tape, &vars, sv)?;
        Verdict::new(tape.value(f).to_vec(), self.config.class_names())
    }
}
