//! Domain expert discrimination: a router assigns each embedded claim to a
//! sparse set of expert feed-forward networks whose outputs are blended by
//! the gate coefficients.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::Param;

/// Router weights plus the sparsity setting.
#[derive(Debug, Clone)]
pub struct RouterParams {
    /// `d x E` routing matrix.
    pub weight: Param,
    pub expert_count: usize,
    pub top_k: usize,
}

/// Per-expert mixing coefficients: non-negative, at most `top_k` non-zero,
/// and the non-zero entries sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct GateVector {
    pub coefficients: Vec<f64>,
    /// Indices of the retained experts, ascending.
    pub selected: Vec<usize>,
}

/// Two-layer feed-forward expert without biases.
#[derive(Debug, Clone)]
pub struct ExpertFfn {
    /// Input projection, `d x h`.
    pub wi: Param,
    /// Output projection, `h x d`.
    pub wo: Param,
}

pub struct RouterVars {
    pub weight: Var,
}

pub struct ExpertFfnVars {
    pub wi: Var,
    pub wo: Var,
}

impl RouterParams {
    pub fn new(
        name: &str,
        d: usize,
        expert_count: usize,
        top_k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if expert_count == 0 || top_k == 0 || top_k > expert_count {
            return Err(Error::Config(format!(
                "router needs 1 <= top_k <= E, got top_k={top_k}, E={expert_count}"
            )));
        }
        Ok(RouterParams {
            weight: Param::glorot(format!("{name}.w"), d, expert_count, rng),
            expert_count,
            top_k,
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> RouterVars {
        RouterVars {
            weight: self.weight.bind(tape),
        }
    }

    /// softmax(s . W), top-k masked, survivors renormalized to sum 1.
    pub fn route_on(&self, tape: &mut Tape, vars: &RouterVars, s: Var) -> Result<Var> {
        let logits = tape.matmul(s, vars.weight)?;
        let probs = tape.softmax(logits, 0)?;
        tape.topk_renorm(probs, self.top_k)
    }

    /// Convenience wrapper over a throwaway tape.
    pub fn route(&self, s: &[f64]) -> Result<GateVector> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let sv = tape.constant_vector(s);
        let gate = self.route_on(&mut tape, &vars, sv)?;
        let coefficients = tape.value(gate).to_vec();
        let selected = selected_indices(&coefficients);
        Ok(GateVector {
            coefficients,
            selected,
        })
    }
}

fn selected_indices(coefficients: &[f64]) -> Vec<usize> {
    coefficients
        .iter()
        .enumerate()
        .filter(|(_, &c)| c != 0.0)
        .map(|(i, _)| i)
        .collect()
}

impl ExpertFfn {
    pub fn new(name: &str, d: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        ExpertFfn {
            wi: Param::glorot(format!("{name}.wi"), d, hidden, rng),
            wo: Param::glorot(format!("{name}.wo"), hidden, d, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> ExpertFfnVars {
        ExpertFfnVars {
            wi: self.wi.bind(tape),
            wo: self.wo.bind(tape),
        }
    }

    /// wo . ReLU(wi . s)
    pub fn forward_on(&self, tape: &mut Tape, vars: &ExpertFfnVars, s: Var) -> Result<Var> {
        let hidden = tape.matmul(s, vars.wi)?;
        let activated = tape.relu(hidden);
        tape.matmul(activated, vars.wo)
    }

    pub fn forward(&self, s: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let sv = tape.constant_vector(s);
        let out = self.forward_on(&mut tape, &vars, sv)?;
        Ok(tape.value(out).to_vec())
    }
}

/// Router plus its bank of experts.
#[derive(Debug, Clone)]
pub struct ExpertBank {
    pub router: RouterParams,
    pub experts: Vec<ExpertFfn>,
}

pub struct ExpertBankVars {
    pub router: RouterVars,
    pub experts: Vec<ExpertFfnVars>,
}

impl ExpertBank {
    pub fn new(
        name: &str,
        d: usize,
        hidden: usize,
        expert_count: usize,
        top_k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let router = RouterParams::new(&format!("{name}.router"), d, expert_count, top_k, rng)?;
        let experts = (0..expert_count)
            .map(|e| ExpertFfn::new(&format!("{name}.experts.{e}"), d, hidden, rng))
            .collect();
        Ok(ExpertBank { router, experts })
    }

    pub fn bind(&self, tape: &mut Tape) -> ExpertBankVars {
        ExpertBankVars {
            router: self.router.bind(tape),
            experts: self.experts.iter().map(|e| e.bind(tape)).collect(),
        }
    }

    /// H = sum_e gate_e * FFN_e(s), evaluating only routed experts.
    /// Also reports which experts were evaluated.
    pub fn moe_forward_on(
        &self,
        tape: &mut Tape,
        vars: &ExpertBankVars,
        s: Var,
    ) -> Result<(Var, Vec<usize>)> {
        if self.experts.len() != self.router.expert_count {
            return Err(Error::Config(format!(
                "router expects {} experts, bank has {}",
                self.router.expert_count,
                self.experts.len()
            )));
        }
        let gate = self.router.route_on(tape, &vars.router, s)?;
        let selected = selected_indices(tape.value(gate));
        let mut acc: Option<Var> = None;
        for &e in &selected {
            let out = self.experts[e].forward_on(tape, &vars.experts[e], s)?;
            let coeff = tape.index(gate, e)?;
            let scaled = tape.scale_by_var(out, coeff)?;
            acc = Some(match acc {
                None => scaled,
                Some(prev) => tape.add(prev, scaled)?,
            });
        }
        let out = acc.expect("top_k >= 1 guarantees at least one expert");
        Ok((out, selected))
    }

    pub fn moe_forward(&self, s: &[f64]) -> Result<Vec<f64>> {
        Ok(self.moe_forward_counted(s)?.0)
    }

    /// Forward pass plus the evaluated-expert count, for sparsity audits.
    pub fn moe_forward_counted(&self, s: &[f64]) -> Result<(Vec<f64>, usize)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let sv = tape.constant_vector(s);
        let (out, selected) = self.moe_forward_on(&mut tape, &vars, sv)?;
        Ok((tape.value(out).to_vec(), selected.len()))
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = vec![&self.router.weight];
        for e in &self.experts {
            out.push(&e.wi);
            out.push(&e.wo);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![&mut self.router.weight];
        for e in &mut self.experts {
            out.push(&mut e.wi);
            out.push(&mut e.wo);
        }
        out
    }

    pub fn param_vars(&self, vars: &ExpertBankVars) -> Vec<Var> {
        let mut out = vec![vars.router.weight];
        for e in &vars.experts {
            out.push(e.wi);
            out.push(e.wo);
        }
        out
    }
}
