//! Citizen perceptual network: n independently parameterized readings of one
//! claim, a bidirectional recurrent encoding over the readings, information
//! exchange over a fully connected attention graph, and fusion of refined
//! views with initial views.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::Param;

// ---------------------------------------------------------------------------
// Citizen diversity resolver
// ---------------------------------------------------------------------------

/// Single-hidden-layer MLP with ReLU, mapping d -> d.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
}

pub struct MlpVars {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl MlpVars {
    pub(crate) fn param_vars(&self) -> Vec<Var> {
        vec![self.w1, self.b1, self.w2, self.b2]
    }
}

impl Mlp {
    pub fn new(name: &str, d: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Mlp {
            w1: Param::glorot(format!("{name}.w1"), d, hidden, rng),
            b1: Param::zeros(format!("{name}.b1"), &[hidden]),
            w2: Param::glorot(format!("{name}.w2"), hidden, d, rng),
            b2: Param::zeros(format!("{name}.b2"), &[d]),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            w1: self.w1.bind(tape),
            b1: self.b1.bind(tape),
            w2: self.w2.bind(tape),
            b2: self.b2.bind(tape),
        }
    }

    pub fn forward_on(&self, tape: &mut Tape, vars: &MlpVars, s: Var) -> Result<Var> {
        let pre = tape.matmul(s, vars.w1)?;
        let pre = tape.add(pre, vars.b1)?;
        let hidden = tape.relu(pre);
        let out = tape.matmul(hidden, vars.w2)?;
        tape.add(out, vars.b2)
    }

    pub fn forward(&self, s: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let sv = tape.constant_vector(s);
        let out = self.forward_on(&mut tape, &vars, sv)?;
        Ok(tape.value(out).to_vec())
    }

    pub(crate) fn params(&self) -> Vec<&Param> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

/// Bank of n independent MLPs producing the citizen readings. Diversity
/// comes from the independent initializations; optionally each citizen also
/// perceives the input through a fixed additive noise vector, drawn once at
/// construction so inference stays deterministic.
#[derive(Debug, Clone)]
pub struct CitizenResolver {
    pub mlps: Vec<Mlp>,
    /// One frozen d-vector per citizen when input noise is enabled, else empty.
    pub input_noise: Vec<Param>,
}

pub struct CitizenResolverVars {
    mlps: Vec<MlpVars>,
    input_noise: Vec<Var>,
}

impl CitizenResolverVars {
    pub(crate) fn param_vars(&self) -> Vec<Var> {
        self.mlps
            .iter()
            .flat_map(|m| m.param_vars())
            .chain(self.input_noise.iter().copied())
            .collect()
    }
}

impl CitizenResolver {
    pub fn new(
        name: &str,
        n: usize,
        d: usize,
        hidden: usize,
        noise_std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("citizen count must be at least 1".into()));
        }
        if noise_std < 0.0 {
            return Err(Error::Config("noise std must be non-negative".into()));
        }
        let mlps: Vec<Mlp> = (0..n)
            .map(|j| Mlp::new(&format!("{name}.mlp.{j}"), d, hidden, rng))
            .collect();
        let input_noise = if noise_std > 0.0 {
            (0..n)
                .map(|j| {
                    let mut p = Param::zeros(format!("{name}.noise.{j}"), &[d]);
                    for v in &mut p.data {
                        *v = noise_std * gaussian(rng);
                    }
                    p.frozen()
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(CitizenResolver { mlps, input_noise })
    }

    pub fn citizen_count(&self) -> usize {
        self.mlps.len()
    }

    pub fn bind(&self, tape: &mut Tape) -> CitizenResolverVars {
        CitizenResolverVars {
            mlps: self.mlps.iter().map(|m| m.bind(tape)).collect(),
            input_noise: self.input_noise.iter().map(|p| p.bind(tape)).collect(),
        }
    }

    /// Row j of the result is MLP_j(s + noise_j).
    pub fn diversify_on(
        &self,
        tape: &mut Tape,
        vars: &CitizenResolverVars,
        s: Var,
    ) -> Result<Vec<Var>> {
        self.mlps
            .iter()
            .zip(&vars.mlps)
            .enumerate()
            .map(|(j, (mlp, mv))| {
                let input = match vars.input_noise.get(j) {
                    Some(&noise) => tape.add(s, noise)?,
                    None => s,
                };
                mlp.forward_on(tape, mv, input)
            })
            .collect()
    }

    pub fn diversify(&self, s: &[f64]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let sv = tape.constant_vector(s);
        let rows = self.diversify_on(&mut tape, &vars, sv)?;
        Ok(rows.into_iter().map(|v| tape.value(v).to_vec()).collect())
    }

    pub(crate) fn params(&self) -> Vec<&Param> {
        self.mlps
            .iter()
            .flat_map(|m| m.params())
            .chain(self.input_noise.iter())
            .collect()
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Param> {
        self.mlps
            .iter_mut()
            .flat_map(|m| m.params_mut())
            .chain(self.input_noise.iter_mut())
            .collect()
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

// ---------------------------------------------------------------------------
// Sequence encoder (BiLSTM)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LstmGate {
    pub wx: Param,
    pub wh: Param,
    pub b: Param,
}

pub struct LstmGateVars {
    wx: Var,
    wh: Var,
    b: Var,
}

impl LstmGateVars {
    fn param_vars(&self) -> [Var; 3] {
        [self.wx, self.wh, self.b]
    }
}

impl LstmGate {
    fn new(name: &str, d: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        LstmGate {
            wx: Param::glorot(format!("{name}.wx"), d, hidden, rng),
            wh: Param::glorot(format!("{name}.wh"), hidden, hidden, rng),
            b: Param::zeros(format!("{name}.b"), &[hidden]),
        }
    }

    fn bind(&self, tape: &mut Tape) -> LstmGateVars {
        LstmGateVars {
            wx: self.wx.bind(tape),
            wh: self.wh.bind(tape),
            b: self.b.bind(tape),
        }
    }

    /// x . wx + h . wh + b, pre-activation.
    fn pre_activation(&self, tape: &mut Tape, vars: &LstmGateVars, x: Var, h: Var) -> Result<Var> {
        let from_x = tape.matmul(x, vars.wx)?;
        let from_h = tape.matmul(h, vars.wh)?;
        let sum = tape.add(from_x, from_h)?;
        tape.add(sum, vars.b)
    }
}

/// One direction of the recurrent encoder: input, forget and output gates
/// plus the candidate update.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub input_gate: LstmGate,
    pub forget_gate: LstmGate,
    pub candidate: LstmGate,
    pub output_gate: LstmGate,
    pub hidden: usize,
}

pub struct LstmCellVars {
    input_gate: LstmGateVars,
    forget_gate: LstmGateVars,
    candidate: LstmGateVars,
    output_gate: LstmGateVars,
}

impl LstmCellVars {
    pub(crate) fn param_vars(&self) -> Vec<Var> {
        [
            &self.input_gate,
            &self.forget_gate,
            &self.candidate,
            &self.output_gate,
        ]
        .into_iter()
        .flat_map(|g| g.param_vars())
        .collect()
    }
}

impl LstmCell {
    pub fn new(name: &str, d: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        LstmCell {
            input_gate: LstmGate::new(&format!("{name}.input"), d, hidden, rng),
            forget_gate: LstmGate::new(&format!("{name}.forget"), d, hidden, rng),
            candidate: LstmGate::new(&format!("{name}.candidate"), d, hidden, rng),
            output_gate: LstmGate::new(&format!("{name}.output"), d, hidden, rng),
            hidden,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> LstmCellVars {
        LstmCellVars {
            input_gate: self.input_gate.bind(tape),
            forget_gate: self.forget_gate.bind(tape),
            candidate: self.candidate.bind(tape),
            output_gate: self.output_gate.bind(tape),
        }
    }

    /// One step: returns (h', c').
    pub fn step_on(
        &self,
        tape: &mut Tape,
        vars: &LstmCellVars,
        x: Var,
        h_prev: Var,
        c_prev: Var,
    ) -> Result<(Var, Var)> {
        let i_pre = self.input_gate.pre_activation(tape, &vars.input_gate, x, h_prev)?;
        let i = tape.sigmoid(i_pre);
        let f_pre = self.forget_gate.pre_activation(tape, &vars.forget_gate, x, h_prev)?;
        let f = tape.sigmoid(f_pre);
        let g_pre = self.candidate.pre_activation(tape, &vars.candidate, x, h_prev)?;
        let g = tape.tanh(g_pre);
        let o_pre = self.output_gate.pre_activation(tape, &vars.output_gate, x, h_prev)?;
        let o = tape.sigmoid(o_pre);

        let kept = tape.mul(f, c_prev)?;
        let written = tape.mul(i, g)?;
        let c = tape.add(kept, written)?;
        let c_act = tape.tanh(c);
        let h = tape.mul(o, c_act)?;
        Ok((h, c))
    }

    /// Single step from all-zero state over a plain slice.
    pub fn step_from_zero(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let xv = tape.constant_vector(x);
        let zero = vec![0.0; self.hidden];
        let h0 = tape.constant_vector(&zero);
        let c0 = tape.constant_vector(&zero);
        let (h, c) = self.step_on(&mut tape, &vars, xv, h0, c0)?;
        Ok((tape.value(h).to_vec(), tape.value(c).to_vec()))
    }

    pub(crate) fn params(&self) -> Vec<&Param> {
        [
            &self.input_gate,
            &self.forget_gate,
            &self.candidate,
            &self.output_gate,
        ]
        .into_iter()
        .flat_map(|g| [&g.wx, &g.wh, &g.b])
        .collect()
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Param> {
        [
            &mut self.input_gate,
            &mut self.forget_gate,
            &mut self.candidate,
            &mut self.output_gate,
        ]
        .into_iter()
        .flat_map(|g| [&mut g.wx, &mut g.wh, &mut g.b])
        .collect()
    }
}

/// Bidirectional recurrent encoder over the ordered citizen readings.
/// Per-position hidden states of both directions are concatenated (2h)
/// and projected back to d.
#[derive(Debug, Clone)]
pub struct SequenceEncoder {
    pub forward_cell: LstmCell,
    pub backward_cell: LstmCell,
    /// Output projection, `2h x d`.
    pub projection: Param,
    pub hidden: usize,
}

pub struct SequenceEncoderVars {
    forward_cell: LstmCellVars,
    backward_cell: LstmCellVars,
    projection: Var,
}

impl SequenceEncoderVars {
    pub(crate) fn param_vars(&self) -> Vec<Var> {
        let mut out = self.forward_cell.param_vars();
        out.extend(self.backward_cell.param_vars());
        out.push(self.projection);
        out
    }
}

impl SequenceEncoder {
    pub fn new(name: &str, d: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        SequenceEncoder {
            forward_cell: LstmCell::new(&format!("{name}.fwd"), d, hidden, rng),
            backward_cell: LstmCell::new(&format!("{name}.bwd"), d, hidden, rng),
            projection: Param::glorot(format!("{name}.proj"), 2 * hidden, d, rng),
            hidden,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> SequenceEncoderVars {
        SequenceEncoderVars {
            forward_cell: self.forward_cell.bind(tape),
            backward_cell: self.backward_cell.bind(tape),
            projection: self.projection.bind(tape),
        }
    }

    fn run_direction(
        &self,
        tape: &mut Tape,
        cell: &LstmCell,
        vars: &LstmCellVars,
        rows: &[Var],
        reverse: bool,
    ) -> Result<Vec<Var>> {
        let zero = vec![0.0; self.hidden];
        let mut h = tape.constant_vector(&zero);
        let mut c = tape.constant_vector(&zero);
        let mut states = vec![None; rows.len()];
        let order: Vec<usize> = if reverse {
            (0..rows.len()).rev().collect()
        } else {
            (0..rows.len()).collect()
        };
        for pos in order {
            let (h_new, c_new) = cell.step_on(tape, vars, rows[pos], h, c)?;
            h = h_new;
            c = c_new;
            states[pos] = Some(h);
        }
        Ok(states.into_iter().map(|s| s.expect("every position visited")).collect())
    }

    /// Encode the readings as a length-n sequence; row j of the result is the
    /// projected concatenation of forward and backward states at position j.
    pub fn encode_on(
        &self,
        tape: &mut Tape,
        vars: &SequenceEncoderVars,
        rows: &[Var],
    ) -> Result<Vec<Var>> {
        if rows.is_empty() {
            return Err(Error::data("encode_sequence requires at least one row"));
        }
        let fwd = self.run_direction(tape, &self.forward_cell, &vars.forward_cell, rows, false)?;
        let bwd = self.run_direction(tape, &self.backward_cell, &vars.backward_cell, rows, true)?;
        fwd.into_iter()
            .zip(bwd)
            .map(|(f, b)| {
                let both = tape.concat(f, b, 0)?;
                tape.matmul(both, vars.projection)
            })
            .collect()
    }

    pub fn encode(&self, p_rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let rows: Vec<Var> = p_rows.iter().map(|r| tape.constant_vector(r)).collect();
        let m = self.encode_on(&mut tape, &vars, &rows)?;
        Ok(m.into_iter().map(|v| tape.value(v).to_vec()).collect())
    }

    /// Pre-projection hidden sequences of both directions, in position order.
    pub fn hidden_sequences(&self, p_rows: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let rows: Vec<Var> = p_rows.iter().map(|r| tape.constant_vector(r)).collect();
        let fwd = self.run_direction(&mut tape, &self.forward_cell, &vars.forward_cell, &rows, false)?;
        let bwd = self.run_direction(&mut tape, &self.backward_cell, &vars.backward_cell, &rows, true)?;
        Ok((
            fwd.into_iter().map(|v| tape.value(v).to_vec()).collect(),
            bwd.into_iter().map(|v| tape.value(v).to_vec()).collect(),
        ))
    }
}

// ---------------------------------------------------------------------------
// Graph attention
// ---------------------------------------------------------------------------

/// Binary, symmetric citizen-to-citizen connectivity. Full by default.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjacency {
    pub n: usize,
    allowed: Vec<bool>,
}

impl Adjacency {
    pub fn full(n: usize) -> Self {
        Adjacency {
            n,
            allowed: vec![true; n * n],
        }
    }

    pub fn new(n: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != n * n {
            return Err(Error::Config(format!(
                "adjacency for {n} citizens needs {} entries, got {}",
                n * n,
                allowed.len()
            )));
        }
        for i in 0..n {
            for j in 0..i {
                if allowed[i * n + j] != allowed[j * n + i] {
                    return Err(Error::Config(format!(
                        "adjacency must be symmetric, differs at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Adjacency { n, allowed })
    }

    pub fn allowed(&self) -> &[bool] {
        &self.allowed
    }

    fn isolated_row(&self) -> Option<usize> {
        (0..self.n).find(|&r| !self.allowed[r * self.n..(r + 1) * self.n].iter().any(|&a| a))
    }
}

/// Self-attention over the encoded citizen readings with learned Q/K/V
/// projections. Scores are scaled by 1/sqrt(d) unless `scaling` is off,
/// which reproduces the unscaled product form verbatim.
#[derive(Debug, Clone)]
pub struct GraphAttention {
    pub query: Param,
    pub key: Param,
    pub value: Param,
    pub adjacency: Adjacency,
    pub scaling: bool,
}

pub struct GraphAttentionVars {
    query: Var,
    key: Var,
    value: Var,
}

impl GraphAttentionVars {
    pub(crate) fn param_vars(&self) -> Vec<Var> {
        vec![self.query, self.key, self.value]
    }
}

impl GraphAttention {
    pub fn new(name: &str, d: usize, n: usize, scaling: bool, rng: &mut ChaCha8Rng) -> Self {
        GraphAttention {
            query: Param::glorot(format!("{name}.q"), d, d, rng),
            key: Param::glorot(format!("{name}.k"), d, d, rng),
            value: Param::glorot(format!("{name}.v"), d, d, rng),
            adjacency: Adjacency::full(n),
            scaling,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> GraphAttentionVars {
        GraphAttentionVars {
            query: self.query.bind(tape),
            key: self.key.bind(tape),
            value: self.value.bind(tape),
        }
    }

    fn weights_on(
        &self,
        tape: &mut Tape,
        vars: &GraphAttentionVars,
        rows: &[Var],
    ) -> Result<(Var, Var)> {
        if rows.len() != self.adjacency.n {
            return Err(Error::Config(format!(
                "attention built for {} citizens, got {} rows",
                self.adjacency.n,
                rows.len()
            )));
        }
        if let Some(r) = self.adjacency.isolated_row() {
            return Err(Error::data(format!("isolated citizen {r}")));
        }
        let d = match tape.shape(rows[0]) {
            [d] => *d,
            s => return Err(Error::shape("graph_attend", s, &[1])),
        };
        let m = tape.stack_rows(rows)?;
        let q = tape.matmul(m, vars.query)?;
        let k = tape.matmul(m, vars.key)?;
        let v = tape.matmul(m, vars.value)?;
        let k_t = tape.transpose(k)?;
        let mut scores = tape.matmul(q, k_t)?;
        if self.scaling {
            scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
        }
        let weights = tape.masked_softmax_rows(scores, self.adjacency.allowed())?;
        Ok((weights, v))
    }

    /// N = softmax(Q K^T) V, rows returned individually.
    pub fn attend_on(
        &self,
        tape: &mut Tape,
        vars: &GraphAttentionVars,
        rows: &[Var],
    ) -> Result<Vec<Var>> {
        let (weights, v) = self.weights_on(tape, vars, rows)?;
        let n_mat = tape.matmul(weights, v)?;
        (0..rows.len()).map(|r| tape.row(n_mat, r)).collect()
    }

    pub fn attend(&self, m_rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let rows: Vec<Var> = m_rows.iter().map(|r| tape.constant_vector(r)).collect();
        let n = self.attend_on(&mut tape, &vars, &rows)?;
        Ok(n.into_iter().map(|v| tape.value(v).to_vec()).collect())
    }

    /// The n x n attention matrix, flattened row-major.
    pub fn attention_weights(&self, m_rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let rows: Vec<Var> = m_rows.iter().map(|r| tape.constant_vector(r)).collect();
        let (weights, _) = self.weights_on(&mut tape, &vars, &rows)?;
        Ok(tape.value(weights).to_vec())
    }
}

// ---------------------------------------------------------------------------
// Cognition fusion
// ---------------------------------------------------------------------------

/// Per-row concatenation of initial and attended readings: row j is
/// `[P_j, N_j]` of width 2d.
pub fn fuse_cognition_on(tape: &mut Tape, p: &[Var], n: &[Var]) -> Result<Vec<Var>> {
    if p.len() != n.len() {
        return Err(Error::shape("fuse_cognition", &[p.len()], &[n.len()]));
    }
    p.iter()
        .zip(n)
        .map(|(&pj, &nj)| tape.concat(pj, nj, 0))
        .collect()
}

pub fn fuse_cognition(p: &[Vec<f64>], n: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if p.len() != n.len() {
        return Err(Error::shape("fuse_cognition", &[p.len()], &[n.len()]));
    }
    p.iter()
        .zip(n)
        .map(|(pj, nj)| {
            if pj.len() != nj.len() {
                return Err(Error::shape("fuse_cognition", &[pj.len()], &[nj.len()]));
            }
            let mut row = pj.clone();
            row.extend_from_slice(nj);
            Ok(row)
        })
        .collect()
}

/// All four stages of the citizen branch for one claim, kept for inspection.
#[derive(Debug, Clone)]
pub struct CitizenCognition {
    /// Initial readings, n x d.
    pub initial: Vec<Vec<f64>>,
    /// Encoded readings, n x d.
    pub encoded: Vec<Vec<f64>>,
    /// Attended readings, n x d.
    pub attended: Vec<Vec<f64>>,
    /// Fused cognitions, n x 2d.
    pub fused: Vec<Vec<f64>>,
}

pub fn cognition(
    resolver: &CitizenResolver,
    encoder: &SequenceEncoder,
    attention: &GraphAttention,
    s: &[f64],
) -> Result<CitizenCognition> {
    let initial = resolver.diversify(s)?;
    let encoded = encoder.encode(&initial)?;
    let attended = attention.attend(&encoded)?;
    let fused = fuse_cognition(&initial, &attended)?;
    Ok(CitizenCognition {
        initial,
        encoded,
        attended,
        fused,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn diversify_single_citizen_equals_mlp_forward() {
        let resolver = CitizenResolver::new("c", 1, 4, 4, &mut rng(1)).unwrap();
        let s = [0.1, -0.2, 0.3, 0.4];
        let rows = resolver.diversify(&s).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0], resolver.mlps[0].forward(&s).unwrap());
    }

    #[test]
    fn identical_mlps_give_identical_rows() {
        let mut resolver = CitizenResolver::new("c", 3, 4, 4, &mut rng(2)).unwrap();
        let first = resolver.mlps[0].clone();
        for mlp in &mut resolver.mlps {
            *mlp = first.clone();
        }
        let rows = resolver.diversify(&[0.5, 0.5, -0.5, 1.0]).unwrap();
        assert_eq!(rows[0], rows[1]);
        assert_eq!(rows[1], rows[2]);
    }

    #[test]
    fn seeded_init_gives_pairwise_distinct_rows() {
        let resolver = CitizenResolver::new("c", 5, 6, 6, &mut rng(42)).unwrap();
        let mut r = rng(43);
        let s: Vec<f64> = (0..6).map(|_| r.gen_range(-1.0..1.0)).collect();
        let rows = resolver.diversify(&s).unwrap();
        for i in 0..5 {
            for j in (i + 1)..5 {
                let dist: f64 = rows[i]
                    .iter()
                    .zip(&rows[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                assert!(dist > 0.0, "rows {i} and {j} coincide");
            }
        }
    }

    #[test]
    fn lstm_cell_matches_hand_computed_gates() {
        // d = 1, h = 1, hand-picked weights, all-zero initial state.
        let mut cell = LstmCell::new("cell", 1, 1, &mut rng(0));
        let assign = |gate: &mut LstmGate, wx: f64, wh: f64, b: f64| {
            gate.wx.data = vec![wx];
            gate.wh.data = vec![wh];
            gate.b.data = vec![b];
        };
        assign(&mut cell.input_gate, 0.5, 0.2, 0.1);
        assign(&mut cell.forget_gate, -0.3, 0.4, 0.2);
        assign(&mut cell.candidate, 0.8, -0.1, 0.0);
        assign(&mut cell.output_gate, 0.6, 0.3, -0.2);

        let x = 1.5;
        let (h, c) = cell.step_from_zero(&[x]).unwrap();

        // gate-by-gate oracle with zero previous state
        let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
        let i = sigmoid(0.5 * x + 0.1);
        let f = sigmoid(-0.3 * x + 0.2);
        let g = (0.8f64 * x).tanh();
        let o = sigmoid(0.6 * x - 0.2);
        let c_want = f * 0.0 + i * g;
        let h_want = o * c_want.tanh();

        assert!((c[0] - c_want).abs() < 1e-10, "c: {} vs {c_want}", c[0]);
        assert!((h[0] - h_want).abs() < 1e-10, "h: {} vs {h_want}", h[0]);
    }

    #[test]
    fn encode_single_row_is_finite() {
        let enc = SequenceEncoder::new("enc", 4, 2, &mut rng(3));
        let m = enc.encode(&[vec![0.3, -0.1, 0.7, 0.2]]).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].len(), 4);
        assert!(m[0].iter().all(|v| v.is_finite()));
    }

    #[test]
    fn reversing_rows_swaps_direction_sequences() {
        // with shared cell parameters, running the sequence backwards swaps
        // the forward and backward hidden sequences exactly
        let mut enc = SequenceEncoder::new("enc", 3, 2, &mut rng(4));
        enc.backward_cell = enc.forward_cell.clone();

        let mut r = rng(5);
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..3).map(|_| r.gen_range(-1.0..1.0)).collect())
            .collect();
        let reversed: Vec<Vec<f64>> = rows.iter().rev().cloned().collect();

        let (fwd1, bwd1) = enc.hidden_sequences(&rows).unwrap();
        let (fwd2, bwd2) = enc.hidden_sequences(&reversed).unwrap();

        let rev = |v: &[Vec<f64>]| v.iter().rev().cloned().collect::<Vec<_>>();
        assert_eq!(fwd2, rev(&bwd1));
        assert_eq!(bwd2, rev(&fwd1));
    }

    #[test]
    fn encode_is_permutation_sensitive() {
        let enc = SequenceEncoder::new("enc", 4, 2, &mut rng(6));
        let mut r = rng(7);
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..4).map(|_| r.gen_range(-1.0..1.0)).collect())
            .collect();
        let mut shuffled = rows.clone();
        shuffled.swap(0, 2);
        let m1 = enc.encode(&rows).unwrap();
        let m2 = enc.encode(&shuffled).unwrap();
        assert_ne!(m1, m2);
    }

    #[test]
    fn attention_single_citizen_weight_is_one() {
        let ga = GraphAttention::new("att", 3, 1, true, &mut rng(8));
        let m = vec![vec![0.4, -0.6, 0.2]];
        let weights = ga.attention_weights(&m).unwrap();
        assert_eq!(weights, vec![1.0]);

        // N equals the row's value projection
        let n = ga.attend(&m).unwrap();
        let mut want = vec![0.0; 3];
        for j in 0..3 {
            for i in 0..3 {
                want[j] += m[0][i] * ga.value.data[i * 3 + j];
            }
        }
        for (got, want) in n[0].iter().zip(&want) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_rows_attend_uniformly() {
        let ga = GraphAttention::new("att", 4, 3, true, &mut rng(9));
        let row = vec![0.3, 0.1, -0.2, 0.5];
        let m = vec![row.clone(), row.clone(), row];
        let weights = ga.attention_weights(&m).unwrap();
        for w in weights {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    /// Independent dense attention oracle.
    fn attention_oracle(
        m: &[Vec<f64>],
        q_w: &[f64],
        k_w: &[f64],
        v_w: &[f64],
        d: usize,
        scale: bool,
    ) -> Vec<Vec<f64>> {
        let n = m.len();
        let project = |w: &[f64]| -> Vec<Vec<f64>> {
            m.iter()
                .map(|row| {
                    (0..d)
                        .map(|j| (0..d).map(|i| row[i] * w[i * d + j]).sum())
                        .collect()
                })
                .collect()
        };
        let q = project(q_w);
        let k = project(k_w);
        let v = project(v_w);
        let mut out = vec![vec![0.0; d]; n];
        for r in 0..n {
            let mut scores: Vec<f64> = (0..n)
                .map(|c| q[r].iter().zip(&k[c]).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            if scale {
                scores.iter_mut().for_each(|s| *s /= (d as f64).sqrt());
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for c in 0..n {
                let w = exps[c] / total;
                for j in 0..d {
                    out[r][j] += w * v[c][j];
                }
            }
        }
        out
    }

    #[test]
    fn attention_matches_dense_oracle() {
        let d = 5;
        let ga = GraphAttention::new("att", d, 4, true, &mut rng(10));
        let mut r = rng(11);
        let m: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..d).map(|_| r.gen_range(-1.0..1.0)).collect())
            .collect();
        let got = ga.attend(&m).unwrap();
        let want = attention_oracle(&m, &ga.query.data, &ga.key.data, &ga.value.data, d, true);
        for (gr, wr) in got.iter().zip(&want) {
            for (g, w) in gr.iter().zip(wr) {
                assert!((g - w).abs() < 1e-10, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn unscaled_attention_matches_unscaled_oracle() {
        let d = 3;
        let mut ga = GraphAttention::new("att", d, 2, false, &mut rng(12));
        ga.scaling = false;
        let m = vec![vec![0.2, 0.8, -0.4], vec![-0.1, 0.3, 0.9]];
        let got = ga.attend(&m).unwrap();
        let want = attention_oracle(&m, &ga.query.data, &ga.key.data, &ga.value.data, d, false);
        for (gr, wr) in got.iter().zip(&want) {
            for (g, w) in gr.iter().zip(wr) {
                assert!((g - w).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn full_adjacency_masking_is_a_noop() {
        let d = 4;
        let ga = GraphAttention::new("att", d, 3, true, &mut rng(13));
        let mut r = rng(14);
        let m: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..d).map(|_| r.gen_range(-1.0..1.0)).collect())
            .collect();
        let masked = ga.attend(&m).unwrap();
        // oracle applies no mask at all
        let unmasked = attention_oracle(&m, &ga.query.data, &ga.key.data, &ga.value.data, d, true);
        for (gr, wr) in masked.iter().zip(&unmasked) {
            for (g, w) in gr.iter().zip(wr) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one_under_random_adjacency() {
        let mut r = rng(15);
        for _ in 0..20 {
            let n = r.gen_range(2..=5usize);
            // random symmetric adjacency with self-loops (no isolated rows)
            let mut allowed = vec![false; n * n];
            for i in 0..n {
                allowed[i * n + i] = true;
                for j in 0..i {
                    let a = r.gen_bool(0.6);
                    allowed[i * n + j] = a;
                    allowed[j * n + i] = a;
                }
            }
            let mut ga = GraphAttention::new("att", 3, n, true, &mut rng(r.gen()));
            ga.adjacency = Adjacency::new(n, allowed).unwrap();
            let m: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..3).map(|_| r.gen_range(-2.0..2.0)).collect())
                .collect();
            let weights = ga.attention_weights(&m).unwrap();
            for row in 0..n {
                let sum: f64 = weights[row * n..(row + 1) * n].iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn isolated_citizen_is_rejected() {
        let mut ga = GraphAttention::new("att", 3, 2, true, &mut rng(16));
        ga.adjacency = Adjacency::new(2, vec![true, false, false, false]).unwrap();
        let m = vec![vec![0.1, 0.2, 0.3], vec![0.4, 0.5, 0.6]];
        let err = ga.attend(&m).unwrap_err();
        assert!(err.to_string().contains("isolated citizen"), "{err}");
    }

    #[test]
    fn asymmetric_adjacency_is_rejected() {
        assert!(Adjacency::new(2, vec![true, true, false, true]).is_err());
    }

    #[test]
    fn fused_rows_have_width_2d_and_start_with_initial() {
        let p = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        let n = vec![vec![5.0, 6.0], vec![7.0, 8.0]];
        let c = fuse_cognition(&p, &n).unwrap();
        assert_eq!(c[0], vec![1.0, 2.0, 5.0, 6.0]);
        assert_eq!(c[1], vec![3.0, 4.0, 7.0, 8.0]);
        assert_eq!(c[0].len(), 4);
    }

    #[test]
    fn zero_attended_rows_zero_the_second_half() {
        let p = vec![vec![1.0, -1.0]];
        let n = vec![vec![0.0, 0.0]];
        let c = fuse_cognition(&p, &n).unwrap();
        assert_eq!(&c[0][2..], &[0.0, 0.0]);
    }

    /// The citizen branch components of the gradient-check toy.
    #[derive(Clone)]
    struct Branch {
        resolver: CitizenResolver,
        encoder: SequenceEncoder,
        attention: GraphAttention,
    }

    impl Branch {
        pub(crate) fn params_mut(&mut self) -> Vec<&mut Param> {
            let mut out = Vec::new();
            for mlp in &mut self.resolver.mlps {
                out.extend(mlp.params_mut());
            }
            for cell in [&mut self.encoder.forward_cell, &mut self.encoder.backward_cell] {
                out.extend(cell.params_mut());
            }
            out.push(&mut self.encoder.projection);
            out.push(&mut self.attention.query);
            out.push(&mut self.attention.key);
            out.push(&mut self.attention.value);
            out
        }
    }

    #[test]
    fn citizen_branch_gradients_match_finite_differences() {
        // diversify -> encode -> attend -> fuse on a 3-citizen toy
        let (d, n) = (3usize, 3usize);
        let mut seed_rng = rng(20);
        let branch = Branch {
            resolver: CitizenResolver::new("c", n, d, d, &mut seed_rng).unwrap(),
            encoder: SequenceEncoder::new("enc", d, 2, &mut seed_rng),
            attention: GraphAttention::new("att", d, n, true, &mut seed_rng),
        };
        let s = vec![0.6, -0.4, 0.2];

        let forward_loss = |b: &Branch| -> f64 {
            let cog = cognition(&b.resolver, &b.encoder, &b.attention, &s).unwrap();
            cog.fused
                .iter()
                .flat_map(|row| row.iter())
                .map(|v| v * v)
                .sum()
        };

        // analytic gradients via the tape
        let mut tape = Tape::new();
        let rv = branch.resolver.bind(&mut tape);
        let ev = branch.encoder.bind(&mut tape);
        let av = branch.attention.bind(&mut tape);
        let sv = tape.constant_vector(&s);
        let p = branch.resolver.diversify_on(&mut tape, &rv, sv).unwrap();
        let m = branch.encoder.encode_on(&mut tape, &ev, &p).unwrap();
        let att = branch.attention.attend_on(&mut tape, &av, &m).unwrap();
        let fused = fuse_cognition_on(&mut tape, &p, &att).unwrap();
        let mut scalars = Vec::new();
        for row in &fused {
            let sq = tape.mul(*row, *row).unwrap();
            for i in 0..2 * d {
                scalars.push(tape.index(sq, i).unwrap());
            }
        }
        let mean = tape.mean_stack(&scalars).unwrap();
        let loss = tape.scale(mean, scalars.len() as f64);
        tape.backward(loss).unwrap();

        let mut param_vars: Vec<Var> = Vec::new();
        for mv in &rv.mlps {
            param_vars.extend([mv.w1, mv.b1, mv.w2, mv.b2]);
        }
        for cv in [&ev.forward_cell, &ev.backward_cell] {
            for gv in [&cv.input_gate, &cv.forget_gate, &cv.candidate, &cv.output_gate] {
                param_vars.extend([gv.wx, gv.wh, gv.b]);
            }
        }
        param_vars.extend([ev.projection, av.query, av.key, av.value]);

        let grads: Vec<Vec<f64>> = param_vars
            .iter()
            .map(|&v| tape.grad(v).unwrap().to_vec())
            .collect();

        // central finite differences over every parameter element
        let h = 1e-5;
        for (pi, grad) in grads.iter().enumerate() {
            for e in 0..grad.len() {
                let mut up_branch = branch.clone();
                up_branch.params_mut()[pi].data[e] += h;
                let up = forward_loss(&up_branch);
                let mut down_branch = branch.clone();
                down_branch.params_mut()[pi].data[e] -= h;
                let down = forward_loss(&down_branch);
                let fd = (up - down) / (2.0 * h);
                let ad = grad[e];
                let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-4, "param {pi} elem {e}: ad={ad} fd={fd}");
            }
        }
    }
}
