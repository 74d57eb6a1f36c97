//! Composed-pipeline oracle: an independent, loop-level reimplementation of
//! the full forward pass, checked against the tape-based implementation on a
//! fixed toy model, plus the golden verdict locked from the oracle run.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use veridex_core::model::{AblationVariant, EccwModel, ModelConfig};
use veridex_core::params::Param;

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// y = x . W for W stored row-major as [rows, cols].
fn vec_mat(x: &[f64], w: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for j in 0..cols {
        for i in 0..rows {
            out[j] += x[i] * w[i * cols + j];
        }
    }
    out
}

/// y = W . x for W stored row-major as [rows, cols].
fn mat_vec(w: &[f64], x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows];
    for i in 0..rows {
        for j in 0..cols {
            out[i] += w[i * cols + j] * x[j];
        }
    }
    out
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

struct Oracle<'m> {
    by_name: HashMap<&'m str, &'m Param>,
    cfg: &'m ModelConfig,
}

impl<'m> Oracle<'m> {
    fn new(model: &'m EccwModel) -> Self {
        Oracle {
            by_name: model.params().into_iter().map(|p| (p.name.as_str(), p)).collect(),
            cfg: &model.config,
        }
    }

    fn p(&self, name: &str) -> &Param {
        self.by_name
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    fn expert_branch(&self, s: &[f64]) -> Vec<f64> {
        let (d, e_count) = (self.cfg.d, self.cfg.experts);
        let h = self.cfg.expert_hidden();
        let router = self.p("expert.router.w");
        let probs = softmax(&vec_mat(s, &router.data, d, e_count));

        // top-k mask, ties toward the lower index, survivors renormalized
        let mut order: Vec<usize> = (0..e_count).collect();
        order.sort_by(|&i, &j| probs[j].partial_cmp(&probs[i]).unwrap().then(i.cmp(&j)));
        let kept = &order[..self.cfg.top_k];
        let kept_sum: f64 = kept.iter().map(|&i| probs[i]).sum();

        let mut mix = vec![0.0; d];
        for &e in kept {
            let wi = self.p(&format!("expert.experts.{e}.wi"));
            let wo = self.p(&format!("expert.experts.{e}.wo"));
            let hidden: Vec<f64> = vec_mat(s, &wi.data, d, h)
                .into_iter()
                .map(|v| v.max(0.0))
                .collect();
            let out = vec_mat(&hidden, &wo.data, h, d);
            let gate = probs[e] / kept_sum;
            for (m, o) in mix.iter_mut().zip(&out) {
                *m += gate * o;
            }
        }
        softmax(&vec_mat(&mix, &self.p("head.expert").data, d, self.cfg.classes))
    }

    fn lstm_direction(&self, prefix: &str, rows: &[Vec<f64>], reverse: bool) -> Vec<Vec<f64>> {
        let d = self.cfg.d;
        let hid = self.cfg.lstm_hidden();
        let gate = |name: &str, x: &[f64], hprev: &[f64]| -> Vec<f64> {
            let wx = self.p(&format!("{prefix}.{name}.wx"));
            let wh = self.p(&format!("{prefix}.{name}.wh"));
            let b = self.p(&format!("{prefix}.{name}.b"));
            add(
                &add(&vec_mat(x, &wx.data, d, hid), &vec_mat(hprev, &wh.data, hid, hid)),
                &b.data,
            )
        };
        let mut h = vec![0.0; hid];
        let mut c = vec![0.0; hid];
        let mut states = vec![Vec::new(); rows.len()];
        let order: Vec<usize> = if reverse {
            (0..rows.len()).rev().collect()
        } else {
            (0..rows.len()).collect()
        };
        for pos in order {
            let x = &rows[pos];
            let i: Vec<f64> = gate("input", x, &h).into_iter().map(sigmoid).collect();
            let f: Vec<f64> = gate("forget", x, &h).into_iter().map(sigmoid).collect();
            let g: Vec<f64> = gate("candidate", x, &h).into_iter().map(f64::tanh).collect();
            let o: Vec<f64> = gate("output", x, &h).into_iter().map(sigmoid).collect();
            let mut c_new = vec![0.0; hid];
            for k in 0..hid {
                c_new[k] = f[k] * c[k] + i[k] * g[k];
            }
            let mut h_new = vec![0.0; hid];
            for k in 0..hid {
                h_new[k] = o[k] * c_new[k].tanh();
            }
            c = c_new;
            h = h_new.clone();
            states[pos] = h_new;
        }
        states
    }

    fn citizen_rows(&self, s: &[f64]) -> Vec<Vec<f64>> {
        let (d, n) = (self.cfg.d, self.cfg.citizens);
        let hm = self.cfg.mlp_hidden();
        let hid = self.cfg.lstm_hidden();

        // diversify
        let initial: Vec<Vec<f64>> = (0..n)
            .map(|j| {
                let w1 = self.p(&format!("citizen.mlp.{j}.w1"));
                let b1 = self.p(&format!("citizen.mlp.{j}.b1"));
                let w2 = self.p(&format!("citizen.mlp.{j}.w2"));
                let b2 = self.p(&format!("citizen.mlp.{j}.b2"));
                let hidden: Vec<f64> = add(&vec_mat(s, &w1.data, d, hm), &b1.data)
                    .into_iter()
                    .map(|v| v.max(0.0))
                    .collect();
                add(&vec_mat(&hidden, &w2.data, hm, d), &b2.data)
            })
            .collect();

        // encode
        let fwd = self.lstm_direction("encoder.fwd", &initial, false);
        let bwd = self.lstm_direction("encoder.bwd", &initial, true);
        let proj = self.p("encoder.proj");
        let encoded: Vec<Vec<f64>> = (0..n)
            .map(|j| {
                let mut both = fwd[j].clone();
                both.extend_from_slice(&bwd[j]);
                vec_mat(&both, &proj.data, 2 * hid, d)
            })
            .collect();

        // attend (full connectivity, scaled scores)
        let project = |w: &Param| -> Vec<Vec<f64>> {
            encoded.iter().map(|row| vec_mat(row, &w.data, d, d)).collect()
        };
        let q = project(self.p("attention.q"));
        let k = project(self.p("attention.k"));
        let v = project(self.p("attention.v"));
        let scale = if self.cfg.attention_scaling {
            1.0 / (d as f64).sqrt()
        } else {
            1.0
        };
        let attended: Vec<Vec<f64>> = (0..n)
            .map(|r| {
                let scores: Vec<f64> = (0..n)
                    .map(|c| q[r].iter().zip(&k[c]).map(|(a, b)| a * b).sum::<f64>() * scale)
                    .collect();
                let weights = softmax(&scores);
                let mut out = vec![0.0; d];
                for c in 0..n {
                    for j in 0..d {
                        out[j] += weights[c] * v[c][j];
                    }
                }
                out
            })
            .collect();

        // fuse and decide per citizen
        let head = self.p("head.citizen");
        (0..n)
            .map(|j| {
                let mut fused = initial[j].clone();
                fused.extend_from_slice(&attended[j]);
                softmax(&vec_mat(&fused, &head.data, 2 * d, self.cfg.classes))
            })
            .collect()
    }

    fn forward(&self, s: &[f64]) -> Vec<f64> {
        let c = self.cfg.classes;
        let e_probs = self.expert_branch(s);
        let d_rows = self.citizen_rows(s);
        let mut d_bar = vec![0.0; c];
        for row in &d_rows {
            for (acc, v) in d_bar.iter_mut().zip(row) {
                *acc += v;
            }
        }
        d_bar.iter_mut().for_each(|v| *v /= d_rows.len() as f64);
        let we = self.p("vote.expert");
        let wc = self.p("vote.citizen");
        let logits = add(
            &mat_vec(&we.data, &e_probs, c, c),
            &mat_vec(&wc.data, &d_bar, c, c),
        );
        softmax(&logits)
    }
}

fn toy_model() -> EccwModel {
    let config = ModelConfig {
        d: 8,
        experts: 2,
        top_k: 2,
        citizens: 2,
        classes: 2,
        variant: AblationVariant::Full,
        ..ModelConfig::default()
    };
    EccwModel::new(config, 42).unwrap()
}

fn fixture_vector() -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(4242);
    (0..8).map(|_| r.gen_range(-1.0..1.0)).collect()
}

#[test]
fn forward_matches_the_composed_oracle() {
    let model = toy_model();
    let oracle = Oracle::new(&model);
    let mut r = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let s: Vec<f64> = (0..8).map(|_| r.gen_range(-1.5..1.5)).collect();
        let got = model.forward_full(&s).unwrap();
        let want = oracle.forward(&s);
        for (g, w) in got.probabilities.iter().zip(&want) {
            assert!((g - w).abs() < 1e-10, "{g} vs {w}");
        }
    }
}

#[test]
fn golden_verdict_on_the_seed_42_fixture() {
    let model = toy_model();
    let verdict = model.forward_full(&fixture_vector()).unwrap();

    // locked from the composed oracle run on this fixture
    let golden = [0.46047009604530553, 0.5395299039546944];
    for (got, want) in verdict.probabilities.iter().zip(golden) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
    assert_eq!(verdict.label, 1);
    assert_eq!(verdict.label_name(), "rumor");

    // and the oracle still reproduces it
    let oracle = Oracle::new(&model);
    let want = oracle.forward(&fixture_vector());
    for (g, w) in golden.iter().zip(&want) {
        assert!((g - w).abs() < 1e-10);
    }
}
