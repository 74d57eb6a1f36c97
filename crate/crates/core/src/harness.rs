//! Ablation and parameter-sweep harnesses with CSV emitters.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddedClaim;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{AblationVariant, EccwModel};
use crate::trainer::{evaluate, train, TrainConfig};

/// One trained-and-evaluated ablation variant.
#[derive(Debug, Clone)]
pub struct AblationRun {
    pub variant: AblationVariant,
    pub report: MetricsReport,
    pub model: EccwModel,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
}

impl AblationReport {
    pub fn run_for(&self, variant: AblationVariant) -> &AblationRun {
        self.runs
            .iter()
            .find(|r| r.variant == variant)
            .expect("all four variants present")
    }

    /// Total-accuracy gap of each ablated variant relative to full.
    /// The sign is whatever the data says.
    pub fn accuracy_gaps(&self) -> Vec<(AblationVariant, f64)> {
        let full = self.run_for(AblationVariant::Full).report.total.accuracy;
        self.runs
            .iter()
            .filter(|r| r.variant != AblationVariant::Full)
            .map(|r| (r.variant, full - r.report.total.accuracy))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,accuracy,precision,recall,f1\n");
        for run in &self.runs {
            let t = &run.report.total;
            out.push_str(&format!(
                "{},{:.2},{:.2},{:.2},{:.2}\n",
                run.variant.name(),
                t.accuracy,
                t.precision,
                t.recall,
                t.f1
            ));
        }
        out
    }
}

/// Train and evaluate all four variants with identical seed and data.
pub fn ablate(
    base: &TrainConfig,
    train_set: &[EmbeddedClaim],
    test_set: &[EmbeddedClaim],
) -> Result<AblationReport> {
    let runs = AblationVariant::ALL
        .into_iter()
        .map(|variant| {
            let mut cfg = base.clone();
            cfg.model.variant = variant;
            let outcome = train(train_set, &cfg)?;
            let report = evaluate(&outcome.model, test_set)?;
            Ok(AblationRun {
                variant,
                report,
                model: outcome.model,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport { runs })
}

/// One sweep cell: a total accuracy, or the error that sank it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SweepCell {
    Accuracy(f64),
    Failed(String),
}

/// experts x citizens accuracy grid, row-major over expert counts.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub expert_counts: Vec<usize>,
    pub citizen_counts: Vec<usize>,
    pub cells: Vec<SweepCell>,
}

impl SweepGrid {
    pub fn cell(&self, expert_idx: usize, citizen_idx: usize) -> &SweepCell {
        &self.cells[expert_idx * self.citizen_counts.len() + citizen_idx]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("experts\\citizens");
        for n in &self.citizen_counts {
            out.push_str(&format!(",{n}"));
        }
        out.push('\n');
        for (ei, e) in self.expert_counts.iter().enumerate() {
            out.push_str(&e.to_string());
            for ni in 0..self.citizen_counts.len() {
                match self.cell(ei, ni) {
                    SweepCell::Accuracy(a) => out.push_str(&format!(",{a}")),
                    SweepCell::Failed(_) => out.push_str(",failed"),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Inverse of [`SweepGrid::to_csv`]. Failure reasons are not round-tripped,
    /// only the fact of failure.
    pub fn parse_csv(text: &str) -> Result<SweepGrid> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::data("empty sweep CSV"))?;
        let mut fields = header.split(',');
        let corner = fields.next().unwrap_or_default();
        if corner != "experts\\citizens" {
            return Err(Error::data(format!("unexpected sweep CSV header {corner:?}")));
        }
        let citizen_counts: Vec<usize> = fields
            .map(|f| {
                f.parse()
                    .map_err(|_| Error::data(format!("bad citizen count {f:?}")))
            })
            .collect::<Result<_>>()?;

        let mut expert_counts = Vec::new();
        let mut cells = Vec::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let e: usize = fields
                .next()
                .unwrap()
                .parse()
                .map_err(|_| Error::data("bad expert count"))?;
            expert_counts.push(e);
            for f in fields {
                if f == "failed" {
                    cells.push(SweepCell::Failed(String::new()));
                } else {
                    let a: f64 = f
                        .parse()
                        .map_err(|_| Error::data(format!("bad accuracy {f:?}")))?;
                    cells.push(SweepCell::Accuracy(a));
                }
            }
        }
        if cells.len() != expert_counts.len() * citizen_counts.len() {
            return Err(Error::data("ragged sweep CSV"));
        }
        Ok(SweepGrid {
            expert_counts,
            citizen_counts,
            cells,
        })
    }
}

/// Train one model per (experts, citizens) cell and fill the accuracy grid.
/// Cells run in parallel across `threads` workers; each cell is internally
/// single-threaded and self-contained, so the grid is identical for every
/// parallelism degree. Per-cell failures are recorded and the sweep continues.
pub fn sweep(
    expert_counts: &[usize],
    citizen_counts: &[usize],
    base: &TrainConfig,
    train_set: &[EmbeddedClaim],
    test_set: &[EmbeddedClaim],
    threads: usize,
) -> Result<SweepGrid> {
    if expert_counts.is_empty() || citizen_counts.is_empty() {
        return Err(Error::Config("sweep needs non-empty count lists".into()));
    }
    let pairs: Vec<(usize, usize)> = expert_counts
        .iter()
        .flat_map(|&e| citizen_counts.iter().map(move |&n| (e, n)))
        .collect();

    let run_cell = |&(experts, citizens): &(usize, usize)| -> SweepCell {
        let mut cfg = base.clone();
        cfg.model.experts = experts;
        cfg.model.citizens = citizens;
        cfg.model.top_k = cfg.model.top_k.min(experts).max(1);
        match train(train_set, &cfg).and_then(|o| evaluate(&o.model, test_set)) {
            Ok(report) => SweepCell::Accuracy(report.total.accuracy),
            Err(e) => SweepCell::Failed(e.to_string()),
        }
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let cells: Vec<SweepCell> = pool.install(|| pairs.par_iter().map(run_cell).collect());

    Ok(SweepGrid {
        expert_counts: expert_counts.to_vec(),
        citizen_counts: citizen_counts.to_vec(),
        cells,
    })
}
