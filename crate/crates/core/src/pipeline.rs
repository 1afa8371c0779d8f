//! Sampling the adversarial distribution, rejection, refinement and scoring.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{pgd_attack, ClassifierParams, EnergyNetParams, ModelError, Network, PgdConfig, PgdGoal};
use crate::samplers::{psgla, AdvEnergy, AdvEnergySpec, InitLaw, SamplerConfig, SamplerError, Start};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("invalid attack configuration: {0}")]
    Config(String),
    #[error("target class {0} equals the source class")]
    SameClass(usize),
    #[error("no records to score")]
    Empty,
    #[error("{0}")]
    Other(String),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// Independent chains drawn per pair (one sample per chain).
    pub m: usize,
    /// Samples kept after refinement.
    pub n: usize,
    /// Fraction kept by the auxiliary-softmax filter.
    pub kappa: f64,
    pub energy: AdvEnergySpec,
    pub sampler: SamplerConfig,
    /// Chains per parallel job; results do not depend on it.
    pub chunk: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            m: 2000,
            n: 100,
            kappa: 0.10,
            energy: AdvEnergySpec::default(),
            sampler: SamplerConfig::default(),
            chunk: 50,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n > self.m || !(self.kappa > 0.0 && self.kappa <= 1.0) || self.chunk == 0 {
            return Err(PipelineError::Config(format!(
                "need 1 ≤ N ≤ M, κ ∈ (0, 1] and chunk ≥ 1; got M={}, N={}, κ={}, chunk={}",
                self.m, self.n, self.kappa, self.chunk
            )));
        }
        self.energy.validate()?;
        self.sampler.validate()?;
        if self.sampler.init == InitLaw::Buffer {
            return Err(PipelineError::Config("attack chains start from the uniform box or x_ori".into()));
        }
        Ok(())
    }
}

/// The trained networks an attack needs.
#[derive(Debug, Clone, Copy)]
pub struct Models<'a> {
    pub victim: &'a ClassifierParams<f32>,
    pub aux: &'a ClassifierParams<f32>,
    pub ebm: Option<&'a EnergyNetParams<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleRecord {
    /// Index of the chain that produced the sample.
    pub chain: usize,
    #[serde(skip)]
    pub image: Tensor<f32>,
    pub logits: Vec<f32>,
    pub deceives: bool,
    /// Distance term `D(x_ori, x)`; the single-image energy for semantic attacks.
    pub energy: f64,
    /// `σ(g_ψ(x))[y_ori]`.
    pub aux_score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub m: usize,
    pub accepted: usize,
    /// Mean victim objective over all final states.
    pub mean_objective: f64,
    /// Mean victim softmax at `y_tar` over all final states.
    pub mean_target_softmax: f64,
    /// Mean distance term over all final states.
    pub mean_energy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RejectionOutcome {
    Accepted {
        records: Vec<SampleRecord>,
        diagnostics: Diagnostics,
    },
    NoAcceptance(Diagnostics),
}

impl RejectionOutcome {
    pub fn diagnostics(&self) -> &Diagnostics {
        match self {
            RejectionOutcome::Accepted { diagnostics, .. } => diagnostics,
            RejectionOutcome::NoAcceptance(d) => d,
        }
    }

    pub fn records(&self) -> &[SampleRecord] {
        match self {
            RejectionOutcome::Accepted { records, .. } => records,
            RejectionOutcome::NoAcceptance(_) => &[],
        }
    }
}

/// Final states of `count` independent PSGLA chains against `energy`, in chain order.
pub fn sample_chains(
    energy: &AdvEnergy<'_, f32>,
    x_ori: &Tensor<f32>,
    sampler: &SamplerConfig,
    count: usize,
    chunk: usize,
) -> Result<Tensor<f32>> {
    let shape = x_ori.shape();
    let starts: Vec<usize> = (0..count).step_by(chunk.max(1)).collect();
    let parts: Vec<Tensor<f32>> = starts
        .par_iter()
        .map(|&first| -> Result<Tensor<f32>> {
            let k = chunk.min(count - first);
            let mut batch_shape = vec![k];
            batch_shape.extend_from_slice(shape);
            let fixed;
            let start = match sampler.init {
                InitLaw::FixedPoint => {
                    fixed = x_ori.tile_rows(k);
                    Start::At(&fixed)
                }
                _ => Start::Uniform(&batch_shape),
            };
            let out = psgla(energy, sampler, start, first as u64)?;
            debug_assert!(out.state.all_within(0.0, 1.0));
            Ok(out.state)
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor<f32>> = parts.iter().collect();
    Ok(Tensor::concat_rows(&refs)?)
}

fn softmax_row(logits: &[f32]) -> Vec<f64> {
    let m = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let e: Vec<f64> = logits.iter().map(|&v| (v as f64 - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Runs `M` chains and keeps the final states the victim classifies as `y_tar`.
pub fn rejection_sample(
    cfg: &AttackConfig,
    x_ori: &Tensor<f32>,
    y_ori: usize,
    y_tar: usize,
    models: Models<'_>,
) -> Result<RejectionOutcome> {
    cfg.validate()?;
    let energy = AdvEnergy::new(cfg.energy, x_ori.clone(), y_tar, models.victim, models.ebm)?;
    let states = sample_chains(&energy, x_ori, &cfg.sampler, cfg.m, cfg.chunk)?;
    let mut logits = Vec::with_capacity(cfg.m);
    let mut objectives = Vec::with_capacity(cfg.m);
    let mut energies = Vec::with_capacity(cfg.m);
    let mut aux = Vec::with_capacity(cfg.m);
    for lo in (0..cfg.m).step_by(256) {
        let idx: Vec<usize> = (lo..(lo + 256).min(cfg.m)).collect();
        let batch = states.select_rows(&idx)?;
        let l = models.victim.classify(&batch)?;
        objectives.extend(cfg.energy.objective.eval(&l, &vec![y_tar; idx.len()])?.data().iter().map(|&v| v as f64));
        energies.extend(energy.distances(&batch)?);
        let p = models.aux.probabilities(&batch)?;
        aux.extend((0..idx.len()).map(|i| p.row(i)[y_ori] as f64));
        logits.extend((0..idx.len()).map(|i| l.row(i).to_vec()));
    }
    let mut records = Vec::new();
    let mut target_softmax = 0.0;
    for (i, l) in logits.into_iter().enumerate() {
        target_softmax += softmax_row(&l)[y_tar];
        let deceives = argmax(&l) == y_tar;
        if deceives {
            records.push(SampleRecord {
                chain: i,
                image: states.index_row(i)?,
                logits: l,
                deceives,
                energy: energies[i],
                aux_score: aux[i],
            });
        }
    }
    let m = cfg.m as f64;
    let diagnostics = Diagnostics {
        m: cfg.m,
        accepted: records.len(),
        mean_objective: objectives.iter().sum::<f64>() / m,
        mean_target_softmax: target_softmax / m,
        mean_energy: energies.iter().sum::<f64>() / m,
    };
    Ok(if records.is_empty() {
        RejectionOutcome::NoAcceptance(diagnostics)
    } else {
        RejectionOutcome::Accepted { records, diagnostics }
    })
}

/// First index of the maximum.
fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Number of records the κ filter keeps.
pub fn kappa_keep(len: usize, kappa: f64) -> usize {
    if len == 0 {
        return 0;
    }
    ((kappa * len as f64 + 1e-9).floor() as usize).clamp(1, len)
}

/// Keeps the top κ fraction by auxiliary score, then the `n` lowest-energy of
/// those, returned in ascending energy. Sorts are stable.
pub fn refine(records: &[SampleRecord], kappa: f64, n: usize) -> Vec<SampleRecord> {
    let mut by_aux: Vec<&SampleRecord> = records.iter().collect();
    by_aux.sort_by(|a, b| b.aux_score.total_cmp(&a.aux_score));
    by_aux.truncate(kappa_keep(records.len(), kappa));
    by_aux.sort_by(|a, b| a.energy.total_cmp(&b.energy));
    by_aux.into_iter().take(n).cloned().collect()
}

/// Fraction of records whose surrogate prediction is `y_ori`.
pub fn surrogate_success_rate(records: &[SampleRecord], y_ori: usize, surrogate: &ClassifierParams<f32>) -> Result<f64> {
    if records.is_empty() {
        return Err(PipelineError::Empty);
    }
    let images: Vec<Tensor<f32>> = records.iter().map(|r| r.image.clone()).collect();
    let preds = surrogate.predict(&Tensor::stack(&images)?)?;
    Ok(preds.iter().filter(|&&p| p == y_ori).count() as f64 / records.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub y_ori: usize,
    pub y_tar: usize,
    pub m: usize,
    pub accepted: usize,
    pub acceptance_rate: f64,
    pub no_acceptance: bool,
    pub mean_objective: f64,
    pub mean_target_softmax: f64,
    pub mean_energy: f64,
    pub refined: usize,
    /// Mean distance term of the refined samples.
    pub refined_mean_energy: Option<f64>,
    /// Filled in when a surrogate annotator scores the pair; 0 when nothing was accepted.
    pub success_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub refined: Vec<SampleRecord>,
    pub report: PairReport,
}

/// Rejection sampling followed by refinement for one `(x_ori, y_tar)` pair.
pub fn run_attack(
    x_ori: &Tensor<f32>,
    y_ori: usize,
    y_tar: usize,
    cfg: &AttackConfig,
    models: Models<'_>,
) -> Result<AttackResult> {
    if y_ori == y_tar {
        return Err(PipelineError::SameClass(y_tar));
    }
    let outcome = rejection_sample(cfg, x_ori, y_ori, y_tar, models)?;
    let refined = refine(outcome.records(), cfg.kappa, cfg.n);
    assert!(refined.iter().all(|r| r.deceives), "refined samples must deceive the victim");
    let d = *outcome.diagnostics();
    let report = PairReport {
        y_ori,
        y_tar,
        m: d.m,
        accepted: d.accepted,
        acceptance_rate: d.accepted as f64 / d.m as f64,
        no_acceptance: matches!(outcome, RejectionOutcome::NoAcceptance(_)),
        mean_objective: d.mean_objective,
        mean_target_softmax: d.mean_target_softmax,
        mean_energy: d.mean_energy,
        refined: refined.len(),
        refined_mean_energy: (!refined.is_empty())
            .then(|| refined.iter().map(|r| r.energy).sum::<f64>() / refined.len() as f64),
        success_rate: None,
    };
    Ok(AttackResult { refined, report })
}

/// Attacks every `(source, target ≠ source label)` pair and scores it.
#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    /// One row per source, cells in ascending target order.
    pub rows: Vec<GridRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub y_ori: usize,
    pub cells: Vec<AttackResult>,
}

impl GridResult {
    /// Success rates, rows by source, columns by ascending target; no-acceptance cells are 0.
    pub fn success_matrix(&self) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| r.cells.iter().map(|c| c.report.success_rate.unwrap_or(0.0)).collect())
            .collect()
    }

    /// `source,r1,…,rk` with one row per source.
    pub fn write_matrix_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let cols = self.rows.iter().map(|r| r.cells.len()).max().unwrap_or(0);
        let header: Vec<String> = (1..=cols).map(|j| format!("r{j}")).collect();
        writeln!(w, "source,{}", header.join(","))?;
        for (row, rates) in self.rows.iter().zip(self.success_matrix()) {
            let cells: Vec<String> = rates.iter().map(|v| format!("{v:.4}")).collect();
            writeln!(w, "{},{}", row.y_ori, cells.join(","))?;
        }
        Ok(())
    }

    /// One JSON object per pair.
    pub fn write_reports_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for cell in self.rows.iter().flat_map(|r| &r.cells) {
            writeln!(w, "{}", serde_json::to_string(&cell.report).map_err(std::io::Error::other)?)?;
        }
        Ok(())
    }
}

/// Per-source inputs for [`run_grid`].
pub struct GridSource<'a> {
    pub x_ori: Tensor<f32>,
    pub y_ori: usize,
    pub targets: Vec<usize>,
    pub ebm: Option<&'a EnergyNetParams<f32>>,
}

/// Runs every pair in parallel; per-pair results are independent of scheduling.
pub fn run_grid(
    sources: &[GridSource<'_>],
    cfg: &AttackConfig,
    victim: &ClassifierParams<f32>,
    aux: &ClassifierParams<f32>,
    surrogate: &ClassifierParams<f32>,
) -> Result<GridResult> {
    let rows = sources
        .par_iter()
        .map(|src| -> Result<GridRow> {
            let cells = src
                .targets
                .par_iter()
                .map(|&y_tar| -> Result<AttackResult> {
                    let models = Models {
                        victim,
                        aux,
                        ebm: src.ebm,
                    };
                    let mut res = run_attack(&src.x_ori, src.y_ori, y_tar, cfg, models)?;
                    res.report.success_rate = Some(if res.refined.is_empty() {
                        0.0
                    } else {
                        surrogate_success_rate(&res.refined, src.y_ori, surrogate)?
                    });
                    Ok(res)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(GridRow { y_ori: src.y_ori, cells })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GridResult { rows })
}

/// A sources × targets table of targeted PGD results.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineGrid {
    pub rows: usize,
    pub cols: usize,
    /// Row-major cells; diagonal cells (target = source label) hold the clean image.
    pub images: Vec<Tensor<f32>>,
    pub deceives: Vec<bool>,
}

impl BaselineGrid {
    pub fn deceive_count(&self) -> usize {
        self.deceives.iter().filter(|&&d| d).count()
    }
}

/// Targeted PGD from every source toward every target class.
pub fn pgd_baseline_grid(
    victim: &ClassifierParams<f32>,
    sources: &[(Tensor<f32>, usize)],
    targets: &[usize],
    settings: &PgdConfig,
) -> Result<BaselineGrid> {
    let mut images = Vec::with_capacity(sources.len() * targets.len());
    let mut deceives = Vec::with_capacity(images.capacity());
    for (x, y) in sources {
        let batch = x.tile_rows(targets.len());
        let adv = pgd_attack(victim, &batch, PgdGoal::Targeted(targets), settings)?;
        let preds = victim.predict(&adv)?;
        for (j, &t) in targets.iter().enumerate() {
            if t == *y {
                images.push(x.clone());
                deceives.push(false);
            } else {
                images.push(adv.index_row(j)?);
                deceives.push(preds[j] == t);
            }
        }
    }
    Ok(BaselineGrid {
        rows: sources.len(),
        cols: targets.len(),
        images,
        deceives,
    })
}

/// Draws `count` samples of `p_adv` without rejection (for `p_vic`, set `c₁ = 0`).
pub fn sample_distribution(
    victim: &ClassifierParams<f32>,
    ebm: Option<&EnergyNetParams<f32>>,
    x_ori: &Tensor<f32>,
    y_tar: usize,
    spec: &AdvEnergySpec,
    sampler: &SamplerConfig,
    count: usize,
) -> Result<Tensor<f32>> {
    let energy = AdvEnergy::new(*spec, x_ori.clone(), y_tar, victim, ebm)?;
    let x = sample_chains(&energy, x_ori, sampler, count, 50)?;
    victim.check_batch(&x)?;
    Ok(x)
}
