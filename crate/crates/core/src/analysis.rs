//! Activation recording, PCA and result tables.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envtask::{
    evaluate, teacher_policy, GestureClass, ObjectKind, OcclusionSchedule, Outcome, OutcomeLabel, Simulation, Split,
    TaskConfig, TrialSpec,
};
use crate::error::{Result, VmdnnError};
use crate::network::{Layer, PfcMode, Trajectory, VisionMode, Vmdnn};

/// Layers whose activations are recorded, in trace order.
pub const RECORDED_LAYERS: [Layer; 5] = [Layer::Vf, Layer::Vs, Layer::Pfc, Layer::Ms, Layer::Mf];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub trial_index: usize,
    pub gesture: Option<GestureClass>,
    pub target_kind: ObjectKind,
    pub target_x: f64,
    pub target_y: f64,
    pub occlusion_onset: Option<usize>,
    pub condition: String,
}

/// Activations of one trial. `steps[t][l]` is the flattened output of
/// `RECORDED_LAYERS[l]` after step `t`; convolutional maps are flattened
/// map-major, then row, then column.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialTrace {
    pub meta: TraceMeta,
    pub steps: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ActivationTrace {
    pub trials: Vec<TrialTrace>,
}

fn layer_slot(layer: Layer) -> Result<usize> {
    RECORDED_LAYERS
        .iter()
        .position(|&l| l == layer)
        .ok_or_else(|| VmdnnError::config(format!("layer {} is not recorded", layer.name())))
}

impl ActivationTrace {
    /// Every recorded vector of `layer`, trial by trial and step by step.
    pub fn observations(&self, layer: Layer) -> Result<Vec<&[f64]>> {
        let slot = layer_slot(layer)?;
        Ok(self
            .trials
            .iter()
            .flat_map(|t| t.steps.iter().map(move |s| s[slot].as_slice()))
            .collect())
    }
}

/// Closed-loop rollout of `net` on `trial`.
pub fn run_trial(net: &Vmdnn, trial: &TrialSpec, task: &TaskConfig, occlusion: &OcclusionSchedule, record: bool) -> Result<(Trajectory, Outcome)> {
    let mut sim = Simulation::new(trial, task);
    let traj = net.run_closed_loop(&mut sim, trial.horizon(), occlusion, record)?;
    let outcome = evaluate(&sim.episode(), trial, task);
    Ok((traj, outcome))
}

/// Records activations of closed-loop rollouts, one trace per trial.
pub fn record(net: &Vmdnn, trials: &[TrialSpec], task: &TaskConfig, occlusion: &OcclusionSchedule) -> Result<ActivationTrace> {
    let condition = net.config().condition_name();
    let traces: Vec<Result<TrialTrace>> = trials
        .par_iter()
        .enumerate()
        .map(|(i, trial)| {
            let (traj, _) = run_trial(net, trial, task, occlusion, true)?;
            let steps = traj
                .steps
                .iter()
                .map(|s| {
                    let state = s.state.as_ref().expect("recorded rollout");
                    RECORDED_LAYERS.iter().map(|&l| state.activations(l).to_vec()).collect()
                })
                .collect();
            let target = trial.target();
            Ok(TrialTrace {
                meta: TraceMeta {
                    trial_index: i,
                    gesture: trial.gesture,
                    target_kind: target.kind,
                    target_x: target.x,
                    target_y: target.y,
                    occlusion_onset: occlusion.onset,
                    condition: condition.clone(),
                },
                steps,
            })
        })
        .collect();
    Ok(ActivationTrace {
        trials: traces.into_iter().collect::<Result<_>>()?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `k` orthonormal components of length `d`.
    pub components: Vec<Vec<f64>>,
    /// Explained-variance ratio of every dimension, non-increasing.
    pub explained_ratio: Vec<f64>,
}

impl Pca {
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(x).zip(&self.mean).map(|((c, x), m)| c * (x - m)).sum())
            .collect()
    }
}

/// Covariance eigendecomposition of the rows of `data`. Each component is
/// signed so that its largest-magnitude loading is positive. When the data
/// has no variance all ratios are zero.
pub fn pca(data: &[&[f64]], k: usize) -> Result<Pca> {
    let n = data.len();
    let d = data.first().map_or(0, |r| r.len());
    if k == 0 || k > d {
        return Err(VmdnnError::config(format!("cannot extract {k} components from {d}-dimensional data")));
    }
    if n < k + 1 {
        return Err(VmdnnError::config(format!("{k} components need at least {} observations, got {n}", k + 1)));
    }
    if data.iter().any(|r| r.len() != d) {
        return Err(VmdnnError::config("observations have inconsistent dimensionality"));
    }
    let mut mean = vec![0.0; d];
    for r in data {
        for (m, v) in mean.iter_mut().zip(*r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut centered = vec![0.0; d];
    for r in data {
        for (c, (v, m)) in centered.iter_mut().zip(r.iter().zip(&mean)) {
            *c = v - m;
        }
        for i in 0..d {
            let ci = centered[i];
            for j in i..d {
                cov[(i, j)] += ci * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / (n - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let total: f64 = values.iter().sum();
    let explained_ratio = values
        .iter()
        .map(|v| if total > 0.0 { v / total } else { 0.0 })
        .collect();
    let components = order[..k]
        .iter()
        .map(|&i| {
            let mut c: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            let lead = c.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
            if lead < 0.0 {
                c.iter_mut().for_each(|v| *v = -*v);
            }
            c
        })
        .collect();
    Ok(Pca {
        mean,
        components,
        explained_ratio,
    })
}

/// Per-step PCA scores of one layer: `scores[trial][step]`.
pub fn pca_scores(trace: &ActivationTrace, layer: Layer, model: &Pca) -> Result<Vec<Vec<Vec<f64>>>> {
    let slot = layer_slot(layer)?;
    Ok(trace
        .trials
        .iter()
        .map(|t| t.steps.iter().map(|s| model.project(&s[slot])).collect())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaScoreRow {
    pub trial: usize,
    pub step: usize,
    pub layer: String,
    pub pc1: f64,
    pub pc2: f64,
    pub pc3: f64,
}

/// Scores of the first three components as CSV rows.
pub fn pca_rows(trace: &ActivationTrace, layer: Layer, model: &Pca) -> Result<Vec<PcaScoreRow>> {
    let scores = pca_scores(trace, layer, model)?;
    let mut rows = Vec::new();
    for (trial, steps) in trace.trials.iter().zip(scores) {
        for (step, s) in steps.into_iter().enumerate() {
            let pc = |i: usize| s.get(i).copied().unwrap_or(0.0);
            rows.push(PcaScoreRow {
                trial: trial.meta.trial_index,
                step,
                layer: layer.name().to_string(),
                pc1: pc(0),
                pc2: pc(1),
                pc3: pc(2),
            });
        }
    }
    Ok(rows)
}

/// Header `trial,step,layer,pc1,pc2,pc3`.
pub fn write_pca_csv(rows: &[PcaScoreRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(["trial", "step", "layer", "pc1", "pc2", "pc3"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pca_csv(path: &Path) -> Result<Vec<PcaScoreRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Pearson correlation; zero when either series is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n == 0 {
        return 0.0;
    }
    let ma = a[..n].iter().sum::<f64>() / n as f64;
    let mb = b[..n].iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (x, y) = (a[i] - ma, b[i] - mb);
        sab += x * y;
        saa += x * x;
        sbb += y * y;
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// How far occlusion from `onset` bends the trajectory of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionCorrelation {
    pub layer: Layer,
    /// Pearson r between occluded and intact scores, per component.
    pub r: Vec<f64>,
}

/// Fits PCA on the pooled intact and occluded activations of each layer,
/// then correlates the post-onset scores of the two rollouts, concatenated
/// over trials, component by component.
pub fn occlusion_pca_correlation(
    net: &Vmdnn,
    trials: &[TrialSpec],
    task: &TaskConfig,
    onset: usize,
    layers: &[Layer],
    k: usize,
) -> Result<Vec<OcclusionCorrelation>> {
    let intact = record(net, trials, task, &OcclusionSchedule::none())?;
    let occluded = record(net, trials, task, &OcclusionSchedule::at(onset))?;
    let mut out = Vec::new();
    for &layer in layers {
        let mut pooled = intact.observations(layer)?;
        pooled.extend(occluded.observations(layer)?);
        let model = pca(&pooled, k)?;
        let a = pca_scores(&intact, layer, &model)?;
        let b = pca_scores(&occluded, layer, &model)?;
        let r = (0..k)
            .map(|c| {
                let collect = |s: &Vec<Vec<Vec<f64>>>| -> Vec<f64> {
                    s.iter().flat_map(|steps| steps.iter().skip(onset).map(|v| v[c])).collect()
                };
                pearson(&collect(&a), &collect(&b))
            })
            .collect();
        out.push(OcclusionCorrelation { layer, r });
    }
    Ok(out)
}

/// Something that can be evaluated in the environment.
#[derive(Debug, Clone, Copy)]
pub enum Agent<'a> {
    Model(&'a Vmdnn),
    /// The scripted teacher, which ignores frames.
    Teacher,
}

pub fn run_agent(agent: Agent<'_>, trial: &TrialSpec, task: &TaskConfig, occlusion: &OcclusionSchedule) -> Result<Outcome> {
    match agent {
        Agent::Model(net) => Ok(run_trial(net, trial, task, occlusion, false)?.1),
        Agent::Teacher => {
            let mut sim = Simulation::new(trial, task);
            for t in 0..trial.horizon() {
                sim.act(teacher_policy(trial, t, task));
            }
            Ok(evaluate(&sim.episode(), trial, task))
        }
    }
}

/// A trained model (or the teacher) with its condition labels.
#[derive(Debug, Clone)]
pub struct EvalModel<'a> {
    pub vision_mode: VisionMode,
    pub pfc_mode: PfcMode,
    pub seed: u64,
    pub agent: Agent<'a>,
}

impl EvalModel<'_> {
    pub fn condition(&self) -> String {
        format!("{}+{}", self.vision_mode, self.pfc_mode)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResultRow {
    pub condition: String,
    pub vision_mode: String,
    pub pfc_mode: String,
    /// Split name, or `occ=<onset>` / `occ=none` for occlusion rows.
    pub split: String,
    pub seed: u64,
    pub n: usize,
    pub successes: usize,
    pub confusions: usize,
}

impl ResultRow {
    pub fn others(&self) -> usize {
        self.n - self.successes - self.confusions
    }

    pub fn success_rate(&self) -> f64 {
        self.successes as f64 / self.n as f64
    }

    pub fn confusion_rate(&self) -> f64 {
        self.confusions as f64 / self.n as f64
    }

    pub fn other_rate(&self) -> f64 {
        self.others() as f64 / self.n as f64
    }

    /// Share of failed trials in which the wrong object was grasped.
    pub fn confusion_share_of_failures(&self) -> f64 {
        let failures = self.n - self.successes;
        if failures == 0 {
            0.0
        } else {
            self.confusions as f64 / failures as f64
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    condition: String,
    vision_mode: String,
    pfc_mode: String,
    split: String,
    seed: u64,
    n: usize,
    success: String,
    confusion: String,
    other: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
}

impl ResultsTable {
    pub fn find(&self, condition: &str, split: &str, seed: u64) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.condition == condition && r.split == split && r.seed == seed)
    }

    /// Header `condition,vision_mode,pfc_mode,split,seed,n,success,confusion,other`
    /// with rates to four decimals.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        if self.rows.is_empty() {
            w.write_record([
                "condition", "vision_mode", "pfc_mode", "split", "seed", "n", "success", "confusion", "other",
            ])?;
        }
        for r in &self.rows {
            w.serialize(CsvRow {
                condition: r.condition.clone(),
                vision_mode: r.vision_mode.clone(),
                pfc_mode: r.pfc_mode.clone(),
                split: r.split.clone(),
                seed: r.seed,
                n: r.n,
                success: format!("{:.4}", r.success_rate()),
                confusion: format!("{:.4}", r.confusion_rate()),
                other: format!("{:.4}", r.other_rate()),
            })?;
        }
        w.flush()?;
        Ok(())
    }

    /// Counts are recovered from the rates, exact for `n` below 10 000.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut rows = Vec::new();
        for rec in r.deserialize::<CsvRow>() {
            let rec = rec?;
            let count = |s: &str| -> Result<usize> {
                let rate: f64 = s
                    .parse()
                    .map_err(|_| VmdnnError::Format(format!("bad rate {s:?} in results table")))?;
                Ok((rate * rec.n as f64).round() as usize)
            };
            rows.push(ResultRow {
                successes: count(&rec.success)?,
                confusions: count(&rec.confusion)?,
                condition: rec.condition,
                vision_mode: rec.vision_mode,
                pfc_mode: rec.pfc_mode,
                split: rec.split,
                seed: rec.seed,
                n: rec.n,
            });
        }
        Ok(Self { rows })
    }
}

fn tally(model: &EvalModel<'_>, split: String, trials: &[TrialSpec], task: &TaskConfig, occlusion: &OcclusionSchedule) -> Result<ResultRow> {
    if trials.is_empty() {
        return Err(VmdnnError::config("evaluation needs at least one trial"));
    }
    let outcomes: Vec<Result<Outcome>> = trials
        .par_iter()
        .map(|t| run_agent(model.agent, t, task, occlusion))
        .collect();
    let mut row = ResultRow {
        condition: model.condition(),
        vision_mode: model.vision_mode.to_string(),
        pfc_mode: model.pfc_mode.to_string(),
        split,
        seed: model.seed,
        n: trials.len(),
        successes: 0,
        confusions: 0,
    };
    for o in outcomes {
        match o?.label {
            OutcomeLabel::Success => row.successes += 1,
            OutcomeLabel::FailureConfusion => row.confusions += 1,
            OutcomeLabel::FailureOther => {}
        }
    }
    Ok(row)
}

/// Closed-loop success per model and split.
pub fn success_table(models: &[EvalModel<'_>], splits: &[(Split, Vec<TrialSpec>)], task: &TaskConfig) -> Result<ResultsTable> {
    let mut rows = Vec::new();
    for m in models {
        for (split, trials) in splits {
            rows.push(tally(m, split.name().to_string(), trials, task, &OcclusionSchedule::none())?);
        }
    }
    Ok(ResultsTable { rows })
}

pub fn occlusion_label(onset: Option<usize>) -> String {
    match onset {
        Some(t) => format!("occ={t}"),
        None => "occ=none".to_string(),
    }
}

/// Success per model and occlusion onset (`None` is the intact baseline).
pub fn occlusion_table(models: &[EvalModel<'_>], trials: &[TrialSpec], onsets: &[Option<usize>], task: &TaskConfig) -> Result<ResultsTable> {
    let mut rows = Vec::new();
    for m in models {
        for &onset in onsets {
            let schedule = OcclusionSchedule { onset };
            rows.push(tally(m, occlusion_label(onset), trials, task, &schedule)?);
        }
    }
    Ok(ResultsTable { rows })
}
