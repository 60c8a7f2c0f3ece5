//! Backpropagation through time, plain SGD with weight decay, the two
//! pre-training stages and a finite-difference gradient oracle.

use std::path::Path;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envtask::TrialSpec;
use crate::error::{Result, VmdnnError};
use crate::network::{init_parameters, Block, GradientSet, NetworkState, ParameterSet, Vmdnn, VmdnnConfig};
use crate::numerics::{act_prime_from_output, encode_analog, kl_loss, kl_softmax_grad, FeatureMapStack, KL_FLOOR};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Log the epoch loss every this many epochs (0 disables logging).
    #[serde(default = "default_report_every")]
    pub report_every: usize,
    /// Rescale gradients whose global L2 norm exceeds this value.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

fn default_report_every() -> usize {
    50
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            weight_decay: 0.0005,
            epochs: 400,
            seed: 0,
            report_every: default_report_every(),
            clip_norm: None,
        }
    }
}

impl TrainingConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            v.push(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            v.push(format!("weight decay must be >= 0, got {}", self.weight_decay));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                v.push(format!("clip norm must be positive, got {c}"));
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(VmdnnError::config(v.join("; ")))
        }
    }
}

/// Teacher-forced frames with the target distribution at every step.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    pub frames: Vec<FeatureMapStack>,
    pub targets: Vec<Vec<f64>>,
    pub trial: Option<TrialSpec>,
}

impl SequenceSample {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self, cfg: &VmdnnConfig) -> Result<()> {
        if self.frames.is_empty() || self.frames.len() != self.targets.len() {
            return Err(VmdnnError::config(format!(
                "sample has {} frames and {} targets",
                self.frames.len(),
                self.targets.len()
            )));
        }
        let gs = cfg.mo.groups.group_size;
        for (t, y) in self.targets.iter().enumerate() {
            if y.len() != cfg.output_size() {
                return Err(VmdnnError::config(format!(
                    "target {t} has {} entries, output layer has {}",
                    y.len(),
                    cfg.output_size()
                )));
            }
            for group in y.chunks(gs) {
                let sum: f64 = group.iter().sum();
                if group.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                    return Err(VmdnnError::Domain(format!("target {t} is not a distribution per group")));
                }
            }
        }
        Ok(())
    }
}

#[inline]
fn matvec_t_acc(w: &[f64], cols: usize, g: &[f64], out: &mut [f64]) {
    if cols == 0 {
        return;
    }
    for (row, &gi) in w.chunks_exact(cols).zip(g) {
        if gi == 0.0 {
            continue;
        }
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += wij * gi;
        }
    }
}

#[inline]
fn outer_acc(grad: &mut [f64], cols: usize, a: &[f64], x: &[f64]) {
    if cols == 0 {
        return;
    }
    for (row, &ai) in grad.chunks_exact_mut(cols).zip(a) {
        if ai == 0.0 {
            continue;
        }
        for (gij, &xj) in row.iter_mut().zip(x) {
            *gij += ai * xj;
        }
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Disjoint mutable views of two blocks (`a` precedes `b` in canonical order).
fn two_blocks_mut(g: &mut GradientSet, a: Block, b: Block) -> (&mut [f64], &mut [f64]) {
    let ra = g.layout().range(a);
    let rb = g.layout().range(b);
    debug_assert!(ra.end <= rb.start);
    let (lo, hi) = g.as_mut_slice().split_at_mut(rb.start);
    (&mut lo[ra], &mut hi[..rb.len()])
}

fn check_grad(values: &[f64], layer: &str, t: usize) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(VmdnnError::divergence(layer, t))
    }
}

/// Forward pass keeping every state; `states[0]` is the neutral state and
/// `states[t + 1]` follows frame `t`.
fn forward_states(net: &Vmdnn, frames: &[FeatureMapStack]) -> Result<Vec<NetworkState>> {
    let mut states = Vec::with_capacity(frames.len() + 1);
    states.push(net.init_state());
    for frame in frames {
        let next = net.forward_step(states.last().expect("non-empty"), frame)?;
        states.push(next);
    }
    Ok(states)
}

/// Vision and PFC only, PFC recurrence removed.
fn forward_visual_states(net: &Vmdnn, frames: &[FeatureMapStack]) -> Result<Vec<NetworkState>> {
    let mut states = Vec::with_capacity(frames.len() + 1);
    states.push(net.init_state());
    for frame in frames {
        let prev = states.last().expect("non-empty");
        let mut next = prev.clone();
        net.vision_step(prev, &frame.values, &mut next)?;
        net.pfc_step(prev, &mut next, true)?;
        next.t = prev.t + 1;
        states.push(next);
    }
    Ok(states)
}

/// Error signals injected into the unrolled graph.
struct Injection<'a> {
    /// Loss gradient with respect to `u_MO` per step; `None` skips the motor
    /// layers entirely.
    mo: Option<&'a [Vec<f64>]>,
    /// Extra gradient with respect to `y_PFC` per step (empty vectors = 0).
    pfc: Option<&'a [Vec<f64>]>,
    severed: bool,
}

/// Reverse sweep over the stored states. Every layer carries `gu`, the
/// gradient with respect to its internal state at the following step, so the
/// `(1 - 1/tau)` self-carry enters as `c * gu_next`.
fn backward(net: &Vmdnn, states: &[NetworkState], frames: &[FeatureMapStack], inj: &Injection<'_>) -> Result<GradientSet> {
    let cfg = net.config();
    let p = net.params();
    let mut g = p.zeros_like();
    let (npfc, nms, nmf, nmo) = (cfg.pfc.neurons, cfg.ms.neurons, cfg.mf.neurons, cfg.output_size());
    let pfc_in = net.pfc_in;
    let (t_vf, t_vs, t_pfc) = (cfg.tau_vf(), cfg.tau_vs(), cfg.tau_pfc());
    let (t_ms, t_mf, t_mo) = (cfg.ms.tau, cfg.mf.tau, cfg.mo.tau);
    let carry = |tau: f64| 1.0 - 1.0 / tau;

    let mut gu_vf = vec![0.0; net.vf.output_len()];
    let mut gu_vs = vec![0.0; net.vs.output_len()];
    let mut gu_pfc = vec![0.0; npfc];
    let mut gu_ms = vec![0.0; nms];
    let mut gu_mf = vec![0.0; nmf];
    let mut gu_mo = vec![0.0; nmo];
    let mut ga_pfc_next = vec![0.0; npfc];
    let mut ga_ms_next = vec![0.0; nms];
    let mut ga_mf_next = vec![0.0; nmf];

    for t in (0..frames.len()).rev() {
        let cur = &states[t + 1];
        let prev = &states[t];
        let mut ga_ms = vec![0.0; nms];
        let mut ga_mf = vec![0.0; nmf];
        let mut gy_pfc = vec![0.0; npfc];
        if let Some(extra) = inj.pfc {
            if !extra[t].is_empty() {
                add_into(&mut gy_pfc, &extra[t]);
            }
        }

        if let Some(mo_err) = inj.mo {
            let c = carry(t_mo);
            for (gu, e) in gu_mo.iter_mut().zip(&mo_err[t]) {
                *gu = e + c * *gu;
            }
            check_grad(&gu_mo, "M_O", t)?;
            let ga_mo: Vec<f64> = gu_mo.iter().map(|v| v / t_mo).collect();
            outer_acc(g.block_mut(Block::WMoMf), nmf, &ga_mo, &cur.y_mf);
            add_into(g.block_mut(Block::BiasMo), &ga_mo);

            // M_F output feeds M_O now and M_S, M_F at the next step
            let mut gy_mf = vec![0.0; nmf];
            matvec_t_acc(p.block(Block::WMoMf), nmf, &ga_mo, &mut gy_mf);
            matvec_t_acc(p.block(Block::WMsMf), nmf, &ga_ms_next, &mut gy_mf);
            matvec_t_acc(p.block(Block::WMfMf), nmf, &ga_mf_next, &mut gy_mf);
            let c = carry(t_mf);
            for i in 0..nmf {
                gu_mf[i] = gy_mf[i] * act_prime_from_output(cur.y_mf[i]) + c * gu_mf[i];
                ga_mf[i] = gu_mf[i] / t_mf;
            }
            check_grad(&gu_mf, "M_F", t)?;
            outer_acc(g.block_mut(Block::WMfMs), nms, &ga_mf, &prev.y_ms);
            outer_acc(g.block_mut(Block::WMfMf), nmf, &ga_mf, &prev.y_mf);
            add_into(g.block_mut(Block::BiasMf), &ga_mf);

            // M_S output feeds PFC, M_S and M_F at the next step
            let mut gy_ms = vec![0.0; nms];
            if !inj.severed {
                matvec_t_acc(p.block(Block::WPfcMs), nms, &ga_pfc_next, &mut gy_ms);
            }
            matvec_t_acc(p.block(Block::WMsMs), nms, &ga_ms_next, &mut gy_ms);
            matvec_t_acc(p.block(Block::WMfMs), nms, &ga_mf_next, &mut gy_ms);
            let c = carry(t_ms);
            for i in 0..nms {
                gu_ms[i] = gy_ms[i] * act_prime_from_output(cur.y_ms[i]) + c * gu_ms[i];
                ga_ms[i] = gu_ms[i] / t_ms;
            }
            check_grad(&gu_ms, "M_S", t)?;
            outer_acc(g.block_mut(Block::WMsPfc), npfc, &ga_ms, &cur.y_pfc);
            outer_acc(g.block_mut(Block::WMsMs), nms, &ga_ms, &prev.y_ms);
            outer_acc(g.block_mut(Block::WMsMf), nmf, &ga_ms, &prev.y_mf);
            add_into(g.block_mut(Block::BiasMs), &ga_ms);

            matvec_t_acc(p.block(Block::WMsPfc), npfc, &ga_ms, &mut gy_pfc);
        }

        if !inj.severed {
            matvec_t_acc(p.block(Block::WPfcPfc), npfc, &ga_pfc_next, &mut gy_pfc);
        }
        let c = carry(t_pfc);
        let mut ga_pfc = vec![0.0; npfc];
        for i in 0..npfc {
            gu_pfc[i] = gy_pfc[i] * act_prime_from_output(cur.y_pfc[i]) + c * gu_pfc[i];
            ga_pfc[i] = gu_pfc[i] / t_pfc;
        }
        check_grad(&gu_pfc, "PFC", t)?;
        outer_acc(g.block_mut(Block::KernelPfc), pfc_in, &ga_pfc, &cur.v_vs.values);
        if !inj.severed {
            outer_acc(g.block_mut(Block::WPfcPfc), npfc, &ga_pfc, &prev.y_pfc);
            outer_acc(g.block_mut(Block::WPfcMs), nms, &ga_pfc, &prev.y_ms);
        }
        add_into(g.block_mut(Block::BiasPfc), &ga_pfc);

        let mut gv_vs = vec![0.0; pfc_in];
        matvec_t_acc(p.block(Block::KernelPfc), pfc_in, &ga_pfc, &mut gv_vs);
        let c = carry(t_vs);
        let mut ga_vs = vec![0.0; gu_vs.len()];
        for i in 0..gu_vs.len() {
            gu_vs[i] = gv_vs[i] * act_prime_from_output(cur.v_vs.values[i]) + c * gu_vs[i];
            ga_vs[i] = gu_vs[i] / t_vs;
        }
        check_grad(&gu_vs, "V_S", t)?;
        {
            let (gk, gb) = two_blocks_mut(&mut g, Block::KernelVs, Block::BiasVs);
            net.vs.backward_params(&cur.v_vf.values, &ga_vs, gk, Some(gb));
        }

        let mut gv_vf = vec![0.0; gu_vf.len()];
        net.vs.backward_input(&ga_vs, p.block(Block::KernelVs), &mut gv_vf);
        let c = carry(t_vf);
        let mut ga_vf = vec![0.0; gu_vf.len()];
        for i in 0..gu_vf.len() {
            gu_vf[i] = gv_vf[i] * act_prime_from_output(cur.v_vf.values[i]) + c * gu_vf[i];
            ga_vf[i] = gu_vf[i] / t_vf;
        }
        check_grad(&gu_vf, "V_F", t)?;
        {
            let (gk, gb) = two_blocks_mut(&mut g, Block::KernelVf, Block::BiasVf);
            net.vf.backward_params(&frames[t].values, &ga_vf, gk, Some(gb));
        }

        ga_pfc_next = ga_pfc;
        ga_ms_next = ga_ms;
        ga_mf_next = ga_mf;
    }
    Ok(g)
}

/// Summed KL loss of a teacher-forced rollout.
pub fn sequence_loss(net: &Vmdnn, sample: &SequenceSample) -> Result<f64> {
    sample.validate(net.config())?;
    let mut state = net.init_state();
    let mut loss = 0.0;
    for (frame, target) in sample.frames.iter().zip(&sample.targets) {
        state = net.forward_step(&state, frame)?;
        loss += kl_loss(target, &state.y_mo);
    }
    Ok(loss)
}

/// Loss and exact gradient of a teacher-forced sequence.
pub fn bptt(net: &Vmdnn, sample: &SequenceSample) -> Result<(f64, GradientSet)> {
    sample.validate(net.config())?;
    let states = forward_states(net, &sample.frames)?;
    let gs = net.config().mo.groups.group_size;
    let mut loss = 0.0;
    let mut errs = Vec::with_capacity(sample.len());
    for (s, target) in states[1..].iter().zip(&sample.targets) {
        loss += kl_loss(target, &s.y_mo);
        let mut e = vec![0.0; target.len()];
        kl_softmax_grad(target, &s.y_mo, gs, &mut e);
        errs.push(e);
    }
    let inj = Injection {
        mo: Some(&errs),
        pfc: None,
        severed: false,
    };
    let grads = backward(net, &states, &sample.frames, &inj)?;
    Ok((loss, grads))
}

/// `w <- w - lr (g + decay w)` for kernels and weights, `b <- b - lr g` for
/// biases.
pub fn sgd_step(params: &mut ParameterSet, grads: &GradientSet, lr: f64, decay: f64) -> Result<()> {
    sgd_step_blocks(params, grads, lr, decay, &Block::ALL)
}

fn sgd_step_blocks(params: &mut ParameterSet, grads: &GradientSet, lr: f64, decay: f64, blocks: &[Block]) -> Result<()> {
    if params.layout() != grads.layout() {
        return Err(VmdnnError::config("gradient layout does not match parameters"));
    }
    for &b in blocks {
        let lambda = if b.is_bias() { 0.0 } else { decay };
        for (w, g) in params.block_mut(b).iter_mut().zip(grads.block(b)) {
            *w -= lr * (g + lambda * *w);
        }
    }
    Ok(())
}

fn clip(grads: &mut GradientSet, limit: Option<f64>) {
    if let Some(limit) = limit {
        let norm = grads.l2_norm();
        if norm > limit {
            log::debug!("clipping gradient norm {norm:.4} to {limit}");
            let k = limit / norm;
            grads.as_mut_slice().iter_mut().for_each(|g| *g *= k);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    /// Mean over samples of the summed per-sequence loss.
    pub mean_loss: f64,
    pub wall_seconds: f64,
    /// Loss per time step, averaged over all steps of the epoch.
    pub mean_step_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossCurve {
    pub epochs: Vec<EpochLoss>,
}

impl LossCurve {
    pub fn first(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.mean_loss)
    }

    pub fn last(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }

    pub fn min(&self) -> Option<f64> {
        self.epochs.iter().map(|e| e.mean_loss).min_by(f64::total_cmp)
    }

    /// Header `epoch,mean_loss,wall_seconds,mean_step_loss`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        if self.epochs.is_empty() {
            w.write_record(["epoch", "mean_loss", "wall_seconds", "mean_step_loss"])?;
        }
        for e in &self.epochs {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let epochs = r.deserialize().collect::<std::result::Result<_, _>>()?;
        Ok(Self { epochs })
    }
}

/// Per-sample SGD over `dataset` in a freshly shuffled order each epoch.
pub fn train(cfg: &VmdnnConfig, theta0: ParameterSet, dataset: &[SequenceSample], tcfg: &TrainingConfig) -> Result<(ParameterSet, LossCurve)> {
    train_with_observer(cfg, theta0, dataset, tcfg, &mut |_, _| Ok(()))
}

/// As [`train`], calling `observer` after every epoch (e.g. to checkpoint).
pub fn train_with_observer(
    cfg: &VmdnnConfig,
    theta0: ParameterSet,
    dataset: &[SequenceSample],
    tcfg: &TrainingConfig,
    observer: &mut dyn FnMut(&EpochLoss, &ParameterSet) -> Result<()>,
) -> Result<(ParameterSet, LossCurve)> {
    tcfg.validate()?;
    if dataset.is_empty() {
        return Err(VmdnnError::config("training dataset is empty"));
    }
    for s in dataset {
        s.validate(cfg)?;
    }
    let mut net = Vmdnn::new(cfg.clone(), theta0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let steps: usize = dataset.iter().map(SequenceSample::len).sum();
    let start = Instant::now();
    let mut curve = LossCurve::default();
    for epoch in 1..=tcfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let (loss, mut grads) = bptt(&net, &dataset[i])?;
            clip(&mut grads, tcfg.clip_norm);
            total += loss;
            sgd_step(net.params_mut(), &grads, tcfg.learning_rate, tcfg.weight_decay)?;
        }
        let record = EpochLoss {
            epoch,
            mean_loss: total / dataset.len() as f64,
            wall_seconds: start.elapsed().as_secs_f64(),
            mean_step_loss: total / steps as f64,
        };
        if tcfg.report_every > 0 && (epoch % tcfg.report_every == 0 || epoch == 1) {
            log::info!("epoch {epoch}: mean loss {:.5}", record.mean_loss);
        }
        observer(&record, net.params())?;
        curve.epochs.push(record);
    }
    Ok((net.into_params(), curve))
}

/// Grasp pre-training on gestureless, single-object sequences.
pub fn pretrain_grasp(cfg: &VmdnnConfig, theta0: ParameterSet, dataset: &[SequenceSample], tcfg: &TrainingConfig) -> Result<(ParameterSet, LossCurve)> {
    if let Some(s) = dataset.iter().find(|s| s.trial.as_ref().is_some_and(|t| t.gesture.is_some())) {
        return Err(VmdnnError::config(format!(
            "grasp pre-training expects gestureless sequences, got a {}-step gesture trial",
            s.len()
        )));
    }
    train(cfg, theta0, dataset, tcfg)
}

/// A labelled gesture clip for visual pre-training.
#[derive(Debug, Clone, PartialEq)]
pub struct GestureClip {
    pub frames: Vec<FeatureMapStack>,
    pub label: usize,
}

pub const GESTURE_CLASSES: usize = 4;

/// Temporary 4-way softmax read-out on `y_PFC`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    /// Row-major `[class][pfc neuron]`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl ClassifierHead {
    pub fn init(pfc_neurons: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_4ead);
        let bound = 1.0 / (pfc_neurons.max(1) as f64).sqrt();
        Self {
            weights: (0..GESTURE_CLASSES * pfc_neurons)
                .map(|_| rng.gen_range(-bound..bound))
                .collect(),
            biases: vec![0.0; GESTURE_CLASSES],
        }
    }

    fn probabilities(&self, y_pfc: &[f64]) -> Vec<f64> {
        let n = y_pfc.len();
        let z: Vec<f64> = self
            .biases
            .iter()
            .enumerate()
            .map(|(k, b)| b + self.weights[k * n..(k + 1) * n].iter().zip(y_pfc).map(|(w, y)| w * y).sum::<f64>())
            .collect();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }
}

/// PFC activation after the last frame with the PFC recurrence removed.
pub fn visual_features(net: &Vmdnn, frames: &[FeatureMapStack]) -> Result<Vec<f64>> {
    let states = forward_visual_states(net, frames)?;
    Ok(states.last().expect("non-empty").y_pfc.clone())
}

pub fn classify(net: &Vmdnn, head: &ClassifierHead, frames: &[FeatureMapStack]) -> Result<usize> {
    let p = head.probabilities(&visual_features(net, frames)?);
    Ok((0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap_or(0))
}

/// Cross-entropy at the final frame, with gradients for the visual pathway
/// and the head.
pub fn classifier_gradients(net: &Vmdnn, head: &ClassifierHead, clip: &GestureClip) -> Result<(f64, GradientSet, ClassifierHead)> {
    if clip.frames.is_empty() || clip.label >= GESTURE_CLASSES {
        return Err(VmdnnError::config("gesture clip needs frames and a label in 0..4"));
    }
    let states = forward_visual_states(net, &clip.frames)?;
    let y = &states.last().expect("non-empty").y_pfc;
    let probs = head.probabilities(y);
    let loss = -probs[clip.label].max(f64::MIN_POSITIVE).ln();
    let n = y.len();
    let dz: Vec<f64> = probs
        .iter()
        .enumerate()
        .map(|(k, p)| p - f64::from(u8::from(k == clip.label)))
        .collect();
    let mut head_grad = ClassifierHead {
        weights: vec![0.0; head.weights.len()],
        biases: dz.clone(),
    };
    outer_acc(&mut head_grad.weights, n, &dz, y);
    let mut gy = vec![0.0; n];
    matvec_t_acc(&head.weights, n, &dz, &mut gy);
    let mut pfc_err = vec![Vec::new(); clip.frames.len()];
    *pfc_err.last_mut().expect("non-empty") = gy;
    let inj = Injection {
        mo: None,
        pfc: Some(&pfc_err),
        severed: true,
    };
    let grads = backward(net, &states, &clip.frames, &inj)?;
    Ok((loss, grads, head_grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualPretraining {
    /// Input parameters with only the visual blocks replaced.
    pub params: ParameterSet,
    pub head: ClassifierHead,
    pub curve: LossCurve,
}

/// Trains the visual pathway as a gesture classifier. Only the blocks in
/// [`Block::VISUAL`] change; the head is returned for evaluation and is not
/// part of the network.
pub fn pretrain_visual(cfg: &VmdnnConfig, theta: ParameterSet, clips: &[GestureClip], tcfg: &TrainingConfig) -> Result<VisualPretraining> {
    tcfg.validate()?;
    if clips.is_empty() {
        return Err(VmdnnError::config("no gesture clips for visual pre-training"));
    }
    let mut net = Vmdnn::new(cfg.clone(), theta)?;
    let mut head = ClassifierHead::init(cfg.pfc.neurons, tcfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut order: Vec<usize> = (0..clips.len()).collect();
    let start = Instant::now();
    let mut curve = LossCurve::default();
    let (lr, decay) = (tcfg.learning_rate, tcfg.weight_decay);
    for epoch in 1..=tcfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let (loss, mut grads, hg) = classifier_gradients(&net, &head, &clips[i])?;
            clip(&mut grads, tcfg.clip_norm);
            total += loss;
            sgd_step_blocks(net.params_mut(), &grads, lr, decay, &Block::VISUAL)?;
            for (w, g) in head.weights.iter_mut().zip(&hg.weights) {
                *w -= lr * (g + decay * *w);
            }
            for (b, g) in head.biases.iter_mut().zip(&hg.biases) {
                *b -= lr * g;
            }
        }
        let mean = total / clips.len() as f64;
        if tcfg.report_every > 0 && (epoch % tcfg.report_every == 0 || epoch == 1) {
            log::info!("visual pre-training epoch {epoch}: cross-entropy {mean:.4}");
        }
        curve.epochs.push(EpochLoss {
            epoch,
            mean_loss: mean,
            wall_seconds: start.elapsed().as_secs_f64(),
            mean_step_loss: mean,
        });
    }
    Ok(VisualPretraining {
        params: net.into_params(),
        head,
        curve,
    })
}

/// Fraction of clips the head labels correctly.
pub fn classifier_accuracy(net: &Vmdnn, head: &ClassifierHead, clips: &[GestureClip]) -> Result<f64> {
    let mut correct = 0usize;
    for c in clips {
        if classify(net, head, &c.frames)? == c.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / clips.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Flat index of the worst component.
    pub worst_index: usize,
    /// Finite-difference and backpropagated values at `worst_index`.
    pub worst_fd: f64,
    pub worst_bp: f64,
    /// Largest relative error per block, in canonical order.
    pub per_block: Vec<(Block, f64)>,
}

/// `ln max(y, floor)` of every output at every step.
fn log_outputs(net: &Vmdnn, sample: &SequenceSample) -> Result<Vec<Vec<f64>>> {
    let mut state = net.init_state();
    let mut out = Vec::with_capacity(sample.len());
    for frame in &sample.frames {
        state = net.forward_step(&state, frame)?;
        out.push(state.y_mo.iter().map(|&y| y.max(KL_FLOOR).ln()).collect());
    }
    Ok(out)
}

/// Weight scale for gradient checks. With the default scale of 1 many
/// gradients of small networks sit at the roundoff floor of central
/// differences.
pub const GRADCHECK_INIT_SCALE: f64 = 6.0;
/// Bias half-widths of PFC and M_S as fractions of their effective τ, so the
/// slow states leave zero within a few steps and PFC gradients stay well
/// above the roundoff floor.
pub const GRADCHECK_PFC_BIAS: f64 = 0.3;
pub const GRADCHECK_MS_BIAS: f64 = 0.05;

/// A well-conditioned parameter point for gradient checks.
pub fn gradcheck_parameters(cfg: &VmdnnConfig, seed: u64) -> Result<ParameterSet> {
    let mut p = init_parameters(cfg, seed, GRADCHECK_INIT_SCALE)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    for (b, h) in [
        (Block::BiasPfc, GRADCHECK_PFC_BIAS * cfg.tau_pfc()),
        (Block::BiasMs, GRADCHECK_MS_BIAS * cfg.ms.tau),
    ] {
        for v in p.block_mut(b) {
            *v = rng.gen_range(-h..=h);
        }
    }
    Ok(p)
}

/// Uniform random frames in [-1, 1) and population-coded targets of uniform
/// random values, for gradient checks. Frames use `seed`, targets `seed + 1`.
pub fn random_sample(cfg: &VmdnnConfig, len: usize, seed: u64) -> Result<SequenceSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = (0..len)
        .map(|_| {
            let v = (0..cfg.height * cfg.width).map(|_| rng.gen_range(-1.0..1.0)).collect();
            FeatureMapStack::from_values(1, cfg.height, cfg.width, v)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let spec = &cfg.mo.groups;
    let targets = (0..len)
        .map(|_| {
            let vals: Vec<f64> = spec.ranges.iter().map(|r| rng.gen_range(r.lo..=r.hi)).collect();
            Ok(encode_analog(&vals, spec)?.0)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SequenceSample { frames, targets, trial: None })
}

/// Checks every parameter when there are at most this many.
pub const FULL_CHECK_LIMIT: usize = 4096;
/// Size of the random subset checked on larger parameter sets.
pub const SUBSET_SIZE: usize = 256;

/// Central differences against the BPTT gradient. Evaluations fan out over
/// the rayon pool; results are reduced in index order.
pub fn finite_difference_check(net: &Vmdnn, sample: &SequenceSample, eps: f64, seed: u64) -> Result<GradCheckReport> {
    if !(eps > 0.0) {
        return Err(VmdnnError::config("finite-difference step must be positive"));
    }
    let (_, grads) = bptt(net, sample)?;
    let n = net.params().len();
    let indices: Vec<usize> = if n <= FULL_CHECK_LIMIT {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = index::sample(&mut rng, n, SUBSET_SIZE).into_vec();
        v.sort_unstable();
        v
    };
    let errors: Vec<Result<(f64, f64)>> = indices
        .par_iter()
        .map(|&i| {
            let mut probe = net.clone();
            let w = probe.params().as_slice()[i];
            probe.params_mut().as_mut_slice()[i] = w + eps;
            let up = log_outputs(&probe, sample)?;
            probe.params_mut().as_mut_slice()[i] = w - eps;
            let down = log_outputs(&probe, sample)?;
            // E(up) - E(down) taken term by term: the target entropy cancels
            // exactly and the rounding of the full loss sum never enters.
            let mut diff = 0.0;
            for ((target, u), d) in sample.targets.iter().zip(&up).zip(&down) {
                for ((&t, &lu), &ld) in target.iter().zip(u).zip(d) {
                    if t > 0.0 {
                        diff += t * (ld - lu);
                    }
                }
            }
            let fd = diff / (2.0 * eps);
            let bp = grads.as_slice()[i];
            Ok((fd, bp))
        })
        .collect();
    let layout = net.params().layout();
    let mut per_block: Vec<(Block, f64)> = Block::ALL.iter().map(|&b| (b, 0.0)).collect();
    let mut max_rel_error = 0.0;
    let (mut worst_index, mut worst_fd, mut worst_bp) = (0, 0.0, 0.0);
    for (&i, pair) in indices.iter().zip(errors) {
        let (fd, bp) = pair?;
        let e = (fd - bp).abs() / fd.abs().max(bp.abs()).max(1e-8);
        if e > max_rel_error {
            max_rel_error = e;
            worst_index = i;
            worst_fd = fd;
            worst_bp = bp;
        }
        if let Some(b) = layout.block_of(i) {
            let slot = &mut per_block[b.index()].1;
            *slot = slot.max(e);
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        checked: indices.len(),
        worst_index,
        worst_fd,
        worst_bp,
        per_block,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_parameters, PfcMode, VisionMode};
    use proptest::prelude::*;
    use std::fs;

    fn tiny() -> VmdnnConfig {
        VmdnnConfig::tiny()
    }

    fn random_frames(cfg: &VmdnnConfig, len: usize, seed: u64) -> Vec<FeatureMapStack> {
        random_sample(cfg, len, seed).unwrap().frames
    }

    fn sample(cfg: &VmdnnConfig, len: usize, seed: u64) -> SequenceSample {
        random_sample(cfg, len, seed).unwrap()
    }

    fn net(cfg: &VmdnnConfig, seed: u64) -> Vmdnn {
        Vmdnn::new(cfg.clone(), init_parameters(cfg, seed, 1.0).unwrap()).unwrap()
    }

    fn strong_net(cfg: &VmdnnConfig, seed: u64) -> Vmdnn {
        Vmdnn::new(cfg.clone(), gradcheck_parameters(cfg, seed).unwrap()).unwrap()
    }

    #[test]
    fn gradient_matches_finite_differences_in_every_condition() {
        for vision in [VisionMode::Cnn, VisionMode::Mstnn] {
            for pfc in [PfcMode::Fast, PfcMode::Slow] {
                let cfg = tiny().with_condition(vision, pfc);
                let n = strong_net(&cfg, 1);
                let r = finite_difference_check(&n, &sample(&cfg, 6, 2), 1e-5, 0).unwrap();
                assert!(r.max_rel_error < 1e-4, "{}: {:?}", cfg.condition_name(), r);
                assert_eq!(r.checked, n.params().len());
            }
        }
    }

    #[test]
    fn slow_carry_chain_is_differentiated() {
        let mut cfg = tiny();
        cfg.pfc.tau = 150.0;
        cfg.ms.tau = 150.0;
        let n = strong_net(&cfg, 5);
        let r = finite_difference_check(&n, &sample(&cfg, 12, 6), 1e-5, 0).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn coarse_step_is_detected() {
        let cfg = tiny();
        let n = strong_net(&cfg, 7);
        let s = sample(&cfg, 6, 8);
        let fine = finite_difference_check(&n, &s, 1e-5, 0).unwrap().max_rel_error;
        let coarse = finite_difference_check(&n, &s, 1e-1, 0).unwrap().max_rel_error;
        assert!(coarse > 10.0 * fine, "fine {fine} coarse {coarse}");
    }

    #[test]
    fn self_generated_targets_are_stationary() {
        let cfg = tiny();
        let n = net(&cfg, 9);
        let frames = random_frames(&cfg, 5, 10);
        let traj = n.run_open_loop(&frames, false).unwrap();
        let s = SequenceSample {
            frames,
            targets: traj.steps.iter().map(|s| s.output.clone()).collect(),
            trial: None,
        };
        let (loss, g) = bptt(&n, &s).unwrap();
        assert!(loss.abs() < 1e-10);
        assert!(g.as_slice().iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn single_step_reaches_only_the_output_path() {
        // the first output depends only on b_MF, w_MO<-MF and b_MO
        let cfg = tiny();
        let n = net(&cfg, 11);
        let s = sample(&cfg, 1, 12);
        let (_, g) = bptt(&n, &s).unwrap();
        let state = n.forward_step(&n.init_state(), &s.frames[0]).unwrap();
        let nmf = cfg.mf.neurons;
        let e: Vec<f64> = state.y_mo.iter().zip(&s.targets[0]).map(|(y, t)| (y - t) / cfg.mo.tau).collect();
        for (a, b) in g.block(Block::BiasMo).iter().zip(&e) {
            assert!((a - b).abs() < 1e-12);
        }
        for i in 0..e.len() {
            for j in 0..nmf {
                assert!((g.block(Block::WMoMf)[i * nmf + j] - e[i] * state.y_mf[j]).abs() < 1e-12);
            }
        }
        let w = n.params().block(Block::WMoMf);
        for j in 0..nmf {
            let back: f64 = (0..e.len()).map(|i| w[i * nmf + j] * e[i]).sum();
            let y = state.y_mf[j] / crate::numerics::TANH_SCALE;
            let d = crate::numerics::TANH_SCALE * crate::numerics::TANH_SLOPE * (1.0 - y * y);
            assert!((g.block(Block::BiasMf)[j] - back * d / cfg.mf.tau).abs() < 1e-12);
        }
        for b in Block::ALL {
            if !matches!(b, Block::BiasMo | Block::WMoMf | Block::BiasMf) {
                assert!(g.block(b).iter().all(|v| *v == 0.0), "{}", b.name());
            }
        }
    }

    #[test]
    fn uniform_targets_at_zero_parameters_leave_output_bias_still() {
        let cfg = tiny();
        let n = Vmdnn::new(cfg.clone(), ParameterSet::zeros(&cfg).unwrap()).unwrap();
        let gs = cfg.mo.groups.group_size;
        let s = SequenceSample {
            frames: random_frames(&cfg, 4, 13),
            targets: vec![vec![1.0 / gs as f64; cfg.output_size()]; 4],
            trial: None,
        };
        let (loss, g) = bptt(&n, &s).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(g.block(Block::BiasMo).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn sgd_cases() {
        let cfg = tiny();
        let theta = init_parameters(&cfg, 14, 1.0).unwrap();
        let zero = theta.zeros_like();
        let mut p = theta.clone();
        sgd_step(&mut p, &zero, 0.01, 0.0).unwrap();
        assert_eq!(p, theta);
        let mut p = theta.clone();
        sgd_step(&mut p, &zero, 0.01, 0.0005).unwrap();
        for b in Block::ALL {
            for (a, w) in p.block(b).iter().zip(theta.block(b)) {
                let expect = if b.is_bias() { *w } else { w * (1.0 - 5e-6) };
                assert!((a - expect).abs() <= 1e-15 * w.abs().max(1.0));
            }
        }
        let mut p = theta.clone();
        let mut g = theta.zeros_like();
        g.fill(3.0);
        sgd_step(&mut p, &g, 0.0, 0.0005).unwrap();
        assert_eq!(p, theta);
    }

    proptest! {
        #[test]
        fn biases_ignore_decay(decay in 0.0f64..1.0, lr in 1e-4f64..1.0, seed in 0u64..1000) {
            let cfg = tiny();
            let theta = init_parameters(&cfg, seed, 1.0).unwrap();
            let mut with_bias = theta.clone();
            for b in Block::ALL.into_iter().filter(|b| b.is_bias()) {
                with_bias.block_mut(b).iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 - 1.5);
            }
            let mut p = with_bias.clone();
            sgd_step(&mut p, &theta.zeros_like(), lr, decay).unwrap();
            for b in Block::ALL.into_iter().filter(|b| b.is_bias()) {
                prop_assert_eq!(p.block(b), with_bias.block(b));
            }
        }
    }

    #[test]
    fn negative_gradient_descends() {
        let cfg = tiny();
        for seed in 0..5 {
            let n = net(&cfg, 20 + seed);
            let s = sample(&cfg, 6, 40 + seed);
            let (loss, g) = bptt(&n, &s).unwrap();
            assert!(loss > 0.0);
            let mut lr = 1e-2;
            let mut decreased = false;
            for _ in 0..=20 {
                let mut probe = n.clone();
                sgd_step(probe.params_mut(), &g, lr, 0.0).unwrap();
                if sequence_loss(&probe, &s).unwrap() < loss {
                    decreased = true;
                    break;
                }
                lr *= 0.5;
            }
            assert!(decreased, "seed {seed}");
        }
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let cfg = tiny();
        let data: Vec<_> = (0..3).map(|i| sample(&cfg, 6, 100 + i)).collect();
        let tcfg = TrainingConfig {
            learning_rate: 0.05,
            epochs: 60,
            seed: 1,
            report_every: 0,
            ..TrainingConfig::default()
        };
        let theta = init_parameters(&cfg, 2, 1.0).unwrap();
        let (a, ca) = train(&cfg, theta.clone(), &data, &tcfg).unwrap();
        let (b, cb) = train(&cfg, theta, &data, &tcfg).unwrap();
        assert_eq!(a.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        let losses = |c: &LossCurve| c.epochs.iter().map(|e| e.mean_loss).collect::<Vec<_>>();
        assert_eq!(losses(&ca), losses(&cb));
        assert!(ca.last().unwrap() < ca.first().unwrap());
    }

    #[test]
    fn optimum_gives_flat_zero_curve() {
        let cfg = tiny();
        let n = net(&cfg, 30);
        let frames = random_frames(&cfg, 4, 31);
        let traj = n.run_open_loop(&frames, false).unwrap();
        let s = SequenceSample {
            frames,
            targets: traj.steps.iter().map(|s| s.output.clone()).collect(),
            trial: None,
        };
        let tcfg = TrainingConfig {
            weight_decay: 0.0,
            epochs: 5,
            report_every: 0,
            ..TrainingConfig::default()
        };
        let (_, curve) = train(&cfg, n.params().clone(), &[s], &tcfg).unwrap();
        assert!(curve.epochs.iter().all(|e| e.mean_loss.abs() < 1e-10));
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let cfg = tiny();
        let theta = init_parameters(&cfg, 0, 1.0).unwrap();
        assert!(train(&cfg, theta, &[], &TrainingConfig::default()).is_err());
    }

    #[test]
    fn loss_curve_csv_roundtrip() {
        let curve = LossCurve {
            epochs: vec![
                EpochLoss { epoch: 1, mean_loss: 2.5, wall_seconds: 0.1, mean_step_loss: 0.25 },
                EpochLoss { epoch: 2, mean_loss: 1.25, wall_seconds: 0.2, mean_step_loss: 0.125 },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        curve.write_csv(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,mean_loss,wall_seconds,mean_step_loss\n"));
        assert_eq!(LossCurve::read_csv(&path).unwrap(), curve);
    }

    fn clip_set(cfg: &VmdnnConfig, n: usize, len: usize, seed: u64) -> Vec<GestureClip> {
        (0..n)
            .map(|i| GestureClip {
                frames: random_frames(cfg, len, seed + i as u64),
                label: i % GESTURE_CLASSES,
            })
            .collect()
    }

    #[test]
    fn classifier_gradient_matches_finite_differences() {
        let cfg = tiny();
        let n = net(&cfg, 50);
        let head = ClassifierHead::init(cfg.pfc.neurons, 1);
        let clip = &clip_set(&cfg, 1, 5, 51)[0];
        let (_, g, _) = classifier_gradients(&n, &head, clip).unwrap();
        let loss = |probe: &Vmdnn| {
            let y = visual_features(probe, &clip.frames).unwrap();
            -head.probabilities(&y)[clip.label].ln()
        };
        let eps = 1e-5;
        for b in Block::VISUAL {
            for i in n.params().layout().range(b) {
                let mut probe = n.clone();
                let w = probe.params().as_slice()[i];
                probe.params_mut().as_mut_slice()[i] = w + eps;
                let up = loss(&probe);
                probe.params_mut().as_mut_slice()[i] = w - eps;
                let down = loss(&probe);
                let fd = (up - down) / (2.0 * eps);
                let bp = g.as_slice()[i];
                assert!((fd - bp).abs() / fd.abs().max(bp.abs()).max(1e-8) < 1e-4, "{} {i}", b.name());
            }
        }
        for b in Block::ALL.into_iter().filter(|b| !Block::VISUAL.contains(b)) {
            assert!(g.block(b).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn visual_pretraining_touches_only_visual_blocks() {
        let cfg = tiny();
        let theta = init_parameters(&cfg, 60, 1.0).unwrap();
        let clips = clip_set(&cfg, 8, 4, 61);
        let tcfg = TrainingConfig { epochs: 3, report_every: 0, ..TrainingConfig::default() };
        let out = pretrain_visual(&cfg, theta.clone(), &clips, &tcfg).unwrap();
        for b in Block::ALL {
            if Block::VISUAL.contains(&b) {
                assert_ne!(out.params.block(b), theta.block(b), "{}", b.name());
            } else {
                assert_eq!(out.params.block(b), theta.block(b), "{}", b.name());
            }
        }
    }

    #[test]
    fn feedforward_classifier_sees_only_the_last_frame() {
        let cfg = tiny().with_condition(VisionMode::Cnn, PfcMode::Fast);
        let n = net(&cfg, 70);
        let head = ClassifierHead::init(cfg.pfc.neurons, 2);
        let mut frames = random_frames(&cfg, 6, 71);
        let before = visual_features(&n, &frames).unwrap();
        frames[..5].reverse();
        frames.swap(0, 2);
        assert_eq!(visual_features(&n, &frames).unwrap(), before);
        assert_eq!(classify(&n, &head, &frames).unwrap(), classify(&n, &head, &frames).unwrap());
    }

    #[test]
    fn grasp_pretraining_rejects_gesture_trials() {
        use crate::envtask::{make_dataset, Split, TaskConfig};
        let task = TaskConfig::default();
        let cfg = VmdnnConfig::desk(&task);
        let data = make_dataset(1, &mut ChaCha8Rng::seed_from_u64(0), Split::Tr, false, &task);
        let theta = init_parameters(&cfg, 0, 1.0).unwrap();
        assert!(pretrain_grasp(&cfg, theta, &data, &TrainingConfig::default()).is_err());
    }
}
