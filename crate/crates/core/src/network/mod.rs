//! The visuo-motor network: configuration, parameters, per-step state, the
//! one-step forward dynamics and open/closed-loop rollouts.
//!
//! Data flow within a step is V_I -> V_F -> V_S -> PFC -> M_S -> M_F -> M_O.
//! Every unit is a leaky integrator `u_t = (1 - 1/tau) u_{t-1} + drive / tau`.
//! Recurrent terms read the previous step's activations; in particular M_F
//! sees only the previous M_S and M_F outputs even though M_S has already
//! been updated earlier in the same step.

pub mod checkpoint;
pub mod params;

use serde::{Deserialize, Serialize};

use crate::envtask::OcclusionSchedule;
use crate::error::{Result, VmdnnError};
use crate::numerics::{
    act, decode_analog, leak, softmax_groups_into, ConvGeometry, FeatureMapStack, SoftmaxGroupSpec,
};

pub use params::{count_parameters, init_parameters, Block, GradientSet, ParamLayout, ParameterSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum VisionMode {
    /// Vision time constants forced to 1: a plain feedforward CNN.
    Cnn,
    /// Vision layers use their configured time constants.
    Mstnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PfcMode {
    /// PFC time constant forced to 1.
    Fast,
    /// PFC uses its configured time constant.
    Slow,
}

impl std::fmt::Display for VisionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            VisionMode::Cnn => "CNN",
            VisionMode::Mstnn => "MSTNN",
        })
    }
}

impl std::fmt::Display for PfcMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PfcMode::Fast => "FAST",
            PfcMode::Slow => "SLOW",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayerSpec {
    pub out_maps: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PfcSpec {
    pub neurons: usize,
    /// Kernel over the V_S maps; must cover them exactly.
    pub kh: usize,
    pub kw: usize,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecurrentSpec {
    pub neurons: usize,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputLayerSpec {
    pub groups: SoftmaxGroupSpec,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VmdnnConfig {
    pub height: usize,
    pub width: usize,
    pub vf: ConvLayerSpec,
    pub vs: ConvLayerSpec,
    pub pfc: PfcSpec,
    pub ms: RecurrentSpec,
    pub mf: RecurrentSpec,
    pub mo: OutputLayerSpec,
    pub vision_mode: VisionMode,
    pub pfc_mode: PfcMode,
}

impl VmdnnConfig {
    /// The full-size network: 64x48 input, 4@15x11, 8@5x3, PFC 20, M_S 30,
    /// M_F 50 and 11 softmax groups of 10, in the MSTNN + slow PFC condition.
    pub fn paper() -> Self {
        Self {
            height: 48,
            width: 64,
            vf: ConvLayerSpec { out_maps: 4, kh: 8, kw: 8, stride: 4, tau: 1.0 },
            vs: ConvLayerSpec { out_maps: 8, kh: 7, kw: 7, stride: 2, tau: 15.0 },
            pfc: PfcSpec { neurons: 20, kh: 3, kw: 5, tau: 150.0 },
            ms: RecurrentSpec { neurons: 30, tau: 70.0 },
            mf: RecurrentSpec { neurons: 50, tau: 2.0 },
            mo: OutputLayerSpec {
                groups: SoftmaxGroupSpec::uniform(11, 10, -1.0, 1.0, 0.05),
                tau: 1.0,
            },
            vision_mode: VisionMode::Mstnn,
            pfc_mode: PfcMode::Slow,
        }
    }

    /// Small network for gradient checks: 8x6 input, 2@6x4, 2@3x2, PFC 4,
    /// M_S 3, M_F 4 and 2 softmax groups of 4.
    pub fn tiny() -> Self {
        Self {
            height: 6,
            width: 8,
            vf: ConvLayerSpec { out_maps: 2, kh: 3, kw: 3, stride: 1, tau: 1.0 },
            vs: ConvLayerSpec { out_maps: 2, kh: 2, kw: 2, stride: 2, tau: 15.0 },
            pfc: PfcSpec { neurons: 4, kh: 2, kw: 3, tau: 150.0 },
            ms: RecurrentSpec { neurons: 3, tau: 70.0 },
            mf: RecurrentSpec { neurons: 4, tau: 2.0 },
            mo: OutputLayerSpec {
                groups: SoftmaxGroupSpec::uniform(2, 4, -1.0, 1.0, 0.2),
                tau: 1.0,
            },
            vision_mode: VisionMode::Mstnn,
            pfc_mode: PfcMode::Slow,
        }
    }

    /// Desk-scale network for `task`: 16x12 input, 4@7x5, 8@3x2, PFC 20,
    /// M_S 30, M_F 50 and one softmax group per pose dimension.
    pub fn desk(task: &crate::envtask::TaskConfig) -> Self {
        Self {
            height: task.frame_height,
            width: task.frame_width,
            vf: ConvLayerSpec { out_maps: 4, kh: 4, kw: 4, stride: 2, tau: 1.0 },
            vs: ConvLayerSpec { out_maps: 8, kh: 3, kw: 3, stride: 2, tau: 4.0 },
            pfc: PfcSpec { neurons: 20, kh: 2, kw: 3, tau: 40.0 },
            ms: RecurrentSpec { neurons: 30, tau: 20.0 },
            mf: RecurrentSpec { neurons: 50, tau: 2.0 },
            mo: OutputLayerSpec {
                groups: task.codec(),
                tau: 1.0,
            },
            vision_mode: VisionMode::Mstnn,
            pfc_mode: PfcMode::Slow,
        }
    }

    pub fn with_condition(mut self, vision: VisionMode, pfc: PfcMode) -> Self {
        self.vision_mode = vision;
        self.pfc_mode = pfc;
        self
    }

    pub fn condition_name(&self) -> String {
        format!("{}+{}", self.vision_mode, self.pfc_mode)
    }

    pub fn tau_vf(&self) -> f64 {
        match self.vision_mode {
            VisionMode::Cnn => 1.0,
            VisionMode::Mstnn => self.vf.tau,
        }
    }

    pub fn tau_vs(&self) -> f64 {
        match self.vision_mode {
            VisionMode::Cnn => 1.0,
            VisionMode::Mstnn => self.vs.tau,
        }
    }

    pub fn tau_pfc(&self) -> f64 {
        match self.pfc_mode {
            PfcMode::Fast => 1.0,
            PfcMode::Slow => self.pfc.tau,
        }
    }

    pub fn vf_geometry(&self) -> Result<ConvGeometry> {
        ConvGeometry::new(1, self.height, self.width, self.vf.out_maps, self.vf.kh, self.vf.kw, self.vf.stride)
            .map_err(|e| VmdnnError::config(format!("V_F: {e}")))
    }

    pub fn vs_geometry(&self) -> Result<ConvGeometry> {
        let vf = self.vf_geometry()?;
        ConvGeometry::new(vf.out_maps, vf.out_h, vf.out_w, self.vs.out_maps, self.vs.kh, self.vs.kw, self.vs.stride)
            .map_err(|e| VmdnnError::config(format!("V_S: {e}")))
    }

    pub fn pfc_geometry(&self) -> Result<ConvGeometry> {
        let vs = self.vs_geometry()?;
        ConvGeometry::new(vs.out_maps, vs.out_h, vs.out_w, self.pfc.neurons, self.pfc.kh, self.pfc.kw, 1)
            .map_err(|e| VmdnnError::config(format!("PFC: {e}")))
    }

    pub fn output_size(&self) -> usize {
        self.mo.groups.total()
    }
}

/// Every structural violation in `cfg`, not just the first one.
pub fn validate_config(cfg: &VmdnnConfig) -> std::result::Result<(), Vec<String>> {
    let mut v = Vec::new();
    if cfg.height == 0 || cfg.width == 0 {
        v.push(format!("input must be non-empty, got {}x{}", cfg.width, cfg.height));
    }
    for (name, maps, stride) in [("V_F", cfg.vf.out_maps, cfg.vf.stride), ("V_S", cfg.vs.out_maps, cfg.vs.stride)] {
        if maps == 0 {
            v.push(format!("{name} must have at least one feature map"));
        }
        if stride == 0 {
            v.push(format!("{name} sampling factor must be >= 1"));
        }
    }
    match cfg.vf_geometry() {
        Err(e) => v.push(e.to_string()),
        Ok(_) => match cfg.vs_geometry() {
            Err(e) => v.push(e.to_string()),
            Ok(vs) => {
                if cfg.pfc.kh != vs.out_h || cfg.pfc.kw != vs.out_w {
                    let out = match (
                        crate::numerics::conv_output_len(vs.out_h, cfg.pfc.kh, 1),
                        crate::numerics::conv_output_len(vs.out_w, cfg.pfc.kw, 1),
                    ) {
                        (Some(h), Some(w)) => format!("{w}x{h}"),
                        _ => "empty".to_string(),
                    };
                    v.push(format!(
                        "PFC kernel {}x{} must cover the {}x{} V_S maps exactly (output would be {out}, not 1x1)",
                        cfg.pfc.kw, cfg.pfc.kh, vs.out_w, vs.out_h
                    ));
                }
            }
        },
    }
    for (name, n) in [("PFC", cfg.pfc.neurons), ("M_S", cfg.ms.neurons), ("M_F", cfg.mf.neurons)] {
        if n == 0 {
            v.push(format!("{name} must have at least one neuron"));
        }
    }
    for (name, tau) in [
        ("V_F", cfg.vf.tau),
        ("V_S", cfg.vs.tau),
        ("PFC", cfg.pfc.tau),
        ("M_S", cfg.ms.tau),
        ("M_F", cfg.mf.tau),
        ("M_O", cfg.mo.tau),
    ] {
        if !(tau >= 1.0) || !tau.is_finite() {
            v.push(format!("{name} time constant must be >= 1, got {tau}"));
        }
    }
    v.extend(cfg.mo.groups.violations().into_iter().map(|s| format!("M_O: {s}")));
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

/// Internal states and activations of every layer at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub u_vf: FeatureMapStack,
    pub v_vf: FeatureMapStack,
    pub u_vs: FeatureMapStack,
    pub v_vs: FeatureMapStack,
    pub u_pfc: Vec<f64>,
    pub y_pfc: Vec<f64>,
    pub u_ms: Vec<f64>,
    pub y_ms: Vec<f64>,
    pub u_mf: Vec<f64>,
    pub y_mf: Vec<f64>,
    pub u_mo: Vec<f64>,
    pub y_mo: Vec<f64>,
    pub t: usize,
}

impl NetworkState {
    /// Neutral state: all internal states zero, softmax outputs uniform.
    pub fn neutral(cfg: &VmdnnConfig) -> Result<Self> {
        let vf = cfg.vf_geometry()?;
        let vs = cfg.vs_geometry()?;
        let n_out = cfg.output_size();
        let gs = cfg.mo.groups.group_size.max(1);
        Ok(Self {
            u_vf: FeatureMapStack::zeros(vf.out_maps, vf.out_h, vf.out_w),
            v_vf: FeatureMapStack::zeros(vf.out_maps, vf.out_h, vf.out_w),
            u_vs: FeatureMapStack::zeros(vs.out_maps, vs.out_h, vs.out_w),
            v_vs: FeatureMapStack::zeros(vs.out_maps, vs.out_h, vs.out_w),
            u_pfc: vec![0.0; cfg.pfc.neurons],
            y_pfc: vec![0.0; cfg.pfc.neurons],
            u_ms: vec![0.0; cfg.ms.neurons],
            y_ms: vec![0.0; cfg.ms.neurons],
            u_mf: vec![0.0; cfg.mf.neurons],
            y_mf: vec![0.0; cfg.mf.neurons],
            u_mo: vec![0.0; n_out],
            y_mo: vec![1.0 / gs as f64; n_out],
            t: 0,
        })
    }

    /// Flattened activations of one recorded layer.
    pub fn activations(&self, layer: Layer) -> &[f64] {
        match layer {
            Layer::Vf => &self.v_vf.values,
            Layer::Vs => &self.v_vs.values,
            Layer::Pfc => &self.y_pfc,
            Layer::Ms => &self.y_ms,
            Layer::Mf => &self.y_mf,
            Layer::Mo => &self.y_mo,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Layer {
    #[serde(rename = "V_F")]
    Vf,
    #[serde(rename = "V_S")]
    Vs,
    #[serde(rename = "PFC")]
    Pfc,
    #[serde(rename = "M_S")]
    Ms,
    #[serde(rename = "M_F")]
    Mf,
    #[serde(rename = "M_O")]
    Mo,
}

impl Layer {
    pub fn name(self) -> &'static str {
        match self {
            Layer::Vf => "V_F",
            Layer::Vs => "V_S",
            Layer::Pfc => "PFC",
            Layer::Ms => "M_S",
            Layer::Mf => "M_F",
            Layer::Mo => "M_O",
        }
    }

    pub fn parse(s: &str) -> Option<Layer> {
        [Layer::Vf, Layer::Vs, Layer::Pfc, Layer::Ms, Layer::Mf, Layer::Mo]
            .into_iter()
            .find(|l| l.name().eq_ignore_ascii_case(s) || l.name().replace('_', "").eq_ignore_ascii_case(s))
    }
}

/// One rollout step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub frame: FeatureMapStack,
    /// Full post-step state, present when the rollout was recorded.
    pub state: Option<NetworkState>,
    /// Analog value decoded from each softmax group.
    pub decoded: Vec<f64>,
    pub output: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub steps: Vec<StepRecord>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// An environment the network can drive in closed loop.
pub trait ClosedLoopEnv {
    /// Current camera frame, 1@HxW with values in [-1, 1].
    fn render(&self) -> FeatureMapStack;
    /// Applies the decoded analog output of every softmax group.
    fn apply(&mut self, decoded: &[f64]);
}

#[inline]
fn matvec_acc(w: &[f64], cols: usize, x: &[f64], out: &mut [f64]) {
    if cols == 0 {
        return;
    }
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

fn check_finite(values: &[f64], layer: &str, step: usize) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(VmdnnError::divergence(layer, step))
    }
}

/// A configuration paired with its parameters. Immutable during rollouts and
/// safe to share between threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Vmdnn {
    config: VmdnnConfig,
    params: ParameterSet,
    pub(crate) vf: ConvGeometry,
    pub(crate) vs: ConvGeometry,
    pub(crate) pfc_in: usize,
}

impl Vmdnn {
    pub fn new(config: VmdnnConfig, params: ParameterSet) -> Result<Self> {
        validate_config(&config).map_err(|v| VmdnnError::config(v.join("; ")))?;
        let layout = ParamLayout::new(&config)?;
        if *params.layout() != layout {
            return Err(VmdnnError::config(format!(
                "parameter set ({} values) does not match the configuration ({} values)",
                params.len(),
                layout.total()
            )));
        }
        let vf = config.vf_geometry()?;
        let vs = config.vs_geometry()?;
        let pfc_in = vs.output_len();
        Ok(Self {
            config,
            params,
            vf,
            vs,
            pfc_in,
        })
    }

    pub fn config(&self) -> &VmdnnConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn into_params(self) -> ParameterSet {
        self.params
    }

    pub fn init_state(&self) -> NetworkState {
        NetworkState::neutral(&self.config).expect("validated configuration")
    }

    pub fn decode(&self, y_mo: &[f64]) -> Vec<f64> {
        decode_analog(y_mo, &self.config.mo.groups).expect("output length fixed by configuration")
    }

    fn check_frame(&self, frame: &FeatureMapStack) -> Result<()> {
        if frame.maps != 1 || frame.height != self.config.height || frame.width != self.config.width {
            return Err(VmdnnError::config(format!(
                "frame is {}@{}x{}, network expects 1@{}x{}",
                frame.maps, frame.width, frame.height, self.config.width, self.config.height
            )));
        }
        if frame.values.iter().any(|v| !v.is_finite() || v.abs() > 1.0 + 1e-12) {
            return Err(VmdnnError::Domain("frame values must lie in [-1, 1]".into()));
        }
        Ok(())
    }

    /// Advances the network by one step on `frame`.
    pub fn forward_step(&self, state: &NetworkState, frame: &FeatureMapStack) -> Result<NetworkState> {
        self.check_frame(frame)?;
        self.step(state, frame, false)
    }

    /// Vision stage only: V_F and V_S updated in `next` from `prev`.
    pub(crate) fn vision_step(&self, prev: &NetworkState, frame: &[f64], next: &mut NetworkState) -> Result<()> {
        let p = &self.params;
        let step = prev.t;
        let mut drive = vec![0.0; self.vf.output_len()];
        self.vf
            .forward(frame, p.block(Block::KernelVf), Some(p.block(Block::BiasVf)), &mut drive);
        let tau = self.config.tau_vf();
        for i in 0..drive.len() {
            let u = leak(prev.u_vf.values[i], drive[i], tau);
            next.u_vf.values[i] = u;
            next.v_vf.values[i] = act(u);
        }
        check_finite(&next.u_vf.values, "V_F", step)?;

        let mut drive = vec![0.0; self.vs.output_len()];
        self.vs.forward(
            &next.v_vf.values,
            p.block(Block::KernelVs),
            Some(p.block(Block::BiasVs)),
            &mut drive,
        );
        let tau = self.config.tau_vs();
        for i in 0..drive.len() {
            let u = leak(prev.u_vs.values[i], drive[i], tau);
            next.u_vs.values[i] = u;
            next.v_vs.values[i] = act(u);
        }
        check_finite(&next.u_vs.values, "V_S", step)
    }

    /// PFC stage; `severed` drops the PFC<-PFC and PFC<-M_S terms.
    pub(crate) fn pfc_step(&self, prev: &NetworkState, next: &mut NetworkState, severed: bool) -> Result<()> {
        let p = &self.params;
        let n = self.config.pfc.neurons;
        let mut drive = p.block(Block::BiasPfc).to_vec();
        matvec_acc(p.block(Block::KernelPfc), self.pfc_in, &next.v_vs.values, &mut drive);
        if !severed {
            matvec_acc(p.block(Block::WPfcPfc), n, &prev.y_pfc, &mut drive);
            matvec_acc(p.block(Block::WPfcMs), self.config.ms.neurons, &prev.y_ms, &mut drive);
        }
        let tau = self.config.tau_pfc();
        for i in 0..n {
            next.u_pfc[i] = leak(prev.u_pfc[i], drive[i], tau);
            next.y_pfc[i] = act(next.u_pfc[i]);
        }
        check_finite(&next.u_pfc, "PFC", prev.t)
    }

    fn motor_step(&self, prev: &NetworkState, next: &mut NetworkState) -> Result<()> {
        let p = &self.params;
        let cfg = &self.config;
        let (npfc, nms, nmf) = (cfg.pfc.neurons, cfg.ms.neurons, cfg.mf.neurons);

        let mut drive = p.block(Block::BiasMs).to_vec();
        matvec_acc(p.block(Block::WMsPfc), npfc, &next.y_pfc, &mut drive);
        matvec_acc(p.block(Block::WMsMs), nms, &prev.y_ms, &mut drive);
        matvec_acc(p.block(Block::WMsMf), nmf, &prev.y_mf, &mut drive);
        for i in 0..nms {
            next.u_ms[i] = leak(prev.u_ms[i], drive[i], cfg.ms.tau);
            next.y_ms[i] = act(next.u_ms[i]);
        }
        check_finite(&next.u_ms, "M_S", prev.t)?;

        // previous-step inputs only
        let mut drive = p.block(Block::BiasMf).to_vec();
        matvec_acc(p.block(Block::WMfMs), nms, &prev.y_ms, &mut drive);
        matvec_acc(p.block(Block::WMfMf), nmf, &prev.y_mf, &mut drive);
        for i in 0..nmf {
            next.u_mf[i] = leak(prev.u_mf[i], drive[i], cfg.mf.tau);
            next.y_mf[i] = act(next.u_mf[i]);
        }
        check_finite(&next.u_mf, "M_F", prev.t)?;

        let mut drive = p.block(Block::BiasMo).to_vec();
        matvec_acc(p.block(Block::WMoMf), nmf, &next.y_mf, &mut drive);
        for i in 0..drive.len() {
            next.u_mo[i] = leak(prev.u_mo[i], drive[i], cfg.mo.tau);
        }
        check_finite(&next.u_mo, "M_O", prev.t)?;
        softmax_groups_into(&next.u_mo, cfg.mo.groups.group_size, &mut next.y_mo);
        Ok(())
    }

    pub(crate) fn step(&self, prev: &NetworkState, frame: &FeatureMapStack, severed: bool) -> Result<NetworkState> {
        let mut next = prev.clone();
        self.vision_step(prev, &frame.values, &mut next)?;
        self.pfc_step(prev, &mut next, severed)?;
        self.motor_step(prev, &mut next)?;
        next.t = prev.t + 1;
        Ok(next)
    }

    /// Teacher-forced rollout from the neutral state.
    pub fn run_open_loop(&self, frames: &[FeatureMapStack], record: bool) -> Result<Trajectory> {
        if frames.is_empty() {
            return Err(VmdnnError::config("open-loop rollout needs at least one frame"));
        }
        let mut state = self.init_state();
        let mut steps = Vec::with_capacity(frames.len());
        for frame in frames {
            state = self.forward_step(&state, frame)?;
            steps.push(StepRecord {
                frame: frame.clone(),
                state: record.then(|| state.clone()),
                decoded: self.decode(&state.y_mo),
                output: state.y_mo.clone(),
            });
        }
        Ok(Trajectory { steps })
    }

    /// Closed-loop rollout: each step renders the environment (or the neutral
    /// frame once occlusion is active), advances the network and applies the
    /// decoded output back to the environment.
    pub fn run_closed_loop<E: ClosedLoopEnv + ?Sized>(
        &self,
        env: &mut E,
        horizon: usize,
        occlusion: &OcclusionSchedule,
        record: bool,
    ) -> Result<Trajectory> {
        if horizon == 0 {
            return Err(VmdnnError::config("closed-loop horizon must be positive"));
        }
        let neutral = occlusion.neutral_frame(self.config.height, self.config.width);
        let mut state = self.init_state();
        let mut steps = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let frame = if occlusion.is_occluded(t) {
                neutral.clone()
            } else {
                env.render()
            };
            state = self.forward_step(&state, &frame)?;
            let decoded = self.decode(&state.y_mo);
            env.apply(&decoded);
            steps.push(StepRecord {
                frame,
                state: record.then(|| state.clone()),
                decoded,
                output: state.y_mo.clone(),
            });
        }
        Ok(Trajectory { steps })
    }
}

#[cfg(test)]
mod tests;
