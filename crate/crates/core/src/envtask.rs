//! Desk-scale gesture-to-grasp task.
//!
//! A trial starts with a short gesture clip shown on a "screen" (an animated
//! forearm and hand on a dark background). Afterwards the camera looks at a
//! table holding one tall and one wide rectangle; the agent has to look at
//! and grasp the object the gesture pointed to. Post-gesture frames never
//! depend on the gesture, so solving the task requires memory.
//!
//! World coordinates are normalised to `[0, 1]^2` with `y` growing towards
//! the agent. The camera shows a square window of side `fov` centred on the
//! gaze point; `fov` shrinks linearly from 1 at foveation level 1 to
//! `min_fov` at level 10.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VmdnnError};
use crate::network::ClosedLoopEnv;
use crate::numerics::{decode_analog, encode_analog, FeatureMapStack, GroupRange, SoftmaxGroupSpec};
use crate::training::SequenceSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum GestureClass {
    Left,
    Right,
    Tall,
    Wide,
}

impl GestureClass {
    pub const ALL: [GestureClass; 4] = [
        GestureClass::Left,
        GestureClass::Right,
        GestureClass::Tall,
        GestureClass::Wide,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn mirrored(self) -> Self {
        match self {
            GestureClass::Left => GestureClass::Right,
            GestureClass::Right => GestureClass::Left,
            other => other,
        }
    }

    /// The gesture that selects the other object of any layout.
    pub fn opposite(self) -> Self {
        match self {
            GestureClass::Left => GestureClass::Right,
            GestureClass::Right => GestureClass::Left,
            GestureClass::Tall => GestureClass::Wide,
            GestureClass::Wide => GestureClass::Tall,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ObjectKind {
    Tall,
    Wide,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "TR")]
    Tr,
    #[serde(rename = "OBJ")]
    Obj,
    #[serde(rename = "SUB")]
    Sub,
    #[serde(rename = "OBJxSUB")]
    ObjSub,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Tr, Split::Obj, Split::Sub, Split::ObjSub];

    pub fn name(self) -> &'static str {
        match self {
            Split::Tr => "TR",
            Split::Obj => "OBJ",
            Split::Sub => "SUB",
            Split::ObjSub => "OBJxSUB",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|x| x.name().eq_ignore_ascii_case(s))
    }

    fn off_grid(self) -> bool {
        matches!(self, Split::Obj | Split::ObjSub)
    }

    fn novel_subject(self) -> bool {
        matches!(self, Split::Sub | Split::ObjSub)
    }
}

/// Procedural gesture "subject": how fast, how wide and how early the
/// gesture is performed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectStyle {
    pub speed: f64,
    pub amplitude: f64,
    pub phase: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub kind: ObjectKind,
    pub x: f64,
    pub y: f64,
    pub orientation_deg: f64,
}

/// Lengths of the consecutive task phases, in steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseTimings {
    pub gesture_len: usize,
    /// Gaze rests on the workspace centre.
    pub center_dwell: usize,
    /// Gaze on the target before it is considered observed.
    pub gaze_settle: usize,
    /// Observation of the target before the reach starts.
    pub reach_delay: usize,
    pub reach_len: usize,
    pub grasp_len: usize,
}

impl PhaseTimings {
    pub fn horizon(&self) -> usize {
        self.gesture_len + self.center_dwell + self.gaze_settle + self.reach_delay + self.reach_len + self.grasp_len
    }

    pub fn attend_onset(&self) -> usize {
        self.gesture_len + self.center_dwell
    }

    pub fn observe_onset(&self) -> usize {
        self.attend_onset() + self.gaze_settle
    }

    pub fn reach_onset(&self) -> usize {
        self.observe_onset() + self.reach_delay
    }

    pub fn reach_end(&self) -> usize {
        self.reach_onset() + self.reach_len
    }

    /// Same timeline without the gesture clip.
    pub fn gestureless(&self) -> Self {
        Self {
            gesture_len: 0,
            ..*self
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialSpec {
    /// `None` for gestureless (grasp pre-training) trials with one object.
    pub gesture: Option<GestureClass>,
    pub style: SubjectStyle,
    pub objects: Vec<ObjectSpec>,
    pub timings: PhaseTimings,
    pub split: Split,
}

impl TrialSpec {
    pub fn horizon(&self) -> usize {
        self.timings.horizon()
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        match self.gesture {
            None => {
                if self.objects.len() != 1 {
                    v.push(format!("gestureless trial needs 1 object, has {}", self.objects.len()));
                }
            }
            Some(_) => {
                if self.objects.len() != 2 {
                    v.push(format!("gesture trial needs 2 objects, has {}", self.objects.len()));
                } else {
                    let tall = self.objects.iter().filter(|o| o.kind == ObjectKind::Tall).count();
                    if tall != 1 {
                        v.push("gesture trial needs exactly one TALL and one WIDE object".into());
                    }
                    if self.objects[0].x == self.objects[1].x {
                        v.push("objects share an x position, LEFT/RIGHT would be ambiguous".into());
                    }
                }
            }
        }
        v
    }

    /// Index of the object the trial asks for.
    pub fn target_index(&self) -> usize {
        let objs = &self.objects;
        match self.gesture {
            None => 0,
            Some(GestureClass::Left) => usize::from(objs[1].x < objs[0].x),
            Some(GestureClass::Right) => usize::from(objs[1].x > objs[0].x),
            Some(GestureClass::Tall) => usize::from(objs[1].kind == ObjectKind::Tall),
            Some(GestureClass::Wide) => usize::from(objs[1].kind == ObjectKind::Wide),
        }
    }

    pub fn target(&self) -> &ObjectSpec {
        &self.objects[self.target_index()]
    }

    pub fn non_target(&self) -> Option<&ObjectSpec> {
        (self.objects.len() == 2).then(|| &self.objects[1 - self.target_index()])
    }

    /// Horizontal mirror image of the trial.
    pub fn mirrored(&self) -> Self {
        let mut m = self.clone();
        m.gesture = self.gesture.map(GestureClass::mirrored);
        for o in &mut m.objects {
            o.x = 1.0 - o.x;
            o.orientation_deg = -o.orientation_deg;
        }
        m
    }
}

/// Commanded or actual agent configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentPose {
    pub gaze_x: f64,
    pub gaze_y: f64,
    pub arm_x: f64,
    pub arm_y: f64,
    /// 1 (open) to 10 (fully closed).
    pub grasp: f64,
    /// 1 (whole workspace) to 10 (tightest crop).
    pub foveation: f64,
}

impl AgentPose {
    pub const DIM: usize = 6;

    pub fn to_vec(&self) -> Vec<f64> {
        vec![self.gaze_x, self.gaze_y, self.arm_x, self.arm_y, self.grasp, self.foveation]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            gaze_x: v[0],
            gaze_y: v[1],
            arm_x: v[2],
            arm_y: v[3],
            grasp: v[4],
            foveation: v[5],
        }
    }

    pub fn mirrored(&self) -> Self {
        Self {
            gaze_x: 1.0 - self.gaze_x,
            arm_x: 1.0 - self.arm_x,
            ..*self
        }
    }

    fn clamped(&self) -> Self {
        Self {
            gaze_x: self.gaze_x.clamp(0.0, 1.0),
            gaze_y: self.gaze_y.clamp(0.0, 1.0),
            arm_x: self.arm_x.clamp(0.0, 1.0),
            arm_y: self.arm_y.clamp(0.0, 1.0),
            grasp: self.grasp.clamp(1.0, 10.0),
            foveation: self.foveation.clamp(1.0, 10.0),
        }
    }
}

/// Desk geometry, timings and subject styles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub frame_height: usize,
    pub frame_width: usize,
    pub timings: PhaseTimings,
    /// Success radius around the object centre.
    pub success_radius: f64,
    pub grasp_threshold: f64,
    /// Maximum arm displacement per step.
    pub arm_slew: f64,
    /// Field of view at foveation level 10.
    pub min_fov: f64,
    pub home: AgentPose,
    pub grid_x: Vec<f64>,
    pub grid_y: Vec<f64>,
    pub orientations_deg: Vec<f64>,
    /// Half extents (long, short) of both rectangles.
    pub object_half_long: f64,
    pub object_half_short: f64,
    pub training_styles: Vec<SubjectStyle>,
    pub novel_style: SubjectStyle,
    /// Neurons per softmax group and the population code width.
    pub group_size: usize,
    pub code_sigma: f64,
    /// Supersampling factor per pixel axis.
    pub supersample: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            frame_height: 12,
            frame_width: 16,
            timings: PhaseTimings {
                gesture_len: 10,
                center_dwell: 4,
                gaze_settle: 2,
                reach_delay: 2,
                reach_len: 12,
                grasp_len: 6,
            },
            success_radius: 0.08,
            grasp_threshold: 8.0,
            arm_slew: 0.1,
            min_fov: 0.4,
            home: AgentPose {
                gaze_x: 0.5,
                gaze_y: 0.1,
                arm_x: 0.5,
                arm_y: 0.95,
                grasp: 1.0,
                foveation: 1.0,
            },
            grid_x: vec![0.2, 0.5, 0.8],
            grid_y: vec![0.3, 0.6],
            orientations_deg: vec![-45.0, -22.5, 0.0, 22.5, 45.0],
            object_half_long: 0.09,
            object_half_short: 0.045,
            training_styles: vec![
                SubjectStyle { speed: 0.9, amplitude: 0.27, phase: -0.05 },
                SubjectStyle { speed: 1.1, amplitude: 0.33, phase: 0.05 },
                SubjectStyle { speed: 0.95, amplitude: 0.32, phase: 0.03 },
                SubjectStyle { speed: 1.05, amplitude: 0.28, phase: -0.03 },
            ],
            novel_style: SubjectStyle { speed: 1.02, amplitude: 0.31, phase: 0.07 },
            group_size: 10,
            code_sigma: 0.05,
            supersample: 3,
        }
    }
}

impl TaskConfig {
    pub fn horizon(&self) -> usize {
        self.timings.horizon()
    }

    /// Softmax layout of the motor output: gaze x/y, arm x/y, grasp, foveation.
    pub fn codec(&self) -> SoftmaxGroupSpec {
        let unit = GroupRange { lo: 0.0, hi: 1.0 };
        let level = GroupRange { lo: 1.0, hi: 10.0 };
        SoftmaxGroupSpec {
            group_count: AgentPose::DIM,
            group_size: self.group_size,
            ranges: vec![unit, unit, unit, unit, level, level],
            sigma: self.code_sigma,
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.frame_height == 0 || self.frame_width == 0 {
            v.push("task frames must be non-empty".into());
        }
        if self.timings.gesture_len == 0 || self.timings.reach_len == 0 || self.timings.grasp_len == 0 {
            v.push("gesture, reach and grasp phases need at least one step".into());
        }
        if self.grid_x.len() < 2 || self.grid_y.is_empty() {
            v.push("training grid needs at least two columns and one row".into());
        }
        if self.training_styles.is_empty() {
            v.push("at least one training subject style is required".into());
        }
        if !(self.min_fov > 0.0 && self.min_fov <= 1.0) {
            v.push(format!("min_fov must lie in (0, 1], got {}", self.min_fov));
        }
        if !(self.arm_slew > 0.0) {
            v.push("arm slew must be positive".into());
        }
        if self.supersample == 0 {
            v.push("supersample must be >= 1".into());
        }
        if self.orientations_deg.is_empty() {
            v.push("at least one object orientation is required".into());
        }
        v
    }

    pub fn fov(&self, foveation: f64) -> f64 {
        let level = foveation.clamp(1.0, 10.0);
        1.0 - (1.0 - self.min_fov) * (level - 1.0) / 9.0
    }
}

/// Onset step after which the network sees only the neutral frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OcclusionSchedule {
    pub onset: Option<usize>,
}

impl OcclusionSchedule {
    pub fn none() -> Self {
        Self { onset: None }
    }

    pub fn at(onset: usize) -> Self {
        Self { onset: Some(onset) }
    }

    pub fn is_occluded(&self, t: usize) -> bool {
        self.onset.is_some_and(|o| t >= o)
    }

    /// All-zero frame: mid-grey after normalisation to [-1, 1].
    pub fn neutral_frame(&self, height: usize, width: usize) -> FeatureMapStack {
        FeatureMapStack::zeros(1, height, width)
    }
}

fn random_style(rng: &mut impl Rng, split: Split, task: &TaskConfig) -> SubjectStyle {
    if split.novel_subject() {
        task.novel_style
    } else {
        task.training_styles[rng.gen_range(0..task.training_styles.len())]
    }
}

fn random_objects(rng: &mut impl Rng, split: Split, task: &TaskConfig) -> Vec<ObjectSpec> {
    let (mut a, mut b, oa, ob);
    if split.off_grid() {
        loop {
            a = (rng.gen_range(0.15..0.85), rng.gen_range(0.25..0.65));
            b = (rng.gen_range(0.15..0.85), rng.gen_range(0.25..0.65));
            let dx: f64 = a.0 - b.0;
            let dy: f64 = a.1 - b.1;
            if dx.abs() >= 0.2 && (dx * dx + dy * dy).sqrt() >= 0.25 {
                break;
            }
        }
        oa = rng.gen_range(-45.0..=45.0);
        ob = rng.gen_range(-45.0..=45.0);
    } else {
        let cells: Vec<(f64, f64)> = task
            .grid_y
            .iter()
            .flat_map(|&y| task.grid_x.iter().map(move |&x| (x, y)))
            .collect();
        loop {
            a = *cells.choose(rng).expect("non-empty grid");
            b = *cells.choose(rng).expect("non-empty grid");
            if a.0 != b.0 {
                break;
            }
        }
        oa = *task.orientations_deg.choose(rng).expect("orientations");
        ob = *task.orientations_deg.choose(rng).expect("orientations");
    }
    let (ka, kb) = if rng.gen_bool(0.5) {
        (ObjectKind::Tall, ObjectKind::Wide)
    } else {
        (ObjectKind::Wide, ObjectKind::Tall)
    };
    vec![
        ObjectSpec { kind: ka, x: a.0, y: a.1, orientation_deg: oa },
        ObjectSpec { kind: kb, x: b.0, y: b.1, orientation_deg: ob },
    ]
}

pub fn sample_trial_with_gesture(rng: &mut impl Rng, split: Split, gesture: GestureClass, task: &TaskConfig) -> TrialSpec {
    let style = random_style(rng, split, task);
    let objects = random_objects(rng, split, task);
    TrialSpec {
        gesture: Some(gesture),
        style,
        objects,
        timings: task.timings,
        split,
    }
}

pub fn sample_trial(rng: &mut impl Rng, split: Split, task: &TaskConfig) -> TrialSpec {
    let g = GestureClass::ALL[rng.gen_range(0..4)];
    sample_trial_with_gesture(rng, split, g, task)
}

/// `n` trials with gesture classes as balanced as `n` allows, in shuffled
/// order. Trials come in pairs that share one object layout under opposite
/// gestures, so the layout alone never identifies the target.
pub fn sample_trials(rng: &mut impl Rng, split: Split, n: usize, task: &TaskConfig) -> Vec<TrialSpec> {
    let mut trials = Vec::with_capacity(n);
    for k in 0..n.div_ceil(2) {
        let base = if k % 2 == 0 { GestureClass::Left } else { GestureClass::Tall };
        let g = if rng.gen_bool(0.5) { base } else { base.opposite() };
        let first = sample_trial_with_gesture(rng, split, g, task);
        if trials.len() + 1 < n {
            let second = TrialSpec {
                gesture: Some(g.opposite()),
                style: random_style(rng, split, task),
                ..first.clone()
            };
            trials.push(first);
            trials.push(second);
        } else {
            trials.push(first);
        }
    }
    trials.shuffle(rng);
    trials
}

/// One-object trial on the workspace timeline only.
pub fn sample_gestureless_trial(rng: &mut impl Rng, task: &TaskConfig) -> TrialSpec {
    let objects = random_objects(rng, Split::Tr, task);
    let pick = rng.gen_range(0..2);
    TrialSpec {
        gesture: None,
        style: task.training_styles[0],
        objects: vec![objects[pick]],
        timings: task.timings.gestureless(),
        split: Split::Tr,
    }
}

/// Subsample coordinates in units of `1 / (2 n extent)` relative to the frame
/// centre. Mirrored pixels get exactly negated coordinates.
fn subsample_offsets(pixel: usize, extent: usize, n: usize) -> impl Iterator<Item = f64> {
    let denom = (2 * n * extent) as f64;
    (0..n).map(move |k| {
        let q = (2 * n * pixel + 2 * k + 1) as f64 - (n * extent) as f64;
        q / denom
    })
}

fn hand_position(trial: &TrialSpec, gesture: GestureClass, t: usize) -> (f64, f64) {
    let g = trial.timings.gesture_len.max(1) as f64;
    let s = (t as f64 + 0.5) / g * trial.style.speed + trial.style.phase;
    let a = trial.style.amplitude;
    // offsets from the screen centre
    match gesture {
        GestureClass::Left => (-a * (0.5 * PI * s.clamp(0.0, 1.0)).sin(), -0.05),
        GestureClass::Right => (a * (0.5 * PI * s.clamp(0.0, 1.0)).sin(), -0.05),
        GestureClass::Tall => (0.0, -0.05 + 0.8 * a * (2.0 * PI * s).sin()),
        GestureClass::Wide => (a * (2.0 * PI * s).sin(), -0.05),
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (wx, wy) = (p.0 - a.0, p.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let h = if len2 > 0.0 { ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (dx, dy) = (wx - h * vx, wy - h * vy);
    (dx * dx + dy * dy).sqrt()
}

fn gesture_intensity(p: (f64, f64), hand: (f64, f64)) -> f64 {
    let shoulder = (0.0, 0.5);
    let dh = ((p.0 - hand.0).powi(2) + (p.1 - hand.1).powi(2)).sqrt();
    if dh <= 0.08 {
        1.0
    } else if segment_distance(p, shoulder, hand) <= 0.035 {
        0.4
    } else {
        -1.0
    }
}

fn inside_object(o: &ObjectSpec, p: (f64, f64), task: &TaskConfig) -> bool {
    let th = o.orientation_deg.to_radians();
    let (s, c) = th.sin_cos();
    let (dx, dy) = (p.0 - o.x, p.1 - o.y);
    let lx = dx * c + dy * s;
    let ly = -dx * s + dy * c;
    let (hw, hh) = match o.kind {
        ObjectKind::Tall => (task.object_half_short, task.object_half_long),
        ObjectKind::Wide => (task.object_half_long, task.object_half_short),
    };
    lx.abs() <= hw && ly.abs() <= hh
}

fn workspace_intensity(p: (f64, f64), trial: &TrialSpec, pose: &AgentPose, task: &TaskConfig) -> f64 {
    let de = ((p.0 - pose.arm_x).powi(2) + (p.1 - pose.arm_y).powi(2)).sqrt();
    if de <= 0.04 {
        return 0.65;
    }
    for o in &trial.objects {
        if inside_object(o, p, task) {
            // brightness stands in for the height cue separating the two kinds
            return match o.kind {
                ObjectKind::Tall => 1.0,
                ObjectKind::Wide => 0.3,
            };
        }
    }
    if (0.0..=1.0).contains(&p.0) && (0.0..=1.0).contains(&p.1) {
        -0.6
    } else {
        -1.0
    }
}

/// Camera frame at step `t` given the current agent pose.
pub fn render(trial: &TrialSpec, pose: &AgentPose, t: usize, task: &TaskConfig) -> FeatureMapStack {
    let (h, w, n) = (task.frame_height, task.frame_width, task.supersample.max(1));
    let mut frame = FeatureMapStack::zeros(1, h, w);
    let gesture_phase = t < trial.timings.gesture_len;
    let hand = trial.gesture.filter(|_| gesture_phase).map(|g| hand_position(trial, g, t));
    let fov = task.fov(pose.foveation);
    let mut samples = Vec::with_capacity(n * n);
    for py in 0..h {
        for px in 0..w {
            samples.clear();
            for sy in subsample_offsets(py, h, n) {
                for sx in subsample_offsets(px, w, n) {
                    let v = match hand {
                        Some(hand) => gesture_intensity((sx, sy), hand),
                        None if gesture_phase => -1.0,
                        None => {
                            let p = (pose.gaze_x + sx * fov, pose.gaze_y + sy * fov);
                            workspace_intensity(p, trial, pose, task)
                        }
                    };
                    samples.push(v);
                }
            }
            // order-independent sum keeps mirrored frames bit-identical
            samples.sort_by(f64::total_cmp);
            frame.values[py * w + px] = samples.iter().sum::<f64>() / samples.len() as f64;
        }
    }
    frame
}

fn lerp(a: f64, b: f64, s: f64) -> f64 {
    a + (b - a) * s
}

/// Scripted demonstration pose at step `t`.
pub fn teacher_policy(trial: &TrialSpec, t: usize, task: &TaskConfig) -> AgentPose {
    let tm = &trial.timings;
    let home = task.home;
    if t < tm.gesture_len {
        return home;
    }
    let target = trial.target();
    let mut pose = home;
    if t < tm.attend_onset() {
        pose.gaze_x = 0.5;
        pose.gaze_y = 0.5;
        return pose;
    }
    pose.gaze_x = target.x;
    pose.gaze_y = target.y;
    if t >= tm.reach_onset() {
        let s = ((t - tm.reach_onset() + 1) as f64 / tm.reach_len as f64).min(1.0);
        pose.arm_x = lerp(home.arm_x, target.x, s);
        pose.arm_y = lerp(home.arm_y, target.y, s);
        pose.foveation = lerp(1.0, 10.0, s);
        if s == 1.0 {
            pose.arm_x = target.x;
            pose.arm_y = target.y;
        }
    }
    if t >= tm.reach_end() {
        let s = ((t - tm.reach_end() + 1) as f64 / tm.grasp_len as f64).min(1.0);
        pose.grasp = lerp(1.0, 10.0, s);
    }
    pose
}

/// Environment dynamics: gaze, foveation and grasp follow the command
/// immediately; the arm moves towards the command by at most `arm_slew`.
pub fn step(current: &AgentPose, action: &AgentPose, task: &TaskConfig) -> AgentPose {
    let cmd = action.clamped();
    let (dx, dy) = (cmd.arm_x - current.arm_x, cmd.arm_y - current.arm_y);
    let dist = (dx * dx + dy * dy).sqrt();
    // relative slack absorbs roundoff in repeated fixed-size moves
    let (arm_x, arm_y) = if dist <= task.arm_slew * (1.0 + 1e-9) {
        (cmd.arm_x, cmd.arm_y)
    } else {
        let k = task.arm_slew / dist;
        (current.arm_x + k * dx, current.arm_y + k * dy)
    };
    AgentPose { arm_x, arm_y, ..cmd }
}

/// Live trial: the agent's pose plus the step counter.
#[derive(Debug, Clone)]
pub struct Simulation<'a> {
    pub trial: &'a TrialSpec,
    pub task: &'a TaskConfig,
    pub pose: AgentPose,
    pub t: usize,
    pub poses: Vec<AgentPose>,
    pub actions: Vec<AgentPose>,
}

impl<'a> Simulation<'a> {
    pub fn new(trial: &'a TrialSpec, task: &'a TaskConfig) -> Self {
        Self {
            trial,
            task,
            pose: task.home,
            t: 0,
            poses: Vec::new(),
            actions: Vec::new(),
        }
    }

    pub fn act(&mut self, action: AgentPose) {
        self.pose = step(&self.pose, &action, self.task);
        self.t += 1;
        self.actions.push(action);
        self.poses.push(self.pose);
    }

    pub fn episode(self) -> Episode {
        Episode {
            actions: self.actions,
            poses: self.poses,
        }
    }
}

impl ClosedLoopEnv for Simulation<'_> {
    fn render(&self) -> FeatureMapStack {
        render(self.trial, &self.pose, self.t, self.task)
    }

    fn apply(&mut self, decoded: &[f64]) {
        self.act(AgentPose::from_slice(decoded));
    }
}

/// Commanded actions and resulting poses of one rollout.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Episode {
    pub actions: Vec<AgentPose>,
    pub poses: Vec<AgentPose>,
}

/// Runs the scripted teacher in the environment.
pub fn teacher_episode(trial: &TrialSpec, task: &TaskConfig) -> Episode {
    let mut sim = Simulation::new(trial, task);
    for t in 0..trial.horizon() {
        sim.act(teacher_policy(trial, t, task));
    }
    sim.episode()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OutcomeLabel {
    Success,
    FailureConfusion,
    FailureOther,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub label: OutcomeLabel,
    /// Final effector distance to the target centre.
    pub distance: f64,
    pub grasp: f64,
}

fn grasped(pose: &AgentPose, o: &ObjectSpec, task: &TaskConfig) -> bool {
    let d = ((pose.arm_x - o.x).powi(2) + (pose.arm_y - o.y).powi(2)).sqrt();
    d <= task.success_radius && pose.grasp >= task.grasp_threshold
}

/// Scores the final pose of an episode.
pub fn evaluate(episode: &Episode, trial: &TrialSpec, task: &TaskConfig) -> Outcome {
    let last = episode.poses.last().copied().unwrap_or(task.home);
    let target = trial.target();
    let distance = ((last.arm_x - target.x).powi(2) + (last.arm_y - target.y).powi(2)).sqrt();
    let label = if grasped(&last, target, task) {
        OutcomeLabel::Success
    } else if trial.non_target().is_some_and(|o| grasped(&last, o, task)) {
        OutcomeLabel::FailureConfusion
    } else {
        OutcomeLabel::FailureOther
    };
    Outcome {
        label,
        distance,
        grasp: last.grasp,
    }
}

/// Occlusion onsets: workspace observation, attending the target, observing
/// the target, reach onset and mid-reach.
pub fn occlusion_points(trial: &TrialSpec) -> Vec<usize> {
    let tm = &trial.timings;
    vec![
        tm.gesture_len,
        tm.attend_onset(),
        tm.observe_onset(),
        tm.reach_onset(),
        tm.reach_onset() + tm.reach_len / 2,
    ]
}

/// Teacher-forced training sequence for one trial. The frame at step `t`
/// shows the pose commanded at `t - 1`.
pub fn make_sample(trial: &TrialSpec, task: &TaskConfig) -> SequenceSample {
    let codec = task.codec();
    let horizon = trial.horizon();
    let mut frames = Vec::with_capacity(horizon);
    let mut targets = Vec::with_capacity(horizon);
    let mut pose = task.home;
    for t in 0..horizon {
        frames.push(render(trial, &pose, t, task));
        let cmd = teacher_policy(trial, t, task);
        let (code, _) = encode_analog(&cmd.to_vec(), &codec).expect("pose has one value per group");
        targets.push(code);
        pose = step(&pose, &cmd, task);
    }
    SequenceSample {
        frames,
        targets,
        trial: Some(trial.clone()),
    }
}

pub fn make_dataset(n: usize, rng: &mut impl Rng, split: Split, gestureless: bool, task: &TaskConfig) -> Vec<SequenceSample> {
    let trials: Vec<TrialSpec> = if gestureless {
        (0..n).map(|_| sample_gestureless_trial(rng, task)).collect()
    } else {
        sample_trials(rng, split, n, task)
    };
    trials.iter().map(|t| make_sample(t, task)).collect()
}

/// Gesture clips (frames `0..G`) labelled with the gesture class index.
pub fn make_gesture_clips(n: usize, rng: &mut impl Rng, split: Split, task: &TaskConfig) -> Vec<(Vec<FeatureMapStack>, usize)> {
    sample_trials(rng, split, n, task)
        .iter()
        .map(|trial| {
            let frames = (0..trial.timings.gesture_len)
                .map(|t| render(trial, &task.home, t, task))
                .collect();
            (frames, trial.gesture.expect("gesture trial").index())
        })
        .collect()
}

/// Decoded pose sequence of a target array.
pub fn decode_targets(targets: &[Vec<f64>], task: &TaskConfig) -> Vec<AgentPose> {
    let codec = task.codec();
    targets
        .iter()
        .map(|y| AgentPose::from_slice(&decode_analog(y, &codec).expect("codec length")))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub split: Split,
    pub gestureless: bool,
    pub frame_height: usize,
    pub frame_width: usize,
    pub codec: SoftmaxGroupSpec,
    pub trials: Vec<TrialSpec>,
}

fn write_f64s(path: &Path, values: impl Iterator<Item = f64>) -> Result<()> {
    let bytes: Vec<u8> = values.flat_map(f64::to_le_bytes).collect();
    fs::write(path, bytes)?;
    Ok(())
}

fn read_f64s(path: &Path, expected: usize) -> Result<Vec<f64>> {
    if !path.exists() {
        return Err(VmdnnError::MissingArtifact(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    if bytes.len() != expected * 8 {
        return Err(VmdnnError::Format(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            expected * 8
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// Writes `manifest.json` plus `trial_NNNN/{frames,targets}.f64`.
pub fn write_dataset(dir: &Path, seed: u64, split: Split, gestureless: bool, samples: &[SequenceSample], task: &TaskConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = DatasetManifest {
        format_version: 1,
        seed,
        split,
        gestureless,
        frame_height: task.frame_height,
        frame_width: task.frame_width,
        codec: task.codec(),
        trials: samples
            .iter()
            .map(|s| s.trial.clone().ok_or_else(|| VmdnnError::config("sample without trial metadata")))
            .collect::<Result<_>>()?,
    };
    for (i, s) in samples.iter().enumerate() {
        let tdir = dir.join(format!("trial_{i:04}"));
        fs::create_dir_all(&tdir)?;
        write_f64s(&tdir.join("frames.f64"), s.frames.iter().flat_map(|f| f.values.iter().copied()))?;
        write_f64s(&tdir.join("targets.f64"), s.targets.iter().flat_map(|y| y.iter().copied()))?;
    }
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<SequenceSample>)> {
    let mpath = dir.join("manifest.json");
    if !mpath.exists() {
        return Err(VmdnnError::MissingArtifact(mpath));
    }
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(&mpath)?)?;
    let (h, w) = (manifest.frame_height, manifest.frame_width);
    let out = manifest.codec.total();
    let mut samples = Vec::with_capacity(manifest.trials.len());
    for (i, trial) in manifest.trials.iter().enumerate() {
        let tdir = dir.join(format!("trial_{i:04}"));
        let horizon = trial.horizon();
        let frames = read_f64s(&tdir.join("frames.f64"), horizon * h * w)?
            .chunks_exact(h * w)
            .map(|c| FeatureMapStack::from_values(1, h, w, c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let targets = read_f64s(&tdir.join("targets.f64"), horizon * out)?
            .chunks_exact(out)
            .map(<[f64]>::to_vec)
            .collect();
        samples.push(SequenceSample {
            frames,
            targets,
            trial: Some(trial.clone()),
        });
    }
    Ok((manifest, samples))
}
