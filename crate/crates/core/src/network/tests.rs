use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::{conv_valid, KernelBank, TANH_SCALE};

fn random_frame(cfg: &VmdnnConfig, rng: &mut ChaCha8Rng) -> FeatureMapStack {
    let v = (0..cfg.height * cfg.width).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    FeatureMapStack::from_values(1, cfg.height, cfg.width, v).unwrap()
}

fn net(cfg: &VmdnnConfig, seed: u64) -> Vmdnn {
    Vmdnn::new(cfg.clone(), init_parameters(cfg, seed, 1.0).unwrap()).unwrap()
}

#[test]
fn paper_config_geometry() {
    let cfg = VmdnnConfig::paper();
    assert!(validate_config(&cfg).is_ok());
    let vf = cfg.vf_geometry().unwrap();
    assert_eq!((vf.out_maps, vf.out_w, vf.out_h), (4, 15, 11));
    let vs = cfg.vs_geometry().unwrap();
    assert_eq!((vs.out_maps, vs.out_w, vs.out_h), (8, 5, 3));
    let pfc = cfg.pfc_geometry().unwrap();
    assert_eq!((pfc.out_w, pfc.out_h), (1, 1));
}

#[test]
fn oversized_vs_kernel_is_rejected() {
    let mut cfg = VmdnnConfig::paper();
    cfg.vs.kh = 13;
    cfg.vs.kw = 13;
    let errs = validate_config(&cfg).unwrap_err();
    assert!(errs.iter().any(|e| e.contains("V_S")), "{errs:?}");
}

#[test]
fn pfc_kernel_must_cover_vs_maps() {
    let mut cfg = VmdnnConfig::paper();
    cfg.pfc.kw = 4;
    cfg.pfc.kh = 3;
    let errs = validate_config(&cfg).unwrap_err();
    assert_eq!(errs.len(), 1);
    assert!(errs[0].contains("PFC kernel 4x3") && errs[0].contains("2x1"), "{errs:?}");
}

#[test]
fn every_violation_is_reported() {
    let mut cfg = VmdnnConfig::paper();
    cfg.ms.tau = 0.5;
    cfg.mf.neurons = 0;
    cfg.mo.groups.sigma = -1.0;
    let errs = validate_config(&cfg).unwrap_err();
    assert!(errs.len() >= 3, "{errs:?}");
}

#[test]
fn desk_and_tiny_configs_validate() {
    assert!(validate_config(&VmdnnConfig::tiny()).is_ok());
    let task = crate::envtask::TaskConfig::default();
    let cfg = VmdnnConfig::desk(&task);
    assert!(validate_config(&cfg).is_ok(), "{:?}", validate_config(&cfg));
}

#[test]
fn neutral_state_decodes_to_midpoints() {
    let cfg = VmdnnConfig::paper();
    let n = net(&cfg, 0);
    let s = n.init_state();
    assert!(s.y_mo.iter().all(|&y| (y - 0.1).abs() < 1e-15));
    for v in n.decode(&s.y_mo) {
        assert!(v.abs() < 1e-12);
    }
    assert!(s.u_pfc.iter().chain(&s.u_ms).chain(&s.u_mf).all(|&u| u == 0.0));
}

/// Parameter count written out layer by layer.
fn enumerate_parameters(cfg: &VmdnnConfig) -> usize {
    let out = |n: usize, k: usize, s: usize| (n - k) / s + 1;
    let (vf_h, vf_w) = (out(cfg.height, cfg.vf.kh, cfg.vf.stride), out(cfg.width, cfg.vf.kw, cfg.vf.stride));
    let _ = (vf_h, vf_w);
    let vf = cfg.vf.out_maps * cfg.vf.kh * cfg.vf.kw + cfg.vf.out_maps;
    let vs = cfg.vs.out_maps * cfg.vf.out_maps * cfg.vs.kh * cfg.vs.kw + cfg.vs.out_maps;
    let (p, s, f, o) = (cfg.pfc.neurons, cfg.ms.neurons, cfg.mf.neurons, cfg.mo.groups.total());
    let pfc = p * cfg.vs.out_maps * cfg.pfc.kh * cfg.pfc.kw + p * p + p * s + p;
    let ms = s * p + s * s + s * f + s;
    let mf = f * s + f * f + f;
    let mo = o * f + o;
    vf + vs + pfc + ms + mf + mo
}

#[test]
fn paper_parameter_count() {
    let cfg = VmdnnConfig::paper();
    assert_eq!(count_parameters(&cfg).unwrap(), 17_946);
    assert_eq!(enumerate_parameters(&cfg), 17_946);
}

#[test]
fn parameter_count_tracks_motor_sizes() {
    let base = VmdnnConfig::paper();
    let mut none = base.clone();
    none.ms.neurons = 0;
    none.mf.neurons = 0;
    let visual = 260 + 1576 + 20 * 120 + 20 * 20 + 20;
    assert_eq!(count_parameters(&none).unwrap(), visual + 110);

    let mut wide = base.clone();
    wide.mf.neurons = 100;
    let delta = count_parameters(&wide).unwrap() - count_parameters(&base).unwrap();
    // M_S<-M_F, M_F<-M_S, M_F<-M_F, b_MF and M_O<-M_F grow
    let expect = 30 * 50 + 50 * 30 + (100 * 100 - 50 * 50) + 50 + 110 * 50;
    assert_eq!(delta, expect);
    assert_eq!(count_parameters(&wide).unwrap(), enumerate_parameters(&wide));
}

#[test]
fn init_is_deterministic_and_scaled() {
    let cfg = VmdnnConfig::paper();
    let a = init_parameters(&cfg, 7, 1.0).unwrap();
    assert_eq!(a, init_parameters(&cfg, 7, 1.0).unwrap());
    assert_ne!(a, init_parameters(&cfg, 8, 1.0).unwrap());
    assert!(init_parameters(&cfg, 7, 0.0).unwrap().as_slice().iter().all(|v| *v == 0.0));
    for b in Block::ALL.into_iter().filter(|b| b.is_bias()) {
        assert!(a.block(b).iter().all(|v| *v == 0.0));
    }

    let mut big = cfg.clone();
    big.mf.neurons = 100;
    let p = init_parameters(&big, 1, 1.0).unwrap();
    let w = p.block(Block::WMfMf);
    assert_eq!(w.len(), 10_000);
    let fan = (30 + 100) as f64;
    let expect = 1.0 / fan.sqrt() / 3f64.sqrt();
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
    assert!((std - expect).abs() < 0.05 * expect, "std {std} expected {expect}");
    assert!(w.iter().all(|v| v.abs() <= 1.0 / fan.sqrt()));
}

#[test]
fn zero_parameters_give_zero_states() {
    let cfg = VmdnnConfig::paper();
    let n = Vmdnn::new(cfg.clone(), ParameterSet::zeros(&cfg).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = n.forward_step(&n.init_state(), &random_frame(&cfg, &mut rng)).unwrap();
    assert!(s.u_vf.values.iter().chain(&s.u_vs.values).chain(&s.u_pfc).all(|v| *v == 0.0));
    assert!(s.y_mo.iter().all(|&y| (y - 0.1).abs() < 1e-15));
    assert_eq!(s.t, 1);
}

#[test]
fn vision_matches_direct_convolution() {
    let cfg = VmdnnConfig::paper().with_condition(VisionMode::Cnn, PfcMode::Fast);
    let n = net(&cfg, 3);
    let p = n.params();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let frame = random_frame(&cfg, &mut rng);
    let s = n.forward_step(&n.init_state(), &frame).unwrap();
    let mut bank = KernelBank::zeros(4, 1, 8, 8, 4);
    bank.weights.copy_from_slice(p.block(Block::KernelVf));
    bank.biases.copy_from_slice(p.block(Block::BiasVf));
    let u = conv_valid(&frame, &bank).unwrap();
    for (a, b) in u.values.iter().zip(&s.u_vf.values) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn slow_vs_relaxes_geometrically() {
    let cfg = VmdnnConfig::paper();
    let n = net(&cfg, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let frame = random_frame(&cfg, &mut rng);
    let mut state = n.init_state();
    let mut us = Vec::new();
    for _ in 0..40 {
        state = n.forward_step(&state, &frame).unwrap();
        us.push(state.u_vs.values[5]);
    }
    // constant drive: u_t = u* (1 - (1 - 1/15)^t)
    let c = 1.0 - 1.0 / 15.0;
    let fixed = us[0] / (1.0 - c);
    for (t, u) in us.iter().enumerate() {
        let expect = fixed * (1.0 - c.powi(t as i32 + 1));
        assert!((u - expect).abs() < 1e-12 * fixed.abs().max(1.0), "t={t}");
    }
}

#[test]
fn mf_reads_previous_ms() {
    let cfg = VmdnnConfig::paper();
    let n = net(&cfg, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut prev = n.init_state();
    for _ in 0..3 {
        prev = n.forward_step(&prev, &random_frame(&cfg, &mut rng)).unwrap();
    }
    let frame = random_frame(&cfg, &mut rng);
    let next = n.forward_step(&prev, &frame).unwrap();
    let p = n.params();
    let (nms, nmf) = (30, 50);
    for i in 0..nmf {
        let mut drive = p.block(Block::BiasMf)[i];
        for j in 0..nms {
            drive += p.block(Block::WMfMs)[i * nms + j] * prev.y_ms[j];
        }
        for j in 0..nmf {
            drive += p.block(Block::WMfMf)[i * nmf + j] * prev.y_mf[j];
        }
        let u = 0.5 * prev.u_mf[i] + drive / 2.0;
        assert!((u - next.u_mf[i]).abs() < 1e-12);
    }
    // perturbing the stored M_S output moves M_F at the next step
    let mut bumped = prev.clone();
    bumped.y_ms[0] += 0.5;
    let other = n.forward_step(&bumped, &frame).unwrap();
    assert_ne!(other.u_mf, next.u_mf);
}

#[test]
fn cnn_vision_is_memoryless() {
    let cfg = VmdnnConfig::paper().with_condition(VisionMode::Cnn, PfcMode::Slow);
    let n = net(&cfg, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut frames: Vec<_> = (0..6).map(|_| random_frame(&cfg, &mut rng)).collect();
    let a = n.run_open_loop(&frames, true).unwrap();
    frames[..5].rotate_left(2);
    let b = n.run_open_loop(&frames, true).unwrap();
    let (sa, sb) = (a.steps[5].state.as_ref().unwrap(), b.steps[5].state.as_ref().unwrap());
    assert_eq!(sa.v_vf, sb.v_vf);
    assert_eq!(sa.v_vs, sb.v_vs);
    assert_ne!(sa.y_pfc, sb.y_pfc);
}

#[test]
fn outputs_are_bounded_distributions() {
    let cfg = VmdnnConfig::paper();
    let n = net(&cfg, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let frames: Vec<_> = (0..10).map(|_| random_frame(&cfg, &mut rng)).collect();
    let traj = n.run_open_loop(&frames, true).unwrap();
    assert_eq!(traj.len(), 10);
    for step in &traj.steps {
        let s = step.state.as_ref().unwrap();
        for l in [Layer::Vf, Layer::Vs, Layer::Pfc, Layer::Ms, Layer::Mf] {
            assert!(s.activations(l).iter().all(|v| v.abs() <= TANH_SCALE));
        }
        for g in s.y_mo.chunks(10) {
            assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(step.decoded.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
    assert_eq!(traj, n.run_open_loop(&frames, true).unwrap());
}

#[test]
fn bad_frames_are_rejected() {
    let cfg = VmdnnConfig::paper();
    let n = net(&cfg, 8);
    let mut frame = FeatureMapStack::zeros(1, 48, 64);
    frame.values[3] = 1.5;
    assert!(matches!(n.forward_step(&n.init_state(), &frame), Err(VmdnnError::Domain(_))));
    let small = FeatureMapStack::zeros(1, 40, 64);
    assert!(matches!(n.forward_step(&n.init_state(), &small), Err(VmdnnError::Config(_))));
}

#[test]
fn huge_weights_report_divergence_location() {
    let cfg = VmdnnConfig::paper();
    let mut params = init_parameters(&cfg, 9, 1.0).unwrap();
    params.block_mut(Block::BiasMs)[0] = f64::INFINITY;
    let n = Vmdnn::new(cfg.clone(), params).unwrap();
    match n.forward_step(&n.init_state(), &FeatureMapStack::zeros(1, 48, 64)) {
        Err(VmdnnError::Divergence { layer, step }) => {
            assert_eq!(layer, "M_S");
            assert_eq!(step, 0);
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

struct Replay {
    frames: Vec<FeatureMapStack>,
    t: usize,
    applied: Vec<Vec<f64>>,
}

impl ClosedLoopEnv for Replay {
    fn render(&self) -> FeatureMapStack {
        self.frames[self.t].clone()
    }

    fn apply(&mut self, decoded: &[f64]) {
        self.applied.push(decoded.to_vec());
        self.t += 1;
    }
}

#[test]
fn closed_loop_with_replayed_frames_equals_open_loop() {
    let cfg = VmdnnConfig::paper();
    let n = net(&cfg, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let frames: Vec<_> = (0..8).map(|_| random_frame(&cfg, &mut rng)).collect();
    let open = n.run_open_loop(&frames, false).unwrap();
    let mut env = Replay { frames: frames.clone(), t: 0, applied: Vec::new() };
    let closed = n.run_closed_loop(&mut env, 8, &OcclusionSchedule::none(), false).unwrap();
    assert_eq!(open, closed);
    assert_eq!(env.applied.len(), 8);
    assert_eq!(env.applied[3], closed.steps[3].decoded);

    let mut env = Replay { frames: frames.clone(), t: 0, applied: Vec::new() };
    let late = n.run_closed_loop(&mut env, 8, &OcclusionSchedule::at(8), false).unwrap();
    assert_eq!(late, closed);

    let mut env = Replay { frames, t: 0, applied: Vec::new() };
    let blind = n.run_closed_loop(&mut env, 8, &OcclusionSchedule::at(3), false).unwrap();
    assert_eq!(blind.steps[..3], closed.steps[..3]);
    assert!(blind.steps[3..].iter().all(|s| s.frame.values.iter().all(|v| *v == 0.0)));
}
