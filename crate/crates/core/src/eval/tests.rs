use super::*;
use crate::codec::fit_normalizer;
use crate::diffusion::Regime;
use crate::model::ModelConfig;
use crate::trainer::{Checkpoint, TrainConfig, Trainer};

fn small_model() -> ModelConfig {
    ModelConfig { width: 16, depth: 2, depth_blocks: 1, heads: 2, horizon: 1, chunk: 4, ffn_mult: 2, ..ModelConfig::default() }
}

fn tiny_checkpoint(regime: Regime) -> Checkpoint {
    let eps: Vec<_> = (0..2).map(|i| record_episode(40 + i, i as usize).unwrap().0).collect();
    let (stats, _) = fit_normalizer(&eps).unwrap();
    let cfg = TrainConfig {
        total_steps: 10,
        warmup_steps: 1,
        batch_size: 2,
        regime,
        model: small_model(),
        checkpoint_every: 0,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(cfg, eps, stats).unwrap();
    t.run_until(2, None, None).unwrap();
    t.checkpoint()
}

#[test]
fn expert_policy_always_succeeds() {
    let r = policy_success(Policy::Expert, &eval_seeds(12), &RolloutOptions::default()).unwrap();
    assert_eq!(r.success_rate, Some(1.0));
    assert!(r.action_calls.is_none());
}

#[test]
fn untrained_model_rarely_succeeds_and_counts_calls() {
    let ck = tiny_checkpoint(Regime::Sync);
    let opts = RolloutOptions { t_a_steps: 2, t_o_steps: 6, replan: Some(4), sample_seed: 1 };
    let policy = Policy::Model { model: &ck.model, stats: &ck.stats };
    let r = policy_success(policy, &eval_seeds(6), &opts).unwrap();
    assert!(r.success_rate.unwrap() <= 0.05 + 1e-12, "{:?}", r.success_rate);
    assert_eq!((r.action_calls, r.total_calls), (Some(2), Some(2)));
    assert!(r.episodes.iter().all(|e| e.inferences > 0 && e.steps > 0));
    assert_eq!(policy_success(policy, &eval_seeds(6), &opts).unwrap(), r);
}

fn ground_truth(ep: &EpisodeRecord, f: usize) -> (Vec<Image>, Vec<CameraModel>) {
    ((0..3).map(|v| ep.depth_image(f, v)).collect(), (0..3).map(|v| ep.camera(f, v)).collect())
}

#[test]
fn oracle_inputs_reproduce_the_cloud() {
    let (ep, states) = record_episode(7, 0).unwrap();
    for f in [0, ep.frames.len() / 2] {
        let (depths, cams) = ground_truth(&ep, f);
        let gt = fused_cloud(&depths, &cams).unwrap();
        let wrist = wrist_camera_from_state(&ep, &states[f].state_vector()).unwrap();
        let mut via_state = cams.clone();
        via_state[WRIST_VIEW] = wrist;
        let cd = chamfer_bounded(&fused_cloud(&depths, &via_state).unwrap(), &gt, 0).unwrap();
        assert!(cd < 1e-4, "{cd}");
    }
}

#[test]
fn wrist_pose_error_grows_chamfer() {
    let (ep, states) = record_episode(8, 1).unwrap();
    let f = 2;
    let (depths, cams) = ground_truth(&ep, f);
    let gt = fused_cloud(&depths, &cams).unwrap();
    let mut last = -1.0;
    for delta in [0.0, 0.01, 0.02, 0.04] {
        let mut s = states[f].state_vector();
        s[0] += delta;
        s[1] -= 0.5 * delta;
        let mut c = cams.clone();
        c[WRIST_VIEW] = wrist_camera_from_state(&ep, &s).unwrap();
        let cd = chamfer_bounded(&fused_cloud(&depths, &c).unwrap(), &gt, 0).unwrap();
        assert!(cd > last, "{delta}: {cd} <= {last}");
        last = cd;
    }
}

#[test]
fn degenerate_quaternions() {
    let (ep, states) = record_episode(9, 0).unwrap();
    let mut s = states[0].state_vector();
    s[3..7].copy_from_slice(&[0.0; 4]);
    assert!(wrist_camera_from_state(&ep, &s).is_none());
    // a short but valid quaternion is renormalized
    let mut t = states[0].state_vector();
    for x in &mut t[3..7] {
        *x *= 1e-3;
    }
    let a = wrist_camera_from_state(&ep, &t).unwrap().extrinsic.unwrap();
    let b = ep.camera(0, WRIST_VIEW).extrinsic.unwrap();
    assert!(a.rotation.deviation(&b.rotation) < 1e-9);
    assert!(crate::geometry::norm(crate::geometry::sub(a.translation, b.translation)) < 1e-6);
}

#[test]
fn recon_is_deterministic_and_populated() {
    let ck = tiny_checkpoint(Regime::Ans { p: 0.5 });
    let opts = RolloutOptions { t_a_steps: 2, t_o_steps: 4, replan: None, sample_seed: 3 };
    for mode in [ReconMode::ActionConditioned, ReconMode::Joint] {
        let a = recon_4d(&ck.model, &ck.stats, &eval_seeds(2), &opts, mode).unwrap();
        let b = recon_4d(&ck.model, &ck.stats, &eval_seeds(2), &opts, mode).unwrap();
        assert_eq!(a, b);
        for m in [a.psnr, a.ssim, a.absrel, a.delta1] {
            assert!(m.unwrap().is_finite());
        }
        assert_eq!(a.total_calls, Some(4));
        assert_eq!(a.action_calls, Some(if mode == ReconMode::Joint { 2 } else { 0 }));
    }
}

#[test]
fn ablation_rows_report_call_counts() {
    let cks: Vec<(&str, Checkpoint)> = [("sync", Regime::Sync), ("decoupled", Regime::Decoupled), ("ans", Regime::Ans { p: 0.5 })]
        .into_iter()
        .map(|(n, r)| (n, tiny_checkpoint(r)))
        .collect();
    let refs: Vec<(&str, &Checkpoint)> = cks.iter().map(|(n, c)| (*n, c)).collect();
    let eval = AblationEval {
        policy_seeds: eval_seeds(1),
        recon_seeds: eval_seeds(1),
        replan: Some(4),
        ..AblationEval::default()
    };
    let rows = ablation_rows(&refs, &eval).unwrap();
    let calls: Vec<_> = rows.iter().map(|r| r.policy.action_calls.unwrap()).collect();
    assert_eq!(calls, vec![25, 25, 5, 5]);
    assert!(rows.iter().all(|r| r.recon.absrel.is_some() && r.policy.success_rate.is_some()));
    let table = format_table(&rows);
    assert_eq!(table.lines().count(), 5);
    assert!(ablation_rows(&refs[..2], &eval).is_err());
}
