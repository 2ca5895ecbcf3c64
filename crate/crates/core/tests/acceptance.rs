//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Criteria 8 and 9 need full desk-scale training runs and only execute when
//! `WAM4D_FULL=1` is set; otherwise they report FAIL as not verified without
//! failing the process.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wam4d::diffusion::{
    infer_async, noisify, sample_ans, training_loss, CallCounter, Condition, InferOptions, LossWeights, OracleDenoiser, TrainExample,
};
use wam4d::eval::{
    ablation_table, eval_seeds, policy_success, recon_4d, AblationEval, Policy, ReconMode, RolloutOptions,
};
use wam4d::geometry::{chamfer, unproject_and_fuse, wrist_pose, PointCloud, Pose, Quat, Vec3};
use wam4d::model::{build_sequence, Model, ModelConfig, TokenSequence};
use wam4d::numerics::{grad_check, Graph, Tensor};
use wam4d::trainer::{train_run, Checkpoint, TrainConfig};
use wam4d::worldsim::{
    camera_models, generate_dataset, render, SceneView, ACTION_DIM, CUBE_HALF, FAR_CLIP, STATE_DIM,
};

const ANS_DRAWS: usize = 100_000;
const ANS_VIOLATION_DRAWS: usize = 1_000_000;
const ANS_CLEAN_BAND: (f64, f64) = (0.49, 0.51);
const ANS_MEAN_BAND: (f64, f64) = (0.59, 0.61);
const REPLICATION_TOL: f64 = 1e-6;
const GRAD_REL_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-4;
const ORACLE_TOL: f64 = 1e-6;
const GEOMETRY_TOL: f64 = 1e-9;
const FUSION_CHAMFER_TOL: f64 = 1e-4;
const SUCCESS_BAR: f64 = 0.80;
const RANDOM_BAR: f64 = 0.05;
const ABSREL_BAR: f64 = 0.15;
const ABLATION_RATIO: f64 = 1.10;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random_sequence(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> TokenSequence {
    let tw = cfg.token_width();
    let vc = uniform(rng, cfg.cond_video_tokens() * tw);
    let v = uniform(rng, cfg.video_tokens() * tw);
    let sc = uniform(rng, STATE_DIM);
    let s = uniform(rng, cfg.horizon * STATE_DIM);
    let a = uniform(rng, cfg.chunk * ACTION_DIM);
    let t_a = rng.random_range(0.0..1.0);
    let t_o = rng.random_range(t_a..1.0);
    build_sequence(cfg, rng.random_range(0..cfg.tasks), vc, v, sc, s, a, t_o, t_a).unwrap()
}

fn desk_model(seed: u64) -> Model {
    let mut m = Model::new(ModelConfig::default(), seed).unwrap();
    m.perturb(seed + 1, 0.05);
    m.init_depth_branch(ModelConfig::default().depth_blocks, seed + 2).unwrap();
    m
}

fn condition(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Condition {
    Condition {
        task: rng.random_range(0..cfg.tasks),
        cond_frames: uniform(rng, cfg.cond_video_tokens() * cfg.token_width()),
        cond_state: uniform(rng, STATE_DIM),
    }
}

fn ans_distribution() -> Verdict {
    let p = 0.5;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut clean, mut ratio, mut branch2) = (0usize, 0.0, 0usize);
    for _ in 0..ANS_DRAWS {
        let s = sample_ans(&mut rng, p);
        if s.t_a == 0.0 {
            clean += 1;
        } else {
            branch2 += 1;
            ratio += (s.t_o - s.t_a) / (1.0 - s.t_a);
        }
    }
    let frac = clean as f64 / ANS_DRAWS as f64;
    let mean = ratio / branch2 as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let violations = (0..ANS_VIOLATION_DRAWS)
        .filter(|_| {
            let s = sample_ans(&mut rng, p);
            s.t_o < s.t_a
        })
        .count();
    let pass = (ANS_CLEAN_BAND.0..=ANS_CLEAN_BAND.1).contains(&frac)
        && (ANS_MEAN_BAND.0..=ANS_MEAN_BAND.1).contains(&mean)
        && violations == 0;
    verdict(pass, format!("P(t_a=0)={frac:.4}, normalized mean={mean:.4}, violations={violations}/{ANS_VIOLATION_DRAWS}"))
}

fn unilateral_attention() -> Verdict {
    let m = desk_model(20);
    let cfg = m.config;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut identical = 0;
    for _ in 0..10 {
        let seqs = vec![random_sequence(&cfg, &mut rng)];
        let on = m.forward(&seqs, true).unwrap();
        let off = m.forward(&seqs, false).unwrap();
        if on.depth.is_some() && (on.video, on.states, on.actions) == (off.video, off.states, off.actions) {
            identical += 1;
        }
    }
    verdict(identical == 10, format!("{identical}/10 forwards bitwise identical"))
}

fn branch_replication() -> Verdict {
    let cfg = ModelConfig::default();
    let mut m = Model::new(cfg, 30).unwrap();
    m.perturb(31, 0.05);
    m.init_depth_branch(cfg.depth_blocks, 32).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let seqs: Vec<_> = (0..2).map(|_| random_sequence(&cfg, &mut rng)).collect();
    let mut g = Graph::<f64>::new();
    let p = m.bind(&mut g, false);
    let out = m.forward_graph(&mut g, &p, &seqs, true).unwrap();
    let worst = out
        .main_trace
        .iter()
        .zip(&out.depth_trace)
        .map(|(a, b)| max_diff(g.value(*a).data(), g.value(*b).data()))
        .fold(0.0, f64::max);
    let points = out.main_trace.len();
    verdict(worst < REPLICATION_TOL && points == cfg.depth_blocks + 1, format!("max deviation {worst:.2e} over {points} trace points"))
}

fn gradient_correctness() -> Verdict {
    let cfg = ModelConfig { width: 16, depth: 2, depth_blocks: 1, heads: 2, horizon: 1, chunk: 4, ffn_mult: 2, ..ModelConfig::default() };
    let mut m = Model::new(cfg, 40).unwrap();
    m.perturb(41, 0.1);
    m.init_depth_branch(1, 42).unwrap();
    m.perturb(43, 0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let examples: Vec<TrainExample> = (0..2)
        .map(|i| TrainExample {
            task: i % cfg.tasks,
            cond_frames: uniform(&mut rng, cfg.cond_video_tokens() * cfg.token_width()),
            video: uniform(&mut rng, cfg.video_tokens() * cfg.token_width()),
            cond_state: uniform(&mut rng, STATE_DIM),
            states: uniform(&mut rng, cfg.horizon * STATE_DIM),
            actions: uniform(&mut rng, cfg.chunk * ACTION_DIM),
            depth: uniform(&mut rng, cfg.video_tokens() * cfg.depth_token_width()),
        })
        .collect();
    let levels = [(0.7, 0.3), (0.4, 0.4)];
    let masks = ([true; STATE_DIM], [true; ACTION_DIM]);
    let params: Vec<Tensor<f64>> = m.params.tensors.iter().map(|t| t.cast::<f64>()).collect();
    let report = grad_check(&params, FD_STEP, Some((32, 45)), |g: &mut Graph<f64>, vars| {
        let mut noise = ChaCha8Rng::seed_from_u64(46);
        training_loss(g, vars, &m, &examples, &levels, &mut noise, &LossWeights::default(), (&masks.0, &masks.1)).map(|l| l.total)
    });
    match report {
        Ok(r) => {
            let checked: usize = r.checked.iter().sum();
            let worst = r.worst();
            verdict(worst < GRAD_REL_TOL, format!("max relative error {worst:.2e} over {checked} elements in {} tensors", r.checked.len()))
        }
        Err(e) => verdict(false, format!("gradient check failed: {e}")),
    }
}

fn flow_matching_exactness() -> Verdict {
    let cfg = ModelConfig { width: 16, depth: 2, depth_blocks: 1, heads: 2, horizon: 1, chunk: 4, ..ModelConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let clean = (0..2)
        .map(|_| {
            (
                uniform(&mut rng, cfg.video_tokens() * cfg.token_width()),
                uniform(&mut rng, cfg.horizon * STATE_DIM),
                uniform(&mut rng, cfg.chunk * ACTION_DIM),
                uniform(&mut rng, cfg.video_tokens() * cfg.depth_token_width()),
            )
        })
        .collect::<Vec<_>>();
    let oracle = OracleDenoiser { config: cfg, clean };
    let conds: Vec<_> = (0..2).map(|_| condition(&cfg, &mut rng)).collect();
    let mut worst = 0.0f64;
    for (ta, to) in [(1, 1), (5, 25), (10, 50), (3, 7), (25, 25)] {
        let opts = InferOptions { depth: true, ..InferOptions::new(ta, to, 51) };
        let results = infer_async(&oracle, &conds, &opts).unwrap();
        for (r, (v0, s0, a0, _)) in results.iter().zip(&oracle.clean) {
            worst = worst.max(max_diff(&r.video, v0)).max(max_diff(&r.states, s0)).max(max_diff(&r.actions, a0));
        }
    }
    let x0 = uniform(&mut rng, 64);
    let eps = uniform(&mut rng, 64);
    let endpoints = noisify(&x0, &eps, 0.0).0 == x0 && noisify(&x0, &eps, 1.0).0 == eps;
    verdict(worst < ORACLE_TOL && endpoints, format!("max latent error {worst:.2e}, endpoints exact: {endpoints}"))
}

fn asynchronous_availability() -> Verdict {
    let m = desk_model(60);
    let cfg = m.config;
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let conds = vec![condition(&cfg, &mut rng)];
    let mut ready = Vec::new();
    let mut untouched = true;
    for (ta, to) in [(10, 50), (5, 25), (25, 25)] {
        let counter = CallCounter::new(&m);
        let r = infer_async(&counter, &conds, &InferOptions::new(ta, to, 62)).unwrap();
        ready.push((r[0].action_ready_calls, counter.calls()));
        untouched &= r[0].actions == r[0].actions_at_end;
    }
    let deploy = ready[0] == (10, 50);
    let ratio = ready[2].0 as f64 / ready[1].0 as f64;
    let pass = deploy && ready[1] == (5, 25) && ready[2] == (25, 25) && ratio == 5.0 && untouched;
    verdict(pass, format!("(action-ready, total) calls {ready:?}, sync/async ratio {ratio}, action latents unchanged: {untouched}"))
}

fn brute_chamfer(a: &[Vec3], b: &[Vec3]) -> f64 {
    let dist = |p: &Vec3, q: &Vec3| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
    let one = |x: &[Vec3], y: &[Vec3]| x.iter().map(|p| y.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min)).sum::<f64>() / x.len() as f64;
    0.5 * (one(a, b) + one(b, a))
}

fn mat4_mul(a: &[[f64; 4]; 4], b: &[[f64; 4]; 4]) -> [[f64; 4]; 4] {
    let mut c = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            c[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
    let axis = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
    let t = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    Pose::new(Quat::from_axis_angle(axis), t)
}

/// Independent ray caster for a scene holding only the room and the cube.
fn surface_point(o: Vec3, d: Vec3, cube: Vec3) -> Vec3 {
    let room = [[-1.0, 1.0], [-1.0, 1.0], [0.0, 1.5]];
    let mut best = f64::INFINITY;
    for axis in 0..3 {
        for bound in room[axis] {
            if d[axis] != 0.0 {
                let s = (bound - o[axis]) / d[axis];
                if s > 0.0 {
                    best = best.min(s);
                }
            }
        }
    }
    let (mut near, mut far) = (f64::NEG_INFINITY, f64::INFINITY);
    for axis in 0..3 {
        let (lo, hi) = (cube[axis] - CUBE_HALF, cube[axis] + CUBE_HALF);
        let (s0, s1) = ((lo - o[axis]) / d[axis], (hi - o[axis]) / d[axis]);
        near = near.max(s0.min(s1));
        far = far.min(s0.max(s1));
    }
    if near <= far && near > 0.0 {
        best = best.min(near);
    }
    [o[0] + best * d[0], o[1] + best * d[1], o[2] + best * d[2]]
}

fn geometry_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let mut chamfer_err = 0.0f64;
    for _ in 0..20 {
        let mut cloud = || (0..50).map(|_| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()]).collect::<Vec<Vec3>>();
        let (a, b) = (cloud(), cloud());
        let fast = chamfer(&PointCloud::new(a.clone()).unwrap(), &PointCloud::new(b.clone()).unwrap()).unwrap();
        chamfer_err = chamfer_err.max((fast - brute_chamfer(&a, &b)).abs());
    }
    let mut pose_err = 0.0f64;
    for _ in 0..1000 {
        let (ee, h2e) = (random_pose(&mut rng), random_pose(&mut rng));
        let oracle = mat4_mul(&ee.to_matrix4(), &h2e.to_matrix4());
        let got = wrist_pose(&ee, &h2e).to_matrix4();
        for i in 0..4 {
            for j in 0..4 {
                pose_err = pose_err.max((oracle[i][j] - got[i][j]).abs());
            }
        }
    }
    let cube = [-0.1, 0.05, CUBE_HALF];
    let far_away = [0.9, -0.9, CUBE_HALF];
    let view = SceneView { cube, goal: far_away, ee: Pose::from_translation([0.9, 0.9, 1.4]), gripper: 0.0, task: 0 };
    let cams = camera_models();
    let statics = [cams[0], cams[1]];
    let depths: Vec<_> = statics.iter().map(|c| render(&view, c).1).collect();
    let views: Vec<_> = depths.iter().zip(&statics).collect();
    let fused = unproject_and_fuse(&views, FAR_CLIP).unwrap();
    let mut surface = Vec::new();
    for cam in &statics {
        let m = cam.extrinsic.unwrap().to_matrix4();
        let k = cam.intrinsics;
        for v in 0..cam.height {
            for u in 0..cam.width {
                let local = [(u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0];
                let d: Vec3 = std::array::from_fn(|i| (0..3).map(|j| m[i][j] * local[j]).sum());
                surface.push(surface_point([m[0][3], m[1][3], m[2][3]], d, cube));
            }
        }
    }
    let fusion = chamfer(&fused, &PointCloud::new(surface).unwrap()).unwrap();
    let pass = chamfer_err < GEOMETRY_TOL && pose_err < GEOMETRY_TOL && fusion < FUSION_CHAMFER_TOL && fused.len() == 2048;
    verdict(pass, format!("chamfer vs brute force {chamfer_err:.1e}, wrist pose vs matrices {pose_err:.1e}, fusion chamfer {fusion:.1e} m"))
}

fn full_runs_enabled() -> bool {
    std::env::var("WAM4D_FULL").is_ok_and(|v| v == "1")
}

fn desk_dataset(root: &Path) -> std::path::PathBuf {
    let data = root.join("data");
    if !data.join("manifest.json").exists() {
        generate_dataset(200, 0, &data).unwrap();
    }
    data
}

fn learning_sanity(root: &Path) -> Verdict {
    let data = desk_dataset(root);
    let cfg = TrainConfig { dataset: data, ..TrainConfig::default() };
    let (path, _) = train_run(cfg.clone(), &root.join("desk"), None).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    let seeds = eval_seeds(50);
    let opts = RolloutOptions::default();
    let trained = policy_success(Policy::Model { model: &ck.model, stats: &ck.stats }, &seeds, &opts).unwrap().success_rate.unwrap();
    let expert = policy_success(Policy::Expert, &seeds, &opts).unwrap().success_rate.unwrap();
    let mut fresh = Model::new(cfg.model, 7).unwrap();
    fresh.init_depth_branch(cfg.model.depth_blocks, 8).unwrap();
    let random = policy_success(Policy::Model { model: &fresh, stats: &ck.stats }, &seeds, &opts).unwrap().success_rate.unwrap();
    let absrel = recon_4d(&ck.model, &ck.stats, &eval_seeds(20), &opts, ReconMode::Joint).unwrap().absrel.unwrap();
    let pass = trained >= SUCCESS_BAR && expert == 1.0 && random <= RANDOM_BAR && absrel < ABSREL_BAR;
    verdict(pass, format!("success {trained:.2} (expert {expert:.2}, random-init {random:.2}), static AbsRel {absrel:.4}"))
}

fn ablation_direction(root: &Path) -> Verdict {
    let data = desk_dataset(root);
    let (mut ans, mut decoupled) = (Vec::new(), Vec::new());
    let mut populated = true;
    for seed in 0..3 {
        let base = TrainConfig { dataset: data.clone(), seed, ..TrainConfig::default() };
        let rows = ablation_table(&base, &root.join(format!("ablation_{seed}")), &AblationEval::default()).unwrap();
        populated &= rows.len() == 4
            && rows.iter().all(|r| {
                let (p, q) = (&r.policy, &r.recon);
                p.success_rate.is_some() && [q.psnr, q.ssim, q.absrel, q.delta1, q.chamfer].iter().all(Option::is_some)
            });
        ans.push(rows[3].recon.absrel.unwrap_or(f64::INFINITY));
        decoupled.push(rows[2].recon.absrel.unwrap_or(f64::INFINITY));
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[1]
    };
    let (a, d) = (median(&mut ans), median(&mut decoupled));
    verdict(populated && a <= ABLATION_RATIO * d, format!("median AbsRel ans {a:.4} vs decoupled {d:.4}, table populated: {populated}"))
}

fn dir_bytes(dir: &Path) -> Vec<(std::ffi::OsString, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn reproducibility(root: &Path) -> Verdict {
    let (a, b) = (root.join("repro_a"), root.join("repro_b"));
    for d in [&a, &b] {
        generate_dataset(4, 3, d).unwrap();
    }
    let data_same = dir_bytes(&a) == dir_bytes(&b);
    let cfg = TrainConfig {
        model: ModelConfig { width: 16, depth: 2, depth_blocks: 1, heads: 2, horizon: 1, chunk: 4, ffn_mult: 2, ..ModelConfig::default() },
        total_steps: 6,
        warmup_steps: 2,
        batch_size: 2,
        checkpoint_every: 3,
        dataset: a.clone(),
        ..TrainConfig::default()
    };
    let (straight, _) = train_run(cfg.clone(), &root.join("straight"), None).unwrap();
    let mid = root.join("straight").join(wam4d::trainer::checkpoint_file_name(3));
    let (resumed, _) = train_run(cfg, &root.join("resumed"), Some(&mid)).unwrap();
    let resume_same = std::fs::read(&straight).unwrap() == std::fs::read(&resumed).unwrap();
    let ck = Checkpoint::load(&straight).unwrap();
    let opts = RolloutOptions { t_a_steps: 2, t_o_steps: 4, replan: Some(4), sample_seed: 9 };
    let policy = || policy_success(Policy::Model { model: &ck.model, stats: &ck.stats }, &eval_seeds(2), &opts).unwrap();
    let recon = |mode| recon_4d(&ck.model, &ck.stats, &eval_seeds(2), &opts, mode).unwrap();
    let eval_same = policy() == policy()
        && recon(ReconMode::Joint) == recon(ReconMode::Joint)
        && recon(ReconMode::ActionConditioned) == recon(ReconMode::ActionConditioned);
    verdict(data_same && resume_same && eval_same, format!("dataset bytes equal: {data_same}, resumed checkpoint equal: {resume_same}, eval reports equal: {eval_same}"))
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let full = full_runs_enabled();
    let root = tempfile::tempdir().unwrap();
    type Check<'a> = Box<dyn Fn() -> Verdict + 'a>;
    let checks: Vec<(&str, Duration, Check)> = vec![
        ("1 ans distribution", Duration::from_secs(10), Box::new(ans_distribution)),
        ("2 unilateral attention", Duration::from_secs(60), Box::new(unilateral_attention)),
        ("3 branch replication", Duration::from_secs(60), Box::new(branch_replication)),
        ("4 gradient correctness", Duration::from_secs(300), Box::new(gradient_correctness)),
        ("5 flow-matching exactness", Duration::from_secs(10), Box::new(flow_matching_exactness)),
        ("6 asynchronous availability", Duration::from_secs(120), Box::new(asynchronous_availability)),
        ("7 geometry oracles", Duration::from_secs(60), Box::new(geometry_oracles)),
    ];
    let mut failures = 0;
    for (name, budget, check) in &checks {
        let start = Instant::now();
        let v = check();
        let elapsed = start.elapsed();
        let pass = v.pass && elapsed <= *budget;
        failures += usize::from(!pass);
        println!("criterion {name:<30} {} ({}; {:.1}s of {}s)", if pass { "PASS" } else { "FAIL" }, v.detail, elapsed.as_secs_f64(), budget.as_secs());
    }
    let gated: [(&str, Box<dyn Fn() -> Verdict + '_>); 2] = [
        ("8 learning sanity", Box::new(|| learning_sanity(root.path()))),
        ("9 ablation direction", Box::new(|| ablation_direction(root.path()))),
    ];
    for (name, check) in &gated {
        if !full {
            println!("criterion {name:<30} FAIL (not verified: needs desk-scale training, set WAM4D_FULL=1)");
            continue;
        }
        let start = Instant::now();
        let v = check();
        failures += usize::from(!v.pass);
        println!("criterion {name:<30} {} ({}; {:.0}s)", if v.pass { "PASS" } else { "FAIL" }, v.detail, start.elapsed().as_secs_f64());
    }
    let start = Instant::now();
    let v = reproducibility(root.path());
    failures += usize::from(!v.pass);
    println!("criterion {:<30} {} ({}; {:.1}s)", "10 reproducibility", if v.pass { "PASS" } else { "FAIL" }, v.detail, start.elapsed().as_secs_f64());
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
