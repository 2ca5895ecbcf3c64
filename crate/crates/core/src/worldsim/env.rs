use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::{self, SceneView, CUBE_HALF, WORKSPACE};
use super::WorldError;
use crate::geometry::{self as geo, CameraKind, CameraModel, Image, Pose, Quat, Vec3};

pub const STATE_DIM: usize = 16;
pub const ACTION_DIM: usize = 14;
/// Left-arm slots carrying signal; the remaining right-arm slots stay zero.
pub const STATE_ACTIVE: usize = 8;
pub const ACTION_ACTIVE: usize = 7;
pub const EPISODE_CAP: usize = 120;
pub const SUCCESS_RADIUS: f64 = 0.02;
pub const GRASP_RADIUS: f64 = 0.03;
/// Control steps per recorded frame.
pub const CONTROL_PER_FRAME: usize = 4;
const EE_BOUNDS: [f64; 6] = [-0.5, 0.5, -0.5, 0.5, 0.01, 0.6];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub cube: Pose,
    pub goal: Vec3,
    pub ee: Pose,
    pub gripper: f64,
    pub task: usize,
    pub step: usize,
    /// Cube offset from the tool point while grasped.
    pub attached: Option<Vec3>,
}

impl WorldState {
    pub fn scene(&self) -> SceneView {
        SceneView { cube: self.cube.translation, goal: self.goal, ee: self.ee, gripper: self.gripper, task: self.task }
    }

    /// Absolute proprioceptive vector: EE position, EE quaternion (w,x,y,z),
    /// gripper opening, then eight zero right-arm slots.
    pub fn state_vector(&self) -> [f64; STATE_DIM] {
        let mut s = [0.0; STATE_DIM];
        s[..3].copy_from_slice(&self.ee.translation);
        s[3..7].copy_from_slice(&self.ee.rotation.0);
        s[7] = self.gripper;
        s
    }

    pub fn success(&self) -> bool {
        self.attached.is_none() && geo::norm(geo::sub(self.cube.translation, self.goal)) <= SUCCESS_RADIUS
    }

    pub fn yaw(&self) -> f64 {
        let r = self.ee.rotation.to_matrix();
        r[1][0].atan2(r[0][0])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewObs {
    pub rgb: Image,
    pub depth: Image,
    pub camera: CameraModel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub views: Vec<ViewObs>,
    pub state: [f64; STATE_DIM],
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub done: bool,
    pub success: bool,
}

/// Renders every view of a state; the wrist camera is posed from the EE.
pub fn observe(state: &WorldState) -> Observation {
    let view = state.scene();
    let h2e = scene::hand_to_eye();
    let views = scene::camera_models()
        .into_iter()
        .map(|mut camera| {
            if camera.kind == CameraKind::Wrist {
                camera.extrinsic = Some(geo::wrist_pose(&state.ee, &h2e));
            }
            let (rgb, depth) = scene::render(&view, &camera);
            ViewObs { rgb, depth, camera }
        })
        .collect();
    Observation { views, state: state.state_vector() }
}

/// Initial state for a seed and task, without rendering.
pub fn initial_state(seed: u64, task: usize) -> Result<WorldState, WorldError> {
    let goal = scene::task_goal(task).ok_or(WorldError::UnknownTask(task))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rng.random_range(WORKSPACE[0]..WORKSPACE[1]);
    let y = rng.random_range(WORKSPACE[2]..WORKSPACE[3]);
    Ok(WorldState {
        cube: Pose::from_translation([x, y, CUBE_HALF]),
        goal,
        ee: scene::ee_start(),
        gripper: 0.0,
        task,
        step: 0,
        attached: None,
    })
}

/// Pure transition function of the kinematic world.
pub fn transition(state: &WorldState, action: &[f64; ACTION_DIM]) -> Result<WorldState, WorldError> {
    if action.iter().any(|a| !a.is_finite()) {
        return Err(WorldError::NonFiniteAction);
    }
    let mut next = *state;
    next.step += 1;
    let mut p = geo::add(state.ee.translation, [action[0], action[1], action[2]]);
    for a in 0..3 {
        p[a] = p[a].clamp(EE_BOUNDS[2 * a], EE_BOUNDS[2 * a + 1]);
    }
    let omega = [action[3], action[4], action[5]];
    let rotation = if omega == [0.0; 3] {
        state.ee.rotation
    } else {
        Quat::from_axis_angle(omega).mul(&state.ee.rotation).normalized().unwrap_or(state.ee.rotation)
    };
    next.ee = Pose { rotation, translation: p };
    if action[6] != 0.0 {
        next.gripper = (state.gripper + action[6]).clamp(0.0, 1.0);
    }
    let closed = next.gripper >= 0.5;

    match state.attached {
        Some(offset) if closed => next.cube.translation = geo::add(p, offset),
        Some(_) => {
            next.attached = None;
            next.cube.translation[2] = CUBE_HALF;
        }
        None => {
            let c = next.cube.translation;
            if closed && geo::norm(geo::sub(c, p)) < GRASP_RADIUS {
                next.attached = Some(geo::sub(c, p));
            } else if next.ee != state.ee {
                push(&mut next);
            }
        }
    }
    let c = &mut next.cube.translation;
    c[0] = c[0].clamp(scene::ROOM[0] + CUBE_HALF, scene::ROOM[1] - CUBE_HALF);
    c[1] = c[1].clamp(scene::ROOM[2] + CUBE_HALF, scene::ROOM[3] - CUBE_HALF);
    c[2] = c[2].max(CUBE_HALF);
    Ok(next)
}

/// Point contact between the palm sphere and the cube, resolved horizontally
/// along the axis of least penetration.
fn push(state: &mut WorldState) {
    let palm = state.scene().palm_center();
    let c = state.cube.translation;
    let reach = CUBE_HALF + scene::PALM_RADIUS;
    let pen = |a: usize| reach - (palm[a] - c[a]).abs();
    let (px, py, pz) = (pen(0), pen(1), pen(2));
    if px <= 0.0 || py <= 0.0 || pz <= 0.0 {
        return;
    }
    let axis = if px < py { 0 } else { 1 };
    let amount = if axis == 0 { px } else { py };
    let dir = if palm[axis] >= c[axis] { -1.0 } else { 1.0 };
    state.cube.translation[axis] += dir * amount;
}

/// Closed-loop environment over [`transition`] and [`observe`].
#[derive(Clone, Debug)]
pub struct Env {
    state: WorldState,
}

impl Env {
    pub fn reset(seed: u64, task: usize) -> Result<(Self, Observation), WorldError> {
        let state = initial_state(seed, task)?;
        let obs = observe(&state);
        Ok((Self { state }, obs))
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }

    pub fn step(&mut self, action: &[f64; ACTION_DIM]) -> Result<StepOutcome, WorldError> {
        self.state = transition(&self.state, action)?;
        let success = self.state.success();
        Ok(StepOutcome { observation: observe(&self.state), done: success || self.state.step >= EPISODE_CAP, success })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reset_is_deterministic_and_in_bounds() {
        let (_, a) = Env::reset(0, 0).unwrap();
        let (env, b) = Env::reset(0, 0).unwrap();
        assert_eq!(a, b);
        let c = env.state().cube.translation;
        assert!((WORKSPACE[0]..WORKSPACE[1]).contains(&c[0]));
        assert!((WORKSPACE[2]..WORKSPACE[3]).contains(&c[1]));
        assert!(Env::reset(0, 2).is_err());
    }

    #[test]
    fn cube_placement_passes_chi_square_uniformity() {
        let mut counts = [0usize; 16];
        for seed in 0..1000 {
            let c = initial_state(seed, 0).unwrap().cube.translation;
            let gx = (((c[0] - WORKSPACE[0]) / (WORKSPACE[1] - WORKSPACE[0])) * 4.0) as usize;
            let gy = (((c[1] - WORKSPACE[2]) / (WORKSPACE[3] - WORKSPACE[2])) * 4.0) as usize;
            counts[gy.min(3) * 4 + gx.min(3)] += 1;
        }
        let expected = 1000.0 / 16.0;
        let chi2: f64 = counts.iter().map(|&n| (n as f64 - expected).powi(2) / expected).sum();
        // 99th percentile of chi-square with 15 degrees of freedom
        assert!(chi2 < 30.578, "chi2 = {chi2}");
    }

    #[test]
    fn zero_action_only_advances_step() {
        let mut s = initial_state(3, 1).unwrap();
        s.gripper = 1.0;
        let next = transition(&s, &[0.0; ACTION_DIM]).unwrap();
        assert_eq!(next, WorldState { step: 1, ..s });
    }

    #[test]
    fn translation_integrates() {
        let mut s = initial_state(0, 0).unwrap();
        s.cube.translation = [0.4, 0.4, CUBE_HALF];
        let x0 = s.ee.translation[0];
        let mut a = [0.0; ACTION_DIM];
        a[0] = 0.01;
        for _ in 0..10 {
            s = transition(&s, &a).unwrap();
        }
        assert!((s.ee.translation[0] - x0 - 0.10).abs() < 1e-12);
    }

    #[test]
    fn rotation_integrates_about_world_z() {
        let mut s = initial_state(0, 0).unwrap();
        let mut a = [0.0; ACTION_DIM];
        a[5] = 0.1;
        for _ in 0..3 {
            s = transition(&s, &a).unwrap();
        }
        assert!((s.yaw() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn non_finite_action_rejected() {
        let s = initial_state(0, 0).unwrap();
        let mut a = [0.0; ACTION_DIM];
        a[2] = f64::NAN;
        assert_eq!(transition(&s, &a), Err(WorldError::NonFiniteAction));
    }

    #[test]
    fn grasp_carries_and_release_drops() {
        let mut s = initial_state(0, 0).unwrap();
        s.ee.translation = s.cube.translation;
        let mut a = [0.0; ACTION_DIM];
        a[6] = 1.0;
        s = transition(&s, &a).unwrap();
        assert!(s.attached.is_some());
        let mut up = [0.0; ACTION_DIM];
        up[2] = 0.02;
        s = transition(&s, &up).unwrap();
        assert!((s.cube.translation[2] - CUBE_HALF - 0.02).abs() < 1e-12);
        a[6] = -1.0;
        s = transition(&s, &a).unwrap();
        assert!(s.attached.is_none());
        assert_eq!(s.cube.translation[2], CUBE_HALF);
    }

    #[test]
    fn palm_pushes_cube() {
        let mut s = initial_state(0, 0).unwrap();
        let c = s.cube.translation;
        // lowest tool height puts the palm sphere level with the cube's upper half
        s.ee.translation = [c[0] - 0.05, c[1], 0.01];
        let mut a = [0.0; ACTION_DIM];
        a[0] = 0.02;
        for _ in 0..3 {
            s = transition(&s, &a).unwrap();
        }
        assert!(s.cube.translation[0] > c[0]);
        let palm = s.scene().palm_center();
        assert!((s.cube.translation[0] - palm[0] - CUBE_HALF - scene::PALM_RADIUS).abs() < 1e-12);
    }

    #[test]
    fn wrist_extrinsic_follows_ee() {
        let (env, obs) = Env::reset(5, 0).unwrap();
        let expected = geo::wrist_pose(&env.state().ee, &scene::hand_to_eye());
        assert_eq!(obs.views[scene::WRIST_VIEW].camera.extrinsic, Some(expected));
        assert!(obs.views.iter().all(|v| v.depth.data.iter().all(|&d| d > 0.0)));
    }
}
