//! Scripted pick-and-place controller used as the demonstration source.

use super::env::{WorldState, ACTION_DIM};
use super::scene::{self, CUBE_HALF};
use crate::geometry::{self as geo, Vec3};

pub const MAX_STEP: f64 = 0.02;
pub const MAX_TURN: f64 = 0.1;
pub const HOVER_HEIGHT: f64 = 0.08;
pub const CARRY_HEIGHT: f64 = 0.10;
const ALIGN_TOL: f64 = 0.004;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Approach,
    Descend,
    Close,
    Lift,
    Transport,
    Lower,
    Release,
    Done,
}

fn horizontal(a: Vec3, b: Vec3) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Phase implied by the current state; the controller keeps no memory.
pub fn phase(state: &WorldState) -> Phase {
    let ee = state.ee.translation;
    let cube = state.cube.translation;
    if state.attached.is_some() {
        if horizontal(cube, state.goal) > ALIGN_TOL {
            return if cube[2] < CARRY_HEIGHT - 0.005 && horizontal(cube, state.goal) > 0.02 { Phase::Lift } else { Phase::Transport };
        }
        return if cube[2] > CUBE_HALF + 0.002 { Phase::Lower } else { Phase::Release };
    }
    if state.success() {
        return Phase::Done;
    }
    if state.gripper > 0.0 {
        return Phase::Release;
    }
    if horizontal(ee, cube) > ALIGN_TOL {
        return Phase::Approach;
    }
    if geo::norm(geo::sub(ee, cube)) > ALIGN_TOL {
        Phase::Descend
    } else {
        Phase::Close
    }
}

fn toward(from: Vec3, to: Vec3) -> Vec3 {
    let d = geo::sub(to, from);
    let n = geo::norm(d);
    if n <= MAX_STEP {
        d
    } else {
        geo::scale(d, MAX_STEP / n)
    }
}

fn wrap(a: f64) -> f64 {
    (a + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI
}

/// Relative 14-dim action: position delta, axis-angle delta, gripper delta,
/// zero right-arm slots.
pub fn expert_action(state: &WorldState) -> [f64; ACTION_DIM] {
    let ee = state.ee.translation;
    let cube = state.cube.translation;
    let mut a = [0.0; ACTION_DIM];
    let mut set_move = |d: Vec3| a[..3].copy_from_slice(&d);
    match phase(state) {
        Phase::Approach => {
            let hover = [cube[0], cube[1], cube[2] + HOVER_HEIGHT];
            if ee[2] < cube[2] + HOVER_HEIGHT - 0.02 && horizontal(ee, cube) > 0.01 {
                set_move(toward(ee, [ee[0], ee[1], hover[2]]));
            } else {
                set_move(toward(ee, hover));
            }
            a[5] = wrap(scene::task_yaw(state.task) - state.yaw()).clamp(-MAX_TURN, MAX_TURN);
        }
        Phase::Descend => set_move(toward(ee, cube)),
        Phase::Close => a[6] = 1.0 - state.gripper,
        Phase::Lift => set_move(toward(ee, [ee[0], ee[1], ee[2] + CARRY_HEIGHT - cube[2]])),
        Phase::Transport => {
            let offset = state.attached.unwrap_or([0.0; 3]);
            let target = geo::sub([state.goal[0], state.goal[1], cube[2].max(CUBE_HALF)], offset);
            set_move(toward(ee, target));
        }
        Phase::Lower => set_move(toward(ee, [ee[0], ee[1], ee[2] - (cube[2] - CUBE_HALF)])),
        Phase::Release => a[6] = -state.gripper,
        Phase::Done => {}
    }
    a
}

#[cfg(test)]
mod tests {
    use super::super::env::{initial_state, transition, EPISODE_CAP};
    use super::*;

    fn rollout(seed: u64, task: usize) -> (bool, usize, Vec<[f64; ACTION_DIM]>) {
        let mut s = initial_state(seed, task).unwrap();
        let mut actions = Vec::new();
        while s.step < EPISODE_CAP {
            let a = expert_action(&s);
            actions.push(a);
            s = transition(&s, &a).unwrap();
            if s.success() {
                return (true, s.step, actions);
            }
        }
        (false, s.step, actions)
    }

    #[test]
    fn first_action_heads_for_hover_waypoint() {
        let mut s = initial_state(1, 0).unwrap();
        s.ee.translation = [s.cube.translation[0] + 0.1, s.cube.translation[1], 0.4];
        let a = expert_action(&s);
        let hover = geo::add(s.cube.translation, [0.0, 0.0, HOVER_HEIGHT]);
        let want = geo::sub(hover, s.ee.translation);
        let cos = geo::dot([a[0], a[1], a[2]], want) / (geo::norm([a[0], a[1], a[2]]) * geo::norm(want));
        assert!(cos > 0.999);
        assert!((geo::norm([a[0], a[1], a[2]]) - MAX_STEP).abs() < 1e-12);
    }

    #[test]
    fn terminal_phase_is_idle_and_open() {
        let mut s = initial_state(1, 0).unwrap();
        s.cube.translation = s.goal;
        assert_eq!(phase(&s), Phase::Done);
        assert_eq!(expert_action(&s), [0.0; ACTION_DIM]);
        assert_eq!(s.gripper, 0.0);
    }

    #[test]
    fn seed_seven_succeeds() {
        assert!(rollout(7, 0).0);
        assert!(rollout(7, 1).0);
    }

    #[test]
    fn hundred_episodes_all_succeed_with_bounded_deltas() {
        for seed in 0..100 {
            let (ok, steps, actions) = rollout(seed, (seed % 2) as usize);
            assert!(ok, "seed {seed} failed after {steps} steps");
            for a in &actions {
                assert!(geo::norm([a[0], a[1], a[2]]) <= MAX_STEP + 1e-12);
                assert!(geo::norm([a[3], a[4], a[5]]) <= MAX_TURN + 1e-12);
                assert!(a[7..].iter().all(|&x| x == 0.0));
            }
        }
    }
}
