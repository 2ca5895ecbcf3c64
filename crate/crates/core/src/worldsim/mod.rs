//! Deterministic tabletop world: analytic ray-cast RGB-D rendering, kinematic
//! cube interaction, a scripted expert and the on-disk episode format.

mod dataset;
mod env;
mod expert;
mod scene;

pub use env::{
    initial_state, observe, transition, Env, Observation, StepOutcome, ViewObs, WorldState, ACTION_ACTIVE, ACTION_DIM,
    CONTROL_PER_FRAME, EPISODE_CAP, GRASP_RADIUS, STATE_ACTIVE, STATE_DIM, SUCCESS_RADIUS,
};
pub use expert::{expert_action, phase, Phase, MAX_STEP, MAX_TURN};
pub use scene::{
    camera_models, ee_rotation, ee_start, hand_to_eye, ray_box, ray_sphere, render, task_goal, SceneView, CUBE_HALF, FAR_CLIP,
    IMAGE_SIZE, NUM_TASKS, OVERHEAD_HEIGHT, VIEW_NAMES, WORKSPACE, WRIST_VIEW,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("unknown task id {0}")]
    UnknownTask(usize),
    #[error("action contains non-finite values")]
    NonFiniteAction,
}

pub use dataset::{
    child_seed, decode_episode, encode_episode, episode_file_name, generate_dataset, load_dataset, record_episode, DatasetError,
    EpisodeRecord, FrameRecord, Manifest, FORMAT_VERSION, MAGIC, MANIFEST_FILE,
};
