//! Expert episode recording and the little-endian `XWAM` episode file.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::env::{initial_state, observe, transition, WorldState, ACTION_DIM, CONTROL_PER_FRAME, EPISODE_CAP, STATE_DIM};
use super::expert::expert_action;
use super::scene::{self, NUM_TASKS};
use crate::codec::NormalizerStats;
use crate::geometry::{CameraKind, CameraModel, Image, Intrinsics, Pose, Quat};

pub const MAGIC: &[u8; 4] = b"XWAM";
pub const FORMAT_VERSION: u16 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("episode {episode}: corrupt record at byte offset {offset}: {reason}")]
    Corrupt { episode: usize, offset: usize, reason: String },
    #[error("manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error(transparent)]
    World(#[from] super::WorldError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

/// One recorded view set: RGB bytes (HWC) and depth in meters per view.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub rgb: Vec<Vec<u8>>,
    pub depth: Vec<Vec<f32>>,
    pub wrist_extrinsic: Pose,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub cameras: Vec<CameraModel>,
    pub hand_to_eye: Pose,
    pub frames: Vec<FrameRecord>,
    pub states: Vec<[f32; STATE_DIM]>,
    /// Control-rate actions, `CONTROL_PER_FRAME` per frame interval.
    pub actions: Vec<[f32; ACTION_DIM]>,
    pub success: bool,
    pub task: usize,
    pub seed: u64,
}

impl EpisodeRecord {
    /// Camera for `view` at `frame`, with the per-frame wrist pose filled in.
    pub fn camera(&self, frame: usize, view: usize) -> CameraModel {
        let mut cam = self.cameras[view];
        if cam.kind == CameraKind::Wrist {
            cam.extrinsic = Some(self.frames[frame].wrist_extrinsic);
        }
        cam
    }

    pub fn rgb_image(&self, frame: usize, view: usize) -> Image {
        let cam = &self.cameras[view];
        let data = self.frames[frame].rgb[view].iter().map(|&b| b as f64 / 255.0).collect();
        Image::from_data(cam.width, cam.height, 3, data).expect("recorded frame layout")
    }

    pub fn depth_image(&self, frame: usize, view: usize) -> Image {
        let cam = &self.cameras[view];
        let data = self.frames[frame].depth[view].iter().map(|&d| d as f64).collect();
        Image::from_data(cam.width, cam.height, 1, data).expect("recorded frame layout")
    }
}

fn frame_from_state(state: &WorldState) -> FrameRecord {
    let obs = observe(state);
    FrameRecord {
        rgb: obs.views.iter().map(|v| v.rgb.data.iter().map(|&c| (c * 255.0).round() as u8).collect()).collect(),
        depth: obs.views.iter().map(|v| v.depth.data.iter().map(|&d| d as f32).collect()).collect(),
        wrist_extrinsic: obs.views[scene::WRIST_VIEW].camera.extrinsic.expect("wrist view is posed"),
    }
}

fn to_f32<const N: usize>(v: &[f64; N]) -> [f32; N] {
    v.map(|x| x as f32)
}

/// Rolls out the expert and records every `CONTROL_PER_FRAME`-th state.
/// After success the episode is padded with zero (hold) actions up to the
/// next frame boundary. Also returns the world state behind every frame.
pub fn record_episode(seed: u64, task: usize) -> Result<(EpisodeRecord, Vec<WorldState>), DatasetError> {
    let mut state = initial_state(seed, task)?;
    let mut frames = vec![frame_from_state(&state)];
    let mut states = vec![to_f32(&state.state_vector())];
    let mut world = vec![state];
    let mut actions = Vec::new();
    let mut success = false;
    while state.step < EPISODE_CAP && !(success && state.step % CONTROL_PER_FRAME == 0) {
        let a = if success { [0.0; ACTION_DIM] } else { expert_action(&state) };
        state = transition(&state, &a)?;
        success |= state.success();
        actions.push(to_f32(&a));
        if state.step % CONTROL_PER_FRAME == 0 {
            frames.push(frame_from_state(&state));
            states.push(to_f32(&state.state_vector()));
            world.push(state);
        }
    }
    let record = EpisodeRecord {
        cameras: scene::camera_models().to_vec(),
        hand_to_eye: scene::hand_to_eye(),
        frames,
        states,
        actions,
        success,
        task,
        seed,
    };
    Ok((record, world))
}

/// Counter-based child seed (splitmix64 finalizer over `master + index`).
pub fn child_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u16,
    pub master_seed: u64,
    pub episodes: usize,
    pub files: Vec<String>,
    pub seeds: Vec<u64>,
    pub tasks: Vec<usize>,
    pub success: Vec<bool>,
    pub cameras: Vec<CameraModel>,
    pub hand_to_eye: Pose,
    pub control_per_frame: usize,
    /// Filled once statistics are fitted over the episodes.
    pub normalizer: Option<NormalizerStats>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self, DatasetError> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| DatasetError::Manifest { path: path.clone(), reason: e.to_string() })?;
        if m.format_version != FORMAT_VERSION {
            return Err(DatasetError::Manifest { path, reason: format!("unsupported format version {}", m.format_version) });
        }
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<(), DatasetError> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(io_err(&path))
    }
}

pub fn episode_file_name(index: usize) -> String {
    format!("episode_{index:05}.xwam")
}

/// Generates `n` expert episodes in parallel and writes them with a manifest.
pub fn generate_dataset(n: usize, seed: u64, out: &Path) -> Result<Manifest, DatasetError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let results: Vec<Result<(String, u64, usize, bool), DatasetError>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let child = child_seed(seed, i as u64);
            let task = i % NUM_TASKS;
            let (record, _) = record_episode(child, task)?;
            let name = episode_file_name(i);
            let path = out.join(&name);
            fs::write(&path, encode_episode(&record)).map_err(io_err(&path))?;
            Ok((name, child, task, record.success))
        })
        .collect();
    let mut manifest = Manifest {
        format_version: FORMAT_VERSION,
        master_seed: seed,
        episodes: n,
        files: Vec::with_capacity(n),
        seeds: Vec::with_capacity(n),
        tasks: Vec::with_capacity(n),
        success: Vec::with_capacity(n),
        cameras: scene::camera_models().to_vec(),
        hand_to_eye: scene::hand_to_eye(),
        control_per_frame: CONTROL_PER_FRAME,
        normalizer: None,
    };
    for r in results {
        let (name, child, task, ok) = r?;
        manifest.files.push(name);
        manifest.seeds.push(child);
        manifest.tasks.push(task);
        manifest.success.push(ok);
    }
    manifest.save(out)?;
    Ok(manifest)
}

/// Loads every episode listed in the manifest.
pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<EpisodeRecord>), DatasetError> {
    let manifest = Manifest::load(dir)?;
    let episodes = manifest
        .files
        .par_iter()
        .enumerate()
        .map(|(i, name)| {
            let path = dir.join(name);
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            decode_episode(&bytes, i)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((manifest, episodes))
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn pose(&mut self, p: &Pose) {
        for &x in p.rotation.0.iter().chain(&p.translation) {
            self.f32(x as f32);
        }
    }
    fn section(&mut self, body: Writer) {
        self.u64(body.0.len() as u64);
        self.0.extend_from_slice(&body.0);
    }
}

pub fn encode_episode(ep: &EpisodeRecord) -> Vec<u8> {
    let mut w = Writer(MAGIC.to_vec());
    w.u16(FORMAT_VERSION);

    let mut cams = Writer(Vec::new());
    cams.u32(ep.cameras.len());
    for c in &ep.cameras {
        cams.u8(match c.kind {
            CameraKind::Static => 0,
            CameraKind::Wrist => 1,
        });
        cams.u32(c.width);
        cams.u32(c.height);
        for v in [c.intrinsics.fx, c.intrinsics.fy, c.intrinsics.cx, c.intrinsics.cy] {
            cams.f32(v as f32);
        }
        cams.pose(&c.extrinsic.unwrap_or(Pose::IDENTITY));
    }
    w.section(cams);

    let mut h2e = Writer(Vec::new());
    h2e.pose(&ep.hand_to_eye);
    w.section(h2e);

    let mut frames = Writer(Vec::new());
    frames.u32(ep.frames.len());
    for f in &ep.frames {
        for (rgb, depth) in f.rgb.iter().zip(&f.depth) {
            frames.0.extend_from_slice(rgb);
            depth.iter().for_each(|&d| frames.f32(d));
        }
        frames.pose(&f.wrist_extrinsic);
    }
    w.section(frames);

    let mut states = Writer(Vec::new());
    states.u32(ep.states.len());
    ep.states.iter().flatten().for_each(|&x| states.f32(x));
    w.section(states);

    let mut actions = Writer(Vec::new());
    actions.u32(ep.actions.len());
    ep.actions.iter().flatten().for_each(|&x| actions.f32(x));
    w.section(actions);

    let mut tail = Writer(Vec::new());
    tail.u8(ep.success as u8);
    tail.u16(ep.task as u16);
    tail.u64(ep.seed);
    w.section(tail);
    w.0
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    episode: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, reason: impl Into<String>) -> Result<T, DatasetError> {
        Err(DatasetError::Corrupt { episode: self.episode, offset: self.pos, reason: reason.into() })
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], DatasetError> {
        if self.bytes.len() - self.pos < n {
            return self.fail(format!("needed {n} bytes, {} remain", self.bytes.len() - self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, DatasetError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, DatasetError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<usize, DatasetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64, DatasetError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32, DatasetError> {
        let v = f32::from_le_bytes(self.take(4)?.try_into().unwrap());
        if !v.is_finite() {
            self.pos -= 4;
            return self.fail("non-finite float");
        }
        Ok(v)
    }
    fn pose(&mut self) -> Result<Pose, DatasetError> {
        let mut v = [0.0f64; 7];
        for x in &mut v {
            *x = self.f32()? as f64;
        }
        let q = Quat([v[0], v[1], v[2], v[3]]);
        if (q.norm() - 1.0).abs() > 1e-3 {
            return self.fail("pose quaternion is not unit length");
        }
        Ok(Pose { rotation: q, translation: [v[4], v[5], v[6]] })
    }
    /// Reads a section length and checks the body ends exactly there.
    fn section<T>(&mut self, body: impl FnOnce(&mut Self) -> Result<T, DatasetError>) -> Result<T, DatasetError> {
        let len = self.u64()? as usize;
        let start = self.pos;
        if self.bytes.len() - start < len {
            self.pos -= 8;
            return self.fail(format!("section length {len} exceeds remaining {} bytes", self.bytes.len() - start));
        }
        let value = body(self)?;
        if self.pos != start + len {
            return self.fail(format!("section declared {len} bytes but body used {}", self.pos - start));
        }
        Ok(value)
    }
}

/// Parses one episode file; errors name `episode` and the byte offset.
pub fn decode_episode(bytes: &[u8], episode: usize) -> Result<EpisodeRecord, DatasetError> {
    let mut r = Reader { bytes, pos: 0, episode };
    if r.take(4)? != MAGIC {
        r.pos = 0;
        return r.fail("bad magic");
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        r.pos -= 2;
        return r.fail(format!("unsupported version {version}"));
    }
    let cameras = r.section(|r| {
        let n = r.u32()?;
        (0..n)
            .map(|_| {
                let kind = match r.u8()? {
                    0 => CameraKind::Static,
                    1 => CameraKind::Wrist,
                    k => return r.fail(format!("unknown camera kind {k}")),
                };
                let (width, height) = (r.u32()?, r.u32()?);
                let intrinsics = Intrinsics { fx: r.f32()? as f64, fy: r.f32()? as f64, cx: r.f32()? as f64, cy: r.f32()? as f64 };
                let pose = r.pose()?;
                let cam = CameraModel {
                    intrinsics,
                    width,
                    height,
                    kind,
                    extrinsic: (kind == CameraKind::Static).then_some(pose),
                };
                if cam.validate().is_err() {
                    return r.fail("invalid camera model");
                }
                Ok(cam)
            })
            .collect::<Result<Vec<_>, _>>()
    })?;
    let hand_to_eye = r.section(|r| r.pose())?;
    let frames = r.section(|r| {
        let n = r.u32()?;
        (0..n)
            .map(|_| {
                let mut rgb = Vec::with_capacity(cameras.len());
                let mut depth = Vec::with_capacity(cameras.len());
                for c in &cameras {
                    let px = c.width * c.height;
                    rgb.push(r.take(px * 3)?.to_vec());
                    depth.push((0..px).map(|_| r.f32()).collect::<Result<Vec<_>, _>>()?);
                }
                Ok(FrameRecord { rgb, depth, wrist_extrinsic: r.pose()? })
            })
            .collect::<Result<Vec<_>, _>>()
    })?;
    let states = r.section(|r| {
        let n = r.u32()?;
        (0..n)
            .map(|_| {
                let mut s = [0.0f32; STATE_DIM];
                for x in &mut s {
                    *x = r.f32()?;
                }
                Ok(s)
            })
            .collect::<Result<Vec<_>, _>>()
    })?;
    let actions = r.section(|r| {
        let n = r.u32()?;
        (0..n)
            .map(|_| {
                let mut a = [0.0f32; ACTION_DIM];
                for x in &mut a {
                    *x = r.f32()?;
                }
                Ok(a)
            })
            .collect::<Result<Vec<_>, _>>()
    })?;
    let (success, task, seed) = r.section(|r| Ok((r.u8()? != 0, r.u16()? as usize, r.u64()?)))?;
    if r.pos != bytes.len() {
        return r.fail("trailing bytes after final section");
    }
    if states.len() != frames.len() || frames.is_empty() || actions.len() != CONTROL_PER_FRAME * (frames.len() - 1) {
        return r.fail(format!(
            "inconsistent counts: {} frames, {} states, {} actions",
            frames.len(),
            states.len(),
            actions.len()
        ));
    }
    Ok(EpisodeRecord { cameras, hand_to_eye, frames, states, actions, success, task, seed })
}
