//! Analytic scene description and per-pixel ray casting.

use std::f64::consts::PI;

use crate::geometry::{self as geo, CameraKind, CameraModel, Image, Intrinsics, Pose, Quat, Vec3};

pub const IMAGE_SIZE: usize = 32;
pub const FAR_CLIP: f64 = 5.0;
pub const CUBE_HALF: f64 = 0.02;
pub const GOAL_RADIUS: f64 = 0.03;
pub const GOAL_HEIGHT: f64 = 0.0005;
pub const PALM_RADIUS: f64 = 0.012;
pub const PALM_OFFSET: f64 = 0.035;
pub const FINGER_RADIUS: f64 = 0.007;
/// Room enclosing the table: `[x_min, x_max, y_min, y_max, z_min, z_max]`.
pub const ROOM: [f64; 6] = [-1.0, 1.0, -1.0, 1.0, 0.0, 1.5];
/// Cube spawn region `[x_min, x_max, y_min, y_max]`.
pub const WORKSPACE: [f64; 4] = [-0.20, 0.0, -0.15, 0.15];
pub const OVERHEAD_HEIGHT: f64 = 0.9;
pub const NUM_TASKS: usize = 2;
pub const VIEW_NAMES: [&str; 3] = ["static-front", "static-overhead", "wrist"];
pub const WRIST_VIEW: usize = 2;

/// Goal position (cube-center height) per task.
pub fn task_goal(task: usize) -> Option<Vec3> {
    match task {
        0 => Some([0.15, 0.10, CUBE_HALF]),
        1 => Some([0.15, -0.10, CUBE_HALF]),
        _ => None,
    }
}

pub fn task_yaw(task: usize) -> f64 {
    if task == 0 {
        0.3
    } else {
        -0.3
    }
}

fn cube_albedo(task: usize) -> Vec3 {
    if task == 0 {
        [0.85, 0.15, 0.10]
    } else {
        [0.10, 0.25, 0.85]
    }
}

/// End-effector orientation with the tool axis pointing down and the given yaw.
pub fn ee_rotation(yaw: f64) -> Quat {
    Quat::from_axis_angle([0.0, 0.0, yaw]).mul(&Quat::from_axis_angle([PI, 0.0, 0.0]))
}

pub fn ee_start() -> Pose {
    Pose { rotation: ee_rotation(0.0), translation: [-0.10, 0.0, 0.20] }
}

/// Fixed hand-to-eye calibration of the wrist camera.
pub fn hand_to_eye() -> Pose {
    Pose::new(Quat::from_axis_angle([0.5, 0.0, 0.0]), [0.0, 0.05, -0.06])
}

pub fn camera_models() -> [CameraModel; 3] {
    let k = |f: f64| Intrinsics { fx: f, fy: f, cx: 16.0, cy: 16.0 };
    let base = |f, kind| CameraModel { intrinsics: k(f), width: IMAGE_SIZE, height: IMAGE_SIZE, kind, extrinsic: None };
    [
        base(36.0, CameraKind::Static).with_extrinsic(Pose::look_at([0.55, 0.0, 0.45], [-0.05, 0.0, 0.0], [0.0, 0.0, -1.0])),
        base(40.0, CameraKind::Static).with_extrinsic(Pose::look_at(
            [-0.02, 0.0, OVERHEAD_HEIGHT],
            [-0.02, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
        )),
        base(16.0, CameraKind::Wrist),
    ]
}

/// Everything the renderer needs to draw one frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneView {
    pub cube: Vec3,
    pub goal: Vec3,
    pub ee: Pose,
    pub gripper: f64,
    pub task: usize,
}

impl SceneView {
    fn finger_centers(&self) -> [Vec3; 2] {
        let off = 0.035 - 0.008 * self.gripper;
        [
            self.ee.transform_point([off, 0.0, -0.005]),
            self.ee.transform_point([-off, 0.0, -0.005]),
        ]
    }

    pub fn palm_center(&self) -> Vec3 {
        self.ee.transform_point([0.0, 0.0, -PALM_OFFSET])
    }
}

struct Hit {
    s: f64,
    normal: Vec3,
    albedo: Vec3,
}

fn consider(best: &mut Option<Hit>, s: f64, normal: Vec3, albedo: Vec3) {
    if s > 1e-9 && best.as_ref().is_none_or(|b| s < b.s) {
        *best = Some(Hit { s, normal, albedo });
    }
}

/// Smallest positive ray parameter hitting a sphere.
pub fn ray_sphere(o: Vec3, d: Vec3, c: Vec3, r: f64) -> Option<f64> {
    let oc = geo::sub(o, c);
    let a = geo::dot(d, d);
    let b = geo::dot(oc, d);
    let cc = geo::dot(oc, oc) - r * r;
    let disc = b * b - a * cc;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let s0 = (-b - sq) / a;
    let s1 = (-b + sq) / a;
    [s0, s1].into_iter().find(|&s| s > 1e-9)
}

/// Slab test against an axis-aligned box; returns entry parameter and face normal.
pub fn ray_box(o: Vec3, d: Vec3, lo: Vec3, hi: Vec3) -> Option<(f64, Vec3)> {
    let (mut tmin, mut tmax) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut normal = [0.0; 3];
    for a in 0..3 {
        if d[a].abs() < 1e-300 {
            if o[a] < lo[a] || o[a] > hi[a] {
                return None;
            }
            continue;
        }
        let (mut t0, mut t1) = ((lo[a] - o[a]) / d[a], (hi[a] - o[a]) / d[a]);
        let mut n = [0.0; 3];
        n[a] = -d[a].signum();
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > tmin {
            tmin = t0;
            normal = n;
        }
        tmax = tmax.min(t1);
    }
    (tmin <= tmax && tmin > 1e-9).then_some((tmin, normal))
}

fn trace(view: &SceneView, o: Vec3, d: Vec3) -> Hit {
    let mut best: Option<Hit> = None;
    // room: floor, ceiling and four walls, seen from inside
    let [x0, x1, y0, y1, z0, z1] = ROOM;
    let planes: [(usize, f64, f64); 6] = [(2, z0, 1.0), (2, z1, -1.0), (0, x0, 1.0), (0, x1, -1.0), (1, y0, 1.0), (1, y1, -1.0)];
    for (axis, value, facing) in planes {
        if d[axis] * facing >= 0.0 {
            continue;
        }
        let s = (value - o[axis]) / d[axis];
        let mut n = [0.0; 3];
        n[axis] = facing;
        let albedo = if axis == 2 && facing > 0.0 {
            let p = geo::add(o, geo::scale(d, s));
            if p[0].abs() < 0.5 && p[1].abs() < 0.5 {
                [0.76, 0.70, 0.60]
            } else {
                [0.45, 0.42, 0.40]
            }
        } else {
            [0.55, 0.60, 0.65]
        };
        consider(&mut best, s, n, albedo);
    }
    // goal disc lying just above the table
    if d[2] < 0.0 {
        let s = (GOAL_HEIGHT - o[2]) / d[2];
        let p = geo::add(o, geo::scale(d, s));
        if (p[0] - view.goal[0]).hypot(p[1] - view.goal[1]) <= GOAL_RADIUS {
            consider(&mut best, s, [0.0, 0.0, 1.0], [0.20, 0.80, 0.30]);
        }
    }
    let c = view.cube;
    let h = [CUBE_HALF; 3];
    if let Some((s, n)) = ray_box(o, d, geo::sub(c, h), geo::add(c, h)) {
        consider(&mut best, s, n, cube_albedo(view.task));
    }
    let palm = view.palm_center();
    if let Some(s) = ray_sphere(o, d, palm, PALM_RADIUS) {
        let p = geo::add(o, geo::scale(d, s));
        consider(&mut best, s, geo::scale(geo::sub(p, palm), 1.0 / PALM_RADIUS), [0.35, 0.35, 0.38]);
    }
    let finger_albedo = [0.12 + 0.5 * view.gripper, 0.12, 0.15];
    for f in view.finger_centers() {
        if let Some(s) = ray_sphere(o, d, f, FINGER_RADIUS) {
            let p = geo::add(o, geo::scale(d, s));
            consider(&mut best, s, geo::scale(geo::sub(p, f), 1.0 / FINGER_RADIUS), finger_albedo);
        }
    }
    best.expect("room encloses every ray")
}

const LIGHT: Vec3 = [0.267_261_241_912_424_4, 0.178_174_161_274_949_6, 0.890_870_806_374_748];

/// Ray casts every pixel. Depth is the distance along the camera z-axis to
/// the first surface; color is Lambert-shaded albedo quantized to 8 bits.
pub fn render(view: &SceneView, camera: &CameraModel) -> (Image, Image) {
    let pose = camera.extrinsic.expect("render needs a posed camera");
    let r = pose.rotation.to_matrix();
    let (w, h) = (camera.width, camera.height);
    let mut rgb = Image::new(w, h, 3);
    let mut depth = Image::new(w, h, 1);
    for v in 0..h {
        for u in 0..w {
            let dir = geo::mat_vec(&r, camera.ray(u as f64, v as f64));
            let hit = trace(view, pose.translation, dir);
            depth.set(u, v, 0, hit.s.min(FAR_CLIP));
            let shade = 0.35 + 0.65 * geo::dot(hit.normal, LIGHT).max(0.0);
            for ch in 0..3 {
                let value = (hit.albedo[ch] * shade).clamp(0.0, 1.0);
                rgb.set(u, v, ch, (value * 255.0).round() / 255.0);
            }
        }
    }
    (rgb, depth)
}
