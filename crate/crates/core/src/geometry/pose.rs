use serde::{Deserialize, Serialize};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

/// Unit quaternion `(w, x, y, z)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quat(pub [f64; 4]);

impl Quat {
    pub const IDENTITY: Quat = Quat([1.0, 0.0, 0.0, 0.0]);

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Returns `None` for a (near-)zero quaternion.
    pub fn normalized(&self) -> Option<Quat> {
        let n = self.norm();
        if !(n > 1e-12) || !n.is_finite() {
            return None;
        }
        Some(Quat(self.0.map(|x| x / n)))
    }

    pub fn mul(&self, o: &Quat) -> Quat {
        let [w1, x1, y1, z1] = self.0;
        let [w2, x2, y2, z2] = o.0;
        Quat([
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ])
    }

    pub fn conjugate(&self) -> Quat {
        let [w, x, y, z] = self.0;
        Quat([w, -x, -y, -z])
    }

    /// Rotation by `|v|` radians about `v / |v|`.
    pub fn from_axis_angle(v: Vec3) -> Quat {
        let angle = norm(v);
        if angle < 1e-15 {
            return Quat::IDENTITY;
        }
        let (s, c) = (0.5 * angle).sin_cos();
        let k = s / angle;
        Quat([c, v[0] * k, v[1] * k, v[2] * k])
    }

    pub fn to_axis_angle(&self) -> Vec3 {
        let q = if self.0[0] < 0.0 { Quat(self.0.map(|x| -x)) } else { *self };
        let s = (q.0[1] * q.0[1] + q.0[2] * q.0[2] + q.0[3] * q.0[3]).sqrt();
        if s < 1e-15 {
            return [0.0; 3];
        }
        let angle = 2.0 * s.atan2(q.0[0]);
        [q.0[1] / s * angle, q.0[2] / s * angle, q.0[3] / s * angle]
    }

    pub fn to_matrix(&self) -> Mat3 {
        let [w, x, y, z] = self.0;
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    }

    pub fn rotate(&self, v: Vec3) -> Vec3 {
        mat_vec(&self.to_matrix(), v)
    }

    /// `1 - |<a, b>|`: zero when both represent the same rotation.
    pub fn deviation(&self, o: &Quat) -> f64 {
        let d: f64 = self.0.iter().zip(o.0.iter()).map(|(a, b)| a * b).sum();
        1.0 - d.abs()
    }
}

/// Rigid transform: `p_parent = R * p_child + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Quat,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Pose {
    pub const IDENTITY: Pose = Pose { rotation: Quat::IDENTITY, translation: [0.0; 3] };

    pub fn new(rotation: Quat, translation: Vec3) -> Pose {
        Pose { rotation: rotation.normalized().unwrap_or(Quat::IDENTITY), translation }
    }

    pub fn from_translation(t: Vec3) -> Pose {
        Pose { rotation: Quat::IDENTITY, translation: t }
    }

    /// Camera-style pose placed at `eye` with its +z axis toward `target`
    /// and +y as close to `down` as possible.
    pub fn look_at(eye: Vec3, target: Vec3, down: Vec3) -> Pose {
        let z = scale(sub(target, eye), 1.0 / norm(sub(target, eye)));
        let x0 = cross(down, z);
        let x = scale(x0, 1.0 / norm(x0));
        let y = cross(z, x);
        let m = [[x[0], y[0], z[0]], [x[1], y[1], z[1]], [x[2], y[2], z[2]]];
        Pose { rotation: quat_from_matrix(&m), translation: eye }
    }

    /// Matrix product of the homogeneous transforms, `self * other`.
    pub fn compose(&self, other: &Pose) -> Pose {
        let rotation = self.rotation.mul(&other.rotation).normalized().unwrap_or(Quat::IDENTITY);
        let translation = add(self.rotation.rotate(other.translation), self.translation);
        Pose { rotation, translation }
    }

    pub fn inverse(&self) -> Pose {
        let r = self.rotation.conjugate();
        Pose { rotation: r, translation: scale(r.rotate(self.translation), -1.0) }
    }

    pub fn transform_point(&self, p: Vec3) -> Vec3 {
        add(self.rotation.rotate(p), self.translation)
    }

    pub fn to_matrix4(&self) -> [[f64; 4]; 4] {
        let r = self.rotation.to_matrix();
        let t = self.translation;
        [
            [r[0][0], r[0][1], r[0][2], t[0]],
            [r[1][0], r[1][1], r[1][2], t[1]],
            [r[2][0], r[2][1], r[2][2], t[2]],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }
}

/// Shepperd's method.
pub fn quat_from_matrix(m: &Mat3) -> Quat {
    let tr = m[0][0] + m[1][1] + m[2][2];
    let q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        [0.25 * s, (m[2][1] - m[1][2]) / s, (m[0][2] - m[2][0]) / s, (m[1][0] - m[0][1]) / s]
    } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
        let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
        [(m[2][1] - m[1][2]) / s, 0.25 * s, (m[0][1] + m[1][0]) / s, (m[0][2] + m[2][0]) / s]
    } else if m[1][1] > m[2][2] {
        let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
        [(m[0][2] - m[2][0]) / s, (m[0][1] + m[1][0]) / s, 0.25 * s, (m[1][2] + m[2][1]) / s]
    } else {
        let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
        [(m[1][0] - m[0][1]) / s, (m[0][2] + m[2][0]) / s, (m[1][2] + m[2][1]) / s, 0.25 * s]
    };
    Quat(q).normalized().unwrap_or(Quat::IDENTITY)
}

/// Wrist-camera pose from the end-effector pose and the fixed hand-to-eye
/// calibration: `T_wrist = T_ee * T_h2e`.
pub fn wrist_pose(t_ee: &Pose, t_h2e: &Pose) -> Pose {
    t_ee.compose(t_h2e)
}
