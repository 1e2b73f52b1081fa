//! Camera placement on a subdivided icosphere.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// Deepest subdivision accepted by [`subdivide_icosahedron`].
pub const MAX_SUBDIVISION: u32 = 6;
/// Focal shift coefficient for close shots.
pub const FOCAL_SHIFT: f64 = 0.2;
/// Camera band, as fractions of the sphere radius.
pub const BAND_LOW: f64 = -0.1;
pub const BAND_HIGH: f64 = 0.6;
/// Centered-mode focal jitter radius, as a fraction of the sphere radius.
pub const FOCAL_JITTER: f64 = 0.05;
pub const LIGHT_RANGE: (f64, f64) = (0.5, 1.5);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CameraMode {
    Centered,
    Shifted,
}

impl CameraMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CameraMode::Centered => "centered",
            CameraMode::Shifted => "shifted",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub position: Vec3,
    pub focal: Vec3,
    pub light: f64,
    pub mode: CameraMode,
}

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
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

/// Vertices of an icosahedron subdivided `level` times, projected onto the
/// sphere of `radius`. Shared edge midpoints are created once, so the count
/// is `10 * 4^level + 2`.
pub fn subdivide_icosahedron(level: u32, radius: f64) -> Result<Vec<Vec3>> {
    if level > MAX_SUBDIVISION {
        return Err(Error::domain(
            "subdivide_icosahedron",
            format!("level {level} exceeds {MAX_SUBDIVISION}"),
        ));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::domain(
            "subdivide_icosahedron",
            format!("radius {radius} must be positive"),
        ));
    }
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vec3> = vec![
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ]
    .into_iter()
    .map(normalize)
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];

    for _ in 0..level {
        let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Vec3>| -> usize {
            let key = (a.min(b), a.max(b));
            *midpoints.entry(key).or_insert_with(|| {
                verts.push(normalize(scale(add(verts[a], verts[b]), 0.5)));
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    Ok(verts.into_iter().map(|v| scale(v, radius)).collect())
}

/// Keeps the vertices whose height lies in `[-0.1 R, 0.6 R]`.
pub fn clip_band(vertices: &[Vec3], radius: f64) -> Result<Vec<Vec3>> {
    let (lo, hi) = (BAND_LOW * radius, BAND_HIGH * radius);
    let kept: Vec<Vec3> = vertices.iter().copied().filter(|v| v[2] >= lo && v[2] <= hi).collect();
    if kept.is_empty() {
        return Err(Error::domain(
            "clip_band",
            format!("band z in [{lo}, {hi}] excludes all {} cameras", vertices.len()),
        ));
    }
    Ok(kept)
}

/// `F + 0.2 (C - P_axis)`.
pub fn shift_focal(focal: Vec3, camera: Vec3, axis_point: Vec3) -> Vec3 {
    add(focal, scale(sub(camera, axis_point), FOCAL_SHIFT))
}

/// Where the front-view axis (+x) meets the camera sphere.
pub fn front_axis_point(radius: f64) -> Vec3 {
    [radius, 0.0, 0.0]
}

/// Angle between two pose directions, in `[0, pi]`.
pub fn pose_distance(a: Vec3, b: Vec3) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::domain("pose_distance", "zero or non-finite pose vector"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0).acos())
}

/// Uniform sample from the ball of `radius` around `center`.
pub fn jitter_in_ball<R: Rng + ?Sized>(rng: &mut R, center: Vec3, radius: f64) -> Vec3 {
    loop {
        let p: Vec3 = [
            rng.gen_range(-1.0..=1.0),
            rng.gen_range(-1.0..=1.0),
            rng.gen_range(-1.0..=1.0),
        ];
        if dot(p, p) <= 1.0 {
            return add(center, scale(p, radius));
        }
    }
}

/// Draws a rig from the camera shell: a vertex, a light level, and a focal
/// point jittered around the object center (then shifted for close shots).
pub fn sample_rig<R: Rng + ?Sized>(rng: &mut R, cameras: &[Vec3], radius: f64, mode: CameraMode) -> Result<CameraRig> {
    if cameras.is_empty() {
        return Err(Error::invalid("no camera positions to sample from"));
    }
    let position = cameras[rng.gen_range(0..cameras.len())];
    let light = rng.gen_range(LIGHT_RANGE.0..=LIGHT_RANGE.1);
    let centered = jitter_in_ball(rng, [0.0; 3], FOCAL_JITTER * radius);
    let focal = match mode {
        CameraMode::Centered => centered,
        CameraMode::Shifted => shift_focal(centered, position, front_axis_point(radius)),
    };
    Ok(CameraRig {
        position,
        focal,
        light,
        mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    #[test]
    fn vertex_counts() {
        for (level, want) in [(0, 12), (1, 42), (2, 162), (3, 642)] {
            let v = subdivide_icosahedron(level, 1.0).unwrap();
            assert_eq!(v.len(), want, "level {level}");
            assert_eq!(v.len(), 10 * 4usize.pow(level) + 2);
        }
        assert!(subdivide_icosahedron(7, 1.0).is_err());
    }

    #[test]
    fn level_one_midpoints_are_merged() {
        // 30 icosahedron edges -> 30 new vertices.
        let v = subdivide_icosahedron(1, 1.0).unwrap();
        let mut uniq: Vec<[i64; 3]> = v.iter().map(|p| p.map(|c| (c * 1e9).round() as i64)).collect();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 12 + 30);
    }

    #[test]
    fn vertices_on_sphere() {
        let r = 3.5;
        for v in subdivide_icosahedron(3, r).unwrap() {
            assert!((norm(v) - r).abs() < 1e-9 * r);
        }
    }

    #[test]
    fn band_examples() {
        let kept = clip_band(&[[1.0, 0.0, 0.0], [0.6, 0.0, 0.8], [0.0, 0.98, -0.2]], 1.0).unwrap();
        assert_eq!(kept, vec![[1.0, 0.0, 0.0]]);
        assert!(clip_band(&[[0.0, 0.0, 1.0]], 1.0).is_err());
    }

    #[test]
    fn shift_examples() {
        let f = [0.3, -0.2, 0.1];
        assert_eq!(shift_focal(f, [2.0, 1.0, 0.5], [2.0, 1.0, 0.5]), f);
        let s = shift_focal([0.0; 3], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]);
        assert!((s[0] + 0.2).abs() < 1e-15 && (s[1] - 0.2).abs() < 1e-15 && s[2] == 0.0);
    }

    #[test]
    fn pose_distance_examples() {
        let a = [0.3, 0.4, 0.5];
        assert!(pose_distance(a, a).unwrap().abs() < 1e-7);
        assert!((pose_distance(a, scale(a, -1.0)).unwrap() - std::f64::consts::PI).abs() < 1e-7);
        let d = pose_distance([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]).unwrap();
        assert!((d - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        assert!(pose_distance([0.0; 3], a).is_err());
    }

    #[test]
    fn centered_rigs_stay_in_jitter_ball() {
        let cams = clip_band(&subdivide_icosahedron(2, 3.0).unwrap(), 3.0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let rig = sample_rig(&mut rng, &cams, 3.0, CameraMode::Centered).unwrap();
            assert!(norm(rig.focal) <= FOCAL_JITTER * 3.0 + 1e-12);
            assert!((norm(rig.position) - 3.0).abs() < 3e-9);
            assert!((0.5..=1.5).contains(&rig.light));
        }
    }

    fn vec3() -> impl Strategy<Value = Vec3> {
        prop::array::uniform3(-5.0f64..5.0)
    }

    proptest! {
        #[test]
        fn clip_band_idempotent(level in 0u32..4, r in 0.5f64..5.0) {
            let v = subdivide_icosahedron(level, r).unwrap();
            let once = clip_band(&v, r).unwrap();
            let twice = clip_band(&once, r).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn shift_is_linear_in_camera(f in vec3(), c in vec3(), p in vec3()) {
            let c2 = sub(scale(c, 2.0), p);
            let lhs = sub(shift_focal(f, c2, p), f);
            let rhs = scale(sub(shift_focal(f, c, p), f), 2.0);
            for i in 0..3 {
                prop_assert!((lhs[i] - rhs[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn pose_distance_is_a_metric(a in vec3(), b in vec3(), c in vec3()) {
            prop_assume!(norm(a) > 1e-3 && norm(b) > 1e-3 && norm(c) > 1e-3);
            let ab = pose_distance(a, b).unwrap();
            let ba = pose_distance(b, a).unwrap();
            let bc = pose_distance(b, c).unwrap();
            let ac = pose_distance(a, c).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=std::f64::consts::PI).contains(&ab));
            prop_assert!(ac <= ab + bc + 1e-9);
        }
    }
}
