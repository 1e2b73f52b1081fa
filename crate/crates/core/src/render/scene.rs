use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{norm, Vec3};
use crate::error::{Error, Result};

/// Procedural stand-ins for mesh categories; one kind per category.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolidKind {
    Sphere,
    Cube,
    Cylinder,
    Cone,
    Torus,
    Capsule,
    Octahedron,
    HexPrism,
    TriPrism,
    Pyramid,
    Ellipsoid,
    Cross,
}

impl SolidKind {
    pub const ALL: [SolidKind; 12] = [
        SolidKind::Sphere,
        SolidKind::Cube,
        SolidKind::Cylinder,
        SolidKind::Cone,
        SolidKind::Torus,
        SolidKind::Capsule,
        SolidKind::Octahedron,
        SolidKind::HexPrism,
        SolidKind::TriPrism,
        SolidKind::Pyramid,
        SolidKind::Ellipsoid,
        SolidKind::Cross,
    ];
}

/// Deformation factors are drawn from this range and scale the nominal
/// solid extents; the largest deformed solid stays inside the unit ball.
pub const DEFORM_RANGE: (f64, f64) = (0.8, 1.15);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub kind: SolidKind,
    pub deform: [f64; 3],
    pub texture_seed: u64,
    pub background_seed: u64,
}

/// Deterministic scene for `(category, rng_seed)`.
pub fn make_scene(category: usize, rng_seed: u64) -> Result<SceneSpec> {
    let kind = *SolidKind::ALL.get(category).ok_or_else(|| {
        Error::domain(
            "make_scene",
            format!("category {category} out of range [0, {})", SolidKind::ALL.len()),
        )
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed ^ ((category as u64) << 56));
    let deform = [
        rng.gen_range(DEFORM_RANGE.0..=DEFORM_RANGE.1),
        rng.gen_range(DEFORM_RANGE.0..=DEFORM_RANGE.1),
        rng.gen_range(DEFORM_RANGE.0..=DEFORM_RANGE.1),
    ];
    Ok(SceneSpec {
        kind,
        deform,
        texture_seed: rng.gen(),
        background_seed: rng.gen(),
    })
}

fn len2(x: f64, y: f64) -> f64 {
    (x * x + y * y).sqrt()
}

fn sd_box(p: Vec3, b: Vec3) -> f64 {
    let q = [p[0].abs() - b[0], p[1].abs() - b[1], p[2].abs() - b[2]];
    let outside = norm([q[0].max(0.0), q[1].max(0.0), q[2].max(0.0)]);
    outside + q[0].max(q[1]).max(q[2]).min(0.0)
}

/// Signed (or conservative bound) distance from `p` to the solid.
pub fn signed_distance(scene: &SceneSpec, p: Vec3) -> f64 {
    let [d0, d1, d2] = scene.deform;
    let [x, y, z] = p;
    match scene.kind {
        SolidKind::Sphere => norm(p) - 0.7 * d0,
        SolidKind::Cube => sd_box(p, [0.5 * d0, 0.5 * d1, 0.5 * d2]),
        SolidKind::Cylinder => {
            let (r, h) = (0.45 * d0, 0.6 * d1);
            let dx = len2(x, y) - r;
            let dz = z.abs() - h;
            dx.max(dz).min(0.0) + len2(dx.max(0.0), dz.max(0.0))
        }
        SolidKind::Cone => {
            // Capped cone along z: base radius r1 at z = -h, tip radius r2 at z = +h.
            let (h, r1, r2) = (0.6 * d1, 0.6 * d0, 0.03);
            let (qx, qy) = (len2(x, y), z);
            let (k1x, k1y) = (r2, h);
            let (k2x, k2y) = (r2 - r1, 2.0 * h);
            let cax = qx - qx.min(if qy < 0.0 { r1 } else { r2 });
            let cay = qy.abs() - h;
            let t = (((k1x - qx) * k2x + (k1y - qy) * k2y) / (k2x * k2x + k2y * k2y)).clamp(0.0, 1.0);
            let cbx = qx - k1x + k2x * t;
            let cby = qy - k1y + k2y * t;
            let s = if cbx < 0.0 && cay < 0.0 { -1.0 } else { 1.0 };
            s * (cax * cax + cay * cay).min(cbx * cbx + cby * cby).sqrt()
        }
        SolidKind::Torus => {
            let (major, minor) = (0.55 * d0, 0.2 * d1);
            len2(len2(x, y) - major, z) - minor
        }
        SolidKind::Capsule => {
            let (h, r) = (0.4 * d0, 0.3 * d1);
            let zc = z - z.clamp(-h, h);
            norm([x, y, zc]) - r
        }
        SolidKind::Octahedron => {
            let s = 0.8 * d0;
            (x.abs() + y.abs() + z.abs() - s) * 0.577_350_269_189_625_8
        }
        SolidKind::HexPrism => {
            let (hx, hz) = (0.5 * d0, 0.5 * d1);
            let (kx, ky, kz) = (-0.866_025_403_784_438_6, 0.5, 0.577_350_269_189_625_8);
            let (mut ax, mut ay, az) = (x.abs(), y.abs(), z.abs());
            let m = 2.0 * (kx * ax + ky * ay).min(0.0);
            ax -= m * kx;
            ay -= m * ky;
            let cx = ax.clamp(-kz * hx, kz * hx);
            let dx = len2(ax - cx, ay - hx) * (ay - hx).signum();
            let dz = az - hz;
            dx.max(dz).min(0.0) + len2(dx.max(0.0), dz.max(0.0))
        }
        SolidKind::TriPrism => {
            let (hx, hz) = (0.7 * d0, 0.5 * d1);
            let q = [x.abs(), y, z.abs()];
            (q[2] - hz).max((q[0] * 0.866_025_403_784_438_6 + y * 0.5).max(-y) - hx * 0.5)
        }
        SolidKind::Pyramid => {
            let (h, b) = (1.0 * d0, 0.5 * d1);
            let zb = z + 0.5 * h;
            let side = |u: f64| (h * u.abs() + b * zb - b * h) / len2(h, b);
            (-zb).max(side(x)).max(side(y))
        }
        SolidKind::Ellipsoid => {
            let r = [0.85 * d0, 0.32 * d1, 0.32 * d2];
            let k0 = norm([x / r[0], y / r[1], z / r[2]]);
            let k1 = norm([x / (r[0] * r[0]), y / (r[1] * r[1]), z / (r[2] * r[2])]);
            if k1 == 0.0 {
                -r[1].min(r[2])
            } else {
                k0 * (k0 - 1.0) / k1
            }
        }
        SolidKind::Cross => {
            let (l, t) = (0.7, 0.16);
            sd_box(p, [l * d0, t, t])
                .min(sd_box(p, [t, l * d1, t]))
                .min(sd_box(p, [t, t, l * d2]))
        }
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn lattice(seed: u64, i: i64, j: i64, k: i64) -> f64 {
    let h =
        splitmix(seed ^ splitmix(i as u64 ^ splitmix(j as u64 ^ splitmix(k as u64).rotate_left(17)).rotate_left(31)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Trilinear value noise in `[0, 1]`.
pub fn value_noise3(seed: u64, p: Vec3) -> f64 {
    let f = p.map(f64::floor);
    let (i, j, k) = (f[0] as i64, f[1] as i64, f[2] as i64);
    let (u, v, w) = (smooth(p[0] - f[0]), smooth(p[1] - f[1]), smooth(p[2] - f[2]));
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    let c = |di, dj, dk| lattice(seed, i + di, j + dj, k + dk);
    let x00 = lerp(c(0, 0, 0), c(1, 0, 0), u);
    let x10 = lerp(c(0, 1, 0), c(1, 1, 0), u);
    let x01 = lerp(c(0, 0, 1), c(1, 0, 1), u);
    let x11 = lerp(c(0, 1, 1), c(1, 1, 1), u);
    lerp(lerp(x00, x10, v), lerp(x01, x11, v), w)
}

/// Multi-octave value noise normalised back to `[0, 1]`.
pub fn fbm3(seed: u64, p: Vec3, octaves: u32) -> f64 {
    let (mut sum, mut amp, mut total, mut freq) = (0.0, 1.0, 0.0, 1.0);
    for o in 0..octaves {
        sum += amp
            * value_noise3(
                seed.wrapping_add(o as u64 * 0x51ED),
                [p[0] * freq, p[1] * freq, p[2] * freq],
            );
        total += amp;
        amp *= 0.5;
        freq *= 2.0;
    }
    sum / total
}

pub(crate) fn seed_mix(a: u64, b: u64) -> u64 {
    splitmix(a ^ splitmix(b))
}
