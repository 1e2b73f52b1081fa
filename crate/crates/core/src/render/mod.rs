//! Paired synthetic data: a shaded, textured solid over a procedural
//! background (`O`) and its semantic-depth mask (`M`).

mod dataset;
mod scene;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use dataset::{read_dataset, round_sig9, write_dataset, META_FILE};
pub use scene::{fbm3, make_scene, signed_distance, value_noise3, SceneSpec, SolidKind};

use crate::camera::{
    self, clip_band, cross, dot, normalize, sample_rig, scale, sub, subdivide_icosahedron, CameraMode, CameraRig, Vec3,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
pub(crate) use scene::seed_mix;

/// Semantic colors, one per category: RGB cube corners and face centers
/// without black (and without the blue-less face center).
pub const PALETTE: [[f64; 3]; 12] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [1.0, 1.0, 1.0],
    [0.5, 0.5, 1.0],
    [0.5, 0.0, 0.5],
    [0.5, 1.0, 0.5],
    [0.0, 0.5, 0.5],
    [1.0, 0.5, 0.5],
];

pub const MIN_RESOLUTION: usize = 16;
pub const MAX_RESOLUTION: usize = 128;
/// Camera sphere radius in world units; solids fit the unit ball.
pub const CAMERA_RADIUS: f64 = 3.0;
pub const VERTICAL_FOV_DEG: f64 = 40.0;
/// Fraction of the depth range the mask intensity spans (nearest = 1).
pub const DEPTH_SPAN: f64 = 0.5;

pub fn category_color(category: usize) -> Result<[f64; 3]> {
    PALETTE.get(category).copied().ok_or_else(|| {
        Error::domain(
            "category_color",
            format!("category {category} exceeds the palette of {} colors", PALETTE.len()),
        )
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub id: usize,
    /// Realistic image, `[3, S, S]`, values in `[0, 1]`.
    pub o: Tensor,
    /// Semantic-depth mask, `[3, S, S]`, black background.
    pub m: Tensor,
    pub category: usize,
    /// Unit camera direction.
    pub pose: Vec3,
    pub light: f64,
    pub mode: CameraMode,
    pub split: Split,
    pub seed: u64,
}

impl SamplePair {
    pub fn resolution(&self) -> usize {
        self.o.shape()[2]
    }
}

/// Raw render outputs, planar `[3, S, S]` rgb and `[S, S]` depth/coverage.
#[derive(Clone, Debug)]
pub struct Render {
    pub resolution: usize,
    pub rgb: Vec<f64>,
    pub depth: Vec<f64>,
    pub coverage: Vec<bool>,
}

impl Render {
    pub fn covered(&self) -> usize {
        self.coverage.iter().filter(|c| **c).count()
    }
}

struct Basis {
    forward: Vec3,
    right: Vec3,
    up: Vec3,
}

fn look_at(eye: Vec3, target: Vec3) -> Result<Basis> {
    let forward = sub(target, eye);
    if camera::norm(forward) < 1e-9 {
        return Err(Error::domain("rasterize", "camera coincides with focal point"));
    }
    let forward = normalize(forward);
    let mut right = cross(forward, [0.0, 0.0, 1.0]);
    if camera::norm(right) < 1e-9 {
        right = cross(forward, [0.0, 1.0, 0.0]);
    }
    let right = normalize(right);
    let up = cross(right, forward);
    Ok(Basis { forward, right, up })
}

fn surface_normal(scene: &SceneSpec, p: Vec3) -> Vec3 {
    let e = 1e-5;
    let d = |q: Vec3| signed_distance(scene, q);
    normalize([
        d([p[0] + e, p[1], p[2]]) - d([p[0] - e, p[1], p[2]]),
        d([p[0], p[1] + e, p[2]]) - d([p[0], p[1] - e, p[2]]),
        d([p[0], p[1], p[2] + e]) - d([p[0], p[1], p[2] - e]),
    ])
}

fn texture_palette(seed: u64) -> ([f64; 3], [f64; 3], f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = [
        rng.gen_range(0.25..0.95),
        rng.gen_range(0.25..0.95),
        rng.gen_range(0.25..0.95),
    ];
    let b = [
        rng.gen_range(0.1..0.8),
        rng.gen_range(0.1..0.8),
        rng.gen_range(0.1..0.8),
    ];
    (a, b, rng.gen_range(1.5..4.0))
}

/// Ray-marches the solid from the rig. Lambertian shading is linear in
/// `rig.light`; depth is normalised per image so the nearest covered pixel is 1.
pub fn rasterize(scene: &SceneSpec, rig: &CameraRig, resolution: usize) -> Result<Render> {
    if !(MIN_RESOLUTION..=MAX_RESOLUTION).contains(&resolution) {
        return Err(Error::domain(
            "rasterize",
            format!("resolution {resolution} outside [{MIN_RESOLUTION}, {MAX_RESOLUTION}]"),
        ));
    }
    if signed_distance(scene, rig.position) <= 0.0 {
        return Err(Error::domain("rasterize", "camera inside the solid"));
    }
    let basis = look_at(rig.position, rig.focal)?;
    let light_dir = normalize(camera::add(rig.position, [0.0, 0.0, CAMERA_RADIUS]));
    let (tex_a, tex_b, tex_freq) = texture_palette(scene.texture_seed);
    let half = (VERTICAL_FOV_DEG.to_radians() * 0.5).tan();
    let far = camera::norm(rig.position) + 2.0;
    let s = resolution;
    let np = s * s;

    let mut rgb = vec![0.0; 3 * np];
    let mut zdepth = vec![f64::NAN; np];
    for i in 0..s {
        for j in 0..s {
            let u = (2.0 * (j as f64 + 0.5) / s as f64 - 1.0) * half;
            let v = (1.0 - 2.0 * (i as f64 + 0.5) / s as f64) * half;
            let dir = normalize(camera::add(
                basis.forward,
                camera::add(scale(basis.right, u), scale(basis.up, v)),
            ));
            let mut t = 0.0;
            let mut hit = None;
            for _ in 0..160 {
                let p = camera::add(rig.position, scale(dir, t));
                let d = signed_distance(scene, p);
                if d < 1e-5 {
                    hit = Some(p);
                    break;
                }
                t += d;
                if t > far {
                    break;
                }
            }
            let Some(p) = hit else { continue };
            let n = surface_normal(scene, p);
            let lambert = dot(n, light_dir).max(0.0);
            let pattern = fbm3(scene.texture_seed, scale(p, tex_freq), 3);
            let k = rig.light * (0.25 + 0.75 * lambert);
            let px = i * s + j;
            for c in 0..3 {
                let albedo = tex_a[c] + (tex_b[c] - tex_a[c]) * pattern;
                rgb[c * np + px] = (k * albedo).min(1.0);
            }
            zdepth[px] = t * dot(dir, basis.forward);
        }
    }
    let coverage: Vec<bool> = zdepth.iter().map(|z| !z.is_nan()).collect();
    let (zmin, zmax) = zdepth
        .iter()
        .filter(|z| !z.is_nan())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), z| {
            (lo.min(*z), hi.max(*z))
        });
    let range = zmax - zmin;
    let depth = zdepth
        .iter()
        .map(|z| {
            if z.is_nan() {
                0.0
            } else if range > 0.0 {
                1.0 - DEPTH_SPAN * (z - zmin) / range
            } else {
                1.0
            }
        })
        .collect();
    Ok(Render {
        resolution,
        rgb,
        depth,
        coverage,
    })
}

/// Multi-octave value-noise background with a random palette, `[3, S, S]`.
pub fn background(seed: u64, resolution: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let hi: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let accent: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let freq = rng.gen_range(2.0..6.0);
    let s = resolution;
    let np = s * s;
    let mut out = vec![0.0; 3 * np];
    for i in 0..s {
        for j in 0..s {
            let p = [j as f64 / s as f64 * freq, i as f64 / s as f64 * freq, 0.5];
            let base = fbm3(seed, p, 4);
            let detail = fbm3(seed ^ 0xA5A5, scale(p, 3.0), 2);
            for c in 0..3 {
                let v = lo[c] + (hi[c] - lo[c]) * base;
                out[c * np + i * s + j] = (v + (accent[c] - v) * 0.35 * detail).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Composes the realistic image over a background and builds the mask.
pub fn compose_pair(
    scene: &SceneSpec,
    rig: &CameraRig,
    category: usize,
    resolution: usize,
) -> Result<(Tensor, Tensor, Render)> {
    let color = category_color(category)?;
    let render = rasterize(scene, rig, resolution)?;
    if render.covered() == 0 {
        return Err(Error::domain("compose_pair", "object not visible (empty coverage)"));
    }
    let np = resolution * resolution;
    let bg = background(scene.background_seed, resolution);
    let mut o = bg;
    let mut m = vec![0.0; 3 * np];
    for px in 0..np {
        if !render.coverage[px] {
            continue;
        }
        for c in 0..3 {
            o[c * np + px] = render.rgb[c * np + px];
            m[c * np + px] = color[c] * render.depth[px];
        }
    }
    let shape = vec![3, resolution, resolution];
    Ok((Tensor::new(shape.clone(), o)?, Tensor::new(shape, m)?, render))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modes {
    Centered,
    Shifted,
    Both,
}

impl Modes {
    pub fn list(self) -> Vec<CameraMode> {
        match self {
            Modes::Centered => vec![CameraMode::Centered],
            Modes::Shifted => vec![CameraMode::Shifted],
            Modes::Both => vec![CameraMode::Centered, CameraMode::Shifted],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub seed: u64,
    pub classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub resolution: usize,
    pub modes: Modes,
    pub subdivision: u32,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            classes: 12,
            per_class: 200,
            test_per_class: 50,
            resolution: 32,
            modes: Modes::Both,
            subdivision: 2,
        }
    }
}

const MAX_ATTEMPTS: u64 = 64;

/// Renders one pair from a per-sample seed, redrawing the rig when the
/// object would be invisible.
pub fn render_sample(
    cameras: &[Vec3],
    category: usize,
    mode: CameraMode,
    split: Split,
    resolution: usize,
    seed: u64,
    id: usize,
) -> Result<SamplePair> {
    let mut last_err = None;
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_mix(seed, attempt));
        let scene = make_scene(category, rng.gen())?;
        let rig = sample_rig(&mut rng, cameras, CAMERA_RADIUS, mode)?;
        match compose_pair(&scene, &rig, category, resolution) {
            Ok((o, m, _)) => {
                let pose = normalize(rig.position).map(round_sig9);
                return Ok(SamplePair {
                    id,
                    o,
                    m,
                    category,
                    pose,
                    light: round_sig9(rig.light),
                    mode,
                    split,
                    seed,
                });
            }
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or_else(|| Error::invalid("no render attempts")))
}

/// Renders the whole dataset; output order and content depend only on the
/// config, never on the worker count.
pub fn render_dataset(cfg: &RenderConfig) -> Result<Vec<SamplePair>> {
    if cfg.classes == 0 || cfg.classes > PALETTE.len() {
        return Err(Error::invalid(format!(
            "--classes {} exceeds the palette of {} category colors",
            cfg.classes,
            PALETTE.len()
        )));
    }
    let cameras = clip_band(&subdivide_icosahedron(cfg.subdivision, CAMERA_RADIUS)?, CAMERA_RADIUS)?;
    let mut jobs = Vec::new();
    for split in [Split::Train, Split::Test] {
        let count = match split {
            Split::Train => cfg.per_class,
            Split::Test => cfg.test_per_class,
        };
        for mode in cfg.modes.list() {
            for category in 0..cfg.classes {
                for k in 0..count {
                    let tag = (split as u64) << 62
                        | (matches!(mode, CameraMode::Shifted) as u64) << 61
                        | (category as u64) << 32
                        | k as u64;
                    jobs.push((category, mode, split, seed_mix(cfg.seed, tag)));
                }
            }
        }
    }
    jobs.par_iter()
        .enumerate()
        .map(|(id, &(category, mode, split, seed))| {
            render_sample(&cameras, category, mode, split, cfg.resolution, seed, id)
        })
        .collect()
}
