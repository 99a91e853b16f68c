//! Procedural endoluminal scenes and unpaired appearance/structure datasets.
//!
//! A camera looks down a gently bending tube whose wall carries ring-shaped
//! folds. Two point lights sit beside the camera. The structure domain sees
//! either the gray shading of that geometry or its min-max normalized ray
//! depth. The appearance domain sees the same shading multiplied by a color
//! tint, modulated by a surface texture (fBm noise plus vessel curves) and
//! topped with Phong highlights on glossy patches. The texture is seeded from
//! its own stream, so it carries no information about the geometry.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Domain, Image};

pub const GENERATOR_VERSION: &str = "tube-v1";

/// Reference split sizes; datasets are built at a fraction of these.
pub const REFERENCE_COUNTS: SplitCounts = SplitCounts {
    train_a: 1500,
    train_b: 1500,
    test: 900,
    val: 600,
};

const NEAR: f64 = 0.05;
const FAR: f64 = 9.0;
const FOV_DEG: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StructureMode {
    /// Gray shaded geometry, three channels.
    Render,
    /// Normalized ray depth, one channel.
    Depth,
}

impl StructureMode {
    pub fn channels(self) -> usize {
        match self {
            StructureMode::Render => 3,
            StructureMode::Depth => 1,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "render" => Ok(StructureMode::Render),
            "depth" => Ok(StructureMode::Depth),
            other => Err(Error::Param(format!("unknown structure mode {other:?} (render|depth)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StructureMode::Render => "render",
            StructureMode::Depth => "depth",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub radius: f64,
    /// Relative radius modulation around the circumference.
    pub wobble: f64,
    pub wobble_lobes: f64,
    pub wobble_phase: f64,
    pub fold_amplitude: f64,
    /// Folds per unit length along the tube.
    pub fold_frequency: f64,
    pub fold_phase: f64,
    pub fold_sharpness: f64,
    pub fold_tilt: f64,
    /// Quadratic bend of the centerline in x and y.
    pub bend: [f64; 2],
    /// Camera offset from the centerline, as a fraction of the radius.
    pub camera_offset: [f64; 2],
    /// Yaw and pitch of the view axis, radians.
    pub camera_angles: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lighting {
    /// Lateral offset of each light from the camera.
    pub light_offset: f64,
    pub falloff: f64,
    pub power: f64,
    pub ambient: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureParams {
    pub amplitude: f64,
    pub octaves: usize,
    pub base_frequency: f64,
    pub persistence: f64,
    pub vessels: usize,
    pub vessel_width: f64,
    pub vessel_depth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecularParams {
    /// Approximate fraction of the surface that is glossy.
    pub density: f64,
    pub phong_exponent: f64,
    pub strength: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub texture_seed: u64,
    pub geometry: Geometry,
    pub lighting: Lighting,
    pub texture: TextureParams,
    pub specular: SpecularParams,
    pub tint: [f64; 3],
}

/// Fixed values that replace the seeded defaults of [`make_scene`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneOverrides {
    pub radius: Option<f64>,
    pub fold_amplitude: Option<f64>,
    pub fold_frequency: Option<f64>,
    pub falloff: Option<f64>,
    pub light_power: Option<f64>,
    pub texture_amplitude: Option<f64>,
    pub texture_octaves: Option<usize>,
    pub vessel_count: Option<usize>,
    pub specular_density: Option<f64>,
    pub phong_exponent: Option<f64>,
    pub tint: Option<[f64; 3]>,
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Param(msg()))
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        check(g.radius.is_finite() && g.radius > 0.0, || format!("radius must be positive, got {}", g.radius))?;
        check((0.0..0.5).contains(&g.wobble), || format!("wobble must lie in [0, 0.5), got {}", g.wobble))?;
        check(g.fold_amplitude >= 0.0, || {
            format!("fold amplitude must be non-negative, got {}", g.fold_amplitude)
        })?;
        check(g.fold_amplitude <= 0.6 * g.radius * (1.0 - g.wobble), || {
            format!("fold amplitude {} would close the tube of radius {}", g.fold_amplitude, g.radius)
        })?;
        check(g.fold_frequency >= 0.0, || format!("fold frequency must be non-negative, got {}", g.fold_frequency))?;
        check(g.fold_sharpness >= 1.0, || format!("fold sharpness must be at least 1, got {}", g.fold_sharpness))?;
        check(g.camera_offset.iter().all(|o| o.abs() < 0.6), || {
            format!("camera offset {:?} leaves the tube", g.camera_offset)
        })?;
        let l = &self.lighting;
        check(l.falloff.is_finite() && l.falloff > 0.0, || format!("falloff exponent must be positive, got {}", l.falloff))?;
        check(l.power > 0.0, || format!("light power must be positive, got {}", l.power))?;
        check(l.light_offset >= 0.0 && l.light_offset < 0.5 * g.radius, || {
            format!("light offset {} must lie inside the tube", l.light_offset)
        })?;
        check((0.0..=1.0).contains(&l.ambient), || format!("ambient must lie in [0, 1], got {}", l.ambient))?;
        let t = &self.texture;
        check((0.0..=1.0).contains(&t.amplitude), || format!("texture amplitude must lie in [0, 1], got {}", t.amplitude))?;
        check((1..=8).contains(&t.octaves), || format!("texture octaves must lie in 1..=8, got {}", t.octaves))?;
        check(t.base_frequency > 0.0 && t.persistence > 0.0 && t.vessel_width > 0.0, || {
            "texture frequency, persistence and vessel width must be positive".into()
        })?;
        check((0.0..=1.0).contains(&t.vessel_depth), || format!("vessel depth must lie in [0, 1], got {}", t.vessel_depth))?;
        let s = &self.specular;
        check((0.0..=1.0).contains(&s.density), || format!("specular density must lie in [0, 1], got {}", s.density))?;
        check(s.phong_exponent > 0.0, || format!("Phong exponent must be positive, got {}", s.phong_exponent))?;
        check(s.strength >= 0.0 && s.strength.is_finite(), || format!("specular strength must be non-negative, got {}", s.strength))?;
        check(self.tint.iter().all(|c| (0.0..=2.0).contains(c)), || format!("tint {:?} outside [0, 2]", self.tint))?;
        Ok(())
    }
}

/// Draws a scene from `seed`, then applies and validates `overrides`.
/// Geometry and lighting come from one random stream and the texture seed
/// from another.
pub fn make_scene(seed: u64, overrides: &SceneOverrides) -> Result<SceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tex_rng = ChaCha8Rng::seed_from_u64(seed);
    tex_rng.set_stream(1);
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
    let geometry = Geometry {
        radius: 1.0,
        wobble: u(0.0, 0.12),
        wobble_lobes: u(2.0, 5.0).floor(),
        wobble_phase: u(0.0, std::f64::consts::TAU),
        fold_amplitude: u(0.15, 0.32),
        fold_frequency: u(0.35, 0.7),
        fold_phase: u(0.0, 1.0),
        fold_sharpness: u(3.0, 8.0),
        fold_tilt: u(-0.25, 0.25),
        bend: [u(-0.04, 0.04), u(-0.04, 0.04)],
        camera_offset: [u(-0.3, 0.3), u(-0.3, 0.3)],
        camera_angles: [u(-0.25, 0.25), u(-0.25, 0.25)],
    };
    let lighting = Lighting {
        light_offset: 0.12,
        falloff: 2.0,
        power: u(0.2, 0.3),
        ambient: 0.02,
    };
    let texture = TextureParams {
        amplitude: u(0.3, 0.45),
        octaves: 4,
        base_frequency: u(2.5, 4.0),
        persistence: 0.55,
        vessels: u(3.0, 7.0).floor() as usize,
        vessel_width: u(0.025, 0.05),
        vessel_depth: u(0.35, 0.6),
    };
    let specular = SpecularParams {
        density: u(0.3, 0.5),
        phong_exponent: u(8.0, 20.0),
        strength: u(1.5, 2.5),
    };
    let tint = [u(0.95, 1.05), u(0.5, 0.65), u(0.4, 0.55)];

    let mut spec = SceneSpec {
        seed,
        texture_seed: tex_rng.random(),
        geometry,
        lighting,
        texture,
        specular,
        tint,
    };
    let o = overrides;
    if let Some(v) = o.radius {
        // folds, offsets and lights scale with the tube
        let k = v / spec.geometry.radius;
        spec.geometry.radius = v;
        spec.geometry.fold_amplitude *= k;
        spec.lighting.light_offset *= k;
    }
    if let Some(v) = o.fold_amplitude {
        spec.geometry.fold_amplitude = v;
    }
    if let Some(v) = o.fold_frequency {
        spec.geometry.fold_frequency = v;
    }
    if let Some(v) = o.falloff {
        spec.lighting.falloff = v;
    }
    if let Some(v) = o.light_power {
        spec.lighting.power = v;
    }
    if let Some(v) = o.texture_amplitude {
        spec.texture.amplitude = v;
    }
    if let Some(v) = o.texture_octaves {
        spec.texture.octaves = v;
    }
    if let Some(v) = o.vessel_count {
        spec.texture.vessels = v;
    }
    if let Some(v) = o.specular_density {
        spec.specular.density = v;
    }
    if let Some(v) = o.phong_exponent {
        spec.specular.phong_exponent = v;
    }
    if let Some(v) = o.tint {
        spec.tint = v;
    }
    spec.validate()?;
    Ok(spec)
}

/// One rendered scene with its latent layers.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub spec: SceneSpec,
    pub appearance: Image,
    pub structure: Image,
    pub texture_layer: Image,
    pub specular_layer: Image,
    pub pairing_id: u64,
}

/// Irradiance scale of a point light at `distance`: `distance^(−exponent)`.
pub fn light_falloff(distance: f64, exponent: f64) -> f64 {
    distance.max(1e-6).powf(-exponent)
}

type V3 = [f64; 3];

fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn scale(a: V3, k: f64) -> V3 {
    [a[0] * k, a[1] * k, a[2] * k]
}

fn normalized(a: V3) -> V3 {
    let n = dot(a, a).sqrt();
    if n > 0.0 {
        scale(a, 1.0 / n)
    } else {
        a
    }
}

struct Tube<'a> {
    g: &'a Geometry,
}

impl Tube<'_> {
    fn center(&self, z: f64) -> [f64; 2] {
        let g = self.g;
        let z2 = z.max(0.0).powi(2);
        [
            -g.camera_offset[0] * g.radius + g.bend[0] * z2,
            -g.camera_offset[1] * g.radius + g.bend[1] * z2,
        ]
    }

    fn wall_radius(&self, z: f64, theta: f64) -> f64 {
        let g = self.g;
        let ring = g.fold_frequency * z + g.fold_phase + g.fold_tilt * theta.sin();
        let fold = (0.5 + 0.5 * (std::f64::consts::TAU * ring).cos()).powf(g.fold_sharpness);
        g.radius * (1.0 + g.wobble * (g.wobble_lobes * theta + g.wobble_phase + 0.3 * z).sin())
            - g.fold_amplitude * fold
    }

    fn polar(&self, p: V3) -> (f64, f64) {
        let c = self.center(p[2]);
        let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
        ((dx * dx + dy * dy).sqrt(), dy.atan2(dx))
    }

    /// Positive inside the lumen, negative beyond the wall.
    fn field(&self, p: V3) -> f64 {
        let (rho, theta) = self.polar(p);
        self.wall_radius(p[2], theta) - rho
    }

    fn normal(&self, p: V3, toward: V3) -> V3 {
        let h = 1e-4;
        let mut grad = [0.0; 3];
        for (axis, gr) in grad.iter_mut().enumerate() {
            let (mut a, mut b) = (p, p);
            a[axis] += h;
            b[axis] -= h;
            *gr = (self.field(a) - self.field(b)) / (2.0 * h);
        }
        let n = normalized(grad);
        if dot(n, toward) < 0.0 {
            scale(n, -1.0)
        } else {
            n
        }
    }

    /// Distance along the unit ray `d` from the origin to the wall.
    fn march(&self, d: V3) -> f64 {
        let mut t = NEAR;
        let mut f = self.field(scale(d, t));
        while t < FAR {
            let step = (0.4 * f).clamp(0.01, 0.25);
            let t_next = (t + step).min(FAR);
            let f_next = self.field(scale(d, t_next));
            if f_next <= 0.0 {
                let (mut lo, mut hi) = (t, t_next);
                for _ in 0..30 {
                    let mid = 0.5 * (lo + hi);
                    if self.field(scale(d, mid)) > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                return 0.5 * (lo + hi);
            }
            if t_next >= FAR {
                break;
            }
            t = t_next;
            f = f_next;
        }
        FAR
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn lattice_hash(seed: u64, i: i64, j: i64, k: i64) -> u64 {
    splitmix(seed ^ splitmix((i as u64).wrapping_mul(0x8CB9_2BA7_2F3D_8DD7) ^ splitmix((j as u64) ^ splitmix(k as u64))))
}

const GRADIENTS: [V3; 12] = [
    [1.0, 1.0, 0.0],
    [-1.0, 1.0, 0.0],
    [1.0, -1.0, 0.0],
    [-1.0, -1.0, 0.0],
    [1.0, 0.0, 1.0],
    [-1.0, 0.0, 1.0],
    [1.0, 0.0, -1.0],
    [-1.0, 0.0, -1.0],
    [0.0, 1.0, 1.0],
    [0.0, -1.0, 1.0],
    [0.0, 1.0, -1.0],
    [0.0, -1.0, -1.0],
];

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Seeded 3-D gradient noise, roughly in [−1, 1].
pub fn gradient_noise(seed: u64, p: V3) -> f64 {
    let cell = [p[0].floor(), p[1].floor(), p[2].floor()];
    let f = sub(p, cell);
    let (i, j, k) = (cell[0] as i64, cell[1] as i64, cell[2] as i64);
    let corner = |di: i64, dj: i64, dk: i64| {
        let g = GRADIENTS[(lattice_hash(seed, i + di, j + dj, k + dk) % 12) as usize];
        dot(g, [f[0] - di as f64, f[1] - dj as f64, f[2] - dk as f64])
    };
    let (u, v, w) = (fade(f[0]), fade(f[1]), fade(f[2]));
    let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
    let x00 = lerp(corner(0, 0, 0), corner(1, 0, 0), u);
    let x10 = lerp(corner(0, 1, 0), corner(1, 1, 0), u);
    let x01 = lerp(corner(0, 0, 1), corner(1, 0, 1), u);
    let x11 = lerp(corner(0, 1, 1), corner(1, 1, 1), u);
    lerp(lerp(x00, x10, v), lerp(x01, x11, v), w)
}

/// Normalized fractal sum of `octaves` noise layers.
pub fn fbm(seed: u64, p: V3, octaves: usize, frequency: f64, persistence: f64) -> f64 {
    let (mut sum, mut norm, mut amp, mut freq) = (0.0, 0.0, 1.0, frequency);
    for o in 0..octaves {
        sum += amp * gradient_noise(seed.wrapping_add(o as u64 * 0x1000_0001), scale(p, freq));
        norm += amp;
        amp *= persistence;
        freq *= 2.0;
    }
    sum / norm
}

struct Vessel {
    theta0: f64,
    amp: [f64; 2],
    freq: [f64; 2],
    phase: [f64; 2],
}

fn vessels(spec: &SceneSpec) -> Vec<Vessel> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.texture_seed);
    rng.set_stream(2);
    (0..spec.texture.vessels)
        .map(|_| Vessel {
            theta0: rng.random_range(0.0..std::f64::consts::TAU),
            amp: [rng.random_range(0.2..0.8), rng.random_range(0.05..0.3)],
            freq: [rng.random_range(0.3..1.2), rng.random_range(1.5..3.5)],
            phase: [rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.0..std::f64::consts::TAU)],
        })
        .collect()
}

fn texture_value(spec: &SceneSpec, vs: &[Vessel], p: V3, theta: f64) -> f64 {
    let t = &spec.texture;
    let n = fbm(spec.texture_seed, p, t.octaves, t.base_frequency, t.persistence);
    let mut v = 0.5 + 0.9 * n;
    for vessel in vs {
        let path = vessel.theta0
            + vessel.amp[0] * (vessel.freq[0] * p[2] + vessel.phase[0]).sin()
            + vessel.amp[1] * (vessel.freq[1] * p[2] + vessel.phase[1]).sin();
        let mut d = (theta - path).rem_euclid(std::f64::consts::TAU);
        if d > std::f64::consts::PI {
            d = std::f64::consts::TAU - d;
        }
        let arc = d * spec.geometry.radius / t.vessel_width;
        v -= t.vessel_depth * (-arc * arc).exp();
    }
    v.clamp(0.0, 1.0)
}

fn gloss_mask(spec: &SceneSpec, p: V3) -> f64 {
    let density = spec.specular.density;
    if density <= 0.0 {
        return 0.0;
    }
    let n = fbm(spec.texture_seed ^ 0x5BEC_0DE5, p, 2, 1.5, 0.5);
    // fbm values are spread roughly like N(0, 0.2²)
    let threshold = 0.28 * (1.0 - 2.0 * density);
    let x = ((n - threshold) / 0.06).clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

struct Sample {
    depth: f64,
    shade: f64,
    texture: f64,
    specular: f64,
}

fn shade_point(spec: &SceneSpec, tube: &Tube, vs: &[Vessel], d: V3) -> Sample {
    let t = tube.march(d);
    let p = scale(d, t);
    let view = scale(d, -1.0);
    let n = tube.normal(p, view);
    let (_, theta) = tube.polar(p);
    let l = &spec.lighting;
    let (mut diffuse, mut highlight) = (0.0, 0.0);
    for side in [-1.0, 1.0] {
        let to_light = sub([side * l.light_offset, 0.0, 0.0], p);
        let dist = dot(to_light, to_light).sqrt();
        let ldir = scale(to_light, 1.0 / dist.max(1e-9));
        let irr = l.power * light_falloff(dist, l.falloff);
        let ndl = dot(n, ldir).max(0.0);
        diffuse += ndl * irr;
        if ndl > 0.0 {
            let r = sub(scale(n, 2.0 * dot(n, ldir)), ldir);
            highlight += dot(r, view).max(0.0).powf(spec.specular.phong_exponent) * irr;
        }
    }
    let gloss = gloss_mask(spec, p);
    Sample {
        depth: t,
        shade: (l.ambient + diffuse).clamp(0.0, 1.0),
        texture: texture_value(spec, vs, p, theta),
        specular: (spec.specular.strength * gloss * highlight).clamp(0.0, 1.0),
    }
}

/// Renders `spec` at `size × size` pixels. `pairing_id` is carried through.
pub fn render_pair(spec: &SceneSpec, mode: StructureMode, size: usize, pairing_id: u64) -> Result<SceneRecord> {
    spec.validate()?;
    if size < 4 {
        return Err(Error::Param(format!("image size {size} is too small")));
    }
    let tube = Tube { g: &spec.geometry };
    let vs = vessels(spec);
    let half = (FOV_DEG.to_radians() / 2.0).tan();
    let [yaw, pitch] = spec.geometry.camera_angles;
    let hw = size * size;
    let mut samples = Vec::with_capacity(hw);
    for py in 0..size {
        for px in 0..size {
            let x = ((px as f64 + 0.5) / size as f64 * 2.0 - 1.0) * half;
            let y = ((py as f64 + 0.5) / size as f64 * 2.0 - 1.0) * half;
            // pitch about x, then yaw about y
            let (sp, cp) = pitch.sin_cos();
            let (sy, cy) = yaw.sin_cos();
            let d0 = [x, y * cp - sp, y * sp + cp];
            let d = normalized([d0[0] * cy + d0[2] * sy, d0[1], -d0[0] * sy + d0[2] * cy]);
            samples.push(shade_point(spec, &tube, &vs, d));
        }
    }

    let amp = spec.texture.amplitude;
    let mut appearance = vec![0.0; 3 * hw];
    for (i, s) in samples.iter().enumerate() {
        for c in 0..3 {
            let base = s.shade * spec.tint[c];
            appearance[c * hw + i] = base + 2.0 * amp * base * (s.texture - 0.5) + s.specular;
        }
    }
    let structure = match mode {
        StructureMode::Render => {
            let shade: Vec<f64> = samples.iter().map(|s| s.shade).collect();
            Image::from_clamped(Domain::Structure, 1, size, size, shade)?.replicate(3)?
        }
        StructureMode::Depth => {
            let (lo, hi) = samples
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s.depth), hi.max(s.depth)));
            let span = hi - lo;
            let depth = samples
                .iter()
                .map(|s| if span > 0.0 { (s.depth - lo) / span } else { 0.0 })
                .collect();
            Image::from_clamped(Domain::Structure, 1, size, size, depth)?
        }
    };
    Ok(SceneRecord {
        spec: spec.clone(),
        appearance: Image::from_clamped(Domain::Appearance, 3, size, size, appearance)?,
        structure,
        texture_layer: Image::from_clamped(Domain::Appearance, 1, size, size, samples.iter().map(|s| s.texture).collect())?,
        specular_layer: Image::from_clamped(Domain::Appearance, 1, size, size, samples.iter().map(|s| s.specular).collect())?,
        pairing_id,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train_a: usize,
    pub train_b: usize,
    pub test: usize,
    pub val: usize,
}

impl SplitCounts {
    /// The reference counts times `factor`, rounded to the nearest integer.
    pub fn scaled(factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(Error::Param(format!("scale factor must be positive, got {factor}")));
        }
        let s = |n: usize| (n as f64 * factor).round() as usize;
        Ok(SplitCounts {
            train_a: s(REFERENCE_COUNTS.train_a),
            train_b: s(REFERENCE_COUNTS.train_b),
            test: s(REFERENCE_COUNTS.test),
            val: s(REFERENCE_COUNTS.val),
        })
    }

    /// Number of image files a dataset with these counts holds.
    pub fn image_files(&self) -> usize {
        self.train_a + self.train_b + 2 * self.test + 2 * self.val
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "train_A")]
    TrainA,
    #[serde(rename = "train_B")]
    TrainB,
    #[serde(rename = "test")]
    Test,
    #[serde(rename = "val")]
    Val,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::TrainA, Split::TrainB, Split::Test, Split::Val];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::TrainA => "train_A",
            Split::TrainB => "train_B",
            Split::Test => "test",
            Split::Val => "val",
        }
    }

    fn index(self) -> u64 {
        match self {
            Split::TrainA => 0,
            Split::TrainB => 1,
            Split::Test => 2,
            Split::Val => 3,
        }
    }

    pub fn paired(self) -> bool {
        matches!(self, Split::Test | Split::Val)
    }
}

/// Scene seed of item `index` in `split`; the four splits draw from disjoint
/// ranges for any global seed.
pub fn scene_seed(global_seed: u64, split: Split, index: usize) -> u64 {
    assert!(index < 1 << 24, "split index out of range");
    (global_seed << 32) | (split.index() << 24) | index as u64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub mode: StructureMode,
    pub size: usize,
    pub counts: SplitCounts,
    pub generator_version: String,
    pub seed: u64,
    #[serde(default)]
    pub overrides: SceneOverrides,
}

impl DatasetManifest {
    pub fn new(mode: StructureMode, size: usize, counts: SplitCounts, seed: u64) -> Self {
        DatasetManifest {
            mode,
            size,
            counts,
            generator_version: GENERATOR_VERSION.into(),
            seed,
            overrides: SceneOverrides::default(),
        }
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::TrainA => self.counts.train_a,
            Split::TrainB => self.counts.train_b,
            Split::Test => self.counts.test,
            Split::Val => self.counts.val,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 16 || self.size % 4 != 0 {
            return Err(Error::Param(format!("image size must be a multiple of 4 and at least 16, got {}", self.size)));
        }
        if self.size > 1024 {
            return Err(Error::Param(format!("image size {} is larger than supported", self.size)));
        }
        for split in Split::ALL {
            if self.count(split) >= 1 << 24 {
                return Err(Error::Param(format!("too many scenes in {}", split.dir_name())));
            }
        }
        Ok(())
    }
}

/// Per-scene metadata written next to its images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub pairing_id: u64,
    pub split: Split,
    pub scene_seed: u64,
    pub texture_seed: u64,
    pub spec: SceneSpec,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn item_stem(index: usize) -> String {
    format!("{index:05}")
}

fn write_structure(img: &Image, mode: StructureMode, path: &Path) -> Result<()> {
    img.save_png(path, mode == StructureMode::Depth)
}

fn write_json<S: Serialize>(value: &S, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn build_into(manifest: &DatasetManifest, root: &Path) -> Result<()> {
    for split in Split::ALL {
        let dir = root.join(split.dir_name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..manifest.count(split) {
            let seed = scene_seed(manifest.seed, split, i);
            let spec = make_scene(seed, &manifest.overrides)?;
            let rec = render_pair(&spec, manifest.mode, manifest.size, i as u64)?;
            let stem = item_stem(i);
            match split {
                Split::TrainA => rec.appearance.save_png(&dir.join(format!("{stem}.png")), false)?,
                Split::TrainB => write_structure(&rec.structure, manifest.mode, &dir.join(format!("{stem}.png")))?,
                Split::Test | Split::Val => {
                    rec.appearance.save_png(&dir.join(format!("{stem}_A.png")), false)?;
                    write_structure(&rec.structure, manifest.mode, &dir.join(format!("{stem}_B.png")))?;
                }
            }
            let side = Sidecar {
                pairing_id: i as u64,
                split,
                scene_seed: seed,
                texture_seed: spec.texture_seed,
                spec,
            };
            write_json(&side, &dir.join(format!("{stem}.json")))?;
        }
    }
    write_json(manifest, &root.join(MANIFEST_FILE))
}

/// Writes the dataset described by `manifest` under `root`. On failure the
/// split directories and manifest written so far are removed.
pub fn build_dataset(manifest: &DatasetManifest, root: &Path) -> Result<()> {
    manifest.validate()?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let result = build_into(manifest, root);
    if result.is_err() {
        for split in Split::ALL {
            let _ = fs::remove_dir_all(root.join(split.dir_name()));
        }
        let _ = fs::remove_file(root.join(MANIFEST_FILE));
    }
    result
}

/// A scene of a paired split as stored on disk.
#[derive(Clone, Debug)]
pub struct PairedItem {
    pub sidecar: Sidecar,
    pub appearance: Image,
    pub structure: Image,
}

/// Read access to a dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Dataset(format!("unreadable manifest {}: {e}", path.display())))?;
        manifest.validate()?;
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
        })
    }

    fn check_image(&self, img: &Image, channels: usize, path: &Path) -> Result<()> {
        let s = self.manifest.size;
        if (img.channels(), img.height(), img.width()) != (channels, s, s) {
            return Err(Error::Dataset(format!(
                "{} is {}×{}×{}, manifest expects {channels}×{s}×{s}",
                path.display(),
                img.channels(),
                img.height(),
                img.width()
            )));
        }
        Ok(())
    }

    fn load(&self, path: &Path, domain: Domain) -> Result<Image> {
        let img = Image::load_png(path, domain)?;
        let channels = match domain {
            Domain::Appearance => 3,
            Domain::Structure => self.manifest.mode.channels(),
        };
        self.check_image(&img, channels, path)?;
        Ok(img)
    }

    /// Images of an unpaired training split.
    pub fn train_images(&self, domain: Domain) -> Result<Vec<Image>> {
        let split = match domain {
            Domain::Appearance => Split::TrainA,
            Domain::Structure => Split::TrainB,
        };
        let dir = self.root.join(split.dir_name());
        (0..self.manifest.count(split))
            .map(|i| self.load(&dir.join(format!("{}.png", item_stem(i))), domain))
            .collect()
    }

    /// Scenes of the `test` or `val` split.
    pub fn paired(&self, split: Split) -> Result<Vec<PairedItem>> {
        if !split.paired() {
            return Err(Error::Dataset(format!("{} is not a paired split", split.dir_name())));
        }
        let dir = self.root.join(split.dir_name());
        (0..self.manifest.count(split))
            .map(|i| {
                let stem = item_stem(i);
                let side_path = dir.join(format!("{stem}.json"));
                let text = fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
                let sidecar: Sidecar = serde_json::from_str(&text)?;
                Ok(PairedItem {
                    sidecar,
                    appearance: self.load(&dir.join(format!("{stem}_A.png")), Domain::Appearance)?,
                    structure: self.load(&dir.join(format!("{stem}_B.png")), Domain::Structure)?,
                })
            })
            .collect()
    }

    /// Re-renders the latent layers of a stored scene from its sidecar.
    pub fn latent(&self, item: &PairedItem) -> Result<SceneRecord> {
        render_pair(&item.sidecar.spec, self.manifest.mode, self.manifest.size, item.sidecar.pairing_id)
    }
}
