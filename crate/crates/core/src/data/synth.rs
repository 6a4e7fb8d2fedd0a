//! Procedural stereo scenes with exact disparity and class ground truth.
//!
//! A scene is a slanted background plane plus fronto-parallel objects, each
//! carrying its own band-limited texture defined in left-image coordinates.
//! The left view samples the frontmost surface at every pixel; the right view
//! at column `xr` samples the frontmost surface whose left-view position
//! `u = xr + d` it covers, so both views are exact renderings of one scene.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::check_divisible;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest disparity the generator accepts, in full-resolution pixels.
pub const MAX_DISPARITY: f32 = 192.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneParams {
    pub height: usize,
    pub width: usize,
    pub n_objects: usize,
    pub max_disp: f32,
    /// Classes in use: 0 is background, objects take 1.. by shape.
    pub n_classes: usize,
    /// When set, the background is fronto-parallel at this disparity.
    pub constant_background: Option<f32>,
}

impl SceneParams {
    pub fn desk(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            n_objects: 3,
            max_disp: 32.0,
            n_classes: 5,
            constant_background: None,
        }
    }

    fn validate(&self) -> Result<()> {
        check_divisible(self.height, self.width)?;
        let bad = |msg: String| Err(Error::contract("generate_scene", msg));
        if !(self.max_disp > 1.0 && self.max_disp <= MAX_DISPARITY) {
            return bad(format!("max_disp {} outside (1, {MAX_DISPARITY}]", self.max_disp));
        }
        if self.n_classes == 0 || self.n_classes > 255 {
            return bad(format!("n_classes {} outside 1..=255", self.n_classes));
        }
        if let Some(d) = self.constant_background {
            if !(0.0..=self.max_disp).contains(&d) {
                return bad(format!("background disparity {d} outside [0, {}]", self.max_disp));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rect,
    Ellipse,
    Diamond,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Rect,
        ShapeKind::Ellipse,
        ShapeKind::Diamond,
        ShapeKind::Triangle,
    ];

    fn index(self) -> usize {
        match self {
            ShapeKind::Rect => 0,
            ShapeKind::Ellipse => 1,
            ShapeKind::Diamond => 2,
            ShapeKind::Triangle => 3,
        }
    }

    /// Class id of this shape for a scene with `n_classes` classes.
    pub fn class_id(self, n_classes: usize) -> u8 {
        if n_classes <= 1 {
            0
        } else {
            (1 + self.index() % (n_classes - 1)) as u8
        }
    }
}

/// Sum of oriented sinusoids around a base colour.
#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    base: [f32; 3],
    /// (fu, fy, phase, amplitude per channel)
    waves: Vec<(f32, f32, f32, [f32; 3])>,
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng, tint: [f32; 3]) -> Self {
        let base = [
            0.5 * tint[0] + rng.random_range(40.0..90.0),
            0.5 * tint[1] + rng.random_range(40.0..90.0),
            0.5 * tint[2] + rng.random_range(40.0..90.0),
        ];
        let waves = (0..5)
            .map(|_| {
                let f = rng.random_range(0.02f32..0.11);
                let theta = rng.random_range(0.0f32..std::f32::consts::PI);
                let a = rng.random_range(6.0f32..14.0);
                let mix = [
                    a * rng.random_range(0.6f32..1.0),
                    a * rng.random_range(0.6f32..1.0),
                    a * rng.random_range(0.6f32..1.0),
                ];
                (
                    f * theta.cos(),
                    f * theta.sin(),
                    rng.random_range(0.0f32..std::f32::consts::TAU),
                    mix,
                )
            })
            .collect();
        Self { base, waves }
    }

    pub fn sample(&self, u: f32, y: f32) -> [f32; 3] {
        let mut c = self.base;
        for &(fu, fy, ph, amp) in &self.waves {
            let s = (std::f32::consts::TAU * (fu * u + fy * y) + ph).sin();
            for k in 0..3 {
                c[k] += amp[k] * s;
            }
        }
        c.map(|v| v.clamp(0.0, 255.0))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub kind: ShapeKind,
    pub class_id: u8,
    pub disparity: f32,
    pub center: (f32, f32),
    pub half_size: (f32, f32),
    pub texture: Texture,
}

impl SceneObject {
    /// Whether left-view position `(u, y)` lies inside the object.
    pub fn contains(&self, u: f32, y: f32) -> bool {
        let dx = (u - self.center.0) / self.half_size.0;
        let dy = (y - self.center.1) / self.half_size.1;
        match self.kind {
            ShapeKind::Rect => dx.abs() <= 1.0 && dy.abs() <= 1.0,
            ShapeKind::Ellipse => dx * dx + dy * dy <= 1.0,
            ShapeKind::Diamond => dx.abs() + dy.abs() <= 1.0,
            ShapeKind::Triangle => (-1.0..=1.0).contains(&dy) && dx.abs() <= 0.5 * (dy + 1.0),
        }
    }
}

/// Background disparity `a + b·x + c·y`.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub a: f32,
    pub b: f32,
    pub c: f32,
    pub texture: Texture,
}

impl Plane {
    pub fn disparity(&self, x: f32, y: f32) -> f32 {
        self.a + self.b * x + self.c * y
    }

    /// Left-view column of the plane point seen at right-view column `xr`.
    pub fn source_column(&self, xr: f32, y: f32) -> f32 {
        (xr + self.a + self.c * y) / (1.0 - self.b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    pub background: Plane,
    /// Sorted by increasing disparity (far to near).
    pub objects: Vec<SceneObject>,
}

/// Which surface is seen: `None` for the background, otherwise an object index.
pub type Surface = Option<usize>;

impl Scene {
    /// Frontmost surface at left-view position `(x, y)`.
    pub fn left_surface(&self, x: f32, y: f32) -> Surface {
        (0..self.objects.len())
            .rev()
            .find(|&i| self.objects[i].contains(x, y))
    }

    /// Frontmost surface visible at right-view position `(xr, y)`, with the
    /// left-view column it comes from.
    pub fn right_surface(&self, xr: f32, y: f32) -> (Surface, f32) {
        for i in (0..self.objects.len()).rev() {
            let o = &self.objects[i];
            let u = xr + o.disparity;
            if o.contains(u, y) {
                return (Some(i), u);
            }
        }
        (None, self.background.source_column(xr, y))
    }

    pub fn surface_disparity(&self, s: Surface, x: f32, y: f32) -> f32 {
        match s {
            Some(i) => self.objects[i].disparity,
            None => self.background.disparity(x, y),
        }
    }

    fn colour(&self, s: Surface, u: f32, y: f32) -> [f32; 3] {
        match s {
            Some(i) => self.objects[i].texture.sample(u, y),
            None => self.background.texture.sample(u, y),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    /// `3×H×W`, values in [0, 255].
    pub left: Tensor<f32>,
    pub right: Tensor<f32>,
    /// `1×H×W`, pixels.
    pub disparity: Tensor<f32>,
    /// `H·W` class ids.
    pub semantics: Vec<u8>,
    /// `H·W`, true where a nearer surface hides the pixel in the right view.
    pub occlusion: Vec<bool>,
    pub scene: Scene,
}

const PALETTE: [[f32; 3]; 8] = [
    [90.0, 110.0, 90.0],
    [200.0, 60.0, 60.0],
    [60.0, 80.0, 200.0],
    [220.0, 200.0, 60.0],
    [160.0, 60.0, 200.0],
    [60.0, 200.0, 200.0],
    [230.0, 140.0, 40.0],
    [140.0, 140.0, 140.0],
];

fn random_scene(seed: u64, p: &SceneParams) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (p.height as f32, p.width as f32);
    let background = match p.constant_background {
        Some(d) => Plane {
            a: d,
            b: 0.0,
            c: 0.0,
            texture: Texture::random(&mut rng, PALETTE[0]),
        },
        None => {
            // disparity grows towards the bottom of the image and stays below
            // half the range so objects can sit in front of it
            let lo = rng.random_range(0.05..0.15) * p.max_disp;
            let hi = rng.random_range(0.3..0.5) * p.max_disp;
            let b = rng.random_range(-0.3f32..0.3) * (hi - lo) / w;
            let c = (hi - lo - b.abs() * w) / h;
            let a = lo - b.min(0.0) * w;
            Plane {
                a,
                b,
                c,
                texture: Texture::random(&mut rng, PALETTE[0]),
            }
        }
    };
    let bg_max = match p.constant_background {
        Some(d) => d,
        None => 0.5 * p.max_disp,
    };
    let mut disps: Vec<f32> = (0..p.n_objects)
        .map(|_| rng.random_range(bg_max + 1.0..=p.max_disp.max(bg_max + 1.5)))
        .collect();
    disps.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    // keep disparities distinct so depth order is unambiguous
    for i in 1..disps.len() {
        if disps[i] <= disps[i - 1] {
            disps[i] = disps[i - 1] + 0.25;
        }
    }
    let objects = disps
        .into_iter()
        .map(|disparity| {
            let kind = ShapeKind::ALL[rng.random_range(0..4)];
            let class_id = kind.class_id(p.n_classes);
            let half_size = (
                rng.random_range(0.08..0.22) * w,
                rng.random_range(0.12..0.3) * h,
            );
            let center = (
                rng.random_range(0.1..0.9) * w + 0.5 * disparity,
                rng.random_range(0.15..0.85) * h,
            );
            let tint = PALETTE[class_id as usize % PALETTE.len()];
            SceneObject {
                kind,
                class_id,
                disparity,
                center,
                half_size,
                texture: Texture::random(&mut rng, tint),
            }
        })
        .collect();
    Scene {
        height: p.height,
        width: p.width,
        background,
        objects,
    }
}

/// Renders a scene; fully determined by `seed` and `params`.
pub fn generate_scene(seed: u64, params: &SceneParams) -> Result<SyntheticSample> {
    params.validate()?;
    let scene = random_scene(seed, params);
    Ok(render(scene))
}

/// A fronto-parallel textured plane at integer disparity `d`: the right view
/// is the left view shifted by `d` columns.
pub fn generate_translation(seed: u64, height: usize, width: usize, d: u32) -> Result<SyntheticSample> {
    let params = SceneParams {
        height,
        width,
        n_objects: 0,
        max_disp: MAX_DISPARITY,
        n_classes: 1,
        constant_background: Some(d as f32),
    };
    generate_scene(seed, &params)
}

pub fn render(scene: Scene) -> SyntheticSample {
    let (h, w) = (scene.height, scene.width);
    let hw = h * w;
    let mut left = vec![0f32; 3 * hw];
    let mut right = vec![0f32; 3 * hw];
    let mut disparity = vec![0f32; hw];
    let mut semantics = vec![0u8; hw];
    let mut occlusion = vec![false; hw];
    for y in 0..h {
        let yf = y as f32;
        for x in 0..w {
            let xf = x as f32;
            let i = y * w + x;
            let s = scene.left_surface(xf, yf);
            let d = scene.surface_disparity(s, xf, yf);
            let cl = scene.colour(s, xf, yf);
            disparity[i] = d;
            semantics[i] = s.map_or(0, |k| scene.objects[k].class_id);
            let (seen, _) = scene.right_surface(xf - d, yf);
            occlusion[i] = seen != s;

            let (rs, u) = scene.right_surface(xf, yf);
            let cr = scene.colour(rs, u, yf);
            for c in 0..3 {
                left[c * hw + i] = cl[c];
                right[c * hw + i] = cr[c];
            }
        }
    }
    SyntheticSample {
        left: Tensor::new(vec![3, h, w], left).expect("extents"),
        right: Tensor::new(vec![3, h, w], right).expect("extents"),
        disparity: Tensor::new(vec![1, h, w], disparity).expect("extents"),
        semantics,
        occlusion,
        scene,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sample() {
        let p = SceneParams::desk(64, 128);
        assert_eq!(generate_scene(7, &p).unwrap(), generate_scene(7, &p).unwrap());
        assert_ne!(generate_scene(7, &p).unwrap().left, generate_scene(8, &p).unwrap().left);
    }

    #[test]
    fn pure_translation_is_a_shift() {
        let d = 5;
        let s = generate_translation(3, 32, 64, d).unwrap();
        let (h, w) = (32, 64);
        let mut worst = 0f32;
        for c in 0..3 {
            for y in 0..h {
                for x in d as usize..w {
                    let r = s.right.data()[(c * h + y) * w + x - d as usize];
                    let l = s.left.data()[(c * h + y) * w + x];
                    worst = worst.max((r - l).abs());
                }
            }
        }
        assert!(worst < 1e-3, "{worst}");
        assert!(s.occlusion.iter().all(|&o| !o));
        assert!(s.disparity.data().iter().all(|&v| v == d as f32));
    }

    #[test]
    fn ground_truth_is_consistent_per_object() {
        let p = SceneParams {
            n_objects: 4,
            ..SceneParams::desk(64, 128)
        };
        for seed in 0..5 {
            let s = generate_scene(seed, &p).unwrap();
            assert!(s.disparity.min() >= 0.0 && s.disparity.max() <= p.max_disp + 1.0);
            for y in 0..64 {
                for x in 0..128 {
                    let i = y * 128 + x;
                    if let Some(k) = s.scene.left_surface(x as f32, y as f32) {
                        let o = &s.scene.objects[k];
                        assert_eq!(s.semantics[i], o.class_id);
                        assert_eq!(s.disparity.data()[i], o.disparity);
                    } else {
                        assert_eq!(s.semantics[i], 0);
                    }
                }
            }
        }
    }

    #[test]
    fn warping_right_view_reconstructs_left() {
        let p = SceneParams::desk(64, 128);
        let (h, w) = (64, 128);
        for seed in 0..5 {
            let s = generate_scene(seed, &p).unwrap();
            let (l, r) = (s.left.data(), s.right.data());
            let (mut err, mut n) = (0f64, 0usize);
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let xr = x as f32 - s.disparity.data()[i];
                    if s.occlusion[i] || xr < 0.0 || xr > (w - 1) as f32 {
                        continue;
                    }
                    let (x0, t) = (xr.floor() as usize, xr.fract());
                    let x1 = (x0 + 1).min(w - 1);
                    for c in 0..3 {
                        let row = (c * h + y) * w;
                        let v = (1.0 - t) * r[row + x0] + t * r[row + x1];
                        err += (v - l[row + x]).abs() as f64;
                        n += 1;
                    }
                }
            }
            let mae = err / n as f64;
            assert!(mae < 2.0, "seed {seed}: {mae}");
        }
    }

    #[test]
    fn occlusion_matches_brute_force() {
        let p = SceneParams {
            n_objects: 5,
            ..SceneParams::desk(64, 128)
        };
        let mut any = false;
        for seed in 0..5 {
            let s = generate_scene(seed, &p).unwrap();
            for y in 0..64 {
                for x in 0..128 {
                    let i = y * 128 + x;
                    let d = s.disparity.data()[i];
                    let xr = x as f32 - d;
                    // any strictly nearer object covering the same right-view point
                    let hidden = s
                        .scene
                        .objects
                        .iter()
                        .any(|o| o.disparity > d && o.contains(xr + o.disparity, y as f32));
                    assert_eq!(s.occlusion[i], hidden, "seed {seed} ({x},{y})");
                    any |= hidden;
                }
            }
        }
        assert!(any);
    }

    #[test]
    fn invalid_params_are_rejected() {
        let mut p = SceneParams::desk(64, 128);
        p.max_disp = 200.0;
        assert!(generate_scene(0, &p).is_err());
        let p = SceneParams::desk(60, 128);
        assert!(matches!(generate_scene(0, &p), Err(Error::NotDivisible { .. })));
    }
}
