//! On-disk stereo datasets.
//!
//! ```text
//! <root>/<split>/left/000000.png    RGB8
//! <root>/<split>/right/000000.png   RGB8
//! <root>/<split>/disp/000000.png    16-bit, value / 256 = pixels, 0 = invalid
//! <root>/<split>/sem/000000.png     8-bit class ids, 255 = unlabelled (optional)
//! ```

use std::path::{Path, PathBuf};

use rand::Rng;

use super::raster;
use super::synth::{generate_scene, SceneParams};
use crate::encoder::check_divisible;
use crate::error::{Error, Result};
use crate::objective::Targets;
use crate::semnet::IGNORE_ID;
use crate::tensor::Tensor;

/// One rectified stereo pair with ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    /// `3×H×W`, [0, 255].
    pub left: Tensor<f32>,
    pub right: Tensor<f32>,
    /// `1×H×W`.
    pub disparity: Tensor<f32>,
    pub valid: Vec<bool>,
    pub classes: Option<Vec<u8>>,
}

impl Pair {
    pub fn height(&self) -> usize {
        self.left.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.left.shape()[2]
    }

    /// Crops a `h×w` window with top-left corner `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Pair> {
        let (hh, ww) = (self.height(), self.width());
        if y0 + h > hh || x0 + w > ww {
            return Err(Error::contract(
                "crop",
                format!("window {h}x{w} at ({y0},{x0}) exceeds {hh}x{ww}"),
            ));
        }
        let cut = |t: &Tensor<f32>| {
            let c = t.shape()[0];
            let src = t.data();
            let mut out = Vec::with_capacity(c * h * w);
            for k in 0..c {
                for y in y0..y0 + h {
                    let row = (k * hh + y) * ww;
                    out.extend_from_slice(&src[row + x0..row + x0 + w]);
                }
            }
            Tensor::new(vec![c, h, w], out).expect("extents")
        };
        fn cut_vec<V: Copy>(v: &[V], ww: usize, y0: usize, x0: usize, h: usize, w: usize) -> Vec<V> {
            (y0..y0 + h)
                .flat_map(|y| v[y * ww + x0..y * ww + x0 + w].iter().copied())
                .collect()
        }
        Ok(Pair {
            left: cut(&self.left),
            right: cut(&self.right),
            disparity: cut(&self.disparity),
            valid: cut_vec(&self.valid, ww, y0, x0, h, w),
            classes: self.classes.as_ref().map(|c| cut_vec(c, ww, y0, x0, h, w)),
        })
    }

    /// Uniformly placed crop of the given size.
    pub fn random_crop<R: Rng>(&self, rng: &mut R, h: usize, w: usize) -> Result<Pair> {
        if h > self.height() || w > self.width() {
            return Err(Error::contract(
                "random_crop",
                format!("crop {h}x{w} larger than {}x{}", self.height(), self.width()),
            ));
        }
        let y0 = rng.random_range(0..=self.height() - h);
        let x0 = rng.random_range(0..=self.width() - w);
        self.crop(y0, x0, h, w)
    }
}

/// Pairs stacked along the batch axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `N×3×H×W`.
    pub left: Tensor<f32>,
    pub right: Tensor<f32>,
    /// `N×1×H×W`.
    pub disparity: Tensor<f32>,
    pub valid: Vec<bool>,
    pub classes: Option<Vec<u8>>,
}

impl Batch {
    pub fn from_pairs(pairs: &[Pair]) -> Result<Batch> {
        let Some(first) = pairs.first() else {
            return Err(Error::contract("batch", "no pairs"));
        };
        let (h, w) = (first.height(), first.width());
        for p in pairs {
            if (p.height(), p.width()) != (h, w) {
                return Err(Error::shape("batch", "extents", format!("{h}x{w}"), format!("{}x{}", p.height(), p.width())));
            }
        }
        let stack = |f: fn(&Pair) -> &Tensor<f32>| -> Result<Tensor<f32>> {
            let parts: Vec<Tensor<f32>> = pairs
                .iter()
                .map(|p| {
                    let t = f(p);
                    let mut s = vec![1];
                    s.extend_from_slice(t.shape());
                    t.clone().reshape(s)
                })
                .collect::<Result<_>>()?;
            Tensor::stack_batch(&parts.iter().collect::<Vec<_>>())
        };
        let classes = if pairs.iter().all(|p| p.classes.is_some()) {
            Some(pairs.iter().flat_map(|p| p.classes.clone().expect("checked")).collect())
        } else {
            None
        };
        Ok(Batch {
            left: stack(|p| &p.left)?,
            right: stack(|p| &p.right)?,
            disparity: stack(|p| &p.disparity)?,
            valid: pairs.iter().flat_map(|p| p.valid.iter().copied()).collect(),
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.left.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn targets(&self) -> Targets<f32> {
        Targets {
            disparity: self.disparity.clone(),
            valid: self.valid.clone(),
            classes: self.classes.clone(),
            ignore: IGNORE_ID,
        }
    }
}

/// Index over one split of a dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    dir: PathBuf,
    names: Vec<String>,
}

impl Dataset {
    pub fn open(root: &Path, split: &str) -> Result<Self> {
        let dir = root.join(split);
        let left = dir.join("left");
        let rd = std::fs::read_dir(&left).map_err(|e| Error::io(&left, e))?;
        let mut names = Vec::new();
        for entry in rd {
            let entry = entry.map_err(|e| Error::io(&left, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if name.ends_with(".png") {
                names.push(name);
            }
        }
        names.sort();
        if names.is_empty() {
            return Err(Error::Format {
                path: left,
                msg: "no .png images".into(),
            });
        }
        Ok(Self { dir, names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn load(&self, i: usize) -> Result<Pair> {
        let name = &self.names[i];
        let left = raster::read_rgb(&self.dir.join("left").join(name))?;
        let right = raster::read_rgb(&self.dir.join("right").join(name))?;
        let (disparity, valid) = raster::read_disparity(&self.dir.join("disp").join(name))?;
        let sem = self.dir.join("sem").join(name);
        let classes = if sem.exists() {
            let (h, w, ids) = raster::read_classes(&sem)?;
            if (h, w) != (left.shape()[1], left.shape()[2]) {
                return Err(Error::Format {
                    path: sem,
                    msg: format!("class map {h}x{w} does not match image"),
                });
            }
            Some(ids)
        } else {
            None
        };
        if left.shape() != right.shape() || disparity.shape()[1..] != left.shape()[1..] {
            return Err(Error::Format {
                path: self.dir.join("left").join(name),
                msg: format!(
                    "extents differ: left {:?} right {:?} disparity {:?}",
                    left.shape(),
                    right.shape(),
                    disparity.shape()
                ),
            });
        }
        Ok(Pair {
            left,
            right,
            disparity,
            valid,
            classes,
        })
    }

    pub fn load_all(&self) -> Result<Vec<Pair>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }
}

pub fn file_name(i: usize) -> String {
    format!("{i:06}.png")
}

pub fn write_pair(dir: &Path, name: &str, p: &Pair) -> Result<()> {
    raster::write_rgb(&p.left, &dir.join("left").join(name))?;
    raster::write_rgb(&p.right, &dir.join("right").join(name))?;
    raster::write_disparity(&p.disparity, &p.valid, &dir.join("disp").join(name))?;
    if let Some(c) = &p.classes {
        raster::write_classes(c, p.height(), p.width(), &dir.join("sem").join(name))?;
    }
    Ok(())
}

/// In-memory synthetic pair; every pixel carries ground truth.
pub fn synthetic_pair(seed: u64, params: &SceneParams) -> Result<Pair> {
    let s = generate_scene(seed, params)?;
    Ok(Pair {
        valid: vec![true; s.semantics.len()],
        classes: Some(s.semantics),
        left: s.left,
        right: s.right,
        disparity: s.disparity,
    })
}

/// Writes `count` synthetic pairs, seeded `seed, seed + 1, …`.
pub fn write_synthetic(root: &Path, split: &str, count: usize, seed: u64, params: &SceneParams) -> Result<()> {
    check_divisible(params.height, params.width)?;
    let dir = root.join(split);
    for i in 0..count {
        let p = synthetic_pair(seed + i as u64, params)?;
        write_pair(&dir, &file_name(i), &p)?;
    }
    Ok(())
}
