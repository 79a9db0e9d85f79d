//! Synthetic paired data: one hard-rasterized filled shape per image, with
//! either its binary mask or its 8-connected boundary as the control map.
//!
//! Sample `i` of a dataset depends only on `(seed, i)`: each index reads its
//! own ChaCha stream, so subsets and parallel generation agree bit for bit.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Tensor};

pub const MIN_SIZE: usize = 16;
pub const BACKGROUND: f32 = -1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Triangle,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlKind {
    #[default]
    Mask,
    Edge,
}

impl std::fmt::Display for ControlKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ControlKind::Mask => "mask",
            ControlKind::Edge => "edge",
        })
    }
}

/// Geometry and brightness of one shape, in pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub center: (f64, f64),
    /// Half extents along the shape's own axes.
    pub size: (f64, f64),
    pub rotation: f64,
    pub intensity: f64,
}

impl ShapeSpec {
    /// Draw a shape that fits entirely inside a `size x size` canvas.
    pub fn random(rng: &mut impl Rng, size: usize) -> Self {
        let s = size as f64;
        let kind = match rng.gen_range(0..3) {
            0 => ShapeKind::Ellipse,
            1 => ShapeKind::Rectangle,
            _ => ShapeKind::Triangle,
        };
        let a = rng.gen_range(0.12 * s..0.3 * s);
        let b = rng.gen_range(0.12 * s..0.3 * s);
        let rotation = rng.gen_range(0.0..PI);
        let r = Self::radius_of(kind, a, b);
        let cx = rng.gen_range(r..=s - r);
        let cy = rng.gen_range(r..=s - r);
        let intensity = 1.0 - rng.gen_range(0.0..0.8);
        ShapeSpec {
            kind,
            center: (cx, cy),
            size: (a, b),
            rotation,
            intensity,
        }
    }

    fn radius_of(kind: ShapeKind, a: f64, b: f64) -> f64 {
        match kind {
            ShapeKind::Rectangle => a.hypot(b),
            ShapeKind::Ellipse | ShapeKind::Triangle => a.max(b),
        }
    }

    /// Radius of a disc around the centre that contains the whole shape.
    pub fn bounding_radius(&self) -> f64 {
        Self::radius_of(self.kind, self.size.0, self.size.1)
    }

    /// Whether the point `(x, y)` (pixel units) is inside the shape.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let (sin, cos) = self.rotation.sin_cos();
        let u = cos * dx + sin * dy;
        let v = -sin * dx + cos * dy;
        let (a, b) = self.size;
        match self.kind {
            ShapeKind::Ellipse => (u / a).powi(2) + (v / b).powi(2) <= 1.0,
            ShapeKind::Rectangle => u.abs() <= a && v.abs() <= b,
            ShapeKind::Triangle => {
                let p = [(0.0, -b), (a, b), (-a, b)];
                let edge = |(x0, y0): (f64, f64), (x1, y1): (f64, f64)| {
                    (x1 - x0) * (v - y0) - (y1 - y0) * (u - x0)
                };
                let s = [edge(p[0], p[1]), edge(p[1], p[2]), edge(p[2], p[0])];
                s.iter().all(|&e| e >= 0.0) || s.iter().all(|&e| e <= 0.0)
            }
        }
    }

    /// Binary `(1, 1, size, size)` indicator sampled at pixel centres.
    pub fn rasterize(&self, size: usize) -> FeatureMap {
        FeatureMap::from_fn([1, 1, size, size], |i| {
            let (y, x) = (i / size, i % size);
            if self.contains(x as f64 + 0.5, y as f64 + 0.5) {
                1.0
            } else {
                0.0
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControlSample {
    /// `(1, 1, S, S)` in `[-1, 1]`; background is exactly `-1`.
    pub image: FeatureMap,
    /// `(1, 1, S, S)`, exactly `{0, 1}`.
    pub control: FeatureMap,
    pub kind: ControlKind,
    pub seed: u64,
    pub index: u64,
    pub shape: Option<ShapeSpec>,
}

fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Sample `index` of the dataset identified by `seed`.
pub fn generate_one(
    seed: u64,
    index: u64,
    size: usize,
    kind: ControlKind,
) -> Result<ControlSample> {
    if size < MIN_SIZE {
        return Err(Error::Config(format!(
            "image size {size} is below the minimum {MIN_SIZE}"
        )));
    }
    let spec = ShapeSpec::random(&mut sample_rng(seed, index), size);
    let mask = spec.rasterize(size);
    let level = (2.0 * spec.intensity - 1.0) as f32;
    let image = mask.map(|m| if m == 1.0 { level } else { BACKGROUND });
    let control = match kind {
        ControlKind::Mask => mask,
        ControlKind::Edge => render_edge(&mask)?,
    };
    Ok(ControlSample {
        image,
        control,
        kind,
        seed,
        index,
        shape: Some(spec),
    })
}

pub fn generate(
    seed: u64,
    count: usize,
    size: usize,
    kind: ControlKind,
) -> Result<Vec<ControlSample>> {
    if count == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    (0..count as u64)
        .map(|i| generate_one(seed, i, size, kind))
        .collect()
}

/// Pixels of `mask` that are 1 and have a 0 (or the canvas border) among
/// their 8 neighbours.
pub fn render_edge(mask: &FeatureMap) -> Result<FeatureMap> {
    let [b, c, h, w] = mask.dims4()?;
    if let Some(v) = mask.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Config(format!(
            "render_edge expects a binary mask, found {v}"
        )));
    }
    let d = mask.data();
    let mut out = vec![0.0f32; d.len()];
    for p in 0..b * c {
        let plane = &d[p * h * w..(p + 1) * h * w];
        let at = |y: isize, x: isize| -> f32 {
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                0.0
            } else {
                plane[y as usize * w + x as usize]
            }
        };
        for y in 0..h as isize {
            for x in 0..w as isize {
                if at(y, x) != 1.0 {
                    continue;
                }
                let boundary = (-1..=1)
                    .any(|dy| (-1..=1).any(|dx| (dy != 0 || dx != 0) && at(y + dy, x + dx) == 0.0));
                if boundary {
                    out[p * h * w + y as usize * w + x as usize] = 1.0;
                }
            }
        }
    }
    Tensor::new(mask.shape().to_vec(), out)
}

/// Parameters that identify a dataset split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetKey {
    pub seed: u64,
    pub count: usize,
    pub size: usize,
    pub kind: ControlKind,
}

impl DatasetKey {
    pub fn file_name(&self) -> String {
        format!(
            "{}-s{}-n{}-{}px.cdar",
            self.kind, self.seed, self.count, self.size
        )
    }
}

/// A split held as two stacked `(count, 1, S, S)` tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub key: DatasetKey,
    pub images: FeatureMap,
    pub controls: FeatureMap,
}

impl Dataset {
    pub fn generate(key: DatasetKey) -> Result<Self> {
        let samples = generate(key.seed, key.count, key.size, key.kind)?;
        Self::from_samples(key, &samples)
    }

    pub fn from_samples(key: DatasetKey, samples: &[ControlSample]) -> Result<Self> {
        let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
        let controls: Vec<_> = samples.iter().map(|s| &s.control).collect();
        Ok(Dataset {
            key,
            images: Tensor::concat_batch(&images)?,
            controls: Tensor::concat_batch(&controls)?,
        })
    }

    pub fn len(&self) -> usize {
        self.key.count
    }

    pub fn is_empty(&self) -> bool {
        self.key.count == 0
    }

    /// Stack the listed samples into a batch `(images, controls)`.
    pub fn batch(&self, indices: &[usize]) -> Result<(FeatureMap, FeatureMap)> {
        let s = self.key.size;
        let per = s * s;
        let mut img = Vec::with_capacity(indices.len() * per);
        let mut ctl = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Config(format!(
                    "sample index {i} out of range 0..{}",
                    self.len()
                )));
            }
            img.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            ctl.extend_from_slice(&self.controls.data()[i * per..(i + 1) * per]);
        }
        let shape = [indices.len(), 1, s, s];
        Ok((Tensor::new(shape, img)?, Tensor::new(shape, ctl)?))
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let meta = serde_json::to_string(&self.key).map_err(|e| Error::Archive(e.to_string()))?;
        let mut a = Archive::new(meta);
        a.push("images", self.images.clone());
        a.push("controls", self.controls.clone());
        Ok(a)
    }

    pub fn from_archive(mut a: Archive, expected: &DatasetKey) -> Result<Self> {
        let key: DatasetKey =
            serde_json::from_str(&a.config).map_err(|e| Error::Archive(e.to_string()))?;
        if &key != expected {
            return Err(Error::Archive(format!(
                "cache key {key:?} does not match {expected:?}"
            )));
        }
        let shape = [key.count, 1, key.size, key.size];
        let images = a.take("images")?;
        let controls = a.take("controls")?;
        images.expect_shape(&shape, "cached images")?;
        controls.expect_shape(&shape, "cached controls")?;
        Ok(Dataset {
            key,
            images,
            controls,
        })
    }

    /// Read the split from `dir` when a valid cache file exists, otherwise
    /// generate it and write the cache.
    pub fn load_or_generate(dir: &Path, key: DatasetKey) -> Result<(Self, PathBuf)> {
        let path = dir.join(key.file_name());
        if path.exists() {
            match Archive::load(&path).and_then(|a| Self::from_archive(a, &key)) {
                Ok(ds) => return Ok((ds, path)),
                Err(e) => log::warn!("regenerating dataset cache {}: {e}", path.display()),
            }
        }
        let ds = Self::generate(key)?;
        ds.to_archive()?.save(&path)?;
        Ok((ds, path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn count(m: &FeatureMap) -> usize {
        m.data().iter().filter(|&&v| v == 1.0).count()
    }

    #[test]
    fn generation_is_deterministic_and_index_addressable() {
        let a = generate(3, 5, 32, ControlKind::Mask).unwrap();
        let b = generate(3, 5, 32, ControlKind::Mask).unwrap();
        assert_eq!(a, b);
        assert_eq!(generate_one(3, 4, 32, ControlKind::Mask).unwrap(), a[4]);
        assert_ne!(generate(4, 5, 32, ControlKind::Mask).unwrap()[0], a[0]);
    }

    #[test]
    fn mask_marks_exactly_the_foreground() {
        for s in generate(9, 50, 64, ControlKind::Mask).unwrap() {
            assert!(count(&s.control) > 0);
            for (&img, &c) in s.image.data().iter().zip(s.control.data()) {
                assert_eq!(c == 1.0, img > BACKGROUND);
                assert!((-1.0..=1.0).contains(&img));
            }
            let spec = s.shape.unwrap();
            assert!(spec.intensity > 0.2 && spec.intensity <= 1.0);
            let r = spec.bounding_radius();
            assert!(spec.center.0 >= r && spec.center.0 <= 64.0 - r);
            assert!(spec.center.1 >= r && spec.center.1 <= 64.0 - r);
        }
    }

    #[test]
    fn edge_examples() {
        let rect = ShapeSpec {
            kind: ShapeKind::Rectangle,
            center: (8.0, 8.0),
            size: (2.0, 2.0),
            rotation: 0.0,
            intensity: 1.0,
        };
        let mask = rect.rasterize(16);
        assert_eq!(count(&mask), 16);
        assert_eq!(count(&render_edge(&mask).unwrap()), 12);
        assert_eq!(
            count(&render_edge(&FeatureMap::zeros([1, 1, 16, 16])).unwrap()),
            0
        );
        let mut dot = FeatureMap::zeros([1, 1, 16, 16]);
        dot.data_mut()[5 * 16 + 7] = 1.0;
        assert!(render_edge(&dot).unwrap().bit_eq(&dot));
        let full = FeatureMap::full([1, 1, 4, 4], 1.0);
        assert_eq!(count(&render_edge(&full).unwrap()), 12);
        assert!(render_edge(&FeatureMap::full([1, 1, 4, 4], 0.5)).is_err());
    }

    #[test]
    fn rejects_small_canvas_and_empty_request() {
        assert!(generate(0, 1, 15, ControlKind::Mask).is_err());
        assert!(generate(0, 0, 32, ControlKind::Mask).is_err());
    }

    #[test]
    fn shape_kinds_are_balanced() {
        let mut counts = [0usize; 3];
        for i in 0..1000 {
            let spec = ShapeSpec::random(&mut sample_rng(17, i), 64);
            counts[spec.kind as usize] += 1;
        }
        for c in counts {
            assert!((c as f64 / 1000.0 - 1.0 / 3.0).abs() <= 0.05, "{counts:?}");
        }
    }

    #[test]
    fn dataset_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let key = DatasetKey {
            seed: 1,
            count: 4,
            size: 16,
            kind: ControlKind::Edge,
        };
        let (a, path) = Dataset::load_or_generate(dir.path(), key).unwrap();
        assert!(path.exists());
        let (b, _) = Dataset::load_or_generate(dir.path(), key).unwrap();
        assert_eq!(a, b);
        let (imgs, ctls) = a.batch(&[3, 0]).unwrap();
        let s = generate_one(1, 3, 16, ControlKind::Edge).unwrap();
        assert_eq!(&imgs.data()[..256], s.image.data());
        assert_eq!(&ctls.data()[..256], s.control.data());
        let other = DatasetKey { seed: 2, ..key };
        assert!(Dataset::from_archive(Archive::load(&path).unwrap(), &other).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn edge_is_subset_of_mask_and_shrinks(seed in any::<u64>(), index in 0u64..1000) {
            let s = generate_one(seed, index, 32, ControlKind::Mask).unwrap();
            let e = render_edge(&s.control).unwrap();
            let ee = render_edge(&e).unwrap();
            for ((&m, &e1), &e2) in s.control.data().iter().zip(e.data()).zip(ee.data()) {
                prop_assert!(e1 <= m);
                prop_assert!(e2 <= e1);
            }
        }
    }
}
