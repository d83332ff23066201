//! Synthetic four-shape point-cloud dataset.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binmodules::PointCloud;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Sphere,
    Cube,
    Cylinder,
    Cone,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Sphere, Shape::Cube, Shape::Cylinder, Shape::Cone];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Sphere => "sphere",
            Shape::Cube => "cube",
            Shape::Cylinder => "cylinder",
            Shape::Cone => "cone",
        }
    }

    /// Largest distance from the origin of the raw surface.
    fn radius(self) -> f64 {
        match self {
            Shape::Sphere => 1.0,
            Shape::Cube => 3f64.sqrt(),
            Shape::Cylinder | Shape::Cone => 2f64.sqrt(),
        }
    }

    /// Uniform sample from the surface, centered in its bounding box.
    fn sample(self, rng: &mut ChaCha8Rng) -> [f64; 3] {
        match self {
            Shape::Sphere => {
                let v: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-300);
                [v[0] / n, v[1] / n, v[2] / n]
            }
            Shape::Cube => {
                let face = rng.random_range(0..6);
                let (a, b): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                let s = if face % 2 == 0 { 1.0 } else { -1.0 };
                match face / 2 {
                    0 => [s, a, b],
                    1 => [a, s, b],
                    _ => [a, b, s],
                }
            }
            Shape::Cylinder => {
                // radius 1, height 2: side area 4 pi, caps pi each
                let t = rng.random_range(0.0..2.0 * PI);
                let u: f64 = rng.random_range(0.0..6.0);
                if u < 4.0 {
                    [t.cos(), t.sin(), rng.random_range(-1.0..1.0)]
                } else {
                    let r = rng.random_range(0.0f64..1.0).sqrt();
                    [r * t.cos(), r * t.sin(), if u < 5.0 { 1.0 } else { -1.0 }]
                }
            }
            Shape::Cone => {
                // apex at z = 1, unit base at z = -1: lateral area sqrt(5) pi, base pi
                let t = rng.random_range(0.0..2.0 * PI);
                let lateral = 5f64.sqrt();
                if rng.random_range(0.0..lateral + 1.0) < lateral {
                    let r = rng.random_range(0.0f64..1.0).sqrt();
                    [r * t.cos(), r * t.sin(), 1.0 - 2.0 * r]
                } else {
                    let r = rng.random_range(0.0f64..1.0).sqrt();
                    [r * t.cos(), r * t.sin(), -1.0]
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub clouds: Vec<PointCloud>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    pub fn labels(&self) -> Result<Vec<usize>> {
        self.clouds
            .iter()
            .map(|c| c.label.ok_or_else(|| Error::InvalidArgument("unlabeled cloud".into())))
            .collect()
    }
}

/// `n_per_class` clouds of each shape, classes interleaved. Points are
/// uniform on the surface scaled to unit radius, jittered by
/// `N(0, noise_sigma)` and rotated by a random angle about the z axis.
pub fn synth_dataset(seed: u64, n_per_class: usize, points_per_cloud: usize, noise_sigma: f64) -> Result<Dataset> {
    if points_per_cloud < 64 {
        return Err(Error::InvalidArgument(format!("{points_per_cloud} points per cloud; at least 64 needed")));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise sigma {noise_sigma}")));
    }
    let jitter = Normal::new(0.0, noise_sigma).expect("checked sigma");
    let mut clouds = Vec::with_capacity(4 * n_per_class);
    for i in 0..n_per_class {
        for (c, shape) in Shape::ALL.into_iter().enumerate() {
            let index = (i * Shape::ALL.len() + c) as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(index);
            let theta = rng.random_range(0.0..2.0 * PI);
            let (s, co) = theta.sin_cos();
            let r = shape.radius();
            let mut data = Vec::with_capacity(points_per_cloud * 3);
            for _ in 0..points_per_cloud {
                let p = shape.sample(&mut rng);
                let [x, y, z] = p.map(|v| v / r + jitter.sample(&mut rng));
                data.extend_from_slice(&[co * x - s * y, s * x + co * y, z]);
            }
            clouds.push(PointCloud::new(Tensor::new(points_per_cloud, 3, data), Some(c))?);
        }
    }
    Ok(Dataset {
        clouds,
        classes: Shape::ALL.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_labeled() {
        let a = synth_dataset(3, 2, 64, 0.01).unwrap();
        let b = synth_dataset(3, 2, 64, 0.01).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_dataset(4, 2, 64, 0.01).unwrap());
        assert_eq!(a.labels().unwrap(), vec![0, 1, 2, 3, 0, 1, 2, 3]);
        assert!(synth_dataset(0, 1, 63, 0.0).is_err());
    }

    #[test]
    fn noiseless_shapes_fit_unit_ball() {
        let d = synth_dataset(11, 3, 256, 0.0).unwrap();
        for pc in &d.clouds {
            for p in pc.points.iter_rows() {
                let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                if pc.label == Some(0) {
                    assert!((r - 1.0).abs() < 1e-6);
                } else {
                    assert!(r <= 1.0 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn rotation_is_about_up_axis() {
        // the z coordinate of a noiseless cube point stays in [-1/sqrt 3, 1/sqrt 3]
        let d = synth_dataset(5, 2, 128, 0.0).unwrap();
        let lim = 1.0 / 3f64.sqrt() + 1e-12;
        for pc in d.clouds.iter().filter(|c| c.label == Some(1)) {
            assert!(pc.points.iter_rows().all(|p| p[2].abs() <= lim));
        }
    }
}
