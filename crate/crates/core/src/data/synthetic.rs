//! Procedural shape images. Each class is a shape family drawn with random
//! position, size, rotation, stroke width, contrast and background, plus
//! additive Gaussian noise.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, Provenance, Split};
use crate::error::{Error, Result};
use crate::rng::{self, streams, Rng};
use crate::tensor::{Real, Tensor};

/// Shape families in class-index order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    /// Four arms at right angles from a centre point.
    Cross,
    /// Three arms: a bar with a perpendicular arm from its middle.
    Tee,
    /// Two arms at a right angle.
    Corner,
    /// Two opposite arms, a straight bar.
    Bar,
    Ring,
    Disk,
    Triangle,
    Checker,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 8] = [
        ShapeFamily::Cross,
        ShapeFamily::Tee,
        ShapeFamily::Corner,
        ShapeFamily::Bar,
        ShapeFamily::Ring,
        ShapeFamily::Disk,
        ShapeFamily::Triangle,
        ShapeFamily::Checker,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Height and width of the square images.
    pub size: usize,
    /// 1 (grayscale) or 3.
    pub channels: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 4,
            train_per_class: 500,
            test_per_class: 100,
            size: 16,
            channels: 1,
            noise: 0.1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let max = ShapeFamily::ALL.len();
        if self.classes < 2 || self.classes > max {
            return Err(Error::InvalidArgument(format!(
                "classes must lie in [2, {max}], got {}",
                self.classes
            )));
        }
        if self.size < 8 {
            return Err(Error::InvalidArgument(format!("image size must be at least 8, got {}", self.size)));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::InvalidArgument("samples per class must be positive".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::InvalidArgument(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::InvalidArgument(format!("noise must be non-negative, got {}", self.noise)));
        }
        Ok(())
    }
}

fn segment_distance((px, py): (f64, f64), (ax, ay): (f64, f64), (bx, by): (f64, f64)) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (ax + t * dx - px, ay + t * dy - py);
    (qx * qx + qy * qy).sqrt()
}

/// Coverage of a stroke at distance `d` from its centre line: full inside
/// the half-width, fading linearly over one pixel.
fn stroke(d: f64, half_width: f64) -> f64 {
    (1.0 - (d - half_width).max(0.0)).clamp(0.0, 1.0)
}

/// One shape instance with its random parameters fixed.
struct Shape {
    family: ShapeFamily,
    centre: (f64, f64),
    /// Arm length or radius in pixels.
    reach: f64,
    angle: f64,
    half_width: f64,
    arms: Vec<(f64, f64)>,
}

impl Shape {
    fn sample(family: ShapeFamily, size: usize, rng: &mut Rng) -> Shape {
        let n = size as f64;
        let centre = (rng.random_range(0.35 * n..0.65 * n), rng.random_range(0.35 * n..0.65 * n));
        let reach = rng.random_range(0.22 * n..0.34 * n);
        let angle = rng.random_range(0.0..TAU);
        let half_width = rng.random_range(0.45..0.75);
        let directions: &[f64] = match family {
            ShapeFamily::Cross => &[0.0, FRAC_PI_2, PI, 3.0 * FRAC_PI_2],
            ShapeFamily::Tee => &[0.0, FRAC_PI_2, PI],
            ShapeFamily::Corner => &[0.0, FRAC_PI_2],
            ShapeFamily::Bar => &[0.0, PI],
            _ => &[],
        };
        let arms = directions
            .iter()
            .map(|&d| (angle + d, reach * rng.random_range(0.7..1.0)))
            .collect();
        Shape {
            family,
            centre,
            reach,
            angle,
            half_width,
            arms,
        }
    }

    /// Coverage in `[0, 1]` at pixel centre `p`.
    fn coverage(&self, p: (f64, f64)) -> f64 {
        let (cx, cy) = self.centre;
        let (u, v) = (p.0 - cx, p.1 - cy);
        let r = (u * u + v * v).sqrt();
        match self.family {
            ShapeFamily::Cross | ShapeFamily::Tee | ShapeFamily::Corner | ShapeFamily::Bar => self
                .arms
                .iter()
                .map(|&(a, len)| {
                    let end = (cx + len * a.cos(), cy + len * a.sin());
                    stroke(segment_distance(p, self.centre, end), self.half_width)
                })
                .fold(0.0, f64::max),
            ShapeFamily::Ring => stroke((r - 0.8 * self.reach).abs(), self.half_width),
            ShapeFamily::Disk => stroke((r - 0.7 * self.reach).max(0.0), 0.0),
            ShapeFamily::Triangle => {
                let vertex = |k: f64| {
                    let a = self.angle + k * TAU / 3.0;
                    (cx + self.reach * a.cos(), cy + self.reach * a.sin())
                };
                let (a, b, c) = (vertex(0.0), vertex(1.0), vertex(2.0));
                let d = segment_distance(p, a, b)
                    .min(segment_distance(p, b, c))
                    .min(segment_distance(p, c, a));
                stroke(d, self.half_width)
            }
            ShapeFamily::Checker => {
                let (s, c) = self.angle.sin_cos();
                let (lu, lv) = (c * u + s * v, -s * u + c * v);
                let half = 0.8 * self.reach;
                if lu.abs() < half && lv.abs() < half && lu * lv > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

fn render_split<T: Real>(spec: &SyntheticSpec, per_class: usize, rng: &mut Rng) -> Result<(Tensor<T>, Vec<usize>)> {
    let (k, n, c) = (spec.classes, spec.size, spec.channels);
    let plane = n * n;
    let mut data = Vec::with_capacity(per_class * k * c * plane);
    let mut labels = Vec::with_capacity(per_class * k);
    for _ in 0..per_class {
        for (label, &family) in ShapeFamily::ALL[..k].iter().enumerate() {
            let shape = Shape::sample(family, n, rng);
            let background = rng.random_range(0.0..0.25);
            let contrast = rng.random_range(0.45..0.75);
            let tint: Vec<f64> = (0..c)
                .map(|_| if c == 1 { 1.0 } else { rng.random_range(0.6..1.0) })
                .collect();
            let cover: Vec<f64> = (0..plane)
                .map(|i| shape.coverage(((i % n) as f64 + 0.5, (i / n) as f64 + 0.5)))
                .collect();
            for &t in &tint {
                for &cv in &cover {
                    let z: f64 = rng.sample(StandardNormal);
                    let v = background + contrast * t * cv + spec.noise * z;
                    data.push(T::from_f64_lossy(v.clamp(0.0, 1.0)));
                }
            }
            labels.push(label);
        }
    }
    Ok((Tensor::from_vec([per_class * k, c, n, n], data)?, labels))
}

/// Class-balanced train and test splits, deterministic in `seed`. The two
/// splits come from independent random streams.
pub fn generate_synthetic<T: Real>(spec: &SyntheticSpec, seed: u64) -> Result<(Dataset<T>, Dataset<T>)> {
    spec.validate()?;
    let provenance = Provenance::Synthetic {
        spec: spec.clone(),
        seed,
    };
    let (train_x, train_y) = render_split(spec, spec.train_per_class, &mut rng::stream(seed, streams::DATASET_TRAIN))?;
    let (test_x, test_y) = render_split(spec, spec.test_per_class, &mut rng::stream(seed, streams::DATASET_TEST))?;
    Ok((
        Dataset::new(train_x, train_y, spec.classes, Split::Train, provenance.clone())?,
        Dataset::new(test_x, test_y, spec.classes, Split::Test, provenance)?,
    ))
}
