//! Synthetic color/shape datasets and on-disk ingestion.

mod io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use io::{
    bilinear_resize, decode_ppm, load_dataset, load_image_dir, load_path, save_dataset, DSDS_MAGIC, DSDS_VERSION,
};

/// Iso-luminant under BT.601 (both ≈ 0.3381), so the shape branch cannot
/// tell the two fills apart except by outline.
pub const RED: [f64; 3] = [0.7, 0.2, 0.1];
pub const BLUE: [f64; 3] = [0.2, 0.3, 0.8965];
pub const GRAY: [f64; 3] = [0.5, 0.5, 0.5];

const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl ShapeKind {
    /// Whether `(dx, dy)` (offset from the centre, y down) lies inside a
    /// shape of half-extent `r`.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            ShapeKind::Triangle => {
                // apex up, base at the bottom edge of the bounding square
                let t = (dy + r) / (2.0 * r);
                (0.0..=1.0).contains(&t) && dx.abs() <= r * t
            }
            ShapeKind::Cross => {
                let arm = r / 3.0;
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSpec {
    pub name: String,
    pub kind: ShapeKind,
    pub fill: [f64; 3],
    /// Shape extent as a fraction of the image side, drawn uniformly.
    pub size_range: (f64, f64),
    /// Maximum centre offset in pixels along each axis.
    pub position_jitter: f64,
    pub background: [f64; 3],
    pub background_noise: f64,
    /// Per-pixel uniform jitter added to each fill channel.
    pub fill_jitter: f64,
}

impl ShapeSpec {
    pub fn new(name: impl Into<String>, kind: ShapeKind, fill: [f64; 3]) -> Self {
        ShapeSpec {
            name: name.into(),
            kind,
            fill,
            size_range: (0.4, 0.7),
            position_jitter: 3.0,
            background: GRAY,
            background_noise: 0.05,
            fill_jitter: 0.05,
        }
    }

    /// Same shape with no randomness at all.
    pub fn frozen(mut self) -> Self {
        self.size_range = (self.size_range.0, self.size_range.0);
        self.position_jitter = 0.0;
        self.background_noise = 0.0;
        self.fill_jitter = 0.0;
        self
    }

    pub fn validate(&self, image_size: usize) -> Result<()> {
        let in_unit = |base: &[f64; 3], amp: f64, what: &str| {
            if amp < 0.0 || base.iter().any(|&c| c - amp < 0.0 || c + amp > 1.0) {
                Err(Error::Config(format!(
                    "`{}`: {what} {base:?} ± {amp} leaves [0, 1]",
                    self.name
                )))
            } else {
                Ok(())
            }
        };
        in_unit(&self.fill, self.fill_jitter, "fill")?;
        in_unit(&self.background, self.background_noise, "background")?;
        let (lo, hi) = self.size_range;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::Config(format!(
                "`{}`: size range {:?} must satisfy 0 < min ≤ max < 1",
                self.name, self.size_range
            )));
        }
        if self.position_jitter < 0.0 {
            return Err(Error::Config(format!("`{}`: negative position jitter", self.name)));
        }
        let side = image_size as f64;
        if hi * side / 2.0 + self.position_jitter > side / 2.0 {
            return Err(Error::Config(format!(
                "`{}`: shape of extent {hi} with jitter {} px does not fit a {image_size}px canvas",
                self.name, self.position_jitter
            )));
        }
        Ok(())
    }

    /// Draws one `3 × size × size` image (channel-major) into `out`.
    fn render(&self, size: usize, rng: &mut ChaCha8Rng, out: &mut [f32]) {
        let side = size as f64;
        let (lo, hi) = self.size_range;
        let extent = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let r = extent * side / 2.0;
        let mut jitter = || {
            if self.position_jitter > 0.0 {
                rng.random_range(-self.position_jitter..=self.position_jitter)
            } else {
                0.0
            }
        };
        let (cx, cy) = (side / 2.0 + jitter(), side / 2.0 + jitter());
        let plane = size * size;
        let step = 1.0 / SUPERSAMPLE as f64;
        for py in 0..size {
            for px in 0..size {
                let mut hits = 0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let x = px as f64 + (sx as f64 + 0.5) * step;
                        let y = py as f64 + (sy as f64 + 0.5) * step;
                        if self.kind.contains(x - cx, y - cy, r) {
                            hits += 1;
                        }
                    }
                }
                let cov = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                for c in 0..3 {
                    let bg = self.background[c] + uniform(rng, self.background_noise);
                    let fg = self.fill[c] + uniform(rng, self.fill_jitter);
                    let v = cov * fg + (1.0 - cov) * bg;
                    out[c * plane + py * size + px] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, amp: f64) -> f64 {
    if amp > 0.0 {
        rng.random_range(-amp..=amp)
    } else {
        0.0
    }
}

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum Provenance {
    Generated {
        classes: Vec<ShapeSpec>,
        n_per_class: usize,
        image_size: usize,
        seed: u64,
    },
    Corpus {
        path: String,
    },
    Packed {
        path: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// N×3×H×W, values in [0, 1].
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image_size(&self) -> usize {
        self.images.dims().get(2).copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.images.dims();
        if d.len() != 4 || d[0] != self.labels.len() {
            return Err(Error::Data(format!(
                "images {:?} do not match {} labels",
                d,
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.n_classes()) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {} classes",
                self.n_classes()
            )));
        }
        Ok(())
    }

    /// Indices of each class, in sample order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut by = vec![Vec::new(); self.n_classes()];
        for (i, &l) in self.labels.iter().enumerate() {
            by[l].push(i);
        }
        by
    }
}

/// Renders `n_per_class` samples of every class. Sample `i` belongs to
/// class `i mod C` and draws from its own RNG stream, so the result does
/// not depend on generation order.
pub fn generate_task(classes: &[ShapeSpec], n_per_class: usize, image_size: usize, seed: u64) -> Result<Dataset> {
    if classes.len() < 2 {
        return Err(Error::Config("a task needs at least two classes".into()));
    }
    if n_per_class == 0 {
        return Err(Error::Config("n_per_class must be at least 1".into()));
    }
    if image_size == 0 {
        return Err(Error::Config("image_size must be positive".into()));
    }
    for c in classes {
        c.validate(image_size)?;
    }
    let n = classes.len() * n_per_class;
    let per = 3 * image_size * image_size;
    let mut data = vec![0f32; n * per];
    let mut labels = Vec::with_capacity(n);
    for (i, chunk) in data.chunks_mut(per).enumerate() {
        let class = i % classes.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        classes[class].render(image_size, &mut rng, chunk);
        labels.push(class);
    }
    Ok(Dataset {
        images: Tensor::from_vec(vec![n, 3, image_size, image_size], data)?,
        labels,
        class_names: classes.iter().map(|c| c.name.clone()).collect(),
        provenance: Provenance::Generated {
            classes: classes.to_vec(),
            n_per_class,
            image_size,
            seed,
        },
    })
}

/// Train and test sets over the same global classes, plus the class ids of
/// each task.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub train: Dataset,
    pub test: Dataset,
    pub tasks: Vec<Vec<usize>>,
}

/// Global classes of the two-task color/shape benchmark.
pub fn fig1_classes() -> Vec<ShapeSpec> {
    vec![
        ShapeSpec::new("red-circle", ShapeKind::Circle, RED),
        ShapeSpec::new("blue-square", ShapeKind::Square, BLUE),
        ShapeSpec::new("blue-circle", ShapeKind::Circle, BLUE),
        ShapeSpec::new("red-square", ShapeKind::Square, RED),
    ]
}

/// Task 1 separates red circles from blue squares, task 2 blue circles
/// from red squares. Test sets get a fifth of the training count per class.
pub fn fig1_benchmark(image_size: usize, n_per_class: usize, seed: u64) -> Result<Benchmark> {
    let classes = fig1_classes();
    let n_test = (n_per_class / 5).max(1);
    let train = generate_task(&classes, n_per_class, image_size, seed)?;
    let test = generate_task(&classes, n_test, image_size, seed ^ 0x7e57_7e57_7e57_7e57)?;
    Ok(Benchmark {
        train,
        test,
        tasks: vec![vec![0, 1], vec![2, 3]],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_geometry() {
        assert!(ShapeKind::Circle.contains(0.0, 0.0, 1.0));
        assert!(!ShapeKind::Circle.contains(0.8, 0.8, 1.0));
        assert!(ShapeKind::Square.contains(0.8, 0.8, 1.0));
        assert!(ShapeKind::Triangle.contains(0.0, 0.9, 1.0));
        assert!(!ShapeKind::Triangle.contains(0.0, -1.1, 1.0));
        assert!(!ShapeKind::Triangle.contains(0.9, -0.5, 1.0));
        assert!(ShapeKind::Cross.contains(0.9, 0.0, 1.0));
        assert!(!ShapeKind::Cross.contains(0.6, 0.6, 1.0));
    }

    #[test]
    fn benchmark_colors_are_isoluminant() {
        let luma = |c: [f64; 3]| 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
        assert!((luma(RED) - luma(BLUE)).abs() < 1e-4);
    }

    #[test]
    fn oversized_shape_is_rejected() {
        let mut s = ShapeSpec::new("big", ShapeKind::Square, RED);
        s.size_range = (0.8, 0.95);
        assert!(matches!(
            generate_task(&[s.clone(), s], 1, 32, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn color_out_of_range_is_rejected() {
        let mut s = ShapeSpec::new("hot", ShapeKind::Circle, [0.99, 0.0, 0.0]);
        s.fill_jitter = 0.05;
        assert!(s.validate(32).is_err());
    }
}
