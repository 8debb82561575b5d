//! Procedural 16×16 shape images in six classes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{AidError, Result};
use crate::numerics::{SeededRng, Tensor};

pub const IMAGE_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Circle,
    Ring,
    Square,
    Cross,
    HBar,
    VBar,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 6] = [
        ShapeClass::Circle,
        ShapeClass::Ring,
        ShapeClass::Square,
        ShapeClass::Cross,
        ShapeClass::HBar,
        ShapeClass::VBar,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Result<Self> {
        Self::ALL
            .get(id)
            .copied()
            .ok_or_else(|| AidError::Index(format!("no shape class {id}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Circle => "circle",
            ShapeClass::Ring => "ring",
            ShapeClass::Square => "square",
            ShapeClass::Cross => "cross",
            ShapeClass::HBar => "hbar",
            ShapeClass::VBar => "vbar",
        }
    }

    /// Renders one instance with a random position and scale; background −1, shape +1.
    pub fn render(self, rng: &mut SeededRng) -> Tensor {
        let cx = rng.uniform_range(5.5, 10.5);
        let cy = rng.uniform_range(5.5, 10.5);
        let size = rng.uniform_range(0.0, 1.0);
        let inside: Box<dyn Fn(f64, f64) -> bool> = match self {
            ShapeClass::Circle => {
                let r = 2.5 + 2.0 * size;
                Box::new(move |x, y| (x - cx).hypot(y - cy) <= r)
            }
            ShapeClass::Ring => {
                let r = 3.5 + 1.5 * size;
                Box::new(move |x, y| ((x - cx).hypot(y - cy) - r).abs() <= 0.8)
            }
            ShapeClass::Square => {
                let h = 2.0 + 2.0 * size;
                Box::new(move |x, y| (x - cx).abs() <= h && (y - cy).abs() <= h)
            }
            ShapeClass::Cross => {
                let arm = 3.0 + 2.0 * size;
                Box::new(move |x, y| {
                    let (dx, dy) = ((x - cx).abs(), (y - cy).abs());
                    (dx <= 0.9 && dy <= arm) || (dy <= 0.9 && dx <= arm)
                })
            }
            ShapeClass::HBar => {
                let half_len = 4.0 + 3.0 * size;
                Box::new(move |x, y| (x - cx).abs() <= half_len && (y - cy).abs() <= 1.2)
            }
            ShapeClass::VBar => {
                let half_len = 4.0 + 3.0 * size;
                Box::new(move |x, y| (y - cy).abs() <= half_len && (x - cx).abs() <= 1.2)
            }
        };
        let mut img = Tensor::filled(&[IMAGE_SIZE, IMAGE_SIZE], -1.0);
        for r in 0..IMAGE_SIZE {
            for c in 0..IMAGE_SIZE {
                if inside(c as f64 + 0.5, r as f64 + 0.5) {
                    img.row_mut(r)[c] = 1.0;
                }
            }
        }
        img
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeClass {
    type Err = AidError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| AidError::Config(format!("unknown class '{s}'")))
    }
}

/// Labeled shape images, deterministic given the seed.
#[derive(Debug, Clone)]
pub struct ShapeDataset {
    images: Vec<Tensor>,
    labels: Vec<usize>,
    seed: u64,
}

impl ShapeDataset {
    /// `per_class` images of every class, interleaved by class.
    pub fn generate(per_class: usize, seed: u64) -> Result<Self> {
        if per_class == 0 {
            return Err(AidError::Config("dataset needs at least one image per class".into()));
        }
        let mut rng = SeededRng::new(seed);
        let mut images = Vec::with_capacity(per_class * ShapeClass::ALL.len());
        let mut labels = Vec::with_capacity(images.capacity());
        for _ in 0..per_class {
            for class in ShapeClass::ALL {
                images.push(class.render(&mut rng));
                labels.push(class.id());
            }
        }
        Ok(Self {
            images,
            labels,
            seed,
        })
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}
