//! Coloured shapes on grey noise. Class `c` (0-based) is colour `c / 4` and
//! shape `c % 4`; its id is `c + 1` and its name `"<colour>-<shape>"`.

use image::{Rgb, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Annotation, Category, ClassId, ClassSplit, Dataset, Image};
use crate::geometry::BBox;
use crate::{Error, Result};

pub const SHAPES: [&str; 4] = ["square", "circle", "triangle", "cross"];
pub const COLORS: [(&str, [u8; 3]); 5] = [
    ("red", [220, 40, 40]),
    ("green", [40, 190, 50]),
    ("blue", [40, 70, 230]),
    ("yellow", [230, 215, 40]),
    ("magenta", [210, 50, 210]),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySpec {
    pub num_classes: usize,
    pub num_images: usize,
    pub image_size: u32,
    pub max_objects: usize,
    pub seed: u64,
    #[serde(default = "default_min_object")]
    pub min_object: u32,
    #[serde(default = "default_max_object")]
    pub max_object: u32,
}

fn default_min_object() -> u32 {
    12
}

fn default_max_object() -> u32 {
    24
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            num_classes: 12,
            num_images: 600,
            image_size: 64,
            max_objects: 3,
            seed: 0,
            min_object: default_min_object(),
            max_object: default_max_object(),
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        let max_classes = SHAPES.len() * COLORS.len();
        if self.num_classes < 2 || self.num_classes > max_classes {
            return Err(Error::Validation(format!(
                "toy spec needs 2..={max_classes} classes, got {}",
                self.num_classes
            )));
        }
        if self.image_size < 32 {
            return Err(Error::Validation(format!("toy image size {} is below 32", self.image_size)));
        }
        if self.max_objects == 0 {
            return Err(Error::Validation("toy spec needs max_objects >= 1".into()));
        }
        if self.min_object < 4 || self.min_object > self.max_object || self.max_object > self.image_size {
            return Err(Error::Validation(format!(
                "toy object sizes {}..={} do not fit a {} image",
                self.min_object, self.max_object, self.image_size
            )));
        }
        Ok(())
    }

    /// Generates with a generator seeded from `self.seed`.
    pub fn generate(&self) -> Result<Dataset> {
        generate_toy_dataset(self, &mut ChaCha8Rng::seed_from_u64(self.seed))
    }

    pub fn class_name(class_index: usize) -> String {
        format!("{}-{}", COLORS[class_index / SHAPES.len()].0, SHAPES[class_index % SHAPES.len()])
    }
}

fn covers(shape: usize, u: f64, v: f64) -> bool {
    match shape {
        0 => true,
        1 => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
        2 => (u - 0.5).abs() <= 0.5 * v,
        _ => (u - 0.5).abs() <= 1.0 / 6.0 || (v - 0.5).abs() <= 1.0 / 6.0,
    }
}

/// Paints one object and returns its tight box.
fn paint(img: &mut RgbImage, shape: usize, color: [u8; 3], x: u32, y: u32, size: u32) -> BBox {
    let (mut x1, mut y1, mut x2, mut y2) = (u32::MAX, u32::MAX, 0, 0);
    for py in y..y + size {
        for px in x..x + size {
            let u = (px - x) as f64 + 0.5;
            let v = (py - y) as f64 + 0.5;
            if covers(shape, u / size as f64, v / size as f64) {
                img.put_pixel(px, py, Rgb(color));
                x1 = x1.min(px);
                y1 = y1.min(py);
                x2 = x2.max(px + 1);
                y2 = y2.max(py + 1);
            }
        }
    }
    BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64).expect("painted shapes are non-empty")
}

pub fn generate_toy_dataset<R: Rng + ?Sized>(spec: &ToySpec, rng: &mut R) -> Result<Dataset> {
    spec.validate()?;
    let n = spec.image_size;
    let categories = (0..spec.num_classes)
        .map(|c| Category {
            id: c as ClassId + 1,
            name: Some(ToySpec::class_name(c)),
        })
        .collect();
    let mut images = Vec::with_capacity(spec.num_images);
    let mut annotations = Vec::new();
    for i in 0..spec.num_images {
        let id = i as u64 + 1;
        let mut pixels = RgbImage::from_fn(n, n, |_, _| {
            let g = rng.gen_range(80u8..=170);
            Rgb([g, g, g])
        });
        let count = rng.gen_range(1..=spec.max_objects);
        let mut placed: Vec<BBox> = Vec::new();
        for _ in 0..count {
            let class = rng.gen_range(0..spec.num_classes);
            let mut color = COLORS[class / SHAPES.len()].1;
            for ch in &mut color {
                *ch = (*ch as i32 + rng.gen_range(-15..=15)).clamp(0, 255) as u8;
            }
            for _attempt in 0..50 {
                let size = rng.gen_range(spec.min_object..=spec.max_object);
                let x = rng.gen_range(0..=n - size);
                let y = rng.gen_range(0..=n - size);
                let region = BBox::new(x as f64 - 1.0, y as f64 - 1.0, (x + size) as f64 + 1.0, (y + size) as f64 + 1.0)?;
                if placed.iter().any(|p| crate::geometry::intersection(p, &region) > 0.0) {
                    continue;
                }
                let bbox = paint(&mut pixels, class % SHAPES.len(), color, x, y, size);
                placed.push(BBox::new(x as f64, y as f64, (x + size) as f64, (y + size) as f64)?);
                annotations.push(Annotation {
                    id: annotations.len() as u64 + 1,
                    image_id: id,
                    class_id: class as ClassId + 1,
                    bbox,
                });
                break;
            }
        }
        images.push(Image {
            id,
            file_name: format!("{id:06}.png"),
            pixels,
        });
    }
    let ds = Dataset {
        images,
        annotations,
        categories,
    };
    ds.validate()?;
    Ok(ds)
}

/// Novel classes are those whose colour and shape indices sum to a multiple of
/// three; 12 classes give 8 base and 4 novel.
pub fn toy_split(num_classes: usize) -> ClassSplit {
    let (mut base, mut novel) = (Vec::new(), Vec::new());
    for c in 0..num_classes {
        let id = c as ClassId + 1;
        if (c / SHAPES.len() + c % SHAPES.len()) % 3 == 0 {
            novel.push(id);
        } else {
            base.push(id);
        }
    }
    ClassSplit::new(base, novel).expect("disjoint by construction")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twelve_classes_split_eight_four() {
        let s = toy_split(12);
        assert_eq!((s.base.len(), s.novel.len()), (8, 4));
    }

    #[test]
    fn boxes_are_tight() {
        for shape in 0..4 {
            for size in [12, 13, 24] {
                let mut img = RgbImage::new(40, 40);
                let b = paint(&mut img, shape, [1, 2, 3], 5, 6, size);
                let painted: Vec<(u32, u32)> = img
                    .enumerate_pixels()
                    .filter(|(_, _, p)| p.0 == [1, 2, 3])
                    .map(|(x, y, _)| (x, y))
                    .collect();
                let x1 = painted.iter().map(|p| p.0).min().unwrap() as f64;
                let y1 = painted.iter().map(|p| p.1).min().unwrap() as f64;
                let x2 = painted.iter().map(|p| p.0).max().unwrap() as f64 + 1.0;
                let y2 = painted.iter().map(|p| p.1).max().unwrap() as f64 + 1.0;
                assert_eq!(b, BBox::new(x1, y1, x2, y2).unwrap(), "shape {shape} size {size}");
                assert!(b.width() >= size as f64 - 1.0 && b.height() >= size as f64 - 1.0);
            }
        }
    }

    #[test]
    fn names() {
        assert_eq!(ToySpec::class_name(0), "red-square");
        assert_eq!(ToySpec::class_name(6), "green-triangle");
    }
}
