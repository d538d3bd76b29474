//! Datasets, class splits, episodic sampling and the synthetic toy benchmark.

mod episode;
mod manifest;
mod toy;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::{Error, Result};

pub use episode::{
    build_finetune_set, crop_support, sample_episode, ClassPool, Episode, EpisodeSampler, EpisodeSpec, QueryImage,
    SupportCrop,
};
pub use manifest::{load_dataset, save_dataset};
pub use toy::{generate_toy_dataset, toy_split, ToySpec, COLORS, SHAPES};

pub type ImageId = u64;
pub type ClassId = u32;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub id: ImageId,
    pub file_name: String,
    pub pixels: RgbImage,
}

impl Image {
    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: u64,
    pub image_id: ImageId,
    pub class_id: ClassId,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: ClassId,
    /// Display name; absent when the class must be treated as unnamed.
    pub name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub annotations: Vec<Annotation>,
    pub categories: Vec<Category>,
}

impl Dataset {
    /// Checks references, box bounds and id uniqueness.
    pub fn validate(&self) -> Result<()> {
        let mut sizes = BTreeMap::new();
        for img in &self.images {
            if sizes.insert(img.id, (img.width(), img.height())).is_some() {
                return Err(Error::Validation(format!("duplicate image id {}", img.id)));
            }
        }
        let mut classes = BTreeSet::new();
        for c in &self.categories {
            if !classes.insert(c.id) {
                return Err(Error::Validation(format!("duplicate category id {}", c.id)));
            }
        }
        let mut ann_ids = BTreeSet::new();
        for a in &self.annotations {
            if !ann_ids.insert(a.id) {
                return Err(Error::Validation(format!("duplicate annotation id {}", a.id)));
            }
            let &(w, h) = sizes.get(&a.image_id).ok_or_else(|| {
                Error::Validation(format!("annotation {} references missing image {}", a.id, a.image_id))
            })?;
            if !classes.contains(&a.class_id) {
                return Err(Error::Validation(format!(
                    "annotation {} references missing category {}",
                    a.id, a.class_id
                )));
            }
            if !a.bbox.is_valid() || !a.bbox.within(w as f64, h as f64) {
                return Err(Error::Validation(format!(
                    "annotation {} has box {:?} outside a {w}x{h} image",
                    a.id, a.bbox
                )));
            }
        }
        Ok(())
    }

    pub fn image(&self, id: ImageId) -> Option<&Image> {
        self.images.iter().find(|i| i.id == id)
    }

    pub fn image_index(&self) -> BTreeMap<ImageId, usize> {
        self.images.iter().enumerate().map(|(i, img)| (img.id, i)).collect()
    }

    pub fn category(&self, id: ClassId) -> Option<&Category> {
        self.categories.iter().find(|c| c.id == id)
    }

    pub fn class_ids(&self) -> BTreeSet<ClassId> {
        self.categories.iter().map(|c| c.id).collect()
    }

    /// Annotation indices grouped by class.
    pub fn by_class(&self) -> BTreeMap<ClassId, Vec<usize>> {
        let mut out: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
        for (i, a) in self.annotations.iter().enumerate() {
            out.entry(a.class_id).or_default().push(i);
        }
        out
    }

    /// Annotation indices grouped by image.
    pub fn by_image(&self) -> BTreeMap<ImageId, Vec<usize>> {
        let mut out: BTreeMap<ImageId, Vec<usize>> = BTreeMap::new();
        for (i, a) in self.annotations.iter().enumerate() {
            out.entry(a.image_id).or_default().push(i);
        }
        out
    }

    pub fn class_counts(&self) -> BTreeMap<ClassId, usize> {
        self.by_class().into_iter().map(|(c, v)| (c, v.len())).collect()
    }

    /// Copy with every category name removed.
    pub fn without_names(&self) -> Dataset {
        let mut d = self.clone();
        for c in &mut d.categories {
            c.name = None;
        }
        d
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub base: BTreeSet<ClassId>,
    pub novel: BTreeSet<ClassId>,
}

impl ClassSplit {
    pub fn new(base: impl IntoIterator<Item = ClassId>, novel: impl IntoIterator<Item = ClassId>) -> Result<Self> {
        let split = Self {
            base: base.into_iter().collect(),
            novel: novel.into_iter().collect(),
        };
        if let Some(c) = split.base.intersection(&split.novel).next() {
            return Err(Error::Validation(format!("class {c} is both base and novel")));
        }
        Ok(split)
    }

    /// Every class id must exist and base classes must be named.
    pub fn check_against(&self, dataset: &Dataset) -> Result<()> {
        for &c in self.base.iter().chain(&self.novel) {
            if dataset.category(c).is_none() {
                return Err(Error::Validation(format!("split names unknown class {c}")));
            }
        }
        for &c in &self.base {
            if dataset.category(c).and_then(|c| c.name.as_ref()).is_none() {
                return Err(Error::Validation(format!("base class {c} has no name")));
            }
        }
        Ok(())
    }

    pub fn all(&self) -> BTreeSet<ClassId> {
        self.base.union(&self.novel).copied().collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: ClassSplit = serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
        Self::new(raw.base, raw.novel)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("split serialises");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
