//! N-way K-shot episodes and the balanced fine-tuning set.

use std::collections::{BTreeMap, BTreeSet};

use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::Rng;

use super::{ClassId, ClassSplit, Dataset, ImageId};
use crate::config::RunConfig;
use crate::geometry::BBox;
use crate::{Error, Result};

/// Which side of the split episodes are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassPool {
    Base,
    Novel,
    All,
}

impl ClassPool {
    pub fn classes(self, split: &ClassSplit) -> BTreeSet<ClassId> {
        match self {
            ClassPool::Base => split.base.clone(),
            ClassPool::Novel => split.novel.clone(),
            ClassPool::All => split.all(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSpec {
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub support_size: u32,
    pub context: f64,
}

impl EpisodeSpec {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            way: cfg.episode.way,
            shot: cfg.episode.shot,
            queries: cfg.episode.queries,
            support_size: cfg.model.support_size as u32,
            context: cfg.episode.support_context,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupportCrop {
    pub class_id: ClassId,
    pub image_id: ImageId,
    pub annotation_id: u64,
    pub pixels: RgbImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryImage {
    pub image_id: ImageId,
    pub pixels: RgbImage,
    /// Ground truth restricted to the episode's positive classes.
    pub boxes: Vec<(ClassId, BBox)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub support: BTreeMap<ClassId, Vec<SupportCrop>>,
    pub queries: Vec<QueryImage>,
    pub positive: Vec<ClassId>,
    pub negative: Vec<ClassId>,
}

impl Episode {
    /// Positive classes first, then negatives.
    pub fn classes(&self) -> Vec<ClassId> {
        self.positive.iter().chain(&self.negative).copied().collect()
    }
}

/// The box padded by `context` pixels, clipped to the image, resized to a
/// `size` x `size` square.
pub fn crop_support(image: &RgbImage, bbox: &BBox, size: u32, context: f64) -> RgbImage {
    let (w, h) = image.dimensions();
    let x1 = (bbox.x1 - context).floor().clamp(0.0, w as f64 - 1.0) as u32;
    let y1 = (bbox.y1 - context).floor().clamp(0.0, h as f64 - 1.0) as u32;
    let x2 = ((bbox.x2 + context).ceil().clamp(0.0, w as f64) as u32).max(x1 + 1);
    let y2 = ((bbox.y2 + context).ceil().clamp(0.0, h as f64) as u32).max(y1 + 1);
    let region = imageops::crop_imm(image, x1, y1, x2 - x1, y2 - y1).to_image();
    imageops::resize(&region, size, size, FilterType::Triangle)
}

fn check_counts(ds: &Dataset, classes: &BTreeSet<ClassId>, shot: usize) -> Result<()> {
    let counts = ds.class_counts();
    let short: Vec<String> = classes
        .iter()
        .filter(|c| counts.get(c).copied().unwrap_or(0) < shot)
        .map(|c| format!("{c} ({} instances)", counts.get(c).copied().unwrap_or(0)))
        .collect();
    if short.is_empty() {
        Ok(())
    } else {
        Err(Error::Sampling(format!("fewer than {shot} instances for classes {}", short.join(", "))))
    }
}

/// Reusable sampler: per-class and per-image indices plus every support crop
/// of the pool, computed once.
pub struct EpisodeSampler<'a> {
    ds: &'a Dataset,
    spec: EpisodeSpec,
    classes: Vec<ClassId>,
    by_class: BTreeMap<ClassId, Vec<usize>>,
    by_image: BTreeMap<ImageId, Vec<usize>>,
    hosts: BTreeMap<ClassId, Vec<ImageId>>,
    index: BTreeMap<ImageId, usize>,
    crops: BTreeMap<usize, RgbImage>,
}

impl<'a> EpisodeSampler<'a> {
    pub fn new(ds: &'a Dataset, split: &ClassSplit, pool: ClassPool, spec: &EpisodeSpec) -> Result<Self> {
        let classes = pool.classes(split);
        if spec.way == 0 || spec.shot == 0 || spec.queries == 0 {
            return Err(Error::Sampling("way, shot and queries must be positive".into()));
        }
        if classes.len() < spec.way {
            return Err(Error::Sampling(format!(
                "{}-way episodes need {} classes, the pool has {}",
                spec.way,
                spec.way,
                classes.len()
            )));
        }
        check_counts(ds, &classes, spec.shot)?;
        let by_class = ds.by_class();
        let index = ds.image_index();
        let mut hosts = BTreeMap::new();
        let mut crops = BTreeMap::new();
        for c in &classes {
            let anns = &by_class[c];
            let set: BTreeSet<ImageId> = anns.iter().map(|&a| ds.annotations[a].image_id).collect();
            hosts.insert(*c, set.into_iter().collect());
            for &a in anns {
                let ann = &ds.annotations[a];
                let img = &ds.images[index[&ann.image_id]];
                crops.insert(a, crop_support(&img.pixels, &ann.bbox, spec.support_size, spec.context));
            }
        }
        Ok(Self {
            ds,
            spec: spec.clone(),
            classes: classes.into_iter().collect(),
            by_class,
            by_image: ds.by_image(),
            hosts,
            index,
            crops,
        })
    }

    /// Draws one episode: a positive class with `queries` images that contain
    /// it, `way - 1` negatives absent from those images, and exactly `shot`
    /// support crops per class, taken from non-query images where possible.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Episode> {
        let ds = self.ds;
        let spec = &self.spec;
        for _attempt in 0..32 {
            let pos = *self.classes.choose(rng).expect("non-empty pool");
            let mut shuffled = self.hosts[&pos].clone();
            shuffled.shuffle(rng);
            let chosen: Vec<ImageId> = (0..spec.queries).map(|i| shuffled[i % shuffled.len()]).collect();
            let present: BTreeSet<ClassId> = chosen
                .iter()
                .flat_map(|id| self.by_image[id].iter().map(|&a| ds.annotations[a].class_id))
                .collect();
            let mut candidates: Vec<ClassId> = self
                .classes
                .iter()
                .copied()
                .filter(|c| *c != pos && !present.contains(c))
                .collect();
            if candidates.len() < spec.way - 1 {
                continue;
            }
            candidates.shuffle(rng);
            let negative: Vec<ClassId> = candidates[..spec.way - 1].to_vec();

            let query_set: BTreeSet<ImageId> = chosen.iter().copied().collect();
            let mut support = BTreeMap::new();
            for &c in std::iter::once(&pos).chain(&negative) {
                let (mut outside, mut inside): (Vec<usize>, Vec<usize>) = self.by_class[&c]
                    .iter()
                    .partition(|&&a| !query_set.contains(&ds.annotations[a].image_id));
                outside.shuffle(rng);
                inside.shuffle(rng);
                let crops: Vec<SupportCrop> = outside
                    .into_iter()
                    .chain(inside)
                    .take(spec.shot)
                    .map(|a| {
                        let ann = &ds.annotations[a];
                        SupportCrop {
                            class_id: c,
                            image_id: ann.image_id,
                            annotation_id: ann.id,
                            pixels: self.crops[&a].clone(),
                        }
                    })
                    .collect();
                debug_assert_eq!(crops.len(), spec.shot);
                support.insert(c, crops);
            }
            let queries = chosen
                .iter()
                .map(|id| {
                    let img = &ds.images[self.index[id]];
                    let boxes = self.by_image[id]
                        .iter()
                        .map(|&a| &ds.annotations[a])
                        .filter(|a| a.class_id == pos)
                        .map(|a| (a.class_id, a.bbox))
                        .collect();
                    QueryImage {
                        image_id: *id,
                        pixels: img.pixels.clone(),
                        boxes,
                    }
                })
                .collect();
            return Ok(Episode {
                support,
                queries,
                positive: vec![pos],
                negative,
            });
        }
        Err(Error::Sampling(format!(
            "could not find {} negative classes absent from the query images",
            spec.way - 1
        )))
    }
}

/// One episode from a fresh [`EpisodeSampler`]; use the sampler directly when
/// drawing many.
pub fn sample_episode<R: Rng + ?Sized>(
    ds: &Dataset,
    split: &ClassSplit,
    pool: ClassPool,
    spec: &EpisodeSpec,
    rng: &mut R,
) -> Result<Episode> {
    EpisodeSampler::new(ds, split, pool, spec)?.sample(rng)
}

/// Exactly `shot` annotations for every base and novel class, with the images
/// that host them.
pub fn build_finetune_set<R: Rng + ?Sized>(ds: &Dataset, split: &ClassSplit, shot: usize, rng: &mut R) -> Result<Dataset> {
    let classes = split.all();
    check_counts(ds, &classes, shot)?;
    let by_class = ds.by_class();
    let mut keep = BTreeSet::new();
    for c in &classes {
        let mut anns = by_class[c].clone();
        anns.shuffle(rng);
        keep.extend(anns.into_iter().take(shot));
    }
    let annotations: Vec<_> = keep.iter().map(|&a| ds.annotations[a].clone()).collect();
    let hosts: BTreeSet<ImageId> = annotations.iter().map(|a| a.image_id).collect();
    let out = Dataset {
        images: ds.images.iter().filter(|i| hosts.contains(&i.id)).cloned().collect(),
        annotations,
        categories: ds.categories.iter().filter(|c| classes.contains(&c.id)).cloned().collect(),
    };
    out.validate()?;
    Ok(out)
}
