//! COCO-style manifest: `images`, `annotations` (xywh boxes) and `categories`.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{Annotation, Category, ClassId, Dataset, Image, ImageId};
use crate::geometry::BBox;
use crate::{Error, Result};

#[derive(Serialize, Deserialize)]
struct ImageRecord {
    id: ImageId,
    file_name: String,
    width: u32,
    height: u32,
}

#[derive(Serialize, Deserialize)]
struct AnnotationRecord {
    id: u64,
    image_id: ImageId,
    category_id: ClassId,
    bbox: [f64; 4],
}

#[derive(Serialize, Deserialize)]
struct CategoryRecord {
    id: ClassId,
    #[serde(default)]
    name: Option<String>,
}

#[derive(Serialize)]
struct Manifest {
    images: Vec<ImageRecord>,
    annotations: Vec<AnnotationRecord>,
    categories: Vec<CategoryRecord>,
}

fn records<R: DeserializeOwned>(doc: &serde_json::Value, key: &str, file: &str) -> Result<Vec<R>> {
    let arr = doc
        .get(key)
        .and_then(|v| v.as_array())
        .ok_or_else(|| Error::parse(file, format!("missing array `{key}`")))?;
    arr.iter()
        .enumerate()
        .map(|(i, v)| R::deserialize(v).map_err(|e| Error::parse(format!("{file}: {key}[{i}]"), e)))
        .collect()
}

/// Reads a manifest and its PNG images, then validates the result.
pub fn load_dataset(manifest: &Path, image_root: &Path) -> Result<Dataset> {
    let file = manifest.display().to_string();
    let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let doc: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::parse(&file, e))?;
    let image_recs: Vec<ImageRecord> = records(&doc, "images", &file)?;
    let ann_recs: Vec<AnnotationRecord> = records(&doc, "annotations", &file)?;
    let cat_recs: Vec<CategoryRecord> = records(&doc, "categories", &file)?;

    let mut images = Vec::with_capacity(image_recs.len());
    for r in image_recs {
        let path = image_root.join(&r.file_name);
        let pixels = image::open(&path)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(&path, io),
                other => Error::Image(format!("{}: {other}", path.display())),
            })?
            .to_rgb8();
        if pixels.dimensions() != (r.width, r.height) {
            return Err(Error::Validation(format!(
                "image {} is {:?} on disk but {}x{} in the manifest",
                r.id,
                pixels.dimensions(),
                r.width,
                r.height
            )));
        }
        images.push(Image {
            id: r.id,
            file_name: r.file_name,
            pixels,
        });
    }
    let mut annotations = Vec::with_capacity(ann_recs.len());
    for (i, r) in ann_recs.into_iter().enumerate() {
        let [x, y, w, h] = r.bbox;
        let bbox = BBox::from_xywh(x, y, w, h).map_err(|_| {
            Error::Validation(format!(
                "{file}: annotations[{i}] (id {}) has degenerate box {:?}",
                r.id, r.bbox
            ))
        })?;
        annotations.push(Annotation {
            id: r.id,
            image_id: r.image_id,
            class_id: r.category_id,
            bbox,
        });
    }
    let categories = cat_recs
        .into_iter()
        .map(|r| Category { id: r.id, name: r.name })
        .collect();
    let ds = Dataset {
        images,
        annotations,
        categories,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes the manifest plus one PNG per image under `image_root`.
pub fn save_dataset(dataset: &Dataset, manifest: &Path, image_root: &Path) -> Result<()> {
    std::fs::create_dir_all(image_root).map_err(|e| Error::io(image_root, e))?;
    for img in &dataset.images {
        let path = image_root.join(&img.file_name);
        img.pixels
            .save_with_format(&path, image::ImageFormat::Png)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    }
    let doc = Manifest {
        images: dataset
            .images
            .iter()
            .map(|i| ImageRecord {
                id: i.id,
                file_name: i.file_name.clone(),
                width: i.width(),
                height: i.height(),
            })
            .collect(),
        annotations: dataset
            .annotations
            .iter()
            .map(|a| AnnotationRecord {
                id: a.id,
                image_id: a.image_id,
                category_id: a.class_id,
                bbox: a.bbox.to_xywh(),
            })
            .collect(),
        categories: dataset
            .categories
            .iter()
            .map(|c| CategoryRecord {
                id: c.id,
                name: c.name.clone(),
            })
            .collect(),
    };
    if let Some(parent) = manifest.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(&doc).expect("manifest serialises");
    std::fs::write(manifest, text).map_err(|e| Error::io(manifest, e))
}
