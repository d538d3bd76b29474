//! Shared visual backbone, the post-RoI block, and the frozen text side
//! (token table plus a small self-attention encoder).

use std::collections::HashMap;

use image::RgbImage;
use mmfsod_autograd::{Conv2d, Graph, RoiBox, Scalar, Tensor, Var};

use crate::config::ModelConfig;
use crate::dataspec::{COLORS, SHAPES};
use crate::geometry::BBox;
use crate::model::Model;
use crate::params::{Ctx, Group, Init, ParamStore};
use crate::{Error, Result};

/// Pixels per feature cell of the backbone output.
pub const STRIDE: usize = 8;
const LN_EPS: f64 = 1e-5;

/// A single `[H, W, C]` map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub values: Tensor<T>,
    pub stride: usize,
}

/// Closed word list; words outside it map to `<unk>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let mut words = vec!["<unk>".to_string()];
        words.extend(COLORS.iter().map(|c| c.0.to_string()));
        words.extend(SHAPES.iter().map(|s| s.to_string()));
        words.extend(["a", "photo", "of", "the", "object"].map(String::from));
        Self::new(words)
    }
}

impl Vocabulary {
    pub fn new(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    /// Splits on whitespace and hyphens, lower-cases, and looks words up.
    pub fn tokenize(&self, name: &str) -> Vec<u32> {
        name.split(|c: char| c.is_whitespace() || c == '-')
            .filter(|w| !w.is_empty())
            .map(|w| self.index.get(&w.to_lowercase()).copied().unwrap_or(0))
            .collect()
    }
}

pub(crate) fn init_params<T: Scalar>(ps: &mut ParamStore<T>, cfg: &ModelConfig, vocab_len: usize, init: &mut Init) {
    let mut cin = 3;
    for (i, &cout) in cfg.stage_channels.iter().enumerate() {
        ps.insert(format!("backbone.conv{}.w", i + 1), Group::Backbone, init.he(9 * cin, cout));
        ps.insert(format!("backbone.conv{}.b", i + 1), Group::Backbone, Tensor::zeros(&[cout]));
        cin = cout;
    }
    ps.insert("backbone.proj.w", Group::Backbone, init.he(cin, cfg.feature_dim));
    ps.insert("backbone.proj.b", Group::Backbone, Tensor::zeros(&[cfg.feature_dim]));
    ps.insert("final.w", Group::FinalBlock, init.he(cfg.feature_dim, cfg.roi_dim));
    ps.insert("final.b", Group::FinalBlock, Tensor::zeros(&[cfg.roi_dim]));

    let mut text = Init::new(cfg.text_seed);
    let c = cfg.text_dim;
    let attn_std = 1.0 / (c as f64).sqrt();
    ps.insert("text.tokens", Group::TokenTable, text.normal(&[vocab_len, c], 1.0));
    ps.insert("text.pos", Group::TextEncoder, text.normal(&[cfg.text_max_len, c], 0.5));
    for l in 0..cfg.text_layers {
        for m in ["q", "k", "v", "o"] {
            ps.insert(format!("text.layer{l}.{m}"), Group::TextEncoder, text.normal(&[c, c], attn_std));
        }
        ps.insert(format!("text.layer{l}.ff1.w"), Group::TextEncoder, text.he(c, cfg.text_hidden));
        ps.insert(format!("text.layer{l}.ff1.b"), Group::TextEncoder, Tensor::zeros(&[cfg.text_hidden]));
        ps.insert(
            format!("text.layer{l}.ff2.w"),
            Group::TextEncoder,
            text.normal(&[cfg.text_hidden, c], 1.0 / (cfg.text_hidden as f64).sqrt()),
        );
        ps.insert(format!("text.layer{l}.ff2.b"), Group::TextEncoder, Tensor::zeros(&[c]));
    }
}

/// `[N, H, W, 3]` tensor scaled to `[-1, 1]`; every image must be `size` x `size`.
pub fn images_to_tensor<T: Scalar>(images: &[&RgbImage], size: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(images.len() * size * size * 3);
    for img in images {
        if img.dimensions() != (size as u32, size as u32) {
            return Err(Error::Shape(format!(
                "expected a {size}x{size} image, got {}x{}",
                img.width(),
                img.height()
            )));
        }
        data.extend(img.as_raw().iter().map(|&p| T::cast((p as f64 / 255.0 - 0.5) * 2.0)));
    }
    Ok(Tensor::new(&[images.len(), size, size, 3], data))
}

/// Backbone up to the stride-8 map: `[N, H, W, 3]` to `[N, H/8, W/8, C_v]`.
pub fn backbone<T: Scalar>(cx: &Ctx<T>, x: Var) -> Var {
    let g = cx.g;
    let mut h = x;
    for i in 1..=3 {
        let w = cx.p(&format!("backbone.conv{i}.w"));
        let b = cx.p(&format!("backbone.conv{i}.b"));
        h = g.relu(g.conv2d(h, w, b, Conv2d::new(3, 2, 1)));
    }
    g.relu(g.conv2d(h, cx.p("backbone.proj.w"), cx.p("backbone.proj.b"), Conv2d::new(1, 1, 0)))
}

/// Linear part of the post-RoI block applied to a whole map. Sampling is a
/// convex combination of cells, so projecting before RoIAlign equals
/// projecting after it.
pub fn final_projection<T: Scalar>(cx: &Ctx<T>, map: Var) -> Var {
    cx.g.linear(map, cx.p("final.w"), cx.p("final.b"))
}

/// RoIAlign over an already projected map, then the block's nonlinearity.
pub fn roi_features_var<T: Scalar>(cx: &Ctx<T>, projected: Var, rois: &[RoiBox], out: usize) -> Var {
    cx.g.relu(cx.g.roi_align(projected, rois, out, 1.0 / STRIDE as f64))
}

/// Frozen encoder over a `[L, C_t]` sequence, returning `[1, C_t]`.
pub fn text_encode_var<T: Scalar>(cx: &Ctx<T>, cfg: &ModelConfig, seq: Var) -> Result<Var> {
    let g = cx.g;
    let shape = g.shape(seq);
    if shape.len() != 2 || shape[1] != cfg.text_dim {
        return Err(Error::Shape(format!("text encoder expects [L, {}], got {shape:?}", cfg.text_dim)));
    }
    let l = shape[0];
    if l == 0 {
        return Err(Error::Shape("text encoder needs at least one token".into()));
    }
    if l > cfg.text_max_len {
        return Err(Error::Shape(format!("sequence of {l} exceeds the {} positions", cfg.text_max_len)));
    }
    let inv = T::cast(1.0 / (cfg.text_dim as f64).sqrt());
    let mut x = g.add(seq, g.slice_rows(cx.p("text.pos"), 0, l));
    for i in 0..cfg.text_layers {
        let p = |m: &str| cx.p(&format!("text.layer{i}.{m}"));
        let h = g.layer_norm_rows(x, LN_EPS);
        let q = g.matmul(h, p("q"));
        let k = g.matmul(h, p("k"));
        let v = g.matmul(h, p("v"));
        let att = g.softmax_rows(g.scale(g.matmul_nt(q, k), inv));
        x = g.add(x, g.matmul(g.matmul(att, v), p("o")));
        let h = g.layer_norm_rows(x, LN_EPS);
        let ff = g.linear(g.relu(g.linear(h, p("ff1.w"), p("ff1.b"))), p("ff2.w"), p("ff2.b"));
        x = g.add(x, ff);
    }
    let pooled = g.reshape(g.mean_rows(x), &[1, cfg.text_dim]);
    Ok(g.layer_norm_rows(pooled, LN_EPS))
}

impl<T: Scalar> Model<T> {
    /// Rows of the token table for `ids`. Every access is recorded in the
    /// token log.
    pub fn embed_tokens(&self, ids: &[u32]) -> Result<Tensor<T>> {
        let table = self.params.tensor("text.tokens");
        let (v, c) = (table.dim(0), table.dim(1));
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= v) {
            return Err(Error::Validation(format!("token id {bad} outside a vocabulary of {v}")));
        }
        self.token_log.lock().expect("token log").extend_from_slice(ids);
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(table.row(i as usize));
        }
        Ok(Tensor::new(&[ids.len(), c], data))
    }

    /// Every token id read so far.
    pub fn token_accesses(&self) -> Vec<u32> {
        self.token_log.lock().expect("token log").clone()
    }

    pub fn clear_token_log(&self) {
        self.token_log.lock().expect("token log").clear();
    }

    /// Stride-8 features of one image in inference mode.
    pub fn encode_image(&self, image: &RgbImage) -> Result<FeatureMap<T>> {
        let g = Graph::new();
        let cx = Ctx::inference(&g, &self.params);
        let x = g.constant(images_to_tensor(&[image], self.cfg.image_size)?);
        let y = backbone(&cx, x);
        let v = g.value(y);
        let shape = v.shape()[1..].to_vec();
        Ok(FeatureMap {
            values: (*v).clone().reshape(&shape),
            stride: STRIDE,
        })
    }

    /// Fixed-size features of `boxes` (image pixels) on `map`, after the final block.
    pub fn roi_features(&self, map: &FeatureMap<T>, boxes: &[BBox]) -> Vec<Tensor<T>> {
        if boxes.is_empty() {
            return Vec::new();
        }
        let g = Graph::new();
        let cx = Ctx::inference(&g, &self.params);
        let mut shape = vec![1];
        shape.extend_from_slice(map.values.shape());
        let m = g.constant(map.values.clone().reshape(&shape));
        let rois: Vec<RoiBox> = boxes.iter().map(|b| to_roi(0, b)).collect();
        let r = self.cfg.roi_size;
        let out = g.relu(g.roi_align(final_projection(&cx, m), &rois, r, 1.0 / map.stride as f64));
        let v = g.value(out);
        let per = r * r * self.cfg.roi_dim;
        v.data()
            .chunks(per)
            .map(|c| Tensor::new(&[r, r, self.cfg.roi_dim], c.to_vec()))
            .collect()
    }

    /// The frozen encoder on a `[L, C_t]` sequence, giving `[C_t]`.
    pub fn text_encode(&self, seq: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let cx = Ctx::inference(&g, &self.params);
        let s = g.constant(seq.clone());
        let out = text_encode_var(&cx, &self.cfg, s)?;
        Ok((*g.value(out)).clone().reshape(&[self.cfg.text_dim]))
    }
}

pub fn to_roi(batch: usize, b: &BBox) -> RoiBox {
    RoiBox {
        batch,
        x1: b.x1,
        y1: b.y1,
        x2: b.x2,
        y2: b.y2,
    }
}
