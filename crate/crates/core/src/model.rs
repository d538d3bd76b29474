//! The full parameter set plus the fixed pieces (vocabulary, anchors) that
//! every forward pass needs.

use std::collections::BTreeMap;
use std::sync::Mutex;

use mmfsod_autograd::{Graph, Scalar, Tensor, Var};

use crate::config::{EvalConfig, ModelConfig, MpgConfig, RunConfig};
use crate::dataspec::{ClassId, SupportCrop};
use crate::detector::{self, ClassPrototypes};
use crate::encoders::{self, backbone, images_to_tensor, Vocabulary};
use crate::geometry::BBox;
use crate::mpg::{self, mpg_forward, Stage};
use crate::params::{Ctx, Group, Init, ParamStore};
use crate::{Error, Result};

pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub mpg: MpgConfig,
    pub eval: EvalConfig,
    pub params: ParamStore<T>,
    pub vocab: Vocabulary,
    pub anchors: Vec<BBox>,
    pub(crate) token_log: Mutex<Vec<u32>>,
}

impl<T: Scalar> Clone for Model<T> {
    fn clone(&self) -> Self {
        Self::with_params(self.cfg.clone(), self.mpg.clone(), self.eval.clone(), self.params.clone())
    }
}

impl<T: Scalar> Model<T> {
    /// Fresh parameters: trainable parts from `cfg.seed`, the frozen text side
    /// from `cfg.model.text_seed`.
    pub fn new(cfg: &RunConfig) -> Self {
        let vocab = Vocabulary::default();
        let mut ps = ParamStore::new();
        let mut init = Init::new(cfg.seed ^ 0x6d6f_6465_6c00);
        encoders::init_params(&mut ps, &cfg.model, vocab.len(), &mut init);
        mpg::init_params(&mut ps, &cfg.model, &cfg.mpg, &mut init);
        detector::init_params(&mut ps, &cfg.model, &mut init);
        Self::with_params(cfg.model.clone(), cfg.mpg.clone(), cfg.eval.clone(), ps)
    }

    pub fn with_params(cfg: ModelConfig, mpg: MpgConfig, eval: EvalConfig, params: ParamStore<T>) -> Self {
        let anchors = detector::anchors(&cfg);
        Self {
            cfg,
            mpg,
            eval,
            params,
            vocab: Vocabulary::default(),
            anchors,
            token_log: Mutex::new(Vec::new()),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model::with_params(self.cfg.clone(), self.mpg.clone(), self.eval.clone(), self.params.cast())
    }

    /// Digest of the text encoder and token table.
    pub fn frozen_digest(&self) -> String {
        self.params.digest(&[Group::TextEncoder, Group::TokenTable])
    }

    pub fn backbone_digest(&self) -> String {
        self.params.digest(&[Group::Backbone])
    }

    /// Embedded name tokens, or `None` for unnamed classes.
    pub fn name_tokens(&self, name: Option<&str>) -> Result<Option<Tensor<T>>> {
        match name {
            None => Ok(None),
            Some(n) => {
                let ids = self.vocab.tokenize(n);
                if ids.is_empty() {
                    return Ok(None);
                }
                self.embed_tokens(&ids).map(Some)
            }
        }
    }

    /// Support crops of `N` classes (each `K` crops) as `[N * K, S, S, 3]`
    /// run through the backbone and averaged into `[N, h, w, C_v]`.
    pub fn support_visual(&self, cx: &Ctx<T>, crops: &[&[SupportCrop]]) -> Result<Var> {
        let shot = crops.first().map(|c| c.len()).unwrap_or(0);
        if shot == 0 || crops.iter().any(|c| c.len() != shot) {
            return Err(Error::Shape("every class needs the same positive number of crops".into()));
        }
        let images: Vec<_> = crops.iter().flat_map(|c| c.iter().map(|s| &s.pixels)).collect();
        let x = cx.g.constant(images_to_tensor(&images, self.cfg.support_size)?);
        mpg::visual_prototype(cx, backbone(cx, x), shot)
    }

    /// Inference-time prototypes for every class in `support`. With
    /// `use_teacher` false (or for unnamed classes) only the student path runs
    /// and no name tokens are read.
    pub fn build_prototypes(
        &self,
        support: &BTreeMap<ClassId, Vec<SupportCrop>>,
        names: &BTreeMap<ClassId, Option<String>>,
        use_teacher: bool,
        placement: crate::config::MpgPlacement,
    ) -> Result<BTreeMap<ClassId, ClassPrototypes<T>>> {
        let g = Graph::new();
        let cx = Ctx::inference(&g, &self.params);
        let classes: Vec<ClassId> = support.keys().copied().collect();
        let crops: Vec<&[SupportCrop]> = classes.iter().map(|c| support[c].as_slice()).collect();
        let visual = self.support_visual(&cx, &crops)?;
        let tokens: Vec<Option<Tensor<T>>> = if use_teacher {
            classes
                .iter()
                .map(|c| self.name_tokens(names.get(c).and_then(|n| n.as_deref())))
                .collect::<Result<_>>()?
        } else {
            vec![None; classes.len()]
        };
        let stage_protos = |stage: Stage, enabled: bool| -> Result<Vec<Tensor<T>>> {
            let n = classes.len();
            let vars: Vec<Var> = if enabled {
                let out = mpg_forward(&cx, &self.cfg, &self.mpg, stage, visual, &tokens, use_teacher)?;
                (0..n).map(|i| out.detection_prototype(i)).collect()
            } else {
                (0..n).map(|i| g.slice_rows(visual, i, i + 1)).collect()
            };
            Ok(vars
                .into_iter()
                .map(|v| {
                    let t = (*g.value(v)).clone();
                    let shape = t.shape()[1..].to_vec();
                    t.reshape(&shape)
                })
                .collect())
        };
        let rpn = stage_protos(Stage::Rpn, placement.rpn())?;
        let rcnn = stage_protos(Stage::Rcnn, placement.rcnn())?;
        Ok(classes
            .into_iter()
            .zip(rpn.into_iter().zip(rcnn))
            .map(|(c, (rpn, rcnn))| (c, ClassPrototypes { rpn, rcnn }))
            .collect())
    }
}

pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
