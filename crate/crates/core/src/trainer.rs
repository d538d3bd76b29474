//! Episodic meta-training, few-shot fine-tuning, momentum SGD, checkpoints and
//! the per-iteration loss log.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use mmfsod_autograd::{Graph, Scalar, Tensor, Var};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ContrastiveSource, Mode, RunConfig};
use crate::dataspec::{
    build_finetune_set, ClassId, ClassPool, ClassSplit, Dataset, Episode, EpisodeSampler, EpisodeSpec, SupportCrop,
};
use crate::detector::{match_head, prototype_roi, rpn_head, select_proposals};
use crate::encoders::{backbone, final_projection, images_to_tensor, roi_features_var, to_roi};
use crate::geometry::BBox;
use crate::losses::{
    assign_targets, contrastive_loss, kd_loss, rcnn_loss, rpn_loss, sample_rois, total_loss, LossBundle,
    SampledTargets, Sampling,
};
use crate::model::Model;
use crate::mpg::{mpg_forward, semantic_projection, Stage};
use crate::params::{Ctx, Group, ParamStore, Trainable};
use crate::{Error, Result};

/// Rate at `iteration` (0-based): `base` before `decay_step`, `base / 10` after.
pub fn learning_rate(base: f64, decay_step: usize, iteration: usize) -> f64 {
    if iteration < decay_step {
        base
    } else {
        base / 10.0
    }
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
#[derive(Debug, Clone, Default)]
pub struct Sgd<T> {
    velocity: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new() -> Self {
        Self {
            velocity: BTreeMap::new(),
        }
    }

    /// Updates every parameter that has a gradient; others are untouched.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        rate: f64,
        momentum: f64,
        weight_decay: f64,
    ) {
        let (lr, mu, wd) = (T::cast(rate), T::cast(momentum), T::cast(weight_decay));
        for (name, grad) in grads {
            let p = params.get_mut(name).expect("gradient for a known parameter");
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            for ((x, vi), &gi) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(grad.data()) {
                let d = gi + wd * *x;
                *vi = mu * *vi + d;
                *x = *x - lr * *vi;
            }
        }
    }
}

/// Graph nodes of one episode's losses.
pub struct EpisodeLoss {
    pub rpn: Var,
    pub rcnn: Var,
    pub kd: Var,
    pub contrastive: Var,
    pub total: Var,
}

fn rpn_sampling(cfg: &RunConfig) -> Sampling {
    Sampling {
        samples: cfg.loss.rpn_samples,
        positive_fraction: cfg.loss.rpn_positive_fraction,
        positive_iou: cfg.loss.rpn_positive_iou,
        negative_iou: cfg.loss.rpn_negative_iou,
        force_best: true,
    }
}

fn roi_sampling(cfg: &RunConfig) -> Sampling {
    Sampling {
        samples: cfg.loss.roi_samples,
        positive_fraction: cfg.loss.roi_positive_fraction,
        positive_iou: cfg.loss.roi_positive_iou,
        negative_iou: cfg.loss.roi_positive_iou,
        force_best: false,
    }
}

struct StageResult {
    prototypes: Vec<Var>,
    kd: Option<Var>,
    contrastive: Option<Var>,
}

fn run_stage<T: Scalar>(
    model: &Model<T>,
    cx: &Ctx<T>,
    cfg: &RunConfig,
    stage: Stage,
    enabled: bool,
    visual: Var,
    tokens: &[Option<Tensor<T>>],
) -> Result<StageResult> {
    let g = cx.g;
    let n = tokens.len();
    if !enabled {
        return Ok(StageResult {
            prototypes: (0..n).map(|i| g.slice_rows(visual, i, i + 1)).collect(),
            kd: None,
            contrastive: None,
        });
    }
    let out = mpg_forward(cx, &model.cfg, &model.mpg, stage, visual, tokens, true)?;
    let named: Vec<usize> = (0..n).filter(|&i| out.teacher_semantic[i].is_some()).collect();
    let (mut kd, mut contrastive) = (None, None);
    if !named.is_empty() {
        let s = g.concat_rows(&named.iter().map(|&i| out.student_semantic[i]).collect::<Vec<_>>());
        let t = g.concat_rows(
            &named
                .iter()
                .map(|&i| out.teacher_semantic[i].expect("named"))
                .collect::<Vec<_>>(),
        );
        kd = Some(kd_loss(g, s, t)?);
        let source = match cfg.loss.contrastive_source {
            ContrastiveSource::Teacher => t,
            ContrastiveSource::Student => s,
        };
        let mapped = semantic_projection(cx, stage, source);
        let vis = g.gather_rows(out.pooled, &named);
        contrastive = Some(contrastive_loss(
            g,
            vis,
            mapped,
            cfg.loss.temperature,
            cfg.loss.norm_floor,
        )?);
    }
    Ok(StageResult {
        prototypes: (0..n).map(|i| out.detection_prototype(i)).collect(),
        kd,
        contrastive,
    })
}

/// Builds the full training objective of one episode on `cx`'s graph.
/// `names` supplies class names; classes without one use the student path.
pub fn episode_loss<T: Scalar, R: Rng + ?Sized>(
    model: &Model<T>,
    cx: &Ctx<T>,
    ep: &Episode,
    names: &BTreeMap<ClassId, Option<String>>,
    cfg: &RunConfig,
    rng: &mut R,
) -> Result<EpisodeLoss> {
    let g = cx.g;
    let m = &model.cfg;
    let classes = ep.classes();
    let n = classes.len();
    let crops: Vec<&[SupportCrop]> = classes.iter().map(|c| ep.support[c].as_slice()).collect();
    let visual = model.support_visual(cx, &crops)?;
    let tokens: Vec<Option<Tensor<T>>> = classes
        .iter()
        .map(|c| model.name_tokens(names.get(c).and_then(|s| s.as_deref())))
        .collect::<Result<_>>()?;
    let placement = model.mpg.placement;
    let rpn_stage = run_stage(model, cx, cfg, Stage::Rpn, placement.rpn(), visual, &tokens)?;
    let rcnn_stage = run_stage(model, cx, cfg, Stage::Rcnn, placement.rcnn(), visual, &tokens)?;

    // Stage 1.
    let q = ep.queries.len();
    let images: Vec<_> = ep.queries.iter().map(|qi| &qi.pixels).collect();
    let qfeat = backbone(cx, g.constant(images_to_tensor(&images, m.image_size)?));
    let pooled = g.spatial_mean(g.concat_rows(&rpn_stage.prototypes));
    let (cls, reg) = rpn_head(cx, g.modulate(qfeat, pooled));
    let na = model.anchors.len();
    let gts: Vec<Vec<Vec<BBox>>> = ep
        .queries
        .iter()
        .map(|qi| {
            classes
                .iter()
                .map(|c| qi.boxes.iter().filter(|b| b.0 == *c).map(|b| b.1).collect())
                .collect()
        })
        .collect();
    let mut anchor_targets = SampledTargets::default();
    let rs = rpn_sampling(cfg);
    for qi in 0..q {
        for ni in 0..n {
            anchor_targets.extend(assign_targets(&model.anchors, &gts[qi][ni], &rs, rng));
        }
    }
    let beta = cfg.loss.smooth_l1_beta;
    let rpn = rpn_loss(
        g,
        g.reshape(cls, &[q * n * na]),
        g.reshape(reg, &[q * n * na * 4]),
        &anchor_targets,
        beta,
    );

    // Stage 2.
    let cls_v = g.value(cls).to_f64_vec();
    let reg_v = g.value(reg).to_f64_vec();
    let projected = final_projection(cx, qfeat);
    let ros = roi_sampling(cfg);
    let mut rcnn_terms = Vec::new();
    for ni in 0..n {
        let mut rois = Vec::new();
        let mut targets = SampledTargets::default();
        for qi in 0..q {
            let pair = qi * n + ni;
            let props = select_proposals(
                &model.anchors,
                &cls_v[pair * na..(pair + 1) * na],
                &reg_v[pair * na * 4..(pair + 1) * na * 4],
                m.image_size as f64,
                cfg.eval.rpn_nms_threshold,
                cfg.loss.train_proposals,
            );
            let boxes: Vec<BBox> = props.iter().map(|p| p.bbox).collect();
            let (sampled, t) = sample_rois(&boxes, &gts[qi][ni], &ros, rng);
            rois.extend(sampled.iter().map(|b| to_roi(qi, b)));
            targets.extend(t);
        }
        if rois.is_empty() {
            continue;
        }
        let feats = roi_features_var(cx, projected, &rois, m.roi_size);
        let proto = prototype_roi(cx, m, rcnn_stage.prototypes[ni]);
        let (logits, deltas) = match_head(cx, feats, proto);
        let r = rois.len();
        rcnn_terms.push(rcnn_loss(
            g,
            g.reshape(logits, &[r]),
            g.reshape(deltas, &[r * 4]),
            &targets,
            beta,
        ));
    }
    let zero = || g.constant(Tensor::scalar(T::zero()));
    let rcnn = if rcnn_terms.is_empty() {
        zero()
    } else {
        let k = rcnn_terms.len();
        let s = rcnn_terms.into_iter().reduce(|a, b| g.add(a, b)).expect("non-empty");
        g.scale(s, T::cast(1.0 / k as f64))
    };
    let sum_opt = |a: Option<Var>, b: Option<Var>| match (a, b) {
        (Some(a), Some(b)) => g.add(a, b),
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => zero(),
    };
    let kd = sum_opt(rpn_stage.kd, rcnn_stage.kd);
    let contrastive = sum_opt(rpn_stage.contrastive, rcnn_stage.contrastive);
    let total = g.add(g.add(rpn, rcnn), g.add(kd, contrastive));
    Ok(EpisodeLoss {
        rpn,
        rcnn,
        kd,
        contrastive,
        total,
    })
}

/// One row of the loss log: the batch mean of every component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub rate: f64,
    pub losses: LossBundle,
}

/// Model parameters plus the metadata needed to trust and reuse them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub iteration: usize,
    pub config_digest: String,
    /// Digest per always-frozen group, keyed by group name.
    pub frozen_digests: BTreeMap<String, String>,
    pub params: ParamStore<f32>,
}

pub fn frozen_digests<T: Scalar>(params: &ParamStore<T>) -> BTreeMap<String, String> {
    Group::ALL
        .into_iter()
        .filter(|g| g.always_frozen())
        .map(|g| (g.name().to_string(), params.digest(&[g])))
        .collect()
}

impl Checkpoint {
    pub fn new(config: &RunConfig, iteration: usize, params: ParamStore<f32>) -> Self {
        Self {
            config: config.clone(),
            iteration,
            config_digest: config.digest(),
            frozen_digests: frozen_digests(&params),
            params,
        }
    }

    pub fn model(&self) -> Model<f32> {
        self.model_as()
    }

    pub fn model_as<T: Scalar>(&self) -> Model<T> {
        let c = &self.config;
        Model::with_params(c.model.clone(), c.mpg.clone(), c.eval.clone(), self.params.cast())
    }

    pub fn digest(&self) -> String {
        self.params.digest_all()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LossRecord>,
}

struct Schedule {
    rate: f64,
    iterations: usize,
    decay_step: usize,
    batch: usize,
}

fn train_loop(
    mut model: Model<f32>,
    start_iteration: usize,
    ds: &Dataset,
    split: &ClassSplit,
    pool: ClassPool,
    spec: &EpisodeSpec,
    sched: &Schedule,
    trainable: Trainable,
    names: &BTreeMap<ClassId, Option<String>>,
    cfg: &RunConfig,
    rng: &mut ChaCha8Rng,
    mut on_iteration: impl FnMut(&LossRecord),
) -> Result<(Model<f32>, Vec<LossRecord>)> {
    let mut opt = Sgd::new();
    let mut log = Vec::with_capacity(sched.iterations);
    let inv = 1.0 / sched.batch as f64;
    let sampler = EpisodeSampler::new(ds, split, pool, spec)?;
    for it in 0..sched.iterations {
        let mut acc: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        let mut sum = LossBundle::default();
        for _ in 0..sched.batch {
            let ep = sampler.sample(rng)?;
            let g = Graph::new();
            let cx = Ctx::new(&g, &model.params, trainable.clone());
            let l = episode_loss(&model, &cx, &ep, names, cfg, rng)?;
            let val = |v: Var| g.value(v).item().as_f64();
            let b = total_loss(val(l.rpn), val(l.rcnn), val(l.kd), val(l.contrastive), it)?;
            sum = sum.add(&b);
            let grads = g.backward(l.total);
            for (name, grad) in cx.collect_grads(&grads) {
                match acc.get_mut(&name) {
                    Some(a) => a.add_assign(&grad),
                    None => {
                        acc.insert(name, grad);
                    }
                }
            }
        }
        for grad in acc.values_mut() {
            *grad = grad.scale(inv as f32);
            if !grad.all_finite() {
                return Err(Error::NonFinite {
                    iteration: it,
                    component: "gradient".into(),
                });
            }
        }
        let rate = learning_rate(sched.rate, sched.decay_step, it);
        opt.step(
            &mut model.params,
            &acc,
            rate,
            cfg.optimizer.momentum,
            cfg.optimizer.weight_decay,
        );
        let rec = LossRecord {
            iteration: start_iteration + it,
            rate,
            losses: sum.scaled(inv),
        };
        on_iteration(&rec);
        log.push(rec);
    }
    Ok((model, log))
}

fn names_for(ds: &Dataset, classes: impl IntoIterator<Item = ClassId>) -> BTreeMap<ClassId, Option<String>> {
    classes
        .into_iter()
        .map(|c| (c, ds.category(c).and_then(|k| k.name.clone())))
        .collect()
}

/// Episodic training over the base classes from freshly initialised weights.
pub fn meta_train(
    ds: &Dataset,
    split: &ClassSplit,
    cfg: &RunConfig,
    on_iteration: impl FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    if cfg.mode != Mode::MetaTrain {
        return Err(Error::Config("meta_train needs mode = \"meta-train\"".into()));
    }
    split.check_against(ds)?;
    let model = Model::<f32>::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let sched = Schedule {
        rate: cfg.optimizer.rate,
        iterations: cfg.train.iterations,
        decay_step: cfg.train.decay_step,
        batch: cfg.train.batch_size,
    };
    let names = names_for(ds, split.base.iter().copied());
    let (model, log) = train_loop(
        model,
        0,
        ds,
        split,
        ClassPool::Base,
        &EpisodeSpec::from_config(cfg),
        &sched,
        Trainable::all(),
        &names,
        cfg,
        &mut rng,
        on_iteration,
    )?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(cfg, cfg.train.iterations, model.params),
        log,
    })
}

/// Fine-tunes everything but the backbone on a balanced `shot`-per-class set
/// over base and novel classes. Novel names are never used.
pub fn finetune(
    ckpt: &Checkpoint,
    ds: &Dataset,
    split: &ClassSplit,
    shot: usize,
    cfg: &RunConfig,
    on_iteration: impl FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    if cfg.mode != Mode::Finetune {
        return Err(Error::Config("finetune needs mode = \"finetune\"".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let small = build_finetune_set(ds, split, shot, &mut rng)?;
    let mut model = ckpt.model();
    model.eval = cfg.eval.clone();
    let sched = Schedule {
        rate: cfg.finetune.rate,
        iterations: cfg.finetune.iterations,
        decay_step: cfg.finetune.decay_step,
        batch: cfg.finetune.batch_size,
    };
    let mut spec = EpisodeSpec::from_config(cfg);
    spec.shot = shot;
    let names = names_for(&small, split.base.iter().copied());
    let (model, log) = train_loop(
        model,
        ckpt.iteration,
        &small,
        split,
        ClassPool::All,
        &spec,
        &sched,
        Trainable::except(&[Group::Backbone]),
        &names,
        cfg,
        &mut rng,
        on_iteration,
    )?;
    let mut out_cfg = ckpt.config.clone();
    out_cfg.mode = Mode::Finetune;
    out_cfg.finetune = cfg.finetune.clone();
    out_cfg.eval = cfg.eval.clone();
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(&out_cfg, ckpt.iteration + cfg.finetune.iterations, model.params),
        log,
    })
}

#[derive(Serialize, Deserialize)]
struct StoredParam {
    group: Group,
    shape: Vec<usize>,
    data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct StoredCheckpoint {
    iteration: usize,
    config_digest: String,
    frozen_digests: BTreeMap<String, String>,
    param_digest: String,
    config: RunConfig,
    params: BTreeMap<String, StoredParam>,
}

/// A loaded checkpoint plus any non-fatal findings.
#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub checkpoint: Checkpoint,
    pub warnings: Vec<String>,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let stored = StoredCheckpoint {
        iteration: ckpt.iteration,
        config_digest: ckpt.config_digest.clone(),
        frozen_digests: ckpt.frozen_digests.clone(),
        param_digest: ckpt.digest(),
        config: ckpt.config.clone(),
        params: ckpt
            .params
            .iter()
            .map(|(k, p)| {
                (
                    k.clone(),
                    StoredParam {
                        group: p.group,
                        shape: p.value.shape().to_vec(),
                        data: p.value.data().to_vec(),
                    },
                )
            })
            .collect(),
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string(&stored).map_err(|e| Error::parse("checkpoint", e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads and verifies a checkpoint. Digest mismatches are integrity errors;
/// a config digest different from `expected` is reported as a warning.
pub fn load_checkpoint(path: &Path, expected: Option<&RunConfig>) -> Result<LoadedCheckpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let stored: StoredCheckpoint =
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
    let mut params = ParamStore::new();
    for (name, p) in stored.params {
        let value = Tensor::try_new(&p.shape, p.data)
            .map_err(|e| Error::Integrity(format!("parameter {name}: {e}")))?;
        params.insert(name, p.group, value);
    }
    if params.digest_all() != stored.param_digest {
        return Err(Error::Integrity(format!("{}: parameter digest mismatch", path.display())));
    }
    if frozen_digests(&params) != stored.frozen_digests {
        return Err(Error::Integrity(format!("{}: frozen component digest mismatch", path.display())));
    }
    if stored.config.digest() != stored.config_digest {
        return Err(Error::Integrity(format!("{}: stored config does not match its digest", path.display())));
    }
    let mut warnings = Vec::new();
    if let Some(cfg) = expected {
        if cfg.digest() != stored.config_digest {
            warnings.push(format!(
                "config digest {} differs from the checkpoint's {}",
                cfg.digest(),
                stored.config_digest
            ));
        }
    }
    Ok(LoadedCheckpoint {
        checkpoint: Checkpoint {
            config: stored.config,
            iteration: stored.iteration,
            config_digest: stored.config_digest,
            frozen_digests: stored.frozen_digests,
            params,
        },
        warnings,
    })
}

pub fn write_loss_log(log: &[LossRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Parse {
        context: path.display().to_string(),
        message: e.to_string(),
    })?;
    let wrap = |e: csv::Error| Error::Parse {
        context: path.display().to_string(),
        message: e.to_string(),
    };
    w.write_record(["iteration", "rpn", "rcnn", "kd", "contrastive", "total"])
        .map_err(wrap)?;
    for r in log {
        let l = &r.losses;
        w.write_record([
            r.iteration.to_string(),
            l.rpn.to_string(),
            l.rcnn.to_string(),
            l.kd.to_string(),
            l.contrastive.to_string(),
            l.total.to_string(),
        ])
        .map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// SHA-256 of the loss log as written to CSV.
pub fn loss_log_digest(log: &[LossRecord]) -> String {
    let mut h = Sha256::new();
    for r in log {
        let l = &r.losses;
        let _ = writeln!(
            HashWriter(&mut h),
            "{},{},{},{},{},{}",
            r.iteration,
            l.rpn,
            l.rcnn,
            l.kd,
            l.contrastive,
            l.total
        );
    }
    hex::encode(h.finalize())
}

struct HashWriter<'a>(&'a mut Sha256);

impl Write for HashWriter<'_> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.update(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_divides_once() {
        let rates: Vec<f64> = (0..10).map(|i| learning_rate(0.1, 6, i)).collect();
        assert!(rates[..6].iter().all(|&r| r == 0.1));
        assert!(rates[6..].iter().all(|&r| r == 0.1 / 10.0));
    }

    #[test]
    fn sgd_matches_hand_computation() {
        let mut ps = ParamStore::<f64>::new();
        ps.insert("w", Group::Head, Tensor::from_f64(&[1], &[1.0]));
        let mut opt = Sgd::new();
        let grads: BTreeMap<String, Tensor<f64>> = [("w".to_string(), Tensor::from_f64(&[1], &[0.5]))].into();
        opt.step(&mut ps, &grads, 0.1, 0.9, 0.01);
        // v = 0.5 + 0.01; w = 1 - 0.1 * 0.51
        assert!((ps.tensor("w").data()[0] - 0.949).abs() < 1e-12);
        opt.step(&mut ps, &grads, 0.1, 0.9, 0.01);
        let v2 = 0.9 * 0.51 + 0.5 + 0.01 * 0.949;
        assert!((ps.tensor("w").data()[0] - (0.949 - 0.1 * v2)).abs() < 1e-12);
    }
}
