//! Multi-modal prototype generation: visual prototypes, student and teacher
//! soft-prompt generators, semantic prototypes from the frozen text encoder,
//! and fusion back into the visual feature space.

use mmfsod_autograd::{Scalar, Tensor, Var};

use crate::config::{FusionMode, GeneratorVariant, ModelConfig, MpgConfig, PromptPosition};
use crate::encoders::text_encode_var;
use crate::params::{Ctx, Group, Init, ParamStore};
use crate::{Error, Result};

/// Standard deviation of freshly initialised generator weights.
pub const GENERATOR_INIT_STD: f64 = 0.02;

/// The two detector stages that carry their own MPG instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Rpn,
    Rcnn,
}

impl Stage {
    pub const BOTH: [Stage; 2] = [Stage::Rpn, Stage::Rcnn];

    pub fn prefix(self) -> &'static str {
        match self {
            Stage::Rpn => "mpg.rpn",
            Stage::Rcnn => "mpg.rcnn",
        }
    }

    pub fn group(self) -> Group {
        match self {
            Stage::Rpn => Group::MpgRpn,
            Stage::Rcnn => Group::MpgRcnn,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Student,
    Teacher,
}

impl Role {
    fn name(self) -> &'static str {
        match self {
            Role::Student => "student",
            Role::Teacher => "teacher",
        }
    }
}

fn generator_params<T: Scalar>(
    ps: &mut ParamStore<T>,
    name: &str,
    group: Group,
    m: &ModelConfig,
    mpg: &MpgConfig,
    init: &mut Init,
) {
    let (cv, ct, len) = (m.feature_dim, m.text_dim, mpg.prompt_len);
    let s = GENERATOR_INIT_STD;
    match mpg.generator_variant {
        GeneratorVariant::OneLayer => {
            ps.insert(format!("{name}.fc.w"), group, init.normal(&[cv, len * ct], s));
            ps.insert(format!("{name}.fc.b"), group, Tensor::zeros(&[len * ct]));
        }
        GeneratorVariant::TwoLayer => {
            ps.insert(format!("{name}.fc1.w"), group, init.he(cv, cv));
            ps.insert(format!("{name}.fc1.b"), group, Tensor::zeros(&[cv]));
            ps.insert(format!("{name}.fc2.w"), group, init.normal(&[cv, len * ct], s));
            ps.insert(format!("{name}.fc2.b"), group, Tensor::zeros(&[len * ct]));
        }
        GeneratorVariant::PreTransformer => {
            ps.insert(format!("{name}.queries"), group, init.normal(&[len, ct], s));
            ps.insert(format!("{name}.k"), group, init.normal(&[cv, ct], 1.0 / (cv as f64).sqrt()));
            ps.insert(format!("{name}.v"), group, init.normal(&[cv, ct], s));
        }
        GeneratorVariant::PostTransformer => {
            ps.insert(format!("{name}.prompt"), group, init.normal(&[len, ct], s));
            ps.insert(format!("{name}.q"), group, init.normal(&[ct, ct], 1.0 / (ct as f64).sqrt()));
            ps.insert(format!("{name}.k"), group, init.normal(&[cv, ct], 1.0 / (cv as f64).sqrt()));
            ps.insert(format!("{name}.v"), group, init.normal(&[cv, ct], s));
        }
    }
}

pub(crate) fn init_params<T: Scalar>(ps: &mut ParamStore<T>, m: &ModelConfig, mpg: &MpgConfig, init: &mut Init) {
    let (cv, ct) = (m.feature_dim, m.text_dim);
    for stage in Stage::BOTH {
        let (p, g) = (stage.prefix(), stage.group());
        for role in [Role::Student, Role::Teacher] {
            generator_params(ps, &format!("{p}.{}", role.name()), g, m, mpg, init);
        }
        // Zero so every fused prototype starts equal to its visual prototype.
        ps.insert(format!("{p}.proj.w"), g, Tensor::zeros(&[ct, cv]));
        ps.insert(format!("{p}.proj.b"), g, Tensor::zeros(&[cv]));
        if mpg.fusion == FusionMode::Concatenation {
            let mut w = Tensor::zeros(&[2 * cv, cv]);
            for i in 0..cv {
                w.data_mut()[i * cv + i] = T::one();
            }
            ps.insert(format!("{p}.fuse.w"), g, w);
            ps.insert(format!("{p}.fuse.b"), g, Tensor::zeros(&[cv]));
        }
    }
}

/// Mean of `[N * K, h, w, C]` support maps over each class's `K` shots.
pub fn visual_prototype<T: Scalar>(cx: &Ctx<T>, support: Var, shot: usize) -> Result<Var> {
    let shape = cx.g.shape(support);
    if shot == 0 || shape[0] == 0 || shape[0] % shot != 0 {
        return Err(Error::Shape(format!("{} support maps do not split into {shot}-shot groups", shape[0])));
    }
    Ok(cx.g.group_mean(support, shape[0] / shot))
}

/// Elementwise mean of `K >= 1` equally shaped maps.
pub fn visual_prototype_of<T: Scalar>(maps: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = maps.first().ok_or_else(|| Error::Shape("no support maps".into()))?;
    let mut acc = Tensor::zeros(first.shape());
    for m in maps {
        if m.shape() != first.shape() {
            return Err(Error::Shape(format!("support map {:?} vs {:?}", m.shape(), first.shape())));
        }
        acc.add_assign(m);
    }
    Ok(acc.scale(T::cast(1.0 / maps.len() as f64)))
}

/// Spatial average: `[N, h, w, C]` to `[N, C]`.
pub fn pool<T: Scalar>(cx: &Ctx<T>, proto: Var) -> Var {
    cx.g.spatial_mean(proto)
}

/// Soft prompt `[M, C_t]` for one class from its pooled prototype `[1, C_v]`
/// and its prototype cells `[h * w, C_v]` (read by the attention variants).
pub fn generate_prompt<T: Scalar>(
    cx: &Ctx<T>,
    m: &ModelConfig,
    mpg: &MpgConfig,
    stage: Stage,
    role: Role,
    pooled: Var,
    cells: Var,
) -> Result<Var> {
    let g = cx.g;
    let shape = g.shape(pooled);
    if shape != [1, m.feature_dim] {
        return Err(Error::Shape(format!("pooled prototype must be [1, {}], got {shape:?}", m.feature_dim)));
    }
    let name = format!("{}.{}", stage.prefix(), role.name());
    let p = |s: &str| cx.p(&format!("{name}.{s}"));
    let (len, ct) = (mpg.prompt_len, m.text_dim);
    let prompt = match mpg.generator_variant {
        GeneratorVariant::OneLayer => g.reshape(g.linear(pooled, p("fc.w"), p("fc.b")), &[len, ct]),
        GeneratorVariant::TwoLayer => {
            let h = g.relu(g.linear(pooled, p("fc1.w"), p("fc1.b")));
            g.reshape(g.linear(h, p("fc2.w"), p("fc2.b")), &[len, ct])
        }
        GeneratorVariant::PreTransformer => {
            let q = p("queries");
            g.add(q, cross_attend(cx, q, cells, p("k"), p("v"), ct))
        }
        GeneratorVariant::PostTransformer => p("prompt"),
    };
    Ok(prompt)
}

fn cross_attend<T: Scalar>(cx: &Ctx<T>, q: Var, cells: Var, wk: Var, wv: Var, dim: usize) -> Var {
    let g = cx.g;
    let k = g.matmul(cells, wk);
    let v = g.matmul(cells, wv);
    let att = g.softmax_rows(g.scale(g.matmul_nt(q, k), T::cast(1.0 / (dim as f64).sqrt())));
    g.matmul(att, v)
}

/// Encoder input for the teacher: prompt rows and name rows in the configured order.
pub fn teacher_sequence<T: Scalar>(cx: &Ctx<T>, position: PromptPosition, prompt: Var, name: Var) -> Var {
    let g = cx.g;
    match position {
        PromptPosition::Prefix => g.concat_rows(&[prompt, name]),
        PromptPosition::Suffix => g.concat_rows(&[name, prompt]),
        PromptPosition::Surround => {
            let len = g.shape(prompt)[0];
            let half = len / 2;
            if half == 0 {
                g.concat_rows(&[prompt, name])
            } else {
                g.concat_rows(&[g.slice_rows(prompt, 0, half), name, g.slice_rows(prompt, half, len)])
            }
        }
    }
}

fn refine<T: Scalar>(cx: &Ctx<T>, m: &ModelConfig, mpg: &MpgConfig, name: &str, sem: Var, cells: Var) -> Var {
    if mpg.generator_variant != GeneratorVariant::PostTransformer {
        return sem;
    }
    let g = cx.g;
    let q = g.matmul(sem, cx.p(&format!("{name}.q")));
    let k = cx.p(&format!("{name}.k"));
    let v = cx.p(&format!("{name}.v"));
    g.add(sem, cross_attend(cx, q, cells, k, v, m.text_dim))
}

/// Semantic prototype `[1, C_t]` from the prompt rows alone.
pub fn student_semantic_prototype<T: Scalar>(
    cx: &Ctx<T>,
    m: &ModelConfig,
    mpg: &MpgConfig,
    stage: Stage,
    prompt: Var,
    cells: Var,
) -> Result<Var> {
    let sem = text_encode_var(cx, m, prompt)?;
    Ok(refine(cx, m, mpg, &format!("{}.student", stage.prefix()), sem, cells))
}

/// Semantic prototype `[1, C_t]` from prompt rows plus embedded name tokens.
pub fn teacher_semantic_prototype<T: Scalar>(
    cx: &Ctx<T>,
    m: &ModelConfig,
    mpg: &MpgConfig,
    stage: Stage,
    prompt: Var,
    name: &Tensor<T>,
    cells: Var,
) -> Result<Var> {
    if name.dim(0) == 0 {
        return Err(Error::Validation("teacher prompt needs at least one name token".into()));
    }
    let name = cx.g.constant(name.clone());
    let seq = teacher_sequence(cx, mpg.prompt_position, prompt, name);
    let sem = text_encode_var(cx, m, seq)?;
    Ok(refine(cx, m, mpg, &format!("{}.teacher", stage.prefix()), sem, cells))
}

/// The learnable `C_t -> C_v` map applied to semantic prototypes `[N, C_t]`.
pub fn semantic_projection<T: Scalar>(cx: &Ctx<T>, stage: Stage, sem: Var) -> Var {
    let p = stage.prefix();
    cx.g.linear(sem, cx.p(&format!("{p}.proj.w")), cx.p(&format!("{p}.proj.b")))
}

/// Fuses one semantic prototype `[1, C_t]` into one visual prototype
/// `[1, h, w, C_v]`.
pub fn fuse<T: Scalar>(cx: &Ctx<T>, stage: Stage, mode: FusionMode, sem: Var, visual: Var) -> Var {
    let g = cx.g;
    let shape = g.shape(visual);
    let c = shape[shape.len() - 1];
    let cells: usize = shape[..shape.len() - 1].iter().product();
    let mapped = g.reshape(semantic_projection(cx, stage, sem), &[c]);
    let flat = g.reshape(visual, &[cells, c]);
    let fused = match mode {
        FusionMode::Addition => g.add_bias(flat, mapped),
        FusionMode::Multiplication => {
            let gain = g.add_bias(g.reshape(mapped, &[1, c]), g.constant(Tensor::ones(&[c])));
            g.mul_bias(flat, g.reshape(gain, &[c]))
        }
        FusionMode::Concatenation => {
            let p = stage.prefix();
            let wide = g.concat_last(&[flat, g.broadcast_rows(mapped, cells)]);
            g.linear(wide, cx.p(&format!("{p}.fuse.w")), cx.p(&format!("{p}.fuse.b")))
        }
    };
    g.reshape(fused, &shape)
}

/// Everything one stage's MPG produces for a set of classes.
pub struct MpgOutput {
    /// `[N, h, w, C_v]` averaged support maps.
    pub visual: Var,
    /// `[N, C_v]`
    pub pooled: Var,
    /// Per class, `[1, C_t]`.
    pub student_semantic: Vec<Var>,
    /// Per class, present when the class has name tokens and the teacher ran.
    pub teacher_semantic: Vec<Option<Var>>,
    /// Per class student-path fused prototype `[1, h, w, C_v]`.
    pub student: Vec<Var>,
    pub teacher: Vec<Option<Var>>,
}

impl MpgOutput {
    /// The prototype that drives detection: teacher where available.
    pub fn detection_prototype(&self, class: usize) -> Var {
        self.teacher[class].unwrap_or(self.student[class])
    }
}

/// Runs one stage's MPG over visual prototypes `[N, h, w, C_v]`. `names[i]`
/// holds the embedded name tokens of class `i`; when `use_teacher` is false or
/// a class has no name only the student path is computed for it.
pub fn mpg_forward<T: Scalar>(
    cx: &Ctx<T>,
    m: &ModelConfig,
    mpg: &MpgConfig,
    stage: Stage,
    visual: Var,
    names: &[Option<Tensor<T>>],
    use_teacher: bool,
) -> Result<MpgOutput> {
    let g = cx.g;
    let shape = g.shape(visual);
    let n = shape[0];
    if names.len() != n {
        return Err(Error::Shape(format!("{} name entries for {n} prototypes", names.len())));
    }
    let cells = shape[1] * shape[2];
    let c = shape[3];
    let pooled = pool(cx, visual);
    let frozen_visual = g.detach(visual);
    let frozen_pooled = g.detach(pooled);
    let mut out = MpgOutput {
        visual,
        pooled,
        student_semantic: Vec::with_capacity(n),
        teacher_semantic: Vec::with_capacity(n),
        student: Vec::with_capacity(n),
        teacher: Vec::with_capacity(n),
    };
    for i in 0..n {
        let vis_i = g.slice_rows(visual, i, i + 1);
        // The student sees detached visual input so distillation only moves it.
        let s_cells = g.reshape(g.slice_rows(frozen_visual, i, i + 1), &[cells, c]);
        let s_pooled = g.slice_rows(frozen_pooled, i, i + 1);
        let s_prompt = generate_prompt(cx, m, mpg, stage, Role::Student, s_pooled, s_cells)?;
        let s_sem = student_semantic_prototype(cx, m, mpg, stage, s_prompt, s_cells)?;
        out.student.push(fuse(cx, stage, mpg.fusion, s_sem, vis_i));
        out.student_semantic.push(s_sem);
        match (&names[i], use_teacher) {
            (Some(name), true) => {
                let t_cells = g.reshape(vis_i, &[cells, c]);
                let t_pooled = g.slice_rows(pooled, i, i + 1);
                let t_prompt = generate_prompt(cx, m, mpg, stage, Role::Teacher, t_pooled, t_cells)?;
                let t_sem = teacher_semantic_prototype(cx, m, mpg, stage, t_prompt, name, t_cells)?;
                out.teacher.push(Some(fuse(cx, stage, mpg.fusion, t_sem, vis_i)));
                out.teacher_semantic.push(Some(t_sem));
            }
            _ => {
                out.teacher.push(None);
                out.teacher_semantic.push(None);
            }
        }
    }
    Ok(out)
}
