//! Student and mean-teacher networks with their projection heads.
//!
//! A [`Backbone`] (encoder + classifier) maps inputs to features `f` and class
//! logits; a [`ProjectionHead`] maps `f` to the `d`-dimensional embedding that
//! is L2-normalized into `g`. The teacher backbone is an EMA copy of the
//! student's, while each side owns an independently trained projection head.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::FeatureKind;
use crate::seed;
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Channel widths of the two convolution stages in the image encoder.
const CNN_CHANNELS: [usize; 2] = [8, 16];

/// Architecture hyperparameters shared by student and teacher.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelSpec {
    pub input: FeatureKind,
    pub hidden: usize,
    pub feature_dim: usize,
    pub proj_dim: usize,
    pub classes: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.proj_dim >= self.feature_dim {
            return Err(Error::Config(format!(
                "projection dim {} must be smaller than feature dim {}",
                self.proj_dim, self.feature_dim
            )));
        }
        if self.proj_dim < 2 || self.hidden == 0 || self.classes < 2 || self.input.is_empty() {
            return Err(Error::Config(format!("degenerate model spec {self:?}")));
        }
        if let FeatureKind::Image { height, width, .. } = self.input {
            if height < 4 || width < 4 {
                return Err(Error::Config("images must be at least 4×4".into()));
            }
        }
        Ok(())
    }
}

/// Collects the tape variables bound for a module's parameters so gradients
/// can be copied back after `backward`.
pub struct Binding<'t> {
    tape: &'t Tape,
    trainable: bool,
    vars: Vec<Var<'t>>,
}

impl<'t> Binding<'t> {
    pub fn new(tape: &'t Tape, trainable: bool) -> Self {
        Self {
            tape,
            trainable,
            vars: Vec::new(),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn bind(&mut self, t: &Tensor) -> Var<'t> {
        let v = if self.trainable {
            self.tape.param(t)
        } else {
            self.tape.constant(t.clone())
        };
        self.vars.push(v);
        v
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    /// Adds each bound variable's gradient to the matching parameter.
    pub fn accumulate(&self, params: Vec<&mut Tensor>) {
        assert_eq!(params.len(), self.vars.len(), "binding/parameter mismatch");
        if !self.trainable {
            return;
        }
        for (v, p) in self.vars.iter().zip(params) {
            self.tape.accumulate_into(*v, p);
        }
    }
}

fn uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl Linear {
    pub fn init(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: uniform(&[input, output], input, rng),
            bias: uniform(&[output], input, rng),
        }
    }

    pub fn forward<'t>(&self, b: &mut Binding<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let w = b.bind(&self.weight);
        let bias = b.bind(&self.bias);
        Ok(x.matmul(&w)?.add_bias(&bias)?)
    }

    fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    /// `[out, in, 3, 3]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl Conv {
    fn init(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: uniform(&[output, input, 3, 3], input * 9, rng),
            bias: uniform(&[output], input * 9, rng),
        }
    }

    fn forward<'t>(&self, b: &mut Binding<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let w = b.bind(&self.weight);
        let bias = b.bind(&self.bias);
        Ok(x.conv2d(&w, &bias, 1)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Encoder {
    /// `dim → hidden → D`, ReLU on the hidden layer.
    Mlp { l1: Linear, l2: Linear },
    /// Two 3×3 conv stages (ReLU + 2×2 average pooling) and one linear layer.
    Cnn {
        c1: Conv,
        c2: Conv,
        fc: Linear,
        input: [usize; 3],
    },
}

impl Encoder {
    fn init(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Self {
        match spec.input {
            FeatureKind::Vector { dim } => Encoder::Mlp {
                l1: Linear::init(dim, spec.hidden, rng),
                l2: Linear::init(spec.hidden, spec.feature_dim, rng),
            },
            FeatureKind::Image {
                channels,
                height,
                width,
            } => {
                let [c1w, c2w] = CNN_CHANNELS;
                let flat = c2w * (height / 2 / 2) * (width / 2 / 2);
                Encoder::Cnn {
                    c1: Conv::init(channels, c1w, rng),
                    c2: Conv::init(c1w, c2w, rng),
                    fc: Linear::init(flat, spec.feature_dim, rng),
                    input: [channels, height, width],
                }
            }
        }
    }

    fn forward<'t>(&self, b: &mut Binding<'t>, x: Var<'t>) -> Result<Var<'t>> {
        match self {
            Encoder::Mlp { l1, l2 } => {
                let h = l1.forward(b, x)?.relu();
                l2.forward(b, h)
            }
            Encoder::Cnn { c1, c2, fc, input } => {
                let shape = x.shape();
                let batch = shape[0];
                let x = x.reshape(&[batch, input[0], input[1], input[2]])?;
                let h = c1.forward(b, x)?.relu().avg_pool2()?;
                let h = c2.forward(b, h)?.relu().avg_pool2()?;
                let flat = h.shape()[1..].iter().product::<usize>();
                fc.forward(b, h.reshape(&[batch, flat])?)
            }
        }
    }

    fn params(&self) -> Vec<&Tensor> {
        match self {
            Encoder::Mlp { l1, l2 } => [l1.params(), l2.params()].concat(),
            Encoder::Cnn { c1, c2, fc, .. } => {
                let mut p = vec![&c1.weight, &c1.bias, &c2.weight, &c2.bias];
                p.extend(fc.params());
                p
            }
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Encoder::Mlp { l1, l2 } => {
                let mut p = l1.params_mut();
                p.extend(l2.params_mut());
                p
            }
            Encoder::Cnn { c1, c2, fc, .. } => {
                let mut p = vec![&mut c1.weight, &mut c1.bias, &mut c2.weight, &mut c2.bias];
                p.extend(fc.params_mut());
                p
            }
        }
    }
}

/// Encoder plus classifier head: the weights averaged into the mean teacher.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub encoder: Encoder,
    pub classifier: Linear,
}

impl Backbone {
    pub fn init(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Self {
        Self {
            encoder: Encoder::init(spec, rng),
            classifier: Linear::init(spec.feature_dim, spec.classes, rng),
        }
    }

    /// Returns `(features, logits)` for a `[B, input...]` batch.
    pub fn forward<'t>(&self, b: &mut Binding<'t>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let f = self.encoder.forward(b, x)?;
        let logits = self.classifier.forward(b, f)?;
        Ok((f, logits))
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.params();
        p.extend(self.classifier.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.params_mut();
        p.extend(self.classifier.params_mut());
        p
    }
}

/// Linear map `D → d`; its output is L2-normalized into the embedding `g`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    pub linear: Linear,
}

impl ProjectionHead {
    pub fn init(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Self {
        Self {
            linear: Linear::init(spec.feature_dim, spec.proj_dim, rng),
        }
    }

    /// Unit-norm embeddings `[B, d]`.
    pub fn forward<'t>(&self, b: &mut Binding<'t>, f: Var<'t>) -> Result<Var<'t>> {
        Ok(self.linear.forward(b, f)?.l2_normalize()?)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.linear.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.linear.params_mut()
    }
}

/// Everything one forward pass yields.
#[derive(Clone, Copy, Debug)]
pub struct Output<'t> {
    pub f: Var<'t>,
    pub g: Var<'t>,
    pub logits: Var<'t>,
    pub p: Var<'t>,
}

/// A backbone with its projection head.
#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub backbone: Backbone,
    pub proj: ProjectionHead,
}

impl Branch {
    pub fn forward<'t>(
        &self,
        backbone: &mut Binding<'t>,
        proj: &mut Binding<'t>,
        x: Var<'t>,
    ) -> Result<Output<'t>> {
        let (f, logits) = self.backbone.forward(backbone, x)?;
        let g = self.proj.forward(proj, f)?;
        let p = logits.softmax(1)?;
        Ok(Output { f, g, logits, p })
    }

    /// Gradient-free forward pass on a raw batch.
    pub fn infer(&self, x: Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let tape = Tape::new();
        let xv = tape.constant(x);
        let mut bb = Binding::new(&tape, false);
        let mut pb = Binding::new(&tape, false);
        let out = self.forward(&mut bb, &mut pb, xv)?;
        Ok((out.g.value(), out.logits.value(), out.p.value()))
    }
}

/// Student and mean teacher.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanTeacher {
    pub spec: ModelSpec,
    pub student: Branch,
    pub teacher: Branch,
}

impl MeanTeacher {
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let student = Branch {
            backbone: Backbone::init(&spec, &mut seed::stream(seed, &[seed::TAG_STUDENT])),
            proj: ProjectionHead::init(&spec, &mut seed::stream(seed, &[seed::TAG_STUDENT_PROJ])),
        };
        let teacher = init_teacher(&student, &spec, seed);
        Ok(Self {
            spec,
            student,
            teacher,
        })
    }

    /// Parameters updated by the optimizer: θ, ζ_s, ζ_t.
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.student.backbone.params_mut();
        p.extend(self.student.proj.params_mut());
        p.extend(self.teacher.proj.params_mut());
        p
    }

    pub fn trainable(&self) -> Vec<&Tensor> {
        let mut p = self.student.backbone.params();
        p.extend(self.student.proj.params());
        p.extend(self.teacher.proj.params());
        p
    }

    pub fn zero_grad(&mut self) {
        self.trainable_mut().into_iter().for_each(Tensor::zero_grad);
        self.teacher
            .backbone
            .params_mut()
            .into_iter()
            .for_each(Tensor::zero_grad);
    }

    pub fn ema_update(&mut self, alpha: f64) -> Result<()> {
        ema_update(&mut self.teacher.backbone, &self.student.backbone, alpha)
    }
}

/// Value copy of the student backbone with a freshly initialized projection head.
pub fn init_teacher(student: &Branch, spec: &ModelSpec, seed: u64) -> Branch {
    Branch {
        backbone: student.backbone.clone(),
        proj: ProjectionHead::init(spec, &mut seed::stream(seed, &[seed::TAG_TEACHER_PROJ])),
    }
}

/// `θ′ ← α·θ′ + (1−α)·θ` over encoder and classifier weights.
pub fn ema_update(teacher: &mut Backbone, student: &Backbone, alpha: f64) -> Result<()> {
    let src = student.params();
    let dst = teacher.params_mut();
    if src.len() != dst.len() {
        return Err(Error::Contract(format!(
            "state corruption: teacher has {} parameter tensors, student {}",
            dst.len(),
            src.len()
        )));
    }
    for (i, (t, s)) in dst.into_iter().zip(src).enumerate() {
        if t.shape() != s.shape() {
            return Err(Error::Contract(format!(
                "state corruption: parameter {i} is {:?} in the teacher, {:?} in the student",
                t.shape(),
                s.shape()
            )));
        }
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            // increment form keeps θ′ = θ an exact fixed point
            *tv += (1.0 - alpha) * (sv - *tv);
        }
    }
    Ok(())
}
