//! The training loop: scheduled loss assembly, optimizer and EMA steps,
//! memory-bank upkeep, evaluation, logging and checkpointing.

mod adam;
mod checkpoint;
mod config;
mod schedule;

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use adam::{adam_step, Adam, ADAM_EPS};
pub use checkpoint::{Blob, Checkpoint, Entry, MAGIC, VERSION};
pub use config::{DatasetSpec, LrSchedule, Method, TrainConfig};
pub use schedule::{lambda2, lr_schedule, ramp_weight};

use crate::dataio::{augment_batch, batch_iter, load_manifest, make_blobs, Dataset};
use crate::losses::{ccd_loss, class_weights, kl_loss, wce_loss, CcdParams, ClassWeights};
use crate::membank::{MemoryBank, RngState};
use crate::metrics::{confusion, ClassificationReport};
use crate::models::{Binding, Branch, MeanTeacher, ModelSpec};
use crate::par::{map_range, Exec};
use crate::relation::{
    compute_centroids, crp_loss, relation_graphs, relation_matrix, rd_statistic, CentroidSource,
    RelationMatrix,
};
use crate::seed;
use crate::tensor::{Tape, Tensor};
use crate::{Error, Result};

/// Rows per inference chunk during evaluation.
const EVAL_CHUNK: usize = 256;

/// Loss values and schedule of one optimizer step. Terms whose weight was
/// zero are not computed and recorded as `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub wce: f64,
    pub kl: Option<f64>,
    pub ccd_s: Option<f64>,
    pub ccd_t: Option<f64>,
    pub crp: Option<f64>,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub acc: f64,
    pub ap: f64,
    pub bma: f64,
    pub f1: f64,
    pub r_d: f64,
    pub r_d_intra: f64,
    pub r_d_inter: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub relation: RelationMatrix,
    pub predictions: Vec<usize>,
}

/// One line of the metrics log: epoch means of the step losses, the epoch's
/// loss weights, the last learning rate and held-out metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub wce: f64,
    pub kl: Option<f64>,
    pub ccd_s: Option<f64>,
    pub ccd_t: Option<f64>,
    pub crp: Option<f64>,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lr: f64,
    pub teacher_forwards: u64,
    pub eval: Option<EvalReport>,
}

/// Loads the configured data and splits off the evaluation set.
pub fn load_data(cfg: &TrainConfig) -> Result<(Dataset, Option<Dataset>)> {
    let (all, explicit_eval) = match &cfg.dataset {
        DatasetSpec::Blobs { counts, dim, spread } => {
            (make_blobs(cfg.data_seed, cfg.classes, counts, *dim, *spread)?, None)
        }
        DatasetSpec::Manifest {
            train,
            eval,
            features,
        } => {
            let t = load_manifest(train, *features, cfg.classes)?;
            let e = eval
                .as_ref()
                .map(|p| load_manifest(p, *features, cfg.classes))
                .transpose()?;
            (t, e)
        }
    };
    if let Some(e) = explicit_eval {
        return Ok((all, Some(e)));
    }
    if cfg.folds > 1 {
        let (train, test) = all.kfold(cfg.folds, cfg.fold, cfg.data_seed)?;
        return Ok((train, Some(test)));
    }
    if cfg.holdout == 0 {
        return Ok((all, None));
    }
    let (train, test) = all.split_holdout(cfg.holdout, cfg.data_seed)?;
    Ok((train, Some(test)))
}

/// Stacks same-shaped tensors into a `[B, ...]` batch.
pub fn stack<'a>(items: impl ExactSizeIterator<Item = &'a Tensor>) -> Result<Tensor> {
    let b = items.len();
    let mut shape = Vec::new();
    let mut data = Vec::new();
    for t in items {
        if shape.is_empty() {
            shape = t.shape().to_vec();
        } else if shape != t.shape() {
            return Err(Error::Contract(format!(
                "cannot stack {:?} with {:?}",
                shape,
                t.shape()
            )));
        }
        data.extend_from_slice(t.data());
    }
    shape.insert(0, b);
    Ok(Tensor::new(shape, data)?)
}

/// Student-only inference over `data`: classification metrics, the
/// label-sorted relation matrix of the embeddings and R_d.
pub fn evaluate(student: &Branch, data: &Dataset, exec: Exec) -> Result<EvalOutcome> {
    let chunks: Vec<&[crate::dataio::Sample]> = data.samples.chunks(EVAL_CHUNK).collect();
    let outputs = map_range(chunks.len(), exec, |c| -> Result<(Vec<f64>, Vec<usize>)> {
        let x = stack(chunks[c].iter().map(|s| &s.features))?;
        let (g, logits, _) = student.infer(x)?;
        let k = logits.shape()[1];
        let preds = logits
            .data()
            .chunks(k)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
            })
            .collect();
        Ok((g.into_data(), preds))
    });
    let mut embeddings = Vec::new();
    let mut predictions = Vec::with_capacity(data.len());
    for out in outputs {
        let (g, p) = out?;
        embeddings.extend(g);
        predictions.extend(p);
    }
    let labels = data.labels();
    let cm = confusion(&labels, &predictions, data.num_classes())?;
    let cls = ClassificationReport::from_confusion(&cm);
    let d = embeddings.len() / data.len();
    let relation = relation_matrix(&embeddings, d, &labels)?;
    let rd = rd_statistic(&relation)?;
    Ok(EvalOutcome {
        report: EvalReport {
            n: data.len(),
            acc: cls.acc,
            ap: cls.ap,
            bma: cls.bma,
            f1: cls.f1,
            r_d: rd.ratio,
            r_d_intra: rd.intra,
            r_d_inter: rd.inter,
            warnings: cls.warnings,
        },
        relation,
        predictions,
    })
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub cfg: TrainConfig,
    pub model: MeanTeacher,
    pub adam: Adam,
    pub bank_s: MemoryBank,
    pub bank_t: MemoryBank,
    pub weights: ClassWeights,
    pub ccd: CcdParams,
    /// Next epoch to run.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub total_steps: usize,
    /// Number of teacher forward passes run so far.
    pub teacher_forwards: u64,
}

fn model_spec(cfg: &TrainConfig) -> ModelSpec {
    ModelSpec {
        input: cfg.feature_kind(),
        hidden: cfg.hidden,
        feature_dim: cfg.feature_dim,
        proj_dim: cfg.proj_dim,
        classes: cfg.classes,
    }
}

fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

impl TrainState {
    pub fn new(cfg: TrainConfig, train: &Dataset) -> Result<Self> {
        cfg.validate()?;
        if train.kind != cfg.feature_kind() {
            return Err(Error::Config(format!(
                "data has features {:?}, config expects {:?}",
                train.kind,
                cfg.feature_kind()
            )));
        }
        if train.num_classes() != cfg.classes {
            return Err(Error::Config(format!(
                "data has {} classes, config expects {}",
                train.num_classes(),
                cfg.classes
            )));
        }
        let model = MeanTeacher::init(model_spec(&cfg), cfg.seed)?;
        let adam = Adam::new(&model.trainable(), cfg.adam_beta1, cfg.adam_beta2);
        let labels = train.labels();
        let bank_s = MemoryBank::new(
            labels.clone(),
            cfg.proj_dim,
            cfg.bank_momentum,
            seed::derive(cfg.seed, &[seed::TAG_BANK_S]),
        )?;
        let bank_t = MemoryBank::new(
            labels,
            cfg.proj_dim,
            cfg.bank_momentum,
            seed::derive(cfg.seed, &[seed::TAG_BANK_T]),
        )?;
        let ccd = CcdParams::new(cfg.tau, cfg.k_p, cfg.k_n, train.len())?;
        let total_steps = cfg.epochs * steps_per_epoch(train.len(), cfg.batch_size);
        Ok(Self {
            weights: class_weights(&train.stats),
            cfg,
            model,
            adam,
            bank_s,
            bank_t,
            ccd,
            epoch: 0,
            step: 0,
            total_steps,
            teacher_forwards: 0,
        })
    }

    /// Loss weights `(λ₁, λ₂, λ₃)` for an epoch under this state's method.
    pub fn lambdas(&self, epoch: usize) -> Result<(f64, f64, f64)> {
        let cfg = &self.cfg;
        let m = cfg.method;
        let ramp = ramp_weight(epoch, cfg.ramp_t)?;
        let warm = cfg.bank_warmup && epoch == 0;
        let l1 = if m.uses_teacher() { cfg.lambda1_max * ramp } else { 0.0 };
        let l2 = if m.uses_ccd() && !warm { lambda2(epoch, cfg.ramp_t, cfg) } else { 0.0 };
        let l3 = if m.uses_crp() && !warm { cfg.lambda3_max * ramp } else { 0.0 };
        Ok((l1, l2, l3))
    }

    /// One optimizer step on the given batch of training indices.
    pub fn train_step(&mut self, train: &Dataset, indices: &[usize]) -> Result<StepRecord> {
        let cfg = self.cfg.clone();
        let epoch = self.epoch;
        let method = cfg.method;
        let (l1, l2, l3) = self.lambdas(epoch)?;
        let lr = lr_schedule(self.step, self.total_steps, &cfg);

        let work = indices.len() * train.kind.len();
        let pairs = augment_batch(train, indices, cfg.augment, cfg.seed, epoch, Exec::auto(work));
        let labels: Vec<usize> = pairs.iter().map(|p| p.label).collect();
        let x_s = stack(pairs.iter().map(|p| &p.x_s))?;
        let run_teacher = method.uses_teacher();

        let tape = Tape::new();
        let mut bb_s = Binding::new(&tape, true);
        let mut pb_s = Binding::new(&tape, true);
        let out_s = self.model.student.forward(&mut bb_s, &mut pb_s, tape.constant(x_s))?;

        // The teacher backbone enters as constants, so only ζ_t can receive
        // gradient from the teacher branch.
        let mut bb_t = Binding::new(&tape, false);
        let mut pb_t = Binding::new(&tape, true);
        let out_t = if run_teacher {
            let x_t = stack(pairs.iter().map(|p| &p.x_t))?;
            self.teacher_forwards += 1;
            Some(self.model.teacher.forward(&mut bb_t, &mut pb_t, tape.constant(x_t))?)
        } else {
            None
        };

        let wce = wce_loss(out_s.logits, &labels, &self.weights)?;
        let mut total = wce;
        let mut kl = None;
        let mut ccd_s = None;
        let mut ccd_t = None;
        let mut crp = None;
        if let Some(out_t) = out_t {
            if l1 > 0.0 {
                let v = kl_loss(out_s.p, &out_t.p.value())?;
                kl = Some(v.item());
                total = total.add(&v.scale(l1))?;
            }
            if l2 > 0.0 {
                let (pos_t, neg_t) = draw_contrast(&mut self.bank_t, indices, &labels, &self.ccd)?;
                let (pos_s, neg_s) = draw_contrast(&mut self.bank_s, indices, &labels, &self.ccd)?;
                let vs = ccd_loss(out_s.g, &pos_t, &neg_t, &self.ccd)?;
                let vt = ccd_loss(out_t.g, &pos_s, &neg_s, &self.ccd)?;
                ccd_s = Some(vs.item());
                ccd_t = Some(vt.item());
                total = total.add(&vs.add(&vt)?.scale(l2))?;
            }
            if l3 > 0.0 {
                let k = cfg.classes;
                let c_s = compute_centroids(&self.bank_s, k, CentroidSource::Student)?;
                let c_t = compute_centroids(&self.bank_t, k, CentroidSource::Teacher)?;
                let r_s = relation_graphs(out_s.g, &c_s)?;
                let r_t = relation_graphs(out_t.g.detach(), &c_t)?.value();
                let v = crp_loss(r_s, &r_t)?;
                crp = Some(v.item());
                total = total.add(&v.scale(l3))?;
            }
        }

        let record = StepRecord {
            epoch,
            step: self.step,
            wce: wce.item(),
            kl,
            ccd_s,
            ccd_t,
            crp,
            total: total.item(),
            lambda1: l1,
            lambda2: l2,
            lambda3: l3,
            lr,
        };
        let finite = |v: Option<f64>| v.is_none_or(f64::is_finite);
        if !(record.wce.is_finite()
            && record.total.is_finite()
            && finite(kl)
            && finite(ccd_s)
            && finite(ccd_t)
            && finite(crp))
        {
            return Err(Error::NonFinite {
                epoch,
                step: self.step,
                components: format!(
                    "wce={} kl={:?} ccd_s={:?} ccd_t={:?} crp={:?}",
                    record.wce, kl, ccd_s, ccd_t, crp
                ),
            });
        }

        tape.backward(total)?;
        self.model.zero_grad();
        bb_s.accumulate(self.model.student.backbone.params_mut());
        pb_s.accumulate(self.model.student.proj.params_mut());
        if run_teacher {
            pb_t.accumulate(self.model.teacher.proj.params_mut());
        }
        self.adam.step(self.model.trainable_mut(), lr);
        self.model.zero_grad();

        if run_teacher {
            self.model.ema_update(cfg.ema_alpha)?;
        }
        if method.uses_banks() {
            if let Some(out_t) = out_t {
                self.bank_s.update(indices, &out_s.g.data())?;
                self.bank_t.update(indices, &out_t.g.data())?;
            }
        }
        self.step += 1;
        Ok(record)
    }

    /// Runs the next epoch; returns its step records.
    pub fn run_epoch(&mut self, train: &Dataset) -> Result<Vec<StepRecord>> {
        let batches = batch_iter(train.len(), self.cfg.batch_size, self.cfg.seed, self.epoch)?;
        let mut records = Vec::with_capacity(batches.len());
        for batch in &batches {
            records.push(self.train_step(train, batch)?);
        }
        self.epoch += 1;
        Ok(records)
    }

    pub fn evaluate(&self, data: &Dataset) -> Result<EvalOutcome> {
        evaluate(&self.model.student, data, Exec::available())
    }

    /// Serializes the complete state.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        let text = self.cfg.to_text().into_bytes();
        ck.insert("config", vec![text.len()], Blob::Bytes(text));
        ck.insert(
            "meta",
            vec![4],
            Blob::U64(vec![
                self.epoch as u64,
                self.step as u64,
                self.teacher_forwards,
                self.adam.t,
            ]),
        );
        let m = &self.model;
        for (prefix, tensors) in [
            ("student.backbone", m.student.backbone.params()),
            ("student.proj", m.student.proj.params()),
            ("teacher.backbone", m.teacher.backbone.params()),
            ("teacher.proj", m.teacher.proj.params()),
        ] {
            for (i, t) in tensors.into_iter().enumerate() {
                ck.insert(format!("{prefix}.{i}"), t.shape().to_vec(), Blob::F64(t.data().to_vec()));
            }
        }
        for (i, t) in m.trainable().into_iter().enumerate() {
            let dims = t.shape().to_vec();
            ck.insert(format!("adam.m.{i}"), dims.clone(), Blob::F64(self.adam.m[i].clone()));
            ck.insert(format!("adam.v.{i}"), dims, Blob::F64(self.adam.v[i].clone()));
        }
        for (name, bank) in [("bank_s", &self.bank_s), ("bank_t", &self.bank_t)] {
            ck.insert(
                format!("{name}.rows"),
                vec![bank.len(), bank.dim()],
                Blob::F64(bank.rows().to_vec()),
            );
            ck.insert(
                format!("{name}.labels"),
                vec![bank.len()],
                Blob::U64(bank.labels().iter().map(|&y| y as u64).collect()),
            );
            ck.insert(format!("{name}.momentum"), vec![1], Blob::F64(vec![bank.momentum()]));
            let rng = bank.rng_state();
            ck.insert(format!("{name}.rng_seed"), vec![32], Blob::Bytes(rng.seed.to_vec()));
            ck.insert(
                format!("{name}.rng_pos"),
                vec![3],
                Blob::U64(vec![
                    rng.stream,
                    rng.word_pos as u64,
                    (rng.word_pos >> 64) as u64,
                ]),
            );
        }
        ck
    }

    /// Restores a state. With `cfg = None` the embedded configuration is
    /// used; otherwise every tensor must match the shapes `cfg` implies.
    pub fn from_checkpoint(ck: &Checkpoint, cfg: Option<TrainConfig>, train: &Dataset) -> Result<Self> {
        let cfg = match cfg {
            Some(c) => c,
            None => {
                let text = std::str::from_utf8(ck.bytes("config")?)
                    .map_err(|_| Error::Checkpoint("embedded config is not UTF-8".into()))?;
                TrainConfig::parse(text, None)?
            }
        };
        let mut state = TrainState::new(cfg, train)?;
        let meta = ck.u64s("meta")?;
        let [epoch, step, forwards, adam_t] = meta else {
            return Err(Error::Checkpoint(format!("meta has {} fields, expected 4", meta.len())));
        };
        state.epoch = *epoch as usize;
        state.step = *step as usize;
        state.teacher_forwards = *forwards;
        state.adam.t = *adam_t;

        let m = &mut state.model;
        for (prefix, tensors) in [
            ("student.backbone", m.student.backbone.params_mut()),
            ("student.proj", m.student.proj.params_mut()),
            ("teacher.backbone", m.teacher.backbone.params_mut()),
            ("teacher.proj", m.teacher.proj.params_mut()),
        ] {
            for (i, t) in tensors.into_iter().enumerate() {
                let name = format!("{prefix}.{i}");
                let values = read_shaped(ck, &name, t.shape())?;
                t.data_mut().copy_from_slice(values);
            }
        }
        let shapes: Vec<Vec<usize>> = m.trainable().iter().map(|t| t.shape().to_vec()).collect();
        for (i, shape) in shapes.iter().enumerate() {
            state.adam.m[i] = read_shaped(ck, &format!("adam.m.{i}"), shape)?.to_vec();
            state.adam.v[i] = read_shaped(ck, &format!("adam.v.{i}"), shape)?.to_vec();
        }
        let expected = [state.bank_s.len(), state.cfg.proj_dim];
        state.bank_s = read_bank(ck, "bank_s", &expected, state.bank_s.labels())?;
        state.bank_t = read_bank(ck, "bank_t", &expected, state.bank_t.labels())?;
        Ok(state)
    }
}

fn read_shaped<'c>(ck: &'c Checkpoint, name: &str, expected: &[usize]) -> Result<&'c [f64]> {
    let (dims, values) = ck.f64s(name)?;
    if dims != expected {
        return Err(Error::Checkpoint(format!(
            "entry `{name}` has shape {dims:?} but the model expects {expected:?}"
        )));
    }
    Ok(values)
}

fn read_bank(ck: &Checkpoint, name: &str, expected: &[usize], labels: &[usize]) -> Result<MemoryBank> {
    let rows = read_shaped(ck, &format!("{name}.rows"), expected)?.to_vec();
    let stored: Vec<usize> = ck
        .u64s(&format!("{name}.labels"))?
        .iter()
        .map(|&y| y as usize)
        .collect();
    if stored != labels {
        return Err(Error::Checkpoint(format!(
            "{name} labels do not match the training data"
        )));
    }
    let (_, momentum) = ck.f64s(&format!("{name}.momentum"))?;
    let seed: [u8; 32] = ck
        .bytes(&format!("{name}.rng_seed"))?
        .try_into()
        .map_err(|_| Error::Checkpoint(format!("{name}.rng_seed must be 32 bytes")))?;
    let pos = ck.u64s(&format!("{name}.rng_pos"))?;
    let &[stream, lo, hi] = pos else {
        return Err(Error::Checkpoint(format!("{name}.rng_pos must hold 3 values")));
    };
    let rng = RngState {
        seed,
        stream,
        word_pos: (u128::from(hi) << 64) | u128::from(lo),
    };
    let momentum = *momentum
        .first()
        .ok_or_else(|| Error::Checkpoint(format!("{name}.momentum is empty")))?;
    MemoryBank::from_parts(rows, expected[1], stored, momentum, rng)
}

/// `[B, k, d]` positives and negatives for each query, drawn from `bank`.
fn draw_contrast(
    bank: &mut MemoryBank,
    indices: &[usize],
    labels: &[usize],
    ccd: &CcdParams,
) -> Result<(Tensor, Tensor)> {
    let d = bank.dim();
    let b = indices.len();
    let mut pos = Vec::with_capacity(b * ccd.k_p * d);
    let mut neg = Vec::with_capacity(b * ccd.k_n * d);
    for (&i, &y) in indices.iter().zip(labels) {
        let p = bank.sample_positives(i, y, ccd.k_p);
        pos.extend(bank.gather(&p));
        let n = bank.sample_negatives(y, ccd.k_n)?;
        neg.extend(bank.gather(&n));
    }
    Ok((
        Tensor::new(vec![b, ccd.k_p, d], pos)?,
        Tensor::new(vec![b, ccd.k_n, d], neg)?,
    ))
}

fn mean_of(records: &[StepRecord], f: impl Fn(&StepRecord) -> Option<f64>) -> Option<f64> {
    let vals: Vec<f64> = records.iter().filter_map(f).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

fn epoch_record(state: &TrainState, records: &[StepRecord], eval: Option<EvalReport>) -> EpochRecord {
    let last = records.last().expect("an epoch has at least one step");
    EpochRecord {
        epoch: last.epoch,
        steps: records.len(),
        wce: mean_of(records, |r| Some(r.wce)).unwrap_or(0.0),
        kl: mean_of(records, |r| r.kl),
        ccd_s: mean_of(records, |r| r.ccd_s),
        ccd_t: mean_of(records, |r| r.ccd_t),
        crp: mean_of(records, |r| r.crp),
        total: mean_of(records, |r| Some(r.total)).unwrap_or(0.0),
        lambda1: last.lambda1,
        lambda2: last.lambda2,
        lambda3: last.lambda3,
        lr: last.lr,
        teacher_forwards: state.teacher_forwards,
        eval,
    }
}

/// A training run: state plus the data it trains and evaluates on.
pub struct Trainer {
    pub state: TrainState,
    pub train: Dataset,
    pub eval: Option<Dataset>,
}

/// File names written into an output directory.
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const RELATION_FILE: &str = "relation.csv";

#[derive(Clone, Debug, Default)]
pub struct FitOutput {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub final_eval: Option<EvalOutcome>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (train, eval) = load_data(&cfg)?;
        let state = TrainState::new(cfg, &train)?;
        Ok(Self { state, train, eval })
    }

    /// Resumes from a checkpoint file. `cfg` overrides the embedded config.
    pub fn resume(path: &Path, cfg: Option<TrainConfig>) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let data_cfg = match &cfg {
            Some(c) => c.clone(),
            None => {
                let text = std::str::from_utf8(ck.bytes("config")?)
                    .map_err(|_| Error::Checkpoint("embedded config is not UTF-8".into()))?;
                TrainConfig::parse(text, None)?
            }
        };
        let (train, eval) = load_data(&data_cfg)?;
        let state = TrainState::from_checkpoint(&ck, Some(data_cfg), &train)?;
        Ok(Self { state, train, eval })
    }

    /// Trains until `until_epoch` (or the configured number of epochs).
    /// With an output directory, appends one metrics line per epoch, writes
    /// checkpoints every `checkpoint_every` epochs and at the end, and the
    /// final relation matrix.
    pub fn fit(&mut self, out: Option<&Path>, until_epoch: Option<usize>) -> Result<FitOutput> {
        let end = until_epoch.unwrap_or(self.state.cfg.epochs).min(self.state.cfg.epochs);
        let mut log: Option<File> = match out {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join(METRICS_FILE);
                let fresh = self.state.epoch == 0;
                let file = OpenOptions::new()
                    .create(true)
                    .write(true)
                    .append(!fresh)
                    .truncate(fresh)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Some(file)
            }
            None => None,
        };
        let mut output = FitOutput::default();
        while self.state.epoch < end {
            let records = self.state.run_epoch(&self.train)?;
            let eval = match &self.eval {
                Some(e) => Some(self.state.evaluate(e)?),
                None => None,
            };
            let rec = epoch_record(&self.state, &records, eval.as_ref().map(|e| e.report.clone()));
            if let (Some(file), Some(dir)) = (log.as_mut(), out) {
                let line = serde_json::to_string(&rec).expect("records serialize");
                writeln!(file, "{line}")
                    .and_then(|_| file.flush())
                    .map_err(|e| Error::io(dir.join(METRICS_FILE), e))?;
                let every = self.state.cfg.checkpoint_every;
                if every > 0 && self.state.epoch.is_multiple_of(every) && self.state.epoch < end {
                    self.save_checkpoint(&dir.join(CHECKPOINT_FILE))?;
                }
            }
            log::info!(
                "epoch {} total {:.4} bma {}",
                rec.epoch,
                rec.total,
                rec.eval.as_ref().map_or("-".into(), |e| format!("{:.4}", e.bma))
            );
            output.steps.extend(records);
            output.epochs.push(rec);
            output.final_eval = eval;
        }
        if let Some(dir) = out {
            self.save_checkpoint(&dir.join(CHECKPOINT_FILE))?;
            if let Some(ev) = &output.final_eval {
                let path = dir.join(RELATION_FILE);
                fs::write(&path, ev.relation.to_csv()).map_err(|e| Error::io(&path, e))?;
            }
        }
        Ok(output)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.state.to_checkpoint().save(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(method: Method) -> TrainConfig {
        TrainConfig {
            method,
            epochs: 3,
            ramp_t: 2,
            batch_size: 16,
            lr: 3e-3,
            k_p: 4,
            k_n: 16,
            hidden: 16,
            feature_dim: 8,
            proj_dim: 4,
            holdout: 12,
            dataset: DatasetSpec::Blobs {
                counts: vec![40, 15, 5],
                dim: 4,
                spread: 0.5,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn b1_never_runs_the_teacher() {
        let mut t = Trainer::new(tiny(Method::B1)).unwrap();
        let out = t.fit(None, None).unwrap();
        assert_eq!(t.state.teacher_forwards, 0);
        assert!(out.steps.iter().all(|r| r.lambda1 == 0.0 && r.lambda2 == 0.0 && r.lambda3 == 0.0));
        assert!(out.steps.iter().all(|r| r.kl.is_none() && r.ccd_s.is_none() && r.crp.is_none()));
    }

    #[test]
    fn full_method_computes_every_term_after_warmup() {
        let mut t = Trainer::new(tiny(Method::Full)).unwrap();
        let out = t.fit(None, None).unwrap();
        let warm: Vec<_> = out.steps.iter().filter(|r| r.epoch == 0).collect();
        assert!(warm.iter().all(|r| r.ccd_s.is_none() && r.crp.is_none() && r.kl.is_some()));
        let later: Vec<_> = out.steps.iter().filter(|r| r.epoch > 0).collect();
        assert!(later.iter().all(|r| r.ccd_s.is_some() && r.ccd_t.is_some() && r.crp.is_some()));
        assert_eq!(t.state.step, out.steps.len());
        assert!(out.final_eval.is_some());
    }

    #[test]
    fn lambda_values_follow_the_schedules() {
        let t = Trainer::new(tiny(Method::Full)).unwrap();
        let (l1, l2, l3) = t.state.lambdas(0).unwrap();
        assert_eq!((l2, l3), (0.0, 0.0));
        assert!((l1 - (-5f64).exp()).abs() < 1e-15);
        assert_eq!(t.state.lambdas(1).unwrap().1, 0.1);
        assert_eq!(t.state.lambdas(2).unwrap(), (1.0, 0.01, 1.0));
    }

    #[test]
    fn checkpoint_round_trips_state() {
        let mut t = Trainer::new(tiny(Method::Full)).unwrap();
        t.fit(None, Some(1)).unwrap();
        let ck = t.state.to_checkpoint();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        let restored = TrainState::from_checkpoint(&back, None, &t.train).unwrap();
        assert_eq!(restored, t.state);
    }

    #[test]
    fn shape_mismatch_is_explicit() {
        let mut t = Trainer::new(tiny(Method::Full)).unwrap();
        t.fit(None, Some(1)).unwrap();
        let ck = t.state.to_checkpoint();
        let other = TrainConfig {
            hidden: 12,
            ..tiny(Method::Full)
        };
        let err = TrainState::from_checkpoint(&ck, Some(other), &t.train).unwrap_err();
        assert!(err.to_string().contains("shape"), "{err}");
    }
}
