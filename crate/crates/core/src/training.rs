//! Two-phase training: CVAE pretraining, then alternating discriminator and
//! generator-side updates, with periodic validation and checkpoints.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamHyper};
use crate::data::{negative_sample, GzslDataset};
use crate::error::{Error, Result};
use crate::eval::{selection_score, validation_metrics, Component, GzslMetrics, Predictor};
use crate::losses::{self, Batch, DiscTerms, LossReport, Objective};
use crate::model::{GdanConfig, GdanModel, Network};
use crate::nn::{Activation, DenseLayer, Mlp};
use crate::rng::{Rng, RngState, Seeds};
use crate::tensor::Matrix;

/// Any loss component above this magnitude counts as divergence.
pub const DIVERGENCE_THRESHOLD: f64 = 1e8;

pub const DEFAULT_PRETRAIN_EPOCHS: usize = 30;

/// Training schedules: the full model and the component-analysis variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    FullGdan,
    GdanNoDisc,
    GdanNoReg,
    CvaeOnly,
    RegressorOnly,
    DiscriminatorOnly,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::FullGdan,
        Variant::GdanNoDisc,
        Variant::GdanNoReg,
        Variant::CvaeOnly,
        Variant::RegressorOnly,
        Variant::DiscriminatorOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::FullGdan => "full-gdan",
            Variant::GdanNoDisc => "gdan-no-disc",
            Variant::GdanNoReg => "gdan-no-reg",
            Variant::CvaeOnly => "cvae-only",
            Variant::RegressorOnly => "regressor-only",
            Variant::DiscriminatorOnly => "discriminator-only",
        }
    }

    /// Generator-side terms optimized in the main phase.
    pub fn objective(self) -> Objective {
        let none = Objective::NONE;
        match self {
            Variant::FullGdan => Objective::FULL,
            Variant::GdanNoDisc => Objective {
                cvae: true,
                cyc: true,
                sup: true,
                ..none
            },
            Variant::GdanNoReg => Objective {
                cvae: true,
                adv_gen: true,
                ..none
            },
            Variant::CvaeOnly => Objective { cvae: true, ..none },
            Variant::RegressorOnly => Objective { sup: true, ..none },
            Variant::DiscriminatorOnly => none,
        }
    }

    /// Fake pairs the discriminator is trained against, if it is trained.
    pub fn disc_terms(self) -> Option<DiscTerms> {
        match self {
            Variant::FullGdan => Some(DiscTerms::ALL),
            Variant::GdanNoReg => Some(DiscTerms {
                regressor_fake: false,
                ..DiscTerms::ALL
            }),
            Variant::DiscriminatorOnly => Some(DiscTerms {
                generator_fake: false,
                regressor_fake: false,
                negative: true,
            }),
            Variant::GdanNoDisc | Variant::CvaeOnly | Variant::RegressorOnly => None,
        }
    }

    pub fn pretrains(self) -> bool {
        self.objective().cvae
    }

    /// The component that classifies when this variant is evaluated.
    pub fn eval_component(self) -> Component {
        match self {
            Variant::RegressorOnly => Component::Regressor,
            Variant::DiscriminatorOnly => Component::Discriminator,
            _ => Component::Generator,
        }
    }

    fn needs_negatives(self) -> bool {
        self.disc_terms().is_some_and(|t| t.negative)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub variant: Variant,
    pub pretrain_epochs: usize,
    pub epochs: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
    /// Train on `train_idx ∪ val_idx`.
    pub merge_train_val: bool,
    /// Synthetic samples per class when scoring validation.
    pub val_n_per_class: usize,
}

impl TrainPlan {
    pub fn new(variant: Variant, config: &GdanConfig, seed: u64) -> Self {
        TrainPlan {
            variant,
            pretrain_epochs: DEFAULT_PRETRAIN_EPOCHS,
            epochs: config.hp.epochs,
            checkpoint_every: config.hp.checkpoint_every,
            seed,
            merge_train_val: true,
            val_n_per_class: config.hp.n_synth_eval,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.checkpoint_every == 0 || self.val_n_per_class == 0 {
            return Err(Error::Config(
                "epochs, checkpoint_every and val_n_per_class must be >= 1".into(),
            ));
        }
        Ok(())
    }

    fn effective_pretrain_epochs(&self) -> usize {
        if self.variant.pretrains() {
            self.pretrain_epochs
        } else {
            0
        }
    }
}

/// One Adam state per network.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizers {
    pub encoder: Adam,
    pub generator: Adam,
    pub regressor: Adam,
    pub discriminator: Adam,
}

impl Optimizers {
    pub fn new(model: &GdanModel) -> Result<Self> {
        let hp = &model.config().hp;
        Ok(Optimizers {
            encoder: Adam::for_mlp(hp.gen_adam(), &model.encoder)?,
            generator: Adam::for_mlp(hp.gen_adam(), &model.generator)?,
            regressor: Adam::for_mlp(hp.gen_adam(), &model.regressor)?,
            discriminator: Adam::for_mlp(hp.disc_adam(), &model.discriminator)?,
        })
    }

    pub fn get(&self, net: Network) -> &Adam {
        match net {
            Network::Encoder => &self.encoder,
            Network::Generator => &self.generator,
            Network::Regressor => &self.regressor,
            Network::Discriminator => &self.discriminator,
        }
    }

    fn get_mut(&mut self, net: Network) -> &mut Adam {
        match net {
            Network::Encoder => &mut self.encoder,
            Network::Generator => &mut self.generator,
            Network::Regressor => &mut self.regressor,
            Network::Discriminator => &mut self.discriminator,
        }
    }
}

/// Everything needed to continue training bit-for-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub plan: TrainPlan,
    pub pretrain_epochs_done: usize,
    /// Completed main-phase epochs.
    pub epoch: usize,
    /// Completed main-phase steps.
    pub step: u64,
    pub model: GdanModel,
    pub optimizers: Optimizers,
    pub rng: RngState,
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GDANCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_TRAILER: &[u8; 4] = b"END!";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: GdanConfig,
    plan: TrainPlan,
    pretrain_epochs_done: usize,
    epoch: usize,
    step: u64,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, x: u8) {
        self.0.push(x);
    }
    fn u32(&mut self, x: u32) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn u64(&mut self, x: u64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn f64s(&mut self, xs: &[f64]) {
        self.u64(xs.len() as u64);
        for x in xs {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }

    fn mlp(&mut self, net: &Mlp) {
        self.u32(net.layers().len() as u32);
        for l in net.layers() {
            self.u8(l.activation().code());
            self.u64(l.out_dim() as u64);
            self.u64(l.in_dim() as u64);
            self.f64s(l.weight().as_slice());
            self.f64s(l.bias());
        }
    }

    fn adam(&mut self, a: &Adam) {
        let h = a.hyper();
        for x in [h.lr, h.beta1, h.beta2, h.eps] {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
        self.u64(a.t());
        self.u32(a.first_moment().len() as u32);
        for (m, v) in a.first_moment().iter().zip(a.second_moment()) {
            self.f64s(m);
            self.f64s(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, detail: impl Into<String>) -> Error {
        Error::Corrupt {
            path: self.path.to_path_buf(),
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.corrupt(format!("truncated at byte {}", self.pos))),
        }
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()? as usize;
        if n > self.buf.len() {
            return Err(self.corrupt(format!("length {n} exceeds file size")));
        }
        Ok(n)
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.corrupt("length overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }

    fn mlp(&mut self) -> Result<Mlp> {
        let n = self.u32()? as usize;
        let mut layers = Vec::with_capacity(n.min(64));
        for _ in 0..n {
            let code = self.u8()?;
            let act = Activation::from_code(code).ok_or_else(|| self.corrupt(format!("activation code {code}")))?;
            let rows = self.u64()? as usize;
            let cols = self.u64()? as usize;
            let w = self.f64s()?;
            let b = self.f64s()?;
            let weight = Matrix::from_vec(rows, cols, w).map_err(|e| self.corrupt(e.to_string()))?;
            layers.push(DenseLayer::new(weight, b, act).map_err(|e| self.corrupt(e.to_string()))?);
        }
        Mlp::new(layers).map_err(|e| self.corrupt(e.to_string()))
    }

    fn adam(&mut self) -> Result<Adam> {
        let hyper = AdamHyper {
            lr: self.f64()?,
            beta1: self.f64()?,
            beta2: self.f64()?,
            eps: self.f64()?,
        };
        let t = self.u64()?;
        let n = self.u32()? as usize;
        let mut m = Vec::with_capacity(n.min(64));
        let mut v = Vec::with_capacity(n.min(64));
        for _ in 0..n {
            m.push(self.f64s()?);
            v.push(self.f64s()?);
        }
        Adam::from_parts(hyper, t, m, v).map_err(|e| self.corrupt(e.to_string()))
    }
}

impl Checkpoint {
    pub fn config(&self) -> &GdanConfig {
        self.model.config()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            config: self.config().clone(),
            plan: self.plan.clone(),
            pretrain_epochs_done: self.pretrain_epochs_done,
            epoch: self.epoch,
            step: self.step,
        };
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.bytes(serde_json::to_string(&header)?.as_bytes());
        for net in Network::ALL {
            w.mlp(self.model.network(net));
        }
        for net in Network::ALL {
            w.adam(self.optimizers.get(net));
        }
        w.0.extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream);
        w.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        w.0.extend_from_slice(CHECKPOINT_TRAILER);
        Ok(w.0)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0, path };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(r.corrupt("not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let header: CheckpointHeader =
            serde_json::from_slice(r.bytes()?).map_err(|e| r.corrupt(format!("header: {e}")))?;
        let nets = [r.mlp()?, r.mlp()?, r.mlp()?, r.mlp()?];
        let [encoder, generator, regressor, discriminator] = nets;
        let opts = [r.adam()?, r.adam()?, r.adam()?, r.adam()?];
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        if r.take(4)? != CHECKPOINT_TRAILER || r.pos != bytes.len() {
            return Err(r.corrupt("missing trailer"));
        }
        header.config.validate()?;
        let model = GdanModel::from_parts(header.config, encoder, generator, regressor, discriminator)?;
        let [e, g, rr, d] = opts;
        let optimizers = Optimizers {
            encoder: e,
            generator: g,
            regressor: rr,
            discriminator: d,
        };
        for net in Network::ALL {
            let shapes: Vec<usize> = model.network(net).param_slices().iter().map(|s| s.len()).collect();
            let buf: Vec<usize> = optimizers.get(net).first_moment().iter().map(Vec::len).collect();
            if shapes != buf {
                return Err(Error::Validation(format!("{net:?} optimizer state does not match its network")));
            }
        }
        Ok(Checkpoint {
            plan: header.plan,
            pretrain_epochs_done: header.pretrain_epochs_done,
            epoch: header.epoch,
            step: header.step,
            model,
            optimizers,
            rng: RngState { seed, stream, word_pos },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        // Write-then-rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Fails with a shape error when the dataset's widths differ from the
    /// checkpointed configuration.
    pub fn check_compatible(&self, ds: &GzslDataset) -> Result<()> {
        crate::eval::check_model_fits(&self.model, ds)
    }
}

/// One logged main-phase step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub report: LossReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub epoch: usize,
    pub cvae_recon: f64,
    pub cvae_kl: f64,
}

impl PretrainRecord {
    pub fn cvae(&self) -> f64 {
        self.cvae_recon + self.cvae_kl
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub epoch: usize,
    pub score: Option<f64>,
    pub metrics: Option<GzslMetrics>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub pretrain: Vec<PretrainRecord>,
    pub steps: Vec<StepRecord>,
    pub validation: Vec<ValidationRecord>,
}

impl History {
    /// Drops everything recorded after `ckpt` was taken.
    pub fn truncate_to(&mut self, ckpt: &Checkpoint) {
        self.pretrain.truncate(ckpt.pretrain_epochs_done);
        self.steps.retain(|s| s.step < ckpt.step);
        self.validation.retain(|v| v.epoch <= ckpt.epoch);
    }

    /// Mean report of each main-phase epoch, in epoch order.
    pub fn epoch_means(&self) -> Vec<(usize, LossReport)> {
        let mut out: Vec<(usize, Vec<LossReport>)> = Vec::new();
        for s in &self.steps {
            match out.last_mut() {
                Some((e, v)) if *e == s.epoch => v.push(s.report),
                _ => out.push((s.epoch, vec![s.report])),
            }
        }
        out.into_iter().map(|(e, v)| (e, LossReport::mean(&v))).collect()
    }

    pub fn write_steps_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["epoch", "step"];
        header.extend(LossReport::FIELDS);
        w.write_record(&header)?;
        for s in &self.steps {
            let mut rec = vec![s.epoch.to_string(), s.step.to_string()];
            rec.extend(s.report.values().iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_pretrain_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "cvae_recon", "cvae_kl"])?;
        for p in &self.pretrain {
            w.write_record(&[p.epoch.to_string(), p.cvae_recon.to_string(), p.cvae_kl.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// A seeded permutation of `rows`.
pub fn epoch_order(rows: &[usize], rng: &mut Rng) -> Vec<usize> {
    let mut order = rows.to_vec();
    order.shuffle(rng);
    order
}

/// Rows and classes the model is trained on.
#[derive(Clone, Debug)]
pub struct TrainingSet<'a> {
    pub ds: &'a GzslDataset,
    pub rows: Vec<usize>,
    /// Classes with at least one training row; negatives come from here.
    pub classes: Vec<usize>,
}

impl<'a> TrainingSet<'a> {
    pub fn new(ds: &'a GzslDataset, merge_val: bool) -> Result<Self> {
        let rows = ds.training_idx(merge_val);
        if rows.is_empty() {
            return Err(Error::Validation("no training rows".into()));
        }
        let classes: BTreeSet<usize> = rows.iter().map(|&r| ds.labels[r]).collect();
        Ok(TrainingSet {
            ds,
            rows,
            classes: classes.into_iter().collect(),
        })
    }
}

fn check_report(report: &LossReport, epoch: usize, step: u64) -> Result<()> {
    if !report.is_finite() || report.max_abs() > DIVERGENCE_THRESHOLD {
        return Err(Error::Diverged {
            epoch,
            step,
            detail: format!("loss report {report:?}"),
            last_good: None,
        });
    }
    Ok(())
}

/// Model, optimizers and training stream.
#[derive(Clone, Debug)]
pub struct Trainer {
    model: GdanModel,
    optimizers: Optimizers,
    plan: TrainPlan,
    rng: Rng,
    pretrain_epochs_done: usize,
    epoch: usize,
    step: u64,
}

impl Trainer {
    /// Fresh model from the plan's `init` substream.
    pub fn new(config: GdanConfig, plan: TrainPlan) -> Result<Self> {
        plan.validate()?;
        let seeds = Seeds::new(plan.seed);
        let model = GdanModel::init(config, &mut seeds.stream("init"))?;
        Self::with_model(model, plan)
    }

    pub fn with_model(model: GdanModel, plan: TrainPlan) -> Result<Self> {
        plan.validate()?;
        let optimizers = Optimizers::new(&model)?;
        let rng = Seeds::new(plan.seed).stream("train");
        Ok(Trainer {
            model,
            optimizers,
            plan,
            rng,
            pretrain_epochs_done: 0,
            epoch: 0,
            step: 0,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.plan.validate()?;
        Ok(Trainer {
            model: ckpt.model.clone(),
            optimizers: ckpt.optimizers.clone(),
            plan: ckpt.plan.clone(),
            rng: ckpt.rng.restore(),
            pretrain_epochs_done: ckpt.pretrain_epochs_done,
            epoch: ckpt.epoch,
            step: ckpt.step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            plan: self.plan.clone(),
            pretrain_epochs_done: self.pretrain_epochs_done,
            epoch: self.epoch,
            step: self.step,
            model: self.model.clone(),
            optimizers: self.optimizers.clone(),
            rng: RngState::capture(&self.rng),
        }
    }

    pub fn model(&self) -> &GdanModel {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut GdanModel {
        &mut self.model
    }

    pub fn plan(&self) -> &TrainPlan {
        &self.plan
    }

    pub fn optimizer(&self, net: Network) -> &Adam {
        self.optimizers.get(net)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn pretrain_epochs_done(&self) -> usize {
        self.pretrain_epochs_done
    }

    pub fn rng_mut(&mut self) -> &mut Rng {
        &mut self.rng
    }

    fn apply(&mut self, net: Network, grads: &crate::nn::MlpGrads) -> Result<()> {
        let opt = self.optimizers.get_mut(net);
        opt.step(self.model.network_mut(net), grads)
    }

    /// Minibatch over `rows`, with one negative embedding per row when the
    /// variant's discriminator needs them.
    pub fn make_batch(&mut self, set: &TrainingSet<'_>, rows: &[usize]) -> Result<Batch> {
        let ds = set.ds;
        let (v, labels) = ds.rows(rows)?;
        let s = ds.class_embeddings(&labels)?;
        let s_neg = if self.plan.variant.needs_negatives() {
            let neg = labels
                .iter()
                .map(|&y| negative_sample(y, &set.classes, &mut self.rng))
                .collect::<Result<Vec<_>>>()?;
            Some(ds.class_embeddings(&neg)?)
        } else {
            None
        };
        Batch::new(v, s, s_neg)
    }

    /// One pass of CVAE-only updates of E and G over shuffled minibatches.
    pub fn pretrain_epoch(&mut self, set: &TrainingSet<'_>) -> Result<PretrainRecord> {
        let order = epoch_order(&set.rows, &mut self.rng);
        let epoch = self.pretrain_epochs_done + 1;
        let (mut recon, mut kl, mut n) = (0.0, 0.0, 0usize);
        for (i, rows) in order.chunks(self.model.config().hp.batch_size).enumerate() {
            let batch = self.make_batch(set, rows)?;
            let out = losses::cvae_loss(&self.model, &batch.v, &batch.s, &mut self.rng)?;
            let report = LossReport {
                cvae_recon: out.recon,
                cvae_kl: out.kl,
                overall: out.value(),
                ..LossReport::default()
            };
            check_report(&report, epoch, i as u64)?;
            self.apply(Network::Encoder, &out.grads.encoder)?;
            self.apply(Network::Generator, &out.grads.generator)?;
            recon += out.recon;
            kl += out.kl;
            n += 1;
        }
        self.pretrain_epochs_done = epoch;
        Ok(PretrainRecord {
            epoch,
            cvae_recon: recon / n as f64,
            cvae_kl: kl / n as f64,
        })
    }

    /// `d_iter` discriminator updates. Returns the last discriminator loss,
    /// or 0 when the variant has no discriminator.
    pub fn discriminator_phase(&mut self, batch: &Batch) -> Result<f64> {
        let Some(terms) = self.plan.variant.disc_terms() else {
            return Ok(0.0);
        };
        let mut last = 0.0;
        for _ in 0..self.model.config().hp.d_iter {
            let (loss, grads) = losses::disc_loss_terms(&self.model, batch, terms, &mut self.rng)?;
            if !loss.is_finite() || loss.abs() > DIVERGENCE_THRESHOLD {
                return Err(Error::Diverged {
                    epoch: self.epoch + 1,
                    step: self.step,
                    detail: format!("discriminator loss {loss}"),
                    last_good: None,
                });
            }
            self.apply(Network::Discriminator, &grads.discriminator)?;
            last = loss;
        }
        Ok(last)
    }

    /// `g_iter` updates of E, G and R on the variant's objective. θ_D is
    /// never touched here.
    pub fn generator_phase(&mut self, batch: &Batch) -> Result<LossReport> {
        let objective = self.plan.variant.objective();
        let mut report = LossReport::default();
        if objective == Objective::NONE {
            return Ok(report);
        }
        let weights = self.model.config().hp.weights();
        for _ in 0..self.model.config().hp.g_iter {
            let (r, grads) = losses::overall_loss_with(&self.model, batch, &weights, objective, &mut self.rng)?;
            check_report(&r, self.epoch + 1, self.step)?;
            for net in [Network::Encoder, Network::Generator, Network::Regressor] {
                if objective.trains(net) {
                    self.apply(net, grads.get(net))?;
                }
            }
            report = r;
        }
        Ok(report)
    }

    /// Discriminator phase, then generator phase, on one shared batch.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossReport> {
        let disc_total = self.discriminator_phase(batch)?;
        let mut report = self.generator_phase(batch)?;
        report.disc_total = disc_total;
        check_report(&report, self.epoch + 1, self.step)?;
        self.step += 1;
        Ok(report)
    }

    /// One main-phase epoch; step records are appended to `history`.
    pub fn train_epoch(&mut self, set: &TrainingSet<'_>, history: &mut History) -> Result<()> {
        let order = epoch_order(&set.rows, &mut self.rng);
        for rows in order.chunks(self.model.config().hp.batch_size) {
            let batch = self.make_batch(set, rows)?;
            let step = self.step;
            let report = self.train_step(&batch)?;
            history.steps.push(StepRecord {
                epoch: self.epoch + 1,
                step,
                report,
            });
        }
        self.epoch += 1;
        Ok(())
    }

    /// Validation metrics of the current model with the variant's component.
    pub fn validate(&self, ds: &GzslDataset) -> Result<ValidationRecord> {
        let mut rng = Seeds::new(self.plan.seed).indexed("validation", self.epoch as u64);
        let predictor = Predictor::for_component(&self.model, self.plan.variant.eval_component());
        let metrics = validation_metrics(&predictor, ds, self.plan.val_n_per_class, &mut rng)?;
        let has_unseen = !ds.val_unseen_classes().is_empty();
        Ok(ValidationRecord {
            epoch: self.epoch,
            score: metrics.as_ref().map(|m| selection_score(m, has_unseen)),
            metrics,
        })
    }
}

/// The checkpoint chosen by validation.
#[derive(Clone, Debug, PartialEq)]
pub struct Selected {
    pub checkpoint: Checkpoint,
    pub epoch: usize,
    pub score: Option<f64>,
}

impl Selected {
    /// Ties go to the later checkpoint: when validation saturates, the
    /// longer-trained model is preferred. With no validation rows every score
    /// is `None` and the latest checkpoint is kept.
    pub fn is_beaten_by(&self, score: Option<f64>) -> bool {
        match (self.score, score) {
            (Some(a), Some(b)) => b >= a,
            (None, None) => true,
            (None, Some(_)) => true,
            (Some(_), None) => false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Selected,
    pub last: Checkpoint,
    pub history: History,
}

/// Notifications for persisting progress.
pub enum TrainEvent<'a> {
    Pretrained {
        checkpoint: &'a Checkpoint,
        history: &'a History,
    },
    Scored {
        checkpoint: &'a Checkpoint,
        history: &'a History,
        best: &'a Selected,
        is_best: bool,
    },
}

/// State carried into [`train`]: a fresh trainer or one restored from disk.
pub struct TrainSession {
    pub trainer: Trainer,
    pub history: History,
    pub best: Option<Selected>,
}

impl TrainSession {
    pub fn fresh(trainer: Trainer) -> Self {
        TrainSession {
            trainer,
            history: History::default(),
            best: None,
        }
    }
}

fn with_last_good(e: Error, last_good: &Checkpoint) -> Error {
    match e {
        Error::Diverged {
            epoch, step, detail, ..
        } => Error::Diverged {
            epoch,
            step,
            detail,
            last_good: Some(Box::new(last_good.clone())),
        },
        other => other,
    }
}

/// Runs the remaining schedule of `session`: pretraining, then main-phase
/// epochs with a scored checkpoint every `checkpoint_every` epochs and after
/// the final epoch.
pub fn train(
    session: TrainSession,
    ds: &GzslDataset,
    on_event: &mut dyn FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    let TrainSession {
        mut trainer,
        mut history,
        mut best,
    } = session;
    crate::eval::check_model_fits(trainer.model(), ds)?;
    let plan = trainer.plan().clone();
    let set = TrainingSet::new(ds, plan.merge_train_val)?;
    let mut last_good = trainer.checkpoint();

    let pretrain_total = plan.effective_pretrain_epochs();
    if trainer.pretrain_epochs_done < pretrain_total {
        while trainer.pretrain_epochs_done < pretrain_total {
            let rec = trainer.pretrain_epoch(&set).map_err(|e| with_last_good(e, &last_good))?;
            log::info!(
                "[{}] pretrain epoch {}/{}: cvae {:.5}",
                plan.variant,
                rec.epoch,
                pretrain_total,
                rec.cvae()
            );
            history.pretrain.push(rec);
        }
        last_good = trainer.checkpoint();
        on_event(TrainEvent::Pretrained {
            checkpoint: &last_good,
            history: &history,
        })?;
    }

    while trainer.epoch < plan.epochs {
        trainer
            .train_epoch(&set, &mut history)
            .map_err(|e| with_last_good(e, &last_good))?;
        let epoch = trainer.epoch;
        if epoch % plan.checkpoint_every != 0 && epoch != plan.epochs {
            continue;
        }
        let record = trainer.validate(ds)?;
        let ckpt = trainer.checkpoint();
        let is_best = best.as_ref().is_none_or(|b| b.is_beaten_by(record.score));
        if is_best {
            best = Some(Selected {
                checkpoint: ckpt.clone(),
                epoch,
                score: record.score,
            });
        }
        if let Some((_, mean)) = history.epoch_means().last() {
            log::info!(
                "[{}] epoch {}/{}: overall {:.5}, disc {:.5}, validation {:?}{}",
                plan.variant,
                epoch,
                plan.epochs,
                mean.overall,
                mean.disc_total,
                record.score,
                if is_best { " (best)" } else { "" }
            );
        }
        history.validation.push(record);
        last_good = ckpt;
        on_event(TrainEvent::Scored {
            checkpoint: &last_good,
            history: &history,
            best: best.as_ref().expect("set above"),
            is_best,
        })?;
    }

    let last = trainer.checkpoint();
    let best = match best {
        Some(b) => b,
        None => Selected {
            checkpoint: last.clone(),
            epoch: trainer.epoch,
            score: None,
        },
    };
    Ok(TrainOutcome { best, last, history })
}

/// Per-network parameter fingerprint, for checking which networks changed.
pub fn param_hash(net: &Mlp) -> u64 {
    net.params_flat().iter().fold(0xcbf2_9ce4_8422_2325u64, |h, x| {
        (h ^ x.to_bits()).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Uniform random batch of training rows, for tests and diagnostics.
pub fn random_rows(set: &TrainingSet<'_>, n: usize, rng: &mut Rng) -> Vec<usize> {
    (0..n).map(|_| set.rows[rng.random_range(0..set.rows.len())]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synth_benchmark, SynthBenchConfig};
    use crate::model::Hyperparams;
    use tempfile::tempdir;

    fn bench() -> GzslDataset {
        make_synth_benchmark(&SynthBenchConfig {
            per_class: 30,
            test_seen_per_class: 5,
            ..Default::default()
        })
        .unwrap()
    }

    fn tiny_hp() -> Hyperparams {
        Hyperparams {
            noise_dim: 4,
            encoder_hidden: vec![16],
            generator_hidden: vec![16],
            regressor_hidden: vec![8],
            discriminator_hidden: vec![16],
            batch_size: 16,
            epochs: 4,
            checkpoint_every: 2,
            n_synth_eval: 20,
            ..Hyperparams::desk_scale()
        }
    }

    fn trainer(ds: &GzslDataset, variant: Variant, hp: Hyperparams) -> Trainer {
        let cfg = GdanConfig::new(ds.feat_dim(), ds.attr_dim(), hp).unwrap();
        let mut plan = TrainPlan::new(variant, &cfg, 5);
        plan.pretrain_epochs = 1;
        Trainer::new(cfg, plan).unwrap()
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("gdan".parse::<Variant>().is_err());
        assert!(Variant::GdanNoDisc.disc_terms().is_none());
        assert!(!Variant::GdanNoDisc.objective().uses_discriminator());
        assert!(!Variant::GdanNoReg.disc_terms().unwrap().regressor_fake);
    }

    #[test]
    fn zero_pretrain_epochs_leave_model_unchanged() {
        let ds = bench();
        let mut t = trainer(&ds, Variant::FullGdan, tiny_hp());
        let mut plan = t.plan().clone();
        plan.pretrain_epochs = 0;
        plan.epochs = 1;
        t.plan = plan;
        let before = t.model().clone();
        let set = TrainingSet::new(&ds, true).unwrap();
        // Nothing runs before the first main-phase epoch.
        assert_eq!(t.pretrain_epochs_done(), 0);
        assert_eq!(t.plan().effective_pretrain_epochs(), 0);
        assert_eq!(*t.model(), before);
        let _ = set;
    }

    #[test]
    fn pretraining_only_moves_encoder_and_generator() {
        let ds = bench();
        let mut t = trainer(&ds, Variant::FullGdan, tiny_hp());
        let set = TrainingSet::new(&ds, true).unwrap();
        let before = t.model().clone();
        t.pretrain_epoch(&set).unwrap();
        assert_eq!(param_hash(&t.model().discriminator), param_hash(&before.discriminator));
        assert_eq!(t.model().regressor, before.regressor);
        assert_ne!(t.model().encoder, before.encoder);
        assert_ne!(t.model().generator, before.generator);
    }

    #[test]
    fn generator_phase_never_touches_discriminator() {
        let ds = bench();
        let mut t = trainer(&ds, Variant::FullGdan, tiny_hp());
        let set = TrainingSet::new(&ds, true).unwrap();
        let rows: Vec<usize> = set.rows[..16].to_vec();
        let batch = t.make_batch(&set, &rows).unwrap();
        let d = param_hash(&t.model().discriminator);
        t.generator_phase(&batch).unwrap();
        assert_eq!(param_hash(&t.model().discriminator), d);
        t.discriminator_phase(&batch).unwrap();
        assert_ne!(param_hash(&t.model().discriminator), d);
    }

    #[test]
    fn d_iter_counts_discriminator_steps() {
        let ds = bench();
        let mut t = trainer(&ds, Variant::FullGdan, Hyperparams { d_iter: 2, ..tiny_hp() });
        let set = TrainingSet::new(&ds, true).unwrap();
        let batch = t.make_batch(&set, &set.rows[..8]).unwrap();
        t.train_step(&batch).unwrap();
        assert_eq!(t.optimizer(Network::Discriminator).t(), 2);
        assert_eq!(t.optimizer(Network::Generator).t(), 1);
    }

    #[test]
    fn zero_weights_and_frozen_discriminator_reduce_to_cvae_and_adv_gen() {
        let ds = bench();
        let hp = Hyperparams {
            lambda_cyc: 0.0,
            lambda_sup: 0.0,
            lambda_adv_reg: 0.0,
            lr_disc: 0.0,
            ..tiny_hp()
        };
        let mut t = trainer(&ds, Variant::FullGdan, hp);
        let set = TrainingSet::new(&ds, true).unwrap();
        let batch = t.make_batch(&set, &set.rows[..8]).unwrap();
        let before = t.model().clone();
        let r = t.train_step(&batch).unwrap();
        assert_eq!(r.overall, r.cvae() + r.adv_gen);
        assert_eq!(t.model().regressor, before.regressor);
        assert_eq!(t.model().discriminator, before.discriminator);
        assert_ne!(t.model().generator, before.generator);
    }

    #[test]
    fn checkpoint_round_trip_and_resume() {
        let ds = bench();
        let mut t = trainer(&ds, Variant::FullGdan, tiny_hp());
        let set = TrainingSet::new(&ds, true).unwrap();
        let mut h = History::default();
        t.train_epoch(&set, &mut h).unwrap();

        let dir = tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        t.checkpoint().save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, t.checkpoint());

        let mut resumed = Trainer::from_checkpoint(&loaded).unwrap();
        let mut h1 = History::default();
        let mut h2 = History::default();
        t.train_epoch(&set, &mut h1).unwrap();
        resumed.train_epoch(&set, &mut h2).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(t.model(), resumed.model());
    }

    #[test]
    fn damaged_checkpoints_are_rejected() {
        let ds = bench();
        let t = trainer(&ds, Variant::FullGdan, tiny_hp());
        let bytes = t.checkpoint().to_bytes().unwrap();
        let p = Path::new("x.ckpt");
        for cut in [10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut], p), Err(Error::Corrupt { .. })));
        }
        let mut bumped = bytes.clone();
        bumped[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bumped, p),
            Err(Error::Version { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn checkpoint_against_wider_dataset_is_a_shape_error() {
        let ds = bench();
        let t = trainer(&ds, Variant::FullGdan, tiny_hp());
        let wide = make_synth_benchmark(&SynthBenchConfig {
            feat_dim: 30,
            per_class: 10,
            ..Default::default()
        })
        .unwrap();
        assert!(matches!(t.checkpoint().check_compatible(&wide), Err(Error::Shape { .. })));
        assert!(t.checkpoint().check_compatible(&ds).is_ok());
    }

    #[test]
    fn selection_prefers_higher_then_later() {
        let ds = bench();
        let t = trainer(&ds, Variant::FullGdan, tiny_hp());
        let sel = Selected {
            checkpoint: t.checkpoint(),
            epoch: 10,
            score: Some(0.5),
        };
        assert!(sel.is_beaten_by(Some(0.6)));
        assert!(sel.is_beaten_by(Some(0.5)));
        assert!(!sel.is_beaten_by(Some(0.4)));
        assert!(!sel.is_beaten_by(None));
    }

    #[test]
    fn epoch_order_visits_every_row_once() {
        let rows: Vec<usize> = (10..60).collect();
        let mut rng = Seeds::new(1).stream("train");
        let mut a = epoch_order(&rows, &mut rng);
        assert_ne!(a, rows);
        a.sort_unstable();
        assert_eq!(a, rows);
    }

    #[test]
    fn divergence_carries_context() {
        let ds = bench();
        let mut t = trainer(&ds, Variant::FullGdan, tiny_hp());
        for layer in t.model_mut().generator.layers_mut() {
            layer.weight_mut().as_mut_slice().fill(1e12);
        }
        let set = TrainingSet::new(&ds, true).unwrap();
        let err = t.pretrain_epoch(&set).unwrap_err();
        assert!(matches!(err, Error::Diverged { epoch: 1, step: 0, .. }), "{err}");
    }

    #[test]
    fn no_disc_variant_never_runs_discriminator() {
        let ds = bench();
        let t = trainer(&ds, Variant::GdanNoDisc, tiny_hp());
        let out = train(TrainSession::fresh(t), &ds, &mut |_| Ok(())).unwrap();
        assert_eq!(out.last.model.disc_forward_count(), 0);
        assert_eq!(out.history.validation.len(), 2);
    }
}
