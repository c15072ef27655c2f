//! GZSL evaluation: synthesize unseen-class features, build the joint
//! training set, classify with 1-NN and report per-class accuracies.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::GzslDataset;
use crate::error::{Error, Result};
use crate::model::GdanModel;
use crate::rng::Rng;
use crate::tensor::{squared_distance, Matrix};

/// Paper-suggested saturation point of the synthetic-sample sweep.
pub const DEFAULT_N_PER_CLASS: usize = 400;

/// Produces synthetic features for one class from its embedding.
pub trait FeatureSynthesizer {
    fn synthesize_class(&self, class: usize, embedding: &[f64], n: usize, rng: &mut Rng) -> Result<Matrix>;
}

/// `G(s_y, z)` with `z ~ N(0, I)` from the prior.
impl FeatureSynthesizer for GdanModel {
    fn synthesize_class(&self, _class: usize, embedding: &[f64], n: usize, rng: &mut Rng) -> Result<Matrix> {
        let s = Matrix::from_fn(n, embedding.len(), |_, c| embedding[c]);
        let z = self.sample_prior(n, rng);
        self.generate(&s, &z)
    }
}

/// Emits the given class means exactly.
#[derive(Clone, Debug)]
pub struct MeanOracle {
    pub class_means: Matrix,
}

impl FeatureSynthesizer for MeanOracle {
    fn synthesize_class(&self, class: usize, _embedding: &[f64], n: usize, _rng: &mut Rng) -> Result<Matrix> {
        if class >= self.class_means.rows() {
            return Err(Error::Validation(format!("no mean for class {class}")));
        }
        let mean = self.class_means.row(class);
        Ok(Matrix::from_fn(n, mean.len(), |_, c| mean[c]))
    }
}

/// Class-independent `N(0, σ²I)` features.
#[derive(Clone, Debug)]
pub struct NoiseSynthesizer {
    pub feat_dim: usize,
    pub sigma: f64,
}

impl FeatureSynthesizer for NoiseSynthesizer {
    fn synthesize_class(&self, _class: usize, _embedding: &[f64], n: usize, rng: &mut Rng) -> Result<Matrix> {
        let dist = Normal::new(0.0, self.sigma).map_err(|e| Error::Precondition(e.to_string()))?;
        Ok(Matrix::from_fn(n, self.feat_dim, |_, _| dist.sample(rng)))
    }
}

/// Feature rows with one class label each.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledFeatures {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl LabeledFeatures {
    pub fn empty(feat_dim: usize) -> Self {
        LabeledFeatures {
            features: Matrix::zeros(0, feat_dim),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn concat(&self, other: &LabeledFeatures) -> Result<LabeledFeatures> {
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(LabeledFeatures {
            features: Matrix::vcat(&[&self.features, &other.features])?,
            labels,
        })
    }
}

/// `n_per_class` synthetic features for each class in `class_ids`, in class order.
pub fn synthesize_features(
    synth: &dyn FeatureSynthesizer,
    class_ids: &[usize],
    attributes: &Matrix,
    n_per_class: usize,
    rng: &mut Rng,
) -> Result<LabeledFeatures> {
    if n_per_class == 0 {
        return Err(Error::Precondition("n_per_class must be >= 1".into()));
    }
    let mut blocks = Vec::with_capacity(class_ids.len());
    let mut labels = Vec::with_capacity(class_ids.len() * n_per_class);
    for &c in class_ids {
        if c >= attributes.rows() {
            return Err(Error::Validation(format!("missing attribute row for class {c}")));
        }
        blocks.push(synth.synthesize_class(c, attributes.row(c), n_per_class, rng)?);
        labels.extend(std::iter::repeat_n(c, n_per_class));
    }
    if blocks.is_empty() {
        return Ok(LabeledFeatures::empty(0));
    }
    let features = Matrix::vcat(&blocks.iter().collect::<Vec<_>>())?;
    Ok(LabeledFeatures { features, labels })
}

/// Real training features of seen classes plus synthetic unseen features.
pub fn build_gzsl_train_set(ds: &GzslDataset, synth: &LabeledFeatures, merge_val: bool) -> Result<LabeledFeatures> {
    let real_idx = ds.training_idx(merge_val);
    joint_reference(ds, &real_idx, synth, &ds.splits.unseen_classes)
}

fn joint_reference(
    ds: &GzslDataset,
    real_idx: &[usize],
    synth: &LabeledFeatures,
    synth_classes: &[usize],
) -> Result<LabeledFeatures> {
    let allowed: BTreeSet<usize> = synth_classes.iter().copied().collect();
    if let Some(bad) = synth.labels.iter().find(|l| !allowed.contains(l)) {
        return Err(Error::Validation(format!(
            "synthetic features labeled {bad}, which is not a class being synthesized"
        )));
    }
    let (features, labels) = ds.rows(real_idx)?;
    let real = LabeledFeatures { features, labels };
    if synth.is_empty() {
        return Ok(real);
    }
    real.concat(synth)
}

/// 1-NN under squared Euclidean distance; ties go to the lowest row index.
pub fn knn_predict(train: &Matrix, train_labels: &[usize], queries: &Matrix) -> Result<Vec<usize>> {
    if train.rows() == 0 {
        return Err(Error::Precondition("1-NN needs at least one training row".into()));
    }
    if train.rows() != train_labels.len() {
        return Err(Error::shape(
            "knn_predict",
            format!("{} rows but {} labels", train.rows(), train_labels.len()),
        ));
    }
    if train.cols() != queries.cols() {
        return Err(Error::shape(
            "knn_predict",
            format!("train has {} columns, queries {}", train.cols(), queries.cols()),
        ));
    }
    Ok(queries
        .iter_rows()
        .map(|q| {
            let mut best = (f64::INFINITY, 0);
            for (i, t) in train.iter_rows().enumerate() {
                let d = squared_distance(q, t);
                if d < best.0 {
                    best = (d, i);
                }
            }
            train_labels[best.1]
        })
        .collect())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassAccuracy {
    pub per_class: BTreeMap<usize, f64>,
    /// Classes in the requested set with no samples; excluded from `per_class`.
    pub empty: Vec<usize>,
}

impl ClassAccuracy {
    /// Unweighted mean over classes; 0 for an empty map.
    pub fn mean(&self) -> f64 {
        mean_of(self.per_class.values().copied())
    }
}

fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Fraction of correct predictions within each class of `class_set`.
pub fn per_class_accuracy(preds: &[usize], truths: &[usize], class_set: &[usize]) -> Result<ClassAccuracy> {
    if preds.len() != truths.len() {
        return Err(Error::shape(
            "per_class_accuracy",
            format!("{} predictions for {} truths", preds.len(), truths.len()),
        ));
    }
    let mut tally: BTreeMap<usize, (usize, usize)> = class_set.iter().map(|&c| (c, (0, 0))).collect();
    for (&p, &t) in preds.iter().zip(truths) {
        let entry = tally
            .get_mut(&t)
            .ok_or_else(|| Error::Validation(format!("true class {t} is outside the evaluated class set")))?;
        entry.0 += usize::from(p == t);
        entry.1 += 1;
    }
    let mut out = ClassAccuracy::default();
    for (c, (hit, total)) in tally {
        if total == 0 {
            log::warn!("class {c} has no samples; excluded from the per-class mean");
            out.empty.push(c);
        } else {
            out.per_class.insert(c, hit as f64 / total as f64);
        }
    }
    Ok(out)
}

/// `2US / (U + S)`, and 0 when `U + S = 0`.
pub fn harmonic_mean(u: f64, s: f64) -> Result<f64> {
    for (name, x) in [("U", u), ("S", s)] {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::Validation(format!("{name} = {x} is outside [0, 1]")));
        }
    }
    Ok(if u == s { u } else { 2.0 * u * s / (u + s) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GzslMetrics {
    #[serde(rename = "U")]
    pub acc_unseen: f64,
    #[serde(rename = "S")]
    pub acc_seen: f64,
    #[serde(rename = "H")]
    pub harmonic: f64,
    pub per_class: BTreeMap<usize, f64>,
}

impl GzslMetrics {
    fn from_accuracies(unseen: &ClassAccuracy, seen: &ClassAccuracy) -> Result<Self> {
        let (u, s) = (unseen.mean(), seen.mean());
        let mut per_class = unseen.per_class.clone();
        per_class.extend(seen.per_class.iter().map(|(&k, &v)| (k, v)));
        Ok(GzslMetrics {
            acc_unseen: u,
            acc_seen: s,
            harmonic: harmonic_mean(u, s)?,
            per_class,
        })
    }
}

/// Which part of the model classifies test features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Component {
    /// 1-NN over real seen features plus generated unseen features.
    #[default]
    Generator,
    /// Nearest class embedding to `R(v)`.
    Regressor,
    /// Class with the largest score `D(v, s_y)`.
    Discriminator,
}

impl std::str::FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "generator" => Ok(Component::Generator),
            "regressor" => Ok(Component::Regressor),
            "discriminator" => Ok(Component::Discriminator),
            other => Err(Error::Config(format!(
                "unknown component {other:?} (expected generator, regressor or discriminator)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distance {
    #[default]
    SquaredEuclidean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub n_per_class: usize,
    pub component: Component,
    pub distance: Distance,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            n_per_class: DEFAULT_N_PER_CLASS,
            component: Component::Generator,
            distance: Distance::SquaredEuclidean,
        }
    }
}

/// How a classifier is applied.
pub enum Predictor<'a> {
    Synthesis(&'a dyn FeatureSynthesizer),
    Regressor(&'a GdanModel),
    Discriminator(&'a GdanModel),
}

impl<'a> Predictor<'a> {
    pub fn for_component(model: &'a GdanModel, component: Component) -> Self {
        match component {
            Component::Generator => Predictor::Synthesis(model),
            Component::Regressor => Predictor::Regressor(model),
            Component::Discriminator => Predictor::Discriminator(model),
        }
    }
}

/// Which rows are classified and against what.
struct Protocol<'p> {
    /// Candidate classes, for embedding- and score-based modes.
    label_space: Vec<usize>,
    /// Classes that receive synthetic features in generator mode.
    synth_classes: &'p [usize],
    /// Real rows forming the 1-NN reference set in generator mode.
    reference_idx: Vec<usize>,
    query_idx: Vec<usize>,
}

fn predict(predictor: &Predictor<'_>, ds: &GzslDataset, p: &Protocol<'_>, n_per_class: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let (queries, _) = ds.rows(&p.query_idx)?;
    match predictor {
        Predictor::Synthesis(synth) => {
            let fake = synthesize_features(*synth, p.synth_classes, &ds.attributes, n_per_class, rng)?;
            let reference = joint_reference(ds, &p.reference_idx, &fake, p.synth_classes)?;
            knn_predict(&reference.features, &reference.labels, &queries)
        }
        Predictor::Regressor(model) => {
            let embeddings = ds.class_embeddings(&p.label_space)?;
            let projected = model.regress(&queries)?;
            knn_predict(&embeddings, &p.label_space, &projected)
        }
        Predictor::Discriminator(model) => {
            let mut best = vec![(f64::NEG_INFINITY, 0usize); queries.rows()];
            for &c in &p.label_space {
                let row = ds.class_embeddings(&[c])?;
                let s = Matrix::from_fn(queries.rows(), row.cols(), |_, j| row.get(0, j));
                for (b, score) in best.iter_mut().zip(model.discriminate(&queries, &s)?) {
                    if score > b.0 {
                        *b = (score, c);
                    }
                }
            }
            Ok(best.into_iter().map(|(_, c)| c).collect())
        }
    }
}

fn score(ds: &GzslDataset, p: &Protocol<'_>, preds: &[usize], unseen: &[usize], seen: &[usize]) -> Result<GzslMetrics> {
    let unseen_set: BTreeSet<usize> = unseen.iter().copied().collect();
    let (mut pu, mut tu, mut ps, mut ts) = (vec![], vec![], vec![], vec![]);
    for (&row, &pred) in p.query_idx.iter().zip(preds) {
        let truth = ds.labels[row];
        if unseen_set.contains(&truth) {
            pu.push(pred);
            tu.push(truth);
        } else {
            ps.push(pred);
            ts.push(truth);
        }
    }
    let u = per_class_accuracy(&pu, &tu, unseen)?;
    let s = per_class_accuracy(&ps, &ts, seen)?;
    GzslMetrics::from_accuracies(&u, &s)
}

/// The GZSL test protocol: queries are `test_seen ∪ test_unseen`, the label
/// space is all seen and unseen classes.
pub fn evaluate_predictor(
    predictor: &Predictor<'_>,
    ds: &GzslDataset,
    n_per_class: usize,
    merge_val: bool,
    rng: &mut Rng,
) -> Result<GzslMetrics> {
    let sp = &ds.splits;
    let mut label_space = sp.seen_classes.clone();
    label_space.extend_from_slice(&sp.unseen_classes);
    let mut query_idx = sp.test_seen_idx.clone();
    query_idx.extend_from_slice(&sp.test_unseen_idx);
    let protocol = Protocol {
        label_space,
        synth_classes: &sp.unseen_classes,
        reference_idx: ds.training_idx(merge_val),
        query_idx,
    };
    let preds = predict(predictor, ds, &protocol, n_per_class, rng)?;
    score(ds, &protocol, &preds, &sp.unseen_classes, &sp.seen_classes)
}

pub fn evaluate_gzsl(model: &GdanModel, ds: &GzslDataset, opts: &EvalOptions, merge_val: bool, rng: &mut Rng) -> Result<GzslMetrics> {
    check_model_fits(model, ds)?;
    evaluate_predictor(&Predictor::for_component(model, opts.component), ds, opts.n_per_class, merge_val, rng)
}

pub fn check_model_fits(model: &GdanModel, ds: &GzslDataset) -> Result<()> {
    if model.feat_dim() != ds.feat_dim() || model.attr_dim() != ds.attr_dim() {
        return Err(Error::shape(
            "model/dataset",
            format!(
                "model expects D = {}, A = {}; dataset has D = {}, A = {}",
                model.feat_dim(),
                model.attr_dim(),
                ds.feat_dim(),
                ds.attr_dim()
            ),
        ));
    }
    Ok(())
}

/// Validation-time protocol. Queries are the `val_idx` rows; the 1-NN
/// reference set is the `train_idx` rows, so validation rows never match
/// themselves. Classes that appear only in `val_idx` play the unseen role.
/// Returns `None` when the dataset has no validation rows.
pub fn validation_metrics(
    predictor: &Predictor<'_>,
    ds: &GzslDataset,
    n_per_class: usize,
    rng: &mut Rng,
) -> Result<Option<GzslMetrics>> {
    if ds.splits.val_idx.is_empty() {
        return Ok(None);
    }
    let val_unseen = ds.val_unseen_classes();
    let unseen_set: BTreeSet<usize> = val_unseen.iter().copied().collect();
    let val_seen: Vec<usize> = ds
        .splits
        .seen_classes
        .iter()
        .copied()
        .filter(|c| !unseen_set.contains(c))
        .collect();
    let protocol = Protocol {
        label_space: ds.splits.seen_classes.clone(),
        synth_classes: &val_unseen,
        reference_idx: ds.splits.train_idx.clone(),
        query_idx: ds.splits.val_idx.clone(),
    };
    let preds = predict(predictor, ds, &protocol, n_per_class, rng)?;
    let seen_with_rows: Vec<usize> = {
        let present: BTreeSet<usize> = protocol.query_idx.iter().map(|&r| ds.labels[r]).collect();
        val_seen.into_iter().filter(|c| present.contains(c)).collect()
    };
    score(ds, &protocol, &preds, &val_unseen, &seen_with_rows).map(Some)
}

/// Model-selection score: H when validation has unseen-role classes,
/// otherwise seen accuracy.
pub fn selection_score(m: &GzslMetrics, has_val_unseen: bool) -> f64 {
    if has_val_unseen {
        m.harmonic
    } else {
        m.acc_seen
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub count: usize,
    pub metrics: GzslMetrics,
}

/// Evaluates the generator once per count. Every count starts from a clone
/// of `rng`, so rows differ only in how many samples are drawn.
pub fn sweep_synth_count(
    model: &GdanModel,
    ds: &GzslDataset,
    counts: &[usize],
    merge_val: bool,
    rng: &Rng,
) -> Result<Vec<SweepRow>> {
    if counts.is_empty() {
        return Err(Error::Precondition("sweep needs at least one count".into()));
    }
    if counts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Precondition(format!("sweep counts {counts:?} must be ascending")));
    }
    check_model_fits(model, ds)?;
    counts
        .iter()
        .map(|&count| {
            let metrics = evaluate_predictor(&Predictor::Synthesis(model), ds, count, merge_val, &mut rng.clone())?;
            Ok(SweepRow { count, metrics })
        })
        .collect()
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(["count", "U", "S", "H"])?;
    for r in rows {
        w.write_record(&[
            r.count.to_string(),
            r.metrics.acc_unseen.to_string(),
            r.metrics.acc_seen.to_string(),
            r.metrics.harmonic.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Csv(e)
    }
}

/// Writes `source,class,f0,…` rows: real features first, then synthetic.
pub fn export_features(real: &LabeledFeatures, synth: &LabeledFeatures, path: &Path) -> Result<()> {
    let d = if real.is_empty() { synth.features.cols() } else { real.features.cols() };
    if !real.is_empty() && !synth.is_empty() && real.features.cols() != synth.features.cols() {
        return Err(Error::shape(
            "export_features",
            format!("real width {} vs synthetic width {}", real.features.cols(), synth.features.cols()),
        ));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    let mut header = vec!["source".to_string(), "class".to_string()];
    if !(real.is_empty() && synth.is_empty()) {
        header.extend((0..d).map(|j| format!("f{j}")));
    }
    w.write_record(&header)?;
    for (source, set) in [("real", real), ("synth", synth)] {
        for (row, &label) in set.features.iter_rows().zip(&set.labels) {
            let mut rec = vec![source.to_string(), label.to_string()];
            rec.extend(row.iter().map(|x| x.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One parsed row of an exported feature file.
#[derive(Clone, Debug, PartialEq)]
pub struct ExportedRow {
    pub source: String,
    pub class: usize,
    pub features: Vec<f64>,
}

pub fn read_exported(path: &Path) -> Result<Vec<ExportedRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let corrupt = |detail: String| Error::Corrupt {
        path: path.to_path_buf(),
        detail,
    };
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let class = rec
            .get(1)
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| corrupt("bad class column".into()))?;
        let features = rec
            .iter()
            .skip(2)
            .map(|x| x.parse::<f64>().map_err(|_| corrupt(format!("bad value {x:?}"))))
            .collect::<Result<_>>()?;
        out.push(ExportedRow {
            source: rec.get(0).unwrap_or_default().to_string(),
            class,
            features,
        });
    }
    Ok(out)
}
