//! Objective terms with analytic gradients.
//!
//! Every expectation is a batch mean. Squared norms are summed over feature
//! (or attribute) dimensions, then averaged over the batch. Each loss that
//! needs a posterior sample draws its own `ε`, in the fixed order
//! CVAE → generator-adversarial → cyclic, so a composite evaluation consumes
//! the random stream exactly like the individual terms called in that order.
//!
//! Gradient routing:
//!
//! | term        | receives gradient      |
//! |-------------|------------------------|
//! | CVAE        | E, G                   |
//! | supervised  | R                      |
//! | cyclic      | E, G, R                |
//! | adv (gen)   | E, G  (D frozen)       |
//! | adv (reg)   | R     (D frozen)       |
//! | disc        | D     (fakes constant) |

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{reparameterize, standard_normal, GdanModel, Network};
use crate::nn::{MlpGrads, Trace};
use crate::tensor::Matrix;

/// `λ1` (cyclic), `λ2` (supervised) and `λ3` (regressor-adversarial).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cyc: f64,
    pub sup: f64,
    pub adv_reg: f64,
}

impl LossWeights {
    pub const PUBLISHED: LossWeights = LossWeights {
        cyc: 0.1,
        sup: 0.1,
        adv_reg: 0.1,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("cyc", self.cyc), ("sup", self.sup), ("adv_reg", self.adv_reg)] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("loss weight {name} = {w} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::PUBLISHED
    }
}

/// Which terms of the generator-side objective are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Objective {
    pub cvae: bool,
    pub adv_gen: bool,
    pub cyc: bool,
    pub sup: bool,
    pub adv_reg: bool,
}

impl Objective {
    pub const FULL: Objective = Objective {
        cvae: true,
        adv_gen: true,
        cyc: true,
        sup: true,
        adv_reg: true,
    };
    pub const NONE: Objective = Objective {
        cvae: false,
        adv_gen: false,
        cyc: false,
        sup: false,
        adv_reg: false,
    };

    pub fn uses_discriminator(&self) -> bool {
        self.adv_gen || self.adv_reg
    }

    pub fn trains(&self, net: Network) -> bool {
        match net {
            Network::Encoder | Network::Generator => self.cvae || self.adv_gen || self.cyc,
            Network::Regressor => self.cyc || self.sup || self.adv_reg,
            Network::Discriminator => false,
        }
    }

    fn needs_posterior(&self) -> bool {
        self.cvae || self.adv_gen || self.cyc
    }
}

/// Which fake pairs enter the discriminator loss besides the real pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscTerms {
    /// `(G(s, z), s)`
    pub generator_fake: bool,
    /// `(v, R(v))`
    pub regressor_fake: bool,
    /// `(v, s⁻)`
    pub negative: bool,
}

impl DiscTerms {
    pub const ALL: DiscTerms = DiscTerms {
        generator_fake: true,
        regressor_fake: true,
        negative: true,
    };
}

/// One step's loss values. Terms that were not evaluated are reported as 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub cvae_recon: f64,
    pub cvae_kl: f64,
    pub sup: f64,
    pub cyc: f64,
    pub adv_gen: f64,
    pub adv_reg: f64,
    pub disc_total: f64,
    pub overall: f64,
}

impl LossReport {
    pub const FIELDS: [&'static str; 8] = [
        "cvae_recon",
        "cvae_kl",
        "sup",
        "cyc",
        "adv_gen",
        "adv_reg",
        "disc_total",
        "overall",
    ];

    pub fn cvae(&self) -> f64 {
        self.cvae_recon + self.cvae_kl
    }

    /// `L_CVAE + L_adv(G,E) + λ1·L_cyc + λ2·L_sup + λ3·L_adv(R)`.
    pub fn combine(&self, w: &LossWeights) -> f64 {
        self.cvae() + self.adv_gen + w.cyc * self.cyc + w.sup * self.sup + w.adv_reg * self.adv_reg
    }

    pub fn values(&self) -> [f64; 8] {
        [
            self.cvae_recon,
            self.cvae_kl,
            self.sup,
            self.cyc,
            self.adv_gen,
            self.adv_reg,
            self.disc_total,
            self.overall,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.values().iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Element-wise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut acc = [0.0; 8];
        for r in reports {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        let [cvae_recon, cvae_kl, sup, cyc, adv_gen, adv_reg, disc_total, overall] = acc.map(|a| a / n);
        LossReport {
            cvae_recon,
            cvae_kl,
            sup,
            cyc,
            adv_gen,
            adv_reg,
            disc_total,
            overall,
        }
    }
}

/// Parameter gradients for all four networks.
#[derive(Clone, Debug, PartialEq)]
pub struct GdanGrads {
    pub encoder: MlpGrads,
    pub generator: MlpGrads,
    pub regressor: MlpGrads,
    pub discriminator: MlpGrads,
}

impl GdanGrads {
    pub fn zeros(model: &GdanModel) -> Self {
        GdanGrads {
            encoder: MlpGrads::zeros_like(&model.encoder),
            generator: MlpGrads::zeros_like(&model.generator),
            regressor: MlpGrads::zeros_like(&model.regressor),
            discriminator: MlpGrads::zeros_like(&model.discriminator),
        }
    }

    pub fn get(&self, net: Network) -> &MlpGrads {
        match net {
            Network::Encoder => &self.encoder,
            Network::Generator => &self.generator,
            Network::Regressor => &self.regressor,
            Network::Discriminator => &self.discriminator,
        }
    }

    fn get_mut(&mut self, net: Network) -> &mut MlpGrads {
        match net {
            Network::Encoder => &mut self.encoder,
            Network::Generator => &mut self.generator,
            Network::Regressor => &mut self.regressor,
            Network::Discriminator => &mut self.discriminator,
        }
    }

    pub fn add_scaled(&mut self, other: &GdanGrads, c: f64) -> Result<()> {
        for n in Network::ALL {
            self.get_mut(n).add_scaled(other.get(n), c)?;
        }
        Ok(())
    }

    /// Gradients flattened in the order of [`GdanModel::params_flat`].
    pub fn flat(&self) -> Vec<f64> {
        Network::ALL.iter().flat_map(|&n| self.get(n).flat()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.flat().iter().all(|x| x.is_finite())
    }
}

/// A minibatch of paired features and class embeddings, plus optional
/// negative embeddings (one per row, never equal to the paired one).
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub v: Matrix,
    pub s: Matrix,
    pub s_neg: Option<Matrix>,
}

impl Batch {
    pub fn new(v: Matrix, s: Matrix, s_neg: Option<Matrix>) -> Result<Self> {
        let rows_ok = v.rows() == s.rows() && s_neg.as_ref().is_none_or(|n| n.rows() == s.rows());
        let cols_ok = s_neg.as_ref().is_none_or(|n| n.cols() == s.cols());
        if !rows_ok || !cols_ok || v.rows() == 0 {
            return Err(Error::shape(
                "Batch::new",
                format!(
                    "v {:?}, s {:?}, s_neg {:?}",
                    v.shape(),
                    s.shape(),
                    s_neg.as_ref().map(Matrix::shape)
                ),
            ));
        }
        Ok(Batch { v, s, s_neg })
    }

    pub fn paired(v: Matrix, s: Matrix) -> Result<Self> {
        Self::new(v, s, None)
    }

    pub fn len(&self) -> usize {
        self.v.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.v.rows() == 0
    }
}

fn check_batch(model: &GdanModel, v: &Matrix, s: &Matrix) -> Result<()> {
    if v.cols() != model.feat_dim() || s.cols() != model.attr_dim() || v.rows() != s.rows() || v.rows() == 0 {
        return Err(Error::shape(
            "loss",
            format!(
                "v {:?} and s {:?} for a model with D = {}, A = {}",
                v.shape(),
                s.shape(),
                model.feat_dim(),
                model.attr_dim()
            ),
        ));
    }
    Ok(())
}

/// Batch mean of `‖pred − target‖²` and its gradient with respect to `pred`.
fn squared_error(pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    let diff = pred.sub(target)?;
    let n = pred.rows() as f64;
    Ok((diff.sum_squares() / n, diff.scale(2.0 / n)))
}

/// Batch mean of `(score − target)²` and its gradient with respect to the scores.
fn least_squares(scores: &Matrix, target: f64) -> (f64, Matrix) {
    let n = scores.rows() as f64;
    let value = scores.as_slice().iter().map(|d| (d - target).powi(2)).sum::<f64>() / n;
    (value, scores.map(|d| 2.0 * (d - target) / n))
}

/// Batch mean of `½·Σ_j (μ_j² + exp(logvar_j) − 1 − logvar_j)`.
pub fn kl_unit_gaussian(mu: &Matrix, logvar: &Matrix) -> Result<f64> {
    if mu.shape() != logvar.shape() {
        return Err(Error::shape(
            "kl_unit_gaussian",
            format!("{:?} vs {:?}", mu.shape(), logvar.shape()),
        ));
    }
    if !mu.is_finite() || !logvar.is_finite() {
        return Err(Error::Numeric("non-finite posterior parameters".into()));
    }
    let n = mu.rows().max(1) as f64;
    let total: f64 = mu
        .as_slice()
        .iter()
        .zip(logvar.as_slice())
        .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum();
    Ok(total / n)
}

/// Encoder forward pass shared by every posterior-sampling term of a step.
struct EncoderPass {
    trace: Trace,
    mu: Matrix,
    logvar: Matrix,
    std: Matrix,
}

struct PosteriorSample {
    eps: Matrix,
    z: Matrix,
}

impl EncoderPass {
    fn run(model: &GdanModel, v: &Matrix) -> Result<Self> {
        let trace = model.encoder.trace(v)?;
        let (mu, logvar) = trace.output().split_cols(model.noise_dim())?;
        let std = logvar.map(|lv| (0.5 * lv).exp());
        Ok(EncoderPass {
            trace,
            mu,
            logvar,
            std,
        })
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<PosteriorSample> {
        let eps = standard_normal(self.mu.rows(), self.mu.cols(), rng);
        let z = self.std.zip_map(&eps, |s, e| s * e)?.add(&self.mu)?;
        Ok(PosteriorSample { eps, z })
    }
}

/// Accumulated gradient with respect to the encoder outputs.
struct EncoderGrad {
    dmu: Matrix,
    dlogvar: Matrix,
}

impl EncoderGrad {
    fn new(pass: &EncoderPass) -> Self {
        EncoderGrad {
            dmu: Matrix::zeros(pass.mu.rows(), pass.mu.cols()),
            dlogvar: Matrix::zeros(pass.mu.rows(), pass.mu.cols()),
        }
    }

    /// Chain rule through `z = μ + σ ⊙ ε`.
    fn through_sample(&mut self, pass: &EncoderPass, sample: &PosteriorSample, dz: &Matrix, scale: f64) {
        let d = self.dmu.as_mut_slice();
        let l = self.dlogvar.as_mut_slice();
        let iter = dz
            .as_slice()
            .iter()
            .zip(sample.eps.as_slice())
            .zip(pass.std.as_slice())
            .enumerate();
        for (i, ((&g, &e), &s)) in iter {
            d[i] += scale * g;
            l[i] += scale * g * e * 0.5 * s;
        }
    }

    fn add_kl(&mut self, pass: &EncoderPass, scale: f64) {
        let n = pass.mu.rows() as f64;
        let d = self.dmu.as_mut_slice();
        let l = self.dlogvar.as_mut_slice();
        for (i, (&m, &lv)) in pass.mu.as_slice().iter().zip(pass.logvar.as_slice()).enumerate() {
            d[i] += scale * m / n;
            l[i] += scale * 0.5 * (lv.exp() - 1.0) / n;
        }
    }

    fn backward(self, model: &GdanModel, pass: &EncoderPass, grads: &mut GdanGrads) -> Result<()> {
        if self.dmu.max_abs() == 0.0 && self.dlogvar.max_abs() == 0.0 {
            return Ok(());
        }
        let upstream = Matrix::hcat(&[&self.dmu, &self.dlogvar])?;
        let (g, _) = model.encoder.backward(&pass.trace, &upstream)?;
        grads.encoder.add_assign(&g)
    }
}

fn cvae_term<R: Rng + ?Sized>(
    model: &GdanModel,
    pass: &EncoderPass,
    v: &Matrix,
    s: &Matrix,
    rng: &mut R,
    scale: f64,
    enc: &mut EncoderGrad,
    grads: &mut GdanGrads,
) -> Result<(f64, f64)> {
    let sample = pass.sample(rng)?;
    let gt = model.generator.trace(&model.generator_input(s, &sample.z)?)?;
    let (recon, d_out) = squared_error(gt.output(), v)?;
    let kl = kl_unit_gaussian(&pass.mu, &pass.logvar)?;
    if scale != 0.0 {
        let (gg, d_in) = model.generator.backward(&gt, &d_out)?;
        grads.generator.add_scaled(&gg, scale)?;
        let (_, dz) = d_in.split_cols(model.attr_dim())?;
        enc.through_sample(pass, &sample, &dz, scale);
        enc.add_kl(pass, scale);
    }
    Ok((recon, kl))
}

fn adv_gen_term<R: Rng + ?Sized>(
    model: &GdanModel,
    pass: &EncoderPass,
    s: &Matrix,
    rng: &mut R,
    scale: f64,
    enc: &mut EncoderGrad,
    grads: &mut GdanGrads,
) -> Result<f64> {
    let sample = pass.sample(rng)?;
    let gt = model.generator.trace(&model.generator_input(s, &sample.z)?)?;
    let dt = model.discriminator_trace(gt.output(), s)?;
    let (value, d_score) = least_squares(dt.output(), 1.0);
    if scale != 0.0 {
        // θ_D is frozen: only the input gradient is kept.
        let (_, d_pair) = model.discriminator.backward(&dt, &d_score)?;
        let (d_fake, _) = d_pair.split_cols(model.feat_dim())?;
        let (gg, d_in) = model.generator.backward(&gt, &d_fake)?;
        grads.generator.add_scaled(&gg, scale)?;
        let (_, dz) = d_in.split_cols(model.attr_dim())?;
        enc.through_sample(pass, &sample, &dz, scale);
    }
    Ok(value)
}

fn cyc_term<R: Rng + ?Sized>(
    model: &GdanModel,
    pass: &EncoderPass,
    v: &Matrix,
    s: &Matrix,
    rng: &mut R,
    scale: f64,
    enc: &mut EncoderGrad,
    grads: &mut GdanGrads,
) -> Result<f64> {
    let sample = pass.sample(rng)?;
    let a = model.attr_dim();

    // v → R(v) → G(R(v), z)
    let rt = model.regressor.trace(v)?;
    let gt_back = model.generator.trace(&model.generator_input(rt.output(), &sample.z)?)?;
    let (visual, d_visual) = squared_error(gt_back.output(), v)?;

    // s → G(s, z) → R(G(s, z))
    let gt_fwd = model.generator.trace(&model.generator_input(s, &sample.z)?)?;
    let rt_fwd = model.regressor.trace(gt_fwd.output())?;
    let (semantic, d_semantic) = squared_error(rt_fwd.output(), s)?;

    if scale != 0.0 {
        let (gg, d_in) = model.generator.backward(&gt_back, &d_visual)?;
        grads.generator.add_scaled(&gg, scale)?;
        let (d_rv, dz_back) = d_in.split_cols(a)?;
        let (gr, _) = model.regressor.backward(&rt, &d_rv)?;
        grads.regressor.add_scaled(&gr, scale)?;

        let (gr, d_gen) = model.regressor.backward(&rt_fwd, &d_semantic)?;
        grads.regressor.add_scaled(&gr, scale)?;
        let (gg, d_in) = model.generator.backward(&gt_fwd, &d_gen)?;
        grads.generator.add_scaled(&gg, scale)?;
        let (_, dz_fwd) = d_in.split_cols(a)?;

        enc.through_sample(pass, &sample, &dz_back.add(&dz_fwd)?, scale);
    }
    Ok(visual + semantic)
}

fn sup_term(model: &GdanModel, v: &Matrix, s: &Matrix, scale: f64, grads: &mut GdanGrads) -> Result<f64> {
    let rt = model.regressor.trace(v)?;
    let (value, d_out) = squared_error(rt.output(), s)?;
    if scale != 0.0 {
        let (gr, _) = model.regressor.backward(&rt, &d_out)?;
        grads.regressor.add_scaled(&gr, scale)?;
    }
    Ok(value)
}

fn adv_reg_term(model: &GdanModel, v: &Matrix, scale: f64, grads: &mut GdanGrads) -> Result<f64> {
    let rt = model.regressor.trace(v)?;
    let dt = model.discriminator_trace(v, rt.output())?;
    let (value, d_score) = least_squares(dt.output(), 1.0);
    if scale != 0.0 {
        let (_, d_pair) = model.discriminator.backward(&dt, &d_score)?;
        let (_, d_rv) = d_pair.split_cols(model.feat_dim())?;
        let (gr, _) = model.regressor.backward(&rt, &d_rv)?;
        grads.regressor.add_scaled(&gr, scale)?;
    }
    Ok(value)
}

/// Reconstruction and KL parts of the CVAE loss with their joint gradient.
#[derive(Clone, Debug)]
pub struct CvaeLoss {
    pub recon: f64,
    pub kl: f64,
    pub grads: GdanGrads,
}

impl CvaeLoss {
    pub fn value(&self) -> f64 {
        self.recon + self.kl
    }
}

/// CVAE loss: `‖v − G(s, z)‖²` with `z` from the encoder posterior, plus the
/// KL divergence of that posterior from `N(0, I)`. Gradients reach E and G.
pub fn cvae_loss<R: Rng + ?Sized>(model: &GdanModel, v: &Matrix, s: &Matrix, rng: &mut R) -> Result<CvaeLoss> {
    check_batch(model, v, s)?;
    let pass = EncoderPass::run(model, v)?;
    let mut grads = GdanGrads::zeros(model);
    let mut enc = EncoderGrad::new(&pass);
    let (recon, kl) = cvae_term(model, &pass, v, s, rng, 1.0, &mut enc, &mut grads)?;
    enc.backward(model, &pass, &mut grads)?;
    Ok(CvaeLoss { recon, kl, grads })
}

/// Supervised regressor loss `‖s − R(v)‖²`; gradient reaches R only.
pub fn sup_loss(model: &GdanModel, v: &Matrix, s: &Matrix) -> Result<(f64, GdanGrads)> {
    check_batch(model, v, s)?;
    let mut grads = GdanGrads::zeros(model);
    let value = sup_term(model, v, s, 1.0, &mut grads)?;
    Ok((value, grads))
}

/// Cyclic consistency `‖v − G(R(v), z)‖² + ‖s − R(G(s, z))‖²`, one posterior
/// sample `z ~ P_E(z|v)` shared by both directions.
pub fn cyc_loss<R: Rng + ?Sized>(model: &GdanModel, v: &Matrix, s: &Matrix, rng: &mut R) -> Result<(f64, GdanGrads)> {
    check_batch(model, v, s)?;
    let pass = EncoderPass::run(model, v)?;
    let mut grads = GdanGrads::zeros(model);
    let mut enc = EncoderGrad::new(&pass);
    let value = cyc_term(model, &pass, v, s, rng, 1.0, &mut enc, &mut grads)?;
    enc.backward(model, &pass, &mut grads)?;
    Ok((value, grads))
}

/// Least-squares discriminator loss over all four pair types.
pub fn disc_loss<R: Rng + ?Sized>(
    model: &GdanModel,
    v: &Matrix,
    s: &Matrix,
    s_neg: &Matrix,
    rng: &mut R,
) -> Result<(f64, GdanGrads)> {
    let batch = Batch::new(v.clone(), s.clone(), Some(s_neg.clone()))?;
    disc_loss_terms(model, &batch, DiscTerms::ALL, rng)
}

/// Discriminator loss `[D(v,s) − 1]²` plus `D(fake)²` for each enabled fake
/// pair. Fake inputs are constants; only θ_D receives gradient.
pub fn disc_loss_terms<R: Rng + ?Sized>(
    model: &GdanModel,
    batch: &Batch,
    terms: DiscTerms,
    rng: &mut R,
) -> Result<(f64, GdanGrads)> {
    let (v, s) = (&batch.v, &batch.s);
    check_batch(model, v, s)?;
    let s_neg = if terms.negative {
        let neg = batch
            .s_neg
            .as_ref()
            .ok_or_else(|| Error::Precondition("negative embeddings required".into()))?;
        for r in 0..s.rows() {
            if neg.row(r) == s.row(r) {
                return Err(Error::Precondition(format!(
                    "negative embedding equals the paired embedding at row {r}"
                )));
            }
        }
        Some(neg)
    } else {
        None
    };

    let mut grads = GdanGrads::zeros(model);
    let mut total = 0.0;
    let mut score = |fake_v: &Matrix, pair_s: &Matrix, target: f64| -> Result<()> {
        let dt = model.discriminator_trace(fake_v, pair_s)?;
        let (value, d_score) = least_squares(dt.output(), target);
        let (gd, _) = model.discriminator.backward(&dt, &d_score)?;
        grads.discriminator.add_assign(&gd)?;
        total += value;
        Ok(())
    };

    score(v, s, 1.0)?;
    if terms.generator_fake {
        let (mu, logvar) = model.encode(v)?;
        let z = reparameterize(&mu, &logvar, rng)?;
        let fake = model.generate(s, &z)?;
        score(&fake, s, 0.0)?;
    }
    if terms.regressor_fake {
        let fake_s = model.regress(v)?;
        score(v, &fake_s, 0.0)?;
    }
    if let Some(neg) = s_neg {
        score(v, neg, 0.0)?;
    }
    Ok((total, grads))
}

#[derive(Clone, Debug)]
pub struct AdvLosses {
    pub adv_gen: f64,
    pub adv_reg: f64,
    pub grads: GdanGrads,
}

/// Adversarial losses of the generator side, `[D(G(s,z), s) − 1]²`, and of
/// the regressor, `[D(v, R(v)) − 1]²`. θ_D is frozen in both.
pub fn adv_losses<R: Rng + ?Sized>(model: &GdanModel, v: &Matrix, s: &Matrix, rng: &mut R) -> Result<AdvLosses> {
    check_batch(model, v, s)?;
    let pass = EncoderPass::run(model, v)?;
    let mut grads = GdanGrads::zeros(model);
    let mut enc = EncoderGrad::new(&pass);
    let adv_gen = adv_gen_term(model, &pass, s, rng, 1.0, &mut enc, &mut grads)?;
    enc.backward(model, &pass, &mut grads)?;
    let adv_reg = adv_reg_term(model, v, 1.0, &mut grads)?;
    Ok(AdvLosses {
        adv_gen,
        adv_reg,
        grads,
    })
}

/// Weighted generator-side objective with all terms active.
pub fn overall_loss<R: Rng + ?Sized>(
    model: &GdanModel,
    batch: &Batch,
    weights: &LossWeights,
    rng: &mut R,
) -> Result<(LossReport, GdanGrads)> {
    overall_loss_with(model, batch, weights, Objective::FULL, rng)
}

/// Weighted objective restricted to the active terms of `objective`.
/// Inactive terms are neither evaluated nor reported.
pub fn overall_loss_with<R: Rng + ?Sized>(
    model: &GdanModel,
    batch: &Batch,
    weights: &LossWeights,
    objective: Objective,
    rng: &mut R,
) -> Result<(LossReport, GdanGrads)> {
    weights.validate()?;
    let (v, s) = (&batch.v, &batch.s);
    check_batch(model, v, s)?;
    let mut grads = GdanGrads::zeros(model);
    let mut report = LossReport::default();

    if objective.needs_posterior() {
        let pass = EncoderPass::run(model, v)?;
        let mut enc = EncoderGrad::new(&pass);
        if objective.cvae {
            let (recon, kl) = cvae_term(model, &pass, v, s, rng, 1.0, &mut enc, &mut grads)?;
            report.cvae_recon = recon;
            report.cvae_kl = kl;
        }
        if objective.adv_gen {
            report.adv_gen = adv_gen_term(model, &pass, s, rng, 1.0, &mut enc, &mut grads)?;
        }
        if objective.cyc {
            report.cyc = cyc_term(model, &pass, v, s, rng, weights.cyc, &mut enc, &mut grads)?;
        }
        enc.backward(model, &pass, &mut grads)?;
    }
    if objective.sup {
        report.sup = sup_term(model, v, s, weights.sup, &mut grads)?;
    }
    if objective.adv_reg {
        report.adv_reg = adv_reg_term(model, v, weights.adv_reg, &mut grads)?;
    }
    report.overall = report.combine(weights);
    Ok((report, grads))
}
