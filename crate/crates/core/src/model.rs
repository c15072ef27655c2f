//! The four GDAN networks: encoder `E`, generator `G`, regressor `R` and
//! discriminator `D`.
//!
//! * `E: v ↦ (μ, log σ²)`, conditioned on the visual feature only.
//! * `G: [s ‖ z] ↦ v'`.
//! * `R: v ↦ s'`.
//! * `D: [v ‖ s] ↦ score`, linear output (least-squares targets 0/1).

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adam::AdamHyper;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::nn::{Activation, Mlp, Trace};
use crate::tensor::Matrix;

/// Hidden activation of `E`, `G` and `R`.
pub const GENERATIVE_HIDDEN: Activation = Activation::Relu;
/// Hidden activation of `D`.
pub const DISCRIMINATOR_HIDDEN: Activation = Activation::LeakyRelu;

/// Dataset-independent hyperparameters. Defaults are the published settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    pub noise_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub generator_hidden: Vec<usize>,
    pub regressor_hidden: Vec<usize>,
    pub discriminator_hidden: Vec<usize>,
    /// Weight of the cyclic-consistency loss.
    pub lambda_cyc: f64,
    /// Weight of the supervised regressor loss.
    pub lambda_sup: f64,
    /// Weight of the regressor's adversarial loss.
    pub lambda_adv_reg: f64,
    pub lr_disc: f64,
    pub lr_gen: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub checkpoint_every: usize,
    pub d_iter: usize,
    pub g_iter: usize,
    pub batch_size: usize,
    pub n_synth_eval: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            noise_dim: 100,
            encoder_hidden: vec![1200, 600],
            generator_hidden: vec![800],
            regressor_hidden: vec![600],
            discriminator_hidden: vec![800],
            lambda_cyc: 0.1,
            lambda_sup: 0.1,
            lambda_adv_reg: 0.1,
            lr_disc: 1e-5,
            lr_gen: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 500,
            checkpoint_every: 10,
            d_iter: 1,
            g_iter: 1,
            batch_size: 64,
            n_synth_eval: 400,
        }
    }
}

impl Hyperparams {
    /// Narrow networks for the small synthetic benchmark; everything not
    /// listed keeps the published value.
    pub fn desk_scale() -> Self {
        Hyperparams {
            noise_dim: 8,
            encoder_hidden: vec![64, 32],
            generator_hidden: vec![64],
            regressor_hidden: vec![32],
            discriminator_hidden: vec![64],
            lr_disc: 1e-4,
            lr_gen: 1e-3,
            epochs: 150,
            batch_size: 32,
            ..Hyperparams::default()
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            cyc: self.lambda_cyc,
            sup: self.lambda_sup,
            adv_reg: self.lambda_adv_reg,
        }
    }

    pub fn gen_adam(&self) -> AdamHyper {
        AdamHyper {
            lr: self.lr_gen,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn disc_adam(&self) -> AdamHyper {
        AdamHyper {
            lr: self.lr_disc,
            ..self.gen_adam()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let hidden_ok = [
            &self.encoder_hidden,
            &self.generator_hidden,
            &self.regressor_hidden,
            &self.discriminator_hidden,
        ]
        .iter()
        .all(|h| !h.contains(&0));
        let checks = [
            (self.noise_dim > 0, "noise_dim must be > 0"),
            (hidden_ok, "hidden widths must be > 0"),
            (self.weights().validate().is_ok(), "loss weights must be finite and >= 0"),
            (self.d_iter >= 1 && self.g_iter >= 1, "d_iter and g_iter must be >= 1"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.epochs >= 1, "epochs must be >= 1"),
            (self.checkpoint_every >= 1, "checkpoint_every must be >= 1"),
            (self.n_synth_eval >= 1, "n_synth_eval must be >= 1"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        self.gen_adam().validate()?;
        self.disc_adam().validate()
    }
}

/// Hyperparameters bound to a dataset's feature and attribute widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GdanConfig {
    pub feat_dim: usize,
    pub attr_dim: usize,
    pub hp: Hyperparams,
}

impl GdanConfig {
    pub fn new(feat_dim: usize, attr_dim: usize, hp: Hyperparams) -> Result<Self> {
        let cfg = GdanConfig {
            feat_dim,
            attr_dim,
            hp,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.feat_dim == 0 || self.attr_dim == 0 {
            return Err(Error::Config("feature and attribute dims must be > 0".into()));
        }
        self.hp.validate()
    }

    fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
        std::iter::once(input)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(output))
            .collect()
    }

    pub fn encoder_widths(&self) -> Vec<usize> {
        Self::widths(self.feat_dim, &self.hp.encoder_hidden, 2 * self.hp.noise_dim)
    }

    pub fn generator_widths(&self) -> Vec<usize> {
        Self::widths(
            self.attr_dim + self.hp.noise_dim,
            &self.hp.generator_hidden,
            self.feat_dim,
        )
    }

    pub fn regressor_widths(&self) -> Vec<usize> {
        Self::widths(self.feat_dim, &self.hp.regressor_hidden, self.attr_dim)
    }

    pub fn discriminator_widths(&self) -> Vec<usize> {
        Self::widths(self.feat_dim + self.attr_dim, &self.hp.discriminator_hidden, 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Network {
    Encoder,
    Generator,
    Regressor,
    Discriminator,
}

impl Network {
    pub const ALL: [Network; 4] = [
        Network::Encoder,
        Network::Generator,
        Network::Regressor,
        Network::Discriminator,
    ];
}

#[derive(Debug)]
pub struct GdanModel {
    config: GdanConfig,
    pub encoder: Mlp,
    pub generator: Mlp,
    pub regressor: Mlp,
    pub discriminator: Mlp,
    disc_forwards: AtomicU64,
}

impl Clone for GdanModel {
    fn clone(&self) -> Self {
        GdanModel {
            config: self.config.clone(),
            encoder: self.encoder.clone(),
            generator: self.generator.clone(),
            regressor: self.regressor.clone(),
            discriminator: self.discriminator.clone(),
            disc_forwards: AtomicU64::new(self.disc_forward_count()),
        }
    }
}

impl PartialEq for GdanModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.encoder == other.encoder
            && self.generator == other.generator
            && self.regressor == other.regressor
            && self.discriminator == other.discriminator
    }
}

impl GdanModel {
    pub fn init<R: Rng + ?Sized>(config: GdanConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let encoder = Mlp::glorot(&config.encoder_widths(), GENERATIVE_HIDDEN, Activation::Identity, rng)?;
        let generator = Mlp::glorot(&config.generator_widths(), GENERATIVE_HIDDEN, Activation::Identity, rng)?;
        let regressor = Mlp::glorot(&config.regressor_widths(), GENERATIVE_HIDDEN, Activation::Identity, rng)?;
        let discriminator = Mlp::glorot(
            &config.discriminator_widths(),
            DISCRIMINATOR_HIDDEN,
            Activation::Identity,
            rng,
        )?;
        Self::from_parts(config, encoder, generator, regressor, discriminator)
    }

    /// All-zero parameters.
    pub fn zeros(config: GdanConfig) -> Result<Self> {
        config.validate()?;
        let encoder = Mlp::zeros(&config.encoder_widths(), GENERATIVE_HIDDEN, Activation::Identity)?;
        let generator = Mlp::zeros(&config.generator_widths(), GENERATIVE_HIDDEN, Activation::Identity)?;
        let regressor = Mlp::zeros(&config.regressor_widths(), GENERATIVE_HIDDEN, Activation::Identity)?;
        let discriminator = Mlp::zeros(&config.discriminator_widths(), DISCRIMINATOR_HIDDEN, Activation::Identity)?;
        Self::from_parts(config, encoder, generator, regressor, discriminator)
    }

    /// Assembles a model from explicit networks, checking every width against
    /// the configuration.
    pub fn from_parts(
        config: GdanConfig,
        encoder: Mlp,
        generator: Mlp,
        regressor: Mlp,
        discriminator: Mlp,
    ) -> Result<Self> {
        let expected = [
            ("encoder", config.encoder_widths(), &encoder),
            ("generator", config.generator_widths(), &generator),
            ("regressor", config.regressor_widths(), &regressor),
            ("discriminator", config.discriminator_widths(), &discriminator),
        ];
        for (name, widths, net) in expected {
            if net.widths() != widths {
                return Err(Error::Validation(format!(
                    "{name} widths {:?} do not match configuration {:?}",
                    net.widths(),
                    widths
                )));
            }
        }
        Ok(GdanModel {
            config,
            encoder,
            generator,
            regressor,
            discriminator,
            disc_forwards: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &GdanConfig {
        &self.config
    }

    pub fn feat_dim(&self) -> usize {
        self.config.feat_dim
    }

    pub fn attr_dim(&self) -> usize {
        self.config.attr_dim
    }

    pub fn noise_dim(&self) -> usize {
        self.config.hp.noise_dim
    }

    pub fn network(&self, which: Network) -> &Mlp {
        match which {
            Network::Encoder => &self.encoder,
            Network::Generator => &self.generator,
            Network::Regressor => &self.regressor,
            Network::Discriminator => &self.discriminator,
        }
    }

    pub fn network_mut(&mut self, which: Network) -> &mut Mlp {
        match which {
            Network::Encoder => &mut self.encoder,
            Network::Generator => &mut self.generator,
            Network::Regressor => &mut self.regressor,
            Network::Discriminator => &mut self.discriminator,
        }
    }

    /// Number of discriminator forward passes since construction.
    pub fn disc_forward_count(&self) -> u64 {
        self.disc_forwards.load(Ordering::Relaxed)
    }

    pub fn is_finite(&self) -> bool {
        Network::ALL.iter().all(|&n| self.network(n).is_finite())
    }

    /// Parameters of all four networks concatenated in `E, G, R, D` order.
    pub fn params_flat(&self) -> Vec<f64> {
        Network::ALL
            .iter()
            .flat_map(|&n| self.network(n).params_flat())
            .collect()
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = Network::ALL.iter().map(|&n| self.network(n).param_count()).sum();
        if flat.len() != total {
            return Err(Error::shape(
                "GdanModel::set_params_flat",
                format!("{} values for {total} parameters", flat.len()),
            ));
        }
        let mut offset = 0;
        for n in Network::ALL {
            let net = self.network_mut(n);
            let count = net.param_count();
            net.set_params_flat(&flat[offset..offset + count])?;
            offset += count;
        }
        Ok(())
    }

    /// Index range of each network inside [`GdanModel::params_flat`].
    pub fn param_range(&self, which: Network) -> std::ops::Range<usize> {
        let mut start = 0;
        for n in Network::ALL {
            let count = self.network(n).param_count();
            if n == which {
                return start..start + count;
            }
            start += count;
        }
        unreachable!()
    }

    fn check_cols(m: &Matrix, cols: usize, what: &str, op: &'static str) -> Result<()> {
        if m.cols() != cols {
            return Err(Error::shape(
                op,
                format!("{what} has {} columns, expected {cols}", m.cols()),
            ));
        }
        Ok(())
    }

    fn check_pair(a: &Matrix, b: &Matrix, op: &'static str) -> Result<()> {
        if a.rows() != b.rows() {
            return Err(Error::shape(
                op,
                format!("batch sizes {} and {}", a.rows(), b.rows()),
            ));
        }
        Ok(())
    }

    /// Posterior parameters `(μ, log σ²)` of `P_E(z | v)`.
    pub fn encode(&self, v: &Matrix) -> Result<(Matrix, Matrix)> {
        Self::check_cols(v, self.feat_dim(), "v", "encode")?;
        self.encoder.forward(v)?.split_cols(self.noise_dim())
    }

    pub(crate) fn generator_input(&self, s: &Matrix, z: &Matrix) -> Result<Matrix> {
        Self::check_cols(s, self.attr_dim(), "s", "generate")?;
        Self::check_cols(z, self.noise_dim(), "z", "generate")?;
        Self::check_pair(s, z, "generate")?;
        Matrix::hcat(&[s, z])
    }

    /// `G(s, z)` on the concatenation `[s ‖ z]`.
    pub fn generate(&self, s: &Matrix, z: &Matrix) -> Result<Matrix> {
        self.generator.forward(&self.generator_input(s, z)?)
    }

    pub fn regress(&self, v: &Matrix) -> Result<Matrix> {
        Self::check_cols(v, self.feat_dim(), "v", "regress")?;
        self.regressor.forward(v)
    }

    pub(crate) fn discriminator_input(&self, v: &Matrix, s: &Matrix) -> Result<Matrix> {
        Self::check_cols(v, self.feat_dim(), "v", "discriminate")?;
        Self::check_cols(s, self.attr_dim(), "s", "discriminate")?;
        Self::check_pair(v, s, "discriminate")?;
        Matrix::hcat(&[v, s])
    }

    /// One unbounded score per `(v, s)` pair.
    pub fn discriminate(&self, v: &Matrix, s: &Matrix) -> Result<Vec<f64>> {
        let input = self.discriminator_input(v, s)?;
        self.disc_forwards.fetch_add(1, Ordering::Relaxed);
        Ok(self.discriminator.forward(&input)?.into_vec())
    }

    pub(crate) fn discriminator_trace(&self, v: &Matrix, s: &Matrix) -> Result<Trace> {
        let input = self.discriminator_input(v, s)?;
        self.disc_forwards.fetch_add(1, Ordering::Relaxed);
        self.discriminator.trace(&input)
    }

    /// `z ~ N(0, I)` noise of shape `batch × d_z`.
    pub fn sample_prior<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Matrix {
        standard_normal(batch, self.noise_dim(), rng)
    }
}

pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// `z = μ + exp(½·log σ²) ⊙ ε` with `ε ~ N(0, I)` drawn from `rng`.
pub fn reparameterize<R: Rng + ?Sized>(mu: &Matrix, logvar: &Matrix, rng: &mut R) -> Result<Matrix> {
    let eps = standard_normal(mu.rows(), mu.cols(), rng);
    reparameterize_with(mu, logvar, &eps)
}

pub(crate) fn reparameterize_with(mu: &Matrix, logvar: &Matrix, eps: &Matrix) -> Result<Matrix> {
    if mu.shape() != logvar.shape() || mu.shape() != eps.shape() {
        return Err(Error::shape(
            "reparameterize",
            format!("mu {:?}, logvar {:?}", mu.shape(), logvar.shape()),
        ));
    }
    let std = logvar.map(|lv| (0.5 * lv).exp());
    std.zip_map(eps, |s, e| s * e)?.add(mu)
}
