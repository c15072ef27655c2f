//! Finite-difference checks of every loss on small random instances.

use rand::Rng as _;
use serde::Serialize;

use crate::error::Result;
use crate::gradcheck::{grad_check_kink_aware, GRAD_CHECK_STEP, GRAD_CHECK_TOLERANCE};
use crate::losses::{self, Batch, DiscTerms, LossWeights, Objective};
use crate::model::{GdanConfig, GdanModel, Hyperparams, Network};
use crate::rng::Seeds;
use crate::tensor::Matrix;

pub const TOY_FEAT_DIM: usize = 6;
pub const TOY_ATTR_DIM: usize = 3;
pub const TOY_NOISE_DIM: usize = 4;
pub const TOY_BATCH: usize = 5;

/// A randomly initialized small model with a random batch and negatives.
#[derive(Clone, Debug)]
pub struct ToyProblem {
    pub model: GdanModel,
    pub batch: Batch,
}

impl ToyProblem {
    pub fn new(seed: u64) -> Self {
        Self::with_batch(seed, TOY_BATCH)
    }

    pub fn with_batch(seed: u64, batch: usize) -> Self {
        let cfg = GdanConfig::new(
            TOY_FEAT_DIM,
            TOY_ATTR_DIM,
            Hyperparams {
                noise_dim: TOY_NOISE_DIM,
                encoder_hidden: vec![7, 5],
                generator_hidden: vec![6],
                regressor_hidden: vec![5],
                discriminator_hidden: vec![6],
                ..Hyperparams::default()
            },
        )
        .expect("toy configuration is valid");
        let seeds = Seeds::new(seed);
        let mut model = GdanModel::init(cfg, &mut seeds.stream("init")).expect("toy model");
        let mut rng = seeds.stream("data");
        // Random biases: with zero biases a fully dead hidden layer puts the
        // next layer's pre-activations exactly on the ReLU kink.
        for net in Network::ALL {
            for layer in model.network_mut(net).layers_mut() {
                layer.bias_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
            }
        }
        let mut uniform = |rows, cols| Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
        let v = uniform(batch, TOY_FEAT_DIM);
        let s = uniform(batch, TOY_ATTR_DIM);
        let rotated: Vec<usize> = (0..batch).map(|i| (i + 1) % batch).collect();
        let mut s_neg = s.select_rows(&rotated).expect("rows in range");
        if batch == 1 {
            s_neg = s_neg.map(|x| x + 1.0);
        }
        ToyProblem {
            model,
            batch: Batch::new(v, s, Some(s_neg)).expect("consistent toy batch"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossCheck {
    pub loss: &'static str,
    pub seed: u64,
    pub max_rel_error: f64,
    pub checked: usize,
    pub refined: usize,
}

fn coords(model: &GdanModel, nets: &[Network]) -> Vec<usize> {
    nets.iter().flat_map(|&n| model.param_range(n)).collect()
}

/// Checks one scalar loss of the model parameters. The loss is evaluated
/// with a freshly seeded stream each time so sampled noise stays fixed.
fn check<F>(name: &'static str, seed: u64, toy: &ToyProblem, nets: &[Network], mut loss: F) -> Result<LossCheck>
where
    F: FnMut(&GdanModel, &Batch, &mut crate::rng::Rng) -> Result<(f64, Vec<f64>)>,
{
    let mut probe = toy.model.clone();
    let noise = Seeds::new(seed).stream("gradcheck");
    let objective = |p: &[f64]| {
        probe.set_params_flat(p)?;
        loss(&probe, &toy.batch, &mut noise.clone())
    };
    let params = toy.model.params_flat();
    let coords = coords(&toy.model, nets);
    let report = grad_check_kink_aware(objective, &params, &coords, GRAD_CHECK_STEP, GRAD_CHECK_TOLERANCE)?;
    Ok(LossCheck {
        loss: name,
        seed,
        max_rel_error: report.max_rel_error,
        checked: report.checked,
        refined: report.refined,
    })
}

/// Gradient checks of every loss on the toy instance for `seed`.
///
/// Adversarial and overall losses are checked over the networks they train;
/// the frozen discriminator is excluded there because the stop-gradient makes
/// its analytic gradient zero by definition.
pub fn check_all_losses(seed: u64) -> Result<Vec<LossCheck>> {
    check_all_losses_on(&ToyProblem::new(seed), seed)
}

pub fn check_all_losses_on(toy: &ToyProblem, seed: u64) -> Result<Vec<LossCheck>> {
    use Network::*;
    let egr = [Encoder, Generator, Regressor];
    let only = |objective: Objective, weights: LossWeights| {
        move |m: &GdanModel, b: &Batch, r: &mut crate::rng::Rng| {
            let (report, g) = losses::overall_loss_with(m, b, &weights, objective, r)?;
            Ok((report.overall, g.flat()))
        }
    };
    let unit = LossWeights {
        cyc: 1.0,
        sup: 1.0,
        adv_reg: 1.0,
    };
    Ok(vec![
        check("cvae", seed, toy, &Network::ALL, |m, b, r| {
            let out = losses::cvae_loss(m, &b.v, &b.s, r)?;
            Ok((out.value(), out.grads.flat()))
        })?,
        check("sup", seed, toy, &Network::ALL, |m, b, _| {
            let (v, g) = losses::sup_loss(m, &b.v, &b.s)?;
            Ok((v, g.flat()))
        })?,
        check("cyc", seed, toy, &Network::ALL, |m, b, r| {
            let (v, g) = losses::cyc_loss(m, &b.v, &b.s, r)?;
            Ok((v, g.flat()))
        })?,
        check("disc", seed, toy, &[Discriminator], |m, b, r| {
            let (v, g) = losses::disc_loss_terms(m, b, DiscTerms::ALL, r)?;
            Ok((v, g.flat()))
        })?,
        check(
            "adv_reg",
            seed,
            toy,
            &egr,
            only(Objective { adv_reg: true, ..Objective::NONE }, unit),
        )?,
        check(
            "adv_gen",
            seed,
            toy,
            &egr,
            only(Objective { adv_gen: true, ..Objective::NONE }, unit),
        )?,
        check("overall", seed, toy, &egr, only(Objective::FULL, LossWeights::PUBLISHED))?,
    ])
}

/// Worst relative error across `seeds` for every loss.
pub fn gradient_report(seeds: impl IntoIterator<Item = u64>) -> Result<Vec<LossCheck>> {
    let mut worst: Vec<LossCheck> = Vec::new();
    for seed in seeds {
        for c in check_all_losses(seed)? {
            match worst.iter_mut().find(|w| w.loss == c.loss) {
                Some(w) if c.max_rel_error > w.max_rel_error => *w = c,
                Some(_) => {}
                None => worst.push(c),
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::GRAD_CHECK_TOLERANCE;

    #[test]
    fn overall_loss_on_four_sample_batch() {
        let toy = ToyProblem::with_batch(42, 4);
        let checks = check_all_losses_on(&toy, 42).unwrap();
        let overall = checks.iter().find(|c| c.loss == "overall").unwrap();
        assert!(overall.max_rel_error < GRAD_CHECK_TOLERANCE, "{}", overall.max_rel_error);
        assert!(overall.checked > 0);
    }

    #[test]
    fn toy_problems_are_seeded() {
        let a = ToyProblem::new(3);
        let b = ToyProblem::new(3);
        assert_eq!(a.model, b.model);
        assert_eq!(a.batch, b.batch);
        assert_ne!(ToyProblem::new(4).batch, a.batch);
    }
}
