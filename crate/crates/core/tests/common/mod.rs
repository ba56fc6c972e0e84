//! Shared oracles for the integration tests.
#![allow(dead_code)]

use eph_core::a2c::{a2c_loss_terms, compute_returns, LossCoefs};
use eph_core::env::Action;
use eph_core::model::{forward_episode, backward_episode, CellMask, HeadGrad, ModelConfig, ModelParams, StepInput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny() -> ModelConfig {
    ModelConfig {
        obs_width: 6,
        encoder_hidden: 5,
        features: 4,
        hidden: 8,
        actions: 2,
    }
}

pub struct Episode {
    pub inputs: Vec<StepInput>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
}

pub fn random_episode(rng: &mut ChaCha8Rng, steps: usize, cfg: &ModelConfig) -> Episode {
    let mut inputs = Vec::new();
    let mut actions = Vec::new();
    let mut rewards = Vec::new();
    let mut prev: Option<Action> = None;
    let mut prev_r = 0.0;
    for t in 0..steps {
        let obs = (0..cfg.obs_width)
            .map(|_| if rng.random_bool(0.5) { rng.random_range(-1.0..1.0) } else { 0.0 })
            .collect();
        let memory = if t == steps / 2 {
            Some((0..cfg.hidden).map(|_| rng.random_range(-2.0..2.0)).collect())
        } else {
            None
        };
        inputs.push(StepInput {
            obs,
            prev_reward: prev_r,
            prev_action: prev,
            memory,
        });
        let a = if rng.random_bool(0.5) { Action::Left } else { Action::Right };
        let r = [0.0, 0.2, 1.0, -1.0][rng.random_range(0..4)];
        actions.push(a);
        rewards.push(r);
        prev = Some(a);
        prev_r = r;
    }
    Episode {
        inputs,
        actions,
        rewards,
    }
}

/// Loss of the episode under `params` with the advantages held fixed.
pub fn loss(params: &ModelParams, ep: &Episode, returns: &[f64], adv: &[f64], coefs: LossCoefs, mask: Option<&CellMask>) -> (f64, Vec<HeadGrad>) {
    let caches = forward_episode(params, &ep.inputs, mask);
    let lps: Vec<&[f64]> = caches.iter().map(|c| c.log_probs.as_slice()).collect();
    let values: Vec<f64> = caches.iter().map(|c| c.value).collect();
    let (terms, hg) = a2c_loss_terms(&lps, &values, &ep.actions, returns, adv, coefs);
    (terms.total, hg)
}

pub fn max_rel_error(seed: u64, steps: usize, mask: Option<&CellMask>) -> f64 {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Random biases too: a zero bias with an all-zero observation would sit
    // exactly on the ReLU kink. Draws whose encoder pre-activations come
    // within 1e-3 of zero are redrawn, since a step of eps could cross it.
    let (params, ep, caches) = loop {
        let mut params = ModelParams::zeros(&cfg);
        for v in &mut params.data {
            *v = rng.random_range(-0.8..0.8);
        }
        let ep = random_episode(&mut rng, steps, &cfg);
        let caches = forward_episode(&params, &ep.inputs, mask);
        let closest = caches
            .iter()
            .flat_map(|c| c.enc_pre.iter())
            .fold(f64::INFINITY, |m, z| m.min(z.abs()));
        if closest > 1e-3 {
            break (params, ep, caches);
        }
    };
    let returns = compute_returns(&ep.rewards, 0.9, 0.0);
    let adv: Vec<f64> = returns.iter().zip(&caches).map(|(r, c)| r - c.value).collect();
    let coefs = LossCoefs {
        value_coef: 0.5,
        entropy_coef: 0.05,
    };
    let (_, hg) = loss(&params, &ep, &returns, &adv, coefs, mask);
    let grads = backward_episode(&params, &caches, &hg, mask);

    let eps = 1e-4;
    let mut worst: f64 = 0.0;
    for k in 0..params.len() {
        let mut plus = params.clone();
        plus.data[k] += eps;
        let mut minus = params.clone();
        minus.data[k] -= eps;
        let numeric = (loss(&plus, &ep, &returns, &adv, coefs, mask).0
            - loss(&minus, &ep, &returns, &adv, coefs, mask).0)
            / (2.0 * eps);
        let analytic = grads.data[k];
        let scale = analytic.abs().max(numeric.abs()).max(1e-6);
        let rel = (analytic - numeric).abs() / scale;
        if rel > 1e-4 && std::env::var("GRAD_DEBUG").is_ok() {
            eprintln!("seed {seed} k {k} analytic {analytic:e} numeric {numeric:e}");
        }
        worst = worst.max(rel);
    }
    worst
}

