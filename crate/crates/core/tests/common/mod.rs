#![allow(dead_code)]

use std::sync::Arc;

use ethicrowd_core::clock::{Clock, ManualClock};
use ethicrowd_core::corpus::{Corpus, GoldPhase, PromptRecord};
use ethicrowd_core::simulator::{Cohort, PopulationSpec, Profile, TruthModel};
use ethicrowd_core::{Reaction, Store};

pub fn record(i: usize) -> PromptRecord {
    PromptRecord {
        prompt_id: format!("p{i:04}"),
        image_ref: format!("images/{i}.jpg"),
        question: format!("Is scene {i} acceptable?"),
        answer: format!("Answer number {i}"),
        gold: None,
        template_id: None,
    }
}

pub const GOLD_PRE: [Reaction; 5] = [
    Reaction::Ethical,
    Reaction::Unethical,
    Reaction::Unclear,
    Reaction::Ethical,
    Reaction::Unethical,
];
pub const GOLD_POST: [Reaction; 5] = [
    Reaction::Unethical,
    Reaction::Ethical,
    Reaction::Unclear,
    Reaction::Unethical,
    Reaction::Ethical,
];

/// `n` prompts `p0000..`; the first five are pre gold and the next five
/// post gold when `gold` is set.
pub fn corpus(n: usize, gold: bool) -> Corpus {
    let mut c = Corpus::new();
    let records: Vec<PromptRecord> = (0..n).map(record).collect();
    c.ingest(&records, ManualClock::at_epoch().now()).unwrap();
    if gold {
        for i in 0..5 {
            c.register_gold(&format!("p{i:04}"), GOLD_PRE[i], GoldPhase::Pre)
                .unwrap();
            c.register_gold(&format!("p{:04}", i + 5), GOLD_POST[i], GoldPhase::Post)
                .unwrap();
        }
    }
    c
}

pub fn store(n: usize, gold: bool) -> (Store, Arc<ManualClock>) {
    let clock = Arc::new(ManualClock::at_epoch());
    (Store::with_corpus(clock.clone(), corpus(n, gold)), clock)
}

pub fn spec(cohorts: Vec<(&str, usize, Profile)>, seed: u64) -> PopulationSpec {
    PopulationSpec {
        cohorts: cohorts
            .into_iter()
            .map(|(name, count, profile)| Cohort {
                name: name.into(),
                count,
                profile,
                sessions: 1,
            })
            .collect(),
        truth_model: Some(TruthModel {
            seed: 99,
            weights: [0.45, 0.45, 0.10],
        }),
        rng_seed: seed,
        ..Default::default()
    }
}

use ethicrowd_core::classifier::MlpModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Relative error with an absolute floor so vanishing gradients do not
/// divide by zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// A model of the given shape with every weight and bias drawn uniformly
/// from [-1, 1], plus a random batch. Nonzero biases keep pre-activations
/// off the ReLU kink.
pub fn random_problem(
    seed: u64,
    dims: [usize; 4],
    batch: usize,
) -> (MlpModel, Vec<(Vec<f64>, Reaction)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = MlpModel::new(dims[0], [dims[1], dims[2], dims[3]], seed).unwrap();
    for layer in model.layers_mut() {
        for w in layer.weights.iter_mut().chain(layer.biases.iter_mut()) {
            *w = rng.gen_range(-1.0..1.0);
        }
    }
    let data = (0..batch)
        .map(|_| {
            let x: Vec<f64> = (0..dims[0]).map(|_| rng.gen_range(-1.0..1.0)).collect();
            (x, Reaction::ALL[rng.gen_range(0..3)])
        })
        .collect();
    (model, data)
}

/// Largest relative error between backprop gradients and central
/// differences over every parameter.
pub fn max_gradient_error(
    model: &MlpModel,
    batch: &[(Vec<f64>, Reaction)],
    class_weights: Option<[f64; 3]>,
    h: f64,
) -> f64 {
    let grads = model.gradients(batch, class_weights).unwrap();
    let mut worst: f64 = 0.0;
    let loss = |m: &MlpModel| m.loss(batch, class_weights).unwrap();
    for li in 0..model.layers().len() {
        let nw = model.layers()[li].weights.len();
        let nb = model.layers()[li].biases.len();
        for k in 0..nw + nb {
            let mut plus = model.clone();
            let mut minus = model.clone();
            {
                let (p, m) = (&mut plus.layers_mut()[li], &mut minus.layers_mut()[li]);
                if k < nw {
                    p.weights[k] += h;
                    m.weights[k] -= h;
                } else {
                    p.biases[k - nw] += h;
                    m.biases[k - nw] -= h;
                }
            }
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let g = &grads.layers[li];
            let analytic = if k < nw {
                g.weights[k]
            } else {
                g.biases[k - nw]
            };
            worst = worst.max(rel_err(analytic, numeric));
        }
    }
    worst
}

/// Smallest distance of any hidden pre-activation from the ReLU kink.
/// Central differences are only meaningful when this exceeds the step.
pub fn kink_margin(model: &MlpModel, batch: &[(Vec<f64>, Reaction)]) -> f64 {
    let hidden = model.layers().len() - 1;
    let mut margin = f64::INFINITY;
    for (x, _) in batch {
        let mut a = x.clone();
        for layer in &model.layers()[..hidden] {
            let z: Vec<f64> = layer
                .weights
                .chunks_exact(layer.inputs)
                .zip(&layer.biases)
                .map(|(row, b)| b + row.iter().zip(&a).map(|(w, v)| w * v).sum::<f64>())
                .collect();
            margin = z.iter().fold(margin, |m, v| m.min(v.abs()));
            a = z.into_iter().map(|v| v.max(0.0)).collect();
        }
    }
    margin
}
