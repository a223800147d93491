//! Robustness experiments: train a DGConv network and a plain network of
//! matched size on the same synthetic split, then score both on clean,
//! deformed and salt-noise test sets.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    deform_transform, derive_seed, gen_bag, rng_for, salt_noise, sample_deformation,
    SynthLesionSpec,
};
use crate::error::{arg_err, Result};
use crate::model::{ModelSpec, Network};
use crate::optim::OptimizerConfig;
use crate::train::{evaluate, train, Sample, TrainOptions, STREAM_INIT};

const STREAM_DEFORM: u64 = 4;
const STREAM_NOISE: u64 = 5;

/// Generates bags `start..start + count`.
pub fn synth_samples(spec: &SynthLesionSpec, start: u64, count: usize) -> Result<Vec<Sample>> {
    (start..start + count as u64)
        .map(|i| {
            gen_bag(spec, i).map(|b| Sample {
                image: b.image,
                labels: b.labels,
            })
        })
        .collect()
}

/// `variants` randomly scaled and rotated copies of every sample.
pub fn deformed_set(samples: &[Sample], variants: usize, seed: u64) -> Result<Vec<Sample>> {
    let mut rng = rng_for(seed, STREAM_DEFORM);
    let mut out = Vec::with_capacity(samples.len() * variants);
    for s in samples {
        for _ in 0..variants {
            let (scale, angle) = sample_deformation(&mut rng);
            out.push(Sample {
                image: deform_transform(&s.image, scale, angle)?,
                labels: s.labels.clone(),
            });
        }
    }
    Ok(out)
}

pub fn noisy_set(samples: &[Sample], prob: f64, value: f64, seed: u64) -> Result<Vec<Sample>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let image = salt_noise(
                &s.image,
                prob,
                value,
                derive_seed(derive_seed(seed, STREAM_NOISE), i as u64),
            )?;
            Ok(Sample {
                image,
                labels: s.labels.clone(),
            })
        })
        .collect()
}

/// Width of the last plain stage that brings the plain network's total
/// parameter count closest to `target`, other stages fixed.
pub fn match_plain_width(template: &ModelSpec, target: usize) -> Result<ModelSpec> {
    if template.uses_dgconv() {
        return Err(arg_err!("the baseline must not contain DGConv stages"));
    }
    let mut best: Option<(usize, ModelSpec)> = None;
    for w in 1..=4096 {
        let mut s = template.clone();
        *s.widths
            .last_mut()
            .ok_or_else(|| arg_err!("template has no stages"))? = w;
        let diff = s.total_params()?.abs_diff(target);
        if best.as_ref().is_none_or(|b| diff < b.0) {
            best = Some((diff, s));
        }
    }
    Ok(best.expect("searched at least one width").1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustnessConfig {
    pub data: SynthLesionSpec,
    pub model: ModelSpec,
    /// Plain baseline; its last width is refitted to the DGConv total.
    pub baseline: ModelSpec,
    pub optim: OptimizerConfig,
    pub train: TrainOptions,
    pub train_bags: usize,
    pub test_bags: usize,
    /// Deformed copies per test bag.
    pub variants: usize,
    pub noise_prob: f64,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        Self {
            data: SynthLesionSpec::default(),
            model: ModelSpec {
                widths: vec![4, 4],
                dgconv: vec![false, true],
                strides: vec![1, 2],
                masks: 4,
                sigma: Some(1.0),
                lambda: Some(3.0),
                ..ModelSpec::default()
            },
            baseline: ModelSpec::plain(vec![4, 8], vec![1, 2], 1),
            optim: OptimizerConfig {
                epochs: 20,
                ..OptimizerConfig::default()
            },
            train: TrainOptions {
                augment: true,
                ..TrainOptions::default()
            },
            train_bags: 200,
            test_bags: 200,
            variants: 10,
            noise_prob: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelScores {
    pub params: usize,
    pub clean_auc: f64,
    pub deform_auc: f64,
    pub clean_accuracy: f64,
    pub noisy_accuracy: f64,
}

impl ModelScores {
    pub fn noise_drop(&self) -> f64 {
        self.clean_accuracy - self.noisy_accuracy
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessRun {
    pub seed: u64,
    pub dgconv: ModelScores,
    pub plain: ModelScores,
}

fn fit_and_score(
    spec: &ModelSpec,
    cfg: &RobustnessConfig,
    seed: u64,
    train_set: &[Sample],
    tests: (&[Sample], &[Sample], &[Sample]),
) -> Result<ModelScores> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_INIT));
    let net = Network::new(spec, &mut rng)?;
    let params = net.num_scalars();
    let optim = OptimizerConfig {
        seed,
        ..cfg.optim.clone()
    };
    let net = train(net, train_set, &[], &optim, &cfg.train, |_, _| Ok(()))?.last;
    let auc = |s: &[Sample]| -> Result<(f64, f64)> {
        let e = evaluate(&net, s, None)?;
        Ok((
            e.mean_auc()
                .ok_or_else(|| arg_err!("test split has a single class"))?,
            e.mean_accuracy(),
        ))
    };
    let (clean_auc, clean_accuracy) = auc(tests.0)?;
    let (deform_auc, _) = auc(tests.1)?;
    let (_, noisy_accuracy) = auc(tests.2)?;
    Ok(ModelScores {
        params,
        clean_auc,
        deform_auc,
        clean_accuracy,
        noisy_accuracy,
    })
}

/// One seed of the comparison. The seed picks the data, the initial weights
/// and the batch order.
pub fn robustness_run(cfg: &RobustnessConfig, seed: u64) -> Result<RobustnessRun> {
    let data = SynthLesionSpec {
        seed,
        ..cfg.data.clone()
    };
    let train_set = synth_samples(&data, 0, cfg.train_bags)?;
    let test = synth_samples(&data, 1_000_000, cfg.test_bags)?;
    let deformed = deformed_set(&test, cfg.variants, seed)?;
    let noisy = noisy_set(&test, cfg.noise_prob, data.max_intensity, seed)?;
    let tests = (&test[..], &deformed[..], &noisy[..]);

    let target = cfg.model.total_params()?;
    let plain_spec = match_plain_width(&cfg.baseline, target)?;
    Ok(RobustnessRun {
        seed,
        dgconv: fit_and_score(&cfg.model, cfg, seed, &train_set, tests)?,
        plain: fit_and_score(&plain_spec, cfg, seed, &train_set, tests)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matched_width_is_closest() {
        let t = ModelSpec::plain(vec![4, 1], vec![2, 2], 1);
        let s = match_plain_width(&t, 1000).unwrap();
        let w = *s.widths.last().unwrap();
        let total = |w: usize| {
            ModelSpec::plain(vec![4, w], vec![2, 2], 1)
                .total_params()
                .unwrap()
        };
        assert!(total(w).abs_diff(1000) <= total(w + 1).abs_diff(1000));
        assert!(total(w).abs_diff(1000) <= total(w - 1).abs_diff(1000));
    }

    #[test]
    fn corrupted_sets() {
        let spec = SynthLesionSpec {
            size: 16,
            ..Default::default()
        };
        let s = synth_samples(&spec, 0, 3).unwrap();
        assert_eq!(deformed_set(&s, 4, 1).unwrap().len(), 12);
        let n = noisy_set(&s, 0.0, 1.0, 1).unwrap();
        assert_eq!(n, s);
    }
}
