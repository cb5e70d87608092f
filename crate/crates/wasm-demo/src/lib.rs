//! Browser demo. Three operations are exported: an activation and query-budget plan, a
//! Monte-Carlo check of the activation probability, and a small backdoor lab that trains on
//! synthetic blobs and answers query campaigns.

use triggerless_core::backdoor::{
    backdoor_conditional_accuracy, select_target_neurons, train_backdoored, train_clean,
};
use triggerless_core::data::synthetic_blobs;
use triggerless_core::metrics::{accuracy, attack_success_rate};
use triggerless_core::prob::{
    activation_prob_single, expected_queries, monte_carlo_activation, queries_for_confidence,
    success_prob_in_q, TargetAssignment,
};
use triggerless_core::query::run_campaigns;
use triggerless_core::{AttackConfig, Dataset, DropoutPlan, LayerTargets, ModelSpec, Parameters, TrainConfig};
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Activation probability, expected queries and the budget for `confidence`.
#[wasm_bindgen]
pub struct Plan {
    pub activation_probability: f64,
    pub expected_queries: f64,
    pub queries_for_confidence: f64,
}

#[wasm_bindgen]
pub fn plan(rate: f64, neurons: usize, confidence: f64) -> Result<Plan, JsError> {
    let p = activation_prob_single(rate, neurons).map_err(js_err)?;
    Ok(Plan {
        activation_probability: p,
        expected_queries: expected_queries(p).map_err(js_err)?,
        queries_for_confidence: queries_for_confidence(p, confidence).map_err(js_err)? as f64,
    })
}

/// Probability of at least one activation within q queries, for `points` values of q spread
/// evenly over `1..=max_queries`.
#[wasm_bindgen]
pub fn success_curve(rate: f64, neurons: usize, max_queries: u32, points: u32) -> Result<Vec<f64>, JsError> {
    let p = activation_prob_single(rate, neurons).map_err(js_err)?;
    let points = points.max(2);
    (0..points)
        .map(|i| {
            let q = 1 + u64::from(max_queries.max(1) - 1) * u64::from(i) / u64::from(points - 1);
            success_prob_in_q(p, q).map_err(js_err)
        })
        .collect()
}

/// `[frequency, ci_low, ci_high, analytic]` for `trials` simulated queries.
#[wasm_bindgen]
pub fn monte_carlo(rate: f64, neurons: usize, trials: u32, seed: u64) -> Result<Vec<f64>, JsError> {
    let assignment = TargetAssignment::single(rate, neurons).map_err(js_err)?;
    let est = monte_carlo_activation(&assignment, u64::from(trials), seed).map_err(js_err)?;
    let p = activation_prob_single(rate, neurons).map_err(js_err)?;
    Ok(vec![est.frequency, est.ci_low, est.ci_high, p])
}

/// A clean and a backdoored model trained on the same synthetic blobs.
#[wasm_bindgen]
pub struct Lab {
    clean: Parameters,
    backdoored: Parameters,
    plan: DropoutPlan,
    test: Dataset,
    target_label: usize,
    targets: Vec<LayerTargets>,
}

#[wasm_bindgen]
impl Lab {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, inference_rate: f64) -> Result<Lab, JsError> {
        let all = synthetic_blobs(4, 12, 200, 0.05, seed).map_err(js_err)?;
        let split = |keep: fn(usize) -> bool| all.select(&(0..all.len()).filter(|&i| keep(i)).collect::<Vec<_>>());
        let train = split(|i| i % 4 != 0);
        let test = split(|i| i % 4 == 0);
        let spec = ModelSpec::new(vec![12, 64, 48, 4]).map_err(js_err)?;
        let layer = spec.second_to_last_layer();
        let neurons = select_target_neurons(&spec, layer, 1, seed).map_err(js_err)?;
        let attack = AttackConfig {
            train: TrainConfig { epochs: 20, batch_size: 16, ..TrainConfig::default() },
            target_label: 0,
            targets: vec![LayerTargets::new(layer, neurons).map_err(js_err)?],
            backdoor_batch_fraction: 0.2,
            inference_dropout_rate: inference_rate,
            spare_targets: true,
        };
        let (backdoored, _) = train_backdoored(&train, &spec, &attack).map_err(js_err)?;
        let (clean, _) = train_clean(&train, &spec, &attack.train).map_err(js_err)?;
        Ok(Lab {
            clean,
            backdoored,
            plan: attack.plan(&spec).map_err(js_err)?,
            test,
            target_label: attack.target_label,
            targets: attack.targets,
        })
    }

    pub fn test_inputs(&self) -> usize {
        self.test.len()
    }

    pub fn clean_accuracy(&self) -> Result<f64, JsError> {
        accuracy(&self.clean, &self.test).map_err(js_err)
    }

    pub fn backdoored_accuracy(&self) -> Result<f64, JsError> {
        accuracy(&self.backdoored, &self.test).map_err(js_err)
    }

    /// Fraction of test inputs sent to the target label when the target neurons are dropped.
    pub fn conditional_accuracy(&self) -> Result<f64, JsError> {
        let spec = triggerless_core::query::spec_of(&self.backdoored);
        backdoor_conditional_accuracy(&self.backdoored, &spec, self.test.inputs(), &self.targets, self.target_label)
            .map_err(js_err)
    }

    /// Labels of `queries` dropout predictions of one test input; activated queries are
    /// reported as `label + 100`.
    pub fn campaign(&self, input: usize, queries: usize, seed: u64, backdoored: bool) -> Result<Vec<u32>, JsError> {
        let params = if backdoored { &self.backdoored } else { &self.clean };
        let t = run_campaigns(params, self.test.inputs(), &[input], &self.plan, queries, seed).map_err(js_err)?;
        Ok(t[0].records.iter().map(|r| r.label as u32 + if r.activated { 100 } else { 0 }).collect())
    }

    /// Attack success rate over `inputs` evenly spaced test rows with `queries` queries each.
    pub fn attack_success_rate(&self, inputs: usize, queries: usize, seed: u64) -> Result<f64, JsError> {
        let n = self.test.len();
        let inputs = inputs.clamp(1, n);
        let rows: Vec<usize> = (0..inputs).map(|i| i * n / inputs).collect();
        let t = run_campaigns(&self.backdoored, self.test.inputs(), &rows, &self.plan, queries, seed).map_err(js_err)?;
        let eligible = triggerless_core::metrics::eligible(&t, self.target_label);
        attack_success_rate(eligible, self.target_label).map_err(js_err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_matches_closed_form() {
        let p = plan(0.001, 1, 0.99).unwrap();
        assert_eq!(p.queries_for_confidence, 4603.0);
        let curve = success_curve(0.5, 1, 10, 10).unwrap();
        assert!((curve[0] - 0.5).abs() < 1e-12);
        assert!((curve[9] - (1.0 - 0.5f64.powi(10))).abs() < 1e-12);
    }

    #[test]
    fn lab_trains_a_working_backdoor() {
        let lab = Lab::new(1, 0.05).unwrap();
        assert!(lab.backdoored_accuracy().unwrap() >= 0.95);
        assert!(lab.conditional_accuracy().unwrap() >= 0.95);
        let labels = lab.campaign(1, 200, 3, true).unwrap();
        assert!(labels.iter().any(|&l| l == 100 + lab.target_label as u32));
        assert!(lab.attack_success_rate(40, 200, 3).unwrap() > 0.9);
    }
}
