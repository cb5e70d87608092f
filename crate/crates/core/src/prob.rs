//! Analytic backdoor-activation probabilities and their Monte-Carlo check.
//!
//! With `n` target neurons in one layer and prediction-time rate `r`, one query drops all of
//! them with probability `rⁿ`; targets spread over several layers multiply. Queries draw
//! independent masks, so the first activation is geometric in the query count.

use serde::{Deserialize, Serialize};

use crate::dropout::{DropoutPlan, RngStream};
use crate::error::{contract, Result};

/// Target neurons of one layer, as the probability model sees them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerActivation {
    pub layer: usize,
    pub neurons: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetAssignment {
    pub layers: Vec<LayerActivation>,
}

impl TargetAssignment {
    pub fn new(layers: Vec<LayerActivation>) -> Result<Self> {
        let a = Self { layers };
        a.validate()?;
        Ok(a)
    }

    pub fn single(rate: f64, neurons: usize) -> Result<Self> {
        Self::new(vec![LayerActivation {
            layer: 0,
            neurons,
            rate,
        }])
    }

    /// Counts and inference rates of the plan's target layers.
    pub fn from_plan(plan: &DropoutPlan) -> Result<Self> {
        Self::new(
            plan.targets
                .iter()
                .map(|t| LayerActivation {
                    layer: t.layer,
                    neurons: t.neurons.len(),
                    rate: plan.inference_rates.get(t.layer).copied().unwrap_or(0.0),
                })
                .collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(contract("target assignment has no layers"));
        }
        for l in &self.layers {
            check(l.rate, l.neurons)?;
        }
        Ok(())
    }
}

fn check(rate: f64, n: usize) -> Result<()> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(contract(format!("rate must lie in (0, 1), got {rate}")));
    }
    if n == 0 {
        return Err(contract("neuron count must be at least 1"));
    }
    Ok(())
}

fn check_p(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(contract(format!("probability must lie in (0, 1), got {p}")))
    }
}

/// `rateⁿ`.
pub fn activation_prob_single(rate: f64, n: usize) -> Result<f64> {
    check(rate, n)?;
    Ok(rate.powi(n as i32))
}

/// `∏ rateᵢ^{nᵢ}` over the assigned layers.
pub fn activation_prob_multi(assignment: &TargetAssignment) -> Result<f64> {
    assignment.validate()?;
    assignment
        .layers
        .iter()
        .map(|l| activation_prob_single(l.rate, l.neurons))
        .product()
}

/// `1 − (1−p)^q`: chance of at least one activation in `q` queries.
pub fn success_prob_in_q(p: f64, q: u64) -> Result<f64> {
    check_p(p)?;
    if q == 0 {
        return Err(contract("query count must be at least 1"));
    }
    Ok(-((q as f64) * (-p).ln_1p()).exp_m1())
}

/// `1/p`, the mean of the geometric first-activation query.
pub fn expected_queries(p: f64) -> Result<f64> {
    check_p(p)?;
    Ok(1.0 / p)
}

/// Smallest `q >= 1` with `success_prob_in_q(p, q) >= confidence`.
pub fn queries_for_confidence(p: f64, confidence: f64) -> Result<u64> {
    check_p(p)?;
    if !(0.0..1.0).contains(&confidence) {
        return Err(contract(format!("confidence must lie in [0, 1), got {confidence}")));
    }
    if confidence == 0.0 {
        return Ok(1);
    }
    let q = ((-confidence).ln_1p() / (-p).ln_1p()).ceil().max(1.0) as u64;
    // guard the ceiling against rounding right at an integer boundary
    if q > 1 && success_prob_in_q(p, q - 1)? >= confidence {
        Ok(q - 1)
    } else {
        Ok(q)
    }
}

/// Three-sigma binomial interval half-width: `3·sqrt(p(1−p)/trials)`.
pub fn binomial_three_sigma(p: f64, trials: u64) -> f64 {
    3.0 * (p * (1.0 - p) / trials as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub trials: u64,
    pub successes: u64,
    pub frequency: f64,
    /// `frequency ± 3σ`, σ from the empirical frequency, clipped to `[0, 1]`.
    pub ci_low: f64,
    pub ci_high: f64,
}

impl McEstimate {
    /// True iff the frequency lies within three analytic standard errors of `p`.
    pub fn agrees_with(&self, p: f64) -> bool {
        (self.frequency - p).abs() <= binomial_three_sigma(p, self.trials)
    }
}

/// Empirical frequency of "every target neuron dropped" over independent trials. Each trial
/// draws one Bernoulli(rate) per target neuron, layer by layer.
pub fn monte_carlo_activation(assignment: &TargetAssignment, trials: u64, seed: u64) -> Result<McEstimate> {
    assignment.validate()?;
    if trials < 1000 {
        return Err(contract(format!("need at least 1000 trials, got {trials}")));
    }
    let mut stream = RngStream::new(seed, 0);
    let mut successes = 0u64;
    for _ in 0..trials {
        let mut all = true;
        for l in &assignment.layers {
            for _ in 0..l.neurons {
                // every draw is taken even after a miss, so trial t always uses the same draws
                all &= stream.next_uniform() < l.rate;
            }
        }
        successes += u64::from(all);
    }
    let frequency = successes as f64 / trials as f64;
    let half = binomial_three_sigma(frequency, trials);
    Ok(McEstimate {
        trials,
        successes,
        frequency,
        ci_low: (frequency - half).max(0.0),
        ci_high: (frequency + half).min(1.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_layer_values() {
        assert_eq!(activation_prob_single(0.001, 1).unwrap(), 0.001);
        assert!((activation_prob_single(0.1, 2).unwrap() - 0.01).abs() < 1e-17);
        assert!(activation_prob_single(0.0, 1).is_err());
        assert!(activation_prob_single(1.0, 1).is_err());
        assert!(activation_prob_single(0.5, 0).is_err());
    }

    #[test]
    fn multi_layer_values() {
        let single = TargetAssignment::single(0.3, 2).unwrap();
        assert_eq!(
            activation_prob_multi(&single).unwrap(),
            activation_prob_single(0.3, 2).unwrap()
        );
        let two = TargetAssignment::new(vec![
            LayerActivation { layer: 0, neurons: 1, rate: 0.1 },
            LayerActivation { layer: 1, neurons: 2, rate: 0.2 },
        ])
        .unwrap();
        assert!((activation_prob_multi(&two).unwrap() - 0.004).abs() < 1e-15);
    }

    #[test]
    fn geometric_values() {
        let p = 0.001;
        assert!((success_prob_in_q(p, 5000).unwrap() - 0.99328).abs() < 1e-4);
        let expected = [(500, 0.3936), (1500, 0.7770), (2500, 0.9180)];
        for (q, v) in expected {
            assert!((success_prob_in_q(p, q).unwrap() - v).abs() < 1e-3, "q={q}");
        }
        assert_eq!(success_prob_in_q(0.37, 1).unwrap(), 0.37);
        assert_eq!(expected_queries(0.001).unwrap(), 1000.0);
    }

    #[test]
    fn queries_for_confidence_cases() {
        assert_eq!(queries_for_confidence(0.001, 0.99).unwrap(), 4603);
        assert_eq!(queries_for_confidence(0.001, 0.0).unwrap(), 1);
        assert_eq!(queries_for_confidence(0.5, 0.5).unwrap(), 1);
        assert_eq!(queries_for_confidence(0.5, 0.75).unwrap(), 2);
        assert!(queries_for_confidence(0.5, 1.0).is_err());
    }

    #[test]
    fn monte_carlo_cases() {
        let a = TargetAssignment::single(0.1, 3).unwrap();
        let mc = monte_carlo_activation(&a, 10_000_000, 1).unwrap();
        assert!(mc.agrees_with(0.001), "{mc:?}");
        let half = monte_carlo_activation(&TargetAssignment::single(0.5, 1).unwrap(), 1_000_000, 2).unwrap();
        assert!(half.agrees_with(0.5));
        assert!(half.ci_low < 0.5 && 0.5 < half.ci_high);
        let rare = monte_carlo_activation(&TargetAssignment::single(0.01, 6).unwrap(), 10_000, 3).unwrap();
        assert_eq!(rare.successes, 0);
        assert_eq!(
            monte_carlo_activation(&a, 5000, 9).unwrap(),
            monte_carlo_activation(&a, 5000, 9).unwrap()
        );
        assert!(monte_carlo_activation(&a, 999, 9).is_err());
    }

    #[test]
    fn multi_layer_monte_carlo() {
        let two = TargetAssignment::new(vec![
            LayerActivation { layer: 0, neurons: 1, rate: 0.1 },
            LayerActivation { layer: 1, neurons: 2, rate: 0.2 },
        ])
        .unwrap();
        let mc = monte_carlo_activation(&two, 2_000_000, 5).unwrap();
        assert!(mc.agrees_with(activation_prob_multi(&two).unwrap()));
    }

    #[test]
    fn strict_monotonicity_on_grid() {
        for r in [0.05, 0.1, 0.3, 0.5, 0.9] {
            for n in 1..8 {
                assert!(activation_prob_single(r, n + 1).unwrap() < activation_prob_single(r, n).unwrap());
            }
        }
        for n in 1..6 {
            let rs = [0.01, 0.1, 0.3, 0.5, 0.9];
            for w in rs.windows(2) {
                assert!(activation_prob_single(w[0], n).unwrap() < activation_prob_single(w[1], n).unwrap());
            }
        }
    }

    proptest! {
        #[test]
        fn product_is_permutation_invariant(layers in proptest::collection::vec((1usize..4, 0.05f64..0.95), 1..5), rot in 0usize..5) {
            let ls: Vec<LayerActivation> = layers.iter().enumerate().map(|(i, &(n, r))| LayerActivation { layer: i, neurons: n, rate: r }).collect();
            let mut perm = ls.clone();
            let k = rot % perm.len();
            perm.rotate_left(k);
            let a = activation_prob_multi(&TargetAssignment::new(ls).unwrap()).unwrap();
            let b = activation_prob_multi(&TargetAssignment::new(perm).unwrap()).unwrap();
            prop_assert!((a - b).abs() <= 1e-15 * a.max(1e-300));
        }

        #[test]
        fn success_prob_monotone_and_bounded(p in 1e-4f64..0.99, q in 1u64..10_000) {
            let s = success_prob_in_q(p, q).unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert!(success_prob_in_q(p, q + 1).unwrap() >= s);
            prop_assert!(success_prob_in_q((p * 1.01).min(0.999), q).unwrap() >= s);
        }
    }
}
