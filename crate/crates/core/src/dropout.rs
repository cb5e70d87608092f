//! Mask generation: standard Bernoulli dropout, crafted target-neuron masks, and the seeded
//! streams that make prediction-time dropout replayable.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::network::ModelSpec;

/// A seeded, position-tracked stream of uniform draws.
///
/// The sequence is a pure function of `(master_seed, stream_id)`: ChaCha8 keyed by the master
/// seed, with the stream id selecting the ChaCha stream. `draws` counts consumed `f64` draws and
/// is enough to rebuild the stream at the same position.
#[derive(Debug, Clone)]
pub struct RngStream {
    master_seed: u64,
    stream_id: u64,
    draws: u64,
    rng: ChaCha8Rng,
}

/// Serializable position of an [`RngStream`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamState {
    pub master_seed: u64,
    pub stream_id: u64,
    pub draws: u64,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
        rng.set_stream(stream_id);
        Self {
            master_seed,
            stream_id,
            draws: 0,
            rng,
        }
    }

    /// Rebuilds a stream positioned after `state.draws` draws.
    pub fn restore(state: StreamState) -> Self {
        let mut s = Self::new(state.master_seed, state.stream_id);
        // each draw consumes one u64, i.e. two 32-bit ChaCha words
        s.rng.set_word_pos(u128::from(state.draws) * 2);
        s.draws = state.draws;
        s
    }

    pub fn state(&self) -> StreamState {
        StreamState {
            master_seed: self.master_seed,
            stream_id: self.stream_id,
            draws: self.draws,
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn draws(&self) -> u64 {
        self.draws
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn next_uniform(&mut self) -> f64 {
        self.draws += 1;
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Underlying generator, for consumers that need `rand` distributions (shuffles, init).
    /// Draws taken this way are not counted.
    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Keep/drop pattern for one layer, with the factor applied to kept units.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    keep: Vec<bool>,
    scale: f64,
}

impl Mask {
    pub fn new(keep: Vec<bool>, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(contract(format!("mask scale must be positive, got {scale}")));
        }
        Ok(Self { keep, scale })
    }

    pub fn identity(width: usize) -> Self {
        Self {
            keep: vec![true; width],
            scale: 1.0,
        }
    }

    pub fn width(&self) -> usize {
        self.keep.len()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn is_kept(&self, unit: usize) -> bool {
        self.keep[unit]
    }

    pub fn dropped_count(&self) -> usize {
        self.keep.iter().filter(|&&k| !k).count()
    }

    /// Multiplier for `unit`: `scale` when kept, 0 when dropped.
    #[inline]
    pub fn factor(&self, unit: usize) -> f64 {
        if self.keep[unit] {
            self.scale
        } else {
            0.0
        }
    }
}

/// Inverted Bernoulli dropout: every unit dropped independently with probability `rate`, kept
/// units scaled by `1/(1-rate)`. Consumes exactly `width` draws.
pub fn sample_standard_mask(width: usize, rate: f64, stream: &mut RngStream) -> Result<Mask> {
    check_rate(rate)?;
    let keep = (0..width).map(|_| stream.next_uniform() >= rate).collect();
    Ok(Mask {
        keep,
        scale: 1.0 / (1.0 - rate),
    })
}

/// Drops exactly `targets`, keeps everything else, scale 1.
pub fn craft_target_mask(width: usize, targets: &[usize]) -> Result<Mask> {
    let mut keep = vec![true; width];
    for &t in targets {
        if t >= width {
            return Err(contract(format!("target neuron {t} out of range for width {width}")));
        }
        keep[t] = false;
    }
    Ok(Mask { keep, scale: 1.0 })
}

/// True iff every target is dropped (vacuously true for no targets).
pub fn targets_dropped(mask: &Mask, targets: &[usize]) -> bool {
    targets.iter().all(|&t| !mask.keep[t])
}

pub(crate) fn check_rate(rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(contract(format!("dropout rate must lie in [0, 1), got {rate}")))
    }
}

/// Target neurons in one hidden layer. Indices are kept sorted and duplicate-free.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerTargets {
    /// Hidden-layer index (0 = first hidden layer).
    pub layer: usize,
    pub neurons: Vec<usize>,
}

impl LayerTargets {
    pub fn new(layer: usize, neurons: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut neurons: Vec<usize> = neurons.into_iter().collect();
        let n = neurons.len();
        neurons.sort_unstable();
        neurons.dedup();
        if neurons.len() != n {
            return Err(contract(format!("duplicate target neurons in layer {layer}")));
        }
        Ok(Self { layer, neurons })
    }
}

/// Per-hidden-layer dropout rates for training and prediction, plus the target assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropoutPlan {
    pub train_rates: Vec<f64>,
    pub inference_rates: Vec<f64>,
    pub targets: Vec<LayerTargets>,
}

impl DropoutPlan {
    /// Same training rate on every hidden layer; inference dropout on every hidden layer.
    pub fn uniform(
        spec: &ModelSpec,
        train_rate: f64,
        inference_rate: f64,
        targets: Vec<LayerTargets>,
    ) -> Result<Self> {
        let h = spec.hidden_count();
        let plan = Self {
            train_rates: vec![train_rate; h],
            inference_rates: vec![inference_rate; h],
            targets,
        };
        plan.validate(spec)?;
        Ok(plan)
    }

    pub fn with_inference_rate(&self, rate: f64) -> Self {
        Self {
            inference_rates: vec![rate; self.inference_rates.len()],
            ..self.clone()
        }
    }

    /// Checks rates and target indices against `spec`.
    ///
    /// A target layer with inference rate 0 is accepted so degenerate rate-0 evaluations stay
    /// expressible; use [`DropoutPlan::validate_attack`] where the backdoor must be able to fire.
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        let h = spec.hidden_count();
        if self.train_rates.len() != h || self.inference_rates.len() != h {
            return Err(contract(format!(
                "dropout plan has {}/{} rates for {h} hidden layers",
                self.train_rates.len(),
                self.inference_rates.len()
            )));
        }
        for &r in self.train_rates.iter().chain(&self.inference_rates) {
            check_rate(r)?;
        }
        let mut seen = Vec::new();
        for t in &self.targets {
            if t.layer >= h {
                return Err(contract(format!("target layer {} is not a hidden layer", t.layer)));
            }
            if seen.contains(&t.layer) {
                return Err(contract(format!("target layer {} listed twice", t.layer)));
            }
            seen.push(t.layer);
            let width = spec.hidden_width(t.layer);
            let mut sorted = t.neurons.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != t.neurons.len() {
                return Err(contract(format!("duplicate target neurons in layer {}", t.layer)));
            }
            if let Some(&bad) = t.neurons.iter().find(|&&n| n >= width) {
                return Err(contract(format!(
                    "target neuron {bad} out of range for layer {} of width {width}",
                    t.layer
                )));
            }
        }
        Ok(())
    }

    /// [`validate`](Self::validate) plus: every target layer has a positive inference rate.
    pub fn validate_attack(&self, spec: &ModelSpec) -> Result<()> {
        self.validate(spec)?;
        for t in &self.targets {
            if self.inference_rates[t.layer] <= 0.0 {
                return Err(contract(format!(
                    "target layer {} has inference rate 0; the backdoor could never fire",
                    t.layer
                )));
            }
        }
        Ok(())
    }

    pub fn targets_for(&self, layer: usize) -> Option<&[usize]> {
        self.targets
            .iter()
            .find(|t| t.layer == layer)
            .map(|t| t.neurons.as_slice())
    }

    /// Draws one prediction-time mask per dropout-enabled hidden layer, in layer order.
    /// Layers with inference rate 0 get no mask and consume no draws.
    pub fn sample_inference_masks(
        &self,
        spec: &ModelSpec,
        stream: &mut RngStream,
    ) -> Result<Vec<Option<Mask>>> {
        self.inference_rates
            .iter()
            .enumerate()
            .map(|(layer, &rate)| {
                if rate > 0.0 {
                    sample_standard_mask(spec.hidden_width(layer), rate, stream).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect()
    }

    /// See [`all_targets_dropped`].
    pub fn activated_by(&self, masks: &[Option<Mask>]) -> bool {
        all_targets_dropped(&self.targets, masks)
    }
}

/// True iff every target in every assigned layer is dropped; vacuous for no targets. A target
/// layer without a mask never drops its targets.
pub fn all_targets_dropped(targets: &[LayerTargets], masks: &[Option<Mask>]) -> bool {
    targets.iter().all(|t| {
        t.neurons.is_empty()
            || matches!(masks.get(t.layer), Some(Some(m)) if targets_dropped(m, &t.neurons))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    #[test]
    fn rate_zero_keeps_everything() {
        let mut s = RngStream::new(1, 0);
        let m = sample_standard_mask(16, 0.0, &mut s).unwrap();
        assert_eq!(m, Mask::identity(16));
        assert_eq!(s.draws(), 16);
    }

    #[test]
    fn same_stream_state_same_mask() {
        let mut a = RngStream::new(9, 4);
        let mut b = RngStream::new(9, 4);
        assert_eq!(
            sample_standard_mask(64, 0.3, &mut a).unwrap(),
            sample_standard_mask(64, 0.3, &mut b).unwrap()
        );
    }

    #[test]
    fn rejects_rate_one() {
        let mut s = RngStream::new(1, 0);
        assert!(sample_standard_mask(4, 1.0, &mut s).is_err());
        assert!(sample_standard_mask(4, -0.1, &mut s).is_err());
    }

    #[test]
    fn scale_is_inverted() {
        let mut s = RngStream::new(1, 0);
        let m = sample_standard_mask(4, 0.5, &mut s).unwrap();
        assert_eq!(m.scale(), 2.0);
    }

    #[test]
    fn drop_frequency_within_binomial_ci() {
        let mut s = RngStream::new(2024, 7);
        let n = 1_000_000usize;
        let m = sample_standard_mask(n, 0.1, &mut s).unwrap();
        let p = 0.1;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        let freq = m.dropped_count() as f64 / n as f64;
        assert!((freq - p).abs() <= 3.0 * sigma, "freq {freq}");
        assert_eq!(s.draws(), n as u64);
    }

    #[test]
    fn crafted_mask_cases() {
        let m = craft_target_mask(4, &[1]).unwrap();
        assert_eq!(m.keep(), &[true, false, true, true]);
        assert_eq!(m.scale(), 1.0);
        assert_eq!(craft_target_mask(5, &[]).unwrap(), Mask::identity(5));
        let all = craft_target_mask(3, &[0, 1, 2]).unwrap();
        assert_eq!(all.dropped_count(), 3);
        assert!(craft_target_mask(3, &[3]).is_err());
    }

    #[test]
    fn targets_dropped_cases() {
        let m = craft_target_mask(8, &[2, 5]).unwrap();
        assert!(targets_dropped(&m, &[2, 5]));
        assert!(!targets_dropped(&Mask::identity(8), &[2]));
        assert!(targets_dropped(&Mask::identity(8), &[]));
    }

    #[test]
    fn replay_from_state() {
        let mut s = RngStream::new(77, 3);
        let _ = sample_standard_mask(37, 0.2, &mut s).unwrap();
        let snapshot = s.state();
        let next: Vec<Mask> = (0..5)
            .map(|_| sample_standard_mask(20, 0.2, &mut s).unwrap())
            .collect();
        let mut r = RngStream::restore(snapshot);
        let replay: Vec<Mask> = (0..5)
            .map(|_| sample_standard_mask(20, 0.2, &mut r).unwrap())
            .collect();
        assert_eq!(next, replay);
        assert_eq!(r.draws(), s.draws());
    }

    #[test]
    fn streams_with_different_ids_are_independent() {
        // 2x2 contingency table of paired drop events at rate 0.5
        let mut a = RngStream::new(5, 1);
        let mut b = RngStream::new(5, 2);
        let n = 100_000;
        let mut table = [[0f64; 2]; 2];
        for _ in 0..n {
            let x = (a.next_uniform() < 0.5) as usize;
            let y = (b.next_uniform() < 0.5) as usize;
            table[x][y] += 1.0;
        }
        let rows = [table[0][0] + table[0][1], table[1][0] + table[1][1]];
        let cols = [table[0][0] + table[1][0], table[0][1] + table[1][1]];
        let mut chi2 = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                let e = rows[i] * cols[j] / n as f64;
                chi2 += (table[i][j] - e).powi(2) / e;
            }
        }
        let p = 1.0 - ChiSquared::new(1.0).unwrap().cdf(chi2);
        assert!(p > 0.001, "chi2 {chi2}, p {p}");
    }

    #[test]
    fn inverted_dropout_preserves_mean() {
        let x: Vec<f64> = (0..8).map(|i| 0.25 + i as f64 * 0.5).collect();
        let mut s = RngStream::new(99, 0);
        let n = 100_000;
        let mut sum = vec![0.0; x.len()];
        let mut sum_sq = vec![0.0; x.len()];
        for _ in 0..n {
            let m = sample_standard_mask(x.len(), 0.5, &mut s).unwrap();
            for (i, &xi) in x.iter().enumerate() {
                let v = xi * m.factor(i);
                sum[i] += v;
                sum_sq[i] += v * v;
            }
        }
        for i in 0..x.len() {
            let mean = sum[i] / n as f64;
            let var = sum_sq[i] / n as f64 - mean * mean;
            let se = (var / n as f64).sqrt();
            assert!((mean - x[i]).abs() <= 3.0 * se, "unit {i}: {mean} vs {}", x[i]);
        }
    }

    #[test]
    fn plan_validation() {
        let spec = ModelSpec::new(vec![4, 6, 5, 3]).unwrap();
        let t = vec![LayerTargets::new(1, [2]).unwrap()];
        let plan = DropoutPlan::uniform(&spec, 0.5, 0.001, t.clone()).unwrap();
        plan.validate_attack(&spec).unwrap();
        assert!(plan.with_inference_rate(0.0).validate_attack(&spec).is_err());
        assert!(DropoutPlan::uniform(&spec, 1.0, 0.001, t).is_err());
        let bad = vec![LayerTargets { layer: 1, neurons: vec![5] }];
        assert!(DropoutPlan::uniform(&spec, 0.5, 0.001, bad).is_err());
        let dup = vec![LayerTargets { layer: 0, neurons: vec![1, 1] }];
        assert!(DropoutPlan::uniform(&spec, 0.5, 0.001, dup).is_err());
        let out = vec![LayerTargets { layer: 2, neurons: vec![0] }];
        assert!(DropoutPlan::uniform(&spec, 0.5, 0.001, out).is_err());
        assert!(LayerTargets::new(0, [3, 3]).is_err());
    }

    #[test]
    fn inference_draws_follow_layer_order() {
        let spec = ModelSpec::new(vec![4, 6, 5, 3]).unwrap();
        let plan = DropoutPlan {
            train_rates: vec![0.5, 0.5],
            inference_rates: vec![0.0, 0.3],
            targets: vec![],
        };
        let mut s = RngStream::new(1, 1);
        let masks = plan.sample_inference_masks(&spec, &mut s).unwrap();
        assert!(masks[0].is_none());
        assert_eq!(masks[1].as_ref().unwrap().width(), 5);
        assert_eq!(s.draws(), 5);
    }

    proptest! {
        #[test]
        fn targets_dropped_matches_loop(keep in proptest::collection::vec(any::<bool>(), 1..40), picks in proptest::collection::vec(any::<prop::sample::Index>(), 0..6)) {
            let mask = Mask::new(keep.clone(), 1.0).unwrap();
            let mut targets: Vec<usize> = picks.iter().map(|i| i.index(keep.len())).collect();
            targets.sort_unstable();
            targets.dedup();
            let mut oracle = true;
            for &t in &targets {
                if keep[t] {
                    oracle = false;
                }
            }
            prop_assert_eq!(targets_dropped(&mask, &targets), oracle);
        }
    }
}
