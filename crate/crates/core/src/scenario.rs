//! Random realizations of available solar power and nodal loads.
//!
//! Every draw is addressed by `(seed, stream)`: the generator is a ChaCha
//! stream cipher keyed by the seed with the stream index selecting an
//! independent keystream, so sample `k` of a run is reproducible without
//! replaying samples `0..k` and workers can draw disjoint streams.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feeder::FeederModel;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario parameter {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("empirical scenario set is empty")]
    Empty,
}

/// One realization: available solar per PV unit and loads per bus `1..=N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub solar_avail: Vec<f64>,
    pub p_load: Vec<f64>,
    pub q_load: Vec<f64>,
}

/// User-facing distribution parameters, independent of any particular feeder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioParams {
    pub load_std_factor: f64,
    pub solar_low_factor: f64,
    pub solar_high_factor: f64,
    /// Multiplies nominal load means (and thereby their standard deviations).
    pub load_scale: f64,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        Self {
            load_std_factor: 0.2,
            solar_low_factor: 0.5,
            solar_high_factor: 1.0,
            load_scale: 1.0,
        }
    }
}

/// Distribution of `ξ` bound to a feeder's nominal data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub p_load_mean: Vec<f64>,
    pub q_load_mean: Vec<f64>,
    pub solar_rating: Vec<f64>,
    pub load_std_factor: f64,
    pub solar_low_factor: f64,
    pub solar_high_factor: f64,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn new(
        model: &FeederModel,
        params: &ScenarioParams,
        seed: u64,
    ) -> Result<Self, ScenarioError> {
        if !(params.load_scale.is_finite() && params.load_scale >= 0.0) {
            return Err(ScenarioError::Invalid {
                field: "load_scale",
                reason: format!("must be nonnegative, got {}", params.load_scale),
            });
        }
        let spec = Self {
            p_load_mean: model.p_load.iter().map(|p| p * params.load_scale).collect(),
            q_load_mean: model.q_load.iter().map(|q| q * params.load_scale).collect(),
            solar_rating: model.pv_units.iter().map(|u| u.rating).collect(),
            load_std_factor: params.load_std_factor,
            solar_low_factor: params.solar_low_factor,
            solar_high_factor: params.solar_high_factor,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let (lo, hi) = (self.solar_low_factor, self.solar_high_factor);
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(ScenarioError::Invalid {
                field: "solar factors",
                reason: format!("need 0 <= low ({lo}) <= high ({hi}) <= 1"),
            });
        }
        if !(self.load_std_factor.is_finite() && self.load_std_factor >= 0.0) {
            return Err(ScenarioError::Invalid {
                field: "load_std_factor",
                reason: format!("must be nonnegative, got {}", self.load_std_factor),
            });
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

/// Generator positioned at the start of stream `stream` for `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws sample number `stream` and reports how many loads were truncated at zero.
pub fn sample_counting(spec: &ScenarioSpec, stream: u64) -> (Scenario, usize) {
    let mut rng = stream_rng(spec.seed, stream);
    let mut truncated = 0;
    let mut draw_load = |mean: f64, rng: &mut ChaCha8Rng| {
        let z: f64 = rng.sample(StandardNormal);
        let raw = mean + spec.load_std_factor * mean.abs() * z;
        if raw < 0.0 && mean >= 0.0 {
            truncated += 1;
            0.0
        } else {
            raw
        }
    };
    let p_load = spec
        .p_load_mean
        .iter()
        .map(|&m| draw_load(m, &mut rng))
        .collect();
    // Reactive loads with a negative (capacitive) nominal value are left
    // untruncated; only consuming loads are clipped at zero.
    let q_load = spec
        .q_load_mean
        .iter()
        .map(|&m| draw_load(m, &mut rng))
        .collect();
    let (lo, hi) = (spec.solar_low_factor, spec.solar_high_factor);
    let solar_avail = spec
        .solar_rating
        .iter()
        .map(|&rating| {
            let u: f64 = rng.gen();
            (lo + (hi - lo) * u) * rating
        })
        .collect();
    (
        Scenario {
            solar_avail,
            p_load,
            q_load,
        },
        truncated,
    )
}

pub fn sample(spec: &ScenarioSpec, stream: u64) -> Scenario {
    sample_counting(spec, stream).0
}

/// Loads at their nominal means, solar at the mean of its uniform range.
pub fn expected_scenario(spec: &ScenarioSpec) -> Scenario {
    let mid = 0.5 * (spec.solar_low_factor + spec.solar_high_factor);
    Scenario {
        solar_avail: spec.solar_rating.iter().map(|r| r * mid).collect(),
        p_load: spec.p_load_mean.clone(),
        q_load: spec.q_load_mean.clone(),
    }
}

/// Source of the realization used at iteration `k`.
pub trait ScenarioSource: Sync {
    fn draw(&self, k: u64) -> Scenario;
    /// Mean realization, used for initialization and baselines.
    fn mean(&self) -> Scenario;
}

impl ScenarioSource for ScenarioSpec {
    fn draw(&self, k: u64) -> Scenario {
        sample(self, k)
    }

    fn mean(&self) -> Scenario {
        expected_scenario(self)
    }
}

/// Uniform sampling (with replacement) from a fixed list of scenarios.
#[derive(Debug, Clone)]
pub struct EmpiricalSource {
    pub scenarios: Vec<Scenario>,
    pub seed: u64,
}

impl EmpiricalSource {
    pub fn new(scenarios: Vec<Scenario>, seed: u64) -> Result<Self, ScenarioError> {
        if scenarios.is_empty() {
            return Err(ScenarioError::Empty);
        }
        Ok(Self { scenarios, seed })
    }
}

impl ScenarioSource for EmpiricalSource {
    fn draw(&self, k: u64) -> Scenario {
        let idx = stream_rng(self.seed, k).gen_range(0..self.scenarios.len());
        self.scenarios[idx].clone()
    }

    fn mean(&self) -> Scenario {
        let k = self.scenarios.len() as f64;
        let avg = |get: fn(&Scenario) -> &Vec<f64>| -> Vec<f64> {
            let mut out = vec![0.0; get(&self.scenarios[0]).len()];
            for s in &self.scenarios {
                for (o, v) in out.iter_mut().zip(get(s)) {
                    *o += v / k;
                }
            }
            out
        };
        Scenario {
            solar_avail: avg(|s| &s.solar_avail),
            p_load: avg(|s| &s.p_load),
            q_load: avg(|s| &s.q_load),
        }
    }
}

/// Walks a fixed list in order, wrapping around; draw `k` is `scenarios[k mod K]`.
#[derive(Debug, Clone)]
pub struct SequentialSource(pub EmpiricalSource);

impl ScenarioSource for SequentialSource {
    fn draw(&self, k: u64) -> Scenario {
        let list = &self.0.scenarios;
        list[(k % list.len() as u64) as usize].clone()
    }

    fn mean(&self) -> Scenario {
        self.0.mean()
    }
}

/// Always returns the same realization.
#[derive(Debug, Clone)]
pub struct FixedSource(pub Scenario);

impl ScenarioSource for FixedSource {
    fn draw(&self, _k: u64) -> Scenario {
        self.0.clone()
    }

    fn mean(&self) -> Scenario {
        self.0.clone()
    }
}

/// CSV header matching [`csv_row`].
pub fn csv_header(spec: &ScenarioSpec) -> Vec<String> {
    let mut h = vec!["sample".to_string()];
    h.extend((1..=spec.p_load_mean.len()).map(|n| format!("p_load_{n}")));
    h.extend((1..=spec.q_load_mean.len()).map(|n| format!("q_load_{n}")));
    h.extend((1..=spec.solar_rating.len()).map(|u| format!("solar_{u}")));
    h
}

pub fn csv_row(index: u64, s: &Scenario) -> Vec<String> {
    let mut row = vec![index.to_string()];
    row.extend(
        s.p_load
            .iter()
            .chain(&s.q_load)
            .chain(&s.solar_avail)
            .map(|v| format!("{v}")),
    );
    row
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ScenarioSpec {
        ScenarioSpec {
            p_load_mean: vec![1.0, 2.0, 0.5],
            q_load_mean: vec![0.4, 0.9, -0.1],
            solar_rating: vec![5.0, 3.0],
            load_std_factor: 0.2,
            solar_low_factor: 0.5,
            solar_high_factor: 1.0,
            seed: 7,
        }
    }

    #[test]
    fn zero_std_gives_nominal_loads() {
        let s = ScenarioSpec {
            load_std_factor: 0.0,
            ..spec()
        };
        let x = sample(&s, 3);
        assert_eq!(x.p_load, s.p_load_mean);
        assert_eq!(x.q_load, s.q_load_mean);
    }

    #[test]
    fn degenerate_solar_range_gives_rating() {
        let s = ScenarioSpec {
            solar_low_factor: 1.0,
            solar_high_factor: 1.0,
            ..spec()
        };
        assert_eq!(sample(&s, 11).solar_avail, vec![5.0, 3.0]);
    }

    #[test]
    fn same_stream_same_sample() {
        let s = spec();
        assert_eq!(sample(&s, 42), sample(&s, 42));
        assert_ne!(sample(&s, 42), sample(&s, 43));
        assert_ne!(sample(&s, 42), sample(&s.with_seed(8), 42));
    }

    #[test]
    fn expected_scenario_values() {
        let e = expected_scenario(&spec());
        assert_eq!(e.solar_avail, vec![3.75, 2.25]);
        assert_eq!(e.p_load, vec![1.0, 2.0, 0.5]);
        let wide = ScenarioSpec {
            load_std_factor: 0.5,
            ..spec()
        };
        assert_eq!(expected_scenario(&wide), e);
    }

    #[test]
    fn invalid_factors_rejected() {
        let mut s = spec();
        s.solar_low_factor = 0.9;
        s.solar_high_factor = 0.8;
        assert!(s.validate().is_err());
        s.solar_low_factor = 0.1;
        s.load_std_factor = -1.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn sample_statistics() {
        let s = spec();
        let n = 10_000;
        let mut sum = [0.0; 3];
        let mut solar = 0.0;
        let mut truncated = 0;
        for k in 0..n {
            let (x, t) = sample_counting(&s, k);
            truncated += t;
            for (acc, v) in sum.iter_mut().zip(&x.p_load) {
                *acc += v;
            }
            let r = x.solar_avail[0] / 5.0;
            assert!((0.5..=1.0).contains(&r));
            solar += x.solar_avail[0];
        }
        for (i, mean) in s.p_load_mean.iter().enumerate() {
            let se = 0.2 * mean / (n as f64).sqrt();
            assert!((sum[i] / n as f64 - mean).abs() < 3.0 * se, "bus {i}");
        }
        let solar_se = 5.0 * 0.5 / 12f64.sqrt() / (n as f64).sqrt();
        assert!((solar / n as f64 - 3.75).abs() < 3.0 * solar_se);
        // negative loads at σ = 0.2μ are 5σ events
        assert_eq!(truncated, 0);
    }

    #[test]
    fn empirical_source_draws_members() {
        let list: Vec<_> = (0..5).map(|k| sample(&spec(), k)).collect();
        let src = EmpiricalSource::new(list.clone(), 1).unwrap();
        let mut hit = [false; 5];
        for k in 0..200 {
            let d = src.draw(k);
            let i = list.iter().position(|s| *s == d).unwrap();
            hit[i] = true;
        }
        assert!(hit.iter().all(|h| *h));
        assert!(EmpiricalSource::new(vec![], 1).is_err());
    }
}
