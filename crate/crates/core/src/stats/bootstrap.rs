use rand::{seq::index, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{MeanStd, StatsError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapSpec {
    pub replicates: usize,
    pub sampling_ratio: f64,
    pub with_replacement: bool,
    pub seed: u64,
}

impl Default for BootstrapSpec {
    /// Five replicates, with replacement, unit sampling ratio.
    fn default() -> Self {
        Self {
            replicates: 5,
            sampling_ratio: 1.0,
            with_replacement: true,
            seed: 0,
        }
    }
}

impl BootstrapSpec {
    pub fn validate(&self) -> Result<(), StatsError> {
        if self.replicates < 1 {
            return Err(StatsError::InvalidSpec("replicates must be >= 1".into()));
        }
        if !(self.sampling_ratio > 0.0 && self.sampling_ratio.is_finite()) {
            return Err(StatsError::InvalidSpec("sampling_ratio must be > 0".into()));
        }
        if !self.with_replacement && self.sampling_ratio > 1.0 {
            return Err(StatsError::InvalidSpec(
                "sampling without replacement needs sampling_ratio <= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn sample_size(&self, n: usize) -> usize {
        ((self.sampling_ratio * n as f64).ceil() as usize).max(1)
    }
}

/// Index multisets for every replicate, drawn from one seeded stream. Each
/// replicate is sorted, so sums over it do not depend on draw order.
pub fn bootstrap_indices(n: usize, spec: &BootstrapSpec) -> Result<Vec<Vec<usize>>, StatsError> {
    spec.validate()?;
    if n == 0 {
        return Err(StatsError::EmptySample);
    }
    let size = spec.sample_size(n);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok((0..spec.replicates)
        .map(|_| {
            let mut idx: Vec<usize> = if spec.with_replacement {
                (0..size).map(|_| rng.random_range(0..n)).collect()
            } else {
                index::sample(&mut rng, n, size).into_vec()
            };
            idx.sort_unstable();
            idx
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapOutcome {
    pub replicates: Vec<f64>,
    pub summary: MeanStd,
}

/// Run `statistic` on every replicate's index multiset.
///
/// Recomputation of anything downstream (CAVs, scores) is up to the closure.
pub fn bootstrap<F, E>(
    n: usize,
    spec: &BootstrapSpec,
    mut statistic: F,
) -> Result<BootstrapOutcome, E>
where
    F: FnMut(usize, &[usize]) -> Result<f64, E>,
    E: From<StatsError>,
{
    let draws = bootstrap_indices(n, spec)?;
    let replicates = draws
        .iter()
        .enumerate()
        .map(|(r, idx)| statistic(r, idx))
        .collect::<Result<Vec<_>, E>>()?;
    let summary = MeanStd::of(&replicates).expect("at least one replicate");
    Ok(BootstrapOutcome {
        replicates,
        summary,
    })
}
