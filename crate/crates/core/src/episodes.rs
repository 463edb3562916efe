//! Meta-task construction.
//!
//! Task sampling (TS) holds one source domain out as meta-test. Mixed task
//! sampling (MTS) builds the meta-test set as a mixture of all source
//! domains: the held-out domain contributes a share `r_ho` drawn from a
//! schedule and the remaining `1 − r_ho` is split over the other domains by
//! a flat Dirichlet draw.
//!
//! Both samplers consume the random stream in the same order (held-out
//! choice, `r_ho`, meta-train batches, then the mixture), and MTS skips the
//! Dirichlet draw when no mass is left, so MTS with a fixed `r_ho = 1` is
//! draw-for-draw identical to TS.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::data::{sample_indices, Batch, DomainDataset, LabeledSample, RngState};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixMode {
    Fixed,
    UniformRange,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixRatioSchedule {
    pub mode: MixMode,
    pub r_ho: f64,
    pub r_ho_lo: f64,
    pub r_ho_hi: f64,
}

impl Default for MixRatioSchedule {
    fn default() -> Self {
        MixRatioSchedule::uniform(0.0, 1.0)
    }
}

impl MixRatioSchedule {
    pub fn fixed(r_ho: f64) -> Self {
        MixRatioSchedule {
            mode: MixMode::Fixed,
            r_ho,
            r_ho_lo: 0.0,
            r_ho_hi: 1.0,
        }
    }

    pub fn uniform(lo: f64, hi: f64) -> Self {
        MixRatioSchedule {
            mode: MixMode::UniformRange,
            r_ho: 1.0,
            r_ho_lo: lo,
            r_ho_hi: hi,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.mode {
            MixMode::Fixed => (0.0..=1.0).contains(&self.r_ho),
            MixMode::UniformRange => {
                0.0 <= self.r_ho_lo && self.r_ho_lo <= self.r_ho_hi && self.r_ho_hi <= 1.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid mixing schedule {self:?}"
            )))
        }
    }

    pub fn draw(&self, rng: &mut RngState) -> f64 {
        match self.mode {
            MixMode::Fixed => self.r_ho,
            MixMode::UniformRange => rng.random_range(self.r_ho_lo..=self.r_ho_hi),
        }
    }

    /// Short label, e.g. `fixed1` or `range0-0.5`.
    pub fn label(&self) -> String {
        match self.mode {
            MixMode::Fixed => format!("fixed{}", self.r_ho),
            MixMode::UniformRange => format!("range{}-{}", self.r_ho_lo, self.r_ho_hi),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaTrainBatch {
    pub domain_id: usize,
    pub samples: Vec<LabeledSample>,
    /// Indices into the source dataset.
    pub indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaTask {
    pub meta_train: Vec<MetaTrainBatch>,
    pub meta_test: Vec<LabeledSample>,
    /// `(domain position, sample index)` of every meta-test sample.
    pub meta_test_indices: Vec<(usize, usize)>,
    pub held_out_id: usize,
    /// Position of the held-out domain within the source list.
    pub held_out_pos: usize,
    /// Mixing ratio of each source domain, in source order.
    pub ratios: Vec<f64>,
    pub counts: Vec<usize>,
}

impl MetaTask {
    pub fn r_ho(&self) -> f64 {
        self.ratios[self.held_out_pos]
    }

    pub fn meta_test_batch(&self) -> Batch {
        Batch::from_samples(&self.meta_test)
    }

    pub fn meta_train_batches(&self) -> Vec<Batch> {
        self.meta_train
            .iter()
            .map(|b| Batch::from_samples(&b.samples))
            .collect()
    }
}

/// Largest-remainder apportionment of `total` by `ratios`; ties go to the
/// lower index.
pub fn apportion_counts(ratios: &[f64], total: usize) -> Result<Vec<usize>> {
    if ratios.is_empty() {
        return Err(Error::InvalidArgument("no ratios".into()));
    }
    if let Some(r) = ratios.iter().find(|r| !(**r >= 0.0) || !r.is_finite()) {
        return Err(Error::InvalidArgument(format!("negative ratio {r}")));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "ratios sum to {sum}, expected 1"
        )));
    }
    let exact: Vec<f64> = ratios.iter().map(|r| r * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut remaining = total.saturating_sub(assigned);
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    // Stable sort keeps lower indices first among equal remainders.
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra)
    });
    for &k in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        counts[k] += 1;
        remaining -= 1;
    }
    Ok(counts)
}

fn check_sources(domains: &[DomainDataset]) -> Result<()> {
    if domains.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "{} source domain(s): domain shift cannot be simulated",
            domains.len()
        )));
    }
    Ok(())
}

fn draw_meta_train(
    domains: &[DomainDataset],
    held_out_pos: usize,
    batch_train: usize,
    rng: &mut RngState,
) -> Result<Vec<MetaTrainBatch>> {
    domains
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != held_out_pos)
        .map(|(_, d)| {
            let indices = sample_indices(d, batch_train, true, rng)?;
            Ok(MetaTrainBatch {
                domain_id: d.domain_id,
                samples: d.subset(&indices),
                indices,
            })
        })
        .collect()
}

/// Standard task sampling: one held-out domain supplies the whole meta-test set.
pub fn sample_task_ts(
    domains: &[DomainDataset],
    batch_train: usize,
    batch_test: usize,
    rng: &mut RngState,
) -> Result<MetaTask> {
    sample_task_mts(
        domains,
        &MixRatioSchedule::fixed(1.0),
        batch_train,
        batch_test,
        rng,
    )
}

/// Mixed task sampling.
pub fn sample_task_mts(
    domains: &[DomainDataset],
    schedule: &MixRatioSchedule,
    batch_train: usize,
    n_te: usize,
    rng: &mut RngState,
) -> Result<MetaTask> {
    check_sources(domains)?;
    schedule.validate()?;
    let k = domains.len();
    let held_out_pos = rng.random_range(0..k);
    let r_ho = schedule.draw(rng);
    let meta_train = draw_meta_train(domains, held_out_pos, batch_train, rng)?;

    let mut ratios = vec![0.0; k];
    ratios[held_out_pos] = r_ho;
    let rest = 1.0 - r_ho;
    if rest > 0.0 {
        let draws: Vec<f64> = (0..k - 1).map(|_| Exp1.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        let others = (0..k).filter(|&i| i != held_out_pos);
        for (i, g) in others.zip(&draws) {
            ratios[i] = rest * g / total;
        }
    }
    let counts = apportion_counts(&ratios, n_te)?;

    let mut meta_test = Vec::with_capacity(n_te);
    let mut meta_test_indices = Vec::with_capacity(n_te);
    for (pos, (d, &n)) in domains.iter().zip(&counts).enumerate() {
        if n == 0 {
            continue;
        }
        // Slices too small to cover every class are drawn uniformly; the
        // largest slice always has at least n_te/K samples.
        let balanced = n >= d.num_classes;
        let ix = sample_indices(d, n, balanced, rng)?;
        meta_test.extend(d.subset(&ix));
        meta_test_indices.extend(ix.into_iter().map(|i| (pos, i)));
    }

    Ok(MetaTask {
        meta_train,
        meta_test,
        meta_test_indices,
        held_out_id: domains[held_out_pos].domain_id,
        held_out_pos,
        ratios,
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_domains, rng_from_seed, SyntheticFamily};

    fn domains(k: usize) -> Vec<DomainDataset> {
        let params: Vec<f64> = (0..k).map(|i| 20.0 * i as f64).collect();
        generate_synthetic_domains(SyntheticFamily::RotatedTwoMoons, k, 100, &params, 3).unwrap()
    }

    #[test]
    fn apportion_examples() {
        assert_eq!(
            apportion_counts(&[1.0, 0.0, 0.0], 60).unwrap(),
            vec![60, 0, 0]
        );
        let third = 1.0 / 3.0;
        assert_eq!(
            apportion_counts(&[third, third, third], 10).unwrap(),
            vec![4, 3, 3]
        );
        assert_eq!(
            apportion_counts(&[0.5, 0.25, 0.25], 60).unwrap(),
            vec![30, 15, 15]
        );
        assert!(apportion_counts(&[1.5, -0.5], 10).is_err());
        assert!(apportion_counts(&[0.5, 0.4], 10).is_err());
    }

    #[test]
    fn ts_task_shape() {
        let ds = domains(3);
        let mut rng = rng_from_seed(1);
        let t = sample_task_ts(&ds, 10, 12, &mut rng).unwrap();
        assert_eq!(t.meta_train.len(), 2);
        assert_eq!(t.ratios.iter().filter(|&&r| r == 1.0).count(), 1);
        assert_eq!(t.ratios.iter().filter(|&&r| r == 0.0).count(), 2);
        assert!(t.meta_test.iter().all(|s| s.domain_id == t.held_out_id));
        assert!(t.meta_train.iter().all(|b| b.domain_id != t.held_out_id));
    }

    #[test]
    fn single_domain_cannot_simulate_shift() {
        let ds = domains(2);
        let mut rng = rng_from_seed(1);
        assert!(sample_task_ts(&ds[..1], 10, 10, &mut rng).is_err());
    }

    #[test]
    fn zero_held_out_share_excludes_held_out_domain() {
        let ds = domains(4);
        let mut rng = rng_from_seed(9);
        for _ in 0..50 {
            let t = sample_task_mts(&ds, &MixRatioSchedule::fixed(0.0), 8, 40, &mut rng).unwrap();
            assert!(t.meta_test.iter().all(|s| s.domain_id != t.held_out_id));
            assert_eq!(t.meta_test.len(), 40);
        }
    }

    #[test]
    fn bad_schedule_is_rejected() {
        let ds = domains(3);
        let mut rng = rng_from_seed(1);
        let s = MixRatioSchedule::uniform(0.8, 0.2);
        assert!(sample_task_mts(&ds, &s, 8, 30, &mut rng).is_err());
        assert!(MixRatioSchedule::fixed(1.5).validate().is_err());
    }

    #[test]
    fn oversized_request_is_an_error() {
        let ds = domains(3);
        let mut rng = rng_from_seed(1);
        assert!(sample_task_mts(&ds, &MixRatioSchedule::default(), 500, 30, &mut rng).is_err());
    }
}
