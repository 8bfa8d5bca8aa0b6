//! Sample-quality and diagnostic metrics: energy distance, mode coverage,
//! and attention-entropy profiles over sampling traces.

use crate::error::{CoreError, Result};
use crate::guidance::GuidanceTrace;
use crate::tensor::{Rng, Tensor};

/// Point count beyond which all-pairs terms are subsampled.
const SUBSAMPLE_LIMIT: usize = 10_000;
/// Fixed seed for the subsample draw, so large-set results are reproducible.
const SUBSAMPLE_SEED: u64 = 0x5eed_D157;

/// Summary metrics of one sampling run.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub energy_distance: f64,
    pub mode_coverage: f64,
    pub mean_plan_entropy: f64,
    /// Present when the report comes from a guidance-scale sweep.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_scale: Vec<crate::guidance::SweepRow>,
}

fn kahan_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let y = v - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    sum
}

fn row(t: &Tensor, i: usize) -> &[f64] {
    let d = t.cols();
    &t.data[i * d..(i + 1) * d]
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mean pairwise distance E||A - B|| over the (sub)sampled index sets.
fn mean_cross(a: &Tensor, ia: &[usize], b: &Tensor, ib: &[usize]) -> f64 {
    let total = kahan_sum(
        ia.iter()
            .flat_map(|&i| ib.iter().map(move |&j| (i, j)))
            .map(|(i, j)| dist(row(a, i), row(b, j))),
    );
    total / (ia.len() * ib.len()) as f64
}

/// Mean within-set distance E||A - A'|| over all n^2 ordered pairs (the
/// V-statistic form, so identical multisets score exactly zero).
fn mean_within(a: &Tensor, ia: &[usize]) -> f64 {
    let n = ia.len();
    if n < 2 {
        return 0.0;
    }
    let total = kahan_sum(
        (0..n)
            .flat_map(|p| (p + 1..n).map(move |q| (p, q)))
            .map(|(p, q)| dist(row(a, ia[p]), row(a, ia[q]))),
    );
    // each unordered pair appears twice among the ordered pairs;
    // the diagonal contributes zero
    2.0 * total / (n * n) as f64
}

fn subsample_indices(n: usize, rng: &mut Rng) -> Vec<usize> {
    if n <= SUBSAMPLE_LIMIT {
        (0..n).collect()
    } else {
        (0..SUBSAMPLE_LIMIT).map(|_| rng.below(n)).collect()
    }
}

/// Energy distance 2 E||A-B|| - E||A-A'|| - E||B-B'|| between two point
/// clouds of matching dimensionality. Sets beyond 10^4 points are
/// subsampled with a fixed seed.
pub fn energy_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(CoreError::Dimension(format!(
            "energy_distance dims {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    if a.rows() == 0 || b.rows() == 0 {
        return Err(CoreError::InvalidInput("empty sample set".into()));
    }
    let mut rng = Rng::new(SUBSAMPLE_SEED);
    let ia = subsample_indices(a.rows(), &mut rng);
    let ib = subsample_indices(b.rows(), &mut rng);
    Ok(2.0 * mean_cross(a, &ia, b, &ib) - mean_within(a, &ia) - mean_within(b, &ib))
}

/// Fraction of `centers` having at least one sample within `radius`.
pub fn mode_coverage(samples: &Tensor, centers: &[[f64; 2]], radius: f64) -> Result<f64> {
    if centers.is_empty() {
        return Err(CoreError::InvalidInput("no mode centers".into()));
    }
    if radius <= 0.0 {
        return Err(CoreError::InvalidInput(format!("radius {radius}")));
    }
    if samples.cols() != 2 {
        return Err(CoreError::Dimension(format!(
            "mode_coverage expects 2-D points, got {}",
            samples.cols()
        )));
    }
    let covered = centers
        .iter()
        .filter(|c| (0..samples.rows()).any(|i| dist(row(samples, i), &c[..]) <= radius))
        .count();
    Ok(covered as f64 / centers.len() as f64)
}

/// Mean perturbed-layer row entropy per sampling step, averaged over chains.
/// Errors when the trace carries no entropy records.
pub fn entropy_profile(trace: &GuidanceTrace) -> Result<Vec<f64>> {
    if trace.records.iter().all(|r| r.mean_row_entropy.is_none()) {
        return Err(CoreError::InvalidInput(
            "trace has no attention-entropy records".into(),
        ));
    }
    let mut sums = vec![0.0; trace.steps];
    let mut counts = vec![0usize; trace.steps];
    for r in &trace.records {
        if let Some(h) = r.mean_row_entropy {
            sums[r.step] += h;
            counts[r.step] += 1;
        }
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { f64::NAN })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::StepRecord;

    fn cloud(points: &[[f64; 2]]) -> Tensor {
        Tensor::new(
            vec![points.len(), 2],
            points.iter().flat_map(|p| p.iter().copied()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identical_multisets_have_zero_distance() {
        let a = cloud(&[[0.0, 0.0], [1.0, 2.0], [1.0, 2.0], [-3.0, 0.5]]);
        assert!(energy_distance(&a, &a).unwrap().abs() < 1e-12);
    }

    #[test]
    fn distance_is_symmetric_and_nonnegative() {
        let mut rng = Rng::new(21);
        let a = rng.gaussian(vec![200, 2]);
        let b = rng.gaussian(vec![150, 2]).scale(1.3);
        let ab = energy_distance(&a, &b).unwrap();
        let ba = energy_distance(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab >= 0.0);
    }

    #[test]
    fn same_distribution_baseline_is_small() {
        let a = Rng::new(22).gaussian(vec![10_000, 2]);
        let b = Rng::new(23).gaussian(vec![10_000, 2]);
        let d = energy_distance(&a, &b).unwrap();
        assert!(d.abs() <= 0.01, "same-distribution distance {d}");
    }

    #[test]
    fn shifted_gaussian_matches_monte_carlo_oracle() {
        // independent oracle: recompute the three expectations directly from
        // fresh high-sample draws with plain pairwise loops
        let mut rng = Rng::new(24);
        let n = 4000;
        let a = rng.gaussian(vec![n, 2]);
        let mut b = rng.gaussian(vec![n, 2]);
        for i in 0..n {
            b.data[2 * i] += 3.0;
        }
        let d = energy_distance(&a, &b).unwrap();

        let mut cross = 0.0;
        let mut within_a = 0.0;
        let mut within_b = 0.0;
        for i in 0..n {
            for j in 0..n {
                cross += dist(row(&a, i), row(&b, j));
                if i != j {
                    within_a += dist(row(&a, i), row(&a, j));
                    within_b += dist(row(&b, i), row(&b, j));
                }
            }
        }
        let oracle = 2.0 * cross / (n * n) as f64
            - within_a / (n * (n - 1)) as f64
            - within_b / (n * (n - 1)) as f64;
        let rel = (d - oracle).abs() / oracle;
        assert!(rel < 0.05, "distance {d} vs oracle {oracle}");
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let a = Tensor::zeros(vec![3, 2]);
        let b = Tensor::zeros(vec![3, 3]);
        assert!(energy_distance(&a, &b).is_err());
        assert!(energy_distance(&a, &Tensor::zeros(vec![0, 2])).is_err());
    }

    #[test]
    fn coverage_trivial_cases() {
        let centers: Vec<[f64; 2]> = vec![[0.0, 0.0], [4.0, 0.0], [0.0, 4.0]];
        let exact = cloud(&[[0.0, 0.0], [4.0, 0.0], [0.0, 4.0]]);
        assert_eq!(mode_coverage(&exact, &centers, 0.5).unwrap(), 1.0);
        let far = cloud(&[[100.0, 100.0]]);
        assert_eq!(mode_coverage(&far, &centers, 0.5).unwrap(), 0.0);
        assert!(mode_coverage(&exact, &[], 0.5).is_err());
        assert!(mode_coverage(&exact, &centers, 0.0).is_err());
    }

    #[test]
    fn coverage_monotone_in_radius() {
        let mut rng = Rng::new(25);
        let samples = rng.gaussian(vec![50, 2]).scale(2.0);
        let centers: Vec<[f64; 2]> = (0..6)
            .map(|k| {
                let th = std::f64::consts::TAU * k as f64 / 6.0;
                [3.0 * th.cos(), 3.0 * th.sin()]
            })
            .collect();
        let mut prev = 0.0;
        for r in [0.1, 0.5, 1.0, 2.0, 5.0, 20.0] {
            let c = mode_coverage(&samples, &centers, r).unwrap();
            assert!(c >= prev);
            prev = c;
        }
        assert_eq!(prev, 1.0);
    }

    #[test]
    fn ring_mixture_sampler_covers_all_modes() {
        use crate::data::{gauss8_centers, sample_dataset, Dataset, GAUSS8_SIGMA};
        let mut rng = Rng::new(26);
        // 1000 points: 63 single-point examples per draw would skew classes,
        // so draw 250 examples of 4 tokens each
        let examples = sample_dataset(Dataset::Gauss8, 250, 4, &mut rng);
        let points = crate::data::flatten_points(&examples);
        let cov = mode_coverage(&points, &gauss8_centers(), 3.0 * GAUSS8_SIGMA).unwrap();
        assert_eq!(cov, 1.0);
    }

    fn record(step: usize, h: Option<f64>) -> StepRecord {
        StepRecord {
            chain: 0,
            step,
            t: step + 1,
            delta_norm: 0.0,
            mean_row_entropy: h,
            sinkhorn_iterations: None,
            sinkhorn_residual: None,
            converged: true,
        }
    }

    #[test]
    fn entropy_profile_averages_per_step() {
        let trace = GuidanceTrace {
            chains: 2,
            steps: 2,
            records: vec![
                record(0, Some(1.0)),
                record(1, Some(2.0)),
                record(0, Some(3.0)),
                record(1, Some(4.0)),
            ],
        };
        let prof = entropy_profile(&trace).unwrap();
        assert_eq!(prof, vec![2.0, 3.0]);
    }

    #[test]
    fn entropy_profile_rejects_entropy_free_traces() {
        let trace = GuidanceTrace {
            chains: 1,
            steps: 2,
            records: vec![record(0, None), record(1, None)],
        };
        assert!(entropy_profile(&trace).is_err());
    }

    #[test]
    fn uniform_attention_profile_is_ln_n() {
        use crate::denoiser::{DenoiserParams, LayerSelection, ModelConfig};
        use crate::diffusion::make_schedule;
        use crate::guidance::{asag_sample, GuidanceMethod, GuidanceSpec};
        let cfg = ModelConfig {
            num_classes: 2,
            n_tokens: 4,
            point_dim: 2,
            d_model: 8,
            n_heads: 2,
            n_blocks: 2,
            ff_dim: 16,
        };
        let params = DenoiserParams::init(cfg, &mut Rng::new(27)).unwrap();
        let sched = make_schedule(10, 0.01, 0.1).unwrap();
        let spec = GuidanceSpec::new(GuidanceMethod::Uniform, 1.0, LayerSelection::new([0]));
        let (_, trace) = asag_sample(&params, &sched, &spec, None, 4, 2, &Rng::new(1)).unwrap();
        let prof = entropy_profile(&trace).unwrap();
        let ln_n = (cfg.n_tokens as f64).ln();
        for h in prof {
            assert!((h - ln_n).abs() < 1e-12, "entropy {h} vs ln n {ln_n}");
        }
    }
}
