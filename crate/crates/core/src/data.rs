//! Seeded synthetic 2-D point-set datasets. Every example is an
//! `[n_tokens, 2]` tensor; labeled datasets pair it with a class id.

use std::f64::consts::PI;

use crate::denoiser::Example;
use crate::error::{CoreError, Result};
use crate::tensor::{Rng, Tensor};

/// Which toy distribution to draw token sets from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dataset {
    /// Eight Gaussian modes on a ring of radius 4; class = mode index.
    Gauss8,
    /// 4x4 checkerboard over [-4, 4]^2; class = cell parity block (0..8).
    Checkerboard,
    /// A 2-D swiss roll spiral; single class.
    SwissRoll,
    /// One standard Gaussian mode; single class.
    Gauss1,
}

impl Dataset {
    pub fn parse(name: &str) -> Result<Dataset> {
        match name {
            "gauss8" => Ok(Dataset::Gauss8),
            "checkerboard" => Ok(Dataset::Checkerboard),
            "swissroll" => Ok(Dataset::SwissRoll),
            "gauss1" => Ok(Dataset::Gauss1),
            other => Err(CoreError::InvalidInput(format!("unknown dataset {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Dataset::Gauss8 => "gauss8",
            Dataset::Checkerboard => "checkerboard",
            Dataset::SwissRoll => "swissroll",
            Dataset::Gauss1 => "gauss1",
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Dataset::Gauss8 => 8,
            Dataset::Checkerboard => 8,
            Dataset::SwissRoll => 1,
            Dataset::Gauss1 => 1,
        }
    }
}

/// Ring radius for [`Dataset::Gauss8`].
pub const GAUSS8_RADIUS: f64 = 4.0;
/// Per-mode standard deviation for [`Dataset::Gauss8`].
pub const GAUSS8_SIGMA: f64 = 0.3;

/// Centers of the eight ring modes, counter-clockwise from (radius, 0).
pub fn gauss8_centers() -> Vec<[f64; 2]> {
    (0..8)
        .map(|k| {
            let theta = 2.0 * PI * k as f64 / 8.0;
            [GAUSS8_RADIUS * theta.cos(), GAUSS8_RADIUS * theta.sin()]
        })
        .collect()
}

fn gauss8_example(class: usize, n_tokens: usize, rng: &mut Rng) -> Tensor {
    let c = gauss8_centers()[class];
    let mut t = rng.gaussian(vec![n_tokens, 2]).scale(GAUSS8_SIGMA);
    for i in 0..n_tokens {
        t.data[2 * i] += c[0];
        t.data[2 * i + 1] += c[1];
    }
    t
}

fn checkerboard_example(class: usize, n_tokens: usize, rng: &mut Rng) -> Tensor {
    // the 8 "black" cells of a 4x4 board over [-4, 4]^2, indexed row-major
    let black: Vec<(usize, usize)> = (0..4)
        .flat_map(|r| (0..4).map(move |c| (r, c)))
        .filter(|(r, c)| (r + c) % 2 == 0)
        .collect();
    let (row, col) = black[class];
    let mut t = Tensor::zeros(vec![n_tokens, 2]);
    for i in 0..n_tokens {
        t.data[2 * i] = -4.0 + 2.0 * col as f64 + 2.0 * rng.uniform();
        t.data[2 * i + 1] = -4.0 + 2.0 * row as f64 + 2.0 * rng.uniform();
    }
    t
}

fn swissroll_example(n_tokens: usize, rng: &mut Rng) -> Tensor {
    let mut t = Tensor::zeros(vec![n_tokens, 2]);
    for i in 0..n_tokens {
        let u = rng.uniform();
        let phi = 1.5 * PI * (1.0 + 2.0 * u);
        let r = phi / (4.5 * PI) * 4.0;
        let jitter = 0.1;
        t.data[2 * i] = r * phi.cos() + jitter * rng.gaussian(vec![1, 1]).data[0];
        t.data[2 * i + 1] = r * phi.sin() + jitter * rng.gaussian(vec![1, 1]).data[0];
    }
    t
}

/// Draw `count` labeled examples of `n_tokens` points each.
pub fn sample_dataset(
    which: Dataset,
    count: usize,
    n_tokens: usize,
    rng: &mut Rng,
) -> Vec<Example> {
    (0..count)
        .map(|_| match which {
            Dataset::Gauss8 => {
                let class = rng.below(8);
                (gauss8_example(class, n_tokens, rng), Some(class))
            }
            Dataset::Checkerboard => {
                let class = rng.below(8);
                (checkerboard_example(class, n_tokens, rng), Some(class))
            }
            Dataset::SwissRoll => (swissroll_example(n_tokens, rng), Some(0)),
            Dataset::Gauss1 => (rng.gaussian(vec![n_tokens, 2]), Some(0)),
        })
        .collect()
}

/// Flatten examples into a `[count * n_tokens, 2]` point cloud, dropping labels.
pub fn flatten_points(examples: &[Example]) -> Tensor {
    let n: usize = examples.iter().map(|(t, _)| t.rows()).sum();
    let mut out = Tensor::zeros(vec![n, 2]);
    let mut row = 0;
    for (t, _) in examples {
        for i in 0..t.rows() {
            out.data[2 * row] = t.data[2 * i];
            out.data[2 * row + 1] = t.data[2 * i + 1];
            row += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_round_trip() {
        for d in [
            Dataset::Gauss8,
            Dataset::Checkerboard,
            Dataset::SwissRoll,
            Dataset::Gauss1,
        ] {
            assert_eq!(Dataset::parse(d.name()).unwrap(), d);
        }
        assert!(Dataset::parse("moons").is_err());
    }

    #[test]
    fn gauss8_points_cluster_near_their_center() {
        let mut rng = Rng::new(11);
        for (class, center) in gauss8_centers().iter().enumerate() {
            let t = gauss8_example(class, 64, &mut rng);
            let mx = t.data.iter().step_by(2).sum::<f64>() / 64.0;
            let my = t.data.iter().skip(1).step_by(2).sum::<f64>() / 64.0;
            assert!((mx - center[0]).abs() < 0.25, "class {class} mean x {mx}");
            assert!((my - center[1]).abs() < 0.25, "class {class} mean y {my}");
        }
    }

    #[test]
    fn gauss8_centers_lie_on_the_ring() {
        for c in gauss8_centers() {
            let r = (c[0] * c[0] + c[1] * c[1]).sqrt();
            assert!((r - GAUSS8_RADIUS).abs() < 1e-12);
        }
    }

    #[test]
    fn checkerboard_stays_in_cells() {
        let mut rng = Rng::new(12);
        for (x0, label) in sample_dataset(Dataset::Checkerboard, 50, 16, &mut rng) {
            let class = label.unwrap();
            assert!(class < 8);
            for i in 0..16 {
                let (x, y) = (x0.data[2 * i], x0.data[2 * i + 1]);
                assert!((-4.0..=4.0).contains(&x) && (-4.0..=4.0).contains(&y));
                let col = (((x + 4.0) / 2.0).floor() as i64).clamp(0, 3);
                let row = (((y + 4.0) / 2.0).floor() as i64).clamp(0, 3);
                assert_eq!((row + col) % 2, 0, "point in a white cell");
            }
        }
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let a = sample_dataset(Dataset::Gauss8, 10, 16, &mut Rng::new(7));
        let b = sample_dataset(Dataset::Gauss8, 10, 16, &mut Rng::new(7));
        for ((ta, ca), (tb, cb)) in a.iter().zip(&b) {
            assert_eq!(ca, cb);
            assert_eq!(ta.data, tb.data);
        }
    }

    #[test]
    fn flatten_concatenates_rows() {
        let mut rng = Rng::new(3);
        let examples = sample_dataset(Dataset::Gauss1, 3, 4, &mut rng);
        let flat = flatten_points(&examples);
        assert_eq!(flat.shape, vec![12, 2]);
        assert_eq!(flat.data[0], examples[0].0.data[0]);
        assert_eq!(flat.data[23], examples[2].0.data[7]);
    }
}
