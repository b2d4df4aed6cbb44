use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest error.
    pub worst: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Central-difference gradient checker.
///
/// Relative error per coordinate is
/// `|analytic - fd| / max(|analytic|, |fd|, 1e-8)`.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub h: f64,
    /// Check a random subset of this many coordinates; `None` checks all.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            h: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

impl GradCheck {
    /// `loss` maps a parameter vector to `(loss, analytic gradient)`.
    pub fn run<F>(&self, mut loss: F, params: &[f64]) -> GradCheckReport
    where
        F: FnMut(&[f64]) -> (f64, Vec<f64>),
    {
        let (_, analytic) = loss(params);
        assert_eq!(analytic.len(), params.len(), "gradient length");
        let coords: Vec<usize> = match self.max_coords {
            Some(k) if k < params.len() => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let mut idx = sample(&mut rng, params.len(), k).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..params.len()).collect(),
        };
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst: 0,
            analytic: 0.0,
            numeric: 0.0,
            checked: coords.len(),
        };
        let mut p = params.to_vec();
        for &k in &coords {
            let orig = p[k];
            p[k] = orig + self.h;
            let (plus, _) = loss(&p);
            p[k] = orig - self.h;
            let (minus, _) = loss(&p);
            p[k] = orig;
            let fd = (plus - minus) / (2.0 * self.h);
            let a = analytic[k];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            if err > report.max_rel_error || !err.is_finite() {
                report = GradCheckReport {
                    max_rel_error: if err.is_finite() { err } else { f64::INFINITY },
                    worst: k,
                    analytic: a,
                    numeric: fd,
                    checked: coords.len(),
                };
            }
        }
        report
    }
}

/// Checks every coordinate with step `h`.
pub fn finite_diff_check<F>(loss: F, params: &[f64], h: f64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    GradCheck {
        h,
        ..GradCheck::default()
    }
    .run(loss, params)
}
