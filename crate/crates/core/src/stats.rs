use serde::{Deserialize, Serialize};

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

impl Estimate {
    /// Reduction in slice order, so the result is independent of how the
    /// samples were produced.
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std_error: f64::NAN,
                samples: 0,
            };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std_error = if n > 1 {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            std_error,
            samples: n,
        }
    }

    /// Estimate of `E[a - b]` from paired samples.
    pub fn paired(a: &[f64], b: &[f64]) -> Self {
        let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        Self::from_samples(&diff)
    }

    /// Control-variate estimate of `E[target]` from paired samples of a
    /// control with known mean: `mean(target) - β (mean(control) - control_mean)`
    /// with the least-squares `β`.
    pub fn control_variate(target: &[f64], control: &[f64], control_mean: f64) -> Self {
        let n = target.len().min(control.len());
        if n < 2 {
            return Self::from_samples(&target[..n]);
        }
        let t = Self::from_samples(&target[..n]).mean;
        let c = Self::from_samples(&control[..n]).mean;
        let (mut cov, mut var) = (0.0, 0.0);
        for (a, b) in target.iter().zip(control) {
            cov += (a - t) * (b - c);
            var += (b - c) * (b - c);
        }
        let beta = if var > 0.0 { cov / var } else { 0.0 };
        let adjusted: Vec<f64> = target
            .iter()
            .zip(control)
            .map(|(a, b)| a - beta * (b - control_mean))
            .collect();
        Self::from_samples(&adjusted)
    }

    pub fn exact(value: f64) -> Self {
        Self {
            mean: value,
            std_error: 0.0,
            samples: 1,
        }
    }
}
