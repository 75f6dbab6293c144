/// Sample mean and standard error of the mean.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MeanStderr {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl MeanStderr {
    pub fn z_score(&self, reference: f64) -> f64 {
        if self.stderr > 0.0 {
            (self.mean - reference) / self.stderr
        } else if self.mean == reference {
            0.0
        } else {
            f64::INFINITY.copysign(self.mean - reference)
        }
    }
}

/// Streaming mean and variance; pushing in a fixed order gives reproducible results.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Welford {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Welford {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn finish(&self) -> MeanStderr {
        let n = self.n;
        let stderr = if n > 1 {
            (self.m2 / (n - 1) as f64 / n as f64).sqrt()
        } else {
            0.0
        };
        MeanStderr {
            mean: self.mean,
            stderr,
            n,
        }
    }
}

/// Welford accumulation in slice order, so results only depend on the order of `xs`.
pub fn mean_stderr(xs: &[f64]) -> MeanStderr {
    let mut w = Welford::default();
    for &x in xs {
        w.push(x);
    }
    w.finish()
}
