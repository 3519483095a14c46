//! MAE, RMSE and masked MAPE, overall and per forecast step.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn same_shape(op: &'static str, y_hat: &Tensor, y: &Tensor) -> Result<()> {
    if y_hat.shape() != y.shape() {
        return Err(Error::shape(op, y_hat.shape(), y.shape()));
    }
    Ok(())
}

pub fn mae(y_hat: &Tensor, y: &Tensor) -> Result<f64> {
    same_shape("mae", y_hat, y)?;
    let s: f64 = y_hat.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(s / y.len() as f64)
}

pub fn rmse(y_hat: &Tensor, y: &Tensor) -> Result<f64> {
    same_shape("rmse", y_hat, y)?;
    let s: f64 = y_hat.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((s / y.len() as f64).sqrt())
}

/// Percentage error over elements with `|y| > floor`.
pub fn mape(y_hat: &Tensor, y: &Tensor, floor: f64) -> Result<f64> {
    same_shape("mape", y_hat, y)?;
    if !(floor >= 0.0) {
        return Err(Error::InvalidArgument(format!("MAPE floor must be ≥ 0, got {floor}")));
    }
    let (mut s, mut n) = (0.0, 0usize);
    for (a, b) in y_hat.data().iter().zip(y.data()) {
        if b.abs() > floor {
            s += (a - b).abs() / b.abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::UndefinedMetric(format!("every target is within the MAPE floor {floor}")));
    }
    Ok(100.0 * s / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub overall: StepMetrics,
    /// Index `k` is forecast step `k + 1`.
    pub per_step: Vec<StepMetrics>,
}

#[derive(Clone, Copy, Debug, Default)]
struct Sums {
    abs: f64,
    sq: f64,
    ape: f64,
    count: usize,
    ape_count: usize,
}

impl Sums {
    fn merge(&mut self, o: &Sums) {
        self.abs += o.abs;
        self.sq += o.sq;
        self.ape += o.ape;
        self.count += o.count;
        self.ape_count += o.ape_count;
    }

    fn finish(&self, what: &str, floor: f64) -> Result<StepMetrics> {
        if self.count == 0 {
            return Err(Error::UndefinedMetric(format!("no {what} predictions")));
        }
        if self.ape_count == 0 {
            return Err(Error::UndefinedMetric(format!(
                "every {what} target is within the MAPE floor {floor}"
            )));
        }
        let n = self.count as f64;
        Ok(StepMetrics {
            mae: self.abs / n,
            rmse: (self.sq / n).sqrt(),
            mape: 100.0 * self.ape / self.ape_count as f64,
        })
    }
}

/// Streams `[B, Z, …]` prediction batches in order and reports per-step and
/// aggregate metrics. Summation order depends only on the batch order.
#[derive(Clone, Debug)]
pub struct MetricAccumulator {
    floor: f64,
    steps: Vec<Sums>,
}

impl MetricAccumulator {
    pub fn new(horizon: usize, floor: f64) -> Self {
        Self {
            floor,
            steps: vec![Sums::default(); horizon],
        }
    }

    pub fn push(&mut self, y_hat: &Tensor, y: &Tensor) -> Result<()> {
        same_shape("metrics", y_hat, y)?;
        let z = self.steps.len();
        if y.ndim() < 2 || y.shape()[1] != z {
            return Err(Error::InvalidShape(format!("expected [B, {z}, …], got {:?}", y.shape())));
        }
        let inner: usize = y.shape()[2..].iter().product();
        for (ph, py) in y_hat.data().chunks(z * inner).zip(y.data().chunks(z * inner)) {
            for (k, s) in self.steps.iter_mut().enumerate() {
                for (a, b) in ph[k * inner..(k + 1) * inner].iter().zip(&py[k * inner..(k + 1) * inner]) {
                    let e = a - b;
                    s.abs += e.abs();
                    s.sq += e * e;
                    s.count += 1;
                    if b.abs() > self.floor {
                        s.ape += e.abs() / b.abs();
                        s.ape_count += 1;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<Metrics> {
        let per_step = self
            .steps
            .iter()
            .enumerate()
            .map(|(k, s)| s.finish(&format!("step {}", k + 1), self.floor))
            .collect::<Result<Vec<_>>>()?;
        let mut all = Sums::default();
        for s in &self.steps {
            all.merge(s);
        }
        Ok(Metrics {
            overall: all.finish("aggregate", self.floor)?,
            per_step,
        })
    }
}
