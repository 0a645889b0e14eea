use super::{Objective, ParamVector};
use crate::error::{Error, Result};

/// Explicit quadratic `0.5 * x^T H x + c^T x + k` with a dense symmetric `H`.
#[derive(Clone, Debug)]
pub struct Quadratic {
    hessian: Vec<Vec<f64>>,
    linear: Vec<f64>,
    constant: f64,
}

impl Quadratic {
    pub fn new(hessian: Vec<Vec<f64>>, linear: Vec<f64>, constant: f64) -> Result<Self> {
        let d = hessian.len();
        if linear.len() != d || hessian.iter().any(|row| row.len() != d) {
            return Err(Error::Config("quadratic: inconsistent dimensions".into()));
        }
        Ok(Quadratic {
            hessian,
            linear,
            constant,
        })
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let d = diag.len();
        let mut h = vec![vec![0.0; d]; d];
        for (i, v) in diag.iter().enumerate() {
            h[i][i] = *v;
        }
        Quadratic {
            hessian: h,
            linear: vec![0.0; d],
            constant: 0.0,
        }
    }

    pub fn zero(dim: usize) -> Self {
        Quadratic::diagonal(&vec![0.0; dim])
    }

    pub fn with_linear(mut self, linear: Vec<f64>) -> Self {
        assert_eq!(linear.len(), self.linear.len());
        self.linear = linear;
        self
    }

    pub fn hessian(&self) -> &[Vec<f64>] {
        &self.hessian
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.hessian
            .iter()
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn check(&self, p: &ParamVector) -> Result<()> {
        if p.dim() != self.linear.len() {
            return Err(Error::Config(format!(
                "quadratic of dimension {} given vector of dimension {}",
                self.linear.len(),
                p.dim()
            )));
        }
        Ok(())
    }
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.linear.len()
    }

    fn value(&self, params: &ParamVector) -> Result<f64> {
        self.check(params)?;
        let x = params.as_slice();
        let hx = self.apply(x);
        let quad: f64 = x.iter().zip(&hx).map(|(a, b)| a * b).sum();
        let lin: f64 = x.iter().zip(&self.linear).map(|(a, b)| a * b).sum();
        Ok(0.5 * quad + lin + self.constant)
    }

    fn value_and_grad(&self, params: &ParamVector) -> Result<(f64, ParamVector)> {
        let value = self.value(params)?;
        let mut g = self.apply(params.as_slice());
        for (gi, ci) in g.iter_mut().zip(&self.linear) {
            *gi += ci;
        }
        Ok((value, ParamVector::new(g)))
    }

    fn hvp(&self, params: &ParamVector, v: &ParamVector) -> Result<ParamVector> {
        self.check(params)?;
        self.check(v)?;
        Ok(ParamVector::new(self.apply(v.as_slice())))
    }
}
