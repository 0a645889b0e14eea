use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GraphBuilder, NodeId, ParamBlock, ParamVector};
use crate::error::{Error, Result};
use crate::seeds;

/// Anything that can emit a noise-prediction node for a batch of noisy inputs.
pub trait NoisePredictor: Send + Sync {
    fn param_count(&self) -> usize;

    fn num_concepts(&self) -> usize;

    /// `x_t` is `n x 2`; `t` and `concepts` have length `n`.
    fn build(
        &self,
        g: &mut GraphBuilder,
        x_t: Array2<f64>,
        t: &[usize],
        concepts: &[usize],
    ) -> Result<NodeId>;
}

/// Conditional MLP denoiser: `[x_t, sinusoid(t), embed(concept)]` through two
/// SiLU hidden layers to a 2-D noise prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub num_concepts: usize,
    pub concept_dim: usize,
    pub time_dim: usize,
    pub hidden: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            num_concepts: 10,
            concept_dim: 4,
            time_dim: 8,
            hidden: 64,
        }
    }
}

/// Where each tensor lives inside the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    /// `concept_dim x num_concepts`, applied to a one-hot row.
    pub embedding: ParamBlock,
    pub w1: ParamBlock,
    pub b1: usize,
    pub w2: ParamBlock,
    pub b2: usize,
    pub w3: ParamBlock,
    pub b3: usize,
    pub total: usize,
}

impl Architecture {
    pub fn with_hidden(hidden: usize) -> Self {
        Architecture {
            hidden,
            ..Architecture::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_concepts == 0 || self.concept_dim == 0 || self.hidden == 0 {
            return Err(Error::Config(format!("degenerate architecture {self:?}")));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::Config("time embedding size must be even and positive".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        2 + self.time_dim + self.concept_dim
    }

    pub fn layout(&self) -> Layout {
        let mut off = 0;
        let mut block = |rows: usize, cols: usize| {
            let b = ParamBlock::new(off, rows, cols);
            off += rows * cols;
            b
        };
        let embedding = block(self.concept_dim, self.num_concepts);
        let w1 = block(self.hidden, self.input_dim());
        let b1 = block(1, self.hidden).offset;
        let w2 = block(self.hidden, self.hidden);
        let b2 = block(1, self.hidden).offset;
        let w3 = block(2, self.hidden);
        let b3 = block(1, 2).offset;
        Layout {
            embedding,
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            total: off,
        }
    }

    /// Weight matrices of the two hidden layers; the blocks low-rank adapters attach to.
    pub fn adapter_blocks(&self) -> Vec<ParamBlock> {
        let l = self.layout();
        vec![l.w1, l.w2]
    }

    /// Embedding rows ~ N(0, 1), weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero biases.
    pub fn init(&self, seed: u64) -> ParamVector {
        let l = self.layout();
        let mut rng = seeds::rng(seed);
        let mut p = vec![0.0; l.total];
        for v in &mut p[l.embedding.range()] {
            *v = rng.sample(StandardNormal);
        }
        for w in [l.w1, l.w2, l.w3] {
            let bound = 1.0 / (w.cols as f64).sqrt();
            for v in &mut p[w.range()] {
                *v = rng.random_range(-bound..bound);
            }
        }
        ParamVector::new(p)
    }

    pub fn descriptor(&self) -> String {
        format!(
            "mlp concepts={} concept_dim={} time_dim={} hidden={}",
            self.num_concepts, self.concept_dim, self.time_dim, self.hidden
        )
    }

    pub fn parse_descriptor(text: &str) -> Result<Self> {
        let mut fields = text.split_whitespace();
        if fields.next() != Some("mlp") {
            return Err(Error::Config(format!("unknown architecture descriptor {text:?}")));
        }
        let mut get = |key: &str| -> Result<usize> {
            let f = fields
                .next()
                .ok_or_else(|| Error::Config(format!("descriptor missing {key}")))?;
            let v = f
                .strip_prefix(key)
                .and_then(|r| r.strip_prefix('='))
                .ok_or_else(|| Error::Config(format!("descriptor expected {key}=, got {f}")))?;
            v.parse()
                .map_err(|_| Error::Config(format!("descriptor {key}: bad value {v}")))
        };
        let arch = Architecture {
            num_concepts: get("concepts")?,
            concept_dim: get("concept_dim")?,
            time_dim: get("time_dim")?,
            hidden: get("hidden")?,
        };
        arch.validate()?;
        Ok(arch)
    }
}

/// Sinusoidal timestep features with geometrically spaced frequencies
/// `200^(-k / half)` for `k < half`: sines first, then cosines.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(200f64.ln()) * k as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
    out
}

impl NoisePredictor for Architecture {
    fn param_count(&self) -> usize {
        self.layout().total
    }

    fn num_concepts(&self) -> usize {
        self.num_concepts
    }

    fn build(
        &self,
        g: &mut GraphBuilder,
        x_t: Array2<f64>,
        t: &[usize],
        concepts: &[usize],
    ) -> Result<NodeId> {
        let n = x_t.nrows();
        if x_t.ncols() != 2 || t.len() != n || concepts.len() != n {
            return Err(Error::Config("denoiser inputs have inconsistent batch sizes".into()));
        }
        let l = self.layout();
        let mut temb = Array2::zeros((n, self.time_dim));
        let mut onehot = Array2::zeros((n, self.num_concepts));
        for i in 0..n {
            for (j, v) in time_embedding(t[i], self.time_dim).into_iter().enumerate() {
                temb[[i, j]] = v;
            }
            if concepts[i] >= self.num_concepts {
                return Err(Error::Usage(format!("unknown concept {}", concepts[i])));
            }
            onehot[[i, concepts[i]]] = 1.0;
        }
        let x = g.constant(x_t);
        let te = g.constant(temb);
        let oh = g.constant(onehot);
        let ce = g.affine(oh, l.embedding, None)?;
        let h = g.concat(&[x, te, ce])?;
        let h = g.affine(h, l.w1, Some(l.b1))?;
        let h = g.silu(h)?;
        let h = g.affine(h, l.w2, Some(l.b2))?;
        let h = g.silu(h)?;
        g.affine(h, l.w3, Some(l.b3))
    }
}

/// Parameters bundled with the architecture they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel {
    pub arch: Architecture,
    pub params: ParamVector,
}

impl DenoiserModel {
    pub fn new(arch: Architecture, params: ParamVector) -> Result<Self> {
        arch.validate()?;
        if params.dim() != arch.param_count() {
            return Err(Error::Config(format!(
                "architecture needs {} parameters, got {}",
                arch.param_count(),
                params.dim()
            )));
        }
        Ok(DenoiserModel { arch, params })
    }

    pub fn initialized(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let params = arch.init(seed);
        DenoiserModel::new(arch, params)
    }
}

/// Evaluates the predictor's output for a batch at fixed parameters.
pub fn predict(
    predictor: &dyn NoisePredictor,
    params: &ParamVector,
    x_t: Array2<f64>,
    t: &[usize],
    concepts: &[usize],
) -> Result<Array2<f64>> {
    let mut g = GraphBuilder::new(predictor.param_count());
    let out = predictor.build(&mut g, x_t, t, concepts)?;
    g.build(out)?.evaluate(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_parameter_count() {
        let a = Architecture::default();
        // 4*10 + (64*14 + 64) + (64*64 + 64) + (2*64 + 2)
        assert_eq!(a.param_count(), 40 + 960 + 4160 + 130);
        assert_eq!(a.init(1).dim(), a.param_count());
    }

    #[test]
    fn descriptor_round_trip() {
        let a = Architecture::with_hidden(12);
        assert_eq!(Architecture::parse_descriptor(&a.descriptor()).unwrap(), a);
        assert!(Architecture::parse_descriptor("conv hidden=3").is_err());
    }

    #[test]
    fn unknown_concept_is_rejected() {
        let a = Architecture::default();
        let p = a.init(0);
        let err = predict(&a, &p, Array2::zeros((1, 2)), &[1], &[10]).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }
}
