use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{ParamBlock, ParamVector};
use crate::seeds;

pub const LOW_RANK_INIT_STD: f64 = 1e-3;

/// Low-rank update `W + B A` on a set of weight blocks. `A` starts at zero so the
/// initial effective parameters equal the base.
#[derive(Clone, Debug)]
pub struct LowRankAdapter {
    blocks: Vec<ParamBlock>,
    rank: usize,
    /// Per block: `B` (`rows x rank`) followed by `A` (`rank x cols`).
    pub factors: Vec<f64>,
}

impl LowRankAdapter {
    pub fn new(blocks: Vec<ParamBlock>, rank: usize, seed: u64) -> Self {
        let mut rng = seeds::rng(seed);
        let mut factors = Vec::new();
        for b in &blocks {
            factors.extend((0..b.rows * rank).map(|_| LOW_RANK_INIT_STD * rng.sample::<f64, _>(StandardNormal)));
            factors.extend(std::iter::repeat_n(0.0, rank * b.cols));
        }
        LowRankAdapter {
            blocks,
            rank,
            factors,
        }
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    fn views(&self) -> Vec<(ParamBlock, ArrayView2<'_, f64>, ArrayView2<'_, f64>)> {
        let mut off = 0;
        self.blocks
            .iter()
            .map(|b| {
                let nb = b.rows * self.rank;
                let na = self.rank * b.cols;
                let bm = ArrayView2::from_shape((b.rows, self.rank), &self.factors[off..off + nb]).unwrap();
                let am = ArrayView2::from_shape((self.rank, b.cols), &self.factors[off + nb..off + nb + na]).unwrap();
                off += nb + na;
                (*b, bm, am)
            })
            .collect()
    }

    pub fn effective(&self, base: &ParamVector) -> ParamVector {
        let mut out = base.clone();
        for (block, bm, am) in self.views() {
            let delta = bm.dot(&am);
            for (o, d) in out.as_mut_slice()[block.range()].iter_mut().zip(delta.iter()) {
                *o += d;
            }
        }
        out
    }

    /// Chain rule from the gradient in full coordinates: `dB = G A^T`, `dA = B^T G`.
    pub fn factor_grad(&self, full: &ParamVector) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.factors.len());
        for (block, bm, am) in self.views() {
            let g: Array2<f64> =
                ArrayView2::from_shape((block.rows, block.cols), &full.as_slice()[block.range()])
                    .unwrap()
                    .to_owned();
            out.extend(g.dot(&am.t()).iter());
            out.extend(bm.t().dot(&g).iter());
        }
        out
    }
}
