//! Stochastic block model graphs with class-correlated features.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use ultradp_autodiff::Tensor;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SbmConfig {
    pub blocks: usize,
    pub block_size: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    /// Scale of the per-class mean vectors.
    pub signal: f64,
    /// Standard deviation of per-node noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SbmConfig {
    fn default() -> Self {
        Self {
            blocks: 4,
            block_size: 250,
            p_in: 0.032,
            p_out: 0.0027,
            feature_dim: 32,
            signal: 0.5,
            noise: 1.0,
            seed: 0,
        }
    }
}

/// Node `v` belongs to block `v / block_size`, which is also its label.
pub fn sbm(cfg: &SbmConfig) -> Result<Graph> {
    if cfg.blocks == 0 || cfg.block_size == 0 || cfg.feature_dim == 0 {
        return Err(Error::Argument("block model dimensions must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.p_in) || !(0.0..=1.0).contains(&cfg.p_out) {
        return Err(Error::Argument("edge probabilities must lie in [0, 1]".into()));
    }
    let n = cfg.blocks * cfg.block_size;
    let label = |v: usize| v / cfg.block_size;
    let mut rng = rng::stream(cfg.seed, "sbm-edges", 0);
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            let p = if label(a) == label(b) { cfg.p_in } else { cfg.p_out };
            if rng.gen_bool(p) {
                edges.push((a, b));
            }
        }
    }
    let mut frng = rng::stream(cfg.seed, "sbm-features", 0);
    let d = cfg.feature_dim;
    let means: Vec<Vec<f64>> = (0..cfg.blocks)
        .map(|_| (0..d).map(|_| cfg.signal * frng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let mut data = Vec::with_capacity(n * d);
    for v in 0..n {
        for mu in &means[label(v)] {
            data.push(mu + cfg.noise * frng.sample::<f64, _>(StandardNormal));
        }
    }
    let labels = (0..n).map(label).collect();
    Graph::from_edges(&edges, Tensor::new(n, d, data)?, Some(labels))?.with_num_classes(cfg.blocks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_assortativity() {
        let g = sbm(&SbmConfig { block_size: 50, ..SbmConfig::default() }).unwrap();
        assert_eq!(g.num_nodes(), 200);
        assert_eq!(g.num_classes(), Some(4));
        let labels = g.labels().unwrap();
        let inside = g.edges().filter(|&(a, b)| labels[a] == labels[b]).count();
        assert!(inside * 2 > g.num_edges());
        assert_eq!(g, sbm(&SbmConfig { block_size: 50, ..SbmConfig::default() }).unwrap());
    }
}
