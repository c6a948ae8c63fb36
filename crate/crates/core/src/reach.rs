//! Random-walk reachability.
//!
//! `r(i → j | t)` is entry `(i, j)` of `Pᵗ` where `P = D⁻¹A` is the uniform
//! transition matrix. The cache stores every power up to `T`, computed by
//! repeated sparse products. Isolated nodes have all-zero rows.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng;
use crate::sparse::CsrMatrix;

const CACHE_MAGIC: &[u8; 4] = b"UDPR";

/// Row-stochastic transition matrix of a graph.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMatrix(CsrMatrix);

impl TransitionMatrix {
    pub fn matrix(&self) -> &CsrMatrix {
        &self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.get(i, j)
    }
}

pub fn build_transition(graph: &Graph) -> TransitionMatrix {
    let n = graph.num_nodes();
    let offsets = graph.csr_offsets().to_vec();
    let cols = graph.csr_targets().to_vec();
    let mut vals = Vec::with_capacity(cols.len());
    for v in 0..n {
        let d = graph.degree(v);
        vals.extend(std::iter::repeat_n(1.0 / d as f64, d));
    }
    TransitionMatrix(CsrMatrix::from_parts(n, n, offsets, cols, vals).expect("graph CSR is valid"))
}

/// `P¹ … Pᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReachabilityCache {
    powers: Vec<CsrMatrix>,
}

pub fn build_cache(p: &TransitionMatrix, max_step: usize) -> Result<ReachabilityCache> {
    if max_step == 0 {
        return Err(Error::Argument("reachability needs at least one step".into()));
    }
    let mut powers = Vec::with_capacity(max_step);
    powers.push(p.0.clone());
    for t in 1..max_step {
        let next = powers[t - 1].matmul(&p.0)?;
        log::debug!("P^{} has {} non-zeros", t + 1, next.nnz());
        powers.push(next);
    }
    Ok(ReachabilityCache { powers })
}

impl ReachabilityCache {
    pub fn max_step(&self) -> usize {
        self.powers.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.powers[0].n_rows()
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.max_step() {
            return Err(Error::Argument(format!("step {t} outside 1..={}", self.max_step())));
        }
        Ok(())
    }

    /// `Pᵗ`.
    pub fn power(&self, t: usize) -> Result<&CsrMatrix> {
        self.check_step(t)?;
        Ok(&self.powers[t - 1])
    }

    pub fn reach(&self, i: usize, j: usize, t: usize) -> Result<f64> {
        Ok(self.power(t)?.get(i, j))
    }

    /// Column sums of `Pᵗ`: the total probability of landing on each node.
    pub fn total_reach(&self, t: usize) -> Result<Vec<f64>> {
        Ok(self.power(t)?.column_sums())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        let mut w = BufWriter::new(file);
        let ctx = || format!("writing {}", path.display());
        let mut put = |b: &[u8]| w.write_all(b).map_err(|e| Error::io(ctx(), e));
        put(CACHE_MAGIC)?;
        put(&(self.num_nodes() as u64).to_le_bytes())?;
        put(&(self.max_step() as u64).to_le_bytes())?;
        for m in &self.powers {
            put(&(m.nnz() as u64).to_le_bytes())?;
            for &o in m.offsets() {
                put(&(o as u64).to_le_bytes())?;
            }
            for &c in m.col_indices() {
                put(&(c as u64).to_le_bytes())?;
            }
            for &v in m.values() {
                put(&v.to_le_bytes())?;
            }
        }
        w.flush().map_err(|e| Error::io(ctx(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(4)? != CACHE_MAGIC {
            return Err(Error::Format(format!("{} is not a UDPR cache", path.display())));
        }
        let n = cur.u64()? as usize;
        let steps = cur.u64()? as usize;
        if steps == 0 {
            return Err(Error::Format("cache holds no powers".into()));
        }
        let mut powers = Vec::with_capacity(steps);
        for _ in 0..steps {
            let nnz = cur.u64()? as usize;
            let offsets = (0..=n).map(|_| cur.u64().map(|x| x as usize)).collect::<Result<Vec<_>>>()?;
            let cols = (0..nnz).map(|_| cur.u64().map(|x| x as usize)).collect::<Result<Vec<_>>>()?;
            let vals = (0..nnz).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
            powers.push(CsrMatrix::from_parts(n, n, offsets, cols, vals)?);
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after the last power".into()));
        }
        Ok(Self { powers })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, k: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(k).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("file is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Fraction of `walks` uniform `t`-step walks from `i` that end at `j`.
/// A walk that reaches an isolated node stops and counts as a miss.
pub fn monte_carlo_reach(graph: &Graph, i: usize, j: usize, t: usize, walks: usize, seed: u64) -> Result<f64> {
    if walks == 0 {
        return Err(Error::Argument("monte_carlo_reach needs at least one walk".into()));
    }
    let n = graph.num_nodes();
    if i >= n || j >= n {
        return Err(Error::Argument(format!("node pair ({i}, {j}) outside 0..{n}")));
    }
    let mut rng = rng::stream(seed, "monte-carlo-reach", 0);
    let mut hits = 0usize;
    'walk: for _ in 0..walks {
        let mut v = i;
        for _ in 0..t {
            let nb = graph.neighbors(v);
            if nb.is_empty() {
                continue 'walk;
            }
            v = nb[rng.gen_range(0..nb.len())];
        }
        if v == j {
            hits += 1;
        }
    }
    Ok(hits as f64 / walks as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ultradp_autodiff::Tensor;

    fn graph(n: usize, edges: &[(usize, usize)]) -> Graph {
        Graph::from_edges(edges, Tensor::zeros(n, 1), None).unwrap()
    }

    fn path() -> Graph {
        graph(3, &[(0, 1), (1, 2)])
    }

    fn triangle() -> Graph {
        graph(3, &[(0, 1), (1, 2), (0, 2)])
    }

    fn star() -> Graph {
        graph(5, &[(0, 1), (0, 2), (0, 3), (0, 4)])
    }

    #[test]
    fn transition_entries() {
        let p = build_transition(&path());
        assert_eq!(p.get(1, 0), 0.5);
        assert_eq!(p.get(1, 2), 0.5);
        assert_eq!(p.get(0, 1), 1.0);
        assert_eq!(p.get(2, 1), 1.0);

        let iso = build_transition(&graph(3, &[(0, 1)]));
        assert_eq!(iso.matrix().row(2).0.len(), 0);

        let s = build_transition(&star());
        assert_eq!(s.matrix().row(0).1, &[0.25; 4]);
    }

    #[test]
    fn cache_base_and_two_steps() {
        let p = build_transition(&path());
        let c1 = build_cache(&p, 1).unwrap();
        assert_eq!(c1.power(1).unwrap(), p.matrix());

        let c = build_cache(&p, 2).unwrap();
        assert_eq!(c.reach(0, 0, 2).unwrap(), 0.5);
        assert_eq!(c.reach(0, 2, 2).unwrap(), 0.5);
        assert_eq!(c.reach(0, 1, 1).unwrap(), 1.0);

        let t = build_cache(&build_transition(&triangle()), 2).unwrap();
        assert_eq!(t.reach(0, 0, 2).unwrap(), 0.5);
        assert_eq!(t.reach(0, 1, 2).unwrap(), 0.25);

        assert!(matches!(build_cache(&p, 0), Err(Error::Argument(_))));
        assert!(matches!(c.reach(0, 0, 3), Err(Error::Argument(_))));
        assert!(matches!(c.total_reach(0), Err(Error::Argument(_))));
    }

    #[test]
    fn disconnected_pair_never_reached() {
        let g = graph(4, &[(0, 1), (2, 3)]);
        let c = build_cache(&build_transition(&g), 5).unwrap();
        for t in 1..=5 {
            assert_eq!(c.reach(0, 3, t).unwrap(), 0.0);
        }
        assert_eq!(monte_carlo_reach(&g, 0, 3, 3, 100, 1).unwrap(), 0.0);
    }

    #[test]
    fn totals() {
        let c = build_cache(&build_transition(&star()), 1).unwrap();
        assert_eq!(c.total_reach(1).unwrap(), vec![4.0, 0.25, 0.25, 0.25, 0.25]);
        let e = build_cache(&build_transition(&graph(2, &[(0, 1)])), 1).unwrap();
        assert_eq!(e.total_reach(1).unwrap(), vec![1.0, 1.0]);
        let g = graph(5, &[(0, 1), (1, 2)]);
        let c = build_cache(&build_transition(&g), 3).unwrap();
        for t in 1..=3 {
            let s: f64 = c.total_reach(t).unwrap().iter().sum();
            assert!((s - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn monte_carlo_forced_step() {
        assert_eq!(monte_carlo_reach(&path(), 0, 1, 1, 17, 3).unwrap(), 1.0);
        assert!(monte_carlo_reach(&path(), 0, 1, 1, 0, 3).is_err());
    }

    #[test]
    fn cache_round_trip_and_truncation() {
        let c = build_cache(&build_transition(&star()), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.udpr");
        c.save(&p).unwrap();
        assert_eq!(ReachabilityCache::load(&p).unwrap(), c);
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(ReachabilityCache::load(&p), Err(Error::Format(_))));
    }
}
