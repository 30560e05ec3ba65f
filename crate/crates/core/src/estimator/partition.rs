//! Random partitions of a set and the choice of cells that receive
//! gradients.

use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::error::{ensure, Result};

/// Disjoint, non-empty cells covering `0..n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    cells: Vec<Vec<usize>>,
    n: usize,
    chunk_size: usize,
}

impl Partition {
    /// Validates that `cells` partition `0..n`.
    pub fn new(n: usize, cells: Vec<Vec<usize>>) -> Result<Self> {
        ensure!(n > 0, "cannot partition an empty set");
        let mut seen = vec![false; n];
        for cell in &cells {
            ensure!(!cell.is_empty(), "empty partition cell");
            for &i in cell {
                ensure!(i < n, "index {i} out of range for a set of {n}");
                ensure!(!seen[i], "index {i} appears in two cells");
                seen[i] = true;
            }
        }
        ensure!(seen.iter().all(|&s| s), "cells do not cover the set");
        let chunk_size = cells.iter().map(Vec::len).max().unwrap_or(0);
        Ok(Self { cells, n, chunk_size })
    }

    /// Cells `[0..c), [c..2c), ...` in index order.
    pub fn contiguous(n: usize, chunk_size: usize) -> Result<Self> {
        ensure!(chunk_size > 0, "chunk size must be positive");
        let indices: Vec<usize> = (0..n).collect();
        Self::new(n, indices.chunks(chunk_size).map(<[usize]>::to_vec).collect())
    }

    pub fn cells(&self) -> &[Vec<usize>] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Size of the set being partitioned.
    pub fn set_size(&self) -> usize {
        self.n
    }

    /// Largest cell size.
    pub fn chunk_size(&self) -> usize {
        self.chunk_size
    }
}

/// Shuffles `0..n` and cuts it into `ceil(n / chunk_size)` cells; only the
/// last cell may be smaller.
pub fn make_partition<R: Rng + ?Sized>(n: usize, chunk_size: usize, rng: &mut R) -> Result<Partition> {
    ensure!(n > 0, "cannot partition an empty set");
    ensure!(chunk_size > 0, "chunk size must be positive");
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(rng);
    let cells = indices.chunks(chunk_size).map(<[usize]>::to_vec).collect();
    Ok(Partition {
        cells,
        n,
        chunk_size: chunk_size.min(n),
    })
}

/// A partition plus the cells whose contribution stays live on the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct GradPlan {
    partition: Partition,
    grad_cells: Vec<usize>,
    /// `|cells| / |grad cells|`, applied to the encoder loss.
    pub scale_encoder: f64,
    /// `1 / |grad cells|`, applied to the decoder loss.
    pub scale_decoder: f64,
}

impl GradPlan {
    pub fn new(partition: Partition, mut grad_cells: Vec<usize>) -> Result<Self> {
        ensure!(!grad_cells.is_empty(), "no gradient cells");
        grad_cells.sort_unstable();
        ensure!(
            grad_cells.windows(2).all(|w| w[0] != w[1]),
            "gradient cells must be distinct"
        );
        ensure!(
            grad_cells.last().is_some_and(|&c| c < partition.len()),
            "gradient cell out of range for {} cells",
            partition.len()
        );
        let m = grad_cells.len() as f64;
        Ok(Self {
            scale_encoder: partition.len() as f64 / m,
            scale_decoder: 1.0 / m,
            partition,
            grad_cells,
        })
    }

    /// Draws `grad_subsets` distinct cells uniformly (capped at the number
    /// of cells).
    pub fn sample<R: Rng + ?Sized>(partition: Partition, grad_subsets: usize, rng: &mut R) -> Result<Self> {
        ensure!(grad_subsets > 0, "need at least one gradient cell");
        let m = grad_subsets.min(partition.len());
        let cells = index::sample(rng, partition.len(), m).into_vec();
        Self::new(partition, cells)
    }

    /// Every cell live.
    pub fn full(partition: Partition) -> Self {
        let cells = (0..partition.len()).collect();
        Self::new(partition, cells).expect("a partition has at least one cell")
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn grad_cells(&self) -> &[usize] {
        &self.grad_cells
    }

    /// Set indices of all live cells, concatenated.
    pub fn live_rows(&self) -> Vec<usize> {
        self.grad_cells
            .iter()
            .flat_map(|&c| self.partition.cells[c].iter().copied())
            .collect()
    }

    /// Cells whose gradient is stopped.
    pub fn frozen_cells(&self) -> impl Iterator<Item = &[usize]> + '_ {
        self.partition
            .cells
            .iter()
            .enumerate()
            .filter(|(i, _)| self.grad_cells.binary_search(i).is_err())
            .map(|(_, c)| c.as_slice())
    }
}

/// All `m`-element subsets of `0..n` in lexicographic order.
pub fn combinations(n: usize, m: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, m: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == m {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            if n - i < m - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, n, m, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if m <= n {
        rec(0, n, m, &mut Vec::with_capacity(m), &mut out);
    }
    out
}

/// `n choose m` as a float (exact for the small counts used here).
pub fn binomial(n: usize, m: usize) -> f64 {
    if m > n {
        return 0.0;
    }
    (0..m).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sizes(p: &Partition) -> Vec<usize> {
        p.cells().iter().map(Vec::len).collect()
    }

    #[test]
    fn ceiling_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sizes(&make_partition(4, 2, &mut rng).unwrap()), vec![2, 2]);
        assert_eq!(sizes(&make_partition(5, 2, &mut rng).unwrap()), vec![2, 2, 1]);
        let p = make_partition(3, 10, &mut rng).unwrap();
        assert_eq!(p.len(), 1);
        let mut all = p.cells()[0].clone();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2]);
    }

    #[test]
    fn plan_scales() {
        let p = Partition::contiguous(64, 8).unwrap();
        let plan = GradPlan::new(p, vec![5, 2]).unwrap();
        assert_eq!(plan.scale_encoder, 4.0);
        assert_eq!(plan.scale_decoder, 0.5);
        assert_eq!(plan.grad_cells(), &[2, 5]);
        assert_eq!(plan.frozen_cells().count(), 6);
        assert_eq!(plan.live_rows(), (16..24).chain(40..48).collect::<Vec<_>>());
    }

    #[test]
    fn plan_validation() {
        let p = Partition::contiguous(4, 2).unwrap();
        assert!(GradPlan::new(p.clone(), vec![]).is_err());
        assert!(GradPlan::new(p.clone(), vec![1, 1]).is_err());
        assert!(GradPlan::new(p.clone(), vec![2]).is_err());
        let full = GradPlan::full(p);
        assert_eq!(full.scale_encoder, 1.0);
        assert_eq!(full.frozen_cells().count(), 0);
    }

    #[test]
    fn partition_validation() {
        assert!(Partition::new(3, vec![vec![0, 1], vec![2]]).is_ok());
        assert!(Partition::new(3, vec![vec![0, 1]]).is_err());
        assert!(Partition::new(3, vec![vec![0, 1], vec![1, 2]]).is_err());
        assert!(Partition::new(3, vec![vec![0, 1, 2], vec![]]).is_err());
        assert!(Partition::new(0, vec![]).is_err());
    }

    #[test]
    fn combination_counts() {
        assert_eq!(combinations(4, 2).len(), 6);
        assert_eq!(combinations(4, 1), vec![vec![0], vec![1], vec![2], vec![3]]);
        assert_eq!(combinations(8, 2).len(), binomial(8, 2) as usize);
        assert!(combinations(2, 3).is_empty());
    }

    proptest! {
        #[test]
        fn partitions_cover_disjointly(n in 1usize..200, c in 1usize..40, seed in any::<u64>()) {
            let p = make_partition(n, c, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(p.len(), n.div_ceil(c));
            let mut all: Vec<usize> = p.cells().iter().flatten().copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert!(Partition::new(n, p.cells().to_vec()).is_ok());
        }

        #[test]
        fn sampled_plans_are_valid(n in 1usize..100, c in 1usize..10, m in 1usize..5, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = make_partition(n, c, &mut rng).unwrap();
            let cells = p.len();
            let plan = GradPlan::sample(p, m, &mut rng).unwrap();
            let k = m.min(cells);
            prop_assert_eq!(plan.grad_cells().len(), k);
            prop_assert_eq!(plan.scale_encoder, cells as f64 / k as f64);
            prop_assert_eq!(plan.frozen_cells().count(), cells - k);
            let live = plan.live_rows().len();
            let frozen: usize = plan.frozen_cells().map(<[usize]>::len).sum();
            prop_assert_eq!(live + frozen, n);
        }
    }
}
