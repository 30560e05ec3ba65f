//! Spread of set encodings across random partitions of one set.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::SetEncoder;
use crate::error::{ensure, Result};
use crate::matrix::Matrix;

pub const DEFAULT_CHUNK_COUNTS: [usize; 6] = [1, 2, 4, 8, 16, 32];
pub const DEFAULT_PARTITIONS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub chunks: usize,
    /// Mean over features of the per-feature variance.
    pub mean: f64,
    /// Standard deviation over features of the per-feature variance.
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub partitions: usize,
    pub set_size: usize,
    pub rows: Vec<VarianceRow>,
}

impl VarianceReport {
    pub fn max_mean(&self) -> f64 {
        self.rows.iter().map(|r| r.mean).fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("chunks,mean,std\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:.16e},{:.16e}\n", r.chunks, r.mean, r.std));
        }
        out
    }
}

/// Random partition of `0..n` into `count` chunks whose sizes differ by at
/// most one. Chunk order is random; each chunk lists its indices in
/// increasing order.
pub fn random_chunks<R: Rng + ?Sized>(n: usize, count: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    ensure!(count >= 1 && count <= n, "cannot split {n} elements into {count} chunks");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let (base, extra) = (n / count, n % count);
    let mut chunks = Vec::with_capacity(count);
    let mut start = 0;
    for c in 0..count {
        let len = base + usize::from(c < extra);
        let mut chunk = order[start..start + len].to_vec();
        chunk.sort_unstable();
        chunks.push(chunk);
        start += len;
    }
    Ok(chunks)
}

/// Encodes each chunk separately and averages the chunk encodings. This is
/// how encoders without a streaming form are run on chunked input.
pub fn chunk_mean<F>(x: &Matrix, chunks: &[Vec<usize>], mut encode_chunk: F) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> Result<Matrix>,
{
    ensure!(!chunks.is_empty(), "empty partition");
    let mut total: Option<Matrix> = None;
    for chunk in chunks {
        ensure!(!chunk.is_empty(), "empty partition cell");
        let e = encode_chunk(&x.select_rows(chunk)?)?;
        match &mut total {
            Some(t) => t.add_assign(&e)?,
            None => total = Some(e),
        }
    }
    Ok(total.expect("at least one chunk").scale(1.0 / chunks.len() as f64))
}

/// Running mean and sum of squared deviations per coordinate.
struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn push(&mut self, sample: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &x) in self.mean.iter_mut().zip(&mut self.m2).zip(sample) {
            let delta = x - *m;
            *m += delta / n;
            *s += delta * (x - *m);
        }
    }

    fn variances(&self) -> Vec<f64> {
        let d = (self.n - 1) as f64;
        self.m2.iter().map(|s| s / d).collect()
    }
}

/// For each chunk count, encodes `x` under `partitions` random partitions
/// and reports the mean and standard deviation over features of the
/// unbiased per-feature variance of the encodings.
pub fn encoding_variance<R: Rng + ?Sized>(
    encoder: &dyn SetEncoder,
    x: &Matrix,
    partitions: usize,
    chunk_counts: &[usize],
    rng: &mut R,
) -> Result<VarianceReport> {
    ensure!(partitions >= 2, "need at least two partitions, got {partitions}");
    ensure!(!chunk_counts.is_empty(), "no chunk counts");
    let mut rows = Vec::with_capacity(chunk_counts.len());
    for &count in chunk_counts {
        let mut acc: Option<Welford> = None;
        for _ in 0..partitions {
            let chunks = random_chunks(x.rows(), count, rng)?;
            let z = encoder.encode_chunks(x, &chunks)?;
            acc.get_or_insert_with(|| Welford::new(z.len())).push(z.data());
        }
        let var = acc.expect("partitions >= 2").variances();
        let f = var.len() as f64;
        let mean = var.iter().sum::<f64>() / f;
        let std = if var.len() > 1 {
            (var.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (f - 1.0)).sqrt()
        } else {
            0.0
        };
        rows.push(VarianceRow { chunks: count, mean, std });
    }
    Ok(VarianceReport {
        partitions,
        set_size: x.rows(),
        rows,
    })
}
