//! Exact top-k inner-product search over f32 rows.
//!
//! Each similarity is the sequential f64 sum `Σ_d q[d]·b[d]` with both
//! factors widened from f32, so any scalar loop in the same order reproduces
//! it bit for bit. The kernel gets its speed from tiling: a tile of bank rows
//! is multiplied against a transposed block of queries, every accumulator
//! still walking `d` in order. The kernel uses fused multiply-add; a product
//! of two f32 values is exact in f64, so the fused and unfused sums agree.
//!
//! Work is split into (query group × bank shard) units. Each unit keeps a
//! bounded best-k list per query; partial lists are merged in shard order.
//! Candidates are totally ordered (similarity descending, then bank index
//! ascending), so the output does not depend on shard size or thread count.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use ndarray::ArrayView2;
use rayon::prelude::*;

use crate::error::{Error, Result};

const QUERY_TILE: usize = 16;
const ROW_TILE: usize = 4;
/// Bank rows scanned per query tile before moving to the next tile.
const ROW_BLOCK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchOptions {
    /// Bank rows per work unit.
    pub shard_rows: usize,
    /// Queries per work unit.
    pub query_group: usize,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            shard_rows: 1 << 18,
            query_group: 128,
        }
    }
}

/// A bank row with its similarity; `Ord` ranks better candidates higher.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub sim: f64,
    pub index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sim
            .total_cmp(&other.sim)
            .then_with(|| other.index.cmp(&self.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Bounded best-k selection.
#[derive(Debug, Clone)]
struct TopK {
    k: usize,
    heap: BinaryHeap<Reverse<Candidate>>,
}

impl TopK {
    fn new(k: usize) -> Self {
        TopK {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    #[inline]
    fn push(&mut self, c: Candidate) {
        if self.heap.len() < self.k {
            self.heap.push(Reverse(c));
        } else if let Some(mut worst) = self.heap.peek_mut() {
            if c > worst.0 {
                *worst = Reverse(c);
            }
        }
    }

    fn into_sorted(self) -> Vec<Candidate> {
        let mut v: Vec<Candidate> = self.heap.into_iter().map(|r| r.0).collect();
        v.sort_unstable_by(|a, b| b.cmp(a));
        v
    }
}

/// Neighbours of every query, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub k: usize,
    pub indices: Vec<usize>,
    pub sims: Vec<f64>,
}

impl RetrievalResult {
    pub fn num_queries(&self) -> usize {
        self.indices.len() / self.k.max(1)
    }

    pub fn neighbors(&self, query: usize) -> (&[usize], &[f64]) {
        let r = query * self.k..(query + 1) * self.k;
        (&self.indices[r.clone()], &self.sims[r])
    }
}

/// Reference similarity: the sequential f64 sum the kernel reproduces.
pub fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        s += f64::from(*x) * f64::from(*y);
    }
    s
}

/// Exact top-`k` bank rows by inner product for every query row.
pub fn topk_search(bank: ArrayView2<f32>, queries: ArrayView2<f32>, k: usize) -> Result<RetrievalResult> {
    topk_search_with(bank, queries, k, SearchOptions::default())
}

pub fn topk_search_with(
    bank: ArrayView2<f32>,
    queries: ArrayView2<f32>,
    k: usize,
    opts: SearchOptions,
) -> Result<RetrievalResult> {
    let (b, d) = bank.dim();
    if queries.ncols() != d {
        return Err(Error::Shape(format!(
            "queries have D={}, bank D={d}",
            queries.ncols()
        )));
    }
    if k == 0 || k > b {
        return Err(Error::Parameter(format!("k={k} must be in 1..={b}")));
    }
    if queries.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite query feature".into()));
    }
    let bank = bank.as_standard_layout();
    let queries = queries.as_standard_layout();
    let bank_data = bank.as_slice().expect("standard layout");
    let query_data = queries.as_slice().expect("standard layout");
    let nq = queries.nrows();

    let shard_rows = opts.shard_rows.max(1);
    let group = opts.query_group.max(1);
    let n_shards = b.div_ceil(shard_rows);
    let n_groups = nq.div_ceil(group);

    // unit u covers query group u / n_shards and shard u % n_shards
    let partials: Vec<Vec<Vec<Candidate>>> = (0..n_groups * n_shards)
        .into_par_iter()
        .map(|u| {
            let (g, s) = (u / n_shards, u % n_shards);
            let q_range = g * group..((g + 1) * group).min(nq);
            let r_range = s * shard_rows..((s + 1) * shard_rows).min(b);
            scan_unit(bank_data, query_data, d, q_range, r_range, k)
        })
        .collect();

    let mut indices = Vec::with_capacity(nq * k);
    let mut sims = Vec::with_capacity(nq * k);
    for g in 0..n_groups {
        let q_count = ((g + 1) * group).min(nq) - g * group;
        for qi in 0..q_count {
            let mut top = TopK::new(k);
            for s in 0..n_shards {
                for &c in &partials[g * n_shards + s][qi] {
                    top.push(c);
                }
            }
            for c in top.into_sorted() {
                indices.push(c.index);
                sims.push(c.sim);
            }
        }
    }
    Ok(RetrievalResult { k, indices, sims })
}

fn scan_unit(
    bank: &[f32],
    queries: &[f32],
    d: usize,
    q_range: std::ops::Range<usize>,
    r_range: std::ops::Range<usize>,
    k: usize,
) -> Vec<Vec<Candidate>> {
    let mut tops: Vec<TopK> = q_range.clone().map(|_| TopK::new(k)).collect();
    // transposed, widened query tiles: qt[tile][dim * QUERY_TILE + lane]
    let tiles: Vec<(usize, Vec<f64>)> = q_range
        .clone()
        .step_by(QUERY_TILE)
        .map(|q0| {
            let lanes = (q_range.end - q0).min(QUERY_TILE);
            let mut qt = vec![0.0f64; d * QUERY_TILE];
            for lane in 0..lanes {
                let row = &queries[(q0 + lane) * d..(q0 + lane + 1) * d];
                for (dim, &v) in row.iter().enumerate() {
                    qt[dim * QUERY_TILE + lane] = f64::from(v);
                }
            }
            (lanes, qt)
        })
        .collect();

    let mut block_start = r_range.start;
    while block_start < r_range.end {
        let block_end = (block_start + ROW_BLOCK).min(r_range.end);
        for (t, (lanes, qt)) in tiles.iter().enumerate() {
            let tile_tops = &mut tops[t * QUERY_TILE..t * QUERY_TILE + lanes];
            scan_block(bank, qt, d, block_start..block_end, tile_tops);
        }
        block_start = block_end;
    }
    tops.into_iter().map(TopK::into_sorted).collect()
}

fn scan_block(bank: &[f32], qt: &[f64], d: usize, rows: std::ops::Range<usize>, tops: &mut [TopK]) {
    let lanes = tops.len();
    let mut r = rows.start;
    while r + ROW_TILE <= rows.end {
        let acc = tile_dots(bank, qt, d, r);
        for (i, row_acc) in acc.iter().enumerate() {
            for (lane, top) in tops.iter_mut().enumerate().take(lanes) {
                top.push(Candidate {
                    sim: row_acc[lane],
                    index: r + i,
                });
            }
        }
        r += ROW_TILE;
    }
    while r < rows.end {
        let row = &bank[r * d..(r + 1) * d];
        let mut acc = [0.0f64; QUERY_TILE];
        for (dim, &bv) in row.iter().enumerate() {
            let bv = f64::from(bv);
            let qv = &qt[dim * QUERY_TILE..(dim + 1) * QUERY_TILE];
            for lane in 0..QUERY_TILE {
                acc[lane] = bv.mul_add(qv[lane], acc[lane]);
            }
        }
        for (lane, top) in tops.iter_mut().enumerate() {
            top.push(Candidate { sim: acc[lane], index: r });
        }
        r += 1;
    }
}

#[inline(always)]
fn tile_dots(bank: &[f32], qt: &[f64], d: usize, r: usize) -> [[f64; QUERY_TILE]; ROW_TILE] {
    let mut acc = [[0.0f64; QUERY_TILE]; ROW_TILE];
    let tile = &bank[r * d..(r + ROW_TILE) * d];
    let rows: [&[f32]; ROW_TILE] = std::array::from_fn(|i| &tile[i * d..(i + 1) * d]);
    for (dim, qv) in qt.chunks_exact(QUERY_TILE).take(d).enumerate() {
        let b: [f64; ROW_TILE] = std::array::from_fn(|i| f64::from(rows[i][dim]));
        for i in 0..ROW_TILE {
            for lane in 0..QUERY_TILE {
                acc[i][lane] = b[i].mul_add(qv[lane], acc[i][lane]);
            }
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};

    fn random(n: usize, d: usize, seed: u64) -> Array2<f32> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0f32..1.0))
    }

    fn oracle(bank: &Array2<f32>, q: &[f32], k: usize) -> Vec<(usize, f64)> {
        let mut all: Vec<(usize, f64)> = bank
            .rows()
            .into_iter()
            .enumerate()
            .map(|(i, r)| (i, dot_f64(q, r.as_slice().unwrap())))
            .collect();
        all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    #[test]
    fn self_query_ranks_first() {
        let bank = random(50, 8, 1);
        let q = bank.slice(ndarray::s![17..18, ..]).to_owned();
        let res = topk_search(bank.view(), q.view(), 1).unwrap();
        assert_eq!(res.indices, vec![17]);
    }

    #[test]
    fn duplicate_rows_tie_to_smaller_index() {
        let mut bank = random(40, 5, 2);
        for mut r in bank.rows_mut() {
            let n = r.dot(&r).sqrt();
            r /= n;
        }
        let row = bank.row(30).to_owned();
        bank.row_mut(3).assign(&row);
        bank.row_mut(12).assign(&row);
        let q = row.insert_axis(ndarray::Axis(0));
        let res = topk_search(bank.view(), q.view(), 3).unwrap();
        assert_eq!(res.indices, vec![3, 12, 30]);
        assert_eq!(res.sims[0], res.sims[2]);
    }

    #[test]
    fn matches_full_sort_for_any_partition() {
        let bank = random(1003, 13, 3);
        let queries = random(37, 13, 4);
        for &(shard_rows, query_group) in &[(1 << 18, 128), (7, 3), (100, 16), (1003, 1)] {
            let opts = SearchOptions { shard_rows, query_group };
            for &k in &[1, 5, 1003] {
                let res = topk_search_with(bank.view(), queries.view(), k, opts).unwrap();
                for qi in 0..37 {
                    let expect = oracle(&bank, queries.row(qi).as_slice().unwrap(), k);
                    let (idx, sims) = res.neighbors(qi);
                    assert_eq!(idx, expect.iter().map(|e| e.0).collect::<Vec<_>>().as_slice());
                    assert_eq!(sims, expect.iter().map(|e| e.1).collect::<Vec<_>>().as_slice());
                }
            }
        }
    }

    #[test]
    fn parameter_errors() {
        let bank = random(4, 3, 5);
        assert!(matches!(topk_search(bank.view(), bank.view(), 5), Err(Error::Parameter(_))));
        assert!(matches!(topk_search(bank.view(), bank.view(), 0), Err(Error::Parameter(_))));
        let q = random(1, 2, 6);
        assert!(matches!(topk_search(bank.view(), q.view(), 1), Err(Error::Shape(_))));
    }

    #[test]
    fn growing_k_keeps_prefix() {
        let bank = random(300, 6, 7);
        let queries = random(5, 6, 8);
        let small = topk_search(bank.view(), queries.view(), 4).unwrap();
        let large = topk_search(bank.view(), queries.view(), 40).unwrap();
        for qi in 0..5 {
            assert_eq!(small.neighbors(qi).0, &large.neighbors(qi).0[..4]);
        }
    }
}
