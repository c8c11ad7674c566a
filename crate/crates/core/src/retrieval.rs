//! Exact linear-scan retrieval, ReID-style evaluation and scan benchmarks.
//!
//! Both scans rank by ascending distance and break ties by ascending row id,
//! so rankings (and therefore CMC/mAP) are fully deterministic.

use std::io::Write;
use std::time::Instant;

use crate::codespace::{hamming_words, words_for, BinaryCode, BinaryCodeBatch};
use crate::dataset::{Label, Split, SplitProtocol};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor<D> {
    pub row: usize,
    pub distance: D,
}

/// Packed gallery codes with a parallel label table.
#[derive(Clone, Debug, PartialEq)]
pub struct HammingIndex {
    codes: BinaryCodeBatch,
    labels: Vec<Label>,
}

pub fn build_index(codes: BinaryCodeBatch, labels: Vec<Label>) -> Result<HammingIndex> {
    if codes.is_empty() {
        return Err(Error::EmptyIndex);
    }
    if codes.len() != labels.len() {
        return Err(Error::LengthMismatch { expected: codes.len(), actual: labels.len() });
    }
    if codes.len() > u32::MAX as usize {
        return Err(Error::invalid("index rows must fit in 32 bits"));
    }
    Ok(HammingIndex { codes, labels })
}

impl HammingIndex {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn bits(&self) -> usize {
        self.codes.bits()
    }

    pub fn codes(&self) -> &BinaryCodeBatch {
        &self.codes
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn code(&self, row: usize) -> BinaryCode {
        self.codes.get(row)
    }

    pub fn memory_bytes(&self) -> u64 {
        binary_memory_bytes(self.len(), self.bits())
    }
}

/// Keeps the `k` smallest `(distance << 32 | row)` keys, ascending.
fn top_k(mut keys: Vec<u64>, k: usize) -> Vec<u64> {
    if k == 0 {
        return Vec::new();
    }
    if k < keys.len() {
        keys.select_nth_unstable(k - 1);
        keys.truncate(k);
    }
    keys.sort_unstable();
    keys
}

/// Up to `k` nearest rows by Hamming distance, skipping rows whose label `exclude` accepts.
pub fn query_hamming<F>(index: &HammingIndex, query: &BinaryCode, exclude: F, k: usize) -> Result<Vec<Neighbor<u32>>>
where
    F: Fn(Label) -> bool,
{
    if query.len() != index.bits() {
        return Err(Error::LengthMismatch { expected: index.bits(), actual: query.len() });
    }
    Ok(scan_hamming(index, query.words(), exclude, k))
}

fn scan_hamming<F: Fn(Label) -> bool>(index: &HammingIndex, q: &[u64], exclude: F, k: usize) -> Vec<Neighbor<u32>> {
    let wpc = index.codes.words_per_code();
    let keys: Vec<u64> = index
        .codes
        .as_words()
        .chunks_exact(wpc)
        .zip(&index.labels)
        .enumerate()
        .filter(|(_, (_, l))| !exclude(**l))
        .map(|(row, (code, _))| ((hamming_words(code, q) as u64) << 32) | row as u64)
        .collect();
    top_k(keys, k)
        .into_iter()
        .map(|key| Neighbor { row: (key & 0xffff_ffff) as usize, distance: (key >> 32) as u32 })
        .collect()
}

/// Real-valued gallery stored as 32-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct RealIndex {
    dim: usize,
    data: Vec<f32>,
    labels: Vec<Label>,
}

pub fn build_real_index(features: &Matrix, labels: Vec<Label>) -> Result<RealIndex> {
    if features.rows() == 0 {
        return Err(Error::EmptyIndex);
    }
    if features.rows() != labels.len() {
        return Err(Error::LengthMismatch { expected: features.rows(), actual: labels.len() });
    }
    if !features.all_finite() {
        return Err(Error::NonFinite("gallery features".into()));
    }
    let data = features.as_slice().iter().map(|&x| x as f32).collect();
    Ok(RealIndex { dim: features.cols(), data, labels })
}

impl RealIndex {
    /// Wraps a row-major `f32` table directly.
    pub fn from_f32(dim: usize, data: Vec<f32>, labels: Vec<Label>) -> Result<Self> {
        if dim == 0 || data.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if data.len() != dim * labels.len() {
            return Err(Error::LengthMismatch { expected: dim * labels.len(), actual: data.len() });
        }
        Ok(Self { dim, data, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn memory_bytes(&self) -> u64 {
        real_memory_bytes(self.len(), self.dim)
    }
}

/// Up to `k` nearest rows by Euclidean distance (computed in `f32` with a
/// single sequential accumulator per row).
pub fn query_euclidean<F>(index: &RealIndex, query: &[f64], exclude: F, k: usize) -> Result<Vec<Neighbor<f64>>>
where
    F: Fn(Label) -> bool,
{
    if query.len() != index.dim {
        return Err(Error::LengthMismatch { expected: index.dim, actual: query.len() });
    }
    let q: Vec<f32> = query.iter().map(|&x| x as f32).collect();
    Ok(scan_euclidean(index, &q, exclude, k))
}

fn scan_euclidean<F: Fn(Label) -> bool>(index: &RealIndex, q: &[f32], exclude: F, k: usize) -> Vec<Neighbor<f64>> {
    let keys: Vec<u64> = index
        .data
        .chunks_exact(index.dim)
        .zip(&index.labels)
        .enumerate()
        .filter(|(_, (_, l))| !exclude(**l))
        .map(|(row, (x, _))| {
            let mut sq = 0.0f32;
            for (a, b) in x.iter().zip(q) {
                let d = a - b;
                sq += d * d;
            }
            // Bit patterns of non-negative floats sort like their values.
            ((sq.to_bits() as u64) << 32) | row as u64
        })
        .collect();
    top_k(keys, k)
        .into_iter()
        .map(|key| Neighbor {
            row: (key & 0xffff_ffff) as usize,
            distance: (f32::from_bits((key >> 32) as u32) as f64).sqrt(),
        })
        .collect()
}

/// CMC curve and mean average precision.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// `cmc[k-1]` is the fraction of queries whose first relevant item is at rank `<= k`.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub per_query_ap: Vec<f64>,
}

impl EvalReport {
    pub fn rank(&self, k: usize) -> f64 {
        assert!(k >= 1);
        self.cmc.get(k - 1).copied().unwrap_or_else(|| *self.cmc.last().expect("non-empty cmc"))
    }

    pub fn rank1(&self) -> f64 {
        self.rank(1)
    }

    /// `k,cmc` rows for k = 1..=K.
    pub fn write_cmc_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "k,cmc")?;
        for (k, v) in self.cmc.iter().enumerate() {
            writeln!(w, "{},{v}", k + 1)?;
        }
        Ok(())
    }

    /// `metric,value` rows: rank-1/5/10, mAP and query count.
    pub fn metric_rows(&self, prefix: &str) -> Vec<(String, f64)> {
        let mut rows: Vec<(String, f64)> = [1, 5, 10]
            .into_iter()
            .filter(|&k| k <= self.cmc.len())
            .map(|k| (format!("{prefix}rank{k}"), self.rank(k)))
            .collect();
        rows.push((format!("{prefix}map"), self.map));
        rows.push((format!("{prefix}queries"), self.per_query_ap.len() as f64));
        rows
    }
}

pub fn write_metrics_csv<W: Write>(w: &mut W, rows: &[(String, f64)]) -> Result<()> {
    writeln!(w, "metric,value")?;
    for (name, value) in rows {
        writeln!(w, "{name},{value}")?;
    }
    Ok(())
}

/// Scores ranked relevance lists, one per query (`true` = same identity), each
/// covering the whole ranked gallery after exclusion.
///
/// AP is the mean over relevant items of the precision at their rank.
pub fn evaluate(rankings: &[Vec<bool>], max_rank: usize) -> Result<EvalReport> {
    if rankings.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if max_rank == 0 {
        return Err(Error::invalid("CMC depth must be at least 1"));
    }
    let mut first_hits = vec![0usize; max_rank];
    let mut per_query_ap = Vec::with_capacity(rankings.len());
    for (q, ranking) in rankings.iter().enumerate() {
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        for (pos, &relevant) in ranking.iter().enumerate() {
            if relevant {
                if hits == 0 && pos < max_rank {
                    first_hits[pos] += 1;
                }
                hits += 1;
                precision_sum += hits as f64 / (pos + 1) as f64;
            }
        }
        if hits == 0 {
            return Err(Error::NoRelevant { query: q });
        }
        per_query_ap.push(precision_sum / hits as f64);
    }
    let n = rankings.len() as f64;
    let mut cmc = Vec::with_capacity(max_rank);
    let mut cumulative = 0usize;
    for h in first_hits {
        cumulative += h;
        cmc.push(cumulative as f64 / n);
    }
    let map = per_query_ap.iter().sum::<f64>() / n;
    Ok(EvalReport { cmc, map, per_query_ap })
}

/// Cross-view evaluation of codes: gallery rows from `split.gallery`, one ranked
/// scan per query, same-identity-same-view gallery records excluded.
pub fn evaluate_codes(codes: &BinaryCodeBatch, labels: &[Label], split: &Split, max_rank: usize) -> Result<EvalReport> {
    if codes.len() != labels.len() {
        return Err(Error::LengthMismatch { expected: labels.len(), actual: codes.len() });
    }
    let mut gallery = BinaryCodeBatch::with_capacity(codes.bits(), split.gallery.len())?;
    for &g in &split.gallery {
        gallery.push_words(codes.row(g));
    }
    let glabels: Vec<Label> = split.gallery.iter().map(|&g| labels[g]).collect();
    let index = build_index(gallery, glabels)?;
    let rankings = split
        .queries
        .iter()
        .map(|&q| {
            let ql = labels[q];
            scan_hamming(&index, codes.row(q), |l| SplitProtocol::excludes(ql, l), index.len())
                .into_iter()
                .map(|nb| index.labels[nb.row].identity == ql.identity)
                .collect()
        })
        .collect::<Vec<Vec<bool>>>();
    evaluate(&rankings, max_rank)
}

/// Real-valued counterpart of [`evaluate_codes`] using Euclidean ranking.
pub fn evaluate_features(features: &Matrix, labels: &[Label], split: &Split, max_rank: usize) -> Result<EvalReport> {
    if features.rows() != labels.len() {
        return Err(Error::LengthMismatch { expected: labels.len(), actual: features.rows() });
    }
    let gallery = Matrix::from_rows(&split.gallery.iter().map(|&g| features.row(g)).collect::<Vec<_>>())?;
    let glabels: Vec<Label> = split.gallery.iter().map(|&g| labels[g]).collect();
    let index = build_real_index(&gallery, glabels)?;
    let rankings = split
        .queries
        .iter()
        .map(|&q| {
            let ql = labels[q];
            let nbs = query_euclidean(&index, features.row(q), |l| SplitProtocol::excludes(ql, l), index.len())?;
            Ok(nbs.into_iter().map(|nb| index.labels[nb.row].identity == ql.identity).collect())
        })
        .collect::<Result<Vec<Vec<bool>>>>()?;
    evaluate(&rankings, max_rank)
}

/// Bytes of a packed binary gallery: `n * ceil(m/64) * 8`.
pub fn binary_memory_bytes(n: usize, bits: usize) -> u64 {
    n as u64 * words_for(bits) as u64 * 8
}

/// Bytes of a float32 gallery: `n * m * 4`.
pub fn real_memory_bytes(n: usize, dim: usize) -> u64 {
    n as u64 * dim as u64 * 4
}

/// Per-query scan times in seconds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScanTiming {
    pub mean_per_query: f64,
    pub median_per_query: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub bits: usize,
    pub gallery_size: usize,
    pub queries: usize,
    pub repetitions: usize,
    pub binary: ScanTiming,
    pub real: Option<ScanTiming>,
    pub memory_binary_bytes: u64,
    pub memory_real_bytes: u64,
}

impl BenchReport {
    pub fn rows(&self) -> Vec<(String, f64)> {
        let mut rows = vec![
            ("bits".to_string(), self.bits as f64),
            ("gallery_size".to_string(), self.gallery_size as f64),
            ("queries".to_string(), self.queries as f64),
            ("repetitions".to_string(), self.repetitions as f64),
            ("binary_mean_query_seconds".to_string(), self.binary.mean_per_query),
            ("binary_median_query_seconds".to_string(), self.binary.median_per_query),
            ("binary_total_scan_seconds".to_string(), self.binary.total),
            ("binary_memory_bytes".to_string(), self.memory_binary_bytes as f64),
            ("real_memory_bytes".to_string(), self.memory_real_bytes as f64),
        ];
        if let Some(real) = &self.real {
            rows.push(("real_mean_query_seconds".to_string(), real.mean_per_query));
            rows.push(("real_median_query_seconds".to_string(), real.median_per_query));
            rows.push(("real_total_scan_seconds".to_string(), real.total));
            rows.push(("median_speedup".to_string(), real.median_per_query / self.binary.median_per_query));
        }
        rows
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        write_metrics_csv(w, &self.rows())
    }
}

fn time_scans<F: FnMut(usize)>(queries: usize, repetitions: usize, mut scan: F) -> Result<ScanTiming> {
    if repetitions < 3 {
        return Err(Error::invalid("benchmarks need at least 3 repetitions"));
    }
    if queries == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut per_query = Vec::with_capacity(repetitions);
    let mut total = 0.0;
    for _ in 0..repetitions {
        let start = Instant::now();
        for q in 0..queries {
            scan(q);
        }
        let elapsed = start.elapsed().as_secs_f64();
        total += elapsed;
        per_query.push(elapsed / queries as f64);
    }
    let mean = per_query.iter().sum::<f64>() / repetitions as f64;
    per_query.sort_by(f64::total_cmp);
    let mid = repetitions / 2;
    let median = if repetitions % 2 == 1 { per_query[mid] } else { 0.5 * (per_query[mid - 1] + per_query[mid]) };
    Ok(ScanTiming { mean_per_query: mean, median_per_query: median, total })
}

/// Times full top-`k` Hamming scans, one per query row, `repetitions` times.
pub fn benchmark_hamming(index: &HammingIndex, queries: &BinaryCodeBatch, repetitions: usize, k: usize) -> Result<ScanTiming> {
    if queries.bits() != index.bits() {
        return Err(Error::LengthMismatch { expected: index.bits(), actual: queries.bits() });
    }
    time_scans(queries.len(), repetitions, |q| {
        std::hint::black_box(scan_hamming(index, queries.row(q), |_| false, k));
    })
}

/// Times full top-`k` Euclidean scans over a float32 gallery.
pub fn benchmark_euclidean(index: &RealIndex, queries: &Matrix, repetitions: usize, k: usize) -> Result<ScanTiming> {
    if queries.cols() != index.dim {
        return Err(Error::LengthMismatch { expected: index.dim, actual: queries.cols() });
    }
    let qs: Vec<Vec<f32>> = queries.iter_rows().map(|r| r.iter().map(|&x| x as f32).collect()).collect();
    time_scans(qs.len(), repetitions, |q| {
        std::hint::black_box(scan_euclidean(index, &qs[q], |_| false, k));
    })
}

/// Binary scan timing, optional float baseline, and the analytic memory model.
pub fn benchmark(
    index: &HammingIndex,
    binary_queries: &BinaryCodeBatch,
    real: Option<(&RealIndex, &Matrix)>,
    repetitions: usize,
    k: usize,
) -> Result<BenchReport> {
    let binary = benchmark_hamming(index, binary_queries, repetitions, k)?;
    let real = real.map(|(ri, rq)| benchmark_euclidean(ri, rq, repetitions, k)).transpose()?;
    Ok(BenchReport {
        bits: index.bits(),
        gallery_size: index.len(),
        queries: binary_queries.len(),
        repetitions,
        binary,
        real,
        memory_binary_bytes: binary_memory_bytes(index.len(), index.bits()),
        memory_real_bytes: real_memory_bytes(index.len(), index.bits()),
    })
}
