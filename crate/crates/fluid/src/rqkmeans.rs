//! Residual Quantization K-Means: stacked k-means codebooks over residuals.
//!
//! A codebook holds `L` levels of `N` centroids each. Fitting runs Lloyd's
//! k-means (seeded k-means++ initialization) on the data, subtracts each
//! point's assigned centroid, and repeats on the residuals — so level 1
//! captures the coarsest structure and each further level refines what the
//! previous levels left behind. Encoding a vector walks the levels
//! greedily, picking the nearest centroid (squared Euclidean, ties to the
//! lowest index) and subtracting it; decoding sums the chosen centroids.
//!
//! Precision contract: centroids are stored as `f32`, but every distance,
//! accumulation, and residual is computed in `f64`, in a fixed order. For
//! inputs of ordinary magnitude this makes the greedy loop's algebra hold
//! bitwise: `decode(encode(z)) + final_residual(z) = z` with no tolerance,
//! and refitting with the same seed reproduces the codebook bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read as IoRead, Write as IoWrite};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::lucid::LucidCode;
use crate::{Error, Result};

/// Magic bytes of the binary codebook format.
const MAGIC: &[u8; 4] = b"RQKM";
/// Current binary format version.
const FORMAT_VERSION: u32 = 1;

/// A fitted residual-quantization codebook: `L × N × d` centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    levels: usize,
    clusters: usize,
    dim: usize,
    /// Flat `L × N × d` array, level-major then row-major.
    centroids: Vec<f32>,
    fit_seed: u64,
    format_version: u32,
}

/// Per-level fit observability: SSE traces, residual energy, iterations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    /// Mean squared norm of the input vectors (the "level-0 residual").
    pub input_mean_square: f64,
    /// One SSE value per Lloyd assignment pass, per level; non-increasing
    /// within each level.
    pub sse_trace: Vec<Vec<f64>>,
    /// Mean squared residual norm after quantizing through each level,
    /// measured against the stored (f32) centroids.
    pub mean_squared_residual: Vec<f64>,
    /// Lloyd iterations run per level.
    pub iterations: Vec<usize>,
}

/// Index of the nearest centroid to `point` among `clusters` rows of
/// `centroids` (flat `clusters × dim`, `f32` storage, `f64` distances).
/// Ties break to the lowest index.
fn nearest(centroids: &[f32], clusters: usize, dim: usize, point: &[f64]) -> (usize, f64) {
    let mut best = 0usize;
    let mut best_dist = f64::INFINITY;
    for c in 0..clusters {
        let row = &centroids[c * dim..(c + 1) * dim];
        let mut dist = 0.0f64;
        for (p, w) in point.iter().zip(row.iter()) {
            let diff = p - f64::from(*w);
            dist += diff * diff;
        }
        if dist < best_dist {
            best = c;
            best_dist = dist;
        }
    }
    (best, best_dist)
}

/// Seeded k-means++ initialization over `points` (flat `n × dim`, `f64`).
/// Returns `clusters` centroid rows as `f32`.
fn kmeans_pp_init(
    points: &[f64],
    n: usize,
    dim: usize,
    clusters: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    let mut centroids = vec![0.0f32; clusters * dim];
    let first = rng.random_range(0..n);
    for j in 0..dim {
        centroids[j] = points[first * dim + j] as f32;
    }
    // Min squared distance from each point to the centroids chosen so far.
    let mut min_dist = vec![0.0f64; n];
    for i in 0..n {
        let (_, d) = nearest(&centroids[..dim], 1, dim, &points[i * dim..(i + 1) * dim]);
        min_dist[i] = d;
    }
    for k in 1..clusters {
        let total: f64 = min_dist.iter().sum();
        let chosen = if total > 0.0 {
            // Sample proportional to squared distance (k-means++ weighting).
            let mut target = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &d) in min_dist.iter().enumerate() {
                target -= d;
                if target <= 0.0 {
                    idx = i;
                    break;
                }
            }
            idx
        } else {
            // All remaining mass is zero (duplicate-heavy data): any point
            // works; take a seeded uniform draw for determinism.
            rng.random_range(0..n)
        };
        let row = &mut centroids[k * dim..(k + 1) * dim];
        for j in 0..dim {
            row[j] = points[chosen * dim + j] as f32;
        }
        for i in 0..n {
            let (_, d) = nearest(
                &centroids[k * dim..(k + 1) * dim],
                1,
                dim,
                &points[i * dim..(i + 1) * dim],
            );
            if d < min_dist[i] {
                min_dist[i] = d;
            }
        }
    }
    centroids
}

impl Codebook {
    /// Fits `levels` stacked codebooks of `clusters` centroids on `data`
    /// (flat `n × dim`, row-major).
    ///
    /// Each level runs Lloyd's k-means from a seeded k-means++ start until
    /// the SSE relative change drops below `tol` (or assignments stop
    /// changing, or `max_iters`). A cluster left empty by an update is
    /// re-seeded to the point currently farthest from its assigned
    /// centroid, which strictly lowers SSE and keeps the trace monotone.
    /// After each level converges, every point's residual against the
    /// stored `f32` centroids feeds the next level.
    pub fn fit(
        data: &[f32],
        dim: usize,
        levels: usize,
        clusters: usize,
        max_iters: usize,
        tol: f64,
        seed: u64,
    ) -> Result<(Codebook, FitReport)> {
        if dim == 0 || levels == 0 || clusters == 0 || max_iters == 0 {
            return Err(Error::Config("fit dimensions must all be positive".into()));
        }
        if data.is_empty() || data.len() % dim != 0 {
            return Err(Error::Data(format!(
                "data length {} is not a positive multiple of dim {dim}",
                data.len()
            )));
        }
        let n = data.len() / dim;
        if n < clusters {
            return Err(Error::Data(format!(
                "cannot fit {clusters} clusters on {n} points"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite value in fit data".into()));
        }

        // Residuals start as the data itself, upcast once.
        let mut residuals: Vec<f64> = data.iter().map(|&v| f64::from(v)).collect();
        let input_mean_square = residuals.iter().map(|v| v * v).sum::<f64>() / n as f64;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut all_centroids = vec![0.0f32; levels * clusters * dim];
        let mut report = FitReport {
            input_mean_square,
            sse_trace: Vec::with_capacity(levels),
            mean_squared_residual: Vec::with_capacity(levels),
            iterations: Vec::with_capacity(levels),
        };

        let mut assign = vec![0usize; n];
        let mut dist = vec![0.0f64; n];
        for level in 0..levels {
            let mut centroids = kmeans_pp_init(&residuals, n, dim, clusters, &mut rng);
            let mut trace: Vec<f64> = Vec::new();
            let mut iters = 0usize;
            loop {
                // Assignment pass: nearest centroid per point, SSE in f64.
                let mut sse = 0.0f64;
                let mut changed = false;
                for i in 0..n {
                    let (c, d) = nearest(&centroids, clusters, dim, point(&residuals, i, dim));
                    if assign[i] != c {
                        changed = true;
                    }
                    assign[i] = c;
                    dist[i] = d;
                    sse += d;
                }
                let converged = match trace.last() {
                    Some(&prev) => {
                        !changed || (prev - sse).abs() <= tol * prev.max(f64::MIN_POSITIVE)
                    }
                    None => false,
                };
                trace.push(sse);
                iters += 1;
                if converged || iters >= max_iters {
                    break;
                }
                // Update pass: cluster means in f64, fixed point order.
                let mut sums = vec![0.0f64; clusters * dim];
                let mut counts = vec![0u64; clusters];
                for i in 0..n {
                    counts[assign[i]] += 1;
                    let row = &mut sums[assign[i] * dim..(assign[i] + 1) * dim];
                    for (s, p) in row.iter_mut().zip(point(&residuals, i, dim)) {
                        *s += *p;
                    }
                }
                // Re-seed empty clusters to the farthest point, one at a
                // time, so no two empty clusters claim the same point.
                for c in 0..clusters {
                    if counts[c] == 0 {
                        let far = farthest(&dist);
                        counts[c] = 1;
                        dist[far] = 0.0;
                        let row = &mut sums[c * dim..(c + 1) * dim];
                        for (s, p) in row.iter_mut().zip(point(&residuals, far, dim)) {
                            *s = *p;
                        }
                    }
                }
                for c in 0..clusters {
                    let row = &mut centroids[c * dim..(c + 1) * dim];
                    for (w, s) in row.iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                        *w = (*s / counts[c] as f64) as f32;
                    }
                }
            }

            // Final assignment against the stored f32 centroids — the same
            // arithmetic encode() will use — then peel off this level.
            let mut sse = 0.0f64;
            for i in 0..n {
                let (c, _) = nearest(&centroids, clusters, dim, point(&residuals, i, dim));
                let row = &centroids[c * dim..(c + 1) * dim];
                let res = &mut residuals[i * dim..(i + 1) * dim];
                for (r, w) in res.iter_mut().zip(row.iter()) {
                    *r -= f64::from(*w);
                }
                sse += res.iter().map(|r| r * r).sum::<f64>();
            }
            report.sse_trace.push(trace);
            report.mean_squared_residual.push(sse / n as f64);
            report.iterations.push(iters);
            all_centroids[level * clusters * dim..(level + 1) * clusters * dim]
                .copy_from_slice(&centroids);
        }

        let codebook = Codebook {
            levels,
            clusters,
            dim,
            centroids: all_centroids,
            fit_seed: seed,
            format_version: FORMAT_VERSION,
        };
        Ok((codebook, report))
    }

    /// Builds a codebook directly from nested `L × N × d` centroid rows
    /// (used by tests and tools; shape-checked).
    pub fn from_centroids(levels: Vec<Vec<Vec<f32>>>, fit_seed: u64) -> Result<Codebook> {
        if levels.is_empty() || levels[0].is_empty() || levels[0][0].is_empty() {
            return Err(Error::Config("centroid array must be non-empty".into()));
        }
        let clusters = levels[0].len();
        let dim = levels[0][0].len();
        let mut flat = Vec::with_capacity(levels.len() * clusters * dim);
        for level in &levels {
            if level.len() != clusters {
                return Err(Error::Config("ragged centroid array: cluster count varies".into()));
            }
            for row in level {
                if row.len() != dim {
                    return Err(Error::Config("ragged centroid array: dim varies".into()));
                }
                flat.extend_from_slice(row);
            }
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite centroid".into()));
        }
        Ok(Codebook {
            levels: levels.len(),
            clusters,
            dim,
            centroids: flat,
            fit_seed,
            format_version: FORMAT_VERSION,
        })
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn clusters(&self) -> usize {
        self.clusters
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fit_seed(&self) -> u64 {
        self.fit_seed
    }

    /// One centroid row (0-based level and cluster).
    pub fn centroid(&self, level: usize, cluster: usize) -> &[f32] {
        let start = (level * self.clusters + cluster) * self.dim;
        &self.centroids[start..start + self.dim]
    }

    /// Greedy residual encoding of `z` to an `L`-tuple slice code.
    ///
    /// At each level the nearest centroid (ties to the lowest index) is
    /// chosen and subtracted in `f64`; the tuple of chosen indices is the
    /// code. See [`Codebook::encode_with_residual`] for the residual.
    pub fn encode(&self, z: &[f32]) -> Result<LucidCode> {
        Ok(self.encode_with_residual(z)?.0)
    }

    /// [`Codebook::encode`] plus the final residual `z − decode(code)`,
    /// exactly as produced by the greedy loop.
    pub fn encode_with_residual(&self, z: &[f32]) -> Result<(LucidCode, Vec<f64>)> {
        if z.len() != self.dim {
            return Err(Error::Data(format!(
                "input has dim {}, codebook expects {}",
                z.len(),
                self.dim
            )));
        }
        let mut residual: Vec<f64> = z.iter().map(|&v| f64::from(v)).collect();
        let mut codewords = Vec::with_capacity(self.levels);
        for level in 0..self.levels {
            let level_rows =
                &self.centroids[level * self.clusters * self.dim..(level + 1) * self.clusters * self.dim];
            let (c, _) = nearest(level_rows, self.clusters, self.dim, &residual);
            let row = &level_rows[c * self.dim..(c + 1) * self.dim];
            for (r, w) in residual.iter_mut().zip(row.iter()) {
                *r -= f64::from(*w);
            }
            codewords.push(c as u32);
        }
        Ok((LucidCode::slice(codewords), residual))
    }

    /// Reconstruction: the sum over levels of the chosen centroids,
    /// accumulated in `f64` in level order (matching the encode loop).
    pub fn decode(&self, code: &LucidCode) -> Result<Vec<f64>> {
        self.decode_levels(code, code.codewords.len())
    }

    /// Reconstruction truncated to the first `through` levels.
    pub fn decode_levels(&self, code: &LucidCode, through: usize) -> Result<Vec<f64>> {
        if code.codewords.len() != self.levels {
            return Err(Error::Data(format!(
                "code has {} levels, codebook expects {}",
                code.codewords.len(),
                self.levels
            )));
        }
        if through > self.levels {
            return Err(Error::Data(format!(
                "cannot decode through level {through} of {}",
                self.levels
            )));
        }
        let mut out = vec![0.0f64; self.dim];
        for (level, &c) in code.codewords.iter().take(through).enumerate() {
            if c as usize >= self.clusters {
                return Err(Error::Data(format!(
                    "codeword {c} at level {} out of range for N={}",
                    level + 1,
                    self.clusters
                )));
            }
            let row = self.centroid(level, c as usize);
            for (o, w) in out.iter_mut().zip(row.iter()) {
                *o += f64::from(*w);
            }
        }
        Ok(out)
    }

    /// Per-level reconstruction MSE of `data` (flat `n × dim`): entry `l`
    /// is the mean of `‖z − decode through levels 1..=l+1‖²`.
    pub fn reconstruction_curve(&self, data: &[f32]) -> Result<Vec<f64>> {
        if data.is_empty() || data.len() % self.dim != 0 {
            return Err(Error::Data(format!(
                "data length {} is not a positive multiple of dim {}",
                data.len(),
                self.dim
            )));
        }
        let n = data.len() / self.dim;
        let mut sums = vec![0.0f64; self.levels];
        for i in 0..n {
            let z = &data[i * self.dim..(i + 1) * self.dim];
            let mut residual: Vec<f64> = z.iter().map(|&v| f64::from(v)).collect();
            for level in 0..self.levels {
                let level_rows = &self.centroids
                    [level * self.clusters * self.dim..(level + 1) * self.clusters * self.dim];
                let (c, _) = nearest(level_rows, self.clusters, self.dim, &residual);
                let row = &level_rows[c * self.dim..(c + 1) * self.dim];
                for (r, w) in residual.iter_mut().zip(row.iter()) {
                    *r -= f64::from(*w);
                }
                sums[level] += residual.iter().map(|r| r * r).sum::<f64>();
            }
        }
        Ok(sums.into_iter().map(|s| s / n as f64).collect())
    }

    /// Writes the binary codebook file (magic `RQKM`, little-endian).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(self.format_version)?;
        w.write_u32::<LittleEndian>(self.levels as u32)?;
        w.write_u32::<LittleEndian>(self.clusters as u32)?;
        w.write_u32::<LittleEndian>(self.dim as u32)?;
        w.write_u64::<LittleEndian>(self.fit_seed)?;
        for &v in &self.centroids {
            w.write_f32::<LittleEndian>(v)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a binary codebook file, validating magic, version, shape, and
    /// finiteness.
    pub fn load(path: &Path) -> Result<Codebook> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Data(format!("{}: truncated codebook header", path.display())))?;
        if &magic != MAGIC {
            return Err(Error::Data(format!(
                "{}: not a codebook file (bad magic)",
                path.display()
            )));
        }
        let format_version = r.read_u32::<LittleEndian>()?;
        if format_version != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "{}: unsupported codebook format version {format_version} (expected {FORMAT_VERSION})",
                path.display()
            )));
        }
        let levels = r.read_u32::<LittleEndian>()? as usize;
        let clusters = r.read_u32::<LittleEndian>()? as usize;
        let dim = r.read_u32::<LittleEndian>()? as usize;
        let fit_seed = r.read_u64::<LittleEndian>()?;
        if levels == 0 || clusters == 0 || dim == 0 {
            return Err(Error::Data(format!("{}: degenerate codebook shape", path.display())));
        }
        let count = levels * clusters * dim;
        let mut centroids = vec![0.0f32; count];
        r.read_f32_into::<LittleEndian>(&mut centroids)
            .map_err(|_| Error::Data(format!("{}: truncated centroid block", path.display())))?;
        let mut tail = [0u8; 1];
        if r.read(&mut tail)? != 0 {
            return Err(Error::Data(format!(
                "{}: trailing bytes after centroid block",
                path.display()
            )));
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("{}: non-finite centroid", path.display())));
        }
        Ok(Codebook { levels, clusters, dim, centroids, fit_seed, format_version })
    }

    /// JSON export for human inspection (not the authoritative format).
    pub fn export_json(&self, path: &Path) -> Result<()> {
        let nested: Vec<Vec<Vec<f32>>> = (0..self.levels)
            .map(|l| (0..self.clusters).map(|c| self.centroid(l, c).to_vec()).collect())
            .collect();
        let doc = serde_json::json!({
            "format_version": self.format_version,
            "levels": self.levels,
            "clusters": self.clusters,
            "dim": self.dim,
            "fit_seed": self.fit_seed,
            "centroids": nested,
        });
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, &doc)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}

fn point(flat: &[f64], i: usize, dim: usize) -> &[f64] {
    &flat[i * dim..(i + 1) * dim]
}

/// Index of the largest distance, ties to the lowest index.
fn farthest(dist: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &d) in dist.iter().enumerate() {
        if d > dist[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    /// Deterministic blob data: `k` gaussian-ish clusters in `dim` dims.
    fn blobs(k: usize, per: usize, dim: usize, spread: f64, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..dim).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect())
            .collect();
        let mut data = Vec::with_capacity(k * per * dim);
        for c in &centers {
            for _ in 0..per {
                for &cj in c {
                    // Sum of two uniforms, centered: cheap symmetric noise.
                    let noise = (rng.random::<f64>() + rng.random::<f64>() - 1.0) * spread;
                    data.push((cj + noise) as f32);
                }
            }
        }
        data
    }

    #[test]
    fn single_centroid_is_the_mean() {
        let data = [0.0f32, 0.0, 2.0, 0.0];
        let (cb, report) = Codebook::fit(&data, 2, 1, 1, 10, 1e-9, 1).unwrap();
        assert_eq!(cb.centroid(0, 0), &[1.0, 0.0]);
        assert!((report.mean_squared_residual[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn n_equals_data_gives_exact_cover() {
        let data = [0.0f32, 0.0, 4.0, 0.0, 0.0, 4.0, 4.0, 4.0];
        let (cb, report) = Codebook::fit(&data, 2, 1, 4, 50, 1e-9, 3).unwrap();
        assert!(report.mean_squared_residual[0] < 1e-12);
        // Every point encodes with zero residual.
        for i in 0..4 {
            let (_, residual) = cb.encode_with_residual(&data[i * 2..i * 2 + 2]).unwrap();
            assert!(residual.iter().all(|&r| r == 0.0));
        }
    }

    #[test]
    fn fit_rejects_bad_input() {
        assert!(Codebook::fit(&[1.0, 2.0], 2, 1, 2, 10, 1e-6, 0).is_err()); // n < N
        assert!(Codebook::fit(&[1.0, f32::NAN], 2, 1, 1, 10, 1e-6, 0).is_err());
        assert!(Codebook::fit(&[1.0, 2.0, 3.0], 2, 1, 1, 10, 1e-6, 0).is_err()); // ragged
        assert!(Codebook::fit(&[], 2, 1, 1, 10, 1e-6, 0).is_err());
    }

    #[test]
    fn hand_codebook_greedy_trace() {
        // Level 1 picks (10,10) for z=(11,10); the residual (1,0) then picks
        // (1,0) at level 2, so the code is (1,1) and decode sums to (11,10).
        let cb = Codebook::from_centroids(
            vec![
                vec![vec![0.0, 0.0], vec![10.0, 10.0]],
                vec![vec![-1.0, 0.0], vec![1.0, 0.0]],
            ],
            0,
        )
        .unwrap();
        let code = cb.encode(&[11.0, 10.0]).unwrap();
        assert_eq!(code.codewords, vec![1, 1]);
        assert_eq!(cb.decode(&code).unwrap(), vec![11.0, 10.0]);
        // z hits a centroid sum exactly → decode(encode(z)) = z, residual 0.
        let (code2, residual) = cb.encode_with_residual(&[9.0, 10.0]).unwrap();
        assert_eq!(code2.codewords, vec![1, 0]);
        assert!(residual.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn nearest_tie_breaks_to_lowest_index() {
        let cb = Codebook::from_centroids(
            vec![vec![vec![-1.0, 0.0], vec![1.0, 0.0], vec![-1.0, 0.0]]],
            0,
        )
        .unwrap();
        // (0,5) is equidistant from all three; index 0 must win.
        assert_eq!(cb.encode(&[0.0, 5.0]).unwrap().codewords, vec![0]);
    }

    #[test]
    fn decode_plus_final_residual_reproduces_input_exactly() {
        // All arithmetic is f64 over f32-origin values of ordinary
        // magnitude, so no operation in the chain rounds: the identity is
        // bitwise, not approximate.
        let data = blobs(8, 50, 16, 1.0, 11);
        let (cb, _) = Codebook::fit(&data, 16, 3, 8, 50, 1e-9, 7).unwrap();
        for i in 0..400 {
            let z = &data[i * 16..(i + 1) * 16];
            let (code, residual) = cb.encode_with_residual(z).unwrap();
            let decoded = cb.decode(&code).unwrap();
            for j in 0..16 {
                assert_eq!(f64::from(z[j]) - decoded[j], residual[j]);
                assert_eq!(decoded[j] + residual[j], f64::from(z[j]));
            }
        }
    }

    #[test]
    fn sse_trace_monotone_and_levels_improve() {
        let data = blobs(10, 100, 8, 2.0, 23);
        let (_, report) = Codebook::fit(&data, 8, 4, 6, 100, 1e-12, 41).unwrap();
        for trace in &report.sse_trace {
            assert!(!trace.is_empty());
            for w in trace.windows(2) {
                assert!(w[1] <= w[0], "SSE rose: {} -> {}", w[0], w[1]);
            }
        }
        let mut prev = report.input_mean_square;
        for &msr in &report.mean_squared_residual {
            assert!(msr <= prev, "level residual rose: {prev} -> {msr}");
            prev = msr;
        }
    }

    #[test]
    fn reconstruction_curve_matches_report_and_decreases() {
        let data = blobs(6, 80, 8, 1.5, 5);
        let (cb, report) = Codebook::fit(&data, 8, 3, 6, 50, 1e-9, 9).unwrap();
        let curve = cb.reconstruction_curve(&data).unwrap();
        assert_eq!(curve.len(), 3);
        for w in curve.windows(2) {
            assert!(w[1] <= w[0]);
        }
        // The curve's entries are the per-level residual energies.
        for (a, b) in curve.iter().zip(&report.mean_squared_residual) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let data = blobs(5, 60, 6, 1.0, 99);
        let (a, ra) = Codebook::fit(&data, 6, 2, 5, 50, 1e-9, 1234).unwrap();
        let (b, rb) = Codebook::fit(&data, 6, 2, 5, 50, 1e-9, 1234).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.sse_trace, rb.sse_trace);
        let (c, _) = Codebook::fit(&data, 6, 2, 5, 50, 1e-9, 4321).unwrap();
        assert_ne!(a, c, "different seeds should explore different inits");
    }

    #[test]
    fn empty_cluster_reseeds_and_stays_monotone() {
        // Three tight far-apart pairs with N=5 forces empty clusters in
        // early updates on many seeds; monotonicity must survive repair.
        let mut data = Vec::new();
        for (x, y) in [(0.0f32, 0.0f32), (100.0, 0.0), (0.0, 100.0)] {
            for dx in [0.0f32, 0.1, -0.1, 0.2] {
                data.extend_from_slice(&[x + dx, y + dx]);
            }
        }
        for seed in 0..20 {
            let (_, report) = Codebook::fit(&data, 2, 1, 5, 50, 1e-12, seed).unwrap();
            for w in report.sse_trace[0].windows(2) {
                assert!(w[1] <= w[0], "seed {seed}: SSE rose after repair");
            }
        }
    }

    #[test]
    fn refit_on_subsample_keeps_level1_partitions_stable() {
        // Stand-in for "stable partitions once fit": drop every 10th point,
        // refit, and require ≥95% pairwise co-assignment agreement at level
        // 1 on the held-out points (agreement up to centroid relabeling).
        let data = blobs(8, 200, 8, 0.8, 321);
        let dim = 8;
        let n = data.len() / dim;
        let mut train = Vec::new();
        let mut held = Vec::new();
        for i in 0..n {
            if i % 10 == 9 {
                held.push(i);
            } else {
                train.extend_from_slice(&data[i * dim..(i + 1) * dim]);
            }
        }
        let (full, _) = Codebook::fit(&data, dim, 1, 8, 100, 1e-9, 55).unwrap();
        let (sub, _) = Codebook::fit(&train, dim, 1, 8, 100, 1e-9, 55).unwrap();
        let a: Vec<u32> = held
            .iter()
            .map(|&i| full.encode(&data[i * dim..(i + 1) * dim]).unwrap().codewords[0])
            .collect();
        let b: Vec<u32> = held
            .iter()
            .map(|&i| sub.encode(&data[i * dim..(i + 1) * dim]).unwrap().codewords[0])
            .collect();
        let mut agree = 0u64;
        let mut total = 0u64;
        for i in 0..a.len() {
            for j in (i + 1)..a.len() {
                total += 1;
                if (a[i] == a[j]) == (b[i] == b[j]) {
                    agree += 1;
                }
            }
        }
        let rate = agree as f64 / total as f64;
        assert!(rate >= 0.95, "pairwise assignment agreement {rate:.4} < 0.95");
    }

    #[test]
    fn binary_round_trip_is_bit_identical() {
        let data = blobs(4, 40, 5, 1.0, 2);
        let (cb, _) = Codebook::fit(&data, 5, 2, 4, 30, 1e-9, 77).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codebook.rqkm");
        cb.save(&path).unwrap();
        let back = Codebook::load(&path).unwrap();
        assert_eq!(back, cb);
        // Byte-identical on re-save.
        let path2 = dir.path().join("codebook2.rqkm");
        back.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn load_rejects_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cb.rqkm");
        let data = blobs(3, 30, 4, 1.0, 8);
        let (cb, _) = Codebook::fit(&data, 4, 1, 3, 30, 1e-9, 5).unwrap();
        cb.save(&path).unwrap();

        let good = std::fs::read(&path).unwrap();
        // Bad magic.
        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(Codebook::load(&path).is_err());
        // Truncated centroid block.
        std::fs::write(&path, &good[..good.len() - 3]).unwrap();
        assert!(Codebook::load(&path).is_err());
        // Trailing garbage.
        let mut long = good.clone();
        long.push(0);
        std::fs::write(&path, &long).unwrap();
        assert!(Codebook::load(&path).is_err());
        // Unsupported version.
        let mut vers = good.clone();
        vers[4] = 99;
        std::fs::write(&path, &vers).unwrap();
        assert!(Codebook::load(&path).is_err());
    }

    #[test]
    fn json_export_writes_inspectable_document() {
        let cb = Codebook::from_centroids(vec![vec![vec![1.5, -2.0], vec![0.0, 3.0]]], 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cb.json");
        cb.export_json(&path).unwrap();
        let doc: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(doc["levels"], 1);
        assert_eq!(doc["clusters"], 2);
        assert_eq!(doc["dim"], 2);
        assert_eq!(doc["fit_seed"], 42);
        assert_eq!(doc["centroids"][0][0][0], 1.5);
    }

    #[test]
    fn encode_is_deterministic_across_calls() {
        let data = blobs(6, 50, 8, 1.2, 17);
        let (cb, _) = Codebook::fit(&data, 8, 4, 6, 50, 1e-9, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let z: Vec<f32> =
                (0..8).map(|_| (rng.next_u32() as f32 / u32::MAX as f32) * 8.0 - 4.0).collect();
            assert_eq!(cb.encode(&z).unwrap(), cb.encode(&z).unwrap());
        }
    }
}
