//! Independent reference implementations used as test oracles. Everything
//! here is written with plain loops over `Vec`s and shares no code with the
//! library beyond its input/output types.

// Oracles index exactly as the scalar formulas do.
#![allow(dead_code, clippy::needless_range_loop)]

use accent_ge2e::features::UtteranceRecord;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// `C × M × D` nested batch of random unit vectors.
pub fn random_batch(rng: &mut impl Rng, c: usize, m: usize, d: usize) -> Vec<Vec<Vec<f64>>> {
    (0..c)
        .map(|_| (0..m).map(|_| unit((0..d).map(|_| rng.sample(StandardNormal)).collect())).collect())
        .collect()
}

pub fn flatten(batch: &[Vec<Vec<f64>>]) -> Vec<f64> {
    batch.iter().flatten().flatten().copied().collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Similarity matrix `S[(j, i)][k]` computed entry by entry. With
/// `literal`, the own-class centroid is the embedding itself.
pub fn oracle_similarity(a: &[Vec<Vec<f64>>], w: f64, b: f64, literal: bool) -> Vec<Vec<f64>> {
    let c = a.len();
    let m = a[0].len();
    let d = a[0][0].len();
    let mut s = Vec::new();
    for j in 0..c {
        for i in 0..m {
            let mut row = Vec::new();
            for k in 0..c {
                let mut centroid = vec![0.0; d];
                if k == j {
                    if literal {
                        centroid = a[j][i].clone();
                    } else {
                        for mm in 0..m {
                            if mm != i {
                                for x in 0..d {
                                    centroid[x] += a[k][mm][x] / (m - 1) as f64;
                                }
                            }
                        }
                    }
                } else {
                    for mm in 0..m {
                        for x in 0..d {
                            centroid[x] += a[k][mm][x] / m as f64;
                        }
                    }
                }
                let centroid = unit(centroid);
                row.push(w * dot(&a[j][i], &centroid) + b);
            }
            s.push(row);
        }
    }
    s
}

/// Mean over rows of `-log softmax(S_row)[target]`.
pub fn oracle_row_ce(s: &[Vec<f64>], targets: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &t) in s.iter().zip(targets) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row {
            z += (v - max).exp();
        }
        total += -(row[t] - max - z.ln());
    }
    total / s.len() as f64
}

pub fn oracle_loss(a: &[Vec<Vec<f64>>], w: f64, b: f64, literal: bool) -> f64 {
    let s = oracle_similarity(a, w, b, literal);
    let m = a[0].len();
    let targets: Vec<usize> = (0..s.len()).map(|l| l / m).collect();
    oracle_row_ce(&s, &targets)
}

/// Cosine argmax by exhaustive scan; ties resolve to the first maximum.
pub fn oracle_predict(a: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (j, c) in centroids.iter().enumerate() {
        let score = dot(a, c) / (dot(a, a).sqrt() * dot(c, c).sqrt());
        if score > best_score {
            best = j;
            best_score = score;
        }
    }
    best
}

/// Reference Adam recurrence on one scalar.
pub struct ScalarAdam {
    pub m: f64,
    pub v: f64,
    pub t: i32,
}

impl ScalarAdam {
    pub fn step(&mut self, x: f64, g: f64, lr: f64) -> f64 {
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        self.t += 1;
        self.m = b1 * self.m + (1.0 - b1) * g;
        self.v = b2 * self.v + (1.0 - b2) * g * g;
        let m_hat = self.m / (1.0 - f64::powi(b1, self.t));
        let v_hat = self.v / (1.0 - f64::powi(b2, self.t));
        x - lr * m_hat / (v_hat.sqrt() + eps)
    }
}

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let n = a.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            for k in 0..b[row].len() {
                b[row][k] -= f * b[col][k];
            }
        }
    }
    let mut x = vec![vec![0.0; b[0].len()]; n];
    for row in (0..n).rev() {
        for k in 0..b[0].len() {
            let mut s = b[row][k];
            for j in row + 1..n {
                s -= a[row][j] * x[j][k];
            }
            x[row][k] = s / a[row][row];
        }
    }
    x
}

/// Least-squares linear classifier (one-hot targets, bias column) fitted
/// on per-utterance frame means; returns its training accuracy.
pub fn least_squares_probe_accuracy(records: &[UtteranceRecord], classes: usize) -> f64 {
    let rows: Vec<Vec<f64>> = records
        .iter()
        .map(|r| {
            let (t, f) = (r.features.frames(), r.features.dims());
            let mut mean = vec![0.0; f + 1];
            for i in 0..t {
                for k in 0..f {
                    mean[k] += r.features.data()[i * f + k] as f64 / t as f64;
                }
            }
            mean[f] = 1.0;
            mean
        })
        .collect();
    let p = rows[0].len();
    let mut xtx = vec![vec![0.0; p]; p];
    let mut xty = vec![vec![0.0; classes]; p];
    for (x, r) in rows.iter().zip(records) {
        for i in 0..p {
            for j in 0..p {
                xtx[i][j] += x[i] * x[j];
            }
            xty[i][r.accent] += x[i];
        }
    }
    for (i, row) in xtx.iter_mut().enumerate() {
        row[i] += 1e-9;
    }
    let w = solve(xtx, xty);
    let correct = rows
        .iter()
        .zip(records)
        .filter(|(x, r)| {
            let scores: Vec<f64> = (0..classes).map(|k| (0..p).map(|i| x[i] * w[i][k]).sum()).collect();
            let best = (0..classes).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
            best == r.accent
        })
        .count();
    correct as f64 / records.len() as f64
}
