//! Helpers shared by the integration suites: a small deterministic RNG,
//! random PSD construction, and a brute-force Fréchet-distance oracle that
//! does not touch nalgebra's eigen solver.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::{DMatrix, DVector};

/// splitmix64, used only to build test inputs.
pub struct TestRng(u64);

impl TestRng {
    pub fn new(seed: u64) -> Self {
        Self(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn matrix(&mut self, rows: usize, cols: usize) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| self.normal())
    }
}

/// Orthonormal basis by modified Gram–Schmidt on a Gaussian matrix.
pub fn random_orthogonal(d: usize, rng: &mut TestRng) -> DMatrix<f64> {
    let mut q = rng.matrix(d, d);
    for j in 0..d {
        for k in 0..j {
            let dot = q.column(j).dot(&q.column(k));
            let qk = q.column(k).clone_owned();
            q.column_mut(j).axpy(-dot, &qk, 1.0);
        }
        let n = q.column(j).norm();
        q.column_mut(j).unscale_mut(n);
    }
    q
}

/// `Q·diag(λ)·Qᵀ` with eigenvalues log-spaced over `[top/condition, top]`.
pub fn random_psd(d: usize, condition: f64, top: f64, rng: &mut TestRng) -> DMatrix<f64> {
    let q = random_orthogonal(d, rng);
    let lambda: Vec<f64> = (0..d)
        .map(|i| {
            let t = if d == 1 { 0.0 } else { i as f64 / (d - 1) as f64 };
            top * condition.powf(-t)
        })
        .collect();
    let m = DMatrix::from_fn(d, d, |i, j| q[(i, j)] * lambda[j]) * q.transpose();
    (&m + m.transpose()) * 0.5
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix.
/// Returns `(eigenvalues, eigenvectors as columns)`.
pub fn jacobi_eigen(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut a = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        if off.sqrt() <= 1e-15 * a.norm().max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[(i, i)]).collect(), v)
}

pub fn jacobi_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (lambda, v) = jacobi_eigen(a);
    let n = a.nrows();
    let m = DMatrix::from_fn(n, n, |i, j| v[(i, j)] * lambda[j].max(0.0).sqrt()) * v.transpose();
    (&m + m.transpose()) * 0.5
}

/// `Tr((Σ1Σ2)^½)` as the sum of square roots of the eigenvalues of
/// `Σ2^½ Σ1 Σ2^½`.
pub fn oracle_trace_sqrt(s1: &DMatrix<f64>, s2: &DMatrix<f64>) -> f64 {
    let r = jacobi_sqrt(s2);
    let inner = &r * s1 * &r;
    let inner = (&inner + inner.transpose()) * 0.5;
    jacobi_eigen(&inner).0.iter().map(|l| l.max(0.0).sqrt()).sum()
}

pub fn oracle_fid(m1: &DVector<f64>, s1: &DMatrix<f64>, m2: &DVector<f64>, s2: &DMatrix<f64>) -> f64 {
    (m1 - m2).norm_squared() + s1.trace() + s2.trace() - 2.0 * oracle_trace_sqrt(s1, s2)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

pub fn mir_bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_mir"))
}

pub fn run_mir(args: &[&str]) -> Output {
    Command::new(mir_bin())
        .args(args)
        .env_remove("MIR_THREADS")
        .output()
        .expect("mir binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

/// `mir synth` into `dir`, panicking with stderr on failure.
pub fn synth_fixture(dir: &Path, preset: &str, layers: usize, dim: usize, tokens: usize, seed: u64) {
    let o = run_mir(&[
        "synth",
        "--layers",
        &layers.to_string(),
        "--dim",
        &dim.to_string(),
        "--tokens",
        &tokens.to_string(),
        "--seed",
        &seed.to_string(),
        "--schedule",
        preset,
        "--out",
        path_str(dir),
    ]);
    assert!(o.status.success(), "synth failed: {}", stderr(&o));
}

/// Every regular file under `dir` with its bytes, sorted by name.
pub fn dir_snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().unwrap().is_file())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap()))
        .collect();
    out.sort();
    out
}
