//! Exhaustive solver for small binary least-squares problems.
//!
//! Instances are `L(w) = ||A w - b||^2` over `w in {-1, +1}^n`. They give
//! the flip optimizers a ground truth: with `n <= 24` every sign vector can
//! be enumerated.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::optimizers::{bop2nd_step, bop_step, BinaryParam, OptimizerConfig};
use crate::tensor::Tensor;

pub const MAX_DIM: usize = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticObjective {
    rows: usize,
    n: usize,
    /// Row-major `rows x n`.
    a: Vec<f64>,
    b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimum {
    pub w: Vec<f64>,
    pub loss: f64,
}

impl SyntheticObjective {
    pub fn new(rows: usize, n: usize, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if rows == 0 || n == 0 || a.len() != rows * n || b.len() != rows {
            return Err(Error::shape("SyntheticObjective", &[rows, n], &[a.len(), b.len()]));
        }
        if n > MAX_DIM {
            return Err(Error::Capacity { n, limit: MAX_DIM });
        }
        if !a.iter().chain(&b).all(|x| x.is_finite()) {
            return Err(Error::Data("objective coefficients must be finite".into()));
        }
        Ok(Self { rows, n, a, b })
    }

    /// Gaussian `A` with `b = A w0` for a random sign vector `w0`.
    pub fn planted(seed: u64, rows: usize, n: usize) -> Result<(Self, Vec<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..rows * n).map(|_| rng.sample(StandardNormal)).collect();
        let w0: Vec<f64> = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let mut b = vec![0.0; rows];
        matvec(&a, rows, n, &w0, &mut b);
        Ok((Self::new(rows, n, a, b)?, w0))
    }

    /// Gaussian `A` and `b`.
    pub fn random(seed: u64, rows: usize, n: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..rows * n).map(|_| rng.sample(StandardNormal)).collect();
        let b: Vec<f64> = (0..rows).map(|_| rng.sample(StandardNormal)).collect();
        Self::new(rows, n, a, b)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn matrix(&self) -> &[f64] {
        &self.a
    }

    pub fn target(&self) -> &[f64] {
        &self.b
    }

    fn residual(&self, w: &[f64], out: &mut [f64]) {
        matvec(&self.a, self.rows, self.n, w, out);
        for (r, b) in out.iter_mut().zip(&self.b) {
            *r -= b;
        }
    }

    /// `||A w - b||^2` for any real `w`.
    pub fn loss(&self, w: &[f64]) -> Result<f64> {
        if w.len() != self.n {
            return Err(Error::shape("objective loss", &[self.n], &[w.len()]));
        }
        let mut r = vec![0.0; self.rows];
        self.residual(w, &mut r);
        Ok(r.iter().map(|x| x * x).sum())
    }

    /// Text format: a `rows n` header line, `rows` lines of `A`, then one
    /// line holding `b`. Whitespace separated.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |m: String| Error::Parse {
            path: path.to_path_buf(),
            message: m,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let nums = |(i, l): (usize, &str)| -> Result<Vec<f64>> {
            l.split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| err(format!("line {}: {e}", i + 1))))
                .collect()
        };
        let header = nums(lines.next().ok_or_else(|| err("empty instance file".into()))?)?;
        if header.len() != 2 || header.iter().any(|&x| x < 1.0 || x.fract() != 0.0) {
            return Err(err("line 1: expected `rows n`".into()));
        }
        let (rows, n) = (header[0] as usize, header[1] as usize);
        let mut a = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            let line = lines.next().ok_or_else(|| err("missing matrix row".into()))?;
            let row = nums(line)?;
            if row.len() != n {
                return Err(err(format!("line {}: expected {n} values", line.0 + 1)));
            }
            a.extend(row);
        }
        let b = nums(lines.next().ok_or_else(|| err("missing target line".into()))?)?;
        Self::new(rows, n, a, b)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.rows, self.n);
        for r in 0..self.rows {
            let row: Vec<String> = self.a[r * self.n..(r + 1) * self.n].iter().map(|x| format!("{x:e}")).collect();
            writeln!(s, "{}", row.join(" ")).unwrap();
        }
        let b: Vec<String> = self.b.iter().map(|x| format!("{x:e}")).collect();
        writeln!(s, "{}", b.join(" ")).unwrap();
        s
    }
}

fn matvec(a: &[f64], rows: usize, n: usize, w: &[f64], out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate().take(rows) {
        *o = a[r * n..(r + 1) * n].iter().zip(w).map(|(x, y)| x * y).sum();
    }
}

fn code_to_signs(code: u32, n: usize) -> Vec<f64> {
    // Element j is bit (n - 1 - j) so that numeric order on codes equals
    // lexicographic order on sign vectors with -1 < +1.
    (0..n)
        .map(|j| if (code >> (n - 1 - j)) & 1 == 1 { 1.0 } else { -1.0 })
        .collect()
}

/// Exhaustive minimum over `{-1, +1}^n`; ties go to the lexicographically
/// smallest vector.
///
/// Walks the Gray code so each candidate costs one column update of the
/// residual; any candidate near the incumbent is re-scored from scratch so
/// the returned loss is exactly `loss(w*)`.
pub fn brute_force_optimum(obj: &SyntheticObjective) -> Result<Optimum> {
    let n = obj.n;
    if n > MAX_DIM {
        return Err(Error::Capacity { n, limit: MAX_DIM });
    }
    let rows = obj.rows;
    let mut w = vec![-1.0; n];
    let mut residual = vec![0.0; rows];
    obj.residual(&w, &mut residual);

    let mut best_code = 0u32;
    let mut best_loss = obj.loss(&w)?;
    let total = 1u64 << n;
    for i in 1..total {
        let p = i.trailing_zeros() as usize;
        let j = n - 1 - p;
        w[j] = -w[j];
        let delta = 2.0 * w[j];
        for (r, res) in residual.iter_mut().enumerate() {
            *res += delta * obj.a[r * n + j];
        }
        if i % 65_536 == 0 {
            obj.residual(&w, &mut residual);
        }
        let approx: f64 = residual.iter().map(|x| x * x).sum();
        if approx <= best_loss + 1e-9 * (1.0 + best_loss) {
            let code = (i ^ (i >> 1)) as u32;
            let exact = obj.loss(&w)?;
            if exact < best_loss || (exact == best_loss && code < best_code) {
                best_loss = exact;
                best_code = code;
            }
        }
    }
    Ok(Optimum {
        w: code_to_signs(best_code, n),
        loss: best_loss,
    })
}

/// `2 A^T (A w - b)`.
pub fn objective_gradient(obj: &SyntheticObjective, w: &[f64]) -> Result<Vec<f64>> {
    if w.len() != obj.n {
        return Err(Error::shape("objective_gradient", &[obj.n], &[w.len()]));
    }
    let mut r = vec![0.0; obj.rows];
    obj.residual(w, &mut r);
    let mut g = vec![0.0; obj.n];
    for (row, &res) in r.iter().enumerate() {
        for (j, gj) in g.iter_mut().enumerate() {
            *gj += 2.0 * obj.a[row * obj.n + j] * res;
        }
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FlipRule {
    Bop { gamma: f64, tau: f64 },
    Bop2nd(OptimizerConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleRun {
    /// First step (1-based) after which the loss matched the target.
    pub reached_at: Option<usize>,
    pub final_loss: f64,
    pub final_w: Vec<f64>,
    pub flips: u64,
}

/// Runs a flip optimizer on the full-batch gradient of `obj` from `start`.
/// Success means `|loss - target| <= tol` after some step; a start that
/// already matches counts as step 0.
pub fn run_flip_optimizer(
    obj: &SyntheticObjective,
    rule: FlipRule,
    start: &[f64],
    steps: usize,
    target: f64,
    tol: f64,
) -> Result<OracleRun> {
    let mut param = BinaryParam::new(Tensor::from_vec(start.to_vec()))?;
    let mut reached_at = ((obj.loss(start)? - target).abs() <= tol).then_some(0);
    let mut flips = 0;
    for step in 1..=steps {
        let g = Tensor::from_vec(objective_gradient(obj, param.weights().data())?);
        let report = match rule {
            FlipRule::Bop { gamma, tau } => bop_step(&mut param, &g, gamma, tau)?,
            FlipRule::Bop2nd(cfg) => bop2nd_step(&mut param, &g, &cfg)?,
        };
        flips += report.flips;
        if reached_at.is_none() && (obj.loss(param.weights().data())? - target).abs() <= tol {
            reached_at = Some(step);
        }
    }
    let final_w = param.weights().data().to_vec();
    Ok(OracleRun {
        reached_at,
        final_loss: obj.loss(&final_w)?,
        final_w,
        flips,
    })
}

pub fn random_signs(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag_example() -> SyntheticObjective {
        // (w1 - 0.8)^2 + (w2 + 0.3)^2
        SyntheticObjective::new(2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.8, -0.3]).unwrap()
    }

    #[test]
    fn four_case_enumeration() {
        let obj = diag_example();
        let table = [
            ([-1.0, -1.0], 3.73),
            ([-1.0, 1.0], 4.93),
            ([1.0, 1.0], 1.73),
            ([1.0, -1.0], 0.53),
        ];
        for (w, l) in table {
            assert!((obj.loss(&w).unwrap() - l).abs() < 1e-12);
        }
        let opt = brute_force_optimum(&obj).unwrap();
        assert_eq!(opt.w, vec![1.0, -1.0]);
        assert!((opt.loss - 0.53).abs() < 1e-12);
    }

    #[test]
    fn planted_optimum_is_recovered_exactly() {
        for seed in 0..5 {
            let (obj, w0) = SyntheticObjective::planted(seed, 8, 8).unwrap();
            let opt = brute_force_optimum(&obj).unwrap();
            assert_eq!(opt.w, w0);
            assert_eq!(opt.loss, 0.0);
        }
    }

    #[test]
    fn ties_break_lexicographically() {
        // Loss depends only on w2, so w1 = -1 must win.
        let obj = SyntheticObjective::new(1, 2, vec![0.0, 1.0], vec![1.0]).unwrap();
        let opt = brute_force_optimum(&obj).unwrap();
        assert_eq!(opt.w, vec![-1.0, 1.0]);
        let flat = SyntheticObjective::new(1, 3, vec![0.0; 3], vec![0.0]).unwrap();
        assert_eq!(brute_force_optimum(&flat).unwrap().w, vec![-1.0; 3]);
    }

    #[test]
    fn optimum_beats_random_samples() {
        let obj = SyntheticObjective::random(11, 6, 6).unwrap();
        let opt = brute_force_optimum(&obj).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let w = random_signs(6, &mut rng);
            assert!(opt.loss <= obj.loss(&w).unwrap());
        }
    }

    #[test]
    fn capacity_is_enforced() {
        let err = SyntheticObjective::new(1, 25, vec![0.0; 25], vec![0.0]).unwrap_err();
        assert!(matches!(err, Error::Capacity { n: 25, limit: 24 }));
    }

    #[test]
    fn gradient_examples() {
        let obj = SyntheticObjective::new(2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(objective_gradient(&obj, &[1.0, -1.0]).unwrap(), vec![2.0, -2.0]);
        let (obj, w0) = SyntheticObjective::planted(4, 5, 5).unwrap();
        assert!(objective_gradient(&obj, &w0).unwrap().iter().all(|&g| g == 0.0));
        assert!(objective_gradient(&obj, &[1.0]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let obj = SyntheticObjective::random(21, 7, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = random_signs(5, &mut rng);
        let g = objective_gradient(&obj, &w).unwrap();
        let h = 1e-4;
        for j in 0..5 {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[j] += h;
            wm[j] -= h;
            let fd = (obj.loss(&wp).unwrap() - obj.loss(&wm).unwrap()) / (2.0 * h);
            assert!((fd - g[j]).abs() <= 1e-8 * (1.0 + g[j].abs()), "{fd} vs {}", g[j]);
        }
    }

    #[test]
    fn instance_text_round_trips() {
        let obj = SyntheticObjective::random(2, 3, 4).unwrap();
        let back = SyntheticObjective::parse(&obj.to_text(), Path::new("x")).unwrap();
        assert_eq!(back, obj);
        assert!(SyntheticObjective::parse("2 2\n1 2\n", Path::new("x")).is_err());
    }
}
