//! Hannan-Quinn criterion and grid search over `(lambda1, lambda2, lambda3)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::fit;
use crate::error::{Error, Result};
use crate::likelihood::mixture_loglik;
use crate::model::{Dataset, FitResult, GroupParams, Hyperparams};

/// Nonzero coefficients, nonzero diagonal precisions and nonzero
/// upper-triangle precisions (each symmetric pair counted once).
pub fn degrees_of_freedom(g: &GroupParams) -> usize {
    let p = g.p();
    let gamma = g.gamma.iter().filter(|&&v| v != 0.0).count();
    let mut theta = 0;
    for j in 0..p {
        for m in j..p {
            if g.theta[(j, m)] != 0.0 {
                theta += 1;
            }
        }
    }
    gamma + theta
}

/// `-2 loglik + df * log(log n)`.
pub fn hqc_value(loglik: f64, df: usize, n: usize) -> Result<f64> {
    if n <= 3 {
        return Err(Error::TooFewSamples { n, min: 4 });
    }
    Ok(-2.0 * loglik + df as f64 * (n as f64).ln().ln())
}

/// HQC of the merged groups of a fit.
pub fn hqc(ds: &Dataset, fr: &FitResult) -> Result<f64> {
    let loglik = mixture_loglik(ds, &fr.merged_groups, &fr.merged_pi)?;
    let df = fr.merged_groups.iter().map(degrees_of_freedom).sum();
    hqc_value(loglik, df, ds.n())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

/// One evaluated grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub point: GridPoint,
    pub hqc: f64,
    pub k_hat: usize,
    pub df: usize,
    pub loglik: f64,
    /// First and last entries of the fit's objective trace.
    pub objective_start: f64,
    pub objective_end: f64,
    /// Largest decrease between consecutive EM iterations.
    pub max_objective_drop: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct TuneOutcome {
    pub best: FitResult,
    pub chosen: GridPoint,
    pub table: Vec<GridRow>,
}

/// `count` geometrically spaced values from `lo` to `hi` inclusive.
pub fn geometric(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let ratio = (hi / lo).ln() / (count - 1) as f64;
            (0..count)
                .map(|i| {
                    if i == count - 1 {
                        hi
                    } else {
                        lo * (ratio * i as f64).exp()
                    }
                })
                .collect()
        }
    }
}

/// Cartesian product of the three axes, `lambda1` varying slowest.
pub fn product_grid(l1: &[f64], l2: &[f64], l3: &[f64]) -> Vec<GridPoint> {
    let mut grid = Vec::with_capacity(l1.len() * l2.len() * l3.len());
    for &lambda1 in l1 {
        for &lambda2 in l2 {
            for &lambda3 in l3 {
                grid.push(GridPoint {
                    lambda1,
                    lambda2,
                    lambda3,
                });
            }
        }
    }
    grid
}

/// Axes of the default grid: eight geometric values on `[0.01, 1] * s` for
/// `lambda1` and `lambda2`, five on `[0.1, 5] * s` for `lambda3`, with
/// `s = sqrt(max(log(p+q), 1) / n)`.
pub fn default_axes(n: usize, p: usize, q: usize) -> [Vec<f64>; 3] {
    let s = (((p + q) as f64).ln().max(1.0) / n as f64).sqrt();
    let l12 = geometric(0.01 * s, s, 8);
    [l12.clone(), l12, geometric(0.1 * s, 5.0 * s, 5)]
}

pub fn default_grid(n: usize, p: usize, q: usize) -> Vec<GridPoint> {
    let [l1, l2, l3] = default_axes(n, p, q);
    product_grid(&l1, &l2, &l3)
}

/// True if `a` should be preferred over `b` at equal HQC: larger `lambda3`,
/// then larger `lambda1`, then larger `lambda2`.
fn sparser(a: &GridPoint, b: &GridPoint) -> bool {
    (a.lambda3, a.lambda1, a.lambda2) > (b.lambda3, b.lambda1, b.lambda2)
}

/// Fits every grid point (grid index `i` uses seed `seed + i`) and returns
/// the HQC minimizer.
pub fn grid_search(
    ds: &Dataset,
    grid: &[GridPoint],
    hp_base: &Hyperparams,
    seed: u64,
) -> Result<TuneOutcome> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let fits: Vec<Result<FitResult>> = grid
        .par_iter()
        .enumerate()
        .map(|(i, pt)| {
            let hp = hp_base.clone().with_lambdas(pt.lambda1, pt.lambda2, pt.lambda3);
            fit(ds, &hp, seed.wrapping_add(i as u64))
        })
        .collect();

    let mut table = Vec::with_capacity(grid.len());
    let mut best: Option<usize> = None;
    for (i, (pt, res)) in grid.iter().zip(&fits).enumerate() {
        let row = match res {
            Ok(fr) => GridRow {
                point: *pt,
                hqc: fr.hqc,
                k_hat: fr.k_hat,
                df: fr.df,
                loglik: fr.loglik,
                objective_start: fr.objective_trace.first().copied().unwrap_or(f64::NAN),
                objective_end: fr.objective_trace.last().copied().unwrap_or(f64::NAN),
                max_objective_drop: fr.diagnostics.max_objective_drop,
                error: None,
            },
            Err(e) => GridRow {
                point: *pt,
                hqc: f64::NAN,
                k_hat: 0,
                df: 0,
                loglik: f64::NAN,
                objective_start: f64::NAN,
                objective_end: f64::NAN,
                max_objective_drop: f64::NAN,
                error: Some(e.to_string()),
            },
        };
        if row.hqc.is_finite() {
            let better = match best {
                None => true,
                Some(b) => {
                    let cur: &GridRow = &table[b];
                    row.hqc < cur.hqc || (row.hqc == cur.hqc && sparser(&row.point, &cur.point))
                }
            };
            if better {
                best = Some(i);
            }
        }
        table.push(row);
    }
    let Some(b) = best else {
        let details = table
            .iter()
            .map(|r| {
                format!(
                    "({}, {}, {}): {}",
                    r.point.lambda1,
                    r.point.lambda2,
                    r.point.lambda3,
                    r.error.as_deref().unwrap_or("non-finite HQC")
                )
            })
            .collect::<Vec<_>>()
            .join("; ");
        return Err(Error::AllFitsFailed {
            count: grid.len(),
            details,
        });
    };
    let best_fit = fits.into_iter().nth(b).and_then(|r| r.ok()).expect("best fit succeeded");
    Ok(TuneOutcome {
        best: best_fit,
        chosen: grid[b],
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, DMatrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn df_examples() {
        let g = GroupParams::new(
            dmatrix![1.0, 2.0; 3.0, 4.0],
            dmatrix![1.0, 0.3; 0.3, 1.0],
        )
        .unwrap();
        // 4 coefficients + 2 diagonal + 1 off-diagonal pair
        assert_eq!(degrees_of_freedom(&g), 7);
        let h1 = hqc_value(-10.0, 9, 100).unwrap();
        assert!((h1 - (20.0 + 9.0 * 100f64.ln().ln())).abs() < 1e-12);
        let h2 = hqc_value(-10.0, 10, 100).unwrap();
        assert!((h2 - h1 - 100f64.ln().ln()).abs() < 1e-12);
        let h3 = hqc_value(-9.0, 9, 100).unwrap();
        assert!((h3 - h1 + 2.0).abs() < 1e-12);
        assert!(hqc_value(0.0, 1, 3).is_err());
    }

    #[test]
    fn df_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..100 {
            let p = rng.gen_range(1..6);
            let q = rng.gen_range(0..4);
            let gamma = DMatrix::from_fn(p, q + 1, |_, _| {
                if rng.gen_bool(0.4) { rng.gen_range(-1.0..1.0) } else { 0.0 }
            });
            let mut theta = DMatrix::identity(p, p) * p as f64;
            for j in 0..p {
                for m in j + 1..p {
                    if rng.gen_bool(0.3) {
                        theta[(j, m)] = 0.5;
                        theta[(m, j)] = 0.5;
                    }
                }
            }
            let g = GroupParams::new(gamma.clone(), theta.clone()).unwrap();
            let brute = gamma.iter().filter(|v| **v != 0.0).count()
                + (0..p)
                    .flat_map(|j| (0..p).map(move |m| (j, m)))
                    .filter(|&(j, m)| j <= m && theta[(j, m)] != 0.0)
                    .count();
            assert_eq!(degrees_of_freedom(&g), brute);
        }
    }

    #[test]
    fn grid_helpers() {
        let g = geometric(0.1, 10.0, 3);
        assert!((g[1] - 1.0).abs() < 1e-12);
        assert_eq!(g[2], 10.0);
        let grid = default_grid(300, 20, 20);
        assert_eq!(grid.len(), 8 * 8 * 5);
        let pts = product_grid(&[1.0, 2.0], &[3.0], &[4.0, 5.0]);
        assert_eq!(pts.len(), 4);
        assert_eq!(pts[1].lambda3, 5.0);
    }

    #[test]
    fn tie_break_prefers_sparser() {
        let a = GridPoint { lambda1: 0.1, lambda2: 0.1, lambda3: 1.0 };
        let b = GridPoint { lambda1: 0.2, lambda2: 0.2, lambda3: 0.5 };
        assert!(sparser(&a, &b));
        let c = GridPoint { lambda1: 0.2, lambda2: 0.0, lambda3: 1.0 };
        assert!(sparser(&c, &a));
    }
}
