//! Clustering agreement, group-matched estimation error, and support
//! recovery rates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FitResult, GroupParams};

fn choose2(v: usize) -> f64 {
    let v = v as f64;
    v * (v - 1.0) / 2.0
}

fn contingency(a: &[usize], b: &[usize]) -> Result<(Vec<Vec<usize>>, Vec<usize>, Vec<usize>)> {
    if a.len() != b.len() {
        return Err(Error::LabelLengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::TooFewSamples { n: a.len(), min: 2 });
    }
    let ra = a.iter().max().map_or(0, |m| m + 1);
    let rb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0usize; rb]; ra];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let rows = table.iter().map(|r| r.iter().sum()).collect();
    let cols = (0..rb).map(|c| table.iter().map(|r| r[c]).sum()).collect();
    Ok((table, rows, cols))
}

/// Chance-corrected Rand index; 0 when the expected and maximum indices
/// coincide.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    let (table, rows, cols) = contingency(a, b)?;
    let index: f64 = table.iter().flatten().map(|&c| choose2(c)).sum();
    let sa: f64 = rows.iter().map(|&c| choose2(c)).sum();
    let sb: f64 = cols.iter().map(|&c| choose2(c)).sum();
    let expected = sa * sb / choose2(a.len());
    let max = 0.5 * (sa + sb);
    if max == expected {
        return Ok(0.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Fraction of sample pairs on which the two partitions agree.
pub fn rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    let (table, rows, cols) = contingency(a, b)?;
    let total = choose2(a.len());
    let index: f64 = table.iter().flatten().map(|&c| choose2(c)).sum();
    let sa: f64 = rows.iter().map(|&c| choose2(c)).sum();
    let sb: f64 = cols.iter().map(|&c| choose2(c)).sum();
    Ok((total + 2.0 * index - sa - sb) / total)
}

fn check_dims(est: &[GroupParams], truth: &[GroupParams]) -> Result<()> {
    let (Some(e), Some(t)) = (est.first(), truth.first()) else {
        return Err(Error::Dimension("empty group list".into()));
    };
    for g in est.iter().chain(truth) {
        if g.gamma.shape() != t.gamma.shape() || g.theta.shape() != t.theta.shape() {
            return Err(Error::Dimension(format!(
                "groups of shape {:?} and {:?}",
                e.gamma.shape(),
                g.gamma.shape()
            )));
        }
    }
    Ok(())
}

/// Nearest true group for every estimated group (ties go to the smaller
/// index).
pub fn match_groups(est: &[GroupParams], truth: &[GroupParams]) -> Result<Vec<usize>> {
    check_dims(est, truth)?;
    Ok(est
        .iter()
        .map(|e| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, t) in truth.iter().enumerate() {
                let d = e.sq_distance(t);
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            best
        })
        .collect())
}

/// Minimum-cost perfect assignment of rows to columns of a square matrix
/// (Hungarian method with potentials). Returns `assign[row] = col`.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

/// Optimal bijection when the group counts agree, nearest-truth matching
/// otherwise.
pub fn align_groups(est: &[GroupParams], truth: &[GroupParams]) -> Result<Vec<usize>> {
    check_dims(est, truth)?;
    if est.len() != truth.len() {
        return match_groups(est, truth);
    }
    let cost: Vec<Vec<f64>> = est
        .iter()
        .map(|e| truth.iter().map(|t| e.sq_distance(t)).collect())
        .collect();
    Ok(hungarian(&cost))
}

/// `(1/K_hat) sum_l ||Theta_hat_l - Theta*_match(l)||_F`.
pub fn rmse_theta(est: &[GroupParams], truth: &[GroupParams], matching: &[usize]) -> f64 {
    est.iter()
        .zip(matching)
        .map(|(e, &k)| (&e.theta - &truth[k].theta).norm())
        .sum::<f64>()
        / est.len() as f64
}

/// `(1/K_hat) sum_l ||Gamma_hat_l - Gamma*_match(l)||_F`.
pub fn rmse_gamma(est: &[GroupParams], truth: &[GroupParams], matching: &[usize]) -> f64 {
    est.iter()
        .zip(matching)
        .map(|(e, &k)| (&e.gamma - &truth[k].gamma).norm())
        .sum::<f64>()
        / est.len() as f64
}

/// Averages per-group rates over the groups where they are defined; NaN if
/// none is.
fn average_rates(per_group: impl Iterator<Item = (usize, usize, usize, usize)>) -> (f64, f64) {
    let (mut tpr, mut ntpr, mut fpr, mut nfpr) = (0.0, 0, 0.0, 0);
    for (tp, pos, fp, neg) in per_group {
        if pos > 0 {
            tpr += tp as f64 / pos as f64;
            ntpr += 1;
        }
        if neg > 0 {
            fpr += fp as f64 / neg as f64;
            nfpr += 1;
        }
    }
    let avg = |s: f64, c: usize| if c == 0 { f64::NAN } else { s / c as f64 };
    (avg(tpr, ntpr), avg(fpr, nfpr))
}

fn rates(pairs: impl Iterator<Item = (f64, f64)>) -> (usize, usize, usize, usize) {
    let (mut tp, mut pos, mut fp, mut neg) = (0, 0, 0, 0);
    for (t, e) in pairs {
        if t != 0.0 {
            pos += 1;
            if e != 0.0 {
                tp += 1;
            }
        } else {
            neg += 1;
            if e != 0.0 {
                fp += 1;
            }
        }
    }
    (tp, pos, fp, neg)
}

/// Edge recovery over the upper triangle `j < m`.
pub fn tpr_fpr_theta(est: &[GroupParams], truth: &[GroupParams], matching: &[usize]) -> (f64, f64) {
    average_rates(est.iter().zip(matching).map(|(e, &k)| {
        let t = &truth[k].theta;
        let p = t.nrows();
        rates((0..p).flat_map(|j| (j + 1..p).map(move |m| (j, m))).map(|(j, m)| (t[(j, m)], e.theta[(j, m)])))
    }))
}

/// Regulation recovery over every coefficient, intercepts included.
pub fn tpr_fpr_gamma(est: &[GroupParams], truth: &[GroupParams], matching: &[usize]) -> (f64, f64) {
    average_rates(
        est.iter()
            .zip(matching)
            .map(|(e, &k)| rates(truth[k].gamma.iter().copied().zip(e.gamma.iter().copied()))),
    )
}

/// The evaluation measures of one fit against the truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse_theta: f64,
    pub rmse_gamma: f64,
    pub tpr_theta: f64,
    pub fpr_theta: f64,
    pub tpr_gamma: f64,
    pub fpr_gamma: f64,
    pub ari: f64,
    pub rand_index: f64,
    pub k_hat: usize,
}

/// Evaluates merged estimates and an assignment against true parameters and
/// labels.
pub fn evaluate(
    est: &[GroupParams],
    assignment: &[usize],
    truth: &[GroupParams],
    labels: &[usize],
) -> Result<Metrics> {
    let matching = align_groups(est, truth)?;
    let (tpr_theta, fpr_theta) = tpr_fpr_theta(est, truth, &matching);
    let (tpr_gamma, fpr_gamma) = tpr_fpr_gamma(est, truth, &matching);
    Ok(Metrics {
        rmse_theta: rmse_theta(est, truth, &matching),
        rmse_gamma: rmse_gamma(est, truth, &matching),
        tpr_theta,
        fpr_theta,
        tpr_gamma,
        fpr_gamma,
        ari: adjusted_rand_index(assignment, labels)?,
        rand_index: rand_index(assignment, labels)?,
        k_hat: est.len(),
    })
}

/// [`evaluate`] for a fit result.
pub fn evaluate_fit(fr: &FitResult, truth: &[GroupParams], labels: &[usize]) -> Result<Metrics> {
    evaluate(&fr.merged_groups, &fr.assignment, truth, labels)
}
