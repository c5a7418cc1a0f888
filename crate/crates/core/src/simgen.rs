//! Seeded generators for the three simulation settings and the
//! conditional-Gaussian sampler.
//!
//! * `S1`: tridiagonal precisions (off-diagonal 0.2, 0.3, 0.4 for groups 1-3),
//!   sparse coefficients, Gaussian regulators.
//! * `S2`: block-diagonal precisions built from mutual nearest-neighbour
//!   modules, eight modules shared by every group.
//! * `S3`: the `S1` truth with regulators drawn uniformly from `{0, 1, 2}`.
//!
//! The intercept column of every true coefficient matrix is zero.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{min_eigenvalue, validate_dataset, Dataset, GroupParams};

const S1_RHO: [f64; 3] = [0.2, 0.3, 0.4];
const S2_MODULES: usize = 10;
const S2_NEIGHBOURS: usize = 2;
const S2_EIGEN_FLOOR: f64 = 0.05;
const S2_SHRINK: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    S1,
    S2,
    S3,
}

impl std::str::FromStr for Setting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s1" => Ok(Setting::S1),
            "s2" => Ok(Setting::S2),
            "s3" => Ok(Setting::S3),
            other => Err(Error::InvalidSpec(format!("unknown setting {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub setting: Setting,
    pub p: usize,
    pub q: usize,
    pub group_sizes: Vec<usize>,
    pub seed: u64,
}

impl SimSpec {
    pub fn k0(&self) -> usize {
        self.group_sizes.len()
    }

    pub fn n(&self) -> usize {
        self.group_sizes.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 {
            return Err(Error::InvalidSpec("p must be positive".into()));
        }
        if self.group_sizes.is_empty() || self.group_sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidSpec("group sizes must be positive".into()));
        }
        if self.n() < 2 {
            return Err(Error::InvalidSpec("need at least 2 samples".into()));
        }
        if self.setting == Setting::S2 && self.p % S2_MODULES != 0 {
            return Err(Error::InvalidSpec("p must be divisible by 10".into()));
        }
        Ok(())
    }
}

/// True parameters and (after sampling) the true memberships.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub params: Vec<GroupParams>,
    pub labels: Vec<usize>,
}

fn ordered_labels(spec: &SimSpec) -> Vec<usize> {
    spec.group_sizes
        .iter()
        .enumerate()
        .flat_map(|(k, &s)| std::iter::repeat(k).take(s))
        .collect()
}

fn signed_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let v = rng.gen_range(lo..hi);
    if rng.gen_bool(0.5) {
        v
    } else {
        -v
    }
}

/// Coefficient matrices with zero intercepts and each regulator effect
/// nonzero with probability `min(1, 1/q)`, values `+-Unif(1, 1.5)`.
fn sparse_gammas(rng: &mut ChaCha8Rng, p: usize, q: usize, k0: usize) -> Vec<DMatrix<f64>> {
    let prob = if q == 0 { 0.0 } else { (1.0 / q as f64).min(1.0) };
    let draw = |rng: &mut ChaCha8Rng| {
        DMatrix::from_fn(p, q + 1, |_, m| {
            if m > 0 && rng.gen_bool(prob) {
                signed_uniform(rng, 1.0, 1.5)
            } else {
                0.0
            }
        })
    };
    let mut out: Vec<DMatrix<f64>> = Vec::with_capacity(k0);
    for _ in 0..k0 {
        let mut g = draw(rng);
        // all-zero draws can coincide when p*q is tiny; give up after a while
        let mut attempts = 0;
        while out.iter().any(|o| *o == g) && attempts < 100 {
            g = draw(rng);
            attempts += 1;
        }
        out.push(g);
    }
    out
}

fn tridiagonal(p: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(p, p, |j, m| {
        if j == m {
            1.0
        } else if j.abs_diff(m) == 1 {
            rho
        } else {
            0.0
        }
    })
}

fn truth_rng(spec: &SimSpec) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(spec.seed)
}

fn check_setting(spec: &SimSpec, expected: Setting) -> Result<()> {
    spec.validate()?;
    if spec.setting != expected {
        return Err(Error::InvalidSpec(format!(
            "expected setting {expected:?}, got {:?}",
            spec.setting
        )));
    }
    Ok(())
}

fn s1_params(spec: &SimSpec) -> Result<GroundTruth> {
    let mut rng = truth_rng(spec);
    let gammas = sparse_gammas(&mut rng, spec.p, spec.q, spec.k0());
    let params = gammas
        .into_iter()
        .enumerate()
        .map(|(k, gamma)| GroupParams::new(gamma, tridiagonal(spec.p, S1_RHO[k % 3])))
        .collect::<Result<_>>()?;
    Ok(GroundTruth {
        params,
        labels: ordered_labels(spec),
    })
}

/// Setting `S1`.
pub fn gen_s1_truth(spec: &SimSpec) -> Result<GroundTruth> {
    check_setting(spec, Setting::S1)?;
    s1_params(spec)
}

/// Setting `S3` (same truth as `S1`; only the regulators differ).
pub fn gen_s3_truth(spec: &SimSpec) -> Result<GroundTruth> {
    check_setting(spec, Setting::S3)?;
    s1_params(spec)
}

/// Edges `(u, v)`, `u < v`, where each point is among the other's `m`
/// nearest neighbours.
pub fn mutual_knn_edges(points: &[(f64, f64)], m: usize) -> Vec<(usize, usize)> {
    let s = points.len();
    let d2 = |a: usize, b: usize| {
        (points[a].0 - points[b].0).powi(2) + (points[a].1 - points[b].1).powi(2)
    };
    let neighbours: Vec<Vec<usize>> = (0..s)
        .map(|u| {
            let mut others: Vec<usize> = (0..s).filter(|&v| v != u).collect();
            others.sort_by(|&a, &b| d2(u, a).total_cmp(&d2(u, b)).then(a.cmp(&b)));
            others.truncate(m);
            others
        })
        .collect();
    let mut edges = Vec::new();
    for u in 0..s {
        for v in u + 1..s {
            if neighbours[u].contains(&v) && neighbours[v].contains(&u) {
                edges.push((u, v));
            }
        }
    }
    edges
}

/// One module's precision block: unit diagonal, `+-Unif(0.1, 0.4)` on
/// mutual-2-NN edges, off-diagonals shrunk by 0.9 until the smallest
/// eigenvalue is at least 0.05. Returns the block and the shrink count.
fn s2_module(rng: &mut ChaCha8Rng, size: usize) -> (DMatrix<f64>, usize) {
    let points: Vec<(f64, f64)> = (0..size).map(|_| (rng.gen(), rng.gen())).collect();
    let mut block = DMatrix::identity(size, size);
    for (u, v) in mutual_knn_edges(&points, S2_NEIGHBOURS) {
        let w = signed_uniform(rng, 0.1, 0.4);
        block[(u, v)] = w;
        block[(v, u)] = w;
    }
    let mut shrinks = 0;
    while min_eigenvalue(&block) < S2_EIGEN_FLOOR {
        for j in 0..size {
            for m in 0..size {
                if j != m {
                    block[(j, m)] *= S2_SHRINK;
                }
            }
        }
        shrinks += 1;
    }
    (block, shrinks)
}

/// Module slots of each group for the `S2` layout: modules 0-7 are shared
/// by every group, 8 (A) by groups 1 and 2, 9 (B) by groups 1 and 3, and
/// 10, 11 are unique to groups 2 and 3. Groups beyond the third reuse the
/// pattern cyclically.
fn s2_layout(k: usize) -> [usize; S2_MODULES] {
    let mut slots = [0, 1, 2, 3, 4, 5, 6, 7, 0, 0];
    let (a, b) = match k % 3 {
        0 => (8, 9),
        1 => (8, 10),
        _ => (11, 9),
    };
    slots[8] = a;
    slots[9] = b;
    slots
}

/// Setting `S2`.
pub fn gen_s2_truth(spec: &SimSpec) -> Result<GroundTruth> {
    check_setting(spec, Setting::S2)?;
    let mut rng = truth_rng(spec);
    let size = spec.p / S2_MODULES;
    let modules: Vec<DMatrix<f64>> = (0..12).map(|_| s2_module(&mut rng, size).0).collect();
    let gammas = sparse_gammas(&mut rng, spec.p, spec.q, spec.k0());
    let params = gammas
        .into_iter()
        .enumerate()
        .map(|(k, gamma)| {
            let mut theta = DMatrix::zeros(spec.p, spec.p);
            for (slot, &module) in s2_layout(k).iter().enumerate() {
                theta
                    .view_mut((slot * size, slot * size), (size, size))
                    .copy_from(&modules[module]);
            }
            GroupParams::new(gamma, theta)
        })
        .collect::<Result<_>>()?;
    Ok(GroundTruth {
        params,
        labels: ordered_labels(spec),
    })
}

/// Truth for whichever setting `spec` names.
pub fn gen_truth(spec: &SimSpec) -> Result<GroundTruth> {
    match spec.setting {
        Setting::S1 => gen_s1_truth(spec),
        Setting::S2 => gen_s2_truth(spec),
        Setting::S3 => gen_s3_truth(spec),
    }
}

/// Draws `y_i = Gamma_k x_i + eps_i`, `eps_i ~ N(0, Theta_k^{-1})`, for the
/// group sizes of `spec`, then shuffles the samples. Returns the dataset and
/// the shuffled labels.
pub fn sample_dataset(truth: &GroundTruth, spec: &SimSpec) -> Result<(Dataset, Vec<usize>)> {
    spec.validate()?;
    if truth.params.len() != spec.k0() {
        return Err(Error::InvalidSpec(format!(
            "{} true groups for {} group sizes",
            truth.params.len(),
            spec.k0()
        )));
    }
    let (p, q, n) = (spec.p, spec.q, spec.n());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let factors: Vec<DMatrix<f64>> = truth
        .params
        .iter()
        .map(|g| {
            g.theta
                .clone()
                .cholesky()
                .map(|c| c.l().transpose())
                .ok_or_else(|| Error::NotSpd("true precision".into()))
        })
        .collect::<Result<_>>()?;
    let labels = ordered_labels(spec);
    let mut y = DMatrix::zeros(n, p);
    let mut x = DMatrix::zeros(n, q);
    for (i, &k) in labels.iter().enumerate() {
        let xi = DVector::from_fn(q + 1, |m, _| {
            if m == 0 {
                1.0
            } else {
                match spec.setting {
                    Setting::S3 => rng.gen_range(0..3) as f64,
                    _ => rng.sample::<f64, _>(StandardNormal),
                }
            }
        });
        let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let eps = factors[k]
            .solve_upper_triangular(&z)
            .ok_or_else(|| Error::NotSpd("true precision".into()))?;
        let yi = &truth.params[k].gamma * &xi + eps;
        for j in 0..p {
            y[(i, j)] = yi[j];
        }
        for m in 0..q {
            x[(i, m)] = xi[m + 1];
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let y = DMatrix::from_fn(n, p, |i, j| y[(order[i], j)]);
    let x = DMatrix::from_fn(n, q, |i, m| x[(order[i], m)]);
    let labels = order.iter().map(|&i| labels[i]).collect();
    Ok((validate_dataset(y, x)?, labels))
}

/// Truth plus one sampled dataset; `truth.labels` holds the shuffled labels.
pub fn simulate(spec: &SimSpec) -> Result<(GroundTruth, Dataset)> {
    let mut truth = gen_truth(spec)?;
    let (ds, labels) = sample_dataset(&truth, spec)?;
    truth.labels = labels;
    Ok((truth, ds))
}
