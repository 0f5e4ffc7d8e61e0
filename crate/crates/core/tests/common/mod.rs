//! Independent oracles and random instances shared by the integration tests.
//! Nothing here calls into the solver paths under test.
#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use umaxent::{Distribution, FeatureTable, ObservationChannel, Weights};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_features(rng: &mut ChaCha8Rng, k: usize, n: usize, range: f64) -> FeatureTable {
    let values = Array2::from_shape_fn((k, n), |_| rng.random_range(-range..=range));
    let names = (0..k).map(|i| format!("f{i}")).collect();
    FeatureTable::new(values, names).unwrap()
}

pub fn random_weights(rng: &mut ChaCha8Rng, k: usize, scale: f64) -> Weights {
    Weights::new((0..k).map(|_| rng.random_range(-scale..=scale)).collect()).unwrap()
}

/// Strictly positive distribution with entries bounded away from zero.
pub fn random_interior(rng: &mut ChaCha8Rng, n: usize) -> Distribution {
    let raw: Array1<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    Distribution::from_unnormalized(raw).unwrap()
}

/// Dense channel with every entry positive.
pub fn random_channel(rng: &mut ChaCha8Rng, m: usize, n: usize) -> ObservationChannel {
    let mut matrix = Array2::from_shape_fn((m, n), |_| rng.random_range(0.01..1.0));
    for mut col in matrix.columns_mut() {
        let s = col.sum();
        col /= s;
    }
    let names = (0..m).map(|i| format!("o{i}")).collect();
    ObservationChannel::new(matrix, names).unwrap()
}

/// Channel in which each observation has exactly one producing element.
/// Requires `m >= n`.
pub fn deterministic_channel(rng: &mut ChaCha8Rng, m: usize, n: usize) -> ObservationChannel {
    assert!(m >= n);
    let mut owner: Vec<usize> = (0..n).collect();
    owner.extend((n..m).map(|_| rng.random_range(0..n)));
    for i in (1..m).rev() {
        let j = rng.random_range(0..=i);
        owner.swap(i, j);
    }
    let mut matrix = Array2::zeros((m, n));
    for (w, &x) in owner.iter().enumerate() {
        matrix[[w, x]] = rng.random_range(0.1..1.0);
    }
    for mut col in matrix.columns_mut() {
        let s = col.sum();
        col /= s;
    }
    let names = (0..m).map(|i| format!("o{i}")).collect();
    ObservationChannel::new(matrix, names).unwrap()
}

pub fn lse(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn scores(lambda: &[f64], phi: &Array2<f64>) -> Vec<f64> {
    (0..phi.ncols())
        .map(|x| (0..phi.nrows()).map(|k| lambda[k] * phi[[k, x]]).sum())
        .collect()
}

pub fn gibbs(lambda: &[f64], phi: &Array2<f64>) -> Vec<f64> {
    let s = scores(lambda, phi);
    let z = lse(&s);
    s.iter().map(|v| (v - z).exp()).collect()
}

pub fn dual(lambda: &[f64], phi: &Array2<f64>, target: &[f64]) -> f64 {
    lse(&scores(lambda, phi)) - lambda.iter().zip(target).map(|(l, t)| l * t).sum::<f64>()
}

pub fn expectation(p: &[f64], phi: &Array2<f64>, k: usize) -> f64 {
    p.iter().enumerate().map(|(x, px)| px * phi[[k, x]]).sum()
}

pub fn central_difference(lambda: &[f64], phi: &Array2<f64>, target: &[f64], h: f64) -> Vec<f64> {
    (0..lambda.len())
        .map(|k| {
            let mut up = lambda.to_vec();
            let mut down = lambda.to_vec();
            up[k] += h;
            down[k] -= h;
            (dual(&up, phi, target) - dual(&down, phi, target)) / (2.0 * h)
        })
        .collect()
}

/// Root of an increasing function by bracket expansion and bisection.
pub fn bisect(mut f: impl FnMut(f64) -> f64) -> f64 {
    let (mut lo, mut hi) = (-1.0, 1.0);
    while f(lo) > 0.0 {
        lo *= 2.0;
        assert!(lo > -1e6, "no lower bracket");
    }
    while f(hi) < 0.0 {
        hi *= 2.0;
        assert!(hi < 1e6, "no upper bracket");
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Max-ent distribution for one or two features, found by (nested) bisection
/// on the moment equations.
pub fn bisection_oracle(phi: &Array2<f64>, target: &[f64]) -> Vec<f64> {
    match phi.nrows() {
        1 => {
            let l = bisect(|l| expectation(&gibbs(&[l], phi), phi, 0) - target[0]);
            gibbs(&[l], phi)
        }
        2 => {
            let inner = |l1: f64| bisect(|l2| expectation(&gibbs(&[l1, l2], phi), phi, 1) - target[1]);
            // d/dl1 of the profiled dual is increasing in l1
            let l1 = bisect(|l1| {
                let l2 = inner(l1);
                expectation(&gibbs(&[l1, l2], phi), phi, 0) - target[0]
            });
            gibbs(&[l1, inner(l1)], phi)
        }
        k => panic!("oracle supports one or two features, got {k}"),
    }
}

pub fn tv(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
pub fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            let pivot_row = a[col].clone();
            for (target, v) in a[row].iter_mut().zip(&pivot_row).skip(col) {
                *target -= f * v;
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|c| a[row][c] * x[c]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// Projects `d` onto the null space of the rows of `constraints`.
pub fn project_null(constraints: &[Vec<f64>], d: &[f64]) -> Vec<f64> {
    let r = constraints.len();
    let gram: Vec<Vec<f64>> = (0..r)
        .map(|i| (0..r).map(|j| dot(&constraints[i], &constraints[j])).collect())
        .collect();
    let rhs: Vec<f64> = constraints.iter().map(|c| dot(c, d)).collect();
    let coef = solve_linear(gram, rhs);
    let mut out = d.to_vec();
    for (c, a) in constraints.iter().zip(&coef) {
        for (o, v) in out.iter_mut().zip(c) {
            *o -= a * v;
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `(1 - eps)` times a random deterministic assignment of elements to
/// observations plus `eps` times the uniform channel.
pub fn noisy_permutation_channel(rng: &mut ChaCha8Rng, m: usize, n: usize, eps: f64) -> ObservationChannel {
    let mut perm: Vec<usize> = (0..m).collect();
    for i in (1..m).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    let mut matrix = Array2::from_elem((m, n), eps / m as f64);
    for x in 0..n {
        matrix[[perm[x % m], x]] += 1.0 - eps;
    }
    let names = (0..m).map(|i| format!("o{i}")).collect();
    ObservationChannel::new(matrix, names).unwrap()
}

/// `Pr(omega) = sum_x channel[omega, x] p(x)`, computed directly.
pub fn push_forward(channel: &ObservationChannel, p: &[f64]) -> Distribution {
    let m = channel.matrix();
    let out: Array1<f64> = (0..m.nrows())
        .map(|w| (0..m.ncols()).map(|x| m[[w, x]] * p[x]).sum())
        .collect();
    Distribution::from_unnormalized(out).unwrap()
}

/// Mismatched-prior classifier instance: two elements with their own labels,
/// `phi = [1, 0]`, true label prior `[0.8, 0.2]`, four raw symbols with
/// `Pr(r | xi)` given by [`RAW_GIVEN_LABEL`], and a classifier trained under a
/// uniform label prior. Labels are allocated in exact proportion; raw
/// symbols are drawn at random.
pub struct PriorShiftInstance {
    pub features: FeatureTable,
    pub rows: Array2<f64>,
    pub true_prior: [f64; 2],
    pub lambda_true: f64,
}

pub const RAW_GIVEN_LABEL: [[f64; 4]; 2] = [[0.9, 0.07, 0.02, 0.01], [0.01, 0.02, 0.07, 0.9]];

/// `Pr_theta(xi | r)` for a classifier that knows `Pr(r | xi)` exactly and
/// was trained with uniform labels.
pub fn classifier_output(r: usize) -> [f64; 2] {
    let a = RAW_GIVEN_LABEL[0][r] * 0.5;
    let b = RAW_GIVEN_LABEL[1][r] * 0.5;
    [a / (a + b), b / (a + b)]
}

pub fn prior_shift_instance(rng: &mut ChaCha8Rng, n_rows: usize) -> PriorShiftInstance {
    let true_prior = [0.8, 0.2];
    let first = (true_prior[0] * n_rows as f64).round() as usize;
    let mut rows = Array2::zeros((n_rows, 2));
    for i in 0..n_rows {
        let label = usize::from(i >= first);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let r = (0..4)
            .find(|&r| {
                acc += RAW_GIVEN_LABEL[label][r];
                u < acc
            })
            .unwrap_or(3);
        let out = classifier_output(r);
        rows[[i, 0]] = out[0];
        rows[[i, 1]] = out[1];
    }
    PriorShiftInstance {
        features: FeatureTable::from_rows(&[vec![1.0, 0.0]]).unwrap(),
        rows,
        true_prior,
        lambda_true: (true_prior[0] / true_prior[1]).ln(),
    }
}

/// Random factorization: every `y` gets a nonempty random subset of `z`.
pub fn random_factorization(rng: &mut ChaCha8Rng, ny: usize, nz: usize) -> Vec<(usize, usize)> {
    let mut components = Vec::new();
    for y in 0..ny {
        let forced = rng.random_range(0..nz);
        for z in 0..nz {
            if z == forced || rng.random_bool(0.5) {
                components.push((y, z));
            }
        }
    }
    components
}
