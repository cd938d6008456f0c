//! Server-side combination rules.
//!
//! [`probit_aggregate`] is the maximum-likelihood estimate of the mean update
//! from a bit tally; the rest are the full-precision and sign-based baselines
//! it is compared against.

use std::io::Write;

use crate::error::{ProbitError, Result};
use crate::quantizer::BitVector;
use crate::vector::{l2_norm, ModelVector};

/// Default coefficient for the sign-based baselines.
pub const SIGN_STEP: f64 = 0.01;
pub const GM_TOL: f64 = 1e-6;
pub const GM_MAX_ITER: usize = 100;
const GM_GUARD: f64 = 1e-12;

/// Per-coordinate count of `+1` bits over `m` messages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitTally {
    n_plus: Vec<u32>,
    m: u32,
}

impl BitTally {
    pub fn new(n_plus: Vec<u32>, m: u32) -> Result<Self> {
        if m == 0 {
            return Err(ProbitError::Empty("bit tally with zero messages"));
        }
        if let Some(i) = n_plus.iter().position(|&n| n > m) {
            return Err(ProbitError::Precondition(format!(
                "tally {} at coordinate {i} exceeds message count {m}",
                n_plus[i]
            )));
        }
        Ok(Self { n_plus, m })
    }

    pub fn n_plus(&self) -> &[u32] {
        &self.n_plus
    }

    pub fn m(&self) -> u32 {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.n_plus.len()
    }

    /// Smallest and largest `n_plus / m` over coordinates.
    pub fn fraction_range(&self) -> (f64, f64) {
        let m = self.m as f64;
        self.n_plus.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &n| {
            let f = n as f64 / m;
            (lo.min(f), hi.max(f))
        })
    }
}

/// What the server saw and produced in one bit-transport round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundReceipt {
    pub round: u64,
    pub tally: BitTally,
    pub theta_hat: ModelVector,
    pub b_used: Vec<f64>,
}

impl RoundReceipt {
    pub const CSV_HEADER: &'static str = "round,theta_hat_norm,min_tally_fraction,max_tally_fraction";

    pub fn csv_row(&self) -> String {
        let (lo, hi) = self.tally.fraction_range();
        format!("{},{},{},{}", self.round, l2_norm(&self.theta_hat), lo, hi)
    }
}

pub fn write_receipts_csv<W: Write>(receipts: &[RoundReceipt], mut out: W) -> Result<()> {
    writeln!(out, "{}", RoundReceipt::CSV_HEADER)?;
    for r in receipts {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

fn common_len(messages: &[BitVector]) -> Result<usize> {
    let first = messages.first().ok_or(ProbitError::Empty("message list"))?;
    let d = first.len();
    if let Some(bad) = messages.iter().find(|m| m.len() != d) {
        return Err(ProbitError::DimensionMismatch {
            expected: d,
            got: bad.len(),
        });
    }
    Ok(d)
}

pub fn tally_bits(messages: &[BitVector]) -> Result<BitTally> {
    let d = common_len(messages)?;
    let mut n_plus = vec![0u32; d];
    for msg in messages {
        for (i, byte) in msg.packed().iter().enumerate() {
            let mut bits = *byte;
            while bits != 0 {
                let j = bits.trailing_zeros() as usize;
                n_plus[i * 8 + j] += 1;
                bits &= bits - 1;
            }
        }
    }
    let m = u32::try_from(messages.len())
        .map_err(|_| ProbitError::Precondition("more than u32::MAX messages".into()))?;
    BitTally::new(n_plus, m)
}

/// Maximum-likelihood estimate `((2 N_i - M) / M) * b_i`.
pub fn probit_aggregate(tally: &BitTally, b: &[f64]) -> Result<ModelVector> {
    if tally.m == 0 {
        return Err(ProbitError::Empty("bit tally with zero messages"));
    }
    if b.len() != tally.dim() {
        return Err(ProbitError::DimensionMismatch {
            expected: tally.dim(),
            got: b.len(),
        });
    }
    let m = tally.m as i64;
    ModelVector::new(
        tally
            .n_plus
            .iter()
            .zip(b)
            .map(|(&n, &bi)| (2 * n as i64 - m) as f64 / m as f64 * bi)
            .collect(),
    )
}

fn common_dim(updates: &[ModelVector]) -> Result<usize> {
    let first = updates.first().ok_or(ProbitError::Empty("update list"))?;
    for u in updates {
        first.check_dim(u)?;
    }
    Ok(first.dim())
}

/// Coordinatewise arithmetic mean, summed in client order.
pub fn fedavg_mean(updates: &[ModelVector]) -> Result<ModelVector> {
    let d = common_dim(updates)?;
    let mut acc = vec![0.0; d];
    for u in updates {
        for (a, x) in acc.iter_mut().zip(u.iter()) {
            *a += x;
        }
    }
    let m = updates.len() as f64;
    ModelVector::new(acc.into_iter().map(|a| a / m).collect())
}

/// Weiszfeld iteration for the point minimizing the sum of Euclidean
/// distances to `updates`, started from the mean.
///
/// Stops once an iterate moves by less than `tol`; returns the last iterate
/// after `max_iter` steps otherwise. Distances below 1e-12 are floored so an
/// iterate landing on a data point stays finite.
pub fn geometric_median(updates: &[ModelVector], tol: f64, max_iter: usize) -> Result<ModelVector> {
    let d = common_dim(updates)?;
    let mut g = fedavg_mean(updates)?.into_inner();
    for _ in 0..max_iter {
        let mut num = vec![0.0; d];
        let mut den = 0.0;
        for u in updates {
            let dist = u
                .iter()
                .zip(&g)
                .fold(0.0, |acc, (x, y)| acc + (x - y) * (x - y))
                .sqrt()
                .max(GM_GUARD);
            let w = 1.0 / dist;
            for (n, x) in num.iter_mut().zip(u.iter()) {
                *n += w * x;
            }
            den += w;
        }
        let next: Vec<f64> = num.into_iter().map(|n| n / den).collect();
        let step = next
            .iter()
            .zip(&g)
            .fold(0.0, |acc, (x, y)| acc + (x - y) * (x - y))
            .sqrt();
        g = next;
        if step < tol {
            break;
        }
    }
    ModelVector::new(g)
}

/// `step * sign(2 N_i - M)`, with exact ties mapped to zero.
pub fn majority_vote(messages: &[BitVector], step: f64) -> Result<ModelVector> {
    let tally = tally_bits(messages)?;
    let m = tally.m as i64;
    ModelVector::new(
        tally
            .n_plus
            .iter()
            .map(|&n| match (2 * n as i64 - m).signum() {
                1 => step,
                -1 => -step,
                _ => 0.0,
            })
            .collect(),
    )
}

/// `coef * sum_m bit_i^m`.
pub fn sign_accumulate(messages: &[BitVector], coef: f64) -> Result<ModelVector> {
    let tally = tally_bits(messages)?;
    let m = tally.m as i64;
    ModelVector::new(
        tally
            .n_plus
            .iter()
            .map(|&n| coef * (2 * n as i64 - m) as f64)
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> ModelVector {
        ModelVector::new(x.to_vec()).unwrap()
    }

    fn bits(s: &[i8]) -> BitVector {
        BitVector::from_signs(s).unwrap()
    }

    fn random_messages(seed: u64, m: usize, d: usize) -> Vec<BitVector> {
        let mut rng = RngStream::new(seed, 0, 0);
        (0..m)
            .map(|_| {
                let s: Vec<i8> = (0..d).map(|_| if rng.uniform() < 0.5 { 1 } else { -1 }).collect();
                bits(&s)
            })
            .collect()
    }

    #[test]
    fn tally_examples() {
        let all = vec![bits(&[1, -1]); 4];
        let t = tally_bits(&all).unwrap();
        assert_eq!(t.n_plus(), &[4, 0]);
        assert_eq!(t.m(), 4);
        let half = vec![bits(&[1]), bits(&[-1]), bits(&[1]), bits(&[-1])];
        assert_eq!(tally_bits(&half).unwrap().n_plus(), &[2]);
    }

    #[test]
    fn tally_matches_naive_loop() {
        let msgs = random_messages(3, 37, 53);
        let t = tally_bits(&msgs).unwrap();
        for i in 0..53 {
            let mut n = 0;
            for m in &msgs {
                if m.sign(i) == 1 {
                    n += 1;
                }
            }
            assert_eq!(t.n_plus()[i], n);
        }
    }

    #[test]
    fn tally_errors() {
        assert_eq!(tally_bits(&[]).unwrap_err(), ProbitError::Empty("message list"));
        assert!(matches!(
            tally_bits(&[bits(&[1]), bits(&[1, 1])]),
            Err(ProbitError::DimensionMismatch { .. })
        ));
        assert!(BitTally::new(vec![1], 0).is_err());
        assert!(BitTally::new(vec![3], 2).is_err());
    }

    #[test]
    fn probit_aggregate_examples() {
        let b = [0.01, 0.01, 0.02];
        let t = BitTally::new(vec![4, 2, 3], 4).unwrap();
        let theta = probit_aggregate(&t, &b).unwrap();
        assert_eq!(theta[0], 0.01);
        assert_eq!(theta[1], 0.0);
        assert!((theta[2] - 0.01).abs() < 1e-18);
        assert!(probit_aggregate(&t, &[0.01]).is_err());
    }

    #[test]
    fn fedavg_examples() {
        let one = v(&[1.0, -2.0]);
        assert_eq!(fedavg_mean(std::slice::from_ref(&one)).unwrap(), one);
        assert_eq!(fedavg_mean(&[v(&[1.0, 3.0]), v(&[3.0, 1.0])]).unwrap(), v(&[2.0, 2.0]));
        assert!(fedavg_mean(&[]).is_err());
    }

    #[test]
    fn fedavg_matches_naive_oracle() {
        let mut rng = RngStream::new(8, 0, 0);
        let ups: Vec<ModelVector> = (0..50)
            .map(|_| v(&(0..20).map(|_| rng.normal(0.0, 1.0)).collect::<Vec<_>>()))
            .collect();
        let mean = fedavg_mean(&ups).unwrap();
        for i in 0..20 {
            let mut s = 0.0;
            for u in &ups {
                s += u[i];
            }
            let naive = s / 50.0;
            assert!((mean[i] - naive).abs() <= 1e-12 * naive.abs().max(1.0));
        }
    }

    #[test]
    fn geometric_median_identical_points() {
        let p = v(&[0.3, -1.2, 4.0]);
        let g = geometric_median(&vec![p.clone(); 5], GM_TOL, GM_MAX_ITER).unwrap();
        for i in 0..3 {
            assert!((g[i] - p[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn geometric_median_resists_outlier_in_1d() {
        let pts = [v(&[0.0]), v(&[0.0]), v(&[10.0])];
        let g = geometric_median(&pts, GM_TOL, GM_MAX_ITER).unwrap();
        // brute-force minimizer over a grid
        let cost = |x: f64| pts.iter().map(|p| (p[0] - x).abs()).sum::<f64>();
        let best = (0..=10_000)
            .map(|k| -1.0 + k as f64 * 12.0 / 10_000.0)
            .min_by(|a, b| cost(*a).total_cmp(&cost(*b)))
            .unwrap();
        assert!(best.abs() < 2e-3);
        assert!(g[0].abs() < 1e-5, "{}", g[0]);
    }

    #[test]
    fn geometric_median_of_symmetric_triangle() {
        let h = 3f64.sqrt() / 2.0;
        let pts = [v(&[0.0, 1.0]), v(&[-h, -0.5]), v(&[h, -0.5])];
        let g = geometric_median(&pts, 1e-10, 1000).unwrap();
        let cost = |x: f64, y: f64| {
            pts.iter()
                .map(|p| ((p[0] - x).powi(2) + (p[1] - y).powi(2)).sqrt())
                .sum::<f64>()
        };
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..=200 {
            for j in 0..=200 {
                let (x, y) = (-0.5 + i as f64 / 200.0, -0.5 + j as f64 / 200.0);
                let c = cost(x, y);
                if c < best.0 {
                    best = (c, x, y);
                }
            }
        }
        assert!(best.1.abs() < 1e-2 && best.2.abs() < 1e-2);
        assert!(g[0].abs() < 1e-6 && g[1].abs() < 1e-6, "{g:?}");
    }

    #[test]
    fn majority_vote_examples() {
        let three_of_four = vec![bits(&[1]), bits(&[1]), bits(&[1]), bits(&[-1])];
        assert_eq!(majority_vote(&three_of_four, 0.01).unwrap()[0], 0.01);
        let tie = vec![bits(&[1]), bits(&[1]), bits(&[-1]), bits(&[-1])];
        assert_eq!(majority_vote(&tie, 0.01).unwrap()[0], 0.0);
        let down = vec![bits(&[-1]); 3];
        assert_eq!(majority_vote(&down, 0.01).unwrap()[0], -0.01);
    }

    #[test]
    fn sign_accumulate_examples() {
        let up = vec![bits(&[1]); 4];
        assert!((sign_accumulate(&up, 0.01).unwrap()[0] - 0.04).abs() < 1e-15);
        let bal = vec![bits(&[1]), bits(&[-1])];
        assert_eq!(sign_accumulate(&bal, 0.01).unwrap()[0], 0.0);
        let msgs = random_messages(4, 9, 30);
        let t = tally_bits(&msgs).unwrap();
        let acc = sign_accumulate(&msgs, 0.01).unwrap();
        for i in 0..30 {
            let expect = 0.01 * (2.0 * t.n_plus()[i] as f64 - 9.0);
            assert_eq!(acc[i], expect);
        }
    }

    #[test]
    fn receipt_row() {
        let tally = BitTally::new(vec![1, 3], 4).unwrap();
        let theta = probit_aggregate(&tally, &[0.02, 0.02]).unwrap();
        let r = RoundReceipt {
            round: 3,
            tally,
            theta_hat: theta,
            b_used: vec![0.02, 0.02],
        };
        let mut buf = Vec::new();
        write_receipts_csv(&[r], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let row = text.lines().nth(1).unwrap();
        assert!(row.starts_with("3,0.0141421356"));
        assert!(row.ends_with(",0.25,0.75"));
    }

    proptest! {
        #[test]
        fn aggregate_is_bounded_and_order_free(seed in 0u64..1000, m in 1usize..20, d in 1usize..40) {
            let mut msgs = random_messages(seed, m, d);
            let b: Vec<f64> = (0..d).map(|i| 0.001 * (i + 1) as f64).collect();
            let theta = probit_aggregate(&tally_bits(&msgs).unwrap(), &b).unwrap();
            for i in 0..d {
                prop_assert!(theta[i].abs() <= b[i]);
            }
            msgs.reverse();
            msgs.rotate_left(seed as usize % m);
            let again = probit_aggregate(&tally_bits(&msgs).unwrap(), &b).unwrap();
            prop_assert_eq!(theta, again);
        }
    }
}
