//! Monte Carlo oracles for the estimator, robustness and privacy claims.
//!
//! Every check is seeded: trial `t` of a check draws from its own stream
//! keyed by `(seed, tag, t)`, trials run in parallel in fixed-size chunks, and
//! chunk results are reduced in index order, so a report is bit-identical
//! across runs and thread counts. Standard errors come from the observed
//! trial variance.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::aggregator::{probit_aggregate, tally_bits};
use crate::byzantine::{corrupt_bits, corrupt_updates, AttackKind, AttackSpec, BitPattern};
use crate::error::{ProbitError, Result};
use crate::privacy::{audit_vector, required_b, PrivacySpec};
use crate::quantizer::{clamp_update, compress, BitVector, QuantParams};
use crate::rng::{Domain, RngStream};
use crate::vector::ModelVector;

const CHUNK: usize = 1024;

/// Relative width of the honest-update spread around the target mean.
pub const HONEST_SPREAD: f64 = 0.1;

/// How a report's measurement is compared with its reference value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    /// `|measured - theoretical| <= tolerance`
    Within,
    /// `measured <= theoretical + tolerance`
    AtMost,
    /// `measured >= theoretical - tolerance`
    AtLeast,
}

impl Comparison {
    fn holds(self, measured: f64, theoretical: f64, tolerance: f64) -> bool {
        match self {
            Comparison::Within => (measured - theoretical).abs() <= tolerance,
            Comparison::AtMost => measured <= theoretical + tolerance,
            Comparison::AtLeast => measured >= theoretical - tolerance,
        }
    }
}

/// Outcome of one oracle check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub check: String,
    pub measured: f64,
    pub theoretical: f64,
    pub tolerance: f64,
    pub comparison: Comparison,
    pub pass: bool,
    pub trials: usize,
    pub note: String,
}

impl OracleReport {
    fn new(
        check: impl Into<String>,
        measured: f64,
        theoretical: f64,
        tolerance: f64,
        comparison: Comparison,
        trials: usize,
        note: impl Into<String>,
    ) -> Self {
        Self {
            check: check.into(),
            measured,
            theoretical,
            tolerance,
            comparison,
            pass: comparison.holds(measured, theoretical, tolerance),
            trials,
            note: note.into(),
        }
    }
}

pub fn write_reports_csv<W: Write>(reports: &[OracleReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        w.serialize(r).map_err(|e| ProbitError::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Per-coordinate running sums over trials.
#[derive(Debug, Clone)]
struct Moments {
    n: usize,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl Moments {
    fn new(dim: usize) -> Self {
        Self {
            n: 0,
            sum: vec![0.0; dim],
            sum_sq: vec![0.0; dim],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1;
        for ((s, q), v) in self.sum.iter_mut().zip(&mut self.sum_sq).zip(x) {
            *s += v;
            *q += v * v;
        }
    }

    fn merge(&mut self, other: &Moments) {
        self.n += other.n;
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        for (a, b) in self.sum_sq.iter_mut().zip(&other.sum_sq) {
            *a += b;
        }
    }

    fn mean(&self) -> Vec<f64> {
        self.sum.iter().map(|s| s / self.n as f64).collect()
    }

    /// Standard error of each coordinate's mean.
    fn std_err(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.sum
            .iter()
            .zip(&self.sum_sq)
            .map(|(s, q)| {
                let mean = s / n;
                let var = ((q / n - mean * mean) * n / (n - 1.0)).max(0.0);
                (var / n).sqrt()
            })
            .collect()
    }
}

/// Runs `trials` independent trials and accumulates the returned vectors.
fn monte_carlo<F>(seed: u64, tag: u64, trials: usize, dim: usize, trial: F) -> Result<Moments>
where
    F: Fn(u64, &mut RngStream) -> Result<Vec<f64>> + Sync,
{
    if trials < 2 {
        return Err(ProbitError::Precondition("need at least 2 trials".into()));
    }
    let chunks: Vec<Moments> = (0..trials.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = Moments::new(dim);
            for t in (c * CHUNK)..((c + 1) * CHUNK).min(trials) {
                let mut rng = RngStream::with_domain(seed, Domain::Oracle, tag, t as u64);
                acc.push(&trial(t as u64, &mut rng)?);
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = Moments::new(dim);
    for c in &chunks {
        total.merge(c);
    }
    Ok(total)
}

fn check_range(theta: &ModelVector, b: &[f64]) -> Result<()> {
    if theta.dim() != b.len() {
        return Err(ProbitError::DimensionMismatch {
            expected: b.len(),
            got: theta.dim(),
        });
    }
    for (i, (t, bi)) in theta.iter().zip(b).enumerate() {
        if !(*bi > 0.0 && t.abs() <= *bi) {
            return Err(ProbitError::Precondition(format!(
                "coordinate {i}: need |theta| <= b with b > 0, got theta = {t}, b = {bi}"
            )));
        }
    }
    Ok(())
}

/// Honest updates scattered around `theta`: Gaussian noise with standard
/// deviation `HONEST_SPREAD * b`, clipped symmetrically so that every update
/// stays in `[-b, b]`. Symmetric clipping keeps the mean at exactly `theta`.
fn honest_updates(theta: &ModelVector, b: &[f64], m: usize, rng: &mut RngStream) -> Result<Vec<ModelVector>> {
    (0..m)
        .map(|_| {
            ModelVector::new(
                theta
                    .iter()
                    .zip(b)
                    .map(|(t, bi)| {
                        let room = bi - t.abs();
                        t + rng.normal(0.0, HONEST_SPREAD * bi).clamp(-room, room)
                    })
                    .collect(),
            )
        })
        .collect()
}

fn aggregate(updates: &[ModelVector], q: &QuantParams, rng: &mut RngStream) -> Result<ModelVector> {
    let bits = updates
        .iter()
        .map(|u| compress(u, q, rng))
        .collect::<Result<Vec<BitVector>>>()?;
    probit_aggregate(&tally_bits(&bits)?, q.b())
}

/// Estimates `E[theta_hat]` with clients drawn around `theta` and checks
/// every coordinate is within 4 standard errors of `theta`.
pub fn check_unbiasedness(theta: &ModelVector, b: &[f64], m: usize, trials: usize, seed: u64) -> Result<OracleReport> {
    check_range(theta, b)?;
    let q = QuantParams::new(b.to_vec(), 0.0)?;
    let stats = monte_carlo(seed, 1, trials, theta.dim(), |_, rng| {
        let updates = honest_updates(theta, b, m, rng)?;
        Ok(aggregate(&updates, &q, rng)?.into_inner())
    })?;
    let mean = stats.mean();
    let se = stats.std_err();
    let mut worst_z: f64 = 0.0;
    for i in 0..theta.dim() {
        let err = (mean[i] - theta[i]).abs();
        let z = if se[i] > 0.0 {
            err / se[i]
        } else if err <= 1e-12 * b[i] {
            0.0
        } else {
            f64::INFINITY
        };
        worst_z = worst_z.max(z);
    }
    Ok(OracleReport::new(
        format!("unbiasedness_M{m}"),
        worst_z,
        0.0,
        4.0,
        Comparison::Within,
        trials,
        "max |mean - theta| / SE over coordinates",
    ))
}

/// Empirical `E|theta - theta_hat|^2` when every client holds exactly `theta`.
fn empirical_mse(theta: &ModelVector, b: &[f64], m: usize, trials: usize, seed: u64) -> Result<f64> {
    check_range(theta, b)?;
    let q = QuantParams::new(b.to_vec(), 0.0)?;
    let updates = vec![theta.clone(); m];
    let stats = monte_carlo(seed, 2, trials, 1, |_, rng| {
        let est = aggregate(&updates, &q, rng)?;
        let err: f64 = est.iter().zip(theta.iter()).map(|(e, t)| (e - t) * (e - t)).sum();
        Ok(vec![err])
    })?;
    Ok(stats.mean()[0])
}

/// Closed-form mean squared error `sum (b_i^2 - theta_i^2) / M`.
pub fn theoretical_mse(theta: &ModelVector, b: &[f64], m: usize) -> f64 {
    theta.iter().zip(b).map(|(t, bi)| bi * bi - t * t).sum::<f64>() / m as f64
}

/// Compares the empirical mean squared error with the closed form at 5%
/// relative tolerance.
pub fn check_variance(theta: &ModelVector, b: &[f64], m: usize, trials: usize, seed: u64) -> Result<OracleReport> {
    let measured = empirical_mse(theta, b, m, trials, seed)?;
    let expected = theoretical_mse(theta, b, m);
    let tol = if expected > 0.0 { 0.05 * expected } else { 1e-15 };
    Ok(OracleReport::new(
        format!("variance_M{m}"),
        measured,
        expected,
        tol,
        Comparison::Within,
        trials,
        "5% relative",
    ))
}

/// Fits `log MSE = a + s log M` and checks `s` is within 0.15 of -1.
pub fn check_error_decay(theta: &ModelVector, b: &[f64], m_list: &[usize], trials: usize, seed: u64) -> Result<OracleReport> {
    if m_list.len() < 3 {
        return Err(ProbitError::Precondition(format!(
            "need at least 3 client counts, got {}",
            m_list.len()
        )));
    }
    if m_list.windows(2).any(|w| w[0] >= w[1]) || m_list[0] == 0 {
        return Err(ProbitError::Precondition("client counts must be positive and ascending".into()));
    }
    let mses = m_list
        .iter()
        .map(|&m| empirical_mse(theta, b, m, trials, seed))
        .collect::<Result<Vec<_>>>()?;
    let listing = mses.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>().join(" ");
    if mses.iter().all(|&x| x == 0.0) {
        return Ok(OracleReport::new(
            "error_decay",
            -1.0,
            -1.0,
            0.15,
            Comparison::Within,
            trials,
            "degenerate: every MSE is zero (theta on the boundary)",
        ));
    }
    if mses.iter().any(|&x| x <= 0.0) {
        return Err(ProbitError::Precondition(format!("some but not all MSEs are zero: {listing}")));
    }
    let xs: Vec<f64> = m_list.iter().map(|&m| (m as f64).ln()).collect();
    let ys: Vec<f64> = mses.iter().map(|x| x.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(OracleReport::new(
        "error_decay",
        sxy / sxx,
        -1.0,
        0.15,
        Comparison::Within,
        trials,
        format!("log-log slope; MSE {listing}"),
    ))
}

/// Paired estimate of `E[theta_hat]_clean - E[theta_hat]_attacked`.
///
/// Both aggregates of a trial share the honest updates and the compression
/// uniforms, so honest clients emit identical bits and only the Byzantine
/// slots differ. Update-level attacks are clipped to `[-b, b]` before
/// compression, as any client's update would be.
fn byzantine_shift(spec: &AttackSpec, theta: &ModelVector, b: &[f64], m: usize, trials: usize, seed: u64) -> Result<(f64, f64)> {
    check_range(theta, b)?;
    spec.validate()?;
    let q = QuantParams::new(b.to_vec(), 0.0)?;
    let tag = 3 + 16 * spec.byzantine_count(m) as u64;
    let stats = monte_carlo(seed, tag, trials, theta.dim(), |t, rng| {
        let honest = honest_updates(theta, b, m, rng)?;
        let clean = aggregate(&honest, &q, &mut rng.clone())?;
        let attacked = match spec.kind {
            AttackKind::WorstCaseBits => {
                let bits = honest
                    .iter()
                    .map(|u| compress(u, &q, rng))
                    .collect::<Result<Vec<_>>>()?;
                probit_aggregate(&tally_bits(&corrupt_bits(&bits, spec)?)?, q.b())?
            }
            _ => {
                let mut attack_rng = RngStream::with_domain(seed, Domain::Attack, tag, t);
                let sent = corrupt_updates(&honest, spec, &mut attack_rng)?
                    .iter()
                    .map(|u| clamp_update(u, &q))
                    .collect::<Result<Vec<_>>>()?;
                aggregate(&sent, &q, rng)?
            }
        };
        Ok(clean.iter().zip(attacked.iter()).map(|(c, a)| c - a).collect())
    })?;
    let shift = stats.mean().iter().map(|x| x * x).sum::<f64>().sqrt();
    let se = stats.std_err().iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok((shift, se))
}

fn attack_label(spec: &AttackSpec) -> String {
    match spec.kind {
        AttackKind::WorstCaseBits => format!(
            "worst_case_bits_{}",
            match spec.bit_pattern {
                BitPattern::AllPlus => "all_plus",
                BitPattern::AllMinus => "all_minus",
                BitPattern::Flip => "flip",
            }
        ),
        k => k.name().to_string(),
    }
}

/// Checks the attacked aggregate's expectation moves by at most
/// `2 beta |b|` (plus 3 standard errors).
pub fn check_byzantine_bound(spec: &AttackSpec, theta: &ModelVector, b: &[f64], m: usize, trials: usize, seed: u64) -> Result<OracleReport> {
    let (shift, se) = byzantine_shift(spec, theta, b, m, trials, seed)?;
    let b_norm = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(OracleReport::new(
        format!("byzantine_{}_beta{}", attack_label(spec), spec.beta),
        shift,
        2.0 * spec.beta * b_norm,
        3.0 * se,
        Comparison::AtMost,
        trials,
        format!("{} of {m} clients byzantine", spec.byzantine_count(m)),
    ))
}

/// One-coordinate worst case: honest clients sit at `-b` and the adversary
/// sends all `+1` bits; the shift must reach at least `1.9 beta b`.
pub fn check_byzantine_tightness(beta: f64, b: f64, m: usize, trials: usize, seed: u64) -> Result<OracleReport> {
    let mut spec = AttackSpec::new(AttackKind::WorstCaseBits, beta);
    spec.bit_pattern = BitPattern::AllPlus;
    let theta = ModelVector::new(vec![-b])?;
    let (shift, _) = byzantine_shift(&spec, &theta, &[b], m, trials, seed)?;
    Ok(OracleReport::new(
        format!("byzantine_tightness_beta{beta}"),
        shift,
        1.9 * beta * b,
        0.0,
        Comparison::AtLeast,
        trials,
        format!("d = 1, M = {m}, bound 2 beta b = {}", 2.0 * beta * b),
    ))
}

/// How the quantization range is chosen in the privacy audit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RangePolicy {
    /// `b` from the privacy calibration.
    Calibrated,
    /// `b` equal to the largest update, with no privacy margin.
    NoMargin,
}

/// Update bound used by the privacy audit.
pub const DP_MAX_UPDATE: f64 = 0.01;
/// Model dimension used by the privacy audit.
pub const DP_DIM: usize = 10;

/// One candidate adjacent pair. Mixes uniformly random pairs with
/// adversarial ones that park a coordinate at the edge of its range and push
/// the sensitivity budget against it.
fn adjacent_pair(rng: &mut RngStream, b: f64, reach: f64, delta1: f64) -> Result<(ModelVector, ModelVector)> {
    let d = DP_DIM;
    let mut delta: Vec<f64> = (0..d).map(|_| reach * (2.0 * rng.uniform() - 1.0)).collect();
    let mut v = vec![0.0; d];
    let sign = |rng: &mut RngStream| if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
    match rng.below(3) {
        0 => {
            let w: Vec<f64> = (0..d).map(|_| rng.uniform()).collect();
            let total: f64 = w.iter().sum();
            let budget = delta1 * rng.uniform();
            for (vi, wi) in v.iter_mut().zip(&w) {
                *vi = sign(rng) * budget * wi / total;
            }
        }
        1 => {
            let j = rng.below(d);
            let (s, side) = (sign(rng), sign(rng));
            v[j] = s * delta1;
            delta[j] = side * s * reach;
        }
        _ => {
            let k = 1 + rng.below(d);
            let side = sign(rng);
            for _ in 0..k {
                let j = rng.below(d);
                let s = sign(rng);
                v[j] = s * delta1 / k as f64;
                delta[j] = side * s * reach;
            }
        }
    }
    // keep the neighbour inside the channel's domain
    for (vi, di) in v.iter_mut().zip(&delta) {
        *vi = (di + *vi).clamp(-b, b) - di;
    }
    Ok((ModelVector::new(delta)?, ModelVector::new(v)?))
}

/// Randomized search for the worst privacy loss over adjacent update pairs.
pub fn check_dp(policy: RangePolicy, epsilon: f64, delta1: f64, trials: usize, seed: u64) -> Result<OracleReport> {
    let spec = PrivacySpec::new(epsilon, delta1)?;
    let b = match policy {
        RangePolicy::Calibrated => required_b(DP_MAX_UPDATE, &spec),
        RangePolicy::NoMargin => DP_MAX_UPDATE,
    };
    let bs = vec![b; DP_DIM];
    let mut rng = RngStream::with_domain(seed, Domain::Oracle, 4, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (delta, v) = adjacent_pair(&mut rng, b, DP_MAX_UPDATE, delta1)?;
        worst = worst.max(audit_vector(&bs, &delta, &v, delta1)?);
    }
    let label = match policy {
        RangePolicy::Calibrated => "dp_calibrated",
        RangePolicy::NoMargin => "dp_no_margin",
    };
    Ok(OracleReport::new(
        label,
        worst,
        epsilon,
        0.0,
        Comparison::AtMost,
        trials,
        format!("b = {b}, delta1 = {delta1}, d = {DP_DIM}"),
    ))
}

/// Groups of checks runnable by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Unbiasedness,
    Variance,
    Byzantine,
    Dp,
    Decay,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Unbiasedness,
        Suite::Variance,
        Suite::Byzantine,
        Suite::Dp,
        Suite::Decay,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Unbiasedness => "unbiasedness",
            Suite::Variance => "variance",
            Suite::Byzantine => "byzantine",
            Suite::Dp => "dp",
            Suite::Decay => "decay",
        }
    }

    fn default_trials(self) -> usize {
        match self {
            Suite::Unbiasedness | Suite::Variance => 100_000,
            Suite::Byzantine | Suite::Dp => 10_000,
            Suite::Decay => 20_000,
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = ProbitError;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| ProbitError::Config(format!("unknown suite `{s}`")))
    }
}

/// Parameters shared by the suite's checks.
#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Overrides every check's default trial count.
    pub trials: Option<usize>,
    pub dp_policy: RangePolicy,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: None,
            dp_policy: RangePolicy::Calibrated,
        }
    }
}

pub const SUITE_B: f64 = 0.01;
pub const SUITE_DIM: usize = 10;
pub const SUITE_BETAS: [f64; 4] = [0.1, 0.2, 0.3, 0.4];

/// `b * (-0.45 + 0.1 i)`: a spread of targets across the range.
pub fn mixed_theta(dim: usize, b: f64) -> ModelVector {
    ModelVector::new((0..dim).map(|i| b * (-0.45 + 0.1 * (i % 10) as f64)).collect())
        .expect("finite by construction")
}

/// The attack configurations the robustness check sweeps at each `beta`.
pub fn suite_attacks(beta: f64) -> Vec<AttackSpec> {
    let mut specs: Vec<AttackSpec> = [
        AttackKind::Gaussian,
        AttackKind::SignFlip,
        AttackKind::ZeroGradient,
        AttackKind::SampleDuplicate,
    ]
    .into_iter()
    .map(|k| AttackSpec::new(k, beta))
    .collect();
    for pattern in [BitPattern::AllPlus, BitPattern::AllMinus, BitPattern::Flip] {
        let mut s = AttackSpec::new(AttackKind::WorstCaseBits, beta);
        s.bit_pattern = pattern;
        specs.push(s);
    }
    specs
}

/// Runs the named checks with their default settings.
pub fn run_suites(suites: &[Suite], opts: &SuiteOptions) -> Result<Vec<OracleReport>> {
    let b = vec![SUITE_B; SUITE_DIM];
    let mixed = mixed_theta(SUITE_DIM, SUITE_B);
    let seed = opts.seed;
    let mut out = Vec::new();
    for &suite in suites {
        let trials = opts.trials.unwrap_or(suite.default_trials());
        match suite {
            Suite::Unbiasedness => {
                let theta = ModelVector::filled(SUITE_DIM, 0.3 * SUITE_B)?;
                out.push(check_unbiasedness(&theta, &b, 50, trials, seed)?);
            }
            Suite::Variance => {
                for m in [10, 100] {
                    out.push(check_variance(&mixed, &b, m, trials, seed)?);
                }
            }
            Suite::Decay => {
                out.push(check_error_decay(&mixed, &b, &[10, 20, 40, 80], trials, seed)?);
            }
            Suite::Byzantine => {
                for beta in SUITE_BETAS {
                    for spec in suite_attacks(beta) {
                        out.push(check_byzantine_bound(&spec, &mixed, &b, 50, trials, seed)?);
                    }
                    out.push(check_byzantine_tightness(beta, SUITE_B, 20, trials.min(1000), seed)?);
                }
            }
            Suite::Dp => {
                out.push(check_dp(opts.dp_policy, 0.1, 0.0002, trials, seed)?);
            }
        }
    }
    Ok(out)
}
