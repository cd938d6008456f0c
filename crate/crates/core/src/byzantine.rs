//! Byzantine client models.
//!
//! Attackers are omniscient and colluding: they see every honest update
//! before choosing their own. The Byzantine clients are always the last
//! `floor(beta * M)` ids.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ProbitError, Result};
use crate::quantizer::BitVector;
use crate::rng::RngStream;
use crate::vector::ModelVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    None,
    /// i.i.d. normal noise on every coordinate.
    Gaussian,
    /// Own honest update scaled by a negative factor.
    SignFlip,
    /// Colluding updates that cancel the honest sum.
    ZeroGradient,
    /// Copies of the first honest client's update.
    SampleDuplicate,
    /// Direct control over the transmitted bits.
    WorstCaseBits,
}

impl AttackKind {
    pub const ALL: [AttackKind; 6] = [
        AttackKind::None,
        AttackKind::Gaussian,
        AttackKind::SignFlip,
        AttackKind::ZeroGradient,
        AttackKind::SampleDuplicate,
        AttackKind::WorstCaseBits,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::Gaussian => "gaussian",
            AttackKind::SignFlip => "sign_flip",
            AttackKind::ZeroGradient => "zero_gradient",
            AttackKind::SampleDuplicate => "sample_duplicate",
            AttackKind::WorstCaseBits => "worst_case_bits",
        }
    }

    /// Whether the attack acts on updates before transport.
    pub fn is_update_level(self) -> bool {
        !matches!(self, AttackKind::None | AttackKind::WorstCaseBits)
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackKind {
    type Err = ProbitError;

    fn from_str(s: &str) -> Result<Self> {
        AttackKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ProbitError::Parse(format!("unknown attack kind `{s}`")))
    }
}

/// Bit pattern sent by a worst-case bit adversary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BitPattern {
    AllPlus,
    AllMinus,
    /// Every bit of the attacker's own honest message inverted.
    Flip,
}

/// Attack kind, Byzantine fraction and attack parameters for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub beta: f64,
    pub gaussian_variance: f64,
    pub flip_factor: f64,
    pub bit_pattern: BitPattern,
    /// Byzantine clients invert their loss-signal vote.
    pub lie_in_loss_signal: bool,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self {
            kind: AttackKind::None,
            beta: 0.0,
            gaussian_variance: 100.0,
            flip_factor: -5.0,
            bit_pattern: BitPattern::AllPlus,
            lie_in_loss_signal: false,
        }
    }
}

impl AttackSpec {
    pub fn new(kind: AttackKind, beta: f64) -> Self {
        Self {
            kind,
            beta,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.beta) {
            return Err(ProbitError::Config(format!(
                "byzantine fraction beta = {} must lie in [0, 0.5]",
                self.beta
            )));
        }
        if !(self.gaussian_variance >= 0.0 && self.gaussian_variance.is_finite()) {
            return Err(ProbitError::Config("gaussian variance must be finite and >= 0".into()));
        }
        if !self.flip_factor.is_finite() {
            return Err(ProbitError::Config("flip factor must be finite".into()));
        }
        Ok(())
    }

    /// `floor(beta * M)`, tolerant of the product landing a rounding error
    /// below an integer.
    pub fn byzantine_count(&self, m: usize) -> usize {
        (self.beta * m as f64 + 1e-9).floor() as usize
    }

    /// True when some client actually misbehaves.
    pub fn is_active(&self, m: usize) -> bool {
        self.kind != AttackKind::None && self.byzantine_count(m) > 0
    }

    fn split(&self, m: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let nb = self.byzantine_count(m);
        if nb >= m {
            return Err(ProbitError::Config(format!(
                "{nb} byzantine clients out of {m} leaves no honest client"
            )));
        }
        Ok((m - nb, nb))
    }
}

/// Replaces the last `floor(beta * M)` updates according to the attack.
///
/// `honest` holds the update every client would send if it were honest; the
/// first `R` entries are returned untouched.
pub fn corrupt_updates(
    honest: &[ModelVector],
    spec: &AttackSpec,
    rng: &mut RngStream,
) -> Result<Vec<ModelVector>> {
    let first = honest.first().ok_or(ProbitError::Empty("update list"))?;
    for u in honest {
        first.check_dim(u)?;
    }
    let (r, nb) = spec.split(honest.len())?;
    let mut out = honest.to_vec();
    if nb == 0 || !spec.kind.is_update_level() {
        return Ok(out);
    }
    let d = first.dim();
    match spec.kind {
        AttackKind::Gaussian => {
            let sd = spec.gaussian_variance.sqrt();
            for slot in &mut out[r..] {
                *slot = ModelVector::new((0..d).map(|_| rng.normal(0.0, sd)).collect())?;
            }
        }
        AttackKind::SignFlip => {
            for slot in &mut out[r..] {
                *slot = slot.scale(spec.flip_factor)?;
            }
        }
        AttackKind::ZeroGradient => {
            let mut sum = vec![0.0; d];
            for u in &honest[..r] {
                for (s, x) in sum.iter_mut().zip(u.iter()) {
                    *s += x;
                }
            }
            let forged = ModelVector::new(sum.into_iter().map(|s| -s / nb as f64).collect())?;
            for slot in &mut out[r..] {
                *slot = forged.clone();
            }
        }
        AttackKind::SampleDuplicate => {
            for slot in &mut out[r..] {
                *slot = honest[0].clone();
            }
        }
        AttackKind::None | AttackKind::WorstCaseBits => unreachable!(),
    }
    Ok(out)
}

/// Replaces the Byzantine messages with the adversarial bit pattern.
pub fn corrupt_bits(honest_bits: &[BitVector], spec: &AttackSpec) -> Result<Vec<BitVector>> {
    if spec.kind != AttackKind::WorstCaseBits {
        return Err(ProbitError::Precondition(format!(
            "bit-level corruption requires worst_case_bits, got {}",
            spec.kind
        )));
    }
    let first = honest_bits.first().ok_or(ProbitError::Empty("message list"))?;
    if let Some(bad) = honest_bits.iter().find(|b| b.len() != first.len()) {
        return Err(ProbitError::DimensionMismatch {
            expected: first.len(),
            got: bad.len(),
        });
    }
    let (r, _) = spec.split(honest_bits.len())?;
    let mut out = honest_bits.to_vec();
    for slot in &mut out[r..] {
        *slot = match spec.bit_pattern {
            BitPattern::AllPlus => BitVector::ones(slot.len()),
            BitPattern::AllMinus => BitVector::zeros(slot.len()),
            BitPattern::Flip => slot.flipped(),
        };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregator::{fedavg_mean, probit_aggregate, tally_bits};

    fn v(x: &[f64]) -> ModelVector {
        ModelVector::new(x.to_vec()).unwrap()
    }

    fn rng() -> RngStream {
        RngStream::new(1, 0, 0)
    }

    #[test]
    fn byzantine_count_floors() {
        let s = AttackSpec::new(AttackKind::Gaussian, 0.3);
        assert_eq!(s.byzantine_count(20), 6);
        assert_eq!(s.byzantine_count(10), 3);
        assert_eq!(s.byzantine_count(3), 0);
        assert_eq!(AttackSpec::new(AttackKind::Gaussian, 0.1).byzantine_count(9), 0);
        assert!(AttackSpec::new(AttackKind::Gaussian, 0.5).validate().is_ok());
        assert!(AttackSpec::new(AttackKind::Gaussian, 0.51).validate().is_err());
        assert!(AttackSpec::new(AttackKind::Gaussian, -0.1).validate().is_err());
    }

    #[test]
    fn zero_gradient_cancels_honest_sum() {
        let spec = AttackSpec::new(AttackKind::ZeroGradient, 1.0 / 3.0);
        let out = corrupt_updates(&[v(&[1.0]), v(&[3.0]), v(&[7.0])], &spec, &mut rng()).unwrap();
        assert_eq!(out[2], v(&[-4.0]));
        assert_eq!(fedavg_mean(&out).unwrap(), v(&[0.0]));
    }

    #[test]
    fn sign_flip_scales_own_update() {
        let spec = AttackSpec::new(AttackKind::SignFlip, 0.4);
        let honest = vec![v(&[0.001]), v(&[0.0]), v(&[0.0]), v(&[0.0]), v(&[0.002])];
        let out = corrupt_updates(&honest, &spec, &mut rng()).unwrap();
        assert_eq!(&out[..3], &honest[..3]);
        assert!((out[4][0] + 0.01).abs() < 1e-15);
    }

    #[test]
    fn sample_duplicate_copies_first_client() {
        let spec = AttackSpec::new(AttackKind::SampleDuplicate, 0.3);
        let honest: Vec<_> = (0..10).map(|i| v(&[i as f64, -(i as f64)])).collect();
        let out = corrupt_updates(&honest, &spec, &mut rng()).unwrap();
        for u in &out[7..] {
            assert_eq!(u, &honest[0]);
        }
        assert_eq!(&out[..7], &honest[..7]);
    }

    #[test]
    fn gaussian_shifts_mean_by_byzantine_contribution() {
        let spec = AttackSpec::new(AttackKind::Gaussian, 0.1);
        let honest = vec![v(&[0.5, -0.5]); 10];
        let out = corrupt_updates(&honest, &spec, &mut rng()).unwrap();
        let honest_mean = fedavg_mean(&honest).unwrap();
        let attacked = fedavg_mean(&out).unwrap();
        for i in 0..2 {
            let expected = honest_mean[i] + (out[9][i] - honest[9][i]) / 10.0;
            assert!((attacked[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_variance_is_100() {
        let spec = AttackSpec::new(AttackKind::Gaussian, 0.4);
        let honest = vec![ModelVector::zeros(5000); 5];
        let out = corrupt_updates(&honest, &spec, &mut rng()).unwrap();
        let xs: Vec<f64> = out[3..].iter().flat_map(|u| u.iter().copied()).collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        // sd of the sample variance is about var * sqrt(2/n)
        assert!((var - 100.0).abs() < 4.0 * 100.0 * (2.0 / n).sqrt(), "{var}");
    }

    #[test]
    fn corrupt_updates_errors() {
        assert!(corrupt_updates(&[], &AttackSpec::default(), &mut rng()).is_err());
        let bad = AttackSpec::new(AttackKind::Gaussian, 0.7);
        assert!(corrupt_updates(&[v(&[1.0])], &bad, &mut rng()).is_err());
        assert!(corrupt_updates(
            &[v(&[1.0]), v(&[1.0, 2.0])],
            &AttackSpec::default(),
            &mut rng()
        )
        .is_err());
    }

    #[test]
    fn corrupt_bits_patterns() {
        let honest = vec![BitVector::from_signs(&[-1, 1, -1]).unwrap(); 4];
        let none = AttackSpec::new(AttackKind::WorstCaseBits, 0.0);
        assert_eq!(corrupt_bits(&honest, &none).unwrap(), honest);

        let plus = AttackSpec::new(AttackKind::WorstCaseBits, 0.49);
        let out = corrupt_bits(&honest, &plus).unwrap();
        assert_eq!(&out[..3], &honest[..3]);
        assert_eq!(out[3], BitVector::ones(3));

        let half = AttackSpec::new(AttackKind::WorstCaseBits, 0.5);
        let out = corrupt_bits(&honest, &half).unwrap();
        assert_eq!(&out[..2], &honest[..2]);
        assert!(out[2..].iter().all(|b| *b == BitVector::ones(3)));
        assert!(corrupt_bits(&honest[..1], &half).is_ok());

        let flip = AttackSpec {
            bit_pattern: BitPattern::Flip,
            ..AttackSpec::new(AttackKind::WorstCaseBits, 0.25)
        };
        let out = corrupt_bits(&honest, &flip).unwrap();
        assert_eq!(out[3].signs().collect::<Vec<_>>(), vec![1, -1, 1]);

        assert!(corrupt_bits(&honest, &AttackSpec::new(AttackKind::Gaussian, 0.25)).is_err());
    }

    #[test]
    fn attackers_are_the_last_ids() {
        let spec = AttackSpec::new(AttackKind::WorstCaseBits, 0.45);
        let honest = vec![BitVector::zeros(2); 8];
        let out = corrupt_bits(&honest, &spec).unwrap();
        assert_eq!(out.iter().filter(|b| b.count_plus() == 2).count(), 3);
        assert!(out[5..].iter().all(|b| *b == BitVector::ones(2)));
    }

    #[test]
    fn worst_case_d1_deviation_is_exactly_two_beta_b() {
        // honest delta = -b sends -1 deterministically, so both expectations
        // are exact from a single round
        let b = 0.01;
        for (m, beta) in [(4usize, 0.25), (20, 0.1), (20, 0.4)] {
            let honest = vec![BitVector::zeros(1); m];
            let spec = AttackSpec::new(AttackKind::WorstCaseBits, beta);
            let clean = probit_aggregate(&tally_bits(&honest).unwrap(), &[b]).unwrap();
            let attacked = probit_aggregate(
                &tally_bits(&corrupt_bits(&honest, &spec).unwrap()).unwrap(),
                &[b],
            )
            .unwrap();
            let dev = (attacked[0] - clean[0]).abs();
            assert!((dev - 2.0 * beta * b).abs() < 1e-15, "{dev}");
        }
    }

    #[test]
    fn kind_names_round_trip() {
        for k in AttackKind::ALL {
            assert_eq!(k.name().parse::<AttackKind>().unwrap(), k);
        }
        assert!("krum".parse::<AttackKind>().is_err());
    }
}
