//! Client-side one-bit stochastic compressor.
//!
//! Coordinate `i` of an update `delta` is sent as `+1` with probability
//! `(b_i + delta_i) / (2 b_i)` and `-1` otherwise, so `b_i * bit` is an
//! unbiased single-draw estimate of `delta_i`.

use crate::error::{ProbitError, Result};
use crate::rng::RngStream;
use crate::vector::ModelVector;

/// Growth factor applied to `b` when the population loss decreased.
pub const B_GROWTH: f64 = 1.01;
/// Shrink factor applied to `b` when the population loss did not decrease.
pub const B_SHRINK: f64 = 0.98;

/// Per-coordinate quantization range plus the privacy margin carved out of it.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantParams {
    b: Vec<f64>,
    dp_margin: f64,
}

impl QuantParams {
    pub fn new(b: Vec<f64>, dp_margin: f64) -> Result<Self> {
        if !(dp_margin.is_finite() && dp_margin >= 0.0) {
            return Err(ProbitError::Config(format!(
                "dp margin must be finite and nonnegative, got {dp_margin}"
            )));
        }
        if b.is_empty() {
            return Err(ProbitError::Empty("quantization range"));
        }
        for (i, &bi) in b.iter().enumerate() {
            if !(bi.is_finite() && bi > 0.0) {
                return Err(ProbitError::Config(format!(
                    "b[{i}] = {bi} must be positive and finite"
                )));
            }
            if bi <= dp_margin {
                return Err(ProbitError::Config(format!(
                    "b[{i}] = {bi} does not exceed the privacy margin {dp_margin}; \
                     range too small for the requested privacy"
                )));
            }
        }
        Ok(Self { b, dp_margin })
    }

    /// Same `b` on every coordinate.
    pub fn uniform(dim: usize, b: f64, dp_margin: f64) -> Result<Self> {
        Self::new(vec![b; dim], dp_margin)
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn dp_margin(&self) -> f64 {
        self.dp_margin
    }

    /// Largest update magnitude that may be transmitted on coordinate `i`.
    pub fn admissible(&self, i: usize) -> f64 {
        self.b[i] - self.dp_margin
    }

    pub fn b_mean(&self) -> f64 {
        self.b.iter().sum::<f64>() / self.b.len() as f64
    }

    fn check_dim(&self, v: &ModelVector) -> Result<()> {
        if v.dim() != self.dim() {
            return Err(ProbitError::DimensionMismatch {
                expected: self.dim(),
                got: v.dim(),
            });
        }
        Ok(())
    }
}

/// Truncates each coordinate into `[-(b_i - margin), b_i - margin]`.
pub fn clamp_update(delta: &ModelVector, q: &QuantParams) -> Result<ModelVector> {
    q.check_dim(delta)?;
    let out = delta
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let limit = q.admissible(i);
            if limit <= 0.0 {
                return Err(ProbitError::Config(format!(
                    "privacy margin {} leaves no admissible range at coordinate {i}",
                    q.dp_margin
                )));
            }
            Ok(d.clamp(-limit, limit))
        })
        .collect::<Result<Vec<_>>>()?;
    ModelVector::new(out)
}

/// Probability that coordinate `delta_i` is sent as `+1`.
pub fn plus_probability(delta_i: f64, b_i: f64) -> Result<f64> {
    if b_i.is_nan() || b_i <= 0.0 || delta_i.abs() > b_i || !delta_i.is_finite() {
        return Err(ProbitError::Precondition(format!(
            "|delta| = {} exceeds b = {b_i}",
            delta_i.abs()
        )));
    }
    Ok((b_i + delta_i) / (2.0 * b_i))
}

/// Stochastic one-bit compression. Consumes exactly one draw per coordinate,
/// in ascending coordinate order.
pub fn compress(delta: &ModelVector, q: &QuantParams, rng: &mut RngStream) -> Result<BitVector> {
    q.check_dim(delta)?;
    let mut bits = BitVector::zeros(delta.dim());
    for (i, (&d, &b)) in delta.iter().zip(q.b()).enumerate() {
        let p = plus_probability(d, b).map_err(|e| match e {
            ProbitError::Precondition(msg) => {
                ProbitError::Precondition(format!("coordinate {i}: {msg}"))
            }
            other => other,
        })?;
        if rng.uniform() < p {
            bits.set(i, true);
        }
    }
    Ok(bits)
}

/// Deterministic sign compression; zero maps to `+1`.
pub fn sign_compress(delta: &ModelVector) -> BitVector {
    let mut bits = BitVector::zeros(delta.dim());
    for (i, &d) in delta.iter().enumerate() {
        bits.set(i, d >= 0.0);
    }
    bits
}

/// Multiplicative schedule for `b` driven by the aggregated loss signal.
pub fn dynamic_b_update(q: &QuantParams, loss_decreased: bool) -> Result<QuantParams> {
    let factor = if loss_decreased { B_GROWTH } else { B_SHRINK };
    QuantParams::new(q.b.iter().map(|b| b * factor).collect(), q.dp_margin)
}

/// `E[b_i * bit]` for one coordinate, evaluated from the channel
/// probabilities. Equals `delta_i` for every admissible input.
pub fn expected_value(delta_i: f64, b_i: f64) -> Result<f64> {
    let p = plus_probability(delta_i, b_i)?;
    Ok(p * b_i + (1.0 - p) * (-b_i))
}

/// Packed `{+1, -1}` message, one bit per coordinate.
///
/// Coordinate `i` lives at byte `i / 8`, bit `i % 8`; a set bit means `+1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BitVector {
    len: usize,
    bytes: Vec<u8>,
}

impl BitVector {
    /// All coordinates `-1`.
    pub fn zeros(len: usize) -> Self {
        Self {
            len,
            bytes: vec![0; len.div_ceil(8)],
        }
    }

    /// All coordinates `+1`.
    pub fn ones(len: usize) -> Self {
        let mut v = Self::zeros(len);
        for i in 0..len {
            v.set(i, true);
        }
        v
    }

    pub fn from_signs(signs: &[i8]) -> Result<Self> {
        let mut v = Self::zeros(signs.len());
        for (i, &s) in signs.iter().enumerate() {
            match s {
                1 => v.set(i, true),
                -1 => {}
                other => {
                    return Err(ProbitError::Precondition(format!(
                        "sign at {i} must be +1 or -1, got {other}"
                    )))
                }
            }
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_plus(&self, i: usize) -> bool {
        assert!(i < self.len, "bit index {i} out of range {}", self.len);
        self.bytes[i / 8] >> (i % 8) & 1 == 1
    }

    pub fn sign(&self, i: usize) -> i8 {
        if self.is_plus(i) {
            1
        } else {
            -1
        }
    }

    pub fn set(&mut self, i: usize, plus: bool) {
        assert!(i < self.len, "bit index {i} out of range {}", self.len);
        let mask = 1u8 << (i % 8);
        if plus {
            self.bytes[i / 8] |= mask;
        } else {
            self.bytes[i / 8] &= !mask;
        }
    }

    pub fn signs(&self) -> impl Iterator<Item = i8> + '_ {
        (0..self.len).map(|i| self.sign(i))
    }

    /// Every coordinate flipped.
    pub fn flipped(&self) -> Self {
        let mut out = self.clone();
        for b in &mut out.bytes {
            *b = !*b;
        }
        out.mask_padding();
        out
    }

    pub fn count_plus(&self) -> usize {
        self.bytes.iter().map(|b| b.count_ones() as usize).sum()
    }

    fn mask_padding(&mut self) {
        let rem = self.len % 8;
        if rem != 0 {
            if let Some(last) = self.bytes.last_mut() {
                *last &= (1u8 << rem) - 1;
            }
        }
    }

    pub fn packed(&self) -> &[u8] {
        &self.bytes
    }

    /// Wire encoding: 32-bit little-endian length header followed by the
    /// packed bits.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let len = u32::try_from(self.len)
            .map_err(|_| ProbitError::Precondition(format!("{} bits exceed u32", self.len)))?;
        let mut out = Vec::with_capacity(4 + self.bytes.len());
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&self.bytes);
        Ok(out)
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let header: [u8; 4] = buf
            .get(..4)
            .and_then(|h| h.try_into().ok())
            .ok_or_else(|| ProbitError::Parse("bit message shorter than header".into()))?;
        let len = u32::from_le_bytes(header) as usize;
        let body = &buf[4..];
        if body.len() != len.div_ceil(8) {
            return Err(ProbitError::Parse(format!(
                "bit message declares {len} coordinates but carries {} bytes",
                body.len()
            )));
        }
        let v = Self {
            len,
            bytes: body.to_vec(),
        };
        let mut masked = v.clone();
        masked.mask_padding();
        if masked != v {
            return Err(ProbitError::Parse("nonzero padding bits".into()));
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> ModelVector {
        ModelVector::new(x.to_vec()).unwrap()
    }

    #[test]
    fn clamp_examples() {
        let q = QuantParams::uniform(1, 0.01, 0.0).unwrap();
        assert_eq!(clamp_update(&v(&[0.5]), &q).unwrap()[0], 0.01);
        assert_eq!(clamp_update(&v(&[-0.5]), &q).unwrap()[0], -0.01);
        assert_eq!(clamp_update(&v(&[0.005]), &q).unwrap()[0], 0.005);

        // margin (1 + 1/0.1) * 0.02 * 0.01 = 0.0022
        let margin = (1.0 + 1.0 / 0.1) * 0.02 * 0.01;
        let q = QuantParams::uniform(1, 0.0072, margin).unwrap();
        let out = clamp_update(&v(&[0.009]), &q).unwrap()[0];
        assert!((out - 0.005).abs() < 1e-15, "{out}");
    }

    #[test]
    fn margin_exceeding_range_is_config_error() {
        assert!(matches!(
            QuantParams::uniform(3, 0.002, 0.0022),
            Err(ProbitError::Config(_))
        ));
        assert!(matches!(
            QuantParams::uniform(3, 0.0022, 0.0022),
            Err(ProbitError::Config(_))
        ));
        assert!(QuantParams::uniform(3, 0.0, 0.0).is_err());
    }

    #[test]
    fn compress_boundaries() {
        let q = QuantParams::uniform(2, 0.01, 0.0).unwrap();
        let mut rng = RngStream::new(1, 0, 0);
        for _ in 0..1000 {
            let bits = compress(&v(&[0.01, -0.01]), &q, &mut rng).unwrap();
            assert_eq!(bits.sign(0), 1);
            assert_eq!(bits.sign(1), -1);
        }
        assert_eq!(plus_probability(0.0, 0.01).unwrap(), 0.5);
        assert_eq!(plus_probability(0.005, 0.01).unwrap(), 0.75);
    }

    #[test]
    fn compress_rejects_out_of_range() {
        let q = QuantParams::uniform(2, 0.01, 0.0).unwrap();
        let mut rng = RngStream::new(1, 0, 0);
        let err = compress(&v(&[0.0, 0.02]), &q, &mut rng).unwrap_err();
        assert!(matches!(err, ProbitError::Precondition(ref m) if m.contains("coordinate 1")));
        assert!(compress(&v(&[0.0]), &q, &mut rng).is_err());
    }

    #[test]
    fn compress_consumes_one_draw_per_coordinate() {
        let q = QuantParams::uniform(37, 1.0, 0.0).unwrap();
        let mut rng = RngStream::new(3, 1, 2);
        compress(&ModelVector::zeros(37), &q, &mut rng).unwrap();
        assert_eq!(rng.draw_counter(), 37);
    }

    #[test]
    fn compress_is_deterministic() {
        let q = QuantParams::uniform(50, 1.0, 0.0).unwrap();
        let delta = ModelVector::new((0..50).map(|i| (i as f64 / 50.0) - 0.5).collect()).unwrap();
        let a = compress(&delta, &q, &mut RngStream::new(11, 2, 3)).unwrap();
        let b = compress(&delta, &q, &mut RngStream::new(11, 2, 3)).unwrap();
        assert_eq!(a, b);
    }

    /// Frequency of +1 and mean of `b * bit` over 1e5 draws, each within
    /// 4 standard errors of the channel's closed-form values.
    #[test]
    fn frequency_and_unbiasedness_grid() {
        let b = 0.01;
        let n = 100_000;
        let q = QuantParams::uniform(1, b, 0.0).unwrap();
        for (k, ratio) in [-1.0, -0.5, 0.0, 0.5, 1.0].into_iter().enumerate() {
            let delta = v(&[ratio * b]);
            let mut rng = RngStream::new(99, k as u64, 0);
            let mut plus = 0usize;
            for _ in 0..n {
                plus += compress(&delta, &q, &mut rng).unwrap().count_plus();
            }
            let p = (1.0 + ratio) / 2.0;
            let freq = plus as f64 / n as f64;
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((freq - p).abs() <= 4.0 * se, "ratio {ratio}: {freq} vs {p}");
            // mean of b*bit = b(2 freq - 1); se scales by 2b
            let mean = b * (2.0 * freq - 1.0);
            assert!((mean - ratio * b).abs() <= 4.0 * 2.0 * b * se);
        }
    }

    #[test]
    fn dynamic_b_examples() {
        let q = QuantParams::uniform(4, 0.01, 0.0).unwrap();
        let up = dynamic_b_update(&q, true).unwrap();
        let down = dynamic_b_update(&q, false).unwrap();
        assert!(up.b().iter().all(|&b| (b - 0.0101).abs() < 1e-15));
        assert!(down.b().iter().all(|&b| (b - 0.0098).abs() < 1e-15));
        let both = dynamic_b_update(&up, false).unwrap();
        assert!(both.b().iter().all(|&b| (b - 0.009898).abs() < 1e-15));
        assert_eq!(both.dp_margin(), 0.0);
    }

    #[test]
    fn dynamic_b_shrinking_below_margin_fails() {
        let q = QuantParams::uniform(1, 0.0101, 0.01).unwrap();
        assert!(matches!(dynamic_b_update(&q, false), Err(ProbitError::Config(_))));
        assert_eq!(dynamic_b_update(&q, true).unwrap().dp_margin(), 0.01);
    }

    #[test]
    fn expected_value_identity() {
        assert_eq!(expected_value(0.0, 0.01).unwrap(), 0.0);
        assert_eq!(expected_value(0.01, 0.01).unwrap(), 0.01);
        assert!((expected_value(0.003, 0.01).unwrap() - 0.003).abs() < 1e-15);
        assert!(expected_value(0.02, 0.01).is_err());
    }

    #[test]
    fn sign_compress_maps_zero_to_plus() {
        let bits = sign_compress(&v(&[-1.0, 0.0, 2.0]));
        assert_eq!(bits.signs().collect::<Vec<_>>(), vec![-1, 1, 1]);
    }

    #[test]
    fn wire_layout() {
        let bits = BitVector::from_signs(&[1, -1, -1, 1, -1, -1, -1, -1, 1]).unwrap();
        assert_eq!(bits.encode().unwrap(), vec![9, 0, 0, 0, 0b0000_1001, 0b0000_0001]);
        assert!(BitVector::decode(&[9, 0, 0, 0, 0b1001]).is_err());
        assert!(BitVector::decode(&[9, 0, 0, 0, 0b1001, 0b10]).is_err());
        assert!(BitVector::decode(&[1, 0]).is_err());
        assert_eq!(BitVector::ones(9).flipped(), BitVector::zeros(9));
    }

    proptest! {
        #[test]
        fn wire_roundtrip(signs in prop::collection::vec(prop::bool::ANY, 0..300)) {
            let signs: Vec<i8> = signs.into_iter().map(|s| if s { 1 } else { -1 }).collect();
            let bits = BitVector::from_signs(&signs).unwrap();
            let back = BitVector::decode(&bits.encode().unwrap()).unwrap();
            prop_assert_eq!(back.signs().collect::<Vec<_>>(), signs);
            prop_assert_eq!(back, bits);
        }

        #[test]
        fn clamp_respects_admissible_range(
            xs in prop::collection::vec(-1.0f64..1.0, 1..32),
            b in 0.001f64..0.1,
            frac in 0.0f64..0.99,
        ) {
            let q = QuantParams::uniform(xs.len(), b, frac * b).unwrap();
            let out = clamp_update(&ModelVector::new(xs).unwrap(), &q).unwrap();
            for (i, &o) in out.iter().enumerate() {
                prop_assert!(q.b()[i] >= o.abs() + q.dp_margin() - 1e-15);
            }
        }
    }
}
