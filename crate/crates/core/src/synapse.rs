//! Quantized synaptic weight matrices.
//!
//! Each weight is an offset-binary code of `bits` bits, one binary OxRAM device
//! per bit. Writing a new code programs only the devices whose bit changes, so
//! a per-bit flip counter is the endurance record of the matrix.
//!
//! Weights are indexed `(i, j)` with `i` over visible units and `j` over hidden
//! units. Decoded values are cached row-major and column-major so both
//! propagation directions read contiguous memory.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantConfig {
    pub bits: u32,
    pub w_min: f64,
    pub w_max: f64,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            bits: 8,
            w_min: -1.0,
            w_max: 1.0,
        }
    }
}

impl QuantConfig {
    pub fn new(bits: u32, w_min: f64, w_max: f64) -> Result<Self> {
        let q = Self { bits, w_min, w_max };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.bits, 4 | 8 | 16) {
            return Err(Error::InvalidParam(format!(
                "quantization bits must be 4, 8 or 16, got {}",
                self.bits
            )));
        }
        if !(self.w_min.is_finite() && self.w_max.is_finite() && self.w_min < self.w_max) {
            return Err(Error::InvalidParam(format!(
                "weight range [{}, {}] is empty",
                self.w_min, self.w_max
            )));
        }
        Ok(())
    }

    pub fn max_code(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    pub fn lsb(&self) -> f64 {
        (self.w_max - self.w_min) / self.max_code() as f64
    }
}

/// Nearest code to `w` after clamping into the representable range; ties go
/// to the even code.
pub fn encode_weight(w: f64, q: &QuantConfig) -> u32 {
    let w = if w.is_nan() { q.w_min } else { w.clamp(q.w_min, q.w_max) };
    let code = ((w - q.w_min) * q.max_code() as f64 / (q.w_max - q.w_min)).round_ties_even();
    (code as u32).min(q.max_code())
}

pub fn decode_weight(code: u32, q: &QuantConfig) -> Result<f64> {
    if code > q.max_code() {
        return Err(Error::CodeOutOfRange { code, bits: q.bits });
    }
    Ok(decode_unchecked(code, q))
}

#[inline]
fn decode_unchecked(code: u32, q: &QuantConfig) -> f64 {
    if code == q.max_code() {
        // Exact ceiling, independent of how lsb rounds.
        q.w_max
    } else {
        q.w_min + code as f64 * q.lsb()
    }
}

/// Dense real matrix kept in both layouts.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseWeights {
    n_visible: usize,
    n_hidden: usize,
    by_visible: Vec<f64>,
    by_hidden: Vec<f64>,
}

impl DenseWeights {
    pub fn zeros(n_visible: usize, n_hidden: usize) -> Self {
        Self {
            n_visible,
            n_hidden,
            by_visible: vec![0.0; n_visible * n_hidden],
            by_hidden: vec![0.0; n_visible * n_hidden],
        }
    }

    pub fn from_fn(n_visible: usize, n_hidden: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(n_visible, n_hidden);
        for i in 0..n_visible {
            for j in 0..n_hidden {
                m.set(i, j, f(i, j));
            }
        }
        m
    }

    pub fn n_visible(&self) -> usize {
        self.n_visible
    }

    pub fn n_hidden(&self) -> usize {
        self.n_hidden
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.by_visible[i * self.n_hidden + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, w: f64) {
        self.by_visible[i * self.n_hidden + j] = w;
        self.by_hidden[j * self.n_visible + i] = w;
    }

    /// Weights fanning out of visible unit `i`.
    pub fn visible_row(&self, i: usize) -> &[f64] {
        &self.by_visible[i * self.n_hidden..(i + 1) * self.n_hidden]
    }

    /// Weights fanning out of hidden unit `j`, i.e. column `j`.
    pub fn hidden_row(&self, j: usize) -> &[f64] {
        &self.by_hidden[j * self.n_visible..(j + 1) * self.n_visible]
    }

    pub fn hidden_preactivation(&self, v: &[bool], h_bias: &[f64]) -> Result<Vec<f64>> {
        check_len("visible vector", self.n_visible, v.len())?;
        check_len("hidden bias", self.n_hidden, h_bias.len())?;
        let mut out = vec![0.0; self.n_hidden];
        for (i, _) in v.iter().enumerate().filter(|(_, &on)| on) {
            add_assign(&mut out, self.visible_row(i));
        }
        add_assign(&mut out, h_bias);
        Ok(out)
    }

    pub fn visible_preactivation(&self, h: &[bool], v_bias: &[f64]) -> Result<Vec<f64>> {
        check_len("hidden vector", self.n_hidden, h.len())?;
        check_len("visible bias", self.n_visible, v_bias.len())?;
        let mut out = vec![0.0; self.n_visible];
        for (j, _) in h.iter().enumerate().filter(|(_, &on)| on) {
            add_assign(&mut out, self.hidden_row(j));
        }
        add_assign(&mut out, v_bias);
        Ok(out)
    }

    /// Real-valued upward pass, used for mean-field propagation.
    pub fn hidden_preactivation_real(&self, x: &[f64], h_bias: &[f64]) -> Result<Vec<f64>> {
        check_len("visible vector", self.n_visible, x.len())?;
        check_len("hidden bias", self.n_hidden, h_bias.len())?;
        let mut out = vec![0.0; self.n_hidden];
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                for (o, w) in out.iter_mut().zip(self.visible_row(i)) {
                    *o += w * xi;
                }
            }
        }
        add_assign(&mut out, h_bias);
        Ok(out)
    }

    pub fn visible_preactivation_real(&self, y: &[f64], v_bias: &[f64]) -> Result<Vec<f64>> {
        check_len("hidden vector", self.n_hidden, y.len())?;
        check_len("visible bias", self.n_visible, v_bias.len())?;
        let mut out = vec![0.0; self.n_visible];
        for (j, &yj) in y.iter().enumerate() {
            if yj != 0.0 {
                for (o, w) in out.iter_mut().zip(self.hidden_row(j)) {
                    *o += w * yj;
                }
            }
        }
        add_assign(&mut out, v_bias);
        Ok(out)
    }
}

#[inline]
fn add_assign(acc: &mut [f64], xs: &[f64]) {
    for (a, x) in acc.iter_mut().zip(xs) {
        *a += x;
    }
}

fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::dims(what, expected, actual));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynapseArray {
    quant: QuantConfig,
    codes: Vec<u32>,
    bit_flips: Vec<u32>,
    decoded: DenseWeights,
}

impl SynapseArray {
    /// All weights at the code nearest zero.
    pub fn new(n_visible: usize, n_hidden: usize, quant: QuantConfig) -> Result<Self> {
        quant.validate()?;
        let zero = encode_weight(0.0, &quant);
        Self::from_codes(n_visible, n_hidden, quant, vec![zero; n_visible * n_hidden])
    }

    /// Builds an array from visible-major codes with fresh flip counters.
    pub fn from_codes(n_visible: usize, n_hidden: usize, quant: QuantConfig, codes: Vec<u32>) -> Result<Self> {
        let flips = vec![0; n_visible * n_hidden * quant.bits as usize];
        Self::from_parts(n_visible, n_hidden, quant, codes, flips)
    }

    pub fn from_parts(
        n_visible: usize,
        n_hidden: usize,
        quant: QuantConfig,
        codes: Vec<u32>,
        bit_flips: Vec<u32>,
    ) -> Result<Self> {
        quant.validate()?;
        check_len("synapse codes", n_visible * n_hidden, codes.len())?;
        check_len("bit flip counters", n_visible * n_hidden * quant.bits as usize, bit_flips.len())?;
        let mut decoded = DenseWeights::zeros(n_visible, n_hidden);
        for i in 0..n_visible {
            for j in 0..n_hidden {
                let w = decode_weight(codes[i * n_hidden + j], &quant)?;
                decoded.set(i, j, w);
            }
        }
        Ok(Self {
            quant,
            codes,
            bit_flips,
            decoded,
        })
    }

    pub fn n_visible(&self) -> usize {
        self.decoded.n_visible
    }

    pub fn n_hidden(&self) -> usize {
        self.decoded.n_hidden
    }

    pub fn quant(&self) -> &QuantConfig {
        &self.quant
    }

    pub fn code(&self, i: usize, j: usize) -> u32 {
        self.codes[i * self.n_hidden() + j]
    }

    pub fn codes(&self) -> &[u32] {
        &self.codes
    }

    pub fn bit_flip_counts(&self) -> &[u32] {
        &self.bit_flips
    }

    pub fn bit_flip_count(&self, i: usize, j: usize, bit: usize) -> u32 {
        let bits = self.quant.bits as usize;
        self.bit_flips[(i * self.n_hidden() + j) * bits + bit]
    }

    pub fn decoded(&self) -> &DenseWeights {
        &self.decoded
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.decoded.get(i, j)
    }

    /// Adds `delta_code` to synapse `(i, j)` with saturation, programming only
    /// the devices whose bit changes. Returns the number of devices switched.
    pub fn apply_delta(&mut self, i: usize, j: usize, delta_code: i64) -> u32 {
        if delta_code == 0 {
            return 0;
        }
        let idx = i * self.n_hidden() + j;
        let old = self.codes[idx];
        let new = (old as i64 + delta_code).clamp(0, self.quant.max_code() as i64) as u32;
        let mut changed = old ^ new;
        if changed == 0 {
            return 0;
        }
        let flips = changed.count_ones();
        let base = idx * self.quant.bits as usize;
        while changed != 0 {
            let bit = changed.trailing_zeros() as usize;
            self.bit_flips[base + bit] += 1;
            changed &= changed - 1;
        }
        self.codes[idx] = new;
        self.decoded.set(i, j, decode_unchecked(new, &self.quant));
        flips
    }

    pub fn hidden_preactivation(&self, v: &[bool], h_bias: &[f64]) -> Result<Vec<f64>> {
        self.decoded.hidden_preactivation(v, h_bias)
    }

    pub fn visible_preactivation(&self, h: &[bool], v_bias: &[f64]) -> Result<Vec<f64>> {
        self.decoded.visible_preactivation(h, v_bias)
    }

    /// Largest switching count of any single bit device.
    pub fn max_bit_flips(&self) -> u32 {
        self.bit_flips.iter().copied().max().unwrap_or(0)
    }

    pub fn total_bit_flips(&self) -> u64 {
        self.bit_flips.iter().map(|&c| c as u64).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn q8() -> QuantConfig {
        QuantConfig::default()
    }

    #[test]
    fn encode_range_ends_and_midpoint() {
        let q = q8();
        assert_eq!(encode_weight(q.w_min, &q), 0);
        assert_eq!(encode_weight(q.w_max, &q), 255);
        // (0 - -1) / (2/255) = 127.5 exactly, ties to even
        assert_eq!(encode_weight(0.0, &q), 128);
        assert_eq!(encode_weight(-5.0, &q), 0);
        assert_eq!(encode_weight(5.0, &q), 255);
    }

    #[test]
    fn decode_range_ends_and_rejects_overflow() {
        let q = q8();
        assert_eq!(decode_weight(0, &q).unwrap(), -1.0);
        assert_eq!(decode_weight(255, &q).unwrap(), 1.0);
        assert!(matches!(decode_weight(256, &q), Err(Error::CodeOutOfRange { .. })));
    }

    #[test]
    fn invalid_quant_configs() {
        assert!(QuantConfig::new(7, -1.0, 1.0).is_err());
        assert!(QuantConfig::new(8, 1.0, 1.0).is_err());
        assert!(QuantConfig::new(16, -2.0, 2.0).is_ok());
    }

    #[test]
    fn roundtrip_random_weights_all_resolutions() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for bits in [4, 8, 16] {
            let q = QuantConfig::new(bits, -1.0, 1.0).unwrap();
            for _ in 0..1000 {
                let w: f64 = rng.random_range(-1.5..1.5);
                let back = decode_weight(encode_weight(w, &q), &q).unwrap();
                assert!((back - w.clamp(-1.0, 1.0)).abs() <= q.lsb() / 2.0 + 1e-12);
            }
        }
    }

    #[test]
    fn zero_delta_changes_nothing() {
        let mut a = SynapseArray::new(2, 2, q8()).unwrap();
        let before = a.clone();
        assert_eq!(a.apply_delta(1, 1, 0), 0);
        assert_eq!(a, before);
    }

    #[test]
    fn carry_into_msb_flips_every_bit() {
        let q = q8();
        let mut a = SynapseArray::from_codes(1, 1, q, vec![0b0111_1111]).unwrap();
        assert_eq!(a.apply_delta(0, 0, 1), 8);
        assert_eq!(a.code(0, 0), 0b1000_0000);
        for b in 0..8 {
            assert_eq!(a.bit_flip_count(0, 0, b), 1);
        }
    }

    #[test]
    fn saturation_is_free() {
        let mut a = SynapseArray::from_codes(1, 1, q8(), vec![255]).unwrap();
        assert_eq!(a.apply_delta(0, 0, 1), 0);
        assert_eq!(a.code(0, 0), 255);
        assert_eq!(a.max_bit_flips(), 0);
        let mut a = SynapseArray::from_codes(1, 1, q8(), vec![3]).unwrap();
        a.apply_delta(0, 0, -100);
        assert_eq!(a.code(0, 0), 0);
    }

    #[test]
    fn alternating_unit_steps_flip_lsb_each_time() {
        let mut a = SynapseArray::new(3, 3, q8()).unwrap();
        assert_eq!(a.max_bit_flips(), 0);
        for k in 0..37 {
            a.apply_delta(1, 2, if k % 2 == 0 { 1 } else { -1 });
        }
        // from code 128 (even), +1/-1 only ever toggles bit 0
        assert_eq!(a.max_bit_flips(), 37);
        assert_eq!(a.bit_flip_count(1, 2, 0), 37);
        assert_eq!(a.total_bit_flips(), 37);
    }

    #[test]
    fn zero_input_returns_bias() {
        let a = SynapseArray::new(4, 3, q8()).unwrap();
        let bias = [0.1, -0.2, 0.3];
        assert_eq!(a.hidden_preactivation(&[false; 4], &bias).unwrap(), bias.to_vec());
        let vb = [0.5, 0.0, -1.0, 2.0];
        assert_eq!(a.visible_preactivation(&[false; 3], &vb).unwrap(), vb.to_vec());
    }

    #[test]
    fn single_synapse_preactivation() {
        let q = q8();
        let a = SynapseArray::from_codes(1, 1, q.clone(), vec![encode_weight(0.5, &q)]).unwrap();
        let pre = a.hidden_preactivation(&[true], &[0.0]).unwrap();
        assert!((pre[0] - 0.5).abs() <= q.lsb() / 2.0);
    }

    #[test]
    fn unit_hidden_selects_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let q = q8();
        let codes: Vec<u32> = (0..20).map(|_| rng.random_range(0..=255)).collect();
        let a = SynapseArray::from_codes(5, 4, q, codes).unwrap();
        for j in 0..4 {
            let mut h = [false; 4];
            h[j] = true;
            let col = a.visible_preactivation(&h, &[0.0; 5]).unwrap();
            for (i, c) in col.iter().enumerate() {
                assert_eq!(*c, a.weight(i, j));
            }
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let a = SynapseArray::new(5, 4, q8()).unwrap();
        assert!(a.hidden_preactivation(&[true; 4], &[0.0; 4]).is_err());
        assert!(a.visible_preactivation(&[true; 4], &[0.0; 4]).is_err());
        assert!(SynapseArray::from_codes(2, 2, q8(), vec![0; 3]).is_err());
        assert!(SynapseArray::from_codes(1, 1, q8(), vec![300]).is_err());
    }

    /// Plain matvec over decoded weights, summing inputs in index order and
    /// adding the bias last.
    fn oracle_up(w: &[Vec<f64>], v: &[bool], b: &[f64]) -> Vec<f64> {
        (0..b.len())
            .map(|j| {
                let mut s = 0.0;
                for i in 0..v.len() {
                    s += w[i][j] * if v[i] { 1.0 } else { 0.0 };
                }
                s + b[j]
            })
            .collect()
    }

    fn oracle_down(w: &[Vec<f64>], h: &[bool], b: &[f64]) -> Vec<f64> {
        (0..b.len())
            .map(|i| {
                let mut s = 0.0;
                for j in 0..h.len() {
                    s += w[i][j] * if h[j] { 1.0 } else { 0.0 };
                }
                s + b[i]
            })
            .collect()
    }

    proptest! {
        #[test]
        fn preactivations_match_float_oracle(
            bits in prop::sample::select(vec![4u32, 8, 16]),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = QuantConfig::new(bits, -1.0, 1.0).unwrap();
            let codes: Vec<u32> = (0..20).map(|_| rng.random_range(0..=q.max_code())).collect();
            let a = SynapseArray::from_codes(5, 4, q.clone(), codes.clone()).unwrap();
            let w: Vec<Vec<f64>> = (0..5)
                .map(|i| (0..4).map(|j| decode_weight(codes[i * 4 + j], &q).unwrap()).collect())
                .collect();
            let v: Vec<bool> = (0..5).map(|_| rng.random()).collect();
            let h: Vec<bool> = (0..4).map(|_| rng.random()).collect();
            let hb: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let vb: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            prop_assert_eq!(a.hidden_preactivation(&v, &hb).unwrap(), oracle_up(&w, &v, &hb));
            prop_assert_eq!(a.visible_preactivation(&h, &vb).unwrap(), oracle_down(&w, &h, &vb));
        }

        #[test]
        fn codes_stay_in_range_and_counters_grow(
            deltas in prop::collection::vec((0usize..3, 0usize..2, -300i64..300), 0..200),
        ) {
            let q = q8();
            let mut a = SynapseArray::new(3, 2, q.clone()).unwrap();
            let mut prev = a.bit_flip_counts().to_vec();
            for (i, j, d) in deltas {
                let old = a.code(i, j);
                let flips = a.apply_delta(i, j, d);
                let new = a.code(i, j);
                prop_assert!(new <= q.max_code());
                prop_assert_eq!(flips, (old ^ new).count_ones());
                prop_assert_eq!(a.weight(i, j), decode_weight(new, &q).unwrap());
                for (p, c) in prev.iter().zip(a.bit_flip_counts()) {
                    prop_assert!(c >= p);
                }
                prev = a.bit_flip_counts().to_vec();
            }
        }
    }
}
