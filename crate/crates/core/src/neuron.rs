//! Stochastic sigmoid neurons and the inter-layer normalization block.
//!
//! A neuron compares its sigmoid output against a reference level and fires if
//! the sigmoid is higher. The reference is either an ideal uniform draw (the
//! software model) or the divider voltage of a per-neuron OxRAM device that is
//! cycled before every draw, so its cycle-to-cycle spread supplies the noise.
//! The resulting binary state is written to a second per-neuron device.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::device::{resistance_cdf, DeviceParams, DeviceState, OxRamDevice};
use crate::error::{Error, Result};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum RefMode {
    IdealUniform,
    DeviceDerived(DeviceParams),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronLayerConfig {
    pub size: usize,
    /// Amplifier gain applied to the preactivation before the sigmoid.
    pub gain: f64,
    pub ref_mode: RefMode,
}

impl NeuronLayerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::InvalidParam("neuron layer size must be >= 1".into()));
        }
        if !(self.gain.is_finite() && self.gain > 0.0) {
            return Err(Error::InvalidParam(format!("gain must be > 0, got {}", self.gain)));
        }
        if let RefMode::DeviceDerived(p) = &self.ref_mode {
            p.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeuronLayer {
    config: NeuronLayerConfig,
    storage: DeviceParams,
    state_devices: Vec<OxRamDevice>,
    ref_devices: Vec<OxRamDevice>,
}

impl NeuronLayer {
    /// `storage` parameterizes the state-storage devices.
    pub fn new(config: NeuronLayerConfig, storage: DeviceParams) -> Result<Self> {
        config.validate()?;
        storage.validate()?;
        let ref_params = match &config.ref_mode {
            RefMode::DeviceDerived(p) => p.clone(),
            RefMode::IdealUniform => storage.clone(),
        };
        Ok(Self {
            state_devices: vec![OxRamDevice::new(&storage); config.size],
            ref_devices: vec![OxRamDevice::new(&ref_params); config.size],
            config,
            storage,
        })
    }

    pub fn from_parts(
        config: NeuronLayerConfig,
        storage: DeviceParams,
        state_devices: Vec<OxRamDevice>,
        ref_devices: Vec<OxRamDevice>,
    ) -> Result<Self> {
        config.validate()?;
        if state_devices.len() != config.size {
            return Err(Error::dims("state devices", config.size, state_devices.len()));
        }
        if ref_devices.len() != config.size {
            return Err(Error::dims("reference devices", config.size, ref_devices.len()));
        }
        Ok(Self {
            config,
            storage,
            state_devices,
            ref_devices,
        })
    }

    pub fn config(&self) -> &NeuronLayerConfig {
        &self.config
    }

    pub fn storage_params(&self) -> &DeviceParams {
        &self.storage
    }

    pub fn size(&self) -> usize {
        self.config.size
    }

    pub fn gain(&self) -> f64 {
        self.config.gain
    }

    pub fn state_devices(&self) -> &[OxRamDevice] {
        &self.state_devices
    }

    pub fn ref_devices(&self) -> &[OxRamDevice] {
        &self.ref_devices
    }

    /// Stored binary activation of neuron `index`.
    pub fn state(&self, index: usize) -> bool {
        self.state_devices[index].state().as_bit()
    }

    pub fn states(&self) -> Vec<bool> {
        self.state_devices.iter().map(|d| d.state().as_bit()).collect()
    }

    /// Firing probability of the ideal neuron.
    #[inline]
    pub fn probability(&self, pre_act: f64) -> f64 {
        sigmoid(self.config.gain * pre_act)
    }

    /// Probability that [`NeuronLayer::sample_activation`] fires, averaged
    /// over the reference noise. Equal to [`NeuronLayer::probability`] for
    /// ideal references; in device-derived mode it is the chance that a fresh
    /// RESET draw puts the divider below the sigmoid output, which is a much
    /// steeper curve. Mean-field passes use this so that they model the same
    /// neuron that training sampled.
    pub fn firing_probability(&self, pre_act: f64) -> f64 {
        let p = self.probability(pre_act);
        match &self.config.ref_mode {
            RefMode::IdealUniform => p,
            RefMode::DeviceDerived(params) => {
                // v_ref = R / (R + r_series) < p  <=>  R < p r_series / (1 - p)
                if p <= 0.0 {
                    0.0
                } else if p >= 1.0 {
                    1.0
                } else {
                    let r = p * params.r_series / (1.0 - p);
                    // Strict comparison; the boundary has measure zero.
                    resistance_cdf(params, DeviceState::Hrs, r)
                }
            }
        }
    }

    /// Draws the comparator reference for neuron `index`, cycling its
    /// reference device in device-derived mode.
    fn draw_reference<R: Rng + ?Sized>(&mut self, index: usize, rng: &mut R) -> f64 {
        match &self.config.ref_mode {
            RefMode::IdealUniform => rng.random::<f64>(),
            RefMode::DeviceDerived(params) => {
                let dev = &mut self.ref_devices[index];
                dev.cycle(params, rng);
                (dev.read_reference_voltage(params) / params.v_read).clamp(0.0, 1.0)
            }
        }
    }

    /// Samples and stores the binary output of neuron `index`.
    pub fn sample_activation<R: Rng + ?Sized>(&mut self, pre_act: f64, index: usize, rng: &mut R) -> bool {
        let p = self.probability(pre_act);
        let v_ref = self.draw_reference(index, rng);
        let bit = p > v_ref;
        self.store_state(index, bit, rng);
        bit
    }

    /// Samples every neuron of the layer in index order.
    pub fn sample_layer<R: Rng + ?Sized>(&mut self, pre_acts: &[f64], rng: &mut R) -> Result<Vec<bool>> {
        if pre_acts.len() != self.size() {
            return Err(Error::dims("preactivations", self.size(), pre_acts.len()));
        }
        Ok(pre_acts
            .iter()
            .enumerate()
            .map(|(k, &x)| self.sample_activation(x, k, rng))
            .collect())
    }

    /// Clamps the stored states to `bits`, as when labels drive a layer.
    pub fn store_layer<R: Rng + ?Sized>(&mut self, bits: &[bool], rng: &mut R) -> Result<()> {
        if bits.len() != self.size() {
            return Err(Error::dims("clamped states", self.size(), bits.len()));
        }
        for (k, &b) in bits.iter().enumerate() {
            self.store_state(k, b, rng);
        }
        Ok(())
    }

    pub fn store_state<R: Rng + ?Sized>(&mut self, index: usize, bit: bool, rng: &mut R) {
        let target = DeviceState::from_bit(bit);
        let dev = &mut self.state_devices[index];
        // The storage device is written only when its content changes.
        if dev.state() != target {
            dev.program(target, &self.storage, rng);
        }
    }

    pub fn max_state_switches(&self) -> u64 {
        self.state_devices.iter().map(|d| d.switch_count()).max().unwrap_or(0)
    }

    pub fn max_ref_switches(&self) -> u64 {
        self.ref_devices.iter().map(|d| d.switch_count()).max().unwrap_or(0)
    }

    pub fn total_state_switches(&self) -> u64 {
        self.state_devices.iter().map(|d| d.switch_count()).sum()
    }

    pub fn total_ref_switches(&self) -> u64 {
        self.ref_devices.iter().map(|d| d.switch_count()).sum()
    }

    /// Folds the counters a worker replica accumulated since it was cloned
    /// from `base` into this layer. Merging is order independent.
    pub fn merge_counters(&mut self, replica: &NeuronLayer, base: &NeuronLayer) {
        for ((mine, theirs), start) in self
            .state_devices
            .iter_mut()
            .zip(&replica.state_devices)
            .zip(&base.state_devices)
        {
            mine.absorb_count(theirs.switch_count() - start.switch_count());
        }
        for ((mine, theirs), start) in self
            .ref_devices
            .iter_mut()
            .zip(&replica.ref_devices)
            .zip(&base.ref_devices)
        {
            mine.absorb_count(theirs.switch_count() - start.switch_count());
        }
    }
}

/// One programmable operating point of the normalization block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizerLevel {
    /// SET resistance of the gain-control device, ohms.
    pub resistance: f64,
    pub gain: f64,
    #[serde(default)]
    pub bias: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizerConfig {
    pub levels: Vec<NormalizerLevel>,
    pub selected_level: f64,
}

impl Default for NormalizerConfig {
    /// Placeholder gain curve; bias is zero at every level.
    fn default() -> Self {
        let level = |resistance, gain| NormalizerLevel {
            resistance,
            gain,
            bias: 0.0,
        };
        Self {
            levels: vec![level(3.2e3, 1.5), level(6.6e3, 1.2), level(22.6e3, 0.9)],
            selected_level: 22.6e3,
        }
    }
}

impl NormalizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels.len() < 2 {
            return Err(Error::EmptyTable);
        }
        let finite = self
            .levels
            .iter()
            .all(|l| l.resistance.is_finite() && l.gain.is_finite() && l.bias.is_finite());
        if !finite {
            return Err(Error::InvalidParam("normalizer table entries must be finite".into()));
        }
        if self.levels.windows(2).any(|w| w[1].resistance <= w[0].resistance) {
            return Err(Error::InvalidParam(
                "normalizer levels must be sorted by strictly increasing resistance".into(),
            ));
        }
        let rising = self.levels.windows(2).all(|w| w[1].gain >= w[0].gain);
        let falling = self.levels.windows(2).all(|w| w[1].gain <= w[0].gain);
        if !(rising || falling) {
            return Err(Error::InvalidParam("normalizer gains must be monotone in resistance".into()));
        }
        let lo = self.levels[0].resistance;
        let hi = self.levels[self.levels.len() - 1].resistance;
        if !(lo..=hi).contains(&self.selected_level) {
            return Err(Error::InvalidParam(format!(
                "selected level {} outside tabulated range [{lo}, {hi}]",
                self.selected_level
            )));
        }
        Ok(())
    }

    /// Interpolated (gain, bias) at the selected resistance.
    pub fn operating_point(&self) -> Result<(f64, f64)> {
        self.validate()?;
        let r = self.selected_level;
        let k = self
            .levels
            .windows(2)
            .position(|w| r <= w[1].resistance)
            .unwrap_or(self.levels.len() - 2);
        let (a, b) = (&self.levels[k], &self.levels[k + 1]);
        if r == a.resistance {
            return Ok((a.gain, a.bias));
        }
        if r == b.resistance {
            return Ok((b.gain, b.bias));
        }
        let t = (r - a.resistance) / (b.resistance - a.resistance);
        Ok((a.gain + t * (b.gain - a.gain), a.bias + t * (b.bias - a.bias)))
    }
}

/// Affine gain/bias stage followed by a clamp into [0, 1].
pub fn normalize(signal: &[f64], cfg: &NormalizerConfig) -> Result<Vec<f64>> {
    let (gain, bias) = cfg.operating_point()?;
    Ok(normalize_with(signal, gain, bias))
}

pub(crate) fn normalize_with(signal: &[f64], gain: f64, bias: f64) -> Vec<f64> {
    signal.iter().map(|&s| (gain * s + bias).clamp(0.0, 1.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::ResistanceDist;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(size: usize, gain: f64, ref_mode: RefMode) -> NeuronLayer {
        NeuronLayer::new(NeuronLayerConfig { size, gain, ref_mode }, DeviceParams::default()).unwrap()
    }

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(2.0) - 0.880_797_077_977_882_3).abs() < 1e-12);
        assert!(1.0 - sigmoid(25.0) < 1e-9);
        assert!(sigmoid(-25.0) < 1e-9);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
    }

    #[test]
    fn saturated_inputs_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for mode in [RefMode::IdealUniform, RefMode::DeviceDerived(DeviceParams::default())] {
            let mut l = layer(1, 1.0, mode);
            for _ in 0..1000 {
                assert!(!l.sample_activation(-1e3, 0, &mut rng));
                assert!(l.sample_activation(1e3, 0, &mut rng));
            }
        }
    }

    #[test]
    fn ideal_rate_at_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut l = layer(1, 1.0, RefMode::IdealUniform);
        let fired = (0..10_000).filter(|_| l.sample_activation(0.0, 0, &mut rng)).count();
        assert!((fired as f64 / 1e4 - 0.5).abs() < 0.02);
    }

    #[test]
    fn ideal_rate_tracks_sigmoid_with_gain() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let gain = 2.5;
        let mut l = layer(1, gain, RefMode::IdealUniform);
        for k in 1..=9 {
            let p = k as f64 / 10.0;
            let x = logit(p) / gain;
            let fired = (0..10_000).filter(|_| l.sample_activation(x, 0, &mut rng)).count();
            assert!((fired as f64 / 1e4 - p).abs() < 0.02, "p={p} got {fired}");
        }
    }

    #[test]
    fn device_derived_rate_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let mut l = layer(1, 1.0, RefMode::DeviceDerived(DeviceParams::default()));
        let mut last = 0.0;
        for k in 0..=20 {
            let x = -4.0 + 0.4 * k as f64;
            let rate = (0..10_000).filter(|_| l.sample_activation(x, 0, &mut rng)).count() as f64 / 1e4;
            assert!(rate + 0.02 >= last, "x={x} rate {rate} < {last}");
            last = last.max(rate);
        }
        assert!(last > 0.95);
    }

    #[test]
    fn device_firing_probability_matches_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for dist in [ResistanceDist::Normal, ResistanceDist::LogNormal] {
            let params = DeviceParams { dist, ..Default::default() };
            let mut l = layer(1, 1.0, RefMode::DeviceDerived(params));
            for x in [-1.0, -0.4, -0.1, 0.0, 0.1, 0.3, 0.6, 1.5] {
                let n = 20_000;
                let hits = (0..n).filter(|_| l.sample_activation(x, 0, &mut rng)).count();
                let rate = hits as f64 / n as f64;
                let p = l.firing_probability(x);
                assert!((rate - p).abs() < 0.015, "{dist:?} x={x}: {rate} vs {p}");
            }
        }
    }

    #[test]
    fn device_firing_probability_landmarks() {
        let l = layer(1, 1.0, RefMode::DeviceDerived(DeviceParams::default()));
        // sigmoid 0.5 puts the threshold at R = r_series = mu_off.
        assert!((l.firing_probability(0.0) - 0.5).abs() < 1e-3);
        // One sigma above mu_off: R < 130k <=> p > 130/230.
        let x = logit(130.0 / 230.0);
        assert!((l.firing_probability(x) - 0.841_344_746).abs() < 1e-3);
        assert_eq!(l.firing_probability(-1e3), 0.0);
        assert_eq!(l.firing_probability(1e3), 1.0);
        let ideal = layer(1, 2.0, RefMode::IdealUniform);
        assert_eq!(ideal.firing_probability(0.7), sigmoid(1.4));
    }

    #[test]
    fn one_reference_event_per_draw() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let mut l = layer(3, 1.0, RefMode::DeviceDerived(DeviceParams::default()));
        for n in 1..=50u64 {
            l.sample_layer(&[0.0, 1.0, -1.0], &mut rng).unwrap();
            for d in l.ref_devices() {
                assert_eq!(d.switch_count(), n);
            }
        }
        let ideal = {
            let mut l = layer(3, 1.0, RefMode::IdealUniform);
            l.sample_layer(&[0.0, 1.0, -1.0], &mut rng).unwrap();
            l
        };
        assert_eq!(ideal.total_ref_switches(), 0);
    }

    #[test]
    fn storing_same_bit_is_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let mut l = layer(1, 1.0, RefMode::IdealUniform);
        l.store_state(0, true, &mut rng);
        assert_eq!(l.max_state_switches(), 1);
        l.store_state(0, true, &mut rng);
        assert_eq!(l.max_state_switches(), 1);
        assert!(l.state(0));
    }

    #[test]
    fn alternating_stores_count_transitions_after_first_write() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let mut l = layer(1, 1.0, RefMode::IdealUniform);
        let k = 40;
        l.store_state(0, true, &mut rng);
        let after_first = l.max_state_switches();
        for n in 1..k {
            l.store_state(0, n % 2 == 0, &mut rng);
        }
        assert_eq!(l.max_state_switches() - after_first, k - 1);
    }

    #[test]
    fn merge_counters_is_additive() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let params = DeviceParams::default();
        let base = layer(2, 1.0, RefMode::DeviceDerived(params));
        let mut a = base.clone();
        let mut b = base.clone();
        for _ in 0..7 {
            a.sample_layer(&[0.0, 0.0], &mut rng).unwrap();
        }
        for _ in 0..5 {
            b.sample_layer(&[0.0, 0.0], &mut rng).unwrap();
        }
        let mut ab = base.clone();
        ab.merge_counters(&a, &base);
        ab.merge_counters(&b, &base);
        let mut ba = base.clone();
        ba.merge_counters(&b, &base);
        ba.merge_counters(&a, &base);
        assert_eq!(ab.total_ref_switches(), 24);
        assert_eq!(ab.total_ref_switches(), ba.total_ref_switches());
        assert_eq!(ab.total_state_switches(), a.total_state_switches() + b.total_state_switches());
    }

    #[test]
    fn invalid_layer_configs() {
        let cfg = NeuronLayerConfig {
            size: 0,
            gain: 1.0,
            ref_mode: RefMode::IdealUniform,
        };
        assert!(cfg.validate().is_err());
        let cfg = NeuronLayerConfig {
            size: 3,
            gain: 0.0,
            ref_mode: RefMode::IdealUniform,
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unit_gain_normalizer_is_clamped_identity() {
        let cfg = NormalizerConfig {
            levels: vec![
                NormalizerLevel { resistance: 1e3, gain: 1.0, bias: 0.0 },
                NormalizerLevel { resistance: 2e3, gain: 1.0, bias: 0.0 },
            ],
            selected_level: 1.5e3,
        };
        assert_eq!(normalize(&[0.2, 0.7, 1.3, -0.1], &cfg).unwrap(), vec![0.2, 0.7, 1.0, 0.0]);
    }

    #[test]
    fn tabulated_levels_are_exact() {
        let mut cfg = NormalizerConfig::default();
        for (r, g) in [(3.2e3, 1.5), (6.6e3, 1.2), (22.6e3, 0.9)] {
            cfg.selected_level = r;
            assert_eq!(cfg.operating_point().unwrap(), (g, 0.0));
        }
    }

    #[test]
    fn midpoint_interpolates_linearly() {
        let mut cfg = NormalizerConfig {
            selected_level: (3.2e3 + 6.6e3) / 2.0,
            ..Default::default()
        };
        let (g, _) = cfg.operating_point().unwrap();
        assert!((g - (1.5 + 1.2) / 2.0).abs() < 1e-12);
        cfg.selected_level = (6.6e3 + 22.6e3) / 2.0;
        let (g, _) = cfg.operating_point().unwrap();
        assert!((g - (1.2 + 0.9) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn bad_tables_rejected() {
        let mut cfg = NormalizerConfig::default();
        cfg.levels.truncate(1);
        assert!(matches!(normalize(&[0.5], &cfg), Err(Error::EmptyTable)));
        let cfg = NormalizerConfig {
            selected_level: 50e3,
            ..Default::default()
        };
        assert!(normalize(&[0.5], &cfg).is_err());
        let mut cfg = NormalizerConfig::default();
        cfg.levels[1].gain = 2.0;
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #[test]
        fn normalize_preserves_order(xs in prop::collection::vec(-2.0f64..2.0, 2..30), r in 3.2e3f64..22.6e3) {
            let cfg = NormalizerConfig { selected_level: r, ..Default::default() };
            let ys = normalize(&xs, &cfg).unwrap();
            for a in 0..xs.len() {
                prop_assert!((0.0..=1.0).contains(&ys[a]));
                for b in 0..xs.len() {
                    if xs[a] <= xs[b] {
                        prop_assert!(ys[a] <= ys[b]);
                    }
                }
            }
        }
    }
}
