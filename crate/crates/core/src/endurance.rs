//! Switching-activity report in the layout of a per-group endurance table.
//!
//! Physical neuron layer `k` is the hidden layer of block `k - 1` and the
//! visible layer of block `k`, so a neuron's count is the sum over both
//! blocks. Each row carries the measured maximum, the total over all devices
//! in the group, and the analytic worst case for one device in the group.

use std::io::{self, Write};

use crate::dgm::DgmModel;
use crate::neuron::NeuronLayer;
use crate::rbm::RbmBlock;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DeviceRole {
    /// Binary neuron-state storage.
    State,
    /// Stochastic reference generator.
    Reference,
    /// Synaptic weight bit cell.
    Weight,
}

impl DeviceRole {
    pub fn name(self) -> &'static str {
        match self {
            DeviceRole::State => "state",
            DeviceRole::Reference => "reference",
            DeviceRole::Weight => "weight",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnduranceRow {
    /// `L<k>-<size>` for neuron layers, `W<k>` for weight matrices.
    pub group: String,
    pub role: DeviceRole,
    pub devices: u64,
    pub max: u64,
    pub total: u64,
    pub bound: u64,
}

pub const CSV_HEADER: &str = "group,role,devices,max_switches,total_switches,bound";

/// Per-neuron bound on weight-independent events for one block side.
struct Side<'a> {
    layer: &'a NeuronLayer,
    stores: u64,
    draws: u64,
}

fn visible_side(b: &RbmBlock) -> Side<'_> {
    let p = b.presentations();
    Side {
        layer: b.visible(),
        stores: p.visible_stores(),
        draws: p.visible_draws(),
    }
}

fn hidden_side(b: &RbmBlock) -> Side<'_> {
    let p = b.presentations();
    Side {
        layer: b.hidden(),
        stores: p.hidden_stores(),
        draws: p.hidden_draws(),
    }
}

fn layer_rows(label: String, size: usize, sides: &[Side]) -> [EnduranceRow; 2] {
    let per_neuron = |f: &dyn Fn(&NeuronLayer, usize) -> u64| -> (u64, u64) {
        let counts: Vec<u64> = (0..size).map(|i| sides.iter().map(|s| f(s.layer, i)).sum()).collect();
        (counts.iter().copied().max().unwrap_or(0), counts.iter().sum())
    };
    let (s_max, s_total) = per_neuron(&|l, i| l.state_devices()[i].switch_count());
    let (r_max, r_total) = per_neuron(&|l, i| l.ref_devices()[i].switch_count());
    [
        EnduranceRow {
            group: label.clone(),
            role: DeviceRole::State,
            devices: size as u64,
            max: s_max,
            total: s_total,
            bound: sides.iter().map(|s| s.stores).sum(),
        },
        EnduranceRow {
            group: label,
            role: DeviceRole::Reference,
            devices: size as u64,
            max: r_max,
            total: r_total,
            bound: sides.iter().map(|s| s.draws).sum(),
        },
    ]
}

/// Weight rows are bounded by the number of batch writes an epoch schedule
/// allows, `ceil(samples / batch_size) * epochs`.
pub fn weight_bound(block: &RbmBlock) -> u64 {
    let t = block.tallies();
    block.config().batches_per_epoch(t.samples_per_epoch as usize) as u64 * t.epochs
}

pub fn endurance_report(model: &DgmModel) -> Vec<EnduranceRow> {
    let blocks = model.blocks();
    let sizes = &model.spec().layer_sizes;
    let mut rows = Vec::with_capacity(3 * sizes.len());
    for (k, &size) in sizes.iter().enumerate() {
        let mut sides = Vec::with_capacity(2);
        if k > 0 {
            sides.push(hidden_side(&blocks[k - 1]));
        }
        if k < blocks.len() {
            sides.push(visible_side(&blocks[k]));
        }
        rows.extend(layer_rows(format!("L{}-{size}", k + 1), size, &sides));
    }
    for (l, b) in blocks.iter().enumerate() {
        let w = b.weights();
        rows.push(EnduranceRow {
            group: format!("W{}", l + 1),
            role: DeviceRole::Weight,
            devices: w.device_count(),
            max: w.max_bit_flips() as u64,
            total: w.total_bit_flips(),
            bound: weight_bound(b),
        });
    }
    rows
}

pub fn write_csv(rows: &[EnduranceRow], out: &mut impl Write) -> io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.group,
            r.role.name(),
            r.devices,
            r.max,
            r.total,
            r.bound
        )?;
    }
    Ok(())
}
