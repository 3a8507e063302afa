//! Cell-specific reference signals (CRS) of the LTE downlink.
//!
//! Every base station continuously transmits known QPSK pilots on a comb of
//! every sixth subcarrier. The pilot values come from a length-31 Gold
//! sequence keyed by cell identity, slot, symbol and cyclic-prefix type; the
//! comb offset is a per-port, per-symbol function of the cell identity. A
//! passive sounder can therefore treat any surrounding cell as a free
//! wideband transmitter, provided it can regenerate these combs exactly.
//!
//! The receive chain observes one antenna per 0.5 ms slot, so a full sweep
//! of an `M`-port array sees `M` consecutive slots. [`CrsGrid`] precomputes
//! each slot's comb and [`CrsGrid::assemble_reference_vector`] stacks them
//! in switching order into the reference vector used by the cancellation
//! and estimation stages.
//!
//! # Example
//!
//! ```
//! use sounder_core::crs::{CrsConfig, CrsGrid};
//!
//! let cfg = CrsConfig { cell_id: 376, ..CrsConfig::default() };
//! let grid = CrsGrid::new(cfg).unwrap();
//! // 1200 subcarriers -> 200 pilots per CRS symbol, two symbols per slot.
//! assert_eq!(grid.n_f(0).unwrap(), 400);
//! ```

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::C64;

/// Largest downlink bandwidth in resource blocks. The Gold sequence is always
/// generated for this width and narrower grids take its centre section, so
/// pilot values are independent of the configured bandwidth.
const MAX_DL_RB: usize = 110;

/// Warm-up offset of the pseudo-random sequence generator.
const GOLD_SKIP: usize = 1600;

/// Subcarriers per resource block.
const SC_PER_RB: usize = 12;

/// CRS comb spacing within a single OFDM symbol, in subcarriers.
pub const CRS_COMB: usize = 6;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CpType {
    Normal,
    Extended,
}

impl CpType {
    pub fn symbols_per_slot(self) -> usize {
        match self {
            CpType::Normal => 7,
            CpType::Extended => 6,
        }
    }

    fn init_bit(self) -> u32 {
        match self {
            CpType::Normal => 1,
            CpType::Extended => 0,
        }
    }
}

/// Static description of one cell's CRS transmission.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrsConfig {
    /// Physical cell identity, 0..=503.
    pub cell_id: u16,
    /// Number of CRS ports (1, 2 or 4).
    pub n_ports: u8,
    /// Occupied subcarriers; must be a multiple of 12. 1200 for 20 MHz.
    pub n_subcarriers: usize,
    /// Subcarrier spacing in Hz.
    pub subcarrier_spacing_hz: f64,
    pub cp_type: CpType,
    /// Slots per radio frame; the pilot pattern repeats with this period.
    pub n_slots_per_frame: usize,
}

impl Default for CrsConfig {
    fn default() -> Self {
        CrsConfig {
            cell_id: 0,
            n_ports: 1,
            n_subcarriers: 1200,
            subcarrier_spacing_hz: 15e3,
            cp_type: CpType::Normal,
            n_slots_per_frame: 20,
        }
    }
}

impl CrsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cell_id > 503 {
            return Err(Error::config(format!("cell_id {} out of 0..=503", self.cell_id)));
        }
        if ![1, 2, 4].contains(&self.n_ports) {
            return Err(Error::config(format!("n_ports {} not in {{1,2,4}}", self.n_ports)));
        }
        if self.n_subcarriers == 0 || self.n_subcarriers % SC_PER_RB != 0 {
            return Err(Error::config(format!(
                "n_subcarriers {} must be a positive multiple of {SC_PER_RB}",
                self.n_subcarriers
            )));
        }
        if self.n_subcarriers / SC_PER_RB > MAX_DL_RB {
            return Err(Error::config(format!(
                "n_subcarriers {} exceeds {} resource blocks",
                self.n_subcarriers, MAX_DL_RB
            )));
        }
        if !(self.subcarrier_spacing_hz > 0.0) {
            return Err(Error::config("subcarrier_spacing_hz must be positive"));
        }
        if self.n_slots_per_frame == 0 {
            return Err(Error::config("n_slots_per_frame must be positive"));
        }
        Ok(())
    }

    pub fn n_rb(&self) -> usize {
        self.n_subcarriers / SC_PER_RB
    }

    /// Cell-specific comb shift, `cell_id mod 6`.
    pub fn v_shift(&self) -> usize {
        (self.cell_id % 6) as usize
    }

    /// OFDM symbols of one slot that carry CRS for `port`.
    pub fn crs_symbols(&self, port: u8) -> Result<Vec<usize>> {
        if port >= self.n_ports {
            return Err(Error::config(format!(
                "port {port} not available with n_ports {}",
                self.n_ports
            )));
        }
        let last = self.cp_type.symbols_per_slot() - 3;
        Ok(match port {
            0 | 1 => vec![0, last],
            2 | 3 => vec![1],
            _ => unreachable!("validated port"),
        })
    }
}

// ---------------------------------------------------------------------------
// Gold sequence
// ---------------------------------------------------------------------------

/// Length-31 Gold sequence: two LFSRs over GF(2), output XORed after a
/// 1600-step warm-up. Register bit `i` holds x(n+i) for the current step.
fn gold_sequence(c_init: u32, len: usize) -> Vec<u8> {
    let mut x1: u32 = 1;
    let mut x2: u32 = c_init & 0x7FFF_FFFF;
    let step = |x: &mut u32, fb: u32| {
        *x = (*x >> 1) | ((fb & 1) << 30);
    };
    let mut out = Vec::with_capacity(len);
    for n in 0..(GOLD_SKIP + len) {
        if n >= GOLD_SKIP {
            out.push(((x1 ^ x2) & 1) as u8);
        }
        let f1 = (x1 >> 3) ^ x1;
        let f2 = (x2 >> 3) ^ (x2 >> 2) ^ (x2 >> 1) ^ x2;
        step(&mut x1, f1);
        step(&mut x2, f2);
    }
    out
}

fn crs_c_init(cfg: &CrsConfig, slot: usize, symbol: usize) -> u32 {
    let n_id = cfg.cell_id as u32;
    let ns = slot as u32;
    let l = symbol as u32;
    (1 << 10) * (7 * (ns + 1) + l + 1) * (2 * n_id + 1) + 2 * n_id + cfg.cp_type.init_bit()
}

// ---------------------------------------------------------------------------
// Sequence values and comb positions
// ---------------------------------------------------------------------------

fn check_slot_symbol_port(cfg: &CrsConfig, slot: usize, symbol: usize, port: u8) -> Result<()> {
    cfg.validate()?;
    if slot >= cfg.n_slots_per_frame {
        return Err(Error::config(format!(
            "slot {slot} out of 0..{}",
            cfg.n_slots_per_frame
        )));
    }
    let symbols = cfg.crs_symbols(port)?;
    if !symbols.contains(&symbol) {
        return Err(Error::config(format!(
            "symbol {symbol} carries no CRS for port {port} (expected one of {symbols:?})"
        )));
    }
    Ok(())
}

/// Pilot values for one (slot, symbol, port), in increasing subcarrier order.
/// Each value is a unit-modulus QPSK symbol.
pub fn generate_crs_sequence(
    cfg: &CrsConfig,
    slot: usize,
    symbol: usize,
    port: u8,
) -> Result<Vec<C64>> {
    check_slot_symbol_port(cfg, slot, symbol, port)?;
    let bits = gold_sequence(crs_c_init(cfg, slot, symbol), 4 * MAX_DL_RB);
    let n_rb = cfg.n_rb();
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    let mut out = Vec::with_capacity(2 * n_rb);
    for m in 0..2 * n_rb {
        let mp = m + MAX_DL_RB - n_rb;
        let re = scale * (1.0 - 2.0 * f64::from(bits[2 * mp]));
        let im = scale * (1.0 - 2.0 * f64::from(bits[2 * mp + 1]));
        out.push(Complex::new(re, im));
    }
    Ok(out)
}

/// Comb position parameter `v` for (port, symbol, slot).
fn comb_v(port: u8, symbol: usize, slot: usize) -> usize {
    match port {
        0 => {
            if symbol == 0 {
                0
            } else {
                3
            }
        }
        1 => {
            if symbol == 0 {
                3
            } else {
                0
            }
        }
        2 => 3 * (slot % 2),
        3 => 3 + 3 * (slot % 2),
        _ => unreachable!("validated port"),
    }
}

/// Subcarrier indices carrying CRS for one (slot, symbol, port), strictly
/// increasing with spacing [`CRS_COMB`].
pub fn crs_indices(cfg: &CrsConfig, slot: usize, symbol: usize, port: u8) -> Result<Vec<usize>> {
    check_slot_symbol_port(cfg, slot, symbol, port)?;
    let shift = (comb_v(port, symbol, slot) + cfg.v_shift()) % CRS_COMB;
    Ok((0..2 * cfg.n_rb()).map(|m| CRS_COMB * m + shift).collect())
}

// ---------------------------------------------------------------------------
// Precomputed grid
// ---------------------------------------------------------------------------

/// CRS of one symbol: positions plus values.
#[derive(Clone, Debug)]
pub struct CrsSymbol {
    /// OFDM symbol index within the slot.
    pub symbol: usize,
    /// Subcarrier indices, strictly increasing.
    pub indices: Vec<usize>,
    /// Unit-modulus pilot values, aligned with `indices`.
    pub values: Vec<C64>,
}

/// All CRS of one (port, slot) merged across the slot's CRS symbols and
/// sorted by subcarrier. For two-symbol ports the merged comb is uniform
/// with half the single-symbol spacing.
#[derive(Clone, Debug)]
pub struct SlotComb {
    /// (symbol, subcarrier) per entry, sorted by subcarrier.
    pub res: Vec<(usize, usize)>,
    /// Pilot values aligned with `res`.
    pub values: Vec<C64>,
}

/// One cell's CRS for every (port, slot) of a radio frame.
#[derive(Clone, Debug)]
pub struct CrsGrid {
    cfg: CrsConfig,
    /// `[port][slot]` list of per-symbol CRS.
    symbols: Vec<Vec<Vec<CrsSymbol>>>,
    /// `[port][slot]` merged combs.
    combs: Vec<Vec<SlotComb>>,
}

impl CrsGrid {
    pub fn new(cfg: CrsConfig) -> Result<Self> {
        cfg.validate()?;
        let mut symbols = Vec::with_capacity(cfg.n_ports as usize);
        let mut combs = Vec::with_capacity(cfg.n_ports as usize);
        for port in 0..cfg.n_ports {
            let mut per_slot = Vec::with_capacity(cfg.n_slots_per_frame);
            let mut comb_slot = Vec::with_capacity(cfg.n_slots_per_frame);
            for slot in 0..cfg.n_slots_per_frame {
                let mut syms = Vec::new();
                for symbol in cfg.crs_symbols(port)? {
                    let indices = crs_indices(&cfg, slot, symbol, port)?;
                    let values = generate_crs_sequence(&cfg, slot, symbol, port)?;
                    debug_assert_eq!(indices.len(), values.len());
                    syms.push(CrsSymbol { symbol, indices, values });
                }
                let mut merged: Vec<(usize, usize, C64)> = syms
                    .iter()
                    .flat_map(|s| {
                        s.indices
                            .iter()
                            .zip(&s.values)
                            .map(move |(&k, &v)| (s.symbol, k, v))
                    })
                    .collect();
                merged.sort_by_key(|&(_, k, _)| k);
                comb_slot.push(SlotComb {
                    res: merged.iter().map(|&(l, k, _)| (l, k)).collect(),
                    values: merged.iter().map(|&(_, _, v)| v).collect(),
                });
                per_slot.push(syms);
            }
            symbols.push(per_slot);
            combs.push(comb_slot);
        }
        Ok(CrsGrid { cfg, symbols, combs })
    }

    pub fn cfg(&self) -> &CrsConfig {
        &self.cfg
    }

    fn check_port(&self, port: u8) -> Result<()> {
        if port >= self.cfg.n_ports {
            return Err(Error::config(format!(
                "port {port} not available with n_ports {}",
                self.cfg.n_ports
            )));
        }
        Ok(())
    }

    /// Per-symbol CRS of one (port, slot).
    pub fn symbols(&self, port: u8, slot: usize) -> Result<&[CrsSymbol]> {
        self.check_port(port)?;
        self.symbols[port as usize]
            .get(slot)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::config(format!("slot {slot} out of range")))
    }

    /// Merged comb of one (port, slot), sorted by subcarrier.
    pub fn slot_comb(&self, port: u8, slot: usize) -> Result<&SlotComb> {
        self.check_port(port)?;
        self.combs[port as usize]
            .get(slot)
            .ok_or_else(|| Error::config(format!("slot {slot} out of range")))
    }

    /// Observed pilot count per slot for `port`.
    pub fn n_f(&self, port: u8) -> Result<usize> {
        self.check_port(port)?;
        Ok(self.combs[port as usize][0].values.len())
    }

    /// Merged comb spacing in subcarriers (uniform by construction): 3 for
    /// two-symbol ports, 6 for single-symbol ports.
    pub fn comb_spacing_sc(&self, port: u8) -> Result<usize> {
        self.check_port(port)?;
        Ok(CRS_COMB / self.cfg.crs_symbols(port)?.len())
    }

    /// Merged comb spacing in Hz; this is the effective frequency sampling
    /// interval of every per-antenna observation for `port`.
    pub fn comb_spacing_hz(&self, port: u8) -> Result<f64> {
        Ok(self.comb_spacing_sc(port)? as f64 * self.cfg.subcarrier_spacing_hz)
    }

    /// Stacked reference vector for an `m_antennas`-port switched array:
    /// antenna `m` dwells for slot `m mod n_slots_per_frame`, so its block
    /// holds that slot's merged comb values. Length `m_antennas * n_f`.
    pub fn assemble_reference_vector(&self, port: u8, m_antennas: usize) -> Result<Vec<C64>> {
        self.check_port(port)?;
        if m_antennas == 0 {
            return Err(Error::config("m_antennas must be positive"));
        }
        let n_f = self.n_f(port)?;
        let mut out = Vec::with_capacity(m_antennas * n_f);
        for m in 0..m_antennas {
            let slot = m % self.cfg.n_slots_per_frame;
            out.extend_from_slice(&self.combs[port as usize][slot].values);
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
