//! Experiment-wide system parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridMode {
    OnGrid,
    OffGrid,
}

/// All dimensional and statistical parameters of one experiment.
///
/// Missing fields in a config file fall back to the desk-scale profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    /// BS antennas.
    pub n_bs: usize,
    /// Antennas per MS.
    pub n_ms: usize,
    pub n_users: usize,
    /// RF chains at the BS.
    pub l_bs: usize,
    /// RF chains per MS.
    pub l_ms: usize,
    /// Streams per user.
    pub n_streams: usize,
    pub n_subcarriers: usize,
    pub n_delay_taps: usize,
    /// Paths per user.
    pub n_paths: usize,
    /// Dictionary grid size at the BS.
    pub g_bs: usize,
    /// Dictionary grid size at each MS.
    pub g_ms: usize,
    /// Phase-shifter resolution of the training RF matrices.
    pub n_quant_bits: u32,
    /// Training frames.
    pub n_frames: usize,
    pub snr_db: f64,
    pub p_tx: f64,
    pub grid_mode: GridMode,
    /// Raised-cosine roll-off of the combined pulse shape.
    pub rolloff: f64,
    pub seed: u64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Which structural checks [`SystemConfig::validate`] applies.
#[derive(Debug, Clone, Copy, Default)]
pub struct Checks {
    /// Require dictionary grids of at least twice the array size.
    pub estimation: bool,
    /// Accept `l_bs == n_bs` (fully digital point of an RF-chain sweep).
    pub allow_full_rf: bool,
}

impl SystemConfig {
    /// Desk-scale profile used by default.
    pub fn desk() -> Self {
        SystemConfig {
            n_bs: 32,
            n_ms: 8,
            n_users: 2,
            l_bs: 4,
            l_ms: 2,
            n_streams: 2,
            n_subcarriers: 16,
            n_delay_taps: 8,
            n_paths: 2,
            g_bs: 64,
            g_ms: 16,
            n_quant_bits: 4,
            n_frames: 60,
            snr_db: 0.0,
            p_tx: 1.0,
            grid_mode: GridMode::OffGrid,
            rolloff: 0.8,
            seed: 1,
        }
    }

    /// Full-scale reference setup.
    pub fn paper_scale() -> Self {
        SystemConfig {
            n_bs: 128,
            n_ms: 16,
            n_users: 4,
            l_bs: 8,
            l_ms: 2,
            n_streams: 2,
            n_subcarriers: 32,
            n_delay_taps: 8,
            n_paths: 4,
            g_bs: 256,
            g_ms: 32,
            n_quant_bits: 4,
            n_frames: 100,
            ..Self::desk()
        }
    }

    /// Noise variance from `SNR = P_tx / (U sigma^2)`.
    pub fn noise_var(&self) -> f64 {
        self.p_tx / (self.n_users as f64 * 10f64.powf(self.snr_db / 10.0))
    }

    /// Per-(user, subcarrier) DL precoder power `P_tx / (U N_s)`.
    pub fn stream_power(&self) -> f64 {
        self.p_tx / (self.n_users * self.n_streams) as f64
    }

    /// Per-user UL transmit budget `P_tx / U`.
    pub fn user_power(&self) -> f64 {
        self.p_tx / self.n_users as f64
    }

    pub fn validate(&self, checks: Checks) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        let positive = [
            ("n_bs", self.n_bs),
            ("n_ms", self.n_ms),
            ("n_users", self.n_users),
            ("l_bs", self.l_bs),
            ("l_ms", self.l_ms),
            ("n_streams", self.n_streams),
            ("n_subcarriers", self.n_subcarriers),
            ("n_delay_taps", self.n_delay_taps),
            ("n_paths", self.n_paths),
            ("g_bs", self.g_bs),
            ("g_ms", self.g_ms),
            ("n_frames", self.n_frames),
        ];
        for (name, v) in positive {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.n_quant_bits == 0 || self.n_quant_bits > 16 {
            return fail(format!("n_quant_bits = {} outside 1..=16", self.n_quant_bits));
        }
        let rf_ok = if checks.allow_full_rf {
            self.l_bs <= self.n_bs
        } else {
            self.l_bs < self.n_bs
        };
        if !rf_ok {
            return fail(format!("l_bs = {} must be below n_bs = {}", self.l_bs, self.n_bs));
        }
        if self.l_ms >= self.n_ms {
            return fail(format!("l_ms = {} must be below n_ms = {}", self.l_ms, self.n_ms));
        }
        if self.n_streams > self.l_ms {
            return fail(format!("n_streams = {} exceeds l_ms = {}", self.n_streams, self.l_ms));
        }
        if self.n_users * self.n_streams > self.l_bs {
            return fail(format!(
                "n_users * n_streams = {} exceeds l_bs = {}",
                self.n_users * self.n_streams,
                self.l_bs
            ));
        }
        if self.n_paths > self.g_bs.min(self.g_ms) {
            return fail("n_paths exceeds the dictionary grid size".into());
        }
        if checks.estimation && (self.g_bs < 2 * self.n_bs || self.g_ms < 2 * self.n_ms) {
            return fail(format!(
                "estimation needs g_bs >= 2 n_bs and g_ms >= 2 n_ms (got g_bs = {}, g_ms = {})",
                self.g_bs, self.g_ms
            ));
        }
        if !(0.0..=1.0).contains(&self.rolloff) {
            return fail(format!("rolloff = {} outside [0, 1]", self.rolloff));
        }
        if !(self.p_tx > 0.0) || !self.p_tx.is_finite() {
            return fail("p_tx must be positive and finite".into());
        }
        if !self.snr_db.is_finite() {
            return fail("snr_db must be finite".into());
        }
        Ok(())
    }
}
