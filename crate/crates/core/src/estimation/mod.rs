//! Compressive UL/DL channel estimation with SW-OMP and the CRLB benchmark.

mod crlb;
mod omp;
mod training;

pub use crlb::{crlb, PathArrays};
pub use omp::{sw_omp, SparseEstimate};
pub use training::{quantized_phase, quantized_phase_matrix, TrainingEnsemble, TrainingFrame, Whitener};

use serde::{Deserialize, Serialize};

use crate::channel::{build_dictionary, ChannelRealization};
use crate::config::SystemConfig;
use crate::error::{Error, Result};
use crate::linalg::{frob2, kron, CMatrix, CVector};
use crate::rng::{substream, Stream};
use crate::serial;

/// Angular dictionaries of a link with `n_tx_units` transmitters sharing one
/// transmit dictionary.
///
/// Column `j G_rx G_tx + t G_rx + r` is the atom `vec(a_rx,r a_tx,t^H)` of
/// transmitter `j`.
#[derive(Debug, Clone)]
pub struct LinkDictionary {
    pub rx: CMatrix,
    pub tx: CMatrix,
    pub n_tx_units: usize,
}

impl LinkDictionary {
    /// BS receives from every MS.
    pub fn uplink(cfg: &SystemConfig) -> LinkDictionary {
        LinkDictionary {
            rx: build_dictionary(cfg.n_bs, cfg.g_bs),
            tx: build_dictionary(cfg.n_ms, cfg.g_ms),
            n_tx_units: cfg.n_users,
        }
    }

    /// One MS receives from the BS.
    pub fn downlink(cfg: &SystemConfig) -> LinkDictionary {
        LinkDictionary {
            rx: build_dictionary(cfg.n_ms, cfg.g_ms),
            tx: build_dictionary(cfg.n_bs, cfg.g_bs),
            n_tx_units: 1,
        }
    }

    pub fn block_len(&self) -> usize {
        self.rx.ncols() * self.tx.ncols()
    }

    pub fn n_columns(&self) -> usize {
        self.block_len() * self.n_tx_units
    }

    /// `(transmitter, tx grid index, rx grid index)` of a column.
    pub fn locate(&self, column: usize) -> (usize, usize, usize) {
        let g_rx = self.rx.ncols();
        let j = column / self.block_len();
        let within = column % self.block_len();
        (j, within / g_rx, within % g_rx)
    }

    /// Sensing matrix `Phi Psi`; block `(m, j)` is `(x_j^T conj(A_tx)) (x) (F^H A_rx)`.
    pub fn sensing_matrix(&self, ens: &TrainingEnsemble) -> Result<CMatrix> {
        if ens.n_transmitters() != self.n_tx_units {
            return Err(Error::dim(
                "sensing_matrix",
                format!("{} transmitters for {} dictionary blocks", ens.n_transmitters(), self.n_tx_units),
            ));
        }
        let l = ens.rx_chains();
        let mut out = CMatrix::zeros(ens.n_measurements(), self.n_columns());
        let tx_conj = self.tx.conjugate();
        for (m, frame) in ens.frames.iter().enumerate() {
            let fa = frame.combiner.ad_mul(&self.rx);
            for j in 0..self.n_tx_units {
                let a = ens.tx_vector(m, j).transpose() * &tx_conj;
                let a = CMatrix::from_row_slice(1, a.ncols(), a.as_slice());
                let block = kron(&a, &fa);
                out.view_mut((m * l, j * self.block_len()), block.shape())
                    .copy_from(&block);
            }
        }
        Ok(out)
    }

    /// `G_j[k] = sum` over the selected cells of transmitter `j`, indexed `[j][k]`.
    pub fn reconstruct(&self, est: &SparseEstimate) -> Vec<Vec<CMatrix>> {
        let (n_rx, n_tx) = (self.rx.nrows(), self.tx.nrows());
        let mut out = vec![vec![CMatrix::zeros(n_rx, n_tx); est.gains.len()]; self.n_tx_units];
        for (i, &col) in est.support.iter().enumerate() {
            let (j, t, r) = self.locate(col);
            let atom = self.rx.column(r) * self.tx.column(t).adjoint();
            for (k, g) in est.gains.iter().enumerate() {
                out[j][k] += &atom * g[i];
            }
        }
        out
    }
}

/// `sum ||G_hat - G||^2 / sum ||G||^2` over transmitters and subcarriers.
pub fn nmse(estimate: &[Vec<CMatrix>], truth: &[Vec<CMatrix>]) -> Result<f64> {
    let (err, energy) = nmse_parts(estimate, truth)?;
    if energy == 0.0 {
        return Err(Error::ZeroChannel);
    }
    Ok(err / energy)
}

fn nmse_parts(estimate: &[Vec<CMatrix>], truth: &[Vec<CMatrix>]) -> Result<(f64, f64)> {
    if estimate.len() != truth.len() || estimate.iter().zip(truth).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::dim("nmse", "estimate and truth grids differ"));
    }
    let mut err = 0.0;
    let mut energy = 0.0;
    for (es, ts) in estimate.iter().zip(truth) {
        for (e, t) in es.iter().zip(ts) {
            if e.shape() != t.shape() {
                return Err(Error::dim("nmse", format!("{:?} vs {:?}", e.shape(), t.shape())));
            }
            err += frob2(&(e - t));
            energy += frob2(t);
        }
    }
    Ok((err, energy))
}

/// Recovered sparse representation plus the reconstructed channels `[j][k]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkEstimate {
    pub sparse: SparseEstimate,
    #[serde(with = "serial::matrix_grid")]
    pub channels: Vec<Vec<CMatrix>>,
}

/// Relative floor on the halting threshold, keeps noiseless runs from chasing
/// round-off once the residual has vanished.
pub const EPSILON_FLOOR: f64 = 1e-20;

/// Whitens, runs SW-OMP with `epsilon = noise_var` and reconstructs the channels.
pub fn estimate_link(
    ens: &TrainingEnsemble,
    dict: &LinkDictionary,
    y: &[CVector],
    noise_var: f64,
    max_support: usize,
) -> Result<LinkEstimate> {
    let whitener = ens.whitener()?;
    let upsilon_w = whitener.apply(&dict.sensing_matrix(ens)?)?;
    let y_w = y.iter().map(|v| whitener.apply_vec(v)).collect::<Result<Vec<_>>>()?;
    let energy: f64 = y_w.iter().map(|v| v.norm_squared()).sum();
    let per_entry = energy / (y_w.len() * ens.n_measurements()).max(1) as f64;
    let epsilon = noise_var.max(EPSILON_FLOOR * per_entry).max(f64::MIN_POSITIVE);
    let sparse = sw_omp(&y_w, &upsilon_w, epsilon, max_support)?;
    let channels = dict.reconstruct(&sparse);
    Ok(LinkEstimate { sparse, channels })
}

/// Support cap `4 sum N_p` over the transmitters of a link.
pub fn max_support(cfg: &SystemConfig, n_tx_units: usize) -> usize {
    4 * n_tx_units * cfg.n_paths
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UplinkOutcome {
    pub ensemble: TrainingEnsemble,
    /// Estimated `H_u^H[k]`.
    pub estimate: LinkEstimate,
    pub nmse: f64,
}

/// Full UL pipeline for Monte-Carlo trial `trial` (training and noise streams
/// are derived from `cfg.seed`).
pub fn estimate_uplink(ch: &ChannelRealization, cfg: &SystemConfig, trial: u64) -> Result<UplinkOutcome> {
    let ens = TrainingEnsemble::uplink(cfg, &mut substream(cfg.seed, trial, Stream::Training));
    let truth = ch.uplink_grid();
    let noise_var = cfg.noise_var();
    let y = ens.simulate(&truth, noise_var, &mut substream(cfg.seed, trial, Stream::Noise))?;
    let dict = LinkDictionary::uplink(cfg);
    let estimate = estimate_link(&ens, &dict, &y, noise_var, max_support(cfg, cfg.n_users))?;
    let nmse = nmse(&estimate.channels, &truth)?;
    Ok(UplinkOutcome { ensemble: ens, estimate, nmse })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DownlinkOutcome {
    pub ensembles: Vec<TrainingEnsemble>,
    /// Per-MS estimates of `H_u[k]`.
    pub estimates: Vec<LinkEstimate>,
    pub per_user_nmse: Vec<f64>,
    /// Total NMSE over all users (same normalization as the UL).
    pub nmse: f64,
}

/// DL pipeline: every MS estimates its own channel from the broadcast training.
pub fn simulate_downlink_training(ch: &ChannelRealization, cfg: &SystemConfig, trial: u64) -> Result<DownlinkOutcome> {
    let ensembles = TrainingEnsemble::downlink(cfg, &mut substream(cfg.seed, trial, Stream::DownlinkTraining));
    let mut noise_rng = substream(cfg.seed, trial, Stream::DownlinkNoise);
    let dict = LinkDictionary::downlink(cfg);
    let noise_var = cfg.noise_var();
    let mut estimates = Vec::with_capacity(cfg.n_users);
    let mut per_user_nmse = Vec::with_capacity(cfg.n_users);
    let (mut err, mut energy) = (0.0, 0.0);
    for (ens, user) in ensembles.iter().zip(&ch.users) {
        let truth = vec![user.freq.clone()];
        let y = ens.simulate(&truth, noise_var, &mut noise_rng)?;
        let est = estimate_link(ens, &dict, &y, noise_var, max_support(cfg, 1))?;
        let (e, t) = nmse_parts(&est.channels, &truth)?;
        if t == 0.0 {
            return Err(Error::ZeroChannel);
        }
        per_user_nmse.push(e / t);
        err += e;
        energy += t;
        estimates.push(est);
    }
    Ok(DownlinkOutcome {
        ensembles,
        estimates,
        per_user_nmse,
        nmse: err / energy,
    })
}

fn channel_energy(ch: &ChannelRealization) -> f64 {
    ch.users.iter().flat_map(|u| u.freq.iter()).map(frob2).sum()
}

/// UL CRLB normalized by the channel energy (the CRLB-implied NMSE floor).
pub fn uplink_crlb_nmse(ch: &ChannelRealization, ens: &TrainingEnsemble, cfg: &SystemConfig) -> Result<f64> {
    let arrays: Vec<PathArrays> = ch
        .users
        .iter()
        .map(|u| PathArrays {
            rx: u.paths.bs_array(cfg),
            tx: u.paths.ms_array(cfg),
        })
        .collect();
    let gamma = crlb(ens, &arrays, ch.n_subcarriers(), cfg.noise_var())?;
    Ok(gamma / channel_energy(ch))
}

/// Sum of the per-MS DL CRLBs normalized by the total channel energy.
pub fn downlink_crlb_nmse(ch: &ChannelRealization, ensembles: &[TrainingEnsemble], cfg: &SystemConfig) -> Result<f64> {
    let mut gamma = 0.0;
    for (ens, u) in ensembles.iter().zip(&ch.users) {
        let arrays = PathArrays {
            rx: u.paths.ms_array(cfg),
            tx: u.paths.bs_array(cfg),
        };
        gamma += crlb(ens, &[arrays], ch.n_subcarriers(), cfg.noise_var())?;
    }
    Ok(gamma / channel_energy(ch))
}
