//! Compressive training ensembles and pilot simulation.
//!
//! The model is written for one receiver with `l_rx` RF chains observing `J`
//! transmitters. In the uplink the receiver is the BS and the transmitters are
//! the MSs; in the downlink each MS is a receiver of the single BS transmitter.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::SystemConfig;
use crate::error::{Error, Result};
use crate::linalg::{block_diag, c64, cholesky_upper, kron, CMatrix, CVector, ONE};
use crate::serial;

/// Training matrices for one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingFrame {
    /// Receive combiner `n_rx x l_rx`, quantized unit-modulus phases.
    #[serde(with = "serial::matrix")]
    pub combiner: CMatrix,
    /// Per-transmitter RF precoders `n_tx x l_tx`, quantized unit-modulus phases.
    #[serde(with = "serial::matrix_vec")]
    pub precoders: Vec<CMatrix>,
    /// Per-transmitter unit-norm spatial modulation vectors.
    #[serde(with = "serial::vector_vec")]
    pub spatial: Vec<CVector>,
    /// Amplitude that brings `precoder * spatial` to the transmitter's power.
    pub tx_scale: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingEnsemble {
    pub frames: Vec<TrainingFrame>,
    /// Pilot scalars `s^(m)[k]` (unit magnitude), indexed `[m][k]`.
    pub pilots: Vec<Vec<c64>>,
}

/// Entry drawn uniformly from `{exp(j 2 pi n / 2^bits)}`.
pub fn quantized_phase(rng: &mut impl Rng, bits: u32) -> c64 {
    let levels = 1u64 << bits;
    let n = rng.random_range(0..levels);
    if bits == 1 {
        // exact +-1 for binary phase shifters
        return if n == 0 { ONE } else { -ONE };
    }
    c64::from_polar(1.0, 2.0 * PI * n as f64 / levels as f64)
}

pub fn quantized_phase_matrix(rng: &mut impl Rng, rows: usize, cols: usize, bits: u32) -> CMatrix {
    CMatrix::from_fn(rows, cols, |_, _| quantized_phase(rng, bits))
}

fn spatial_vector(rng: &mut impl Rng, len: usize, bits: u32) -> CVector {
    let scale = 1.0 / (len as f64).sqrt();
    CVector::from_fn(len, |_, _| quantized_phase(rng, bits) * scale)
}

/// Dimensions of a link: receiver array/chains and per-transmitter arrays/chains.
#[derive(Debug, Clone, Copy)]
struct LinkShape {
    n_rx: usize,
    l_rx: usize,
    n_tx: usize,
    l_tx: usize,
    n_tx_units: usize,
}

fn draw_frame(shape: LinkShape, bits: u32, power: f64, rng: &mut impl Rng) -> TrainingFrame {
    let combiner = quantized_phase_matrix(rng, shape.n_rx, shape.l_rx, bits);
    let mut precoders = Vec::with_capacity(shape.n_tx_units);
    let mut spatial = Vec::with_capacity(shape.n_tx_units);
    let mut tx_scale = Vec::with_capacity(shape.n_tx_units);
    for _ in 0..shape.n_tx_units {
        let t = quantized_phase_matrix(rng, shape.n_tx, shape.l_tx, bits);
        let mut q = spatial_vector(rng, shape.l_tx, bits);
        let mut eff = (&t * &q).norm();
        // a degenerate draw can cancel exactly; redraw the modulation vector
        while eff < 1e-9 {
            q = spatial_vector(rng, shape.l_tx, bits);
            eff = (&t * &q).norm();
        }
        tx_scale.push(power.sqrt() / eff);
        precoders.push(t);
        spatial.push(q);
    }
    TrainingFrame {
        combiner,
        precoders,
        spatial,
        tx_scale,
    }
}

impl TrainingEnsemble {
    /// UL training: the BS combines, every MS transmits with power `P_tx / U`.
    pub fn uplink(cfg: &SystemConfig, rng: &mut impl Rng) -> TrainingEnsemble {
        let shape = LinkShape {
            n_rx: cfg.n_bs,
            l_rx: cfg.l_bs,
            n_tx: cfg.n_ms,
            l_tx: cfg.l_ms,
            n_tx_units: cfg.n_users,
        };
        let frames = (0..cfg.n_frames)
            .map(|_| draw_frame(shape, cfg.n_quant_bits, cfg.user_power(), rng))
            .collect();
        TrainingEnsemble {
            frames,
            pilots: vec![vec![ONE; cfg.n_subcarriers]; cfg.n_frames],
        }
    }

    /// DL training: one ensemble per MS. The BS precoders are shared (broadcast)
    /// and every MS combines with its own RF matrices. The BS transmits with
    /// `P_tx / U` so that each MS sees the single-user SNR.
    pub fn downlink(cfg: &SystemConfig, rng: &mut impl Rng) -> Vec<TrainingEnsemble> {
        let bs_shape = LinkShape {
            n_rx: 0,
            l_rx: 0,
            n_tx: cfg.n_bs,
            l_tx: cfg.l_bs,
            n_tx_units: 1,
        };
        let broadcast: Vec<TrainingFrame> = (0..cfg.n_frames)
            .map(|_| draw_frame(bs_shape, cfg.n_quant_bits, cfg.user_power(), rng))
            .collect();
        (0..cfg.n_users)
            .map(|_| {
                let frames = broadcast
                    .iter()
                    .map(|bf| TrainingFrame {
                        combiner: quantized_phase_matrix(rng, cfg.n_ms, cfg.l_ms, cfg.n_quant_bits),
                        ..bf.clone()
                    })
                    .collect();
                TrainingEnsemble {
                    frames,
                    pilots: vec![vec![ONE; cfg.n_subcarriers]; cfg.n_frames],
                }
            })
            .collect()
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn n_transmitters(&self) -> usize {
        self.frames.first().map_or(0, |f| f.precoders.len())
    }

    pub fn rx_chains(&self) -> usize {
        self.frames.first().map_or(0, |f| f.combiner.ncols())
    }

    pub fn rx_antennas(&self) -> usize {
        self.frames.first().map_or(0, |f| f.combiner.nrows())
    }

    /// Measurements per subcarrier, `M l_rx`.
    pub fn n_measurements(&self) -> usize {
        self.n_frames() * self.rx_chains()
    }

    /// Effective transmitted vector `x_j^(m) = c T q` of transmitter `j` in frame `m`.
    pub fn tx_vector(&self, m: usize, j: usize) -> CVector {
        let f = &self.frames[m];
        &f.precoders[j] * &f.spatial[j] * c64::from(f.tx_scale[j])
    }

    /// Stacked measurement matrix `Phi`; row block `m` is `[x_1^T ... x_J^T] (x) F^(m)H`.
    pub fn measurement_matrix(&self) -> CMatrix {
        let blocks: Vec<CMatrix> = (0..self.n_frames())
            .map(|m| {
                let xs: Vec<c64> = (0..self.n_transmitters())
                    .flat_map(|j| self.tx_vector(m, j).iter().copied().collect::<Vec<_>>())
                    .collect();
                let row = CMatrix::from_row_slice(1, xs.len(), &xs);
                kron(&row, &self.frames[m].combiner.adjoint())
            })
            .collect();
        crate::linalg::vstack(&blocks).expect("frames share dimensions")
    }

    /// Per-frame blocks `F^(m)H F^(m)` of the noise covariance `C_w`.
    pub fn noise_covariance_blocks(&self) -> Vec<CMatrix> {
        self.frames
            .iter()
            .map(|f| f.combiner.adjoint() * &f.combiner)
            .collect()
    }

    pub fn noise_covariance(&self) -> CMatrix {
        block_diag(&self.noise_covariance_blocks())
    }

    /// Per-frame upper Cholesky factors of `C_w` (`C_w = D_w^H D_w`).
    pub fn whitener(&self) -> Result<Whitener> {
        let factors = self
            .noise_covariance_blocks()
            .iter()
            .map(cholesky_upper)
            .collect::<Result<Vec<_>>>()?;
        Ok(Whitener { factors })
    }

    /// Received, pilot-compensated measurements `y[k]` for every subcarrier.
    ///
    /// `channels[j][k]` is the `n_rx x n_tx` channel from transmitter `j`.
    pub fn simulate(
        &self,
        channels: &[Vec<CMatrix>],
        noise_var: f64,
        rng: &mut impl Rng,
    ) -> Result<Vec<CVector>> {
        if channels.len() != self.n_transmitters() {
            return Err(Error::dim(
                "simulate",
                format!("{} channels for {} transmitters", channels.len(), self.n_transmitters()),
            ));
        }
        let n_k = channels.first().map_or(0, |c| c.len());
        let l = self.rx_chains();
        let n_rx = self.rx_antennas();
        let sigma = (noise_var / 2.0).sqrt();
        let mut out = vec![CVector::zeros(self.n_measurements()); n_k];
        for (m, frame) in self.frames.iter().enumerate() {
            let xs: Vec<CVector> = (0..self.n_transmitters()).map(|j| self.tx_vector(m, j)).collect();
            let f_h = frame.combiner.adjoint();
            for (k, y) in out.iter_mut().enumerate() {
                let s = self.pilots[m][k];
                let mut rx = CVector::zeros(n_rx);
                for (ch, x) in channels.iter().zip(&xs) {
                    rx += &ch[k] * x * s;
                }
                if noise_var > 0.0 {
                    for v in rx.iter_mut() {
                        let re: f64 = rng.sample(StandardNormal);
                        let im: f64 = rng.sample(StandardNormal);
                        *v += c64::new(re * sigma, im * sigma);
                    }
                }
                let ym = &f_h * rx * s.conj();
                y.rows_mut(m * l, l).copy_from(&ym);
            }
        }
        Ok(out)
    }
}

/// Block-diagonal noise whitener `y -> D_w^{-H} y`.
#[derive(Debug, Clone)]
pub struct Whitener {
    pub factors: Vec<CMatrix>,
}

impl Whitener {
    /// Applies `D_w^{-H}` to the rows of `a` (`M l_rx` rows).
    pub fn apply(&self, a: &CMatrix) -> Result<CMatrix> {
        let mut out = a.clone();
        let mut r = 0;
        for d in &self.factors {
            let l = d.nrows();
            let block = a.rows(r, l).into_owned();
            let solved = d
                .adjoint()
                .solve_lower_triangular(&block)
                .ok_or(Error::Decomposition {
                    op: "whiten",
                    reason: "singular Cholesky factor".into(),
                })?;
            out.rows_mut(r, l).copy_from(&solved);
            r += l;
        }
        if r != a.nrows() {
            return Err(Error::dim("whiten", format!("{} rows for {} whitened rows", a.nrows(), r)));
        }
        Ok(out)
    }

    pub fn apply_vec(&self, y: &CVector) -> Result<CVector> {
        let m = CMatrix::from_column_slice(y.len(), 1, y.as_slice());
        Ok(self.apply(&m)?.column(0).into_owned())
    }

    /// Full `D_w` (block diagonal).
    pub fn factor(&self) -> CMatrix {
        block_diag(&self.factors)
    }
}
