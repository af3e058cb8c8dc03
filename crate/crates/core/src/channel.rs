//! Geometric frequency-selective multiuser channel and angular dictionaries.
//!
//! Both ends use half-wavelength uniform linear arrays with unit-norm
//! steering vectors, so the path-loss factor `gamma = sqrt(n_bs n_ms / n_paths)`
//! carries the whole array gain. Delay taps are indexed `d = 0..D-1` and
//! subcarriers `k = 0..K-1`; the sampling interval is normalized to one.

use std::f64::consts::PI;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::{GridMode, SystemConfig};
use crate::error::{Error, Result};
use crate::linalg::{c64, CMatrix, CVector, ZERO};
use crate::serial;

/// ULA response `exp(j pi i sin(angle)) / sqrt(n)`, `i = 0..n-1`.
pub fn steering_vector(n_antennas: usize, angle: f64) -> CVector {
    steering_from_spatial(n_antennas, angle.sin())
}

fn steering_from_spatial(n: usize, spatial: f64) -> CVector {
    let norm = 1.0 / (n as f64).sqrt();
    CVector::from_fn(n, |i, _| c64::from_polar(norm, PI * i as f64 * spatial))
}

/// Spatial frequency of grid point `g` on a uniform grid over `[-1, 1)`.
pub fn grid_spatial(g: usize, grid_size: usize) -> f64 {
    -1.0 + 2.0 * g as f64 / grid_size as f64
}

pub fn grid_angle(g: usize, grid_size: usize) -> f64 {
    grid_spatial(g, grid_size).asin()
}

/// `n_antennas x grid_size` dictionary of steering vectors on the spatial grid.
pub fn build_dictionary(n_antennas: usize, grid_size: usize) -> CMatrix {
    let mut dict = CMatrix::zeros(n_antennas, grid_size);
    for g in 0..grid_size {
        dict.set_column(g, &steering_from_spatial(n_antennas, grid_spatial(g, grid_size)));
    }
    dict
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Raised-cosine pulse evaluated at `t`.
pub fn pulse_shape(t: f64, rolloff: f64, t_s: f64) -> f64 {
    let x = t / t_s;
    let denom = 1.0 - (2.0 * rolloff * x).powi(2);
    if denom.abs() < 1e-12 {
        // limit at |t| = t_s / (2 rolloff)
        return PI / 4.0 * sinc(1.0 / (2.0 * rolloff));
    }
    sinc(x) * (PI * rolloff * x).cos() / denom
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Path {
    pub gain: c64,
    /// Delay in units of the sampling interval.
    pub delay: f64,
    /// Angle of arrival at the MS (radians).
    pub aoa: f64,
    /// Angle of departure at the BS (radians).
    pub aod: f64,
    /// MS grid index of `aoa` for on-grid channels.
    pub aoa_grid: Option<usize>,
    /// BS grid index of `aod` for on-grid channels.
    pub aod_grid: Option<usize>,
}

impl Path {
    fn ms_steering(&self, cfg: &SystemConfig) -> CVector {
        match self.aoa_grid {
            Some(g) => steering_from_spatial(cfg.n_ms, grid_spatial(g, cfg.g_ms)),
            None => steering_vector(cfg.n_ms, self.aoa),
        }
    }

    fn bs_steering(&self, cfg: &SystemConfig) -> CVector {
        match self.aod_grid {
            Some(g) => steering_from_spatial(cfg.n_bs, grid_spatial(g, cfg.g_bs)),
            None => steering_vector(cfg.n_bs, self.aod),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSet {
    pub paths: Vec<Path>,
}

impl PathSet {
    pub fn draw(cfg: &SystemConfig, rng: &mut impl Rng) -> PathSet {
        let np = cfg.n_paths;
        let gains: Vec<c64> = (0..np)
            .map(|_| {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                c64::new(re, im) / 2f64.sqrt()
            })
            .collect();
        let max_delay = (cfg.n_delay_taps - 1) as f64;
        let paths = match cfg.grid_mode {
            GridMode::OffGrid => gains
                .into_iter()
                .map(|gain| Path {
                    gain,
                    delay: rng.random::<f64>() * max_delay,
                    aoa: rng.random_range(-PI / 2.0..PI / 2.0),
                    aod: rng.random_range(-PI / 2.0..PI / 2.0),
                    aoa_grid: None,
                    aod_grid: None,
                })
                .collect(),
            GridMode::OnGrid => {
                let aod_idx = sample(rng, cfg.g_bs, np).into_vec();
                let aoa_idx = sample(rng, cfg.g_ms, np).into_vec();
                gains
                    .into_iter()
                    .zip(aod_idx.into_iter().zip(aoa_idx))
                    .map(|(gain, (b, m))| Path {
                        gain,
                        delay: rng.random_range(0..cfg.n_delay_taps) as f64,
                        aoa: grid_angle(m, cfg.g_ms),
                        aod: grid_angle(b, cfg.g_bs),
                        aoa_grid: Some(m),
                        aod_grid: Some(b),
                    })
                    .collect()
            }
        };
        PathSet { paths }
    }

    /// `n_bs x n_paths` matrix of BS steering vectors at the true AoDs.
    pub fn bs_array(&self, cfg: &SystemConfig) -> CMatrix {
        let cols: Vec<CVector> = self.paths.iter().map(|p| p.bs_steering(cfg)).collect();
        CMatrix::from_columns(&cols)
    }

    /// `n_ms x n_paths` matrix of MS steering vectors at the true AoAs.
    pub fn ms_array(&self, cfg: &SystemConfig) -> CMatrix {
        let cols: Vec<CVector> = self.paths.iter().map(|p| p.ms_steering(cfg)).collect();
        CMatrix::from_columns(&cols)
    }
}

/// One user's channel: path parameters, delay taps and per-subcarrier DL matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserChannel {
    pub paths: PathSet,
    /// `H_{u,d}`, `n_ms x n_bs`.
    #[serde(with = "serial::matrix_vec")]
    pub taps: Vec<CMatrix>,
    /// `H_u[k]`, `n_ms x n_bs`.
    #[serde(with = "serial::matrix_vec")]
    pub freq: Vec<CMatrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRealization {
    pub users: Vec<UserChannel>,
}

/// `gamma = sqrt(n_bs n_ms / n_paths)` with the per-user antenna count.
pub fn path_loss_factor(cfg: &SystemConfig) -> f64 {
    ((cfg.n_bs * cfg.n_ms) as f64 / cfg.n_paths as f64).sqrt()
}

/// Frequency-domain gain of every path at subcarrier `k`:
/// `gamma alpha_p sum_d p_rc(d - tau_p) exp(-j 2 pi k d / K)`.
pub fn path_frequency_gains(paths: &PathSet, cfg: &SystemConfig, k: usize) -> Vec<c64> {
    let gamma = path_loss_factor(cfg);
    let kk = cfg.n_subcarriers as f64;
    paths
        .paths
        .iter()
        .map(|p| {
            let mut acc = ZERO;
            for d in 0..cfg.n_delay_taps {
                let w = pulse_shape(d as f64 - p.delay, cfg.rolloff, 1.0);
                acc += c64::from_polar(w, -2.0 * PI * (k * d) as f64 / kk);
            }
            acc * p.gain * gamma
        })
        .collect()
}

/// Delay-to-frequency transform `H[k] = sum_d H_d exp(-j 2 pi k d / K)`.
pub fn taps_to_frequency(taps: &[CMatrix], n_subcarriers: usize) -> Vec<CMatrix> {
    let kk = n_subcarriers as f64;
    (0..n_subcarriers)
        .map(|k| {
            let (r, c) = taps[0].shape();
            let mut h = CMatrix::zeros(r, c);
            for (d, tap) in taps.iter().enumerate() {
                h += tap * c64::from_polar(1.0, -2.0 * PI * (k * d) as f64 / kk);
            }
            h
        })
        .collect()
}

impl UserChannel {
    pub fn from_paths(paths: PathSet, cfg: &SystemConfig) -> UserChannel {
        let gamma = path_loss_factor(cfg);
        let outer: Vec<CMatrix> = paths
            .paths
            .iter()
            .map(|p| p.ms_steering(cfg) * p.bs_steering(cfg).adjoint())
            .collect();
        let taps: Vec<CMatrix> = (0..cfg.n_delay_taps)
            .map(|d| {
                let mut h = CMatrix::zeros(cfg.n_ms, cfg.n_bs);
                for (p, o) in paths.paths.iter().zip(&outer) {
                    let w = pulse_shape(d as f64 - p.delay, cfg.rolloff, 1.0);
                    if w != 0.0 {
                        h += o * (p.gain * gamma * w);
                    }
                }
                h
            })
            .collect();
        let freq = taps_to_frequency(&taps, cfg.n_subcarriers);
        UserChannel { paths, taps, freq }
    }

    /// UL channel `H_u^H[k]` (`n_bs x n_ms`).
    pub fn uplink(&self, k: usize) -> CMatrix {
        self.freq[k].adjoint()
    }
}

impl ChannelRealization {
    pub fn generate(cfg: &SystemConfig, rng: &mut impl Rng) -> ChannelRealization {
        let users = (0..cfg.n_users)
            .map(|_| UserChannel::from_paths(PathSet::draw(cfg, rng), cfg))
            .collect();
        ChannelRealization { users }
    }

    pub fn from_paths(path_sets: Vec<PathSet>, cfg: &SystemConfig) -> ChannelRealization {
        ChannelRealization {
            users: path_sets
                .into_iter()
                .map(|p| UserChannel::from_paths(p, cfg))
                .collect(),
        }
    }

    pub fn n_subcarriers(&self) -> usize {
        self.users.first().map_or(0, |u| u.freq.len())
    }

    /// `[u][k]` grid of DL channels `H_u[k]`.
    pub fn downlink_grid(&self) -> Vec<Vec<CMatrix>> {
        self.users.iter().map(|u| u.freq.clone()).collect()
    }

    /// `[u][k]` grid of UL channels `H_u^H[k]`.
    pub fn uplink_grid(&self) -> Vec<Vec<CMatrix>> {
        self.users
            .iter()
            .map(|u| u.freq.iter().map(|h| h.adjoint()).collect())
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<ChannelRealization> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Flat indices into `vec(Delta_u^v)` (`g_bs x g_ms`, column-major) of each path's cell.
pub fn virtual_support(paths: &PathSet, cfg: &SystemConfig) -> Result<Vec<usize>> {
    if cfg.grid_mode != GridMode::OnGrid {
        return Err(Error::OffGrid);
    }
    paths
        .paths
        .iter()
        .map(|p| match (p.aod_grid, p.aoa_grid) {
            (Some(b), Some(m)) => Ok(m * cfg.g_bs + b),
            _ => Err(Error::OffGrid),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{frob, frob2};
    use crate::rng::{substream, Stream};

    fn on_grid_cfg() -> SystemConfig {
        SystemConfig { grid_mode: GridMode::OnGrid, ..SystemConfig::desk() }
    }

    #[test]
    fn steering_vector_cases() {
        let v = steering_vector(5, 0.0);
        assert!(v.iter().all(|z| (z - c64::from(1.0 / 5f64.sqrt())).norm() < 1e-15));
        let one = steering_vector(1, 0.7);
        assert!((one[0] - c64::from(1.0)).norm() < 1e-15);
        let v = steering_vector(4, PI / 6.0);
        for i in 0..4 {
            let expect = c64::from_polar(0.5, PI * i as f64 * 0.5);
            assert!((v[i] - expect).norm() < 1e-14);
        }
        assert!((v.norm() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn pulse_shape_cases() {
        assert_eq!(pulse_shape(0.0, 0.8, 1.0), 1.0);
        for m in [-3.0, -1.0, 1.0, 2.0, 5.0] {
            assert!(pulse_shape(m, 0.8, 1.0).abs() < 1e-15, "m = {m}");
        }
        // direct evaluation at t = 0.3 T_s, beta = 0.8
        let x: f64 = 0.3;
        let expect = (PI * x).sin() / (PI * x) * (PI * 0.8 * x).cos() / (1.0 - (2.0 * 0.8 * x).powi(2));
        assert!((pulse_shape(0.3, 0.8, 1.0) - expect).abs() < 1e-15);
        // continuity across the removable singularity t = T_s / (2 beta)
        let t0 = 1.0 / 1.6;
        let lim = pulse_shape(t0, 0.8, 1.0);
        assert!((pulse_shape(t0 + 1e-7, 0.8, 1.0) - lim).abs() < 1e-6);
        assert!((pulse_shape(t0 - 1e-7, 0.8, 1.0) - lim).abs() < 1e-6);
    }

    #[test]
    fn single_path_flat_channel() {
        let cfg = SystemConfig { n_delay_taps: 1, n_paths: 1, ..on_grid_cfg() };
        let path = Path { gain: c64::from(1.0), delay: 0.0, aoa: 0.0, aod: 0.0, aoa_grid: None, aod_grid: None };
        let ch = UserChannel::from_paths(PathSet { paths: vec![path] }, &cfg);
        let gamma = path_loss_factor(&cfg);
        let expect = steering_vector(cfg.n_ms, 0.0) * steering_vector(cfg.n_bs, 0.0).adjoint() * c64::from(gamma);
        assert!(frob(&(&ch.taps[0] - &expect)) < 1e-12);
        for h in &ch.freq {
            assert!(frob(&(h - &ch.taps[0])) < 1e-12);
        }
    }

    #[test]
    fn frequency_matrices_match_tap_dft() {
        let cfg = SystemConfig::desk();
        let mut rng = substream(3, 0, Stream::Channel);
        let ch = ChannelRealization::generate(&cfg, &mut rng);
        for user in &ch.users {
            for (k, hk) in user.freq.iter().enumerate() {
                let mut direct = CMatrix::zeros(cfg.n_ms, cfg.n_bs);
                for (d, tap) in user.taps.iter().enumerate() {
                    direct += tap * c64::from_polar(1.0, -2.0 * PI * (k * d) as f64 / cfg.n_subcarriers as f64);
                }
                assert!(frob(&(hk - direct)) <= 1e-12);
                assert_eq!(user.uplink(k), hk.adjoint());
            }
        }
    }

    #[test]
    fn path_gains_reproduce_channel() {
        let cfg = SystemConfig::desk();
        let mut rng = substream(4, 0, Stream::Channel);
        let ch = ChannelRealization::generate(&cfg, &mut rng);
        let user = &ch.users[1];
        let a_bs = user.paths.bs_array(&cfg);
        let a_ms = user.paths.ms_array(&cfg);
        for k in [0, 5, 15] {
            let g = path_frequency_gains(&user.paths, &cfg, k);
            let delta = CMatrix::from_diagonal(&CVector::from_vec(g));
            let rebuilt = &a_ms * delta * a_bs.adjoint();
            assert!(frob(&(rebuilt - &user.freq[k])) < 1e-10);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SystemConfig::desk();
        let a = ChannelRealization::generate(&cfg, &mut substream(9, 2, Stream::Channel));
        let b = ChannelRealization::generate(&cfg, &mut substream(9, 2, Stream::Channel));
        assert_eq!(a, b);
        let c = ChannelRealization::generate(&cfg, &mut substream(9, 3, Stream::Channel));
        assert_ne!(a, c);
    }

    #[test]
    fn on_grid_paths_sit_on_grid() {
        let cfg = on_grid_cfg();
        let ch = ChannelRealization::generate(&cfg, &mut substream(5, 0, Stream::Channel));
        for u in &ch.users {
            for p in &u.paths.paths {
                assert_eq!(p.delay.fract(), 0.0);
                assert!(p.delay < cfg.n_delay_taps as f64);
                assert!(p.aoa_grid.is_some() && p.aod_grid.is_some());
            }
        }
    }

    #[test]
    fn dictionary_properties() {
        let d = build_dictionary(8, 8);
        let gram = d.adjoint() * &d;
        assert!(frob(&(gram - CMatrix::identity(8, 8))) < 1e-12);

        let d = build_dictionary(16, 32);
        assert!(d.column_iter().all(|c| (c.norm() - 1.0).abs() < 1e-14));
        let mut brute: f64 = 0.0;
        for i in 0..32 {
            for j in 0..32 {
                if i != j {
                    let mut ip = ZERO;
                    for a in 0..16 {
                        ip += d[(a, i)].conj() * d[(a, j)];
                    }
                    brute = brute.max(ip.norm());
                }
            }
        }
        let gram = d.adjoint() * &d;
        let mut via_gram: f64 = 0.0;
        for i in 0..32 {
            for j in 0..32 {
                if i != j {
                    via_gram = via_gram.max(gram[(i, j)].norm());
                }
            }
        }
        assert!((brute - via_gram).abs() < 1e-12);
        // neighbours on a 2x oversampled grid: |sum_i e^{j pi i / 16}| / 16
        let neighbour = (0..16).map(|i| c64::from_polar(1.0, PI * i as f64 / 16.0)).sum::<c64>().norm() / 16.0;
        assert!((brute - neighbour).abs() < 1e-12);
    }

    #[test]
    fn virtual_support_indexing() {
        let cfg = on_grid_cfg();
        let mk = |b: usize, m: usize| Path {
            gain: c64::from(1.0),
            delay: 0.0,
            aoa: grid_angle(m, cfg.g_ms),
            aod: grid_angle(b, cfg.g_bs),
            aoa_grid: Some(m),
            aod_grid: Some(b),
        };
        let ps = PathSet { paths: vec![mk(0, 0), mk(7, 3)] };
        assert_eq!(virtual_support(&ps, &cfg).unwrap(), vec![0, 3 * cfg.g_bs + 7]);
        let off = SystemConfig::desk();
        assert!(matches!(virtual_support(&ps, &off), Err(Error::OffGrid)));
    }

    #[test]
    fn on_grid_channel_exact_in_dictionary() {
        let cfg = on_grid_cfg();
        let ch = ChannelRealization::generate(&cfg, &mut substream(6, 0, Stream::Channel));
        let a_bs = build_dictionary(cfg.n_bs, cfg.g_bs);
        let a_ms = build_dictionary(cfg.n_ms, cfg.g_ms);
        let user = &ch.users[0];
        for k in 0..cfg.n_subcarriers {
            let g = path_frequency_gains(&user.paths, &cfg, k);
            let mut delta = CMatrix::zeros(cfg.g_bs, cfg.g_ms);
            for (p, gain) in user.paths.paths.iter().zip(g) {
                delta[(p.aod_grid.unwrap(), p.aoa_grid.unwrap())] += gain.conj();
            }
            let rebuilt = &a_bs * delta * a_ms.adjoint();
            assert!(frob(&(rebuilt - user.uplink(k))) <= 1e-10);
        }
    }

    #[test]
    fn average_energy_matches_array_gain() {
        let cfg = SystemConfig { grid_mode: GridMode::OnGrid, ..SystemConfig::desk() };
        let trials = 200;
        let mut acc = 0.0;
        for t in 0..trials {
            let ch = ChannelRealization::generate(&cfg, &mut substream(11, t, Stream::Channel));
            acc += ch.users.iter().flat_map(|u| u.freq.iter()).map(frob2).sum::<f64>()
                / (cfg.n_users * cfg.n_subcarriers) as f64;
        }
        let mean = acc / trials as f64;
        let target = (cfg.n_bs * cfg.n_ms) as f64;
        assert!((mean / target - 1.0).abs() < 0.10, "mean {mean} vs {target}");
    }

    #[test]
    fn json_round_trip() {
        let cfg = SystemConfig { n_subcarriers: 2, n_delay_taps: 2, ..SystemConfig::desk() };
        let ch = ChannelRealization::generate(&cfg, &mut substream(1, 0, Stream::Channel));
        let back = ChannelRealization::from_json(&ch.to_json().unwrap()).unwrap();
        assert_eq!(back, ch);
    }
}
