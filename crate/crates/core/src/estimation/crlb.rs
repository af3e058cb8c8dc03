//! Cramér-Rao bound for the frequency-domain path gains with known angles.

use crate::error::{Error, Result};
use crate::linalg::{block_diag, identity, khatri_rao, solve_hpd, CMatrix};

use super::training::TrainingEnsemble;

/// True array responses of one transmitter's paths as seen over the link.
#[derive(Debug, Clone)]
pub struct PathArrays {
    /// Receive-side responses, one column per path.
    pub rx: CMatrix,
    /// Transmit-side responses, one column per path.
    pub tx: CMatrix,
}

impl PathArrays {
    /// `conj(A_tx) (.) A_rx`: maps path gains to `vec` of the channel.
    pub fn psi(&self) -> Result<CMatrix> {
        khatri_rao(&self.tx.conjugate(), &self.rx)
    }
}

/// Total CRLB `sum_k tr(Psi I^{-1} Psi^H)` of the channel estimate over all
/// transmitters and `n_subcarriers` subcarriers.
///
/// The Fisher information per subcarrier is `Upsilon^H C_w^{-1} Upsilon / sigma^2`.
pub fn crlb(ens: &TrainingEnsemble, arrays: &[PathArrays], n_subcarriers: usize, noise_var: f64) -> Result<f64> {
    if arrays.len() != ens.n_transmitters() {
        return Err(Error::dim(
            "crlb",
            format!("{} path sets for {} transmitters", arrays.len(), ens.n_transmitters()),
        ));
    }
    let psis = arrays.iter().map(PathArrays::psi).collect::<Result<Vec<_>>>()?;
    let psi = block_diag(&psis);
    let upsilon = ens.measurement_matrix() * &psi;
    let upsilon_w = ens.whitener()?.apply(&upsilon)?;
    let fim = upsilon_w.ad_mul(&upsilon_w) / crate::linalg::c64::from(noise_var);
    let n = fim.nrows();
    let inv = solve_hpd(&fim, &identity(n)).map_err(|_| Error::SingularFim)?;
    let gram = psi.ad_mul(&psi);
    let per_k = (inv * gram).trace().re;
    Ok(n_subcarriers as f64 * per_k)
}
