//! Hyperparameter trade-off metrics, similarity-matrix correlation, and
//! Fourier analyses of perturbations and corruptions.

mod fourier;

pub use fourier::{
    corruption_spectrum, fourier_power, frequency_category, magnitude_spectrum, radial_spectrum,
    FreqCategory, Grid, RadialProfile, CATEGORY_T_HIGH, CATEGORY_T_LOW,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simreg::SymMatrix;

/// Default high-distortion level for random-noise attacks.
pub const DEFAULT_EPS_HIGH_NOISE: f64 = 0.1;
/// Default high-distortion level for transferred FGSM attacks.
pub const DEFAULT_EPS_HIGH_TRANSFER: f64 = 0.02;
/// Default clean-accuracy acceptability floor.
pub const DEFAULT_A0: f64 = 0.9;

/// Accuracy as a function of perturbation strength.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCurve {
    pub eps: Vec<f64>,
    pub acc: Vec<f64>,
}

impl AccuracyCurve {
    /// Accuracy at an exact grid value.
    pub fn at(&self, eps: f64) -> Option<f64> {
        self.eps.iter().position(|&e| e == eps).map(|i| self.acc[i])
    }
}

/// One (alpha, Th) cell of the accuracy/robustness trade-off plane.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub alpha: f64,
    pub th: f64,
    /// Regularized accuracy on clean images.
    pub r0: f64,
    /// Regularized accuracy at the high distortion level.
    pub rd: f64,
    /// Unregularized counterparts.
    pub u0: f64,
    pub ud: f64,
    /// `R0 / U0`; absent when U0 = 0.
    pub ratio_clean: Option<f64>,
    /// `RD / UD`; absent when UD = 0.
    pub ratio_distorted: Option<f64>,
    pub eps_high: f64,
    pub a0: f64,
    /// `R0/U0 >= A0` and `RD/UD > 1`; false when a ratio is undefined.
    pub acceptable: bool,
}

/// Evaluate the acceptability of a regularized model against its baseline.
/// Both curves must share a grid containing 0 and `eps_high`.
pub fn tradeoff(
    alpha: f64,
    th: f64,
    reg: &AccuracyCurve,
    unreg: &AccuracyCurve,
    eps_high: f64,
    a0: f64,
) -> Result<TradeoffPoint> {
    if reg.eps != unreg.eps {
        return Err(Error::invalid("tradeoff", "curves use different eps grids"));
    }
    let grab = |curve: &AccuracyCurve, eps: f64| {
        curve
            .at(eps)
            .ok_or_else(|| Error::invalid("tradeoff", format!("grid does not contain eps = {eps}")))
    };
    let r0 = grab(reg, 0.0)?;
    let rd = grab(reg, eps_high)?;
    let u0 = grab(unreg, 0.0)?;
    let ud = grab(unreg, eps_high)?;
    let ratio_clean = (u0 > 0.0).then(|| r0 / u0);
    let ratio_distorted = (ud > 0.0).then(|| rd / ud);
    let acceptable = matches!((ratio_clean, ratio_distorted), (Some(rc), Some(rd)) if rc >= a0 && rd > 1.0);
    Ok(TradeoffPoint { alpha, th, r0, rd, u0, ud, ratio_clean, ratio_distorted, eps_high, a0, acceptable })
}

/// Pearson correlation over the off-diagonal entries of two equally sized
/// symmetric matrices.
pub fn sim_correlation(a: &SymMatrix, b: &SymMatrix) -> Result<f64> {
    if a.n() != b.n() {
        return Err(Error::shape("sim_correlation", format!("{} vs {} images", a.n(), b.n())));
    }
    if a.n() < 2 {
        return Err(Error::invalid("sim_correlation", "need at least one off-diagonal pair"));
    }
    let xs = a.off_diagonal();
    let ys = b.off_diagonal();
    let n = xs.len() as f64;
    let mx = xs.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let my = ys.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let mut cov = 0.0f64;
    let mut vx = 0.0f64;
    let mut vy = 0.0f64;
    for (&x, &y) in xs.iter().zip(&ys) {
        let dx = f64::from(x) - mx;
        let dy = f64::from(y) - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::degenerate("sim_correlation", "zero variance in off-diagonal entries"));
    }
    Ok((cov / (vx.sqrt() * vy.sqrt())).clamp(-1.0, 1.0))
}
