//! Input-side sparsification: magnitude thresholding, the multi-phase ReLU,
//! the residual-bias re-expression of its output, and stable rank.

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

/// Number of channels retained for keep fraction `s` over `n` channels:
/// `ceil(s * n)`, with products that land within 1e-9 of an integer snapped to
/// it (so `0.3 * 10` keeps 3, not 4).
pub fn keep_count(keep_fraction: f64, n: usize) -> usize {
    let v = keep_fraction.clamp(0.0, 1.0) * n as f64;
    let r = v.round();
    let k = if (v - r).abs() < 1e-9 { r } else { v.ceil() };
    (k as usize).min(n)
}

/// Zeroes all but the `ceil(s * n)` largest-magnitude channels.
///
/// Returns the sparsified vector and the kept indices in ascending order.
pub fn threshold_sparsify(x: &[f64], keep_fraction: f64) -> (Vec<f64>, Vec<usize>) {
    let k = keep_count(keep_fraction, x.len());
    let kept = linalg::top_k_by_magnitude(x, k).expect("keep_count never exceeds the length");
    let mut out = vec![0.0; x.len()];
    for &j in &kept {
        out[j] = x[j];
    }
    (out, kept)
}

/// Descending thresholds `T_0 > T_1 > ... > T_{l-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseThresholds {
    thresholds: Vec<f64>,
}

/// Where a value lands under the multi-phase ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// `x >= T_0`, passed through unchanged.
    Kept,
    /// Replaced by the midpoint of bin `[T_{i+1}, T_i)`.
    Bin(usize),
    /// Replaced by zero (single-threshold case only).
    Masked,
}

impl PhaseThresholds {
    pub fn new(thresholds: Vec<f64>) -> Result<Self> {
        if thresholds.is_empty() {
            return Err(Error::invalid("phase thresholds must be non-empty"));
        }
        if thresholds.iter().any(|t| !t.is_finite()) {
            return Err(Error::invalid("phase thresholds must be finite"));
        }
        if thresholds.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::invalid(format!(
                "phase thresholds must be strictly descending, got {thresholds:?}"
            )));
        }
        Ok(Self { thresholds })
    }

    /// Thresholds matched to a target fraction of changed values in `h`:
    /// `T_0` is chosen so that `ceil(sparsity * len)` entries fall below it,
    /// `T_{l-1}` is the minimum of `h`, and any interior thresholds are spaced
    /// evenly between the two.
    pub fn calibrated(h: &[f64], sparsity: f64, levels: usize) -> Result<Self> {
        if levels == 0 {
            return Err(Error::invalid("phase count l must be at least 1"));
        }
        if h.is_empty() {
            return Err(Error::invalid(
                "cannot calibrate thresholds on an empty input",
            ));
        }
        let mut sorted = h.to_vec();
        sorted.sort_by(f64::total_cmp);
        let changed = keep_count(sparsity, h.len());
        let t0 = if changed == h.len() {
            sorted[h.len() - 1].next_up()
        } else {
            sorted[changed]
        };
        if levels == 1 {
            return Self::new(vec![t0]);
        }
        let lo = sorted[0];
        if t0 <= lo {
            return Err(Error::invalid(format!(
                "sparsity {sparsity} leaves no room below T_0 for {levels} phases"
            )));
        }
        let step = (t0 - lo) / (levels - 1) as f64;
        let mut t: Vec<f64> = (0..levels - 1).map(|i| t0 - step * i as f64).collect();
        t.push(lo);
        Self::new(t)
    }

    pub fn levels(&self) -> usize {
        self.thresholds.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.thresholds
    }

    /// Number of bins (and so of residual biases): `l - 1`.
    pub fn num_bins(&self) -> usize {
        self.thresholds.len() - 1
    }

    pub fn midpoint(&self, bin: usize) -> f64 {
        (self.thresholds[bin] + self.thresholds[bin + 1]) / 2.0
    }

    pub fn phase(&self, x: f64) -> Phase {
        let t = &self.thresholds;
        if x >= t[0] {
            return Phase::Kept;
        }
        if t.len() == 1 {
            return Phase::Masked;
        }
        // First i with T_{i+1} <= x; values below T_{l-1} clamp to the last bin.
        let bin = (0..t.len() - 1)
            .find(|&i| x >= t[i + 1])
            .unwrap_or(t.len() - 2);
        Phase::Bin(bin)
    }

    fn apply(&self, x: f64) -> f64 {
        match self.phase(x) {
            Phase::Kept => x,
            Phase::Bin(i) => self.midpoint(i),
            Phase::Masked => 0.0,
        }
    }
}

pub fn multiphase_relu(x: &[f64], t: &PhaseThresholds) -> Vec<f64> {
    x.iter().map(|&v| t.apply(v)).collect()
}

/// Output of a down-projection under the multi-phase ReLU, split into the
/// contribution of unchanged channels and one bias vector per bin.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasDecomposition {
    /// `true` where `h_k >= T_0`.
    pub sparse_mask: Vec<bool>,
    /// Bin of each non-sparse channel (`None` for sparse channels and for
    /// channels zeroed by a single-threshold ReLU).
    pub bin_assignment: Vec<Option<usize>>,
    /// `B_j = mid_j * sum_{k in U_j} W[:, k]`, one per bin.
    pub biases: Vec<Vec<f64>>,
    /// `sum_{k sparse} h_k W[:, k]`.
    pub sparse_output: Vec<f64>,
}

impl BiasDecomposition {
    /// `sparse_output + sum_j B_j`.
    pub fn total(&self) -> Vec<f64> {
        let mut y = self.sparse_output.clone();
        for b in &self.biases {
            y.iter_mut().zip(b).for_each(|(a, v)| *a += v);
        }
        y
    }
}

/// Re-expresses `w_down . multiphase_relu(h)` as a sparse part plus per-bin
/// biases. `w_down` maps the channel space of `h` to the output
/// (`w_down.cols() == h.len()`).
pub fn residual_bias_decompose(
    h: &[f64],
    w_down: &Matrix,
    t: &PhaseThresholds,
) -> Result<BiasDecomposition> {
    if h.len() != w_down.cols() {
        return Err(Error::shape(
            "residual_bias_decompose",
            w_down.shape_str(),
            format!("input of {}", h.len()),
        ));
    }
    let phases: Vec<Phase> = h.iter().map(|&v| t.phase(v)).collect();
    let bins = t.num_bins();
    let rows = w_down.rows();
    let mut sparse_output = vec![0.0; rows];
    let mut column_sums = vec![vec![0.0; rows]; bins];
    for i in 0..rows {
        let w_row = w_down.row(i);
        for (k, phase) in phases.iter().enumerate() {
            match phase {
                Phase::Kept => sparse_output[i] += h[k] * w_row[k],
                Phase::Bin(j) => column_sums[*j][i] += w_row[k],
                Phase::Masked => {}
            }
        }
    }
    let biases = column_sums
        .into_iter()
        .enumerate()
        .map(|(j, sums)| {
            let mid = t.midpoint(j);
            sums.into_iter().map(|s| mid * s).collect()
        })
        .collect();
    Ok(BiasDecomposition {
        sparse_mask: phases.iter().map(|p| *p == Phase::Kept).collect(),
        bin_assignment: phases
            .iter()
            .map(|p| match p {
                Phase::Bin(j) => Some(*j),
                _ => None,
            })
            .collect(),
        biases,
        sparse_output,
    })
}

/// `||M||_F^2 / sigma_max^2`.
pub fn stable_rank(m: &Matrix) -> Result<f64> {
    let fro2: f64 = m.as_slice().iter().map(|v| v * v).sum();
    if fro2 == 0.0 {
        return Err(Error::invalid("stable rank of a zero matrix is undefined"));
    }
    let s = linalg::svd(m)?;
    let top = s.sigma[0];
    Ok(fro2 / (top * top))
}

/// Concatenates two biases per token into `M`, with `M[:, 2i] = B_0^i` and
/// `M[:, 2i+1] = B_1^i`. Every decomposition must carry exactly two biases
/// (three thresholds) of a common output dimension.
pub fn bias_matrix(decomps: &[BiasDecomposition]) -> Result<Matrix> {
    let first = decomps
        .first()
        .ok_or_else(|| Error::invalid("bias matrix needs at least one token"))?;
    if first.biases.len() != 2 {
        return Err(Error::invalid(format!(
            "bias matrix expects two biases per token, got {}",
            first.biases.len()
        )));
    }
    let rows = first.biases[0].len();
    let cols = 2 * decomps.len();
    let mut m = Matrix::zeros(rows, cols);
    for (tok, d) in decomps.iter().enumerate() {
        if d.biases.len() != 2 {
            return Err(Error::invalid(format!(
                "token {tok} has {} biases, expected 2",
                d.biases.len()
            )));
        }
        for (b, bias) in d.biases.iter().enumerate() {
            if bias.len() != rows {
                return Err(Error::shape("bias_matrix", rows, bias.len()));
            }
            for (i, &v) in bias.iter().enumerate() {
                m.set(i, 2 * tok + b, v);
            }
        }
    }
    Ok(m)
}
