//! The rank-aware sparse linear layer.
//!
//! `y = W x` is approximated as `Y_s + Y_r`: the `ceil(s * m_in)` largest
//! input channels go through the original weight columns (gathered from a
//! column-major copy so each kept channel is one contiguous read), and the
//! remainder `x - sparse(x)` goes through a rank-`r` factorization
//! `A_r B_r` built from score-selected SVD components.

use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{self, axpy, dot, Matrix, SvdResult};
use crate::scores::{self, ScoreMatrix};
use crate::sparsity::keep_count;

/// Bytes per weight element as stored on disk; I/O accounting uses this width.
pub const ELEMENT_BYTES: u64 = 4;

/// Keep fraction `s` and rank `r` of one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsityPlan {
    pub keep_fraction: f64,
    pub rank: usize,
}

impl SparsityPlan {
    pub fn new(keep_fraction: f64, rank: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&keep_fraction) {
            return Err(Error::invalid(format!(
                "keep fraction {keep_fraction} outside [0, 1]"
            )));
        }
        Ok(Self {
            keep_fraction,
            rank,
        })
    }

    /// Keeps every channel and no low-rank residual; reproduces the dense layer.
    pub fn dense() -> Self {
        Self {
            keep_fraction: 1.0,
            rank: 0,
        }
    }

    /// `r (m + n) / (m n) + s`, relative to reading the full weight once.
    pub fn relative_io_cost(&self, m_in: usize, m_out: usize) -> f64 {
        self.rank as f64 * (m_in + m_out) as f64 / (m_in as f64 * m_out as f64) + self.keep_fraction
    }
}

/// Weight stored column-major over the input dimension: column `j` holds the
/// `m_out` weights that multiply input channel `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnMajorMatrix {
    m_out: usize,
    m_in: usize,
    data: Vec<f64>,
}

impl ColumnMajorMatrix {
    pub fn from_row_major(w: &Matrix) -> Self {
        let t = w.transpose();
        Self {
            m_out: w.rows(),
            m_in: w.cols(),
            data: t.into_vec(),
        }
    }

    pub fn from_column_data(m_out: usize, m_in: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != m_out * m_in {
            return Err(Error::shape(
                "ColumnMajorMatrix",
                format!("{m_out}x{m_in}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self { m_out, m_in, data })
    }

    pub fn to_row_major(&self) -> Matrix {
        Matrix::from_fn(self.m_out, self.m_in, |i, j| self.data[j * self.m_out + i])
    }

    #[inline]
    pub fn column(&self, j: usize) -> &[f64] {
        &self.data[j * self.m_out..(j + 1) * self.m_out]
    }

    pub fn m_in(&self) -> usize {
        self.m_in
    }

    pub fn m_out(&self) -> usize {
        self.m_out
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// `sum_{j in kept} x_j W[:, j]`, accumulated in the order of `kept`, which
/// must be strictly ascending and in range.
pub fn gather_matvec(w_cols: &ColumnMajorMatrix, x: &[f64], kept: &[usize]) -> Result<Vec<f64>> {
    let mut touched = 0;
    gather_matvec_counted(w_cols, x, kept, &mut touched)
}

/// [`gather_matvec`] that adds the number of weight elements it reads to `touched`.
pub fn gather_matvec_counted(
    w_cols: &ColumnMajorMatrix,
    x: &[f64],
    kept: &[usize],
    touched: &mut u64,
) -> Result<Vec<f64>> {
    if x.len() != w_cols.m_in {
        return Err(Error::shape(
            "gather_matvec",
            format!("{}x{}", w_cols.m_out, w_cols.m_in),
            format!("input of {}", x.len()),
        ));
    }
    if let Some(&bad) = kept.iter().find(|&&j| j >= w_cols.m_in) {
        return Err(Error::invalid(format!(
            "kept channel {bad} out of range for {} inputs",
            w_cols.m_in
        )));
    }
    if kept.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("kept channels must be strictly ascending"));
    }
    Ok(gather_unchecked(w_cols, x, kept, touched))
}

#[inline]
fn gather_unchecked(
    w_cols: &ColumnMajorMatrix,
    x: &[f64],
    kept: &[usize],
    touched: &mut u64,
) -> Vec<f64> {
    let mut y = vec![0.0; w_cols.m_out];
    for &j in kept {
        axpy(x[j], w_cols.column(j), &mut y);
    }
    *touched += (kept.len() * w_cols.m_out) as u64;
    y
}

/// Bytes a forward pass would move, next to the analytic relative cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IoReport {
    pub dense_bytes: u64,
    pub touched_bytes: u64,
    pub relative_cost: f64,
}

/// Output of [`DecomposedLayer::forward_traced`], with element counters from
/// the kernels that produced it.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub output: Vec<f64>,
    pub kept: Vec<usize>,
    pub sparse_elements: u64,
    pub lowrank_elements: u64,
}

impl ForwardTrace {
    pub fn touched_bytes(&self) -> u64 {
        (self.sparse_elements + self.lowrank_elements) * ELEMENT_BYTES
    }
}

/// A linear layer split into gathered sparse weights and low-rank factors.
/// Immutable once built.
#[derive(Debug, Clone)]
pub struct DecomposedLayer {
    w_cols: Arc<ColumnMajorMatrix>,
    a_r: Matrix,
    b_r: Matrix,
    plan: SparsityPlan,
    selected_components: Vec<usize>,
}

impl DecomposedLayer {
    /// SVDs `w` and keeps the `plan.rank` components with the largest score mass.
    pub fn decompose(w: &Matrix, plan: SparsityPlan, score: &ScoreMatrix) -> Result<Self> {
        let svd = linalg::svd(w)?;
        Self::decompose_with_svd(
            Arc::new(ColumnMajorMatrix::from_row_major(w)),
            &svd,
            plan,
            score,
        )
    }

    /// Like [`decompose`](Self::decompose) with a precomputed SVD of the weight.
    pub fn decompose_with_svd(
        w_cols: Arc<ColumnMajorMatrix>,
        svd: &SvdResult,
        plan: SparsityPlan,
        score: &ScoreMatrix,
    ) -> Result<Self> {
        let (m_out, m_in) = (w_cols.m_out, w_cols.m_in);
        let k = m_in.min(m_out);
        if svd.u.rows() != m_out || svd.vt.cols() != m_in || svd.num_components() != k {
            return Err(Error::shape(
                "decompose",
                format!("{m_out}x{m_in}"),
                format!("svd {}·{}", svd.u.shape_str(), svd.vt.shape_str()),
            ));
        }
        if plan.rank > k {
            return Err(Error::invalid(format!(
                "rank {} exceeds min({m_out}, {m_in})",
                plan.rank
            )));
        }
        if score.values.shape() != (k, m_in) {
            return Err(Error::shape(
                "decompose (score)",
                format!("{k}x{m_in}"),
                score.values.shape_str(),
            ));
        }
        let selected = scores::select_components(score, plan.rank)?;
        let r = selected.len();
        let root: Vec<f64> = selected.iter().map(|&c| svd.sigma[c].sqrt()).collect();
        let a_r = Matrix::from_fn(m_out, r, |i, c| svd.u.get(i, selected[c]) * root[c]);
        let b_r = Matrix::from_fn(r, m_in, |c, j| root[c] * svd.vt.get(selected[c], j));
        Ok(Self {
            w_cols,
            a_r,
            b_r,
            plan,
            selected_components: selected,
        })
    }

    /// Assembles a layer from already-computed parts, checking shapes only.
    pub fn from_parts(
        w_cols: Arc<ColumnMajorMatrix>,
        a_r: Matrix,
        b_r: Matrix,
        plan: SparsityPlan,
        selected_components: Vec<usize>,
    ) -> Result<Self> {
        let (m_out, m_in) = (w_cols.m_out, w_cols.m_in);
        let r = plan.rank;
        if a_r.shape() != (m_out, r) || b_r.shape() != (r, m_in) || selected_components.len() != r {
            return Err(Error::shape(
                "DecomposedLayer::from_parts",
                format!("{m_out}x{m_in} rank {r}"),
                format!(
                    "a_r {} b_r {} with {} components",
                    a_r.shape_str(),
                    b_r.shape_str(),
                    selected_components.len()
                ),
            ));
        }
        if r > m_in.min(m_out) {
            return Err(Error::invalid(format!(
                "rank {r} exceeds min({m_out}, {m_in})"
            )));
        }
        SparsityPlan::new(plan.keep_fraction, plan.rank)?;
        Ok(Self {
            w_cols,
            a_r,
            b_r,
            plan,
            selected_components,
        })
    }

    pub fn m_in(&self) -> usize {
        self.w_cols.m_in
    }

    pub fn m_out(&self) -> usize {
        self.w_cols.m_out
    }

    pub fn plan(&self) -> SparsityPlan {
        self.plan
    }

    pub fn w_cols(&self) -> &ColumnMajorMatrix {
        &self.w_cols
    }

    pub fn a_r(&self) -> &Matrix {
        &self.a_r
    }

    pub fn b_r(&self) -> &Matrix {
        &self.b_r
    }

    pub fn selected_components(&self) -> &[usize] {
        &self.selected_components
    }

    /// `A_r B_r`, the low-rank stand-in for `W`.
    pub fn lowrank_product(&self) -> Matrix {
        linalg::matmul(&self.a_r, &self.b_r).expect("factor shapes are checked at construction")
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward_traced(x).map(|t| t.output)
    }

    pub fn forward_traced(&self, x: &[f64]) -> Result<ForwardTrace> {
        if x.len() != self.m_in() {
            return Err(Error::shape(
                "DecomposedLayer::forward",
                format!("{}x{}", self.m_out(), self.m_in()),
                format!("input of {}", x.len()),
            ));
        }
        Ok(self.forward_unchecked(x))
    }

    pub(crate) fn forward_unchecked(&self, x: &[f64]) -> ForwardTrace {
        let k = keep_count(self.plan.keep_fraction, x.len());
        let kept = linalg::top_k_by_magnitude(x, k).expect("k is bounded by the input length");
        let mut sparse_elements = 0;
        let mut y = gather_unchecked(&self.w_cols, x, &kept, &mut sparse_elements);

        let r = self.plan.rank;
        let mut lowrank_elements = 0;
        if r > 0 {
            let mut residual = x.to_vec();
            for &j in &kept {
                residual[j] = 0.0;
            }
            let z: Vec<f64> = (0..r).map(|c| dot(self.b_r.row(c), &residual)).collect();
            for (i, yi) in y.iter_mut().enumerate() {
                *yi += dot(self.a_r.row(i), &z);
            }
            lowrank_elements = (r * (self.m_in() + self.m_out())) as u64;
        }
        ForwardTrace {
            output: y,
            kept,
            sparse_elements,
            lowrank_elements,
        }
    }

    /// Analytic I/O cost with `s = keep_fraction`, and the bytes a forward pass
    /// touches at the on-disk element width.
    pub fn io_cost(&self) -> IoReport {
        let (m_in, m_out) = (self.m_in() as u64, self.m_out() as u64);
        let kept = keep_count(self.plan.keep_fraction, self.m_in()) as u64;
        let r = self.plan.rank as u64;
        IoReport {
            dense_bytes: m_in * m_out * ELEMENT_BYTES,
            touched_bytes: (kept * m_out + r * (m_in + m_out)) * ELEMENT_BYTES,
            relative_cost: self.plan.relative_io_cost(self.m_in(), self.m_out()),
        }
    }
}

/// Median wall-clock of dense and gathered matvecs at one shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchReport {
    pub m_in: usize,
    pub m_out: usize,
    pub keep_fraction: f64,
    pub repetitions: usize,
    pub dense_ns: f64,
    pub gather_ns: f64,
    /// Weight bytes read by the gather path over the dense path.
    pub touched_ratio: f64,
}

impl BenchReport {
    pub fn time_ratio(&self) -> f64 {
        self.gather_ns / self.dense_ns
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Times `W x` on a row-major weight against top-k selection plus a gathered
/// matvec over the column-major copy, alternating the two each repetition.
pub fn bench_matvec(
    m_in: usize,
    m_out: usize,
    keep_fraction: f64,
    repetitions: usize,
    seed: u64,
) -> Result<BenchReport> {
    if repetitions == 0 || m_in == 0 || m_out == 0 {
        return Err(Error::invalid(
            "benchmark needs non-empty dims and at least one repetition",
        ));
    }
    SparsityPlan::new(keep_fraction, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Matrix::random_normal(m_out, m_in, 1.0, &mut rng);
    let w_cols = ColumnMajorMatrix::from_row_major(&w);
    let x: Vec<f64> = (0..m_in).map(|_| StandardNormal.sample(&mut rng)).collect();
    let k = keep_count(keep_fraction, m_in);

    let mut sink = 0.0;
    let mut touched = 0u64;
    // warm-up
    sink += w.matvec_unchecked(&x)[0];
    let kept = linalg::top_k_by_magnitude(&x, k)?;
    sink += gather_unchecked(&w_cols, &x, &kept, &mut touched)
        .first()
        .copied()
        .unwrap_or(0.0);

    let mut dense = Vec::with_capacity(repetitions);
    let mut gather = Vec::with_capacity(repetitions);
    touched = 0;
    for _ in 0..repetitions {
        let t = Instant::now();
        let y = w.matvec_unchecked(std::hint::black_box(&x));
        dense.push(t.elapsed().as_nanos() as f64);
        sink += y[0];

        let t = Instant::now();
        let kept = linalg::top_k_by_magnitude(std::hint::black_box(&x), k)?;
        let y = gather_unchecked(&w_cols, &x, &kept, &mut touched);
        gather.push(t.elapsed().as_nanos() as f64);
        sink += y.first().copied().unwrap_or(0.0);
    }
    std::hint::black_box(sink);
    Ok(BenchReport {
        m_in,
        m_out,
        keep_fraction,
        repetitions,
        dense_ns: median(dense),
        gather_ns: median(gather),
        touched_ratio: touched as f64 / (repetitions as u64 * (m_in * m_out) as u64) as f64,
    })
}
