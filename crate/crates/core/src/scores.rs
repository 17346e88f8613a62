//! Importance profiling over (singular component, input channel) pairs.
//!
//! For a layer `y = W x` with `W = U diag(sigma) Vt`, the output splits
//! exactly as `y = sum_i sum_j S_ij U[:, i]` with `S_ij = sigma_i x_j Vt[i, j]`.
//! Aggregating `|S|` over calibration tokens tells which components carry the
//! residual signal once the large input channels have been taken out.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::report::format_sig9;
use crate::linalg::{self, Matrix, SvdResult};

/// Aggregated `mean |S_ij|` for one layer, shape `(components, input channels)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub values: Matrix,
    pub token_count: usize,
    pub layer_id: String,
}

impl ScoreMatrix {
    pub fn num_components(&self) -> usize {
        self.values.rows()
    }

    pub fn num_channels(&self) -> usize {
        self.values.cols()
    }

    /// `sum_j S_ij` for each component.
    pub fn component_mass(&self) -> Vec<f64> {
        (0..self.values.rows())
            .map(|i| self.values.row(i).iter().sum())
            .collect()
    }

    /// A score that ranks components by singular value alone; selecting from
    /// it reproduces plain top-r truncation.
    pub fn uniform(svd: &SvdResult, layer_id: impl Into<String>) -> Self {
        let k = svd.num_components();
        let m_in = svd.vt.cols();
        ScoreMatrix {
            values: Matrix::from_fn(k, m_in, |i, _| svd.sigma[i]),
            token_count: 0,
            layer_id: layer_id.into(),
        }
    }
}

/// Signed per-token scores `S_ij = sigma_i x_j Vt[i, j]`.
pub fn score_single_token(x: &[f64], svd: &SvdResult) -> Result<Matrix> {
    if x.len() != svd.vt.cols() {
        return Err(Error::shape(
            "score_single_token",
            svd.vt.shape_str(),
            format!("token of {}", x.len()),
        ));
    }
    let k = svd.num_components();
    Ok(Matrix::from_fn(k, x.len(), |i, j| {
        svd.sigma[i] * x[j] * svd.vt.get(i, j)
    }))
}

/// Mean of `|S_ij|` over tokens.
///
/// `|sigma_i x_j V_ji|` factors as `sigma_i |V_ji| |x_j|`, so only the per-channel
/// mean of `|x_j|` has to be reduced over tokens. That reduction uses a fixed
/// pairwise tree, making the result independent of the rayon worker count.
pub fn aggregate_scores(
    tokens: &[Vec<f64>],
    svd: &SvdResult,
    layer_id: impl Into<String>,
) -> Result<ScoreMatrix> {
    if tokens.is_empty() {
        return Err(Error::invalid("score aggregation needs at least one token"));
    }
    let m_in = svd.vt.cols();
    if let Some(bad) = tokens.iter().find(|t| t.len() != m_in) {
        return Err(Error::shape(
            "aggregate_scores",
            svd.vt.shape_str(),
            format!("token of {}", bad.len()),
        ));
    }
    let abs: Vec<Vec<f64>> = tokens
        .iter()
        .map(|t| t.iter().map(|v| v.abs()).collect())
        .collect();
    let total = linalg::pairwise_sum_vectors(&abs, m_in);
    let count = tokens.len() as f64;
    let mean_abs: Vec<f64> = total.iter().map(|s| s / count).collect();
    let values = Matrix::from_fn(svd.num_components(), m_in, |i, j| {
        svd.sigma[i] * svd.vt.get(i, j).abs() * mean_abs[j]
    });
    Ok(ScoreMatrix {
        values,
        token_count: tokens.len(),
        layer_id: layer_id.into(),
    })
}

/// The `r` components with the largest total score mass, ascending by index.
pub fn select_components(s: &ScoreMatrix, r: usize) -> Result<Vec<usize>> {
    if r > s.num_components() {
        return Err(Error::invalid(format!(
            "rank {r} exceeds the {} available components",
            s.num_components()
        )));
    }
    linalg::top_k_by_value(&s.component_mass(), r)
}

/// Writes the score matrix as CSV: the header row holds channel indices, the
/// first column component indices. With `sort_axes` every row is sorted
/// ascending and then every column, and the index labels become rank positions.
pub fn export_heatmap(s: &ScoreMatrix, sort_axes: bool, path: &Path) -> Result<()> {
    let mut m = s.values.clone();
    if sort_axes {
        for i in 0..m.rows() {
            m.row_mut(i).sort_by(f64::total_cmp);
        }
        for j in 0..m.cols() {
            let mut col = m.col(j);
            col.sort_by(f64::total_cmp);
            for (i, v) in col.into_iter().enumerate() {
                m.set(i, j, v);
            }
        }
    }
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(csv_err)?;
    let mut header = vec!["component".to_string()];
    header.extend((0..m.cols()).map(|j| j.to_string()));
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..m.rows() {
        let mut rec = vec![i.to_string()];
        rec.extend(m.row(i).iter().map(|v| format_sig9(*v)));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads back a heatmap written by [`export_heatmap`].
pub fn read_heatmap(path: &Path) -> Result<Matrix> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(csv_err)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let row = rec
            .iter()
            .skip(1)
            .map(|c| {
                c.parse::<f64>().map_err(|e| Error::Format {
                    path: path.to_path_buf(),
                    reason: format!("bad cell {c:?}: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Matrix::from_rows(&rows)
}

#[derive(Serialize, Deserialize)]
struct ScoreFile {
    tool_version: String,
    layer_id: String,
    token_count: usize,
    seed: u64,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

/// JSON score file; values round-trip exactly.
pub fn save_scores(s: &ScoreMatrix, seed: u64, path: &Path) -> Result<()> {
    let file = ScoreFile {
        tool_version: crate::VERSION.to_string(),
        layer_id: s.layer_id.clone(),
        token_count: s.token_count,
        seed,
        rows: s.values.rows(),
        cols: s.values.cols(),
        values: s.values.as_slice().to_vec(),
    };
    crate::io::write_json(&file, path)
}

/// Returns the score matrix and the seed recorded with it.
pub fn load_scores(path: &Path) -> Result<(ScoreMatrix, u64)> {
    let file: ScoreFile = crate::io::read_json(path)?;
    let values = Matrix::new(file.rows, file.cols, file.values)?;
    Ok((
        ScoreMatrix {
            values,
            token_count: file.token_count,
            layer_id: file.layer_id,
        },
        file.seed,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    /// `sum_i sum_j S_ij U[:, i]`
    fn reconstruct(s: &Matrix, u: &Matrix) -> Vec<f64> {
        let mut y = vec![0.0; u.rows()];
        for i in 0..s.rows() {
            let mass: f64 = s.row(i).iter().sum();
            for (r, yr) in y.iter_mut().enumerate() {
                *yr += mass * u.get(r, i);
            }
        }
        y
    }

    #[test]
    fn one_hot_through_rank_one() {
        let u = [0.6, 0.8];
        let v = [0.0, 1.0, 0.0];
        let w = Matrix::from_fn(2, 3, |i, j| 5.0 * u[i] * v[j]);
        let svd = linalg::svd(&w).unwrap();
        let s = score_single_token(&[0.0, 1.0, 0.0], &svd).unwrap();
        assert!((s.get(0, 1) - 5.0).abs() < 1e-12);
        let rest: f64 = s.as_slice().iter().map(|x| x.abs()).sum::<f64>() - s.get(0, 1).abs();
        assert!(rest < 1e-12);
    }

    #[test]
    fn zero_input_gives_zero_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let svd = linalg::svd(&Matrix::random_normal(4, 6, 1.0, &mut rng)).unwrap();
        let s = score_single_token(&[0.0; 6], &svd).unwrap();
        assert!(s.as_slice().iter().all(|&v| v == 0.0));
        assert!(score_single_token(&[0.0; 5], &svd).is_err());
    }

    #[test]
    fn signed_scores_reconstruct_dense_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Matrix::random_normal(6, 6, 1.0, &mut rng);
        let svd = linalg::svd(&w).unwrap();
        let x = randn(6, &mut rng);
        let s = score_single_token(&x, &svd).unwrap();
        let dense = w.matvec(&x).unwrap();
        for (a, b) in reconstruct(&s, &svd.u).iter().zip(&dense) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn aggregation_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Matrix::random_normal(20, 32, 1.0, &mut rng);
        let svd = linalg::svd(&w).unwrap();
        let x = randn(32, &mut rng);

        let one = aggregate_scores(std::slice::from_ref(&x), &svd, "l").unwrap();
        let single = score_single_token(&x, &svd).unwrap();
        for (a, b) in one.values.as_slice().iter().zip(single.as_slice()) {
            assert!((a - b.abs()).abs() < 1e-14);
        }
        let dup = aggregate_scores(&[x.clone(), x.clone()], &svd, "l").unwrap();
        for (a, b) in dup.values.as_slice().iter().zip(one.values.as_slice()) {
            assert!((a - b).abs() < 1e-14);
        }
        assert_eq!(dup.token_count, 2);
        assert!(aggregate_scores(&[], &svd, "l").is_err());

        // naive per-token accumulation oracle
        let tokens: Vec<Vec<f64>> = (0..16).map(|_| randn(32, &mut rng)).collect();
        let agg = aggregate_scores(&tokens, &svd, "l").unwrap();
        let mut acc = Matrix::zeros(20, 32);
        for t in &tokens {
            for i in 0..20 {
                for (j, tj) in t.iter().enumerate() {
                    let v = acc.get(i, j) + (svd.sigma[i] * tj * svd.vt.get(i, j)).abs();
                    acc.set(i, j, v);
                }
            }
        }
        for (a, b) in agg.values.as_slice().iter().zip(acc.as_slice()) {
            assert!((a - b / 16.0).abs() < 1e-12);
        }
    }

    #[test]
    fn select_components_cases() {
        let values = Matrix::from_rows(&[vec![1.0, 1.0], vec![9.0, 0.0], vec![0.5, 0.2]]).unwrap();
        let s = ScoreMatrix {
            values,
            token_count: 1,
            layer_id: "x".into(),
        };
        assert_eq!(select_components(&s, 1).unwrap(), vec![1]);
        assert_eq!(select_components(&s, 3).unwrap(), vec![0, 1, 2]);
        assert!(select_components(&s, 4).is_err());

        // row-sum sort oracle on random scores
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rand = Matrix::random_normal(7, 5, 1.0, &mut rng);
        let values = Matrix::from_fn(7, 5, |i, j| rand.get(i, j).abs());
        let mass: Vec<f64> = (0..7).map(|i| values.row(i).iter().sum()).collect();
        let mut order: Vec<usize> = (0..7).collect();
        order.sort_by(|&a, &b| mass[b].partial_cmp(&mass[a]).unwrap());
        let mut expect = order[..3].to_vec();
        expect.sort();
        let s = ScoreMatrix {
            values,
            token_count: 1,
            layer_id: "x".into(),
        };
        assert_eq!(select_components(&s, 3).unwrap(), expect);
    }

    #[test]
    fn heatmap_sorted_and_plain() {
        let dir = tempfile::tempdir().unwrap();
        let s = ScoreMatrix {
            values: Matrix::from_rows(&[vec![3.0, 1.0], vec![2.0, 4.0]]).unwrap(),
            token_count: 1,
            layer_id: "x".into(),
        };
        let p = dir.path().join("sorted.csv");
        export_heatmap(&s, true, &p).unwrap();
        assert_eq!(read_heatmap(&p).unwrap().as_slice(), &[1.0, 3.0, 2.0, 4.0]);
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "component,0,1\n0,1,3\n1,2,4\n");

        let p = dir.path().join("plain.csv");
        export_heatmap(&s, false, &p).unwrap();
        assert_eq!(read_heatmap(&p).unwrap(), s.values);

        assert!(export_heatmap(&s, false, Path::new("")).is_err());
    }

    #[test]
    fn score_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = ScoreMatrix {
            values: Matrix::random_normal(3, 4, 1.0, &mut rng),
            token_count: 12,
            layer_id: "blocks.0.q".into(),
        };
        let p = dir.path().join("s.json");
        save_scores(&s, 77, &p).unwrap();
        assert_eq!(load_scores(&p).unwrap(), (s, 77));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn aggregation_is_permutation_invariant(seed in any::<u64>()) {
                use rand::seq::SliceRandom;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let svd = linalg::svd(&Matrix::random_normal(5, 7, 1.0, &mut rng)).unwrap();
                let mut tokens: Vec<Vec<f64>> = (0..9).map(|_| randn(7, &mut rng)).collect();
                let a = aggregate_scores(&tokens, &svd, "l").unwrap();
                tokens.shuffle(&mut rng);
                let b = aggregate_scores(&tokens, &svd, "l").unwrap();
                for (x, y) in a.values.as_slice().iter().zip(b.values.as_slice()) {
                    prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
                }
            }

            #[test]
            fn selection_nests_and_ignores_input_scale(seed in any::<u64>(), c in 0.01f64..100.0, r in 0usize..5) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let svd = linalg::svd(&Matrix::random_normal(6, 8, 1.0, &mut rng)).unwrap();
                let tokens: Vec<Vec<f64>> = (0..5).map(|_| randn(8, &mut rng)).collect();
                let scaled: Vec<Vec<f64>> = tokens.iter().map(|t| t.iter().map(|v| v * c).collect()).collect();
                let a = aggregate_scores(&tokens, &svd, "l").unwrap();
                let b = aggregate_scores(&scaled, &svd, "l").unwrap();
                for (x, y) in a.values.as_slice().iter().zip(b.values.as_slice()) {
                    prop_assert!((x * c - y).abs() <= 1e-10 * y.abs().max(1e-300));
                }
                let small = select_components(&a, r).unwrap();
                prop_assert_eq!(&small, &select_components(&b, r).unwrap());
                let big = select_components(&a, r + 1).unwrap();
                prop_assert!(small.iter().all(|i| big.contains(i)));
            }
        }
    }
}
