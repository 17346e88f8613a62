//! Acceptance suite: ten end-to-end criteria, run sequentially so their
//! runtime budgets are measured without competing tests. Prints one
//! PASS/FAIL line per criterion and exits non-zero if any fails.

use std::io::Write;
use std::path::Path;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use rsparse::io::layer_file::{decode_layer, encode_layer};
use rsparse::io::model_file::{decode_model, encode_model};
use rsparse::io::{generate_corpus, CorpusRule};
use rsparse::layer::{
    bench_matvec, gather_matvec, ColumnMajorMatrix, DecomposedLayer, SparsityPlan,
};
use rsparse::linalg::{norm2, svd, Matrix};
use rsparse::model::train::{train_toy_model, TrainConfig};
use rsparse::model::{analyze_phases, ModelConfig, ModelProfile, ToyModel};
use rsparse::scores::{
    aggregate_scores, load_scores, save_scores, score_single_token, ScoreMatrix,
};
use rsparse::search::{
    evolve, uniform_recipe, CalibrationObjective, LayerSpec, Objective, Recipe, SearchConfig,
    SearchOutcome,
};

type Outcome = Result<String, String>;

const TOY_CORPUS_SEED: u64 = 1;
const CALIBRATION_SEED: u64 = 1001;
const SEARCH_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn randn(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm2(&d) / norm2(b).max(f64::MIN_POSITIVE)
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c1_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst_sparse, mut worst_lowrank) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let m_out = rng.gen_range(8..=256);
        let m_in = rng.gen_range(8..=256);
        let w = Matrix::random_normal(m_out, m_in, 1.0, &mut rng);
        let s = svd(&w).map_err(|e| e.to_string())?;
        let calib: Vec<Vec<f64>> = (0..8).map(|_| randn(m_in, &mut rng)).collect();
        let score = aggregate_scores(&calib, &s, "c1").map_err(|e| e.to_string())?;
        let cols = Arc::new(ColumnMajorMatrix::from_row_major(&w));
        let sparse =
            DecomposedLayer::decompose_with_svd(cols.clone(), &s, SparsityPlan::dense(), &score)
                .unwrap();
        let full = SparsityPlan::new(0.0, m_in.min(m_out)).unwrap();
        let lowrank = DecomposedLayer::decompose_with_svd(cols, &s, full, &score).unwrap();
        let x = randn(m_in, &mut rng);
        let y = w.matvec(&x).unwrap();
        worst_sparse = worst_sparse.max(rel_err(&sparse.forward(&x).unwrap(), &y));
        worst_lowrank = worst_lowrank.max(rel_err(&lowrank.forward(&x).unwrap(), &y));
    }
    check(
        worst_sparse <= 1e-10 && worst_lowrank <= 1e-7,
        format!("worst rel err (s=1,r=0) {worst_sparse:.2e} <= 1e-10, (s=0,r=min) {worst_lowrank:.2e} <= 1e-7"),
    )
}

fn c2_gather_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let m_out = rng.gen_range(1..=96);
        let m_in = rng.gen_range(1..=96);
        let w = Matrix::random_normal(m_out, m_in, 1.0, &mut rng);
        let cols = ColumnMajorMatrix::from_row_major(&w);
        let x = randn(m_in, &mut rng);
        let p: f64 = rng.gen();
        let kept: Vec<usize> = (0..m_in).filter(|_| rng.gen::<f64>() < p).collect();
        let got = gather_matvec(&cols, &x, &kept).map_err(|e| e.to_string())?;
        let mut masked = vec![0.0; m_in];
        for &j in &kept {
            masked[j] = x[j];
        }
        let want = w.matvec(&masked).unwrap();
        let scale = norm2(&want).max(1.0);
        let d: Vec<f64> = got.iter().zip(&want).map(|(a, b)| a - b).collect();
        worst = worst.max(norm2(&d) / scale);
    }
    check(
        worst <= 1e-12,
        format!("worst rel err {worst:.2e} <= 1e-12 over 1000 pairs"),
    )
}

fn c3_score_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let m_out = rng.gen_range(2..=64);
        let m_in = rng.gen_range(2..=64);
        let w = Matrix::random_normal(m_out, m_in, 1.0, &mut rng);
        let s = svd(&w).map_err(|e| e.to_string())?;
        let x = randn(m_in, &mut rng);
        let sc = score_single_token(&x, &s).map_err(|e| e.to_string())?;
        let mut y = vec![0.0; m_out];
        for i in 0..sc.rows() {
            for j in 0..sc.cols() {
                for (r, yr) in y.iter_mut().enumerate() {
                    *yr += sc.get(i, j) * s.u.get(r, i);
                }
            }
        }
        worst = worst.max(rel_err(&y, &w.matvec(&x).unwrap()));
    }
    check(
        worst <= 1e-10,
        format!("worst rel err {worst:.2e} <= 1e-10 over 100 cases"),
    )
}

fn c4_budget_honesty() -> Outcome {
    let n = 4096;
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let w = Matrix::random_normal(n, n, 1.0, &mut rng);
    let cols = Arc::new(ColumnMajorMatrix::from_row_major(&w));
    drop(w);
    let x = randn(n, &mut rng);
    let mut worst_counter = 0.0f64;
    let mut analytic_exact = true;
    for r in [0usize, 256, 1024] {
        let a = Matrix::random_normal(n, r, 0.01, &mut rng);
        let b = Matrix::random_normal(r, n, 0.01, &mut rng);
        for s in [0.25, 0.5, 0.75] {
            let plan = SparsityPlan::new(s, r).unwrap();
            let layer = DecomposedLayer::from_parts(
                cols.clone(),
                a.clone(),
                b.clone(),
                plan,
                (0..r).collect(),
            )
            .map_err(|e| e.to_string())?;
            let io = layer.io_cost();
            let formula = r as f64 * (2 * n) as f64 / (n as f64 * n as f64) + s;
            analytic_exact &= io.relative_cost == formula;
            let trace = layer.forward_traced(&x).map_err(|e| e.to_string())?;
            let measured = trace.touched_bytes() as f64 / io.dense_bytes as f64;
            worst_counter =
                worst_counter.max((measured - io.relative_cost).abs() / io.relative_cost);
        }
    }
    check(
        analytic_exact && worst_counter <= 0.02,
        format!(
            "analytic formula exact: {analytic_exact}; worst counter deviation {:.4}% <= 2%",
            worst_counter * 100.0
        ),
    )
}

fn mean_rel_err(layer: &DecomposedLayer, w: &Matrix, xs: &[Vec<f64>]) -> f64 {
    xs.iter()
        .map(|x| rel_err(&layer.forward(x).unwrap(), &w.matvec(x).unwrap()))
        .sum::<f64>()
        / xs.len() as f64
}

/// Inputs with `k0` dominant channels (magnitude ~10) on random positions and
/// small noise elsewhere.
fn dominant_inputs(
    n: usize,
    k0: usize,
    noise: f64,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            let mut x: Vec<f64> = randn(n, rng).into_iter().map(|v| v * noise).collect();
            for j in rand::seq::index::sample(rng, n, k0) {
                x[j] = (10.0 + rng.gen::<f64>()) * if rng.gen() { 1.0 } else { -1.0 };
            }
            x
        })
        .collect()
}

fn decompose_on(w: &Matrix, calib: &[Vec<f64>], plan: SparsityPlan) -> DecomposedLayer {
    let s = svd(w).unwrap();
    let score = aggregate_scores(calib, &s, "planted").unwrap();
    DecomposedLayer::decompose_with_svd(
        Arc::new(ColumnMajorMatrix::from_row_major(w)),
        &s,
        plan,
        &score,
    )
    .unwrap()
}

fn c5_planted_separation() -> Outcome {
    let n = 128;
    let (k0, r0) = (16, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    // budget C = k0/n + r0 (2n)/n^2 = 0.25 for both constructions
    let budget = k0 as f64 / n as f64 + r0 as f64 * 2.0 / n as f64;
    let combined_plan = SparsityPlan::new(k0 as f64 / n as f64, r0).unwrap();

    // rank-r0 weight, k0-dominant inputs with O(1) tails: sparse plus low-rank vs pure sparse
    let a = Matrix::random_normal(n, r0, 1.0, &mut rng);
    let b = Matrix::random_normal(r0, n, 1.0, &mut rng);
    let w_low = rsparse::linalg::matmul(&a, &b).unwrap();
    let calib = dominant_inputs(n, k0, 1.0, 64, &mut rng);
    let test = dominant_inputs(n, k0, 1.0, 64, &mut rng);
    let rs = mean_rel_err(&decompose_on(&w_low, &calib, combined_plan), &w_low, &test);
    let sparse_only = mean_rel_err(
        &decompose_on(&w_low, &calib, SparsityPlan::new(budget, 0).unwrap()),
        &w_low,
        &test,
    );

    // full-rank weight, nearly k0-sparse inputs: sparse plus low-rank vs pure low-rank
    let w_full = Matrix::random_normal(n, n, 1.0, &mut rng);
    let calib = dominant_inputs(n, k0, 1e-3, 64, &mut rng);
    let test = dominant_inputs(n, k0, 1e-3, 64, &mut rng);
    let lr_rank = (budget * (n * n) as f64 / (2 * n) as f64).round() as usize;
    let rs_full = mean_rel_err(
        &decompose_on(&w_full, &calib, combined_plan),
        &w_full,
        &test,
    );
    let lowrank_only = mean_rel_err(
        &decompose_on(&w_full, &calib, SparsityPlan::new(0.0, lr_rank).unwrap()),
        &w_full,
        &test,
    );

    let (ratio_s, ratio_l) = (
        sparse_only / rs.max(1e-300),
        lowrank_only / rs_full.max(1e-300),
    );
    check(
        ratio_s >= 10.0 && ratio_l >= 10.0,
        format!(
            "C={budget}: low-rank weight combined {rs:.2e} vs sparse {sparse_only:.3} ({ratio_s:.1e}x); \
             full-rank weight combined {rs_full:.2e} vs low-rank(r={lr_rank}) {lowrank_only:.3} ({ratio_l:.1e}x); need >= 10x"
        ),
    )
}

struct Toy {
    model: ToyModel,
    calibration: Vec<Vec<u32>>,
    profile: ModelProfile,
}

fn toy() -> &'static Toy {
    static TOY: OnceLock<Toy> = OnceLock::new();
    TOY.get_or_init(|| {
        let (model, _) = train_toy_model(
            ModelConfig::default(),
            TOY_CORPUS_SEED,
            &TrainConfig::default(),
        )
        .unwrap();
        let cfg = SearchConfig::default();
        let calibration = generate_corpus(
            CorpusRule::Markov2,
            CALIBRATION_SEED,
            cfg.calibration_sequences * cfg.calibration_len,
            model.config.vocab_size,
        )
        .unwrap()
        .sequences(cfg.calibration_len);
        let profile = ModelProfile::collect(&model, &calibration).unwrap();
        Toy {
            model,
            calibration,
            profile,
        }
    })
}

struct SearchRuns {
    uniform_loss: f64,
    runs: Vec<SearchOutcome>,
    rerun: SearchOutcome,
}

fn search_runs() -> Result<&'static SearchRuns, String> {
    static RUNS: OnceLock<Result<SearchRuns, String>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let t = toy();
        let cfg = SearchConfig::default();
        let obj = CalibrationObjective::new(
            &t.model,
            &t.profile,
            &t.calibration,
            cfg.calibration_len / 2,
        )
        .map_err(|e| e.to_string())?;
        let layers = LayerSpec::for_model(&t.model.config);
        let budget = vec![0.5; layers.len()];
        let uniform = uniform_recipe(layers.clone(), 0.95, 0.5).map_err(|e| e.to_string())?;
        let uniform_loss = obj.loss(&uniform).map_err(|e| e.to_string())?;
        let run = |seed| {
            evolve(&obj, &layers, &budget, &SearchConfig { seed, ..cfg }).map_err(|e| e.to_string())
        };
        let runs = SEARCH_SEEDS
            .iter()
            .map(|&s| run(s))
            .collect::<Result<Vec<_>, _>>()?;
        let rerun = run(SEARCH_SEEDS[0])?;
        Ok(SearchRuns {
            uniform_loss,
            runs,
            rerun,
        })
    })
    .as_ref()
    .map_err(Clone::clone)
}

fn c6_search_improvement() -> Outcome {
    let s = search_runs()?;
    let losses: Vec<f64> = s.runs.iter().map(|r| r.best_loss).collect();
    let never_worse = losses.iter().all(|&l| l <= s.uniform_loss);
    let strict = losses.iter().filter(|&&l| l < s.uniform_loss).count();
    check(
        never_worse && strict >= 4,
        format!(
            "uniform rho=0.95 ppl {:.6}; evolved {:?}; strict improvements {strict}/5 (need >= 4)",
            s.uniform_loss,
            losses.iter().map(|l| format!("{l:.6}")).collect::<Vec<_>>()
        ),
    )
}

fn c7_elitism_determinism() -> Outcome {
    let s = search_runs()?;
    let monotone = s.runs.iter().all(|r| {
        r.history
            .windows(2)
            .all(|w| w[1].best_loss <= w[0].best_loss)
            && r.history[0].best_loss <= r.baseline_loss
    });
    let first = &s.runs[0];
    let identical = first.recipe == s.rerun.recipe && first.history == s.rerun.history;
    let rho_bits_equal = first
        .recipe
        .rho
        .iter()
        .zip(&s.rerun.recipe.rho)
        .all(|(a, b)| a.to_bits() == b.to_bits());
    check(
        monotone && identical && rho_bits_equal,
        format!(
            "best loss non-increasing in all 5 runs: {monotone}; seed {} rerun bit-identical: {}",
            SEARCH_SEEDS[0],
            identical && rho_bits_equal
        ),
    )
}

fn c8_multiphase_trend() -> Outcome {
    let t = toy();
    let seqs = &t.calibration[..4];
    let reports =
        analyze_phases(&t.model, seqs, 0.9, &[1, 2, 3], None).map_err(|e| e.to_string())?;
    let err = |l: usize| {
        reports
            .iter()
            .find(|r| r.levels == l)
            .unwrap()
            .mean_relative_error
    };
    let (one, single_bin, two_bins) = (err(1), err(2), err(3));
    check(
        two_bins < one,
        format!(
            "90% changed: zero-masking {one:.4} vs two midpoint bins {two_bins:.4} (one bin at (T0+min)/2: {single_bin:.4})"
        ),
    )
}

fn c9_kernel_trend() -> Outcome {
    let rep = bench_matvec(4096, 4096, 0.5, 15, 909).map_err(|e| e.to_string())?;
    let faster = rep.gather_ns < rep.dense_ns;
    let ratio_ok = (rep.touched_ratio - 0.5).abs() <= 0.5 * 0.02;
    check(
        faster && ratio_ok,
        format!(
            "median dense {:.2} ms, gather {:.2} ms (ratio {:.3}); touched ratio {:.4} (0.5 +- 2%)",
            rep.dense_ns / 1e6,
            rep.gather_ns / 1e6,
            rep.time_ratio(),
            rep.touched_ratio
        ),
    )
}

fn f32_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-4.0f32..4.0) as f64)
}

fn c10_round_trips() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mem = Path::new("mem");
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    for case in 0..200 {
        // RSPL
        let (m_out, m_in) = (rng.gen_range(1..24), rng.gen_range(1..24));
        let r = rng.gen_range(0..=m_in.min(m_out));
        let keep = rng.gen_range(0..=8) as f64 / 8.0;
        let selected: Vec<usize> = {
            let mut v = rand::seq::index::sample(&mut rng, m_in.min(m_out), r).into_vec();
            v.sort_unstable();
            v
        };
        let layer = DecomposedLayer::from_parts(
            Arc::new(ColumnMajorMatrix::from_row_major(&f32_matrix(
                m_out, m_in, &mut rng,
            ))),
            f32_matrix(m_out, r, &mut rng),
            f32_matrix(r, m_in, &mut rng),
            SparsityPlan::new(keep, r).unwrap(),
            selected,
        )
        .unwrap();
        let bytes = encode_layer(&layer).unwrap();
        let back = decode_layer(&bytes, mem).map_err(|e| format!("case {case}: {e}"))?;
        let same = back.w_cols() == layer.w_cols()
            && back.a_r() == layer.a_r()
            && back.b_r() == layer.b_r()
            && back.plan() == layer.plan()
            && back.selected_components() == layer.selected_components();
        if !same || encode_layer(&back).unwrap() != bytes {
            return Err(format!("RSPL case {case} did not round-trip"));
        }

        // RSPW
        let heads = rng.gen_range(1..=3);
        let embed = heads * rng.gen_range(1..=4);
        let config = ModelConfig {
            num_layers: rng.gen_range(1..=2),
            embed_dim: embed,
            hidden_dim: embed + rng.gen_range(1..=6),
            num_heads: heads,
            vocab_size: rng.gen_range(2..=12),
            max_seq_len: rng.gen_range(1..=6),
            seed: rng.gen(),
        };
        let mut model = ToyModel::random(config).unwrap();
        for t in model.tensors_mut() {
            t.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        let bytes = encode_model(&model).unwrap();
        let back = decode_model(&bytes, mem).map_err(|e| format!("case {case}: {e}"))?;
        if back != model || encode_model(&back).unwrap() != bytes {
            return Err(format!("RSPW case {case} did not round-trip"));
        }

        // recipe JSON
        let count = rng.gen_range(1..6);
        let layers: Vec<LayerSpec> = (0..count)
            .map(|i| LayerSpec {
                name: format!("layer{i}"),
                m_in: rng.gen_range(1..300),
                m_out: rng.gen_range(1..300),
            })
            .collect();
        let rho = (0..count).map(|_| rng.gen()).collect();
        let budget = (0..count).map(|_| rng.gen()).collect();
        let mut recipe = Recipe::new(layers, rho, budget).unwrap();
        recipe.seed = rng.gen();
        recipe.loss = rng.gen::<bool>().then(|| rng.gen::<f64>() * 100.0);
        let path = dir.path().join("recipe.json");
        recipe.save(&path).unwrap();
        let back = Recipe::load(&path).map_err(|e| format!("case {case}: {e}"))?;
        let text = std::fs::read(&path).unwrap();
        back.save(&path).unwrap();
        if back != recipe || std::fs::read(&path).unwrap() != text {
            return Err(format!("recipe case {case} did not round-trip"));
        }

        // score JSON
        let score = ScoreMatrix {
            values: Matrix::from_fn(rng.gen_range(1..10), rng.gen_range(1..10), |_, _| {
                rng.gen::<f64>() * 1e3
            }),
            token_count: rng.gen_range(0..5000),
            layer_id: format!("blocks.{case}.q"),
        };
        let seed: u64 = rng.gen();
        let path = dir.path().join("scores.json");
        save_scores(&score, seed, &path).unwrap();
        let (back, back_seed) = load_scores(&path).map_err(|e| format!("case {case}: {e}"))?;
        if back != score || back_seed != seed {
            return Err(format!("score case {case} did not round-trip"));
        }
    }
    Ok("200 randomized cases each for RSPL, RSPW, recipe JSON and score JSON".into())
}

struct Criterion {
    id: usize,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion {
            id: 1,
            name: "exactness suite",
            budget: Duration::from_secs(10),
            run: c1_exactness,
        },
        Criterion {
            id: 2,
            name: "gather oracle equivalence",
            budget: Duration::from_secs(10),
            run: c2_gather_oracle,
        },
        Criterion {
            id: 3,
            name: "score reconstruction",
            budget: Duration::from_secs(10),
            run: c3_score_identity,
        },
        Criterion {
            id: 4,
            name: "budget honesty",
            budget: Duration::from_secs(60),
            run: c4_budget_honesty,
        },
        Criterion {
            id: 5,
            name: "planted-structure separation",
            budget: Duration::from_secs(60),
            run: c5_planted_separation,
        },
        Criterion {
            id: 6,
            name: "search improvement",
            budget: Duration::from_secs(15 * 60),
            run: c6_search_improvement,
        },
        Criterion {
            id: 7,
            name: "elitism and determinism",
            budget: Duration::from_secs(15 * 60),
            run: c7_elitism_determinism,
        },
        Criterion {
            id: 8,
            name: "multi-phase trend",
            budget: Duration::from_secs(60),
            run: c8_multiphase_trend,
        },
        Criterion {
            id: 9,
            name: "kernel trend",
            budget: Duration::from_secs(5 * 60),
            run: c9_kernel_trend,
        },
        Criterion {
            id: 10,
            name: "format round-trips",
            budget: Duration::from_secs(10),
            run: c10_round_trips,
        },
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    let mut out = std::io::stdout();
    for c in &criteria {
        if !filter.is_empty() && !filter.iter().any(|f| c.id.to_string() == *f) {
            continue;
        }
        // the shared toy model is trained once and charged to neither search criterion
        if c.id == 6 || c.id == 8 {
            toy();
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(c.run).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let (status, detail) = match &result {
            Ok(d) if elapsed <= c.budget => ("PASS", d.clone()),
            Ok(d) => ("FAIL", format!("{d}; over the {:?} budget", c.budget)),
            Err(d) => ("FAIL", d.clone()),
        };
        if status == "FAIL" {
            failed += 1;
        }
        writeln!(
            out,
            "criterion {:>2} {:<30} {status}  [{:.1}s] {detail}",
            c.id,
            c.name,
            elapsed.as_secs_f64()
        )
        .unwrap();
    }
    if failed > 0 {
        writeln!(out, "{failed} acceptance criteria failed").unwrap();
        std::process::exit(1);
    }
}
