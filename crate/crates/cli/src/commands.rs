//! One function per subcommand. Each reads its inputs, writes its outputs and
//! a manifest, and prints a short summary.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

use rsparse::io::model_file::{read_model, write_model};
use rsparse::io::{generate_corpus, layer_file::write_layer, Cell, ReportTable};
use rsparse::layer::{bench_matvec, SparsityPlan};
use rsparse::model::train::{train, TrainConfig, TOY_CORPUS_LEN};
use rsparse::model::{analyze_phases, DecomposedModel, ModelConfig, ModelProfile, ToyModel};
use rsparse::scores::{export_heatmap, save_scores};
use rsparse::search::{
    evolve, uniform_recipe, CalibrationObjective, LayerSpec, Recipe, SearchConfig, SearchMode,
};

use crate::manifest::{manifest_path_for_file, Run};
use crate::{
    BenchArgs, CalibrationArgs, Cli, Command, DecomposeArgs, EvalArgs, ModeArg, PhaseArgs,
    PlanArgs, ProfileArgs, SearchArgs, TrainArgs,
};

/// Streams split from the master seed, one per subsystem.
mod stream {
    pub const MODEL_INIT: u64 = 0;
    pub const TRAIN_BATCHES: u64 = 1;
    pub const TRAIN_CORPUS: u64 = 2;
    pub const CALIBRATION: u64 = 3;
    pub const EVALUATION: u64 = 4;
    pub const SEARCH: u64 = 5;
    pub const BENCH: u64 = 6;
}

/// Calibration sets default to this many sequences.
const DEFAULT_SEQUENCES: usize = 16;

pub fn split_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    let seed = cli.seed;
    match &cli.command {
        Command::Train(a) => cmd_train(seed, a),
        Command::Profile(a) => cmd_profile(seed, a),
        Command::Decompose(a) => cmd_decompose(seed, a),
        Command::Search(a) => cmd_search(seed, a),
        Command::Eval(a) => cmd_eval(seed, a),
        Command::Bench(a) => cmd_bench(seed, a),
        Command::AnalyzePhases(a) => cmd_analyze_phases(seed, a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

struct Calibration {
    model: ToyModel,
    sequences: Vec<Vec<u32>>,
    split: usize,
    corpus_seed: u64,
}

fn load_calibration(run: &mut Run, seed: u64, args: &CalibrationArgs) -> Result<Calibration> {
    let model = read_model(&args.model)?;
    run.input(&args.model)?;
    if args.seq_len < 2 || args.seq_len > model.config.max_seq_len {
        bail!(
            "--seq-len {} must be in [2, {}] for this model",
            args.seq_len,
            model.config.max_seq_len
        );
    }
    let corpus_seed = run.seed(
        "calibration_corpus",
        args.corpus
            .corpus_seed
            .unwrap_or_else(|| split_seed(seed, stream::CALIBRATION)),
    );
    let len = args
        .corpus
        .corpus_len
        .unwrap_or(DEFAULT_SEQUENCES * args.seq_len);
    let corpus = generate_corpus(
        args.corpus.corpus_rule,
        corpus_seed,
        len,
        model.config.vocab_size,
    )?;
    let sequences = corpus.sequences(args.seq_len);
    if sequences.is_empty() {
        bail!(
            "--corpus-len {len} is shorter than one sequence of {}",
            args.seq_len
        );
    }
    Ok(Calibration {
        model,
        sequences,
        split: args.seq_len / 2,
        corpus_seed,
    })
}

fn calibration_config(args: &CalibrationArgs, cal: &Calibration) -> serde_json::Value {
    json!({
        "model": args.model,
        "corpus_rule": args.corpus.corpus_rule,
        "sequences": cal.sequences.len(),
        "seq_len": args.seq_len,
        "split": cal.split,
    })
}

/// Per-layer plans, plus the recipe they came from if any.
fn resolve_plans(
    run: &mut Run,
    args: &PlanArgs,
    config: &ModelConfig,
) -> Result<(Vec<SparsityPlan>, Option<Recipe>)> {
    let layers = LayerSpec::for_model(config);
    let recipe = if let Some(path) = &args.recipe {
        let recipe = Recipe::load(path)?;
        run.input(path)?;
        if recipe.layers != layers {
            bail!(
                "recipe {} does not match the model's layers",
                path.display()
            );
        }
        recipe
    } else if let Some(budget) = args.budget {
        uniform_recipe(layers, args.rho, budget)?
    } else if let (Some(keep), Some(rank)) = (args.keep, args.rank) {
        let plan = SparsityPlan::new(keep, rank)?;
        return Ok((vec![plan; layers.len()], None));
    } else {
        bail!("one of --recipe, --budget or --keep with --rank is required");
    };
    Ok((recipe.plans()?, Some(recipe)))
}

fn plan_config(args: &PlanArgs) -> serde_json::Value {
    json!({
        "recipe": args.recipe,
        "budget": args.budget,
        "rho": args.rho,
        "keep": args.keep,
        "rank": args.rank,
    })
}

fn mean_perplexity(
    model: &ToyModel,
    sequences: &[Vec<u32>],
    split: usize,
    sparse: Option<&DecomposedModel>,
) -> Result<f64> {
    let ppl = sequences
        .par_iter()
        .map(|s| model.perplexity(s, split, sparse))
        .collect::<rsparse::Result<Vec<_>>>()?;
    Ok(ppl.iter().sum::<f64>() / ppl.len() as f64)
}

fn cmd_train(seed: u64, args: &TrainArgs) -> Result<()> {
    let mut run = Run::start("train");
    let config = ModelConfig {
        num_layers: args.layers,
        embed_dim: args.embed,
        hidden_dim: args.hidden,
        num_heads: args.heads,
        vocab_size: args.vocab,
        max_seq_len: args.max_seq_len,
        seed: run.seed("model_init", split_seed(seed, stream::MODEL_INIT)),
    };
    let mut model = ToyModel::random(config)?;
    let corpus_seed = run.seed(
        "train_corpus",
        args.corpus
            .corpus_seed
            .unwrap_or_else(|| split_seed(seed, stream::TRAIN_CORPUS)),
    );
    let corpus = generate_corpus(
        args.corpus.corpus_rule,
        corpus_seed,
        args.corpus.corpus_len.unwrap_or(TOY_CORPUS_LEN),
        args.vocab,
    )?;
    let train_cfg = TrainConfig {
        steps: args.steps,
        batch_size: args.batch,
        seq_len: args.seq_len,
        learning_rate: args.lr,
        warmup_steps: args.warmup,
        seed: run.seed("train_batches", split_seed(seed, stream::TRAIN_BATCHES)),
    };
    let report = train(&mut model, &corpus.tokens, &train_cfg)?;
    let every = (args.steps / 10).max(1);
    for (step, loss) in report.losses.iter().enumerate() {
        if step % every == 0 || step + 1 == report.losses.len() {
            println!("step {step:>5}  loss {loss:.4}");
        }
    }
    write_model(&model, &args.out)?;
    run.output(args.out.clone());
    run.finish(
        json!({ "model": config, "train": train_cfg, "corpus_rule": args.corpus.corpus_rule, "corpus_len": corpus.tokens.len() }),
        json!({ "initial_loss": report.losses.first(), "final_loss": report.losses.last() }),
        &manifest_path_for_file(&args.out),
    )?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_profile(seed: u64, args: &ProfileArgs) -> Result<()> {
    let mut run = Run::start("profile");
    let cal = load_calibration(&mut run, seed, &args.calib)?;
    let profile = ModelProfile::collect(&cal.model, &cal.sequences)?;
    create_dir(&args.out)?;
    for layer in &profile.layers {
        let name = &layer.scores.layer_id;
        let path = args.out.join(format!("{name}.scores.json"));
        save_scores(&layer.scores, cal.corpus_seed, &path)?;
        run.output(path);
        if args.heatmaps {
            let path = args.out.join(format!("{name}.heatmap.csv"));
            export_heatmap(&layer.scores, true, &path)?;
            run.output(path);
        }
    }
    let tokens = cal.sequences.len() * args.calib.seq_len;
    println!(
        "profiled {} layers over {tokens} calibration tokens into {}",
        profile.layers.len(),
        args.out.display()
    );
    run.finish(
        json!({ "calibration": calibration_config(&args.calib, &cal), "heatmaps": args.heatmaps }),
        json!({ "layers": profile.layers.len(), "tokens": tokens }),
        &args.out.join("manifest.json"),
    )
}

fn cmd_decompose(seed: u64, args: &DecomposeArgs) -> Result<()> {
    let mut run = Run::start("decompose");
    let cal = load_calibration(&mut run, seed, &args.calib)?;
    let (plans, _) = resolve_plans(&mut run, &args.plan, &cal.model.config)?;
    let profile = ModelProfile::collect(&cal.model, &cal.sequences)?;
    let decomposed = DecomposedModel::build(&profile, &plans)?;
    create_dir(&args.out)?;
    for (slot, layer) in decomposed.layers.iter().enumerate() {
        if let Some(layer) = layer {
            let path = args
                .out
                .join(format!("{}.rspl", ModelConfig::slot_name(slot)));
            write_layer(layer, &path)?;
            run.output(path);
        }
    }
    println!(
        "wrote {} layer files to {}",
        plans.len(),
        args.out.display()
    );
    run.finish(
        json!({ "calibration": calibration_config(&args.calib, &cal), "plan": plan_config(&args.plan) }),
        json!({ "layers": plans.len() }),
        &args.out.join("manifest.json"),
    )
}

fn cmd_search(seed: u64, args: &SearchArgs) -> Result<()> {
    let mut run = Run::start("search");
    if !(args.budget > 0.0 && args.budget <= 1.0) {
        bail!("--budget {} must be in (0, 1]", args.budget);
    }
    let cal = load_calibration(&mut run, seed, &args.calib)?;
    let cfg = SearchConfig {
        population: args.pop,
        mutation_rate: args.pm,
        crossover_rate: args.pc,
        generations: args.gens,
        group_size: args.group_size,
        seed: run.seed("search", split_seed(seed, stream::SEARCH)),
        mode: match args.mode {
            ModeArg::Groupwise => SearchMode::Groupwise,
            ModeArg::Joint => SearchMode::Joint,
        },
        calibration_sequences: cal.sequences.len(),
        calibration_len: args.calib.seq_len,
    };
    cfg.validate()?;
    let profile = ModelProfile::collect(&cal.model, &cal.sequences)?;
    let objective = CalibrationObjective::new(&cal.model, &profile, &cal.sequences, cal.split)?;
    let dense = objective.dense_loss()?;
    let layers = LayerSpec::for_model(&cal.model.config);
    let budget = vec![args.budget; layers.len()];
    println!("dense perplexity {dense:.6}");
    let outcome = evolve(&objective, &layers, &budget, &cfg)?;
    println!(
        "uniform rho {} perplexity {:.6}",
        rsparse::search::BASELINE_RHO,
        outcome.baseline_loss
    );
    for rec in &outcome.history {
        println!(
            "group {:>2} generation {:>2}  best {:.6}  mean {:.6}",
            rec.group, rec.generation, rec.best_loss, rec.mean_loss
        );
    }
    println!(
        "best perplexity {:.6} after {} evaluations",
        outcome.best_loss, outcome.evaluations
    );
    outcome.recipe.save(&args.out)?;
    run.output(args.out.clone());
    run.finish(
        json!({ "calibration": calibration_config(&args.calib, &cal), "search": cfg, "budget": args.budget }),
        json!({
            "dense_loss": dense,
            "baseline_loss": outcome.baseline_loss,
            "best_loss": outcome.best_loss,
            "evaluations": outcome.evaluations,
            "history": outcome.history,
        }),
        &manifest_path_for_file(&args.out),
    )
}

fn cmd_eval(seed: u64, args: &EvalArgs) -> Result<()> {
    let mut run = Run::start("eval");
    let cal = load_calibration(&mut run, seed, &args.calib)?;
    let (plans, recipe) = resolve_plans(&mut run, &args.plan, &cal.model.config)?;
    let profile = ModelProfile::collect(&cal.model, &cal.sequences)?;
    let decomposed = DecomposedModel::build(&profile, &plans)?;

    let eval_seed = run.seed(
        "evaluation_corpus",
        args.eval_seed
            .unwrap_or_else(|| split_seed(seed, stream::EVALUATION)),
    );
    let corpus = generate_corpus(
        args.calib.corpus.corpus_rule,
        eval_seed,
        args.eval_len,
        cal.model.config.vocab_size,
    )?;
    let sequences = corpus.sequences(args.calib.seq_len);
    if sequences.is_empty() {
        bail!(
            "--eval-len {} is shorter than one sequence of {}",
            args.eval_len,
            args.calib.seq_len
        );
    }
    let dense = mean_perplexity(&cal.model, &sequences, cal.split, None)?;
    let sparse = mean_perplexity(&cal.model, &sequences, cal.split, Some(&decomposed))?;

    let mut layers = ReportTable::new([
        "layer",
        "m_in",
        "m_out",
        "rho",
        "budget",
        "keep_fraction",
        "rank",
        "relative_cost",
        "dense_bytes",
        "touched_bytes",
    ]);
    let (mut dense_bytes, mut touched_bytes) = (0u64, 0u64);
    let (mut weighted_cost, mut params) = (0.0, 0.0);
    for (slot, layer) in decomposed.layers.iter().enumerate() {
        let layer = layer
            .as_ref()
            .context("decomposed model is missing a layer")?;
        let io = layer.io_cost();
        dense_bytes += io.dense_bytes;
        touched_bytes += io.touched_bytes;
        let p = (layer.m_in() * layer.m_out()) as f64;
        weighted_cost += p * io.relative_cost;
        params += p;
        let (rho, budget) = match &recipe {
            Some(r) => (Cell::Float(r.rho[slot]), Cell::Float(r.budget[slot])),
            None => (Cell::from(""), Cell::from("")),
        };
        layers.push(vec![
            ModelConfig::slot_name(slot).into(),
            layer.m_in().into(),
            layer.m_out().into(),
            rho,
            budget,
            layer.plan().keep_fraction.into(),
            layer.plan().rank.into(),
            io.relative_cost.into(),
            Cell::Int(io.dense_bytes as i64),
            Cell::Int(io.touched_bytes as i64),
        ])?;
    }
    let aggregate = weighted_cost / params;
    let touched_fraction = touched_bytes as f64 / dense_bytes as f64;
    let mut summary = ReportTable::new([
        "dense_perplexity",
        "decomposed_perplexity",
        "aggregate_cost",
        "touched_fraction",
        "sequences",
        "seq_len",
        "split",
    ]);
    summary.push(vec![
        dense.into(),
        sparse.into(),
        aggregate.into(),
        touched_fraction.into(),
        sequences.len().into(),
        args.calib.seq_len.into(),
        cal.split.into(),
    ])?;
    create_dir(&args.out)?;
    for (table, name) in [(&layers, "layers.csv"), (&summary, "summary.csv")] {
        let path = args.out.join(name);
        table.write(&path)?;
        run.output(path);
    }
    println!("dense perplexity {dense:.6}");
    println!("decomposed perplexity {sparse:.6}");
    println!("aggregate relative cost {aggregate:.6} (bytes touched {touched_fraction:.6})");
    run.finish(
        json!({
            "calibration": calibration_config(&args.calib, &cal),
            "plan": plan_config(&args.plan),
            "eval_len": args.eval_len,
        }),
        json!({
            "dense_perplexity": dense,
            "decomposed_perplexity": sparse,
            "aggregate_cost": aggregate,
            "touched_fraction": touched_fraction,
        }),
        &args.out.join("manifest.json"),
    )
}

fn cmd_bench(seed: u64, args: &BenchArgs) -> Result<()> {
    let mut run = Run::start("bench");
    let bench_seed = run.seed("bench", split_seed(seed, stream::BENCH));
    let mut table = ReportTable::new([
        "m_in",
        "m_out",
        "keep_fraction",
        "repetitions",
        "dense_ms",
        "gather_ms",
        "time_ratio",
        "touched_ratio",
    ]);
    let mut results = Vec::new();
    for &keep in &args.keep {
        let rep = bench_matvec(args.m_in, args.m_out, keep, args.reps, bench_seed)?;
        println!(
            "keep {keep:.3}: dense {:.3} ms, gather {:.3} ms, time ratio {:.3}, touched ratio {:.4}",
            rep.dense_ns / 1e6,
            rep.gather_ns / 1e6,
            rep.time_ratio(),
            rep.touched_ratio
        );
        table.push(vec![
            rep.m_in.into(),
            rep.m_out.into(),
            rep.keep_fraction.into(),
            rep.repetitions.into(),
            (rep.dense_ns / 1e6).into(),
            (rep.gather_ns / 1e6).into(),
            rep.time_ratio().into(),
            rep.touched_ratio.into(),
        ])?;
        results.push(json!({ "keep_fraction": keep, "time_ratio": rep.time_ratio(), "touched_ratio": rep.touched_ratio }));
    }
    table.write(&args.out)?;
    run.output(args.out.clone());
    run.finish(
        json!({ "m_in": args.m_in, "m_out": args.m_out, "keep": args.keep, "reps": args.reps }),
        json!(results),
        &manifest_path_for_file(&args.out),
    )
}

fn cmd_analyze_phases(seed: u64, args: &PhaseArgs) -> Result<()> {
    let mut run = Run::start("analyze-phases");
    if args.levels.is_empty() {
        bail!("--levels must list at least one threshold count");
    }
    let cal = load_calibration(&mut run, seed, &args.calib)?;
    let reports = analyze_phases(
        &cal.model,
        &cal.sequences,
        args.sparsity,
        &args.levels,
        args.t0,
    )?;
    let mut table = ReportTable::new(["levels", "sparsity", "tokens", "mean_relative_error"]);
    for r in &reports {
        println!(
            "levels {}  sparsity {:.3}  tokens {}  mean relative error {:.6}",
            r.levels, r.sparsity, r.tokens, r.mean_relative_error
        );
        table.push(vec![
            r.levels.into(),
            r.sparsity.into(),
            r.tokens.into(),
            r.mean_relative_error.into(),
        ])?;
    }
    table.write(&args.out)?;
    run.output(args.out.clone());
    run.finish(
        json!({
            "calibration": calibration_config(&args.calib, &cal),
            "levels": args.levels,
            "sparsity": args.sparsity,
            "t0": args.t0,
        }),
        json!(reports),
        &manifest_path_for_file(&args.out),
    )
}
