//! Evolutionary search over per-layer sparse/low-rank ratios.
//!
//! Each linear layer `i` has a gene `rho_i` in `[0, 1]` and a caller-supplied
//! I/O budget `C_i`. The gene splits the budget between the sparse path
//! (`s_i = rho_i C_i`) and the low-rank path
//! (`r_i = round((1 - rho_i) C_i m n / (m + n))`), so every individual costs
//! `C_i` per layer up to one rank unit.
//!
//! The optimizer is differential evolution with Top-K survivor selection over
//! parents and offspring. Layers are optimized one contiguous group at a time
//! (or all at once in joint mode) with the other genes frozen at the best
//! individual found so far.

use std::ops::Range;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_json, write_json};
use crate::layer::SparsityPlan;
use crate::model::{DecomposedModel, ModelConfig, ModelProfile, Prefill, ToyModel};

/// The uniform baseline ratio; also seeds every initial population.
pub const BASELINE_RHO: f64 = 0.95;

/// Name and shape of one searchable layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub m_in: usize,
    pub m_out: usize,
}

impl LayerSpec {
    /// All linear layers of a model, in slot order.
    pub fn for_model(config: &ModelConfig) -> Vec<LayerSpec> {
        config
            .linear_shapes()
            .into_iter()
            .enumerate()
            .map(|(slot, (m_in, m_out))| LayerSpec {
                name: ModelConfig::slot_name(slot),
                m_in,
                m_out,
            })
            .collect()
    }

    /// Relative cost of one rank unit, `(m + n) / (m n)`.
    pub fn rank_unit(&self) -> f64 {
        (self.m_in + self.m_out) as f64 / (self.m_in as f64 * self.m_out as f64)
    }
}

/// `round((1 - rho) C m n / (m + n))`, clamped to `[0, min(m, n)]`.
pub fn derive_rank(rho: f64, budget: f64, m_in: usize, m_out: usize) -> usize {
    let (m, n) = (m_in as f64, m_out as f64);
    let r = ((1.0 - rho) * budget * m * n / (m + n)).round();
    (r.max(0.0) as usize).min(m_in.min(m_out))
}

/// Per-layer `rho` and budget `C`, from which `s` and `r` follow.
#[derive(Debug, Clone, PartialEq)]
pub struct Recipe {
    pub layers: Vec<LayerSpec>,
    pub rho: Vec<f64>,
    pub budget: Vec<f64>,
    pub seed: u64,
    /// Search loss recorded when the recipe was produced.
    pub loss: Option<f64>,
}

impl Recipe {
    pub fn new(layers: Vec<LayerSpec>, rho: Vec<f64>, budget: Vec<f64>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("recipe needs at least one layer"));
        }
        if rho.len() != layers.len() || budget.len() != layers.len() {
            return Err(Error::shape(
                "Recipe::new",
                layers.len(),
                format!("rho {} budget {}", rho.len(), budget.len()),
            ));
        }
        for (what, v) in [("rho", &rho), ("budget", &budget)] {
            if let Some(x) = v.iter().find(|x| !(0.0..=1.0).contains(*x)) {
                return Err(Error::invalid(format!("{what} value {x} outside [0, 1]")));
            }
        }
        if let Some(l) = layers.iter().find(|l| l.m_in == 0 || l.m_out == 0) {
            return Err(Error::invalid(format!(
                "layer {} has a zero dimension",
                l.name
            )));
        }
        Ok(Self {
            layers,
            rho,
            budget,
            seed: 0,
            loss: None,
        })
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Same layers and budgets with new genes.
    pub fn with_rho(&self, rho: Vec<f64>) -> Result<Self> {
        let mut r = Recipe::new(self.layers.clone(), rho, self.budget.clone())?;
        r.seed = self.seed;
        Ok(r)
    }

    pub fn keep_fraction(&self, i: usize) -> f64 {
        self.rho[i] * self.budget[i]
    }

    pub fn rank(&self, i: usize) -> usize {
        let l = &self.layers[i];
        derive_rank(self.rho[i], self.budget[i], l.m_in, l.m_out)
    }

    pub fn plan(&self, i: usize) -> SparsityPlan {
        SparsityPlan {
            keep_fraction: self.keep_fraction(i),
            rank: self.rank(i),
        }
    }

    /// Plans for every layer, checking that each costs `C_i` within one
    /// rank unit.
    pub fn plans(&self) -> Result<Vec<SparsityPlan>> {
        (0..self.len())
            .map(|i| {
                let plan = self.plan(i);
                let l = &self.layers[i];
                let cost = plan.relative_io_cost(l.m_in, l.m_out);
                if (cost - self.budget[i]).abs() > l.rank_unit() {
                    return Err(Error::Numerical(format!(
                        "layer {} costs {cost} against budget {}",
                        l.name, self.budget[i]
                    )));
                }
                Ok(plan)
            })
            .collect()
    }

    /// Parameter-weighted mean of the per-layer relative I/O costs.
    pub fn aggregate_cost(&self) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, l) in self.layers.iter().enumerate() {
            let p = (l.m_in * l.m_out) as f64;
            num += p * self.plan(i).relative_io_cost(l.m_in, l.m_out);
            den += p;
        }
        num / den
    }

    fn to_file(&self) -> RecipeFile {
        RecipeFile {
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| RecipeLayer {
                    name: l.name.clone(),
                    m_in: l.m_in,
                    m_out: l.m_out,
                    rho: self.rho[i],
                    budget: self.budget[i],
                    s: self.keep_fraction(i),
                    r: self.rank(i),
                })
                .collect(),
            seed: self.seed,
            loss: self.loss,
            tool_version: crate::VERSION.to_string(),
        }
    }

    fn from_file(f: RecipeFile, path: &Path) -> Result<Self> {
        let malformed = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let layers = f
            .layers
            .iter()
            .map(|l| LayerSpec {
                name: l.name.clone(),
                m_in: l.m_in,
                m_out: l.m_out,
            })
            .collect();
        let rho = f.layers.iter().map(|l| l.rho).collect();
        let budget = f.layers.iter().map(|l| l.budget).collect();
        let mut recipe = Recipe::new(layers, rho, budget).map_err(|e| malformed(e.to_string()))?;
        for (i, l) in f.layers.iter().enumerate() {
            if l.s != recipe.keep_fraction(i) || l.r != recipe.rank(i) {
                return Err(malformed(format!(
                    "layer {}: stored s={} r={} disagree with rho and budget (s={} r={})",
                    l.name,
                    l.s,
                    l.r,
                    recipe.keep_fraction(i),
                    recipe.rank(i)
                )));
            }
        }
        recipe.seed = f.seed;
        recipe.loss = f.loss;
        Ok(recipe)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(&self.to_file(), path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file(read_json(path)?, path)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RecipeFile {
    layers: Vec<RecipeLayer>,
    seed: u64,
    loss: Option<f64>,
    tool_version: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct RecipeLayer {
    name: String,
    m_in: usize,
    m_out: usize,
    rho: f64,
    budget: f64,
    s: f64,
    r: usize,
}

/// The same `rho` and budget for every layer.
pub fn uniform_recipe(layers: Vec<LayerSpec>, rho: f64, budget: f64) -> Result<Recipe> {
    let n = layers.len();
    Recipe::new(layers, vec![rho; n], vec![budget; n])
}

/// Contiguous groups of `group_size` layers in depth order; the last may be
/// smaller.
pub fn groupwise_schedule(num_layers: usize, group_size: usize) -> Vec<Range<usize>> {
    let size = group_size.max(1);
    (0..num_layers)
        .step_by(size)
        .map(|lo| lo..(lo + size).min(num_layers))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMode {
    /// One group at a time, `generations` each.
    Groupwise,
    /// All genes in one population.
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub population: usize,
    pub mutation_rate: f64,
    pub crossover_rate: f64,
    pub generations: usize,
    pub group_size: usize,
    pub seed: u64,
    pub mode: SearchMode,
    /// Calibration sequences and their length; the loss is the mean
    /// perplexity over them.
    pub calibration_sequences: usize,
    pub calibration_len: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            population: 32,
            mutation_rate: 0.5,
            crossover_rate: 0.5,
            generations: 5,
            group_size: 28,
            seed: 0,
            mode: SearchMode::Groupwise,
            calibration_sequences: 16,
            calibration_len: 128,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population < 4 {
            return Err(Error::invalid(format!(
                "population {} must be at least 4",
                self.population
            )));
        }
        for (what, v) in [
            ("mutation_rate", self.mutation_rate),
            ("crossover_rate", self.crossover_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{what} {v} outside [0, 1]")));
            }
        }
        if self.group_size == 0 {
            return Err(Error::invalid("group_size must be at least 1"));
        }
        Ok(())
    }
}

/// Differential-evolution mutant for population member `target`:
/// `pool[x1] + p_m (pool[x2] - pool[x3])` with distinct `x1, x2, x3 != target`,
/// clamped into `[0, 1]`.
pub fn mutate_clamp<R: Rng + ?Sized>(
    target: usize,
    pool: &[Vec<f64>],
    p_m: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if pool.len() < 4 {
        return Err(Error::invalid(format!(
            "mutation needs a pool of at least 4, got {}",
            pool.len()
        )));
    }
    if target >= pool.len() {
        return Err(Error::invalid(format!(
            "target {target} outside pool of {}",
            pool.len()
        )));
    }
    let pick = index::sample(rng, pool.len() - 1, 3);
    let skip = |i: usize| if i >= target { i + 1 } else { i };
    let (a, b, c) = (
        &pool[skip(pick.index(0))],
        &pool[skip(pick.index(1))],
        &pool[skip(pick.index(2))],
    );
    Ok(a.iter()
        .zip(b)
        .zip(c)
        .map(|((x1, x2), x3)| (x1 + p_m * (x2 - x3)).clamp(0.0, 1.0))
        .collect())
}

/// A loss to minimize over recipes.
pub trait Objective: Sync {
    fn loss(&self, recipe: &Recipe) -> Result<f64>;
}

impl<F> Objective for F
where
    F: Fn(&Recipe) -> Result<f64> + Sync,
{
    fn loss(&self, recipe: &Recipe) -> Result<f64> {
        self(recipe)
    }
}

/// Mean perplexity of a decomposed toy model over calibration sequences,
/// dense before the split point and decomposed after it.
pub struct CalibrationObjective<'a> {
    model: &'a ToyModel,
    profile: &'a ModelProfile,
    prefills: Vec<Prefill>,
}

impl<'a> CalibrationObjective<'a> {
    pub fn new(
        model: &'a ToyModel,
        profile: &'a ModelProfile,
        sequences: &[Vec<u32>],
        split: usize,
    ) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::invalid("empty calibration set"));
        }
        if profile.layers.len() != model.num_linear_layers() {
            return Err(Error::shape(
                "CalibrationObjective",
                model.num_linear_layers(),
                profile.layers.len(),
            ));
        }
        let prefills = sequences
            .par_iter()
            .map(|s| model.prefill(s, split))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model,
            profile,
            prefills,
        })
    }

    fn mean_perplexity(&self, sparse: Option<&DecomposedModel>) -> Result<f64> {
        let ppl = self
            .prefills
            .iter()
            .map(|p| self.model.perplexity_from(p, sparse))
            .collect::<Result<Vec<_>>>()?;
        Ok(ppl.iter().sum::<f64>() / ppl.len() as f64)
    }

    pub fn dense_loss(&self) -> Result<f64> {
        self.mean_perplexity(None)
    }
}

impl Objective for CalibrationObjective<'_> {
    fn loss(&self, recipe: &Recipe) -> Result<f64> {
        let decomposed = DecomposedModel::build(self.profile, &recipe.plans()?)?;
        self.mean_perplexity(Some(&decomposed))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub group: usize,
    /// 0 is the initial population of the group.
    pub generation: usize,
    pub best_loss: f64,
    pub mean_loss: f64,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub recipe: Recipe,
    pub best_loss: f64,
    /// Loss of the uniform baseline individual before any search.
    pub baseline_loss: f64,
    pub history: Vec<GenerationRecord>,
    pub evaluations: usize,
}

fn evaluate(objective: &dyn Objective, template: &Recipe, genes: &[Vec<f64>]) -> Result<Vec<f64>> {
    genes
        .par_iter()
        .map(|g| {
            let loss = objective.loss(&template.with_rho(g.clone())?)?;
            if loss.is_nan() {
                return Err(Error::Numerical("search loss is NaN".into()));
            }
            Ok(loss)
        })
        .collect()
}

/// Searches `rho` for `layers` under per-layer `budget`, minimizing
/// `objective`. The returned recipe carries its loss and the search seed.
pub fn evolve(
    objective: &dyn Objective,
    layers: &[LayerSpec],
    budget: &[f64],
    cfg: &SearchConfig,
) -> Result<SearchOutcome> {
    cfg.validate()?;
    if layers.is_empty() {
        return Err(Error::invalid("no layers to search"));
    }
    let template = Recipe::new(
        layers.to_vec(),
        vec![BASELINE_RHO; layers.len()],
        budget.to_vec(),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let p = cfg.population;
    let groups = match cfg.mode {
        SearchMode::Groupwise => groupwise_schedule(layers.len(), cfg.group_size),
        SearchMode::Joint => std::iter::once(0..layers.len()).collect(),
    };

    let mut best = template.rho.clone();
    let baseline_loss = evaluate(objective, &template, std::slice::from_ref(&best))?[0];
    let mut best_loss = baseline_loss;
    let mut evaluations = 1;
    let mut history = Vec::new();

    for (gi, group) in groups.iter().enumerate() {
        let mut pop = vec![best.clone()];
        for _ in 1..p {
            let mut g = best.clone();
            for j in group.clone() {
                g[j] = rng.gen::<f64>();
            }
            pop.push(g);
        }
        let mut losses = vec![best_loss];
        losses.extend(evaluate(objective, &template, &pop[1..])?);
        evaluations += p - 1;
        sort_population(&mut pop, &mut losses, p);
        history.push(record(gi, 0, &losses));

        for gen in 1..=cfg.generations {
            let mut offspring = Vec::with_capacity(p);
            for i in 0..p {
                let mutant = mutate_clamp(i, &pop, cfg.mutation_rate, &mut rng)?;
                let mut child = pop[i].clone();
                for j in group.clone() {
                    let alpha: f64 = rng.gen();
                    if alpha > cfg.crossover_rate {
                        child[j] = mutant[j];
                    }
                }
                offspring.push(child);
            }
            let child_losses = evaluate(objective, &template, &offspring)?;
            evaluations += p;
            pop.extend(offspring);
            losses.extend(child_losses);
            sort_population(&mut pop, &mut losses, p);
            history.push(record(gi, gen, &losses));
        }
        best = pop[0].clone();
        best_loss = losses[0];
    }

    let mut recipe = template.with_rho(best)?;
    recipe.seed = cfg.seed;
    recipe.loss = Some(best_loss);
    Ok(SearchOutcome {
        recipe,
        best_loss,
        baseline_loss,
        history,
        evaluations,
    })
}

/// Stable ascending sort by loss, truncated to `keep`. Earlier entries
/// (parents) win ties.
fn sort_population(pop: &mut Vec<Vec<f64>>, losses: &mut Vec<f64>, keep: usize) {
    let mut order: Vec<usize> = (0..pop.len()).collect();
    order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]));
    order.truncate(keep);
    *pop = order.iter().map(|&i| std::mem::take(&mut pop[i])).collect();
    *losses = order.iter().map(|&i| losses[i]).collect();
}

fn record(group: usize, generation: usize, losses: &[f64]) -> GenerationRecord {
    GenerationRecord {
        group,
        generation,
        best_loss: losses[0],
        mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
    }
}
