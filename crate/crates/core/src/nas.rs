//! Latency-constrained architecture search over block slots.
//!
//! Each slot picks one candidate block. The search is regularized (aging)
//! evolution: tournaments of `sample` members from the current population
//! pick a parent, the child differs in exactly one slot, and a generation
//! replaces the whole population with `population` children. Children over
//! the proxy-latency budget are rejected before evaluation.
//!
//! Ranking everywhere is: higher fitness, then lower proxy latency, then the
//! lexicographically smaller genome.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::blocks::BlockSpec;
use crate::costmodel::{network_report, skeleton_cost, Coefficients, CostReport};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::network::{Network, NetworkSpec, StageLayout, STAGES};
use crate::rng::{derive_seed, seeded, Rng};
use crate::train::{evaluate, train_steps, OptimConfig};

pub const KERNELS: [usize; 3] = [3, 5, 7];
pub const EXPANSIONS: [usize; 2] = [2, 4];

/// `QuadraBlock(k, R)` for every kernel and expansion, then `Identity`.
pub fn default_candidates() -> Vec<BlockSpec> {
    let mut c: Vec<BlockSpec> = KERNELS
        .iter()
        .flat_map(|&k| EXPANSIONS.iter().map(move |&r| BlockSpec::quadra(k, r)))
        .collect();
    c.push(BlockSpec::Identity);
    c
}

/// One candidate index per slot, slots ordered stage-major.
pub type Genome = Vec<usize>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    /// Supplies widths, input size and classes; its stage layouts are replaced.
    pub base: NetworkSpec,
    pub slots: [usize; STAGES],
    pub candidates: Vec<BlockSpec>,
    pub coefficients: Coefficients,
}

impl SearchSpace {
    pub fn new(base: NetworkSpec, slots: [usize; STAGES], candidates: Vec<BlockSpec>) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::InvalidArgument(String::from("candidate list is empty")));
        }
        if slots.iter().sum::<usize>() == 0 {
            return Err(Error::InvalidArgument(String::from("search space has no slots")));
        }
        for c in &candidates {
            c.validate()?;
        }
        let space = Self {
            base,
            slots,
            candidates,
            coefficients: Coefficients::default(),
        };
        space.base.validate()?;
        Ok(space)
    }

    pub fn num_slots(&self) -> usize {
        self.slots.iter().sum()
    }

    /// 1-based `(stage, slot)` of flat slot `i`.
    fn position(&self, mut i: usize) -> (usize, usize) {
        for (s, &n) in self.slots.iter().enumerate() {
            if i < n {
                return (s + 1, i + 1);
            }
            i -= n;
        }
        unreachable!("slot index out of range")
    }

    fn check(&self, genome: &[usize]) -> Result<()> {
        if genome.len() != self.num_slots() || genome.iter().any(|&g| g >= self.candidates.len()) {
            return Err(Error::ParseGenome(format!(
                "{genome:?} does not fit {} slots x {} candidates",
                self.num_slots(),
                self.candidates.len()
            )));
        }
        Ok(())
    }

    pub fn spec_for(&self, genome: &[usize]) -> Result<NetworkSpec> {
        self.check(genome)?;
        let mut spec = self.base.clone();
        let mut genes = genome.iter();
        spec.stages = self
            .slots
            .iter()
            .map(|&n| StageLayout::Slots {
                blocks: genes.by_ref().take(n).map(|&g| self.candidates[g]).collect(),
            })
            .collect();
        Ok(spec)
    }

    pub fn cost(&self, genome: &[usize]) -> Result<CostReport> {
        network_report(&self.spec_for(genome)?, 1, self.coefficients)
    }

    pub fn skeleton_cost(&self) -> Result<f64> {
        skeleton_cost(&self.base, 1, self.coefficients)
    }

    pub fn identity_genome(&self) -> Option<Genome> {
        let id = self.candidates.iter().position(BlockSpec::is_identity)?;
        Some(vec![id; self.num_slots()])
    }

    /// `s<stage>.<slot>=Q<k>x<R>` or `=ID` per slot, comma separated.
    pub fn format_genome(&self, genome: &[usize]) -> Result<String> {
        self.check(genome)?;
        let mut parts = Vec::with_capacity(genome.len());
        for (i, &g) in genome.iter().enumerate() {
            let (s, j) = self.position(i);
            let name = match self.candidates[g] {
                BlockSpec::Quadra { kernel, expansion, .. } => format!("Q{kernel}x{expansion}"),
                BlockSpec::Identity => String::from("ID"),
                other => return Err(Error::ParseGenome(format!("{other:?} has no genome token"))),
            };
            parts.push(format!("s{s}.{j}={name}"));
        }
        Ok(parts.join(","))
    }

    pub fn parse_genome(&self, text: &str) -> Result<Genome> {
        let bad = |m: String| Error::ParseGenome(m);
        let mut genome = vec![usize::MAX; self.num_slots()];
        for part in text.split(',').map(str::trim) {
            let (pos, token) = part.split_once('=').ok_or_else(|| bad(format!("`{part}` lacks `=`")))?;
            let (s, j) = pos
                .strip_prefix('s')
                .and_then(|p| p.split_once('.'))
                .and_then(|(s, j)| Some((s.parse::<usize>().ok()?, j.parse::<usize>().ok()?)))
                .ok_or_else(|| bad(format!("`{pos}` is not s<stage>.<slot>")))?;
            if s == 0 || s > STAGES || j == 0 || j > self.slots[s - 1] {
                return Err(bad(format!("slot {pos} is outside the space")));
            }
            let flat = self.slots[..s - 1].iter().sum::<usize>() + j - 1;
            let block = if token == "ID" {
                BlockSpec::Identity
            } else {
                token
                    .strip_prefix('Q')
                    .and_then(|t| t.split_once('x'))
                    .and_then(|(k, r)| Some(BlockSpec::quadra(k.parse().ok()?, r.parse().ok()?)))
                    .ok_or_else(|| bad(format!("`{token}` is not Q<k>x<R> or ID")))?
            };
            let idx = self
                .candidates
                .iter()
                .position(|c| *c == block)
                .ok_or_else(|| bad(format!("`{token}` is not a candidate")))?;
            if genome[flat] != usize::MAX {
                return Err(bad(format!("slot {pos} given twice")));
            }
            genome[flat] = idx;
        }
        if genome.contains(&usize::MAX) {
            return Err(bad(format!("`{text}` does not cover every slot")));
        }
        Ok(genome)
    }

    /// All genomes in lexicographic order.
    pub fn enumerate(&self) -> Vec<Genome> {
        let (n, k) = (self.num_slots(), self.candidates.len());
        let total = k.pow(n as u32);
        (0..total)
            .map(|mut x| {
                let mut g = vec![0; n];
                for slot in (0..n).rev() {
                    g[slot] = x % k;
                    x /= k;
                }
                g
            })
            .collect()
    }

    fn random_genome(&self, rng: &mut Rng) -> Genome {
        (0..self.num_slots()).map(|_| rng.random_range(0..self.candidates.len())).collect()
    }
}

/// Changes exactly one slot, drawing uniformly among that slot's other candidates.
pub fn mutate(space: &SearchSpace, genome: &[usize], seed: u64) -> Result<Genome> {
    mutate_with(space, genome, &mut seeded(seed))
}

fn mutate_with(space: &SearchSpace, genome: &[usize], rng: &mut Rng) -> Result<Genome> {
    space.check(genome)?;
    let k = space.candidates.len();
    if k < 2 {
        return Err(Error::MutationImpossible);
    }
    let slot = rng.random_range(0..genome.len());
    let mut pick = rng.random_range(0..k - 1);
    if pick >= genome[slot] {
        pick += 1;
    }
    let mut child = genome.to_vec();
    child[slot] = pick;
    Ok(child)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub genome: Genome,
    pub genome_string: String,
    pub fitness: f64,
    pub cost: CostReport,
    pub feasible: bool,
}

/// Fitness in `[0, 1]` of a genome. Implementations must be deterministic.
pub trait Evaluator {
    fn evaluate(&mut self, space: &SearchSpace, genome: &[usize]) -> Result<f64>;

    /// Evaluates several genomes; results in input order. Override to run them concurrently.
    fn evaluate_many(&mut self, space: &SearchSpace, genomes: &[Genome]) -> Result<Vec<f64>> {
        genomes.iter().map(|g| self.evaluate(space, g)).collect()
    }
}

impl<F: FnMut(&SearchSpace, &[usize]) -> Result<f64>> Evaluator for F {
    fn evaluate(&mut self, space: &SearchSpace, genome: &[usize]) -> Result<f64> {
        self(space, genome)
    }
}

/// Memoizes fitness per genome; misses are forwarded in one batch.
#[derive(Debug, Clone)]
pub struct CachedEvaluator<E> {
    pub inner: E,
    cache: BTreeMap<Genome, f64>,
    misses: usize,
}

impl<E: Evaluator> CachedEvaluator<E> {
    pub fn new(inner: E) -> Self {
        Self {
            inner,
            cache: BTreeMap::new(),
            misses: 0,
        }
    }

    /// Number of genomes actually forwarded to the inner evaluator.
    pub fn misses(&self) -> usize {
        self.misses
    }
}

impl<E: Evaluator> Evaluator for CachedEvaluator<E> {
    fn evaluate(&mut self, space: &SearchSpace, genome: &[usize]) -> Result<f64> {
        Ok(self.evaluate_many(space, &[genome.to_vec()])?[0])
    }

    fn evaluate_many(&mut self, space: &SearchSpace, genomes: &[Genome]) -> Result<Vec<f64>> {
        let mut todo: Vec<Genome> = genomes.iter().filter(|g| !self.cache.contains_key(*g)).cloned().collect();
        todo.sort();
        todo.dedup();
        if !todo.is_empty() {
            let f = self.inner.evaluate_many(space, &todo)?;
            self.misses += todo.len();
            for (g, v) in todo.into_iter().zip(f) {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvalidArgument(format!("fitness {v} outside [0, 1]")));
                }
                self.cache.insert(g, v);
            }
        }
        Ok(genomes.iter().map(|g| self.cache[g]).collect())
    }
}

/// Trains the candidate network for a fixed number of steps and reports
/// held-out accuracy.
#[derive(Debug, Clone)]
pub struct TrainEvaluator {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub config: OptimConfig,
    pub steps: usize,
}

impl TrainEvaluator {
    pub fn fitness(&self, space: &SearchSpace, genome: &[usize]) -> Result<f64> {
        let mut net = Network::build(space.spec_for(genome)?, self.config.seed)?;
        train_steps(&mut net, &self.train, &self.config, self.steps)?;
        evaluate(&net, &self.val, self.config.batch_size)
    }
}

impl Evaluator for TrainEvaluator {
    fn evaluate(&mut self, space: &SearchSpace, genome: &[usize]) -> Result<f64> {
        self.fitness(space, genome)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub population: usize,
    pub sample: usize,
    pub generations: usize,
    pub seed: u64,
    /// Draws allowed per population member or child before falling back.
    pub max_tries: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            population: 16,
            sample: 4,
            generations: 30,
            seed: 0,
            max_tries: 64,
        }
    }
}

/// Ranking key shared by search and enumeration.
fn better(a: &Candidate, b: &Candidate) -> Ordering {
    b.fitness
        .total_cmp(&a.fitness)
        .then(a.cost.proxy_latency.total_cmp(&b.cost.proxy_latency))
        .then_with(|| a.genome.cmp(&b.genome))
}

struct Costs<'a> {
    space: &'a SearchSpace,
    budget: f64,
    cache: BTreeMap<Genome, CostReport>,
}

impl Costs<'_> {
    fn get(&mut self, g: &[usize]) -> Result<&CostReport> {
        if !self.cache.contains_key(g) {
            let c = self.space.cost(g)?;
            self.cache.insert(g.to_vec(), c);
        }
        Ok(&self.cache[g])
    }

    fn feasible(&mut self, g: &[usize]) -> Result<bool> {
        let b = self.budget;
        Ok(self.get(g)?.proxy_latency <= b)
    }

    fn candidate(&mut self, space: &SearchSpace, g: Genome, fitness: f64) -> Result<Candidate> {
        let cost = self.get(&g)?.clone();
        Ok(Candidate {
            genome_string: space.format_genome(&g)?,
            feasible: cost.proxy_latency <= self.budget,
            genome: g,
            fitness,
            cost,
        })
    }
}

fn check_budget(space: &SearchSpace, budget: f64) -> Result<()> {
    let skeleton = space.skeleton_cost()?;
    if budget.is_nan() || budget < skeleton {
        return Err(Error::Infeasible {
            budget,
            skeleton_cost: skeleton,
        });
    }
    Ok(())
}

/// Best feasible genome found by regularized evolution.
pub fn search(space: &SearchSpace, budget: f64, config: &SearchConfig, evaluator: &mut impl Evaluator) -> Result<Candidate> {
    check_budget(space, budget)?;
    if config.population == 0 || config.sample == 0 || config.sample > config.population {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= sample <= population, got sample={} population={}",
            config.sample, config.population
        )));
    }
    let fallback = space.identity_genome();
    let mut costs = Costs {
        space,
        budget,
        cache: BTreeMap::new(),
    };
    let mut rng = seeded(derive_seed(config.seed, 0x6e6173));

    let mut first = Vec::with_capacity(config.population);
    for _ in 0..config.population {
        let mut pick = None;
        for _ in 0..config.max_tries.max(1) {
            let g = space.random_genome(&mut rng);
            if costs.feasible(&g)? {
                pick = Some(g);
                break;
            }
        }
        match pick.or_else(|| fallback.clone()) {
            Some(g) => first.push(g),
            None => return Err(Error::InvalidArgument(String::from("no feasible genome found and no identity candidate"))),
        }
    }
    let fit = evaluator.evaluate_many(space, &first)?;
    let mut population = Vec::with_capacity(config.population);
    for (g, f) in first.into_iter().zip(fit) {
        population.push(costs.candidate(space, g, f)?);
    }
    let mut best = population.iter().min_by(|a, b| better(a, b)).cloned().expect("population is non-empty");

    for _ in 0..config.generations {
        let mut children = Vec::with_capacity(config.population);
        for _ in 0..config.population {
            let parent = (0..config.sample)
                .map(|_| &population[rng.random_range(0..population.len())])
                .min_by(|a, b| better(a, b))
                .expect("sample is non-empty");
            let mut child = None;
            for _ in 0..config.max_tries.max(1) {
                let g = mutate_with(space, &parent.genome, &mut rng)?;
                if costs.feasible(&g)? {
                    child = Some(g);
                    break;
                }
            }
            // Every mutation of this parent was over budget: it survives unchanged.
            children.push(child.unwrap_or_else(|| parent.genome.clone()));
        }
        let fit = evaluator.evaluate_many(space, &children)?;
        population.clear();
        for (g, f) in children.into_iter().zip(fit) {
            population.push(costs.candidate(space, g, f)?);
        }
        for c in &population {
            if better(c, &best) == Ordering::Less {
                best = c.clone();
            }
        }
    }
    debug_assert!(best.feasible);
    Ok(best)
}

/// Best feasible genome by brute force.
pub fn exhaustive(space: &SearchSpace, budget: f64, evaluator: &mut impl Evaluator) -> Result<Candidate> {
    check_budget(space, budget)?;
    let mut costs = Costs {
        space,
        budget,
        cache: BTreeMap::new(),
    };
    let mut feasible = Vec::new();
    for g in space.enumerate() {
        if costs.feasible(&g)? {
            feasible.push(g);
        }
    }
    let fit = evaluator.evaluate_many(space, &feasible)?;
    let mut best: Option<Candidate> = None;
    for (g, f) in feasible.into_iter().zip(fit) {
        let c = costs.candidate(space, g, f)?;
        if best.as_ref().is_none_or(|b| better(&c, b) == Ordering::Less) {
            best = Some(c);
        }
    }
    best.ok_or_else(|| Error::InvalidArgument(String::from("no feasible genome")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_interaction_images;
    use proptest::prelude::*;

    fn base() -> NetworkSpec {
        NetworkSpec {
            in_channels: 1,
            ..NetworkSpec::uniform(4, [0, 0, 0, 0], BlockSpec::Identity, 4, 32)
        }
    }

    fn space(slots: [usize; 4]) -> SearchSpace {
        SearchSpace::new(base(), slots, default_candidates()).unwrap()
    }

    /// Deterministic pseudo-fitness from the genome alone.
    fn hashed(_: &SearchSpace, g: &[usize]) -> Result<f64> {
        let mut h = 0u64;
        for &x in g {
            h = derive_seed(h, x as u64 + 1);
        }
        Ok((h % 1000) as f64 / 1000.0)
    }

    #[test]
    fn candidate_set() {
        let c = default_candidates();
        assert_eq!(c.len(), 7);
        assert_eq!(c[0], BlockSpec::quadra(3, 2));
        assert_eq!(c[5], BlockSpec::quadra(7, 4));
        assert!(c[6].is_identity());
    }

    #[test]
    fn genome_strings_round_trip() {
        let s = space([1, 0, 2, 0]);
        let g = vec![5, 6, 0];
        let text = s.format_genome(&g).unwrap();
        assert_eq!(text, "s1.1=Q7x4,s3.1=ID,s3.2=Q3x2");
        assert_eq!(s.parse_genome(&text).unwrap(), g);
        assert_eq!(s.parse_genome("s3.2=Q3x2, s1.1=Q7x4,s3.1=ID").unwrap(), g);
        for bad in ["s1.1=Q7x4", "s1.1=Q9x4,s3.1=ID,s3.2=ID", "s2.1=ID,s3.1=ID,s3.2=ID", "x", "s1.1=ID,s1.1=ID,s3.1=ID,s3.2=ID"] {
            assert!(matches!(s.parse_genome(bad), Err(Error::ParseGenome(_))), "{bad}");
        }
    }

    #[test]
    fn enumeration_is_complete_and_sorted() {
        let all = space([0, 1, 1, 0]).enumerate();
        assert_eq!(all.len(), 49);
        assert!(all.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn mutation_contract() {
        let s = space([1, 1, 1, 0]);
        let g = vec![0, 3, 6];
        for seed in 0..200 {
            let c = mutate(&s, &g, seed).unwrap();
            assert_eq!(c.iter().zip(&g).filter(|(a, b)| a != b).count(), 1);
            assert_eq!(c, mutate(&s, &g, seed).unwrap());
        }
        let single = SearchSpace::new(base(), [1, 0, 0, 0], vec![BlockSpec::Identity]).unwrap();
        assert_eq!(mutate(&single, &[0], 0), Err(Error::MutationImpossible));
    }

    #[test]
    fn mutation_is_uniform_over_other_candidates() {
        let s = space([1, 0, 0, 0]);
        let mut counts = [0usize; 7];
        for seed in 0..6000 {
            counts[mutate(&s, &[2], seed).unwrap()[0]] += 1;
        }
        assert_eq!(counts[2], 0);
        for (i, &n) in counts.iter().enumerate().filter(|(i, _)| *i != 2) {
            assert!((n as f64 - 1000.0).abs() < 150.0, "candidate {i}: {n}");
        }
    }

    #[test]
    fn budget_below_skeleton_is_infeasible() {
        let s = space([1, 1, 0, 0]);
        let sk = s.skeleton_cost().unwrap();
        let err = search(&s, sk - 1.0, &SearchConfig::default(), &mut hashed).unwrap_err();
        assert_eq!(err, Error::Infeasible { budget: sk - 1.0, skeleton_cost: sk });
        assert!(exhaustive(&s, sk - 1.0, &mut hashed).is_err());
    }

    #[test]
    fn budget_at_skeleton_returns_identity() {
        let s = space([1, 1, 0, 0]);
        let sk = s.skeleton_cost().unwrap();
        let c = search(&s, sk, &SearchConfig::default(), &mut hashed).unwrap();
        assert_eq!(c.genome, s.identity_genome().unwrap());
        assert!(c.feasible);
    }

    #[test]
    fn unbounded_one_slot_matches_enumeration() {
        let s = space([0, 1, 0, 0]);
        let best = exhaustive(&s, f64::INFINITY, &mut hashed).unwrap();
        let found = search(&s, f64::INFINITY, &SearchConfig { generations: 5, ..SearchConfig::default() }, &mut hashed).unwrap();
        assert_eq!(found.genome, best.genome);
    }

    #[test]
    fn search_finds_two_slot_optimum_under_budget() {
        let s = space([1, 1, 0, 0]);
        let costs: Vec<f64> = s.enumerate().iter().map(|g| s.cost(g).unwrap().proxy_latency).collect();
        let mut sorted = costs.clone();
        sorted.sort_by(f64::total_cmp);
        let budget = sorted[sorted.len() / 2];
        for seed in 0..5 {
            let best = exhaustive(&s, budget, &mut hashed).unwrap();
            let cfg = SearchConfig { generations: 50, seed, ..SearchConfig::default() };
            let found = search(&s, budget, &cfg, &mut hashed).unwrap();
            assert_eq!(found, best);
            assert!(found.cost.proxy_latency <= budget);
        }
    }

    #[test]
    fn tighter_budget_never_helps() {
        let s = space([1, 1, 0, 0]);
        let sk = s.skeleton_cost().unwrap();
        let full = s.cost(&[5, 5]).unwrap().proxy_latency;
        let (b1, b2) = (sk + 0.3 * (full - sk), sk + 0.6 * (full - sk));
        let c1 = exhaustive(&s, b1, &mut hashed).unwrap();
        let c2 = exhaustive(&s, b2, &mut hashed).unwrap();
        assert!(c1.cost.proxy_latency <= b1);
        assert!(c1.fitness <= c2.fitness);
    }

    #[test]
    fn search_is_deterministic() {
        let s = space([1, 1, 1, 0]);
        let cfg = SearchConfig { generations: 3, seed: 9, ..SearchConfig::default() };
        let a = search(&s, f64::INFINITY, &cfg, &mut CachedEvaluator::new(hashed)).unwrap();
        let b = search(&s, f64::INFINITY, &cfg, &mut CachedEvaluator::new(hashed)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cache_returns_identical_fitness() {
        let s = space([1, 0, 0, 0]);
        let mut calls = 0;
        let mut ev = CachedEvaluator::new(|sp: &SearchSpace, g: &[usize]| {
            calls += 1;
            hashed(sp, g)
        });
        let a = ev.evaluate(&s, &[3]).unwrap();
        let b = ev.evaluate(&s, &[3]).unwrap();
        let many = ev.evaluate_many(&s, &[vec![3], vec![4], vec![4]]).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(many[0].to_bits(), a.to_bits());
        assert_eq!(ev.misses(), 2);
        drop(ev);
        assert_eq!(calls, 2);
    }

    #[test]
    fn untrained_fitness_is_chance() {
        let data = gen_interaction_images(400, 32, 4, 3).unwrap();
        let (train, val) = data.split_by_stride(2).unwrap();
        let s = space([1, 0, 0, 0]);
        let ev = TrainEvaluator { train, val, config: OptimConfig::default(), steps: 0 };
        for g in 0..7 {
            let f = ev.fitness(&s, &[g]).unwrap();
            assert!((f - 0.25).abs() <= 0.1, "{g}: {f}");
        }
    }

    proptest! {
        #[test]
        fn returned_candidate_is_feasible(seed in 0u64..1000, frac in 0.0f64..1.0) {
            let s = space([1, 1, 0, 0]);
            let sk = s.skeleton_cost().unwrap();
            let full = s.cost(&[5, 5]).unwrap().proxy_latency;
            let budget = sk + frac * (full - sk);
            let cfg = SearchConfig { population: 6, sample: 2, generations: 3, seed, ..SearchConfig::default() };
            let c = search(&s, budget, &cfg, &mut hashed).unwrap();
            prop_assert!(c.feasible && c.cost.proxy_latency <= budget);
        }
    }
}
