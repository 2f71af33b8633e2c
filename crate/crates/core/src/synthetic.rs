//! Seeded toy world: clustered sentences with graded similarity.
//!
//! Clusters sit at evenly spaced points on a line. Each topic word also has a
//! position on that line, and a sentence from cluster `c` draws topic words
//! with Gaussian weight around `c`'s position, so neighbouring clusters share
//! vocabulary. Gold similarity between two sentences is
//! `5 * exp(-|p_a - p_b|)` rounded to one decimal.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalsts::{ScoredPair, Split, StsTask};
use crate::objectives::{LabeledNliPair, NliLabel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticWorldSpec {
    pub clusters: usize,
    pub sentences_per_cluster: usize,
    /// Number of topic words; filler words come on top.
    pub vocab_size: usize,
    pub filler_words: usize,
    /// Distance between neighbouring cluster centres in the latent line.
    pub spacing: f64,
    /// Spread of topic-word choice around the cluster centre.
    pub topic_width: f64,
    pub topic_prob: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub train_pairs: usize,
    pub dev_pairs: usize,
    pub test_tasks: usize,
    pub pairs_per_task: usize,
    pub nli_pairs: usize,
    pub seed: u64,
}

impl Default for SyntheticWorldSpec {
    fn default() -> Self {
        SyntheticWorldSpec {
            clusters: 8,
            sentences_per_cluster: 1250,
            vocab_size: 96,
            filler_words: 4,
            spacing: 0.4,
            topic_width: 0.35,
            topic_prob: 0.7,
            min_len: 5,
            max_len: 10,
            train_pairs: 400,
            dev_pairs: 150,
            test_tasks: 5,
            pairs_per_task: 150,
            nli_pairs: 600,
            seed: 7,
        }
    }
}

impl SyntheticWorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clusters < 2 {
            return Err(Error::invalid("a synthetic world needs at least 2 clusters"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::invalid("sentence length range must satisfy 1 <= min_len <= max_len"));
        }
        if self.vocab_size < self.clusters || self.filler_words == 0 {
            return Err(Error::invalid("need at least one topic word per cluster and one filler word"));
        }
        if !(0.0..=1.0).contains(&self.topic_prob) || self.spacing <= 0.0 || self.topic_width <= 0.0 {
            return Err(Error::invalid("topic_prob must lie in [0, 1]; spacing and topic_width must be positive"));
        }
        // Every split needs at least two sentences per cluster to form pairs.
        let (c, tr, dv, te) = split_sizes(self.sentences_per_cluster);
        if c < 2 || tr < 2 || dv < 2 || te < 2 {
            return Err(Error::invalid(format!(
                "sentences_per_cluster = {} is too small to fill four disjoint splits",
                self.sentences_per_cluster
            )));
        }
        if self.test_tasks == 0 || self.pairs_per_task < 2 || self.dev_pairs < 2 || self.train_pairs == 0 {
            return Err(Error::invalid("split sizes must be positive (at least 2 pairs for evaluation tasks)"));
        }
        Ok(())
    }

    /// Latent position of cluster `c`.
    pub fn center(&self, c: usize) -> f64 {
        c as f64 * self.spacing
    }

    /// Gold similarity between sentences of clusters `a` and `b`.
    pub fn gold(&self, a: usize, b: usize) -> f64 {
        let d = (self.center(a) - self.center(b)).abs();
        (50.0 * (-d).exp()).round() / 10.0
    }

    /// NLI label by cluster distance.
    pub fn nli_label(&self, a: usize, b: usize) -> NliLabel {
        match a.abs_diff(b) {
            0 => NliLabel::Entailment,
            1 => NliLabel::Neutral,
            _ => NliLabel::Contradiction,
        }
    }
}

/// Per-cluster sentence counts for (corpus, train, dev, test).
fn split_sizes(n: usize) -> (usize, usize, usize, usize) {
    let train = n / 5;
    let dev = n / 10;
    let test = n / 5;
    (n - train - dev - test, train, dev, test)
}

/// Everything a desk-scale experiment consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub spec: SyntheticWorldSpec,
    pub corpus: Vec<String>,
    pub nli: Vec<LabeledNliPair>,
    pub sts_train: Vec<ScoredPair>,
    pub sts_dev: StsTask,
    pub test_tasks: Vec<StsTask>,
    /// Every generated sentence with its cluster, in generation order.
    pub assignments: Vec<(String, usize)>,
}

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ne", "ru", "so", "ti", "va", "be", "do", "fu", "ga", "hi", "jo", "pe", "zu",
];

fn make_word(i: usize, prefix: &str) -> String {
    let mut w = prefix.to_string();
    let mut n = i;
    loop {
        w.push_str(SYLLABLES[n % SYLLABLES.len()]);
        n /= SYLLABLES.len();
        if n == 0 {
            break;
        }
    }
    w
}

struct Generator<'a> {
    spec: &'a SyntheticWorldSpec,
    rng: ChaCha8Rng,
    topic_words: Vec<String>,
    filler: Vec<String>,
    topic_dists: Vec<WeightedIndex<f64>>,
}

impl Generator<'_> {
    fn sentence(&mut self, cluster: usize) -> String {
        let len = self.rng.random_range(self.spec.min_len..=self.spec.max_len);
        let mut words = Vec::with_capacity(len);
        for _ in 0..len {
            if self.rng.random_bool(self.spec.topic_prob) {
                let w = self.topic_dists[cluster].sample(&mut self.rng);
                words.push(self.topic_words[w].as_str());
            } else {
                let w = self.rng.random_range(0..self.filler.len());
                words.push(self.filler[w].as_str());
            }
        }
        words.join(" ")
    }

    /// Pair of clusters at a uniformly drawn distance.
    fn cluster_pair(&mut self) -> (usize, usize) {
        let c = self.spec.clusters;
        let d = self.rng.random_range(0..c);
        let a = self.rng.random_range(0..c - d);
        if self.rng.random_bool(0.5) {
            (a, a + d)
        } else {
            (a + d, a)
        }
    }

    fn pick<'s>(&mut self, pool: &'s [Vec<String>], c: usize) -> &'s str {
        &pool[c][self.rng.random_range(0..pool[c].len())]
    }

    fn sts_pairs(&mut self, pool: &[Vec<String>], n: usize) -> Vec<ScoredPair> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let (a, b) = self.cluster_pair();
            let s1 = self.pick(pool, a).to_string();
            let s2 = self.pick(pool, b).to_string();
            if s1 == s2 {
                continue;
            }
            out.push(ScoredPair::new(s1, s2, self.spec.gold(a, b)).expect("rule keeps gold in range"));
        }
        out
    }
}

/// Generates the world in memory. Deterministic in `spec`.
pub fn generate_world(spec: &SyntheticWorldSpec) -> Result<SyntheticWorld> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let span = spec.center(spec.clusters - 1);
    let topic_words: Vec<String> = (0..spec.vocab_size).map(|i| make_word(i, "")).collect();
    let filler: Vec<String> = (0..spec.filler_words).map(|i| make_word(i, "x")).collect();
    let positions: Vec<f64> = (0..spec.vocab_size)
        .map(|i| span * i as f64 / (spec.vocab_size - 1).max(1) as f64)
        .collect();
    let topic_dists = (0..spec.clusters)
        .map(|c| {
            let p = spec.center(c);
            let w: Vec<f64> = positions
                .iter()
                .map(|q| (-(q - p) * (q - p) / (2.0 * spec.topic_width * spec.topic_width)).exp() + 1e-12)
                .collect();
            WeightedIndex::new(w).expect("weights are positive")
        })
        .collect();
    let mut gen = Generator {
        spec,
        rng: ChaCha8Rng::seed_from_u64(rng.random()),
        topic_words,
        filler,
        topic_dists,
    };

    let mut seen = HashSet::new();
    let mut by_cluster: Vec<Vec<String>> = vec![Vec::new(); spec.clusters];
    let mut assignments = Vec::new();
    for (c, sentences) in by_cluster.iter_mut().enumerate() {
        let mut attempts = 0;
        while sentences.len() < spec.sentences_per_cluster {
            attempts += 1;
            if attempts > 50 * spec.sentences_per_cluster {
                return Err(Error::invalid(format!(
                    "could not generate {} distinct sentences for cluster {c}; widen the vocabulary or lengths",
                    spec.sentences_per_cluster
                )));
            }
            let s = gen.sentence(c);
            if seen.insert(s.clone()) {
                assignments.push((s.clone(), c));
                sentences.push(s);
            }
        }
    }

    let (n_corpus, n_train, n_dev, _) = split_sizes(spec.sentences_per_cluster);
    let mut corpus_pool = Vec::new();
    let mut train_pool = Vec::new();
    let mut dev_pool = Vec::new();
    let mut test_pool = Vec::new();
    for sentences in &by_cluster {
        let (corpus, rest) = sentences.split_at(n_corpus);
        let (train, rest) = rest.split_at(n_train);
        let (dev, test) = rest.split_at(n_dev);
        corpus_pool.push(corpus.to_vec());
        train_pool.push(train.to_vec());
        dev_pool.push(dev.to_vec());
        test_pool.push(test.to_vec());
    }

    let mut corpus: Vec<String> = corpus_pool.iter().flatten().cloned().collect();
    corpus.shuffle(&mut gen.rng);

    let mut nli = Vec::with_capacity(spec.nli_pairs);
    for i in 0..spec.nli_pairs {
        // Cycle through the three labels so classes stay balanced.
        let (a, b) = loop {
            let (a, b) = gen.cluster_pair();
            let want = i % 3;
            let ok = match a.abs_diff(b) {
                0 => want == 0,
                1 => want == 1,
                _ => want == 2,
            };
            if ok {
                break (a, b);
            }
        };
        let premise = gen.pick(&corpus_pool, a).to_string();
        let hypothesis = gen.pick(&corpus_pool, b).to_string();
        nli.push(LabeledNliPair {
            premise,
            hypothesis,
            label: spec.nli_label(a, b),
        });
    }

    let sts_train = gen.sts_pairs(&train_pool, spec.train_pairs);
    let sts_dev = StsTask::new("sts-dev", gen.sts_pairs(&dev_pool, spec.dev_pairs), Split::Dev)?;
    let mut test_tasks = Vec::with_capacity(spec.test_tasks);
    for t in 0..spec.test_tasks {
        let pairs = gen.sts_pairs(&test_pool, spec.pairs_per_task);
        test_tasks.push(StsTask::new(format!("synth-{}", t + 1), pairs, Split::Test)?);
    }

    Ok(SyntheticWorld {
        spec: spec.clone(),
        corpus,
        nli,
        sts_train,
        sts_dev,
        test_tasks,
        assignments,
    })
}

/// File locations of a written world.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldPaths {
    pub corpus: PathBuf,
    pub nli: PathBuf,
    pub sts_train: PathBuf,
    pub sts_dev: PathBuf,
    pub tasks_dir: PathBuf,
    pub clusters: PathBuf,
}

impl WorldPaths {
    pub fn under(dir: &Path) -> Self {
        WorldPaths {
            corpus: dir.join("corpus.txt"),
            nli: dir.join("nli.tsv"),
            sts_train: dir.join("sts-train.tsv"),
            sts_dev: dir.join("sts-dev.tsv"),
            tasks_dir: dir.join("tasks"),
            clusters: dir.join("clusters.tsv"),
        }
    }
}

fn sts_text(pairs: &[ScoredPair]) -> String {
    let mut s = String::new();
    for p in pairs {
        let _ = writeln!(s, "{}\t{}\t{:.1}", p.sentence_1, p.sentence_2, p.gold);
    }
    s
}

impl SyntheticWorld {
    /// Writes the world under `dir`, replacing earlier files with the same names.
    pub fn write(&self, dir: &Path) -> Result<WorldPaths> {
        let paths = WorldPaths::under(dir);
        std::fs::create_dir_all(&paths.tasks_dir)?;
        std::fs::write(&paths.corpus, self.corpus.join("\n") + "\n")?;
        let mut nli = String::new();
        for p in &self.nli {
            let _ = writeln!(nli, "{}\t{}\t{}", p.premise, p.hypothesis, p.label);
        }
        std::fs::write(&paths.nli, nli)?;
        std::fs::write(&paths.sts_train, sts_text(&self.sts_train))?;
        std::fs::write(&paths.sts_dev, sts_text(&self.sts_dev.pairs))?;
        for t in &self.test_tasks {
            std::fs::write(paths.tasks_dir.join(format!("{}.tsv", t.name)), sts_text(&t.pairs))?;
        }
        let mut clusters = String::new();
        for (s, c) in &self.assignments {
            let _ = writeln!(clusters, "{s}\t{c}");
        }
        std::fs::write(&paths.clusters, clusters)?;
        Ok(paths)
    }

    pub fn cluster_of(&self, sentence: &str) -> Option<usize> {
        self.assignments.iter().find(|(s, _)| s == sentence).map(|(_, c)| *c)
    }
}

/// `generate_world` followed by `write`.
pub fn gen_synthetic_world(spec: &SyntheticWorldSpec, dir: &Path) -> Result<WorldPaths> {
    generate_world(spec)?.write(dir)
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;

    fn small() -> SyntheticWorldSpec {
        SyntheticWorldSpec {
            sentences_per_cluster: 40,
            train_pairs: 50,
            dev_pairs: 30,
            pairs_per_task: 30,
            nli_pairs: 30,
            ..SyntheticWorldSpec::default()
        }
    }

    #[test]
    fn gold_rule_examples() {
        let s = SyntheticWorldSpec::default();
        assert_eq!(s.gold(3, 3), 5.0);
        assert!(s.gold(2, 3) >= 3.0);
        assert!(s.gold(0, s.clusters - 1) <= 1.0);
    }

    #[test]
    fn golds_follow_cluster_rule() {
        let w = generate_world(&small()).unwrap();
        let map: HashMap<&str, usize> = w.assignments.iter().map(|(s, c)| (s.as_str(), *c)).collect();
        for t in w.test_tasks.iter().chain([&w.sts_dev]) {
            for p in &t.pairs {
                let g = w.spec.gold(map[p.sentence_1.as_str()], map[p.sentence_2.as_str()]);
                assert_eq!(p.gold, g);
            }
        }
        for p in &w.nli {
            let l = w.spec.nli_label(map[p.premise.as_str()], map[p.hypothesis.as_str()]);
            assert_eq!(p.label, l);
        }
    }

    #[test]
    fn splits_are_disjoint() {
        let w = generate_world(&small()).unwrap();
        let of_pairs = |pairs: &[ScoredPair]| -> HashSet<String> {
            pairs.iter().flat_map(|p| [p.sentence_1.clone(), p.sentence_2.clone()]).collect()
        };
        let corpus: HashSet<String> = w.corpus.iter().cloned().collect();
        let train = of_pairs(&w.sts_train);
        let dev = of_pairs(&w.sts_dev.pairs);
        let test: HashSet<String> = w.test_tasks.iter().flat_map(|t| of_pairs(&t.pairs)).collect();
        assert!(corpus.is_disjoint(&train) && corpus.is_disjoint(&dev) && corpus.is_disjoint(&test));
        assert!(train.is_disjoint(&dev) && train.is_disjoint(&test) && dev.is_disjoint(&test));
    }

    #[test]
    fn regeneration_is_identical() {
        assert_eq!(generate_world(&small()).unwrap(), generate_world(&small()).unwrap());
    }

    #[test]
    fn rejects_single_cluster() {
        let spec = SyntheticWorldSpec {
            clusters: 1,
            ..small()
        };
        assert!(generate_world(&spec).is_err());
    }
}
