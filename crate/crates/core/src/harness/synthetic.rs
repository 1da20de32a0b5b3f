//! Small generated corpora that stand in for a labeled finetuning dataset and
//! a mostly off-topic public seed pool.
//!
//! Every topic owns a keyword list (`sports0`, `sports1`, ...). Documents mix
//! topic keywords with Zipf-distributed filler words. Classification topics
//! are the true classes; distractor topics fill most of the seed pool. For
//! the next-token flavour each topic is a sparse Markov chain over its
//! keywords, so documents are predictable only under the right topic.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::DocumentSet;
use crate::error::{Error, Result};
use crate::model::Task;

const CLASS_TOPICS: [&str; 8] = [
    "sports", "business", "science", "world", "health", "politics", "arts", "weather",
];
const DISTRACTOR_TOPICS: [&str; 8] = [
    "cooking", "travel", "music", "fashion", "gaming", "garden", "pets", "cars",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub task: Task,
    pub num_classes: usize,
    /// Index into the topic table of the first class; lets two toy tasks use
    /// disjoint class topics.
    pub class_offset: usize,
    pub keywords_per_topic: usize,
    pub filler_words: usize,
    pub distractor_topics: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub pool: usize,
    /// Share of seed-pool documents drawn from the class topics.
    pub on_topic_fraction: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a token of a labeled document is a topic keyword.
    pub keyword_rate: f64,
    /// Keyword rate of on-topic seed-pool documents.
    pub pool_keyword_rate: f64,
    /// Chance that a distractor token is a keyword from a random class topic.
    pub cross_talk: f64,
    /// Successors per keyword in next-token chains.
    pub branching: usize,
    /// Share of seed-pool documents that are lightly mutated copies of a few
    /// on-topic templates (boilerplate, mirrored pages).
    pub duplicate_fraction: f64,
    pub duplicate_templates: usize,
    /// Per-token chance that a near-duplicate deviates from its template.
    pub duplicate_noise: f64,
    /// Keyword rate of templates, which always have `max_len` tokens.
    pub duplicate_keyword_rate: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            task: Task::Classification,
            num_classes: 4,
            class_offset: 0,
            keywords_per_topic: 100,
            filler_words: 400,
            distractor_topics: 6,
            train: 2000,
            validation: 500,
            test: 1000,
            pool: 10_000,
            on_topic_fraction: 0.15,
            min_len: 12,
            max_len: 40,
            keyword_rate: 0.15,
            pool_keyword_rate: 0.15,
            cross_talk: 0.01,
            branching: 3,
            duplicate_fraction: 0.0,
            duplicate_templates: 4,
            duplicate_noise: 0.1,
            duplicate_keyword_rate: 1.0,
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic: {m}")));
        if self.num_classes < 2 || self.class_offset + self.num_classes > CLASS_TOPICS.len() {
            return bad("num_classes and class_offset must fit the topic table");
        }
        if self.distractor_topics > DISTRACTOR_TOPICS.len() {
            return bad("too many distractor topics");
        }
        if self.keywords_per_topic == 0 || self.filler_words == 0 {
            return bad("keyword and filler vocabularies must be non-empty");
        }
        if self.min_len < 2 || self.min_len > self.max_len {
            return bad("document lengths need 2 <= min_len <= max_len");
        }
        for (name, p) in [
            ("on_topic_fraction", self.on_topic_fraction),
            ("keyword_rate", self.keyword_rate),
            ("pool_keyword_rate", self.pool_keyword_rate),
            ("cross_talk", self.cross_talk),
            ("duplicate_fraction", self.duplicate_fraction),
            ("duplicate_noise", self.duplicate_noise),
            ("duplicate_keyword_rate", self.duplicate_keyword_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if self.duplicate_fraction > 0.0 && self.duplicate_templates == 0 {
            return bad("duplicate_fraction needs at least one template");
        }
        if self.branching == 0 {
            return bad("branching must be positive");
        }
        if self.train == 0 || self.validation == 0 || self.test == 0 || self.pool == 0 {
            return bad("all set sizes must be positive");
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<&'static str> {
        CLASS_TOPICS[self.class_offset..self.class_offset + self.num_classes].to_vec()
    }
}

/// Labeled train/validation/test sets plus an unlabeled seed pool.
#[derive(Clone, Debug)]
pub struct ToyData {
    pub train: DocumentSet,
    pub validation: DocumentSet,
    pub test: DocumentSet,
    pub pool: DocumentSet,
    /// Topic of each pool document; class topics come first.
    pub pool_topics: Vec<usize>,
}

struct Topic {
    words: Vec<String>,
    /// Next-token successors of each keyword.
    successors: Vec<Vec<usize>>,
}

struct Generator {
    cfg: ToyConfig,
    topics: Vec<Topic>,
    filler: Vec<String>,
    filler_dist: WeightedIndex<f64>,
}

impl Generator {
    fn new(cfg: &ToyConfig) -> Result<Self> {
        cfg.validate()?;
        // the chains depend on the topic layout only, not on the data seed
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0f70_71c5);
        let names = cfg
            .class_names()
            .into_iter()
            .chain(DISTRACTOR_TOPICS[..cfg.distractor_topics].iter().copied());
        let topics = names
            .map(|name| {
                let words = (0..cfg.keywords_per_topic).map(|i| format!("{name}{i}")).collect();
                let successors = (0..cfg.keywords_per_topic)
                    .map(|_| {
                        (0..cfg.branching)
                            .map(|_| rng.gen_range(0..cfg.keywords_per_topic))
                            .collect()
                    })
                    .collect();
                Topic { words, successors }
            })
            .collect();
        let filler = (0..cfg.filler_words).map(|i| format!("w{i}")).collect();
        let filler_dist = WeightedIndex::new((1..=cfg.filler_words).map(|r| 1.0 / r as f64))
            .map_err(|e| Error::Config(format!("synthetic: {e}")))?;
        Ok(Self {
            cfg: cfg.clone(),
            topics,
            filler,
            filler_dist,
        })
    }

    fn doc(&self, rng: &mut ChaCha8Rng, topic: usize, rate: f64) -> String {
        let len = rng.gen_range(self.cfg.min_len..=self.cfg.max_len);
        self.doc_of_len(rng, topic, rate, len)
    }

    fn doc_of_len(&self, rng: &mut ChaCha8Rng, topic: usize, rate: f64, len: usize) -> String {
        let t = &self.topics[topic];
        let mut out: Vec<&str> = Vec::with_capacity(len);
        let mut state = rng.gen_range(0..t.words.len());
        let is_distractor = topic >= self.cfg.num_classes;
        for _ in 0..len {
            if is_distractor && rng.gen_bool(self.cfg.cross_talk) {
                let c = rng.gen_range(0..self.cfg.num_classes);
                let w = &self.topics[c].words;
                out.push(&w[rng.gen_range(0..w.len())]);
            } else if rng.gen_bool(rate) {
                match self.cfg.task {
                    Task::Classification => out.push(&t.words[rng.gen_range(0..t.words.len())]),
                    Task::NextToken => {
                        out.push(&t.words[state]);
                        let next = &t.successors[state];
                        state = next[rng.gen_range(0..next.len())];
                    }
                }
            } else {
                out.push(&self.filler[self.filler_dist.sample(rng)]);
            }
        }
        out.join(" ")
    }

    fn near_duplicate(&self, rng: &mut ChaCha8Rng, template: &[String]) -> String {
        let words: Vec<&str> = template
            .iter()
            .map(|w| {
                if rng.gen_bool(self.cfg.duplicate_noise) {
                    self.filler[self.filler_dist.sample(rng)].as_str()
                } else {
                    w.as_str()
                }
            })
            .collect();
        words.join(" ")
    }

    fn labeled(&self, rng: &mut ChaCha8Rng, n: usize) -> DocumentSet {
        let c = self.cfg.num_classes;
        DocumentSet::from_texts((0..n).map(|_| {
            let y = rng.gen_range(0..c);
            let label = (self.cfg.task == Task::Classification).then_some(y);
            (self.doc(rng, y, self.cfg.keyword_rate), label)
        }))
    }
}

/// Generates all four sets from `cfg.seed`.
pub fn generate(cfg: &ToyConfig) -> Result<ToyData> {
    let g = Generator::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train = g.labeled(&mut rng, cfg.train);
    let validation = g.labeled(&mut rng, cfg.validation);
    let test = g.labeled(&mut rng, cfg.test);
    let (pool, pool_topics) = distractor_pool(&g, &mut rng, cfg.pool);
    Ok(ToyData {
        train,
        validation,
        test,
        pool,
        pool_topics,
    })
}

fn distractor_pool(g: &Generator, rng: &mut ChaCha8Rng, n: usize) -> (DocumentSet, Vec<usize>) {
    let cfg = &g.cfg;
    let templates: Vec<(usize, Vec<String>)> = if cfg.duplicate_fraction > 0.0 {
        (0..cfg.duplicate_templates)
            .map(|i| {
                let topic = i % cfg.num_classes;
                let text = g.doc_of_len(rng, topic, cfg.duplicate_keyword_rate, cfg.max_len);
                (topic, text.split(' ').map(str::to_owned).collect())
            })
            .collect()
    } else {
        Vec::new()
    };
    let mut topics = Vec::with_capacity(n);
    let texts: Vec<(String, Option<usize>)> = (0..n)
        .map(|_| {
            if !templates.is_empty() && rng.gen_bool(cfg.duplicate_fraction) {
                let (topic, words) = &templates[rng.gen_range(0..templates.len())];
                topics.push(*topic);
                return (g.near_duplicate(rng, words), None);
            }
            let on_topic = cfg.distractor_topics == 0 || rng.gen_bool(cfg.on_topic_fraction);
            let topic = if on_topic {
                rng.gen_range(0..cfg.num_classes)
            } else {
                cfg.num_classes + rng.gen_range(0..cfg.distractor_topics)
            };
            let rate = if on_topic {
                cfg.pool_keyword_rate
            } else {
                cfg.keyword_rate
            };
            topics.push(topic);
            (g.doc(rng, topic, rate), None)
        })
        .collect();
    (DocumentSet::from_texts(texts), topics)
}

/// Unlabeled pool only, e.g. as the distractor side of a leakage mixture.
pub fn generate_pool(cfg: &ToyConfig, n: usize, seed: u64) -> Result<DocumentSet> {
    let g = Generator::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(distractor_pool(&g, &mut rng, n).0)
}
