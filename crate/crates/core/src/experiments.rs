//! Desk-scale fact-recall experiments.
//!
//! Entities are invented words built from syllables: several pieces in the
//! default vocabulary, one id in the routing vocabulary. Pretraining sees
//! templated facts under span corruption; finetuning teaches a question
//! format on half of the entities; recall is measured on the other half, so
//! a correct answer requires knowledge stored during pretraining.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bucketing::{
    split_buckets, BucketPlan, BucketShapeSpec, FrequencyTable, ShapeSpec, SplitMode,
    DEFAULT_BYPASS_TOP_N,
};
use crate::error::{Error, Result};
use crate::model::{
    self, build_model, dense_baseline, Example, Model, ModelConfig, SpanConfig, TrainConfig,
};
use crate::ops::Activation;
use crate::params::AdamConfig;
use crate::routing::{Routing, RoutingVocab};
use crate::tokenizer::{SubwordVocab, DEFAULT_SENTINELS, EOS_ID, WORD_MARK};

/// Answer vocabulary: every value is a single default piece.
pub const VALUE_WORDS: [&str; 24] = [
    "paris", "rome", "oslo", "lima", "cairo", "delhi", "tokyo", "quito", "dakar", "hanoi", "minsk",
    "sofia", "riga", "bern", "kyiv", "doha", "baku", "accra", "seoul", "perth", "lagos", "nairobi",
    "havana", "manila",
];

/// Pretraining templates; `{e}` is the entity, `{v}` the value.
pub const TEMPLATES: [&str; 6] = [
    "{e} is located in {v}",
    "{e} lies in {v}",
    "you can find {e} in {v}",
    "the home of {e} is {v}",
    "{e} sits in {v}",
    "people visit {e} in {v}",
];

pub const QUESTION: &str = "where is {e} ?";

const CONSONANTS: [char; 9] = ['b', 'd', 'f', 'g', 'k', 'p', 't', 'v', 'z'];
const VOWELS: [char; 5] = ['a', 'e', 'i', 'o', 'u'];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QaPair {
    pub entity: String,
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FactCorpus {
    pub entities: Vec<String>,
    pub facts: BTreeMap<String, String>,
    pub pretrain: Vec<String>,
    pub qa: Vec<QaPair>,
    pub num_templates: usize,
}

fn fill(template: &str, e: &str, v: &str) -> String {
    template.replace("{e}", e).replace("{v}", v)
}

fn syllables() -> Vec<String> {
    CONSONANTS
        .iter()
        .flat_map(|c| VOWELS.iter().map(move |v| format!("{c}{v}")))
        .collect()
}

fn fixed_words(num_templates: usize) -> BTreeSet<String> {
    TEMPLATES[..num_templates]
        .iter()
        .chain(std::iter::once(&QUESTION))
        .flat_map(|t| t.split_whitespace())
        .filter(|w| !w.starts_with('{'))
        .map(str::to_string)
        .chain(VALUE_WORDS.iter().map(|s| s.to_string()))
        .collect()
}

/// Deterministic synthetic fact corpus. Each entity appears in exactly
/// `occurrences` pretraining lines with templates drawn uniformly.
pub fn gen_fact_corpus(
    seed: u64,
    num_entities: usize,
    num_templates: usize,
    occurrences: usize,
) -> Result<FactCorpus> {
    if num_templates == 0 || num_templates > TEMPLATES.len() {
        return Err(Error::InvalidArgument(format!(
            "num_templates must lie in 1..={}, got {num_templates}",
            TEMPLATES.len()
        )));
    }
    let syl = syllables();
    // 2- and 3-syllable words
    let capacity = syl.len().pow(2) + syl.len().pow(3);
    if num_entities > capacity / 2 {
        return Err(Error::InvalidArgument(format!(
            "at most {} entities supported",
            capacity / 2
        )));
    }
    let fixed = fixed_words(num_templates);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    let mut entities = Vec::with_capacity(num_entities);
    while entities.len() < num_entities {
        let n = rng.gen_range(2..=3);
        let word: String = (0..n)
            .map(|_| syl[rng.gen_range(0..syl.len())].as_str())
            .collect();
        // a fixed word as prefix would change the entity's tokenization
        if fixed.iter().any(|f| word.starts_with(f.as_str())) || !seen.insert(word.clone()) {
            continue;
        }
        entities.push(word);
    }
    let facts: BTreeMap<String, String> = entities
        .iter()
        .map(|e| {
            (
                e.clone(),
                VALUE_WORDS[rng.gen_range(0..VALUE_WORDS.len())].to_string(),
            )
        })
        .collect();
    let mut pretrain = Vec::with_capacity(num_entities * occurrences);
    for e in &entities {
        for _ in 0..occurrences {
            let t = TEMPLATES[rng.gen_range(0..num_templates)];
            pretrain.push(fill(t, e, &facts[e]));
        }
    }
    pretrain.shuffle(&mut rng);
    let qa = entities
        .iter()
        .map(|e| QaPair {
            entity: e.clone(),
            question: fill(QUESTION, e, ""),
            answer: facts[e].clone(),
        })
        .collect();
    Ok(FactCorpus {
        entities,
        facts,
        pretrain,
        qa,
        num_templates,
    })
}

impl FactCorpus {
    /// Questions used for finetuning: even positions.
    pub fn finetune_qa(&self) -> Vec<QaPair> {
        self.qa.iter().step_by(2).cloned().collect()
    }

    /// Held-out questions: odd positions.
    pub fn eval_qa(&self) -> Vec<QaPair> {
        self.qa.iter().skip(1).step_by(2).cloned().collect()
    }

    /// Characters, syllables (word-initial and inner), template words and
    /// values. Entities are never single pieces.
    pub fn default_vocab(&self, num_sentinels: usize) -> Result<SubwordVocab> {
        let mut pieces = BTreeSet::new();
        for c in ('a'..='z').chain(['?', WORD_MARK]) {
            pieces.insert(c.to_string());
        }
        for w in fixed_words(self.num_templates.max(1)) {
            pieces.insert(format!("{WORD_MARK}{w}"));
        }
        for s in syllables() {
            pieces.insert(format!("{WORD_MARK}{s}"));
            pieces.insert(s);
        }
        let pieces: Vec<String> = pieces.into_iter().collect();
        SubwordVocab::with_specials(&pieces, num_sentinels)
    }

    /// Line-oriented text dump used for golden comparisons.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# facts\n");
        for (e, v) in &self.facts {
            s.push_str(&format!("{e}\t{v}\n"));
        }
        s.push_str("# pretrain\n");
        for l in &self.pretrain {
            s.push_str(l);
            s.push('\n');
        }
        s.push_str("# qa\n");
        for q in &self.qa {
            s.push_str(&format!("{}\t{}\n", q.question, q.answer));
        }
        s
    }
}

/// Shapes, model size and step budgets of one experiment cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub num_entities: usize,
    pub num_templates: usize,
    pub occurrences: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub num_enc_blocks: usize,
    pub num_dec_blocks: usize,
    pub ffn_hidden: usize,
    pub mowe_positions_enc: Vec<usize>,
    pub mowe_positions_dec: Vec<usize>,
    pub max_seq_len: usize,
    /// Expert hidden dim per bucket; its length is the bucket count.
    pub expert_hidden: Vec<usize>,
    pub num_blocks: usize,
    /// Experts per block in all but the rarest bucket.
    pub frequent_experts_per_block: usize,
    /// Experts per block in the rarest bucket; `None` gives every id its own expert.
    pub rare_experts_per_block: Option<usize>,
    /// Fixed buffer size; `None` derives it from token frequencies.
    pub capacity_per_expert: Option<usize>,
    pub bypass_top_n: usize,
    /// Knowledge words kept in the routing vocabulary; `None` keeps all.
    pub knowledge_words: Option<usize>,
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    pub batch_size: usize,
    pub pretrain_lr: f64,
    pub finetune_lr: f64,
    pub corruption_rate: f64,
    pub mean_span_len: f64,
    pub freeze_experts: bool,
    pub corpus_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            num_entities: 240,
            num_templates: 4,
            occurrences: 20,
            d_model: 32,
            num_heads: 4,
            num_enc_blocks: 4,
            num_dec_blocks: 4,
            ffn_hidden: 64,
            mowe_positions_enc: vec![1, 2],
            mowe_positions_dec: vec![1, 2],
            max_seq_len: 24,
            expert_hidden: vec![32, 32],
            num_blocks: 4,
            frequent_experts_per_block: 2,
            rare_experts_per_block: None,
            capacity_per_expert: None,
            bypass_top_n: DEFAULT_BYPASS_TOP_N,
            knowledge_words: None,
            pretrain_steps: 2000,
            finetune_steps: 500,
            batch_size: 32,
            pretrain_lr: 1e-3,
            finetune_lr: 1e-4,
            corruption_rate: 0.15,
            mean_span_len: 3.0,
            freeze_experts: true,
            corpus_seed: 7,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse("experiment config", e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    pub fn span(&self) -> SpanConfig {
        SpanConfig {
            corruption_rate: self.corruption_rate,
            mean_span_len: self.mean_span_len,
        }
    }
}

/// Corpus, vocabularies and token frequencies shared by the cells of an
/// experiment.
#[derive(Debug, Clone)]
pub struct FactSetup {
    pub corpus: FactCorpus,
    pub routing: Routing,
    pub freq: FrequencyTable,
}

impl FactSetup {
    /// Token frequencies are counted over the routing ids the expert layers
    /// see: both sides of span-corrupted pretraining lines and of the
    /// finetuning questions, so pad and sentinels are counted too.
    pub fn new(
        corpus: FactCorpus,
        knowledge_words: Option<usize>,
        span: &SpanConfig,
        max_seq_len: usize,
    ) -> Result<Self> {
        let dv = corpus.default_vocab(DEFAULT_SENTINELS)?;
        let routing = if corpus.entities.is_empty() || knowledge_words == Some(0) {
            let empty = RoutingVocab::from_tsv("#knowledge_threshold=0\n")?;
            Routing::new(dv, &empty)
        } else {
            let rv =
                RoutingVocab::build(&corpus.entities, &corpus.pretrain, corpus.entities.len())?;
            let rv = match knowledge_words {
                Some(k) => rv.truncate_knowledge(k),
                None => rv,
            };
            Routing::new(dv, &rv)
        };
        let mut setup = Self {
            corpus,
            routing,
            freq: FrequencyTable::zeros(0),
        };
        let mut examples =
            model::make_span_batch(0, &setup.corpus.pretrain, span, &setup.routing, max_seq_len)?;
        examples.extend(setup.qa_examples(&setup.corpus.finetune_qa())?);
        let freq = model::example_frequencies(&examples, setup.routing.routing_vocab.size());
        setup.freq = freq;
        Ok(setup)
    }

    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let corpus = gen_fact_corpus(
            cfg.corpus_seed,
            cfg.num_entities,
            cfg.num_templates,
            cfg.occurrences,
        )?;
        Self::new(corpus, cfg.knowledge_words, &cfg.span(), cfg.max_seq_len)
    }

    pub fn plan(&self, cfg: &ExperimentConfig) -> Result<BucketPlan> {
        let k = cfg.expert_hidden.len();
        let b = split_buckets(&self.freq, k, cfg.bypass_top_n, SplitMode::Mass)?;
        let sizes = b.sizes();
        let buckets = cfg
            .expert_hidden
            .iter()
            .enumerate()
            .map(|(i, &h)| BucketShapeSpec {
                num_blocks: cfg.num_blocks,
                experts_per_block: if i + 1 < k {
                    cfg.frequent_experts_per_block
                } else {
                    cfg.rare_experts_per_block
                        .unwrap_or(sizes[i].div_ceil(cfg.num_blocks))
                },
                expert_hidden_dim: h,
                capacity_per_expert: cfg.capacity_per_expert,
            })
            .collect();
        let spec = ShapeSpec {
            buckets,
            tokens_per_batch: cfg.batch_size * cfg.max_seq_len,
            capacity_factor: crate::bucketing::DEFAULT_CAPACITY_FACTOR,
        };
        BucketPlan::with_frequencies(&b, &spec, &self.freq)
    }

    pub fn model_config(&self, cfg: &ExperimentConfig) -> ModelConfig {
        ModelConfig {
            d_model: cfg.d_model,
            num_heads: cfg.num_heads,
            num_enc_blocks: cfg.num_enc_blocks,
            num_dec_blocks: cfg.num_dec_blocks,
            ffn_hidden: cfg.ffn_hidden,
            mowe_positions_enc: cfg.mowe_positions_enc.clone(),
            mowe_positions_dec: cfg.mowe_positions_dec.clone(),
            share_experts: true,
            default_vocab_size: self.routing.default_vocab.size(),
            routing_vocab_size: self.routing.routing_vocab.size(),
            max_seq_len: cfg.max_seq_len,
            activation: Activation::Gelu,
        }
    }

    pub fn qa_examples(&self, pairs: &[QaPair]) -> Result<Vec<Example>> {
        qa_examples(&self.routing, pairs)
    }

    pub fn pretrain_sampler<'a>(
        &'a self,
        cfg: &ExperimentConfig,
        seed: u64,
    ) -> impl FnMut(usize) -> Result<Vec<Example>> + 'a {
        span_sampler(
            &self.corpus.pretrain,
            &self.routing,
            cfg.batch_size,
            cfg.span(),
            cfg.max_seq_len,
            seed,
        )
    }
}

/// Question-answer examples: the target is the answer followed by eos.
pub fn qa_examples(routing: &Routing, pairs: &[QaPair]) -> Result<Vec<Example>> {
    pairs
        .iter()
        .map(|q| {
            let (ids, rids) = routing.tokenize(&q.question);
            let mut target = routing.default_vocab.encode(&q.answer);
            target.push(EOS_ID);
            Example::new(&routing.table, ids, rids, target)
        })
        .collect()
}

/// Span-corrupted batches drawn from `lines` without replacement, reshuffled
/// every epoch and freshly masked every step.
pub fn span_sampler<'a, S: AsRef<str>>(
    lines: &'a [S],
    routing: &'a Routing,
    batch: usize,
    span: SpanConfig,
    max_len: usize,
    seed: u64,
) -> impl FnMut(usize) -> Result<Vec<Example>> + 'a {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = Vec::new();
    let mut pos = 0;
    move |step| {
        if lines.is_empty() || batch == 0 {
            return Err(Error::EmptyCorpus);
        }
        let mut picked = Vec::with_capacity(batch);
        while picked.len() < batch {
            if pos == order.len() {
                order = (0..lines.len()).collect();
                order.shuffle(&mut rng);
                pos = 0;
            }
            picked.push(lines[order[pos]].as_ref());
            pos += 1;
        }
        let mask_seed = seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(step as u64);
        model::make_span_batch(mask_seed, &picked, &span, routing, max_len)
    }
}

/// Exact-match fraction of greedy answers.
pub fn eval_recall(model: &Model<f32>, routing: &Routing, qa: &[QaPair]) -> Result<f64> {
    Ok(answer_all(model, routing, qa)?
        .iter()
        .zip(qa)
        .filter(|(a, q)| **a == q.answer)
        .count() as f64
        / qa.len().max(1) as f64)
}

/// Greedy answers decoded for every question.
pub fn answer_all(model: &Model<f32>, routing: &Routing, qa: &[QaPair]) -> Result<Vec<String>> {
    qa.iter()
        .map(|q| {
            let (ids, rids) = routing.tokenize(&q.question);
            let out = model.generate(&routing.table, &ids, &rids, 8)?;
            routing.default_vocab.decode_generated(&out)
        })
        .collect()
}

/// A question whose answer changed when experts were deactivated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Flip {
    pub question: String,
    pub expected: String,
    pub with_experts: String,
    pub without_experts: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub threshold: usize,
    pub recall_on: f64,
    pub recall_off: f64,
    pub flips: Vec<Flip>,
}

/// Recall with all experts, then with experts of routing ids at or above
/// `threshold` producing zero. The model's masks are restored afterwards.
pub fn run_deactivation_probe(
    model: &mut Model<f32>,
    routing: &Routing,
    qa: &[QaPair],
    threshold: usize,
) -> Result<ProbeReport> {
    model.clear_deactivation();
    let on = answer_all(model, routing, qa)?;
    model.set_deactivation(|rid| rid as usize >= threshold);
    let off = answer_all(model, routing, qa);
    model.clear_deactivation();
    let off = off?;
    let n = qa.len().max(1) as f64;
    let hits = |a: &[String]| a.iter().zip(qa).filter(|(x, q)| **x == q.answer).count() as f64 / n;
    let flips = qa
        .iter()
        .zip(on.iter().zip(&off))
        .filter(|(_, (a, b))| a != b)
        .map(|(q, (a, b))| Flip {
            question: q.question.clone(),
            expected: q.answer.clone(),
            with_experts: a.clone(),
            without_experts: b.clone(),
        })
        .collect();
    Ok(ProbeReport {
        threshold,
        recall_on: hits(&on),
        recall_off: hits(&off),
        flips,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Mowe,
    /// No expert layers; dense width matched to the expert model's FLOPs.
    DenseBaseline,
}

/// Outcome of pretraining, finetuning and evaluating one model.
#[derive(Debug, Clone)]
pub struct Cell {
    pub model: Model<f32>,
    pub recall: f64,
    pub flops: f64,
    pub pretrain_trace: Vec<model::TraceRow>,
    pub finetune_trace: Vec<model::TraceRow>,
}

pub fn run_cell(
    setup: &FactSetup,
    cfg: &ExperimentConfig,
    variant: Variant,
    seed: u64,
) -> Result<Cell> {
    let plan = setup.plan(cfg)?;
    let mut mcfg = setup.model_config(cfg);
    if variant == Variant::DenseBaseline {
        mcfg = dense_baseline(&mcfg, &plan)?;
    }
    let flops = model::count_flops(&mcfg, &plan);
    let mut m: Model<f32> = build_model(&mcfg, &plan, seed)?;
    let pre = TrainConfig {
        steps: cfg.pretrain_steps,
        batch_size: cfg.batch_size,
        adam: AdamConfig::with_lr(cfg.pretrain_lr),
        freeze_experts: false,
    };
    let pretrain_trace = model::train(&mut m, &pre, setup.pretrain_sampler(cfg, seed))?;
    let ft_data = setup.qa_examples(&setup.corpus.finetune_qa())?;
    let fine = TrainConfig {
        steps: cfg.finetune_steps,
        batch_size: cfg.batch_size,
        adam: AdamConfig::with_lr(cfg.finetune_lr),
        freeze_experts: cfg.freeze_experts,
    };
    let finetune_trace = model::train(
        &mut m,
        &fine,
        model::epoch_sampler(&ft_data, cfg.batch_size, seed ^ 0xF1),
    )?;
    let recall = eval_recall(&m, &setup.routing, &setup.corpus.eval_qa())?;
    Ok(Cell {
        model: m,
        recall,
        flops,
        pretrain_trace,
        finetune_trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    RoutingVocabSize,
    NumExperts,
    MoweLayers,
    ExpertDims,
    Freeze,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 5] = [
        SweepAxis::RoutingVocabSize,
        SweepAxis::NumExperts,
        SweepAxis::MoweLayers,
        SweepAxis::ExpertDims,
        SweepAxis::Freeze,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::RoutingVocabSize => "routing_vocab_size",
            SweepAxis::NumExperts => "num_experts",
            SweepAxis::MoweLayers => "mowe_layers",
            SweepAxis::ExpertDims => "expert_dims",
            SweepAxis::Freeze => "freeze",
        }
    }

    /// Applies one axis value to a base config.
    ///
    /// * `routing_vocab_size`: knowledge words kept (`all` keeps every word)
    /// * `num_experts`: experts per block in the rarest bucket
    /// * `mowe_layers`: expert layers, split between encoder and decoder
    /// * `expert_dims`: per-bucket hidden dims joined by `-`, e.g. `32-16`
    /// * `freeze`: `true` or `false`
    pub fn apply(self, base: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let bad =
            || Error::InvalidArgument(format!("invalid value {value:?} for axis {}", self.name()));
        let num = || value.parse::<usize>().map_err(|_| bad());
        let mut c = base.clone();
        match self {
            SweepAxis::RoutingVocabSize => {
                c.knowledge_words = if value == "all" { None } else { Some(num()?) }
            }
            SweepAxis::NumExperts => {
                let n = num()?;
                if n == 0 {
                    return Err(bad());
                }
                c.rare_experts_per_block = Some(n);
            }
            SweepAxis::MoweLayers => {
                let n = num()?;
                let enc = n.div_ceil(2);
                let dec = n / 2;
                if enc > c.num_enc_blocks || dec > c.num_dec_blocks {
                    return Err(bad());
                }
                c.mowe_positions_enc = spread(enc, c.num_enc_blocks);
                c.mowe_positions_dec = spread(dec, c.num_dec_blocks);
            }
            SweepAxis::ExpertDims => {
                let dims: Vec<usize> = value
                    .split('-')
                    .map(|s| s.parse().map_err(|_| bad()))
                    .collect::<Result<_>>()?;
                if dims.is_empty() || dims.contains(&0) {
                    return Err(bad());
                }
                c.expert_hidden = dims;
            }
            SweepAxis::Freeze => c.freeze_experts = value.parse().map_err(|_| bad())?,
        }
        Ok(c)
    }
}

/// `n` block indices spread over `blocks`, avoiding the first block when
/// possible.
fn spread(n: usize, blocks: usize) -> Vec<usize> {
    (0..n)
        .map(|i| ((i + 1) * blocks / (n + 1)).min(blocks - 1))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SweepAxis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown sweep axis {s:?}")))
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub axis_value: String,
    pub seed: u64,
    pub metric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub const CSV_HEADER: &'static str = "axis_value,seed,metric";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            s.push_str(&format!("{},{},{:.6}\n", r.axis_value, r.seed, r.metric));
        }
        s
    }

    /// Mean metric of one axis value over seeds.
    pub fn mean(&self, value: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.axis_value == value)
            .map(|r| r.metric)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Trains and evaluates one model per `(value, seed)`; the metric is
/// held-out exact match.
pub fn run_sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[String],
    seeds: &[u64],
) -> Result<SweepResult> {
    let mut rows = Vec::with_capacity(values.len() * seeds.len());
    for value in values {
        let cfg = axis.apply(base, value)?;
        let setup = FactSetup::from_config(&cfg)?;
        for &seed in seeds {
            let cell = run_cell(&setup, &cfg, Variant::Mowe, seed)?;
            log::info!("{axis}={value} seed={seed} recall={:.4}", cell.recall);
            rows.push(SweepRow {
                axis_value: value.clone(),
                seed,
                metric: cell.recall,
            });
        }
    }
    Ok(SweepResult { axis, rows })
}
