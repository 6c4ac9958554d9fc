use std::path::{Path, PathBuf};

use mowe::bucketing::{
    split_buckets, BucketPlan, FrequencyTable, ShapeSpec, SplitMode, DEFAULT_BYPASS_TOP_N,
};
use mowe::experiments::{
    answer_all, qa_examples, run_deactivation_probe, run_sweep, span_sampler, QaPair, SweepAxis,
};
use mowe::model::{
    build_model, epoch_sampler, example_frequencies, load_checkpoint, make_span_batch,
    save_checkpoint, train, Model, SpanConfig, TraceRow, TrainConfig, VocabHashes,
};
use mowe::mowe::{comm_cost, route, CommReport};
use mowe::params::AdamConfig;
use mowe::read_lines;
use mowe::routing::{Routing, RoutingHashTable, RoutingVocab};
use mowe::tokenizer::{SubwordVocab, DEFAULT_SENTINELS, DEFAULT_VOCAB_SIZE, FIXED_SPECIALS};

use crate::config::{input, output, pick, RunConfig};
use crate::{Cli, CliError, Command, VocabArgs};

pub const ROUTING_VOCAB_FILE: &str = "routing_vocab.tsv";
pub const HASH_TABLE_FILE: &str = "hash_table.tsv";
pub const FREQUENCIES_FILE: &str = "frequencies.tsv";

const DEFAULT_TOP_K: usize = 1024;
const DEFAULT_PRETRAIN_STEPS: usize = 2000;
const DEFAULT_FINETUNE_STEPS: usize = 500;
const DEFAULT_BATCH_SIZE: usize = 32;

type Res<T> = Result<T, CliError>;

pub fn run(cli: Cli) -> Res<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    match cli.command {
        Command::BuildDefaultVocab(a) => build_default_vocab(a, &cfg),
        Command::BuildRoutingVocab(a) => build_routing_vocab(a, &cfg, seed),
        Command::PlanBuckets(a) => plan_buckets(a, &cfg),
        Command::Pretrain(a) => pretrain(a, &cfg, seed),
        Command::Finetune(a) => finetune(a, &cfg, seed),
        Command::Eval(a) => eval(a, &cfg),
        Command::Ablate(a) => ablate(a, &cfg),
        Command::Stats(a) => stats(a, &cfg),
        Command::ProbeDeactivation(a) => probe(a, &cfg),
    }
}

fn write_file(path: &Path, text: &str) -> Res<()> {
    std::fs::write(path, text)
        .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
}

fn emit(path: Option<&Path>, text: &str) -> Res<()> {
    match path {
        Some(p) => write_file(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn span_config(cfg: &RunConfig) -> SpanConfig {
    let d = SpanConfig::default();
    SpanConfig {
        corruption_rate: cfg.train.corruption_rate.unwrap_or(d.corruption_rate),
        mean_span_len: cfg.train.mean_span_len.unwrap_or(d.mean_span_len),
    }
}

fn non_empty_lines(path: &Path) -> Res<Vec<String>> {
    Ok(read_lines(path)?
        .into_iter()
        .filter(|l| !l.trim().is_empty())
        .collect())
}

/// `question<TAB>answer` per line; blank lines are skipped.
fn read_qa(path: &Path) -> Res<Vec<QaPair>> {
    let mut pairs = Vec::new();
    for (n, line) in read_lines(path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (q, a) = line.split_once('\t').ok_or_else(|| {
            CliError::Usage(format!(
                "{} line {}: expected question<TAB>answer",
                path.display(),
                n + 1
            ))
        })?;
        pairs.push(QaPair {
            entity: String::new(),
            question: q.trim().to_string(),
            answer: a.trim().to_string(),
        });
    }
    Ok(pairs)
}

struct VocabPaths {
    default_vocab: PathBuf,
    routing_vocab: PathBuf,
    table: PathBuf,
}

fn vocab_paths(args: VocabArgs, cfg: &RunConfig) -> Res<VocabPaths> {
    let default_vocab = input(
        pick(
            args.default_vocab,
            cfg.paths.default_vocab.clone(),
            "paths.default_vocab",
            "default-vocab",
        )?,
        "paths.default_vocab",
    )?;
    let dir = pick(
        args.routing_dir,
        cfg.paths.routing_dir.clone(),
        "paths.routing_dir",
        "routing-dir",
    )?;
    Ok(VocabPaths {
        default_vocab,
        routing_vocab: input(dir.join(ROUTING_VOCAB_FILE), "paths.routing_dir")?,
        table: input(dir.join(HASH_TABLE_FILE), "paths.routing_dir")?,
    })
}

fn load_routing(p: &VocabPaths) -> Res<Routing> {
    let routing = Routing {
        default_vocab: SubwordVocab::load(&p.default_vocab)?,
        routing_vocab: RoutingVocab::load(&p.routing_vocab)?,
        table: RoutingHashTable::load(&p.table)?,
    };
    if routing.routing_vocab.knowledge_threshold() != routing.default_vocab.size() {
        return Err(CliError::Usage(format!(
            "paths.routing_dir: routing vocabulary expects {} default ids but {} has {}",
            routing.routing_vocab.knowledge_threshold(),
            p.default_vocab.display(),
            routing.default_vocab.size()
        )));
    }
    Ok(routing)
}

fn hashes(r: &Routing) -> VocabHashes {
    VocabHashes {
        default_vocab: r.default_vocab.content_hash(),
        routing_vocab: r.routing_vocab.content_hash(),
    }
}

fn build_default_vocab(a: crate::BuildDefaultVocab, cfg: &RunConfig) -> Res<()> {
    let corpus = input(
        pick(a.corpus, cfg.paths.corpus.clone(), "paths.corpus", "corpus")?,
        "paths.corpus",
    )?;
    let out = output(
        pick(
            a.out,
            cfg.paths.default_vocab.clone(),
            "paths.default_vocab",
            "out",
        )?,
        "out",
    )?;
    let size = a.size.or(cfg.vocab.size).unwrap_or(DEFAULT_VOCAB_SIZE);
    let sentinels = a
        .sentinels
        .or(cfg.vocab.sentinels)
        .unwrap_or(DEFAULT_SENTINELS);
    let lines = non_empty_lines(&corpus)?;
    let dv = SubwordVocab::learn(&lines, size, FIXED_SPECIALS + sentinels)?;
    dv.save(&out)?;
    log::info!("wrote {} pieces to {}", dv.size(), out.display());
    Ok(())
}

fn build_routing_vocab(a: crate::BuildRoutingVocab, cfg: &RunConfig, seed: u64) -> Res<()> {
    let names = input(
        pick(a.names, cfg.paths.names.clone(), "paths.names", "names")?,
        "paths.names",
    )?;
    let corpus = input(
        pick(a.corpus, cfg.paths.corpus.clone(), "paths.corpus", "corpus")?,
        "paths.corpus",
    )?;
    let dv_path = input(
        pick(
            a.default_vocab,
            cfg.paths.default_vocab.clone(),
            "paths.default_vocab",
            "default-vocab",
        )?,
        "paths.default_vocab",
    )?;
    let dir = pick(
        a.out,
        cfg.paths.routing_dir.clone(),
        "paths.routing_dir",
        "out",
    )?;
    if !dir.is_dir() {
        std::fs::create_dir_all(&dir)
            .map_err(|e| CliError::Usage(format!("out: {}: {e}", dir.display())))?;
    }
    let top_k = a.top_k.or(cfg.vocab.top_k).unwrap_or(DEFAULT_TOP_K);

    let dv = SubwordVocab::load(&dv_path)?;
    let names: Vec<String> = non_empty_lines(&names)?;
    let lines = non_empty_lines(&corpus)?;
    let knowledge = RoutingVocab::build(&names, &lines, top_k)?;
    let routing = Routing::new(dv, &knowledge);
    if routing.table.dropped_too_long + routing.table.collisions > 0 {
        log::warn!(
            "{} knowledge words have keys longer than the limit, {} collide with a more frequent word",
            routing.table.dropped_too_long,
            routing.table.collisions
        );
    }
    // frequencies count what the expert layers see during pretraining
    let max_len = cfg.model.resolve(0, 0).max_seq_len;
    let examples = make_span_batch(seed, &lines, &span_config(cfg), &routing, max_len)?;
    let freq = example_frequencies(&examples, routing.routing_vocab.size());
    routing.routing_vocab.save(&dir.join(ROUTING_VOCAB_FILE))?;
    routing.table.save(&dir.join(HASH_TABLE_FILE))?;
    write_file(&dir.join(FREQUENCIES_FILE), &freq.to_tsv())?;
    log::info!(
        "routing vocabulary of {} ids ({} knowledge words) in {}",
        routing.routing_vocab.size(),
        routing.routing_vocab.knowledge_words().len(),
        dir.display()
    );
    Ok(())
}

fn plan_buckets(a: crate::PlanBuckets, cfg: &RunConfig) -> Res<()> {
    let freq = input(
        pick(a.freq, cfg.paths.freq.clone(), "paths.freq", "freq")?,
        "paths.freq",
    )?;
    let out = output(
        pick(a.out, cfg.paths.plan.clone(), "paths.plan", "out")?,
        "out",
    )?;
    let shapes = match a.shapes.or(cfg.paths.shapes.clone()) {
        Some(p) => {
            let p = input(p, "paths.shapes")?;
            let text = std::fs::read_to_string(&p)
                .map_err(|e| CliError::Usage(format!("paths.shapes: {e}")))?;
            ShapeSpec::from_toml(&text)?
        }
        None => cfg
            .buckets
            .shapes
            .clone()
            .unwrap_or_else(ShapeSpec::desk_default),
    };
    let k = a.k.or(cfg.buckets.k).unwrap_or(shapes.buckets.len());
    if k != shapes.buckets.len() {
        return Err(CliError::Usage(format!(
            "buckets.k is {k} but the shape spec has {} buckets",
            shapes.buckets.len()
        )));
    }
    let bypass = a
        .bypass
        .or(cfg.buckets.bypass)
        .unwrap_or(DEFAULT_BYPASS_TOP_N);
    let split = match a.split.as_deref() {
        None => cfg.buckets.split.unwrap_or_default(),
        Some("mass") => SplitMode::Mass,
        Some("count") => SplitMode::Count,
        Some(other) => {
            return Err(CliError::Usage(format!(
                "buckets.split: expected mass or count, got {other:?}"
            )))
        }
    };
    let text =
        std::fs::read_to_string(&freq).map_err(|e| CliError::Usage(format!("paths.freq: {e}")))?;
    let ft = FrequencyTable::from_tsv(&text)?;
    let boundaries = split_buckets(&ft, k, bypass, split)?;
    let plan = BucketPlan::with_frequencies(&boundaries, &shapes, &ft)?;
    plan.save(&out)?;
    log::info!(
        "{} buckets, {} experts, cutoffs {:?}",
        plan.k(),
        plan.total_experts(),
        plan.cutoffs
    );
    Ok(())
}

fn pretrain(a: crate::Pretrain, cfg: &RunConfig, seed: u64) -> Res<()> {
    let vp = vocab_paths(a.vocab, cfg)?;
    let corpus = input(
        pick(a.corpus, cfg.paths.corpus.clone(), "paths.corpus", "corpus")?,
        "paths.corpus",
    )?;
    let plan_path = input(
        pick(a.plan, cfg.paths.plan.clone(), "paths.plan", "plan")?,
        "paths.plan",
    )?;
    let out = output(
        pick(
            a.out,
            cfg.paths.checkpoint.clone(),
            "paths.checkpoint",
            "out",
        )?,
        "out",
    )?;
    let trace = a
        .trace
        .or(cfg.paths.trace.clone())
        .map(|t| output(t, "trace"))
        .transpose()?;

    let routing = load_routing(&vp)?;
    let plan = BucketPlan::load(&plan_path)?;
    let lines = non_empty_lines(&corpus)?;
    let mcfg = cfg
        .model
        .resolve(routing.default_vocab.size(), routing.routing_vocab.size());
    let mut model: Model<f32> = build_model(&mcfg, &plan, seed)?;
    let tc = TrainConfig {
        steps: a
            .steps
            .or(cfg.train.pretrain_steps)
            .unwrap_or(DEFAULT_PRETRAIN_STEPS),
        batch_size: a
            .batch_size
            .or(cfg.train.batch_size)
            .unwrap_or(DEFAULT_BATCH_SIZE),
        adam: AdamConfig::with_lr(a.lr.or(cfg.train.pretrain_lr).unwrap_or(1e-3)),
        freeze_experts: false,
    };
    let sampler = span_sampler(
        &lines,
        &routing,
        tc.batch_size,
        span_config(cfg),
        mcfg.max_seq_len,
        seed,
    );
    let rows = train(&mut model, &tc, sampler)?;
    save_checkpoint(&out, &model, &hashes(&routing))?;
    if let Some(t) = trace {
        write_file(&t, &TraceRow::to_csv(&rows))?;
    }
    log::info!(
        "pretrained {} steps, final loss {:.4}",
        tc.steps,
        rows.last().map_or(f64::NAN, |r| r.loss)
    );
    Ok(())
}

fn finetune(a: crate::Finetune, cfg: &RunConfig, seed: u64) -> Res<()> {
    let vp = vocab_paths(a.vocab, cfg)?;
    let ckpt = input(
        pick(
            a.checkpoint,
            cfg.paths.checkpoint.clone(),
            "paths.checkpoint",
            "checkpoint",
        )?,
        "paths.checkpoint",
    )?;
    let qa = input(
        pick(a.qa, cfg.paths.qa.clone(), "paths.qa", "qa")?,
        "paths.qa",
    )?;
    let out = output(
        pick(a.out, cfg.paths.out.clone(), "paths.out", "out")?,
        "out",
    )?;
    let trace = a
        .trace
        .or(cfg.paths.trace.clone())
        .map(|t| output(t, "trace"))
        .transpose()?;

    let routing = load_routing(&vp)?;
    let mut model = load_checkpoint(&ckpt, Some(&hashes(&routing)))?.model;
    let pairs = read_qa(&qa)?;
    let data = qa_examples(&routing, &pairs)?;
    let freeze = if a.freeze {
        true
    } else if a.no_freeze {
        false
    } else {
        cfg.train.freeze_experts.unwrap_or(true)
    };
    let tc = TrainConfig {
        steps: a
            .steps
            .or(cfg.train.finetune_steps)
            .unwrap_or(DEFAULT_FINETUNE_STEPS),
        batch_size: a
            .batch_size
            .or(cfg.train.batch_size)
            .unwrap_or(DEFAULT_BATCH_SIZE),
        adam: AdamConfig::with_lr(a.lr.or(cfg.train.finetune_lr).unwrap_or(1e-4)),
        freeze_experts: freeze,
    };
    let rows = train(&mut model, &tc, epoch_sampler(&data, tc.batch_size, seed))?;
    save_checkpoint(&out, &model, &hashes(&routing))?;
    if let Some(t) = trace {
        write_file(&t, &TraceRow::to_csv(&rows))?;
    }
    log::info!(
        "finetuned {} steps on {} pairs, experts frozen: {freeze}",
        tc.steps,
        pairs.len()
    );
    Ok(())
}

fn eval(a: crate::Eval, cfg: &RunConfig) -> Res<()> {
    let vp = vocab_paths(a.vocab, cfg)?;
    let ckpt = input(
        pick(
            a.checkpoint,
            cfg.paths.checkpoint.clone(),
            "paths.checkpoint",
            "checkpoint",
        )?,
        "paths.checkpoint",
    )?;
    let qa = input(
        pick(a.qa, cfg.paths.qa.clone(), "paths.qa", "qa")?,
        "paths.qa",
    )?;
    let out = a.out.map(|o| output(o, "out")).transpose()?;

    let routing = load_routing(&vp)?;
    let model = load_checkpoint(&ckpt, Some(&hashes(&routing)))?.model;
    let pairs = read_qa(&qa)?;
    let answers = answer_all(&model, &routing, &pairs)?;
    let mut csv = String::from("question,expected,predicted,correct\n");
    let mut hits = 0;
    for (q, got) in pairs.iter().zip(&answers) {
        let ok = *got == q.answer;
        hits += ok as usize;
        csv.push_str(&format!(
            "{},{},{},{ok}\n",
            csv_field(&q.question),
            csv_field(&q.answer),
            csv_field(got)
        ));
    }
    if let Some(o) = out {
        write_file(&o, &csv)?;
    }
    println!(
        "exact_match {:.6} ({hits}/{})",
        hits as f64 / pairs.len().max(1) as f64,
        pairs.len()
    );
    Ok(())
}

fn ablate(a: crate::Ablate, cfg: &RunConfig) -> Res<()> {
    let axis: SweepAxis = a
        .axis
        .parse()
        .map_err(|e: mowe::Error| CliError::Usage(format!("axis: {e}")))?;
    let out = a.out.map(|o| output(o, "out")).transpose()?;
    let mut base = cfg.ablate.clone().unwrap_or_default();
    if let Some(s) = a.pretrain_steps {
        base.pretrain_steps = s;
    }
    if let Some(s) = a.finetune_steps {
        base.finetune_steps = s;
    }
    // reject malformed values before any training starts
    for v in &a.values {
        axis.apply(&base, v)
            .map_err(|e| CliError::Usage(format!("values: {e}")))?;
    }
    let result = run_sweep(&base, axis, &a.values, &a.seeds)?;
    emit(out.as_deref(), &result.to_csv())
}

fn stats(a: crate::Stats, cfg: &RunConfig) -> Res<()> {
    if !a.dispatch {
        return Err(CliError::Usage(
            "stats needs a report kind: pass --dispatch".into(),
        ));
    }
    let vp = vocab_paths(a.vocab, cfg)?;
    let corpus = input(
        pick(a.corpus, cfg.paths.corpus.clone(), "paths.corpus", "corpus")?,
        "paths.corpus",
    )?;
    let plan_path = input(
        pick(a.plan, cfg.paths.plan.clone(), "paths.plan", "plan")?,
        "paths.plan",
    )?;
    let out = a
        .out
        .or(cfg.paths.out.clone())
        .map(|o| output(o, "out"))
        .transpose()?;
    let batch = a
        .batch_size
        .or(cfg.train.batch_size)
        .unwrap_or(DEFAULT_BATCH_SIZE);
    if batch == 0 {
        return Err(CliError::Usage("train.batch_size must be positive".into()));
    }

    let routing = load_routing(&vp)?;
    let plan = BucketPlan::load(&plan_path)?;
    let d_model = cfg.model.resolve(0, 0).d_model;
    let lines = non_empty_lines(&corpus)?;
    let mut csv = format!("{}\n", CommReport::CSV_HEADER);
    for (i, chunk) in lines.chunks(batch).enumerate() {
        let rids: Vec<_> = chunk.iter().flat_map(|l| routing.tokenize(l).1).collect();
        csv.push_str(&comm_cost(&route(&plan, &rids), d_model).csv_row(i));
        csv.push('\n');
    }
    emit(out.as_deref(), &csv)
}

fn probe(a: crate::Probe, cfg: &RunConfig) -> Res<()> {
    let vp = vocab_paths(a.vocab, cfg)?;
    let ckpt = input(
        pick(
            a.checkpoint,
            cfg.paths.checkpoint.clone(),
            "paths.checkpoint",
            "checkpoint",
        )?,
        "paths.checkpoint",
    )?;
    let qa = input(
        pick(a.qa, cfg.paths.qa.clone(), "paths.qa", "qa")?,
        "paths.qa",
    )?;
    let out = a.out.map(|o| output(o, "out")).transpose()?;

    let routing = load_routing(&vp)?;
    let mut model = load_checkpoint(&ckpt, Some(&hashes(&routing)))?.model;
    let threshold = a
        .threshold
        .or(cfg.probe.threshold)
        .unwrap_or(routing.default_vocab.size());
    let pairs = read_qa(&qa)?;
    let report = run_deactivation_probe(&mut model, &routing, &pairs, threshold)?;
    let mut csv = String::from("question,expected,with_experts,without_experts\n");
    for f in &report.flips {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            csv_field(&f.question),
            csv_field(&f.expected),
            csv_field(&f.with_experts),
            csv_field(&f.without_experts)
        ));
    }
    if let Some(o) = out {
        write_file(&o, &csv)?;
    }
    println!(
        "threshold {} recall_on {:.6} recall_off {:.6} flips {}",
        report.threshold,
        report.recall_on,
        report.recall_off,
        report.flips.len()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_fields_are_quoted_when_needed() {
        assert_eq!(csv_field("plain"), "plain");
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
    }
}
