use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use fpdg::data::{
    default_schema, entity_word_fraction, generate_corpus, read_corpus, write_corpus, AttributeSchema, Sample, Vocab,
};
use fpdg::decoding::{batch_generate, read_generations, write_generations, DecodeConfig};
use fpdg::eval::{label_recall, EvalReport};
use fpdg::gradcheck::{run_suite, SuiteConfig};
use fpdg::model::{Model, Variant};
use fpdg::persist::{load_model, save_model, ModelMeta};
use fpdg::tensor::Fault;
use fpdg::training::{
    encode_corpus, make_batches, split_indices, train as train_loop, EncodedSample, Precision, StepMetrics,
    TrainConfig, TrainObserver, Trainer,
};
use fpdg::{Error, Scalar};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{
    config, AblateArgs, DataPaths, EvaluateArgs, Failure, FaultArg, GenDataArgs, GenerateArgs, GradcheckArgs,
    TrainArgs,
};

type Outcome = Result<(), Failure>;

fn require(path: &Path) -> Outcome {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("input {} does not exist", path.display())))
    }
}

/// Runs `write` against a sibling temp path, then renames it over `path`.
fn atomically(path: &Path, write: impl FnOnce(&Path) -> fpdg::Result<()>) -> fpdg::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    write(&tmp)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_json<V: Serialize>(path: &Path, value: &V) -> fpdg::Result<()> {
    atomically(path, |tmp| {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(tmp, text)?;
        Ok(())
    })
}

fn write_lines<V: Serialize>(path: &Path, items: impl IntoIterator<Item = V>) -> fpdg::Result<()> {
    atomically(path, |tmp| {
        let mut w = BufWriter::new(File::create(tmp)?);
        for item in items {
            serde_json::to_writer(&mut w, &item)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    })
}

fn sha256_file(path: &Path) -> fpdg::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn load_schema(explicit: Option<&Path>, beside: &Path) -> Result<AttributeSchema, Failure> {
    if let Some(p) = explicit {
        require(p)?;
        return Ok(AttributeSchema::load(p)?);
    }
    let p = sibling(beside, "schema.json");
    Ok(if p.exists() { AttributeSchema::load(&p)? } else { default_schema() })
}

fn load_vocab(explicit: Option<&Path>, beside: &Path, corpus: Option<&[Sample]>) -> Result<Vocab, Failure> {
    if let Some(p) = explicit {
        require(p)?;
        return Ok(Vocab::load(p)?);
    }
    let p = sibling(beside, "vocab.tsv");
    match corpus {
        _ if p.exists() => Ok(Vocab::load(&p)?),
        Some(c) => Ok(Vocab::build(c)?),
        None => Err(Failure::Usage(format!("no vocabulary found at {}", p.display()))),
    }
}

#[derive(Serialize)]
struct Manifest {
    format: &'static str,
    samples: usize,
    seed: u64,
    categories: usize,
    vocab_size: usize,
    vocab_fingerprint: String,
    entity_word_fraction: f64,
    files: BTreeMap<&'static str, String>,
}

pub fn gen_data(a: &GenDataArgs) -> Outcome {
    let schema = match &a.schema {
        Some(p) => {
            require(p)?;
            AttributeSchema::load(p)?
        }
        None => default_schema(),
    };
    let corpus = generate_corpus(&schema, a.n, a.seed)?;
    let vocab = if corpus.is_empty() { Vocab::reserved() } else { Vocab::build(&corpus)? };
    fs::create_dir_all(&a.out)?;

    let mut files = BTreeMap::new();
    let corpus_path = a.out.join("corpus.jsonl");
    atomically(&corpus_path, |tmp| write_corpus(tmp, &corpus))?;
    let vocab_path = a.out.join("vocab.tsv");
    atomically(&vocab_path, |tmp| vocab.save(tmp))?;
    let schema_path = a.out.join("schema.json");
    atomically(&schema_path, |tmp| schema.save(tmp))?;
    for (name, p) in [("corpus.jsonl", &corpus_path), ("vocab.tsv", &vocab_path), ("schema.json", &schema_path)] {
        files.insert(name, sha256_file(p)?);
    }
    let manifest = Manifest {
        format: "fpdg-data",
        samples: corpus.len(),
        seed: a.seed,
        categories: schema.num_categories(),
        vocab_size: vocab.len(),
        vocab_fingerprint: vocab.fingerprint(),
        entity_word_fraction: entity_word_fraction(&corpus, &schema),
        files,
    };
    write_json(&a.out.join("manifest.json"), &manifest)?;
    println!(
        "wrote {} samples, vocabulary of {} to {}",
        corpus.len(),
        vocab.len(),
        a.out.display()
    );
    Ok(())
}

/// Corpus, schema and vocabulary shared by every training run of a command.
struct TrainData {
    schema: AttributeSchema,
    vocab: Vocab,
    corpus: Vec<Sample>,
}

impl TrainData {
    fn load(paths: &DataPaths) -> Result<Self, Failure> {
        require(&paths.corpus)?;
        let corpus = read_corpus(&paths.corpus)?;
        if corpus.is_empty() {
            return Err(Failure::Usage(format!("corpus {} is empty", paths.corpus.display())));
        }
        let schema = load_schema(paths.schema.as_deref(), &paths.corpus)?;
        let vocab = load_vocab(paths.vocab.as_deref(), &paths.corpus, Some(&corpus))?;
        Ok(Self { schema, vocab, corpus })
    }

    fn save(&self, out: &Path) -> fpdg::Result<()> {
        fs::create_dir_all(out)?;
        atomically(&out.join("vocab.tsv"), |tmp| self.vocab.save(tmp))?;
        atomically(&out.join("schema.json"), |tmp| self.schema.save(tmp))
    }
}

/// Streams step metrics to `metrics.jsonl` and checkpoints every improvement.
struct RunLog {
    metrics: BufWriter<File>,
    checkpoint: PathBuf,
    meta: ModelMeta,
}

#[derive(Serialize)]
struct EpochLine {
    epoch: usize,
    val_loss: f64,
}

impl<T: Scalar> TrainObserver<T> for RunLog {
    fn on_step(&mut self, m: &StepMetrics) -> fpdg::Result<()> {
        serde_json::to_writer(&mut self.metrics, m)?;
        self.metrics.write_all(b"\n")?;
        if (m.step + 1) % 50 == 0 {
            self.metrics.flush()?;
            eprintln!("step {:>6}  loss {:.4}  lambda {:.2}", m.step + 1, m.loss, m.lambda);
        }
        Ok(())
    }

    fn on_best(&mut self, model: &Model<T>, epoch: usize, val_loss: Option<f64>) -> fpdg::Result<()> {
        self.meta.epoch = Some(epoch);
        self.meta.val_loss = val_loss;
        save_model(&self.checkpoint, model, &self.meta)
    }
}

#[derive(Serialize)]
struct RunSummary {
    variant: String,
    parameters: usize,
    steps: u64,
    best_epoch: usize,
    best_val_loss: Option<f64>,
}

fn run_variant<T: Scalar>(data: &TrainData, cfg: &TrainConfig, out: &Path) -> Result<RunSummary, Failure> {
    fs::create_dir_all(out)?;
    write_json(&out.join("config.json"), cfg)?;
    let encoded = encode_corpus(&data.corpus, &data.vocab, &data.schema, cfg.max_keywords, cfg.max_len)?;
    let (train_idx, val_idx) = split_indices(encoded.len(), cfg.val_fraction, cfg.seed);
    let pick = |idx: &[usize]| -> Vec<EncodedSample> { idx.iter().map(|&i| encoded[i].clone()).collect() };
    let heldout: Vec<Sample> = val_idx.iter().map(|&i| data.corpus[i].clone()).collect();
    atomically(&out.join("heldout.jsonl"), |tmp| write_corpus(tmp, &heldout))?;

    let model: Model<T> = Model::new(cfg.model_config(&data.vocab, &data.schema), cfg.seed)?;
    let parameters = model.census();
    let mut meta = ModelMeta::new(&model.config, &data.vocab, &data.schema);
    meta.train = Some(cfg.clone());
    let mut log = RunLog {
        metrics: BufWriter::new(File::create(out.join("metrics.jsonl"))?),
        checkpoint: out.join("model.ckpt"),
        meta,
    };
    let mut trainer = Trainer::new(model, cfg.clone())?;
    eprintln!(
        "training {} ({} parameters) on {} samples, {} held out",
        cfg.variant.name(),
        parameters,
        train_idx.len(),
        val_idx.len()
    );
    let result = train_loop(&mut trainer, &pick(&train_idx), &pick(&val_idx), &mut log);
    log.metrics.flush()?;
    let outcome = result?;
    for (epoch, &val_loss) in outcome.val_history.iter().enumerate() {
        serde_json::to_writer(&mut log.metrics, &EpochLine { epoch, val_loss })?;
        log.metrics.write_all(b"\n")?;
    }
    log.metrics.flush()?;
    Ok(RunSummary {
        variant: cfg.variant.name().to_string(),
        parameters,
        steps: outcome.steps,
        best_epoch: outcome.best_epoch,
        best_val_loss: outcome.best_val_loss,
    })
}

fn run(data: &TrainData, cfg: &TrainConfig, out: &Path) -> Result<RunSummary, Failure> {
    match cfg.precision {
        Precision::F32 => run_variant::<f32>(data, cfg, out),
        Precision::F64 => run_variant::<f64>(data, cfg, out),
    }
}

pub fn train(a: &TrainArgs) -> Outcome {
    let cfg = config::resolve(&a.overrides, a.variant.as_deref())?;
    let data = TrainData::load(&a.data)?;
    data.save(&a.out)?;
    let summary = run(&data, &cfg, &a.out)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

pub fn ablate(a: &AblateArgs) -> Outcome {
    let base = config::resolve(&a.overrides, None)?;
    let mut variants = Vec::with_capacity(a.variants.len());
    for name in &a.variants {
        let v = Variant::parse(name)?;
        if variants.contains(&v) {
            return Err(Failure::Usage(format!("variant `{name}` listed twice")));
        }
        variants.push(v);
    }
    if variants.is_empty() {
        return Err(Failure::Usage("no variants requested".into()));
    }
    let data = TrainData::load(&a.data)?;
    data.save(&a.out)?;
    let mut summaries = Vec::new();
    for variant in variants {
        let cfg = TrainConfig { variant, ..base.clone() };
        let dir = a.out.join(variant.name());
        data.save(&dir)?;
        summaries.push(run(&data, &cfg, &dir)?);
    }
    write_json(&a.out.join("ablation.json"), &summaries)?;
    for s in &summaries {
        println!("{:<16} {:>9} parameters  best val loss {:?}", s.variant, s.parameters, s.best_val_loss);
    }
    Ok(())
}

#[derive(Serialize)]
struct TraceLine<'a> {
    id: usize,
    #[serde(flatten)]
    step: &'a fpdg::decoding::StepTrace,
}

pub fn generate(a: &GenerateArgs) -> Outcome {
    require(&a.checkpoint)?;
    require(&a.corpus)?;
    let schema = load_schema(a.schema.as_deref(), &a.checkpoint)?;
    let vocab = load_vocab(a.vocab.as_deref(), &a.checkpoint, None)?;
    let (model, meta) = load_model::<f64>(&a.checkpoint)?;
    meta.check_compatible(&vocab, &schema)?;
    let cfg = DecodeConfig {
        beam: a.beam,
        min_len: a.min_len,
        max_len: a.max_len,
    };
    cfg.validate()?;
    let mut corpus = read_corpus(&a.corpus)?;
    if let Some(limit) = a.limit {
        corpus.truncate(limit);
    }
    let ids: Vec<usize> = (0..corpus.len()).collect();
    let mut records = batch_generate(&model, &vocab, &schema, &corpus, &ids, &cfg, a.trace)?;
    fs::create_dir_all(&a.out)?;
    if a.trace {
        let lines: Vec<TraceLine> = records
            .iter()
            .flat_map(|r| r.trace.iter().map(move |step| TraceLine { id: r.id, step }))
            .collect();
        write_lines(&a.out.join("trace.jsonl"), &lines)?;
        for r in &mut records {
            r.trace.clear();
        }
    }
    let path = a.out.join("generations.jsonl");
    atomically(&path, |tmp| write_generations(tmp, &records))?;
    println!("wrote {} generations to {}", records.len(), path.display());
    Ok(())
}

pub fn evaluate(a: &EvaluateArgs) -> Outcome {
    require(&a.generations)?;
    require(&a.corpus)?;
    let schema = load_schema(a.schema.as_deref(), &a.corpus)?;
    let corpus = read_corpus(&a.corpus)?;
    let records = read_generations(&a.generations)?;
    let mut report = EvalReport::compute(&records, &corpus, &schema, a.smoothing.into())?;

    if let Some(ckpt) = &a.checkpoint {
        require(ckpt)?;
        let vocab = load_vocab(a.vocab.as_deref(), ckpt, None)?;
        let (model, meta) = load_model::<f64>(ckpt)?;
        meta.check_compatible(&vocab, &schema)?;
        let train = meta.train.unwrap_or_default();
        let samples: Vec<Sample> = records.iter().map(|r| corpus[r.id].clone()).collect();
        let encoded = encode_corpus(&samples, &vocab, &schema, train.max_keywords, train.max_len)?;
        let batches = make_batches(&encoded, 32, schema.normal())?;
        let mut ks = a.recall_k.clone();
        ks.sort_unstable();
        ks.dedup();
        report.label_recall = Some(label_recall(&model, &batches, &ks)?);
    }

    fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("report.json"), &report)?;
    write_lines(&a.out.join("violations.jsonl"), &report.violations)?;
    let text = report.to_string();
    atomically(&a.out.join("report.txt"), |tmp| Ok(fs::write(tmp, &text)?))?;
    print!("{text}");
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> Outcome {
    let cfg = SuiteConfig {
        dim: a.dims,
        vocab_size: a.vocab,
        keywords: a.keywords,
        seed: a.seed,
        fault: a.inject_fault.map(|FaultArg::SigmoidSignFlip| Fault::SigmoidGradSignFlip),
        ..SuiteConfig::default()
    };
    let reports = run_suite(&cfg).map_err(|e| match e {
        Error::Config(m) => Failure::Usage(m),
        e => Failure::Core(e),
    })?;
    println!("{:<16} {:>12} {:>8} {:>8}  result", "component", "max rel err", "checked", "skipped");
    for r in &reports {
        println!(
            "{:<16} {:>12.3e} {:>8} {:>8}  {}",
            r.component,
            r.max_rel_error,
            r.checked,
            r.skipped,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    if let Some(out) = &a.out {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        write_json(out, &reports)?;
    }
    let failing: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.component.as_str()).collect();
    if failing.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient mismatch in {}", failing.join(", "))))
    }
}
