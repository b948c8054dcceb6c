use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use kesa_core::corpus::{encode_all, load_dataset, load_split};
use kesa_core::lexicon::{parse_sentiwordnet, ParseMode, SentimentLexicon};
use kesa_core::model::Checkpoint;
use kesa_core::synth::{self, SynthConfig};
use kesa_core::tasks::AuxInstances;
use kesa_core::trainer::{evaluate, train_with_observer, MetricsRecord, RunSummary, TrainObserver};
use serde::Serialize;

use crate::config::RunConfigFile;
use crate::error::CliError;

pub fn lexicon_build(input: &Path, output: &Path, strict: bool) -> Result<(), CliError> {
    let file = File::open(input).map_err(CliError::io(input))?;
    let mode = if strict { ParseMode::Strict } else { ParseMode::Lenient };
    let parsed = parse_sentiwordnet(BufReader::new(file), mode)?;
    for err in &parsed.skipped {
        log::warn!("{}: skipped {err}", input.display());
    }
    let (lexicon, report) = SentimentLexicon::build(&parsed.entries);
    let mut out = BufWriter::new(File::create(output).map_err(CliError::io(output))?);
    lexicon.write_tsv(&mut out).map_err(CliError::io(output))?;
    out.flush().map_err(CliError::io(output))?;
    println!(
        "kept {} words, dropped {} neutral, skipped {} malformed lines",
        report.kept,
        report.dropped_neutral,
        parsed.skipped.len()
    );
    Ok(())
}

pub fn read_lexicon(path: &Path) -> Result<SentimentLexicon, CliError> {
    let file = File::open(path).map_err(CliError::io(path))?;
    Ok(SentimentLexicon::read_tsv(BufReader::new(file))?)
}

#[derive(Serialize)]
struct InstanceDump<'a> {
    seed: u64,
    epoch: usize,
    sample: usize,
    #[serde(flatten)]
    instances: &'a AuxInstances,
}

/// Streams metrics (and optionally drawn instances) to disk as training
/// runs. The first write error is kept and reported afterwards.
struct FileObserver {
    metrics: BufWriter<File>,
    metrics_path: PathBuf,
    dump: Option<(BufWriter<File>, PathBuf)>,
    error: Option<CliError>,
}

impl FileObserver {
    fn write_line<T: Serialize>(w: &mut BufWriter<File>, value: &T) -> std::io::Result<()> {
        serde_json::to_writer(&mut *w, value)?;
        w.write_all(b"\n")
    }

    fn keep(&mut self, result: std::io::Result<()>, path: &Path) {
        if let (Err(e), None) = (result, &self.error) {
            self.error = Some(CliError::Io {
                path: path.to_path_buf(),
                source: e,
            });
        }
    }

    fn finish(mut self, summary: &RunSummary) -> Result<(), CliError> {
        let r = Self::write_line(&mut self.metrics, summary).and_then(|_| self.metrics.flush());
        self.keep(r, &self.metrics_path.clone());
        if let Some((w, path)) = self.dump.as_mut() {
            let r = w.flush();
            let path = path.clone();
            self.keep(r, &path);
        }
        self.error.map_or(Ok(()), Err)
    }
}

impl TrainObserver for FileObserver {
    fn on_record(&mut self, record: &MetricsRecord) {
        let r = Self::write_line(&mut self.metrics, record);
        let path = self.metrics_path.clone();
        self.keep(r, &path);
    }

    fn on_instances(&mut self, seed: u64, epoch: usize, sample: usize, instances: &AuxInstances) {
        if let Some((w, path)) = self.dump.as_mut() {
            let r = Self::write_line(
                w,
                &InstanceDump {
                    seed,
                    epoch,
                    sample,
                    instances,
                },
            );
            let path = path.clone();
            self.keep(r, &path);
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(path).map_err(CliError::io(path))?))
}

/// Runs every seed of `config` and writes `metrics.jsonl`, `summary.json`
/// and `seed-N/best.ckpt` under the configured output directory.
pub fn run_training(config: &RunConfigFile, dump: Option<&Path>) -> Result<RunSummary, CliError> {
    let paths = &config.paths;
    let splits = load_dataset(&paths.train, &paths.valid, &paths.test, paths.classes)?;
    let lexicon = match &paths.lexicon {
        Some(p) => read_lexicon(p)?,
        None => SentimentLexicon::default(),
    };
    fs::create_dir_all(&paths.output).map_err(CliError::io(&paths.output))?;
    let metrics_path = paths.output.join("metrics.jsonl");
    let mut observer = FileObserver {
        metrics: create(&metrics_path)?,
        metrics_path,
        dump: dump.map(|p| create(p).map(|w| (w, p.to_path_buf()))).transpose()?,
        error: None,
    };
    let outcome = train_with_observer(&config.training, &splits, &lexicon, &mut observer)?;
    observer.finish(&outcome.summary)?;

    let training = serde_json::to_value(&config.training).expect("config serializes");
    for run in &outcome.runs {
        let dir = paths.output.join(format!("seed-{}", run.seed));
        fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;
        let mut meta = training.clone();
        meta["seed"] = run.seed.into();
        meta["best_epoch"] = run.best_epoch.into();
        let ckpt = Checkpoint {
            model: run.model.clone(),
            vocab: outcome.vocab.clone(),
            training: meta,
        };
        let path = dir.join("best.ckpt");
        let mut w = create(&path)?;
        ckpt.write_to(&mut w)?;
        w.flush().map_err(CliError::io(&path))?;
    }
    let summary_path = paths.output.join("summary.json");
    let mut text = serde_json::to_string_pretty(&outcome.summary).expect("summary serializes");
    text.push('\n');
    fs::write(&summary_path, text).map_err(CliError::io(&summary_path))?;
    Ok(outcome.summary)
}

pub fn train(config: &Path, seed_override: Option<u64>, dump: Option<&Path>) -> Result<(), CliError> {
    let mut cfg = RunConfigFile::load(config)?;
    if let Some(seed) = seed_override {
        cfg.training.seeds = vec![seed];
    }
    let summary = run_training(&cfg, dump)?;
    println!(
        "test accuracy {:.4} ± {:.4} over {} seed(s); outputs in {}",
        summary.mean,
        summary.stddev,
        summary.seeds.len(),
        cfg.paths.output.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalRecord<'a> {
    checkpoint: &'a Path,
    data: &'a Path,
    examples: usize,
    accuracy: f64,
    main_loss: f64,
}

pub fn eval(checkpoint: &Path, data: &Path, output: Option<&Path>) -> Result<(), CliError> {
    let file = File::open(checkpoint).map_err(CliError::io(checkpoint))?;
    let ckpt = Checkpoint::read_from(BufReader::new(file))?;
    let classes = ckpt.model.config().classes;
    let sentences = load_split(data, Some(classes))?;
    let max_len = ckpt.training.get("max_len").and_then(|v| v.as_u64()).unwrap_or(128) as usize;
    let samples = encode_all(&sentences, &ckpt.vocab, max_len);
    let result = evaluate(&ckpt.model, &samples).map_err(kesa_core::trainer::TrainError::from)?;
    println!("accuracy {:.4}", result.accuracy);
    let record = EvalRecord {
        checkpoint,
        data,
        examples: samples.len(),
        accuracy: result.accuracy,
        main_loss: result.main_loss,
    };
    let out = output.map_or_else(|| checkpoint.with_extension("eval.json"), Path::to_path_buf);
    let mut text = serde_json::to_string(&record).expect("record serializes");
    text.push('\n');
    fs::write(&out, text).map_err(CliError::io(&out))
}

#[derive(Serialize)]
struct SweepRow {
    gamma: f64,
    mean: Option<f64>,
    stddev: Option<f64>,
    error: Option<String>,
}

pub fn sweep(config: &Path, gammas: &[f64]) -> Result<(), CliError> {
    if gammas.is_empty() {
        return Err(CliError::Usage("--gammas needs at least one value".into()));
    }
    let base = RunConfigFile::load(config)?;
    for &g in gammas {
        let mut probe = base.training.clone();
        probe.gamma = g;
        probe
            .validate()
            .map_err(|e| CliError::Usage(format!("gamma {g}: {}", e.reason)))?;
    }
    let root = base.paths.output.clone();
    let mut rows = Vec::with_capacity(gammas.len());
    let mut first_failure = None;
    for &gamma in gammas {
        let mut cfg = base.clone();
        cfg.training.gamma = gamma;
        cfg.paths.output = root.join(format!("gamma-{gamma}"));
        log::info!("sweep: gamma {gamma}");
        match run_training(&cfg, None) {
            Ok(s) => rows.push(SweepRow {
                gamma,
                mean: Some(s.mean),
                stddev: Some(s.stddev),
                error: None,
            }),
            Err(e) => {
                log::error!("sweep: gamma {gamma} failed: {e}");
                first_failure.get_or_insert(e.exit_code());
                rows.push(SweepRow {
                    gamma,
                    mean: None,
                    stddev: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }

    let mut table = String::from("gamma\tmean\tstddev\n");
    let mut jsonl = String::new();
    for r in &rows {
        match (r.mean, r.stddev) {
            (Some(m), Some(s)) => table.push_str(&format!("{}\t{m:.4}\t{s:.4}\n", r.gamma)),
            _ => table.push_str(&format!("{}\tfailed\t-\n", r.gamma)),
        }
        jsonl.push_str(&serde_json::to_string(r).expect("row serializes"));
        jsonl.push('\n');
    }
    print!("{table}");
    let tsv = root.join("sweep.tsv");
    fs::write(&tsv, &table).map_err(CliError::io(&tsv))?;
    let js = root.join("sweep.jsonl");
    fs::write(&js, jsonl).map_err(CliError::io(&js))?;
    match first_failure {
        None => Ok(()),
        Some(code) => Err(CliError::Sweep {
            failed: rows.iter().filter(|r| r.error.is_some()).count(),
            total: rows.len(),
            code,
        }),
    }
}

pub struct SynthArgs<'a> {
    pub out: &'a Path,
    pub lexicon: Option<&'a Path>,
    pub config: SynthConfig,
}

pub fn synth(args: SynthArgs<'_>) -> Result<(), CliError> {
    let lexicon = match args.lexicon {
        Some(p) => read_lexicon(p)?,
        None => synth::default_lexicon(),
    };
    let corpus = synth::generate(&args.config, &lexicon)?;
    fs::create_dir_all(args.out).map_err(CliError::io(args.out))?;
    for (name, split) in [("train", &corpus.train), ("valid", &corpus.valid), ("test", &corpus.test)] {
        let path = args.out.join(format!("{name}.tsv"));
        fs::write(&path, synth::to_tsv(split)).map_err(CliError::io(&path))?;
    }
    let path = args.out.join("lexicon.tsv");
    let mut w = create(&path)?;
    lexicon.write_tsv(&mut w).map_err(CliError::io(&path))?;
    w.flush().map_err(CliError::io(&path))?;
    println!(
        "wrote {}/{}/{} examples to {}",
        corpus.train.len(),
        corpus.valid.len(),
        corpus.test.len(),
        args.out.display()
    );
    Ok(())
}

