use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use stylemix::corpus::{build_vocab as collect_vocab, read_lines, tokenize, CorpusPair, Domain, NgramStats, Vocabulary};
use stylemix::inference::{
    ensure_trained, read_rows, transfer as transfer_one, write_rows, Decode, SamplingConfig, Scheme, TransferRow,
};
use stylemix::metrics::{
    detect_style_words, train_embeddings as fit_embeddings, train_style_classifier, ClassifierConfig,
    ContentScoreConfig, EmbeddingConfig, EmbeddingTable, Evaluator, TextClassifier, TransferValidator,
};
use stylemix::model::{load_checkpoint, save_checkpoint, CheckpointMeta, ModelConfig, ModelParams};
use stylemix::tensor::SgdConfig;
use stylemix::training::{self, EpochLog, LossToggles, LossWeights, TrainConfig};

use crate::settings::Settings;
use crate::{ClassifierArgs, CorpusArgs, EmbeddingArgs, EvalArgs, TrainArgs, TransferArgs};

fn parse_domain(s: &str) -> Result<Domain> {
    Domain::parse(s).ok_or_else(|| anyhow!("style must be 1 or 2, got {s:?}"))
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

/// Writes the resolved arguments next to an output file.
fn echo(out: &Path, settings: &Settings) -> Result<()> {
    let mut name = out.as_os_str().to_owned();
    name.push(".config");
    fs::write(&name, settings.to_text()).with_context(|| format!("writing {}", PathBuf::from(&name).display()))
}

fn load_corpus_texts(c: &CorpusArgs) -> Result<[Vec<String>; 2]> {
    Ok([read_lines(&c.corpus1)?, read_lines(&c.corpus2)?])
}

pub fn build_vocab(corpora: &CorpusArgs, out: &Path, min_count: usize) -> Result<()> {
    let vocab = collect_vocab([&corpora.corpus1, &corpora.corpus2], min_count)?;
    vocab.save(out)?;
    let [a, b] = load_corpus_texts(corpora)?;
    let tokens: usize = a.iter().chain(&b).map(|l| tokenize(l).len()).sum();
    println!(
        "{} sentences, {tokens} tokens, {} vocabulary entries ({} specials) -> {}",
        a.len() + b.len(),
        vocab.len(),
        stylemix::corpus::SPECIALS.len(),
        show(out)
    );
    Ok(())
}

const TRAIN_KEYS: [&str; 27] = [
    "corpus1",
    "corpus2",
    "vocab",
    "out_dir",
    "max_len",
    "dim",
    "seed",
    "epochs",
    "batch_size",
    "learning_rate",
    "decay_factor",
    "min_learning_rate",
    "d_steps",
    "convergence_window",
    "convergence_tolerance",
    "validation_fraction",
    "disable_loss",
    "weight_rec",
    "weight_back",
    "weight_mse",
    "weight_cls",
    "weight_adv",
    "validate",
    "validate_inputs",
    "checkpoint_every",
    "classifier_epochs",
    "embedding_dim",
];

/// Everything `train` needs, resolved and validated.
struct TrainSetup {
    corpus: [PathBuf; 2],
    vocab: PathBuf,
    out_dir: PathBuf,
    model: ModelConfig,
    train: TrainConfig,
    validate: bool,
    validate_inputs: usize,
    checkpoint_every: usize,
    classifier: ClassifierConfig,
    embedding: EmbeddingConfig,
    /// Every resolved value, defaults included.
    resolved: Settings,
}

fn resolve_train(s: &Settings) -> Result<TrainSetup> {
    s.check_known(&TRAIN_KEYS)?;
    let sgd_default = SgdConfig::default();
    let max_len: usize = s.get("max_len", stylemix::corpus::DEFAULT_MAX_LEN)?;
    let dim: usize = s.get("dim", 64)?;
    let seed: u64 = s.get("seed", 1)?;
    let mut toggles = LossToggles::default();
    let disabled = s.get_str("disable_loss").unwrap_or("").to_string();
    for name in disabled.split(',').map(str::trim).filter(|n| !n.is_empty()) {
        toggles.disable(name)?;
    }
    let train = TrainConfig {
        epochs: s.get("epochs", 50)?,
        batch_size: s.get("batch_size", 32)?,
        seed,
        sgd: SgdConfig {
            learning_rate: s.get("learning_rate", sgd_default.learning_rate)?,
            decay_factor: s.get("decay_factor", sgd_default.decay_factor)?,
            min_learning_rate: s.get("min_learning_rate", sgd_default.min_learning_rate)?,
        },
        toggles,
        weights: LossWeights {
            rec: s.get("weight_rec", 1.0)?,
            back: s.get("weight_back", 1.0)?,
            mse: s.get("weight_mse", 1.0)?,
            cls: s.get("weight_cls", 1.0)?,
            adv: s.get("weight_adv", 1.0)?,
        },
        d_steps_per_g_step: s.get("d_steps", 1)?,
        convergence_window: s.get("convergence_window", 3)?,
        convergence_tolerance: s.get("convergence_tolerance", 1.0)?,
        validation_fraction: s.get("validation_fraction", 0.1)?,
    };
    train.validate()?;
    let setup_classifier = ClassifierConfig {
        epochs: s.get("classifier_epochs", ClassifierConfig::default().epochs)?,
        seed,
        ..ClassifierConfig::default()
    };
    let embedding = EmbeddingConfig {
        dim: s.get("embedding_dim", EmbeddingConfig::default().dim)?,
        seed,
        ..EmbeddingConfig::default()
    };
    let validate: bool = s.get("validate", true)?;
    let validate_inputs: usize = s.get("validate_inputs", 100)?;
    if validate && (validate_inputs == 0 || train.validation_fraction == 0.0) {
        bail!("validation needs validate_inputs > 0 and validation_fraction > 0");
    }
    let checkpoint_every: usize = s.get("checkpoint_every", 10)?;

    let mut resolved = Settings::default();
    let corpus = [PathBuf::from(s.require("corpus1")?), PathBuf::from(s.require("corpus2")?)];
    let vocab = PathBuf::from(s.require("vocab")?);
    let out_dir = PathBuf::from(s.get_str("out_dir").unwrap_or("runs"));
    resolved.set("corpus1", show(&corpus[0]));
    resolved.set("corpus2", show(&corpus[1]));
    resolved.set("vocab", show(&vocab));
    resolved.set("out_dir", show(&out_dir));
    resolved.set("max_len", max_len);
    resolved.set("dim", dim);
    resolved.set("seed", seed);
    resolved.set("epochs", train.epochs);
    resolved.set("batch_size", train.batch_size);
    resolved.set("learning_rate", train.sgd.learning_rate);
    resolved.set("decay_factor", train.sgd.decay_factor);
    resolved.set("min_learning_rate", train.sgd.min_learning_rate);
    resolved.set("d_steps", train.d_steps_per_g_step);
    resolved.set("convergence_window", train.convergence_window);
    resolved.set("convergence_tolerance", train.convergence_tolerance);
    resolved.set("validation_fraction", train.validation_fraction);
    let t = &train.toggles;
    let off: Vec<&str> = [("rec", t.rec), ("back", t.back), ("mse", t.mse), ("cls", t.cls), ("adv", t.adv)]
        .iter()
        .filter(|(_, on)| !on)
        .map(|(n, _)| *n)
        .collect();
    resolved.set("disable_loss", off.join(","));
    let w = &train.weights;
    resolved.set("weight_rec", w.rec);
    resolved.set("weight_back", w.back);
    resolved.set("weight_mse", w.mse);
    resolved.set("weight_cls", w.cls);
    resolved.set("weight_adv", w.adv);
    resolved.set("validate", validate);
    resolved.set("validate_inputs", validate_inputs);
    resolved.set("checkpoint_every", checkpoint_every);
    resolved.set("classifier_epochs", setup_classifier.epochs);
    resolved.set("embedding_dim", embedding.dim);

    Ok(TrainSetup {
        corpus,
        vocab,
        out_dir,
        model: ModelConfig::new(0, dim, max_len, seed),
        train,
        validate,
        validate_inputs,
        checkpoint_every,
        classifier: setup_classifier,
        embedding,
        resolved,
    })
}

fn train_settings(a: &TrainArgs) -> Result<Settings> {
    let mut s = match &a.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    s.apply(&a.overrides)?;
    let paths = [
        ("corpus1", &a.corpus1),
        ("corpus2", &a.corpus2),
        ("vocab", &a.vocab),
        ("out_dir", &a.out_dir),
    ];
    for (k, v) in paths {
        if let Some(p) = v {
            s.set(k, show(p));
        }
    }
    if let Some(v) = a.epochs {
        s.set("epochs", v);
    }
    if let Some(v) = a.seed {
        s.set("seed", v);
    }
    if let Some(v) = a.dim {
        s.set("dim", v);
    }
    if !a.disable_loss.is_empty() {
        let mut all: Vec<String> = s
            .get_str("disable_loss")
            .unwrap_or("")
            .split(',')
            .map(|t| t.trim().to_string())
            .filter(|t| !t.is_empty())
            .collect();
        all.extend(a.disable_loss.iter().cloned());
        s.set("disable_loss", all.join(","));
    }
    Ok(s)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let setup = resolve_train(&train_settings(a)?)?;
    let vocab = Vocabulary::load(&setup.vocab)?;
    let corpus = CorpusPair::load([&setup.corpus[0], &setup.corpus[1]], vocab.clone(), setup.model.max_len)?;
    let model_config = ModelConfig {
        vocab_size: vocab.len(),
        ..setup.model
    };
    model_config.validate()?;
    let validator = if setup.validate {
        log::info!("training the validation scorers");
        let evaluator = Evaluator::train(&corpus, &setup.embedding, &setup.classifier, &ContentScoreConfig::default())?;
        evaluator
            .classifier
            .check_gate()
            .context("the validation style classifier is not accurate enough; set validate = false to train without it")?;
        Some(TransferValidator {
            evaluator,
            max_inputs: setup.validate_inputs,
        })
    } else {
        None
    };

    // the location is not part of the run identity
    let digest = setup.resolved.without("out_dir").digest();
    let run_dir = setup.out_dir.join(format!("run-{}", &digest[..12]));
    fs::create_dir_all(&run_dir).with_context(|| format!("creating {}", show(&run_dir)))?;
    fs::write(run_dir.join("config.txt"), setup.resolved.to_text())?;
    fs::write(run_dir.join("train.columns"), EpochLog::header() + "\n")?;
    let log_path = run_dir.join("train.log");
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", show(&log_path)))?);

    let mut params = ModelParams::new(model_config)?;
    let meta = |epochs| CheckpointMeta {
        vocab_fingerprint: Some(vocab.fingerprint()),
        trained_epochs: epochs,
    };
    let every = setup.checkpoint_every;
    let logs = training::train(
        &setup.train,
        &corpus,
        &mut params,
        validator.as_ref().map(|v| v as &dyn training::Validator),
        |entry, p| {
            writeln!(log, "{entry}").map_err(|e| stylemix::Error::Data(e.to_string()))?;
            log.flush().map_err(|e| stylemix::Error::Data(e.to_string()))?;
            if every > 0 && entry.epoch % every == 0 {
                save_checkpoint(p, &meta(entry.epoch), &run_dir.join(format!("epoch-{:04}.ckpt", entry.epoch)))?;
            }
            Ok(())
        },
    )?;
    let final_path = run_dir.join("final.ckpt");
    save_checkpoint(&params, &meta(logs.len()), &final_path)?;
    println!("{}", show(&run_dir));
    Ok(())
}

fn sampling_config(a: &TransferArgs) -> Result<SamplingConfig> {
    let scheme = match a.scheme.as_str() {
        "uniform" => Scheme::Uniform,
        "retrieval" => Scheme::Retrieval,
        other => bail!("unknown scheme {other:?} (uniform or retrieval)"),
    };
    let decode = match a.decode.as_str() {
        "greedy" => Decode::Greedy,
        "beam" => Decode::Beam,
        other => bail!("unknown decoder {other:?} (greedy or beam)"),
    };
    let c = SamplingConfig {
        scheme,
        pool_size: a.pool_size,
        num_variants: a.variants,
        seed: a.seed,
        decode,
        beam_width: a.beam_width,
        max_len: a.max_len,
    };
    c.validate()?;
    if scheme == Scheme::Retrieval && a.embeddings.is_none() {
        bail!("the retrieval scheme needs --embeddings");
    }
    Ok(c)
}

pub fn transfer(a: &TransferArgs) -> Result<()> {
    let source = parse_domain(&a.source)?;
    let config = sampling_config(a)?;
    let vocab = Vocabulary::load(&a.vocab)?;
    let (params, meta) = load_checkpoint(&a.checkpoint)?;
    if let Some(expected) = &meta.vocab_fingerprint {
        let found = vocab.fingerprint();
        if *expected != found {
            bail!(
                "vocabulary mismatch: {} was trained with vocabulary {expected}, but {} hashes to {found}",
                show(&a.checkpoint),
                show(&a.vocab)
            );
        }
    }
    ensure_trained(&meta)?;
    let embeddings = a.embeddings.as_deref().map(EmbeddingTable::load).transpose()?;

    let limit = params.config.max_len;
    let inputs = read_lines(&a.input)?;
    let encoded: Vec<Vec<usize>> = inputs.iter().map(|l| vocab.ids(l)).collect();
    if let Some((n, _)) = encoded.iter().enumerate().find(|(_, ids)| ids.is_empty() || ids.len() > limit) {
        bail!("{} sentence {}: inputs must have 1 to {limit} tokens", show(&a.input), n + 1);
    }
    let targets: Vec<Vec<usize>> = read_lines(&a.target_corpus)?
        .iter()
        .map(|l| vocab.ids(l))
        .filter(|ids| !ids.is_empty() && ids.len() <= limit)
        .collect();

    let mut rows = Vec::with_capacity(inputs.len() * config.num_variants);
    for (i, (line, ids)) in inputs.iter().zip(&encoded).enumerate() {
        let cfg = SamplingConfig {
            seed: config.seed.wrapping_add(i as u64),
            ..config
        };
        for v in transfer_one(&params, &vocab, ids, source, &targets, &cfg, embeddings.as_ref())? {
            rows.push(TransferRow {
                input: line.clone(),
                variant: v.index,
                donor: v.donor,
                output: vocab.decode(&v.tokens),
            });
        }
    }
    let file = File::create(&a.out).with_context(|| format!("creating {}", show(&a.out)))?;
    let mut w = BufWriter::new(file);
    write_rows(&mut w, &rows)?;
    w.flush()?;

    let mut echoed = Settings::default();
    echoed.set("checkpoint", show(&a.checkpoint));
    echoed.set("vocab", show(&a.vocab));
    echoed.set("input", show(&a.input));
    echoed.set("source", &a.source);
    echoed.set("target_corpus", show(&a.target_corpus));
    echoed.set("variants", a.variants);
    echoed.set("scheme", &a.scheme);
    echoed.set("pool_size", a.pool_size);
    echoed.set("seed", a.seed);
    echoed.set("decode", &a.decode);
    echoed.set("beam_width", a.beam_width);
    echoed.set("max_len", a.max_len);
    if let Some(e) = &a.embeddings {
        echoed.set("embeddings", show(e));
    }
    echo(&a.out, &echoed)?;
    log::info!("wrote {} rows to {}", rows.len(), show(&a.out));
    Ok(())
}

/// Consecutive rows sharing an input form one group; a variant index of 0 starts a new one.
fn group_rows(rows: &[TransferRow]) -> Vec<(Vec<String>, Vec<Vec<String>>)> {
    let mut groups: Vec<(String, Vec<Vec<String>>)> = Vec::new();
    for r in rows {
        match groups.last_mut() {
            Some((input, outs)) if *input == r.input && r.variant != 0 => outs.push(tokenize(&r.output)),
            _ => groups.push((r.input.clone(), vec![tokenize(&r.output)])),
        }
    }
    groups.into_iter().map(|(i, o)| (tokenize(&i), o)).collect()
}

fn texts_of(lines: &[String]) -> Vec<Vec<String>> {
    lines.iter().map(|l| tokenize(l)).collect()
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let target = parse_domain(&a.target)?;
    let content_config = ContentScoreConfig {
        lambda: a.lambda,
        threshold: a.threshold,
        n: 1,
    };
    content_config.validate()?;
    let rows = read_rows(BufReader::new(
        File::open(&a.predictions).with_context(|| format!("opening {}", show(&a.predictions)))?,
    ))?;
    if rows.is_empty() {
        bail!("{} holds no predictions", show(&a.predictions));
    }
    let [c1, c2] = load_corpus_texts(&a.corpora)?;
    let texts = [texts_of(&c1), texts_of(&c2)];

    let existing = |p: &Option<PathBuf>| p.as_ref().filter(|p| p.exists()).cloned();
    let missing = |what: &str, p: &Option<PathBuf>| {
        anyhow!(
            "no {what} at {}; pass --train-missing to train one in-line",
            p.as_ref().map_or("(not given)".to_string(), |p| show(p))
        )
    };
    let embeddings = match existing(&a.embeddings) {
        Some(p) => EmbeddingTable::load(&p)?,
        None if a.train_missing => {
            let all: Vec<Vec<String>> = texts.iter().flatten().cloned().collect();
            let t = fit_embeddings(
                &all,
                &EmbeddingConfig {
                    seed: a.seed,
                    ..EmbeddingConfig::default()
                },
            )?;
            if let Some(p) = &a.embeddings {
                t.save(p)?;
            }
            t
        }
        None => return Err(missing("embeddings", &a.embeddings)),
    };
    let classifier = match existing(&a.classifier) {
        Some(p) => TextClassifier::load(&p)?,
        None if a.train_missing => {
            let vocab = match &a.vocab {
                Some(p) => Vocabulary::load(p)?,
                None => Vocabulary::from_sentences(c1.iter().chain(&c2), 1)?,
            };
            let corpus = CorpusPair::from_sentences(vocab, &c1, &c2, stylemix::corpus::DEFAULT_MAX_LEN)?;
            let c = train_style_classifier(
                &corpus,
                &ClassifierConfig {
                    seed: a.seed,
                    ..ClassifierConfig::default()
                },
            )?;
            if let Some(p) = &a.classifier {
                c.save(p)?;
            }
            c
        }
        None => return Err(missing("classifier", &a.classifier)),
    };
    let gate = classifier.check_gate();
    let stats = NgramStats::new(&texts[0], &texts[1], content_config.n);
    let style_words: BTreeSet<String> = detect_style_words(&stats, &content_config)?;
    let evaluator = Evaluator {
        classifier,
        embeddings,
        style_words,
    };
    let report = evaluator.report(&group_rows(&rows), target)?;
    report.save(&a.out)?;
    print!("{}", report.to_kv_string());
    if let Err(e) = gate {
        eprintln!("style score withheld: {e}");
    }

    let mut echoed = Settings::default();
    echoed.set("predictions", show(&a.predictions));
    echoed.set("target", &a.target);
    echoed.set("corpus1", show(&a.corpora.corpus1));
    echoed.set("corpus2", show(&a.corpora.corpus2));
    echoed.set("lambda", a.lambda);
    echoed.set("threshold", a.threshold);
    echoed.set("seed", a.seed);
    echoed.set("train_missing", a.train_missing);
    if let Some(p) = &a.embeddings {
        echoed.set("embeddings", show(p));
    }
    if let Some(p) = &a.classifier {
        echoed.set("classifier", show(p));
    }
    echo(&a.out, &echoed)
}

pub fn train_embeddings(a: &EmbeddingArgs) -> Result<()> {
    let config = EmbeddingConfig {
        dim: a.dim,
        window: a.window,
        negatives: a.negatives,
        epochs: a.epochs,
        learning_rate: a.learning_rate,
        seed: a.seed,
    };
    let [c1, c2] = load_corpus_texts(&a.corpora)?;
    let all: Vec<Vec<String>> = texts_of(&c1).into_iter().chain(texts_of(&c2)).collect();
    let table = fit_embeddings(&all, &config)?;
    table.save(&a.out)?;
    println!("{} vectors of dimension {} -> {}", table.len(), table.dim(), show(&a.out));
    let mut echoed = Settings::default();
    echoed.set("corpus1", show(&a.corpora.corpus1));
    echoed.set("corpus2", show(&a.corpora.corpus2));
    echoed.set("dim", a.dim);
    echoed.set("window", a.window);
    echoed.set("negatives", a.negatives);
    echoed.set("epochs", a.epochs);
    echoed.set("learning_rate", a.learning_rate);
    echoed.set("seed", a.seed);
    echo(&a.out, &echoed)
}

pub fn train_classifier(a: &ClassifierArgs) -> Result<()> {
    let [c1, c2] = load_corpus_texts(&a.corpora)?;
    let vocab = match &a.vocab {
        Some(p) => Vocabulary::load(p)?,
        None => Vocabulary::from_sentences(c1.iter().chain(&c2), 1)?,
    };
    let corpus = CorpusPair::from_sentences(vocab, &c1, &c2, a.max_len)?;
    let config = ClassifierConfig {
        epochs: a.epochs,
        seed: a.seed,
        ..ClassifierConfig::default()
    };
    let c = train_style_classifier(&corpus, &config)?;
    c.save(&a.out)?;
    println!(
        "validation accuracy {:.2}% -> {}",
        100.0 * c.validation_accuracy(),
        show(&a.out)
    );
    if let Err(e) = c.check_gate() {
        eprintln!("warning: {e}; style scores from this classifier will be withheld");
    }
    let mut echoed = Settings::default();
    echoed.set("corpus1", show(&a.corpora.corpus1));
    echoed.set("corpus2", show(&a.corpora.corpus2));
    if let Some(p) = &a.vocab {
        echoed.set("vocab", show(p));
    }
    echoed.set("epochs", a.epochs);
    echoed.set("seed", a.seed);
    echoed.set("max_len", a.max_len);
    echo(&a.out, &echoed)
}
