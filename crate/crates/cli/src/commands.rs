use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use kgned::candidates::{LabelIndex, MatchMode};
use kgned::context::{verbalize, ContextConfig};
use kgned::datasets::{load_jsonl, write_jsonl, Alignment, ContextPipeline, FieldMapping, MentionExample};
use kgned::eval::{flip_analysis, inkb_accuracy, predictions_map, read_predictions, write_predictions, Report};
use kgned::experiment::{evaluate, gold_map, predict_examples, train_on_examples, Protocol};
use kgned::kg::sparql::{fetch_many, EntityOutcome, FetchOptions, HttpTransport, KgCache};
use kgned::kg::{EntityId, HopSet, LabelKind, TripleStore};
use kgned::model::{predict, Checkpoint, ModelConfig, TrainConfig};
use kgned::synthetic::{generate, SyntheticConfig};
use kgned::tokenize::{Mention, Vocab};
use kgned::{Error, Result};

use crate::config::FileLayer;
use crate::{Cli, Command, ContextArgs, ConvertArgs, DiffArgs, DisambiguateArgs, EvalArgs, FetchArgs, SynthArgs, TrainArgs};

pub fn run(cli: Cli) -> Result<u8> {
    let layer = match &cli.config {
        Some(p) => FileLayer::load(p)?,
        None => FileLayer::default(),
    };
    match cli.command {
        Command::Fetch(a) => fetch(&layer, a),
        Command::Train(a) => train(&layer, a),
        Command::Eval(a) => eval(&layer, a),
        Command::Diff(a) => diff(a),
        Command::Disambiguate(a) => disambiguate(&layer, a),
        Command::Synth(a) => synth(&layer, a),
        Command::Convert(a) => convert(a),
    }
}

fn read_entities(path: &Path) -> Result<Vec<EntityId>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))?;
    let mut ids = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let id = EntityId::new(line).map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if !ids.contains(&id) {
            ids.push(id);
        }
    }
    Ok(ids)
}

fn fetch(layer: &FileLayer, a: FetchArgs) -> Result<u8> {
    let endpoint: String = layer
        .pick_opt(a.endpoint, "endpoint")?
        .ok_or_else(|| Error::Config("an endpoint is required (--endpoint or KGNED_ENDPOINT)".into()))?;
    let opts = FetchOptions {
        hops: layer.pick(a.hops, "hops", HopSet::One)?,
        cap: layer.pick(a.cap, "cap", 50)?,
        lang: layer.pick(a.lang, "lang", "en".to_owned())?,
    };
    let parallelism = layer.pick(a.parallelism, "parallelism", 4)?;
    let entities = read_entities(&a.entities)?;
    if entities.is_empty() {
        log::info!("no entities to fetch");
        return Ok(0);
    }
    let transport = HttpTransport::new(endpoint)?;
    let outcomes = fetch_many(&transport, &entities, &opts, &KgCache::new(&a.out), parallelism)?;
    let (mut attempted, mut failed) = (0, 0);
    for (id, outcome) in &outcomes {
        match outcome {
            EntityOutcome::Cached => println!("{id}\tcached"),
            EntityOutcome::Fetched { triples } => {
                attempted += 1;
                println!("{id}\tfetched\t{triples}");
            }
            EntityOutcome::Failed(e) => {
                attempted += 1;
                failed += 1;
                println!("{id}\tfailed\t{e}");
            }
        }
    }
    if attempted > 0 && failed == attempted {
        eprintln!("error: all {failed} fetches failed");
        return Ok(3);
    }
    Ok(0)
}

fn context_config(layer: &FileLayer, a: &ContextArgs) -> Result<ContextConfig> {
    let d = ContextConfig::default();
    let cfg = ContextConfig {
        hops: layer.pick(a.ctx_hops, "ctx_hops", d.hops)?,
        max_triples: layer.pick(a.max_triples, "max_triples", d.max_triples)?,
        max_seq_len: layer.pick(a.max_seq_len, "max_seq_len", d.max_seq_len)?,
        include_sentence: d.include_sentence,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Loads the KG directory. It may only be omitted when no context is used.
fn load_store(dir: Option<&PathBuf>, max_triples: usize) -> Result<Option<TripleStore>> {
    match dir {
        Some(d) if d.is_dir() => Ok(Some(TripleStore::load_dir(d)?)),
        Some(d) => Err(Error::Config(format!("KG directory {} does not exist", d.display()))),
        None if max_triples == 0 => Ok(None),
        None => Err(Error::Config("--kg is required when max_triples is above 0".into())),
    }
}

fn model_config(layer: &FileLayer, path: Option<&PathBuf>, vocab: &Vocab, ctx: &ContextConfig) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::for_context(vocab.len(), ctx);
    cfg.d_model = layer.pick(None, "d_model", cfg.d_model)?;
    cfg.n_layers = layer.pick(None, "n_layers", cfg.n_layers)?;
    cfg.n_heads = layer.pick(None, "n_heads", cfg.n_heads)?;
    cfg.ffn_dim = layer.pick(None, "ffn_dim", cfg.ffn_dim)?;
    cfg.dropout = layer.pick(None, "dropout", cfg.dropout)?;
    if let Some(path) = path {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))?;
        let obj: serde_json::Map<String, Value> = serde_json::from_str(&text)?;
        for (k, v) in obj {
            let bad = || Error::Config(format!("model config {}: bad value for {k}", path.display()));
            let as_usize = || v.as_u64().map(|n| n as usize).ok_or_else(bad);
            match k.as_str() {
                "d_model" => cfg.d_model = as_usize()?,
                "n_layers" => cfg.n_layers = as_usize()?,
                "n_heads" => cfg.n_heads = as_usize()?,
                "ffn_dim" => cfg.ffn_dim = as_usize()?,
                "dropout" => cfg.dropout = v.as_f64().ok_or_else(bad)?,
                other => {
                    return Err(Error::Config(format!("model config {}: unknown field {other}", path.display())));
                }
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Every sentence of the data plus every verbalized triple of the store.
fn build_vocab(examples: &[MentionExample], store: Option<&TripleStore>) -> Result<Vocab> {
    let mut texts: Vec<String> = examples.iter().map(|e| e.mention.sentence.text.clone()).collect();
    if let Some(store) = store {
        texts.extend(store.triples().map(|t| verbalize(store, t).text));
    }
    Vocab::build(texts, 1)
}

fn history_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".history.json");
    PathBuf::from(name)
}

fn train(layer: &FileLayer, a: TrainArgs) -> Result<u8> {
    let ctx = context_config(layer, &a.context)?;
    let examples = load_jsonl(&a.data)?;
    let store = load_store(a.kg.as_ref(), ctx.max_triples)?;
    let vocab = if a.vocab.exists() {
        Vocab::load(&a.vocab)?
    } else {
        let v = build_vocab(&examples, store.as_ref())?;
        v.save(&a.vocab)?;
        log::info!("wrote vocabulary of {} entries to {}", v.len(), a.vocab.display());
        v
    };
    let model_cfg = model_config(layer, a.model_cfg.as_ref(), &vocab, &ctx)?;
    let d = TrainConfig::default();
    let train_cfg = TrainConfig {
        learning_rate: layer.pick(a.lr, "lr", d.learning_rate)?,
        batch_size: layer.pick(a.batch_size, "batch_size", d.batch_size)?,
        epochs: layer.pick(a.epochs, "epochs", d.epochs)?,
        seed: layer.pick(a.seed, "seed", d.seed)?,
        warmup_frac: layer.pick(a.warmup, "warmup", d.warmup_frac)?,
        ..d
    };
    let store = if ctx.max_triples == 0 { None } else { store };
    let pipeline = ContextPipeline::new(store.as_ref(), &vocab, ctx.clone());
    let (model, history) = train_on_examples(&pipeline, &examples, &model_cfg, &train_cfg)?;
    Checkpoint::new(model, vocab, ctx, Some(train_cfg))?.save(&a.out)?;
    let hist = serde_json::to_string_pretty(&history)?;
    let hist_path = history_path(&a.out);
    fs::write(&hist_path, hist + "\n").map_err(|e| Error::Config(format!("writing {}: {e}", hist_path.display())))?;
    println!(
        "trained {} epochs, final loss {:.6}; checkpoint {}",
        history.len(),
        history.last().copied().unwrap_or(f64::NAN),
        a.out.display()
    );
    Ok(0)
}

fn write_report(path: &Path, report: &Report) -> Result<()> {
    fs::write(path, report.to_json()? + "\n").map_err(|e| Error::Config(format!("writing {}: {e}", path.display())))
}

fn eval(layer: &FileLayer, a: EvalArgs) -> Result<u8> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let protocol = layer.pick(a.protocol, "protocol", Protocol::Argmax)?;
    let store = load_store(a.kg.as_ref(), ck.context.max_triples)?;
    let store = if ck.context.max_triples == 0 { None } else { store };
    let examples = load_jsonl(&a.data)?;
    let pipeline = ContextPipeline::new(store.as_ref(), &ck.vocab, ck.context.clone());
    let config = json!({
        "data": a.data,
        "checkpoint": a.checkpoint,
        "protocol": protocol,
        "context": ck.context,
        "model": ck.model.config(),
        "train": ck.train,
    });
    let report = Report::new(ck.train.as_ref().map(|t| t.seed), config);
    let ev = evaluate(&ck.model, &pipeline, &examples, protocol, report)?;
    write_report(&a.report, &ev.report)?;
    if let Some(p) = &a.predictions {
        let preds = match protocol {
            Protocol::Argmax => ev.predictions.clone(),
            Protocol::Pairs => predict_examples(&ck.model, &pipeline, &examples)?,
        };
        write_predictions(p, &preds)?;
    }
    print!("{}", ev.report.table());
    Ok(0)
}

fn diff(a: DiffArgs) -> Result<u8> {
    let before = predictions_map(&read_predictions(&a.before)?)?;
    let after = predictions_map(&read_predictions(&a.after)?)?;
    let gold = gold_map(&load_jsonl(&a.gold)?)?;
    let flips = flip_analysis(&before, &after, &gold)?;
    let mut report = Report::new(None, json!({ "before": a.before, "after": a.after, "gold": a.gold }));
    report
        .metric("inkb_accuracy_before", inkb_accuracy(&before, &gold)?)
        .metric("inkb_accuracy_after", inkb_accuracy(&after, &gold)?)
        .count("mentions", gold.len())
        .count("wrong_to_right", flips.wrong_to_right.len())
        .count("right_to_wrong", flips.right_to_wrong.len());
    report.flips = Some(flips);
    write_report(&a.report, &report)?;
    print!("{}", report.table());
    Ok(0)
}

fn disambiguate(layer: &FileLayer, a: DisambiguateArgs) -> Result<u8> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let store = load_store(Some(&a.kg), ck.context.max_triples)?.expect("directory given");
    let mode = layer.pick(a.match_mode, "match", MatchMode::Exact)?;
    let candidates = LabelIndex::build(&store).lookup(&a.surface, mode);
    if candidates.is_empty() {
        println!("no candidates");
        return Ok(0);
    }
    let mention = Mention::find(a.sentence, &a.surface)?;
    let pipeline = ContextPipeline::new(Some(&store), &ck.vocab, ck.context.clone());
    let prediction = predict(&ck.model, &pipeline, &mention, &candidates.entities)?;
    for (rank, (id, score)) in prediction.ranked.iter().enumerate() {
        let description = store
            .labels(id.as_str())
            .into_iter()
            .find(|l| l.kind == LabelKind::Description)
            .map(|l| l.label)
            .unwrap_or_default();
        println!("{}\t{id}\t{score:.4}\t{}\t{description}", rank + 1, store.primary_label(id.as_str()));
    }
    Ok(0)
}

fn synth(layer: &FileLayer, a: SynthArgs) -> Result<u8> {
    let cfg = SyntheticConfig {
        n_labels: a.labels,
        train_mentions: a.train,
        test_mentions: a.test,
        two_hop_distractors: a.distractors,
        seed: layer.pick(a.seed, "seed", SyntheticConfig::default().seed)?,
    };
    let corpus = generate(&cfg)?;
    corpus.write(&a.out)?;
    println!(
        "{} entities, {} labels, {} train and {} test mentions written to {}",
        corpus.entities.len(),
        corpus.labels.len(),
        corpus.train.len(),
        corpus.test.len(),
        a.out.display()
    );
    Ok(0)
}

fn convert(a: ConvertArgs) -> Result<u8> {
    let mapping = FieldMapping::load(&a.mapping)?;
    let alignment = a.alignment.as_deref().map(Alignment::load).transpose()?;
    let examples = mapping.convert(&a.input, alignment.as_ref())?;
    write_jsonl(&a.out, &examples)?;
    let missing = examples.iter().filter(|e| e.gold_missing()).count();
    println!("{} mentions written to {} ({missing} with a gold entity outside the candidates)", examples.len(), a.out.display());
    Ok(0)
}
