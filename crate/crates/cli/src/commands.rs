use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ghost_core::attacks::{
    adaptive_recover_with, embedding_leakage_attack, gradient_matching_attack, AttackRecord, AttackResult, DummyInit,
    MatchConfig, Strategy,
};
use ghost_core::corpus::{
    detokenize, load_dataset, load_embeddings, load_lemmas, read_jsonl, to_records, to_sentences, tokenize,
    write_dataset, write_embeddings, write_jsonl, write_lemmas, EmbeddingTable, LabeledSentence, LemmaTable,
    Vocabulary,
};
use ghost_core::experiments::{ablation_report, clamp_k0, theory_report, tune, Data, Pipeline};
use ghost_core::fedsim::{evaluate, fedsgd_run, observe_round, read_round_archive, write_round_archive, Defense, EpochLog, EvalReport, FedConfig, RoundLog};
use ghost_core::geometry::OverlapRule;
use ghost_core::metrics::{bag_rouge_1, meteor_lite, rouge_n, similarity_report};
use ghost_core::model::Model;
use ghost_core::par;
use ghost_core::rng;
use ghost_core::shadow_search::{reverse_map, search, SearchParams, ShadowMap};
use ghost_core::shadow_select::{obfuscate_dataset, select, summarize, ObfuscatedRecord, ObfuscationSummary, SelectConfig, SelectMode};
use ghost_core::synth::generate;
use ghost_core::theory::{scatter_svg, write_deviations_csv};
use serde::Serialize;

use crate::config::{input, optional_input, output, RunConfig};
use crate::{
    AblateArgs, AttackArgs, AttackKind, Cli, Command, DefenseFlags, DefenseKind, GenArgs, MetricsArgs, Mode,
    ObfuscateArgs, Overlap, PipelineInputs, SearchArgs, SearchFlags, SelectFlags, StrategyArg, TheoryArgs, TrainArgs,
};

pub fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?.with_seed(cli.seed);
    set_threads(cli.threads)?;
    match &cli.command {
        Command::Gen(a) => gen(&cfg, a),
        Command::Search(a) => search_cmd(&cfg, a),
        Command::Obfuscate(a) => obfuscate(&cfg, a),
        Command::Train(a) => train(&cfg, a),
        Command::Attack(a) => attack(&cfg, a),
        Command::Ablate(a) => ablate(&cfg, a),
        Command::Theory(a) => theory(&cfg, a),
        Command::Metrics(a) => metrics(&cfg, a),
    }
}

#[cfg(feature = "parallel")]
fn set_threads(n: Option<usize>) -> Result<()> {
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

#[cfg(not(feature = "parallel"))]
fn set_threads(n: Option<usize>) -> Result<()> {
    if n.is_some_and(|n| n > 1) {
        log::warn!("built without the parallel feature; running on one thread");
    }
    Ok(())
}

fn emit<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn out_file(flag: &Option<PathBuf>, cfg: &RunConfig, default_name: &str, name: &str) -> Result<PathBuf> {
    let fallback = cfg.paths.out_dir.as_ref().map(|d| d.join(default_name));
    output(flag, &fallback, name)
}

fn apply_search(mut p: SearchParams, f: &SearchFlags) -> SearchParams {
    if let Some(k0) = f.k0 {
        p.k0 = k0;
    }
    if let Some(t) = f.tau_o {
        p.tau_o = t;
    }
    if let Some(o) = f.overlap {
        p.overlap = match o {
            Overlap::Absolute => OverlapRule::Absolute,
            Overlap::ChanceCorrected => OverlapRule::ChanceCorrected,
        };
    }
    p.flags.use_indirect &= !f.no_indirect;
    p.flags.use_direct &= !f.no_direct;
    p.flags.use_lemma &= !f.no_lemma;
    p
}

fn apply_select(mut c: SelectConfig, f: &SelectFlags) -> SelectConfig {
    if let Some(b) = f.beam {
        c.beam_width = b;
    }
    if let Some(t) = f.tau_d {
        c.tau_d = t;
    }
    if let Some(s) = f.max_sweeps {
        c.max_sweeps = s;
    }
    if let Some(m) = f.mode {
        c.mode = match m {
            Mode::Optimized => SelectMode::Optimized,
            Mode::Random => SelectMode::Random,
            Mode::Nearest => SelectMode::Nearest,
        };
    }
    c.include_embedding_layer |= f.include_embedding_layer;
    c
}

fn load_table(flag: &Option<PathBuf>, cfg: &RunConfig) -> Result<(Vocabulary, EmbeddingTable)> {
    let path = input(flag, &cfg.paths.embeddings, "embeddings")?;
    let loaded = load_embeddings(&path)?;
    log::info!("loaded {} embeddings of dimension {}", loaded.1.rows(), loaded.1.dim());
    Ok(loaded)
}

fn load_lemma_table(flag: &Option<PathBuf>, cfg: &RunConfig) -> Result<LemmaTable> {
    Ok(match optional_input(flag, &cfg.paths.lemmas)? {
        Some(p) => load_lemmas(&p)?,
        None => LemmaTable::default(),
    })
}

fn load_sentences(path: &Path, vocab: &Vocabulary) -> Result<Vec<LabeledSentence>> {
    let records = load_dataset(path)?;
    let sentences = to_sentences(&records, vocab)?;
    log::info!("loaded {} sentences", sentences.len());
    Ok(sentences)
}

fn load_map(flag: &Option<PathBuf>, cfg: &RunConfig, vocab: &Vocabulary) -> Result<ShadowMap> {
    let path = input(flag, &cfg.paths.map, "map")?;
    let map = ShadowMap::load(&path)?;
    if let Some(&k) = map.entries.keys().find(|&&k| k >= vocab.len()) {
        bail!("shadow map key {k} is outside the vocabulary of {} tokens", vocab.len());
    }
    Ok(map)
}

/// A checkpoint when given, otherwise the seeded model the config describes.
fn load_model(flag: &Option<PathBuf>, cfg: &RunConfig, vocab: &Vocabulary, table: &EmbeddingTable) -> Result<Model> {
    let model = match optional_input(flag, &cfg.paths.model)? {
        Some(p) => {
            let m = Model::load(&p)?;
            let c = m.config();
            if c.vocab_size != vocab.len() || c.d_model != table.dim() {
                bail!(
                    "checkpoint expects {} tokens of dimension {}, embeddings have {} of dimension {}",
                    c.vocab_size,
                    c.d_model,
                    vocab.len(),
                    table.dim()
                );
            }
            m
        }
        None => {
            let s = &cfg.experiment.synth;
            Model::new(cfg.experiment.model_shape(vocab.len(), table.dim(), s.max_len, s.n_classes), Some(table))?
        }
    };
    Ok(model)
}

fn check_fits(model: &Model, data: &[LabeledSentence]) -> Result<()> {
    let c = model.config();
    for (i, s) in data.iter().enumerate() {
        if s.len() > c.max_len {
            bail!(
                "sentence {i} has {} tokens but the model takes at most {} (set experiment.synth.max_len)",
                s.len(),
                c.max_len
            );
        }
        if s.label >= c.n_classes {
            bail!(
                "sentence {i} has label {} but the model has {} classes (set experiment.synth.n_classes)",
                s.label,
                c.n_classes
            );
        }
    }
    Ok(())
}

fn gen(cfg: &RunConfig, a: &GenArgs) -> Result<()> {
    let dir = output(&a.out_dir, &cfg.paths.out_dir, "out-dir")?;
    let mut spec = cfg.experiment.synth.clone();
    if let Some(v) = a.vocab_size {
        spec.vocab_size = v;
    }
    if let Some(d) = a.dim {
        spec.dim = d;
    }
    if let Some(n) = a.n_train {
        spec.n_train = n;
    }
    if let Some(n) = a.n_test {
        spec.n_test = n;
    }
    if let Some(c) = a.n_classes {
        spec.n_classes = c;
    }
    let corpus = generate(&spec)?;
    log::info!("generated {} tokens, {} train and {} test sentences", corpus.vocab.len(), corpus.train.len(), corpus.test.len());
    create_dir(&dir)?;
    write_embeddings(&dir.join("embeddings.ghem"), &corpus.vocab, &corpus.table)?;
    write_lemmas(&dir.join("lemmas.tsv"), &corpus.lemmas)?;
    write_dataset(&dir.join("train.jsonl"), &to_records(&corpus.train))?;
    write_dataset(&dir.join("test.jsonl"), &to_records(&corpus.test))?;
    write_json(&dir.join("synth.json"), &spec)?;
    emit(&serde_json::json!({
        "vocab_size": corpus.vocab.len(),
        "dim": corpus.table.dim(),
        "n_train": corpus.train.len(),
        "n_test": corpus.test.len(),
        "n_classes": spec.n_classes,
        "distractors": corpus.distractors.len(),
    }))
}

fn search_cmd(cfg: &RunConfig, a: &SearchArgs) -> Result<()> {
    let (vocab, table) = load_table(&a.embeddings, cfg)?;
    let lemmas = load_lemma_table(&a.lemmas, cfg)?;
    let out = out_file(&a.out, cfg, "shadow_map.json", "out")?;
    let requested = apply_search(cfg.experiment.search, &a.search);
    let params = clamp_k0(requested, vocab.len());
    if params.k0 != requested.k0 {
        log::warn!("k0 {} clamped to {} for a vocabulary of {}", requested.k0, params.k0, vocab.len());
    }
    let map = search(&vocab, &table, &lemmas, params)?;
    let n = map.entries.len().max(1) as f64;
    log::info!("built shadow map for {} tokens", map.entries.len());
    map.save(&out)?;
    emit(&serde_json::json!({
        "n_keys": map.entries.len(),
        "k0": params.k0,
        "fallbacks": map.fallback_count(),
        "mean_candidates": map.entries.values().map(|e| e.candidates.len() as f64).sum::<f64>() / n,
        "mean_k_used": map.entries.values().map(|e| e.k_used as f64).sum::<f64>() / n,
    }))
}

fn obfuscate(cfg: &RunConfig, a: &ObfuscateArgs) -> Result<()> {
    let (vocab, table) = load_table(&a.embeddings, cfg)?;
    let map = load_map(&a.map, cfg, &vocab)?;
    let dataset = input(&a.dataset, &cfg.paths.dataset, "dataset")?;
    let out = out_file(&a.out, cfg, "obfuscated.jsonl", "out")?;
    let data = load_sentences(&dataset, &vocab)?;
    let model = load_model(&a.model, cfg, &vocab, &table)?;
    check_fits(&model, &data)?;
    let sel = apply_select(cfg.experiment.select, &a.select);
    let (pairs, summary) = obfuscate_dataset(&data, &model, &map, &sel, Some(vocab.unk_id()))?;
    log::info!("obfuscated {} sentences, change rate {:.3}", summary.n_sentences, summary.change_rate);
    let records = pairs
        .iter()
        .map(|p| ObfuscatedRecord::from_pair(p, &vocab))
        .collect::<ghost_core::Result<Vec<_>>>()?;
    write_jsonl(&out, &records)?;
    emit(&summary)
}

fn defense(flags: &DefenseFlags, cfg: &RunConfig, vocab: &Vocabulary, select: SelectConfig) -> Result<(Defense, Option<ShadowMap>)> {
    Ok(match flags.defense {
        DefenseKind::None => (Defense::None, None),
        DefenseKind::Noise => (Defense::Noise { sigma: flags.sigma, clip: flags.clip }, None),
        DefenseKind::Prune => (Defense::Prune { ratio: flags.ratio }, None),
        DefenseKind::Ghost => {
            let map = load_map(&flags.map, cfg, vocab)?;
            (Defense::Ghost { select, search: map.params }, Some(map))
        }
    })
}

#[derive(Serialize)]
struct ArchiveConfig {
    seed: u64,
    defense: Defense,
    fed: FedConfig,
}

#[derive(Serialize)]
struct TrainReport {
    defense: Defense,
    best_epoch: usize,
    epochs: Vec<EpochLog>,
    rounds: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    obfuscation: Option<ObfuscationSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    test: Option<EvalReport>,
}

fn train(cfg: &RunConfig, a: &TrainArgs) -> Result<()> {
    let (vocab, table) = load_table(&a.embeddings, cfg)?;
    let dataset = input(&a.dataset, &cfg.paths.dataset, "dataset")?;
    let test_path = optional_input(&a.test, &cfg.paths.test)?;
    let dir = output(&a.out_dir, &cfg.paths.out_dir, "out-dir")?;
    let sel = apply_select(cfg.experiment.select, &a.select);
    let (def, map) = defense(&a.defense, cfg, &vocab, sel)?;
    def.validate()?;
    let train_set = load_sentences(&dataset, &vocab)?;
    let test_set = match &test_path {
        Some(p) => load_sentences(p, &vocab)?,
        None => Vec::new(),
    };
    let init = load_model(&a.model, cfg, &vocab, &table)?;
    check_fits(&init, &train_set)?;
    check_fits(&init, &test_set)?;

    let (shared, obfuscation) = match &map {
        Some(map) => {
            let (pairs, summary) = obfuscate_dataset(&train_set, &init, map, &sel, Some(vocab.unk_id()))?;
            log::info!("obfuscated the training split, change rate {:.3}", summary.change_rate);
            (pairs.into_iter().map(|p| p.obfuscated).collect(), Some(summary))
        }
        None => (train_set, None),
    };

    let mut fed = cfg.experiment.fed;
    fed.defense = def;
    if let Some(lr) = a.lr {
        fed.lr = lr;
    }
    if let Some(e) = a.epochs {
        fed.max_epochs = e;
    }
    if let Some(b) = a.batch_size {
        fed.batch_size = b;
    }
    if let Some(p) = a.patience {
        fed.patience = p;
    }
    let (model, run) = fedsgd_run(&init, &shared, &fed, a.archive.is_some())?;
    log::info!("trained {} epochs, best epoch {}", run.epochs.len(), run.best_epoch);

    create_dir(&dir)?;
    model.save(&dir.join("model.ckpt"))?;
    if let Some(path) = &a.archive {
        let header = ArchiveConfig { seed: cfg.seed(), defense: def, fed };
        write_round_archive(path, &header, &model.segments(), &run.rounds)?;
        log::info!("archived {} rounds", run.rounds.len());
    }
    let test = if test_set.is_empty() { None } else { Some(evaluate(&model, &test_set)?) };
    let report = TrainReport {
        defense: def,
        best_epoch: run.best_epoch,
        epochs: run.epochs,
        rounds: run.rounds.len(),
        obfuscation,
        test,
    };
    write_json(&dir.join("train_report.json"), &report)?;
    emit(&report)
}

fn strategy(s: StrategyArg) -> Strategy {
    match s {
        StrategyArg::Sampling => Strategy::Sampling,
        StrategyArg::Max => Strategy::Max,
        StrategyArg::Median => Strategy::Median,
        StrategyArg::Mean => Strategy::Mean,
    }
}

/// One attack target: what the attacker observes and what it should recover.
struct Target {
    id: usize,
    reference: Vec<usize>,
    round: Option<RoundLog>,
}

fn attack(cfg: &RunConfig, a: &AttackArgs) -> Result<()> {
    let (vocab, table) = load_table(&a.embeddings, cfg)?;
    let out = out_file(&a.out, cfg, "attack.jsonl", "out")?;
    let lemmas = load_lemma_table(&None, cfg)?;
    let limit = a.limit.unwrap_or(cfg.attack.limit);
    let seed = cfg.seed();
    let lemma = |t: &usize| lemmas.lookup(&vocab.surfaces()[*t]).to_string();

    let results: Vec<(usize, Vec<usize>, AttackResult)> = if a.kind == AttackKind::Adaptive {
        let pairs = adaptive_pairs(cfg, a, &vocab, &table, limit)?;
        let map = load_map(&a.defense.map, cfg, &vocab)?;
        let rev = reverse_map(&map);
        let strategies = match a.strategy {
            Some(s) => vec![strategy(s)],
            None => Strategy::ALL.to_vec(),
        };
        let mut all = Vec::new();
        for s in strategies {
            let per = par::try_map(&pairs, |(i, orig, obf)| {
                adaptive_recover_with(obf, &rev, &table, s, rng::derive(seed, 2000 + *i as u64)).map(|r| (*i, orig.clone(), r))
            })?;
            all.extend(per);
        }
        all
    } else {
        let model = load_model(&a.model, cfg, &vocab, &table)?;
        let targets = attack_targets(cfg, a, &vocab, &model, limit)?;
        let kind = a.kind;
        let mc = &cfg.attack;
        par::try_map(&targets, |t| -> Result<(usize, Vec<usize>, AttackResult)> {
            let round = t.round.as_ref().expect("simulated or archived round");
            let r = match kind {
                AttackKind::Leakage => embedding_leakage_attack(round, model.config())?,
                _ => {
                    let m = MatchConfig {
                        seq_len: t.reference.len(),
                        iters: a.iters.unwrap_or(mc.iters),
                        lr: mc.lr,
                        init: DummyInit::Random(rng::derive(seed, 3000 + t.id as u64)),
                        restarts: a.restarts.unwrap_or(mc.restarts),
                    };
                    gradient_matching_attack(round, &model, &m)?
                }
            };
            Ok((t.id, t.reference.clone(), r))
        })?
    };

    let mut records = Vec::with_capacity(results.len());
    let mut totals: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
    for (id, reference, r) in &results {
        let r1 = match a.kind {
            AttackKind::Leakage => bag_rouge_1(&r.recovered, reference),
            _ => rouge_n(&r.recovered, reference, 1)?,
        };
        let meteor = meteor_lite(&r.recovered, reference, lemma);
        let e = totals.entry(r.attacker.clone()).or_default();
        e.0 += r1;
        e.1 += meteor;
        e.2 += 1;
        records.push(AttackRecord {
            id: *id,
            attacker: r.attacker.clone(),
            recovered_text: detokenize(&r.recovered, &vocab)?,
            r1,
            meteor,
        });
    }
    write_jsonl(&out, &records)?;
    log::info!("wrote {} attack records", records.len());
    let summary: BTreeMap<String, serde_json::Value> = totals
        .into_iter()
        .map(|(k, (r1, m, n))| {
            let n = n.max(1) as f64;
            (k, serde_json::json!({ "n": n as usize, "r1": r1 / n, "meteor": m / n }))
        })
        .collect();
    emit(&summary)
}

/// `(id, original, obfuscated)` token triples for the adaptive attacker.
fn adaptive_pairs(
    cfg: &RunConfig,
    a: &AttackArgs,
    vocab: &Vocabulary,
    table: &EmbeddingTable,
    limit: usize,
) -> Result<Vec<(usize, Vec<usize>, Vec<usize>)>> {
    if let Some(path) = optional_input(&a.obfuscated, &None)? {
        let records: Vec<ObfuscatedRecord> = read_jsonl(&path, "obfuscated dataset")?;
        return records
            .iter()
            .take(limit)
            .enumerate()
            .map(|(i, r)| Ok((i, tokenize(&r.text, vocab)?, tokenize(&r.obf_text, vocab)?)))
            .collect();
    }
    let dataset = input(&a.dataset, &cfg.paths.dataset, "dataset")?;
    let map = load_map(&a.defense.map, cfg, vocab)?;
    let data = load_sentences(&dataset, vocab)?;
    let data = &data[..limit.min(data.len())];
    let model = load_model(&a.model, cfg, vocab, table)?;
    check_fits(&model, data)?;
    let (pairs, _) = obfuscate_dataset(data, &model, &map, &cfg.experiment.select, Some(vocab.unk_id()))?;
    Ok(pairs
        .into_iter()
        .enumerate()
        .map(|(i, p)| (i, p.original.tokens, p.obfuscated.tokens))
        .collect())
}

fn attack_targets(cfg: &RunConfig, a: &AttackArgs, vocab: &Vocabulary, model: &Model, limit: usize) -> Result<Vec<Target>> {
    let dataset = input(&a.dataset, &cfg.paths.dataset, "dataset")?;
    let data = load_sentences(&dataset, vocab)?;
    if let Some(path) = optional_input(&a.archive, &None)? {
        let (_, rounds) = read_round_archive(&path)?;
        let mut targets = Vec::new();
        for r in rounds.into_iter().filter(|r| r.snapshot.is_some()).take(limit) {
            if a.kind == AttackKind::Matching && r.batch_ids.len() != 1 {
                bail!("gradient matching needs batch-size-1 rounds; round {} has {}", r.round, r.batch_ids.len());
            }
            let mut reference = Vec::new();
            for &i in &r.batch_ids {
                let s = data.get(i).with_context(|| format!("round {} names sentence {i}, outside the dataset", r.round))?;
                reference.extend_from_slice(&s.tokens);
            }
            targets.push(Target {
                id: r.round,
                reference,
                round: Some(r),
            });
        }
        log::info!("loaded {} archived rounds", targets.len());
        return Ok(targets);
    }

    let data = &data[..limit.min(data.len())];
    check_fits(model, data)?;
    let (def, map) = defense(&a.defense, cfg, vocab, cfg.experiment.select)?;
    def.validate()?;
    let observed: Vec<LabeledSentence> = match &map {
        Some(map) => par::try_map(data, |s| select(s, model, map, &cfg.experiment.select, Some(vocab.unk_id())).map(|p| p.obfuscated))?,
        None => data.to_vec(),
    };
    let seed = cfg.seed();
    let idx: Vec<usize> = (0..data.len()).collect();
    let targets = par::try_map(&idx, |&i| -> ghost_core::Result<Target> {
        Ok(Target {
            id: i,
            reference: data[i].tokens.clone(),
            round: Some(observe_round(model, &observed[i], &def, rng::derive(seed, 1000 + i as u64))?),
        })
    })?;
    log::info!("simulated {} rounds under the {} defense", targets.len(), def.name());
    Ok(targets)
}

fn pipeline(cfg: &RunConfig, inputs: &PipelineInputs) -> Result<Pipeline> {
    let experiment = cfg.experiment.clone();
    if inputs.embeddings.is_none() && cfg.paths.embeddings.is_none() {
        log::info!("building the synthetic pipeline");
        return Ok(Pipeline::build(experiment)?);
    }
    let (vocab, table) = load_table(&inputs.embeddings, cfg)?;
    let lemmas = load_lemma_table(&inputs.lemmas, cfg)?;
    let train = load_sentences(&input(&inputs.dataset, &cfg.paths.dataset, "dataset")?, &vocab)?;
    let test = match optional_input(&inputs.test, &cfg.paths.test)? {
        Some(p) => load_sentences(&p, &vocab)?,
        None => Vec::new(),
    };
    Ok(Pipeline::from_data(experiment, Data::new(vocab, table, lemmas, train, test)?)?)
}

fn ablate(cfg: &RunConfig, a: &AblateArgs) -> Result<()> {
    let mut cfg = cfg.clone();
    cfg.experiment.search = apply_search(cfg.experiment.search, &a.search);
    if let Some(n) = a.sentences {
        cfg.experiment.n_ablation = n;
    }
    let out = out_file(&a.out, &cfg, "ablation.csv", "out")?;
    let p = pipeline(&cfg, &a.inputs)?;
    let report = ablation_report(&p)?;
    log::info!("ablation grid of {} rows over {} sentences", report.rows.len(), report.n);
    fs::write(&out, report.to_csv()).with_context(|| format!("writing {}", out.display()))?;
    emit(&report)
}

fn theory(cfg: &RunConfig, a: &TheoryArgs) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(lr) = a.lr {
        cfg.experiment.fed.lr = lr;
    }
    if let Some(e) = a.epochs {
        cfg.experiment.fed.max_epochs = e;
    }
    let dir = output(&a.out_dir, &cfg.paths.out_dir, "out-dir")?;
    let p = pipeline(&cfg, &a.inputs)?;
    let tuned = tune(&p)?;
    log::info!("tuned on original and obfuscated data");
    let report = theory_report(&p, &tuned)?;
    create_dir(&dir)?;
    write_deviations_csv(&dir.join("deviations.csv"), &report.records)?;
    let summary = serde_json::json!({
        "drift": report.drift,
        "regression": report.regression,
        "loss_ordering": report.loss_ordering,
        "obfuscation": summarize(&tuned.pairs),
    });
    write_json(&dir.join("regression.json"), &summary)?;
    let svg = dir.join("scatter.svg");
    fs::write(&svg, scatter_svg(&report.records)).with_context(|| format!("writing {}", svg.display()))?;
    emit(&summary)
}

fn metrics(cfg: &RunConfig, a: &MetricsArgs) -> Result<()> {
    let path = input(&a.input, &None, "input")?;
    let lemmas = load_lemma_table(&a.lemmas, cfg)?;
    let rows: Vec<serde_json::Value> = read_jsonl(&path, "text pairs")?;
    let field = |row: &serde_json::Value, name: &str, line: usize| -> Result<Vec<String>> {
        let text = row
            .get(name)
            .and_then(|v| v.as_str())
            .with_context(|| format!("line {}: missing string field {name:?}", line + 1))?;
        Ok(ghost_core::corpus::normalize(text))
    };
    let pairs = rows
        .iter()
        .enumerate()
        .map(|(i, row)| Ok((field(row, &a.candidate_field, i)?, field(row, &a.reference_field, i)?)))
        .collect::<Result<Vec<_>>>()?;
    let report = similarity_report(&pairs, |w: &String| lemmas.lookup(w).to_string());
    log::info!("scored {} pairs", report.n_pairs);
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    emit(&report)
}
