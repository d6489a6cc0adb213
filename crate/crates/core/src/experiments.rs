//! End-to-end experiment drivers producing serializable reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::attacks::{adaptive_recover_with, embedding_leakage_attack, Strategy};
use crate::corpus::{EmbeddingTable, LabeledSentence, LemmaTable, Vocabulary};
use crate::error::{Error, Result};
use crate::fedsim::{evaluate, fedsgd_run, observe_round, Defense, EvalReport, FedConfig};
use crate::geometry::NeighborIndex;
use crate::metrics::{bag_rouge_1, meteor_lite, rouge_n};
use crate::model::{hidden_state_mse, Model, ModelConfig};
use crate::rng;
use crate::shadow_search::{reverse_map, search_with_index, violations, HeuristicFlags, SearchParams, ShadowEntry, ShadowMap};
use crate::shadow_select::{obfuscate_dataset, select, summarize, ObfuscatedPair, ObfuscationSummary, SelectConfig, SelectMode};
use crate::synth::{generate, SynthCorpus, SynthSpec};
use crate::theory::{compute_deviations, deviation_regression, write_deviations_csv, loss_ordering_check, DeviationRecord, DriftRecord, LossOrderingCheck, Regression};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub synth: SynthSpec,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub search: SearchParams,
    pub select: SelectConfig,
    pub fed: FedConfig,
    /// Sentences used by the leakage and ablation experiments.
    pub n_attack: usize,
    pub n_ablation: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            synth: SynthSpec::default(),
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            search: SearchParams::default(),
            select: SelectConfig::default(),
            fed: FedConfig::default(),
            n_attack: 64,
            n_ablation: 50,
            seed: 0,
        }
        .with_seed(0)
    }
}

impl ExperimentConfig {
    /// Derives every component seed from one master seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.seed = rng::derive(seed, 1);
        self.select.seed = rng::derive(seed, 2);
        self.fed.seed = rng::derive(seed, 3);
        self
    }

    pub fn model_config(&self, data: &Data) -> ModelConfig {
        self.model_shape(data.vocab.len(), data.table.dim(), data.max_len, data.n_classes)
    }

    pub fn model_shape(&self, vocab_size: usize, d_model: usize, max_len: usize, n_classes: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_len,
            n_classes,
            seed: rng::derive(self.seed, 4),
        }
    }
}

/// Vocabulary, embeddings, lemmas and labelled splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Data {
    pub vocab: Vocabulary,
    pub table: EmbeddingTable,
    pub lemmas: LemmaTable,
    pub train: Vec<LabeledSentence>,
    pub test: Vec<LabeledSentence>,
    pub n_classes: usize,
    pub max_len: usize,
}

impl Data {
    /// Derives the class count and maximum length from the splits.
    pub fn new(
        vocab: Vocabulary,
        table: EmbeddingTable,
        lemmas: LemmaTable,
        train: Vec<LabeledSentence>,
        test: Vec<LabeledSentence>,
    ) -> Result<Self> {
        if vocab.len() != table.rows() {
            return Err(Error::LengthMismatch {
                vocab: vocab.len(),
                rows: table.rows(),
            });
        }
        if train.is_empty() {
            return Err(Error::Empty("training split"));
        }
        let all = train.iter().chain(&test);
        let n_classes = all.clone().map(|s| s.label + 1).max().unwrap_or(0).max(2);
        let max_len = all.map(|s| s.len()).max().unwrap_or(1).max(1);
        Ok(Self {
            vocab,
            table,
            lemmas,
            train,
            test,
            n_classes,
            max_len,
        })
    }
}

impl From<SynthCorpus> for Data {
    fn from(c: SynthCorpus) -> Self {
        let n_classes = c.signal_class.iter().flatten().max().map_or(2, |m| m + 1);
        let max_len = c.train.iter().chain(&c.test).map(|s| s.len()).max().unwrap_or(1);
        Self {
            vocab: c.vocab,
            table: c.table,
            lemmas: c.lemmas,
            train: c.train,
            test: c.test,
            n_classes,
            max_len,
        }
    }
}

/// Clamps `k0` so tiny vocabularies stay searchable.
pub fn clamp_k0(params: SearchParams, n_vocab: usize) -> SearchParams {
    SearchParams {
        k0: params.k0.clamp(1, n_vocab.saturating_sub(1).max(1)),
        ..params
    }
}

/// The shared state every experiment starts from.
pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub data: Data,
    pub index: NeighborIndex,
    pub pretrained: Model,
    pub map: ShadowMap,
}

impl Pipeline {
    /// Generates the synthetic corpus described by `cfg.synth`.
    pub fn build(cfg: ExperimentConfig) -> Result<Self> {
        let mut data: Data = generate(&cfg.synth)?.into();
        data.n_classes = cfg.synth.n_classes;
        data.max_len = cfg.synth.max_len;
        Self::from_data(cfg, data)
    }

    pub fn from_data(cfg: ExperimentConfig, data: Data) -> Result<Self> {
        let index = NeighborIndex::build(&data.table);
        let pretrained = Model::new(cfg.model_config(&data), Some(&data.table))?;
        let map = search_with_index(&data.vocab, &index, &data.lemmas, clamp_k0(cfg.search, data.vocab.len()))?;
        Ok(Self {
            cfg,
            data,
            index,
            pretrained,
            map,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.data.vocab
    }

    pub fn lemmas(&self) -> &LemmaTable {
        &self.data.lemmas
    }

    pub fn unk(&self) -> Option<usize> {
        Some(self.data.vocab.unk_id())
    }

    pub fn obfuscate(&self, data: &[LabeledSentence], map: &ShadowMap, cfg: &SelectConfig) -> Result<(Vec<ObfuscatedPair>, ObfuscationSummary)> {
        obfuscate_dataset(data, &self.pretrained, map, cfg, self.unk())
    }

    fn lemma_key(&self) -> impl Fn(&usize) -> String + Copy + '_ {
        move |t: &usize| {
            let s = self.data.vocab.surfaces()[*t].as_str();
            self.data.lemmas.lookup(s).to_string()
        }
    }

    fn attack_set(&self) -> &[LabeledSentence] {
        let n = self.cfg.n_attack.min(self.data.train.len());
        &self.data.train[..n]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub k0: usize,
    pub n_keys: usize,
    pub empty_sets: usize,
    pub fallbacks: usize,
    pub mean_candidates: f64,
    pub mean_k_used: f64,
    pub sampled_keys: usize,
    pub checked_pairs: usize,
    pub violations: usize,
}

pub fn search_report(p: &Pipeline, n_samples: usize) -> Result<SearchReport> {
    let entries = &p.map.entries;
    let n = entries.len() as f64;
    let keys: Vec<usize> = entries.keys().copied().collect();
    let mut r = rng::substream(p.cfg.seed, 10);
    let sampled: Vec<usize> = keys.choose_multiple(&mut r, n_samples.min(keys.len())).copied().collect();
    let checked = sampled.iter().map(|k| entries[k].candidates.len()).sum();
    let v = violations(&p.map, &p.index, p.vocab(), p.lemmas(), &sampled)?;
    Ok(SearchReport {
        k0: p.map.params.k0,
        n_keys: entries.len(),
        empty_sets: entries.values().filter(|e| e.candidates.is_empty()).count(),
        fallbacks: p.map.fallback_count(),
        mean_candidates: entries.values().map(|e| e.candidates.len() as f64).sum::<f64>() / n,
        mean_k_used: entries.values().map(|e| e.k_used as f64).sum::<f64>() / n,
        sampled_keys: sampled.len(),
        checked_pairs: checked,
        violations: v.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub tiny_instances: usize,
    pub tiny_optimal: usize,
    pub max_abs_gap: f64,
    pub sweep_sentences: usize,
    pub monotone: usize,
    pub beam4_not_worse: usize,
}

fn exhaustive_min(model: &Model, original: &[usize], options: &[Vec<usize>]) -> Result<f64> {
    let target = model.hidden_states(original, false)?;
    let mut best = f64::INFINITY;
    let total: usize = options.iter().map(|o| o.len()).product();
    for mut code in 0..total {
        let seq: Vec<usize> = options
            .iter()
            .map(|o| {
                let t = o[code % o.len()];
                code /= o.len();
                t
            })
            .collect();
        best = best.min(hidden_state_mse(&model.hidden_states(&seq, false)?, &target)?);
    }
    Ok(best)
}

pub fn selection_report(p: &Pipeline, n_tiny: usize, n_sweep: usize) -> Result<SelectionReport> {
    let mut r = rng::substream(p.cfg.seed, 11);
    let mut optimal = 0;
    let mut gap: f64 = 0.0;
    for i in 0..n_tiny {
        let src = &p.data.train[i % p.data.train.len()];
        let len = r.random_range(2..=3).min(src.len());
        let tokens = src.tokens[..len].to_vec();
        let mut entries = BTreeMap::new();
        for &t in &tokens {
            let full = p.map.candidates(t).unwrap_or(&[]);
            let keep = r.random_range(1..=3).min(full.len());
            let c: Vec<usize> = full.choose_multiple(&mut r, keep).copied().collect();
            entries.insert(
                t,
                ShadowEntry {
                    k_used: 0,
                    candidates: c,
                    fallback: false,
                },
            );
        }
        // Repeated tokens share one entry.
        let options: Vec<Vec<usize>> = tokens.iter().map(|t| entries[t].candidates.clone()).collect();
        let combos: usize = options.iter().map(|o| o.len()).product();
        let tiny = ShadowMap {
            params: p.map.params,
            entries,
        };
        let cfg = SelectConfig {
            beam_width: combos,
            ..p.cfg.select
        };
        let s = LabeledSentence {
            tokens: tokens.clone(),
            label: src.label,
            raw: String::new(),
        };
        let got = select(&s, &p.pretrained, &tiny, &cfg, p.unk())?.final_mse;
        let best = exhaustive_min(&p.pretrained, &tokens, &options)?;
        gap = gap.max((got - best).abs());
        if got == best {
            optimal += 1;
        }
    }
    let sweep_set = &p.data.train[..n_sweep.min(p.data.train.len())];
    let b1 = SelectConfig {
        beam_width: 1,
        ..p.cfg.select
    };
    let b4 = SelectConfig {
        beam_width: 4,
        ..p.cfg.select
    };
    let (one, _) = p.obfuscate(sweep_set, &p.map, &b1)?;
    let (four, _) = p.obfuscate(sweep_set, &p.map, &b4)?;
    let monotone = one
        .iter()
        .chain(&four)
        .filter(|q| q.sweep_mse.windows(2).all(|w| w[1] <= w[0]))
        .count();
    let not_worse = one.iter().zip(&four).filter(|(a, b)| b.final_mse <= a.final_mse).count();
    Ok(SelectionReport {
        tiny_instances: n_tiny,
        tiny_optimal: optimal,
        max_abs_gap: gap,
        sweep_sentences: one.len() + four.len(),
        monotone,
        beam4_not_worse: not_worse,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub n: usize,
    pub undefended_r1: f64,
    pub noise_r1: f64,
    pub prune_r1: f64,
    pub ghost_r1: f64,
}

/// Mean bag-of-token ROUGE-1 of the leakage attack on batch-1 rounds.
fn leakage_r1(p: &Pipeline, observed: &[LabeledSentence], originals: &[LabeledSentence], defense: &Defense) -> Result<f64> {
    let mut total = 0.0;
    for (i, (o, x)) in observed.iter().zip(originals).enumerate() {
        let log = observe_round(&p.pretrained, o, defense, rng::derive(p.cfg.seed, 1000 + i as u64))?;
        let rec = embedding_leakage_attack(&log, p.pretrained.config())?;
        total += bag_rouge_1(&rec.recovered, &x.tokens);
    }
    Ok(total / observed.len().max(1) as f64)
}

pub fn leakage_report(p: &Pipeline) -> Result<LeakageReport> {
    let data = p.attack_set();
    let (pairs, _) = p.obfuscate(data, &p.map, &p.cfg.select)?;
    let obf: Vec<LabeledSentence> = pairs.into_iter().map(|q| q.obfuscated).collect();
    Ok(LeakageReport {
        n: data.len(),
        undefended_r1: leakage_r1(p, data, data, &Defense::None)?,
        noise_r1: leakage_r1(p, data, data, &Defense::default_noise())?,
        prune_r1: leakage_r1(p, data, data, &Defense::default_prune())?,
        ghost_r1: leakage_r1(p, &obf, data, &Defense::None)?,
    })
}

/// Models tuned on original and on obfuscated training data.
pub struct Tuned {
    pub pairs: Vec<ObfuscatedPair>,
    pub summary: ObfuscationSummary,
    pub theta_star: Model,
    pub theta_tilde: Model,
}

pub fn tune(p: &Pipeline) -> Result<Tuned> {
    let (pairs, summary) = p.obfuscate(&p.data.train, &p.map, &p.cfg.select)?;
    let obf: Vec<LabeledSentence> = pairs.iter().map(|q| q.obfuscated.clone()).collect();
    let (theta_star, _) = fedsgd_run(&p.pretrained, &p.data.train, &p.cfg.fed, false)?;
    let (theta_tilde, _) = fedsgd_run(&p.pretrained, &obf, &p.cfg.fed, false)?;
    Ok(Tuned {
        pairs,
        summary,
        theta_star,
        theta_tilde,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilityReport {
    pub pretrained: EvalReport,
    pub original: EvalReport,
    pub obfuscated: EvalReport,
    pub obfuscation: ObfuscationSummary,
}

pub fn utility_report(p: &Pipeline, t: &Tuned) -> Result<UtilityReport> {
    let test = &p.data.test;
    Ok(UtilityReport {
        pretrained: evaluate(&p.pretrained, test)?,
        original: evaluate(&t.theta_star, test)?,
        obfuscated: evaluate(&t.theta_tilde, test)?,
        obfuscation: t.summary.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub drift: DriftRecord,
    pub regression: Regression,
    pub loss_ordering: LossOrderingCheck,
    pub records: Vec<DeviationRecord>,
}

pub fn theory_report(p: &Pipeline, t: &Tuned) -> Result<TheoryReport> {
    let pairs: Vec<(LabeledSentence, LabeledSentence)> =
        t.pairs.iter().map(|q| (q.original.clone(), q.obfuscated.clone())).collect();
    let dev = compute_deviations(&p.pretrained, &t.theta_star, &t.theta_tilde, &pairs)?;
    Ok(TheoryReport {
        drift: dev.drift,
        regression: deviation_regression(&dev.records)?,
        loss_ordering: loss_ordering_check(&t.theta_tilde, &pairs)?,
        records: dev.records,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveReport {
    pub n: usize,
    pub baseline_r1: f64,
    pub strategies: BTreeMap<String, f64>,
}

pub fn adaptive_report(p: &Pipeline, pairs: &[ObfuscatedPair]) -> Result<AdaptiveReport> {
    let rev = reverse_map(&p.map);
    let originals: Vec<LabeledSentence> = pairs.iter().map(|q| q.original.clone()).collect();
    let baseline = leakage_r1(p, &originals, &originals, &Defense::None)?;
    let mut strategies = BTreeMap::new();
    for s in Strategy::ALL {
        let mut total = 0.0;
        for (i, q) in pairs.iter().enumerate() {
            let rec = adaptive_recover_with(&q.obfuscated.tokens, &rev, &p.data.table, s, rng::derive(p.cfg.seed, 2000 + i as u64))?;
            total += rouge_n(&rec.recovered, &q.original.tokens, 1)?;
        }
        strategies.insert(s.name().to_string(), total / pairs.len().max(1) as f64);
    }
    Ok(AdaptiveReport {
        n: pairs.len(),
        baseline_r1: baseline,
        strategies,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub heuristics: String,
    pub mode: SelectMode,
    pub fallbacks: usize,
    pub mean_candidates: f64,
    pub meteor: f64,
    pub r1: f64,
    pub mse: f64,
    pub change_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub n: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, flags: HeuristicFlags, mode: SelectMode) -> Option<&AblationRow> {
        let label = flags.label();
        self.rows.iter().find(|r| r.heuristics == label && r.mode == mode)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("heuristics,mode,fallbacks,mean_candidates,meteor,r1,mse,change_rate\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.heuristics,
                r.mode.name(),
                r.fallbacks,
                r.mean_candidates,
                r.meteor,
                r.r1,
                r.mse,
                r.change_rate
            ));
        }
        s
    }
}

/// Every heuristic combination crossed with every selection mode.
pub fn ablation_report(p: &Pipeline) -> Result<AblationReport> {
    let data = &p.data.train[..p.cfg.n_ablation.min(p.data.train.len())];
    let lemma = p.lemma_key();
    let mut rows = Vec::new();
    for flags in HeuristicFlags::grid() {
        let params = SearchParams { flags, ..p.map.params };
        let map = search_with_index(p.vocab(), &p.index, p.lemmas(), params)?;
        let mean_candidates = map.entries.values().map(|e| e.candidates.len() as f64).sum::<f64>() / map.entries.len() as f64;
        for mode in SelectMode::ALL {
            let cfg = SelectConfig { mode, ..p.cfg.select };
            let (pairs, summary) = p.obfuscate(data, &map, &cfg)?;
            let n = pairs.len().max(1) as f64;
            let mut meteor = 0.0;
            let mut r1 = 0.0;
            for q in &pairs {
                meteor += meteor_lite(&q.obfuscated.tokens, &q.original.tokens, lemma);
                r1 += rouge_n(&q.obfuscated.tokens, &q.original.tokens, 1)?;
            }
            rows.push(AblationRow {
                heuristics: flags.label(),
                mode,
                fallbacks: map.fallback_count(),
                mean_candidates,
                meteor: meteor / n,
                r1: r1 / n,
                mse: summary.mean_mse,
                change_rate: summary.change_rate,
            });
        }
    }
    Ok(AblationReport { n: data.len(), rows })
}

/// Summary statistics for an already obfuscated set.
pub fn obfuscation_summary(pairs: &[ObfuscatedPair]) -> ObfuscationSummary {
    summarize(pairs)
}

/// Every report of one pipeline run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullReport {
    pub search: SearchReport,
    pub selection: SelectionReport,
    pub leakage: LeakageReport,
    pub utility: UtilityReport,
    pub theory: TheoryReport,
    pub adaptive: AdaptiveReport,
    pub ablation: AblationReport,
}

pub fn run_all(p: &Pipeline) -> Result<FullReport> {
    let tuned = tune(p)?;
    Ok(FullReport {
        search: search_report(p, 100)?,
        selection: selection_report(p, 50, 50)?,
        leakage: leakage_report(p)?,
        utility: utility_report(p, &tuned)?,
        theory: theory_report(p, &tuned)?,
        adaptive: adaptive_report(p, &tuned.pairs)?,
        ablation: ablation_report(p)?,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Writes one file per report into `dir` and returns the file names.
pub fn write_report_files(dir: &Path, r: &FullReport) -> Result<Vec<String>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join("search.json"), &r.search)?;
    write_json(&dir.join("selection.json"), &r.selection)?;
    write_json(&dir.join("leakage.json"), &r.leakage)?;
    write_json(&dir.join("utility.json"), &r.utility)?;
    write_json(&dir.join("theory.json"), &(&r.theory.drift, &r.theory.regression, &r.theory.loss_ordering))?;
    write_json(&dir.join("adaptive.json"), &r.adaptive)?;
    write_deviations_csv(&dir.join("deviations.csv"), &r.theory.records)?;
    let ab = dir.join("ablation.csv");
    fs::write(&ab, r.ablation.to_csv()).map_err(|e| Error::io(&ab, e))?;
    Ok([
        "search.json",
        "selection.json",
        "leakage.json",
        "utility.json",
        "theory.json",
        "adaptive.json",
        "deviations.csv",
        "ablation.csv",
    ]
    .map(String::from)
    .to_vec())
}
