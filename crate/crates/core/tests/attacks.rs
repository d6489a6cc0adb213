use ghost_core::attacks::{gradient_matching_attack, MatchConfig};
use ghost_core::corpus::{EmbeddingTable, LabeledSentence, LemmaTable, Vocabulary, UNK_SURFACE};
use ghost_core::fedsim::{observe_round, Defense};
use ghost_core::metrics::rouge_n;
use ghost_core::model::{Model, ModelConfig};
use ghost_core::rng;
use ghost_core::shadow_search::{search, SearchParams};
use ghost_core::shadow_select::{select, SelectConfig};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

const V: usize = 50;
const D: usize = 8;

fn setup(seed: u64) -> (Vocabulary, EmbeddingTable, Model) {
    let mut r = rng::seeded(seed);
    let data: Vec<f32> = (0..V * D).map(|_| StandardNormal.sample(&mut r)).collect();
    let table = EmbeddingTable::new(data, V, D).unwrap();
    let mut surfaces = vec![UNK_SURFACE.to_string()];
    surfaces.extend((1..V).map(|i| format!("w{i}")));
    let cfg = ModelConfig {
        vocab_size: V,
        d_model: D,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_len: 3,
        n_classes: 2,
        seed,
    };
    let model = Model::new(cfg, Some(&table)).unwrap();
    (Vocabulary::new(surfaces).unwrap(), table, model)
}

/// Mean ROUGE-1 of gradient matching against the original sentence over 20
/// seeds, optionally obfuscating the sentence before the round is observed.
fn mean_recovery(defended: bool) -> f64 {
    let mut total = 0.0;
    for seed in 0..20u64 {
        let (vocab, table, model) = setup(seed);
        let mut r = rng::seeded(seed + 100);
        let s = LabeledSentence {
            tokens: sample(&mut r, V - 1, 3).into_iter().map(|t| t + 1).collect(),
            label: r.random_range(0..2),
            raw: String::new(),
        };
        let sent = if defended {
            let params = SearchParams {
                k0: 20,
                ..SearchParams::default()
            };
            let map = search(&vocab, &table, &LemmaTable::default(), params).unwrap();
            select(&s, &model, &map, &SelectConfig::default(), Some(vocab.unk_id()))
                .unwrap()
                .obfuscated
        } else {
            s.clone()
        };
        let log = observe_round(&model, &sent, &Defense::None, seed).unwrap();
        let out = gradient_matching_attack(&log, &model, &MatchConfig::new(3, seed)).unwrap();
        total += rouge_n(&out.recovered, &s.tokens, 1).unwrap();
    }
    total / 20.0
}

#[test]
fn gradient_matching_recovers_undefended_tokens() {
    let m = mean_recovery(false);
    println!("undefended gradient matching ROUGE-1 {m:.3}");
    assert!(m >= 0.66, "mean ROUGE-1 {m}");
}

#[test]
fn gradient_matching_fails_on_obfuscated_rounds() {
    let m = mean_recovery(true);
    println!("defended gradient matching ROUGE-1 {m:.3}");
    assert!(m <= 0.15, "mean ROUGE-1 {m}");
}
