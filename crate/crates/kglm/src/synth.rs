//! Synthetic world generation: a knowledge graph with planted statistical
//! signal, an aligned annotated corpus, question sets, and few-shot episodes.
//!
//! The vocabulary is partitioned into entity-name tokens, per-category phrase
//! pools, per-relation connective pools, and filler. Signal is planted three
//! ways: descriptions mix name with category-phrase tokens, corpus sentences
//! realize triplets as "head connective tail context", and edge endpoints
//! correlate with per-relation category pairs (homophily). A frequency-count
//! classifier is run at generation time to certify that the category signal
//! clears 5x chance before any training depends on it.
//!
//! All generation is a pure function of the config (including its seed).

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::WorldConfig;
use crate::error::{Error, Result};
use crate::graph::{self, KnowledgeGraph};
use crate::rng::{self, StreamTag};
use crate::text::{
    self, AnnotatedSequence, Mention, Vocabulary, CLS_ID, EOS_ID, NUM_SPECIALS,
};

pub const VOCAB_FILE: &str = "vocab.txt";
pub const CORPUS_FILE: &str = "corpus.tsv";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Tokens per category phrase pool.
const CAT_POOL: usize = 6;
/// Tokens per relation connective pool.
const REL_POOL: usize = 3;
/// Generic tokens that must remain after the structured pools are carved out.
const MIN_FILLER: usize = 20;

#[derive(Clone, Debug)]
pub struct World {
    pub kg: KnowledgeGraph,
    pub corpus: Vec<AnnotatedSequence>,
    pub vocab: Vocabulary,
}

/// One multiple-choice graph question: a token sequence mentioning a single
/// entity, answered by one of its k-hop neighbors.
#[derive(Clone, Debug, PartialEq)]
pub struct QaQuestion {
    pub seq: AnnotatedSequence,
    pub answer: usize,
    /// All entities within k undirected hops of the mentioned entity, sorted.
    pub candidates: Vec<usize>,
    pub hops: usize,
}

/// Few-shot relation classification episode over corpus sentences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    /// Class index -> relation id.
    pub relations: Vec<usize>,
    /// Class index -> K supporting corpus indices.
    pub support: Vec<Vec<usize>>,
    /// (corpus index, gold class), class-balanced.
    pub queries: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpisodeData {
    pub train: Vec<Episode>,
    pub test: Vec<Episode>,
    pub train_relations: Vec<usize>,
    pub test_relations: Vec<usize>,
}

struct TokenLayout {
    name_base: usize,
    name_count: usize,
    cat_base: usize,
    rel_base: usize,
    filler_base: usize,
    filler_count: usize,
    categories: usize,
    relations: usize,
}

impl TokenLayout {
    fn new(cfg: &WorldConfig) -> Result<Self> {
        let name_count = 2 * (cfg.entities as f64).sqrt().ceil() as usize;
        let name_base = NUM_SPECIALS;
        let cat_base = name_base + name_count;
        let rel_base = cat_base + cfg.categories * CAT_POOL;
        let filler_base = rel_base + cfg.relations * REL_POOL;
        let needed = filler_base + MIN_FILLER;
        if needed > cfg.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary budget: {} tokens needed ({} names, {} category, {} relation, \
                 {MIN_FILLER} filler, {NUM_SPECIALS} special), only {} configured",
                needed,
                name_count,
                cfg.categories * CAT_POOL,
                cfg.relations * REL_POOL,
                cfg.vocab_size
            )));
        }
        Ok(TokenLayout {
            name_base,
            name_count,
            cat_base,
            rel_base,
            filler_base,
            filler_count: cfg.vocab_size - filler_base,
            categories: cfg.categories,
            relations: cfg.relations,
        })
    }

    fn cat_token(&self, c: usize, j: usize) -> usize {
        self.cat_base + c * CAT_POOL + j
    }

    fn rel_token(&self, r: usize, j: usize) -> usize {
        self.rel_base + r * REL_POOL + j
    }

    fn words(&self) -> Vec<String> {
        let mut w = Vec::new();
        for a in 0..self.name_count {
            w.push(format!("na{a}"));
        }
        for c in 0..self.categories {
            for j in 0..CAT_POOL {
                w.push(format!("cw{c}_{j}"));
            }
        }
        for r in 0..self.relations {
            for j in 0..REL_POOL {
                w.push(format!("rw{r}_{j}"));
            }
        }
        for j in 0..self.filler_count {
            w.push(format!("fw{j}"));
        }
        w
    }
}

pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    if cfg.entities == 0 || cfg.relations == 0 || cfg.categories == 0 || cfg.sequences == 0 {
        return Err(Error::Config("world counts must be positive".into()));
    }
    if cfg.max_seq_len < 12 {
        return Err(Error::Config(format!(
            "world_max_seq_len {} leaves no room for a realized triplet sentence",
            cfg.max_seq_len
        )));
    }
    let layout = TokenLayout::new(cfg)?;
    let vocab = Vocabulary::with_words(&layout.words())?;

    // entity names: distinct token pairs from the name alphabet
    let mut name_rng = rng::derive(cfg.seed, StreamTag::World, 0);
    let mut pairs: Vec<(usize, usize)> = (0..layout.name_count)
        .flat_map(|a| (0..layout.name_count).map(move |b| (a, b)))
        .collect();
    pairs.shuffle(&mut name_rng);
    let names: Vec<(usize, usize)> = pairs[..cfg.entities]
        .iter()
        .map(|&(a, b)| (layout.name_base + a, layout.name_base + b))
        .collect();

    // balanced random category assignment
    let mut cat_rng = rng::derive(cfg.seed, StreamTag::World, 1);
    let mut order: Vec<usize> = (0..cfg.entities).collect();
    order.shuffle(&mut cat_rng);
    let mut categories = vec![0usize; cfg.entities];
    for (i, &e) in order.iter().enumerate() {
        categories[e] = i % cfg.categories;
    }
    let mut by_cat: Vec<Vec<usize>> = vec![Vec::new(); cfg.categories];
    for (e, &c) in categories.iter().enumerate() {
        by_cat[c].push(e);
    }

    // homophilous triplets: each relation prefers a fixed category pair
    let affinity = |r: usize| -> (usize, usize) {
        (r % cfg.categories, (r + 1 + r % 3) % cfg.categories)
    };
    let mut edge_rng = rng::derive(cfg.seed, StreamTag::World, 2);
    let target = ((cfg.entities as f64 * cfg.mean_degree) / 2.0).round() as usize;
    let mut seen = HashSet::new();
    let mut triplets = Vec::with_capacity(target);
    let mut attempts = 0usize;
    while triplets.len() < target {
        attempts += 1;
        if attempts > 200 * target {
            return Err(Error::Config(format!(
                "could not place {target} distinct triplets; world too small for mean degree {}",
                cfg.mean_degree
            )));
        }
        let r = edge_rng.gen_range(0..cfg.relations);
        let (ch, ct) = affinity(r);
        let pick = |rng: &mut rand_chacha::ChaCha20Rng, cat: usize| -> usize {
            if rng.gen_bool(cfg.phrase_concentration) && !by_cat[cat].is_empty() {
                by_cat[cat][rng.gen_range(0..by_cat[cat].len())]
            } else {
                rng.gen_range(0..cfg.entities)
            }
        };
        let h = pick(&mut edge_rng, ch);
        let t = pick(&mut edge_rng, ct);
        if h == t || !seen.insert((h, r, t)) {
            continue;
        }
        triplets.push((h, r, t));
    }
    triplets.sort_unstable();

    // descriptions: [CLS] name category-phrase [EOS]
    let mut desc_rng = rng::derive(cfg.seed, StreamTag::World, 3);
    let mut entity_descriptions = Vec::with_capacity(cfg.entities);
    for e in 0..cfg.entities {
        let phrase_len = desc_rng.gen_range(4..=6).min(cfg.max_seq_len - 4);
        let mut d = vec![CLS_ID, names[e].0, names[e].1];
        for _ in 0..phrase_len {
            d.push(signal_token(
                &mut desc_rng,
                cfg.phrase_concentration,
                &layout,
                categories[e],
            ));
        }
        d.push(EOS_ID);
        entity_descriptions.push(d);
    }
    let relation_descriptions: Vec<Vec<usize>> = (0..cfg.relations)
        .map(|r| {
            let mut d = vec![CLS_ID];
            d.extend((0..REL_POOL).map(|j| layout.rel_token(r, j)));
            d.push(EOS_ID);
            d
        })
        .collect();

    let kg = KnowledgeGraph::new(
        cfg.entities,
        cfg.relations,
        cfg.categories,
        triplets.clone(),
        categories.iter().map(|&c| Some(c)).collect(),
        entity_descriptions,
        relation_descriptions,
    )?;

    // corpus: each sentence realizes one triplet with annotated mentions
    let mut corpus_rng = rng::derive(cfg.seed, StreamTag::World, 4);
    let mut corpus = Vec::with_capacity(cfg.sequences);
    for _ in 0..cfg.sequences {
        let (h, r, t) = triplets[corpus_rng.gen_range(0..triplets.len())];
        corpus.push(realize_sentence(
            &mut corpus_rng,
            cfg,
            &layout,
            &names,
            categories[h],
            (h, r, t),
        ));
    }
    for (i, seq) in corpus.iter().enumerate() {
        seq.validate(vocab.len())
            .map_err(|e| Error::Config(format!("generated sequence {i} invalid: {e}")))?;
    }

    let world = World { kg, corpus, vocab };
    let acc = category_frequency_oracle(&world.kg)?;
    // 5x chance; clamped so worlds with fewer than 6 categories stay generable
    let floor = (5.0 / cfg.categories as f64).min(0.9);
    if acc <= floor {
        return Err(Error::Config(format!(
            "planted category signal too weak: frequency oracle accuracy {acc:.3} \
             not above {floor:.3}; raise phrase concentration"
        )));
    }
    Ok(world)
}

fn signal_token(
    rng: &mut rand_chacha::ChaCha20Rng,
    concentration: f64,
    layout: &TokenLayout,
    category: usize,
) -> usize {
    if rng.gen_bool(concentration) {
        layout.cat_token(category, rng.gen_range(0..CAT_POOL))
    } else {
        layout.filler_base + rng.gen_range(0..layout.filler_count)
    }
}

fn realize_sentence(
    rng: &mut rand_chacha::ChaCha20Rng,
    cfg: &WorldConfig,
    layout: &TokenLayout,
    names: &[(usize, usize)],
    head_category: usize,
    (h, r, t): (usize, usize, usize),
) -> AnnotatedSequence {
    let ci = rng.gen_range(0..REL_POOL);
    let cj = (ci + 1 + rng.gen_range(0..REL_POOL - 1)) % REL_POOL;
    let mut tokens = vec![
        CLS_ID,
        names[h].0,
        names[h].1,
        layout.rel_token(r, ci),
        layout.rel_token(r, cj),
        names[t].0,
        names[t].1,
    ];
    let ctx = rng.gen_range(1..=3usize).min(cfg.max_seq_len.saturating_sub(8));
    for _ in 0..ctx {
        tokens.push(signal_token(rng, cfg.phrase_concentration, layout, head_category));
    }
    tokens.push(EOS_ID);
    AnnotatedSequence {
        tokens,
        mentions: vec![
            Mention { entity: h, start: 1, end: 2 },
            Mention { entity: t, start: 5, end: 6 },
        ],
    }
}

/// Name tokens of an entity, read from its stored description (generated
/// descriptions lead with the two-token name right after the start token).
pub fn entity_name(kg: &KnowledgeGraph, e: usize) -> Result<(usize, usize)> {
    let d = kg
        .entity_descriptions
        .get(e)
        .ok_or_else(|| Error::Graph(format!("entity {e} out of range")))?;
    if d.len() < 4 {
        return Err(Error::Graph(format!("entity {e} description too short for a name")));
    }
    Ok((d[1], d[2]))
}

/// Connective tokens of a relation, read from its stored description.
pub fn relation_pool(kg: &KnowledgeGraph, r: usize) -> Result<Vec<usize>> {
    let d = kg
        .relation_descriptions
        .get(r)
        .ok_or_else(|| Error::Graph(format!("relation {r} out of range")))?;
    if d.len() < 3 {
        return Err(Error::Graph(format!("relation {r} description has no tokens")));
    }
    Ok(d[1..d.len() - 1].to_vec())
}

pub fn triplet_set(kg: &KnowledgeGraph) -> HashSet<(usize, usize, usize)> {
    kg.triplets.iter().copied().collect()
}

/// Identifies the triplet a sentence realizes: the relation r such that
/// (first mention, r, second mention) is a triplet and a connective token of
/// r appears between the two mention spans. None when no unique reading fits.
pub fn realized_relation(
    kg: &KnowledgeGraph,
    triplets: &HashSet<(usize, usize, usize)>,
    seq: &AnnotatedSequence,
) -> Option<usize> {
    if seq.mentions.len() != 2 {
        return None;
    }
    let (a, b) = (&seq.mentions[0], &seq.mentions[1]);
    let (first, second) = if a.start < b.start { (a, b) } else { (b, a) };
    let between = &seq.tokens[first.end + 1..second.start];
    for r in 0..kg.relation_count {
        if !triplets.contains(&(first.entity, r, second.entity)) {
            continue;
        }
        if let Ok(pool) = relation_pool(kg, r) {
            if between.iter().any(|t| pool.contains(t)) {
                return Some(r);
            }
        }
    }
    None
}

/// Independent category oracle: naive frequency counting over description
/// tokens, trained on even entity ids and scored on odd ones. Works straight
/// off the stored graph, touching none of the model code.
pub fn category_frequency_oracle(kg: &KnowledgeGraph) -> Result<f64> {
    let c = kg.category_count;
    if c == 0 {
        return Err(Error::Config("no categories to classify".into()));
    }
    let vocab_hint = kg
        .entity_descriptions
        .iter()
        .flat_map(|d| d.iter().copied())
        .max()
        .unwrap_or(0)
        + 1;
    let mut counts = vec![vec![1.0f64; vocab_hint]; c];
    let mut priors = vec![1.0f64; c];
    let mut test = Vec::new();
    for (e, cat) in kg.categories.iter().enumerate() {
        let Some(cat) = cat else { continue };
        if e % 2 == 0 {
            priors[*cat] += 1.0;
            for &t in &kg.entity_descriptions[e] {
                if t >= NUM_SPECIALS {
                    counts[*cat][t] += 1.0;
                }
            }
        } else {
            test.push((e, *cat));
        }
    }
    if test.is_empty() {
        return Err(Error::Config("no labeled test entities for the oracle".into()));
    }
    let totals: Vec<f64> = counts.iter().map(|v| v.iter().sum()).collect();
    let prior_total: f64 = priors.iter().sum();
    let mut hits = 0usize;
    for (e, gold) in &test {
        let mut best = (f64::NEG_INFINITY, 0usize);
        for k in 0..c {
            let mut score = (priors[k] / prior_total).ln();
            for &t in &kg.entity_descriptions[*e] {
                if t >= NUM_SPECIALS {
                    score += (counts[k][t] / totals[k]).ln();
                }
            }
            if score > best.0 {
                best = (score, k);
            }
        }
        if best.1 == *gold {
            hits += 1;
        }
    }
    Ok(hits as f64 / test.len() as f64)
}

/// Generates k-hop questions. Each question mentions one entity; the answer
/// lies at the end of a k-step forward path; candidates are every entity
/// within k undirected hops.
pub fn generate_qa(kg: &KnowledgeGraph, hops: usize, n: usize, seed: u64) -> Result<Vec<QaQuestion>> {
    if !(1..=2).contains(&hops) {
        return Err(Error::Config(format!("hops must be 1 or 2, got {hops}")));
    }
    if kg.entity_count == 0 {
        return Err(Error::Graph("empty graph".into()));
    }
    let mut rng = rng::derive(seed, StreamTag::Eval, hops as u64);
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while out.len() < n {
        attempts += 1;
        if attempts > 200 * n.max(1) {
            return Err(Error::Graph(format!(
                "only {} of {n} {hops}-hop questions constructible; graph too sparse",
                out.len()
            )));
        }
        let h = rng.gen_range(0..kg.entity_count);
        let first = kg.neighbors(h)?;
        if first.is_empty() {
            continue;
        }
        let (r1, mid) = first[rng.gen_range(0..first.len())];
        let (answer, rels) = if hops == 1 {
            (mid, vec![r1])
        } else {
            let second = kg.neighbors(mid)?;
            let choices: Vec<(usize, usize)> =
                second.iter().copied().filter(|&(_, t)| t != h).collect();
            if choices.is_empty() {
                continue;
            }
            let (r2, t) = choices[rng.gen_range(0..choices.len())];
            (t, vec![r1, r2])
        };
        let name = entity_name(kg, h)?;
        let mut tokens = vec![CLS_ID, name.0, name.1];
        for r in &rels {
            let pool = relation_pool(kg, *r)?;
            let i = rng.gen_range(0..pool.len());
            tokens.push(pool[i]);
            tokens.push(pool[(i + 1) % pool.len()]);
        }
        tokens.push(EOS_ID);
        let candidates = kg.k_hop_neighbors(h, hops)?;
        debug_assert!(candidates.contains(&answer));
        out.push(QaQuestion {
            seq: AnnotatedSequence {
                tokens,
                mentions: vec![Mention { entity: h, start: 1, end: 2 }],
            },
            answer,
            candidates,
            hops,
        });
    }
    Ok(out)
}

/// Builds class-balanced few-shot episodes over corpus sentences, with
/// train-episode relations disjoint from test-episode relations.
#[allow(clippy::too_many_arguments)]
pub fn generate_episodes(
    kg: &KnowledgeGraph,
    corpus: &[AnnotatedSequence],
    n_way: usize,
    k_shot: usize,
    queries: usize,
    train_count: usize,
    test_count: usize,
    seed: u64,
) -> Result<EpisodeData> {
    if n_way == 0 || k_shot == 0 || queries == 0 {
        return Err(Error::Config("episode sizes must be positive".into()));
    }
    let set = triplet_set(kg);
    let mut by_rel: Vec<Vec<usize>> = vec![Vec::new(); kg.relation_count];
    for (i, seq) in corpus.iter().enumerate() {
        if let Some(r) = realized_relation(kg, &set, seq) {
            by_rel[r].push(i);
        }
    }
    let need = k_shot + queries;
    let mut eligible: Vec<usize> =
        (0..kg.relation_count).filter(|&r| by_rel[r].len() >= need * 2).collect();
    let mut rng = rng::derive(seed, StreamTag::Episode, 0);
    eligible.shuffle(&mut rng);
    if eligible.len() < 2 * n_way {
        return Err(Error::Config(format!(
            "{n_way}-way episodes on disjoint relation sets need {} relations with \
             at least {need} sentences each; only {} qualify",
            2 * n_way,
            eligible.len()
        )));
    }
    let half = eligible.len() / 2;
    let train_relations: Vec<usize> = eligible[..half].to_vec();
    let test_relations: Vec<usize> = eligible[half..].to_vec();

    let build = |pool: &[usize], count: usize, rng: &mut rand_chacha::ChaCha20Rng| -> Result<Vec<Episode>> {
        let mut eps = Vec::with_capacity(count);
        for _ in 0..count {
            let mut rels = pool.to_vec();
            rels.shuffle(rng);
            rels.truncate(n_way);
            let mut support = Vec::with_capacity(n_way);
            let mut qs = Vec::new();
            for (class, &r) in rels.iter().enumerate() {
                let base = queries / n_way;
                let q_here = base + usize::from(class < queries % n_way);
                let picks =
                    rand::seq::index::sample(rng, by_rel[r].len(), k_shot + q_here).into_vec();
                let idxs: Vec<usize> = picks.iter().map(|&p| by_rel[r][p]).collect();
                support.push(idxs[..k_shot].to_vec());
                for &ci in &idxs[k_shot..] {
                    qs.push((ci, class));
                }
            }
            eps.push(Episode { relations: rels, support, queries: qs });
        }
        Ok(eps)
    };
    let train = build(&train_relations, train_count, &mut rng)?;
    let test = build(&test_relations, test_count, &mut rng)?;
    Ok(EpisodeData { train, test, train_relations, test_relations })
}

pub fn save_world(world: &World, manifest: &str, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    graph::save_graph(&world.kg, &world.vocab, dir)?;
    world.vocab.save(&dir.join(VOCAB_FILE))?;
    text::save_corpus(&world.corpus, &world.vocab, &dir.join(CORPUS_FILE))?;
    let mpath = dir.join(MANIFEST_FILE);
    std::fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    Ok(())
}

pub fn load_world(dir: &Path) -> Result<World> {
    let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
    let kg = graph::load_graph(dir, &vocab)?;
    let corpus = text::load_corpus(&dir.join(CORPUS_FILE), &vocab)?;
    Ok(World { kg, corpus, vocab })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> WorldConfig {
        WorldConfig {
            entities: 60,
            relations: 6,
            categories: 5,
            vocab_size: 150,
            sequences: 400,
            max_seq_len: 32,
            mean_degree: 6.0,
            phrase_concentration: 0.8,
            seed: 11,
        }
    }

    #[test]
    fn defaults_generate_to_spec_counts() {
        let cfg = WorldConfig::default();
        let w = generate_world(&cfg).unwrap();
        assert_eq!(w.kg.entity_count, 500);
        assert_eq!(w.kg.relation_count, 8);
        assert_eq!(w.kg.category_count, 10);
        assert_eq!(w.corpus.len(), 5000);
        assert_eq!(w.vocab.len(), 400);
    }

    #[test]
    fn mention_spans_equal_name_tokens_everywhere() {
        let w = generate_world(&small_cfg()).unwrap();
        for seq in &w.corpus {
            for m in &seq.mentions {
                let name = entity_name(&w.kg, m.entity).unwrap();
                assert_eq!(&seq.tokens[m.start..=m.end], &[name.0, name.1]);
            }
        }
    }

    #[test]
    fn every_sentence_realizes_a_stored_triplet() {
        let w = generate_world(&small_cfg()).unwrap();
        let set = triplet_set(&w.kg);
        for seq in &w.corpus {
            assert!(realized_relation(&w.kg, &set, seq).is_some());
        }
    }

    #[test]
    fn regeneration_is_bitwise_identical() {
        let cfg = small_cfg();
        let a = generate_world(&cfg).unwrap();
        let b = generate_world(&cfg).unwrap();
        assert_eq!(a.kg.triplets, b.kg.triplets);
        assert_eq!(a.kg.categories, b.kg.categories);
        assert_eq!(a.kg.entity_descriptions, b.kg.entity_descriptions);
        assert_eq!(a.corpus, b.corpus);
    }

    #[test]
    fn frequency_oracle_clears_signal_floor() {
        let w = generate_world(&small_cfg()).unwrap();
        let acc = category_frequency_oracle(&w.kg).unwrap();
        assert!(acc > 0.9, "oracle accuracy {acc}");
        // the 5x-chance bound proper, on the default 10-category world
        let w10 = generate_world(&WorldConfig::default()).unwrap();
        let acc10 = category_frequency_oracle(&w10.kg).unwrap();
        assert!(acc10 > 0.5, "oracle accuracy {acc10}");
    }

    #[test]
    fn relations_prefer_their_category_pair() {
        let w = generate_world(&WorldConfig::default()).unwrap();
        for r in 0..w.kg.relation_count {
            let heads: Vec<usize> = w
                .kg
                .triplets
                .iter()
                .filter(|&&(_, rr, _)| rr == r)
                .map(|&(h, _, _)| w.kg.categories[h].unwrap())
                .collect();
            let mut freq = vec![0usize; w.kg.category_count];
            for &c in &heads {
                freq[c] += 1;
            }
            let modal = *freq.iter().max().unwrap();
            assert!(
                modal as f64 >= 0.5 * heads.len() as f64,
                "relation {r} head categories nearly uniform"
            );
        }
    }

    #[test]
    fn vocabulary_budget_is_enforced() {
        let mut cfg = small_cfg();
        cfg.vocab_size = 40;
        let err = generate_world(&cfg).unwrap_err();
        assert!(err.to_string().contains("budget"), "{err}");
    }

    #[test]
    fn one_hop_questions_answer_from_direct_neighbors() {
        let w = generate_world(&small_cfg()).unwrap();
        let qs = generate_qa(&w.kg, 1, 50, 3).unwrap();
        assert_eq!(qs.len(), 50);
        for q in &qs {
            assert_eq!(q.seq.mentions.len(), 1);
            let h = q.seq.mentions[0].entity;
            assert!(q.candidates.contains(&q.answer));
            assert!(w.kg.neighbors(h).unwrap().iter().any(|&(_, t)| t == q.answer));
            assert_eq!(q.candidates, w.kg.k_hop_neighbors(h, 1).unwrap());
        }
    }

    #[test]
    fn two_hop_answers_verified_by_breadth_first_search() {
        let w = generate_world(&small_cfg()).unwrap();
        let qs = generate_qa(&w.kg, 2, 50, 4).unwrap();
        assert_eq!(qs.len(), 50);
        // independent BFS straight off the triplet list
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); w.kg.entity_count];
        for &(h, _, t) in &w.kg.triplets {
            adj[h].push(t);
            adj[t].push(h);
        }
        let dist = |from: usize, to: usize| -> Option<usize> {
            let mut d = vec![usize::MAX; adj.len()];
            d[from] = 0;
            let mut queue = std::collections::VecDeque::from([from]);
            while let Some(u) = queue.pop_front() {
                for &v in &adj[u] {
                    if d[v] == usize::MAX {
                        d[v] = d[u] + 1;
                        queue.push_back(v);
                    }
                }
            }
            (d[to] != usize::MAX).then_some(d[to])
        };
        for q in &qs {
            let h = q.seq.mentions[0].entity;
            let d = dist(h, q.answer).expect("answer reachable");
            assert!((1..=2).contains(&d), "answer at distance {d}");
            for &c in &q.candidates {
                assert!((1..=2).contains(&dist(h, c).unwrap()));
            }
        }
    }

    #[test]
    fn qa_is_deterministic_under_seed() {
        let w = generate_world(&small_cfg()).unwrap();
        let a = generate_qa(&w.kg, 1, 20, 9).unwrap();
        let b = generate_qa(&w.kg, 1, 20, 9).unwrap();
        assert_eq!(a, b);
        let c = generate_qa(&w.kg, 1, 20, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn episodes_have_disjoint_relations_and_instances() {
        let mut cfg = small_cfg();
        cfg.relations = 12;
        cfg.vocab_size = 200;
        cfg.sequences = 1200;
        let w = generate_world(&cfg).unwrap();
        let data = generate_episodes(&w.kg, &w.corpus, 5, 1, 5, 4, 4, 2).unwrap();
        let train: HashSet<usize> = data.train_relations.iter().copied().collect();
        let test: HashSet<usize> = data.test_relations.iter().copied().collect();
        assert!(train.is_disjoint(&test));
        let set = triplet_set(&w.kg);
        for ep in data.train.iter().chain(&data.test) {
            assert_eq!(ep.relations.len(), 5);
            assert_eq!(ep.support.len(), 5);
            let mut support_idx = HashSet::new();
            for (class, idxs) in ep.support.iter().enumerate() {
                assert_eq!(idxs.len(), 1);
                for &i in idxs {
                    support_idx.insert(i);
                    assert_eq!(
                        realized_relation(&w.kg, &set, &w.corpus[i]),
                        Some(ep.relations[class])
                    );
                }
            }
            assert_eq!(ep.queries.len(), 5);
            let classes: Vec<usize> = ep.queries.iter().map(|&(_, c)| c).collect();
            for class in 0..5 {
                assert_eq!(classes.iter().filter(|&&c| c == class).count(), 1);
            }
            for &(i, class) in &ep.queries {
                assert!(!support_idx.contains(&i), "query reuses support sentence");
                assert_eq!(
                    realized_relation(&w.kg, &set, &w.corpus[i]),
                    Some(ep.relations[class])
                );
            }
        }
    }

    #[test]
    fn episodes_error_when_relations_cannot_split() {
        let w = generate_world(&small_cfg()).unwrap(); // 6 relations < 2*5
        assert!(generate_episodes(&w.kg, &w.corpus, 5, 1, 5, 2, 2, 2).is_err());
    }

    #[test]
    fn world_round_trips_through_files() {
        let w = generate_world(&small_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_world(&w, "world_seed=11\n", dir.path()).unwrap();
        assert!(dir.path().join(MANIFEST_FILE).exists());
        let back = load_world(dir.path()).unwrap();
        assert_eq!(back.kg.triplets, w.kg.triplets);
        assert_eq!(back.kg.categories, w.kg.categories);
        assert_eq!(back.kg.entity_descriptions, w.kg.entity_descriptions);
        assert_eq!(back.corpus, w.corpus);
        assert_eq!(back.vocab.len(), w.vocab.len());
    }
}
