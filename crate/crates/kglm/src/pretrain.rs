//! Four self-supervised losses and the joint pre-training loop.
//!
//! One step runs two phases over a shared tape: a knowledge phase (entity
//! category + relation type prediction over a random-walk batch) and a
//! language phase (masked token + masked entity prediction over a text batch
//! with mention fusion). Equal-weight loss sum, one backward, one AdamW step
//! with per-group rates, then the memory refresh hook.
//!
//! Every random decision derives from (config seed, purpose, step), so a
//! resumed run replays the exact stream of an uninterrupted one.

use std::io::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;

use crate::config::{RelationMode, TrainConfig};
use crate::error::{Error, Result};
use crate::graph::KnowledgeGraph;
use crate::km::KnowledgeModule;
use crate::lm::{LanguageModule, TokenBatch};
use crate::memory::{EntityMemory, MemorySchedule, RelationMemory};
use crate::optim::{AdamHyper, LrSchedule, ParamGroup, ParamStore};
use crate::rng::{self, StreamTag};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::text::{self, AnnotatedSequence};

pub const METRICS_HEADER: &str = "step,loss_total,loss_c,loss_r,loss_t,loss_e,lr_lm,lr_km,refreshed";

/// Classifier heads over the two module outputs plus the entity projection
/// g(x) = ReLU(x W1) W2. Heads live in the parameter group of the module
/// whose outputs they consume.
#[derive(Clone, Debug)]
pub struct TaskHeads {
    pub dim: usize,
    pub categories: usize,
    pub relations: usize,
    pub vocab_len: usize,
}

/// One masked mention to predict: output rows at its span boundaries plus
/// the gold entity.
#[derive(Copy, Clone, Debug)]
pub struct EntityProbe {
    pub start_row: usize,
    pub end_row: usize,
    pub entity: usize,
}

impl TaskHeads {
    pub fn new(dim: usize, categories: usize, relations: usize, vocab_len: usize) -> Self {
        TaskHeads { dim, categories, relations, vocab_len }
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let f = self.dim;
        let g = ParamGroup::Knowledge;
        let l = ParamGroup::Language;
        store.insert("head.category.w", g, Tensor::randn(&[f, self.categories], 0.02, rng))?;
        store.insert("head.category.b", g, Tensor::zeros(&[1, self.categories]))?;
        store.insert("head.relation.w", g, Tensor::randn(&[2 * f, self.relations], 0.02, rng))?;
        store.insert("head.relation.b", g, Tensor::zeros(&[1, self.relations]))?;
        store.insert("head.token.w", l, Tensor::randn(&[f, self.vocab_len], 0.02, rng))?;
        store.insert("head.token.b", l, Tensor::zeros(&[1, self.vocab_len]))?;
        store.insert("head.entity_g.w1", l, Tensor::randn(&[f, f], 0.02, rng))?;
        store.insert("head.entity_g.w2", l, Tensor::randn(&[f, f], 0.02, rng))?;
        Ok(())
    }

    /// Mean cross-entropy of the category head over the labeled rows of
    /// `e_km`. None when no row is labeled.
    pub fn loss_entity_category(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        e_km: Var,
        labels: &[Option<usize>],
    ) -> Result<Option<Var>> {
        if tape.value(e_km).rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} embedding rows, {} labels",
                tape.value(e_km).rows(),
                labels.len()
            )));
        }
        let mut rows = Vec::new();
        let mut golds = Vec::new();
        for (i, lab) in labels.iter().enumerate() {
            if let Some(c) = lab {
                rows.push(i);
                golds.push(*c);
            }
        }
        if rows.is_empty() {
            return Ok(None);
        }
        let x = tape.gather_rows(e_km, &rows)?;
        let w = store.var(tape, "head.category.w")?;
        let b = store.var(tape, "head.category.b")?;
        let xw = tape.matmul(x, w, false, false)?;
        let logits = tape.add_bias(xw, b)?;
        Ok(Some(tape.cross_entropy_mean(logits, &golds)?))
    }

    /// Mean cross-entropy of the relation head over (head row ⊕ tail row)
    /// concatenations. Triplets index rows of `e_km`.
    pub fn loss_relation_type(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        e_km: Var,
        triplets: &[(usize, usize, usize)],
    ) -> Result<Option<Var>> {
        if triplets.is_empty() {
            return Ok(None);
        }
        let heads: Vec<usize> = triplets.iter().map(|t| t.0).collect();
        let golds: Vec<usize> = triplets.iter().map(|t| t.1).collect();
        let tails: Vec<usize> = triplets.iter().map(|t| t.2).collect();
        let h = tape.gather_rows(e_km, &heads)?;
        let t = tape.gather_rows(e_km, &tails)?;
        let x = tape.concat_cols(&[h, t])?;
        let w = store.var(tape, "head.relation.w")?;
        let b = store.var(tape, "head.relation.b")?;
        let xw = tape.matmul(x, w, false, false)?;
        let logits = tape.add_bias(xw, b)?;
        Ok(Some(tape.cross_entropy_mean(logits, &golds)?))
    }

    /// Mean cross-entropy of the token head at the corrupted positions only.
    /// Targets are (flat row in z, original token id).
    pub fn loss_masked_token(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: Var,
        targets: &[(usize, usize)],
    ) -> Result<Option<Var>> {
        if targets.is_empty() {
            return Ok(None);
        }
        let rows: Vec<usize> = targets.iter().map(|t| t.0).collect();
        let golds: Vec<usize> = targets.iter().map(|t| t.1).collect();
        let x = tape.gather_rows(z, &rows)?;
        let w = store.var(tape, "head.token.w")?;
        let b = store.var(tape, "head.token.b")?;
        let xw = tape.matmul(x, w, false, false)?;
        let logits = tape.add_bias(xw, b)?;
        Ok(Some(tape.cross_entropy_mean(logits, &golds)?))
    }

    /// Masked entity prediction. Per probe: q = g((z_start + z_end) / 2),
    /// candidates = gold + gold's neighbors + random entities, scores are
    /// inner products against memory rows held as gradient constants, and
    /// the gold (always index 0) is the cross-entropy target.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_masked_entity(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: Var,
        probes: &[EntityProbe],
        memory: &EntityMemory,
        kg: &KnowledgeGraph,
        count: usize,
        rng: &mut impl Rng,
    ) -> Result<Option<Var>> {
        if probes.is_empty() {
            return Ok(None);
        }
        let starts: Vec<usize> = probes.iter().map(|p| p.start_row).collect();
        let ends: Vec<usize> = probes.iter().map(|p| p.end_row).collect();
        let s = tape.gather_rows(z, &starts)?;
        let o = tape.gather_rows(z, &ends)?;
        let sum = tape.add(s, o)?;
        let avg = tape.scale(sum, 0.5);
        let w1 = store.var(tape, "head.entity_g.w1")?;
        let w2 = store.var(tape, "head.entity_g.w2")?;
        let h = tape.matmul(avg, w1, false, false)?;
        let h = tape.relu(h);
        let q = tape.matmul(h, w2, false, false)?;
        let mut acc: Option<Var> = None;
        for (i, p) in probes.iter().enumerate() {
            let cands = entity_candidates(kg, p.entity, count, rng)?;
            let qi = tape.gather_rows(q, &[i])?;
            let cmat = tape.constant(memory.retrieve(&cands)?);
            let scores = tape.matmul(qi, cmat, false, true)?;
            let ce = tape.cross_entropy_mean(scores, &[0])?;
            acc = Some(match acc {
                Some(a) => tape.add(a, ce)?,
                None => ce,
            });
        }
        Ok(Some(tape.scale(acc.unwrap(), 1.0 / probes.len() as f64)))
    }
}

/// Candidate entity list for masked entity prediction: the gold first, then
/// its undirected neighbors, then uniform random entities; deduplicated and
/// capped at `count`. Deterministic given the generator state.
pub fn entity_candidates(
    kg: &KnowledgeGraph,
    gold: usize,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if count == 0 {
        return Err(Error::Config("candidate count must be positive".into()));
    }
    let mut out = vec![gold];
    for n in kg.neighbor_entities(gold)? {
        if out.len() >= count {
            break;
        }
        if n != gold {
            out.push(n);
        }
    }
    let limit = count.min(kg.entity_count);
    let mut attempts = 0usize;
    while out.len() < limit && attempts < 100 * count {
        attempts += 1;
        let c = rng.gen_range(0..kg.entity_count);
        if !out.contains(&c) {
            out.push(c);
        }
    }
    // rejection sampling stalls only near full coverage; finish by scan
    for c in 0..kg.entity_count {
        if out.len() >= limit {
            break;
        }
        if !out.contains(&c) {
            out.push(c);
        }
    }
    Ok(out)
}

/// Per-step record mirrored into the metrics CSV. Component losses are 0
/// when disabled or when their batch was empty; total is their sum.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss_c: f64,
    pub loss_r: f64,
    pub loss_t: f64,
    pub loss_e: f64,
    pub total: f64,
    pub lr_lm: f64,
    pub lr_km: f64,
    pub refreshed: bool,
}

impl StepReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{}",
            self.step,
            self.total,
            self.loss_c,
            self.loss_r,
            self.loss_t,
            self.loss_e,
            self.lr_lm,
            self.lr_km,
            u8::from(self.refreshed)
        )
    }
}

/// Loss graph roots of one step; None marks a loss that is disabled or had
/// an empty batch.
#[derive(Copy, Clone, Debug)]
pub struct StepLosses {
    pub c: Option<Var>,
    pub r: Option<Var>,
    pub t: Option<Var>,
    pub e: Option<Var>,
}

impl StepLosses {
    /// Equal-weight sum of the present terms; None when all are absent.
    pub fn total(&self, tape: &mut Tape) -> Result<Option<Var>> {
        let mut acc: Option<Var> = None;
        for term in [self.c, self.r, self.t, self.e].into_iter().flatten() {
            acc = Some(match acc {
                Some(a) => tape.add(a, term)?,
                None => term,
            });
        }
        Ok(acc)
    }
}

/// The full joint training state: both modules, task heads, parameters,
/// entity memory, and the two learning-rate schedules.
pub struct Trainer {
    pub lm: LanguageModule,
    pub km: KnowledgeModule,
    pub heads: TaskHeads,
    pub store: ParamStore,
    pub memory: EntityMemory,
    pub relations: Option<RelationMemory>,
    pub lm_schedule: LrSchedule,
    pub km_schedule: LrSchedule,
    pub hyper: AdamHyper,
    pub cfg: TrainConfig,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, kg: &KnowledgeGraph, vocab_len: usize) -> Result<Self> {
        cfg.validate()?;
        let lm = LanguageModule::new(cfg, vocab_len)?;
        let km = KnowledgeModule::new(cfg)?;
        let heads = TaskHeads::new(cfg.embed_dim, kg.category_count, kg.relation_count, vocab_len);
        let mut store = ParamStore::new();
        lm.init_params(&mut store, &mut rng::derive(cfg.seed, StreamTag::ParamInit, 0))?;
        km.init_params(&mut store, &mut rng::derive(cfg.seed, StreamTag::ParamInit, 1))?;
        heads.init_params(&mut store, &mut rng::derive(cfg.seed, StreamTag::ParamInit, 2))?;
        let memory = EntityMemory::build(
            &lm,
            &store,
            kg,
            MemorySchedule::from_config(cfg),
            cfg.mem_momentum,
        )?;
        let relations = match cfg.relation_mode {
            RelationMode::Context => Some(RelationMemory::build(&lm, &store, kg)?),
            RelationMode::None => None,
        };
        Ok(Trainer {
            lm,
            km,
            heads,
            store,
            memory,
            relations,
            lm_schedule: LrSchedule::new(cfg.lm_peak_lr, cfg.warmup_steps, cfg.total_steps)?,
            km_schedule: LrSchedule::new(cfg.km_peak_lr, 0, cfg.total_steps)?,
            hyper: AdamHyper {
                beta1: cfg.beta1,
                beta2: cfg.beta2,
                eps: cfg.adam_eps,
                weight_decay: cfg.weight_decay,
            },
            cfg: cfg.clone(),
        })
    }

    /// Corpus prefix available for training batches; the tail
    /// `eval_sequences` entries are held out for evaluation.
    pub fn train_len(&self, corpus_len: usize) -> Result<usize> {
        if corpus_len <= self.cfg.eval_sequences {
            return Err(Error::Config(format!(
                "corpus of {corpus_len} cannot hold out {} eval sequences",
                self.cfg.eval_sequences
            )));
        }
        Ok(corpus_len - self.cfg.eval_sequences)
    }

    /// Knowledge-module forward over the sampled neighborhoods of `targets`.
    /// Output rows align with `targets`; initial embeddings come from the
    /// memory as gradient constants.
    fn km_embeddings(
        &self,
        tape: &mut Tape,
        kg: &KnowledgeGraph,
        targets: &[usize],
        neigh_seed: u64,
    ) -> Result<Var> {
        let sub = kg.sample_neighborhood(targets, self.cfg.gat_layers, self.cfg.fanout, neigh_seed)?;
        let e0 = tape.constant(self.memory.retrieve(sub.support())?);
        let rel = self.relations.as_ref().map(|r| &r.matrix);
        self.km.forward(tape, &self.store, &sub, e0, rel, None)
    }

    /// Builds the step's loss graph on `tape` without touching any state:
    /// both phases, all enabled losses. Shared by the optimizer step and
    /// the finite-difference gradient check.
    pub fn build_step_losses(
        &self,
        tape: &mut Tape,
        kg: &KnowledgeGraph,
        corpus: &[AnnotatedSequence],
        step: u64,
    ) -> Result<StepLosses> {
        let cfg = &self.cfg;
        let do_km = !cfg.alternate_phases || step % 2 == 0;
        let do_lm = !cfg.alternate_phases || step % 2 == 1;
        let neigh_seed = rng::mix(cfg.seed, StreamTag::NeighborSample, step);

        // knowledge phase: random-walk batch, structural losses
        let mut loss_c = None;
        let mut loss_r = None;
        if do_km && (cfg.loss_category || cfg.loss_relation) {
            let mut root_rng = rng::derive(cfg.seed, StreamTag::WalkRoots, step);
            let k = cfg.walk_roots.min(kg.entity_count);
            let roots: Vec<usize> = sample(&mut root_rng, kg.entity_count, k).into_vec();
            let walk_seed = rng::mix(cfg.seed, StreamTag::Walk, step);
            let targets = kg.random_walk(&roots, cfg.walk_length, walk_seed)?;
            let e_km = self.km_embeddings(tape, kg, &targets, neigh_seed)?;
            if cfg.loss_category {
                let labels: Vec<Option<usize>> =
                    targets.iter().map(|&v| kg.categories[v]).collect();
                loss_c =
                    self.heads.loss_entity_category(tape, &self.store, e_km, &labels)?;
                if loss_c.is_none() {
                    eprintln!("warning: step {step}: no labeled entity in batch, L_c skipped");
                }
            }
            if cfg.loss_relation {
                let pos: std::collections::HashMap<usize, usize> =
                    targets.iter().enumerate().map(|(i, &v)| (v, i)).collect();
                let mut induced: Vec<(usize, usize, usize)> = kg
                    .triplets
                    .iter()
                    .filter_map(|&(h, r, t)| Some((*pos.get(&h)?, r, *pos.get(&t)?)))
                    .collect();
                if induced.len() > cfg.relation_triplets {
                    use rand::seq::SliceRandom;
                    induced.shuffle(&mut rng::derive(cfg.seed, StreamTag::Triplets, step));
                    induced.truncate(cfg.relation_triplets);
                }
                loss_r =
                    self.heads.loss_relation_type(tape, &self.store, e_km, &induced)?;
                if loss_r.is_none() {
                    eprintln!("warning: step {step}: no induced triplet in batch, L_r skipped");
                }
            }
        }

        // language phase: masked text batch with mention fusion
        let mut loss_t = None;
        let mut loss_e = None;
        if do_lm && (cfg.loss_token || cfg.loss_entity) {
            let train_len = self.train_len(corpus.len())?;
            let b = cfg.text_batch.min(train_len);
            let mut batch_rng = rng::derive(cfg.seed, StreamTag::TextBatch, step);
            let picks: Vec<usize> = sample(&mut batch_rng, train_len, b).into_vec();
            let mut tok_rng = rng::derive(cfg.seed, StreamTag::TokenMask, step);
            let mut men_rng = rng::derive(cfg.seed, StreamTag::MentionMask, step);
            let mut corrupted = Vec::with_capacity(b);
            let mut visible = Vec::with_capacity(b);
            let mut masked = Vec::with_capacity(b);
            for &i in &picks {
                let seq = &corpus[i];
                corrupted.push(text::mask_tokens(
                    &seq.tokens,
                    self.heads.vocab_len,
                    cfg.token_mask_rate,
                    &mut tok_rng,
                ));
                let (vis, mas) =
                    text::mask_mentions(&seq.mentions, cfg.mention_mask_rate, &mut men_rng);
                visible.push(vis);
                masked.push(mas);
            }
            let tb = TokenBatch::new(
                &corrupted.iter().map(|c| c.tokens.clone()).collect::<Vec<_>>(),
                cfg.max_seq_len,
            )?;
            let x = self.lm.embed(tape, &self.store, &tb)?;
            let z1 = self.lm.first_stage(tape, &self.store, x, &tb, None)?;

            // visible mentions are fused with entity embeddings computed
            // over their own sampled neighborhoods within this same step
            let mut fuse_entities: Vec<usize> =
                visible.iter().flatten().map(|m| m.entity).collect();
            fuse_entities.sort_unstable();
            fuse_entities.dedup();
            let z_mid = if fuse_entities.is_empty() {
                self.lm.fuse(tape, &self.store, z1, None, &[])?
            } else {
                let e_km = self.km_embeddings(tape, kg, &fuse_entities, neigh_seed)?;
                let mut positions = Vec::new();
                let mut row_idx = Vec::new();
                for (bi, vis) in visible.iter().enumerate() {
                    for m in vis {
                        let row = fuse_entities.binary_search(&m.entity).unwrap();
                        for p in m.start..=m.end {
                            positions.push(tb.flat_pos(bi, p));
                            row_idx.push(row);
                        }
                    }
                }
                let rows = tape.gather_rows(e_km, &row_idx)?;
                self.lm.fuse(tape, &self.store, z1, Some(rows), &positions)?
            };
            let z = self.lm.second_stage(tape, &self.store, z_mid, &tb, None)?;

            if cfg.loss_token {
                let mut targets = Vec::new();
                for (bi, c) in corrupted.iter().enumerate() {
                    for &(p, orig) in &c.targets {
                        targets.push((tb.flat_pos(bi, p), orig));
                    }
                }
                loss_t = self.heads.loss_masked_token(tape, &self.store, z, &targets)?;
                if loss_t.is_none() {
                    eprintln!("warning: step {step}: no corrupted token, L_t skipped");
                }
            }
            if cfg.loss_entity {
                let mut probes = Vec::new();
                for (bi, ms) in masked.iter().enumerate() {
                    for m in ms {
                        probes.push(EntityProbe {
                            start_row: tb.flat_pos(bi, m.start),
                            end_row: tb.flat_pos(bi, m.end),
                            entity: m.entity,
                        });
                    }
                }
                let mut cand_rng = rng::derive(cfg.seed, StreamTag::Candidates, step);
                loss_e = self.heads.loss_masked_entity(
                    tape,
                    &self.store,
                    z,
                    &probes,
                    &self.memory,
                    kg,
                    cfg.entity_candidates,
                    &mut cand_rng,
                )?;
                if loss_e.is_none() {
                    eprintln!("warning: step {step}: no masked mention, L_e skipped");
                }
            }
        }

        Ok(StepLosses { c: loss_c, r: loss_r, t: loss_t, e: loss_e })
    }

    /// One joint optimization step: build losses, one backward, one AdamW
    /// update with per-group rates, then the memory refresh hook.
    pub fn step(
        &mut self,
        kg: &KnowledgeGraph,
        corpus: &[AnnotatedSequence],
        step: u64,
    ) -> Result<StepReport> {
        let mut tape = Tape::new();
        let losses = self.build_step_losses(&mut tape, kg, corpus, step)?;
        let lr_lm = self.lm_schedule.lr_at_step(step);
        let lr_km = self.km_schedule.lr_at_step(step);
        let value = |t: Option<Var>, tape: &Tape| t.map(|v| tape.value(v).item()).unwrap_or(0.0);
        let mut report = StepReport {
            step,
            loss_c: value(losses.c, &tape),
            loss_r: value(losses.r, &tape),
            loss_t: value(losses.t, &tape),
            loss_e: value(losses.e, &tape),
            total: 0.0,
            lr_lm,
            lr_km,
            refreshed: false,
        };
        report.total = report.loss_c + report.loss_r + report.loss_t + report.loss_e;
        if !report.total.is_finite() {
            return Err(Error::Train(format!(
                "non-finite loss at step {step}: c={} r={} t={} e={}",
                report.loss_c, report.loss_r, report.loss_t, report.loss_e
            )));
        }
        let Some(total_var) = losses.total(&mut tape)? else {
            eprintln!("warning: step {step}: every loss empty or disabled, step skipped");
            return Ok(report);
        };
        let grads = tape.backward(total_var)?;
        self.store.adamw_step(
            &grads,
            |g| match g {
                ParamGroup::Language => lr_lm,
                ParamGroup::Knowledge => lr_km,
            },
            &self.hyper,
        )?;
        report.refreshed = self.memory.maybe_refresh(&self.lm, &self.store, kg)?;
        Ok(report)
    }

    /// Held-out masked entity prediction: every mention of every held-out
    /// sequence is probed with no fusion anywhere (all mentions masked).
    /// Returns (hits@1, mean 1/|candidates| chance baseline).
    pub fn eval_masked_entity_hits(
        &self,
        kg: &KnowledgeGraph,
        eval_seqs: &[AnnotatedSequence],
        seed: u64,
    ) -> Result<(f64, f64)> {
        let mut hits = 0usize;
        let mut probes = 0usize;
        let mut chance = 0.0f64;
        let mut cand_rng = rng::derive(seed, StreamTag::Eval, u64::from(u32::MAX));
        for chunk in eval_seqs.chunks(self.cfg.text_batch.max(1)) {
            let tb = TokenBatch::new(
                &chunk.iter().map(|s| s.tokens.clone()).collect::<Vec<_>>(),
                self.cfg.max_seq_len,
            )?;
            let mut tape = Tape::new();
            let x = self.lm.embed(&mut tape, &self.store, &tb)?;
            let z1 = self.lm.first_stage(&mut tape, &self.store, x, &tb, None)?;
            let z_mid = self.lm.fuse(&mut tape, &self.store, z1, None, &[])?;
            let z = self.lm.second_stage(&mut tape, &self.store, z_mid, &tb, None)?;
            let mut probes_here = Vec::new();
            for (bi, s) in chunk.iter().enumerate() {
                for m in &s.mentions {
                    probes_here.push(EntityProbe {
                        start_row: tb.flat_pos(bi, m.start),
                        end_row: tb.flat_pos(bi, m.end),
                        entity: m.entity,
                    });
                }
            }
            if probes_here.is_empty() {
                continue;
            }
            let starts: Vec<usize> = probes_here.iter().map(|p| p.start_row).collect();
            let ends: Vec<usize> = probes_here.iter().map(|p| p.end_row).collect();
            let s = tape.gather_rows(z, &starts)?;
            let o = tape.gather_rows(z, &ends)?;
            let sum = tape.add(s, o)?;
            let avg = tape.scale(sum, 0.5);
            let w1 = self.store.var(&mut tape, "head.entity_g.w1")?;
            let w2 = self.store.var(&mut tape, "head.entity_g.w2")?;
            let h = tape.matmul(avg, w1, false, false)?;
            let h = tape.relu(h);
            let qv = tape.matmul(h, w2, false, false)?;
            let q = tape.value(qv).clone();
            for (i, p) in probes_here.iter().enumerate() {
                let cands =
                    entity_candidates(kg, p.entity, self.cfg.entity_candidates, &mut cand_rng)?;
                let cmat = self.memory.retrieve(&cands)?;
                let qi = q.row(i);
                let mut best = (f64::NEG_INFINITY, 0usize);
                for (ci, _) in cands.iter().enumerate() {
                    let score: f64 =
                        qi.iter().zip(cmat.row(ci)).map(|(a, b)| a * b).sum();
                    if score > best.0 {
                        best = (score, ci);
                    }
                }
                if best.1 == 0 {
                    hits += 1;
                }
                probes += 1;
                chance += 1.0 / cands.len() as f64;
            }
        }
        if probes == 0 {
            return Err(Error::Train("no mentions in held-out sequences".into()));
        }
        Ok((hits as f64 / probes as f64, chance / probes as f64))
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub reports: Vec<StepReport>,
    /// Held-out masked-entity (hits@1, chance baseline) after the last step.
    pub eval_hits: f64,
    pub eval_chance: f64,
}

/// Runs steps [start_step, total_steps), streaming metrics and checkpoints
/// into `out_dir` when given. `start_step > 0` appends to an existing
/// metrics file (checkpoint resume).
pub fn run_pretraining(
    trainer: &mut Trainer,
    kg: &KnowledgeGraph,
    corpus: &[AnnotatedSequence],
    out_dir: Option<&Path>,
    start_step: u64,
) -> Result<PretrainOutcome> {
    let total = trainer.cfg.total_steps;
    if start_step > total {
        return Err(Error::Config(format!(
            "start step {start_step} beyond total {total}"
        )));
    }
    let mut metrics = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.csv");
            let mut opts = std::fs::OpenOptions::new();
            let file = if start_step > 0 && path.exists() {
                opts.append(true).open(&path)
            } else {
                opts.write(true).create(true).truncate(true).open(&path)
            }
            .map_err(|e| Error::io(&path, e))?;
            let mut w = std::io::BufWriter::new(file);
            if start_step == 0 {
                writeln!(w, "{METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
            }
            Some((w, path))
        }
        None => None,
    };
    let mut reports = Vec::with_capacity((total - start_step) as usize);
    for step in start_step..total {
        let report = trainer.step(kg, corpus, step)?;
        if let Some((w, path)) = metrics.as_mut() {
            writeln!(w, "{}", report.csv_row()).map_err(|e| Error::io(&path, e))?;
        }
        reports.push(report);
        if let Some(dir) = out_dir {
            let done = step + 1;
            if trainer.cfg.checkpoint_interval > 0
                && (done % trainer.cfg.checkpoint_interval as u64 == 0 || done == total)
            {
                let path = dir.join(format!("checkpoint_step{done}.bin"));
                crate::checkpoint::save(&path, trainer, done)?;
            }
        }
    }
    if let Some((w, path)) = metrics.as_mut() {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    let eval_start = trainer.train_len(corpus.len())?;
    let (eval_hits, eval_chance) =
        trainer.eval_masked_entity_hits(kg, &corpus[eval_start..], trainer.cfg.seed)?;
    Ok(PretrainOutcome { reports, eval_hits, eval_chance })
}
