//! Wall-clock comparison of the context-embedding memory against on-the-fly
//! description encoding.
//!
//! Each benchmark step reconstructs the entity set a combined training step
//! touches (walk-target neighborhoods plus fused-mention neighborhoods) and
//! times two ways of producing their initial embeddings: memory rows with
//! scheduled refreshes amortized in, and a fresh lower-stage encode of every
//! needed description. Sampling runs outside both timed regions since the
//! variants share it.

use std::time::Instant;

use rand::seq::index::sample;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::graph::KnowledgeGraph;
use crate::memory;
use crate::pretrain::Trainer;
use crate::rng::{self, StreamTag};
use crate::synth::World;
use crate::text::{self, AnnotatedSequence};

pub const TRACE_HEADER: &str = "step,entities,retrieval_s,recompute_s,refreshed";

#[derive(Clone, Copy, Debug)]
pub struct BenchStep {
    pub step: u64,
    /// Distinct entities whose embeddings the step needs.
    pub entities: usize,
    /// Memory path: row lookups plus any scheduled refresh this step.
    pub retrieval_s: f64,
    /// Encoder path: lower-stage forward over every needed description.
    pub recompute_s: f64,
    pub refreshed: bool,
}

impl BenchStep {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:?},{:?},{}",
            self.step,
            self.entities,
            self.retrieval_s,
            self.recompute_s,
            u8::from(self.refreshed)
        )
    }
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub per_step: Vec<BenchStep>,
    pub retrieval_total: f64,
    pub recompute_total: f64,
    /// recompute_total / retrieval_total; refresh cost counts against retrieval.
    pub ratio: f64,
    pub refreshes: u64,
}

impl BenchReport {
    pub fn summary(&self) -> String {
        format!(
            "steps {}  refreshes {}  retrieval {:.4}s  recompute {:.4}s  speedup {:.1}x",
            self.per_step.len(),
            self.refreshes,
            self.retrieval_total,
            self.recompute_total,
            self.ratio
        )
    }

    pub fn trace_csv(&self) -> String {
        let mut out = String::from(TRACE_HEADER);
        out.push('\n');
        for row in &self.per_step {
            out.push_str(&row.csv_row());
            out.push('\n');
        }
        out
    }
}

/// Runs the benchmark for `steps` steps on a freshly initialized model.
/// Assumes the default combined step; phase alternation only shrinks the
/// per-step entity set and never changes the comparison's direction.
pub fn bench_memory(cfg: &TrainConfig, world: &World, steps: u64) -> Result<BenchReport> {
    if steps == 0 {
        return Err(Error::Config("benchmark needs at least one step".into()));
    }
    let kg = &world.kg;
    let mut trainer = Trainer::new(cfg, kg, world.vocab.len())?;
    let train_len = trainer.train_len(world.corpus.len())?;

    let mut per_step = Vec::with_capacity(steps as usize);
    let mut retrieval_total = 0.0;
    let mut recompute_total = 0.0;
    let mut refreshes = 0u64;
    for step in 0..steps {
        let ids = step_entities(cfg, kg, &world.corpus, train_len, step)?;
        let descs: Vec<Vec<usize>> =
            ids.iter().map(|&e| kg.entity_descriptions[e].clone()).collect();

        let t0 = Instant::now();
        let rows = trainer.memory.retrieve(&ids)?;
        let refreshed = trainer.memory.maybe_refresh(&trainer.lm, &trainer.store, kg)?;
        let retrieval_s = t0.elapsed().as_secs_f64();
        std::hint::black_box(&rows);

        let t1 = Instant::now();
        let fresh =
            memory::encode_descriptions(&trainer.lm, &trainer.store, &descs, trainer.lm.max_len)?;
        let recompute_s = t1.elapsed().as_secs_f64();
        std::hint::black_box(&fresh);

        retrieval_total += retrieval_s;
        recompute_total += recompute_s;
        refreshes += u64::from(refreshed);
        per_step.push(BenchStep { step, entities: ids.len(), retrieval_s, recompute_s, refreshed });
    }
    let ratio = recompute_total / retrieval_total.max(1e-12);
    Ok(BenchReport { per_step, retrieval_total, recompute_total, ratio, refreshes })
}

/// Distinct entities whose initial embeddings step `step` would acquire,
/// derived from the same random streams the training step uses.
fn step_entities(
    cfg: &TrainConfig,
    kg: &KnowledgeGraph,
    corpus: &[AnnotatedSequence],
    train_len: usize,
    step: u64,
) -> Result<Vec<usize>> {
    let neigh_seed = rng::mix(cfg.seed, StreamTag::NeighborSample, step);
    let mut ids = Vec::new();

    let mut root_rng = rng::derive(cfg.seed, StreamTag::WalkRoots, step);
    let k = cfg.walk_roots.min(kg.entity_count);
    let roots: Vec<usize> = sample(&mut root_rng, kg.entity_count, k).into_vec();
    let walk_seed = rng::mix(cfg.seed, StreamTag::Walk, step);
    let targets = kg.random_walk(&roots, cfg.walk_length, walk_seed)?;
    let sub = kg.sample_neighborhood(&targets, cfg.gat_layers, cfg.fanout, neigh_seed)?;
    ids.extend_from_slice(sub.support());

    let b = cfg.text_batch.min(train_len);
    let mut batch_rng = rng::derive(cfg.seed, StreamTag::TextBatch, step);
    let picks: Vec<usize> = sample(&mut batch_rng, train_len, b).into_vec();
    let mut men_rng = rng::derive(cfg.seed, StreamTag::MentionMask, step);
    let mut fused: Vec<usize> = Vec::new();
    for &i in &picks {
        let (vis, _) = text::mask_mentions(&corpus[i].mentions, cfg.mention_mask_rate, &mut men_rng);
        fused.extend(vis.iter().map(|m| m.entity));
    }
    fused.sort_unstable();
    fused.dedup();
    if !fused.is_empty() {
        let sub = kg.sample_neighborhood(&fused, cfg.gat_layers, cfg.fanout, neigh_seed)?;
        ids.extend_from_slice(sub.support());
    }

    ids.sort_unstable();
    ids.dedup();
    if ids.is_empty() {
        return Err(Error::Train(format!("step {step} touched no entities")));
    }
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::synth;

    fn tiny_report(steps: u64) -> BenchReport {
        let cfg = gradcheck::tiny_config();
        let world = synth::generate_world(&cfg.world).unwrap();
        bench_memory(&cfg, &world, steps).unwrap()
    }

    #[test]
    fn one_trace_row_per_step_with_scheduled_refresh() {
        let report = tiny_report(12);
        assert_eq!(report.per_step.len(), 12);
        let marked: Vec<u64> =
            report.per_step.iter().filter(|s| s.refreshed).map(|s| s.step).collect();
        assert_eq!(marked, vec![9], "first refresh lands when the step count reaches 10");
        assert_eq!(report.refreshes, 1);
        for (i, row) in report.per_step.iter().enumerate() {
            assert_eq!(row.step, i as u64);
            assert!(row.entities > 0);
        }
    }

    #[test]
    fn recompute_is_slower_than_retrieval() {
        let report = tiny_report(12);
        assert!(
            report.ratio > 1.0,
            "retrieval must win: ratio {:.2} ({})",
            report.ratio,
            report.summary()
        );
    }

    #[test]
    fn refresh_cost_spikes_in_the_trace() {
        let report = tiny_report(12);
        let spike = report.per_step[9].retrieval_s;
        let mut others: Vec<f64> = report
            .per_step
            .iter()
            .filter(|s| !s.refreshed)
            .map(|s| s.retrieval_s)
            .collect();
        others.sort_by(f64::total_cmp);
        let median = others[others.len() / 2];
        assert!(
            spike > 2.0 * median,
            "refresh step took {spike:.2e}s, median plain step {median:.2e}s"
        );
    }

    #[test]
    fn trace_csv_shape_matches_header() {
        let report = tiny_report(3);
        let csv = report.trace_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(TRACE_HEADER));
        let cols = TRACE_HEADER.split(',').count();
        for line in lines {
            assert_eq!(line.split(',').count(), cols, "bad row: {line}");
        }
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn zero_steps_is_an_error() {
        let cfg = gradcheck::tiny_config();
        let world = synth::generate_world(&cfg.world).unwrap();
        assert!(bench_memory(&cfg, &world, 0).is_err());
    }
}
