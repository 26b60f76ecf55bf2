//! Entity context embedding memory.
//!
//! The lower language-module stage pre-computes a context embedding for every
//! entity description; training retrieves rows from this matrix instead of
//! re-encoding descriptions each step. Because the encoder drifts during
//! training, the matrix is refreshed on a growing interval schedule and
//! blended with momentum toward the freshly recomputed rows.
//!
//! Retrieved rows are constants for gradient purposes: no gradient flows
//! back into the encoder through the memory.

use crate::error::{Error, Result};
use crate::graph::KnowledgeGraph;
use crate::lm::LanguageModule;
use crate::optim::ParamStore;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::text;

/// Refresh interval schedule: T(i) = min(init · ratio^⌊i/repeat⌋, max).
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct MemorySchedule {
    pub init: u64,
    pub ratio: u64,
    pub repeat: u64,
    pub max: u64,
}

impl MemorySchedule {
    pub fn from_config(cfg: &crate::config::TrainConfig) -> Self {
        MemorySchedule {
            init: cfg.mem_init_interval,
            ratio: cfg.mem_interval_ratio,
            repeat: cfg.mem_interval_repeat,
            max: cfg.mem_max_interval,
        }
    }

    /// Steps until the next refresh after `i` completed refreshes.
    pub fn interval(&self, i: u64) -> u64 {
        let exp = i / self.repeat;
        // saturating power: once the cap is passed the exact value is moot
        let mut v = self.init;
        for _ in 0..exp {
            v = v.saturating_mul(self.ratio);
            if v >= self.max {
                return self.max;
            }
        }
        v.min(self.max)
    }
}

#[derive(Clone, Debug)]
pub struct EntityMemory {
    pub matrix: Tensor,
    /// Completed refreshes (the i of the interval schedule).
    pub updates: u64,
    /// Optimizer steps since the last refresh.
    pub steps_since: u64,
    pub schedule: MemorySchedule,
    pub momentum: f64,
}

impl EntityMemory {
    /// Encodes every entity description with the current lower stage.
    /// Row e is the context embedding of entity e's description.
    pub fn build(
        lm: &LanguageModule,
        store: &ParamStore,
        kg: &KnowledgeGraph,
        schedule: MemorySchedule,
        momentum: f64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum {momentum} outside [0,1)")));
        }
        let matrix = encode_descriptions(lm, store, &kg.entity_descriptions, lm.max_len)?;
        Ok(EntityMemory {
            matrix,
            updates: 0,
            steps_since: 0,
            schedule,
            momentum,
        })
    }

    pub fn entity_count(&self) -> usize {
        self.matrix.rows()
    }

    /// Snapshot rows for the given ids; duplicates yield duplicate rows.
    /// The result carries no gradient linkage to the encoder.
    pub fn retrieve(&self, ids: &[usize]) -> Result<Tensor> {
        let f = self.matrix.cols();
        let mut out = Tensor::zeros(&[ids.len(), f]);
        for (r, &id) in ids.iter().enumerate() {
            if id >= self.matrix.rows() {
                return Err(Error::Graph(format!(
                    "entity id {id} outside memory of {} rows",
                    self.matrix.rows()
                )));
            }
            out.row_mut(r).copy_from_slice(self.matrix.row(id));
        }
        Ok(out)
    }

    /// Momentum blend toward freshly recomputed rows; advances the refresh
    /// count and resets the step counter.
    pub fn blend(&mut self, new: &Tensor) -> Result<()> {
        if new.shape() != self.matrix.shape() {
            return Err(Error::Shape(format!(
                "refresh rows are {:?}, memory holds {:?}",
                new.shape(),
                self.matrix.shape()
            )));
        }
        let m = self.momentum;
        for (old, fresh) in self.matrix.data_mut().iter_mut().zip(new.data()) {
            *old = m * *old + (1.0 - m) * fresh;
        }
        self.updates += 1;
        self.steps_since = 0;
        Ok(())
    }

    /// Call once after every optimizer step. When the elapsed step count
    /// reaches the current interval, recomputes all rows with the current
    /// encoder and blends. Returns whether a refresh happened.
    pub fn maybe_refresh(
        &mut self,
        lm: &LanguageModule,
        store: &ParamStore,
        kg: &KnowledgeGraph,
    ) -> Result<bool> {
        self.steps_since += 1;
        if self.steps_since < self.schedule.interval(self.updates) {
            return Ok(false);
        }
        let new = encode_descriptions(lm, store, &kg.entity_descriptions, lm.max_len)?;
        self.blend(&new)?;
        Ok(true)
    }

    /// Fresh memory over a new entity set, encoded by the current (typically
    /// pre-trained) lower stage. Never blended with any previous memory;
    /// fine-tuning leaves it untouched by simply not calling maybe_refresh.
    pub fn rebuild_for_unseen(
        lm: &LanguageModule,
        store: &ParamStore,
        kg_unseen: &KnowledgeGraph,
        schedule: MemorySchedule,
        momentum: f64,
    ) -> Result<Self> {
        EntityMemory::build(lm, store, kg_unseen, schedule, momentum)
    }
}

/// Relation context embeddings, one row per relation, encoded from relation
/// description text. Built once before fine-tuning and never refreshed.
#[derive(Clone, Debug)]
pub struct RelationMemory {
    pub matrix: Tensor,
}

impl RelationMemory {
    pub fn build(lm: &LanguageModule, store: &ParamStore, kg: &KnowledgeGraph) -> Result<Self> {
        let matrix = encode_descriptions(lm, store, &kg.relation_descriptions, lm.max_len)?;
        Ok(RelationMemory { matrix })
    }
}

/// Encodes each description independently through the lower stage. The
/// boundary span comes from the description window rule; stored descriptions
/// carry no mention annotation, so the leading-position fallback applies
/// (descriptions lead with the subject's name right after the start token).
pub(crate) fn encode_descriptions(
    lm: &LanguageModule,
    store: &ParamStore,
    descriptions: &[Vec<usize>],
    max_len: usize,
) -> Result<Tensor> {
    let mut out = Tensor::zeros(&[descriptions.len(), lm.dim]);
    for (e, desc) in descriptions.iter().enumerate() {
        if desc.len() < 2 {
            return Err(Error::Graph(format!("entity {e} has no description")));
        }
        let (window, span) = text::description_window(desc, &[], max_len);
        let mut tape = Tape::new();
        let row = lm.encode_description(&mut tape, store, &window, span)?;
        out.row_mut(e).copy_from_slice(tape.value(row).data());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;
    use crate::rng;

    fn schedule() -> MemorySchedule {
        MemorySchedule { init: 10, ratio: 2, repeat: 3, max: 500 }
    }

    fn tiny_world() -> (LanguageModule, ParamStore, KnowledgeGraph) {
        let mut cfg = TrainConfig::default();
        cfg.embed_dim = 8;
        cfg.lm_heads = 2;
        cfg.lm_layers = 2;
        cfg.lm_split = 1;
        cfg.max_seq_len = 12;
        let lm = LanguageModule::new(&cfg, 16).unwrap();
        let mut store = ParamStore::new();
        let mut r = rng::chacha(rng::mix(21, rng::StreamTag::ParamInit, 0));
        lm.init_params(&mut store, &mut r).unwrap();
        let descs = vec![
            vec![1, 5, 6, 7, 2],
            vec![1, 8, 9, 2],
            vec![1, 10, 11, 12, 13, 2],
        ];
        let kg = KnowledgeGraph::new(
            3,
            2,
            2,
            vec![(0, 0, 1), (1, 1, 2)],
            vec![Some(0), Some(1), None],
            descs,
            vec![vec![1, 14, 2], vec![1, 15, 2]],
        )
        .unwrap();
        (lm, store, kg)
    }

    #[test]
    fn interval_sequence_matches_published_values() {
        let s = schedule();
        let want = [10, 10, 10, 20, 20, 20, 40, 40, 40];
        for (i, w) in want.iter().enumerate() {
            assert_eq!(s.interval(i as u64), *w);
        }
        assert_eq!(s.interval(30), 500);
    }

    #[test]
    fn interval_is_nondecreasing_and_caps() {
        let s = schedule();
        let mut prev = 0;
        for i in 0..10_000u64 {
            let t = s.interval(i);
            assert!(t >= prev);
            assert!(t <= 500);
            prev = t;
        }
        assert_eq!(prev, 500);
    }

    #[test]
    fn build_rows_equal_description_encodings_bitwise() {
        let (lm, store, kg) = tiny_world();
        let mem = EntityMemory::build(&lm, &store, &kg, schedule(), 0.8).unwrap();
        assert_eq!(mem.matrix.shape(), &[3, 8]);
        assert_eq!(mem.updates, 0);
        for e in 0..3 {
            let (window, span) =
                text::description_window(&kg.entity_descriptions[e], &[], lm.max_len);
            let mut tape = Tape::new();
            let row = lm.encode_description(&mut tape, &store, &window, span).unwrap();
            let want = tape.value(row);
            let got = mem.retrieve(&[e]).unwrap();
            assert!(got
                .data()
                .iter()
                .zip(want.data())
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        let again = EntityMemory::build(&lm, &store, &kg, schedule(), 0.8).unwrap();
        assert!(mem
            .matrix
            .data()
            .iter()
            .zip(again.matrix.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn retrieve_handles_duplicates_full_range_and_bad_ids() {
        let (lm, store, kg) = tiny_world();
        let mem = EntityMemory::build(&lm, &store, &kg, schedule(), 0.8).unwrap();
        let dup = mem.retrieve(&[1, 1]).unwrap();
        assert_eq!(dup.row(0), dup.row(1));
        let all = mem.retrieve(&[0, 1, 2]).unwrap();
        assert_eq!(all.data(), mem.matrix.data());
        assert!(mem.retrieve(&[3]).is_err());
    }

    #[test]
    fn blend_fixture_and_convexity() {
        let (lm, store, kg) = tiny_world();
        let mut mem = EntityMemory::build(&lm, &store, &kg, schedule(), 0.8).unwrap();
        mem.matrix = Tensor::new(vec![3, 2], vec![1.0, 0.0, 2.0, -2.0, 0.5, 0.5]).unwrap();
        let new = Tensor::new(vec![3, 2], vec![0.0, 1.0, -2.0, 2.0, 0.5, 0.5]).unwrap();
        let old = mem.matrix.clone();
        mem.blend(&new).unwrap();
        assert!((mem.matrix.data()[0] - 0.8).abs() <= 1e-15);
        assert!((mem.matrix.data()[1] - 0.2).abs() <= 1e-15);
        assert_eq!(mem.updates, 1);
        assert_eq!(mem.steps_since, 0);
        for ((o, n), b) in old.data().iter().zip(new.data()).zip(mem.matrix.data()) {
            assert!(*b >= o.min(*n) - 1e-15 && *b <= o.max(*n) + 1e-15);
        }
    }

    #[test]
    fn repeated_blends_contract_geometrically() {
        let (lm, store, kg) = tiny_world();
        let mut mem = EntityMemory::build(&lm, &store, &kg, schedule(), 0.8).unwrap();
        let target = Tensor::randn(&[3, 8], 1.0, &mut rng::chacha(3));
        let dist = |m: &Tensor| -> f64 {
            m.data()
                .iter()
                .zip(target.data())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let mut prev = dist(&mem.matrix);
        for _ in 0..5 {
            mem.blend(&target).unwrap();
            let d = dist(&mem.matrix);
            assert!((d / prev - 0.8).abs() <= 1e-12, "ratio {}", d / prev);
            prev = d;
        }
    }

    #[test]
    fn refresh_steps_are_prefix_sums_of_intervals() {
        let (lm, store, kg) = tiny_world();
        let mut mem = EntityMemory::build(&lm, &store, &kg, schedule(), 0.8).unwrap();
        let mut fired = Vec::new();
        for step in 1..=300u64 {
            if mem.maybe_refresh(&lm, &store, &kg).unwrap() {
                fired.push(step);
            }
        }
        assert_eq!(fired, vec![10, 20, 30, 50, 70, 90, 130, 170, 210, 290]);
    }

    #[test]
    fn retrieval_is_a_gradient_constant() {
        let (lm, store, kg) = tiny_world();
        let mem = EntityMemory::build(&lm, &store, &kg, schedule(), 0.8).unwrap();
        let rows = mem.retrieve(&[0, 1, 2]).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(rows);
        let s = tape.sum_all(v);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.len(), 0, "memory rows must not carry gradients");
    }

    #[test]
    fn unseen_rebuild_is_independent_of_old_memory() {
        let (lm, store, kg) = tiny_world();
        let mut mem = EntityMemory::build(&lm, &store, &kg, schedule(), 0.8).unwrap();
        for v in mem.matrix.data_mut() {
            *v = 99.0;
        }
        let fresh = EntityMemory::rebuild_for_unseen(&lm, &store, &kg, schedule(), 0.8).unwrap();
        assert_eq!(fresh.updates, 0);
        assert!(fresh.matrix.data().iter().all(|v| *v != 99.0));
    }

    #[test]
    fn relation_memory_rows_encode_relation_descriptions() {
        let (lm, store, kg) = tiny_world();
        let rm = RelationMemory::build(&lm, &store, &kg).unwrap();
        assert_eq!(rm.matrix.shape(), &[2, 8]);
        let (window, span) = text::description_window(&kg.relation_descriptions[0], &[], lm.max_len);
        let mut tape = Tape::new();
        let row = lm.encode_description(&mut tape, &store, &window, span).unwrap();
        assert!(rm
            .matrix
            .row(0)
            .iter()
            .zip(tape.value(row).data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
