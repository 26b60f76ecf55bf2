//! End-to-end finite-difference verification of the step gradient.
//!
//! Rebuilds the full joint step loss (graph attention, fusion, all four
//! losses) under single-parameter perturbations and compares central
//! differences against the tape's analytic gradients, parameter by
//! parameter. A deliberate-corruption hook lets tests prove the check can
//! actually fail.

use crate::config::{TrainConfig, WorldConfig};
use crate::error::{Error, Result};
use crate::optim::ParamGroup;
use crate::pretrain::Trainer;
use crate::synth::{self, World};
use crate::tape::Tape;

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Relative error uses max(|analytic|, |fd|, FLOOR) as denominator, so a
/// near-zero derivative is judged by absolute error at the FLOOR scale
/// instead of amplifying finite-difference roundoff.
pub const DENOM_FLOOR: f64 = 1e-5;
/// Checked entries per parameter, spread evenly through the tensor.
const ENTRIES_PER_PARAM: usize = 4;

#[derive(Clone, Debug)]
pub struct GradCheckRow {
    pub name: String,
    pub group: ParamGroup,
    pub max_rel_err: f64,
    pub entries: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub rows: Vec<GradCheckRow>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradCheckReport {
    /// Plain-text table, one parameter per line, worst offender flagged.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
        out.push_str(&format!(
            "{:width$}  {:9}  {:>8}  {:>12}\n",
            "name", "group", "entries", "max rel err"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:width$}  {:9}  {:>8}  {:>12.3e}{}\n",
                r.name,
                format!("{:?}", r.group),
                r.entries,
                r.max_rel_err,
                if r.max_rel_err > self.tolerance { "  FAIL" } else { "" }
            ));
        }
        out.push_str(&format!(
            "{}: max relative error {:.3e} (tolerance {:.1e})\n",
            if self.pass { "PASS" } else { "FAIL" },
            self.max_rel_err,
            self.tolerance
        ));
        out
    }
}

/// Configuration small enough to finite-difference in seconds: F=8, one
/// language layer per stage, one attention layer, two heads.
pub fn tiny_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.embed_dim = 8;
    cfg.lm_layers = 2;
    cfg.lm_split = 1;
    cfg.lm_heads = 2;
    cfg.gat_layers = 1;
    cfg.gat_heads = 2;
    cfg.fanout = 3;
    cfg.walk_roots = 3;
    cfg.walk_length = 1;
    cfg.text_batch = 2;
    cfg.max_seq_len = 24;
    cfg.eval_sequences = 10;
    cfg.entity_candidates = 8;
    cfg.relation_triplets = 8;
    cfg.total_steps = 10;
    cfg.warmup_steps = 0;
    cfg.world = WorldConfig {
        entities: 60,
        relations: 4,
        categories: 10,
        vocab_size: 160,
        sequences: 120,
        max_seq_len: 16,
        mean_degree: 4.0,
        phrase_concentration: 0.9,
        seed: 5,
    };
    cfg
}

/// Runs the check at `cfg` on a world generated from `cfg.world`.
/// `corrupt` names a parameter whose analytic gradient gets +0.5 added to
/// its first checked entry, a negative control that must produce a failure.
pub fn grad_check(cfg: &TrainConfig, corrupt: Option<&str>) -> Result<GradCheckReport> {
    let world = synth::generate_world(&cfg.world)?;
    grad_check_on(cfg, &world, corrupt)
}

pub fn grad_check_on(
    cfg: &TrainConfig,
    world: &World,
    corrupt: Option<&str>,
) -> Result<GradCheckReport> {
    let mut trainer = Trainer::new(cfg, &world.kg, world.vocab.len())?;
    let step = 0u64;

    let mut tape = Tape::new();
    let losses = trainer.build_step_losses(&mut tape, &world.kg, &world.corpus, step)?;
    if losses.c.is_none() || losses.r.is_none() || losses.t.is_none() || losses.e.is_none() {
        return Err(Error::Train(
            "gradient check step must exercise all four losses; batch came up empty".into(),
        ));
    }
    let total = losses.total(&mut tape)?.unwrap();
    let analytic = tape.backward(total)?;

    let names: Vec<String> = trainer.store.iter().map(|p| p.name.clone()).collect();
    let mut rows = Vec::with_capacity(names.len());
    let mut max_rel_err = 0.0f64;
    for name in &names {
        let (id, numel) = {
            let p = trainer.store.get(name)?;
            (p.id, p.value.numel())
        };
        let grad = analytic
            .get(id)
            .ok_or_else(|| Error::Train(format!("{name} missing from the gradient map")))?
            .clone();
        let mut idxs: Vec<usize> = (0..ENTRIES_PER_PARAM)
            .map(|k| k * numel.saturating_sub(1) / ENTRIES_PER_PARAM.saturating_sub(1).max(1))
            .collect();
        idxs.dedup();
        let mut row_err = 0.0f64;
        for (k, &i) in idxs.iter().enumerate() {
            let fd = {
                let orig = trainer.store.get(name)?.value.data()[i];
                trainer.store.get_mut(name)?.value.data_mut()[i] = orig + FD_STEP;
                let up = step_loss_value(&trainer, world, step)?;
                trainer.store.get_mut(name)?.value.data_mut()[i] = orig - FD_STEP;
                let down = step_loss_value(&trainer, world, step)?;
                trainer.store.get_mut(name)?.value.data_mut()[i] = orig;
                (up - down) / (2.0 * FD_STEP)
            };
            let mut a = grad.data()[i];
            if k == 0 && corrupt == Some(name.as_str()) {
                a += 0.5;
            }
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(DENOM_FLOOR);
            row_err = row_err.max(rel);
        }
        max_rel_err = max_rel_err.max(row_err);
        rows.push(GradCheckRow {
            name: name.clone(),
            group: trainer.store.get(name)?.group,
            max_rel_err: row_err,
            entries: idxs.len(),
        });
    }
    Ok(GradCheckReport { rows, max_rel_err, tolerance: TOLERANCE, pass: max_rel_err <= TOLERANCE })
}

fn step_loss_value(trainer: &Trainer, world: &World, step: u64) -> Result<f64> {
    let mut tape = Tape::new();
    let losses = trainer.build_step_losses(&mut tape, &world.kg, &world.corpus, step)?;
    let total = losses
        .total(&mut tape)?
        .ok_or_else(|| Error::Train("no loss terms in gradient check".into()))?;
    Ok(tape.value(total).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_config_passes_within_tolerance() {
        let report = grad_check(&tiny_config(), None).unwrap();
        assert!(report.pass, "\n{}", report.render());
        assert!(report.max_rel_err <= TOLERANCE);
    }

    #[test]
    fn report_covers_both_parameter_groups_and_all_heads() {
        let report = grad_check(&tiny_config(), None).unwrap();
        let names: Vec<&str> = report.rows.iter().map(|r| r.name.as_str()).collect();
        assert!(report.rows.iter().any(|r| matches!(r.group, ParamGroup::Language)));
        assert!(report.rows.iter().any(|r| matches!(r.group, ParamGroup::Knowledge)));
        for expect in [
            "lm.tok_embed",
            "lm.fuse_ln.g",
            "km.l00.h00.w",
            "km.dir_offset",
            "head.category.w",
            "head.relation.w",
            "head.token.w",
            "head.entity_g.w1",
        ] {
            assert!(names.contains(&expect), "{expect} missing from report");
        }
        let rendered = report.render();
        assert!(rendered.contains("PASS"));
        assert!(rendered.lines().count() >= report.rows.len() + 2);
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let report = grad_check(&tiny_config(), Some("lm.l00.attn.wq")).unwrap();
        assert!(!report.pass);
        let bad = report.rows.iter().find(|r| r.name == "lm.l00.attn.wq").unwrap();
        assert!(bad.max_rel_err > TOLERANCE);
    }
}
