//! Named parameter store, AdamW with decoupled weight decay, and the
//! warmup/decay learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tape::{Gradients, ParamId, Tape, Var};
use crate::tensor::Tensor;

/// Which learning-rate schedule a parameter follows. Task heads join the
/// group of the module whose outputs they consume.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum ParamGroup {
    /// Text-encoder side: warmup to a peak, then linear decay.
    Language,
    /// Graph-encoder side: peak rate from step 0, linear decay.
    Knowledge,
}

/// Trainable tensor plus AdamW slots. The step counter is per-parameter so
/// bias correction stays exact for parameters that join training late.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub group: ParamGroup,
    pub id: ParamId,
    pub value: Tensor,
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
}

/// All trainable state of a model, iterated in name order so updates are
/// reproducible regardless of construction order.
#[derive(Clone, Default)]
pub struct ParamStore {
    by_name: BTreeMap<String, Parameter>,
    next_id: u32,
}

#[derive(Copy, Clone, Debug)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, group: ParamGroup, value: Tensor) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.next_id);
        self.next_id += 1;
        let shape = value.shape().to_vec();
        self.by_name.insert(
            name.to_string(),
            Parameter {
                name: name.to_string(),
                group,
                id,
                value,
                m: Tensor::zeros(&shape),
                v: Tensor::zeros(&shape),
                t: 0,
            },
        );
        Ok(id)
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.by_name
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        self.by_name
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    /// Registers the named parameter on a tape and returns its variable.
    pub fn var(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        let p = self.get(name)?;
        Ok(tape.param(p.id, &p.value))
    }

    /// Name-sorted iteration; the only sanctioned way to walk all parameters.
    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.by_name.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.by_name.values_mut()
    }

    /// Zeroes the Adam slots and step counters; adaptation phases start
    /// with a fresh optimizer regardless of where the weights came from.
    pub fn reset_optimizer(&mut self) {
        for p in self.by_name.values_mut() {
            p.m = Tensor::zeros(p.m.shape());
            p.v = Tensor::zeros(p.v.shape());
            p.t = 0;
        }
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.by_name.values().map(|p| p.value.numel()).sum()
    }

    /// One AdamW update over every parameter that received a gradient.
    ///
    /// `lr_for` supplies the current rate per group; a group at rate 0 (for
    /// example the ramp origin of a warmup) is skipped whole, moments
    /// untouched. Parameters without a gradient entry did not participate in
    /// the step and are also skipped. Weight decay is decoupled: applied to
    /// the parameter directly, never through the moments.
    pub fn adamw_step(
        &mut self,
        grads: &Gradients,
        lr_for: impl Fn(ParamGroup) -> f64,
        hp: &AdamHyper,
    ) -> Result<()> {
        for p in self.by_name.values_mut() {
            let lr = lr_for(p.group);
            if lr < 0.0 {
                return Err(Error::Train(format!("negative learning rate {lr}")));
            }
            if lr == 0.0 {
                continue;
            }
            let Some(g) = grads.get(p.id) else { continue };
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Train(format!("non-finite gradient for {}", p.name)));
            }
            p.t += 1;
            let t = p.t as i32;
            let bc1 = 1.0 - hp.beta1.powi(t);
            let bc2 = 1.0 - hp.beta2.powi(t);
            let decay = 1.0 - lr * hp.weight_decay;
            for ((w, m), (v, &gr)) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.m.data_mut())
                .zip(p.v.data_mut().iter_mut().zip(g.data()))
            {
                *m = hp.beta1 * *m + (1.0 - hp.beta1) * gr;
                *v = hp.beta2 * *v + (1.0 - hp.beta2) * gr * gr;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w = *w * decay - lr * mhat / (vhat.sqrt() + hp.eps);
            }
        }
        Ok(())
    }
}

/// Piecewise-linear rate: 0 → peak over `warmup_steps`, then peak → 0 at
/// `total_steps`. `warmup_steps = 0` starts at the peak.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(peak: f64, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        if peak <= 0.0 {
            return Err(Error::Config(format!("peak learning rate {peak} must be > 0")));
        }
        if warmup_steps > total_steps {
            return Err(Error::Config(format!(
                "warmup {warmup_steps} exceeds total steps {total_steps}"
            )));
        }
        Ok(LrSchedule { peak, warmup_steps, total_steps })
    }

    pub fn lr_at_step(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            self.peak * step as f64 / self.warmup_steps as f64
        } else if step >= self.total_steps {
            0.0
        } else {
            self.peak * (self.total_steps - step) as f64
                / (self.total_steps - self.warmup_steps) as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn duplicate_name_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", ParamGroup::Language, Tensor::zeros(&[2])).unwrap();
        assert!(store.insert("w", ParamGroup::Knowledge, Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn iteration_is_name_sorted() {
        let mut store = ParamStore::new();
        store.insert("zeta", ParamGroup::Language, Tensor::zeros(&[1])).unwrap();
        store.insert("alpha", ParamGroup::Language, Tensor::zeros(&[1])).unwrap();
        store.insert("mid", ParamGroup::Language, Tensor::zeros(&[1])).unwrap();
        let names: Vec<&str> = store.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, vec!["alpha", "mid", "zeta"]);
    }

    #[test]
    fn zero_grad_is_pure_decay() {
        let mut store = ParamStore::new();
        store
            .insert("w", ParamGroup::Language, Tensor::filled(&[3], 2.0))
            .unwrap();
        // Zero gradient reaches the parameter when it is on the tape but the
        // loss ignores it; decay still applies.
        let mut tape = Tape::new();
        let w = store.var(&mut tape, "w").unwrap();
        let z = tape.scale(w, 0.0);
        let loss = tape.sum_all(z);
        let grads = tape.backward(loss).unwrap();
        let hp = AdamHyper::default();
        let lr = 0.1;
        store.adamw_step(&grads, |_| lr, &hp).unwrap();
        let expect = 2.0 * (1.0 - lr * hp.weight_decay);
        for &v in store.get("w").unwrap().value.data() {
            assert!((v - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn first_step_with_unit_grad_moves_by_about_lr() {
        let mut store = ParamStore::new();
        store.insert("w", ParamGroup::Language, Tensor::zeros(&[1])).unwrap();
        let mut tape = Tape::new();
        let w = store.var(&mut tape, "w").unwrap();
        let loss = tape.sum_all(w); // grad = 1
        let grads = tape.backward(loss).unwrap();
        let hp = AdamHyper { weight_decay: 0.0, ..AdamHyper::default() };
        let lr = 1e-3;
        store.adamw_step(&grads, |_| lr, &hp).unwrap();
        let got = store.get("w").unwrap().value.data()[0];
        // bias correction makes m̂/(√v̂+eps) ≈ 1 at t=1
        assert!((got + lr).abs() < lr * 1e-4, "got {got}");
    }

    #[test]
    fn two_steps_match_reference_recurrence() {
        // Standalone recurrence for loss = w^2/2 on a scalar, grad = w.
        let hp = AdamHyper::default();
        let lr = 0.05;
        let (mut w_ref, mut m, mut v) = (1.5f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            let g = w_ref;
            m = hp.beta1 * m + (1.0 - hp.beta1) * g;
            v = hp.beta2 * v + (1.0 - hp.beta2) * g * g;
            let mhat = m / (1.0 - hp.beta1.powi(t));
            let vhat = v / (1.0 - hp.beta2.powi(t));
            w_ref = w_ref * (1.0 - lr * hp.weight_decay) - lr * mhat / (vhat.sqrt() + hp.eps);
        }

        let mut store = ParamStore::new();
        store
            .insert("w", ParamGroup::Knowledge, Tensor::scalar(1.5))
            .unwrap();
        for _ in 0..2 {
            let mut tape = Tape::new();
            let w = store.var(&mut tape, "w").unwrap();
            let sq = tape.mul(w, w).unwrap();
            let s = tape.sum_all(sq);
            let loss = tape.scale(s, 0.5);
            let grads = tape.backward(loss).unwrap();
            store.adamw_step(&grads, |_| lr, &hp).unwrap();
        }
        let got = store.get("w").unwrap().value.data()[0];
        assert!((got - w_ref).abs() < 1e-12, "got {got} want {w_ref}");
    }

    #[test]
    fn absent_gradient_skips_parameter_entirely() {
        let mut store = ParamStore::new();
        store.insert("used", ParamGroup::Language, Tensor::scalar(1.0)).unwrap();
        store.insert("off_tape", ParamGroup::Language, Tensor::scalar(1.0)).unwrap();
        let mut tape = Tape::new();
        let w = store.var(&mut tape, "used").unwrap();
        let loss = tape.sum_all(w);
        let grads = tape.backward(loss).unwrap();
        store.adamw_step(&grads, |_| 0.1, &AdamHyper::default()).unwrap();
        assert_eq!(store.get("off_tape").unwrap().value.data()[0], 1.0);
        assert_eq!(store.get("off_tape").unwrap().t, 0);
        assert!(store.get("used").unwrap().value.data()[0] < 1.0);
        assert_eq!(store.get("used").unwrap().t, 1);
    }

    #[test]
    fn schedule_ramps_and_decays_linearly() {
        let s = LrSchedule::new(1e-5, 3000, 12000).unwrap();
        assert_eq!(s.lr_at_step(0), 0.0);
        assert_eq!(s.lr_at_step(3000), 1e-5);
        assert!((s.lr_at_step(1500) - 0.5e-5).abs() < 1e-20);
        assert!((s.lr_at_step(7500) - 0.5e-5).abs() < 1e-20);
        assert_eq!(s.lr_at_step(12000), 0.0);
        assert_eq!(s.lr_at_step(20000), 0.0);

        // No-warmup variant starts at the peak.
        let k = LrSchedule::new(1e-4, 0, 1000).unwrap();
        assert_eq!(k.lr_at_step(0), 1e-4);
        assert!((k.lr_at_step(500) - 0.5e-4).abs() < 1e-20);
        assert_eq!(k.lr_at_step(1000), 0.0);
    }

    #[test]
    fn schedule_validates_bounds() {
        assert!(LrSchedule::new(0.0, 0, 10).is_err());
        assert!(LrSchedule::new(-1.0, 0, 10).is_err());
        assert!(LrSchedule::new(1e-3, 11, 10).is_err());
    }
}
