//! Named parameter storage and the per-step forward context.

use rand::Rng;

use crate::error::{ensure, Result};
use crate::scalar::Scalar;
use crate::tensor::{Checkpoint, Gradients, NamedArray, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct Param<S> {
    pub name: String,
    pub tensor: Tensor<S>,
    /// Buffers such as running statistics are stored here too but are never
    /// touched by the optimizer.
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<S>, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter {name}"
        );
        self.params.push(Param {
            name,
            tensor: tensor.with_requires_grad(trainable),
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let t = Tensor::from_fn(shape, |_| S::from_f64_lossy(rng.random_range(-bound..=bound)));
        self.add(name, t, true)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.params[id.0].tensor
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<S>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Adds the gradients of the tape leaves bound to parameters into the
    /// parameters' accumulators.
    pub fn accumulate(&mut self, bindings: &[Option<Var>], grads: &Gradients<S>) {
        for (p, b) in self.params.iter_mut().zip(bindings) {
            if let Some(g) = b.and_then(|v| grads.get(v)) {
                p.tensor.accumulate_grad(g);
            }
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            arrays: self
                .params
                .iter()
                .map(|p| NamedArray::from_tensor(p.name.clone(), &p.tensor))
                .collect(),
        }
    }

    /// Overwrites every parameter from a checkpoint with identical names and
    /// shapes.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        ensure!(
            ck.arrays.len() == self.params.len(),
            "checkpoint has {} arrays, model expects {}",
            ck.arrays.len(),
            self.params.len()
        );
        for (p, a) in self.params.iter_mut().zip(&ck.arrays) {
            ensure!(
                p.name == a.name && p.tensor.shape() == a.shape.as_slice(),
                "checkpoint entry {} {:?} does not match parameter {} {:?}",
                a.name,
                a.shape,
                p.name,
                p.tensor.shape()
            );
            let t: Tensor<S> = a.to_tensor()?;
            p.tensor.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Pending running-statistics update from one training-mode batch norm.
#[derive(Debug, Clone)]
pub struct StatUpdate<S> {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<S>,
    pub batch_var: Vec<S>,
    pub count: usize,
    pub momentum: f64,
}

/// State of one forward pass: the tape, the parameter bindings onto it, and
/// any statistics updates to commit once the step is done.
pub struct Forward<'a, S: Scalar> {
    pub tape: Tape<S>,
    pub params: &'a ParamStore<S>,
    pub mode: Mode,
    bindings: Vec<Option<Var>>,
    pub stat_updates: Vec<StatUpdate<S>>,
}

impl<'a, S: Scalar> Forward<'a, S> {
    pub fn new(params: &'a ParamStore<S>, mode: Mode) -> Self {
        Self {
            tape: Tape::new(),
            params,
            mode,
            bindings: vec![None; params.len()],
            stat_updates: Vec::new(),
        }
    }

    /// Tape handle for a parameter, recorded once per pass.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bindings[id.0] {
            return v;
        }
        let p = &self.params.params[id.0];
        let mut t = p.tensor.clone();
        t.set_requires_grad(p.trainable && self.mode == Mode::Train);
        let v = self.tape.leaf(t);
        self.bindings[id.0] = Some(v);
        v
    }

    pub fn bindings(&self) -> &[Option<Var>] {
        &self.bindings
    }

    pub fn is_training(&self) -> bool {
        self.mode == Mode::Train
    }
}

impl<S: Scalar> ParamStore<S> {
    /// Applies exponential-moving-average updates to running statistics.
    /// Variances are corrected to the unbiased estimate before blending.
    pub fn commit_stats(&mut self, updates: &[StatUpdate<S>]) {
        for u in updates {
            let m = S::from_f64_lossy(u.momentum);
            let keep = S::one() - m;
            let correction = if u.count > 1 {
                S::of_usize(u.count) / S::of_usize(u.count - 1)
            } else {
                S::one()
            };
            for (r, &b) in self.get_mut(u.mean).data_mut().iter_mut().zip(&u.batch_mean) {
                *r = keep * *r + m * b;
            }
            for (r, &b) in self.get_mut(u.var).data_mut().iter_mut().zip(&u.batch_var) {
                *r = keep * *r + m * b * correction;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = ParamStore::<f64>::new();
        a.uniform("w", &[2, 3], 0.5, &mut rng);
        a.add("rm", Tensor::zeros(&[3]), false);
        let ck = a.to_checkpoint();
        let mut b = ParamStore::<f64>::new();
        b.add("w", Tensor::zeros(&[2, 3]), true);
        b.add("rm", Tensor::full(&[3], 1.0), false);
        b.load_checkpoint(&ck).unwrap();
        assert_eq!(b.to_checkpoint(), ck);

        let mut c = ParamStore::<f64>::new();
        c.add("w", Tensor::zeros(&[3, 2]), true);
        c.add("rm", Tensor::zeros(&[3]), false);
        assert!(c.load_checkpoint(&ck).is_err());
    }

    #[test]
    fn parameter_bound_once_per_pass() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", Tensor::full(&[2], 1.0), true);
        let mut f = Forward::new(&s, Mode::Train);
        let a = f.param(id);
        let b = f.param(id);
        assert_eq!(a, b);
        assert!(f.tape.requires_grad(a));
        let mut e = Forward::new(&s, Mode::Eval);
        let v = e.param(id);
        assert!(!e.tape.requires_grad(v));
    }

    #[test]
    fn running_stats_blend() {
        let mut s = ParamStore::<f64>::new();
        let m = s.add("m", Tensor::zeros(&[1]), false);
        let v = s.add("v", Tensor::full(&[1], 1.0), false);
        s.commit_stats(&[StatUpdate {
            mean: m,
            var: v,
            batch_mean: vec![2.0],
            batch_var: vec![3.0],
            count: 4,
            momentum: 0.1,
        }]);
        assert!((s.get(m).data()[0] - 0.2).abs() < 1e-15);
        assert!((s.get(v).data()[0] - (0.9 + 0.1 * 4.0)).abs() < 1e-15);
    }
}
