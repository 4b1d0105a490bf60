//! Named parameter sets and the ADAM optimizer.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One named tensor in a network. `trainable` entries receive gradients;
/// `state` entries (running power-iteration vectors and the like) are
/// carried through checkpoints but never counted as model parameters.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
    pub state: bool,
}

/// Ordered name -> tensor map. Iteration order is insertion order, which
/// makes parameter initialization and serialization deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: IndexMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor, trainable: bool) {
        self.entries
            .insert(name.to_string(), Param { value, trainable, state: false });
    }

    pub fn insert_state(&mut self, name: &str, value: Tensor) {
        self.entries
            .insert(name.to_string(), Param { value, trainable: false, state: true });
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter '{}'", name)))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter '{}'", name)))?;
        if p.value.shape() != value.shape() {
            return Err(Error::shape(
                "set_value",
                format!("{}: {:?} vs {:?}", name, p.value.shape(), value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Element count over model parameters (state entries excluded).
    pub fn param_count(&self) -> usize {
        self.entries
            .values()
            .filter(|p| !p.state)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Marks every non-state entry frozen; used when a trained network is
    /// embedded in another network's loss.
    pub fn freeze(&mut self) {
        for p in self.entries.values_mut() {
            p.trainable = false;
        }
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in self.entries.values_mut() {
            if !p.state {
                p.trainable = trainable;
            }
        }
    }

    /// Bitwise content digest over names, shapes, flags and payloads.
    pub fn digest(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, p) in &self.entries {
            h.update(name.as_bytes());
            h.update([p.trainable as u8, p.state as u8]);
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            h.update(p.value.le_bytes());
        }
        h.finalize().into()
    }
}

/// ADAM moment buffers plus step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: IndexMap<String, Tensor>,
    pub v: IndexMap<String, Tensor>,
}

impl AdamState {
    pub fn new() -> AdamState {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState::new()
    }
}

/// One ADAM update over every trainable parameter, with bias correction.
/// Rejects non-finite gradients before touching any state, so a failed step
/// leaves parameters and moments unchanged.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &IndexMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(Error::invalid(format!("non-finite gradient for '{}'", name)));
        }
        if !params.contains(name) {
            return Err(Error::invalid(format!("gradient for unknown parameter '{}'", name)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (name, g) in grads {
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let p = params
            .entries
            .get_mut(name.as_str())
            .expect("checked above");
        if !p.trainable {
            return Err(Error::invalid(format!("gradient for frozen parameter '{}'", name)));
        }
        let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
        for i in 0..g.numel() {
            let gi = g.data()[i];
            let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
            let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let mhat = mi / bc1;
            let vhat = vi / bc2;
            p.value.data_mut()[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(v), true);
        p
    }

    #[test]
    fn single_step_matches_hand_computation() {
        // g = 0.5, lr = 0.1, fresh state:
        // m = 0.05, v = 0.00025, mhat = 0.5, vhat = 0.25,
        // delta = 0.1 * 0.5 / (0.5 + 1e-8).
        let mut params = one_param(1.0);
        let mut st = AdamState::new();
        let mut grads = IndexMap::new();
        grads.insert("w".to_string(), Tensor::scalar(0.5));
        adam_step(&mut params, &grads, &mut st, 0.1).unwrap();
        let expected = 1.0 - 0.1 * 0.5 / (0.25f64.sqrt() + 1e-8);
        let got = params.value("w").unwrap().item();
        assert!((got - expected).abs() < 1e-15, "{} vs {}", got, expected);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut params = one_param(3.5);
        let mut st = AdamState::new();
        let mut grads = IndexMap::new();
        grads.insert("w".to_string(), Tensor::scalar(0.0));
        for _ in 0..5 {
            adam_step(&mut params, &grads, &mut st, 0.1).unwrap();
        }
        assert_eq!(params.value("w").unwrap().item(), 3.5);
    }

    #[test]
    fn nan_gradient_rejected_without_mutation() {
        let mut params = one_param(2.0);
        let mut st = AdamState::new();
        let mut grads = IndexMap::new();
        grads.insert("w".to_string(), Tensor::scalar(f64::NAN));
        assert!(adam_step(&mut params, &grads, &mut st, 0.1).is_err());
        assert_eq!(params.value("w").unwrap().item(), 2.0);
        assert_eq!(st.step, 0);
        assert!(st.m.is_empty());
    }

    #[test]
    fn param_count_skips_state_entries() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::zeros(&[3, 3, 2, 4]), true);
        p.insert("b", Tensor::zeros(&[4]), true);
        p.insert_state("w.sn_u", Tensor::zeros(&[4]));
        assert_eq!(p.param_count(), 3 * 3 * 2 * 4 + 4);
    }

    #[test]
    fn digest_changes_with_content() {
        let a = one_param(1.0);
        let b = one_param(1.0 + 1e-15);
        let c = one_param(1.0);
        assert_eq!(a.digest(), c.digest());
        assert_ne!(a.digest(), b.digest());
    }
}
