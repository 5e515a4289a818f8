//! Named parameter storage and the Adam optimizer.
//!
//! A [`ParamStore`] owns every trainable tensor as a flat `f64` vector under
//! a unique name, in stable insertion order. Optimizer state is kept aligned
//! to store indices. Entries that receive no gradient in a step are left
//! bit-identical (their moments do not decay), which keeps untouched
//! sub-models exactly unchanged and makes phase separation checkable by
//! checksum.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PtaError, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    value: Vec<f64>,
}

/// Ordered, named collection of flat parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Registers a new tensor. Names must be unique.
    pub fn insert(&mut self, name: &str, value: Vec<f64>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(PtaError::invalid(format!("duplicate parameter '{name}'")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry { name: name.to_string(), value });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| PtaError::NotFound(format!("parameter '{name}'")))
    }

    pub fn get(&self, name: &str) -> Result<&[f64]> {
        Ok(&self.entries[self.index_of(name)?].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Vec<f64>> {
        let i = self.index_of(name)?;
        Ok(&mut self.entries[i].value)
    }

    pub fn name_at(&self, i: usize) -> &str {
        &self.entries[i].name
    }

    pub fn value_at(&self, i: usize) -> &[f64] {
        &self.entries[i].value
    }

    pub fn value_at_mut(&mut self, i: usize) -> &mut Vec<f64> {
        &mut self.entries[i].value
    }

    /// SHA-256 over names, lengths, and raw `f64` bits; stable across runs.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            h.update((e.value.len() as u64).to_le_bytes());
            for v in &e.value {
                h.update(v.to_le_bytes());
            }
        }
        hex_string(&h.finalize())
    }

    /// True if any stored scalar is NaN or infinite.
    pub fn has_non_finite(&self) -> bool {
        self.entries.iter().any(|e| e.value.iter().any(|v| !v.is_finite()))
    }
}

impl Serialize for ParamStore {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.entries.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ParamStore {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let entries = Vec::<Entry>::deserialize(d)?;
        let mut store = ParamStore::new();
        for e in entries {
            store
                .insert(&e.name, e.value)
                .map_err(|err| serde::de::Error::custom(err.to_string()))?;
        }
        Ok(store)
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Adam over the entries of a [`ParamStore`].
///
/// Entries without a gradient in a given call are skipped entirely: their
/// values, moments, and step counters stay untouched.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: Vec<u64>,
}

impl AdamState {
    pub fn for_store(lr: f64, store: &ParamStore) -> Self {
        let shapes: Vec<usize> = (0..store.len()).map(|i| store.value_at(i).len()).collect();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: vec![0; shapes.len()],
        }
    }

    /// Applies one Adam update for each `(entry index, gradient)` pair.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(usize, Vec<f64>)]) -> Result<()> {
        for (i, g) in grads {
            let i = *i;
            if i >= self.m.len() {
                return Err(PtaError::invalid(format!("optimizer has no slot {i}")));
            }
            let x = store.value_at_mut(i);
            if x.len() != g.len() {
                return Err(PtaError::shape(format!(
                    "gradient length {} vs parameter length {} at entry {i}",
                    g.len(),
                    x.len()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(PtaError::numeric(format!(
                    "non-finite gradient for '{}'",
                    store.name_at(i)
                )));
            }
            self.t[i] += 1;
            let t = self.t[i];
            let bc1 = 1.0 - self.beta1.powi(t as i32);
            let bc2 = 1.0 - self.beta2.powi(t as i32);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let x = store.value_at_mut(i);
            for k in 0..x.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                x[k] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Adam over a single flat vector (used for the fusion logits).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamVec {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamVec {
    pub fn new(lr: f64, n: usize) -> Self {
        AdamVec {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, x: &mut [f64], g: &[f64]) -> Result<()> {
        if x.len() != self.m.len() || g.len() != self.m.len() {
            return Err(PtaError::shape(format!(
                "optimizer over {} values got x={} g={}",
                self.m.len(),
                x.len(),
                g.len()
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(PtaError::numeric("non-finite meta gradient".to_string()));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for k in 0..x.len() {
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g[k];
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g[k] * g[k];
            let mh = self.m[k] / bc1;
            let vh = self.v[k] / bc2;
            x[k] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_one(name: &str, v: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, v).unwrap();
        s
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = store_one("w", vec![1.0]);
        assert!(s.insert("w", vec![2.0]).is_err());
    }

    #[test]
    fn adam_first_step_matches_closed_form() {
        let mut s = store_one("w", vec![1.0, -2.0]);
        let mut opt = AdamState::for_store(0.01, &s);
        let g = vec![0.5, -0.25];
        opt.step(&mut s, &[(0, g.clone())]).unwrap();
        for (k, (&x, &gk)) in s.get("w").unwrap().iter().zip(&g).enumerate() {
            let x0 = [1.0, -2.0][k];
            let want = x0 - 0.01 * gk / (gk.abs() + 1e-8);
            assert!((x - want).abs() < 1e-12, "slot {k}: {x} vs {want}");
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_values_unchanged() {
        let mut s = store_one("w", vec![3.0, 4.0]);
        let before = s.checksum();
        let mut opt = AdamState::for_store(0.01, &s);
        opt.step(&mut s, &[(0, vec![0.0, 0.0])]).unwrap();
        assert_eq!(s.checksum(), before);
    }

    #[test]
    fn adam_skips_entries_without_gradients() {
        let mut s = ParamStore::new();
        s.insert("a", vec![1.0]).unwrap();
        s.insert("b", vec![2.0]).unwrap();
        let mut opt = AdamState::for_store(0.1, &s);
        opt.step(&mut s, &[(0, vec![1.0])]).unwrap();
        assert_eq!(s.get("b").unwrap(), &[2.0]);
        assert!(s.get("a").unwrap()[0] < 1.0);
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut s = store_one("w", vec![1.0]);
        let mut opt = AdamState::for_store(0.1, &s);
        assert!(opt.step(&mut s, &[(0, vec![f64::NAN])]).is_err());
    }

    #[test]
    fn adam_vec_matches_adam_state_on_same_gradients() {
        let mut s = store_one("w", vec![0.3, -0.8, 0.1]);
        let mut opt = AdamState::for_store(0.05, &s);
        let mut x = vec![0.3, -0.8, 0.1];
        let mut vopt = AdamVec::new(0.05, 3);
        for step in 0..5 {
            let g: Vec<f64> = (0..3).map(|k| ((step + k) as f64 * 0.37).sin()).collect();
            opt.step(&mut s, &[(0, g.clone())]).unwrap();
            vopt.step(&mut x, &g).unwrap();
        }
        for (a, b) in s.get("w").unwrap().iter().zip(&x) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn checksum_changes_with_values_and_names() {
        let a = store_one("w", vec![1.0]);
        let b = store_one("w", vec![1.0 + 1e-15]);
        let c = store_one("u", vec![1.0]);
        assert_ne!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
        assert_eq!(a.checksum(), store_one("w", vec![1.0]).checksum());
    }

    #[test]
    fn store_round_trips_through_json_exactly() {
        let mut s = ParamStore::new();
        s.insert("enc.w", vec![0.1, 0.2 + 1e-16, -3.5e-7]).unwrap();
        s.insert("enc.b", vec![1.0 / 3.0]).unwrap();
        let js = serde_json::to_string(&s).unwrap();
        let back: ParamStore = serde_json::from_str(&js).unwrap();
        assert_eq!(back.checksum(), s.checksum());
    }
}
