//! Adaptive moment estimation with linear learning-rate warmup.

use super::nn::ParamStore;
use super::tape::Scalar;
use ndarray::ArrayD;
use std::collections::BTreeMap;

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps of linear warmup from 0 to `lr`.
    pub warmup: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup: 500,
        }
    }
}

pub struct Adam<F: Scalar> {
    pub cfg: AdamConfig,
    t: usize,
    m: BTreeMap<String, ArrayD<F>>,
    v: BTreeMap<String, ArrayD<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> usize {
        self.t
    }

    pub fn current_lr(&self) -> f64 {
        let t = (self.t.max(1)) as f64;
        if self.cfg.warmup > 0 && self.t <= self.cfg.warmup {
            self.cfg.lr * t / self.cfg.warmup as f64
        } else {
            self.cfg.lr
        }
    }

    /// Apply one update. Parameters without a gradient entry are untouched.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &BTreeMap<String, ArrayD<F>>) {
        self.t += 1;
        let lr = F::lit(self.current_lr());
        let b1 = F::lit(self.cfg.beta1);
        let b2 = F::lit(self.cfg.beta2);
        let eps = F::lit(self.cfg.eps);
        let one = F::one();
        let bc1 = one - F::lit(self.cfg.beta1.powi(self.t as i32));
        let bc2 = one - F::lit(self.cfg.beta2.powi(self.t as i32));
        for (name, g) in grads {
            let p = store.get_mut(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|pi, mi, vi, &gi| {
                    *mi = b1 * *mi + (one - b1) * gi;
                    *vi = b2 * *vi + (one - b2) * gi * gi;
                    let mhat = *mi / bc1;
                    let vhat = *vi / bc2;
                    *pi = *pi - lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }

    /// Serialize optimizer state (step count and both moments).
    pub fn state_to_bytes(&self) -> Vec<u8> {
        let mut m_store = ParamStore::<F>::new();
        for (k, v) in &self.m {
            m_store.insert(&format!("m.{k}"), v.clone());
        }
        for (k, v) in &self.v {
            m_store.insert(&format!("v.{k}"), v.clone());
        }
        let blob = m_store.to_bytes();
        let mut out = Vec::with_capacity(blob.len() + 8);
        out.extend_from_slice(&(self.t as u64).to_le_bytes());
        out.extend_from_slice(&blob);
        out
    }

    pub fn state_from_bytes(cfg: AdamConfig, bytes: &[u8]) -> Result<Self, String> {
        if bytes.len() < 8 {
            return Err("optimizer state truncated".into());
        }
        let t = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let store = ParamStore::<F>::from_bytes(&bytes[8..])?;
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, arr) in store.iter() {
            if let Some(stripped) = name.strip_prefix("m.") {
                m.insert(stripped.to_string(), arr.clone());
            } else if let Some(stripped) = name.strip_prefix("v.") {
                v.insert(stripped.to_string(), arr.clone());
            } else {
                return Err(format!("unexpected optimizer entry {name}"));
            }
        }
        Ok(Adam { cfg, t, m, v })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut store = ParamStore::<f64>::new();
        store.insert("p", arr1(&[1.0, -2.0]).into_dyn());
        let before = store.get("p").clone();
        let mut adam = Adam::new(AdamConfig {
            lr: 0.0,
            warmup: 0,
            ..AdamConfig::default()
        });
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), arr1(&[10.0, -3.0]).into_dyn());
        adam.step(&mut store, &grads);
        assert_eq!(store.get("p"), &before);
    }

    #[test]
    fn descends_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        store.insert("x", arr1(&[5.0]).into_dyn());
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            warmup: 0,
            ..AdamConfig::default()
        });
        for _ in 0..200 {
            let x = store.get("x")[[0]];
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), arr1(&[2.0 * x]).into_dyn());
            adam.step(&mut store, &grads);
        }
        assert!(store.get("x")[[0]].abs() < 0.1);
    }

    #[test]
    fn state_roundtrip_resumes_identically() {
        let mut store = ParamStore::<f64>::new();
        store.insert("x", arr1(&[1.0]).into_dyn());
        let cfg = AdamConfig::default();
        let mut a = Adam::new(cfg.clone());
        let mut grads = BTreeMap::new();
        grads.insert("x".to_string(), arr1(&[0.5]).into_dyn());
        a.step(&mut store, &grads);
        let bytes = a.state_to_bytes();
        let mut b = Adam::<f64>::state_from_bytes(cfg, &bytes).unwrap();
        // second step through restored state must match continuing `a`
        let mut store2 = store.clone();
        a.step(&mut store, &grads);
        b.step(&mut store2, &grads);
        assert_eq!(store.get("x"), store2.get("x"));
    }
}
