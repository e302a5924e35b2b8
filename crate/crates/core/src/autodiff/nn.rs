//! Parameter storage and neural layers built on the tape.
//!
//! A [`ParamStore`] owns named weight arrays across steps; [`ParamStore::bind`]
//! registers every parameter as a leaf on a fresh tape so gradients can be
//! read back by name after `backward`.

use super::ops::concat_last;
use super::tape::{Scalar, Tape, Var};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;

#[derive(Clone)]
pub struct ParamStore<F: Scalar> {
    params: BTreeMap<String, ArrayD<F>>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<F>) {
        let prev = self.params.insert(name.to_string(), value);
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> &ArrayD<F> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<F> {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|v| v.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<F>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<F>)> {
        self.params.iter_mut()
    }

    /// Register every parameter as a leaf on `tape`, in name order.
    pub fn bind(&self, tape: &Tape<F>) -> BoundParams<F> {
        let mut vars = BTreeMap::new();
        for (name, value) in &self.params {
            vars.insert(name.clone(), tape.var(value.clone()));
        }
        BoundParams { vars }
    }

    /// Serialize to a stable little-endian byte blob (name-ordered, values
    /// widened to f64).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, value) in &self.params {
            let nb = name.as_bytes();
            out.extend_from_slice(&(nb.len() as u32).to_le_bytes());
            out.extend_from_slice(nb);
            out.extend_from_slice(&(value.ndim() as u32).to_le_bytes());
            for &d in value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in value.iter() {
                out.extend_from_slice(&x.to_f64().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], String> {
            if *pos + n > bytes.len() {
                return Err("parameter blob truncated".to_string());
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let u32_at = |pos: &mut usize| -> Result<u32, String> {
            let b = take(pos, 4)?;
            Ok(u32::from_le_bytes(b.try_into().unwrap()))
        };
        let count = u32_at(&mut pos)? as usize;
        let mut params = BTreeMap::new();
        for _ in 0..count {
            let name_len = u32_at(&mut pos)? as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|e| e.to_string())?;
            let ndim = u32_at(&mut pos)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32_at(&mut pos)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let b = take(&mut pos, 8)?;
                let x = f64::from_le_bytes(b.try_into().unwrap());
                data.push(F::lit(x));
            }
            params.insert(
                name,
                ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|e| e.to_string())?,
            );
        }
        Ok(ParamStore { params })
    }
}

/// Per-tape leaf handles for every parameter.
pub struct BoundParams<F: Scalar> {
    vars: BTreeMap<String, Var<F>>,
}

impl<F: Scalar> BoundParams<F> {
    pub fn var(&self, name: &str) -> Var<F> {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
            .clone()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<F>)> {
        self.vars.iter()
    }
}

// ---------------------------------------------------------------------------
// initialization
// ---------------------------------------------------------------------------

pub fn zeros<F: Scalar>(shape: &[usize]) -> ArrayD<F> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones<F: Scalar>(shape: &[usize]) -> ArrayD<F> {
    ArrayD::ones(IxDyn(shape))
}

pub fn normal<F: Scalar, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> ArrayD<F> {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data: Vec<F> = (0..n).map(|_| F::lit(dist.sample(rng))).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Register a linear layer `name.w [in,out]`, `name.b [out]`.
pub fn register_linear<F: Scalar, R: Rng>(
    store: &mut ParamStore<F>,
    rng: &mut R,
    name: &str,
    in_dim: usize,
    out_dim: usize,
) {
    let std = 1.0 / (in_dim as f64).sqrt();
    store.insert(&format!("{name}.w"), normal(&[in_dim, out_dim], std, rng));
    store.insert(&format!("{name}.b"), zeros(&[out_dim]));
}

/// Register a zero-initialized linear layer (identity-update output heads).
pub fn register_linear_zero<F: Scalar>(
    store: &mut ParamStore<F>,
    name: &str,
    in_dim: usize,
    out_dim: usize,
) {
    store.insert(&format!("{name}.w"), zeros(&[in_dim, out_dim]));
    store.insert(&format!("{name}.b"), zeros(&[out_dim]));
}

/// Register a conv layer `name.w [out,in,k,k]`, `name.b [out]`.
pub fn register_conv<F: Scalar, R: Rng>(
    store: &mut ParamStore<F>,
    rng: &mut R,
    name: &str,
    out_ch: usize,
    in_ch: usize,
    k: usize,
) {
    let fan_in = (in_ch * k * k) as f64;
    let std = (2.0 / fan_in).sqrt();
    store.insert(&format!("{name}.w"), normal(&[out_ch, in_ch, k, k], std, rng));
    store.insert(&format!("{name}.b"), zeros(&[out_ch]));
}

pub fn register_layernorm<F: Scalar>(store: &mut ParamStore<F>, name: &str, dim: usize) {
    store.insert(&format!("{name}.w"), ones(&[dim]));
    store.insert(&format!("{name}.b"), zeros(&[dim]));
}

// ---------------------------------------------------------------------------
// bound layers
// ---------------------------------------------------------------------------

#[derive(Clone)]
pub struct Linear<F: Scalar> {
    pub w: Var<F>,
    pub b: Var<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn bind(params: &BoundParams<F>, name: &str) -> Self {
        Linear {
            w: params.var(&format!("{name}.w")),
            b: params.var(&format!("{name}.b")),
        }
    }

    pub fn apply(&self, x: &Var<F>) -> Var<F> {
        x.linear(&self.w, &self.b)
    }
}

#[derive(Clone)]
pub struct Conv2d<F: Scalar> {
    pub w: Var<F>,
    pub b: Var<F>,
    pub stride: usize,
    pub pad: usize,
}

impl<F: Scalar> Conv2d<F> {
    pub fn bind(params: &BoundParams<F>, name: &str, stride: usize, pad: usize) -> Self {
        Conv2d {
            w: params.var(&format!("{name}.w")),
            b: params.var(&format!("{name}.b")),
            stride,
            pad,
        }
    }

    pub fn apply(&self, x: &Var<F>) -> Var<F> {
        x.conv2d(&self.w, &self.b, self.stride, self.pad)
    }
}

#[derive(Clone)]
pub struct LayerNorm<F: Scalar> {
    pub w: Var<F>,
    pub b: Var<F>,
    pub eps: F,
}

impl<F: Scalar> LayerNorm<F> {
    pub fn bind(params: &BoundParams<F>, name: &str) -> Self {
        LayerNorm {
            w: params.var(&format!("{name}.w")),
            b: params.var(&format!("{name}.b")),
            eps: F::lit(1e-5),
        }
    }

    pub fn apply(&self, x: &Var<F>) -> Var<F> {
        x.layernorm(&self.w, &self.b, self.eps)
    }
}

/// Multi-head self-attention over `[G, S, W]`: each of the `G` groups
/// attends over its own sequence of length `S`.
#[derive(Clone)]
pub struct MultiHeadAttention<F: Scalar> {
    pub q: Linear<F>,
    pub k: Linear<F>,
    pub v: Linear<F>,
    pub o: Linear<F>,
    pub heads: usize,
}

impl<F: Scalar> MultiHeadAttention<F> {
    pub fn register<R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        width: usize,
    ) {
        register_linear(store, rng, &format!("{name}.q"), width, width);
        register_linear(store, rng, &format!("{name}.k"), width, width);
        register_linear(store, rng, &format!("{name}.v"), width, width);
        register_linear(store, rng, &format!("{name}.o"), width, width);
    }

    pub fn bind(params: &BoundParams<F>, name: &str, heads: usize) -> Self {
        MultiHeadAttention {
            q: Linear::bind(params, &format!("{name}.q")),
            k: Linear::bind(params, &format!("{name}.k")),
            v: Linear::bind(params, &format!("{name}.v")),
            o: Linear::bind(params, &format!("{name}.o")),
            heads,
        }
    }

    pub fn apply(&self, x: &Var<F>) -> Var<F> {
        let shape = x.shape();
        assert_eq!(shape.len(), 3, "attention input must be [G,S,W]");
        let (g, s, w) = (shape[0], shape[1], shape[2]);
        let h = self.heads;
        assert_eq!(w % h, 0, "width not divisible by heads");
        let hd = w / h;
        let split = |v: &Var<F>| -> Var<F> {
            // [G,S,W] -> [G,S,H,hd] -> [G,H,S,hd] -> [G*H,S,hd]
            v.reshape(&[g, s, h, hd])
                .permute(&[0, 2, 1, 3])
                .reshape(&[g * h, s, hd])
        };
        let q = split(&self.q.apply(x));
        let k = split(&self.k.apply(x));
        let v = split(&self.v.apply(x));
        let kt = k.permute(&[0, 2, 1]); // [G*H, hd, S]
        let scale = F::one() / F::lit((hd as f64).sqrt());
        let scores = q.bmm(&kt).scale(scale); // [G*H, S, S]
        let attn = scores.softmax_last();
        let ctx = attn.bmm(&v); // [G*H, S, hd]
        let merged = ctx
            .reshape(&[g, h, s, hd])
            .permute(&[0, 2, 1, 3])
            .reshape(&[g, s, w]);
        self.o.apply(&merged)
    }
}

/// Pre-norm transformer block with a temporal attention layer (attending
/// over the window per point), a spatial attention layer (attending over
/// points per frame), and an MLP.
#[derive(Clone)]
pub struct SpaceTimeBlock<F: Scalar> {
    pub ln_time: LayerNorm<F>,
    pub attn_time: MultiHeadAttention<F>,
    pub ln_space: LayerNorm<F>,
    pub attn_space: MultiHeadAttention<F>,
    pub ln_mlp: LayerNorm<F>,
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

impl<F: Scalar> SpaceTimeBlock<F> {
    pub fn register<R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        width: usize,
        ff_mult: usize,
    ) {
        register_layernorm(store, &format!("{name}.ln_time"), width);
        MultiHeadAttention::register(store, rng, &format!("{name}.attn_time"), width);
        register_layernorm(store, &format!("{name}.ln_space"), width);
        MultiHeadAttention::register(store, rng, &format!("{name}.attn_space"), width);
        register_layernorm(store, &format!("{name}.ln_mlp"), width);
        register_linear(store, rng, &format!("{name}.fc1"), width, width * ff_mult);
        register_linear(store, rng, &format!("{name}.fc2"), width * ff_mult, width);
    }

    pub fn bind(params: &BoundParams<F>, name: &str, heads: usize) -> Self {
        SpaceTimeBlock {
            ln_time: LayerNorm::bind(params, &format!("{name}.ln_time")),
            attn_time: MultiHeadAttention::bind(params, &format!("{name}.attn_time"), heads),
            ln_space: LayerNorm::bind(params, &format!("{name}.ln_space")),
            attn_space: MultiHeadAttention::bind(params, &format!("{name}.attn_space"), heads),
            ln_mlp: LayerNorm::bind(params, &format!("{name}.ln_mlp")),
            fc1: Linear::bind(params, &format!("{name}.fc1")),
            fc2: Linear::bind(params, &format!("{name}.fc2")),
        }
    }

    /// `x` is `[N, T, W]`: points x frames x width.
    pub fn apply(&self, x: &Var<F>) -> Var<F> {
        let shape = x.shape();
        let (n, t, w) = (shape[0], shape[1], shape[2]);
        // temporal attention: groups = points
        let x = x.add(&self.attn_time.apply(&self.ln_time.apply(x)));
        // spatial attention: groups = frames
        let xs = self.ln_space.apply(&x).permute(&[1, 0, 2]); // [T,N,W]
        let att = self.attn_space.apply(&xs).permute(&[1, 0, 2]);
        let x = x.add(&att);
        // MLP
        let h = self.fc2.apply(&self.fc1.apply(&self.ln_mlp.apply(&x)).gelu());
        let y = x.add(&h);
        debug_assert_eq!(y.shape(), vec![n, t, w]);
        y
    }
}

/// Convenience: concatenate token pieces along the feature axis.
pub fn assemble_features<F: Scalar>(parts: &[Var<F>]) -> Var<F> {
    concat_last(parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn attention_single_token_is_value_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::<f64>::new();
        MultiHeadAttention::register(&mut store, &mut rng, "attn", 8);
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let attn = MultiHeadAttention::bind(&bound, "attn", 2);
        let x = tape.var(Array::from_shape_fn((1, 1, 8), |(_, _, i)| 0.1 * i as f64));
        let y = attn.apply(&x);
        // softmax over a single element is 1, so output = Wo(Wv x + bv) + bo
        let v = x.linear(&attn.v.w, &attn.v.b);
        let expect = v.linear(&attn.o.w, &attn.o.b);
        let d = (&y.to_array() - &expect.to_array())
            .iter()
            .fold(0.0f64, |a, &b| a.max(b.abs()));
        assert!(d < 1e-12, "max diff {d}");
    }

    #[test]
    fn param_store_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f32>::new();
        register_linear(&mut store, &mut rng, "l", 4, 3);
        let bytes = store.to_bytes();
        let restored = ParamStore::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(store.len(), restored.len());
        for (name, v) in store.iter() {
            assert_eq!(v, restored.get(name), "mismatch in {name}");
        }
    }

    #[test]
    fn spacetime_block_shape_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::<f64>::new();
        SpaceTimeBlock::register(&mut store, &mut rng, "blk", 8, 2);
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let blk = SpaceTimeBlock::bind(&bound, "blk", 2);
        let x = tape.var(Array::from_shape_fn((3, 4, 8), |(a, b, c)| {
            ((a + 2 * b + 3 * c) as f64 * 0.05).sin()
        }));
        let y = blk.apply(&x);
        assert_eq!(y.shape(), vec![3, 4, 8]);
    }
}
