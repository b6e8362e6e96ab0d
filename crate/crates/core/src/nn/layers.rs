use rand_chacha::ChaCha8Rng;

use super::{init_bound, ParamGroup, ParamId, ParamStore, Session};
use crate::error::{Error, Result};
use crate::tensor::Var;

/// Affine map `x·W + b` applied over the trailing axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = init_bound(in_dim);
        let weight = store.add_uniform(&format!("{name}.weight"), group, &[in_dim, out_dim], bound, rng)?;
        let bias = store.add(&format!("{name}.bias"), group, crate::tensor::Tensor::zeros(&[out_dim]))?;
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }

    /// `x` has shape `[..., in]`; the result has shape `[..., out]`.
    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.last() != Some(&self.in_dim) {
            return Err(Error::dim("linear", &shape, &[self.in_dim, self.out_dim]));
        }
        let rows = x.len() / self.in_dim;
        let flat = if shape.len() == 2 {
            x
        } else {
            x.reshape(&[rows, self.in_dim])?
        };
        let y = flat.matmul(s.param(self.weight))?.add_bias(s.param(self.bias))?;
        if shape.len() == 2 {
            return Ok(y);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        y.reshape(&out_shape)
    }
}

/// Linear layers with ReLU between consecutive layers and none after the last.
#[derive(Clone, Debug)]
pub struct FfnStack {
    layers: Vec<Linear>,
}

impl FfnStack {
    /// `dims` lists the input width followed by each layer's output width.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        dims: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config(format!("{name}: an FFN needs at least one layer")));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), group, w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(FfnStack { layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Linear::param_count).sum()
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = h.relu();
            }
            h = layer.forward(s, h)?;
        }
        Ok(h)
    }
}

/// Single-head scaled dot-product attention with separate query and key/value sources.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub w_query: ParamId,
    pub w_key: ParamId,
    pub w_value: ParamId,
    d_q: usize,
    d_kv: usize,
    d_k: usize,
    d_v: usize,
}

impl CrossAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        d_q: usize,
        d_kv: usize,
        d_k: usize,
        d_v: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w_query = store.add_uniform(&format!("{name}.query"), group, &[d_q, d_k], init_bound(d_q), rng)?;
        let w_key = store.add_uniform(&format!("{name}.key"), group, &[d_kv, d_k], init_bound(d_kv), rng)?;
        let w_value = store.add_uniform(&format!("{name}.value"), group, &[d_kv, d_v], init_bound(d_kv), rng)?;
        Ok(CrossAttention {
            w_query,
            w_key,
            w_value,
            d_q,
            d_kv,
            d_k,
            d_v,
        })
    }

    pub fn d_q(&self) -> usize {
        self.d_q
    }

    pub fn d_v(&self) -> usize {
        self.d_v
    }

    /// Key and value projections of `[n_k, d_kv]` tokens, reusable across queries.
    pub fn project_kv<'t>(&self, s: &Session<'t>, kv: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let shape = kv.shape();
        if shape.len() != 2 || shape[1] != self.d_kv {
            return Err(Error::dim("cross_attention kv", &shape, &[0, self.d_kv]));
        }
        Ok((kv.matmul(s.param(self.w_key))?, kv.matmul(s.param(self.w_value))?))
    }

    /// `softmax(Q·Kᵀ/√d_k)·V` for `[n_q, d_q]` queries against projected keys and values.
    pub fn attend<'t>(&self, s: &Session<'t>, q_source: Var<'t>, keys: Var<'t>, values: Var<'t>) -> Result<Var<'t>> {
        let shape = q_source.shape();
        if shape.len() != 2 || shape[1] != self.d_q {
            return Err(Error::dim("cross_attention query", &shape, &[0, self.d_q]));
        }
        let q = q_source.matmul(s.param(self.w_query))?;
        let scores = q.matmul(keys.transpose()?)?.scale(1.0 / (self.d_k as f64).sqrt());
        scores.softmax(1)?.matmul(values)
    }

    pub fn forward<'t>(&self, s: &Session<'t>, q_source: Var<'t>, kv_source: Var<'t>) -> Result<Var<'t>> {
        let (k, v) = self.project_kv(s, kv_source)?;
        self.attend(s, q_source, k, v)
    }
}

/// Splits an `[h, w, c]` image into non-overlapping patches and projects each one.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    proj: Linear,
    patch: usize,
}

impl PatchEmbed {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        channels: usize,
        patch: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if patch == 0 {
            return Err(Error::Config("patch size must be positive".into()));
        }
        let proj = Linear::new(store, name, group, patch * patch * channels, out_dim, rng)?;
        Ok(PatchEmbed { proj, patch })
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn out_dim(&self) -> usize {
        self.proj.out_dim
    }

    pub fn param_count(&self) -> usize {
        self.proj.param_count()
    }

    /// Tokens `[(h/p)·(w/p), out_dim]` in row-major patch order.
    pub fn forward<'t>(&self, s: &Session<'t>, image: Var<'t>) -> Result<Var<'t>> {
        self.proj.forward(s, image.patchify(self.patch)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn zero_weight_ffn_outputs_bias() {
        let mut store = ParamStore::new();
        let ffn = FfnStack::new(&mut store, "f", ParamGroup::Rest, &[4, 3], &mut rng()).unwrap();
        *store.value_mut(ffn.layers()[0].weight) = Tensor::zeros(&[4, 3]);
        *store.value_mut(ffn.layers()[0].bias) = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let tape = Tape::new();
        let s = Session::new(&tape, &store);
        let x = tape.constant(Tensor::from_fn(&[5, 4], |i| i as f64));
        let y = ffn.forward(&s, x).unwrap().value();
        for r in 0..5 {
            assert_eq!(y.row(r), &[1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn ffn_shapes_and_param_count() {
        let mut store = ParamStore::new();
        let ffn = FfnStack::new(&mut store, "f", ParamGroup::Rest, &[64, 32, 32, 16], &mut rng()).unwrap();
        assert_eq!(ffn.depth(), 3);
        let expected = 64 * 32 + 32 + 32 * 32 + 32 + 32 * 16 + 16;
        assert_eq!(ffn.param_count(), expected);
        assert_eq!(store.count(None), expected);
        let tape = Tape::new();
        let s = Session::new(&tape, &store);
        let y = ffn.forward(&s, tape.constant(Tensor::zeros(&[10, 64]))).unwrap();
        assert_eq!(y.shape(), vec![10, 16]);
        let bad = ffn.forward(&s, tape.constant(Tensor::zeros(&[10, 63])));
        assert!(matches!(bad, Err(Error::Dimension { .. })));
    }

    #[test]
    fn linear_accepts_higher_rank_input() {
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", ParamGroup::Rest, 3, 2, &mut rng()).unwrap();
        let tape = Tape::new();
        let s = Session::new(&tape, &store);
        let x = tape.constant(Tensor::from_fn(&[2, 4, 3], |i| i as f64 * 0.1));
        assert_eq!(lin.forward(&s, x).unwrap().shape(), vec![2, 4, 2]);
        let v = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert_eq!(lin.forward(&s, v).unwrap().shape(), vec![2]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        Linear::new(&mut store, "l", ParamGroup::Rest, 3, 2, &mut rng()).unwrap();
        assert!(Linear::new(&mut store, "l", ParamGroup::Rest, 3, 2, &mut rng()).is_err());
    }

    #[test]
    fn attention_single_key_returns_its_value() {
        let mut store = ParamStore::new();
        let att = CrossAttention::new(&mut store, "a", ParamGroup::Rest, 4, 5, 3, 2, &mut rng()).unwrap();
        let tape = Tape::new();
        let s = Session::new(&tape, &store);
        let q = tape.constant(Tensor::from_fn(&[3, 4], |i| (i as f64).sin()));
        let kv = tape.constant(Tensor::from_fn(&[1, 5], |i| i as f64 - 2.0));
        let out = att.forward(&s, q, kv).unwrap().value();
        let v = kv.matmul(s.param(att.w_value)).unwrap().value();
        for r in 0..3 {
            for c in 0..2 {
                assert!((out.at(&[r, c]) - v.at(&[0, c])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_identical_keys_is_uniform() {
        let mut store = ParamStore::new();
        let att = CrossAttention::new(&mut store, "a", ParamGroup::Rest, 4, 5, 3, 2, &mut rng()).unwrap();
        let tape = Tape::new();
        let s = Session::new(&tape, &store);
        let q = tape.constant(Tensor::from_fn(&[2, 4], |i| i as f64));
        let kv = tape.constant(Tensor::from_fn(&[4, 5], |i| (i % 5) as f64));
        let (k, _) = att.project_kv(&s, kv).unwrap();
        let scores = q
            .matmul(s.param(att.w_query))
            .unwrap()
            .matmul(k.transpose().unwrap())
            .unwrap()
            .softmax(1)
            .unwrap()
            .value();
        assert!(scores.data().iter().all(|w| (w - 0.25).abs() < 1e-15));
    }

    #[test]
    fn patch_embed_token_count_and_constant_image() {
        let mut store = ParamStore::new();
        let pe = PatchEmbed::new(&mut store, "p", ParamGroup::Rest, 4, 8, 6, &mut rng()).unwrap();
        let tape = Tape::new();
        let s = Session::new(&tape, &store);
        let img = tape.constant(Tensor::full(&[64, 64, 4], 0.3));
        let tokens = pe.forward(&s, img).unwrap().value();
        assert_eq!(tokens.shape(), &[64, 6]);
        for r in 1..64 {
            assert_eq!(tokens.row(r), tokens.row(0));
        }
        let bad = tape.constant(Tensor::zeros(&[60, 64, 4]));
        assert!(matches!(pe.forward(&s, bad), Err(Error::Config(_))));
    }

    #[test]
    fn frozen_group_gets_no_grad() {
        let mut store = ParamStore::new();
        let a = Linear::new(&mut store, "a", ParamGroup::Detector, 2, 2, &mut rng()).unwrap();
        let b = Linear::new(&mut store, "b", ParamGroup::Rest, 2, 1, &mut rng()).unwrap();
        let tape = Tape::new();
        let s = Session::with_frozen(&tape, &store, &[ParamGroup::Detector]);
        let x = tape.constant(Tensor::ones(&[1, 2]));
        let y = b.forward(&s, a.forward(&s, x).unwrap()).unwrap().sum();
        tape.backward(y).unwrap();
        let grads = s.grads();
        assert!(grads[a.weight.index()].is_none());
        assert!(grads[b.weight.index()].is_some());
    }
}
