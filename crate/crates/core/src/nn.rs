//! Layers shared by the backbone and every adapter.

use crate::autodiff::{attention_forward, Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::params::{fan_in_bound, join, Init, ParamSpec, ParamTree};
use crate::tensor::Tensor;

/// Tokens `[h*w, c]` read as a row-major `h × w` spatial grid: token
/// `(i, j)` is row `i*w + j`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub tokens: Var,
    pub height: usize,
    pub width: usize,
}

pub fn tokens_to_grid(g: &Graph, x: Var, height: usize, width: usize) -> Result<TokenGrid> {
    let n = g.shape(x)[0];
    if g.shape(x).len() != 2 || height * width != n {
        return dim_err(format!("{height}x{width} grid for token matrix {:?}", g.shape(x)));
    }
    Ok(TokenGrid { tokens: x, height, width })
}

pub fn grid_to_tokens(grid: TokenGrid) -> Var {
    grid.tokens
}

pub fn grid_index(i: usize, j: usize, width: usize) -> usize {
    i * width + j
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<T = Tensor> {
    pub gain: T,
    pub bias: T,
    pub eps: f64,
}

pub const LN_EPS: f64 = 1e-6;

impl LayerNormParams<ParamSpec> {
    pub fn layout(c: usize) -> Self {
        Self { gain: ParamSpec::new([c], Init::Ones), bias: ParamSpec::new([c], Init::Zeros), eps: LN_EPS }
    }
}

impl<T> ParamTree for LayerNormParams<T> {
    type Leaf = T;
    type Mapped<U> = LayerNormParams<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> LayerNormParams<U> {
        LayerNormParams { gain: f(&join(prefix, "gain"), &self.gain), bias: f(&join(prefix, "bias"), &self.bias), eps: self.eps }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&join(prefix, "gain"), &mut self.gain);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// `y = x · weight + bias` with `weight` stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams<T = Tensor> {
    pub weight: T,
    pub bias: Option<T>,
}

impl LinearParams<ParamSpec> {
    /// Uniform `±sqrt(6/in)` weight, zero bias.
    pub fn layout(inp: usize, out: usize, bias: bool) -> Self {
        Self::layout_with(inp, out, bias, Init::Uniform(fan_in_bound(inp)))
    }

    pub fn zeros(inp: usize, out: usize, bias: bool) -> Self {
        Self::layout_with(inp, out, bias, Init::Zeros)
    }

    pub fn layout_with(inp: usize, out: usize, bias: bool, init: Init) -> Self {
        Self { weight: ParamSpec::new([inp, out], init), bias: bias.then(|| ParamSpec::new([out], Init::Zeros)) }
    }
}

impl<T> ParamTree for LinearParams<T> {
    type Leaf = T;
    type Mapped<U> = LinearParams<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> LinearParams<U> {
        LinearParams {
            weight: f(&join(prefix, "weight"), &self.weight),
            bias: self.bias.as_ref().map(|b| f(&join(prefix, "bias"), b)),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T = Tensor> {
    pub wq: LinearParams<T>,
    pub wk: LinearParams<T>,
    pub wv: LinearParams<T>,
    pub wo: LinearParams<T>,
    pub heads: usize,
}

impl AttentionParams<ParamSpec> {
    pub fn layout(d: usize, heads: usize, init: Init) -> Self {
        let lin = || LinearParams::layout_with(d, d, true, init);
        Self { wq: lin(), wk: lin(), wv: lin(), wo: lin(), heads }
    }
}

impl<T> ParamTree for AttentionParams<T> {
    type Leaf = T;
    type Mapped<U> = AttentionParams<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> AttentionParams<U> {
        AttentionParams {
            wq: self.wq.map_named(&join(prefix, "wq"), f),
            wk: self.wk.map_named(&join(prefix, "wk"), f),
            wv: self.wv.map_named(&join(prefix, "wv"), f),
            wo: self.wo.map_named(&join(prefix, "wo"), f),
            heads: self.heads,
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.wq.visit_mut(&join(prefix, "wq"), f);
        self.wk.visit_mut(&join(prefix, "wk"), f);
        self.wv.visit_mut(&join(prefix, "wv"), f);
        self.wo.visit_mut(&join(prefix, "wo"), f);
    }
}

pub fn layer_norm(g: &mut Graph, x: Var, p: &LayerNormParams<Var>) -> Result<Var> {
    if p.eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::Contract(format!("layer norm eps must be positive, got {}", p.eps)));
    }
    g.layer_norm(x, p.gain, p.bias, p.eps)
}

pub fn linear(g: &mut Graph, x: Var, p: &LinearParams<Var>) -> Result<Var> {
    let y = g.matmul(x, p.weight)?;
    match p.bias {
        Some(b) => g.add(y, b),
        None => Ok(y),
    }
}

pub fn gelu(g: &mut Graph, x: Var) -> Var {
    g.gelu(x)
}

pub fn dwconv2d(g: &mut Graph, grid: TokenGrid, kernel: Var) -> Result<TokenGrid> {
    let out = g.dwconv2d(grid.tokens, kernel, grid.height, grid.width)?;
    Ok(TokenGrid { tokens: out, ..grid })
}

/// 1×1 convolution: `tokens · weightᵀ` with `weight` stored `[c_out, c_in]`.
pub fn pwconv(g: &mut Graph, grid: TokenGrid, weight: Var) -> Result<TokenGrid> {
    let c = g.shape(grid.tokens)[1];
    if g.shape(weight) != [c, c] {
        return dim_err(format!("point-wise weight {:?} for {c} channels", g.shape(weight)));
    }
    let wt = g.transpose(weight)?;
    let out = g.matmul(grid.tokens, wt)?;
    Ok(TokenGrid { tokens: out, ..grid })
}

pub fn multi_head_attention(g: &mut Graph, x: Var, p: &AttentionParams<Var>) -> Result<Var> {
    let q = linear(g, x, &p.wq)?;
    let k = linear(g, x, &p.wk)?;
    let v = linear(g, x, &p.wv)?;
    attend(g, q, k, v, p)
}

/// Softmax attention and output projection on already-projected q, k, v.
pub(crate) fn attend(g: &mut Graph, q: Var, k: Var, v: Var, p: &AttentionParams<Var>) -> Result<Var> {
    let o = g.attention(q, k, v, p.heads)?;
    linear(g, o, &p.wo)
}

/// Per-head softmax weights `[heads, n, n]` for projected queries and keys.
pub fn attention_weights(q: &Tensor, k: &Tensor, heads: usize) -> Result<Tensor> {
    let [n, d] = q.dims2()?;
    if k.shape() != [n, d] {
        return dim_err(format!("queries {:?} vs keys {:?}", q.shape(), k.shape()));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("model dim {d} not divisible by {heads} heads")));
    }
    let (_, probs) = attention_forward(q.data(), k.data(), &vec![0.0; n * d], n, d, heads);
    Tensor::new([heads, n, n], probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, finite_diff_check_many};
    use crate::params::materialize;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn ln_params(g: &mut Graph, gain: Tensor, bias: Tensor, eps: f64) -> LayerNormParams<Var> {
        LayerNormParams { gain: g.constant(gain), bias: g.constant(bias), eps }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full([1, 4], 5.0));
        let p = ln_params(&mut g, Tensor::ones([4]), Tensor::zeros([4]), LN_EPS);
        let y = layer_norm(&mut g, x, &p).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 4]);
    }

    #[test]
    fn layer_norm_zero_gain_gives_bias() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::uniform([3, 4], 2.0, &mut rng(1)));
        let bias = Tensor::new([4], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let p = ln_params(&mut g, Tensor::zeros([4]), bias.clone(), LN_EPS);
        let y = layer_norm(&mut g, x, &p).unwrap();
        for row in g.value(y).data().chunks(4) {
            assert_eq!(row, bias.data());
        }
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::uniform([8, 16], 3.0, &mut rng(2)));
        let p = ln_params(&mut g, Tensor::ones([16]), Tensor::zeros([16]), 1e-14);
        let y = layer_norm(&mut g, x, &p).unwrap();
        for row in g.value(y).data().chunks(16) {
            let mu = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 16.0;
            assert!(mu.abs() < 1e-10, "{mu}");
            assert!((var - 1.0).abs() < 1e-8, "{var}");
        }
    }

    #[test]
    fn layer_norm_gradients() {
        let mut r = rng(3);
        let x = Tensor::uniform([5, 6], 2.0, &mut r);
        let gain = Tensor::uniform([6], 1.5, &mut r);
        let bias = Tensor::uniform([6], 1.0, &mut r);
        let w = Tensor::uniform([6, 6], 1.0, &mut r);
        let err = finite_diff_check_many(
            |g, v| {
                let p = LayerNormParams { gain: v[1], bias: v[2], eps: 1e-5 };
                let y = layer_norm(g, v[0], &p)?;
                let w = g.constant(w.clone());
                let z = g.matmul(y, w)?;
                let z = g.mul(z, z)?;
                Ok(g.sum(z))
            },
            &[x, gain, bias],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn grid_round_trip_and_indexing() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn([4, 3], |i| i as f64));
        let grid = tokens_to_grid(&g, x, 2, 2).unwrap();
        assert_eq!(grid_to_tokens(grid), x);
        assert_eq!(grid_index(1, 0, 2), 2);

        let bad = g.constant(Tensor::zeros([5, 3]));
        assert!(matches!(tokens_to_grid(&g, bad, 2, 2), Err(Error::Dimension(_))));
    }

    #[test]
    fn dwconv_delta_kernel_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::uniform([20, 3], 1.0, &mut rng(4)));
        let grid = tokens_to_grid(&g, x, 4, 5).unwrap();
        for k in [3, 5, 7] {
            let delta = Tensor::from_fn([3, k, k], |i| if i % (k * k) == k * k / 2 { 1.0 } else { 0.0 });
            let kern = g.constant(delta);
            let y = dwconv2d(&mut g, grid, kern).unwrap();
            assert!(g.value(y.tokens).bit_eq(g.value(x)));
        }
    }

    #[test]
    fn dwconv_matches_direct_oracle() {
        // Direct padded-image correlation, written independently of the
        // tap-major kernel used by the graph.
        let (h, w, c, k) = (4, 5, 2, 3);
        let x = Tensor::uniform([h * w, c], 1.0, &mut rng(5));
        let kern = Tensor::uniform([c, k, k], 1.0, &mut rng(6));
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let kv = g.constant(kern.clone());
        let y = g.dwconv2d(xv, kv, h, w).unwrap();
        let p = (k - 1) as isize / 2;
        for i in 0..h as isize {
            for j in 0..w as isize {
                for ch in 0..c {
                    let mut s = 0.0;
                    for a in 0..k as isize {
                        for b in 0..k as isize {
                            let (si, sj) = (i + a - p, j + b - p);
                            if si >= 0 && sj >= 0 && si < h as isize && sj < w as isize {
                                s += kern.at(&[ch, a as usize, b as usize])
                                    * x.at(&[(si as usize) * w + sj as usize, ch]);
                            }
                        }
                    }
                    let got = g.value(y).at(&[(i as usize) * w + j as usize, ch]);
                    assert!((got - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn dwconv_gradients() {
        let mut r = rng(7);
        for k in [3, 5, 7] {
            let x = Tensor::uniform([12, 3], 1.0, &mut r);
            let kern = Tensor::uniform([3, k, k], 1.0, &mut r);
            let probe = Tensor::uniform([12, 3], 1.0, &mut r);
            let err = finite_diff_check_many(
                |g, v| {
                    let y = g.dwconv2d(v[0], v[1], 3, 4)?;
                    let p = g.constant(probe.clone());
                    let z = g.mul(y, p)?;
                    Ok(g.sum(z))
                },
                &[x, kern],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "k={k}: {err}");
        }
    }

    #[test]
    fn pwconv_is_biasless_tokenwise_linear() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::uniform([6, 4], 1.0, &mut rng(8)));
        let wt = Tensor::uniform([4, 4], 1.0, &mut rng(9));
        let grid = tokens_to_grid(&g, x, 2, 3).unwrap();
        let w = g.constant(wt.clone());
        let y = pwconv(&mut g, grid, w).unwrap();
        let wt_t = g.constant(wt.t().unwrap());
        let z = g.matmul(x, wt_t).unwrap();
        assert!(g.value(y.tokens).bit_eq(g.value(z)));

        let id = g.constant(Tensor::identity(4));
        let y = pwconv(&mut g, grid, id).unwrap();
        assert!(g.value(y.tokens).bit_eq(g.value(x)));
        let zero = g.constant(Tensor::zeros([4, 4]));
        let y = pwconv(&mut g, grid, zero).unwrap();
        assert!(g.value(y.tokens).data().iter().all(|&v| v == 0.0));

        let rect = g.constant(Tensor::zeros([4, 3]));
        assert!(matches!(pwconv(&mut g, grid, rect), Err(Error::Dimension(_))));
    }

    fn identity_attention(g: &mut Graph, d: usize, heads: usize) -> AttentionParams<Var> {
        let mut lin = || LinearParams { weight: g.constant(Tensor::identity(d)), bias: None };
        AttentionParams { wq: lin(), wk: lin(), wv: lin(), wo: lin(), heads }
    }

    #[test]
    fn attention_single_token_identity() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::uniform([1, 4], 1.0, &mut rng(10)));
        let p = identity_attention(&mut g, 4, 2);
        let y = multi_head_attention(&mut g, x, &p).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(x)) == 0.0);
    }

    #[test]
    fn attention_weights_normalized() {
        let q = Tensor::uniform([7, 8], 2.0, &mut rng(11));
        let k = Tensor::uniform([7, 8], 2.0, &mut rng(12));
        let p = attention_weights(&q, &k, 2).unwrap();
        for row in p.data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(matches!(attention_weights(&q, &k, 3), Err(Error::Config(_))));
    }

    #[test]
    fn attention_identical_tokens_identical_rows() {
        let mut g = Graph::new();
        let layout = AttentionParams::layout(4, 2, Init::Uniform(0.5));
        let p = materialize(&layout, "attn", 3);
        let pv = crate::params::bind(&mut g, &p, "attn", &|_| false);
        let row = [0.3, -0.2, 0.9, 0.1];
        let x = g.constant(Tensor::new([3, 4], row.iter().chain(&row).chain(&[1.0, 2.0, 3.0, 4.0]).copied().collect()).unwrap());
        let y = multi_head_attention(&mut g, x, &pv).unwrap();
        let yd = g.value(y).data();
        assert_eq!(&yd[0..4], &yd[4..8]);
    }

    #[test]
    fn attention_gradients() {
        let mut r = rng(13);
        let (n, d) = (5, 6);
        let q = Tensor::uniform([n, d], 1.0, &mut r);
        let k = Tensor::uniform([n, d], 1.0, &mut r);
        let v = Tensor::uniform([n, d], 1.0, &mut r);
        let probe = Tensor::uniform([n, d], 1.0, &mut r);
        let err = finite_diff_check_many(
            |g, x| {
                let o = g.attention(x[0], x[1], x[2], 3)?;
                let p = g.constant(probe.clone());
                let z = g.mul(o, p)?;
                Ok(g.sum(z))
            },
            &[q, k, v],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn gelu_gradient_at_zero() {
        let x = Tensor::new([3], vec![-1.0, 0.0, 1.5]).unwrap();
        let err = finite_diff_check(
            |g, x| {
                let y = gelu(g, x);
                Ok(g.sum(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6);
    }
}
