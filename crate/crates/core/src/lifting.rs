//! Lifting maps `x -> z = [x; zeta(x)]` and the fixed decoder `C = [I 0]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Mat;

/// Per-channel affine normalization applied before the encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(n: usize) -> Self {
        Standardizer { mean: vec![0.0; n], std: vec![1.0; n] }
    }

    /// Fits mean and std per row of `x` (`n x s`). Constant rows keep std 1.
    pub fn fit(x: &Mat) -> Self {
        let s = x.cols().max(1) as f64;
        let mut mean = Vec::with_capacity(x.rows());
        let mut std = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = x.row(r);
            let mu = row.iter().sum::<f64>() / s;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / s;
            mean.push(mu);
            std.push(if var > 0.0 { var.sqrt() } else { 1.0 });
        }
        Standardizer { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn apply_mat(&self, x: &Mat) -> Mat {
        Mat::from_fn(x.rows(), x.cols(), |r, c| (x[(r, c)] - self.mean[r]) / self.std[r])
    }

    fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() {
            return Err(Error::DimensionMismatch("standardizer mean/std lengths".into()));
        }
        if self.mean.iter().any(|v| !v.is_finite()) || self.std.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Precondition("standardizer needs finite mean and positive std".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer {
    /// `out x in`
    pub w: Mat,
    pub b: Vec<f64>,
}

/// Feed-forward encoder: tanh hidden layers, linear output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderParams {
    pub norm: Standardizer,
    pub layers: Vec<Layer>,
}

/// Parameter gradient with the same layout as [`EncoderParams::layers`].
pub type LayerGrads = Vec<Layer>;

/// Activations kept from a batch forward pass.
pub struct ForwardCache {
    /// `acts[0]` is the standardized input, `acts[l]` the output of layer `l`.
    acts: Vec<Mat>,
}

impl ForwardCache {
    pub fn output(&self) -> &Mat {
        self.acts.last().expect("cache holds the input at least")
    }
}

impl EncoderParams {
    /// Xavier-uniform weights and zero biases. `dims = [n, hidden.., out]`.
    pub fn init(dims: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let mut p = EncoderParams::zeros(dims)?;
        for layer in &mut p.layers {
            let (fan_out, fan_in) = layer.w.shape();
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            layer.w.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-a..a));
        }
        Ok(p)
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims[0] == 0 {
            return Err(Error::Precondition("encoder needs an input dimension".into()));
        }
        if dims.len() > 1 && dims[1..].iter().any(|&d| d == 0) {
            return Err(Error::Precondition(format!("zero-width encoder layer in {dims:?}")));
        }
        let layers = dims.windows(2).map(|w| Layer { w: Mat::zeros(w[1], w[0]), b: vec![0.0; w[1]] }).collect();
        Ok(EncoderParams { norm: Standardizer::identity(dims[0]), layers })
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.w.rows()));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.norm.dim()
    }

    /// `N - n`; zero for an encoder without layers.
    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.w.rows())
    }

    pub fn validate(&self) -> Result<()> {
        self.norm.validate()?;
        let mut width = self.input_dim();
        for (i, l) in self.layers.iter().enumerate() {
            if l.w.cols() != width || l.b.len() != l.w.rows() {
                return Err(Error::DimensionMismatch(format!("encoder layer {i} has shape {:?} after width {width}", l.w.shape())));
            }
            if !l.w.is_finite() || l.b.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("encoder parameters"));
            }
            width = l.w.rows();
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.data().len() + l.b.len()).sum()
    }

    pub fn params_to_vec(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(l.w.data());
            out.extend_from_slice(&l.b);
        }
    }

    /// Reads parameters back from `v`, returning how many were consumed.
    pub fn params_from_slice(&mut self, v: &[f64]) -> usize {
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.w.data().len();
            l.w.data_mut().copy_from_slice(&v[at..at + nw]);
            at += nw;
            let nb = l.b.len();
            l.b.copy_from_slice(&v[at..at + nb]);
            at += nb;
        }
        at
    }

    /// Batch forward pass on columns of `x` (`n x s`).
    pub fn forward(&self, x: &Mat) -> ForwardCache {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(self.norm.apply_mat(x));
        let last = self.layers.len().saturating_sub(1);
        for (i, l) in self.layers.iter().enumerate() {
            let mut h = l.w.matmul(acts.last().unwrap());
            for r in 0..h.rows() {
                let b = l.b[r];
                let row = h.row_mut(r);
                if i == last {
                    row.iter_mut().for_each(|v| *v += b);
                } else {
                    row.iter_mut().for_each(|v| *v = (*v + b).tanh());
                }
            }
            acts.push(h);
        }
        ForwardCache { acts }
    }

    /// Batch encoder output, `(N - n) x s`.
    pub fn encode_batch(&self, x: &Mat) -> Mat {
        if self.layers.is_empty() {
            return Mat::zeros(0, x.cols());
        }
        let mut cache = self.forward(x);
        cache.acts.pop().unwrap()
    }

    /// Reverse pass for the cotangent `g` (`(N - n) x s`) of the output.
    /// Returns parameter gradients and, if asked, the gradient with respect
    /// to the raw (unstandardized) input.
    pub fn backward(&self, cache: &ForwardCache, g: &Mat, want_input: bool) -> (LayerGrads, Option<Mat>) {
        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        let mut delta = g.clone();
        for i in (0..self.layers.len()).rev() {
            let l = &self.layers[i];
            let input = &cache.acts[i];
            let dw = delta.matmul_t(input);
            let db: Vec<f64> = (0..delta.rows()).map(|r| delta.row(r).iter().sum()).collect();
            grads.push(Layer { w: dw, b: db });
            if i > 0 || want_input {
                let mut up = l.w.t_matmul(&delta);
                if i > 0 {
                    // input of layer i is a tanh activation
                    for (u, a) in up.data_mut().iter_mut().zip(input.data()) {
                        *u *= 1.0 - a * a;
                    }
                }
                delta = up;
            }
        }
        grads.reverse();
        let gx = want_input.then(|| {
            if self.layers.is_empty() {
                return Mat::zeros(self.input_dim(), g.cols());
            }
            Mat::from_fn(delta.rows(), delta.cols(), |r, c| delta[(r, c)] / self.norm.std[r])
        });
        (grads, gx)
    }

    pub fn zero_grads(&self) -> LayerGrads {
        self.layers.iter().map(|l| Layer { w: Mat::zeros(l.w.rows(), l.w.cols()), b: vec![0.0; l.b.len()] }).collect()
    }

    /// Componentwise bound on `|encode(x)|` valid for every `x`.
    pub fn output_bound(&self) -> Vec<f64> {
        let Some(out) = self.layers.last() else {
            return Vec::new();
        };
        if self.layers.len() == 1 {
            // a lone linear layer is unbounded in x
            return vec![f64::INFINITY; out.w.rows()];
        }
        (0..out.w.rows()).map(|r| out.w.row(r).iter().map(|v| v.abs()).sum::<f64>() + out.b[r].abs()).collect()
    }
}

/// `zeta(x)` for a single state.
pub fn encode(x: &[f64], p: &EncoderParams) -> Vec<f64> {
    p.encode_batch(&Mat::col_vec(x)).into_data()
}

/// `z = [x; zeta(x)]`.
pub fn lift(x: &[f64], p: &EncoderParams) -> Vec<f64> {
    let mut z = x.to_vec();
    z.extend(encode(x, p));
    z
}

/// `C z`, the first `n` entries.
pub fn decode(z: &[f64], n: usize) -> Vec<f64> {
    z[..n].to_vec()
}

/// Gradients of `cotangent . encode(x, p)` with respect to `p` and `x`.
pub fn encode_vjp(x: &[f64], p: &EncoderParams, cotangent: &[f64]) -> (LayerGrads, Vec<f64>) {
    let cache = p.forward(&Mat::col_vec(x));
    let (g, gx) = p.backward(&cache, &Mat::col_vec(cotangent), true);
    (g, gx.expect("input gradient requested").into_data())
}

/// Fixed polynomial dictionary: each entry is an exponent vector over the
/// state channels. Degree-one monomials are excluded since `x` is always
/// stacked in front.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dictionary {
    pub n: usize,
    pub exponents: Vec<Vec<u32>>,
}

impl Dictionary {
    /// All monomials of total degree `2..=degree`.
    pub fn monomials(n: usize, degree: u32) -> Self {
        fn rec(n: usize, left: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
            if prefix.len() == n - 1 {
                prefix.push(left);
                out.push(prefix.clone());
                prefix.pop();
                return;
            }
            for e in (0..=left).rev() {
                prefix.push(e);
                rec(n, left - e, prefix, out);
                prefix.pop();
            }
        }
        let mut exponents = Vec::new();
        for d in 2..=degree {
            rec(n, d, &mut Vec::new(), &mut exponents);
        }
        Dictionary { n, exponents }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        self.exponents.iter().map(|e| e.iter().zip(x).map(|(&k, v)| v.powi(k as i32)).product()).collect()
    }
}

/// A lifting map: learned encoder, fixed dictionary, or the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Lift {
    Identity { n: usize },
    Dictionary(Dictionary),
    Neural(EncoderParams),
}

impl Lift {
    pub fn state_dim(&self) -> usize {
        match self {
            Lift::Identity { n } => *n,
            Lift::Dictionary(d) => d.n,
            Lift::Neural(p) => p.input_dim(),
        }
    }

    pub fn lifted_dim(&self) -> usize {
        self.state_dim()
            + match self {
                Lift::Identity { .. } => 0,
                Lift::Dictionary(d) => d.exponents.len(),
                Lift::Neural(p) => p.output_dim(),
            }
    }

    pub fn lift(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Lift::Identity { .. } => x.to_vec(),
            Lift::Dictionary(d) => {
                let mut z = x.to_vec();
                z.extend(d.eval(x));
                z
            }
            Lift::Neural(p) => lift(x, p),
        }
    }

    /// Lifts every column of `x`.
    pub fn lift_batch(&self, x: &Mat) -> Mat {
        match self {
            Lift::Neural(p) => Mat::vstack(x, &p.encode_batch(x)),
            _ => {
                let cols: Vec<Vec<f64>> = (0..x.cols()).map(|c| self.lift(&x.col(c))).collect();
                let refs: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
                Mat::from_cols(self.lifted_dim(), &refs)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Lift::Identity { n } if *n == 0 => Err(Error::Precondition("zero state dimension".into())),
            Lift::Dictionary(d) if d.exponents.iter().any(|e| e.len() != d.n) => {
                Err(Error::DimensionMismatch("dictionary exponent length".into()))
            }
            Lift::Neural(p) => p.validate(),
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::stream;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_net(dims: &[usize], seed: u64) -> EncoderParams {
        let mut rng = stream(seed, "net", 0);
        let mut p = EncoderParams::init(dims, &mut rng).unwrap();
        for l in &mut p.layers {
            l.b.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
        }
        p.norm = Standardizer { mean: (0..dims[0]).map(|i| 0.1 * i as f64).collect(), std: (0..dims[0]).map(|i| 1.0 + 0.5 * i as f64).collect() };
        p
    }

    #[test]
    fn zero_params_give_zero_output() {
        let p = EncoderParams::zeros(&[2, 20, 20, 20, 10]).unwrap();
        assert_eq!(encode(&[3.0, -7.0], &p), vec![0.0; 10]);
        assert_eq!(lift(&[0.0, 0.0], &p), vec![0.0; 12]);
    }

    #[test]
    fn single_linear_layer_is_matrix_product() {
        let mut p = EncoderParams::zeros(&[3, 2]).unwrap();
        p.layers[0].w = Mat::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.0]]).unwrap();
        let x = [0.5, -1.0, 2.0];
        assert_eq!(encode(&x, &p), p.layers[0].w.matvec(&x));
        let g = [0.3, -2.0];
        let (grads, _) = encode_vjp(&x, &p, &g);
        let expected = Mat::from_fn(2, 3, |r, c| g[r] * x[c]);
        assert_eq!(grads[0].w, expected);
        assert_eq!(grads[0].b, g.to_vec());
    }

    #[test]
    fn lift_dimension_and_decode() {
        let p = random_net(&[2, 20, 20, 20, 10], 1);
        let x = [0.123456789, -9.87654321];
        let z = lift(&x, &p);
        assert_eq!(z.len(), 12);
        assert_eq!(decode(&z, 2), x.to_vec());
        let lifted = Lift::Neural(p.clone()).lift_batch(&Mat::col_vec(&x));
        assert_eq!(lifted.col(0), z);
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let p = random_net(&[2, 5, 4, 3], 2);
        let (g, gx) = encode_vjp(&[0.3, 0.4], &p, &[0.0; 3]);
        assert!(g.iter().all(|l| l.w.max_abs() == 0.0 && l.b.iter().all(|v| *v == 0.0)));
        assert!(gx.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn vjp_matches_central_differences() {
        let p = random_net(&[3, 6, 5, 4], 3);
        let x = [0.7, -0.2, 1.3];
        let ct = [0.4, -1.1, 0.25, 0.9];
        let f = |q: &EncoderParams, x: &[f64]| encode(x, q).iter().zip(&ct).map(|(a, b)| a * b).sum::<f64>();
        let (g, gx) = encode_vjp(&x, &p, &ct);
        let mut flat_g = Vec::new();
        EncoderParams { norm: p.norm.clone(), layers: g }.params_to_vec(&mut flat_g);
        let mut theta = Vec::new();
        p.params_to_vec(&mut theta);
        let h = 1e-6;
        for i in 0..theta.len() {
            let mut q = p.clone();
            let mut t = theta.clone();
            t[i] += h;
            q.params_from_slice(&t);
            let fp = f(&q, &x);
            t[i] -= 2.0 * h;
            q.params_from_slice(&t);
            let fm = f(&q, &x);
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - flat_g[i]).abs() <= 1e-5 * fd.abs().max(1.0), "param {i}: fd {fd} vs {}", flat_g[i]);
        }
        for i in 0..3 {
            let mut xp = x;
            xp[i] += h;
            let mut xm = x;
            xm[i] -= h;
            let fd = (f(&p, &xp) - f(&p, &xm)) / (2.0 * h);
            assert!((fd - gx[i]).abs() <= 1e-5 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn standardizer_fit() {
        let x = Mat::from_rows(&[vec![1.0, 3.0], vec![5.0, 5.0]]).unwrap();
        let s = Standardizer::fit(&x);
        assert_eq!(s.mean, vec![2.0, 5.0]);
        assert_eq!(s.std, vec![1.0, 1.0]);
        assert_eq!(s.apply(&[3.0, 6.0]), vec![1.0, 1.0]);
    }

    #[test]
    fn monomial_dictionary() {
        let d = Dictionary::monomials(2, 2);
        assert_eq!(d.exponents, vec![vec![2, 0], vec![1, 1], vec![0, 2]]);
        assert_eq!(d.eval(&[2.0, 3.0]), vec![4.0, 6.0, 9.0]);
        assert_eq!(Dictionary::monomials(3, 3).exponents.len(), 6 + 10);
        let l = Lift::Dictionary(d);
        assert_eq!(l.lifted_dim(), 5);
        assert_eq!(l.lift(&[2.0, 3.0]), vec![2.0, 3.0, 4.0, 6.0, 9.0]);
    }

    #[test]
    fn serde_round_trip() {
        let l = Lift::Neural(random_net(&[2, 4, 3], 9));
        let s = serde_json::to_string(&l).unwrap();
        assert_eq!(serde_json::from_str::<Lift>(&s).unwrap(), l);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn decode_inverts_lift(seed in 0u64..1000, x1 in -1e3f64..1e3, x2 in -1e3f64..1e3) {
            let p = random_net(&[2, 4, 3], seed);
            prop_assert_eq!(decode(&lift(&[x1, x2], &p), 2), vec![x1, x2]);
        }

        #[test]
        fn output_respects_analytic_bound(seed in 0u64..1000, x1 in -1e4f64..1e4, x2 in -1e4f64..1e4) {
            let p = random_net(&[2, 8, 8, 5], seed);
            let bound = p.output_bound();
            for (v, b) in encode(&[x1, x2], &p).iter().zip(&bound) {
                prop_assert!(v.abs() <= *b);
            }
        }
    }
}
