//! Learnable part of the network: one transform head per frozen backbone,
//! weighted feature aggregation and a linear regression head.
//!
//! Head: `z -> FC -> LayerNorm -> GELU -> FC -> LayerNorm -> GELU -> f` (f in R^D).
//! Aggregation: `h = Σ ω_n f_n / Σ ω_n`. Score: `w_reg · h + b_reg`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;
pub const DEFAULT_HIDDEN: usize = 256;
pub const DEFAULT_OUT: usize = 128;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    cdf + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// What a parameter tensor is; weight decay only touches `Weight`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormGain,
    NormBias,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformHead {
    pub input_dim: usize,
    pub hidden: usize,
    pub out: usize,
    /// Row-major `hidden × input_dim`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub norm1_gain: Vec<f64>,
    pub norm1_bias: Vec<f64>,
    /// Row-major `out × hidden`.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub norm2_gain: Vec<f64>,
    pub norm2_bias: Vec<f64>,
}

impl TransformHead {
    pub fn zeros(input_dim: usize, hidden: usize, out: usize) -> Self {
        Self {
            input_dim,
            hidden,
            out,
            w1: vec![0.0; hidden * input_dim],
            b1: vec![0.0; hidden],
            norm1_gain: vec![0.0; hidden],
            norm1_bias: vec![0.0; hidden],
            w2: vec![0.0; out * hidden],
            b2: vec![0.0; out],
            norm2_gain: vec![0.0; out],
            norm2_bias: vec![0.0; out],
        }
    }

    fn tensors(&self) -> [(&'static str, ParamKind, &[f64]); 8] {
        [
            ("w1", ParamKind::Weight, &self.w1),
            ("b1", ParamKind::Bias, &self.b1),
            ("norm1_gain", ParamKind::NormGain, &self.norm1_gain),
            ("norm1_bias", ParamKind::NormBias, &self.norm1_bias),
            ("w2", ParamKind::Weight, &self.w2),
            ("b2", ParamKind::Bias, &self.b2),
            ("norm2_gain", ParamKind::NormGain, &self.norm2_gain),
            ("norm2_bias", ParamKind::NormBias, &self.norm2_bias),
        ]
    }

    fn tensors_mut(&mut self) -> [(&'static str, ParamKind, &mut [f64]); 8] {
        [
            ("w1", ParamKind::Weight, &mut self.w1),
            ("b1", ParamKind::Bias, &mut self.b1),
            ("norm1_gain", ParamKind::NormGain, &mut self.norm1_gain),
            ("norm1_bias", ParamKind::NormBias, &mut self.norm1_bias),
            ("w2", ParamKind::Weight, &mut self.w2),
            ("b2", ParamKind::Bias, &mut self.b2),
            ("norm2_gain", ParamKind::NormGain, &mut self.norm2_gain),
            ("norm2_bias", ParamKind::NormBias, &mut self.norm2_bias),
        ]
    }

    pub fn forward(&self, z: &[f64]) -> Result<HeadTrace> {
        if z.len() != self.input_dim {
            return Err(Error::Shape(format!(
                "head expects input of length {}, got {}",
                self.input_dim,
                z.len()
            )));
        }
        let x1 = affine(&self.w1, &self.b1, z);
        let norm1 = LayerNormTrace::forward(&x1, &self.norm1_gain, &self.norm1_bias);
        let a1: Vec<f64> = norm1.y.iter().map(|&v| gelu(v)).collect();
        let x2 = affine(&self.w2, &self.b2, &a1);
        let norm2 = LayerNormTrace::forward(&x2, &self.norm2_gain, &self.norm2_bias);
        let f = norm2.y.iter().map(|&v| gelu(v)).collect();
        Ok(HeadTrace {
            z: z.to_vec(),
            norm1,
            a1,
            norm2,
            f,
        })
    }

    /// Accumulates the gradients of this head given `df = ∂L/∂f` into `grad`.
    pub fn backward(&self, trace: &HeadTrace, df: &[f64], grad: &mut TransformHead) {
        let dy2: Vec<f64> = df
            .iter()
            .zip(&trace.norm2.y)
            .map(|(g, &y)| g * gelu_grad(y))
            .collect();
        let dx2 = trace
            .norm2
            .backward(&dy2, &self.norm2_gain, &mut grad.norm2_gain, &mut grad.norm2_bias);
        let da1 = affine_backward(&self.w2, &trace.a1, &dx2, &mut grad.w2, &mut grad.b2);
        let dy1: Vec<f64> = da1
            .iter()
            .zip(&trace.norm1.y)
            .map(|(g, &y)| g * gelu_grad(y))
            .collect();
        let dx1 = trace
            .norm1
            .backward(&dy1, &self.norm1_gain, &mut grad.norm1_gain, &mut grad.norm1_bias);
        // input gradient is discarded: backbone features are frozen
        let _ = affine_backward(&self.w1, &trace.z, &dx1, &mut grad.w1, &mut grad.b1);
    }
}

/// `W x + b` with `W` row-major `b.len() × x.len()`.
fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    b.iter()
        .zip(w.chunks_exact(x.len()))
        .map(|(bi, row)| bi + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
        .collect()
}

/// Accumulates `dW += dy xᵀ`, `db += dy`; returns `Wᵀ dy`.
fn affine_backward(w: &[f64], x: &[f64], dy: &[f64], dw: &mut [f64], db: &mut [f64]) -> Vec<f64> {
    let mut dx = vec![0.0; x.len()];
    for (i, &g) in dy.iter().enumerate() {
        db[i] += g;
        let row = &w[i * x.len()..(i + 1) * x.len()];
        let drow = &mut dw[i * x.len()..(i + 1) * x.len()];
        for j in 0..x.len() {
            drow[j] += g * x[j];
            dx[j] += g * row[j];
        }
    }
    dx
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormTrace {
    pub xhat: Vec<f64>,
    pub inv_std: f64,
    /// Output `gain * xhat + bias`.
    pub y: Vec<f64>,
}

impl LayerNormTrace {
    fn forward(x: &[f64], gain: &[f64], bias: &[f64]) -> Self {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + NORM_EPS).sqrt();
        let xhat: Vec<f64> = if var == 0.0 {
            vec![0.0; x.len()]
        } else {
            x.iter().map(|v| (v - mean) * inv_std).collect()
        };
        let y = xhat
            .iter()
            .zip(gain.iter().zip(bias))
            .map(|(h, (g, b))| g * h + b)
            .collect();
        Self { xhat, inv_std, y }
    }

    fn backward(&self, dy: &[f64], gain: &[f64], dgain: &mut [f64], dbias: &mut [f64]) -> Vec<f64> {
        let n = dy.len() as f64;
        let mut dxhat = Vec::with_capacity(dy.len());
        for i in 0..dy.len() {
            dgain[i] += dy[i] * self.xhat[i];
            dbias[i] += dy[i];
            dxhat.push(dy[i] * gain[i]);
        }
        let mean_d = dxhat.iter().sum::<f64>() / n;
        let mean_dx = dxhat.iter().zip(&self.xhat).map(|(d, h)| d * h).sum::<f64>() / n;
        dxhat
            .iter()
            .zip(&self.xhat)
            .map(|(d, h)| self.inv_std * (d - mean_d - h * mean_dx))
            .collect()
    }
}

/// Intermediates of one head's forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTrace {
    pub z: Vec<f64>,
    pub norm1: LayerNormTrace,
    pub a1: Vec<f64>,
    pub norm2: LayerNormTrace,
    pub f: Vec<f64>,
}

/// All trainable state.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub heads: Vec<TransformHead>,
    pub w_reg: Vec<f64>,
    pub b_reg: f64,
}

/// Xavier-uniform weights, zero biases, unit norm gains, zero norm biases.
pub fn init_heads(dims: &[usize], out: usize, hidden: usize, seed: u64) -> Result<HeadParams> {
    if dims.is_empty() || dims.contains(&0) || out == 0 || hidden == 0 {
        return Err(Error::InvalidArgument(
            "init_heads needs nonempty positive dims, D and hidden width".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xavier = |fan_in: usize, fan_out: usize| -> Vec<f64> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect()
    };
    let mut heads = Vec::with_capacity(dims.len());
    for &dim in dims {
        let mut h = TransformHead::zeros(dim, hidden, out);
        h.w1 = xavier(dim, hidden);
        h.w2 = xavier(hidden, out);
        h.norm1_gain.fill(1.0);
        h.norm2_gain.fill(1.0);
        heads.push(h);
    }
    let w_reg = xavier(out, 1);
    Ok(HeadParams {
        heads,
        w_reg,
        b_reg: 0.0,
    })
}

/// `Σ ω_n f_n / Σ ω_n`.
pub fn aggregate(features: &[&[f64]], weights: &[f64]) -> Result<Vec<f64>> {
    if features.is_empty() {
        return Err(Error::InvalidArgument("aggregation needs at least one model".into()));
    }
    if features.len() != weights.len() {
        return Err(Error::Shape(format!(
            "{} feature vectors but {} weights",
            features.len(),
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
        return Err(Error::InvalidArgument(format!("aggregation weight {w} is not positive")));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::Shape("feature vectors differ in length".into()));
    }
    let total: f64 = weights.iter().sum();
    let mut h = vec![0.0; d];
    for (f, w) in features.iter().zip(weights) {
        for (acc, x) in h.iter_mut().zip(f.iter()) {
            *acc += w * x;
        }
    }
    h.iter_mut().for_each(|x| *x /= total);
    Ok(h)
}

/// Forward pass of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub score: f64,
    pub h: Vec<f64>,
    pub heads: Vec<HeadTrace>,
}

impl Prediction {
    pub fn features(&self) -> Vec<&[f64]> {
        self.heads.iter().map(|t| t.f.as_slice()).collect()
    }
}

/// Loss gradients of one sample at the score, at `h` and at every `f_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrads {
    pub score: f64,
    pub h: Vec<f64>,
    pub f: Vec<Vec<f64>>,
}

impl OutputGrads {
    pub fn zeros(n_models: usize, out: usize) -> Self {
        Self {
            score: 0.0,
            h: vec![0.0; out],
            f: vec![vec![0.0; out]; n_models],
        }
    }
}

impl HeadParams {
    pub fn n_models(&self) -> usize {
        self.heads.len()
    }

    pub fn out_dim(&self) -> usize {
        self.w_reg.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.heads.first().map_or(0, |h| h.hidden)
    }

    pub fn input_dims(&self) -> Vec<usize> {
        self.heads.iter().map(|h| h.input_dim).collect()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            heads: self
                .heads
                .iter()
                .map(|h| TransformHead::zeros(h.input_dim, h.hidden, h.out))
                .collect(),
            w_reg: vec![0.0; self.w_reg.len()],
            b_reg: 0.0,
        }
    }

    /// Every tensor with a stable name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ParamKind, &[f64])> {
        let mut out = Vec::new();
        for (n, h) in self.heads.iter().enumerate() {
            for (name, kind, t) in h.tensors() {
                out.push((format!("head{n}.{name}"), kind, t));
            }
        }
        out.push(("w_reg".into(), ParamKind::Weight, self.w_reg.as_slice()));
        out.push(("b_reg".into(), ParamKind::Bias, std::slice::from_ref(&self.b_reg)));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ParamKind, &mut [f64])> {
        let mut out = Vec::new();
        for (n, h) in self.heads.iter_mut().enumerate() {
            for (name, kind, t) in h.tensors_mut() {
                out.push((format!("head{n}.{name}"), kind, t));
            }
        }
        out.push(("w_reg".into(), ParamKind::Weight, self.w_reg.as_mut_slice()));
        out.push(("b_reg".into(), ParamKind::Bias, std::slice::from_mut(&mut self.b_reg)));
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, t)| t.iter().all(|x| x.is_finite()))
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &HeadParams) {
        for ((_, _, a), (_, _, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn transform(&self, zs: &[&[f64]]) -> Result<Vec<HeadTrace>> {
        if zs.len() != self.heads.len() {
            return Err(Error::Shape(format!(
                "{} heads but {} feature vectors",
                self.heads.len(),
                zs.len()
            )));
        }
        self.heads.iter().zip(zs).map(|(h, z)| h.forward(z)).collect()
    }

    pub fn predict(&self, zs: &[&[f64]], weights: &[f64]) -> Result<Prediction> {
        let heads = self.transform(zs)?;
        let fs: Vec<&[f64]> = heads.iter().map(|t| t.f.as_slice()).collect();
        let h = aggregate(&fs, weights)?;
        let score = self.b_reg + self.w_reg.iter().zip(&h).map(|(w, x)| w * x).sum::<f64>();
        Ok(Prediction { score, h, heads })
    }

    /// Parameter gradients of one sample. `grads.h` and `grads.f` are the
    /// direct loss gradients at `h` and `f_n`; the score path is added here.
    pub fn backward(&self, pred: &Prediction, weights: &[f64], grads: &OutputGrads) -> Result<HeadParams> {
        let mut out = self.zeros_like();
        self.backward_into(pred, weights, grads, &mut out)?;
        Ok(out)
    }

    pub fn backward_into(
        &self,
        pred: &Prediction,
        weights: &[f64],
        grads: &OutputGrads,
        out: &mut HeadParams,
    ) -> Result<()> {
        let n = self.heads.len();
        let d = self.out_dim();
        if pred.heads.len() != n || weights.len() != n || grads.f.len() != n || grads.h.len() != d {
            return Err(Error::Shape("trace, weights and gradients disagree with the parameters".into()));
        }
        for (w, x) in out.w_reg.iter_mut().zip(&pred.h) {
            *w += grads.score * x;
        }
        out.b_reg += grads.score;
        let dh: Vec<f64> = grads
            .h
            .iter()
            .zip(&self.w_reg)
            .map(|(g, w)| g + grads.score * w)
            .collect();
        let total: f64 = weights.iter().sum();
        for (k, head) in self.heads.iter().enumerate() {
            let share = weights[k] / total;
            let df: Vec<f64> = grads.f[k]
                .iter()
                .zip(&dh)
                .map(|(gf, gh)| gf + share * gh)
                .collect();
            head.backward(&pred.heads[k], &df, &mut out.heads[k]);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(dims: &[usize], d: usize, hidden: usize, seed: u64) -> HeadParams {
        let mut p = init_heads(dims, d, hidden, seed).unwrap();
        // perturb biases and norm parameters so every path is exercised
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        for (_, kind, t) in p.tensors_mut() {
            if kind != ParamKind::Weight {
                t.iter_mut().for_each(|x| *x += rng.random_range(-0.5..0.5));
            }
        }
        p
    }

    fn random_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    /// Straight-line scalar re-implementation of one head.
    #[allow(clippy::needless_range_loop)]
    fn naive_head(h: &TransformHead, z: &[f64]) -> Vec<f64> {
        fn ln(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
            let mut mean = 0.0;
            for v in x {
                mean += v;
            }
            mean /= x.len() as f64;
            let mut var = 0.0;
            for v in x {
                var += (v - mean) * (v - mean);
            }
            var /= x.len() as f64;
            let mut out = vec![0.0; x.len()];
            for i in 0..x.len() {
                let xh = if var == 0.0 { 0.0 } else { (x[i] - mean) / (var + 1e-5).sqrt() };
                out[i] = g[i] * xh + b[i];
            }
            out
        }
        fn g(x: f64) -> f64 {
            x * 0.5 * (1.0 + libm::erf(x / 2f64.sqrt()))
        }
        let mut x1 = vec![0.0; h.hidden];
        for i in 0..h.hidden {
            x1[i] = h.b1[i];
            for j in 0..h.input_dim {
                x1[i] += h.w1[i * h.input_dim + j] * z[j];
            }
        }
        let a1: Vec<f64> = ln(&x1, &h.norm1_gain, &h.norm1_bias).into_iter().map(g).collect();
        let mut x2 = vec![0.0; h.out];
        for i in 0..h.out {
            x2[i] = h.b2[i];
            for j in 0..h.hidden {
                x2[i] += h.w2[i * h.hidden + j] * a1[j];
            }
        }
        ln(&x2, &h.norm2_gain, &h.norm2_bias).into_iter().map(g).collect()
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
        assert!((gelu(-1.0) + 0.158_655_253_931_457_05).abs() < 1e-15);
        for x in [-3.0, -0.7, 0.0, 0.4, 2.5] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((gelu_grad(x) - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn init_shapes_and_determinism() {
        let p = init_heads(&[1024, 2048], 128, 256, 3).unwrap();
        assert_eq!(p.heads[0].w1.len(), 256 * 1024);
        assert_eq!(p.heads[1].w1.len(), 256 * 2048);
        assert_eq!(p.heads[1].w2.len(), 128 * 256);
        assert_eq!(p.out_dim(), 128);
        assert_eq!(p, init_heads(&[1024, 2048], 128, 256, 3).unwrap());
        assert_ne!(p, init_heads(&[1024, 2048], 128, 256, 4).unwrap());
        let a = (6.0f64 / (1024.0 + 256.0)).sqrt();
        assert!(p.heads[0].w1.iter().all(|w| w.abs() < a));
        assert!(p.heads[0].b1.iter().all(|&b| b == 0.0));
        assert!(p.heads[0].norm2_gain.iter().all(|&g| g == 1.0));
        assert!(init_heads(&[], 4, 4, 0).is_err());
    }

    #[test]
    fn zero_params_give_zero_features() {
        let mut h = TransformHead::zeros(3, 4, 5);
        h.norm1_gain.fill(1.0);
        h.norm2_gain.fill(1.0);
        let t = h.forward(&[0.0; 3]).unwrap();
        assert_eq!(t.f, vec![0.0; 5]);
        assert!(h.forward(&[0.0; 2]).is_err());
    }

    #[test]
    fn forward_matches_naive() {
        for (dim, d, hidden, seed) in [(8, 4, 6, 1), (32, 128, 16, 2), (5, 7, 3, 3)] {
            let p = params(&[dim], d, hidden, seed);
            let z = random_vec(dim, seed + 100);
            let t = p.heads[0].forward(&z).unwrap();
            let naive = naive_head(&p.heads[0], &z);
            for (a, b) in t.f.iter().zip(&naive) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
            assert_eq!(t, p.heads[0].forward(&z).unwrap());
        }
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn predict_matches_naive() {
        let p = params(&[6, 9, 4], 8, 10, 9);
        let zs = [random_vec(6, 1), random_vec(9, 2), random_vec(4, 3)];
        let w = [1.6129, 0.7092, 0.4016];
        let refs: Vec<&[f64]> = zs.iter().map(Vec::as_slice).collect();
        let pred = p.predict(&refs, &w).unwrap();
        let fs: Vec<Vec<f64>> = p.heads.iter().zip(&zs).map(|(h, z)| naive_head(h, z)).collect();
        let mut score = p.b_reg;
        for i in 0..8 {
            let mut hi = 0.0;
            for n in 0..3 {
                hi += w[n] * fs[n][i];
            }
            hi /= w[0] + w[1] + w[2];
            score += p.w_reg[i] * hi;
        }
        assert!((pred.score - score).abs() < 1e-12);
    }

    #[test]
    fn constant_regression_head() {
        let mut p = params(&[3], 4, 5, 1);
        p.w_reg.fill(0.0);
        p.b_reg = 3.7;
        let pred = p.predict(&[&[1.0, -2.0, 0.5]], &[2.0]).unwrap();
        assert_eq!(pred.score, 3.7);
        assert_eq!(pred.h.len(), 4);
    }

    #[test]
    fn single_model_reduces_to_linear_head_on_f() {
        let p = params(&[3], 4, 5, 7);
        let z = [0.3, -1.0, 2.0];
        let pred = p.predict(&[&z], &[2.0]).unwrap();
        let f = &pred.heads[0].f;
        let direct = p.b_reg + p.w_reg.iter().zip(f).map(|(a, b)| a * b).sum::<f64>();
        assert!((pred.score - direct).abs() < 1e-15);
        assert_eq!(&pred.h, f);
    }

    #[test]
    fn aggregate_cases() {
        let v = [0.3, -0.2];
        let h = aggregate(&[&v, &v], &[0.7, 3.1]).unwrap();
        assert!(h.iter().zip(&v).all(|(a, b)| (a - b).abs() < 1e-15));
        let a = [1.0, 0.0];
        let b = [0.0, 1.0];
        let h = aggregate(&[&a, &b], &[1.6129, 0.4016]).unwrap();
        assert!((h[0] - 0.8006).abs() < 1e-4 && (h[1] - 0.1994).abs() < 1e-4);
        let mean = aggregate(&[&a, &b], &[0.5, 0.5]).unwrap();
        assert_eq!(mean, vec![0.5, 0.5]);
        assert!(aggregate(&[], &[]).is_err());
        assert!(aggregate(&[&a], &[0.0]).is_err());
        assert!(aggregate(&[&a], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn aggregation_is_scale_invariant_in_weights() {
        let fs = [random_vec(16, 1), random_vec(16, 2), random_vec(16, 3)];
        let refs: Vec<&[f64]> = fs.iter().map(Vec::as_slice).collect();
        let w = [0.3, 1.7, 0.9];
        let h = aggregate(&refs, &w).unwrap();
        for c in [1e-3, 0.5, 7.0, 1e4] {
            let ws: Vec<f64> = w.iter().map(|x| x * c).collect();
            let hc = aggregate(&refs, &ws).unwrap();
            for (a, b) in h.iter().zip(&hc) {
                assert!((a - b).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn zero_output_gradient_gives_zero_param_gradient() {
        let p = params(&[4, 5], 6, 7, 2);
        let zs = [random_vec(4, 1), random_vec(5, 2)];
        let refs: Vec<&[f64]> = zs.iter().map(Vec::as_slice).collect();
        let pred = p.predict(&refs, &[1.0, 1.0]).unwrap();
        let g = p.backward(&pred, &[1.0, 1.0], &OutputGrads::zeros(2, 6)).unwrap();
        assert!(g.tensors().iter().all(|(_, _, t)| t.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn w_reg_gradient_is_dscore_times_h() {
        let p = params(&[4], 6, 7, 2);
        let z = random_vec(4, 5);
        let pred = p.predict(&[&z], &[1.0]).unwrap();
        let mut og = OutputGrads::zeros(1, 6);
        og.score = -0.37;
        let g = p.backward(&pred, &[1.0], &og).unwrap();
        for (gw, h) in g.w_reg.iter().zip(&pred.h) {
            assert_eq!(*gw, -0.37 * h);
        }
        assert_eq!(g.b_reg, -0.37);
    }

    #[test]
    fn head_backward_matches_finite_differences() {
        // L = Σ c_i f_i with random c
        let p = params(&[5], 4, 6, 11);
        let z = random_vec(5, 12);
        let c = random_vec(4, 13);
        let loss = |p: &HeadParams| -> f64 {
            let t = p.heads[0].forward(&z).unwrap();
            t.f.iter().zip(&c).map(|(a, b)| a * b).sum()
        };
        let t = p.heads[0].forward(&z).unwrap();
        let mut g = p.zeros_like();
        p.heads[0].backward(&t, &c, &mut g.heads[0]);
        let analytic: Vec<f64> = g.tensors().iter().flat_map(|(_, _, t)| t.to_vec()).collect();
        let mut q = p.clone();
        let mut idx = 0;
        let n_tensors = q.tensors().len();
        for ti in 0..n_tensors {
            let len = q.tensors()[ti].2.len();
            for j in 0..len {
                let orig = q.tensors()[ti].2[j];
                q.tensors_mut()[ti].2[j] = orig + 1e-6;
                let up = loss(&q);
                q.tensors_mut()[ti].2[j] = orig - 1e-6;
                let down = loss(&q);
                q.tensors_mut()[ti].2[j] = orig;
                let fd = (up - down) / 2e-6;
                let a = analytic[idx];
                assert!((a - fd).abs() <= 1e-6 * (1.0 + a.abs()), "{} [{j}]: {a} vs {fd}", q.tensors()[ti].0);
                idx += 1;
            }
        }
    }
}
