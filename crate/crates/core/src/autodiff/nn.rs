use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::params::{init_scale, ParamId, ParamSet};
use super::tape::{Tape, Var};
use super::AutodiffError;

/// Lower bound added to every standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Result<Var, AutodiffError> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

/// Affine layer `x W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let weight = params.uniform(format!("{name}.w"), &[fan_in, fan_out], init_scale(fan_in, fan_out), rng);
        let bias = params.zeros(format!("{name}.b"), &[fan_out]);
        Linear { weight, bias, fan_in, fan_out }
    }

    /// `x: [rows, fan_in] -> [rows, fan_out]`
    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var, AutodiffError> {
        let w = tape.param(params, self.weight);
        let b = tape.param(params, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

/// Stack of affine layers, each followed by its activation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<(Linear, Activation)>,
}

impl Mlp {
    /// `dims = [in, hidden..., out]`; hidden layers use `hidden_act`, the last uses `out_act`.
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        dims: &[usize],
        hidden_act: Activation,
        out_act: Activation,
        rng: &mut R,
    ) -> Self {
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { out_act } else { hidden_act };
                (Linear::new(params, &format!("{name}.{i}"), dims[i], dims[i + 1], rng), act)
            })
            .collect();
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].0.fan_in
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].0.fan_out
    }

    pub fn last(&self) -> Linear {
        self.layers[self.layers.len() - 1].0
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var, AutodiffError> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.in_dim() {
            return Err(AutodiffError::shape("mlp", shape, &[0, self.in_dim()]));
        }
        let mut h = x;
        for (layer, act) in &self.layers {
            h = layer.forward(tape, params, h)?;
            h = act.apply(tape, h)?;
        }
        Ok(h)
    }
}

/// Gated recurrent unit with gate order (reset, update, candidate).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GruParams {
    pub input_weight: ParamId,
    pub hidden_weight: ParamId,
    pub input_bias: ParamId,
    pub hidden_bias: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl GruParams {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let h3 = 3 * hidden_dim;
        GruParams {
            input_weight: params.uniform(format!("{name}.wx"), &[input_dim, h3], init_scale(input_dim, hidden_dim), rng),
            hidden_weight: params.uniform(format!("{name}.wh"), &[hidden_dim, h3], init_scale(hidden_dim, hidden_dim), rng),
            input_bias: params.zeros(format!("{name}.bx"), &[h3]),
            hidden_bias: params.zeros(format!("{name}.bh"), &[h3]),
            input_dim,
            hidden_dim,
        }
    }
}

/// One GRU update for a batch of rows: `x: [rows, in]`, `h: [rows, hidden]`.
///
/// ```text
/// r  = sigmoid(x Wr + br + h Ur + cr)
/// u  = sigmoid(x Wu + bu + h Uu + cu)
/// n  = tanh(x Wn + bn + r * (h Un + cn))
/// h' = (1 - u) * n + u * h
/// ```
pub fn gru_cell(tape: &mut Tape, params: &ParamSet, gru: &GruParams, x: Var, h: Var) -> Result<Var, AutodiffError> {
    let (xs, hs) = (tape.shape(x).to_vec(), tape.shape(h).to_vec());
    if xs.len() != 2 || hs.len() != 2 || xs[1] != gru.input_dim || hs[1] != gru.hidden_dim || xs[0] != hs[0] {
        return Err(AutodiffError::shape("gru_cell", &xs, &hs));
    }
    let hd = gru.hidden_dim;
    let wx = tape.param(params, gru.input_weight);
    let wh = tape.param(params, gru.hidden_weight);
    let bx = tape.param(params, gru.input_bias);
    let bh = tape.param(params, gru.hidden_bias);
    let gx = tape.matmul(x, wx)?;
    let gx = tape.add(gx, bx)?;
    let gh = tape.matmul(h, wh)?;
    let gh = tape.add(gh, bh)?;

    let xr = tape.slice(gx, 1, 0, 2 * hd)?;
    let hr = tape.slice(gh, 1, 0, 2 * hd)?;
    let gates = tape.add(xr, hr)?;
    let gates = tape.sigmoid(gates)?;
    let reset = tape.slice(gates, 1, 0, hd)?;
    let update = tape.slice(gates, 1, hd, hd)?;

    let xn = tape.slice(gx, 1, 2 * hd, hd)?;
    let hn = tape.slice(gh, 1, 2 * hd, hd)?;
    let hn = tape.mul(reset, hn)?;
    let cand = tape.add(xn, hn)?;
    let cand = tape.tanh(cand)?;

    // h' = n + u * (h - n)
    let diff = tape.sub(h, cand)?;
    let carried = tape.mul(update, diff)?;
    tape.add(cand, carried)
}

/// Plain diagonal-Gaussian statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl GaussianStats {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self, AutodiffError> {
        if mu.len() != sigma.len() {
            return Err(AutodiffError::StatsLength(mu.len(), sigma.len()));
        }
        Ok(GaussianStats { mu, sigma })
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }
}

/// Gaussian statistics living on a tape; `mu` and `sigma` share a shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GaussianVars {
    pub mu: Var,
    pub sigma: Var,
}

impl GaussianVars {
    /// Splits a `[rows, 2z]` head output into `mu` and `softplus(raw) + floor`.
    pub fn from_head(tape: &mut Tape, raw: Var, z: usize) -> Result<Self, AutodiffError> {
        let mu = tape.slice(raw, 1, 0, z)?;
        let s = tape.slice(raw, 1, z, z)?;
        let s = tape.softplus(s)?;
        let floor = tape.constant(vec![SIGMA_FLOOR], &[1])?;
        let sigma = tape.add(s, floor)?;
        Ok(GaussianVars { mu, sigma })
    }

    pub fn leaf(tape: &mut Tape, stats: &GaussianStats, requires_grad: bool) -> Result<Self, AutodiffError> {
        let n = stats.len();
        let (mu, sigma) = if requires_grad {
            (tape.variable(stats.mu.clone(), &[1, n])?, tape.variable(stats.sigma.clone(), &[1, n])?)
        } else {
            (tape.constant(stats.mu.clone(), &[1, n])?, tape.constant(stats.sigma.clone(), &[1, n])?)
        };
        Ok(GaussianVars { mu, sigma })
    }

    /// Reads row `row` back as plain statistics.
    pub fn row(&self, tape: &Tape, row: usize) -> GaussianStats {
        let z = *tape.shape(self.mu).last().expect("non-empty");
        GaussianStats {
            mu: tape.value(self.mu)[row * z..(row + 1) * z].to_vec(),
            sigma: tape.value(self.sigma)[row * z..(row + 1) * z].to_vec(),
        }
    }
}

/// `z = mu + sigma * eps`, `eps ~ N(0, I)`; eps is a constant on the tape.
pub fn reparameterize<R: Rng + ?Sized>(tape: &mut Tape, stats: GaussianVars, rng: &mut R) -> Result<Var, AutodiffError> {
    let shape = tape.shape(stats.mu).to_vec();
    if tape.shape(stats.sigma) != shape.as_slice() {
        return Err(AutodiffError::shape("reparameterize", &shape, tape.shape(stats.sigma)));
    }
    let n: usize = shape.iter().product();
    let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let eps = tape.constant(eps, &shape)?;
    let noise = tape.mul(stats.sigma, eps)?;
    tape.add(stats.mu, noise)
}

/// `KL(q || p)` for diagonal Gaussians, summed over every element.
pub fn gaussian_kl(tape: &mut Tape, q: GaussianVars, p: GaussianVars) -> Result<Var, AutodiffError> {
    let (qs, ps) = (tape.shape(q.mu).to_vec(), tape.shape(p.mu).to_vec());
    if qs != ps || tape.shape(q.sigma) != qs.as_slice() || tape.shape(p.sigma) != ps.as_slice() {
        return Err(AutodiffError::shape("gaussian_kl", &qs, &ps));
    }
    let ln_sp = tape.ln(p.sigma)?;
    let ln_sq = tape.ln(q.sigma)?;
    let log_ratio = tape.sub(ln_sp, ln_sq)?;
    let vq = tape.mul(q.sigma, q.sigma)?;
    let d = tape.sub(q.mu, p.mu)?;
    let d2 = tape.mul(d, d)?;
    let num = tape.add(vq, d2)?;
    let vp = tape.mul(p.sigma, p.sigma)?;
    let quad = tape.div(num, vp)?;
    let quad = tape.scale(quad, 0.5)?;
    let half = tape.constant(vec![0.5], &[1])?;
    let quad = tape.sub(quad, half)?;
    let terms = tape.add(log_ratio, quad)?;
    tape.sum(terms)
}

/// Plain-value twin of [`gaussian_kl`].
pub fn gaussian_kl_values(q: &GaussianStats, p: &GaussianStats) -> Result<f64, AutodiffError> {
    if q.len() != p.len() {
        return Err(AutodiffError::StatsLength(q.len(), p.len()));
    }
    Ok((0..q.len())
        .map(|i| {
            let d = q.mu[i] - p.mu[i];
            libm::log(p.sigma[i]) - libm::log(q.sigma[i])
                + 0.5 * ((q.sigma[i] * q.sigma[i] + d * d) / (p.sigma[i] * p.sigma[i]))
                - 0.5
        })
        .sum())
}

/// Miniature residual backbone: two 3x3 convolutions (8 then 16 channels)
/// with a channel-padded identity shortcut around the second, then 2x2 max pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvEncoderParams {
    pub conv1: ParamId,
    pub bias1: ParamId,
    pub conv2: ParamId,
    pub bias2: ParamId,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

pub const CONV1_CHANNELS: usize = 8;
pub const CONV2_CHANNELS: usize = 16;

impl ConvEncoderParams {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, channels: usize, height: usize, width: usize, rng: &mut R) -> Self {
        let (c1, c2) = (CONV1_CHANNELS, CONV2_CHANNELS);
        ConvEncoderParams {
            conv1: params.uniform(format!("{name}.conv1"), &[c1, channels, 3, 3], init_scale(channels * 9, c1 * 9), rng),
            bias1: params.zeros(format!("{name}.conv1.b"), &[c1]),
            conv2: params.uniform(format!("{name}.conv2"), &[c2, c1, 3, 3], init_scale(c1 * 9, c2 * 9), rng),
            bias2: params.zeros(format!("{name}.conv2.b"), &[c2]),
            channels,
            height,
            width,
        }
    }

    pub const OUT_CHANNELS: usize = CONV2_CHANNELS;
}

/// Output of [`conv_encoder`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncodedGrid {
    /// `[16, h/2, w/2]` pooled feature map.
    pub map: Var,
    /// `[16]` global max over the pooled map.
    pub pooled: Var,
}

pub fn conv_encoder(tape: &mut Tape, params: &ParamSet, enc: &ConvEncoderParams, grid: Var) -> Result<EncodedGrid, AutodiffError> {
    let shape = tape.shape(grid).to_vec();
    if shape != [enc.channels, enc.height, enc.width] {
        return Err(AutodiffError::shape("conv_encoder", &shape, &[enc.channels, enc.height, enc.width]));
    }
    let (h, w) = (enc.height, enc.width);
    let k1 = tape.param(params, enc.conv1);
    let b1 = tape.param(params, enc.bias1);
    let k2 = tape.param(params, enc.conv2);
    let b2 = tape.param(params, enc.bias2);
    let a1 = tape.conv2d(grid, k1, Some(b1))?;
    let a1 = tape.relu(a1)?;
    let a2 = tape.conv2d(a1, k2, Some(b2))?;
    let pad = tape.zeros(&[CONV2_CHANNELS - CONV1_CHANNELS, h, w]);
    let shortcut = tape.concat(&[a1, pad], 0)?;
    let a2 = tape.add(a2, shortcut)?;
    let a2 = tape.relu(a2)?;
    let map = tape.max_pool2d(a2)?;
    let flat = tape.reshape(map, &[CONV2_CHANNELS, (h / 2) * (w / 2)])?;
    let pooled = tape.max_axis(flat, 1)?;
    Ok(EncodedGrid { map, pooled })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gru_fixture(bias_fill: Option<(f64, usize, usize)>) -> (ParamSet, GruParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = ParamSet::new();
        let gru = GruParams::new(&mut params, "gru", 3, 4, &mut rng);
        params.fill(0.0);
        if let Some((v, lo, hi)) = bias_fill {
            params.get_mut(gru.input_bias).values[lo..hi].fill(v);
        }
        (params, gru)
    }

    #[test]
    fn gru_with_zero_params_halves_the_state() {
        let (params, gru) = gru_fixture(None);
        let mut t = Tape::new();
        let x = t.constant(vec![0.3, -0.2, 0.9], &[1, 3]).unwrap();
        let h = t.constant(vec![1.0, -2.0, 0.5, 0.25], &[1, 4]).unwrap();
        let y = gru_cell(&mut t, &params, &gru, x, h).unwrap();
        assert_eq!(t.value(y), &[0.5, -1.0, 0.25, 0.125]);
    }

    #[test]
    fn gru_saturated_update_gate_carries_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = ParamSet::new();
        let gru = GruParams::new(&mut params, "gru", 3, 4, &mut rng);
        params.get_mut(gru.input_bias).values[4..8].fill(30.0);
        let mut t = Tape::new();
        let x = t.constant(vec![0.3, -0.2, 0.9], &[1, 3]).unwrap();
        let hv = [1.0, -2.0, 0.5, 0.25];
        let h = t.constant(hv.to_vec(), &[1, 4]).unwrap();
        let y = gru_cell(&mut t, &params, &gru, x, h).unwrap();
        for (a, b) in t.value(y).iter().zip(hv) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn gru_rejects_mismatched_dims() {
        let (params, gru) = gru_fixture(Some((0.0, 0, 1)));
        let mut t = Tape::new();
        let x = t.constant(vec![0.0; 2], &[1, 2]).unwrap();
        let h = t.constant(vec![0.0; 4], &[1, 4]).unwrap();
        assert!(matches!(gru_cell(&mut t, &params, &gru, x, h), Err(AutodiffError::ShapeMismatch { op: "gru_cell", .. })));
    }

    #[test]
    fn reparameterize_examples() {
        let stats = GaussianStats::new(vec![3.0], vec![SIGMA_FLOOR]).unwrap();
        for seed in 0..10 {
            let mut t = Tape::new();
            let g = GaussianVars::leaf(&mut t, &stats, false).unwrap();
            let z = reparameterize(&mut t, g, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert!((t.value(z)[0] - 3.0).abs() < 1e-3);
        }
        let draw = |seed| {
            let mut t = Tape::new();
            let g = GaussianVars::leaf(&mut t, &GaussianStats::new(vec![0.0, 1.0], vec![1.0, 2.0]).unwrap(), false).unwrap();
            let z = reparameterize(&mut t, g, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            t.value(z).to_vec()
        };
        assert_eq!(draw(9), draw(9));
        assert_ne!(draw(9), draw(10));
    }

    #[test]
    fn reparameterize_mean_matches_mu() {
        let (mu, sigma) = (1.5, 0.7);
        let n = 100_000;
        let mut t = Tape::new();
        let g = GaussianVars {
            mu: t.constant(vec![mu; n], &[1, n]).unwrap(),
            sigma: t.constant(vec![sigma; n], &[1, n]).unwrap(),
        };
        let z = reparameterize(&mut t, g, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
        let mean = t.value(z).iter().sum::<f64>() / n as f64;
        assert!((mean - mu).abs() < 0.01 * sigma, "mean {mean}");
    }

    #[test]
    fn reparameterize_gradients_reach_mu_and_sigma_only() {
        let mut t = Tape::new();
        let g = GaussianVars::leaf(&mut t, &GaussianStats::new(vec![0.2, -0.4], vec![0.5, 1.5]).unwrap(), true).unwrap();
        let z = reparameterize(&mut t, g, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let eps: Vec<f64> = t.value(z).iter().zip([0.2, -0.4]).zip([0.5, 1.5]).map(|((z, m), s)| (z - m) / s).collect();
        let loss = t.sum(z).unwrap();
        let grads = t.backward(loss).unwrap();
        assert_eq!(grads.get(g.mu).unwrap(), &[1.0, 1.0]);
        for (gs, e) in grads.get(g.sigma).unwrap().iter().zip(eps) {
            assert!((gs - e).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_identities() {
        let q = GaussianStats::new(vec![0.3, -1.2, 4.0], vec![0.2, 1.7, 3.1]).unwrap();
        let mut t = Tape::new();
        let a = GaussianVars::leaf(&mut t, &q, false).unwrap();
        let b = GaussianVars::leaf(&mut t, &q, false).unwrap();
        let kl = gaussian_kl(&mut t, a, b).unwrap();
        assert_eq!(t.scalar(kl), 0.0);

        let q = GaussianStats::new(vec![1.0], vec![1.0]).unwrap();
        let p = GaussianStats::new(vec![0.0], vec![1.0]).unwrap();
        let mut t = Tape::new();
        let a = GaussianVars::leaf(&mut t, &q, false).unwrap();
        let b = GaussianVars::leaf(&mut t, &p, false).unwrap();
        let kl = gaussian_kl(&mut t, a, b).unwrap();
        assert!((t.scalar(kl) - 0.5).abs() < 1e-12);
        assert!((gaussian_kl_values(&q, &p).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_length_mismatch() {
        let q = GaussianStats::new(vec![1.0], vec![1.0]).unwrap();
        let p = GaussianStats::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(gaussian_kl_values(&q, &p), Err(AutodiffError::StatsLength(1, 2)));
        assert!(GaussianStats::new(vec![0.0], vec![]).is_err());
        let mut t = Tape::new();
        let a = GaussianVars::leaf(&mut t, &q, false).unwrap();
        let b = GaussianVars::leaf(&mut t, &p, false).unwrap();
        assert!(gaussian_kl(&mut t, a, b).is_err());
    }

    #[test]
    fn conv_encoder_zero_grid_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = ParamSet::new();
        let enc = ConvEncoderParams::new(&mut params, "enc", 3, 8, 12, &mut rng);
        let mut t = Tape::new();
        let g = t.zeros(&[3, 8, 12]);
        let e = conv_encoder(&mut t, &params, &enc, g).unwrap();
        assert!(t.value(e.pooled).iter().all(|&v| v == 0.0));
        assert_eq!(t.shape(e.map), &[16, 4, 6]);

        let grid: Vec<f64> = (0..3 * 8 * 12).map(|i| ((i * 37) % 11) as f64 / 11.0).collect();
        let g1 = t.constant(grid.clone(), &[3, 8, 12]).unwrap();
        let g2 = t.constant(grid, &[3, 8, 12]).unwrap();
        let e1 = conv_encoder(&mut t, &params, &enc, g1).unwrap();
        let e2 = conv_encoder(&mut t, &params, &enc, g2).unwrap();
        assert_eq!(t.value(e1.pooled), t.value(e2.pooled));
        assert_eq!(t.value(e1.map), t.value(e2.map));

        let wrong = t.zeros(&[3, 8, 8]);
        assert!(conv_encoder(&mut t, &params, &enc, wrong).is_err());
    }
}
