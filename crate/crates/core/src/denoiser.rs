//! Time-conditioned 1-D U-Net over trajectory windows.
//!
//! Input and output are channels-last `[batch, window_len, channels]`, where a
//! `[window_len, bodies, 4]` trajectory window is flattened to
//! `bodies * 4` channels and convolutions run along time.
//!
//! Per level the encoder applies `blocks_per_level` residual blocks, keeps a
//! skip tensor and halves the length with a stride-2 convolution. The middle
//! section is residual block, gated channel mixing, residual block. The decoder
//! upsamples (nearest neighbour then a 3-tap convolution), concatenates the
//! skip and applies its residual blocks. The output convolution is
//! zero-initialized.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub window_len: usize,
    /// Data channels, `bodies * 4`.
    pub channels: usize,
    /// Conditioning channels appended to the input only.
    pub extra_in_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub channel_factors: Vec<usize>,
    pub blocks_per_level: usize,
    /// Width of the diffusion-step embedding; 0 disables step conditioning.
    pub step_embed_dim: usize,
    pub groups: usize,
    pub gated_mixing: bool,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            window_len: 24,
            channels: 8,
            extra_in_channels: 0,
            base_width: 32,
            depth: 3,
            channel_factors: vec![1, 2, 4],
            blocks_per_level: 2,
            step_embed_dim: 32,
            groups: 8,
            gated_mixing: true,
            seed: 0,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.window_len == 0 || self.channels == 0 || self.base_width == 0 {
            return bad("window_len, channels and base_width must be positive".into());
        }
        if self.channel_factors.len() != self.depth {
            return bad(format!(
                "channel_factors has {} entries, depth is {}",
                self.channel_factors.len(),
                self.depth
            ));
        }
        if self.window_len % (1 << self.depth) != 0 {
            return bad(format!(
                "window_len {} not divisible by 2^depth = {}",
                self.window_len,
                1 << self.depth
            ));
        }
        for w in self.widths() {
            if w % self.groups_for(w) != 0 {
                return bad(format!("width {w} not divisible by its group count"));
            }
        }
        Ok(())
    }

    /// Channel width of each level.
    pub fn widths(&self) -> Vec<usize> {
        self.channel_factors.iter().map(|f| f * self.base_width).collect()
    }

    fn groups_for(&self, width: usize) -> usize {
        let mut g = self.groups.clamp(1, width);
        while width % g != 0 {
            g -= 1;
        }
        g
    }

    /// Parameter count derived layer by layer from the config alone:
    ///
    /// * conv `k, cin -> cout`: `k * cin * cout + cout`
    /// * group norm over `c`: `2c`
    /// * linear `i -> o`: `i * o + o`
    /// * residual block `cin -> cout`: norm(cin) + conv3(cin, cout)
    ///   + [linear(E, cout)] + norm(cout) + conv3(cout, cout) + [conv1(cin, cout) if cin != cout]
    /// * gate over `c`: norm(c) + 2 conv1(c, c)
    pub fn expected_param_count(&self) -> usize {
        let conv = |k: usize, i: usize, o: usize| k * i * o + o;
        let norm = |c: usize| 2 * c;
        let lin = |i: usize, o: usize| i * o + o;
        let e = self.step_embed_dim;
        let res = |i: usize, o: usize| {
            norm(i)
                + conv(3, i, o)
                + if e > 0 { lin(e, o) } else { 0 }
                + norm(o)
                + conv(3, o, o)
                + if i != o { conv(1, i, o) } else { 0 }
        };
        let widths = self.widths();
        let mut n = 0;
        if e > 0 {
            n += lin(e, e) + lin(e, e);
        }
        n += conv(3, self.channels + self.extra_in_channels, widths[0]);
        let mut cur = widths[0];
        for &w in &widths {
            for _ in 0..self.blocks_per_level {
                n += res(cur, w);
                cur = w;
            }
            n += conv(3, w, w);
        }
        n += res(cur, cur);
        if self.gated_mixing {
            n += norm(cur) + 2 * conv(1, cur, cur);
        }
        n += res(cur, cur);
        for &w in widths.iter().rev() {
            n += conv(3, cur, w);
            cur = 2 * w;
            for _ in 0..self.blocks_per_level {
                n += res(cur, w);
                cur = w;
            }
        }
        n += norm(cur) + conv(3, cur, self.channels);
        n
    }
}

#[derive(Clone, Debug)]
struct Conv {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: usize,
    beta: usize,
    groups: usize,
}

#[derive(Clone, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    emb: Option<Linear>,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

#[derive(Clone, Debug)]
struct Gate {
    norm: Norm,
    value: Conv,
    gate: Conv,
}

#[derive(Clone, Debug)]
struct Level {
    blocks: Vec<ResBlock>,
    resample: Conv,
}

#[derive(Clone, Debug)]
struct Layout {
    embed: Option<(Linear, Linear)>,
    stem: Conv,
    down: Vec<Level>,
    mid1: ResBlock,
    gate: Option<Gate>,
    mid2: ResBlock,
    up: Vec<Level>,
    out_norm: Norm,
    out_conv: Conv,
}

struct Builder<'a, T: Real> {
    params: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
    config: &'a DenoiserConfig,
}

impl<T: Real> Builder<'_, T> {
    fn conv(&mut self, name: &str, k: usize, cin: usize, cout: usize, stride: usize) -> Conv {
        let w = self
            .params
            .add_uniform(format!("{name}.w"), &[k, cin, cout], k * cin, &mut self.rng);
        let b = self.params.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Conv {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        let gamma = self.params.add(format!("{name}.gamma"), Tensor::full(&[c], T::one()));
        let beta = self.params.add(format!("{name}.beta"), Tensor::zeros(&[c]));
        Norm {
            gamma,
            beta,
            groups: self.config.groups_for(c),
        }
    }

    fn linear(&mut self, name: &str, i: usize, o: usize) -> Linear {
        let w = self.params.add_uniform(format!("{name}.w"), &[i, o], i, &mut self.rng);
        let b = self.params.add(format!("{name}.b"), Tensor::zeros(&[o]));
        Linear { w, b }
    }

    fn res(&mut self, name: &str, cin: usize, cout: usize) -> ResBlock {
        let e = self.config.step_embed_dim;
        ResBlock {
            norm1: self.norm(&format!("{name}.norm1"), cin),
            conv1: self.conv(&format!("{name}.conv1"), 3, cin, cout, 1),
            emb: (e > 0).then(|| self.linear(&format!("{name}.emb"), e, cout)),
            norm2: self.norm(&format!("{name}.norm2"), cout),
            conv2: self.conv(&format!("{name}.conv2"), 3, cout, cout, 1),
            skip: (cin != cout).then(|| self.conv(&format!("{name}.skip"), 1, cin, cout, 1)),
        }
    }
}

/// The U-Net: configuration, parameter store and layer layout.
#[derive(Clone, Debug)]
pub struct UNet<T> {
    config: DenoiserConfig,
    params: ParamStore<T>,
    layout: Layout,
}

impl<T: Real> UNet<T> {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layout = {
            let mut b = Builder {
                params: &mut params,
                rng: ChaCha8Rng::seed_from_u64(config.seed),
                config: &config,
            };
            let e = config.step_embed_dim;
            let embed = (e > 0).then(|| (b.linear("embed.0", e, e), b.linear("embed.1", e, e)));
            let widths = config.widths();
            let stem = b.conv("stem", 3, config.channels + config.extra_in_channels, widths[0], 1);
            let mut cur = widths[0];
            let mut down = Vec::new();
            for (i, &w) in widths.iter().enumerate() {
                let mut blocks = Vec::new();
                for j in 0..config.blocks_per_level {
                    blocks.push(b.res(&format!("down{i}.res{j}"), cur, w));
                    cur = w;
                }
                let resample = b.conv(&format!("down{i}.resample"), 3, w, w, 2);
                down.push(Level { blocks, resample });
            }
            let mid1 = b.res("mid.res0", cur, cur);
            let gate = config.gated_mixing.then(|| Gate {
                norm: b.norm("mid.gate.norm", cur),
                value: b.conv("mid.gate.value", 1, cur, cur, 1),
                gate: b.conv("mid.gate.gate", 1, cur, cur, 1),
            });
            let mid2 = b.res("mid.res1", cur, cur);
            let mut up = Vec::new();
            for (i, &w) in widths.iter().enumerate().rev() {
                let resample = b.conv(&format!("up{i}.resample"), 3, cur, w, 1);
                cur = 2 * w;
                let mut blocks = Vec::new();
                for j in 0..config.blocks_per_level {
                    blocks.push(b.res(&format!("up{i}.res{j}"), cur, w));
                    cur = w;
                }
                up.push(Level { blocks, resample });
            }
            let out_norm = b.norm("out.norm", cur);
            let out_conv = b.conv("out.conv", 3, cur, config.channels, 1);
            Layout {
                embed,
                stem,
                down,
                mid1,
                gate,
                mid2,
                up,
                out_norm,
                out_conv,
            }
        };
        // zero-init output layer
        params.get_mut(layout.out_conv.w).data_mut().fill(T::zero());
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// Rebuilds the layout for `config` and takes `params` as weights.
    pub fn from_params(config: DenoiserConfig, params: ParamStore<T>) -> Result<Self> {
        let mut net = Self::new(config)?;
        net.params.load_from(&params)?;
        Ok(net)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> UNet<U> {
        UNet {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Slot of the output convolution weight (zero at initialization).
    pub fn output_weight_slot(&self) -> usize {
        self.layout.out_conv.w
    }

    /// Sinusoidal embedding of the diffusion time `frac = s / S`, evaluated
    /// at `1000 * frac` so that integer steps of a 1000-step schedule map to
    /// the usual integer positions.
    pub fn step_features(&self, fracs: &[f64]) -> Tensor<T> {
        let d = self.config.step_embed_dim;
        let half = d / 2;
        Tensor::from_fn(&[fracs.len(), d], |i| {
            let (b, j) = (i / d, i % d);
            let pos = 1000.0 * fracs[b];
            let k = j % half.max(1);
            let freq = (-(10000f64.ln()) * k as f64 / half.max(1) as f64).exp();
            let v = if j < half { (pos * freq).sin() } else { (pos * freq).cos() };
            T::from_f64_lossy(v)
        })
    }

    /// Builds the forward pass into `g`. `p` are this network's parameters
    /// bound into the same graph; `x` is `[batch, window_len, channels + extra]`.
    pub fn forward(&self, g: &mut Graph<T>, p: &[Var], x: Var, fracs: &[f64]) -> Result<Var> {
        let c = &self.config;
        let sx = g.shape(x).to_vec();
        if sx.len() != 3 || sx[1] != c.window_len || sx[2] != c.channels + c.extra_in_channels {
            return Err(Error::Shape {
                op: "denoiser input",
                left: sx,
                right: vec![0, c.window_len, c.channels + c.extra_in_channels],
            });
        }
        let l = &self.layout;
        let emb = match &l.embed {
            Some((e0, e1)) => {
                if fracs.len() != sx[0] {
                    return Err(Error::Shape {
                        op: "denoiser steps",
                        left: vec![fracs.len()],
                        right: vec![sx[0]],
                    });
                }
                let feats = g.constant(self.step_features(fracs));
                let h = g.linear(feats, p[e0.w], p[e0.b])?;
                let h = g.silu(h)?;
                let h = g.linear(h, p[e1.w], p[e1.b])?;
                Some(g.silu(h)?)
            }
            None => None,
        };

        let mut h = conv(g, p, &l.stem, x)?;
        let mut skips = Vec::with_capacity(l.down.len());
        for level in &l.down {
            for blk in &level.blocks {
                h = res_block(g, p, blk, h, emb)?;
            }
            skips.push(h);
            h = conv(g, p, &level.resample, h)?;
        }
        h = res_block(g, p, &l.mid1, h, emb)?;
        if let Some(gate) = &l.gate {
            let n = norm(g, p, &gate.norm, h)?;
            let v = conv(g, p, &gate.value, n)?;
            let s = conv(g, p, &gate.gate, n)?;
            let s = g.sigmoid(s)?;
            let m = g.mul(v, s)?;
            h = g.add(h, m)?;
        }
        h = res_block(g, p, &l.mid2, h, emb)?;
        for level in &l.up {
            let u = g.upsample2(h)?;
            h = conv(g, p, &level.resample, u)?;
            let skip = skips.pop().expect("one skip per level");
            h = g.concat(&[h, skip], 2)?;
            for blk in &level.blocks {
                h = res_block(g, p, blk, h, emb)?;
            }
        }
        let h = norm(g, p, &l.out_norm, h)?;
        let h = g.silu(h)?;
        conv(g, p, &l.out_conv, h)
    }

    /// Inference-only forward pass.
    pub fn predict(&self, x: &Tensor<T>, fracs: &[f64]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &p, xv, fracs)?;
        Ok(g.value(out).clone())
    }
}

fn conv<T: Real>(g: &mut Graph<T>, p: &[Var], c: &Conv, x: Var) -> Result<Var> {
    g.conv1d(x, p[c.w], Some(p[c.b]), c.stride, c.pad)
}

fn norm<T: Real>(g: &mut Graph<T>, p: &[Var], n: &Norm, x: Var) -> Result<Var> {
    g.group_norm(x, p[n.gamma], p[n.beta], n.groups)
}

fn res_block<T: Real>(
    g: &mut Graph<T>,
    p: &[Var],
    blk: &ResBlock,
    x: Var,
    emb: Option<Var>,
) -> Result<Var> {
    let h = norm(g, p, &blk.norm1, x)?;
    let h = g.silu(h)?;
    let mut h = conv(g, p, &blk.conv1, h)?;
    if let (Some(lin), Some(e)) = (&blk.emb, emb) {
        let proj = g.linear(e, p[lin.w], p[lin.b])?;
        h = g.add_per_batch(h, proj)?;
    }
    let h = norm(g, p, &blk.norm2, h)?;
    let h = g.silu(h)?;
    let h = conv(g, p, &blk.conv2, h)?;
    let skip = match &blk.skip {
        Some(s) => conv(g, p, s, x)?,
        None => x,
    };
    g.add(h, skip)
}

/// Energy-gradient estimate `eps_hat / sqrt(1 - alpha_bar(s))`; the score
/// `grad log p` is its negation.
pub fn score_from_eps(eps_hat: &[f64], schedule: &DiffusionSchedule, s: usize) -> Result<Vec<f64>> {
    if s == 0 || s > schedule.steps() {
        return Err(Error::Config(format!(
            "score undefined at step {s} (valid: 1..={})",
            schedule.steps()
        )));
    }
    let denom = (1.0 - schedule.alpha_bar(s)).sqrt();
    Ok(eps_hat.iter().map(|e| e / denom).collect())
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::diffusion::cosine_schedule;

    fn small() -> DenoiserConfig {
        DenoiserConfig {
            base_width: 8,
            channel_factors: vec![1, 2, 2],
            blocks_per_level: 1,
            step_embed_dim: 8,
            groups: 4,
            ..DenoiserConfig::default()
        }
    }

    #[test]
    fn output_shape_matches_input_at_table_size() {
        let net = UNet::<f32>::new(DenoiserConfig::default()).unwrap();
        let x = Tensor::zeros(&[32, 24, 8]);
        let y = net.predict(&x, &vec![0.5; 32]).unwrap();
        assert_eq!(y.shape(), &[32, 24, 8]);
    }

    #[test]
    fn zero_init_output_predicts_zero() {
        let net = UNet::<f32>::new(small()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::from_fn(&[3, 24, 8], |_| rng.random_range(-1.0..1.0));
        let y = net.predict(&x, &[0.1, 0.5, 0.9]).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn param_count_matches_formula() {
        for cfg in [DenoiserConfig::default(), small(), DenoiserConfig {
            gated_mixing: false,
            step_embed_dim: 0,
            extra_in_channels: 1,
            ..small()
        }] {
            let net = UNet::<f32>::new(cfg.clone()).unwrap();
            assert_eq!(net.params().count(), cfg.expected_param_count());
            // stable across constructions
            assert_eq!(UNet::<f32>::new(cfg).unwrap().params().names(), net.params().names());
        }
    }

    #[test]
    fn rejects_bad_config_and_input() {
        let bad = DenoiserConfig { window_len: 20, ..DenoiserConfig::default() };
        assert!(UNet::<f32>::new(bad).is_err());
        let bad = DenoiserConfig { channel_factors: vec![1, 2], ..DenoiserConfig::default() };
        assert!(UNet::<f32>::new(bad).is_err());
        let net = UNet::<f32>::new(small()).unwrap();
        assert!(net.predict(&Tensor::zeros(&[1, 24, 6]), &[0.5]).is_err());
        assert!(net.predict(&Tensor::zeros(&[2, 24, 8]), &[0.5]).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let mut net = UNet::<f32>::new(small()).unwrap();
        let slot = net.output_weight_slot();
        net.params_mut().get_mut(slot).data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = (i as f32 * 0.37).sin() * 0.1);
        let x = Tensor::from_fn(&[2, 24, 8], |i| (i as f32 * 0.01).cos());
        assert_eq!(net.predict(&x, &[0.2, 0.7]).unwrap(), net.predict(&x, &[0.2, 0.7]).unwrap());
    }

    #[test]
    fn input_jacobian_matches_finite_differences() {
        let mut net = UNet::<f64>::new(small()).unwrap();
        let slot = net.output_weight_slot();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for v in net.params_mut().get_mut(slot).data_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
        let x = Tensor::from_fn(&[2, 24, 8], |_| rng.random_range(-1.0..1.0));
        let fr = [0.3, 0.8];
        let sum_out = |x: &Tensor<f64>| net.predict(x, &fr).unwrap().data().iter().sum::<f64>();

        let mut g = Graph::new();
        let p = net.params().bind(&mut g, false);
        let xv = g.leaf(x.clone(), true);
        let y = net.forward(&mut g, &p, xv, &fr).unwrap();
        let l = g.sum(y).unwrap();
        let grads = g.backward(l).unwrap();
        let analytic = grads.get(xv).unwrap();

        let h = 1e-4;
        let mut num = Vec::with_capacity(x.numel());
        for i in 0..x.numel() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            num.push((sum_out(&xp) - sum_out(&xm)) / (2.0 * h));
        }
        let diff: f64 = analytic.data().iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = num.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(diff / scale < 1e-3, "relative error {}", diff / scale);
    }

    #[test]
    fn score_of_zero_eps_is_zero_and_step_zero_errors() {
        let sch = cosine_schedule(100).unwrap();
        assert_eq!(score_from_eps(&[0.0; 4], &sch, 50).unwrap(), vec![0.0; 4]);
        assert!(score_from_eps(&[0.0], &sch, 0).is_err());
    }

    /// For zero-mean Gaussian data of variance v the optimal noise predictor
    /// is linear in z_s. Fit it by Monte-Carlo regression of eps on z_s and
    /// compare the implied score with the closed form -z / (abar v + 1 - abar).
    #[test]
    fn gaussian_score_matches_closed_form() {
        let sch = cosine_schedule(1000).unwrap();
        let v = 0.3f64;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for s in [50, 300, 700] {
            let ab = sch.alpha_bar(s);
            let (mut szz, mut sze) = (0.0, 0.0);
            for _ in 0..200_000 {
                let x0: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal) * v.sqrt();
                let e: f64 = rng.sample(rand_distr::StandardNormal);
                let z = ab.sqrt() * x0 + (1.0 - ab).sqrt() * e;
                szz += z * z;
                sze += z * e;
            }
            let coef = sze / szz;
            let z = 0.7;
            let score = -score_from_eps(&[coef * z], &sch, s).unwrap()[0];
            let analytic = -z / (ab * v + 1.0 - ab);
            assert!(((score - analytic) / analytic).abs() < 0.05, "s={s}: {score} vs {analytic}");
        }
    }

    #[test]
    fn near_zero_step_scaling_is_negligible() {
        let sch = cosine_schedule(1000).unwrap();
        let scale = sch.alpha_bar(1).sqrt();
        assert!((scale - 1.0).abs() < 1e-3);
        let mut net = UNet::<f64>::new(small()).unwrap();
        let slot = net.output_weight_slot();
        for (i, v) in net.params_mut().get_mut(slot).data_mut().iter_mut().enumerate() {
            *v = ((i * 13 % 7) as f64 - 3.0) * 0.05;
        }
        let x = Tensor::from_fn(&[1, 24, 8], |i| ((i * 7 % 11) as f64 - 5.0) * 0.1);
        let a = net.predict(&x, &[0.001]).unwrap();
        let b = net.predict(&x.map(|v| v * scale), &[0.001]).unwrap();
        let diff = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        let mag = a.data().iter().map(|p| p.abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-2 * mag.max(1e-9), "{diff} vs {mag}");
    }
}
