//! Reconstruction sub-network: a convolutional encoder onto a diagonal
//! Gaussian latent, reparameterized sampling, and a generator that renders
//! the 3-channel semantic-depth mask estimate.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    layer_names, push_conv, push_conv_mut, push_linear, push_linear_mut, Conv, ConvVars, Linear, LinearVars,
    Parameterized, VarCursor,
};
use crate::tensor::{Tape, Tensor, Var};

pub const LOG_VAR_LIMIT: f64 = 20.0;
pub const INITIAL_LOG_VAR: f64 = -4.0;
/// Generator output is always RGB, whatever the number of categories.
pub const OUTPUT_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerativeConfig {
    pub resolution: usize,
    pub latent: usize,
    pub sigma: f64,
    pub encoder_channels: [usize; 3],
    pub generator_channels: [usize; 3],
}

impl Default for GenerativeConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            latent: 16,
            sigma: 0.1,
            encoder_channels: [8, 16, 32],
            generator_channels: [32, 16, 16],
        }
    }
}

impl GenerativeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || !self.resolution.is_multiple_of(8) {
            return Err(Error::invalid(format!(
                "resolution {} must be a positive multiple of 8",
                self.resolution
            )));
        }
        if self.latent == 0 {
            return Err(Error::invalid("latent dimension must be positive"));
        }
        if self.sigma.is_nan() || self.sigma <= 0.0 {
            return Err(Error::invalid(format!("sigma {} must be positive", self.sigma)));
        }
        if self.encoder_channels.contains(&0) || self.generator_channels.contains(&0) {
            return Err(Error::invalid("channel counts must be positive"));
        }
        Ok(())
    }

    fn bottleneck(&self) -> usize {
        self.resolution / 8
    }
}

/// Diagonal Gaussian `N(mu, diag(exp(log_var)))` for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGaussian {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

/// Batched latent on a tape: `mu`, `log_var` are `[n, k]`.
#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    pub mu: Var,
    pub log_var: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerativeModel {
    pub config: GenerativeConfig,
    encoder: [Conv; 3],
    mu_head: Linear,
    log_var_head: Linear,
    project: Linear,
    decoder: [Conv; 3],
}

#[derive(Clone, Debug)]
pub struct GenerativeVars {
    encoder: [ConvVars; 3],
    mu_head: LinearVars,
    log_var_head: LinearVars,
    project: LinearVars,
    decoder: [ConvVars; 3],
}

impl GenerativeModel {
    pub fn new<R: Rng + ?Sized>(config: GenerativeConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let [e1, e2, e3] = config.encoder_channels;
        let [g1, g2, g3] = config.generator_channels;
        let b = config.bottleneck();
        let flat = e3 * b * b;
        let encoder = [
            Conv::new(rng, 3, e1, 3),
            Conv::new(rng, e1, e2, 3),
            Conv::new(rng, e2, e3, 3),
        ];
        // A narrow initial posterior keeps the latent informative early on.
        let mu_head = Linear::new(rng, flat, config.latent);
        let mut log_var_head = Linear::new(rng, flat, config.latent).scaled(0.1);
        log_var_head.bias.data_mut().fill(INITIAL_LOG_VAR);
        let project = Linear::new(rng, config.latent, g1 * b * b);
        let decoder = [
            Conv::new(rng, g1, g2, 3),
            Conv::new(rng, g2, g3, 3),
            Conv::new(rng, g3, OUTPUT_CHANNELS, 3),
        ];
        Ok(Self {
            config,
            encoder,
            mu_head,
            log_var_head,
            project,
            decoder,
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<GenerativeVars> {
        let vars = self.bind_params(tape);
        self.bind_with(&vars)
    }

    pub fn bind_with(&self, vars: &[Var]) -> Result<GenerativeVars> {
        let mut c = VarCursor::new(vars);
        let encoder = [c.conv(1)?, c.conv(1)?, c.conv(1)?];
        let mu_head = c.linear()?;
        let log_var_head = c.linear()?;
        let project = c.linear()?;
        let decoder = [c.conv(1)?, c.conv(1)?, c.conv(1)?];
        c.finish()?;
        Ok(GenerativeVars {
            encoder,
            mu_head,
            log_var_head,
            project,
            decoder,
        })
    }

    fn check_image_batch(&self, tape: &Tape, x: Var, op: &'static str) -> Result<usize> {
        let s = self.config.resolution;
        match *tape.shape(x) {
            [n, 3, h, w] if h == s && w == s => Ok(n),
            _ => Err(Error::ShapeMismatch {
                op,
                left: tape.shape(x).to_vec(),
                right: vec![0, 3, s, s],
            }),
        }
    }

    /// `x [n, 3, S, S] -> (mu, log_var)`, each `[n, k]`; `log_var` is clamped.
    pub fn encode(&self, tape: &mut Tape, vars: &GenerativeVars, x: Var) -> Result<LatentVars> {
        let n = self.check_image_batch(tape, x, "encode")?;
        let mut h = x;
        for conv in &vars.encoder {
            h = conv.forward(tape, h)?;
            h = tape.relu(h)?;
            h = tape.avg_pool2(h)?;
        }
        let flat = tape.shape(h)[1..].iter().product();
        let h = tape.reshape(h, vec![n, flat])?;
        let mu = vars.mu_head.forward(tape, h)?;
        let lv = vars.log_var_head.forward(tape, h)?;
        let log_var = tape.clamp(lv, -LOG_VAR_LIMIT, LOG_VAR_LIMIT)?;
        Ok(LatentVars { mu, log_var })
    }

    /// `z [n, k] -> M' [n, 3, S, S]` in `[0, 1]`.
    pub fn generate(&self, tape: &mut Tape, vars: &GenerativeVars, z: Var) -> Result<Var> {
        let k = self.config.latent;
        let n = match *tape.shape(z) {
            [n, kk] if kk == k => n,
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "generate",
                    left: tape.shape(z).to_vec(),
                    right: vec![0, k],
                })
            }
        };
        let b = self.config.bottleneck();
        let h = vars.project.forward(tape, z)?;
        let mut h = tape.reshape(h, vec![n, self.config.generator_channels[0], b, b])?;
        h = tape.relu(h)?;
        for (i, conv) in vars.decoder.iter().enumerate() {
            h = tape.upsample2(h)?;
            h = conv.forward(tape, h)?;
            if i + 1 < vars.decoder.len() {
                h = tape.relu(h)?;
            }
        }
        tape.sigmoid(h)
    }

    /// Convenience wrapper: encode one `[3, S, S]` image without a caller tape.
    pub fn encode_image(&self, x: &Tensor) -> Result<LatentGaussian> {
        let s = self.config.resolution;
        if x.shape() != [3, s, s] {
            return Err(Error::ShapeMismatch {
                op: "encode",
                left: x.shape().to_vec(),
                right: vec![3, s, s],
            });
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape)?;
        let xb = tape.constant_raw(vec![1, 3, s, s], x.data().to_vec())?;
        let g = self.encode(&mut tape, &vars, xb)?;
        Ok(LatentGaussian {
            mu: tape.value(g.mu).to_vec(),
            log_var: tape.value(g.log_var).to_vec(),
        })
    }

    /// Decodes a batch of latent vectors into `[3, S, S]` images.
    pub fn generate_images(&self, zs: &[Vec<f64>]) -> Result<Vec<Tensor>> {
        let k = self.config.latent;
        if let Some(bad) = zs.iter().find(|z| z.len() != k) {
            return Err(Error::ShapeMismatch {
                op: "generate",
                left: vec![bad.len()],
                right: vec![k],
            });
        }
        if zs.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape)?;
        let z = tape.constant_raw(vec![zs.len(), k], zs.concat())?;
        let m = self.generate(&mut tape, &vars, z)?;
        let s = self.config.resolution;
        Ok(tape
            .value(m)
            .chunks(3 * s * s)
            .map(|c| Tensor::new(vec![3, s, s], c.to_vec()).expect("image shape"))
            .collect())
    }

    /// Decodes a `grid x grid` slice of latent space spanned by dimensions
    /// `axes` around `center`, tiled into a `[grid*S, grid*S, 3]` mosaic.
    pub fn sample_manifold(&self, center: &[f64], span: f64, grid: usize, axes: (usize, usize)) -> Result<Tensor> {
        let k = self.config.latent;
        if grid < 2 {
            return Err(Error::domain("sample_manifold", format!("grid {grid} < 2")));
        }
        if !(span >= 0.0 && span.is_finite()) {
            return Err(Error::domain("sample_manifold", format!("span {span} must be >= 0")));
        }
        if center.len() != k || axes.0 >= k || axes.1 >= k {
            return Err(Error::domain(
                "sample_manifold",
                format!("center length {} / axes {axes:?} vs latent {k}", center.len()),
            ));
        }
        let mut zs = Vec::with_capacity(grid * grid);
        for r in 0..grid {
            for c in 0..grid {
                let mut z = center.to_vec();
                let t = |i: usize| span * (2.0 * i as f64 / (grid - 1) as f64 - 1.0);
                z[axes.0] += t(c);
                z[axes.1] += t(r);
                zs.push(z);
            }
        }
        let tiles = self.generate_images(&zs)?;
        Ok(tile_mosaic(&tiles, grid))
    }
}

/// Tiles `grid * grid` planar `[3, S, S]` images into one HWC mosaic.
pub fn tile_mosaic(tiles: &[Tensor], grid: usize) -> Tensor {
    let s = tiles[0].shape()[1];
    let side = grid * s;
    let np = s * s;
    let mut out = vec![0.0; side * side * 3];
    for (t, tile) in tiles.iter().enumerate().take(grid * grid) {
        let (tr, tc) = (t / grid, t % grid);
        for i in 0..s {
            for j in 0..s {
                for ch in 0..3 {
                    out[((tr * s + i) * side + tc * s + j) * 3 + ch] = tile.data()[ch * np + i * s + j];
                }
            }
        }
    }
    Tensor::new(vec![side, side, 3], out).expect("mosaic shape")
}

impl Parameterized for GenerativeModel {
    fn params(&self) -> Vec<&Tensor> {
        let mut v = Vec::new();
        self.encoder.iter().for_each(|c| push_conv(&mut v, c));
        push_linear(&mut v, &self.mu_head);
        push_linear(&mut v, &self.log_var_head);
        push_linear(&mut v, &self.project);
        self.decoder.iter().for_each(|c| push_conv(&mut v, c));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = Vec::new();
        self.encoder.iter_mut().for_each(|c| push_conv_mut(&mut v, c));
        push_linear_mut(&mut v, &mut self.mu_head);
        push_linear_mut(&mut v, &mut self.log_var_head);
        push_linear_mut(&mut v, &mut self.project);
        self.decoder.iter_mut().for_each(|c| push_conv_mut(&mut v, c));
        v
    }

    fn param_names(&self) -> Vec<String> {
        let mut v = Vec::new();
        for i in 0..3 {
            layer_names(&mut v, &format!("encoder.{i}"));
        }
        layer_names(&mut v, "mu_head");
        layer_names(&mut v, "log_var_head");
        layer_names(&mut v, "project");
        for i in 0..3 {
            layer_names(&mut v, &format!("decoder.{i}"));
        }
        v
    }
}

/// `z = mu + exp(log_var / 2) * eps`, batched on a tape.
pub fn sample_latent(tape: &mut Tape, g: LatentVars, eps: &Tensor) -> Result<Var> {
    if tape.shape(g.mu) != eps.shape() {
        return Err(Error::ShapeMismatch {
            op: "sample_latent",
            left: tape.shape(g.mu).to_vec(),
            right: eps.shape().to_vec(),
        });
    }
    let half = tape.scale(g.log_var, 0.5)?;
    let sd = tape.exp(half)?;
    let e = tape.constant(eps);
    let noise = tape.mul(sd, e)?;
    tape.add(g.mu, noise)
}

/// Value form of [`sample_latent`] for one latent.
pub fn sample_latent_values(g: &LatentGaussian, eps: &[f64]) -> Result<Vec<f64>> {
    if eps.len() != g.mu.len() || g.log_var.len() != g.mu.len() {
        return Err(Error::ShapeMismatch {
            op: "sample_latent",
            left: vec![g.mu.len()],
            right: vec![eps.len()],
        });
    }
    Ok(g.mu
        .iter()
        .zip(&g.log_var)
        .zip(eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect())
}

/// KL divergence from `N(mu, diag exp(log_var))` to `N(0, I)`.
pub fn loss_enc(g: &LatentGaussian) -> f64 {
    let k = g.mu.len() as f64;
    let tr: f64 = g.log_var.iter().map(|v| v.exp()).sum();
    let mm: f64 = g.mu.iter().map(|m| m * m).sum();
    let ld: f64 = g.log_var.iter().sum();
    0.5 * (tr + mm - k - ld)
}

/// Tape KL summed over the batch.
pub fn loss_enc_tape(tape: &mut Tape, g: LatentVars) -> Result<Var> {
    let (n, k) = match *tape.shape(g.mu) {
        [n, k] => (n, k),
        [k] => (1, k),
        _ => {
            return Err(Error::domain(
                "loss_enc",
                format!("latent shape {:?}", tape.shape(g.mu)),
            ))
        }
    };
    let ev = tape.exp(g.log_var)?;
    let tr = tape.sum(ev)?;
    let m2 = tape.square(g.mu)?;
    let mm = tape.sum(m2)?;
    let ld = tape.sum(g.log_var)?;
    let a = tape.add(tr, mm)?;
    let b = tape.sub(a, ld)?;
    let c = tape.offset(b, -((n * k) as f64))?;
    tape.scale(c, 0.5)
}

/// `||M - M'||^2 / (2 sigma^2)`, summed over all pixels and channels.
pub fn loss_gen(m_pred: &Tensor, m_true: &Tensor, sigma: f64) -> Result<f64> {
    if m_pred.shape() != m_true.shape() {
        return Err(Error::ShapeMismatch {
            op: "loss_gen",
            left: m_pred.shape().to_vec(),
            right: m_true.shape().to_vec(),
        });
    }
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::domain("loss_gen", format!("sigma {sigma} must be positive")));
    }
    let ss: f64 = m_pred
        .data()
        .iter()
        .zip(m_true.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(ss / (2.0 * sigma * sigma))
}

pub fn loss_gen_tape(tape: &mut Tape, m_pred: Var, m_true: Var, sigma: f64) -> Result<Var> {
    if tape.shape(m_pred) != tape.shape(m_true) {
        return Err(Error::ShapeMismatch {
            op: "loss_gen",
            left: tape.shape(m_pred).to_vec(),
            right: tape.shape(m_true).to_vec(),
        });
    }
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::domain("loss_gen", format!("sigma {sigma} must be positive")));
    }
    let d = tape.sub(m_pred, m_true)?;
    let d2 = tape.square(d)?;
    let s = tape.sum(d2)?;
    tape.scale(s, 1.0 / (2.0 * sigma * sigma))
}

/// Negated single-sample evidence lower bound: KL plus reconstruction term.
pub fn loss_enc_gen(g: &LatentGaussian, m_pred: &Tensor, m_true: &Tensor, sigma: f64) -> Result<f64> {
    Ok(loss_enc(g) + loss_gen(m_pred, m_true, sigma)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> GenerativeModel {
        let cfg = GenerativeConfig {
            resolution: 8,
            latent: 4,
            sigma: 0.1,
            encoder_channels: [3, 4, 4],
            generator_channels: [4, 3, 3],
        };
        GenerativeModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn kl_hand_values() {
        let g = LatentGaussian {
            mu: vec![0.0; 5],
            log_var: vec![0.0; 5],
        };
        assert_eq!(loss_enc(&g), 0.0);
        let g = LatentGaussian {
            mu: vec![1.0],
            log_var: vec![0.0],
        };
        assert!((loss_enc(&g) - 0.5).abs() < 1e-15);
        let g = LatentGaussian {
            mu: vec![0.0; 2],
            log_var: vec![1.0; 2],
        };
        assert!((loss_enc(&g) - (std::f64::consts::E - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn kl_tape_matches_values() {
        let mu = [0.3, -1.2, 0.5, 0.0, 2.0, -0.1];
        let lv = [0.1, -0.5, 1.5, 0.0, -2.0, 0.3];
        let mut tape = Tape::new();
        let m = tape.param(&Tensor::new(vec![2, 3], mu.to_vec()).unwrap());
        let l = tape.param(&Tensor::new(vec![2, 3], lv.to_vec()).unwrap());
        let kl = loss_enc_tape(&mut tape, LatentVars { mu: m, log_var: l }).unwrap();
        let want = loss_enc(&LatentGaussian {
            mu: mu[..3].to_vec(),
            log_var: lv[..3].to_vec(),
        }) + loss_enc(&LatentGaussian {
            mu: mu[3..].to_vec(),
            log_var: lv[3..].to_vec(),
        });
        assert!((tape.scalar_value(kl) - want).abs() < 1e-12);
    }

    #[test]
    fn gen_loss_examples() {
        let a = Tensor::new(vec![2, 1, 1], vec![0.0, 0.0]).unwrap();
        let b = Tensor::new(vec![2, 1, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(loss_gen(&a, &a, 1.0).unwrap(), 0.0);
        assert!((loss_gen(&a, &b, 1.0).unwrap() - 12.5).abs() < 1e-12);
        let l2 = loss_gen(&a, &b, 2.0).unwrap();
        assert!((l2 - 12.5 / 4.0).abs() < 1e-12);
        assert!(loss_gen(&a, &Tensor::zeros(&[3]), 1.0).is_err());
    }

    #[test]
    fn enc_gen_is_sum_of_parts() {
        let g = LatentGaussian {
            mu: vec![0.2, -0.4],
            log_var: vec![0.3, 0.1],
        };
        let a = Tensor::filled(&[3, 2, 2], 0.4);
        let b = Tensor::filled(&[3, 2, 2], 0.1);
        let total = loss_enc_gen(&g, &a, &b, 0.1).unwrap();
        assert_eq!(total, loss_enc(&g) + loss_gen(&a, &b, 0.1).unwrap());
        let zero = LatentGaussian {
            mu: vec![0.0; 2],
            log_var: vec![0.0; 2],
        };
        assert_eq!(loss_enc_gen(&zero, &a, &a, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn sample_latent_examples() {
        let g = LatentGaussian {
            mu: vec![1.0, -2.0],
            log_var: vec![0.7, -0.3],
        };
        assert_eq!(sample_latent_values(&g, &[0.0, 0.0]).unwrap(), g.mu);
        let g0 = LatentGaussian {
            mu: vec![1.0, -2.0],
            log_var: vec![0.0, 0.0],
        };
        assert_eq!(sample_latent_values(&g0, &[0.5, 0.25]).unwrap(), vec![1.5, -1.75]);
        assert!(sample_latent_values(&g, &[0.0]).is_err());
    }

    #[test]
    fn encode_contract() {
        let m = toy();
        let x = Tensor::filled(&[3, 8, 8], 0.3);
        let a = m.encode_image(&x).unwrap();
        let b = m.encode_image(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.mu.len(), 4);
        assert_eq!(a.log_var.len(), 4);
        assert!(m.encode_image(&Tensor::zeros(&[3, 16, 16])).is_err());
        assert!(m.encode_image(&Tensor::zeros(&[1, 8, 8])).is_err());
    }

    #[test]
    fn generate_contract() {
        let m = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let zs: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..4).map(|_| rng.gen_range(-5.0..5.0)).collect())
            .collect();
        let out = m.generate_images(&zs).unwrap();
        let again = m.generate_images(&zs).unwrap();
        assert_eq!(out, again);
        for img in &out {
            assert_eq!(img.shape(), &[3, 8, 8]);
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(m.generate_images(&[vec![0.0; 3]]).is_err());
    }

    #[test]
    fn manifold_tiling() {
        let m = toy();
        let mosaic = m.sample_manifold(&[0.1, 0.2, 0.3, 0.4], 0.0, 2, (0, 1)).unwrap();
        assert_eq!(mosaic.shape(), &[16, 16, 3]);
        let d = mosaic.data();
        for i in 0..8 {
            for j in 0..8 {
                for ch in 0..3 {
                    let v = d[(i * 16 + j) * 3 + ch];
                    assert_eq!(v, d[(i * 16 + j + 8) * 3 + ch]);
                    assert_eq!(v, d[((i + 8) * 16 + j) * 3 + ch]);
                    assert_eq!(v, d[((i + 8) * 16 + j + 8) * 3 + ch]);
                }
            }
        }
        let big = m.sample_manifold(&[0.0; 4], 1.0, 3, (0, 1)).unwrap();
        assert_eq!(big.shape(), &[24, 24, 3]);
        assert!(m.sample_manifold(&[0.0; 4], -1.0, 2, (0, 1)).is_err());
        assert!(m.sample_manifold(&[0.0; 4], 1.0, 1, (0, 1)).is_err());
    }
}
