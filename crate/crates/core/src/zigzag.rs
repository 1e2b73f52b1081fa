//! Compact classifier built from Zigzag modules: squeeze with a 1x1
//! projection, expand through parallel 1x1 and 3x3 branches, add a 1x1
//! bypass of the module input, and apply one ReLU after the sum.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    layer_names, push_conv, push_conv_mut, push_linear, push_linear_mut, Conv, ConvVars, Linear, LinearVars,
    Parameterized, VarCursor,
};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZigzagModuleConfig {
    pub in_channels: usize,
    pub squeeze_channels: usize,
    pub expand1_channels: usize,
    pub expand3_channels: usize,
    pub bypass_channels: usize,
}

impl ZigzagModuleConfig {
    /// Squeeze to a quarter of the output width, split evenly between the
    /// two expand branches.
    pub fn standard(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            squeeze_channels: (out_channels / 4).max(1),
            expand1_channels: out_channels / 2,
            expand3_channels: out_channels - out_channels / 2,
            bypass_channels: out_channels,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.expand1_channels + self.expand3_channels
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.in_channels,
            self.squeeze_channels,
            self.expand1_channels,
            self.expand3_channels,
            self.bypass_channels,
        ];
        if all.contains(&0) {
            return Err(Error::invalid(format!("zigzag channels must be positive: {self:?}")));
        }
        if self.bypass_channels != self.out_channels() {
            return Err(Error::invalid(format!(
                "bypass channels {} != expand1 + expand3 = {}",
                self.bypass_channels,
                self.out_channels()
            )));
        }
        if self.squeeze_channels >= self.in_channels {
            return Err(Error::invalid(format!(
                "squeeze channels {} must be below input channels {}",
                self.squeeze_channels, self.in_channels
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZigzagModule {
    pub config: ZigzagModuleConfig,
    squeeze: Conv,
    expand1: Conv,
    expand3: Conv,
    bypass: Conv,
}

#[derive(Clone, Copy, Debug)]
pub struct ZigzagVars {
    squeeze: ConvVars,
    expand1: ConvVars,
    expand3: ConvVars,
    bypass: ConvVars,
}

impl ZigzagModule {
    pub fn new<R: Rng + ?Sized>(config: ZigzagModuleConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            squeeze: Conv::new(rng, config.in_channels, config.squeeze_channels, 1),
            expand1: Conv::new(rng, config.squeeze_channels, config.expand1_channels, 1),
            expand3: Conv::new(rng, config.squeeze_channels, config.expand3_channels, 3),
            bypass: Conv::new(rng, config.in_channels, config.bypass_channels, 1),
        })
    }

    pub fn bind_with(&self, vars: &[Var]) -> Result<ZigzagVars> {
        let mut c = VarCursor::new(vars);
        let z = Self::take(&mut c)?;
        c.finish()?;
        Ok(z)
    }

    fn take(c: &mut VarCursor<'_>) -> Result<ZigzagVars> {
        Ok(ZigzagVars {
            squeeze: c.conv(0)?,
            expand1: c.conv(0)?,
            expand3: c.conv(1)?,
            bypass: c.conv(0)?,
        })
    }

    /// `x [n, c_in, h, w] -> [n, c_out, h, w]` (unbatched `[c, h, w]` works too).
    pub fn forward(&self, tape: &mut Tape, vars: &ZigzagVars, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        let channels = if shape.len() == 4 { shape[1] } else { shape[0] };
        if channels != self.config.in_channels {
            return Err(Error::ShapeMismatch {
                op: "zigzag_module",
                left: shape.to_vec(),
                right: vec![self.config.in_channels],
            });
        }
        let s = vars.squeeze.forward(tape, x)?;
        let e1 = vars.expand1.forward(tape, s)?;
        let e3 = vars.expand3.forward(tape, s)?;
        let expanded = tape.concat_channels(e1, e3)?;
        let skip = vars.bypass.forward(tape, x)?;
        let sum = tape.add(expanded, skip)?;
        tape.relu(sum)
    }

    /// Zeroes the bypass branch (ablation helper).
    pub fn zero_bypass(&mut self) {
        self.bypass.weight.data_mut().fill(0.0);
        self.bypass.bias.data_mut().fill(0.0);
    }

    fn push_params<'a>(&'a self, v: &mut Vec<&'a Tensor>) {
        push_conv(v, &self.squeeze);
        push_conv(v, &self.expand1);
        push_conv(v, &self.expand3);
        push_conv(v, &self.bypass);
    }

    fn push_params_mut<'a>(&'a mut self, v: &mut Vec<&'a mut Tensor>) {
        push_conv_mut(v, &mut self.squeeze);
        push_conv_mut(v, &mut self.expand1);
        push_conv_mut(v, &mut self.expand3);
        push_conv_mut(v, &mut self.bypass);
    }

    fn push_names(v: &mut Vec<String>, prefix: &str) {
        for part in ["squeeze", "expand1", "expand3", "bypass"] {
            layer_names(v, &format!("{prefix}.{part}"));
        }
    }
}

impl Parameterized for ZigzagModule {
    fn params(&self) -> Vec<&Tensor> {
        let mut v = Vec::new();
        self.push_params(&mut v);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = Vec::new();
        self.push_params_mut(&mut v);
        v
    }

    fn param_names(&self) -> Vec<String> {
        let mut v = Vec::new();
        Self::push_names(&mut v, "zigzag");
        v
    }
}

pub const INPUT_CHANNELS: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub classes: usize,
    pub stem_channels: usize,
    pub module_widths: [usize; 3],
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            classes: 12,
            stem_channels: 16,
            module_widths: [32, 64, 64],
        }
    }
}

impl ClassifierConfig {
    pub fn descriptor_len(&self) -> usize {
        self.module_widths[2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZigzagClassifier {
    pub config: ClassifierConfig,
    stem: Conv,
    modules: [ZigzagModule; 3],
    head: Linear,
}

#[derive(Clone, Debug)]
pub struct ClassifierVars {
    stem: ConvVars,
    modules: [ZigzagVars; 3],
    head: LinearVars,
}

/// Classifier outputs for a batch: `descriptor [n, D]`, `logits [n, K]`.
#[derive(Clone, Copy, Debug)]
pub struct ClassifierOutput {
    pub descriptor: Var,
    pub logits: Var,
}

impl ZigzagClassifier {
    pub fn new<R: Rng + ?Sized>(config: ClassifierConfig, rng: &mut R) -> Result<Self> {
        if config.classes == 0 {
            return Err(Error::invalid("classifier needs at least one class"));
        }
        let [w1, w2, w3] = config.module_widths;
        let stem = Conv::new(rng, INPUT_CHANNELS, config.stem_channels, 3);
        let modules = [
            ZigzagModule::new(ZigzagModuleConfig::standard(config.stem_channels, w1), rng)?,
            ZigzagModule::new(ZigzagModuleConfig::standard(w1, w2), rng)?,
            ZigzagModule::new(ZigzagModuleConfig::standard(w2, w3), rng)?,
        ];
        let head = Linear::new(rng, w3, config.classes).scaled(0.5);
        Ok(Self {
            config,
            stem,
            modules,
            head,
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<ClassifierVars> {
        let vars = self.bind_params(tape);
        self.bind_with(&vars)
    }

    pub fn bind_with(&self, vars: &[Var]) -> Result<ClassifierVars> {
        let mut c = VarCursor::new(vars);
        let stem = c.conv(1)?;
        let modules = [
            ZigzagModule::take(&mut c)?,
            ZigzagModule::take(&mut c)?,
            ZigzagModule::take(&mut c)?,
        ];
        let head = c.linear()?;
        c.finish()?;
        Ok(ClassifierVars { stem, modules, head })
    }

    /// `x6 [n, 6, S, S]` -> descriptor and logits. Spatial extent must be a
    /// multiple of 8 (three 2x2 pools).
    pub fn forward(&self, tape: &mut Tape, vars: &ClassifierVars, x6: Var) -> Result<ClassifierOutput> {
        let n = match *tape.shape(x6) {
            [n, INPUT_CHANNELS, h, w] if h % 8 == 0 && w % 8 == 0 && h > 0 => n,
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "classifier_forward",
                    left: tape.shape(x6).to_vec(),
                    right: vec![0, INPUT_CHANNELS, 0, 0],
                })
            }
        };
        let mut h = vars.stem.forward(tape, x6)?;
        h = tape.relu(h)?;
        for (module, mv) in self.modules.iter().zip(&vars.modules) {
            h = tape.max_pool2(h)?;
            h = module.forward(tape, mv, h)?;
        }
        let descriptor = tape.global_avg_pool(h)?;
        debug_assert_eq!(tape.shape(descriptor), &[n, self.config.descriptor_len()]);
        let logits = vars.head.forward(tape, descriptor)?;
        Ok(ClassifierOutput { descriptor, logits })
    }

    /// Value-only forward for one `[6, S, S]` input.
    pub fn classify(&self, x6: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        let shape = x6.shape();
        if shape.len() != 3 || shape[0] != INPUT_CHANNELS {
            return Err(Error::ShapeMismatch {
                op: "classifier_forward",
                left: shape.to_vec(),
                right: vec![INPUT_CHANNELS, 0, 0],
            });
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape)?;
        let mut batched = vec![1];
        batched.extend_from_slice(shape);
        let x = tape.constant_raw(batched, x6.data().to_vec())?;
        let out = self.forward(&mut tape, &vars, x)?;
        Ok((tape.value(out.descriptor).to_vec(), tape.value(out.logits).to_vec()))
    }

    pub fn modules_mut(&mut self) -> &mut [ZigzagModule; 3] {
        &mut self.modules
    }
}

impl Parameterized for ZigzagClassifier {
    fn params(&self) -> Vec<&Tensor> {
        let mut v = Vec::new();
        push_conv(&mut v, &self.stem);
        self.modules.iter().for_each(|m| m.push_params(&mut v));
        push_linear(&mut v, &self.head);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = Vec::new();
        push_conv_mut(&mut v, &mut self.stem);
        self.modules.iter_mut().for_each(|m| m.push_params_mut(&mut v));
        push_linear_mut(&mut v, &mut self.head);
        v
    }

    fn param_names(&self) -> Vec<String> {
        let mut v = Vec::new();
        layer_names(&mut v, "stem");
        for i in 0..3 {
            ZigzagModule::push_names(&mut v, &format!("module.{i}"));
        }
        layer_names(&mut v, "head");
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn config_invariants() {
        assert!(ZigzagModuleConfig::standard(16, 32).validate().is_ok());
        let mut bad = ZigzagModuleConfig::standard(16, 32);
        bad.bypass_channels = 31;
        assert!(bad.validate().is_err());
        let mut bad = ZigzagModuleConfig::standard(16, 32);
        bad.squeeze_channels = 16;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn module_shape_and_zero_params() {
        let mut r = rng();
        let mut m = ZigzagModule::new(ZigzagModuleConfig::standard(6, 16), &mut r).unwrap();
        for (h, w) in [(3, 3), (5, 7), (8, 8)] {
            let mut tape = Tape::new();
            let vars = m.bind_params(&mut tape);
            let zv = m.bind_with(&vars).unwrap();
            let x = tape.constant(&random_tensor(&mut r, &[2, 6, h, w]));
            let y = m.forward(&mut tape, &zv, x).unwrap();
            assert_eq!(tape.shape(y), &[2, 16, h, w]);
        }
        for p in m.params_mut() {
            p.data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let vars = m.bind_params(&mut tape);
        let zv = m.bind_with(&vars).unwrap();
        let x = tape.constant(&random_tensor(&mut r, &[6, 4, 4]));
        let y = m.forward(&mut tape, &zv, x).unwrap();
        assert!(tape.value(y).iter().all(|v| *v == 0.0));
        let bad = tape.constant(&random_tensor(&mut r, &[5, 4, 4]));
        assert!(m.forward(&mut tape, &zv, bad).is_err());
    }

    #[test]
    fn classifier_shapes_and_channel_order() {
        let mut r = rng();
        let cfg = ClassifierConfig {
            classes: 4,
            ..ClassifierConfig::default()
        };
        let c = ZigzagClassifier::new(cfg, &mut r).unwrap();
        let x = random_tensor(&mut r, &[6, 16, 16]);
        let (d, l) = c.classify(&x).unwrap();
        assert_eq!(d.len(), 64);
        assert_eq!(l.len(), 4);
        assert!(d.iter().chain(&l).all(|v| v.is_finite()));
        let mut swapped = x.data()[3 * 256..].to_vec();
        swapped.extend_from_slice(&x.data()[..3 * 256]);
        let (d2, l2) = c.classify(&Tensor::new(vec![6, 16, 16], swapped).unwrap()).unwrap();
        assert_ne!(d, d2);
        assert_ne!(l, l2);
        assert!(c.classify(&Tensor::zeros(&[3, 16, 16])).is_err());
    }

    #[test]
    fn default_classifier_is_compact() {
        let c = ZigzagClassifier::new(ClassifierConfig::default(), &mut rng()).unwrap();
        assert!(c.param_count() < 300_000, "{}", c.param_count());
        assert_eq!(c.params().len(), c.param_names().len());
    }

    #[test]
    fn bypass_is_live() {
        let mut r = rng();
        let cfg = ClassifierConfig {
            classes: 4,
            ..ClassifierConfig::default()
        };
        let c = ZigzagClassifier::new(cfg, &mut r).unwrap();
        let x = random_tensor(&mut r, &[6, 16, 16]);
        let (base, _) = c.classify(&x).unwrap();
        let mut ablated = c.clone();
        ablated.modules_mut()[1].zero_bypass();
        let (cut, _) = ablated.classify(&x).unwrap();
        assert_ne!(base, cut);

        let mut tape = Tape::new();
        let vars = c.bind_params(&mut tape);
        let cv = c.bind_with(&vars).unwrap();
        let xb = tape.constant(&random_tensor(&mut r, &[2, 6, 16, 16]));
        let out = c.forward(&mut tape, &cv, xb).unwrap();
        let loss = tape.sum(out.descriptor).unwrap();
        let grads = tape.backward(loss).unwrap();
        let names = c.param_names();
        for (name, v) in names.iter().zip(&vars) {
            if name.contains("bypass.weight") {
                let g = grads.get(*v).unwrap();
                assert!(g.iter().any(|x| *x != 0.0), "{name}");
            }
        }
    }
}
