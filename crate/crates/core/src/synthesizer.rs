//! Conditional generator (heatmap + sketch -> proxy image) and the
//! conditional patch discriminator it is trained against.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reflect_autograd::{checkpoint, Activation, Bound, ParamSet, Real, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{ConvLayer, UNet, UNetConfig};
use crate::sketch;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub gen_base_channels: usize,
    pub gen_depth: usize,
    pub disc_base_channels: usize,
    /// Pooling levels of the discriminator; patch grid is `H / 2^levels`.
    pub disc_levels: usize,
    pub lambda_rec: f64,
    pub lambda_adv: f64,
    pub sketch_low: f64,
    pub sketch_high: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            gen_base_channels: 8,
            gen_depth: 3,
            disc_base_channels: 16,
            disc_levels: 2,
            lambda_rec: 100.0,
            lambda_adv: 1.0,
            sketch_low: sketch::DEFAULT_LOW,
            sketch_high: sketch::DEFAULT_HIGH,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_rec > 0.0) || !(self.lambda_adv >= 0.0) {
            return Err(Error::Config(format!(
                "need lambda_rec > 0 and lambda_adv >= 0, got {} and {}",
                self.lambda_rec, self.lambda_adv
            )));
        }
        if self.gen_depth == 0 || self.gen_base_channels == 0 || self.disc_base_channels == 0 {
            return Err(Error::Config(format!("invalid synthesizer widths {self:?}")));
        }
        Ok(())
    }
}

/// Conv stack over `concat(image, heatmap / 255, sketch)`, halving the
/// extent `levels` times, ending in a 1x1 score layer.
#[derive(Clone, Debug)]
pub struct PatchDiscriminator {
    blocks: Vec<ConvLayer>,
    head: ConvLayer,
}

impl PatchDiscriminator {
    fn new<T: Real>(
        base: usize,
        levels: usize,
        params: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(levels + 1);
        let mut cin = 3;
        for level in 0..=levels {
            let cout = base << level.min(levels.saturating_sub(1));
            blocks.push(ConvLayer::new(params, &format!("disc.block{level}"), cin, cout, 3, rng)?);
            cin = cout;
        }
        let head = ConvLayer::new(params, "disc.head", cin, 1, 1, rng)?;
        Ok(Self { blocks, head })
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        let levels = self.blocks.len() - 1;
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(tape, bound, h)?;
            h = tape.activation(Activation::LEAKY, h)?;
            if i < levels {
                h = tape.avg_pool2x(h)?;
            }
        }
        self.head.forward(tape, bound, h)
    }
}

#[derive(Clone, Debug)]
pub struct Synthesizer<T: Real> {
    pub config: SynthConfig,
    pub generator: ParamSet<T>,
    pub discriminator: ParamSet<T>,
    gen_net: UNet,
    disc_net: PatchDiscriminator,
}

fn check_map<T: Real>(tape: &Tape<T>, v: Var, h: usize, w: usize, what: &str) -> Result<()> {
    if tape.shape(v) != [1, 1, h, w] {
        return shape_err(format!("{what}: expected [1, 1, {h}, {w}], got {:?}", tape.shape(v)));
    }
    Ok(())
}

impl<T: Real> Synthesizer<T> {
    pub fn new(config: SynthConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut generator = ParamSet::new();
        let gen_net = UNet::new(
            UNetConfig {
                in_channels: 2,
                out_channels: 1,
                base_channels: config.gen_base_channels,
                depth: config.gen_depth,
            },
            Activation::LEAKY,
            "gen",
            &mut generator,
            &mut rng,
        )?;
        let mut discriminator = ParamSet::new();
        let disc_net =
            PatchDiscriminator::new(config.disc_base_channels, config.disc_levels, &mut discriminator, &mut rng)?;
        Ok(Self {
            config,
            generator,
            discriminator,
            gen_net,
            disc_net,
        })
    }

    pub fn sketch(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        sketch::extract_sketch(image, self.config.sketch_low, self.config.sketch_high)
    }

    /// Proxy image in `(0, 1)` from a `[0, 255]` heatmap and a binary sketch.
    pub fn generate(&self, tape: &mut Tape<T>, bound: &Bound, heatmap: Var, sketch: Var) -> Result<Var> {
        let [_, _, h, w] = tape.value(heatmap).dims4()?;
        check_map(tape, heatmap, h, w, "heatmap")?;
        check_map(tape, sketch, h, w, "sketch")?;
        let norm = tape.div_scalar(heatmap, T::lit(255.0))?;
        let x = tape.concat_channels(norm, sketch)?;
        let y = self.gen_net.forward(tape, bound, x)?;
        Ok(tape.activation(Activation::Sigmoid, y)?)
    }

    /// Patch scores `[1, 1, H / 2^levels, W / 2^levels]`.
    pub fn discriminate(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        image: Var,
        heatmap: Var,
        sketch: Var,
    ) -> Result<Var> {
        let [_, _, h, w] = tape.value(image).dims4()?;
        check_map(tape, image, h, w, "image")?;
        check_map(tape, heatmap, h, w, "heatmap")?;
        check_map(tape, sketch, h, w, "sketch")?;
        let g = 1 << self.config.disc_levels;
        if h % g != 0 || w % g != 0 {
            return shape_err(format!("discriminator input {h}x{w} not divisible by {g}"));
        }
        let norm = tape.div_scalar(heatmap, T::lit(255.0))?;
        let x = tape.concat_channels(image, norm)?;
        let x = tape.concat_channels(x, sketch)?;
        self.disc_net.forward(tape, bound, x)
    }

    /// Gradient-free generator pass.
    pub fn proxy(&self, heatmap: &Tensor<T>, sketch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.generator.bind_frozen(&mut tape);
        let h = tape.constant(heatmap.clone());
        let s = tape.constant(sketch.clone());
        let y = self.generate(&mut tape, &bound, h, s)?;
        Ok(tape.value(y).clone())
    }

    /// Zeroes the generator output layer, making every proxy pixel 0.5.
    pub fn zero_generator_head(&mut self) {
        self.gen_net.head.zero(&mut self.generator);
    }

    pub fn zero_discriminator(&mut self) {
        for p in self.discriminator.iter_mut() {
            p.value = Tensor::zeros(p.value.shape().to_vec());
        }
    }

    pub fn cast<U: Real>(&self) -> Synthesizer<U> {
        Synthesizer {
            config: self.config,
            generator: self.generator.cast(),
            discriminator: self.discriminator.cast(),
            gen_net: self.gen_net.clone(),
            disc_net: self.disc_net.clone(),
        }
    }

    /// Generator followed by discriminator parameters in one file.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut all = ParamSet::new();
        for p in self.generator.iter().chain(self.discriminator.iter()) {
            all.add(p.name.clone(), p.value.clone())?;
        }
        Ok(checkpoint::encode(&all)?)
    }

    pub fn load_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let entries = checkpoint::decode::<T>(bytes)?;
        let expected = self.generator.len() + self.discriminator.len();
        if entries.len() != expected {
            return Err(Error::Format(format!(
                "synthesizer checkpoint has {} parameters, model has {expected}",
                entries.len()
            )));
        }
        for (name, value) in entries {
            let set = if self.generator.id(&name).is_some() {
                &mut self.generator
            } else if self.discriminator.id(&name).is_some() {
                &mut self.discriminator
            } else {
                return Err(Error::Format(format!("unknown parameter {name}")));
            };
            set.set_value(&name, value)?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(config: SynthConfig, path: impl AsRef<Path>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.load_bytes(&std::fs::read(path)?)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeroed_generator_outputs_half() {
        let mut synth = Synthesizer::<f32>::new(SynthConfig::default(), 1).unwrap();
        synth.zero_generator_head();
        let heat = Tensor::from_fn([1, 1, 16, 16], |i| (i % 3) as f32 * 127.5);
        let sketch = Tensor::from_fn([1, 1, 16, 16], |i| (i % 2) as f32);
        let proxy = synth.proxy(&heat, &sketch).unwrap();
        assert!(proxy.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn zero_discriminator_scores_zero_on_patch_grid() {
        let mut synth = Synthesizer::<f64>::new(SynthConfig::default(), 2).unwrap();
        synth.zero_discriminator();
        let mut tape = Tape::new();
        let bound = synth.discriminator.bind(&mut tape);
        let img = tape.constant(Tensor::full([1, 1, 16, 16], 0.4));
        let heat = tape.constant(Tensor::full([1, 1, 16, 16], 127.5));
        let sk = tape.constant(Tensor::zeros([1, 1, 16, 16]));
        let d = synth.discriminate(&mut tape, &bound, img, heat, sk).unwrap();
        assert_eq!(tape.shape(d), &[1, 1, 4, 4]);
        assert!(tape.value(d).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_sketch_rejected() {
        let synth = Synthesizer::<f32>::new(SynthConfig::default(), 3).unwrap();
        let heat = Tensor::zeros([1, 1, 16, 16]);
        let sketch = Tensor::zeros([1, 1, 8, 8]);
        assert!(synth.proxy(&heat, &sketch).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let a = Synthesizer::<f32>::new(SynthConfig::default(), 4).unwrap();
        let mut b = Synthesizer::<f32>::new(SynthConfig::default(), 5).unwrap();
        b.load_bytes(&a.to_bytes().unwrap()).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        let truncated = &a.to_bytes().unwrap()[..100];
        assert!(b.load_bytes(truncated).is_err());
    }
}
