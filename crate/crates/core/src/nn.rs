//! Convolutional building blocks shared by the segmentor, generator and
//! discriminator. Layers hold only [`ParamId`]s; the weights live in the
//! owning model's [`ParamSet`] and are bound onto a tape per forward pass.

use rand::Rng;
use reflect_autograd::{kaiming_kernel, Activation, Bound, ParamId, ParamSet, Real, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

/// Stride-1 "same" convolution with bias.
#[derive(Clone, Copy, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub padding: usize,
}

impl ConvLayer {
    pub fn new<T: Real>(
        params: &mut ParamSet<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = params.add(
            format!("{name}.weight"),
            kaiming_kernel([cout, cin, kernel, kernel], rng),
        )?;
        let bias = params.add(format!("{name}.bias"), Tensor::zeros([cout]))?;
        Ok(Self {
            weight,
            bias,
            padding: kernel / 2,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        Ok(tape.conv2d(x, bound.var(self.weight), Some(bound.var(self.bias)), 1, self.padding)?)
    }

    /// Sets weight and bias to zero, making the layer output identically 0.
    pub fn zero<T: Real>(&self, params: &mut ParamSet<T>) {
        for id in [self.weight, self.bias] {
            let p = params.get_mut(id);
            p.value = Tensor::zeros(p.value.shape().to_vec());
        }
    }
}

/// Two 3x3 convolutions, each followed by the activation.
#[derive(Clone, Copy, Debug)]
pub struct DoubleConv {
    pub first: ConvLayer,
    pub second: ConvLayer,
}

impl DoubleConv {
    fn new<T: Real>(
        params: &mut ParamSet<T>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            first: ConvLayer::new(params, &format!("{name}.conv1"), cin, cout, 3, rng)?,
            second: ConvLayer::new(params, &format!("{name}.conv2"), cout, cout, 3, rng)?,
        })
    }

    fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        act: Activation,
    ) -> Result<Var> {
        let h = self.first.forward(tape, bound, x)?;
        let h = tape.activation(act, h)?;
        let h = self.second.forward(tape, bound, h)?;
        Ok(tape.activation(act, h)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
}

/// Encoder-decoder with skip connections: `depth` pooling levels, channel
/// width doubling per level, nearest-neighbour upsampling and a 1x1 head
/// producing raw (pre-activation) outputs.
#[derive(Clone, Debug)]
pub struct UNet {
    pub config: UNetConfig,
    pub activation: Activation,
    down: Vec<DoubleConv>,
    bottom: DoubleConv,
    up: Vec<DoubleConv>,
    pub head: ConvLayer,
}

impl UNet {
    pub fn new<T: Real>(
        config: UNetConfig,
        activation: Activation,
        prefix: &str,
        params: &mut ParamSet<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if config.depth == 0 || config.base_channels == 0 || config.in_channels == 0 {
            return shape_err(format!("invalid encoder-decoder config {config:?}"));
        }
        let width = |level: usize| config.base_channels << level;
        let mut down = Vec::with_capacity(config.depth);
        for level in 0..config.depth {
            let cin = if level == 0 { config.in_channels } else { width(level - 1) };
            down.push(DoubleConv::new(params, &format!("{prefix}.enc{level}"), cin, width(level), rng)?);
        }
        let deepest = width(config.depth - 1);
        let bottom = DoubleConv::new(
            params,
            &format!("{prefix}.bottleneck"),
            deepest,
            width(config.depth),
            rng,
        )?;
        let mut up = Vec::with_capacity(config.depth);
        for level in (0..config.depth).rev() {
            let cin = width(level) + width(level + 1);
            up.push(DoubleConv::new(params, &format!("{prefix}.dec{level}"), cin, width(level), rng)?);
        }
        let head = ConvLayer::new(
            params,
            &format!("{prefix}.head"),
            config.base_channels,
            config.out_channels,
            1,
            rng,
        )?;
        Ok(Self {
            config,
            activation,
            down,
            bottom,
            up,
            head,
        })
    }

    /// Spatial extents must be divisible by this.
    pub fn granularity(&self) -> usize {
        1 << self.config.depth
    }

    pub fn check_extent(&self, height: usize, width: usize) -> Result<()> {
        let g = self.granularity();
        if height % g != 0 || width % g != 0 {
            return shape_err(format!(
                "image {height}x{width} not divisible by {g} (depth {})",
                self.config.depth
            ));
        }
        Ok(())
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let [_, c, h, w] = tape.value(x).dims4()?;
        if c != self.config.in_channels {
            return shape_err(format!("expected {} input channels, got {c}", self.config.in_channels));
        }
        self.check_extent(h, w)?;
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut h = x;
        for block in &self.down {
            let f = block.forward(tape, bound, h, self.activation)?;
            skips.push(f);
            h = tape.avg_pool2x(f)?;
        }
        h = self.bottom.forward(tape, bound, h, self.activation)?;
        for block in &self.up {
            let skip = skips.pop().expect("one skip per level");
            let u = tape.upsample_nearest2x(h)?;
            let cat = tape.concat_channels(skip, u)?;
            h = block.forward(tape, bound, cat, self.activation)?;
        }
        self.head.forward(tape, bound, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(params: &mut ParamSet<f64>) -> UNet {
        let config = UNetConfig {
            in_channels: 2,
            out_channels: 3,
            base_channels: 4,
            depth: 2,
        };
        UNet::new(config, Activation::Relu, "net", params, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn output_shape_and_names() {
        let mut params = ParamSet::new();
        let unet = net(&mut params);
        assert!(params.id("net.enc0.conv1.weight").is_some());
        assert!(params.id("net.bottleneck.conv2.bias").is_some());
        assert!(params.id("net.dec1.conv1.weight").is_some());
        assert_eq!(params.by_name("net.dec0.conv1.weight").unwrap().value.shape(), &[4, 12, 3, 3]);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.constant(Tensor::zeros([1, 2, 8, 12]));
        let y = unet.forward(&mut tape, &bound, x).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 8, 12]);
    }

    #[test]
    fn indivisible_extent_rejected() {
        let mut params = ParamSet::new();
        let unet = net(&mut params);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.constant(Tensor::zeros([1, 2, 6, 8]));
        assert!(unet.forward(&mut tape, &bound, x).is_err());
    }
}
