use rand::Rng;

use super::linear::{uniform, Linear};
use super::params::{BoundParams, ParamBundle};
use crate::diffcore::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};

/// One unpadded convolution stage, followed by a bias and ReLU.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLayerSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Image encoder layout. Images arrive as `[height, width, channels]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvEncoderSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub layers: Vec<ConvLayerSpec>,
    pub latent: usize,
}

impl Default for ConvEncoderSpec {
    fn default() -> Self {
        let layer = |channels| ConvLayerSpec {
            channels,
            kernel: 3,
            stride: 2,
        };
        Self {
            height: 84,
            width: 84,
            channels: 3,
            layers: vec![layer(16), layer(32), layer(32), layer(32)],
            latent: 128,
        }
    }
}

impl ConvLayerSpec {
    /// `channels/kernel/stride` stages joined by commas, e.g. `16/3/2,32/3/2`.
    pub fn format_list(layers: &[ConvLayerSpec]) -> String {
        let parts: Vec<String> = layers
            .iter()
            .map(|l| format!("{}/{}/{}", l.channels, l.kernel, l.stride))
            .collect();
        parts.join(",")
    }

    pub fn parse_list(text: &str) -> Option<Vec<ConvLayerSpec>> {
        text.split(',')
            .map(|l| {
                let v: Vec<usize> = l
                    .trim()
                    .split('/')
                    .map(|x| x.parse().ok())
                    .collect::<Option<_>>()?;
                match v.as_slice() {
                    [channels, kernel, stride] => Some(ConvLayerSpec {
                        channels: *channels,
                        kernel: *kernel,
                        stride: *stride,
                    }),
                    _ => None,
                }
            })
            .collect()
    }
}

impl ConvEncoderSpec {
    /// The default stack sized for square `size × size` RGB images.
    pub fn for_size(size: usize, layers: Vec<ConvLayerSpec>, latent: usize) -> Self {
        Self {
            height: size,
            width: size,
            channels: 3,
            layers,
            latent,
        }
    }

    /// Feature-map shapes `[c, h, w]` after each stage, input first.
    pub fn stage_shapes(&self) -> Result<Vec<[usize; 3]>> {
        if self.latent == 0 || self.layers.is_empty() {
            return Err(Error::contract(
                "encoder needs at least one stage and a non-zero latent width",
            ));
        }
        let mut shapes = vec![[self.channels, self.height, self.width]];
        for (i, l) in self.layers.iter().enumerate() {
            let [_, h, w] = *shapes.last().unwrap();
            if l.kernel == 0 || l.stride == 0 || l.channels == 0 || h < l.kernel || w < l.kernel {
                return Err(Error::contract(format!(
                    "encoder stage {i} does not fit a {h}x{w} feature map"
                )));
            }
            let (ho, wo) = ((h - l.kernel) / l.stride + 1, (w - l.kernel) / l.stride + 1);
            if ho >= h || wo >= w {
                return Err(Error::contract(format!(
                    "encoder stage {i} does not shrink the feature map"
                )));
            }
            shapes.push([l.channels, ho, wo]);
        }
        Ok(shapes)
    }

    pub fn flattened_width(&self) -> Result<usize> {
        let shapes = self.stage_shapes()?;
        Ok(shapes.last().unwrap().iter().product())
    }
}

/// Convert an `[H, W, C]` image to the `[C, H, W]` layout used by convolution.
pub fn image_to_chw(image: &Tensor) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::contract(format!(
            "expected an [H, W, C] image, got {s:?}"
        )));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[(ch * h + y) * w + x] = src[(y * w + x) * c + ch];
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Strided convolution stack projected to a latent vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvEncoder {
    name: String,
    spec: ConvEncoderSpec,
    shapes: Vec<[usize; 3]>,
    head: Linear,
}

impl ConvEncoder {
    pub fn new(name: &str, spec: ConvEncoderSpec) -> Result<Self> {
        let shapes = spec.stage_shapes()?;
        let flat = shapes.last().unwrap().iter().product();
        Ok(Self {
            name: name.to_string(),
            head: Linear::new(format!("{name}.head"), flat, spec.latent),
            spec,
            shapes,
        })
    }

    pub fn spec(&self) -> &ConvEncoderSpec {
        &self.spec
    }

    pub fn latent(&self) -> usize {
        self.spec.latent
    }

    fn kernel_name(&self, i: usize) -> String {
        format!("{}.conv{i}.w", self.name)
    }

    fn bias_name(&self, i: usize) -> String {
        format!("{}.conv{i}.b", self.name)
    }

    pub fn num_params(&self) -> usize {
        let convs: usize = self
            .spec
            .layers
            .iter()
            .zip(&self.shapes)
            .map(|(l, s)| l.channels * (s[0] * l.kernel * l.kernel + 1))
            .sum();
        convs + self.head.num_params()
    }

    pub fn init(&self, bundle: &mut ParamBundle, rng: &mut impl Rng) -> Result<()> {
        for (i, (l, s)) in self.spec.layers.iter().zip(&self.shapes).enumerate() {
            let fan_in = s[0] * l.kernel * l.kernel;
            let bound = 1.0 / (fan_in as f64).sqrt();
            bundle.insert(
                self.kernel_name(i),
                uniform(&[l.channels, s[0], l.kernel, l.kernel], bound, rng),
            )?;
            bundle.insert(self.bias_name(i), uniform(&[l.channels], bound, rng))?;
        }
        self.head.init(bundle, rng)
    }

    /// Encode a `[C, H, W]` node.
    pub fn forward(&self, tape: &mut Tape, params: &BoundParams, x: NodeId) -> Result<NodeId> {
        let expected = self.shapes[0];
        if tape.shape(x) != expected {
            return Err(Error::contract(format!(
                "encoder expects a {:?} image, got {:?}",
                expected,
                tape.shape(x)
            )));
        }
        let mut h = x;
        for (i, l) in self.spec.layers.iter().enumerate() {
            let w = params.get(&self.kernel_name(i))?;
            let b = params.get(&self.bias_name(i))?;
            let [_, ho, wo] = self.shapes[i + 1];
            let y = tape.conv2d(h, w, l.stride)?;
            let bias = tape.channel_broadcast(b, ho, wo)?;
            let y = tape.add(y, bias)?;
            h = tape.relu(y)?;
        }
        let flat = self.head.input();
        let h = tape.reshape(h, &[flat])?;
        self.head.forward(tape, params, h)
    }

    /// Encode an `[H, W, C]` image tensor recorded as a constant. Pixels in
    /// `[0, 1]` are centered to `[-1, 1]` first.
    pub fn encode_image(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        image: &Tensor,
    ) -> Result<NodeId> {
        let chw = image_to_chw(image)?.map(|v| 2.0 * v - 1.0);
        let x = tape.constant(chw);
        self.forward(tape, params, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_stage_shapes() {
        let shapes = ConvEncoderSpec::default().stage_shapes().unwrap();
        let hw: Vec<_> = shapes.iter().map(|s| s[1]).collect();
        assert_eq!(hw, vec![84, 41, 20, 9, 4]);
        assert_eq!(ConvEncoderSpec::default().flattened_width().unwrap(), 512);
    }

    #[test]
    fn encoder_output_width() {
        let enc = ConvEncoder::new("enc", ConvEncoderSpec::default()).unwrap();
        let mut bundle = ParamBundle::new();
        enc.init(&mut bundle, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(bundle.num_scalars(), enc.num_params());
        let mut tape = Tape::new();
        let params = bundle.bind(&mut tape, true);
        let image = Tensor::filled(&[84, 84, 3], 0.5);
        let z = enc.encode_image(&mut tape, &params, &image).unwrap();
        assert_eq!(tape.shape(z), &[128]);
        assert!(!tape.value(z).has_non_finite());
    }

    #[test]
    fn rejects_non_shrinking_stage() {
        let spec = ConvEncoderSpec {
            height: 8,
            width: 8,
            channels: 1,
            layers: vec![ConvLayerSpec {
                channels: 2,
                kernel: 1,
                stride: 1,
            }],
            latent: 4,
        };
        assert!(matches!(spec.stage_shapes(), Err(Error::Contract(_))));
    }

    #[test]
    fn chw_layout() {
        let image = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let chw = image_to_chw(&image).unwrap();
        assert_eq!(chw.shape(), &[2, 1, 2]);
        assert_eq!(chw.data(), &[1.0, 3.0, 2.0, 4.0]);
    }
}
