//! A five-layer convolutional grid detector small enough to train and
//! attack on a laptop CPU.
//!
//! Weights live in a versioned fixture: a JSON header describing the
//! detector and layer shapes plus a flat little-endian f32 blob.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DetectorAdapter, DetectorDescriptor, RawGridOutput};
use crate::error::{Error, Result};
use crate::image::RgbImage;

pub const FIXTURE_VERSION: &str = "toy-v1";

const BUNDLED_HEADER: &str = include_str!("../../fixtures/toy_detector.json");
const BUNDLED_WEIGHTS: &[u8] = include_bytes!("../../fixtures/toy_detector.bin");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x * super::logistic(x),
            Activation::Identity => x,
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = super::logistic(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.out_channels
    }

    fn out_size(&self, n: usize) -> usize {
        (n + 2 * self.padding - self.kernel) / self.stride + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureHeader {
    pub version: String,
    pub descriptor: DetectorDescriptor,
    pub layers: Vec<LayerSpec>,
    pub dtype: String,
}

/// Channel-major feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_rgb(image: &RgbImage) -> Self {
        let (h, w) = (image.height(), image.width());
        let mut fm = Self::zeros(3, h, w);
        for (i, px) in image.data().chunks_exact(3).enumerate() {
            for c in 0..3 {
                fm.data[c * h * w + i] = px[c];
            }
        }
        fm
    }

    fn to_rgb(&self) -> RgbImage {
        let hw = self.height * self.width;
        let mut data = vec![0.0; hw * 3];
        for i in 0..hw {
            for c in 0..3 {
                data[i * 3 + c] = self.data[c * hw + i];
            }
        }
        RgbImage::from_raw(self.height, self.width, data).expect("3-channel map")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub spec: LayerSpec,
    /// `out x in x k x k`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    fn pre_activation(&self, input: &FeatureMap) -> FeatureMap {
        let s = &self.spec;
        let (oh, ow) = (s.out_size(input.height), s.out_size(input.width));
        let mut out = FeatureMap::zeros(s.out_channels, oh, ow);
        let (ih, iw) = (input.height as isize, input.width as isize);
        let k = s.kernel;
        for oc in 0..s.out_channels {
            let plane = &mut out.data[oc * oh * ow..(oc + 1) * oh * ow];
            plane.iter_mut().for_each(|v| *v = self.bias[oc]);
            for ic in 0..s.in_channels {
                let src = &input.data
                    [ic * input.height * input.width..(ic + 1) * input.height * input.width];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = self.weight[((oc * s.in_channels + ic) * k + ky) * k + kx];
                        for oy in 0..oh {
                            let iy = (oy * s.stride + ky) as isize - s.padding as isize;
                            if iy < 0 || iy >= ih {
                                continue;
                            }
                            let row = &src[iy as usize * input.width..];
                            let orow = &mut plane[oy * ow..(oy + 1) * ow];
                            for (ox, o) in orow.iter_mut().enumerate() {
                                let ix = (ox * s.stride + kx) as isize - s.padding as isize;
                                if ix >= 0 && ix < iw {
                                    *o += wv * row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Given the layer input and the gradient w.r.t. the pre-activation,
    /// returns the input gradient and accumulates parameter gradients into
    /// `param_grad` when provided (weights then bias).
    fn backward(
        &self,
        input: &FeatureMap,
        grad_pre: &FeatureMap,
        mut param_grad: Option<&mut [f64]>,
    ) -> FeatureMap {
        let s = &self.spec;
        let (oh, ow) = (grad_pre.height, grad_pre.width);
        let mut gin = FeatureMap::zeros(input.channels, input.height, input.width);
        let (ih, iw) = (input.height as isize, input.width as isize);
        let k = s.kernel;
        let ihw = input.height * input.width;
        for oc in 0..s.out_channels {
            let gplane = &grad_pre.data[oc * oh * ow..(oc + 1) * oh * ow];
            if let Some(pg) = param_grad.as_deref_mut() {
                pg[s.weight_len() + oc] += gplane.iter().sum::<f64>();
            }
            for ic in 0..s.in_channels {
                let src = &input.data[ic * ihw..(ic + 1) * ihw];
                let dst = &mut gin.data[ic * ihw..(ic + 1) * ihw];
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = ((oc * s.in_channels + ic) * k + ky) * k + kx;
                        let wv = self.weight[widx];
                        let mut wgrad = 0.0;
                        for oy in 0..oh {
                            let iy = (oy * s.stride + ky) as isize - s.padding as isize;
                            if iy < 0 || iy >= ih {
                                continue;
                            }
                            let base = iy as usize * input.width;
                            for ox in 0..ow {
                                let ix = (ox * s.stride + kx) as isize - s.padding as isize;
                                if ix >= 0 && ix < iw {
                                    let g = gplane[oy * ow + ox];
                                    dst[base + ix as usize] += wv * g;
                                    wgrad += src[base + ix as usize] * g;
                                }
                            }
                        }
                        if let Some(pg) = param_grad.as_deref_mut() {
                            pg[widx] += wgrad;
                        }
                    }
                }
            }
        }
        gin
    }
}

/// Activations kept from a forward pass for the backward pass.
pub struct ForwardTrace {
    inputs: Vec<FeatureMap>,
    pre: Vec<FeatureMap>,
    pub output: FeatureMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet {
    pub layers: Vec<ConvLayer>,
}

impl ToyNet {
    /// Deterministic He-style initialisation.
    pub fn init(specs: &[LayerSpec], seed: u64) -> Self {
        use rand::Rng;
        let mut rng = crate::rng::SeedableRng::new(seed).stream();
        let layers = specs
            .iter()
            .map(|s| {
                let fan_in = (s.in_channels * s.kernel * s.kernel) as f64;
                let bound = (6.0 / fan_in).sqrt() * 0.5;
                ConvLayer {
                    spec: s.clone(),
                    weight: (0..s.weight_len())
                        .map(|_| rng.gen_range(-bound..bound))
                        .collect(),
                    bias: vec![0.0; s.out_channels],
                }
            })
            .collect();
        Self { layers }
    }

    pub fn param_len(&self) -> usize {
        self.layers.iter().map(|l| l.spec.param_len()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_len());
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) {
        let mut off = 0;
        for l in &mut self.layers {
            let wl = l.weight.len();
            l.weight.copy_from_slice(&params[off..off + wl]);
            off += wl;
            let bl = l.bias.len();
            l.bias.copy_from_slice(&params[off..off + bl]);
            off += bl;
        }
    }

    pub fn forward_trace(&self, input: FeatureMap) -> ForwardTrace {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut x = input;
        for layer in &self.layers {
            let z = layer.pre_activation(&x);
            let mut y = z.clone();
            y.data
                .iter_mut()
                .for_each(|v| *v = layer.spec.activation.apply(*v));
            inputs.push(std::mem::replace(&mut x, y));
            pre.push(z);
        }
        ForwardTrace {
            inputs,
            pre,
            output: x,
        }
    }

    pub fn forward(&self, input: FeatureMap) -> FeatureMap {
        self.layers.iter().fold(input, |x, layer| {
            let mut z = layer.pre_activation(&x);
            z.data
                .iter_mut()
                .for_each(|v| *v = layer.spec.activation.apply(*v));
            z
        })
    }

    /// Backpropagates `grad_out` (w.r.t. the network output). Returns the
    /// input gradient; fills `param_grad` (same layout as `params`) if given.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        grad_out: &FeatureMap,
        mut param_grad: Option<&mut [f64]>,
    ) -> FeatureMap {
        let offsets: Vec<usize> = self
            .layers
            .iter()
            .scan(0, |acc, l| {
                let o = *acc;
                *acc += l.spec.param_len();
                Some(o)
            })
            .collect();
        let mut g = grad_out.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let act = layer.spec.activation;
            for (gv, z) in g.data.iter_mut().zip(&trace.pre[i].data) {
                *gv *= act.derivative(*z);
            }
            let slot = param_grad
                .as_deref_mut()
                .map(|pg| &mut pg[offsets[i]..offsets[i] + layer.spec.param_len()]);
            g = layer.backward(&trace.inputs[i], &g, slot);
        }
        g
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDetector {
    descriptor: DetectorDescriptor,
    net: ToyNet,
}

impl ToyDetector {
    pub fn new(descriptor: DetectorDescriptor, net: ToyNet) -> Result<Self> {
        descriptor.validate()?;
        let last = net
            .layers
            .last()
            .ok_or_else(|| Error::Detector("network has no layers".into()))?;
        let want = descriptor.boxes_per_cell * descriptor.box_stride();
        if last.spec.out_channels != want {
            return Err(Error::Detector(format!(
                "final layer has {} channels, descriptor needs {want}",
                last.spec.out_channels
            )));
        }
        for pair in net.layers.windows(2) {
            if pair[0].spec.out_channels != pair[1].spec.in_channels {
                return Err(Error::Detector(format!(
                    "layer {} outputs {} channels but {} expects {}",
                    pair[0].spec.name,
                    pair[0].spec.out_channels,
                    pair[1].spec.name,
                    pair[1].spec.in_channels
                )));
            }
        }
        let (mut h, mut w) = descriptor.input_size;
        for l in &net.layers {
            h = l.spec.out_size(h);
            w = l.spec.out_size(w);
        }
        if h != descriptor.grid || w != descriptor.grid {
            return Err(Error::Detector(format!(
                "network maps the input to {h}x{w}, descriptor grid is {}",
                descriptor.grid
            )));
        }
        Ok(Self { descriptor, net })
    }

    /// Default toy architecture: 64x64 RGB in, 4x4 grid, one anchor, three
    /// classes (person, ball, crate).
    pub fn default_descriptor() -> (DetectorDescriptor, Vec<LayerSpec>) {
        let desc = DetectorDescriptor {
            grid: 4,
            boxes_per_cell: 1,
            classes: 3,
            input_size: (64, 64),
            person_class: 0,
            anchors: vec![[1.25, 2.25]],
            class_names: vec!["person".into(), "ball".into(), "crate".into()],
        };
        let conv = |name: &str, i, o, k, s, p, a| LayerSpec {
            name: name.into(),
            in_channels: i,
            out_channels: o,
            kernel: k,
            stride: s,
            padding: p,
            activation: a,
        };
        let layers = vec![
            conv("conv1", 3, 8, 3, 2, 1, Activation::Silu),
            conv("conv2", 8, 16, 3, 2, 1, Activation::Silu),
            conv("conv3", 16, 24, 3, 2, 1, Activation::Silu),
            conv("conv4", 24, 32, 3, 2, 1, Activation::Silu),
            conv("head", 32, 8, 1, 1, 0, Activation::Identity),
        ];
        (desc, layers)
    }

    /// The versioned fixture compiled into the crate.
    pub fn bundled() -> Result<Self> {
        Self::from_bytes(BUNDLED_HEADER, BUNDLED_WEIGHTS)
    }

    pub fn load(header_path: impl AsRef<Path>, weights_path: impl AsRef<Path>) -> Result<Self> {
        let (hp, wp) = (header_path.as_ref(), weights_path.as_ref());
        let header = std::fs::read_to_string(hp).map_err(|e| Error::io(hp, e))?;
        let weights = std::fs::read(wp).map_err(|e| Error::io(wp, e))?;
        Self::from_bytes(&header, &weights)
    }

    /// Loads `<dir>/toy_detector.json` and `<dir>/toy_detector.bin`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        Self::load(dir.join("toy_detector.json"), dir.join("toy_detector.bin"))
    }

    pub fn from_bytes(header: &str, weights: &[u8]) -> Result<Self> {
        let header: FixtureHeader = serde_json::from_str(header)
            .map_err(|e| Error::Detector(format!("fixture header: {e}")))?;
        if header.version != FIXTURE_VERSION {
            return Err(Error::Detector(format!(
                "fixture version {:?}, expected {FIXTURE_VERSION:?}",
                header.version
            )));
        }
        if header.dtype != "f32le" {
            return Err(Error::Detector(format!(
                "unsupported dtype {:?}",
                header.dtype
            )));
        }
        let expected: usize = header.layers.iter().map(LayerSpec::param_len).sum();
        if weights.len() != expected * 4 {
            return Err(Error::Detector(format!(
                "weight blob has {} bytes, layers need {}",
                weights.len(),
                expected * 4
            )));
        }
        let params: Vec<f64> = weights
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let mut net = ToyNet::init(&header.layers, 0);
        net.set_params(&params);
        Self::new(header.descriptor, net)
    }

    pub fn fixture_header(&self) -> FixtureHeader {
        FixtureHeader {
            version: FIXTURE_VERSION.into(),
            descriptor: self.descriptor.clone(),
            layers: self.net.layers.iter().map(|l| l.spec.clone()).collect(),
            dtype: "f32le".into(),
        }
    }

    /// Writes `<dir>/toy_detector.json` and `<dir>/toy_detector.bin`.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let hp = dir.join("toy_detector.json");
        let header = serde_json::to_string_pretty(&self.fixture_header())
            .map_err(|e| Error::json(&hp, e))?;
        std::fs::write(&hp, header + "\n").map_err(|e| Error::io(&hp, e))?;
        let blob: Vec<u8> = self
            .net
            .params()
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect();
        let wp = dir.join("toy_detector.bin");
        std::fs::write(&wp, blob).map_err(|e| Error::io(&wp, e))
    }

    pub fn net(&self) -> &ToyNet {
        &self.net
    }

    /// Rounds every parameter to f32, as stored in the fixture.
    pub fn quantize_f32(&mut self) {
        let p: Vec<f64> = self.net.params().iter().map(|&v| v as f32 as f64).collect();
        self.net.set_params(&p);
    }

    /// Network output map (channels = `B * (5 + C)`) into grid layout.
    pub(crate) fn map_to_raw(&self, out: &FeatureMap) -> RawGridOutput {
        let d = &self.descriptor;
        let mut raw = RawGridOutput::zeros(d);
        let s = d.grid;
        for ch in 0..out.channels {
            let (b, k) = (ch / d.box_stride(), ch % d.box_stride());
            for row in 0..s {
                for col in 0..s {
                    let idx = (row * s + col) * d.boxes_per_cell + b;
                    raw.box_values_mut(idx)[k] = out.data[(ch * s + row) * s + col];
                }
            }
        }
        raw
    }

    pub(crate) fn raw_to_map(&self, raw: &RawGridOutput) -> FeatureMap {
        let d = &self.descriptor;
        let s = d.grid;
        let mut out = FeatureMap::zeros(d.boxes_per_cell * d.box_stride(), s, s);
        for ch in 0..out.channels {
            let (b, k) = (ch / d.box_stride(), ch % d.box_stride());
            for row in 0..s {
                for col in 0..s {
                    let idx = (row * s + col) * d.boxes_per_cell + b;
                    out.data[(ch * s + row) * s + col] = raw.box_values(idx)[k];
                }
            }
        }
        out
    }

    pub(crate) fn with_net(&self, net: ToyNet) -> Self {
        Self {
            descriptor: self.descriptor.clone(),
            net,
        }
    }
}

impl DetectorAdapter for ToyDetector {
    fn descriptor(&self) -> &DetectorDescriptor {
        &self.descriptor
    }

    fn forward(&self, image: &RgbImage) -> Result<RawGridOutput> {
        self.check_input(image)?;
        let out = self.net.forward(FeatureMap::from_rgb(image));
        Ok(self.map_to_raw(&out))
    }

    fn backward(&self, image: &RgbImage, upstream: &RawGridOutput) -> Result<RgbImage> {
        self.check_input(image)?;
        if upstream.data.len() != self.descriptor.raw_len() {
            return Err(Error::Shape {
                expected: format!("{} upstream values", self.descriptor.raw_len()),
                actual: format!("{}", upstream.data.len()),
            });
        }
        let trace = self.net.forward_trace(FeatureMap::from_rgb(image));
        let g = self.net.backward(&trace, &self.raw_to_map(upstream), None);
        Ok(g.to_rgb())
    }
}
