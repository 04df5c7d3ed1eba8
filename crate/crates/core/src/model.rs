//! Small layered image classifiers and their checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes   "RLFATMDL"
//! version   u32       1
//! spec_len  u32       byte length of the JSON-encoded ModelSpec
//! spec      spec_len  UTF-8 JSON
//! count     u64       total number of parameter scalars
//! params    count*4   f32 values, tensors in declaration order, row-major
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RLFATMDL";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Conv {
        out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        size: usize,
    },
    GlobalAvgPool,
    Flatten,
    Dense {
        out: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// `(channels, height, width)`.
    pub input: [usize; 3],
    pub classes: usize,
    pub layers: Vec<Layer>,
    pub seed: u64,
}

impl ModelSpec {
    /// conv(16)-relu-pool-conv(32)-relu-pool-dense(128)-relu-dense(classes).
    pub fn desk(input: [usize; 3], classes: usize, seed: u64) -> Self {
        Self::convnet(input, classes, &[16, 32], 128, seed)
    }

    /// 3x3 same-padded conv blocks, each followed by relu and 2x2 max pooling,
    /// then one hidden dense layer.
    pub fn convnet(input: [usize; 3], classes: usize, conv_widths: &[usize], hidden: usize, seed: u64) -> Self {
        let mut layers = Vec::new();
        for &out in conv_widths {
            layers.push(Layer::Conv {
                out,
                kernel: 3,
                stride: 1,
                padding: 1,
            });
            layers.push(Layer::Relu);
            layers.push(Layer::MaxPool { size: 2 });
        }
        layers.push(Layer::Flatten);
        if hidden > 0 {
            layers.push(Layer::Dense { out: hidden });
            layers.push(Layer::Relu);
        }
        layers.push(Layer::Dense { out: classes });
        Self {
            input,
            classes,
            layers,
            seed,
        }
    }

    /// Linear-softmax classifier `f(x) = W x + b`.
    pub fn linear(input: [usize; 3], classes: usize, seed: u64) -> Self {
        Self {
            input,
            classes,
            layers: vec![Layer::Flatten, Layer::Dense { out: classes }],
            seed,
        }
    }

    /// Parameter tensor shapes in declaration order, validating the plan.
    pub fn param_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.classes < 2 {
            return Err(Error::invalid(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.input.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("degenerate input shape {:?}", self.input)));
        }
        let mut shapes = Vec::new();
        // Either (c, h, w) or a flat width.
        let mut cur = Activation::Image(self.input);
        for layer in &self.layers {
            cur = match (*layer, cur) {
                (Layer::Conv { out, kernel, stride, padding }, Activation::Image([c, h, w])) => {
                    if out == 0 || kernel == 0 || stride == 0 {
                        return Err(Error::invalid(format!("degenerate layer {layer:?}")));
                    }
                    let g = kernels::ConvGeometry::new(&[1, c, h, w], &[out, c, kernel, kernel], stride, padding)
                        .ok_or_else(|| Error::invalid(format!("{layer:?} does not fit input {c}x{h}x{w}")))?;
                    shapes.push(vec![out, c, kernel, kernel]);
                    shapes.push(vec![out]);
                    Activation::Image([out, g.out_h, g.out_w])
                }
                (Layer::Relu, a) => a,
                (Layer::MaxPool { size }, Activation::Image([c, h, w])) => {
                    if size == 0 || size > h || size > w {
                        return Err(Error::invalid(format!("pool {size} does not fit {h}x{w}")));
                    }
                    Activation::Image([c, h / size, w / size])
                }
                (Layer::GlobalAvgPool, Activation::Image([c, _, _])) => Activation::Flat(c),
                (Layer::Flatten, Activation::Image([c, h, w])) => Activation::Flat(c * h * w),
                (Layer::Flatten, a @ Activation::Flat(_)) => a,
                (Layer::Dense { out }, Activation::Flat(n)) => {
                    if out == 0 {
                        return Err(Error::invalid("dense layer of width 0"));
                    }
                    shapes.push(vec![n, out]);
                    shapes.push(vec![out]);
                    Activation::Flat(out)
                }
                (layer, a) => {
                    return Err(Error::invalid(format!("layer {layer:?} cannot follow activation {a:?}")));
                }
            };
        }
        match cur {
            Activation::Flat(n) if n == self.classes => Ok(shapes),
            other => Err(Error::invalid(format!(
                "plan ends in {other:?}, expected {} logits",
                self.classes
            ))),
        }
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self.param_shapes()?.iter().map(|s| s.iter().product::<usize>()).sum())
    }
}

#[derive(Clone, Copy, Debug)]
enum Activation {
    Image([usize; 3]),
    Flat(usize),
}

/// Query-only access to a classifier: values in, values out.
pub trait Classifier<T: Real> {
    fn classes(&self) -> usize;

    fn input_shape(&self) -> [usize; 3];

    /// `[batch, classes]` logits.
    fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>>;

    fn predict_probs(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let logits = self.logits(x)?;
        let cols = logits.shape()[1];
        Tensor::new(logits.shape().to_vec(), kernels::softmax_rows(logits.data(), cols))
    }

    fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.argmax_rows())
    }
}

/// A classifier that can be placed on a [`Graph`] so gradients w.r.t. its
/// input are available. Attacks that need gradients require this trait.
pub trait Differentiable<T: Real>: Classifier<T> {
    /// Forward pass with the model's parameters held constant.
    fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    spec: ModelSpec,
    params: Vec<Tensor<T>>,
}

impl<T: Real> Model<T> {
    /// He-initialized weights (normal, std `sqrt(2 / fan_in)`), zero biases.
    pub fn build(spec: ModelSpec) -> Result<Self> {
        let shapes = spec.param_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let params = shapes
            .iter()
            .map(|shape| {
                if shape.len() == 1 {
                    return Tensor::zeros(shape);
                }
                // conv weights [out, in, k, k]; dense weights [in, out]
                let fan_in = if shape.len() == 4 {
                    shape[1] * shape[2] * shape[3]
                } else {
                    shape[0]
                };
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                Tensor::from_fn(shape, |_| T::lit(normal.sample(&mut rng)))
            })
            .collect();
        Ok(Self { spec, params })
    }

    pub fn from_params(spec: ModelSpec, params: Vec<Tensor<T>>) -> Result<Self> {
        let shapes = spec.param_shapes()?;
        if shapes.len() != params.len() || shapes.iter().zip(&params).any(|(s, p)| s.as_slice() != p.shape()) {
            return Err(Error::shape("model", "parameters do not match spec"));
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Places the parameters on `g`, as gradient-receiving leaves when
    /// `trainable`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p.clone(), trainable)).collect()
    }

    /// Forward pass with explicitly bound parameters.
    pub fn forward_with(&self, g: &mut Graph<T>, params: &[Var], x: Var) -> Result<Var> {
        self.check_input(g.value(x))?;
        let mut h = x;
        let mut next = params.iter();
        for layer in &self.spec.layers {
            h = match *layer {
                Layer::Conv { stride, padding, .. } => {
                    let (w, b) = (*next.next().unwrap(), *next.next().unwrap());
                    let c = g.conv2d(h, w, stride, padding)?;
                    g.bias_add(c, b)?
                }
                Layer::Relu => g.relu(h)?,
                Layer::MaxPool { size } => g.max_pool(h, size)?,
                Layer::GlobalAvgPool => g.global_avg_pool(h)?,
                Layer::Flatten => g.flatten(h)?,
                Layer::Dense { .. } => {
                    let (w, b) = (*next.next().unwrap(), *next.next().unwrap());
                    let m = g.matmul(h, w)?;
                    g.bias_add(m, b)?
                }
            };
        }
        Ok(h)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let [c, h, w] = self.spec.input;
        let s = x.shape();
        if s.len() != 4 || s[1..] != [c, h, w] {
            return Err(Error::shape(
                "model input",
                format!("expected [batch, {c}, {h}, {w}], got {s:?}"),
            ));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_checkpoint(&mut file).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(&mut bytes.as_slice())
    }

    pub fn write_checkpoint(&self, w: &mut impl Write) -> std::io::Result<()> {
        let spec = serde_json::to_vec(&self.spec).expect("spec serializes");
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(spec.len() as u32).to_le_bytes())?;
        w.write_all(&spec)?;
        w.write_all(&(self.param_count() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.param_count() * 4);
        for p in &self.params {
            for v in p.data() {
                buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        w.write_all(&buf)
    }

    pub fn read_checkpoint(r: &mut impl Read) -> Result<Self> {
        let bad = |d: &str| Error::format("checkpoint", d.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(|_| bad("truncated header"))?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        r.read_exact(&mut word).map_err(|_| bad("truncated header"))?;
        let mut spec = vec![0u8; u32::from_le_bytes(word) as usize];
        r.read_exact(&mut spec).map_err(|_| bad("truncated spec"))?;
        let spec: ModelSpec = serde_json::from_slice(&spec).map_err(|e| bad(&format!("spec: {e}")))?;
        let shapes = spec.param_shapes()?;
        let mut count = [0u8; 8];
        r.read_exact(&mut count).map_err(|_| bad("truncated header"))?;
        let count = u64::from_le_bytes(count) as usize;
        let expected: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        if count != expected {
            return Err(bad(&format!("{count} parameters stored, spec needs {expected}")));
        }
        let mut payload = vec![0u8; count * 4];
        r.read_exact(&mut payload).map_err(|_| bad("truncated parameters"))?;
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(|_| bad("read failure"))? != 0 {
            return Err(bad("trailing bytes"));
        }
        let mut values = payload
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64));
        let params = shapes
            .iter()
            .map(|s| Tensor::from_fn(s, |_| values.next().unwrap()))
            .collect();
        Ok(Self { spec, params })
    }
}

impl<T: Real> Classifier<T> for Model<T> {
    fn classes(&self) -> usize {
        self.spec.classes
    }

    fn input_shape(&self) -> [usize; 3] {
        self.spec.input
    }

    fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, xv)?;
        Ok(g.value(out).clone())
    }
}

impl<T: Real> Differentiable<T> for Model<T> {
    fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let params = self.bind(g, false);
        self.forward_with(g, &params, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mnist_spec() -> ModelSpec {
        ModelSpec::desk([1, 28, 28], 10, 7)
    }

    #[test]
    fn build_is_deterministic() {
        let a = Model::<f32>::build(mnist_spec()).unwrap();
        let b = Model::<f32>::build(mnist_spec()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn desk_param_count_matches_hand_count() {
        // conv1: 16*1*3*3 + 16 = 160
        // conv2: 32*16*3*3 + 32 = 4640
        // dense1: (32*7*7)*128 + 128 = 200832
        // dense2: 128*10 + 10 = 1290
        assert_eq!(mnist_spec().param_count().unwrap(), 160 + 4640 + 200_832 + 1290);
    }

    #[test]
    fn logits_shape_and_zero_model() {
        let mut m = Model::<f64>::build(mnist_spec()).unwrap();
        let x = Tensor::full(&[3, 1, 28, 28], 0.3);
        assert_eq!(m.logits(&x).unwrap().shape(), &[3, 10]);
        for p in m.params_mut() {
            p.data_mut().fill(0.0);
        }
        let logits = m.logits(&x).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let probs = m.predict_probs(&x).unwrap();
        assert!(probs.data().iter().all(|&v| v == 0.1));
    }

    #[test]
    fn degenerate_specs_rejected() {
        let mut spec = mnist_spec();
        spec.layers[0] = Layer::Conv {
            out: 0,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        assert!(Model::<f32>::build(spec).is_err());
        let mut spec = mnist_spec();
        spec.classes = 1;
        assert!(Model::<f32>::build(spec).is_err());
        let mut spec = mnist_spec();
        spec.layers.pop();
        assert!(Model::<f32>::build(spec).is_err());
    }

    #[test]
    fn wrong_input_shape_is_an_error() {
        let m = Model::<f32>::build(mnist_spec()).unwrap();
        assert!(matches!(
            m.logits(&Tensor::zeros(&[2, 3, 28, 28])),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let m = Model::<f32>::build(ModelSpec::linear([1, 4, 4], 3, 1)).unwrap();
        let mut bytes = Vec::new();
        m.write_checkpoint(&mut bytes).unwrap();
        assert_eq!(Model::<f32>::read_checkpoint(&mut bytes.as_slice()).unwrap(), m);

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(Model::<f32>::read_checkpoint(&mut bad_magic.as_slice()).is_err());
        let truncated = &bytes[..bytes.len() - 3];
        assert!(Model::<f32>::read_checkpoint(&mut &truncated[..]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(Model::<f32>::read_checkpoint(&mut long.as_slice()).is_err());
    }
}
