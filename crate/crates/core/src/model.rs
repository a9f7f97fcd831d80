//! Multilayer perceptron backbone and its binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic  b"CSLM"
//! u32    format version (1)
//! u32    config length, then that many bytes of JSON-encoded MlpConfig
//! u32    tensor count
//! per tensor: u32 rank, rank × u64 dims, then the f64 values
//! ```

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CSLM";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_layers: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub seed: u64,
}

impl MlpConfig {
    pub fn new(input_dim: usize, hidden_layers: Vec<usize>, output_dim: usize, seed: u64) -> Self {
        Self {
            input_dim,
            hidden_layers,
            output_dim,
            activation: Activation::Relu,
            seed,
        }
    }

    /// Layer widths from input to output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden_layers);
        w.push(self.output_dim);
        w
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `fan_in × fan_out`
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    config: MlpConfig,
    layers: Vec<Layer>,
}

/// Tape handles for one registration of a model's parameters.
#[derive(Clone, Debug)]
pub struct ModelVars {
    layers: Vec<(Var, Var)>,
}

impl ModelVars {
    /// Pairs `[w0, b0, w1, b1, ...]` into layers.
    pub fn from_vars(vars: &[Var]) -> Result<Self> {
        if vars.is_empty() || !vars.len().is_multiple_of(2) {
            return Err(Error::Config(format!(
                "expected weight/bias pairs, got {} vars",
                vars.len()
            )));
        }
        Ok(Self {
            layers: vars.chunks(2).map(|p| (p[0], p[1])).collect(),
        })
    }

    /// Parameter handles in the same order as [`ModelState::tensors_mut`].
    pub fn params(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }
}

impl ModelState {
    /// Glorot-uniform weights, zero biases; deterministic per `config.seed`.
    pub fn init(config: MlpConfig) -> Result<Self> {
        let widths = config.widths();
        if widths.contains(&0) {
            return Err(Error::Config(format!("zero-width layer in {widths:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let layers = widths
            .windows(2)
            .map(|pair| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..=bound))
                    .collect();
                Ok(Layer {
                    weight: Tensor::matrix(fan_in, fan_out, data)?,
                    bias: Tensor::zeros(&[fan_out]),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { config, layers })
    }

    pub fn from_layers(config: MlpConfig, layers: Vec<Layer>) -> Result<Self> {
        let widths = config.widths();
        if layers.len() + 1 != widths.len() {
            return Err(Error::Config(format!(
                "{} layers do not match widths {widths:?}",
                layers.len()
            )));
        }
        for (layer, pair) in layers.iter().zip(widths.windows(2)) {
            if layer.weight.shape() != pair || layer.bias.shape() != [pair[1]] {
                return Err(Error::shape("layer", layer.weight.shape(), pair));
            }
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().all(Tensor::all_finite)
    }

    pub fn register(&self, tape: &mut Tape) -> ModelVars {
        ModelVars {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.param(l.weight.clone()), tape.param(l.bias.clone())))
                .collect(),
        }
    }

    /// Affine+ReLU chain with a purely affine last layer.
    pub fn forward(&self, tape: &mut Tape, vars: &ModelVars, x: Var) -> Result<Var> {
        self.check_input(tape.shape(x))?;
        let mut h = x;
        let last = vars.layers.len() - 1;
        for (i, &(w, b)) in vars.layers.iter().enumerate() {
            let z = tape.matmul(h, w)?;
            h = tape.add_bias(z, b)?;
            if i < last {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Same computation as [`ModelState::forward`] without recording anything.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x.shape())?;
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = h.matmul(&layer.weight)?.add_row_vector(&layer.bias)?;
            if i < last {
                h = h.relu();
            }
        }
        Ok(h)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        match shape {
            [_, w] if *w == self.config.input_dim => Ok(()),
            _ => Err(Error::shape("forward", shape, &[0, self.config.input_dim])),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = serde_json::to_vec(&self.config)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(&config);
        let tensors: Vec<&Tensor> = self.tensors().collect();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for t in tensors {
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(r.error("bad magic"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(r.error(&format!("unsupported checkpoint version {version}")));
        }
        let clen = r.u32()? as usize;
        let config: MlpConfig = serde_json::from_slice(r.take(clen)?)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            tensors.push(Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(r.error("trailing bytes"));
        }
        if !count.is_multiple_of(2) {
            return Err(r.error("odd tensor count"));
        }
        let mut it = tensors.into_iter();
        let mut layers = Vec::new();
        while let (Some(weight), Some(bias)) = (it.next(), it.next()) {
            layers.push(Layer { weight, bias });
        }
        Self::from_layers(config, layers)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error(&self, message: &str) -> Error {
        Error::Format {
            path: "<checkpoint>".into(),
            line: 0,
            message: format!("{message} at byte {}", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.error("truncated checkpoint"));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = MlpConfig::new(10, vec![8], 4, 42);
        let a = ModelState::init(cfg.clone()).unwrap();
        let b = ModelState::init(cfg).unwrap();
        assert_eq!(a, b);
        let bound = (6.0f64 / 18.0).sqrt();
        assert!(a.layers()[0].weight.data().iter().all(|w| w.abs() <= bound));
        assert!(a.layers()[0].bias.data().iter().all(|&v| v == 0.0));
        assert_eq!(a.param_count(), 124);
    }

    #[test]
    fn no_hidden_layers_is_one_linear_map() {
        let m = ModelState::init(MlpConfig::new(3, vec![], 5, 0)).unwrap();
        assert_eq!(m.layers().len(), 1);
        assert_eq!(m.layers()[0].weight.shape(), &[3, 5]);
    }

    #[test]
    fn zero_width_is_rejected() {
        assert!(ModelState::init(MlpConfig::new(3, vec![0], 2, 0)).is_err());
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let cfg = MlpConfig::new(2, vec![3], 2, 0);
        let layers = vec![
            Layer {
                weight: Tensor::zeros(&[2, 3]),
                bias: Tensor::zeros(&[3]),
            },
            Layer {
                weight: Tensor::zeros(&[3, 2]),
                bias: Tensor::zeros(&[2]),
            },
        ];
        let m = ModelState::from_layers(cfg, layers).unwrap();
        let out = m
            .predict(&Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap())
            .unwrap();
        assert_eq!(out.data(), &[0.0, 0.0]);
    }

    #[test]
    fn identity_linear_layer_passes_input_through() {
        let cfg = MlpConfig::new(3, vec![], 3, 0);
        let m = ModelState::from_layers(
            cfg,
            vec![Layer {
                weight: Tensor::identity(3),
                bias: Tensor::zeros(&[3]),
            }],
        )
        .unwrap();
        let x = Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, -0.5]).unwrap();
        assert_eq!(m.predict(&x).unwrap(), x);
    }

    #[test]
    fn hand_computed_hidden_layer() {
        // x = [1, -1]; W1 = [[1, 2], [3, 4]], b1 = [0.5, 0]
        // z1 = [1 - 3 + 0.5, 2 - 4] = [-1.5, -2] -> relu = [0, 0]... pick W1 so one unit fires:
        // W1 = [[2, 1], [1, 3]]: z1 = [2 - 1 + 0.5, 1 - 3] = [1.5, -2] -> [1.5, 0]
        // W2 = [[2], [5]], b2 = [-1]: out = 1.5 * 2 - 1 = 2
        let cfg = MlpConfig::new(2, vec![2], 1, 0);
        let m = ModelState::from_layers(
            cfg,
            vec![
                Layer {
                    weight: Tensor::matrix(2, 2, vec![2.0, 1.0, 1.0, 3.0]).unwrap(),
                    bias: Tensor::vector(vec![0.5, 0.0]),
                },
                Layer {
                    weight: Tensor::matrix(2, 1, vec![2.0, 5.0]).unwrap(),
                    bias: Tensor::vector(vec![-1.0]),
                },
            ],
        )
        .unwrap();
        let x = Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap();
        assert_eq!(m.predict(&x).unwrap().data(), &[2.0]);

        let mut tape = Tape::new();
        let vars = m.register(&mut tape);
        let xv = tape.constant(x);
        let out = m.forward(&mut tape, &vars, xv).unwrap();
        assert_eq!(tape.value(out).data(), &[2.0]);
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let m = ModelState::init(MlpConfig::new(4, vec![3], 2, 0)).unwrap();
        assert!(m.predict(&Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = ModelState::init(MlpConfig::new(5, vec![7, 3], 4, 9)).unwrap();
        let bytes = m.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"CSLM");
        assert_eq!(ModelState::from_bytes(&bytes).unwrap(), m);
        assert!(ModelState::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ModelState::from_bytes(&bad).is_err());
    }
}
