use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::{Error, Reaction, Result};

pub const DEFAULT_HIDDEN: [usize; 3] = [512, 256, 128];
pub const OUTPUTS: usize = 3;

const MAGIC: &[u8; 4] = b"EMLP";
const CHECKPOINT_VERSION: u32 = 1;

/// Dense layer with row-major weights (`outputs` rows of `inputs` columns).
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (row, b) in self.weights.chunks_exact(self.inputs).zip(&self.biases) {
            out.push(b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>());
        }
    }
}

/// Three ReLU hidden layers and a three-way softmax output over
/// (ethical, unethical, unclear).
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub seed: u64,
    layers: Vec<Layer>,
}

/// Gradient of the loss with respect to every model parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases))
            .fold(0.0, |m, g| m.max(g.abs()))
    }
}

fn dims_of(input: usize, hidden: [usize; 3]) -> [usize; 5] {
    [input, hidden[0], hidden[1], hidden[2], OUTPUTS]
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

impl MlpModel {
    /// He-uniform weights, zero biases.
    pub fn new(input_dim: usize, hidden: [usize; 3], seed: u64) -> Result<Self> {
        let dims = dims_of(input_dim, hidden);
        if dims.contains(&0) {
            return Err(Error::InvalidConfig(format!("layer dims {dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let mut layer = Layer::zeros(w[0], w[1]);
                let limit = (6.0 / w[0] as f64).sqrt();
                for x in &mut layer.weights {
                    *x = rng.gen_range(-limit..limit);
                }
                layer
            })
            .collect();
        Ok(Self { seed, layers })
    }

    pub fn zeros(input_dim: usize, hidden: [usize; 3]) -> Self {
        let dims = dims_of(input_dim, hidden);
        Self {
            seed: 0,
            layers: dims.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
        }
    }

    pub fn from_layers(layers: Vec<Layer>, seed: u64) -> Result<Self> {
        if layers.len() != 4 {
            return Err(Error::InvalidConfig(format!(
                "expected 4 layers, got {}",
                layers.len()
            )));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weights.len() != l.inputs * l.outputs || l.biases.len() != l.outputs {
                return Err(Error::InvalidConfig(format!(
                    "layer {i} has inconsistent shapes"
                )));
            }
            if i > 0 && l.inputs != layers[i - 1].outputs {
                return Err(Error::DimensionMismatch {
                    expected: layers[i - 1].outputs,
                    actual: l.inputs,
                });
            }
        }
        if layers[3].outputs != OUTPUTS {
            return Err(Error::DimensionMismatch {
                expected: OUTPUTS,
                actual: layers[3].outputs,
            });
        }
        Ok(Self { seed, layers })
    }

    pub fn layer_dims(&self) -> [usize; 5] {
        let l = &self.layers;
        [
            l[0].inputs,
            l[0].outputs,
            l[1].outputs,
            l[2].outputs,
            l[3].outputs,
        ]
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Activations of every layer; the last entry holds the logits.
    fn activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.outputs);
            layer.apply(acts.last().unwrap(), &mut out);
            if i + 1 < self.layers.len() {
                for v in &mut out {
                    *v = v.max(0.0);
                }
            }
            acts.push(out);
        }
        acts
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        Ok(self.activations(x).pop().unwrap())
    }

    pub fn forward(&self, x: &[f64]) -> Result<[f64; 3]> {
        let p = softmax(&self.logits(x)?);
        Ok([p[0], p[1], p[2]])
    }

    /// Most probable class; ties go to the lower class index.
    pub fn predict(&self, x: &[f64]) -> Result<Reaction> {
        let p = self.forward(x)?;
        let mut best = 0;
        for i in 1..OUTPUTS {
            if p[i] > p[best] {
                best = i;
            }
        }
        Ok(Reaction::from_index(best).unwrap())
    }

    /// Mean cross-entropy, weighted per class when `class_weights` is given
    /// (normalized by the total weight).
    pub fn loss<X: AsRef<[f64]>>(
        &self,
        batch: &[(X, Reaction)],
        class_weights: Option<[f64; 3]>,
    ) -> Result<f64> {
        let w = class_weights.unwrap_or([1.0; 3]);
        let mut total = 0.0;
        let mut norm = 0.0;
        for (x, y) in batch {
            let z = self.logits(x.as_ref())?;
            let wy = w[y.index()];
            total += wy * (log_sum_exp(&z) - z[y.index()]);
            norm += wy;
        }
        Ok(if norm > 0.0 { total / norm } else { 0.0 })
    }

    /// Exact gradients of [`MlpModel::loss`] by backpropagation.
    pub fn gradients<X: AsRef<[f64]>>(
        &self,
        batch: &[(X, Reaction)],
        class_weights: Option<[f64; 3]>,
    ) -> Result<Gradients> {
        if batch.is_empty() {
            return Err(Error::DegenerateDataset("empty batch".into()));
        }
        let w = class_weights.unwrap_or([1.0; 3]);
        let norm: f64 = batch.iter().map(|(_, y)| w[y.index()]).sum();
        let mut grads = Gradients {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.inputs, l.outputs))
                .collect(),
        };
        if norm <= 0.0 {
            return Ok(grads);
        }
        for (x, y) in batch {
            let x = x.as_ref();
            self.check_dim(x)?;
            let acts = self.activations(x);
            let scale = w[y.index()] / norm;
            let mut delta = softmax(acts.last().unwrap());
            delta[y.index()] -= 1.0;
            for d in &mut delta {
                *d *= scale;
            }
            for li in (0..self.layers.len()).rev() {
                let layer = &self.layers[li];
                let input = &acts[li];
                let g = &mut grads.layers[li];
                for (o, &d) in delta.iter().enumerate() {
                    g.biases[o] += d;
                    let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (gw, &a) in row.iter_mut().zip(input) {
                        *gw += d * a;
                    }
                }
                if li == 0 {
                    break;
                }
                let mut prev = vec![0.0; layer.inputs];
                for (o, &d) in delta.iter().enumerate() {
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (p, &wv) in prev.iter_mut().zip(row) {
                        *p += wv * d;
                    }
                }
                for (p, &a) in prev.iter_mut().zip(input) {
                    if a <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
        Ok(grads)
    }

    /// One gradient-descent step.
    pub fn apply_gradients(&mut self, grads: &Gradients, learning_rate: f64) {
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (w, gw) in l.weights.iter_mut().zip(&g.weights) {
                *w -= learning_rate * gw;
            }
            for (b, gb) in l.biases.iter_mut().zip(&g.biases) {
                *b -= learning_rate * gb;
            }
        }
    }

    /// Checkpoint: magic `EMLP`, u32 version, u64 seed, five u32 layer
    /// dims, then each layer's weights and biases as f64, all little-endian.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        w.write_u64::<LittleEndian>(self.seed)?;
        for d in self.layer_dims() {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for l in &self.layers {
            for v in l.weights.iter().chain(&l.biases) {
                w.write_f64::<LittleEndian>(*v)?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let bad = |m: &str| Error::InvalidCheckpoint(m.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r
            .read_u32::<LittleEndian>()
            .map_err(|_| bad("truncated header"))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let seed = r
            .read_u64::<LittleEndian>()
            .map_err(|_| bad("truncated header"))?;
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = r
                .read_u32::<LittleEndian>()
                .map_err(|_| bad("truncated header"))? as usize;
        }
        if dims[4] != OUTPUTS || dims.contains(&0) {
            return Err(bad(&format!("layer dims {dims:?}")));
        }
        let mut layers = Vec::new();
        for w in dims.windows(2) {
            let mut layer = Layer::zeros(w[0], w[1]);
            for v in layer.weights.iter_mut().chain(layer.biases.iter_mut()) {
                *v = r
                    .read_f64::<LittleEndian>()
                    .map_err(|_| bad("truncated weights"))?;
            }
            layers.push(layer);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(bad("trailing bytes"));
        }
        Self::from_layers(layers, seed)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf).expect("writing to memory");
        buf
    }

    /// SHA-256 of the checkpoint bytes, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        self.write_checkpoint(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_checkpoint(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use Reaction::*;

    fn layer(inputs: usize, outputs: usize, weights: &[f64], biases: &[f64]) -> Layer {
        Layer {
            inputs,
            outputs,
            weights: weights.to_vec(),
            biases: biases.to_vec(),
        }
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = MlpModel::zeros(4, [3, 3, 3]);
        let p = m.forward(&[1.0, -2.0, 3.0, 0.5]).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn toy_forward_matches_hand_calculation() {
        let m = MlpModel::from_layers(
            vec![
                layer(2, 2, &[1.0, -1.0, 2.0, 1.0], &[0.0, -1.0]),
                layer(2, 2, &[1.0, 1.0, -1.0, 2.0], &[1.0, 0.0]),
                layer(2, 2, &[0.0, 1.0, 1.0, 0.0], &[0.0, 0.0]),
                layer(2, 3, &[1.0, 0.0, 0.0, 1.0, 1.0, -1.0], &[0.0, 0.0, 1.0]),
            ],
            0,
        )
        .unwrap();
        // x = (1, 2)
        // h1 = relu(1-2+0, 2+2-1) = (0, 3)
        // h2 = relu(0+3+1, 0+6+0) = (4, 6)
        // h3 = relu(6, 4) = (6, 4)
        // z = (6, 4, 6-4+1) = (6, 4, 3)
        let z = m.logits(&[1.0, 2.0]).unwrap();
        assert_eq!(z, vec![6.0, 4.0, 3.0]);
        let e = [6f64.exp(), 4f64.exp(), 3f64.exp()];
        let s: f64 = e.iter().sum();
        let p = m.forward(&[1.0, 2.0]).unwrap();
        for i in 0..3 {
            assert!((p[i] - e[i] / s).abs() < 1e-15);
        }
        assert_eq!(m.predict(&[1.0, 2.0]).unwrap(), Ethical);
    }

    #[test]
    fn dimension_checks() {
        let m = MlpModel::new(4, [3, 3, 3], 1).unwrap();
        assert!(matches!(
            m.forward(&[1.0; 3]),
            Err(Error::DimensionMismatch {
                expected: 4,
                actual: 3
            })
        ));
        assert_eq!(m.layer_dims(), [4, 3, 3, 3, 3]);
        assert!(MlpModel::new(0, [3, 3, 3], 1).is_err());
    }

    #[test]
    fn output_bias_gradient_vanishes_at_empirical_fit() {
        // A single input repeated with labels in proportion (1/2, 1/4, 1/4);
        // a zero model with output biases log(2), 0, 0 predicts exactly that.
        let mut m = MlpModel::zeros(2, [2, 2, 2]);
        m.layers_mut()[3].biases = vec![2f64.ln(), 0.0, 0.0];
        let x = vec![0.3, -0.7];
        let batch = vec![
            (x.clone(), Ethical),
            (x.clone(), Ethical),
            (x.clone(), Unethical),
            (x.clone(), Unclear),
        ];
        let g = m.gradients(&batch, None).unwrap();
        for b in &g.layers[3].biases {
            assert!(b.abs() < 1e-15);
        }
    }

    #[test]
    fn duplicated_batch_has_same_mean_gradient() {
        let m = MlpModel::new(4, [5, 4, 3], 9).unwrap();
        let batch: Vec<(Vec<f64>, Reaction)> = (0..6)
            .map(|i| {
                let x = (0..4).map(|j| ((i * 4 + j) as f64 * 0.37).sin()).collect();
                (x, Reaction::from_index(i % 3).unwrap())
            })
            .collect();
        let doubled: Vec<_> = batch.iter().chain(&batch).cloned().collect();
        let a = m.gradients(&batch, None).unwrap();
        let b = m.gradients(&doubled, None).unwrap();
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            for (x, y) in la
                .weights
                .iter()
                .chain(&la.biases)
                .zip(lb.weights.iter().chain(&lb.biases))
            {
                assert!((x - y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = MlpModel::new(6, [5, 4, 3], 42).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"EMLP");
        assert_eq!(bytes.len(), 4 + 4 + 8 + 20 + 8 * m.parameter_count());
        let back = MlpModel::read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.digest(), m.digest());

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            MlpModel::read_checkpoint(bad.as_slice()),
            Err(Error::InvalidCheckpoint(_))
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            MlpModel::read_checkpoint(bad.as_slice()),
            Err(Error::InvalidCheckpoint(_))
        ));
        assert!(matches!(
            MlpModel::read_checkpoint(&bytes[..bytes.len() - 3]),
            Err(Error::InvalidCheckpoint(_))
        ));
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = MlpModel::new(8, [6, 5, 4], 3).unwrap();
        assert_eq!(a, MlpModel::new(8, [6, 5, 4], 3).unwrap());
        assert_ne!(a, MlpModel::new(8, [6, 5, 4], 4).unwrap());
    }
}
