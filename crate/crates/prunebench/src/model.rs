//! Masked network representation, the CNN5 builder, inference, and
//! sparsity accounting.

use std::io::Read;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Padding, Tape, Tensor};

const CHECKPOINT_MAGIC: &[u8; 4] = b"PBCK";
const CHECKPOINT_VERSION: u32 = 1;

/// A weight array paired with a binary pruning mask of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedParameter {
    pub values: Tensor,
    pub mask: Tensor,
    pub prunable: bool,
}

impl MaskedParameter {
    pub fn new(values: Tensor, prunable: bool) -> Self {
        let mask = Tensor::filled(values.shape(), 1.0);
        MaskedParameter {
            values,
            mask,
            prunable,
        }
    }

    /// values ⊙ mask, the weights actually used in every forward pass.
    pub fn effective(&self) -> Tensor {
        self.values
            .zip_map(&self.mask, |v, m| v * m)
            .expect("mask shape matches values by construction")
    }

    pub fn nonzero_mask_count(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m != 0.0).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv {
        stride: usize,
        padding: Padding,
        pool_after: bool,
    },
    Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub relu: bool,
    pub weights: MaskedParameter,
    pub bias: MaskedParameter,
}

impl Layer {
    pub fn is_conv(&self) -> bool {
        matches!(self.kind, LayerKind::Conv { .. })
    }
}

/// Sparsity accounting over the prunable parameters of a network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsityStat {
    pub total: usize,
    pub nonzero: usize,
}

impl SparsityStat {
    pub fn compression_rate(&self) -> f64 {
        self.total as f64 / self.nonzero as f64
    }
}

/// Ordered stack of masked layers ending in `class_count` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedNetwork {
    pub layers: Vec<Layer>,
    pub class_count: usize,
    pub input_shape: (usize, usize, usize),
}

/// CNN5: conv5x5(16) -> relu -> pool -> conv5x5(32) -> relu -> pool
/// -> flatten -> dense(128) -> relu -> dense(64) -> relu -> dense(classes).
pub fn build_cnn5(
    input: (usize, usize, usize),
    classes: usize,
    seed: u64,
) -> Result<MaskedNetwork> {
    let (h, w, c) = input;
    if h < 20 || w < 20 {
        return Err(Error::Dimension(format!(
            "CNN5 needs at least 20x20 input, got {}x{}",
            h, w
        )));
    }
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::Dimension(format!(
            "CNN5 pools twice; input {}x{} must be divisible by 4",
            h, w
        )));
    }
    if classes < 2 {
        return Err(Error::Contract("need at least 2 classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flat = (h / 4) * (w / 4) * 32;
    let conv = |rng: &mut ChaCha8Rng, cin: usize, cout: usize| -> Layer {
        Layer {
            kind: LayerKind::Conv {
                stride: 1,
                padding: Padding::Same,
                pool_after: true,
            },
            relu: true,
            weights: MaskedParameter::new(init_uniform(rng, &[5, 5, cin, cout], 5 * 5 * cin), true),
            bias: MaskedParameter::new(Tensor::zeros(&[cout]), false),
        }
    };
    let dense = |rng: &mut ChaCha8Rng, din: usize, dout: usize, relu: bool| -> Layer {
        Layer {
            kind: LayerKind::Dense,
            relu,
            weights: MaskedParameter::new(init_uniform(rng, &[din, dout], din), true),
            bias: MaskedParameter::new(Tensor::zeros(&[dout]), false),
        }
    };
    let layers = vec![
        conv(&mut rng, c, 16),
        conv(&mut rng, 16, 32),
        dense(&mut rng, flat, 128, true),
        dense(&mut rng, 128, 64, true),
        dense(&mut rng, 64, classes, false),
    ];
    Ok(MaskedNetwork {
        layers,
        class_count: classes,
        input_shape: input,
    })
}

fn init_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let limit = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("static shape")
}

impl MaskedNetwork {
    /// Record the full forward pass on `tape` starting from input node `x`,
    /// returning the logits node and the effective-parameter leaves in
    /// canonical order (w0, b0, w1, b1, ...).
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<(NodeId, Vec<NodeId>)> {
        let mut cur = x;
        let mut params = Vec::with_capacity(self.layers.len() * 2);
        for layer in &self.layers {
            let w = tape.leaf(layer.weights.effective());
            let b = tape.leaf(layer.bias.effective());
            params.push(w);
            params.push(b);
            cur = match layer.kind {
                LayerKind::Conv {
                    stride,
                    padding,
                    pool_after,
                } => {
                    let y = tape.conv2d(cur, w, b, stride, padding)?;
                    let y = if layer.relu { tape.relu(y) } else { y };
                    if pool_after {
                        tape.maxpool2(y)?
                    } else {
                        y
                    }
                }
                LayerKind::Dense => {
                    let shape = tape.value(cur).shape().to_vec();
                    let cur2 = if shape.len() > 2 {
                        let n = shape[0];
                        let rest: usize = shape[1..].iter().product();
                        tape.reshape(cur, vec![n, rest])?
                    } else {
                        cur
                    };
                    let y = tape.affine(cur2, w, b)?;
                    if layer.relu {
                        tape.relu(y)
                    } else {
                        y
                    }
                }
            };
        }
        Ok((cur, params))
    }

    /// Pre-softmax scores for a batch [n,h,w,c] (or [n,d] for dense-only nets).
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let (out, _) = self.forward(&mut tape, xid)?;
        Ok(tape.value(out).clone())
    }

    /// Argmax class per batch row; ties resolve to the lowest index.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok(argmax_rows(&logits))
    }

    pub fn predict_one(&self, x: &Tensor) -> Result<usize> {
        let batched = ensure_batched(x, self.input_shape)?;
        Ok(self.predict(&batched)?[0])
    }

    pub fn sparsity(&self) -> SparsityStat {
        let mut total = 0;
        let mut nonzero = 0;
        for p in self.parameters().filter(|p| p.prunable) {
            total += p.values.len();
            nonzero += p.nonzero_mask_count();
        }
        SparsityStat { total, nonzero }
    }

    pub fn parameters(&self) -> impl Iterator<Item = &MaskedParameter> {
        self.layers.iter().flat_map(|l| [&l.weights, &l.bias])
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut MaskedParameter> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weights, &mut l.bias])
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().map(|p| p.values.len()).sum()
    }

    /// Textual per-layer mask summary for diffing: `layer<TAB>total<TAB>nonzero`.
    pub fn mask_summary(&self) -> String {
        let mut s = String::new();
        for (i, layer) in self.layers.iter().enumerate() {
            s.push_str(&format!(
                "{}\t{}\t{}\n",
                i,
                layer.weights.values.len(),
                layer.weights.nonzero_mask_count()
            ));
        }
        s
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        buf.write_u32::<LittleEndian>(self.class_count as u32)?;
        buf.write_u32::<LittleEndian>(self.input_shape.0 as u32)?;
        buf.write_u32::<LittleEndian>(self.input_shape.1 as u32)?;
        buf.write_u32::<LittleEndian>(self.input_shape.2 as u32)?;
        buf.write_u32::<LittleEndian>(self.layers.len() as u32)?;
        for layer in &self.layers {
            match layer.kind {
                LayerKind::Conv {
                    stride,
                    padding,
                    pool_after,
                } => {
                    buf.push(0);
                    buf.push(stride as u8);
                    buf.push(match padding {
                        Padding::Same => 0,
                        Padding::Valid => 1,
                    });
                    buf.push(pool_after as u8);
                }
                LayerKind::Dense => buf.push(1),
            }
            buf.push(layer.relu as u8);
            write_param(&mut buf, &layer.weights)?;
            write_param(&mut buf, &layer.bias)?;
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<MaskedNetwork> {
        let bytes = std::fs::read(path)?;
        let mut r = std::io::Cursor::new(&bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("checkpoint truncated before magic".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {:?}", magic)));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", version)));
        }
        let class_count = read_u32(&mut r)? as usize;
        let ih = read_u32(&mut r)? as usize;
        let iw = read_u32(&mut r)? as usize;
        let ic = read_u32(&mut r)? as usize;
        let layer_count = read_u32(&mut r)? as usize;
        let mut layers = Vec::with_capacity(layer_count);
        for _ in 0..layer_count {
            let tag = read_u8(&mut r)?;
            let kind = match tag {
                0 => {
                    let stride = read_u8(&mut r)? as usize;
                    let padding = match read_u8(&mut r)? {
                        0 => Padding::Same,
                        1 => Padding::Valid,
                        p => return Err(Error::Format(format!("bad padding tag {}", p))),
                    };
                    let pool_after = read_u8(&mut r)? != 0;
                    LayerKind::Conv {
                        stride,
                        padding,
                        pool_after,
                    }
                }
                1 => LayerKind::Dense,
                t => return Err(Error::Format(format!("bad layer tag {}", t))),
            };
            let relu = read_u8(&mut r)? != 0;
            let weights = read_param(&mut r)?;
            let bias = read_param(&mut r)?;
            layers.push(Layer {
                kind,
                relu,
                weights,
                bias,
            });
        }
        Ok(MaskedNetwork {
            layers,
            class_count,
            input_shape: (ih, iw, ic),
        })
    }
}

/// Argmax per row of a [n,C] tensor, lowest index on ties.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let shape = logits.shape();
    let (n, c) = (shape[0], shape[1]);
    let d = logits.data();
    (0..n)
        .map(|i| {
            let row = &d[i * c..(i + 1) * c];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Accept either a single sample (matching the input shape) or an already
/// batched tensor and return the batched form.
pub fn ensure_batched(x: &Tensor, input: (usize, usize, usize)) -> Result<Tensor> {
    let (h, w, c) = input;
    let s = x.shape();
    if s == [h, w, c] || s == [h * w * c] {
        x.reshape(vec![1, h, w, c])
    } else if s.len() == 4 && s[1] == h && s[2] == w && s[3] == c {
        Ok(x.clone())
    } else {
        Err(Error::Dimension(format!(
            "input shape {:?} does not match network input {:?}",
            s, input
        )))
    }
}

fn write_param(buf: &mut Vec<u8>, p: &MaskedParameter) -> Result<()> {
    buf.push(p.values.shape().len() as u8);
    for &e in p.values.shape() {
        buf.write_u32::<LittleEndian>(e as u32)?;
    }
    for &v in p.values.data() {
        buf.write_f64::<LittleEndian>(v)?;
    }
    // mask as packed bits, padded to a whole byte
    let bits = p.mask.data();
    let mut byte = 0u8;
    for (i, &m) in bits.iter().enumerate() {
        if m != 0.0 {
            byte |= 1 << (i % 8);
        }
        if i % 8 == 7 {
            buf.push(byte);
            byte = 0;
        }
    }
    if bits.len() % 8 != 0 {
        buf.push(byte);
    }
    buf.push(p.prunable as u8);
    Ok(())
}

fn read_param(r: &mut std::io::Cursor<&Vec<u8>>) -> Result<MaskedParameter> {
    let ndim = read_u8(r)? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u32(r)? as usize);
    }
    let n: usize = shape.iter().product();
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        values.push(
            r.read_f64::<LittleEndian>()
                .map_err(|_| Error::Format("checkpoint truncated in values".into()))?,
        );
    }
    let nbytes = (n + 7) / 8;
    let mut mask = Vec::with_capacity(n);
    for i in 0..nbytes {
        let byte = read_u8(r)?;
        for bit in 0..8 {
            if i * 8 + bit < n {
                mask.push(((byte >> bit) & 1) as f64);
            }
        }
    }
    let prunable = read_u8(r)? != 0;
    Ok(MaskedParameter {
        values: Tensor::new(shape.clone(), values)
            .map_err(|e| Error::Format(format!("bad parameter payload: {}", e)))?,
        mask: Tensor::new(shape, mask).map_err(|e| Error::Format(format!("bad mask payload: {}", e)))?,
        prunable,
    })
}

fn read_u8(r: &mut std::io::Cursor<&Vec<u8>>) -> Result<u8> {
    r.read_u8()
        .map_err(|_| Error::Format("checkpoint truncated".into()))
}

fn read_u32(r: &mut std::io::Cursor<&Vec<u8>>) -> Result<u32> {
    r.read_u32::<LittleEndian>()
        .map_err(|_| Error::Format("checkpoint truncated".into()))
}
