//! Binary model checkpoints: magic `DAMSLCKPT1`, a u32 format version, then
//! little-endian sections. Every float block is prefixed by its u64 length.

use std::fs;
use std::path::Path;

use super::model::{Metric, Model};
use super::variant::VariantTag;
use crate::baselines::SProtoNet;
use crate::error::{Error, Result};
use crate::gnn::{GnnLayer, MetricNet};
use crate::numerics::{Activation, Layer, Matrix, Mlp};
use crate::scorer::{EncoderHead, OptimizerTag};

pub const MAGIC: &[u8; 10] = b"DAMSLCKPT1";
pub const VERSION: u32 = 1;

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: usize) {
        self.buf.extend_from_slice(&(v as u32).to_le_bytes());
    }

    fn floats(&mut self, v: &[f64]) {
        self.buf.extend_from_slice(&(v.len() as u64).to_le_bytes());
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn activation(&mut self, a: Activation) {
        let (code, slope) = match a {
            Activation::Identity => (0, 0.0),
            Activation::Relu => (1, 0.0),
            Activation::LeakyRelu(s) => (2, s),
            Activation::Tanh => (3, 0.0),
        };
        self.u8(code);
        self.floats(&[slope]);
    }

    fn layer(&mut self, l: &Layer) {
        self.u32(l.weights.rows());
        self.u32(l.weights.cols());
        self.floats(l.weights.data());
        self.floats(&l.biases);
        self.activation(l.activation);
    }

    fn mlp(&mut self, m: &Mlp) {
        self.u32(m.layers().len());
        for l in m.layers() {
            self.layer(l);
        }
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(Error::format(
                None,
                format!(
                    "truncated checkpoint: needed {n} bytes at offset {}",
                    self.pos
                ),
            ));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn floats(&mut self) -> Result<Vec<f64>> {
        let n = u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize;
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::format(None, "section length overflow"))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn activation(&mut self) -> Result<Activation> {
        let code = self.u8()?;
        let slope = self.floats()?;
        let slope = *slope
            .first()
            .ok_or_else(|| Error::format(None, "missing activation slope"))?;
        Ok(match code {
            0 => Activation::Identity,
            1 => Activation::Relu,
            2 => Activation::LeakyRelu(slope),
            3 => Activation::Tanh,
            c => return Err(Error::format(None, format!("unknown activation code {c}"))),
        })
    }

    fn layer(&mut self) -> Result<Layer> {
        let rows = self.u32()?;
        let cols = self.u32()?;
        let weights = Matrix::from_vec(rows, cols, self.floats()?)
            .map_err(|e| Error::format(None, e.to_string()))?;
        let biases = self.floats()?;
        let act = self.activation()?;
        Layer::new(weights, biases, act).map_err(|e| Error::format(None, e.to_string()))
    }

    fn mlp(&mut self) -> Result<Mlp> {
        let n = self.u32()?;
        let layers = (0..n).map(|_| self.layer()).collect::<Result<Vec<_>>>()?;
        Mlp::new(layers).map_err(|e| Error::format(None, e.to_string()))
    }
}

pub fn encode(model: &Model) -> Vec<u8> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(MAGIC);
    w.buf.extend_from_slice(&VERSION.to_le_bytes());
    w.u8(model.tag().code());
    w.u32(model.n_way());
    w.u32(model.encoders().len());
    for e in model.encoders() {
        w.u8(e.optimizer().code());
        w.mlp(e.adapter());
        w.layer(e.classifier());
    }
    match model.metric() {
        Metric::None => w.u8(0),
        Metric::Graph(net) => {
            w.u8(1);
            w.u32(net.n_way());
            w.u32(net.input_width());
            match net.projection() {
                Some(p) => {
                    w.u8(1);
                    w.layer(p);
                }
                None => w.u8(0),
            }
            w.u32(net.layers().len());
            for l in net.layers() {
                w.mlp(&l.edge);
                w.layer(&l.theta_self);
                w.layer(&l.theta_adj);
                w.activation(l.activation);
            }
            w.layer(net.output());
        }
        Metric::Proto(net) => {
            w.u8(2);
            w.mlp(net.embedding());
        }
    }
    w.buf
}

pub fn decode(data: &[u8]) -> Result<Model> {
    let mut r = Reader { data, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
        return Err(Error::format(None, "not a checkpoint (bad magic header)"));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(
            None,
            format!("checkpoint version {version} found, expected {VERSION}"),
        ));
    }
    let code = r.u8()?;
    let tag = VariantTag::from_code(code)
        .ok_or_else(|| Error::format(None, format!("unknown variant code {code}")))?;
    let n_way = r.u32()?;
    let n_enc = r.u32()?;
    let mut encoders = Vec::with_capacity(n_enc.min(16));
    for _ in 0..n_enc {
        let oc = r.u8()?;
        let opt = OptimizerTag::from_code(oc)
            .ok_or_else(|| Error::format(None, format!("unknown optimizer code {oc}")))?;
        let adapter = r.mlp()?;
        let classifier = r.layer()?;
        encoders.push(
            EncoderHead::new(adapter, classifier, opt)
                .map_err(|e| Error::format(None, e.to_string()))?,
        );
    }
    let metric = match r.u8()? {
        0 => Metric::None,
        1 => {
            let net_way = r.u32()?;
            let width = r.u32()?;
            let projection = match r.u8()? {
                0 => None,
                1 => Some(r.layer()?),
                c => return Err(Error::format(None, format!("bad projection flag {c}"))),
            };
            let n_layers = r.u32()?;
            let mut layers = Vec::with_capacity(n_layers.min(64));
            for _ in 0..n_layers {
                layers.push(GnnLayer {
                    edge: r.mlp()?,
                    theta_self: r.layer()?,
                    theta_adj: r.layer()?,
                    activation: r.activation()?,
                });
            }
            let output = r.layer()?;
            Metric::Graph(
                MetricNet::from_parts(net_way, width, projection, layers, output)
                    .map_err(|e| Error::format(None, e.to_string()))?,
            )
        }
        2 => Metric::Proto(SProtoNet::new(r.mlp()?)),
        c => return Err(Error::format(None, format!("unknown metric kind {c}"))),
    };
    if r.pos != data.len() {
        return Err(Error::format(
            None,
            format!("{} trailing bytes after checkpoint", data.len() - r.pos),
        ));
    }
    Model::new(tag, n_way, encoders, metric).map_err(|e| Error::format(None, e.to_string()))
}

pub fn checkpoint_save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn checkpoint_load(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&data).map_err(|e| e.context(path.display()))
}
