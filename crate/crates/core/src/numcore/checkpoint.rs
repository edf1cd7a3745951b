//! Parameter checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        6 bytes   "LRETv1"
//! scale        1 byte    'H' | 'L'
//! component    3 bytes   "enc" | "att" | "clf" | "met"
//! n_act        u32       number of layer activation codes
//! act          n_act × u8 (0 identity, 1 tanh, 2 relu)
//! n_arrays     u32
//! dims         n_arrays × (rows u32, cols u32)
//! data         every array row-major as f64, in manifest order
//! crc32        u32 over all preceding bytes
//! ```

use std::fmt;

use super::{Activation, DenseLayer, DenseNet};
use crate::data::Scale;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"LRETv1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    Enc,
    Att,
    Clf,
    Met,
}

impl Component {
    pub const ALL: [Component; 4] = [Component::Enc, Component::Att, Component::Clf, Component::Met];

    pub fn tag(self) -> &'static [u8; 3] {
        match self {
            Component::Enc => b"enc",
            Component::Att => b"att",
            Component::Clf => b"clf",
            Component::Met => b"met",
        }
    }

    fn from_tag(tag: &[u8]) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.tag() == tag)
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(std::str::from_utf8(self.tag()).expect("ascii tag"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArrayBlock {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub scale: Scale,
    pub component: Component,
    pub activations: Vec<Activation>,
    pub arrays: Vec<ArrayBlock>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Truncated(format!("checkpoint needs {n} bytes at {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn from_dense(net: &DenseNet, scale: Scale, component: Component) -> Self {
        let mut arrays = Vec::new();
        for l in net.layers() {
            arrays.push(ArrayBlock {
                rows: l.out_dim(),
                cols: l.in_dim(),
                data: l.weight.clone(),
            });
            arrays.push(ArrayBlock {
                rows: l.out_dim(),
                cols: 1,
                data: l.bias.clone(),
            });
        }
        Self {
            scale,
            component,
            activations: net.activations(),
            arrays,
        }
    }

    pub fn to_dense(&self) -> Result<DenseNet> {
        if self.arrays.len() != 2 * self.activations.len() {
            return Err(Error::Malformed(format!(
                "{} activations but {} arrays",
                self.activations.len(),
                self.arrays.len()
            )));
        }
        let layers = self
            .arrays
            .chunks_exact(2)
            .zip(&self.activations)
            .map(|(wb, &act)| {
                let (w, b) = (&wb[0], &wb[1]);
                if b.rows != w.rows || b.cols != 1 {
                    return Err(Error::Malformed("bias block does not match weight".into()));
                }
                DenseLayer::new(w.data.clone(), b.data.clone(), w.cols, w.rows, act)
            })
            .collect::<Result<Vec<_>>>()?;
        DenseNet::new(layers)
    }

    /// Same header with different array contents (used for optimizer buffers).
    pub fn with_data(&self, data: &[Vec<f64>]) -> Result<Self> {
        if data.len() != self.arrays.len()
            || data.iter().zip(&self.arrays).any(|(d, a)| d.len() != a.data.len())
        {
            return Err(Error::Shape("buffers do not match checkpoint arrays".into()));
        }
        let mut out = self.clone();
        for (a, d) in out.arrays.iter_mut().zip(data) {
            a.data.clone_from(d);
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(self.scale.tag());
        out.extend_from_slice(self.component.tag());
        out.extend_from_slice(&(self.activations.len() as u32).to_le_bytes());
        out.extend(self.activations.iter().map(|a| a.code()));
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            out.extend_from_slice(&(a.rows as u32).to_le_bytes());
            out.extend_from_slice(&(a.cols as u32).to_le_bytes());
        }
        for a in &self.arrays {
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < CHECKPOINT_MAGIC.len() || &buf[..6] != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic("checkpoint".into()));
        }
        if buf.len() < 14 {
            return Err(Error::Truncated("checkpoint header".into()));
        }
        let (body, crc_bytes) = buf.split_at(buf.len() - 4);
        let mut r = Reader { buf: body, pos: 6 };
        let scale_tag = r.take(1)?[0];
        let scale = Scale::from_tag(scale_tag)
            .ok_or_else(|| Error::Malformed(format!("scale tag {scale_tag:#x}")))?;
        let component = Component::from_tag(r.take(3)?)
            .ok_or_else(|| Error::Malformed("component tag".into()))?;
        let n_act = r.u32()? as usize;
        let activations = r
            .take(n_act)?
            .iter()
            .map(|&c| Activation::from_code(c).ok_or_else(|| Error::Malformed(format!("activation {c}"))))
            .collect::<Result<Vec<_>>>()?;
        let n_arrays = r.u32()? as usize;
        let mut dims = Vec::with_capacity(n_arrays.min(1024));
        for _ in 0..n_arrays {
            dims.push((r.u32()? as usize, r.u32()? as usize));
        }
        let mut arrays = Vec::with_capacity(dims.len());
        for (rows, cols) in dims {
            let n = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| Error::Malformed("array size overflow".into()))?;
            let data = r
                .take(n)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            arrays.push(ArrayBlock { rows, cols, data });
        }
        if r.pos != body.len() {
            return Err(Error::Malformed("trailing bytes in checkpoint".into()));
        }
        let stored = u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Checksum("checkpoint".into()));
        }
        Ok(Self {
            scale,
            component,
            activations,
            arrays,
        })
    }
}
