//! Regressor weights and the `GPWT` container.
//!
//! ```text
//! magic "GPWT" | version u16 | head count u8
//! per head: layer count u8, per layer: rows u32, cols u32,
//!           rows*cols f32 weights (row-major), rows f32 biases
//! ```
//! Head 0 regresses `ln s`, head 1 regresses `(cos a, sin a)`.

use std::io::{Read, Write};

use super::mlp::{DenseLayer, Mlp};
use crate::binio::{put_f32s, put_u16, put_u32, ByteReader};
use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"GPWT";
pub const WEIGHTS_VERSION: u16 = 1;

/// Scale and in-plane heads applied to concatenated `[query; template]`
/// variant descriptors.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressorWeights {
    scale: Mlp,
    inplane: Mlp,
}

impl RegressorWeights {
    pub fn new(scale: Mlp, inplane: Mlp) -> Result<Self> {
        if scale.output_dim() != 1 {
            return Err(Error::InvalidWeights(format!(
                "scale head must output 1 value, outputs {}",
                scale.output_dim()
            )));
        }
        if inplane.output_dim() != 2 {
            return Err(Error::InvalidWeights(format!(
                "in-plane head must output 2 values, outputs {}",
                inplane.output_dim()
            )));
        }
        if scale.input_dim() != inplane.input_dim() || scale.input_dim() % 2 != 0 {
            return Err(Error::InvalidWeights(format!(
                "head inputs {} and {} must match and be even",
                scale.input_dim(),
                inplane.input_dim()
            )));
        }
        Ok(Self { scale, inplane })
    }

    pub fn scale_head(&self) -> &Mlp {
        &self.scale
    }

    pub fn inplane_head(&self) -> &Mlp {
        &self.inplane
    }

    /// Dimension of one variant descriptor.
    pub fn descriptor_dim(&self) -> usize {
        self.scale.input_dim() / 2
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(WEIGHTS_MAGIC)?;
        put_u16(w, WEIGHTS_VERSION)?;
        w.write_all(&[2])?;
        for head in [&self.scale, &self.inplane] {
            w.write_all(&[head.layers().len() as u8])?;
            for layer in head.layers() {
                put_u32(w, layer.rows() as u32)?;
                put_u32(w, layer.cols() as u32)?;
                put_f32s(w, layer.weights())?;
                put_f32s(w, layer.bias())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read(r: impl Read) -> Result<Self> {
        let mut r = ByteReader::new(r);
        r.expect_magic(WEIGHTS_MAGIC)?;
        let version = r.u16()?;
        if version != WEIGHTS_VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported GPWT version {version}"),
            });
        }
        let heads_at = r.offset();
        let heads = r.u8()?;
        if heads != 2 {
            return Err(Error::Format {
                offset: heads_at,
                message: format!("expected 2 heads, found {heads}"),
            });
        }
        let mut mlps = Vec::with_capacity(2);
        for _ in 0..heads {
            let count_at = r.offset();
            let count = r.u8()?;
            if count == 0 {
                return Err(Error::Format {
                    offset: count_at,
                    message: "head has no layers".into(),
                });
            }
            let mut layers = Vec::with_capacity(count as usize);
            for _ in 0..count {
                let shape_at = r.offset();
                let rows = r.u32()? as usize;
                let cols = r.u32()? as usize;
                if rows == 0 || cols == 0 || rows.saturating_mul(cols) > 1 << 28 {
                    return Err(Error::Format {
                        offset: shape_at,
                        message: format!("implausible layer shape {rows}x{cols}"),
                    });
                }
                let weights = r.f32_vec(rows * cols)?;
                let bias = r.f32_vec(rows)?;
                layers.push(DenseLayer::new(rows, cols, weights, bias)?);
            }
            mlps.push(Mlp::new(layers).map_err(|e| Error::Format {
                offset: count_at,
                message: e.to_string(),
            })?);
        }
        let end = r.offset();
        let inplane = mlps.pop().expect("two heads");
        let scale = mlps.pop().expect("two heads");
        Self::new(scale, inplane).map_err(|e| Error::Format {
            offset: end,
            message: e.to_string(),
        })
    }
}
