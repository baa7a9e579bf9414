use crate::error::{Error, Result};

/// One shape-resolved layer, per sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv2d { cin: usize, cout: usize, kh: usize, kw: usize, h: usize, w: usize, stride: usize, pad: usize },
    Dense { fin: usize, fout: usize },
    /// Normalization, activations, pooling, reshapes: no multiply-accumulates.
    Free(&'static str),
}

impl LayerSpec {
    pub fn macs(&self) -> Result<u64> {
        match *self {
            LayerSpec::Conv2d { cin, cout, kh, kw, h, w, stride, pad } => {
                let (ph, pw) = (h + 2 * pad, w + 2 * pad);
                if stride == 0 || kh > ph || kw > pw || cin == 0 || cout == 0 {
                    return Err(Error::shape(format!("unresolved conv {self:?}")));
                }
                let (ho, wo) = ((ph - kh) / stride + 1, (pw - kw) / stride + 1);
                Ok((cin * cout * kh * kw * ho * wo) as u64)
            }
            LayerSpec::Dense { fin, fout } => {
                if fin == 0 || fout == 0 {
                    return Err(Error::shape(format!("unresolved dense {self:?}")));
                }
                Ok((fin * fout) as u64)
            }
            LayerSpec::Free(_) => Ok(0),
        }
    }
}

/// Total forward multiply-accumulates of a layer sequence for a batch.
pub fn mac_count(layers: &[LayerSpec], batch: usize) -> Result<u64> {
    let per_sample: u64 = layers.iter().map(LayerSpec::macs).sum::<Result<u64>>()?;
    Ok(per_sample * batch as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_counts() {
        let dense = LayerSpec::Dense { fin: 4, fout: 2 };
        assert_eq!(mac_count(std::slice::from_ref(&dense), 1).unwrap(), 8);
        let conv = LayerSpec::Conv2d { cin: 3, cout: 8, kh: 3, kw: 3, h: 32, w: 32, stride: 1, pad: 1 };
        assert_eq!(mac_count(std::slice::from_ref(&conv), 1).unwrap(), 221_184);
        let both = [conv.clone(), LayerSpec::Free("relu"), dense.clone()];
        assert_eq!(mac_count(&both, 3).unwrap(), 3 * (221_184 + 8));
    }

    #[test]
    fn unresolved_shapes_are_rejected() {
        let conv = LayerSpec::Conv2d { cin: 3, cout: 8, kh: 5, kw: 5, h: 2, w: 2, stride: 1, pad: 0 };
        assert!(matches!(mac_count(&[conv], 1), Err(Error::InvalidShape(_))));
    }
}
