//! Sparsemax: Euclidean projection of a score vector onto the probability
//! simplex.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, D};

use crate::{Error, Result};

/// Projects `z` onto the probability simplex.
///
/// Scores are shifted by their maximum first, so adding a constant to every
/// entry leaves the result bit-identical whenever the shifted scores are
/// themselves exact. Sorting ties are broken by index; indices that land
/// exactly on the threshold get weight zero.
pub fn sparsemax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::InvalidInput("sparsemax of an empty vector".into()));
    }
    if let Some(bad) = z.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "sparsemax input contains a non-finite value ({bad})"
        )));
    }
    let mut out = vec![0.0; z.len()];
    project_row(z, &mut out);
    Ok(out)
}

fn project_row(z: &[f64], out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = z.iter().map(|v| v - max).collect();
    let tau = threshold(&shifted);
    for (o, v) in out.iter_mut().zip(&shifted) {
        *o = (v - tau).max(0.0);
    }
}

/// The threshold `tau` such that `sum(max(z - tau, 0)) = 1`.
fn threshold(z: &[f64]) -> f64 {
    let mut order: Vec<usize> = (0..z.len()).collect();
    order.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
    let mut cumsum = 0.0;
    let mut support_sum = 0.0;
    let mut support = 0usize;
    for (rank, &i) in order.iter().enumerate() {
        cumsum += z[i];
        let k = (rank + 1) as f64;
        if 1.0 + k * z[i] > cumsum {
            support = rank + 1;
            support_sum = cumsum;
        }
    }
    (support_sum - 1.0) / support as f64
}

/// Sparsemax over the last dimension of a tensor, differentiable.
pub fn sparsemax_last_dim(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(SparsemaxOp)?)
}

struct SparsemaxOp;

impl CustomOp1 for SparsemaxOp {
    fn name(&self) -> &'static str {
        "sparsemax"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::msg("sparsemax requires a contiguous input"))?;
        let dim = *layout
            .dims()
            .last()
            .ok_or_else(|| candle_core::Error::msg("sparsemax of a scalar"))?;
        let run = |values: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; values.len()];
            for (src, dst) in values.chunks(dim).zip(out.chunks_mut(dim)) {
                project_row(src, dst);
            }
            out
        };
        let storage = match storage {
            CpuStorage::F64(v) => CpuStorage::F64(run(&v[start..end])),
            CpuStorage::F32(v) => {
                let wide: Vec<f64> = v[start..end].iter().map(|&x| x as f64).collect();
                CpuStorage::F32(run(&wide).into_iter().map(|x| x as f32).collect())
            }
            _ => return Err(candle_core::Error::msg("sparsemax supports f32 and f64 only")),
        };
        Ok((storage, layout.shape().clone()))
    }

    /// On the support `S` the Jacobian is `I - 1 1^T / |S|`; zero elsewhere.
    fn bwd(
        &self,
        _arg: &Tensor,
        res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        let support = res.gt(0.0)?.to_dtype(res.dtype())?;
        let masked = grad_res.mul(&support)?;
        let mean = masked
            .sum_keepdim(D::Minus1)?
            .broadcast_div(&support.sum_keepdim(D::Minus1)?)?;
        Ok(Some(grad_res.broadcast_sub(&mean)?.mul(&support)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn symmetric_input() {
        assert_eq!(sparsemax(&[0.5, 0.5]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn saturates_to_one_hot() {
        assert_eq!(sparsemax(&[2.0, 0.0]).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn three_entry_example() {
        let p = sparsemax(&[0.2, 0.0, -1.0]).unwrap();
        let expected = [0.6, 0.4, 0.0];
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{p:?}");
        }
    }

    #[test]
    fn rejects_non_finite_and_empty() {
        assert!(matches!(sparsemax(&[1.0, f64::NAN]), Err(Error::InvalidInput(_))));
        assert!(matches!(sparsemax(&[f64::INFINITY]), Err(Error::InvalidInput(_))));
        assert!(sparsemax(&[]).is_err());
    }

    #[test]
    fn tensor_op_matches_rowwise_projection() {
        let rows = [[0.3, -0.2, 1.5, 0.9], [0.0, 0.0, 0.0, 0.0]];
        let t = Tensor::new(&rows, &Device::Cpu).unwrap();
        let out = sparsemax_last_dim(&t).unwrap().to_vec2::<f64>().unwrap();
        for (row, got) in rows.iter().zip(out) {
            assert_eq!(sparsemax(row).unwrap(), got);
        }
        let t32 = t.to_dtype(DType::F32).unwrap();
        let out32 = sparsemax_last_dim(&t32).unwrap().to_vec2::<f32>().unwrap();
        assert!((out32[1][0] - 0.25).abs() < 1e-7);
    }
}
