use candle_core::{DType, Tensor, D};

use crate::error::{validation_err, Result};

pub fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Mean cross-entropy of `logits` (B, C) against integer `labels`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, c) = logits.dims2()?;
    if labels.len() != b {
        return Err(validation_err!("cross_entropy: {b} rows but {} labels", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(validation_err!("cross_entropy: label {bad} out of range for {c} classes"));
    }
    let idx: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
    let idx = Tensor::from_vec(idx, (b, 1), logits.device())?;
    let picked = log_softmax(logits)?.gather(&idx, 1)?;
    Ok((picked.mean_all()? * -1.0)?)
}

/// Mean binary cross-entropy on logits against a constant target in {0, 1}.
///
/// Uses `max(s, 0) - s·t + ln(1 + e^{-|s|})`, which is finite for any finite `s`.
pub fn bce_with_logits(scores: &Tensor, target: f64) -> Result<Tensor> {
    let pos = scores.relu()?;
    let tail = ((scores.abs()? * -1.0)?.exp()? + 1.0)?.log()?;
    let per = ((pos - (scores * target)?)? + tail)?;
    Ok(per.mean_all()?)
}

pub fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    let idx = logits.argmax(D::Minus1)?.to_dtype(DType::U32)?.to_vec1::<u32>()?;
    Ok(idx.into_iter().map(|i| i as usize).collect())
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn cross_entropy_uniform_logits() {
        let l = Tensor::zeros((4, 10), DType::F64, &Device::Cpu).unwrap();
        let ce = scalar(&cross_entropy(&l, &[0, 1, 2, 9]).unwrap()).unwrap();
        assert!((ce - 10f64.ln()).abs() < 1e-12);
        assert!(cross_entropy(&l, &[10, 0, 0, 0]).is_err());
    }

    #[test]
    fn bce_reference_values() {
        let s = Tensor::new(&[0.0f64, 2.0, -3.0], &Device::Cpu).unwrap();
        let got = scalar(&bce_with_logits(&s, 1.0).unwrap()).unwrap();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let want = [0.0f64, 2.0, -3.0].iter().map(|&x| -sig(x).ln()).sum::<f64>() / 3.0;
        assert!((got - want).abs() < 1e-12);
        let big = Tensor::new(&[1000.0f64], &Device::Cpu).unwrap();
        assert_eq!(scalar(&bce_with_logits(&big, 1.0).unwrap()).unwrap(), 0.0);
        assert!(scalar(&bce_with_logits(&big, 0.0).unwrap()).unwrap().is_finite());
    }
}
