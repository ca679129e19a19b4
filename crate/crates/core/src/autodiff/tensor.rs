use crate::error::{CoreError, Result};

/// Dense 64-bit float tensor with an optional gradient slot.
///
/// Values are finite except for the `-inf` masking sentinel, which is only
/// admitted through [`Tensor::logits`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(CoreError::DimensionMismatch {
            left: shape.to_vec(),
            right: vec![len],
        });
    }
    Ok(())
}

impl Tensor {
    /// A tensor of finite values with `requires_grad = false`.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(CoreError::Numeric(format!("non-finite tensor value {v}")));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    /// A logit tensor: finite values plus the `-inf` masking sentinel.
    pub fn logits(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        if let Some(v) = data
            .iter()
            .find(|v| v.is_nan() || **v == f64::INFINITY)
        {
            return Err(CoreError::Numeric(format!("invalid logit value {v}")));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    /// A trainable parameter tensor (finite values, `requires_grad = true`).
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let mut t = Self::from_vec(shape, data)?;
        t.requires_grad = true;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(CoreError::DimensionMismatch {
                left: self.shape.clone(),
                right: vec![g.len()],
            });
        }
        match &mut self.grad {
            Some(buf) => {
                for (b, v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match_data_length() {
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn finite_constructor_rejects_sentinels() {
        assert!(Tensor::from_vec(vec![1], vec![f64::NEG_INFINITY]).is_err());
        assert!(Tensor::logits(vec![1], vec![f64::NEG_INFINITY]).is_ok());
        assert!(Tensor::logits(vec![1], vec![f64::NAN]).is_err());
        assert!(Tensor::logits(vec![1], vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn grad_accumulates_and_clears() {
        let mut t = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
        t.accumulate_grad(&[0.5, 0.5]).unwrap();
        t.accumulate_grad(&[0.5, 1.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[1.0, 1.5]);
        t.clear_grad();
        assert!(t.grad().is_none());
    }
}
