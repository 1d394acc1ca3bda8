use super::Tensor;

/// Central-difference gradient of a scalar function, one element at a time.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut grad = vec![0.0; x.numel()];
    for (i, g) in grad.iter_mut().enumerate() {
        let x0 = x.data()[i];
        let plus = f(&x.with_element(i, x0 + h));
        let minus = f(&x.with_element(i, x0 - h));
        *g = (plus - minus) / (2.0 * h);
    }
    Tensor::from_parts(x.shape().to_vec(), grad)
}

/// `|a − b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

pub fn max_relative_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| relative_error(x, y))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 3.0, 0.0, 7.0]).unwrap();
        let g = finite_diff_grad(|t| t.sum(), &x, 1e-5);
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn square_at_three_is_six() {
        let x = Tensor::scalar(3.0);
        let g = finite_diff_grad(|t| t.item() * t.item(), &x, 1e-5);
        assert!((g.item() - 6.0).abs() < 1e-7);
    }

    #[test]
    fn relative_error_floors_denominator() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-12);
    }
}
