use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `PE(pos, 2i) = sin(pos / 10000^(2i/dim))`, `PE(pos, 2i+1) = cos(...)`.
pub fn sinusoidal_pe(seq_len: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Contract(format!("positional encoding width must be even, got {dim}")));
    }
    if seq_len == 0 {
        return Err(Error::Contract("positional encoding for an empty sequence".into()));
    }
    let mut data = vec![0.0; seq_len * dim];
    for pos in 0..seq_len {
        for i in 0..dim / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data[pos * dim + 2 * i] = angle.sin();
            data[pos * dim + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![seq_len, dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_zero_alternates_zero_one() {
        let pe = sinusoidal_pe(3, 6).unwrap();
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn position_one_width_four() {
        let pe = sinusoidal_pe(2, 4).unwrap();
        let expect = [0.84147, 0.54030, 0.01000, 0.99995];
        for (a, b) in pe.row(1).iter().zip(expect) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn entries_bounded_and_odd_width_rejected() {
        let pe = sinusoidal_pe(50, 16).unwrap();
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(sinusoidal_pe(4, 5).is_err());
    }
}
