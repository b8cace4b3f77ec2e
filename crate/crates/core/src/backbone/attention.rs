use crate::backbone::nn::{gemm, softmax_rows};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn as_heads(x: &Tensor, name: &str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [n, d] => Ok((1, n, d)),
        [h, n, d] => Ok((h, n, d)),
        ref s => Err(Error::invalid(format!("{name} must be [N, d] or [heads, N, d], got {s:?}"))),
    }
}

/// Dot-product attention: `A = softmax(q·kᵀ)` per head, output `A·v`.
///
/// `q` is `[heads, N, d]` (or `[N, d]` for one head), `k` is `[heads, M, d]`,
/// `v` is `[heads, M, dv]`. When `override_a` is given it is used verbatim in
/// place of the softmax. Returns the output and the attention matrix used.
pub fn self_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    override_a: Option<&Tensor>,
) -> Result<(Tensor, Tensor)> {
    let (h, n, d) = as_heads(q, "q")?;
    let (hk, m, dk) = as_heads(k, "k")?;
    let (hv, mv, dv) = as_heads(v, "v")?;
    if hk != h || hv != h || dk != d || mv != m {
        return Err(Error::ShapeMismatch { expected: q.shape().to_vec(), got: k.shape().to_vec() });
    }
    let a_shape = if q.shape().len() == 2 { vec![n, m] } else { vec![h, n, m] };
    let a = match override_a {
        Some(a) => {
            a.ensure_shape(&a_shape)?;
            a.clone()
        }
        None => {
            let mut a = vec![0.0f32; h * n * m];
            for hi in 0..h {
                gemm(
                    n,
                    d,
                    m,
                    &q.data()[hi * n * d..],
                    false,
                    &k.data()[hi * m * d..],
                    true,
                    &mut a[hi * n * m..],
                    0.0,
                );
            }
            softmax_rows(&mut a, m);
            Tensor::new(a_shape, a)?
        }
    };
    let mut out = vec![0.0f32; h * n * dv];
    for hi in 0..h {
        gemm(
            n,
            m,
            dv,
            &a.data()[hi * n * m..],
            false,
            &v.data()[hi * m * dv..],
            false,
            &mut out[hi * n * dv..],
            0.0,
        );
    }
    let out_shape = if q.shape().len() == 2 { vec![n, dv] } else { vec![h, n, dv] };
    Ok((Tensor::new(out_shape, out)?, a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_token_attends_to_itself() {
        let q = Tensor::new(vec![1, 2], vec![0.3f32, -0.7]).unwrap();
        let v = Tensor::new(vec![1, 3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let (out, a) = self_attention(&q, &q, &v, None).unwrap();
        assert_eq!(a.data(), &[1.0]);
        assert_eq!(out, v);
    }

    #[test]
    fn rows_are_probability_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = Tensor::<f32>::randn(vec![2, 7, 4], &mut rng);
        let k = Tensor::<f32>::randn(vec![2, 5, 4], &mut rng);
        let v = Tensor::<f32>::randn(vec![2, 5, 3], &mut rng);
        let (_, a) = self_attention(&q, &k, &v, None).unwrap();
        for row in a.data().chunks(5) {
            assert!(row.iter().all(|&x| x >= 0.0));
            assert!((row.iter().map(|&x| x as f64).sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn matches_scalar_softmax_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let q = Tensor::<f32>::randn(vec![3, 4], &mut rng);
        let k = Tensor::<f32>::randn(vec![3, 4], &mut rng);
        let v = Tensor::<f32>::randn(vec![3, 2], &mut rng);
        let (out, _) = self_attention(&q, &k, &v, None).unwrap();
        for i in 0..3 {
            let scores: Vec<f64> = (0..3)
                .map(|j| (0..4).map(|c| q.data()[i * 4 + c] as f64 * k.data()[j * 4 + c] as f64).sum())
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            for c in 0..2 {
                let expected: f64 =
                    (0..3).map(|j| scores[j].exp() / z * v.data()[j * 2 + c] as f64).sum();
                assert!((out.data()[i * 2 + c] as f64 - expected).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn override_is_used_verbatim() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let q = Tensor::<f32>::randn(vec![4, 2], &mut rng);
        let v = Tensor::<f32>::randn(vec![4, 3], &mut rng);
        let over = Tensor::full(vec![4, 4], 0.25f32);
        let (out, a) = self_attention(&q, &q, &v, Some(&over)).unwrap();
        assert_eq!(a, over);
        for c in 0..3 {
            let mean: f32 = (0..4).map(|j| v.data()[j * 3 + c]).sum::<f32>() / 4.0;
            assert!((out.data()[c] - mean).abs() < 1e-6);
        }
        assert!(self_attention(&q, &q, &v, Some(&Tensor::full(vec![3, 4], 0.25))).is_err());
        assert!(self_attention(&q, &Tensor::zeros(vec![4, 3]), &v, None).is_err());
    }
}
