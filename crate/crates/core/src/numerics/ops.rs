//! Raw kernels shared by the forward pass and the gradient rules.

use super::{NumericsError, Tensor};

fn rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize), NumericsError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(NumericsError::Shape { op, detail: format!("expected a matrix, got shape {s:?}") }),
    }
}

/// `a · b` for `a: m×k`, `b: k×n`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let (m, k) = rank2("matmul", a)?;
    let (k2, n) = rank2("matmul", b)?;
    if k != k2 {
        return Err(NumericsError::Shape {
            op: "matmul",
            detail: format!("inner dimensions differ: {m}x{k} · {k2}x{n}"),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(m, n, out)
}

/// `a · bᵀ` for `a: m×k`, `b: n×k`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let (m, k) = rank2("matmul_nt", a)?;
    let (n, k2) = rank2("matmul_nt", b)?;
    if k != k2 {
        return Err(NumericsError::Shape {
            op: "matmul_nt",
            detail: format!("{m}x{k} · ({n}x{k2})ᵀ"),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::matrix(m, n, out)
}

/// `aᵀ · b` for `a: k×m`, `b: k×n`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let (k, m) = rank2("matmul_tn", a)?;
    let (k2, n) = rank2("matmul_tn", b)?;
    if k != k2 {
        return Err(NumericsError::Shape {
            op: "matmul_tn",
            detail: format!("({k}x{m})ᵀ · {k2}x{n}"),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &bd[p * n..(p + 1) * n];
        for i in 0..m {
            let av = ad[p * m + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(m, n, out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor, NumericsError> {
    let (m, n) = rank2("transpose", a)?;
    let d = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Tensor::matrix(n, m, out)
}

/// Softmax of a matrix along `axis` (0 normalizes each column, 1 each row).
/// Rank-1 input is normalized as a whole for axis 0.
pub fn softmax_axis(x: &Tensor, axis: usize) -> Result<Tensor, NumericsError> {
    let (m, n) = match (x.shape(), axis) {
        ([len], 0) => (*len, 1),
        ([r, c], 0 | 1) => (*r, *c),
        (s, _) => {
            return Err(NumericsError::Shape {
                op: "softmax",
                detail: format!("axis {axis} invalid for shape {s:?}"),
            })
        }
    };
    let mut out = x.data().to_vec();
    // (stride between lanes, stride within a lane, lane count, lane length)
    let (lane_step, elem_step, lanes, len) = if axis == 0 { (1, n, n, m) } else { (n, 1, m, n) };
    for lane in 0..lanes {
        let base = lane * lane_step;
        let mut max = f64::NEG_INFINITY;
        for e in 0..len {
            max = max.max(out[base + e * elem_step]);
        }
        let mut total = 0.0;
        for e in 0..len {
            let v = &mut out[base + e * elem_step];
            *v = (*v - max).exp();
            total += *v;
        }
        for e in 0..len {
            out[base + e * elem_step] /= total;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Per-row statistics kept from a layer-norm forward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
}

/// Normalizes each row of `x` to zero mean and unit (population) variance,
/// then applies `gain ⊙ · + bias`.
pub fn layer_norm(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormCache), NumericsError> {
    let (m, n) = (x.rows(), x.cols());
    if gain.len() != n || bias.len() != n {
        return Err(NumericsError::Shape {
            op: "layer_norm",
            detail: format!("gain/bias length {}/{} vs last axis {n}", gain.len(), bias.len()),
        });
    }
    let (g, b) = (gain.data(), bias.data());
    let mut normalized = vec![0.0; m * n];
    let mut out = vec![0.0; m * n];
    let mut inv_std = Vec::with_capacity(m);
    for i in 0..m {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        for j in 0..n {
            let h = (row[j] - mean) * is;
            normalized[i * n + j] = h;
            out[i * n + j] = h * g[j] + b[j];
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        LayerNormCache { normalized: Tensor::new(x.shape().to_vec(), normalized)?, inv_std },
    ))
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    cdf + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_examples() {
        let m = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(matmul(&Tensor::identity(2), &m).unwrap(), m);
        let ones = Tensor::from_rows(&[[1.0], [1.0]]);
        assert_eq!(matmul(&m, &ones).unwrap(), Tensor::from_rows(&[[3.0], [7.0]]));
        let any = Tensor::matrix(3, 4, (0..12).map(f64::from).collect()).unwrap();
        assert_eq!(matmul(&Tensor::zeros(&[2, 3]), &any).unwrap(), Tensor::zeros(&[2, 4]));
        assert!(matmul(&m, &any).is_err());
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = Tensor::matrix(3, 2, vec![1.0, -2.0, 0.5, 3.0, 4.0, -1.0]).unwrap();
        let b = Tensor::matrix(4, 2, vec![2.0, 1.0, 0.0, -1.0, 1.5, 2.5, -3.0, 0.25]).unwrap();
        let nt = matmul_nt(&a, &b).unwrap();
        assert_eq!(nt, matmul(&a, &transpose(&b).unwrap()).unwrap());
        let c = Tensor::matrix(3, 4, (0..12).map(|v| v as f64 * 0.5 - 2.0).collect()).unwrap();
        let tn = matmul_tn(&a, &c).unwrap();
        assert_eq!(tn, matmul(&transpose(&a).unwrap(), &c).unwrap());
    }

    #[test]
    fn softmax_examples() {
        let u = softmax_axis(&Tensor::vector(vec![0.0; 3]), 0).unwrap();
        for v in u.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = softmax_axis(&Tensor::vector(vec![1000.0, 0.0, 0.0]), 0).unwrap();
        assert!(big.is_finite());
        assert!((big.data()[0] - 1.0).abs() < 1e-15);
        let logs = Tensor::vector(vec![1f64.ln(), 2f64.ln(), 3f64.ln()]);
        let p = softmax_axis(&logs, 0).unwrap();
        for (got, want) in p.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_axes_normalize_the_right_lanes() {
        let x = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 5.0]).unwrap();
        let cols = softmax_axis(&x, 0).unwrap();
        for j in 0..3 {
            assert!((cols.get(0, j) + cols.get(1, j) - 1.0).abs() < 1e-12);
        }
        let rows = softmax_axis(&x, 1).unwrap();
        for i in 0..2 {
            assert!((rows.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(softmax_axis(&x, 2).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let one = Tensor::full(&[3], 1.0);
        let zero = Tensor::zeros(&[3]);
        let (c, _) = layer_norm(&Tensor::from_rows(&[[4.0, 4.0, 4.0]]), &one, &zero, 1e-5).unwrap();
        assert!(c.data().iter().all(|v| *v == 0.0));

        let (y, _) = layer_norm(
            &Tensor::from_rows(&[[1.0, 3.0]]),
            &Tensor::full(&[2], 1.0),
            &Tensor::zeros(&[2]),
            1e-15,
        )
        .unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-12 && (y.data()[1] - 1.0).abs() < 1e-12);

        let bias = Tensor::vector(vec![0.5, -1.0, 2.0]);
        let (b, _) = layer_norm(&Tensor::zeros(&[1, 3]), &one, &bias, 1e-5).unwrap();
        assert_eq!(b.data(), bias.data());
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        // Φ(1) = 0.841344746068543
        assert!((gelu(1.0) - 0.841_344_746_068_543).abs() < 1e-12);
        let h = 1e-6;
        for x in [-2.0, -0.3, 0.0, 0.7, 3.0] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
