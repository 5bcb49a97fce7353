//! Finite-difference verification of the reverse-mode pass. Always runs in
//! double precision; `f32` training relies on the same code paths being
//! generic over the scalar type.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, VarId};

/// Builds the scalar loss once and reports `(loss, kink_margin)`. The margin
/// is the closest approach of any kinked op (ELU, L1, clamp) to its kink;
/// callers reject configurations where a finite-difference probe of step `h`
/// could land on the other side of one.
pub fn probe<F>(build: &F, params: &[Tensor<f64>]) -> Result<(f64, f64)>
where
    F: Fn(&mut Graph<f64>, &[VarId]) -> Result<VarId>,
{
    let mut graph = Graph::new();
    let ids: Vec<VarId> = params.iter().map(|p| graph.constant(p.clone())).collect();
    let loss = build(&mut graph, &ids)?;
    if graph.value(loss).numel() != 1 {
        return Err(Error::Usage(format!(
            "gradient check needs a scalar loss, got shape {:?}",
            graph.shape(loss)
        )));
    }
    let value = graph.scalar(loss);
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss is not finite: {value}")));
    }
    Ok((value, graph.kink_margin()))
}

/// Compares reverse-mode gradients against central finite differences for
/// every coordinate of every parameter and returns the maximum relative
/// error, with the relative scale floored at 1e-3 so near-zero gradients
/// compare absolutely.
pub fn grad_check<F>(build: &F, params: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[VarId]) -> Result<VarId>,
{
    if h <= 0.0 || h.is_nan() {
        return Err(Error::Usage(format!("finite-difference step must be positive, got {h}")));
    }
    // Reverse-mode gradients in one pass.
    let mut graph = Graph::new();
    let ids: Vec<VarId> = params
        .iter()
        .map(|p| graph.leaf(p.clone().with_requires_grad(true)))
        .collect();
    let loss = build(&mut graph, &ids)?;
    if graph.value(loss).numel() != 1 {
        return Err(Error::Usage(format!(
            "gradient check needs a scalar loss, got shape {:?}",
            graph.shape(loss)
        )));
    }
    if !graph.scalar(loss).is_finite() {
        return Err(Error::Numeric(format!("loss is not finite: {}", graph.scalar(loss))));
    }
    graph.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| graph.take_grad(id).unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<VarId> = probe.iter().map(|p| g.constant(p.clone())).collect();
        let loss = build(&mut g, &ids)?;
        let v = g.scalar(loss);
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss is not finite: {v}")));
        }
        Ok(v)
    };

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut max_rel: f64 = 0.0;
    for (pi, grads) in analytic.iter().enumerate() {
        for (i, &ad) in grads.iter().enumerate() {
            let orig = work[pi].data()[i];
            work[pi].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[pi].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[pi].data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let scale = ad.abs().max(fd.abs()).max(1e-3);
            max_rel = max_rel.max((ad - fd).abs() / scale);
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn square_at_three_matches_analytic_slope() {
        let x = Tensor::scalar(3.0f64);
        let rel = grad_check(
            &|g: &mut Graph<f64>, ids: &[VarId]| g.mul(ids[0], ids[0]),
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(rel < 1e-6, "rel err {rel}");
    }

    #[test]
    fn constant_loss_has_exactly_zero_error() {
        // The loss ignores the parameter entirely.
        let x = Tensor::scalar(1.5f64);
        let rel = grad_check(
            &|g: &mut Graph<f64>, _ids: &[VarId]| {
                let c = g.constant(Tensor::scalar(4.0));
                g.mul(c, c)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert_eq!(rel, 0.0);
    }

    #[test]
    fn conv_elu_l1_composite_stays_under_1e4() {
        // Fixed pseudo-random 4×4 input and 3×3 kernel, chosen away from the
        // ELU/L1 kinks (margin verified below).
        let mut seed = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let x = Tensor::new(vec![1, 1, 4, 4], (0..16).map(|_| next() + 2.0).collect()).unwrap();
        let k = Tensor::new(vec![1, 1, 3, 3], (0..9).map(|_| next() * 0.5).collect()).unwrap();
        let target = Tensor::new(vec![1, 1, 4, 4], vec![0.25; 16]).unwrap();
        let build = move |g: &mut Graph<f64>, ids: &[VarId]| {
            let t = g.constant(target.clone());
            let c = g.conv2d(ids[0], ids[1], 1, 1)?;
            let a = g.elu(c)?;
            g.l1_mean(a, t)
        };
        let (_, margin) = probe(&build, &[x.clone(), k.clone()]).unwrap();
        assert!(margin > 1e-3, "margin {margin}");
        let rel = grad_check(&build, &[x, k], 1e-5).unwrap();
        assert!(rel < 1e-4, "rel err {rel}");
    }

    #[test]
    fn non_finite_loss_is_a_numeric_error() {
        let x = Tensor::scalar(800.0f64); // exp overflows f64
        let err = grad_check(
            &|g: &mut Graph<f64>, ids: &[VarId]| {
                let e = g.exp(ids[0])?;
                g.mul(e, e)
            },
            &[x],
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "got {err:?}");
    }
}
