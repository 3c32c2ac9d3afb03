//! Differentiable counterparts of the scalar metrics, on `(N, 6)` prediction
//! and target tensors laid out as `(dx, dy, dz, dalpha, dbeta, dgamma)`.

use crate::error::{Error, Result};
use crate::metrics::{LossCombo, MetricKind};
use crate::tensor::{Scalar, Tape, Var};

fn check<T: Scalar>(tape: &Tape<T>, pred: Var, target: Var) -> Result<()> {
    let (p, t) = (tape.shape(pred), tape.shape(target));
    if p.len() != 2 || p[1] != 6 || p != t {
        return Err(Error::Shape(format!("loss expects matching (N, 6) tensors, got {p:?} and {t:?}")));
    }
    Ok(())
}

fn split<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<(Var, Var)> {
    Ok((tape.slice(x, 1, 0, 3)?, tape.slice(x, 1, 3, 3)?))
}

/// Mean over samples and components of squared differences.
pub fn mse<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// Mean over samples of `(1/3) * sum(1 - cos(a_i - b_i))`.
pub fn cosinus<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let c = tape.cos(d);
    let m = tape.mean(c);
    let neg = tape.neg(m);
    Ok(tape.add_scalar(neg, 1.0))
}

/// First rotation column `R(e) * (1, 0, 0)` of `(N, 3)` Euler angles, as three `(N, 1)` columns.
fn look_columns<T: Scalar>(tape: &mut Tape<T>, e: Var) -> Result<[Var; 3]> {
    let a = tape.slice(e, 1, 0, 1)?;
    let b = tape.slice(e, 1, 1, 1)?;
    let g = tape.slice(e, 1, 2, 1)?;
    let (ca, sa) = (tape.cos(a), tape.sin(a));
    let (cb, sb) = (tape.cos(b), tape.sin(b));
    let (cg, sg) = (tape.cos(g), tape.sin(g));
    let x = tape.mul(cb, cg)?;
    let sbcg = tape.mul(sb, cg)?;
    let t1 = tape.mul(sa, sbcg)?;
    let t2 = tape.mul(ca, sg)?;
    let y = tape.add(t1, t2)?;
    let t3 = tape.mul(ca, sbcg)?;
    let t4 = tape.mul(sa, sg)?;
    let z = tape.sub(t4, t3)?;
    Ok([x, y, z])
}

/// Mean over samples of the angle between the look-at directions.
pub fn direction<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let va = look_columns(tape, a)?;
    let vb = look_columns(tape, b)?;
    let mut dot = tape.mul(va[0], vb[0])?;
    for k in 1..3 {
        let p = tape.mul(va[k], vb[k])?;
        dot = tape.add(dot, p)?;
    }
    let ang = tape.acos_clamped(dot);
    Ok(tape.mean(ang))
}

pub fn orientation<T: Scalar>(tape: &mut Tape<T>, kind: MetricKind, a: Var, b: Var) -> Result<Var> {
    match kind {
        MetricKind::RotationMSE => mse(tape, a, b),
        MetricKind::CosinusError => cosinus(tape, a, b),
        MetricKind::DirectionError => direction(tape, a, b),
        other => Err(Error::Precondition(format!("{other:?} has no differentiable orientation loss"))),
    }
}

/// Mean over samples of position MSE plus the configured orientation term.
pub fn combined<T: Scalar>(tape: &mut Tape<T>, combo: LossCombo, pred: Var, target: Var) -> Result<Var> {
    check(tape, pred, target)?;
    let (pp, po) = split(tape, pred)?;
    let (tp, to) = split(tape, target)?;
    let lp = mse(tape, pp, tp)?;
    let lo = orientation(tape, combo.orientation(), po, to)?;
    tape.add(lp, lo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::combined_loss;
    use crate::pose::DeltaPose;
    use crate::tensor::Tensor;

    #[test]
    fn examples_match_scalar_metrics() {
        let pred = DeltaPose::new([1.0, 2.0, 2.0], [std::f64::consts::FRAC_PI_2, 0.0, 0.0]);
        let gt = DeltaPose::ZERO;
        let mut tape = Tape::<f64>::new(false);
        let p = tape.input(Tensor::new(&[1, 6], pred.to_array().to_vec()).unwrap());
        let t = tape.constant(Tensor::new(&[1, 6], gt.to_array().to_vec()).unwrap());
        let l = combined(&mut tape, LossCombo::MseCe, p, t).unwrap();
        assert!((tape.value(l).item() - (3.0 + 1.0 / 3.0)).abs() < 1e-12);
        let pred = DeltaPose::new([0.5, -1.0, 2.0], [0.1, 0.3, -0.2]);
        let p = tape.input(Tensor::new(&[1, 6], pred.to_array().to_vec()).unwrap());
        for combo in LossCombo::ALL {
            let l = combined(&mut tape, combo, p, t).unwrap();
            assert!((tape.value(l).item() - combined_loss(combo, &pred, &gt)).abs() < 1e-12);
        }
        // at est = gt the clamped arccos leaves a small floor instead of zero
        let l = direction(&mut tape, t, t).unwrap();
        assert!((tape.value(l).item() - (1.0f64 - 1e-7).acos()).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut tape = Tape::<f64>::new(false);
        let p = tape.input(Tensor::zeros(&[2, 6]));
        let t = tape.constant(Tensor::zeros(&[3, 6]));
        assert!(combined(&mut tape, LossCombo::MseMse, p, t).is_err());
    }
}
