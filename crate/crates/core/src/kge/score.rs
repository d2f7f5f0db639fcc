use crate::error::{Error, Result};
use crate::graph::Triple;
use crate::numerics::{indices, Tape, Var};

pub const Z_NAME: &str = "distmult/Z";

/// `Σ_d h_d r_d t_d`.
pub fn distmult_score(h: &[f64], r: &[f64], t: &[f64]) -> f64 {
    h.iter().zip(r).zip(t).map(|((a, b), c)| a * b * c).sum()
}

/// DistMult logits (`k x 1`) of `triples` whose head/tail ids index rows of
/// `x`.
pub fn distmult_logits(tape: &mut Tape, x: Var, z: Var, triples: &[Triple]) -> Result<Var> {
    let (heads, (rels, tails)): (Vec<usize>, (Vec<usize>, Vec<usize>)) =
        triples.iter().map(|t| (t.head, (t.relation, t.tail))).unzip();
    let h = tape.gather_rows(x, indices(heads))?;
    let r = tape.gather_rows(z, indices(rels))?;
    let t = tape.gather_rows(x, indices(tails))?;
    let hr = tape.mul(h, r)?;
    let hrt = tape.mul(hr, t)?;
    tape.sum_cols(hrt)
}

/// Mean BCE over positives (label 1) and negatives (label 0) plus
/// `alpha * lambda * (|X|² + |Z|²)`.
pub fn kge_loss(
    tape: &mut Tape,
    pos_logits: Var,
    neg_logits: Var,
    x: Var,
    z: Var,
    lambda: f64,
    alpha: f64,
) -> Result<Var> {
    let (np, nn) = (tape.shape(pos_logits).0, tape.shape(neg_logits).0);
    if np + nn == 0 {
        return Err(Error::contract("kge_loss: empty score lists"));
    }
    let logits = tape.concat_rows(&[pos_logits, neg_logits])?;
    let mut labels = vec![1.0; np];
    labels.extend(std::iter::repeat_n(0.0, nn));
    let bce = tape.bce_with_logits(logits, labels)?;
    let weight = alpha * lambda;
    if weight == 0.0 {
        return Ok(bce);
    }
    let xx = tape.mul(x, x)?;
    let xs = tape.sum(xx)?;
    let zz = tape.mul(z, z)?;
    let zs = tape.sum(zz)?;
    let reg = tape.add(xs, zs)?;
    let reg = tape.scale(reg, weight)?;
    tape.add(bce, reg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{seeded_rng, Tensor};
    use crate::testkit::{check_inputs, random_tensor};

    #[test]
    fn distmult_examples() {
        assert_eq!(distmult_score(&[1.0, 0.0], &[2.0, 3.0], &[1.0, 1.0]), 2.0);
        let h = [0.3, -1.2, 2.0];
        let t = [1.1, 0.4, -0.5];
        let r = [0.7, 0.2, 1.5];
        assert_eq!(distmult_score(&h, &r, &t), distmult_score(&t, &r, &h));
        let dot: f64 = h.iter().zip(&t).map(|(a, b)| a * b).sum();
        assert!((distmult_score(&h, &[1.0; 3], &t) - dot).abs() < 1e-15);
    }

    #[test]
    fn uninformative_and_pure_bce() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::zeros(3, 1)).unwrap();
        let n = tape.constant(Tensor::zeros(3, 1)).unwrap();
        let x = tape.constant(Tensor::full(2, 2, 5.0)).unwrap();
        let z = tape.constant(Tensor::full(1, 2, 5.0)).unwrap();
        let l = kge_loss(&mut tape, p, n, x, z, 0.01, 0.0).unwrap();
        assert!((tape.value(l).item().unwrap() - std::f64::consts::LN_2).abs() <= 1e-12);
        let l = kge_loss(&mut tape, p, n, x, z, 0.0, 0.0).unwrap();
        assert!((tape.value(l).item().unwrap() - std::f64::consts::LN_2).abs() <= 1e-12);
    }

    #[test]
    fn matches_hand_summed_oracle() {
        let pos = [1.2, -0.3, 0.8];
        let neg = [-2.0, 0.1, 0.5];
        let x = [[0.5, -1.0], [2.0, 0.25]];
        let z = [[1.5, -0.5]];
        let (lambda, alpha) = (0.01, 0.7);
        let sig = |s: f64| 1.0 / (1.0 + (-s).exp());
        let mut bce = 0.0;
        for s in pos {
            bce -= sig(s).ln();
        }
        for s in neg {
            bce -= (1.0 - sig(s)).ln();
        }
        bce /= 6.0;
        let sq: f64 = x.iter().flatten().chain(z.iter().flatten()).map(|v| v * v).sum();
        let oracle = bce + alpha * lambda * sq;

        let mut tape = Tape::new();
        let p = tape.constant(Tensor::col_vector(pos.to_vec())).unwrap();
        let n = tape.constant(Tensor::col_vector(neg.to_vec())).unwrap();
        let xv = tape.constant(Tensor::from_rows(&[x[0].to_vec(), x[1].to_vec()]).unwrap()).unwrap();
        let zv = tape.constant(Tensor::from_rows(&[z[0].to_vec()]).unwrap()).unwrap();
        let l = kge_loss(&mut tape, p, n, xv, zv, lambda, alpha).unwrap();
        assert!((tape.value(l).item().unwrap() - oracle).abs() <= 1e-12);
    }

    #[test]
    fn empty_scores_are_rejected() {
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::zeros(0, 1)).unwrap();
        let x = tape.constant(Tensor::zeros(1, 1)).unwrap();
        assert!(kge_loss(&mut tape, e, e, x, x, 0.01, 1.0).is_err());
    }

    #[test]
    fn loss_gradients_through_distmult() {
        let mut rng = seeded_rng(1);
        let inputs = vec![random_tensor(4, 3, 1.0, &mut rng), random_tensor(2, 3, 1.0, &mut rng)];
        let pos = [Triple::new(0, 0, 1), Triple::new(2, 1, 3)];
        let neg = [Triple::new(0, 0, 3), Triple::new(1, 1, 3)];
        let report = check_inputs(
            &inputs,
            |tape, v| {
                let p = distmult_logits(tape, v[0], v[1], &pos)?;
                let n = distmult_logits(tape, v[0], v[1], &neg)?;
                kge_loss(tape, p, n, v[0], v[1], 0.01, 1.0)
            },
            None,
            &mut rng,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-4, "{report:?}");
    }
}
