use crate::error::{Error, Result};
use crate::numerics::{indices, Tape, Tensor, Var};

/// Mean readout through a sigmoid, `1 x k`.
pub fn dgi_summary(tape: &mut Tape, h: Var) -> Result<Var> {
    let mean = tape.mean_rows(h)?;
    tape.sigmoid(mean)
}

/// `-(1/2N) Σ [log σ(h_iᵀ s) + log(1 - σ(h̃_iᵀ s))]` with `s` the summary of
/// `h_real`.
pub fn dgi_loss(tape: &mut Tape, h_real: Var, h_corrupt: Var) -> Result<Var> {
    let n = tape.shape(h_real).0;
    if n == 0 || tape.shape(h_corrupt).0 != n {
        return Err(Error::contract("dgi_loss: real and corrupted views need the same nonzero row count"));
    }
    let s = dgi_summary(tape, h_real)?;
    let real = tape.matmul_t(h_real, s)?;
    let fake = tape.matmul_t(h_corrupt, s)?;
    let logits = tape.concat_rows(&[real, fake])?;
    let mut labels = vec![1.0; n];
    labels.extend(std::iter::repeat_n(0.0, n));
    tape.bce_with_logits(logits, labels)
}

/// Edge-reconstruction BCE with logits `z_iᵀ z_j`, averaged over all scored
/// pairs.
pub fn ggd_loss(
    tape: &mut Tape,
    h: Var,
    positives: &[(usize, usize)],
    negatives: &[(usize, usize)],
) -> Result<Var> {
    if positives.is_empty() {
        return Err(Error::contract("ggd_loss: empty positive edge set"));
    }
    let pairs = positives.iter().chain(negatives);
    let (heads, tails): (Vec<usize>, Vec<usize>) = pairs.copied().unzip();
    let a = tape.gather_rows(h, indices(heads))?;
    let b = tape.gather_rows(h, indices(tails))?;
    let prod = tape.mul(a, b)?;
    let logits = tape.sum_cols(prod)?;
    let mut labels = vec![1.0; positives.len()];
    labels.extend(std::iter::repeat_n(0.0, negatives.len()));
    tape.bce_with_logits(logits, labels)
}

fn nce_side(tape: &mut Tape, a: Var, b: Var, tau: f64, intra: bool) -> Result<Var> {
    let n = tape.shape(a).0;
    let cross = tape.matmul_t(a, b)?;
    let cross = tape.scale(cross, 1.0 / tau)?;
    let prod = tape.mul(a, b)?;
    let pos = tape.sum_cols(prod)?;
    let pos = tape.scale(pos, 1.0 / tau)?;
    let denom = if intra {
        let own = tape.matmul_t(a, a)?;
        let own = tape.scale(own, 1.0 / tau)?;
        // A node is never its own negative.
        let mut mask = Tensor::zeros(n, n);
        for i in 0..n {
            mask.set(i, i, -1e9);
        }
        let mask = tape.constant(mask)?;
        let own = tape.add(own, mask)?;
        let both = tape.concat_cols(&[cross, own])?;
        tape.logsumexp_rows(both)?
    } else {
        tape.logsumexp_rows(cross)?
    };
    tape.sub(denom, pos)
}

/// Symmetrized InfoNCE `(1/2N) Σ [ℓ(u_i, v_i) + ℓ(v_i, u_i)]` over already
/// normalized projections. Cross-view negatives only unless `intra_view`.
pub fn info_nce(tape: &mut Tape, p1: Var, p2: Var, tau: f64, intra_view: bool) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::config(format!("temperature must be > 0, got {tau}")));
    }
    let n = tape.shape(p1).0;
    if n == 0 || tape.shape(p1) != tape.shape(p2) {
        return Err(Error::contract("info_nce: views must encode the same nonempty node set"));
    }
    let l1 = nce_side(tape, p1, p2, tau, intra_view)?;
    let l2 = nce_side(tape, p2, p1, tau, intra_view)?;
    let both = tape.add(l1, l2)?;
    let total = tape.sum(both)?;
    tape.scale(total, 1.0 / (2 * n) as f64)
}

/// Jensen-Shannon divergence of two normalized histograms, in nats.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::contract("jsd: distributions need the same nonempty support"));
    }
    for (name, d) in [("P", p), ("Q", q)] {
        if d.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::contract(format!("jsd: {name} has a negative or non-finite entry")));
        }
        let s: f64 = d.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!("jsd: {name} sums to {s}, not 1")));
        }
    }
    let kl_half = |a: f64, m: f64| if a > 0.0 { 0.5 * a * (a / m).ln() } else { 0.0 };
    Ok(p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let m = 0.5 * (a + b);
            kl_half(a, m) + kl_half(b, m)
        })
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;
    use crate::testkit::{check_inputs, random_tensor};
    use std::f64::consts::LN_2;

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item().unwrap()
    }

    #[test]
    fn dgi_uninformative_and_separated() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(4, 3)).unwrap();
        let l = dgi_loss(&mut tape, z, z).unwrap();
        assert!((scalar(&tape, l) - LN_2).abs() <= 1e-12);

        let mut tape = Tape::new();
        let real = tape.constant(Tensor::full(3, 2, 40.0)).unwrap();
        let fake = tape.constant(Tensor::full(3, 2, -40.0)).unwrap();
        let l = dgi_loss(&mut tape, real, fake).unwrap();
        assert!(scalar(&tape, l) < 1e-12);
    }

    #[test]
    fn ggd_closed_forms() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(2, 3)).unwrap();
        let l = ggd_loss(&mut tape, z, &[(0, 1)], &[]).unwrap();
        assert!((scalar(&tape, l) - LN_2).abs() <= 1e-12);

        let mut tape = Tape::new();
        let z = tape
            .constant(Tensor::from_rows(&[vec![10.0], vec![10.0], vec![-10.0]]).unwrap())
            .unwrap();
        let l = ggd_loss(&mut tape, z, &[(0, 1)], &[(0, 2)]).unwrap();
        assert!(scalar(&tape, l) < 1e-12);

        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(2, 1)).unwrap();
        assert!(ggd_loss(&mut tape, z, &[], &[(0, 1)]).is_err());
    }

    #[test]
    fn ggd_matches_direct_summation() {
        let mut rng = seeded_rng(3);
        let h = random_tensor(5, 3, 1.0, &mut rng);
        let pos = [(0, 1), (1, 2), (3, 4), (0, 4)];
        let neg = [(0, 2), (1, 3), (2, 4), (1, 4)];
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone()).unwrap();
        let l = ggd_loss(&mut tape, hv, &pos, &neg).unwrap();
        let dot = |i: usize, j: usize| (0..3).map(|d| h.get(i, d) * h.get(j, d)).sum::<f64>();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut oracle = 0.0;
        for &(i, j) in &pos {
            oracle -= sig(dot(i, j)).ln();
        }
        for &(i, j) in &neg {
            oracle -= (1.0 - sig(dot(i, j))).ln();
        }
        oracle /= 8.0;
        assert!((scalar(&tape, l) - oracle).abs() <= 1e-12);
    }

    #[test]
    fn grace_two_orthogonal_nodes() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::identity(2)).unwrap();
        let l = info_nce(&mut tape, p, p, 1.0, false).unwrap();
        let expected = -(1.0f64.exp() / (1.0f64.exp() + 1.0)).ln();
        assert!((scalar(&tape, l) - expected).abs() <= 1e-12);
        assert!((scalar(&tape, l) - 0.3133).abs() <= 1e-4);
        assert!(matches!(info_nce(&mut tape, p, p, 0.0, false), Err(Error::Config(_))));
    }

    #[test]
    fn infonce_gradients_match_finite_differences() {
        let mut rng = seeded_rng(4);
        let xs = vec![random_tensor(5, 3, 1.0, &mut rng), random_tensor(5, 3, 1.0, &mut rng)];
        for intra in [false, true] {
            let report = check_inputs(
                &xs,
                |tape, v| {
                    let a = tape.row_normalize(v[0])?;
                    let b = tape.row_normalize(v[1])?;
                    info_nce(tape, a, b, 0.5, intra)
                },
                None,
                &mut rng,
            )
            .unwrap();
            assert!(report.max_rel_err <= 1e-4, "{report:?}");
        }
    }

    #[test]
    fn jsd_points() {
        let p = [0.2, 0.3, 0.5];
        assert!(jsd(&p, &p).unwrap().abs() <= 1e-12);
        assert!((jsd(&[0.5, 0.5, 0.0, 0.0], &[0.0, 0.0, 0.25, 0.75]).unwrap() - LN_2).abs() <= 1e-12);
        let q = [0.6, 0.1, 0.3];
        assert!((jsd(&p, &q).unwrap() - jsd(&q, &p).unwrap()).abs() <= 1e-12);
        assert!(jsd(&[0.5, 0.6], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn tape_jsd_agrees_with_plain_function() {
        let p = [0.2, 0.3, 0.5];
        let q = [0.6, 0.1, 0.3];
        let mut tape = Tape::new();
        let pv = tape.constant(Tensor::row_vector(p.to_vec())).unwrap();
        let qv = tape.constant(Tensor::row_vector(q.to_vec())).unwrap();
        let l = tape.jsd(pv, qv).unwrap();
        assert!((scalar(&tape, l) - jsd(&p, &q).unwrap()).abs() <= 1e-15);
    }
}
