use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Var};

fn check_weight(name: &str, w: f64) -> Result<()> {
    if (0.0..=1.0).contains(&w) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {w} outside [0, 1]")))
    }
}

/// Mean negative log-likelihood of `targets[i]` at the listed rows of a
/// `[L, C]` log-probability node, with optional uniform label smoothing.
fn picked_nll<S: Scalar>(
    g: &mut Graph<'_, S>,
    logp: Var,
    rows: &[usize],
    targets: &[usize],
    smoothing: f64,
) -> Result<Var> {
    let c = g.shape(logp)[1];
    let flat: Vec<usize> = rows.iter().zip(targets).map(|(&r, &t)| r * c + t).collect();
    let picked = g.pick(logp, &flat)?;
    let nll = g.mean(picked);
    let nll = g.scale(nll, S::of(-1.0));
    if smoothing <= 0.0 {
        return Ok(nll);
    }
    let all: Vec<usize> = rows.iter().flat_map(|&r| r * c..(r + 1) * c).collect();
    let every = g.pick(logp, &all)?;
    let mean_all = g.mean(every);
    let smooth = g.scale(mean_all, S::of(-smoothing));
    let hard = g.scale(nll, S::of(1.0 - smoothing));
    g.add(hard, smooth)
}

/// Teacher-forced attention loss: mean over positions of `-log p(y_l)`.
/// `targets` are decoder classes (the transcript followed by `<eos>`).
pub fn att_loss<S: Scalar>(g: &mut Graph<'_, S>, logp: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
    let shape = g.shape(logp).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() || targets.is_empty() {
        return Err(Error::Contract(format!(
            "attention logits {shape:?} do not match {} targets",
            targets.len()
        )));
    }
    if targets.iter().any(|&t| t >= shape[1]) {
        return Err(Error::Contract("attention target outside decoder classes".into()));
    }
    let rows: Vec<usize> = (0..targets.len()).collect();
    picked_nll(g, logp, &rows, targets, smoothing)
}

/// Masked-token loss: mean `-log p` of the original classes at masked
/// positions only.
pub fn cmlm_loss<S: Scalar>(
    g: &mut Graph<'_, S>,
    logp: Var,
    targets: &[usize],
    masked_positions: &[usize],
    smoothing: f64,
) -> Result<Var> {
    let shape = g.shape(logp).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::Contract(format!(
            "CMLM logits {shape:?} do not match {} targets",
            targets.len()
        )));
    }
    if masked_positions.is_empty() {
        return Err(Error::Contract("CMLM loss needs at least one masked position".into()));
    }
    if masked_positions.iter().any(|&p| p >= targets.len()) || targets.iter().any(|&t| t >= shape[1]) {
        return Err(Error::Contract("CMLM position or target out of range".into()));
    }
    let picked: Vec<usize> = masked_positions.iter().map(|&p| targets[p]).collect();
    picked_nll(g, logp, masked_positions, &picked, smoothing)
}

/// `-λ·ctc_lp + (1 - λ)·att`, the negated joint CTC-attention objective.
pub fn joint_ar_loss<S: Scalar>(g: &mut Graph<'_, S>, ctc_lp: Var, att: Var, lambda: f64) -> Result<Var> {
    check_weight("lambda_ar", lambda)?;
    let c = g.scale(ctc_lp, S::of(-lambda));
    let a = g.scale(att, S::of(1.0 - lambda));
    g.add(c, a)
}

/// `-γ·ctc_lp + (1 - γ)·cmlm`, the negated joint CTC-CMLM objective.
pub fn joint_nar_loss<S: Scalar>(g: &mut Graph<'_, S>, ctc_lp: Var, cmlm: Var, gamma: f64) -> Result<Var> {
    check_weight("gamma_nar", gamma)?;
    let c = g.scale(ctc_lp, S::of(-gamma));
    let m = g.scale(cmlm, S::of(1.0 - gamma));
    g.add(c, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{log_sum_exp, Rng};

    fn logits(g: &mut Graph<'_, f64>, rows: &[Vec<f64>]) -> Var {
        let c = rows[0].len();
        let data = rows
            .iter()
            .flat_map(|r| {
                let lse = log_sum_exp(r);
                r.iter().map(move |x| x - lse)
            })
            .collect();
        g.input([rows.len(), c], data, true).unwrap()
    }

    fn random_rows(rng: &mut Rng, l: usize, c: usize) -> Vec<Vec<f64>> {
        (0..l).map(|_| (0..c).map(|_| rng.normal() * 2.0).collect()).collect()
    }

    #[test]
    fn att_loss_certain_and_uniform() {
        let mut g = Graph::new();
        let sure = logits(&mut g, &[vec![50., 0., 0.], vec![0., 50., 0.]]);
        let l = att_loss(&mut g, sure, &[0, 1], 0.0).unwrap();
        assert!(g.scalar(l) < 1e-12);

        let flat = logits(&mut g, &vec![vec![0.; 10]; 4]);
        let l = att_loss(&mut g, flat, &[1, 2, 3, 9], 0.0).unwrap();
        assert!((g.scalar(l) - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn att_loss_matches_hand_sum() {
        let mut rng = Rng::new(4);
        let rows = random_rows(&mut rng, 5, 6);
        let targets = [0, 5, 2, 2, 3];
        let expected = -targets
            .iter()
            .enumerate()
            .map(|(i, &t)| rows[i][t] - log_sum_exp(&rows[i]))
            .sum::<f64>()
            / 5.0;
        let mut g = Graph::new();
        let lp = logits(&mut g, &rows);
        let l = att_loss(&mut g, lp, &targets, 0.0).unwrap();
        assert!((g.scalar(l) - expected).abs() < 1e-12);
    }

    #[test]
    fn att_loss_length_mismatch() {
        let mut g = Graph::new();
        let lp = logits(&mut g, &vec![vec![0.; 3]; 2]);
        assert!(matches!(att_loss(&mut g, lp, &[0], 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn cmlm_loss_ignores_unmasked_rows() {
        let mut rng = Rng::new(8);
        let mut rows = random_rows(&mut rng, 5, 8);
        rows[1] = vec![0., 0., 60., 0., 0., 0., 0., 0.];
        rows[3] = vec![0., 60., 0., 0., 0., 0., 0., 0.];
        let targets = [0, 2, 4, 1, 7];
        let mut g = Graph::new();
        let lp = logits(&mut g, &rows);
        let l = cmlm_loss(&mut g, lp, &targets, &[1, 3], 0.0).unwrap();
        assert!(g.scalar(l) < 1e-12);

        rows[0] = random_rows(&mut rng, 1, 8).remove(0);
        rows[4] = random_rows(&mut rng, 1, 8).remove(0);
        let lp = logits(&mut g, &rows);
        let l2 = cmlm_loss(&mut g, lp, &targets, &[1, 3], 0.0).unwrap();
        assert_eq!(g.scalar(l), g.scalar(l2));
    }

    #[test]
    fn cmlm_loss_uniform_and_hand_sum() {
        let mut g = Graph::new();
        let flat = logits(&mut g, &vec![vec![0.; 8]; 4]);
        let l = cmlm_loss(&mut g, flat, &[1, 2, 3, 4], &[0, 2], 0.0).unwrap();
        assert!((g.scalar(l) - 8f64.ln()).abs() < 1e-12);

        let mut rng = Rng::new(2);
        let rows = random_rows(&mut rng, 6, 5);
        let targets = [4, 0, 1, 1, 3, 2];
        let masked = [0, 3, 5];
        let expected = -masked
            .iter()
            .map(|&p| rows[p][targets[p]] - log_sum_exp(&rows[p]))
            .sum::<f64>()
            / 3.0;
        let lp = logits(&mut g, &rows);
        let l = cmlm_loss(&mut g, lp, &targets, &masked, 0.0).unwrap();
        assert!((g.scalar(l) - expected).abs() < 1e-12);
    }

    #[test]
    fn cmlm_loss_needs_a_mask() {
        let mut g = Graph::new();
        let lp = logits(&mut g, &vec![vec![0.; 3]; 2]);
        assert!(matches!(cmlm_loss(&mut g, lp, &[0, 1], &[], 0.0), Err(Error::Contract(_))));
    }

    fn joint(f: fn(&mut Graph<'_, f64>, Var, Var, f64) -> Result<Var>, ctc: f64, other: f64, w: f64) -> Result<f64> {
        let mut g = Graph::new();
        let c = g.constant(Vec::<usize>::new(), vec![ctc]).unwrap();
        let o = g.constant(Vec::<usize>::new(), vec![other]).unwrap();
        let v = f(&mut g, c, o, w)?;
        Ok(g.scalar(v))
    }

    #[test]
    fn joint_losses() {
        assert_eq!(joint(joint_ar_loss, -10.0, 2.0, 0.0).unwrap(), 2.0);
        assert_eq!(joint(joint_ar_loss, -10.0, 2.0, 1.0).unwrap(), 10.0);
        assert!((joint(joint_ar_loss, -10.0, 2.0, 0.3).unwrap() - 4.4).abs() < 1e-12);
        assert_eq!(joint(joint_nar_loss, -20.0, 3.0, 0.0).unwrap(), 3.0);
        assert_eq!(joint(joint_nar_loss, -20.0, 3.0, 1.0).unwrap(), 20.0);
        assert!((joint(joint_nar_loss, -20.0, 3.0, 0.3).unwrap() - 8.1).abs() < 1e-12);
        assert!(matches!(joint(joint_ar_loss, 0.0, 0.0, 1.5), Err(Error::Config(_))));
        assert!(matches!(joint(joint_nar_loss, 0.0, 0.0, -0.1), Err(Error::Config(_))));
    }

    #[test]
    fn joint_loss_is_affine_in_weight() {
        let at = |w| joint(joint_nar_loss, -7.5, 1.25, w).unwrap();
        for (a, b) in [(0.0, 0.4), (0.2, 0.9), (0.5, 0.6)] {
            let mid = at((a + b) / 2.0);
            assert!((mid - (at(a) + at(b)) / 2.0).abs() < 1e-12);
        }
    }
}
