//! Supervision and distillation losses: weighted cross-entropy, KL logit
//! distillation and class-guided contrastive distillation (CCD).

use crate::dataio::DatasetStats;
use crate::membank::UNIT_TOL;
use crate::tensor::{Tensor, Var};
use crate::{Error, Result};

/// Lower clamp applied to probabilities inside logarithms.
pub const PROB_EPS: f64 = 1e-12;

/// Temperature, sample counts and dataset cardinality of the CCD objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CcdParams {
    pub tau: f64,
    pub k_p: usize,
    pub k_n: usize,
    /// Dataset cardinality `M` in the `k_N / M` noise constant.
    pub m_card: usize,
}

impl CcdParams {
    pub fn new(tau: f64, k_p: usize, k_n: usize, m_card: usize) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() || k_p == 0 || k_n == 0 || m_card == 0 {
            return Err(Error::Config(format!(
                "CCD needs tau > 0 and positive counts, got tau={tau}, k_P={k_p}, k_N={k_n}, M={m_card}"
            )));
        }
        Ok(Self {
            tau,
            k_p,
            k_n,
            m_card,
        })
    }

    /// `k_N / M`
    pub fn noise_constant(&self) -> f64 {
        self.k_n as f64 / self.m_card as f64
    }
}

/// Per-class weights `w_i = N / (K·n_i)`: inverse to class frequency, mean 1
/// under the empirical class distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    pub w: Vec<f64>,
}

pub fn class_weights(stats: &DatasetStats) -> ClassWeights {
    let n = stats.n as f64;
    let k = stats.k as f64;
    ClassWeights {
        w: stats.class_counts.iter().map(|&c| n / (k * c as f64)).collect(),
    }
}

impl ClassWeights {
    pub fn uniform(k: usize) -> Self {
        Self { w: vec![1.0; k] }
    }
}

fn rows_and_width(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match *shape {
        [b, k] => Ok((b, k)),
        _ => Err(Error::Contract(format!("{op}: expected a [B, K] tensor, got {shape:?}"))),
    }
}

/// `(1/B)·Σ_b w_{y_b}·(−log softmax(logits_b)[y_b])`.
pub fn wce_loss<'t>(logits: Var<'t>, labels: &[usize], weights: &ClassWeights) -> Result<Var<'t>> {
    let (b, k) = rows_and_width(&logits.shape(), "wce_loss")?;
    if labels.len() != b {
        return Err(Error::Contract(format!(
            "wce_loss: {b} rows but {} labels",
            labels.len()
        )));
    }
    if weights.w.len() != k {
        return Err(Error::Contract(format!(
            "wce_loss: {k} classes but {} weights",
            weights.w.len()
        )));
    }
    let mut mask = vec![0.0; b * k];
    for (row, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Validation(format!("label {y} outside [0, {k})")));
        }
        mask[row * k + y] = weights.w[y];
    }
    let tape = logits.tape();
    let mask = tape.constant(Tensor::new(vec![b, k], mask)?);
    let logp = logits.log_softmax(1)?;
    Ok(logp.mul(&mask)?.sum().scale(-1.0 / b as f64))
}

/// `(1/B)·Σ_b Σ_k p_t·log(p_t / p_s)`, with `p_t` a constant target.
/// Both distributions are clamped at [`PROB_EPS`] inside the logarithms.
pub fn kl_loss<'t>(p_s: Var<'t>, p_t: &Tensor) -> Result<Var<'t>> {
    let shape = p_s.shape();
    let (b, _) = rows_and_width(&shape, "kl_loss")?;
    if p_t.shape() != shape.as_slice() {
        return Err(Error::Contract(format!(
            "kl_loss: student {:?} vs teacher {:?}",
            shape,
            p_t.shape()
        )));
    }
    relative_entropy(p_s, p_t, 1.0 / b as f64)
}

/// `scale · Σ target·(log target − log clamp(pred))`; zero when `pred == target`.
pub(crate) fn relative_entropy<'t>(pred: Var<'t>, target: &Tensor, scale: f64) -> Result<Var<'t>> {
    let tape = pred.tape();
    let entropy_term: f64 = target.data().iter().map(|&t| t * t.max(PROB_EPS).ln()).sum();
    let cross = tape
        .constant(target.clone())
        .mul(&pred.clamp_min(PROB_EPS).log()?)?
        .sum();
    let c = tape.constant(Tensor::scalar(entropy_term));
    Ok(c.sub(&cross)?.scale(scale))
}

fn check_unit_rows(data: &[f64], d: usize, what: &str) -> Result<()> {
    for (i, row) in data.chunks(d).enumerate() {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(Error::Contract(format!(
                "{what} row {i} has norm {norm}, expected unit norm"
            )));
        }
    }
    Ok(())
}

/// Batched CCD loss, averaged over the batch.
///
/// For a query `q` with positives `P` and negatives `N` from the other
/// network's bank, with `h(s) = e^{s/τ} / (e^{s/τ} + k_N/M)`:
///
/// `−(1/k_P)·Σ_i [ log h(q·P_i) + Σ_j log(1 − h(q·N_j)) ]`
///
/// The negative sum does not depend on `i`, so it contributes once.
/// `h(s) = σ(s/τ − ln(k_N/M))`, which is evaluated in log-sigmoid form.
///
/// `queries` is `[B, d]`; `positives` is `[B, k_P, d]`; `negatives` is
/// `[B, k_N, d]`. Bank rows are constants; only `queries` receives gradient.
pub fn ccd_loss<'t>(
    queries: Var<'t>,
    positives: &Tensor,
    negatives: &Tensor,
    params: &CcdParams,
) -> Result<Var<'t>> {
    let (b, d) = rows_and_width(&queries.shape(), "ccd_loss")?;
    let expect = |t: &Tensor, k: usize, what: &str| -> Result<()> {
        if t.shape() != [b, k, d] {
            return Err(Error::Contract(format!(
                "ccd_loss: {what} should be [{b}, {k}, {d}], got {:?}",
                t.shape()
            )));
        }
        check_unit_rows(t.data(), d, what)
    };
    expect(positives, params.k_p, "positives")?;
    expect(negatives, params.k_n, "negatives")?;
    check_unit_rows(&queries.data(), d, "query")?;

    let tape = queries.tape();
    let shift = tape.constant(Tensor::scalar(params.noise_constant().ln()));
    let logits = |rows: &Tensor| -> Result<Var<'t>> {
        let sims = queries.row_dots(&tape.constant(rows.clone()))?;
        Ok(sims.scale(1.0 / params.tau).sub(&shift)?)
    };
    let pos = logits(positives)?.log_sigmoid().sum().scale(1.0 / params.k_p as f64);
    let neg = logits(negatives)?.neg().log_sigmoid().sum();
    Ok(pos.add(&neg)?.scale(-1.0 / b as f64))
}

fn single<'t>(
    query: Var<'t>,
    positives: &Tensor,
    negatives: &Tensor,
    params: &CcdParams,
) -> Result<Var<'t>> {
    let d = *query.shape().last().expect("rank >= 1");
    let q = query.reshape(&[1, d])?;
    let lift = |t: &Tensor, k: usize| -> Result<Tensor> {
        Ok(Tensor::new(vec![1, k, d], t.data().to_vec())?)
    };
    ccd_loss(
        q,
        &lift(positives, params.k_p)?,
        &lift(negatives, params.k_n)?,
        params,
    )
}

/// CCD loss of one student embedding against `k_P × d` positives and
/// `k_N × d` negatives drawn from the teacher bank.
pub fn ccd_student_loss<'t>(
    g_s: Var<'t>,
    positives: &Tensor,
    negatives: &Tensor,
    params: &CcdParams,
) -> Result<Var<'t>> {
    single(g_s, positives, negatives, params)
}

/// Mirror of [`ccd_student_loss`] for a teacher embedding against rows of
/// the student bank.
pub fn ccd_teacher_loss<'t>(
    g_t: Var<'t>,
    positives: &Tensor,
    negatives: &Tensor,
    params: &CcdParams,
) -> Result<Var<'t>> {
    single(g_t, positives, negatives, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn probs(rows: &[&[f64]]) -> Tensor {
        let k = rows[0].len();
        Tensor::new(vec![rows.len(), k], rows.concat()).unwrap()
    }

    fn logits_of(p: &Tensor) -> Tensor {
        Tensor::new(p.shape().to_vec(), p.data().iter().map(|x| x.ln()).collect()).unwrap()
    }

    #[test]
    fn class_weight_values() {
        let stats = DatasetStats::from_labels(&[0, 0, 1], 2).unwrap();
        assert_eq!(class_weights(&stats).w, vec![0.75, 1.5]);
        let balanced = DatasetStats::from_labels(&[0, 1, 2, 0, 1, 2], 3).unwrap();
        assert_eq!(class_weights(&balanced).w, vec![1.0; 3]);
    }

    #[test]
    fn wce_values() {
        let tape = Tape::new();
        let uniform = tape.constant(Tensor::zeros(&[2, 4]));
        let l = wce_loss(uniform, &[1, 3], &ClassWeights::uniform(4)).unwrap();
        assert!((l.item() - 4f64.ln()).abs() < 1e-12);

        let half = tape.constant(logits_of(&probs(&[&[0.5, 0.5]])));
        let w = ClassWeights { w: vec![0.75, 1.5] };
        let l = wce_loss(half, &[0], &w).unwrap();
        assert!((l.item() - 0.75 * 2f64.ln()).abs() < 1e-12);

        let sharp = tape.constant(probs(&[&[60.0, -60.0]]));
        let l = wce_loss(sharp, &[0], &ClassWeights::uniform(2)).unwrap();
        assert!(l.item().abs() < 1e-12);

        let bad = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(wce_loss(bad, &[2], &ClassWeights::uniform(2)).is_err());
    }

    #[test]
    fn kl_values() {
        let tape = Tape::new();
        let p = probs(&[&[0.2, 0.3, 0.5], &[0.9, 0.05, 0.05]]);
        let same = kl_loss(tape.constant(p.clone()), &p).unwrap();
        assert_eq!(same.item(), 0.0);
        let ps = tape.constant(probs(&[&[0.5, 0.5]]));
        let l = kl_loss(ps, &probs(&[&[1.0, 0.0]])).unwrap();
        assert!((l.item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ccd_hand_value() {
        let params = CcdParams::new(1.0, 1, 1, 2).unwrap();
        let tape = Tape::new();
        let q = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        let pos = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let neg = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let l = ccd_student_loss(q, &pos, &neg, &params).unwrap();
        // -ln(e/(e+0.5)) - ln(1 - 1/1.5)
        let e = std::f64::consts::E;
        let want = -(e / (e + 0.5)).ln() - (1.0 - 1.0 / 1.5f64).ln();
        assert!((l.item() - want).abs() < 1e-12);
        assert!((l.item() - 1.2675).abs() < 1e-4);
    }

    #[test]
    fn ccd_rejects_non_unit() {
        let params = CcdParams::new(1.0, 1, 1, 2).unwrap();
        let tape = Tape::new();
        let q = tape.constant(Tensor::vector(vec![2.0, 0.0]));
        let row = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            ccd_student_loss(q, &row, &row, &params),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn ccd_params_validate() {
        assert!(CcdParams::new(0.0, 1, 1, 1).is_err());
        assert!(CcdParams::new(0.07, 0, 1, 1).is_err());
    }
}
