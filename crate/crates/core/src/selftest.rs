//! Runtime verification suite behind `crckd selftest`: finite-difference
//! checks of every differentiable op and loss, plus loop oracles for the
//! batched CCD loss, centroids and the CRP loss.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::gradcheck::{self, GradCheck};
use crate::losses::{ccd_loss, kl_loss, wce_loss, CcdParams, ClassWeights};
use crate::membank::MemoryBank;
use crate::relation::{compute_centroids, crp_loss, relation_graphs, CentroidSource};
use crate::seed;
use crate::tensor::{Tape, Tensor, TensorError, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Stream tag for selftest instances.
const TAG_SELFTEST: u64 = 0x5e1f;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    /// Random instances per gradient check.
    pub instances: usize,
    pub seed: u64,
    /// Name of a gradient check whose analytic gradient is deliberately
    /// corrupted, to exercise the failure path.
    pub inject_fault: Option<String>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            instances: 20,
            seed: 0,
            inject_fault: None,
        }
    }
}

fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("non-empty shape")
}

fn unit_rows(rows: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * d);
    for _ in 0..rows {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        out.extend(v.iter().map(|x| x / n));
    }
    out
}

fn simplex_rows(rows: usize, k: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut data = Vec::with_capacity(rows * k);
    for _ in 0..rows {
        let v: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
        let z: f64 = v.iter().sum();
        data.extend(v.iter().map(|x| x / z));
    }
    Tensor::new(vec![rows, k], data).expect("non-empty")
}

/// `Σ w ⊙ y` with a fixed random weighting, so every output element matters.
fn weighted_sum<'t>(y: Var<'t>, rng_seed: u64) -> Result<Var<'t>, TensorError> {
    let mut rng = seed::stream(rng_seed, &[TAG_SELFTEST, 0xffff]);
    let w = normal(&y.shape(), &mut rng);
    let wv = y.tape().constant(w);
    Ok(y.mul(&wv)?.sum())
}

type LossFn = Box<dyn for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, TensorError>>;

/// One randomly drawn gradient-check instance: input point plus the scalar
/// function to differentiate.
struct Instance {
    x: Tensor,
    f: LossFn,
}

fn loss_fn<F>(f: F) -> LossFn
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, TensorError> + 'static,
{
    Box::new(f)
}

type Builder = fn(&mut ChaCha8Rng, u64) -> Instance;

fn lift(e: crate::Error) -> TensorError {
    match e {
        crate::Error::Tensor(t) => t,
        other => panic!("selftest loss failed outside the tensor engine: {other}"),
    }
}

fn op_checks() -> Vec<(&'static str, Builder)> {
    vec![
        ("add", |rng, s| Instance {
            x: normal(&[3, 4], rng),
            f: loss_fn(move |t, x| {
                let c = t.constant(normal(&[3, 4], &mut seed::stream(s, &[1])));
                weighted_sum(x.add(&c)?.mul(&x)?, s)
            }),
        }),
        ("sub", |rng, s| Instance {
            x: normal(&[5], rng),
            f: loss_fn(move |_, x| weighted_sum(x.sub(&x.scale(0.3))?.mul(&x)?, s)),
        }),
        ("mul", |rng, s| Instance {
            x: normal(&[2, 3], rng),
            f: loss_fn(move |_, x| weighted_sum(x.mul(&x)?, s)),
        }),
        ("div", |rng, s| {
            let x = normal(&[4], rng);
            Instance {
                x,
                f: loss_fn(move |t, x| {
                    let denom = t.constant(Tensor::vector(vec![1.5, -2.0, 3.0, 0.7]));
                    let num = x.exp();
                    weighted_sum(num.div(&denom)?.add(&denom.div(&num)?)?, s)
                }),
            }
        }),
        ("exp", |rng, s| Instance {
            x: normal(&[6], rng),
            f: loss_fn(move |_, x| weighted_sum(x.exp(), s)),
        }),
        ("log", |rng, s| {
            let mut x = normal(&[6], rng);
            x.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.5);
            Instance {
                x,
                f: loss_fn(move |_, x| weighted_sum(x.log()?, s)),
            }
        }),
        ("relu", |rng, s| {
            // keep inputs away from the kink
            let mut x = normal(&[8], rng);
            x.data_mut().iter_mut().for_each(|v| {
                if v.abs() < 0.1 {
                    *v += 0.2_f64.copysign(*v);
                }
            });
            Instance {
                x,
                f: loss_fn(move |_, x| weighted_sum(x.relu(), s)),
            }
        }),
        ("log_sigmoid", |rng, s| {
            let mut x = normal(&[6], rng);
            x.data_mut()[0] = 40.0;
            x.data_mut()[1] = -40.0;
            Instance {
                x,
                f: loss_fn(move |_, x| weighted_sum(x.log_sigmoid(), s)),
            }
        }),
        ("matmul", |rng, s| Instance {
            x: normal(&[3, 4], rng),
            f: loss_fn(move |t, x| {
                let b = t.constant(normal(&[4, 2], &mut seed::stream(s, &[2])));
                let left = x.matmul(&b)?;
                let c = t.constant(normal(&[4, 2], &mut seed::stream(s, &[3])));
                weighted_sum(c.matmul(&left.mul(&left)?.transpose()?)?, s)
            }),
        }),
        ("add_bias", |rng, s| Instance {
            x: normal(&[3], rng),
            f: loss_fn(move |t, b| {
                let x = t.constant(normal(&[4, 3], &mut seed::stream(s, &[4])));
                weighted_sum(x.add_bias(&b)?.exp(), s)
            }),
        }),
        ("row_dots", |rng, s| Instance {
            x: normal(&[2, 3], rng),
            f: loss_fn(move |t, q| {
                let rows = t.constant(normal(&[2, 4, 3], &mut seed::stream(s, &[5])));
                weighted_sum(q.row_dots(&rows)?.exp(), s)
            }),
        }),
        ("softmax", |rng, s| Instance {
            x: normal(&[3, 5], rng),
            f: loss_fn(move |_, x| weighted_sum(x.softmax(1)?, s)),
        }),
        ("log_softmax", |rng, s| Instance {
            x: normal(&[3, 5], rng),
            f: loss_fn(move |_, x| weighted_sum(x.log_softmax(1)?, s)),
        }),
        ("l2_normalize", |rng, s| Instance {
            x: normal(&[3, 4], rng),
            f: loss_fn(move |_, x| weighted_sum(x.l2_normalize()?, s)),
        }),
        ("conv2d", |rng, s| Instance {
            x: normal(&[2, 2, 3, 3], rng),
            f: loss_fn(move |t, w| {
                let x = t.constant(normal(&[2, 2, 5, 4], &mut seed::stream(s, &[6])));
                let b = t.constant(normal(&[2], &mut seed::stream(s, &[7])));
                weighted_sum(x.conv2d(&w, &b, 1)?, s)
            }),
        }),
        ("conv2d_input", |rng, s| Instance {
            x: normal(&[1, 2, 4, 5], rng),
            f: loss_fn(move |t, x| {
                let w = t.constant(normal(&[3, 2, 3, 3], &mut seed::stream(s, &[8])));
                let b = t.constant(normal(&[3], &mut seed::stream(s, &[9])));
                weighted_sum(x.conv2d(&w, &b, 1)?, s)
            }),
        }),
        ("avg_pool2", |rng, s| Instance {
            x: normal(&[1, 2, 4, 5], rng),
            f: loss_fn(move |_, x| weighted_sum(x.avg_pool2()?.exp(), s)),
        }),
    ]
}

const B: usize = 3;
const D: usize = 4;
const K: usize = 3;

fn ccd_fixture(s: u64, tag: u64) -> (Tensor, Tensor, Tensor, CcdParams) {
    let mut rng = seed::stream(s, &[TAG_SELFTEST, tag]);
    let params = CcdParams::new(0.5, 3, 5, 40).expect("valid");
    let feats = normal(&[B, 6], &mut rng);
    let pos = Tensor::new(vec![B, params.k_p, D], unit_rows(B * params.k_p, D, &mut rng)).expect("shape");
    let neg = Tensor::new(vec![B, params.k_n, D], unit_rows(B * params.k_n, D, &mut rng)).expect("shape");
    (feats, pos, neg, params)
}

fn loss_checks() -> Vec<(&'static str, Builder)> {
    vec![
        ("wce", |rng, s| Instance {
            x: normal(&[4, K], rng),
            f: loss_fn(move |_, logits| {
                let w = ClassWeights { w: vec![0.5, 1.25, 2.0] };
                let labels = [(s % 3) as usize, 1, 2, 0];
                wce_loss(logits, &labels, &w).map_err(lift)
            }),
        }),
        ("kl", |rng, s| Instance {
            x: normal(&[4, K], rng),
            f: loss_fn(move |_, logits| {
                let p_t = simplex_rows(4, K, &mut seed::stream(s, &[TAG_SELFTEST, 11]));
                kl_loss(logits.softmax(1)?, &p_t).map_err(lift)
            }),
        }),
        // student CCD through the student projection head
        ("ccd_student", |rng, s| Instance {
            x: normal(&[6, D], rng),
            f: loss_fn(move |t, w| {
                let (f, pos, neg, params) = ccd_fixture(s, 12);
                let g = t.constant(f).matmul(&w)?.l2_normalize()?;
                ccd_loss(g, &pos, &neg, &params).map_err(lift)
            }),
        }),
        // teacher CCD through the teacher projection head only
        ("ccd_teacher", |rng, s| Instance {
            x: normal(&[6, D], rng),
            f: loss_fn(move |t, w| {
                let (f, pos, neg, params) = ccd_fixture(s, 13);
                let g = t.constant(f).matmul(&w)?.l2_normalize()?;
                ccd_loss(g, &pos, &neg, &params).map_err(lift)
            }),
        }),
        ("crp", |rng, s| Instance {
            x: normal(&[B, D], rng),
            f: loss_fn(move |_, e| {
                let mut r = seed::stream(s, &[TAG_SELFTEST, 14]);
                let labels = vec![0, 1, 2, 0, 1, 2, 2];
                let mut bank = MemoryBank::new(labels, D, 0.0, s).expect("valid bank");
                let rows = unit_rows(7, D, &mut r);
                bank.update(&(0..7).collect::<Vec<_>>(), &rows).expect("unit rows");
                let c = compute_centroids(&bank, K, CentroidSource::Student).expect("all classes");
                let r_t = simplex_rows(B, K, &mut r);
                let r_s = relation_graphs(e.l2_normalize()?, &c).map_err(lift)?;
                crp_loss(r_s, &r_t).map_err(lift)
            }),
        }),
    ]
}

/// Names of every gradient check, ops first.
pub fn gradient_check_names() -> Vec<&'static str> {
    op_checks()
        .into_iter()
        .chain(loss_checks())
        .map(|(n, _)| n)
        .collect()
}

/// Loss names covered by [`loss_gradient_check`].
pub const LOSS_CHECKS: [&str; 5] = ["wce", "kl", "ccd_student", "ccd_teacher", "crp"];

fn run_gradient_check(
    name: &str,
    build: Builder,
    instances: usize,
    suite_seed: u64,
    corrupt: bool,
) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let s = seed::derive(suite_seed, &[TAG_SELFTEST, i as u64]);
        let mut rng = seed::stream(s, &[TAG_SELFTEST]);
        let inst = build(&mut rng, s);
        let mut gc: GradCheck = gradcheck::check(&inst.x, FD_STEP, |t, x| (inst.f)(t, x))
            .map_err(|e| format!("{name}: instance {i}: {e}"))?;
        if corrupt {
            gc.analytic.iter_mut().for_each(|g| *g *= 1.01);
            gc.rel_err = gradcheck::relative_error(&gc.analytic, &gc.numeric);
        }
        if !gc.passes(FD_TOL) {
            return Err(format!(
                "{name}: instance {i}: relative error {:.3e} exceeds {FD_TOL:e}",
                gc.rel_err
            ));
        }
        worst = worst.max(gc.rel_err);
    }
    Ok(worst)
}

/// Worst relative error of one loss's gradient over `instances` random
/// draws, or a description of the first failure.
pub fn loss_gradient_check(name: &str, instances: usize, suite_seed: u64) -> Result<f64, String> {
    let (_, build) = loss_checks()
        .into_iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| format!("no loss check named `{name}`"))?;
    run_gradient_check(name, build, instances, suite_seed, false)
}

/// Scalar loop evaluation of the CCD objective for one query.
pub fn ccd_loop_oracle(q: &[f64], pos: &[Vec<f64>], neg: &[Vec<f64>], tau: f64, noise: f64) -> f64 {
    let h = |row: &[f64]| {
        let s: f64 = q.iter().zip(row).map(|(a, b)| a * b).sum();
        let e = (s / tau).exp();
        e / (e + noise)
    };
    let pos_term: f64 = pos.iter().map(|p| h(p).ln()).sum::<f64>() / pos.len() as f64;
    let neg_term: f64 = neg.iter().map(|n| (1.0 - h(n)).ln()).sum();
    -(pos_term + neg_term)
}

fn oracle_ccd(suite_seed: u64) -> Result<f64, String> {
    let mut rng = seed::stream(suite_seed, &[TAG_SELFTEST, 20]);
    let params = CcdParams::new(0.2, 4, 7, 30).map_err(|e| e.to_string())?;
    let q = unit_rows(B, D, &mut rng);
    let pos = unit_rows(B * params.k_p, D, &mut rng);
    let neg = unit_rows(B * params.k_n, D, &mut rng);
    let tape = Tape::new();
    let qv = tape.constant(Tensor::new(vec![B, D], q.clone()).map_err(|e| e.to_string())?);
    let batched = ccd_loss(
        qv,
        &Tensor::new(vec![B, params.k_p, D], pos.clone()).map_err(|e| e.to_string())?,
        &Tensor::new(vec![B, params.k_n, D], neg.clone()).map_err(|e| e.to_string())?,
        &params,
    )
    .map_err(|e| e.to_string())?
    .item();
    let rows = |v: &[f64], b: usize, k: usize| -> Vec<Vec<f64>> {
        (0..k).map(|i| v[(b * k + i) * D..(b * k + i + 1) * D].to_vec()).collect()
    };
    let looped: f64 = (0..B)
        .map(|b| {
            ccd_loop_oracle(
                &q[b * D..(b + 1) * D],
                &rows(&pos, b, params.k_p),
                &rows(&neg, b, params.k_n),
                params.tau,
                params.noise_constant(),
            )
        })
        .sum::<f64>()
        / B as f64;
    let err = (batched - looped).abs();
    if err < 1e-10 {
        Ok(err)
    } else {
        Err(format!("batched {batched} vs loop {looped}"))
    }
}

fn oracle_ccd_hand() -> Result<f64, String> {
    let v = ccd_loop_oracle(&[1.0, 0.0], &[vec![1.0, 0.0]], &[vec![0.0, 1.0]], 1.0, 0.5);
    let expected = -((1f64.exp() / (1f64.exp() + 0.5)).ln() + (1.0 - 1.0 / 1.5f64).ln());
    let tape = Tape::new();
    let q = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).expect("shape"));
    let params = CcdParams::new(1.0, 1, 1, 2).expect("valid");
    let pos = Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]).expect("shape");
    let neg = Tensor::new(vec![1, 1, 2], vec![0.0, 1.0]).expect("shape");
    let batched = ccd_loss(q, &pos, &neg, &params).map_err(|e| e.to_string())?.item();
    let err = (v - expected).abs().max((batched - 1.2675).abs());
    if err < 1e-4 {
        Ok(err)
    } else {
        Err(format!("hand case gives {batched}, expected about 1.2675"))
    }
}

fn oracle_centroids(suite_seed: u64) -> Result<f64, String> {
    let mut rng = seed::stream(suite_seed, &[TAG_SELFTEST, 21]);
    let labels: Vec<usize> = (0..30).map(|i| if i < 3 { i } else { rng.random_range(0..K) }).collect();
    let bank = MemoryBank::new(labels.clone(), D, 0.5, suite_seed).map_err(|e| e.to_string())?;
    let c = compute_centroids(&bank, K, CentroidSource::Teacher).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for class in 0..K {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        for j in 0..D {
            let mut acc = 0.0;
            for &i in &members {
                acc += bank.row(i)[j];
            }
            worst = worst.max((acc / members.len() as f64 - c.row(class)[j]).abs());
        }
    }
    if worst < 1e-12 {
        Ok(worst)
    } else {
        Err(format!("centroid differs from loop mean by {worst:e}"))
    }
}

fn oracle_crp_hand() -> Result<f64, String> {
    let tape = Tape::new();
    let r_s = tape.constant(Tensor::new(vec![1, 2], vec![0.6, 0.4]).expect("shape"));
    let r_t = Tensor::new(vec![1, 2], vec![0.8, 0.2]).expect("shape");
    let v = crp_loss(r_s, &r_t).map_err(|e| e.to_string())?.item();
    let expected = 0.8 * (0.8f64 / 0.6).ln() + 0.2 * (0.2f64 / 0.4).ln();
    let err = (v - expected).abs();
    if err < 1e-9 && (v - 0.09151).abs() < 1e-5 {
        Ok(err)
    } else {
        Err(format!("CRP hand case gives {v}, expected {expected}"))
    }
}

/// Runs every check; the suite passes when no outcome failed.
pub fn run_suite(opts: &SuiteOptions) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    for (name, build) in op_checks().into_iter().chain(loss_checks()) {
        let corrupt = opts.inject_fault.as_deref() == Some(name);
        let res = run_gradient_check(name, build, opts.instances, opts.seed, corrupt);
        out.push(outcome(format!("grad:{name}"), res));
    }
    let oracles: [(&str, Result<f64, String>); 4] = [
        ("oracle:ccd_loop", oracle_ccd(opts.seed)),
        ("oracle:ccd_hand", oracle_ccd_hand()),
        ("oracle:centroids", oracle_centroids(opts.seed)),
        ("oracle:crp_hand", oracle_crp_hand()),
    ];
    for (name, res) in oracles {
        out.push(outcome(name.to_string(), res));
    }
    out
}

fn outcome(name: String, res: Result<f64, String>) -> CheckOutcome {
    match res {
        Ok(err) => CheckOutcome {
            name,
            passed: true,
            detail: format!("max error {err:.2e}"),
        },
        Err(detail) => CheckOutcome {
            name,
            passed: false,
            detail,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pristine_suite_passes() {
        let opts = SuiteOptions {
            instances: 3,
            ..SuiteOptions::default()
        };
        let failures: Vec<_> = run_suite(&opts).into_iter().filter(|o| !o.passed).collect();
        assert!(failures.is_empty(), "{failures:#?}");
    }

    #[test]
    fn injected_fault_names_the_op() {
        let opts = SuiteOptions {
            instances: 2,
            inject_fault: Some("softmax".into()),
            ..SuiteOptions::default()
        };
        let failed: Vec<_> = run_suite(&opts).into_iter().filter(|o| !o.passed).collect();
        assert_eq!(failed.len(), 1);
        assert_eq!(failed[0].name, "grad:softmax");
    }

    #[test]
    fn names_cover_losses() {
        let names = gradient_check_names();
        for l in LOSS_CHECKS {
            assert!(names.contains(&l));
        }
    }
}
