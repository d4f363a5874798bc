//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{FusionError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{ParamStore, Tensor};

/// Anything with parameters and a differentiable forward pass.
pub trait Differentiable {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn forward_var(&self, tape: &mut Tape, params: &[Var], input: Var) -> Result<Var>;
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Scalars probed per parameter tensor (all of them when fewer).
    pub samples_per_param: usize,
    /// Denominator floor for the relative error at `step`, so gradients
    /// that are numerically zero on both sides do not divide by zero.
    /// Refined steps raise it in proportion.
    pub abs_floor: f64,
    pub seed: u64,
    /// How many times a probe that crosses a kink is retried with a step
    /// ten times smaller.
    pub kink_retries: usize,
    /// Test hook: perturbs the analytic gradient of the named parameter.
    pub corrupt: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            samples_per_param: 64,
            abs_floor: 1e-6,
            seed: 0,
            kink_retries: 2,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    /// Probes dropped because every step size crossed a kink.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn worst(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.max_rel_error))
    }

    pub fn failures(&self) -> Vec<&str> {
        self.entries.iter().filter(|e| !e.passed).map(|e| e.name.as_str()).collect()
    }
}

/// Loss and branch signature of one forward pass.
fn evaluate<M, L>(model: &M, input: &Tensor, loss_fn: &L) -> Result<(f64, u64)>
where
    M: Differentiable,
    L: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let p = tape.bind(model.params());
    let x = tape.constant(input.clone());
    let out = model.forward_var(&mut tape, &p, x)?;
    let loss = loss_fn(&mut tape, out)?;
    Ok((tape.value(loss).data()[0], tape.branch_signature()))
}

/// Compares backpropagated gradients with `(L(t+h) - L(t-h)) / 2h` on a
/// seeded subsample of every parameter tensor.
///
/// A probe whose `t +- h` evaluations take a different branch through a
/// relu, abs or max than `t` straddles a kink, where the difference
/// quotient is not a derivative; it is retried with smaller steps and
/// skipped if every step straddles one. A tensor with no valid probe fails.
///
/// Parameter gradients are overwritten. Values are restored bit-exactly
/// after each probe.
pub fn finite_diff_check<M, L>(
    model: &mut M,
    input: &Tensor,
    loss_fn: L,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    M: Differentiable,
    L: Fn(&mut Tape, Var) -> Result<Var>,
{
    if opts.step <= 0.0 {
        return Err(FusionError::invalid(format!("finite-difference step must be > 0, got {}", opts.step)));
    }
    let (first, base_sig) = evaluate(model, input, &loss_fn)?;
    let (second, _) = evaluate(model, input, &loss_fn)?;
    if first.to_bits() != second.to_bits() {
        return Err(FusionError::NonDeterministic { first, second });
    }

    model.params_mut().zero_grad();
    {
        let mut tape = Tape::new();
        let p = tape.bind(model.params());
        let x = tape.constant(input.clone());
        let out = model.forward_var(&mut tape, &p, x)?;
        let loss = loss_fn(&mut tape, out)?;
        tape.backward(loss, model.params_mut())?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut entries = Vec::with_capacity(model.params().len());
    for pi in 0..model.params().len() {
        let id = crate::tensor::ParamId(pi);
        let (name, n, mut analytic) = {
            let p = model.params().get(id);
            (p.name.clone(), p.numel(), p.grad())
        };
        if opts.corrupt.as_deref() == Some(name.as_str()) {
            for g in &mut analytic {
                *g += 1.0;
            }
        }
        let indices: Vec<usize> = if n <= opts.samples_per_param {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, opts.samples_per_param).into_vec();
            v.sort_unstable();
            v
        };
        let mut worst: f64 = 0.0;
        let mut skipped = 0;
        for &i in &indices {
            let original = model.params().get(id).tensor.data()[i];
            let mut found = None;
            let mut h = opts.step;
            for _ in 0..=opts.kink_retries {
                model.params_mut().get_mut(id).tensor.data_mut()[i] = original + h;
                let plus = evaluate(model, input, &loss_fn);
                model.params_mut().get_mut(id).tensor.data_mut()[i] = original - h;
                let minus = evaluate(model, input, &loss_fn);
                model.params_mut().get_mut(id).tensor.data_mut()[i] = original;
                let ((lp, sp), (lm, sm)) = (plus?, minus?);
                if sp == base_sig && sm == base_sig {
                    found = Some(((lp - lm) / (2.0 * h), h));
                    break;
                }
                h /= 10.0;
            }
            let Some((numeric, h)) = found else {
                skipped += 1;
                continue;
            };
            let a = analytic[i];
            // cancellation noise grows as 1/h; scale the floor to match
            let floor = opts.abs_floor * (opts.step / h);
            let denom = a.abs().max(numeric.abs()).max(floor);
            worst = worst.max((a - numeric).abs() / denom);
        }
        if skipped > 0 {
            log::debug!("gradcheck: {name}: {skipped} probe(s) straddle a kink at every step");
        }
        entries.push(ParamCheck {
            name,
            checked: indices.len() - skipped,
            skipped,
            max_rel_error: worst,
            passed: worst <= opts.tolerance && skipped < indices.len(),
        });
    }
    Ok(GradCheckReport {
        tolerance: opts.tolerance,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{kaiming_uniform, ParamId};
    use std::cell::Cell;

    struct Affine {
        store: ParamStore,
        w: ParamId,
        b: ParamId,
        relu: bool,
    }

    impl Affine {
        fn new() -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut store = ParamStore::new();
            let w = store.add("lin.w", kaiming_uniform(&[3, 4], 4, &mut rng)).unwrap();
            let b = store.add("lin.b", Tensor::uniform(&[3], -1.0, 1.0, &mut rng)).unwrap();
            Self { store, w, b, relu: false }
        }
    }

    impl Differentiable for Affine {
        fn params(&self) -> &ParamStore {
            &self.store
        }
        fn params_mut(&mut self) -> &mut ParamStore {
            &mut self.store
        }
        fn forward_var(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
            let y = tape.linear(x, p[self.w.index()], Some(p[self.b.index()]))?;
            if self.relu {
                tape.relu(y)
            } else {
                Ok(y)
            }
        }
    }

    fn weighted_sum(tape: &mut Tape, out: Var) -> Result<Var> {
        let c = tape.constant(Tensor::new(&[3], vec![0.3, -1.2, 2.0]).unwrap());
        let m = tape.mul(out, c)?;
        tape.sum(m)
    }

    #[test]
    fn linear_model_is_exact() {
        let mut m = Affine::new();
        let x = Tensor::new(&[4], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        // No truncation error on an affine map, so a wide step only shrinks
        // the rounding term.
        let opts = GradCheckOptions {
            step: 1e-3,
            ..Default::default()
        };
        let report = finite_diff_check(&mut m, &x, weighted_sum, &opts).unwrap();
        assert!(report.passed());
        assert!(report.worst() <= 1e-10, "worst {}", report.worst());
        assert_eq!(report.entries.len(), 2);
    }

    #[test]
    fn corrupted_gradient_is_named() {
        let mut m = Affine::new();
        let x = Tensor::new(&[4], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let opts = GradCheckOptions {
            corrupt: Some("lin.b".into()),
            ..Default::default()
        };
        let report = finite_diff_check(&mut m, &x, weighted_sum, &opts).unwrap();
        assert_eq!(report.failures(), vec!["lin.b"]);
    }

    #[test]
    fn probes_straddling_a_kink_are_refined() {
        let mut m = Affine::new();
        m.relu = true;
        let x = Tensor::new(&[4], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        // first output sits 3e-6 above the relu kink: a 1e-5 step in b[0]
        // or in w[0][0..3] crosses it, a 1e-6 step does not
        let w0: f64 = m.store.get(m.w).tensor.data()[..4].iter().zip(x.data()).map(|(w, x)| w * x).sum();
        m.store.get_mut(m.b).tensor.data_mut()[0] = 3e-6 - w0;

        let report = finite_diff_check(&mut m, &x, weighted_sum, &GradCheckOptions::default()).unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.entries.iter().all(|e| e.skipped == 0));

        let strict = GradCheckOptions {
            kink_retries: 0,
            ..Default::default()
        };
        let report = finite_diff_check(&mut m, &x, weighted_sum, &strict).unwrap();
        let skipped: Vec<usize> = report.entries.iter().map(|e| e.skipped).collect();
        assert_eq!(skipped, vec![3, 1]);
        assert!(report.passed());
    }

    #[test]
    fn nondeterministic_loss_rejected() {
        let mut m = Affine::new();
        let x = Tensor::new(&[4], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let calls = Cell::new(0u32);
        let flaky = |tape: &mut Tape, out: Var| {
            calls.set(calls.get() + 1);
            let s = tape.sum(out)?;
            tape.add_scalar(s, calls.get() as f64)
        };
        assert!(matches!(
            finite_diff_check(&mut m, &x, flaky, &GradCheckOptions::default()),
            Err(FusionError::NonDeterministic { .. })
        ));
    }

    #[test]
    fn bad_step_rejected() {
        let mut m = Affine::new();
        let x = Tensor::zeros(&[4]);
        let opts = GradCheckOptions {
            step: 0.0,
            ..Default::default()
        };
        assert!(finite_diff_check(&mut m, &x, weighted_sum, &opts).is_err());
    }
}
