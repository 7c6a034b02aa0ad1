//! Central finite-difference gradient checking.
//!
//! Used by unit tests and by the `selfcheck` command, so it lives in the
//! library rather than behind `cfg(test)`.

use rand::Rng;

use super::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Maximum accepted relative error between analytic and numeric gradients.
pub const REL_TOLERANCE: f64 = 1e-4;
/// Denominator floor: below this magnitude both gradients count as zero and
/// the comparison degrades to an absolute one at this scale.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn random_tensor<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(argument index, flat element index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
}

impl GradReport {
    pub fn record(&mut self, arg: usize, idx: usize, analytic: f64, numeric: f64) {
        let e = rel_error(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(e);
            self.worst = Some((arg, idx));
        }
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error <= REL_TOLERANCE
    }
}

/// Checks every entry of every argument of a layer.
///
/// The layer output is contracted with a random tensor `r`, giving the scalar
/// `L = Σ r·y`; `backward(args, r)` must return `∂L/∂args[i]` in argument
/// order.
pub fn check_layer<R: Rng>(
    args: &[Tensor],
    forward: impl Fn(&[Tensor]) -> Tensor,
    backward: impl Fn(&[Tensor], &Tensor) -> Vec<Tensor>,
    rng: &mut R,
) -> GradReport {
    let y = forward(args);
    let r = random_tensor(y.shape(), rng);
    let analytic = backward(args, &r);
    assert_eq!(
        analytic.len(),
        args.len(),
        "backward must return one gradient per argument"
    );

    let objective = |a: &[Tensor]| -> f64 {
        forward(a)
            .data()
            .iter()
            .zip(r.data())
            .map(|(u, v)| u * v)
            .sum()
    };

    let mut report = GradReport::default();
    let mut work: Vec<Tensor> = args.to_vec();
    for (ai, grad) in analytic.iter().enumerate() {
        assert_eq!(
            grad.shape(),
            args[ai].shape(),
            "gradient shape for argument {ai}"
        );
        for idx in 0..args[ai].len() {
            let orig = args[ai].data()[idx];
            work[ai].data_mut()[idx] = orig + FD_STEP;
            let plus = objective(&work);
            work[ai].data_mut()[idx] = orig - FD_STEP;
            let minus = objective(&work);
            work[ai].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            report.record(ai, idx, grad.data()[idx], numeric);
        }
    }
    report
}
