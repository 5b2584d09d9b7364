//! Central finite-difference gradient oracle for `Layer<f64>` implementors.
//!
//! The loss is `Σ forward(x) ⊙ R` for a fixed random `R`, so the analytic
//! gradient is `backward(R)`.

use effnet3d::layers::{Layer, Mode, Slot};
use effnet3d::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Step for single layers.
pub const STEP: f64 = 1e-4;

/// Step for composite networks. Batch norms over a handful of values are
/// curved enough that the O(h²) truncation error at 1e-4 exceeds 1e-5.
pub const FINE_STEP: f64 = 1e-5;

/// Entries whose analytic and numeric magnitudes are both below this are
/// compared on absolute error.
pub const FLOOR: f64 = 1e-3;

#[derive(Debug, Default)]
pub struct GradReport {
    pub worst: f64,
    pub worst_at: String,
    pub checked: usize,
}

impl GradReport {
    fn record(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
        self.checked += 1;
        if err > self.worst || self.worst_at.is_empty() {
            self.worst = err;
            self.worst_at = format!("{} (analytic {analytic:e}, numeric {numeric:e})", what());
        }
    }
}

fn loss<L: Layer<f64>>(layer: &mut L, x: &Tensor<f64>, r: &Tensor<f64>, mode: Mode) -> f64 {
    let y = layer.forward(x, mode).expect("forward");
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Sets one parameter entry, returning its previous value.
fn set_param<L: Layer<f64>>(layer: &mut L, target: &str, index: usize, value: f64) -> f64 {
    let mut old = f64::NAN;
    layer.visit("", &mut |name, slot| {
        if name == target {
            if let Slot::Param(p) = slot {
                old = std::mem::replace(&mut p.value.data_mut()[index], value);
            }
        }
    });
    old
}

pub fn random_tensor(dims: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(dims.to_vec(), |_| rng.random_range(-scale..scale)).unwrap()
}

/// Checks input and parameter gradients of `layer` at `x`.
pub fn check<L: Layer<f64>>(layer: &mut L, x: &Tensor<f64>, mode: Mode, seed: u64) -> GradReport {
    check_with_step(layer, x, mode, seed, STEP)
}

pub fn check_with_step<L: Layer<f64>>(
    layer: &mut L,
    x: &Tensor<f64>,
    mode: Mode,
    seed: u64,
    step: f64,
) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = layer.forward(x, mode).expect("forward");
    let r = random_tensor(y.dims(), &mut rng, 1.0);
    let dx = layer.backward(&r).expect("backward");

    let mut grads: Vec<(String, Tensor<f64>)> = Vec::new();
    layer.visit("", &mut |name, slot| {
        if let Slot::Param(p) = slot {
            grads.push((name.to_string(), p.grad.clone()));
        }
    });

    let mut report = GradReport::default();
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + step;
        let up = loss(layer, &xp, &r, mode);
        xp.data_mut()[i] = orig - step;
        let down = loss(layer, &xp, &r, mode);
        xp.data_mut()[i] = orig;
        report.record(|| format!("input[{i}]"), dx.data()[i], (up - down) / (2.0 * step));
    }
    for (name, grad) in &grads {
        for i in 0..grad.len() {
            let orig = set_param(layer, name, i, f64::NAN);
            set_param(layer, name, i, orig + step);
            let up = loss(layer, x, &r, mode);
            set_param(layer, name, i, orig - step);
            let down = loss(layer, x, &r, mode);
            set_param(layer, name, i, orig);
            report.record(|| format!("{name}[{i}]"), grad.data()[i], (up - down) / (2.0 * step));
        }
    }
    report
}
