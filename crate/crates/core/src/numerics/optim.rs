use alloc::vec::Vec;


pub const DEFAULT_LEARNING_RATE: f64 = 5e-5;
pub const DEFAULT_DECAY: f64 = 0.99;
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// RMSProp without momentum: `v <- rho v + (1-rho) g^2; p <- p - lr g / sqrt(v + eps)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RmsProp {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
}

impl Default for RmsProp {
    fn default() -> Self {
        Self {
            learning_rate: DEFAULT_LEARNING_RATE,
            decay: DEFAULT_DECAY,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl RmsProp {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }

    pub fn step(&self, param: &mut [f64], grad: &[f64], accum: &mut [f64]) {
        for ((p, &g), v) in param.iter_mut().zip(grad).zip(accum.iter_mut()) {
            *v = self.decay * *v + (1.0 - self.decay) * g * g;
            *p -= self.learning_rate * g / libm::sqrt(*v + self.epsilon);
        }
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<'a>(grads: impl IntoIterator<Item = &'a mut [f64]>, max_norm: f64) -> f64 {
    let mut all: Vec<&mut [f64]> = grads.into_iter().collect();
    let norm = libm::sqrt(all.iter().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>());
    if norm > max_norm && norm > 0.0 {
        let c = max_norm / norm;
        for g in all.iter_mut() {
            for x in g.iter_mut() {
                *x *= c;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn zero_gradient_only_decays() {
        let rule = RmsProp::default();
        let mut p = vec![1.5];
        let mut v = vec![2.0];
        rule.step(&mut p, &[0.0], &mut v);
        assert_eq!(p, vec![1.5]);
        assert!((v[0] - 1.98).abs() < 1e-15);
    }

    #[test]
    fn first_step_value() {
        let rule = RmsProp::default();
        let mut p = vec![0.0];
        let mut v = vec![0.0];
        rule.step(&mut p, &[1.0], &mut v);
        assert!((v[0] - 0.01).abs() < 1e-15);
        assert!((p[0] + 5e-5 / libm::sqrt(0.010001)).abs() < 1e-18);
        assert!((p[0] + 4.99975e-4).abs() < 1e-9);
    }

    #[test]
    fn identical_steps_identical_results() {
        let rule = RmsProp::default();
        let run = || {
            let mut p = vec![0.3, -0.2];
            let mut v = vec![0.0, 0.0];
            rule.step(&mut p, &[0.1, -0.4], &mut v);
            rule.step(&mut p, &[0.2, 0.4], &mut v);
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clipping() {
        let mut a = vec![3.0];
        let mut b = vec![4.0];
        let norm = clip_global_norm([a.as_mut_slice(), b.as_mut_slice()], 1.0);
        assert_eq!(norm, 5.0);
        assert!((a[0] - 0.6).abs() < 1e-15 && (b[0] - 0.8).abs() < 1e-15);
    }
}
