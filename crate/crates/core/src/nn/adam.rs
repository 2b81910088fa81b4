use std::collections::BTreeMap;

use super::{Param, VisitParams};

/// Adam with per-parameter learning rates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    state: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

impl Adam {
    pub fn new() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. `lr_for` maps a parameter name to its rate;
    /// `None` leaves that parameter untouched.
    pub fn step<M: VisitParams + ?Sized>(&mut self, model: &mut M, lr_for: &dyn Fn(&str) -> Option<f64>) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let state = &mut self.state;
        model.visit_mut("", &mut |name: &str, p: &mut Param| {
            if !p.trainable {
                return;
            }
            let Some(lr) = lr_for(name) else { return };
            let (m, v) = state
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; p.value.len()], vec![0.0; p.value.len()]));
            let step = lr / bc1;
            let sq = bc2.sqrt();
            for i in 0..p.value.len() {
                let g = p.grad[i] as f64;
                let mi = b1 * m[i] as f64 + (1.0 - b1) * g;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                p.value[i] -= (step * mi / (vi.sqrt() / sq + eps)) as f32;
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quad {
        p: Param,
        q: Param,
    }

    impl VisitParams for Quad {
        fn visit(&self, _: &str, f: &mut dyn FnMut(&str, &Param)) {
            f("p", &self.p);
            f("q", &self.q);
        }
        fn visit_mut(&mut self, _: &str, f: &mut dyn FnMut(&str, &mut Param)) {
            f("p", &mut self.p);
            f("q", &mut self.q);
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut m = Quad {
            p: Param::filled(vec![2], 1.0, true),
            q: Param::filled(vec![1], 1.0, true),
        };
        m.p.grad = vec![3.0, -0.5];
        m.q.grad = vec![1.0];
        let mut opt = Adam::new();
        opt.step(&mut m, &|n| (n == "p").then_some(0.1));
        assert!((m.p.value[0] - 0.9).abs() < 1e-6);
        assert!((m.p.value[1] - 1.1).abs() < 1e-6);
        assert_eq!(m.q.value, vec![1.0]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut m = Quad {
            p: Param::filled(vec![1], 5.0, true),
            q: Param::filled(vec![1], 0.0, false),
        };
        let mut opt = Adam::new();
        for _ in 0..2000 {
            m.p.grad[0] = 2.0 * (m.p.value[0] - 2.0);
            opt.step(&mut m, &|_| Some(0.05));
        }
        assert!((m.p.value[0] - 2.0).abs() < 1e-2);
    }
}
