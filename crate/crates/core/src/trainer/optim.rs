/// SGD with heavy-ball momentum and coupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    decay_mask: Vec<bool>,
    velocity: Vec<f32>,
}

impl Sgd {
    /// `decay_mask[i]` selects which scalars receive weight decay.
    pub fn new(momentum: f64, weight_decay: f64, decay_mask: Vec<bool>) -> Self {
        let n = decay_mask.len();
        Self {
            momentum: momentum as f32,
            weight_decay: weight_decay as f32,
            decay_mask,
            velocity: vec![0.0; n],
        }
    }

    pub fn velocity(&self) -> &[f32] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, v: Vec<f32>) {
        assert_eq!(v.len(), self.decay_mask.len());
        self.velocity = v;
    }

    /// `v = m v + (g + wd p)`, `p -= lr v`.
    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f64) {
        assert_eq!(params.len(), self.velocity.len());
        assert_eq!(grads.len(), self.velocity.len());
        let lr = lr as f32;
        for i in 0..params.len() {
            let mut g = grads[i];
            if self.decay_mask[i] {
                g += self.weight_decay * params[i];
            }
            let v = self.momentum * self.velocity[i] + g;
            self.velocity[i] = v;
            params[i] -= lr * v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_steps() {
        let mut opt = Sgd::new(0.9, 0.5, vec![true, false]);
        let mut p = vec![1.0f32, 1.0];
        opt.step(&mut p, &[0.1, 0.1], 0.1);
        // decayed: g = 0.1 + 0.5 = 0.6; plain: g = 0.1
        assert!((p[0] - 0.94).abs() < 1e-7);
        assert!((p[1] - 0.99).abs() < 1e-7);
        opt.step(&mut p, &[0.0, 0.0], 0.1);
        // v0 = 0.9 * 0.6 + 0.5 * 0.94 = 1.01; v1 = 0.09
        assert!((p[0] - (0.94 - 0.101)).abs() < 1e-6);
        assert!((p[1] - (0.99 - 0.009)).abs() < 1e-7);
    }
}
