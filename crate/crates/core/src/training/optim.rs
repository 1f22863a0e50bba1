use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Adam with decoupled weight decay, linear warmup, then a constant rate or a
/// cosine decay to `lr * floor` at `decay_steps`.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup: usize,
    /// Step at which the cosine reaches the floor (0 keeps the rate constant).
    pub decay_steps: usize,
    pub floor: f64,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, warmup: usize, sizes: &[usize]) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            warmup,
            decay_steps: 0,
            floor: 1.0,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Cosine decay after warmup down to `lr * floor` at step `total`.
    pub fn with_cosine(mut self, total: usize, floor: f64) -> Self {
        self.decay_steps = total;
        self.floor = floor;
        self
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Rate for the next update.
    pub fn current_lr(&self) -> f64 {
        let s = self.step + 1;
        if s <= self.warmup {
            return self.lr * s as f64 / self.warmup as f64;
        }
        if self.decay_steps <= self.warmup {
            return self.lr;
        }
        let t = ((s - self.warmup) as f64 / (self.decay_steps - self.warmup) as f64).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        self.lr * (self.floor + (1.0 - self.floor) * cos)
    }

    /// One update. `decay[i]` selects which tensors receive weight decay.
    pub fn update<T: Scalar>(&mut self, params: &mut [&mut Tensor<T>], grads: &[Vec<f64>], decay: &[bool]) {
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let wd = if decay[i] { self.weight_decay } else { 0.0 };
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let g = grads[i][j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let upd = (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                let x = w.f64();
                *w = T::of(x - lr * (upd + wd * x));
            }
        }
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut p = Tensor::vector(vec![1.0f64, -2.0]);
        let mut opt = AdamW::new(0.1, 0.0, 0, &[2]);
        opt.update(&mut [&mut p], &[vec![3.0, -0.5]], &[true]);
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn warmup_is_linear() {
        let mut opt = AdamW::new(1.0, 0.0, 4, &[1]);
        let mut p = Tensor::vector(vec![0.0f64]);
        let mut seen = Vec::new();
        for _ in 0..6 {
            seen.push(opt.current_lr());
            opt.update(&mut [&mut p], &[vec![1.0]], &[false]);
        }
        assert_eq!(seen, vec![0.25, 0.5, 0.75, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn cosine_reaches_the_floor() {
        let mut opt = AdamW::new(1.0, 0.0, 2, &[1]).with_cosine(6, 0.1);
        let mut p = Tensor::vector(vec![0.0f64]);
        let mut seen = Vec::new();
        for _ in 0..8 {
            seen.push(opt.current_lr());
            opt.update(&mut [&mut p], &[vec![1.0]], &[false]);
        }
        assert_eq!(&seen[..2], &[0.5, 1.0]);
        // halfway through the decay the rate is halfway to the floor
        assert!((seen[3] - 0.55).abs() < 1e-12);
        assert!((seen[5] - 0.1).abs() < 1e-12 && (seen[7] - 0.1).abs() < 1e-12);
        assert!(seen[2..6].windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn decay_is_decoupled() {
        let mut p = Tensor::vector(vec![2.0f64]);
        let mut opt = AdamW::new(0.1, 0.5, 0, &[1]);
        opt.update(&mut [&mut p], &[vec![0.0]], &[true]);
        assert!((p.data()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn clipping() {
        let mut g = vec![vec![3.0, 0.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-12 && (g[1][0] - 0.8).abs() < 1e-12);
        let mut small = vec![vec![0.1]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }
}
