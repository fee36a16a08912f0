use crate::numerics::Tensor;

/// Adam with bias-corrected first and second moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update. `slots[i]` pairs a parameter with its gradient; a `None`
    /// gradient leaves the parameter (and its moments) untouched.
    pub fn step(&mut self, slots: &mut [(&mut Tensor, Option<&Tensor>)]) {
        if self.m.len() < slots.len() {
            for (p, _) in slots[self.m.len()..].iter() {
                self.m.push(vec![0.0; p.len()]);
                self.v.push(vec![0.0; p.len()]);
            }
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in slots.iter_mut().enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        // Bias correction makes the first step exactly lr·sign(g) (up to eps).
        let mut p = Tensor::row(vec![1.0, -2.0, 0.5]);
        let g = Tensor::row(vec![0.3, -40.0, 1e-3]);
        let mut adam = Adam::new(0.01);
        adam.step(&mut [(&mut p, Some(&g))]);
        let expect = [0.99, -1.99, 0.49];
        for (a, b) in p.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = Tensor::row(vec![3.0, -4.0]);
        let mut adam = Adam::new(0.05);
        for _ in 0..2000 {
            let g = p.map(|x| 2.0 * x);
            adam.step(&mut [(&mut p, Some(&g))]);
        }
        assert!(p.data().iter().all(|x| x.abs() < 1e-3), "{:?}", p.data());
    }

    #[test]
    fn missing_gradient_is_skipped() {
        let mut a = Tensor::row(vec![1.0]);
        let mut b = Tensor::row(vec![1.0]);
        let g = Tensor::row(vec![1.0]);
        let mut adam = Adam::new(0.1);
        adam.step(&mut [(&mut a, None), (&mut b, Some(&g))]);
        assert_eq!(a.data(), &[1.0]);
        assert!(b.data()[0] < 1.0);
    }
}
