/// Ascent-form rmsprop: `v <- rho v + (1 - rho) g^2`,
/// `theta <- theta + eta g / sqrt(v + eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    pub second_moment: Vec<f64>,
    pub steps: u64,
}

impl RmsProp {
    pub fn new(n: usize, learning_rate: f64, decay: f64, epsilon: f64) -> Self {
        RmsProp { learning_rate, decay, epsilon, second_moment: vec![0.0; n], steps: 0 }
    }

    /// The step to add to the parameters for gradient `g`; updates the
    /// accumulator.
    pub fn step(&mut self, g: &[f64]) -> Vec<f64> {
        assert_eq!(g.len(), self.second_moment.len(), "gradient length");
        self.steps += 1;
        g.iter()
            .zip(self.second_moment.iter_mut())
            .map(|(&gi, v)| {
                *v = self.decay * *v + (1.0 - self.decay) * gi * gi;
                self.learning_rate * gi / (*v + self.epsilon).sqrt()
            })
            .collect()
    }
}
