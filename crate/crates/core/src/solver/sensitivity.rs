use super::SolveResult;

/// How a parametric program depends on its parameters `theta`.
///
/// Variable bounds are taken to be parameter independent.
pub trait ParameterDependency {
    fn n_params(&self) -> usize;
    /// `d f(z; theta) / d theta` at fixed `z`.
    fn objective_gradient(&self, z: &[f64]) -> Vec<f64>;
    /// Nonzero entries of `d (G_row z - g_row) / d theta` at fixed `z`.
    fn constraint_gradient(&self, z: &[f64], row: usize) -> Vec<(usize, f64)>;
}

/// Gradient of the optimal value with respect to the parameters: the
/// parameter derivative of the Lagrangian at the primal-dual solution.
pub fn lagrangian_param_gradient(dep: &dyn ParameterDependency, r: &SolveResult) -> Vec<f64> {
    let mut g = dep.objective_gradient(&r.z);
    for (row, &l) in r.lambda.iter().enumerate() {
        if l != 0.0 {
            for (k, v) in dep.constraint_gradient(&r.z, row) {
                g[k] += l * v;
            }
        }
    }
    g
}
