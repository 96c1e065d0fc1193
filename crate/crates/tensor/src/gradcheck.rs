use crate::{Graph, NodeId, ParamStore, Result, Tensor};

/// Denominator floor for the relative error, so gradients that are zero on
/// both sides do not divide by zero.
const REL_FLOOR: f64 = 1e-3;

/// Worst disagreement between reverse-mode gradients and central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Location of the worst entry, e.g. `"gru.w_x[17]"`.
    pub worst: String,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    fn new(tol: f64) -> Self {
        Self {
            max_rel_error: 0.0,
            checked: 0,
            worst: String::new(),
            tol,
            passed: true,
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64, at: impl FnOnce() -> String) {
        let err = rel_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_error || err.is_nan() {
            self.max_rel_error = err;
            self.worst = at();
        }
        self.passed = self.max_rel_error < self.tol;
    }
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn scalar_of(g: &Graph<f64>, n: NodeId) -> f64 {
    g.value(n).item().unwrap_or(f64::NAN)
}

/// Checks `d f / d x` at `point` for a graph builder `f(graph, x) -> loss`.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let x = g.input(point.clone())?;
    let loss = f(&mut g, x)?;
    let grads = g.backward(loss)?;
    let zeros = Tensor::zeros(point.rows(), point.cols());
    let analytic = grads.wrt(x).unwrap_or(&zeros);

    let eval = |p: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.input(p)?;
        let l = f(&mut g, x)?;
        Ok(scalar_of(&g, l))
    };

    let mut report = GradCheckReport::new(tol);
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        report.record(analytic.data()[i], numeric, || format!("x[{i}]"));
    }
    Ok(report)
}

/// Checks the gradient of `f(graph, params) -> loss` with respect to every
/// parameter, probing at most `max_per_param` evenly spaced entries per tensor.
pub fn grad_check_params<F>(
    f: F,
    params: &ParamStore<f64>,
    eps: f64,
    tol: f64,
    max_per_param: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport::new(tol);
    let mut probe = params.clone();
    for (id, name, value) in params.iter() {
        let zeros = Tensor::zeros(value.rows(), value.cols());
        let analytic = grads.param(id).unwrap_or(&zeros).clone();
        let n = value.len();
        let step = (n / max_per_param.max(1)).max(1);
        for i in (0..n).step_by(step).take(max_per_param) {
            let orig = value.data()[i];
            probe.get_mut(id).data_mut()[i] = orig + eps;
            let mut gp = Graph::new();
            let lp = f(&mut gp, &probe)?;
            let up = scalar_of(&gp, lp);
            probe.get_mut(id).data_mut()[i] = orig - eps;
            let mut gm = Graph::new();
            let lm = f(&mut gm, &probe)?;
            let down = scalar_of(&gm, lm);
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            report.record(analytic.data()[i], numeric, || format!("{name}[{i}]"));
        }
    }
    Ok(report)
}
