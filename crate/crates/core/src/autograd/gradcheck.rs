//! Central finite-difference verification of graph gradients.

use ndarray::{Array2, Zip};

use super::{Graph, ParamId, ParamStore, Var};

/// Per-tensor comparison of analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    /// `|analytic - numeric|_F / max(|analytic|_F, |numeric|_F)`.
    pub rel_err: f64,
    pub analytic_norm: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// Scalar probe `sum(weights * x)`; a convenient differentiable readout.
pub fn probe(g: &mut Graph<f64>, x: Var, weights: &Array2<f64>) -> Var {
    let value = Zip::from(g.value(x))
        .and(weights)
        .fold(0.0, |acc, &a, &w| acc + a * w);
    g.custom_loss(vec![x], value, vec![weights.clone()])
}

/// Compares `backward` against `(f(p + h) - f(p - h)) / 2h` for every element of
/// every parameter in `store`. `build` must return a scalar node.
pub fn check_gradients<F>(store: &ParamStore<f64>, h: f64, build: F) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var,
{
    let mut g = Graph::new();
    let root = build(&mut g, store);
    let grads = g.backward(root);
    let analytic: Vec<(ParamId, Array2<f64>)> = g.param_grads(&grads);

    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::new();
        let r = build(&mut g, s);
        g.scalar(r)
    };

    let mut work = store.clone();
    let mut tensors = Vec::new();
    for id in store.ids() {
        let a = analytic
            .iter()
            .find(|(pid, _)| *pid == id)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| Array2::zeros(store.get(id).dim()));
        let mut numeric = Array2::zeros(a.dim());
        for idx in 0..a.len() {
            let (r, c) = (idx / a.ncols(), idx % a.ncols());
            let orig = store.get(id)[[r, c]];
            work.get_mut(id)[[r, c]] = orig + h;
            let fp = eval(&work);
            work.get_mut(id)[[r, c]] = orig - h;
            let fm = eval(&work);
            work.get_mut(id)[[r, c]] = orig;
            numeric[[r, c]] = (fp - fm) / (2.0 * h);
        }
        let diff = (&a - &numeric).mapv(|x| x * x).sum().sqrt();
        let an = a.mapv(|x| x * x).sum().sqrt();
        let nn = numeric.mapv(|x| x * x).sum().sqrt();
        let denom = an.max(nn);
        let rel_err = if denom < 1e-12 { diff } else { diff / denom };
        tensors.push(TensorCheck {
            name: store.info(id).name.clone(),
            rel_err,
            analytic_norm: an,
        });
    }
    GradCheckReport { tensors }
}
