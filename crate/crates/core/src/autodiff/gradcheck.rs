use super::{Graph, ParamStore, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&ParamCheck> {
        self.params.iter().filter(|p| !p.passed).collect()
    }

    /// Compares analytic against numeric gradients, parameter by parameter.
    pub fn compare(
        store: &ParamStore,
        analytic: &[Tensor],
        numeric: &[Tensor],
        tol: f64,
    ) -> Self {
        let params = store
            .iter()
            .zip(analytic.iter().zip(numeric))
            .filter(|((_, p), _)| p.trainable)
            .map(|((_, p), (a, n))| {
                let diff: f64 = a
                    .data()
                    .iter()
                    .zip(n.data())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                let rel_error = diff / n.norm().max(1e-8);
                ParamCheck {
                    name: p.name.clone(),
                    rel_error,
                    passed: rel_error <= tol,
                }
            })
            .collect();
        Self { params, tol }
    }
}

/// Analytic gradients of the scalar built by `f`, one per stored parameter.
pub fn analytic_gradients<F>(store: &ParamStore, f: &F) -> Result<Vec<Tensor>>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<Var>,
{
    let mut g = Graph::with_params(store);
    let root = f(&mut g)?;
    Ok(g.backward(root)?.for_params(store))
}

/// Central differences of `f` for every trainable parameter entry.
pub fn numeric_gradients<F>(store: &ParamStore, f: &F, step: f64) -> Result<Vec<Tensor>>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::with_params(s);
        let root = f(&mut g)?;
        Ok(g.value(root).item())
    };
    let mut work = store.clone();
    let mut out = Vec::with_capacity(store.len());
    for (id, p) in store.iter() {
        let mut grad = Tensor::zeros(p.tensor.shape());
        if p.trainable {
            for k in 0..p.tensor.numel() {
                let orig = p.tensor.data()[k];
                work.data_mut(id)[k] = orig + step;
                let plus = eval(&work)?;
                work.data_mut(id)[k] = orig - step;
                let minus = eval(&work)?;
                work.data_mut(id)[k] = orig;
                grad.data_mut()[k] = (plus - minus) / (2.0 * step);
            }
        }
        out.push(grad);
    }
    Ok(out)
}

/// Checks backward against central finite differences. The report
/// carries per-parameter relative errors `‖a − n‖ / max(‖n‖, 1e-8)`.
pub fn grad_check<F>(store: &ParamStore, f: F, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<Var>,
{
    let analytic = analytic_gradients(store, &f)?;
    let numeric = numeric_gradients(store, &f, step)?;
    Ok(GradCheckReport::compare(store, &analytic, &numeric, tol))
}

/// Like [`grad_check`], but each trainable parameter is probed at no more
/// than `per_param` coordinates drawn from `rng`. Relative errors compare
/// the analytic and numeric gradients restricted to the probed entries.
pub fn grad_check_sampled<F, R>(
    store: &ParamStore,
    f: F,
    step: f64,
    tol: f64,
    per_param: usize,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<Var>,
    R: rand::Rng,
{
    let analytic = analytic_gradients(store, &f)?;
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::with_params(s);
        let root = f(&mut g)?;
        Ok(g.value(root).item())
    };
    let mut work = store.clone();
    let mut picked_a = Vec::with_capacity(store.len());
    let mut picked_n = Vec::with_capacity(store.len());
    for ((id, p), a) in store.iter().zip(&analytic) {
        let n = p.tensor.numel();
        let coords: Vec<usize> = if !p.trainable {
            Vec::new()
        } else if n <= per_param {
            (0..n).collect()
        } else {
            rand::seq::index::sample(rng, n, per_param).into_vec()
        };
        let mut num = Vec::with_capacity(coords.len());
        for &k in &coords {
            let orig = p.tensor.data()[k];
            work.data_mut(id)[k] = orig + step;
            let plus = eval(&work)?;
            work.data_mut(id)[k] = orig - step;
            let minus = eval(&work)?;
            work.data_mut(id)[k] = orig;
            num.push((plus - minus) / (2.0 * step));
        }
        let ana: Vec<f64> = coords.iter().map(|&k| a.data()[k]).collect();
        let len = coords.len().max(1);
        let pad = |mut v: Vec<f64>| {
            v.resize(len, 0.0);
            Tensor::vector(v)
        };
        picked_a.push(pad(ana));
        picked_n.push(pad(num));
    }
    Ok(GradCheckReport::compare(store, &picked_a, &picked_n, tol))
}
