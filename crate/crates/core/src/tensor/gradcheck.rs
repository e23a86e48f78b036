//! Central finite-difference verification of analytic gradients.

use indexmap::IndexMap;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{BackwardFault, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{collect_grads, Parameters, VarSet};

#[derive(Debug, Clone)]
pub struct GradcheckConfig {
    /// Finite-difference step `h` in `(f(θ+h) − f(θ−h)) / 2h`.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Denominator floor of the relative error, so gradients that are zero
    /// up to rounding are compared absolutely.
    pub floor: f64,
    /// Tensors larger than this are checked on a seeded random subsample.
    pub max_elements_per_tensor: usize,
    pub seed: u64,
    /// Corrupts the analytic pass; used to show the check can fail.
    pub fault: Option<BackwardFault>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            step: 2e-6,
            tol: 1e-5,
            floor: 1e-3,
            max_elements_per_tensor: 24,
            seed: 0,
            fault: None,
        }
    }
}

/// Result for one parameter tensor.
#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub numel: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub entries: Vec<TensorCheck>,
    pub tol: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_error <= self.tol)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    /// Maximum relative error per group, where a group is the name with its
    /// last component (`weight`, `bias`, ...) removed.
    pub fn by_group(&self) -> IndexMap<String, f64> {
        let mut groups: IndexMap<String, f64> = IndexMap::new();
        for e in &self.entries {
            let group = e.name.rsplit_once('.').map_or(e.name.as_str(), |(g, _)| g);
            let slot = groups.entry(group.to_string()).or_insert(0.0);
            *slot = slot.max(e.max_rel_error);
        }
        groups
    }
}

fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn scalar_loss<P, V, F>(params: &P, build: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &P) -> Result<(Var, V)>,
{
    let mut g = Graph::new();
    let (loss, _) = build(&mut g, params)?;
    let value = g.value(loss);
    if value.numel() != 1 {
        return Err(Error::NotScalar(value.dims().to_vec()));
    }
    let v = value.data()[0];
    if !v.is_finite() {
        return Err(Error::NonFinite("gradcheck loss".into()));
    }
    Ok(v)
}

/// Compares the analytic gradient of every parameter with a central
/// difference. `build` must be deterministic: it records the loss of
/// `params` on the given graph and returns the loss plus the bound
/// parameter handles.
pub fn gradcheck<P, V, F>(params: &P, build: F, cfg: &GradcheckConfig) -> Result<GradcheckReport>
where
    P: Parameters<f64> + Clone,
    V: VarSet,
    F: Fn(&mut Graph<f64>, &P) -> Result<(Var, V)>,
{
    let mut g = Graph::new();
    g.inject_fault(cfg.fault);
    let (loss, vars) = build(&mut g, params)?;
    if !g.value(loss).data()[0].is_finite() {
        return Err(Error::NonFinite("gradcheck loss".into()));
    }
    g.backward(loss)?;
    let grads = collect_grads(&g, &vars);
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut entries = Vec::new();
    for (name, tensor) in params.named() {
        let analytic = grads
            .get(&name)
            .ok_or_else(|| Error::Config(format!("parameter `{name}` was not bound by the builder")))?;
        let numel = tensor.numel();
        let indices: Vec<usize> = if numel > cfg.max_elements_per_tensor {
            let mut idx = sample(&mut rng, numel, cfg.max_elements_per_tensor).into_vec();
            idx.sort_unstable();
            idx
        } else {
            (0..numel).collect()
        };
        let mut check = TensorCheck {
            name: name.clone(),
            numel,
            checked: indices.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        let mut probe = params.clone();
        for &i in &indices {
            let original = tensor.data()[i];
            let mut eval = |value: f64| -> Result<f64> {
                probe.with_tensor_mut(&name, &mut |t| t.data_mut()[i] = value);
                scalar_loss(&probe, &build)
            };
            let plus = eval(original + cfg.step)?;
            let minus = eval(original - cfg.step)?;
            eval(original)?;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic.data()[i];
            let err = relative_error(a, numeric, cfg.floor);
            if err >= check.max_rel_error {
                check.max_rel_error = err;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        entries.push(check);
    }
    Ok(GradcheckReport { entries, tol: cfg.tol })
}
