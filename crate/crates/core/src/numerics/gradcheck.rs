use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// One compared parameter entry.
#[derive(Clone, Debug, PartialEq)]
pub struct GradEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries: Vec<GradEntry>,
}

impl GradCheckReport {
    /// Whether every entry satisfies `|a − b| ≤ rel · max(|a|, |b|) + abs`.
    pub fn within(&self, rel: f64, abs: f64) -> bool {
        self.entries.iter().all(|e| {
            (e.analytic - e.numeric).abs() <= rel * e.analytic.abs().max(e.numeric.abs()) + abs
        })
    }

    /// Entries sorted by decreasing relative error.
    pub fn worst_entries(&self, count: usize) -> Vec<&GradEntry> {
        let mut v: Vec<&GradEntry> = self.entries.iter().collect();
        v.sort_by(|a, b| b.relative_error.total_cmp(&a.relative_error));
        v.truncate(count);
        v
    }
}

/// Compares analytic gradients of `loss_fn` against central differences
/// `(f(θ+h) − f(θ−h)) / 2h` on up to `per_param` sampled entries of every
/// trainable parameter. Relative error uses `max(|a|, |b|, 1e-8)` as the
/// denominator.
///
/// `loss_fn` must be deterministic; two evaluations at the same point are
/// compared bit-for-bit first.
pub fn grad_check<F>(
    loss_fn: F,
    params: &ParamStore,
    step: f64,
    per_param: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let eval = |p: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = loss_fn(&mut tape, p)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, params)?;
    let base = tape.value(loss).data()[0];
    let again = eval(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic(format!(
            "loss {base:e} then {again:e}"
        )));
    }
    let grads = tape.backward(loss)?;
    let mut analytic = params.clone();
    analytic.absorb_grads(&tape, &grads)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        worst: None,
        entries: Vec::new(),
    };
    for id in params.ids() {
        if params.is_frozen(id) {
            continue;
        }
        let len = params.get(id).len();
        let picks: Vec<usize> = if len <= per_param {
            (0..len).collect()
        } else {
            let mut v = sample(&mut rng, len, per_param).into_vec();
            v.sort_unstable();
            v
        };
        let g = analytic
            .get(id)
            .grad()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; len]);
        for k in picks {
            let numeric = central_difference(&eval, &mut probe, id, k, step)?;
            let a = g[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            report.entries.push(GradEntry {
                param: params.name(id).to_string(),
                index: k,
                analytic: a,
                numeric,
                relative_error: err,
            });
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((params.name(id).to_string(), k));
            }
        }
    }
    Ok(report)
}

fn central_difference(
    eval: &impl Fn(&ParamStore) -> Result<f64>,
    probe: &mut ParamStore,
    id: ParamId,
    k: usize,
    step: f64,
) -> Result<f64> {
    let orig = probe.get(id).data()[k];
    probe.get_mut(id).data_mut()[k] = orig + step;
    let plus = eval(probe)?;
    probe.get_mut(id).data_mut()[k] = orig - step;
    let minus = eval(probe)?;
    probe.get_mut(id).data_mut()[k] = orig;
    Ok((plus - minus) / (2.0 * step))
}
