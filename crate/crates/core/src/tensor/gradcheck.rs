//! Central finite-difference check of tape gradients in 64-bit.

use rand::seq::index;
use rand::Rng;

use super::{Graph, NodeId, ParamSet};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `name[index]` of the worst coordinate.
    pub worst: String,
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares backprop gradients of `loss` against central differences on
/// `count` coordinates drawn without replacement from every scalar in `ps`.
pub fn check_gradients<L, R>(ps: &ParamSet<f64>, loss: L, count: usize, step: f64, rng: &mut R) -> Result<GradCheckReport>
where
    L: Fn(&ParamSet<f64>, &mut Graph<f64>) -> Result<NodeId>,
    R: Rng + ?Sized,
{
    let mut work = ps.clone();
    work.zero_grads();
    let mut g = Graph::new();
    let out = loss(&work, &mut g)?;
    let grads = g.backward(out);
    g.accumulate(&grads, &mut work);

    let offsets: Vec<usize> = work
        .iter()
        .scan(0, |acc, (_, t)| {
            let start = *acc;
            *acc += t.len();
            Some(start)
        })
        .collect();
    let total = work.num_scalars();
    let picks = index::sample(rng, total, count.min(total));

    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let out = loss(p, &mut g)?;
        Ok(g.value(out).data()[0])
    };

    let ids: Vec<_> = work.ids().collect();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    for flat in picks.iter() {
        let slot = offsets.partition_point(|&o| o <= flat) - 1;
        let (id, i) = (ids[slot], flat - offsets[slot]);
        let analytic = work.get(id).grad().expect("parameters carry gradients")[i];
        let orig = work.get(id).data()[i];
        work.get_mut(id).data_mut()[i] = orig + step;
        let up = eval(&work)?;
        work.get_mut(id).data_mut()[i] = orig - step;
        let down = eval(&work)?;
        work.get_mut(id).data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if err >= report.max_rel_err {
            report.max_rel_err = err;
            report.worst = format!("{}[{i}]", work.name(id));
        }
    }
    Ok(report)
}
