use super::params::BoundParams;
use super::{AutodiffError, ParamStore, Result, Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step, within [1e-7, 1e-3].
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many evenly spaced entries per block; `None` checks all.
    pub max_entries_per_block: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-5, tolerance: 1e-4, max_entries_per_block: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries skipped because the loss has a kink within one step of the point.
    pub excluded: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }

    pub fn block(&self, name: &str) -> Option<&BlockReport> {
        self.blocks.iter().find(|b| b.name == name)
    }
}

fn evaluate<F>(loss_fn: &F, params: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Tape, &BoundParams) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false)?;
    let out = loss_fn(&mut tape, &bound)?;
    let v = tape.value(out)?;
    if v.shape() != [1] {
        return Err(AutodiffError::NonScalarOutput(v.shape().to_vec()));
    }
    Ok(v.data()[0])
}

/// Compares analytic gradients of `loss_fn` with central differences
/// `(f(p + h) - f(p - h)) / 2h`, entry by entry, for every block of `params`.
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-8)`. An entry whose forward and
/// backward one-sided differences disagree is treated as a non-differentiable point
/// and excluded.
pub fn finite_diff_check<F>(loss_fn: F, params: &ParamStore, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &BoundParams) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&opts.step) {
        return Err(AutodiffError::InvalidArgument(format!("finite-difference step {} outside [1e-7, 1e-3]", opts.step)));
    }
    let first = evaluate(&loss_fn, params)?;
    let second = evaluate(&loss_fn, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(AutodiffError::NonDeterministic { first, second });
    }

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true)?;
    let out = loss_fn(&mut tape, &bound)?;
    let analytic = bound.gradients(&tape, out)?;

    let h = opts.step;
    let mut work = params.clone();
    let mut blocks = Vec::new();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let len = params.get(&name)?.len();
        let stride = match opts.max_entries_per_block {
            Some(cap) if cap > 0 && len > cap => len.div_ceil(cap),
            _ => 1,
        };
        let grad = analytic.get(&name)?.data().to_vec();
        let mut report = BlockReport { name: name.clone(), max_rel_error: 0.0, checked: 0, excluded: 0 };
        for idx in (0..len).step_by(stride) {
            let original = params.get(&name)?.data()[idx];
            work.get_mut(&name)?.data_mut()[idx] = original + h;
            let plus = evaluate(&loss_fn, &work)?;
            work.get_mut(&name)?.data_mut()[idx] = original - h;
            let minus = evaluate(&loss_fn, &work)?;
            work.get_mut(&name)?.data_mut()[idx] = original;

            let forward = (plus - first) / h;
            let backward = (first - minus) / h;
            let gap = (forward - backward).abs();
            if gap > (1e-2 * forward.abs().max(backward.abs())).max(1e-6) {
                report.excluded += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
        blocks.push(report);
    }
    Ok(GradCheckReport { blocks, tolerance: opts.tolerance })
}
