use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, TensorError, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Upper bound on sampled coordinates; all are checked when fewer exist.
    pub max_coords: usize,
    pub step: f64,
    /// Lower bound on the relative-error denominator, so gradients that are
    /// zero analytically compare against roundoff on an absolute scale.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            max_coords: 200,
            step: 1e-4,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max |analytic − numeric| / max(|analytic|, |numeric|, abs_floor)
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Coordinates whose stencil crossed a ReLU or pooling kink.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tolerance
    }
}

/// Fourth-order central difference of a scalar function along one axis.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    let d1 = f(x + h) - f(x - h);
    let d2 = f(x + 2.0 * h) - f(x - 2.0 * h);
    (8.0 * d1 - d2) / (12.0 * h)
}

/// Compares reverse-mode gradients of the scalar built by `build` against
/// central finite differences over a sample of parameter coordinates.
pub fn grad_check<F, E>(
    params: &ParamStore<f64>,
    build: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph<f64>, &BTreeMap<String, Var>) -> Result<Var, E>,
    E: From<TensorError>,
{
    let eval = |store: &ParamStore<f64>| -> Result<(f64, u64), E> {
        let mut g = Graph::new().checked(true);
        let vars: BTreeMap<String, Var> = store
            .iter()
            .map(|(name, t)| (name.to_string(), g.param(t.clone())))
            .collect();
        let loss = build(&mut g, &vars)?;
        Ok((g.value(loss).item(), g.branch_signature()))
    };

    let mut g = Graph::new().checked(true);
    let vars: BTreeMap<String, Var> = params
        .iter()
        .map(|(name, t)| (name.to_string(), g.param(t.clone())))
        .collect();
    let loss = build(&mut g, &vars)?;
    let base_sig = g.branch_signature();
    g.backward(loss)?;

    let coords: Vec<(String, usize)> = params
        .iter()
        .flat_map(|(name, t)| (0..t.numel()).map(move |i| (name.to_string(), i)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let picked: Vec<usize> = if coords.len() <= opts.max_coords {
        (0..coords.len()).collect()
    } else {
        let mut v = sample(&mut rng, coords.len(), opts.max_coords).into_vec();
        v.sort_unstable();
        v
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    let mut probe = params.clone();
    for ci in picked {
        let (name, idx) = &coords[ci];
        let analytic = g.grad(vars[name]).map_or(0.0, |t| t.data()[*idx]);
        let x0 = params.get(name).unwrap().data()[*idx];
        let h = opts.step;
        let mut values = [0.0; 4];
        let mut kink = false;
        for (slot, offset) in [2.0, 1.0, -1.0, -2.0].iter().enumerate() {
            probe.get_mut(name).unwrap().data_mut()[*idx] = x0 + offset * h;
            let (v, sig) = eval(&probe)?;
            values[slot] = v;
            kink |= sig != base_sig;
        }
        probe.get_mut(name).unwrap().data_mut()[*idx] = x0;
        if kink {
            report.skipped += 1;
            continue;
        }
        let numeric = (8.0 * (values[1] - values[2]) - (values[0] - values[3])) / (12.0 * h);
        let denom = analytic.abs().max(numeric.abs()).max(opts.abs_floor);
        let rel = (analytic - numeric).abs() / denom;
        report.checked += 1;
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((name.clone(), *idx));
        }
    }
    Ok(report)
}
