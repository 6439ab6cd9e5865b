//! Central finite-difference verification of tape gradients.

use super::{Graph, TensorStore, Var};
use crate::Result;

/// Outcome of [`check_gradients`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Tensor name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    /// Analytic and numerical derivative at the worst entry.
    pub worst_values: (f64, f64),
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }

    pub fn merge(mut self, other: GradCheckReport) -> GradCheckReport {
        self.checked += other.checked;
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
            self.worst_values = other.worst_values;
        }
        self
    }
}

/// Step and error normalization for [`check_gradients`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    /// The relative-error denominator is at least `floor * max(1, |loss|)`.
    /// Central differences carry roundoff of order `eps_mach * |loss| / step`,
    /// so entries whose true gradient is zero are judged against that scale.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, floor: 1e-5 }
    }
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares the tape gradient of `loss` with central differences for
/// `entries` of `params` (all entries when `None`). `loss` builds a fresh
/// forward pass from the bound parameters and must be deterministic.
pub fn check_gradients<F>(
    params: &TensorStore,
    entries: Option<&[(usize, usize)]>,
    cfg: GradCheckConfig,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let (analytic, loss_scale) = {
        let mut g = Graph::new();
        let vars = params.bind(&mut g);
        let out = loss(&mut g, &vars)?;
        let grads = g.backward(out)?;
        let scale = g.value(out).data()[0].abs().max(1.0);
        (vars.iter().map(|&v| grads.get(v).into_data()).collect::<Vec<_>>(), scale)
    };
    let floor = cfg.floor * loss_scale;

    let mut eval = |store: &TensorStore| -> Result<f64> {
        let mut g = Graph::new();
        let vars = store.bind(&mut g);
        let out = loss(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let all: Vec<(usize, usize)>;
    let entries = match entries {
        Some(e) => e,
        None => {
            all = params
                .tensors()
                .iter()
                .enumerate()
                .flat_map(|(t, tensor)| (0..tensor.len()).map(move |i| (t, i)))
                .collect();
            &all
        }
    };

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
    };
    let mut probe = params.clone();
    for &(t, i) in entries {
        let original = params.tensors()[t].data()[i];
        probe.tensors_mut()[t].data_mut()[i] = original + cfg.step;
        let plus = eval(&probe)?;
        probe.tensors_mut()[t].data_mut()[i] = original - cfg.step;
        let minus = eval(&probe)?;
        probe.tensors_mut()[t].data_mut()[i] = original;
        let numeric = (plus - minus) / (2.0 * cfg.step);
        let err = relative_error(analytic[t][i], numeric, floor);
        let err = if err.is_nan() { f64::INFINITY } else { err };
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((params.names()[t].clone(), i));
            report.worst_values = (analytic[t][i], numeric);
        }
    }
    Ok(report)
}

/// Finite-difference checks of every layer type on small random shapes.
/// Inputs are checked alongside parameters.
pub fn layer_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    use super::{BatchNorm1d, Conv1d, Conv1dSpec, Init, Linear, Mode, Tensor};
    use rand_distr::{Distribution, StandardNormal};

    let mut rng = crate::rng::stream(seed, &[0x6c61_7965_72]);
    let mut randn = |shape: &[usize]| -> Tensor {
        Tensor::from_fn(shape, |_| StandardNormal.sample(&mut rng))
    };
    let cfg = GradCheckConfig::default();
    let mut out = Vec::new();

    // weights each output with a fixed random vector so gradients are not uniform
    fn project(g: &mut Graph, y: Var, r: &Tensor) -> Result<Var> {
        let r = g.constant(r.clone());
        let p = g.mul(y, r)?;
        Ok(g.sum(p))
    }

    let mut init_rng = crate::rng::stream(seed, &[0x696e_6974]);

    {
        let mut params = TensorStore::new();
        let x = params.add("x", randn(&[3, 5]));
        let layer = Linear::new(&mut params, "linear", 5, 4, Init::FanIn, &mut init_rng);
        let r = randn(&[3, 4]);
        let report = check_gradients(&params, None, cfg, |g, p| {
            let y = layer.forward(g, p, p[x.0])?;
            project(g, y, &r)
        })?;
        out.push(("linear", report));
    }

    {
        let mut params = TensorStore::new();
        let x = params.add("x", randn(&[2, 2, 8]));
        let layer = Conv1d::new(&mut params, "conv", Conv1dSpec::new(2, 3, 7, 2, 3)?, Init::Kaiming, &mut init_rng)?;
        params.get_mut(super::ParamId(2)).data_mut().copy_from_slice(randn(&[3]).data());
        let r = randn(&[2, 3, 4]);
        let report = check_gradients(&params, None, cfg, |g, p| {
            let y = layer.forward(g, p, p[x.0])?;
            project(g, y, &r)
        })?;
        out.push(("conv1d", report));
    }

    {
        let mut params = TensorStore::new();
        let x = params.add("x", randn(&[2, 3, 4]));
        let spec = Conv1dSpec::transposed(3, 2, 7, 2, 3, 1)?;
        let layer = Conv1d::new(&mut params, "convt", spec, Init::Kaiming, &mut init_rng)?;
        params.get_mut(super::ParamId(2)).data_mut().copy_from_slice(randn(&[2]).data());
        let r = randn(&[2, 2, 8]);
        let report = check_gradients(&params, None, cfg, |g, p| {
            let y = layer.forward(g, p, p[x.0])?;
            project(g, y, &r)
        })?;
        out.push(("conv_transpose1d", report));
    }

    for (name, mode) in [("batchnorm_train", Mode::Train), ("batchnorm_eval", Mode::Eval)] {
        let mut params = TensorStore::new();
        let mut buffers = TensorStore::new();
        let x = params.add("x", randn(&[4, 3, 5]));
        let bn = BatchNorm1d::new(&mut params, &mut buffers, "bn", 3);
        params.get_mut(super::ParamId(1)).data_mut().copy_from_slice(&[1.5, -0.7, 0.9]);
        params.get_mut(super::ParamId(2)).data_mut().copy_from_slice(&[0.2, 0.0, -1.1]);
        buffers.tensors_mut()[0].data_mut().copy_from_slice(&[0.3, -0.2, 0.1]);
        buffers.tensors_mut()[1].data_mut().copy_from_slice(&[0.8, 1.7, 2.5]);
        let r = randn(&[4, 3, 5]);
        let report = check_gradients(&params, None, cfg, |g, p| {
            // running statistics are state, not part of the differentiated function
            let mut scratch = buffers.clone();
            let y = bn.forward(g, p, p[x.0], &mut scratch, mode)?;
            project(g, y, &r)
        })?;
        out.push((name, report));
    }

    {
        let mut params = TensorStore::new();
        // keep inputs away from the kink so central differences stay on one side
        let x0 = randn(&[3, 6]).into_data().into_iter().map(|v| v + 0.1 * v.signum()).collect();
        let x = params.add("x", Tensor::new(vec![3, 6], x0)?);
        let r = randn(&[3, 6]);
        let report = check_gradients(&params, None, cfg, |g, p| {
            let y = g.relu(p[x.0]);
            project(g, y, &r)
        })?;
        out.push(("relu", report));
    }

    Ok(out)
}
