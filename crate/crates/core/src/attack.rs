//! What an honest-but-curious aggregation server can recover from uploads:
//! label existence and counts from the last-layer bias, and input
//! reconstruction by gradient matching.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::mask::SensitivityMask;
use crate::model::{LabeledBatch, LayerLayout, LayeredParameters, Mlp};
use crate::protocol::{ClientUpload, RoundOutcome, Simulation};
use crate::rng::{derive, Stream};

const BIAS_LAYER: &str = "fc3.bias";
const WEIGHT_LAYER: &str = "fc3.weight";
pub const PROBE_COUNT: usize = 64;

/// The attacker's view of one upload.
#[derive(Debug, Clone)]
pub struct AttackerView {
    /// Plaintext coordinates exactly as uploaded.
    pub visible: Vec<(usize, f64)>,
    pub hidden: SensitivityMask,
    pub layout: Arc<LayerLayout>,
    /// Global model broadcast at the start of the round.
    pub params: LayeredParameters,
    /// Multiplies an uploaded value into a gradient estimate. For an update
    /// produced by `s` plain SGD steps at rate `lr` this is `-1 / (lr * s)`.
    pub grad_scale: f64,
}

impl AttackerView {
    pub fn from_upload(upload: &ClientUpload, params: &LayeredParameters, lr: f64, steps: usize) -> Result<Self> {
        if !(lr > 0.0) || steps == 0 {
            return Err(Error::Parameter("gradient estimate needs a positive rate and at least one step".into()));
        }
        Ok(AttackerView {
            visible: upload.plaintext().collect(),
            hidden: upload.noise_indices.complement(),
            layout: params.layout().clone(),
            params: params.clone(),
            grad_scale: -1.0 / (lr * steps as f64),
        })
    }

    /// View of a gradient with only `visible` coordinates exposed.
    pub fn from_gradient(gradient: &[f64], visible: &SensitivityMask, params: &LayeredParameters) -> Result<Self> {
        if gradient.len() != params.len() || visible.universe() != params.len() {
            return Err(Error::Shape("gradient, mask and model sizes differ".into()));
        }
        Ok(AttackerView {
            visible: visible.indices().iter().map(|&j| (j, gradient[j])).collect(),
            hidden: visible.complement(),
            layout: params.layout().clone(),
            params: params.clone(),
            grad_scale: 1.0,
        })
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        self.visible.iter().map(|&(j, _)| j).collect()
    }

    pub fn visible_fraction(&self) -> f64 {
        if self.params.is_empty() {
            0.0
        } else {
            self.visible.len() as f64 / self.params.len() as f64
        }
    }

    /// Estimated last-layer bias gradient per class; `None` where hidden.
    pub fn bias_gradient(&self) -> Result<Vec<Option<f64>>> {
        let span = self
            .layout
            .span(BIAS_LAYER)
            .ok_or_else(|| Error::Shape(format!("model has no `{BIAS_LAYER}` layer")))?;
        let mut out = vec![None; span.len];
        for &(j, v) in &self.visible {
            if span.range().contains(&j) {
                out[j - span.offset] = Some(v * self.grad_scale);
            }
        }
        Ok(out)
    }
}

impl AttackerView {
    /// Per class, whether some visible entry of its last-layer weight
    /// gradient is negative. With non-negative hidden activations an absent
    /// class has a non-negative row, so a negative entry proves presence.
    pub fn negative_weight_rows(&self) -> Result<Vec<bool>> {
        let classes = self
            .layout
            .span(BIAS_LAYER)
            .ok_or_else(|| Error::Shape(format!("model has no `{BIAS_LAYER}` layer")))?
            .len;
        let span = self
            .layout
            .span(WEIGHT_LAYER)
            .ok_or_else(|| Error::Shape(format!("model has no `{WEIGHT_LAYER}` layer")))?;
        let width = span.len / classes.max(1);
        let mut out = vec![false; classes];
        for &(j, v) in &self.visible {
            if span.range().contains(&j) && v * self.grad_scale < 0.0 {
                out[(j - span.offset) / width] = true;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRestoration {
    pub existence: Vec<bool>,
    pub counts: Vec<usize>,
}

impl LabelRestoration {
    pub fn from_counts(counts: Vec<usize>) -> Self {
        LabelRestoration {
            existence: counts.iter().map(|&c| c > 0).collect(),
            counts,
        }
    }
}

/// Mean softmax of the model over `PROBE_COUNT` standard-normal inputs.
pub fn probe_softmax<R: Rng + ?Sized>(model: &Mlp, params: &LayeredParameters, rng: &mut R) -> Result<Vec<f64>> {
    let dim = model.spec().input_dim;
    let inputs = (0..PROBE_COUNT * dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let probes = LabeledBatch::new(inputs, dim, vec![0; PROBE_COUNT])?;
    model.mean_softmax(params, &probes)
}

/// Restores labels from the visible last layer. A class is flagged present
/// when its bias gradient is below `-1/(2B)` or its weight-gradient row has a
/// negative visible entry. Its count is `max(1, round(B * (p_c - g_c)))` with
/// `p` the attacker's probe softmax, or 1 when the bias is hidden. Hidden
/// coordinates carry no evidence.
pub fn restore_labels(view: &AttackerView, batch_size: usize, probe_softmax: &[f64]) -> Result<LabelRestoration> {
    if batch_size == 0 {
        return Err(Error::Parameter("batch size must be positive".into()));
    }
    let grads = view.bias_gradient()?;
    if probe_softmax.len() != grads.len() {
        return Err(Error::Shape("probe softmax does not match the class count".into()));
    }
    let b = batch_size as f64;
    let threshold = -1.0 / (2.0 * b);
    let rows = view.negative_weight_rows()?;
    let mut existence = vec![false; grads.len()];
    let mut counts = vec![0; grads.len()];
    for (c, g) in grads.iter().enumerate() {
        existence[c] = rows[c] || g.is_some_and(|g| g < threshold);
        if existence[c] {
            counts[c] = g.map_or(1, |g| ((b * (probe_softmax[c] - g)).round() as usize).max(1));
        }
    }
    Ok(LabelRestoration { existence, counts })
}

/// Fraction of classes whose existence was predicted correctly.
pub fn le_acc(pred: &LabelRestoration, truth: &LabelRestoration) -> f64 {
    let hits = pred.existence.iter().zip(&truth.existence).filter(|(a, b)| a == b).count();
    hits as f64 / truth.existence.len().max(1) as f64
}

/// Fraction of classes whose count was predicted exactly (absent = 0).
pub fn ln_acc(pred: &LabelRestoration, truth: &LabelRestoration) -> f64 {
    let hits = pred.counts.iter().zip(&truth.counts).filter(|(a, b)| a == b).count();
    hits as f64 / truth.counts.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub input: Vec<f64>,
    pub objective: f64,
    /// Objective after every accepted step, starting with the initial value.
    pub trace: Vec<f64>,
}

/// Gradient-matching objective `sum_{j visible} (grad_j(x) - target_j)^2`.
pub fn matching_objective(
    model: &Mlp,
    params: &LayeredParameters,
    x: &[f64],
    label: usize,
    target: &[f64],
    visible: &SensitivityMask,
) -> Result<f64> {
    let batch = LabeledBatch::new(x.to_vec(), x.len(), vec![label])?;
    let grad = model.backward(params, &batch)?;
    let g = grad.values();
    let value: f64 = visible.indices().iter().map(|&j| (g[j] - target[j]).powi(2)).sum();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("gradient-matching objective is {value}")));
    }
    Ok(value)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdlgConfig {
    pub steps: usize,
    pub lr: f64,
    /// Central-difference step for the input gradient.
    pub fd_step: f64,
}

impl Default for IdlgConfig {
    fn default() -> Self {
        IdlgConfig {
            steps: 2000,
            lr: 0.1,
            fd_step: 1e-5,
        }
    }
}

/// Single-sample gradient inversion. Starts from `init` (or a standard-normal
/// draw) and descends the matching objective with a step-halving line
/// search, so the objective never increases. With `label = None` the label is
/// taken from the most negative visible last-layer bias gradient.
pub fn idlg_reconstruct<R: Rng + ?Sized>(
    model: &Mlp,
    params: &LayeredParameters,
    target: &[f64],
    visible: &SensitivityMask,
    label: Option<usize>,
    init: Option<&[f64]>,
    cfg: &IdlgConfig,
    rng: &mut R,
) -> Result<Reconstruction> {
    if target.len() != params.len() || visible.universe() != params.len() {
        return Err(Error::Shape("target gradient, mask and model sizes differ".into()));
    }
    let dim = model.spec().input_dim;
    let label = match label {
        Some(y) => y,
        None => {
            let view = AttackerView::from_gradient(target, visible, params)?;
            view.bias_gradient()?
                .iter()
                .enumerate()
                .filter_map(|(c, g)| g.map(|g| (c, g)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map_or(0, |(c, _)| c)
        }
    };
    let mut x: Vec<f64> = match init {
        Some(x0) if x0.len() == dim => x0.to_vec(),
        Some(_) => return Err(Error::Shape("initial guess has the wrong width".into())),
        None => (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
    };
    let objective = |x: &[f64]| matching_objective(model, params, x, label, target, visible);
    let mut current = objective(&x)?;
    let mut trace = vec![current];
    let mut step = cfg.lr;
    let mut grad = vec![0.0; dim];
    let mut probe = x.clone();
    for _ in 0..cfg.steps {
        if current == 0.0 {
            break;
        }
        for i in 0..dim {
            probe[i] = x[i] + cfg.fd_step;
            let up = objective(&probe)?;
            probe[i] = x[i] - cfg.fd_step;
            let down = objective(&probe)?;
            probe[i] = x[i];
            grad[i] = (up - down) / (2.0 * cfg.fd_step);
        }
        let mut accepted = false;
        while step > 1e-12 {
            let candidate: Vec<f64> = x.iter().zip(&grad).map(|(a, g)| a - step * g).collect();
            let value = objective(&candidate)?;
            if value <= current {
                x = candidate;
                probe.copy_from_slice(&x);
                current = value;
                trace.push(current);
                step *= 2.0;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(Reconstruction {
        input: x,
        objective: current,
        trace,
    })
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len().max(1) as f64
}

/// Per-client result of attacking one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientAttack {
    pub round: usize,
    pub client: usize,
    pub le_acc: f64,
    pub ln_acc: f64,
    /// NaN when reconstruction was not run.
    pub idlg_mse: f64,
    pub visible_fraction: f64,
}

/// Attacks every upload of a completed round from the aggregation server's
/// position. Label restoration uses the update as a gradient estimate and
/// the client's dataset size as the batch size. With `idlg` set, the first
/// local sample is also reconstructed from its single-sample gradient at the
/// broadcast model, restricted to the coordinates the client sent in the
/// clear.
pub fn attack_round(sim: &Simulation, outcome: &RoundOutcome, idlg: Option<&IdlgConfig>) -> Result<Vec<ClientAttack>> {
    let model = sim.model();
    let classes = model.spec().num_classes;
    let round = outcome.report.round;
    let global = &outcome.start_global;
    let mut out = Vec::with_capacity(outcome.uploads.len());
    for upload in &outcome.uploads {
        let id = upload.client_id;
        let data = &sim.clients()[id].data;
        let view = AttackerView::from_upload(upload, global, sim.params().train.lr, sim.local_steps(id))?;
        let mut probe_rng = derive(sim.seed(), Stream::Probe, id as u64, round as u64);
        let probes = probe_softmax(model, global, &mut probe_rng)?;
        let pred = restore_labels(&view, data.len(), &probes)?;
        let mut counts = data.class_counts();
        counts.resize(classes, 0);
        let truth = LabelRestoration::from_counts(counts);

        let idlg_mse = match idlg {
            Some(cfg) if cfg.steps > 0 => {
                let sample = data.as_batch().gather(&[0]);
                let target = model.backward(global, &sample)?;
                let mut rng = derive(sim.seed(), Stream::Attack, id as u64, round as u64);
                let rec = idlg_reconstruct(model, global, target.values(), &upload.noise_indices, None, None, cfg, &mut rng)?;
                mse(&rec.input, sample.row(0))
            }
            _ => f64::NAN,
        };
        out.push(ClientAttack {
            round,
            client: id,
            le_acc: le_acc(&pred, &truth),
            ln_acc: ln_acc(&pred, &truth),
            idlg_mse,
            visible_fraction: view.visible_fraction(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;

    fn tiny(classes: usize) -> (Mlp, LayeredParameters) {
        let model = Mlp::new(ModelSpec::new(4, 6, 5, classes).unwrap());
        let params = model.init(&mut derive(0, Stream::ModelInit, 0, 0));
        (model, params)
    }

    #[test]
    fn single_sample_label_is_the_negative_coordinate() {
        let model = Mlp::new(ModelSpec::new(3, 4, 4, 5).unwrap());
        let params = model.zeros();
        let batch = LabeledBatch::new(vec![0.3, -1.0, 2.0], 3, vec![3]).unwrap();
        let grad = model.backward(&params, &batch).unwrap();
        let view = AttackerView::from_gradient(grad.values(), &SensitivityMask::full(params.len()), &params).unwrap();
        let r = restore_labels(&view, 1, &[0.2; 5]).unwrap();
        assert_eq!(r.existence, vec![false, false, false, true, false]);
        assert_eq!(r.counts, vec![0, 0, 0, 1, 0]);
    }

    #[test]
    fn hidden_final_layer_predicts_nothing() {
        let (model, params) = tiny(4);
        let batch = LabeledBatch::new(vec![0.1; 8], 4, vec![0, 2]).unwrap();
        let grad = model.backward(&params, &batch).unwrap();
        let first = model.layout().span("fc3.weight").unwrap().offset;
        let visible = SensitivityMask::from_predicate(params.len(), |j| j < first);
        let view = AttackerView::from_gradient(grad.values(), &visible, &params).unwrap();
        let r = restore_labels(&view, 2, &[0.25; 4]).unwrap();
        assert!(r.existence.iter().all(|e| !e));
        let truth = LabelRestoration::from_counts(vec![1, 0, 1, 0]);
        assert_eq!(le_acc(&r, &truth), 0.5);
    }

    #[test]
    fn weight_rows_catch_a_class_the_bias_misses() {
        let (model, mut params) = tiny(4);
        let b = model.layout().span("fc3.bias").unwrap().clone();
        params.values_mut()[b.range()].copy_from_slice(&[0.0, 3.0, 0.0, 0.0]);
        let batch = LabeledBatch::new(vec![1.0, -0.5, 0.3, 2.0, -1.0, 0.4, 1.5, -2.0], 4, vec![1, 0]).unwrap();
        let grad = model.backward(&params, &batch).unwrap();
        let view = AttackerView::from_gradient(grad.values(), &SensitivityMask::full(params.len()), &params).unwrap();
        let g = view.bias_gradient().unwrap();
        assert!(g[1].unwrap() > -0.25, "bias alone should miss class 1");
        let r = restore_labels(&view, 2, &[0.1, 0.7, 0.1, 0.1]).unwrap();
        assert_eq!(r.existence, vec![true, true, false, false]);
    }

    /// Closest count vector summing to `b` under the linear bias model.
    fn brute_force_counts(g: &[f64], p: &[f64], b: usize) -> Vec<usize> {
        fn rec(c: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>, classes: usize) {
            if c + 1 == classes {
                cur.push(left);
                out.push(cur.clone());
                cur.pop();
                return;
            }
            for k in 0..=left {
                cur.push(k);
                rec(c + 1, left - k, cur, out, classes);
                cur.pop();
            }
        }
        let mut all = Vec::new();
        rec(0, b, &mut Vec::new(), &mut all, g.len());
        all.into_iter()
            .min_by(|x, y| {
                let d = |n: &Vec<usize>| -> f64 {
                    n.iter().enumerate().map(|(c, &k)| (g[c] - (p[c] - k as f64 / b as f64)).powi(2)).sum()
                };
                d(x).total_cmp(&d(y))
            })
            .unwrap()
    }

    #[test]
    fn counts_match_brute_force() {
        // Skewed output bias so both present classes clear the existence
        // threshold; a near-uniform 3-class model would hide the singleton.
        let (model, mut params) = tiny(3);
        let w = model.layout().span("fc3.weight").unwrap().clone();
        let b = model.layout().span("fc3.bias").unwrap().clone();
        for j in w.range() {
            params.values_mut()[j] *= 0.01;
        }
        params.values_mut()[b.range()].copy_from_slice(&[0.0, -1.5, 0.2]);
        let mut rng = derive(1, Stream::Probe, 0, 0);
        let p = probe_softmax(&model, &params, &mut rng).unwrap();
        let x: Vec<f64> = (0..12).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.1).collect();
        let batch = LabeledBatch::new(x, 4, vec![0, 1, 0]).unwrap();
        let grad = model.backward(&params, &batch).unwrap();
        let view = AttackerView::from_gradient(grad.values(), &SensitivityMask::full(params.len()), &params).unwrap();
        let r = restore_labels(&view, 3, &p).unwrap();
        assert_eq!(r.counts, vec![2, 1, 0]);
        assert_eq!(r.existence, vec![true, true, false]);
        let g: Vec<f64> = view.bias_gradient().unwrap().into_iter().map(Option::unwrap).collect();
        assert_eq!(brute_force_counts(&g, &p, 3), vec![2, 1, 0]);
    }

    #[test]
    fn accuracy_definitions() {
        let truth = LabelRestoration::from_counts(vec![2, 0, 1, 0, 3]);
        assert_eq!(le_acc(&truth, &truth), 1.0);
        assert_eq!(ln_acc(&truth, &truth), 1.0);
        let none = LabelRestoration::from_counts(vec![0; 5]);
        assert!((le_acc(&none, &truth) - 2.0 / 5.0).abs() < 1e-15);
        let off = LabelRestoration::from_counts(vec![2, 0, 2, 0, 3]);
        assert!((ln_acc(&off, &truth) - 4.0 / 5.0).abs() < 1e-15);
    }

    #[test]
    fn objective_vanishes_at_the_truth() {
        let (model, params) = tiny(3);
        let x = vec![0.5, -0.2, 1.0, 0.3];
        let batch = LabeledBatch::new(x.clone(), 4, vec![2]).unwrap();
        let target = model.backward(&params, &batch).unwrap();
        let all = SensitivityMask::full(params.len());
        assert_eq!(matching_objective(&model, &params, &x, 2, target.values(), &all).unwrap(), 0.0);
        let rec = idlg_reconstruct(
            &model,
            &params,
            target.values(),
            &all,
            Some(2),
            Some(&x),
            &IdlgConfig::default(),
            &mut derive(0, Stream::Attack, 0, 0),
        )
        .unwrap();
        assert_eq!(rec.objective, 0.0);
        assert_eq!(rec.input, x);
    }

    #[test]
    fn line_search_is_monotone() {
        let (model, params) = tiny(3);
        let x = vec![0.5, -0.2, 1.0, 0.3];
        let batch = LabeledBatch::new(x, 4, vec![1]).unwrap();
        let target = model.backward(&params, &batch).unwrap();
        let cfg = IdlgConfig {
            steps: 200,
            ..IdlgConfig::default()
        };
        let rec = idlg_reconstruct(
            &model,
            &params,
            target.values(),
            &SensitivityMask::full(params.len()),
            None,
            None,
            &cfg,
            &mut derive(1, Stream::Attack, 0, 0),
        )
        .unwrap();
        assert!(rec.trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(rec.objective < rec.trace[0]);
    }
}
