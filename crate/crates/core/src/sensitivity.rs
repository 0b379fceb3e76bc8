//! Diagonal Fisher information scores and threshold masks.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mask::SensitivityMask;
use crate::model::{LabeledBatch, LayerLayout, LayeredParameters, Mlp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FisherMode {
    /// Mean over samples of the squared per-sample log-likelihood gradient.
    #[default]
    PerSampleAvg,
    /// Square of the gradient of the dataset's mean log-likelihood.
    WholeBatch,
}

impl FisherMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FisherMode::PerSampleAvg => "per_sample_avg",
            FisherMode::WholeBatch => "whole_batch",
        }
    }
}

impl std::str::FromStr for FisherMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "per_sample_avg" => Ok(FisherMode::PerSampleAvg),
            "whole_batch" => Ok(FisherMode::WholeBatch),
            other => Err(format!("expected per_sample_avg or whole_batch, got `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherScores {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    pub layout: Arc<LayerLayout>,
}

impl FisherScores {
    pub fn from_raw(raw: Vec<f64>, layout: Arc<LayerLayout>) -> Result<Self> {
        let normalized = normalize_per_layer(&raw, &layout)?;
        Ok(FisherScores { raw, normalized, layout })
    }

    pub fn mask(&self, tau: f64) -> SensitivityMask {
        local_mask(&self.normalized, tau)
    }

    /// Writes `param_index,layer,raw,normalized` rows.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "{}", crate::report::FISHER_HEADER)?;
        for span in self.layout.layers() {
            for j in span.range() {
                writeln!(out, "{j},{},{:e},{:e}", span.name, self.raw[j], self.normalized[j])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Diagonal Fisher information of `params` on `data`. A `max_samples` of 0
/// uses every sample; otherwise only the leading `max_samples` rows.
pub fn compute_fisher(
    model: &Mlp,
    params: &LayeredParameters,
    data: &LabeledBatch,
    mode: FisherMode,
    max_samples: usize,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Protocol("Fisher information needs a non-empty dataset".into()));
    }
    let limited;
    let data = if max_samples > 0 && max_samples < data.len() {
        limited = data.gather(&(0..max_samples).collect::<Vec<_>>());
        &limited
    } else {
        data
    };
    let n = data.len() as f64;
    let mut acc = vec![0.0; params.len()];
    // the sign flip between cross-entropy and log-likelihood vanishes once squared
    match mode {
        FisherMode::PerSampleAvg => {
            model.for_each_sample_gradient(params, data, |_, g| {
                for (a, gj) in acc.iter_mut().zip(g) {
                    *a += gj * gj;
                }
            })?;
            acc.iter_mut().for_each(|a| *a /= n);
        }
        FisherMode::WholeBatch => {
            let grad = model.backward(params, data)?;
            for (a, g) in acc.iter_mut().zip(grad.values()) {
                *a = g * g;
            }
        }
    }
    Ok(acc)
}

/// Min-max normalization within every layer of `layout`. A layer whose scores
/// are all equal maps to zeros.
pub fn normalize_per_layer(raw: &[f64], layout: &LayerLayout) -> Result<Vec<f64>> {
    if raw.len() != layout.total_params() {
        return Err(Error::Shape(format!(
            "{} scores for a layout of {} parameters",
            raw.len(),
            layout.total_params()
        )));
    }
    let mut out = vec![0.0; raw.len()];
    for span in layout.layers() {
        let layer = &raw[span.range()];
        let lo = layer.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = layer.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        if range > 0.0 && range.is_finite() {
            for (o, &r) in out[span.range()].iter_mut().zip(layer) {
                *o = ((r - lo) / range).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// `{ j : normalized[j] > tau }`.
pub fn local_mask(normalized: &[f64], tau: f64) -> SensitivityMask {
    SensitivityMask::from_predicate(normalized.len(), |j| normalized[j] > tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use crate::rng::{derive, Stream};
    use rand::Rng;

    fn two_layers() -> LayerLayout {
        LayerLayout::new([("a", 3), ("b", 2)])
    }

    #[test]
    fn min_max_per_layer() {
        let n = normalize_per_layer(&[1.0, 2.0, 3.0, 5.0, 5.0], &two_layers()).unwrap();
        assert_eq!(n, vec![0.0, 0.5, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn disjoint_layer_ranges_each_span_unit_interval() {
        let n = normalize_per_layer(&[0.1, 0.3, 0.2, 100.0, 300.0], &two_layers()).unwrap();
        let expect = [0.0, 1.0, 0.5, 0.0, 1.0];
        for (a, b) in n.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(normalize_per_layer(&[1.0], &two_layers()).is_err());
    }

    #[test]
    fn strict_threshold() {
        assert_eq!(local_mask(&[0.0, 0.5, 1.0], 0.5).indices(), &[2]);
        assert!(local_mask(&[0.0, 0.5, 1.0], 1.0).is_empty());
        assert_eq!(local_mask(&[0.0, 0.5, 1.0], -1.0).len(), 3);
    }

    /// Width-1 hidden layers with unit weights pass positive inputs through,
    /// leaving a two-logit logistic model that is easy to differentiate by hand.
    #[test]
    fn per_sample_average_matches_hand_sum() {
        let spec = ModelSpec::new(1, 1, 1, 2).unwrap();
        let model = Mlp::new(spec);
        // fc1.w, fc1.b, fc2.w, fc2.b, fc3.w (2x1), fc3.b (2)
        let params = model.parameters(vec![1.0, 0.0, 1.0, 0.0, 0.7, -0.4, 0.1, 0.3]).unwrap();
        let xs = [0.5, 1.5, 2.0];
        let ys = [0usize, 1, 1];
        let data = LabeledBatch::new(xs.to_vec(), 1, ys.to_vec()).unwrap();

        let mut expect = vec![0.0; 8];
        for (&x, &y) in xs.iter().zip(&ys) {
            let z = [0.7 * x + 0.1, -0.4 * x + 0.3];
            let m = z[0].max(z[1]);
            let e = [(z[0] - m).exp(), (z[1] - m).exp()];
            let p = [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])];
            let d = [p[0] - (y == 0) as u8 as f64, p[1] - (y == 1) as u8 as f64];
            let dh = 0.7 * d[0] - 0.4 * d[1];
            let g = [dh * x, dh, dh * x, dh, d[0] * x, d[1] * x, d[0], d[1]];
            for (e, gj) in expect.iter_mut().zip(g) {
                *e += gj * gj / 3.0;
            }
        }
        let got = compute_fisher(&model, &params, &data, FisherMode::PerSampleAvg, 0).unwrap();
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn stationary_point_has_zero_scores() {
        let model = Mlp::new(ModelSpec::new(2, 3, 3, 2).unwrap());
        let data = LabeledBatch::new(vec![0.0; 4], 2, vec![0, 1]).unwrap();
        let f = compute_fisher(&model, &model.zeros(), &data, FisherMode::WholeBatch, 0).unwrap();
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn per_sample_dominates_whole_batch() {
        for seed in 0..50 {
            let mut rng = derive(seed, Stream::Data, 9, 0);
            let model = Mlp::new(ModelSpec::new(3, 5, 4, 3).unwrap());
            let params = model.init(&mut rng);
            let n = rng.random_range(1..8);
            let inputs = (0..n * 3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let labels = (0..n).map(|_| rng.random_range(0..3)).collect();
            let data = LabeledBatch::new(inputs, 3, labels).unwrap();
            let a = compute_fisher(&model, &params, &data, FisherMode::PerSampleAvg, 0).unwrap();
            let b = compute_fisher(&model, &params, &data, FisherMode::WholeBatch, 0).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!(*x >= y - 1e-15 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn empty_dataset_is_a_protocol_error() {
        let model = Mlp::new(ModelSpec::new(2, 2, 2, 2).unwrap());
        let data = LabeledBatch::new(vec![], 2, vec![]).unwrap();
        assert!(matches!(
            compute_fisher(&model, &model.zeros(), &data, FisherMode::PerSampleAvg, 0),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn sample_cap_uses_leading_rows() {
        let mut rng = derive(3, Stream::Data, 0, 0);
        let model = Mlp::new(ModelSpec::new(2, 3, 3, 2).unwrap());
        let params = model.init(&mut rng);
        let data = LabeledBatch::new(vec![1.0, 2.0, -1.0, 0.5, 3.0, -2.0], 2, vec![0, 1, 1]).unwrap();
        let capped = compute_fisher(&model, &params, &data, FisherMode::PerSampleAvg, 2).unwrap();
        let head = compute_fisher(&model, &params, &data.gather(&[0, 1]), FisherMode::PerSampleAvg, 0).unwrap();
        assert_eq!(capped, head);
    }
}
