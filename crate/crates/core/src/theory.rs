//! Loss and gradient deviations between original and obfuscated samples.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::LabeledSentence;
use crate::error::{Error, Result};
use crate::model::{param_distance, Model};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviationRecord {
    pub eps_l: f64,
    pub eps_g: f64,
    pub dev_l_tuned: f64,
    pub dev_g_tuned: f64,
    pub local_eps: f64,
    pub global_eps: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftRecord {
    pub eps_theta_star: f64,
    pub eps_theta_tilde: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Deviations {
    pub drift: DriftRecord,
    pub records: Vec<DeviationRecord>,
}

fn loss_and_grad(m: &Model, s: &LabeledSentence) -> Result<(f64, Vec<f64>)> {
    let (l, g) = m.loss_and_gradients(std::slice::from_ref(s))?;
    Ok((l, g.values))
}

fn l2_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Deviations for each `(x, x̃)` pair under the pretrained parameters θ and
/// the parameters θ̃ tuned on obfuscated data; `theta_star` is the model tuned
/// on original data.
pub fn compute_deviations(
    pretrained: &Model,
    theta_star: &Model,
    theta_tilde: &Model,
    pairs: &[(LabeledSentence, LabeledSentence)],
) -> Result<Deviations> {
    if pairs.is_empty() {
        return Err(Error::Empty("sentence pairs"));
    }
    let drift = DriftRecord {
        eps_theta_star: param_distance(pretrained, theta_star)?,
        eps_theta_tilde: param_distance(pretrained, theta_tilde)?,
    };
    let max_drift = drift.eps_theta_star.max(drift.eps_theta_tilde);
    let records = par::try_map(pairs, |(x, xt)| -> Result<DeviationRecord> {
        let (l0, g0) = loss_and_grad(pretrained, x)?;
        let (l0t, g0t) = loss_and_grad(pretrained, xt)?;
        let (l1, g1) = loss_and_grad(theta_tilde, x)?;
        let (l1t, g1t) = loss_and_grad(theta_tilde, xt)?;
        let eps_l = (l0 - l0t).abs();
        let eps_g = l2_diff(&g0, &g0t);
        let local_eps = eps_l.max(eps_g);
        Ok(DeviationRecord {
            eps_l,
            eps_g,
            dev_l_tuned: (l1 - l1t).abs(),
            dev_g_tuned: l2_diff(&g1, &g1t),
            local_eps,
            global_eps: local_eps.max(max_drift),
        })
    })?;
    Ok(Deviations { drift, records })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regression {
    pub slope_loss: f64,
    pub slope_grad: f64,
    pub mean_loss_dev: f64,
    pub mean_grad_dev: f64,
    pub n: usize,
}

fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Ordinary least-squares slopes of the tuned deviations against `local_eps`.
pub fn deviation_regression(records: &[DeviationRecord]) -> Result<Regression> {
    if records.len() < 10 {
        return Err(Error::Config(format!("regression needs at least 10 records, got {}", records.len())));
    }
    let x: Vec<f64> = records.iter().map(|r| r.local_eps).collect();
    let mx = x.iter().sum::<f64>() / x.len() as f64;
    let var = x.iter().map(|a| (a - mx) * (a - mx)).sum::<f64>();
    if !(var > 0.0) {
        return Err(Error::DegenerateRegressor);
    }
    let yl: Vec<f64> = records.iter().map(|r| r.dev_l_tuned).collect();
    let yg: Vec<f64> = records.iter().map(|r| r.dev_g_tuned).collect();
    let n = records.len() as f64;
    Ok(Regression {
        slope_loss: ols_slope(&x, &yl),
        slope_grad: ols_slope(&x, &yg),
        mean_loss_dev: yl.iter().sum::<f64>() / n,
        mean_grad_dev: yg.iter().sum::<f64>() / n,
        n: records.len(),
    })
}

pub const CSV_HEADER: &str = "eps_L,eps_g,dev_L_tuned,dev_g_tuned,local_eps,global_eps";

pub fn deviations_csv(records: &[DeviationRecord]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in records {
        writeln!(
            s,
            "{},{},{},{},{},{}",
            r.eps_l, r.eps_g, r.dev_l_tuned, r.dev_g_tuned, r.local_eps, r.global_eps
        )
        .unwrap();
    }
    s
}

pub fn write_deviations_csv(path: &Path, records: &[DeviationRecord]) -> Result<()> {
    fs::write(path, deviations_csv(records)).map_err(|e| Error::io(path, e))
}

/// Scatter of tuned loss and gradient deviations against `local_eps`.
pub fn scatter_svg(records: &[DeviationRecord]) -> String {
    let (w, h, pad) = (480.0, 320.0, 40.0);
    let xmax = records.iter().map(|r| r.local_eps).fold(0.0, f64::max).max(1e-12);
    let ymax = records
        .iter()
        .map(|r| r.dev_g_tuned.max(r.dev_l_tuned))
        .fold(0.0, f64::max)
        .max(1e-12);
    let px = |x: f64| pad + x / xmax * (w - 2.0 * pad);
    let py = |y: f64| h - pad - y / ymax * (h - 2.0 * pad);
    let mut s = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">"#);
    writeln!(
        s,
        r#"<line x1="{pad}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{y0}" stroke="black"/>"#,
        y0 = h - pad,
        x1 = w - pad
    )
    .unwrap();
    for r in records {
        writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="steelblue" fill-opacity="0.6"/><circle cx="{:.2}" cy="{:.2}" r="2" fill="orange" fill-opacity="0.6"/>"#,
            px(r.local_eps),
            py(r.dev_g_tuned),
            px(r.local_eps),
            py(r.dev_l_tuned)
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="{pad}" y="20" font-size="12">local eps vs tuned deviation (blue: gradient, orange: loss)</text></svg>"#
    )
    .unwrap();
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossOrderingCheck {
    pub mean_loss_original: f64,
    pub mean_loss_obfuscated: f64,
    /// Fraction of gradient components with `g(x) <= g(x̃)`, averaged over
    /// pairs. Reported only.
    pub component_fraction: f64,
    pub holds: bool,
}

/// Compares the tuned model's loss on obfuscated and original sentences.
pub fn loss_ordering_check(tuned: &Model, pairs: &[(LabeledSentence, LabeledSentence)]) -> Result<LossOrderingCheck> {
    if pairs.is_empty() {
        return Err(Error::Empty("sentence pairs"));
    }
    let per = par::try_map(pairs, |(x, xt)| -> Result<(f64, f64, f64)> {
        let (l, g) = loss_and_grad(tuned, x)?;
        let (lt, gt) = loss_and_grad(tuned, xt)?;
        let frac = g.iter().zip(&gt).filter(|(a, b)| a <= b).count() as f64 / g.len() as f64;
        Ok((l, lt, frac))
    })?;
    let n = pairs.len() as f64;
    let mo = per.iter().map(|p| p.0).sum::<f64>() / n;
    let mt = per.iter().map(|p| p.1).sum::<f64>() / n;
    Ok(LossOrderingCheck {
        mean_loss_original: mo,
        mean_loss_obfuscated: mt,
        component_fraction: per.iter().map(|p| p.2).sum::<f64>() / n,
        holds: mt <= mo,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn rec(x: f64, l: f64, g: f64) -> DeviationRecord {
        DeviationRecord {
            eps_l: 0.0,
            eps_g: 0.0,
            dev_l_tuned: l,
            dev_g_tuned: g,
            local_eps: x,
            global_eps: x,
        }
    }

    fn model(seed: u64) -> Model {
        Model::new(
            ModelConfig {
                vocab_size: 10,
                d_model: 4,
                n_layers: 1,
                n_heads: 1,
                d_ff: 4,
                max_len: 4,
                n_classes: 2,
                seed,
            },
            None,
        )
        .unwrap()
    }

    fn s(tokens: &[usize]) -> LabeledSentence {
        LabeledSentence {
            tokens: tokens.to_vec(),
            label: 1,
            raw: String::new(),
        }
    }

    #[test]
    fn exact_linear_slopes() {
        let recs: Vec<_> = (1..=12).map(|i| rec(i as f64, 0.1 * i as f64, 10.0 * i as f64)).collect();
        let r = deviation_regression(&recs).unwrap();
        assert!((r.slope_grad - 10.0).abs() < 1e-9);
        assert!((r.slope_loss - 0.1).abs() < 1e-9);
    }

    #[test]
    fn regression_errors() {
        let same = vec![rec(1.0, 1.0, 1.0); 12];
        assert!(matches!(deviation_regression(&same), Err(Error::DegenerateRegressor)));
        assert!(deviation_regression(&same[..5]).is_err());
    }

    #[test]
    fn identity_cases_give_zero() {
        let m = model(1);
        let pairs = vec![(s(&[1, 2]), s(&[3, 4])), (s(&[5]), s(&[6]))];
        let d = compute_deviations(&m, &m, &m, &pairs).unwrap();
        assert_eq!(d.drift.eps_theta_star, 0.0);
        assert_eq!(d.drift.eps_theta_tilde, 0.0);

        let same: Vec<_> = pairs.iter().map(|(x, _)| (x.clone(), x.clone())).collect();
        let other = model(2);
        let t = Model::from_params(m.config().clone(), other.params().to_vec()).unwrap();
        let d = compute_deviations(&m, &t, &t, &same).unwrap();
        for r in &d.records {
            assert_eq!((r.eps_l, r.eps_g, r.dev_l_tuned, r.dev_g_tuned, r.local_eps), (0.0, 0.0, 0.0, 0.0, 0.0));
            assert!(r.global_eps > 0.0);
        }
        assert!(compute_deviations(&m, &m, &m, &[]).is_err());
    }

    #[test]
    fn csv_shape() {
        let csv = deviations_csv(&[rec(1.0, 2.0, 3.0)]);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        assert_eq!(lines.next().unwrap(), "0,0,2,3,1,1");
        assert!(scatter_svg(&[rec(1.0, 2.0, 3.0)]).starts_with("<svg"));
    }
}
