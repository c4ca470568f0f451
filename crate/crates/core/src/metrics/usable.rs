use serde::{Deserialize, Serialize};

use crate::attacks::{aia_predict, AiaMember, AiaModel, FeatureSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    None,
    /// Add-one: `(k + 1) / (R + 2)`.
    Laplace,
}

/// Fraction of restarts whose similarity reaches `tau`.
pub fn success_probability(ssims: &[f64], tau: f64, smoothing: Smoothing) -> Result<f64> {
    if ssims.is_empty() {
        return Err(Error::Empty("similarity values"));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid(format!("threshold {tau} outside (0, 1)")));
    }
    let k = ssims.iter().filter(|&&s| s >= tau).count() as f64;
    let r = ssims.len() as f64;
    Ok(match smoothing {
        Smoothing::None => k / r,
        Smoothing::Laplace => (k + 1.0) / (r + 2.0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfoKind {
    Original,
    Latent,
}

/// Usable information in nats with the per-member terms it was derived from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsableInfoValue {
    pub value: f64,
    pub kind: InfoKind,
    pub members: Vec<String>,
    /// Mean negative log-probability of each member, in `members` order.
    pub member_terms: Vec<f64>,
}

/// Smoothed success probabilities of one target sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleProbabilities {
    /// One entry per attack-family member.
    pub members: Vec<f64>,
    /// The random-guess member.
    pub baseline: f64,
}

/// Usable information from gradients to inputs: the drop in the best mean
/// negative log success probability when the attacker sees gradients.
pub fn usable_original_info(per_sample: &[SampleProbabilities], member_names: &[String]) -> Result<UsableInfoValue> {
    if per_sample.is_empty() {
        return Err(Error::Empty("sample probabilities"));
    }
    let m = member_names.len();
    let n = per_sample.len() as f64;
    let nll = |p: f64| -> Result<f64> {
        if p > 0.0 && p < 1.0 {
            Ok(-p.ln())
        } else {
            Err(Error::invalid(format!("probability {p} outside (0, 1)")))
        }
    };
    let mut terms = vec![0.0; m];
    let mut baseline = 0.0;
    for s in per_sample {
        if s.members.len() != m {
            return Err(Error::Shape {
                expected: vec![m],
                actual: vec![s.members.len()],
            });
        }
        for (t, &p) in terms.iter_mut().zip(&s.members) {
            *t += nll(p)?;
        }
        baseline += nll(s.baseline)?;
    }
    terms.iter_mut().for_each(|t| *t /= n);
    baseline /= n;
    let best = terms.iter().copied().fold(baseline, f64::min);
    let mut members = member_names.to_vec();
    members.push("baseline".into());
    terms.push(baseline);
    Ok(UsableInfoValue {
        value: baseline - best,
        kind: InfoKind::Original,
        members,
        member_terms: terms,
    })
}

pub const LATENT_CLAMP: f64 = 1e-7;

/// Usable latent information about a binary attribute: `ln 2` minus the best
/// mean negative log-probability over the family. The constant-1/2 member
/// must be present so the value cannot be negative.
pub fn usable_latent_info(eval: &FeatureSet, family: &[AiaModel]) -> Result<UsableInfoValue> {
    if eval.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    if !family.iter().any(|m| m.member == AiaMember::Constant) {
        return Err(Error::invalid("family must include the constant member"));
    }
    let mut terms = Vec::with_capacity(family.len());
    for model in family {
        let mut total = 0.0;
        for (x, &y) in eval.rows.iter().zip(&eval.labels) {
            let p1 = aia_predict(model, x)?;
            let p = if y == 1 { p1 } else { 1.0 - p1 };
            total -= p.clamp(LATENT_CLAMP, 1.0 - LATENT_CLAMP).ln();
        }
        terms.push(total / eval.len() as f64);
    }
    Ok(latent_from_terms(
        family.iter().map(|m| m.member.name()).collect(),
        terms,
    ))
}

pub(crate) fn latent_from_terms(members: Vec<String>, terms: Vec<f64>) -> UsableInfoValue {
    let best = terms.iter().copied().fold(f64::INFINITY, f64::min);
    UsableInfoValue {
        value: std::f64::consts::LN_2 - best,
        kind: InfoKind::Latent,
        members,
        member_terms: terms,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::{train_aia, AiaTraining, FeatureDescriptor};

    #[test]
    fn success_probability_cases() {
        let s = [0.6, 0.4, 0.9];
        assert!((success_probability(&s, 0.5, Smoothing::None).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((success_probability(&s, 0.5, Smoothing::Laplace).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(success_probability(&[0.1, 0.2], 0.5, Smoothing::None).unwrap(), 0.0);
        assert_eq!(success_probability(&[0.5], 0.5, Smoothing::None).unwrap(), 1.0);
        assert!(success_probability(&[], 0.5, Smoothing::None).is_err());
        assert!(success_probability(&s, 1.0, Smoothing::None).is_err());
    }

    #[test]
    fn original_info_cases() {
        let names = vec!["l2".to_string()];
        let one = [SampleProbabilities {
            members: vec![0.9],
            baseline: 0.1,
        }];
        let v = usable_original_info(&one, &names).unwrap();
        assert!((v.value - (-(0.1f64.ln()) + 0.9f64.ln())).abs() < 1e-12);
        assert!((v.value - 2.19722).abs() < 1e-5);

        let same = [SampleProbabilities {
            members: vec![0.3],
            baseline: 0.3,
        }];
        assert_eq!(usable_original_info(&same, &names).unwrap().value, 0.0);

        let worse = [SampleProbabilities {
            members: vec![0.9, 0.2],
            baseline: 0.1,
        }];
        let two = usable_original_info(&worse, &["l2".into(), "cos".into()]).unwrap();
        assert_eq!(two.value, v.value);

        let below = [SampleProbabilities {
            members: vec![0.05],
            baseline: 0.1,
        }];
        assert_eq!(usable_original_info(&below, &names).unwrap().value, 0.0);
        let bad = [SampleProbabilities {
            members: vec![1.0],
            baseline: 0.1,
        }];
        assert!(usable_original_info(&bad, &names).is_err());
    }

    fn separable() -> FeatureSet {
        FeatureSet {
            rows: (0..20)
                .map(|i| vec![if i % 2 == 1 { 5.0 } else { -5.0 } + i as f64 * 0.01])
                .collect(),
            labels: (0..20).map(|i| (i % 2) as u8).collect(),
            descriptor: FeatureDescriptor {
                layer: 0,
                retained: None,
                dim: 1,
            },
        }
    }

    #[test]
    fn latent_info_bounds() {
        let data = separable();
        let t = AiaTraining {
            epochs: 2000,
            lr: 0.5,
            batch_size: 0,
            weight_decay: 0.0,
        };
        let constant = train_aia(&data, AiaMember::Constant, &t, 0).unwrap();
        let logistic = train_aia(&data, AiaMember::Logistic, &t, 0).unwrap();

        let only_constant = usable_latent_info(&data, std::slice::from_ref(&constant)).unwrap();
        assert_eq!(only_constant.value, 0.0);
        let both = usable_latent_info(&data, &[logistic.clone(), constant.clone()]).unwrap();
        assert!(
            both.value > 0.69 && both.value <= std::f64::consts::LN_2,
            "{}",
            both.value
        );
        assert!(usable_latent_info(&data, &[logistic]).is_err());

        let v = latent_from_terms(vec!["m".into()], vec![-(0.8f64.ln())]);
        assert!((v.value - 0.470004).abs() < 1e-6);
        let perfect = latent_from_terms(vec!["m".into()], vec![-((1.0 - LATENT_CLAMP).ln())]);
        assert!((perfect.value - std::f64::consts::LN_2).abs() < 1e-6);
    }
}
