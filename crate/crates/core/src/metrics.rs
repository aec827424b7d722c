//! Accuracy at three granularities, mean average precision, hallucination rates and
//! the hallucination/performance correlation.

use std::fmt::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::model::RewardPrediction;

/// A prediction together with its gold token labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    pub prediction: RewardPrediction,
    pub gold: Vec<u8>,
}

impl EvalPair {
    pub fn new(prediction: RewardPrediction, gold: Vec<u8>) -> Result<Self> {
        if prediction.gamma.len() != gold.len() || prediction.probabilities.len() != gold.len() {
            return Err(Error::LengthMismatch { left: prediction.gamma.len(), right: gold.len() });
        }
        Ok(Self { prediction, gold })
    }

    fn gamma(&self) -> &[u8] {
        &self.prediction.gamma
    }
}

fn product(xs: &[u8]) -> u8 {
    xs.iter().copied().min().unwrap_or(1)
}

fn nonempty(pairs: &[EvalPair]) -> Result<()> {
    if pairs.is_empty() || pairs.iter().any(|p| p.gold.is_empty()) {
        return Err(Error::Empty("evaluation pairs"));
    }
    Ok(())
}

/// Mean over samples of the fraction of tokens with γ = γ*.
pub fn token_accuracy(pairs: &[EvalPair]) -> Result<f64> {
    nonempty(pairs)?;
    let sum: f64 = pairs
        .iter()
        .map(|p| p.gamma().iter().zip(&p.gold).filter(|(a, b)| a == b).count() as f64 / p.gold.len() as f64)
        .sum();
    Ok(sum / pairs.len() as f64)
}

/// Mean over samples of the fraction of sentences whose label products agree.
pub fn sentence_accuracy(pairs: &[EvalPair]) -> Result<f64> {
    nonempty(pairs)?;
    let mut sum = 0.0;
    for p in pairs {
        let spans = &p.prediction.spans;
        if spans.is_empty() || spans.iter().any(|&(a, b)| a >= b || b > p.gold.len()) {
            return Err(Error::Config("sentence spans do not cover the response".into()));
        }
        let hits = spans.iter().filter(|&&(a, b)| product(&p.gamma()[a..b]) == product(&p.gold[a..b])).count();
        sum += hits as f64 / spans.len() as f64;
    }
    Ok(sum / pairs.len() as f64)
}

/// Fraction of samples with ∏γ = ∏γ*.
pub fn response_accuracy(pairs: &[EvalPair]) -> Result<f64> {
    nonempty(pairs)?;
    let hits = pairs.iter().filter(|p| product(p.gamma()) == product(&p.gold)).count();
    Ok(hits as f64 / pairs.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    /// Good tokens ranked by P.
    Pos,
    /// Bad tokens ranked by 1 − P.
    Neg,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TieRule {
    /// Ties keep token order.
    #[default]
    Stable,
    /// Tied scores form one threshold: every relevant item in the group gets the group's precision.
    Grouped,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    PerSample,
    Pooled,
}

/// Average precision of `relevant` ranked by descending `scores`; `None` without relevant items.
pub fn average_precision(scores: &[f64], relevant: &[bool], ties: TieRule) -> Option<f64> {
    let total = relevant.iter().filter(|&&r| r).count();
    if total == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut sum = 0.0;
    let mut hits = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        if ties == TieRule::Grouped {
            while j < order.len() && scores[order[j]] == scores[order[i]] {
                j += 1;
            }
        }
        let group_hits = order[i..j].iter().filter(|&&k| relevant[k]).count();
        hits += group_hits;
        sum += group_hits as f64 * hits as f64 / j as f64;
        i = j;
    }
    Some(sum / total as f64)
}

fn polarized(pair: &EvalPair, polarity: Polarity) -> (Vec<f64>, Vec<bool>) {
    let p = &pair.prediction.probabilities;
    match polarity {
        Polarity::Pos => (p.clone(), pair.gold.iter().map(|&g| g == 1).collect()),
        Polarity::Neg => (p.iter().map(|x| 1.0 - x).collect(), pair.gold.iter().map(|&g| g == 0).collect()),
    }
}

/// mAP(pos) or mAP(neg). Per-sample aggregation skips samples without the target class.
pub fn mean_average_precision(pairs: &[EvalPair], polarity: Polarity, ties: TieRule, aggregation: Aggregation) -> Result<f64> {
    nonempty(pairs)?;
    let missing = Error::Empty("samples containing the target class");
    match aggregation {
        Aggregation::PerSample => {
            let aps: Vec<f64> = pairs
                .iter()
                .filter_map(|p| {
                    let (s, r) = polarized(p, polarity);
                    average_precision(&s, &r, ties)
                })
                .collect();
            if aps.is_empty() {
                return Err(missing);
            }
            Ok(aps.iter().sum::<f64>() / aps.len() as f64)
        }
        Aggregation::Pooled => {
            let (mut scores, mut relevant) = (Vec::new(), Vec::new());
            for p in pairs {
                let (s, r) = polarized(p, polarity);
                scores.extend(s);
                relevant.extend(r);
            }
            average_precision(&scores, &relevant, ties).ok_or(missing)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub a_t: f64,
    pub a_s: f64,
    pub a_r: f64,
    pub map_pos: Option<f64>,
    pub map_neg: Option<f64>,
    pub samples: usize,
    pub tokens: usize,
    pub sentences: usize,
}

impl MetricsReport {
    pub fn compute(pairs: &[EvalPair]) -> Result<Self> {
        let map = |polarity| mean_average_precision(pairs, polarity, TieRule::Stable, Aggregation::PerSample).ok();
        Ok(Self {
            a_t: token_accuracy(pairs)?,
            a_s: sentence_accuracy(pairs)?,
            a_r: response_accuracy(pairs)?,
            map_pos: map(Polarity::Pos),
            map_neg: map(Polarity::Neg),
            samples: pairs.len(),
            tokens: pairs.iter().map(|p| p.gold.len()).sum(),
            sentences: pairs.iter().map(|p| p.prediction.spans.len()).sum(),
        })
    }

    pub fn table(&self) -> String {
        let pct = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{:.1}", 100.0 * v));
        let mut out = String::new();
        let _ = writeln!(out, "{:<10} {:>8}", "metric", "value");
        for (name, v) in [("A_T", Some(self.a_t)), ("A_S", Some(self.a_s)), ("A_R", Some(self.a_r)), ("mAP(neg)", self.map_neg), ("mAP(pos)", self.map_pos)] {
            let _ = writeln!(out, "{name:<10} {:>8}", pct(v));
        }
        let _ = writeln!(out, "samples {} tokens {} sentences {}", self.samples, self.tokens, self.sentences);
        out
    }
}

/// Hallucination rates over bad-token indicators `1 − γ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HallucinationReport {
    pub h_t: f64,
    pub h_s: f64,
    pub h_r: f64,
    pub responses: usize,
}

impl HallucinationReport {
    pub fn table(&self) -> String {
        format!(
            "{:<6} {:>8}\n{:<6} {:>8.2}\n{:<6} {:>8.2}\n{:<6} {:>8.2}\nresponses {}\n",
            "rate", "%", "H_T", 100.0 * self.h_t, "H_S", 100.0 * self.h_s, "H_R", 100.0 * self.h_r, self.responses
        )
    }
}

/// Rates from `(γ, sentence spans)` per response.
pub fn hallucination_rates(responses: &[(Vec<u8>, Vec<(usize, usize)>)]) -> Result<HallucinationReport> {
    if responses.is_empty() || responses.iter().any(|(g, _)| g.is_empty()) {
        return Err(Error::Empty("responses"));
    }
    let (mut t, mut s, mut r) = (0.0, 0.0, 0usize);
    for (gamma, spans) in responses {
        t += gamma.iter().filter(|&&g| g == 0).count() as f64 / gamma.len() as f64;
        if !spans.is_empty() {
            s += spans.iter().filter(|&&(a, b)| gamma[a..b].contains(&0)).count() as f64 / spans.len() as f64;
        }
        r += usize::from(gamma.contains(&0));
    }
    let n = responses.len() as f64;
    Ok(HallucinationReport { h_t: t / n, h_s: s / n, h_r: r as f64 / n, responses: responses.len() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    /// `None` when either series is constant.
    pub pearson_r: Option<f64>,
    pub pearson_p: Option<f64>,
    pub points: usize,
    /// Models dropped because their H_T was zero.
    pub excluded: usize,
}

/// Pearson r and its two-sided p-value from the t-distribution with n − 2 degrees of freedom.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<CorrelationReport> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch { left: xs.len(), right: ys.len() });
    }
    let n = xs.len();
    if n < 3 {
        return Err(Error::Config(format!("correlation needs at least 3 points, got {n}")));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    let (mx, my) = (mean(xs), mean(ys));
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return Ok(CorrelationReport { pearson_r: None, pearson_p: None, points: n, excluded: 0 });
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p = if r.abs() == 1.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Config(e.to_string()))?;
        2.0 * (1.0 - dist.cdf(t.abs()))
    };
    Ok(CorrelationReport { pearson_r: Some(r), pearson_p: Some(p), points: n, excluded: 0 })
}

/// Correlate −log H_T with benchmark accuracy, excluding models with H_T = 0.
pub fn correlate(h_t: &[f64], accuracy: &[f64]) -> Result<CorrelationReport> {
    if h_t.len() != accuracy.len() {
        return Err(Error::LengthMismatch { left: h_t.len(), right: accuracy.len() });
    }
    let kept: Vec<(f64, f64)> = h_t.iter().zip(accuracy).filter(|(h, _)| **h > 0.0).map(|(h, a)| (-h.ln(), *a)).collect();
    let excluded = h_t.len() - kept.len();
    let (xs, ys): (Vec<f64>, Vec<f64>) = kept.into_iter().unzip();
    let mut report = pearson(&xs, &ys)?;
    report.excluded = excluded;
    Ok(report)
}
