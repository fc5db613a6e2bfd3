//! Verification metrics over distance scores: DET curve, equal error rate
//! and the detection cost function.
//!
//! Scores are distances, so lower means more target-like and a trial is
//! accepted at threshold `t` iff `distance <= t`.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("score set needs at least one target and one nontarget trial (got {targets} / {nontargets})")]
    Degenerate { targets: usize, nontargets: usize },
    #[error("non-finite score {0}")]
    NonFinite(f64),
    #[error("invalid cost parameters: {0}")]
    Params(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSet {
    scores: Vec<(f64, bool)>,
    targets: usize,
}

impl ScoreSet {
    /// `(distance, is_target)` pairs.
    pub fn new(scores: Vec<(f64, bool)>) -> Result<Self> {
        if let Some(&(s, _)) = scores.iter().find(|(s, _)| !s.is_finite()) {
            return Err(MetricsError::NonFinite(s));
        }
        let targets = scores.iter().filter(|(_, t)| *t).count();
        let nontargets = scores.len() - targets;
        if targets == 0 || nontargets == 0 {
            return Err(MetricsError::Degenerate { targets, nontargets });
        }
        Ok(Self { scores, targets })
    }

    pub fn from_parts(targets: &[f64], nontargets: &[f64]) -> Result<Self> {
        let scores = targets
            .iter()
            .map(|&s| (s, true))
            .chain(nontargets.iter().map(|&s| (s, false)))
            .collect();
        Self::new(scores)
    }

    pub fn scores(&self) -> &[(f64, bool)] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn targets(&self) -> usize {
        self.targets
    }

    pub fn nontargets(&self) -> usize {
        self.scores.len() - self.targets
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

/// DET points at `-inf`, each midpoint between consecutive distinct
/// scores, and `+inf`, in increasing threshold order.
pub fn det_curve(s: &ScoreSet) -> Vec<DetPoint> {
    let mut sorted = s.scores.clone();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (nt, nn) = (s.targets() as f64, s.nontargets() as f64);
    let mut points = vec![DetPoint {
        threshold: f64::NEG_INFINITY,
        p_miss: 1.0,
        p_fa: 0.0,
    }];
    let (mut accepted_t, mut accepted_n) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let value = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == value {
            if sorted[i].1 {
                accepted_t += 1;
            } else {
                accepted_n += 1;
            }
            i += 1;
        }
        let threshold = match sorted.get(i) {
            Some(&(next, _)) => value + (next - value) / 2.0,
            None => f64::INFINITY,
        };
        points.push(DetPoint {
            threshold,
            p_miss: (nt - accepted_t as f64) / nt,
            p_fa: accepted_n as f64 / nn,
        });
    }
    points
}

/// Equal error rate by linear interpolation of `p_miss - p_fa` between the
/// first pair of adjacent DET points that straddles zero.
pub fn eer(s: &ScoreSet) -> f64 {
    eer_from_det(&det_curve(s))
}

pub fn eer_from_det(points: &[DetPoint]) -> f64 {
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (da, db) = (a.p_miss - a.p_fa, b.p_miss - b.p_fa);
        if da == 0.0 {
            return a.p_miss;
        }
        if da > 0.0 && db <= 0.0 {
            let t = da / (da - db);
            return a.p_miss + t * (b.p_miss - a.p_miss);
        }
    }
    // The curve always ends at (0, 1), so a straddle exists.
    unreachable!("DET curve without a crossing")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            p_target: 0.01,
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_target > 0.0 && self.p_target < 1.0) || self.c_miss < 0.0 || self.c_fa < 0.0 {
            return Err(MetricsError::Params(format!("{self:?}")));
        }
        Ok(())
    }

    /// Cost of always rejecting or always accepting, whichever is cheaper.
    pub fn default_cost(&self) -> f64 {
        (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }
}

/// Detection cost at one operating point.
pub fn cdet(p_miss: f64, p_fa: f64, c: &CostParams) -> f64 {
    c.c_miss * p_miss * c.p_target + c.c_fa * p_fa * (1.0 - c.p_target)
}

pub fn cdet_at(s: &ScoreSet, threshold: f64, c: &CostParams) -> f64 {
    let miss = s.scores.iter().filter(|(d, t)| *t && *d > threshold).count();
    let fa = s.scores.iter().filter(|(d, t)| !*t && *d <= threshold).count();
    cdet(miss as f64 / s.targets() as f64, fa as f64 / s.nontargets() as f64, c)
}

/// Minimum detection cost over all thresholds (not normalized).
pub fn min_cdet(s: &ScoreSet, c: &CostParams) -> Result<f64> {
    c.validate()?;
    Ok(min_cdet_from_det(&det_curve(s), c))
}

pub fn min_cdet_from_det(points: &[DetPoint], c: &CostParams) -> f64 {
    points
        .iter()
        .map(|p| cdet(p.p_miss, p.p_fa, c))
        .fold(f64::INFINITY, f64::min)
}

/// Headline metrics of one score set.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub label: String,
    pub trials: usize,
    pub eer: f64,
    pub min_cdet: f64,
    pub cost: CostParams,
}

impl MetricsReport {
    pub fn compute(label: impl Into<String>, s: &ScoreSet, cost: CostParams) -> Result<Self> {
        cost.validate()?;
        let det = det_curve(s);
        Ok(Self {
            label: label.into(),
            trials: s.len(),
            eer: eer_from_det(&det),
            min_cdet: min_cdet_from_det(&det, &cost),
            cost,
        })
    }

    /// `min_cdet` divided by the cost of the trivial decision.
    pub fn normalized_min_cdet(&self) -> f64 {
        self.min_cdet / self.cost.default_cost()
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "[{}] trials={}", self.label, self.trials)?;
        writeln!(f, "EER: {:.2}%", self.eer * 100.0)?;
        writeln!(f, "min-Cdet: {:.5}", self.min_cdet)?;
        write!(f, "min-Cdet (normalized): {:.3}", self.normalized_min_cdet())
    }
}
