//! Accuracy, per-class accuracy, balance score and class-conditional
//! feasibility statistics.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, PreparedInstance, UckModel};
use crate::tasks::Task;
use crate::tensor::TensorError;

/// `min(acc₊, acc₋) / max(acc₊, acc₋)`, with `0/0 = 0`.
pub fn balance_score(acc_pos: f64, acc_neg: f64) -> f64 {
    let hi = acc_pos.max(acc_neg);
    if hi <= 0.0 {
        0.0
    } else {
        acc_pos.min(acc_neg) / hi
    }
}

/// What evaluation needs from one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub logits: [f64; 2],
    /// Final Φ.
    pub global_phi: f64,
    /// Σᵢ φᵢ after the rollout.
    pub phi_sum: f64,
}

impl Prediction {
    /// Argmax with exact ties going to class 0.
    pub fn class(&self) -> usize {
        usize::from(self.logits[1] > self.logits[0])
    }
}

pub trait Predictor {
    fn predict_one(&self, input: &PreparedInstance) -> Result<Prediction>;
}

impl Predictor for UckModel {
    fn predict_one(&self, input: &PreparedInstance) -> Result<Prediction> {
        let out = self.predict(input).map_err(|e| match e {
            TensorError::NonFinite { .. } => Error::Numerical(e.to_string()),
            other => other.into(),
        })?;
        Ok(Prediction {
            logits: out.logits,
            global_phi: out.diagnostics.final_global_phi(),
            phi_sum: out.diagnostics.phi_sum(),
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn record(&mut self, predicted: usize, label: usize) {
        match (predicted, label) {
            (1, 1) => self.tp += 1,
            (0, 0) => self.tn += 1,
            (1, 0) => self.fp += 1,
            _ => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn acc_pos(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn acc_neg(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn balance(&self) -> f64 {
        balance_score(self.acc_pos(), self.acc_neg())
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Mean and sample standard deviation (`n − 1`; zero for one value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Some(MeanStd { mean, std: var.sqrt(), n })
    }
}

/// Class-conditional statistics of one scalar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassSeparation {
    /// Label 1 instances; `None` when the class is absent.
    pub feasible: Option<MeanStd>,
    pub infeasible: Option<MeanStd>,
    /// `mean(feasible) − mean(infeasible)`.
    pub separation: Option<f64>,
    /// Two-sided Welch t-test p-value.
    pub p_value: Option<f64>,
}

/// Two-sided Welch t-test. `None` when either sample has fewer than two
/// values; `1` when both samples are constant and equal, `0` when constant
/// and different.
pub fn welch_p_value(a: &[f64], b: &[f64]) -> Option<f64> {
    let (sa, sb) = (MeanStd::of(a)?, MeanStd::of(b)?);
    if sa.n < 2 || sb.n < 2 {
        return None;
    }
    let (va, vb) = (sa.std.powi(2) / sa.n as f64, sb.std.powi(2) / sb.n as f64);
    let se2 = va + vb;
    if se2 == 0.0 {
        return Some(if sa.mean == sb.mean { 1.0 } else { 0.0 });
    }
    let t = (sa.mean - sb.mean) / se2.sqrt();
    let df = se2.powi(2) / (va.powi(2) / (sa.n - 1) as f64 + vb.powi(2) / (sb.n - 1) as f64);
    let dist = StudentsT::new(0.0, 1.0, df).ok()?;
    Some((2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0))
}

/// Splits `values` by label and compares the classes.
pub fn phi_statistics(values: &[f64], labels: &[usize]) -> ClassSeparation {
    let pick = |class| {
        values
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == class)
            .map(|(&v, _)| v)
            .collect::<Vec<_>>()
    };
    let (pos, neg) = (pick(1), pick(0));
    let feasible = MeanStd::of(&pos);
    let infeasible = MeanStd::of(&neg);
    ClassSeparation {
        feasible,
        infeasible,
        separation: feasible.zip(infeasible).map(|(a, b)| a.mean - b.mean),
        p_value: welch_p_value(&pos, &neg),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Option<Task>,
    pub samples: usize,
    pub accuracy: f64,
    pub acc_pos: f64,
    pub acc_neg: f64,
    pub balance: f64,
    pub confusion: Confusion,
    /// Instances whose two logits were exactly equal (predicted as class 0).
    pub ties: usize,
    /// Final Φ by class.
    pub global_phi: ClassSeparation,
    /// Σᵢ φᵢ by class.
    pub phi_sum: ClassSeparation,
    pub config: Option<ModelConfig>,
}

/// Column order of [`EvalReport::csv_row`].
pub const CSV_HEADER: &str = "task,samples,accuracy,acc_pos,acc_neg,balance,tp,tn,fp,fn,ties,\
global_phi_mean_pos,global_phi_std_pos,global_phi_mean_neg,global_phi_std_neg,global_phi_separation,global_phi_p,\
phi_sum_mean_pos,phi_sum_std_pos,phi_sum_mean_neg,phi_sum_std_neg,phi_sum_separation,phi_sum_p";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

fn sep_cells(s: &ClassSeparation) -> String {
    [
        opt(s.feasible.map(|m| m.mean)),
        opt(s.feasible.map(|m| m.std)),
        opt(s.infeasible.map(|m| m.mean)),
        opt(s.infeasible.map(|m| m.std)),
        opt(s.separation),
        opt(s.p_value),
    ]
    .join(",")
}

impl EvalReport {
    /// One line matching [`CSV_HEADER`]; absent values are empty cells.
    pub fn csv_row(&self) -> String {
        let c = &self.confusion;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.task.map_or("", |t| t.name()),
            self.samples,
            self.accuracy,
            self.acc_pos,
            self.acc_neg,
            self.balance,
            c.tp,
            c.tn,
            c.fp,
            c.fn_,
            self.ties,
            sep_cells(&self.global_phi),
            sep_cells(&self.phi_sum),
        )
    }
}

/// Evaluates any predictor on a labelled set, in instance order.
pub fn evaluate(predictor: &dyn Predictor, data: &[PreparedInstance]) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let mut confusion = Confusion::default();
    let mut ties = 0;
    let mut global = Vec::with_capacity(data.len());
    let mut sums = Vec::with_capacity(data.len());
    let mut labels = Vec::with_capacity(data.len());
    for (i, x) in data.iter().enumerate() {
        let p = predictor
            .predict_one(x)
            .map_err(|e| match e {
                Error::Numerical(msg) => Error::Numerical(format!("instance {i}: {msg}")),
                other => other,
            })?;
        confusion.record(p.class(), x.label);
        ties += usize::from(p.logits[0] == p.logits[1]);
        global.push(p.global_phi);
        sums.push(p.phi_sum);
        labels.push(x.label);
    }
    Ok(EvalReport {
        task: None,
        samples: data.len(),
        accuracy: confusion.accuracy(),
        acc_pos: confusion.acc_pos(),
        acc_neg: confusion.acc_neg(),
        balance: confusion.balance(),
        confusion,
        ties,
        global_phi: phi_statistics(&global, &labels),
        phi_sum: phi_statistics(&sums, &labels),
        config: None,
    })
}

/// Checks that `model` was built for `task` before evaluating it.
pub fn evaluate_model(model: &UckModel, task: Task, data: &[PreparedInstance]) -> Result<EvalReport> {
    check_compatible(&model.config, task)?;
    let mut report = evaluate(model, data)?;
    report.task = Some(task);
    report.config = Some(model.config.clone());
    Ok(report)
}

pub fn check_compatible(config: &ModelConfig, task: Task) -> Result<()> {
    let mut problems = Vec::new();
    if config.head != task.head() {
        problems.push(format!(
            "{} needs the {:?} head, model has {:?}",
            task.name(),
            task.head(),
            config.head
        ));
    }
    if config.input_dim != task.feature_width() {
        problems.push(format!(
            "{} features are {} wide, model expects {}",
            task.name(),
            task.feature_width(),
            config.input_dim
        ));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Data(problems.join("; ")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balance_examples() {
        assert!((balance_score(0.999, 0.948) - 0.949).abs() <= 0.001);
        assert!((balance_score(0.201, 0.993) - 0.203).abs() <= 0.001);
        assert_eq!(balance_score(0.37, 0.37), 1.0);
        assert_eq!(balance_score(0.0, 0.0), 0.0);
    }

    #[test]
    fn mean_std_by_hand() {
        // 1, 2, 4: mean 7/3, squared deviations sum 14/3, sample variance 7/3.
        let m = MeanStd::of(&[1.0, 2.0, 4.0]).unwrap();
        assert!((m.mean - 7.0 / 3.0).abs() < 1e-15);
        assert!((m.std - (7.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(MeanStd::of(&[5.0]).unwrap().std, 0.0);
        assert!(MeanStd::of(&[]).is_none());
    }

    #[test]
    fn phi_statistics_examples() {
        let zero = phi_statistics(&[0.0; 4], &[0, 1, 0, 1]);
        assert_eq!(zero.separation, Some(0.0));
        assert_eq!(zero.feasible.unwrap().mean, 0.0);
        let injected = phi_statistics(&[1.0, 1.0, -1.0], &[1, 1, 0]);
        assert_eq!(injected.separation, Some(2.0));
        let one_class = phi_statistics(&[1.0, 2.0], &[1, 1]);
        assert!(one_class.infeasible.is_none() && one_class.separation.is_none());
    }

    #[test]
    fn welch_matches_reference() {
        // Reference: scipy.stats.ttest_ind(a, b, equal_var=False).pvalue
        let a = [19.8, 20.4, 19.6, 17.8, 18.5, 18.9, 18.3, 18.9, 19.5, 22.0];
        let b = [28.2, 26.6, 20.1, 23.3, 25.2, 22.1, 17.7, 27.6, 20.6, 13.7, 23.2, 17.5, 20.6, 18.0, 23.9, 21.6, 24.3, 20.4, 24.0, 13.2];
        let p = welch_p_value(&a, &b).unwrap();
        assert!((p - 0.035_972_271_029_796_85).abs() < 1e-9, "{p}");
    }
}
