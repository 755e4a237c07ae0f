use std::fmt::Write as _;

use crate::synthdata::QuestionType;

/// Accuracy per question type, their unweighted mean (AA), and the overall
/// sample-weighted accuracy (OA). Types without samples have no accuracy and do
/// not enter AA.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub correct: [usize; 5],
    pub total: [usize; 5],
}

impl MetricsReport {
    pub fn from_outcomes<I: IntoIterator<Item = (QuestionType, bool)>>(outcomes: I) -> Self {
        let mut correct = [0; 5];
        let mut total = [0; 5];
        for (t, ok) in outcomes {
            total[t.index()] += 1;
            correct[t.index()] += ok as usize;
        }
        MetricsReport { correct, total }
    }

    pub fn accuracy(&self, qtype: QuestionType) -> Option<f64> {
        let i = qtype.index();
        (self.total[i] > 0).then(|| self.correct[i] as f64 / self.total[i] as f64)
    }

    pub fn average_accuracy(&self) -> f64 {
        let accs: Vec<f64> = QuestionType::ALL.into_iter().filter_map(|t| self.accuracy(t)).collect();
        if accs.is_empty() {
            return 0.0;
        }
        accs.iter().sum::<f64>() / accs.len() as f64
    }

    pub fn overall_accuracy(&self) -> f64 {
        let total: usize = self.total.iter().sum();
        if total == 0 {
            return 0.0;
        }
        self.correct.iter().sum::<usize>() as f64 / total as f64
    }

    /// `type,accuracy` rows (empty accuracy for absent types) followed by AA and OA.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("type,accuracy\n");
        for t in QuestionType::ALL {
            match self.accuracy(t) {
                Some(a) => writeln!(out, "{t},{a}").unwrap(),
                None => writeln!(out, "{t},").unwrap(),
            }
        }
        writeln!(out, "AA,{}", self.average_accuracy()).unwrap();
        writeln!(out, "OA,{}", self.overall_accuracy()).unwrap();
        out
    }
}
