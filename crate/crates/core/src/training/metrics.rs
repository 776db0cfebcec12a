use std::io::Write;

use serde::Serialize;

/// Counts over real utterances, positive class = label 1.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn record(&mut self, label: u8, pred: u8) {
        match (label, pred) {
            (1, 1) => self.tp += 1,
            (0, 1) => self.fp += 1,
            (1, _) => self.fn_ += 1,
            _ => self.tn += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => (self.tp + self.tn) as f64 / n as f64,
        }
    }

    /// Binary F1 of the positive class; `0/0` is reported as 0.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub f1: f64,
}

impl From<Confusion> for Metrics {
    fn from(c: Confusion) -> Self {
        Self {
            accuracy: c.accuracy(),
            f1: c.f1(),
        }
    }
}

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// NaN when there is no validation split.
    pub val_acc: f64,
    pub val_f1: f64,
}

/// Writes `epoch,train_loss,val_acc,val_f1` with a header row.
pub fn write_history_csv(writer: impl Write, history: &[EpochRecord]) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(["epoch", "train_loss", "val_acc", "val_f1"])?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_fixture() {
        // label, pred over ten utterances: TP=3, FP=2, TN=4, FN=1.
        let pairs = [
            (1, 1),
            (1, 1),
            (1, 1),
            (0, 1),
            (0, 1),
            (0, 0),
            (0, 0),
            (0, 0),
            (0, 0),
            (1, 0),
        ];
        let mut c = Confusion::default();
        for (l, p) in pairs {
            c.record(l, p);
        }
        assert_eq!(
            c,
            Confusion {
                tp: 3,
                fp: 2,
                tn: 4,
                fn_: 1
            }
        );
        assert!((c.accuracy() - 0.7).abs() < 1e-15);
        // precision 3/5, recall 3/4 -> F1 = 2PR/(P+R) = 2/3
        assert!((c.f1() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn all_correct_and_no_positive_conventions() {
        let mut c = Confusion::default();
        c.record(1, 1);
        c.record(0, 0);
        assert_eq!(Metrics::from(c), Metrics { accuracy: 1.0, f1: 1.0 });
        let mut neg = Confusion::default();
        for _ in 0..4 {
            neg.record(0, 0);
        }
        assert_eq!(neg.f1(), 0.0);
        assert_eq!(neg.accuracy(), 1.0);
    }

    #[test]
    fn csv_layout() {
        let mut out = Vec::new();
        write_history_csv(
            &mut out,
            &[EpochRecord {
                epoch: 1,
                train_loss: 0.5,
                val_acc: 0.75,
                val_f1: 0.6,
            }],
        )
        .unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "epoch,train_loss,val_acc,val_f1\n1,0.5,0.75,0.6\n"
        );
        let mut empty = Vec::new();
        write_history_csv(&mut empty, &[]).unwrap();
        assert_eq!(String::from_utf8(empty).unwrap(), "epoch,train_loss,val_acc,val_f1\n");
    }
}
