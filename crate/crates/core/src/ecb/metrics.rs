use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Loss values of the sub-steps run in one iteration; stages that did not
/// run report 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub sup_vit: f64,
    pub sup_cnn: f64,
    pub find: f64,
    pub conq: f64,
    pub v2c: f64,
    pub c2v: f64,
    /// Samples passing the gate in this iteration's co-training batches.
    pub selected_v2c: usize,
    pub selected_c2v: usize,
}

/// One row of the metrics stream. Pseudo-label counts and accuracies are
/// measured over the whole unlabeled target split at the logged iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iter: usize,
    pub lr_vit: f64,
    pub lr_cnn: f64,
    pub loss_sup_vit: f64,
    pub loss_sup_cnn: f64,
    pub loss_find: f64,
    pub loss_conq: f64,
    pub loss_v2c: f64,
    pub loss_c2v: f64,
    pub pseudo_total_v2c: usize,
    pub pseudo_correct_v2c: usize,
    pub pseudo_total_c2v: usize,
    pub pseudo_correct_c2v: usize,
    pub acc_target_cnn: f64,
    pub acc_target_vit: f64,
}

pub const METRICS_COLUMNS: [&str; 15] = [
    "iter",
    "lr_vit",
    "lr_cnn",
    "loss_sup_vit",
    "loss_sup_cnn",
    "loss_find",
    "loss_conq",
    "loss_v2c",
    "loss_c2v",
    "pseudo_total_v2c",
    "pseudo_correct_v2c",
    "pseudo_total_c2v",
    "pseudo_correct_c2v",
    "acc_target_cnn",
    "acc_target_vit",
];

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("metrics csv: {e}"))
}

impl MetricsRecord {
    /// Fraction of selected v2c pseudo labels that are correct (0 if none).
    pub fn v2c_precision(&self) -> f64 {
        if self.pseudo_total_v2c == 0 {
            0.0
        } else {
            self.pseudo_correct_v2c as f64 / self.pseudo_total_v2c as f64
        }
    }

    pub fn losses_finite(&self) -> bool {
        [self.loss_sup_vit, self.loss_sup_cnn, self.loss_find, self.loss_conq, self.loss_v2c, self.loss_c2v]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn write_csv(records: &[MetricsRecord], w: impl Write) -> Result<()> {
        // header written explicitly so an empty history still has one
        let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        out.write_record(METRICS_COLUMNS).map_err(csv_err)?;
        for r in records {
            out.serialize(r).map_err(csv_err)?;
        }
        out.flush().map_err(|e| Error::Format(e.to_string()))
    }

    pub fn read_csv(r: impl std::io::Read) -> Result<Vec<MetricsRecord>> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers().map_err(csv_err)?.clone();
        if header.iter().ne(METRICS_COLUMNS) {
            return Err(Error::Format(format!("unexpected metrics header {header:?}")));
        }
        rd.deserialize().map(|r| r.map_err(csv_err)).collect()
    }
}
