use std::io::Write;

use serde::Serialize;

/// Metrics recorded after one outer iteration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    /// 1-based outer iteration.
    pub iteration: usize,
    /// Error against the ground truth over the unpadded region, when known.
    pub rmse: Option<f64>,
    pub relative_change: f64,
    /// `½‖Px − d‖²` for the current image.
    pub objective: f64,
    /// Payload bytes sent by all nodes in this iteration.
    pub bytes_sent: u64,
    pub bytes_received: u64,
    /// Frame header bytes sent and received by all nodes in this iteration.
    pub header_bytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConvergenceTrace {
    rows: Vec<TraceRow>,
}

impl ConvergenceTrace {
    pub fn push(&mut self, row: TraceRow) {
        debug_assert!(row.relative_change >= 0.0 || row.relative_change.is_nan());
        debug_assert!(self.rows.last().is_none_or(|r| r.iteration < row.iteration));
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[TraceRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rmse_series(&self) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.rmse).collect()
    }

    /// Lowest RMSE and the first iteration that attains it.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.rows
            .iter()
            .filter_map(|r| r.rmse.map(|e| (r.iteration, e)))
            .fold(None, |best, (it, e)| match best {
                Some((_, b)) if b <= e => best,
                _ => Some((it, e)),
            })
    }

    pub fn final_rmse(&self) -> Option<f64> {
        self.rows.last().and_then(|r| r.rmse)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        for row in &self.rows {
            w.serialize(row)?;
        }
        if self.rows.is_empty() {
            w.write_record([
                "iteration",
                "rmse",
                "relative_change",
                "objective",
                "bytes_sent",
                "bytes_received",
                "header_bytes",
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
