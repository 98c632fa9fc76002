use std::io::Write;

use super::TrainMetrics;
use crate::error::Result;

pub const METRICS_COLUMNS: [&str; 12] = [
    "step",
    "lr",
    "l_cs",
    "l_align",
    "l_cons",
    "l_fair",
    "total",
    "pseudo_acc",
    "sab_gates",
    "vcam_promotions",
    "top1",
    "top5",
];

/// CSV sink: one row per step with the eval columns empty, plus an eval row
/// holding only `step`, `top1` and `top5` whenever an evaluation ran.
pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "{}", METRICS_COLUMNS.join(","))?;
        Ok(Self { out })
    }

    /// Continues an existing file without repeating the header.
    pub fn append(out: W) -> Self {
        Self { out }
    }

    pub fn write(&mut self, m: &TrainMetrics) -> Result<()> {
        let pseudo = m.pseudo_acc.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            self.out,
            "{},{},{},{},{},{},{},{},{},{},,",
            m.step, m.lr, m.l_cs, m.l_align, m.l_cons, m.l_fair, m.total, pseudo, m.sab_gates, m.vcam_promotions
        )?;
        if let Some(e) = m.eval {
            writeln!(self.out, "{},,,,,,,,,,{},{}", m.step, e.top1, e.top5)?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::EvalMetrics;

    #[test]
    fn rows_have_twelve_fields() {
        let mut w = MetricsWriter::new(Vec::new()).unwrap();
        let mut m = TrainMetrics {
            step: 3,
            lr: 0.03,
            l_cs: 1.5,
            l_align: 0.0,
            l_cons: 0.25,
            l_fair: -2.0,
            total: 0.0,
            pseudo_acc: None,
            sab_gates: 1,
            vcam_promotions: 0,
            eval: None,
        };
        w.write(&m).unwrap();
        m.eval = Some(EvalMetrics { top1: 0.5, top5: 1.0 });
        m.pseudo_acc = Some(0.75);
        w.write(&m).unwrap();
        let text = String::from_utf8(w.into_inner()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        for l in &lines {
            assert_eq!(l.split(',').count(), 12);
        }
        assert_eq!(lines[1], "3,0.03,1.5,0,0.25,-2,0,,1,0,,");
        assert_eq!(lines[3], "3,,,,,,,,,,0.5,1");
    }
}
