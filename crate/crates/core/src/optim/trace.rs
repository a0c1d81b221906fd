use std::fmt::Write as _;

/// One outer iteration of a tuning run.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub k: usize,
    pub particle_reward: Option<f64>,
    pub ess: f64,
    pub gamma: f64,
    pub grad_norm: f64,
    pub resampled: bool,
    pub wall_clock_s: Option<f64>,
    pub fresh_reward: Option<f64>,
    pub kl_quadrature: Option<f64>,
}

/// Per-iteration log of a tuning run.
///
/// Wall-clock times are kept apart from the rows so the CSV stays a pure
/// function of the configuration unless timings are asked for.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TuningTrace {
    pub rows: Vec<TraceRow>,
    pub elapsed_s: Vec<f64>,
}

pub const TRACE_HEADER: &str = "k,particle_reward,ess,gamma,grad_norm,resampled,wall_clock_s,fresh_reward,kl_quadrature";

/// Round-trip float formatting with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

impl TuningTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    /// CSV with the fixed header; `wall_clock_s` is filled only when asked.
    pub fn to_csv(&self, with_wall_clock: bool) -> String {
        let mut s = String::with_capacity(64 * (self.rows.len() + 1));
        s.push_str(TRACE_HEADER);
        s.push('\n');
        for (i, r) in self.rows.iter().enumerate() {
            let wall = if with_wall_clock {
                r.wall_clock_s.or_else(|| self.elapsed_s.get(i).copied())
            } else {
                None
            };
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.k,
                opt(r.particle_reward),
                fmt_f64(r.ess),
                fmt_f64(r.gamma),
                fmt_f64(r.grad_norm),
                u8::from(r.resampled),
                opt(wall),
                opt(r.fresh_reward),
                opt(r.kl_quadrature)
            );
        }
        s
    }

    /// Sidecar CSV of cumulative wall-clock seconds per iteration.
    pub fn timing_csv(&self) -> String {
        let mut s = String::from("k,wall_clock_s\n");
        for (r, t) in self.rows.iter().zip(&self.elapsed_s) {
            let _ = writeln!(s, "{},{}", r.k, fmt_f64(*t));
        }
        s
    }

    pub fn resample_count(&self) -> usize {
        self.rows.iter().filter(|r| r.resampled).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, 0.0] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn csv_layout() {
        let t = TuningTrace {
            rows: vec![TraceRow {
                k: 0,
                particle_reward: Some(0.5),
                ess: 10.0,
                gamma: 0.1,
                grad_norm: 2.0,
                resampled: true,
                wall_clock_s: None,
                fresh_reward: None,
                kl_quadrature: Some(0.25),
            }],
            elapsed_s: vec![1.5],
        };
        let csv = t.to_csv(false);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), TRACE_HEADER);
        let cells: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(cells.len(), 9);
        assert_eq!(cells[5], "1");
        assert_eq!(cells[6], "");
        assert_eq!(cells[7], "");
        assert_eq!(cells[8].parse::<f64>().unwrap(), 0.25);
        assert!(t.to_csv(true).lines().nth(1).unwrap().split(',').nth(6).unwrap().parse::<f64>().unwrap() == 1.5);
    }
}
