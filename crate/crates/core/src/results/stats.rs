//! Repetition statistics, strong-scaling efficiency, and cost per run.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::ResultsError;
use crate::catalog::{estimate_cost, InstanceType};
use crate::execution::decompose_grid;
use crate::money::Money;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub n: usize,
    pub mean_seconds: f64,
    /// Sample standard deviation (n - 1 denominator); 0 when n = 1.
    pub std_seconds: f64,
    pub warmup_excluded: usize,
}

/// Drops the first `warmup_count` samples and summarizes the rest.
pub fn aggregate_repetitions(
    samples: &[f64],
    warmup_count: usize,
) -> Result<RunMetrics, ResultsError> {
    if samples.len() <= warmup_count {
        return Err(ResultsError::InsufficientSamples {
            samples: samples.len(),
            warmup: warmup_count,
        });
    }
    let measured = &samples[warmup_count..];
    let n = measured.len();
    let mean = measured.iter().sum::<f64>() / n as f64;
    // two-pass with compensation term for the rounding error in `mean`
    let (sq, comp) = measured.iter().fold((0.0, 0.0), |(sq, c), x| {
        let d = x - mean;
        (sq + d * d, c + d)
    });
    let std = if n > 1 {
        ((sq - comp * comp / n as f64) / (n - 1) as f64)
            .max(0.0)
            .sqrt()
    } else {
        0.0
    };
    Ok(RunMetrics {
        n,
        mean_seconds: mean,
        std_seconds: std,
        warmup_excluded: warmup_count,
    })
}

/// Strong-scaling measurements sorted by rank count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingSeries {
    points: Vec<(u32, f64)>,
}

impl ScalingSeries {
    pub fn new(mut points: Vec<(u32, f64)>) -> Result<Self, ResultsError> {
        if points.is_empty() {
            return Err(ResultsError::InvalidSeries("series is empty".into()));
        }
        for &(np, t) in &points {
            if np == 0 || !(t.is_finite() && t > 0.0) {
                return Err(ResultsError::InvalidSeries(format!(
                    "invalid point ({np}, {t})"
                )));
            }
        }
        points.sort_by_key(|p| p.0);
        if points.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(ResultsError::InvalidSeries("duplicate np".into()));
        }
        Ok(ScalingSeries { points })
    }

    pub fn points(&self) -> &[(u32, f64)] {
        &self.points
    }

    pub fn base_np(&self) -> u32 {
        self.points[0].0
    }
}

/// Efficiency relative to the smallest measured rank count, in percent.
pub fn parallel_efficiency(series: &ScalingSeries) -> Vec<(u32, f64)> {
    let (base_np, base_t) = series.points[0];
    let base_work = base_t * f64::from(base_np);
    series
        .points
        .iter()
        .map(|&(np, t)| (np, 100.0 * (base_work / (t * f64::from(np)))))
        .collect()
}

pub fn cost_per_run(metrics: &RunMetrics, instance: &InstanceType, node_count: u32) -> Money {
    estimate_cost(instance, metrics.mean_seconds / 3600.0, node_count)
}

/// Renders a series in the strong-scaling table layout: one column per rank
/// count, rows for time, efficiency, instance count and process grid.
pub fn scaling_table_csv(label: &str, series: &ScalingSeries, instances: &[u32]) -> String {
    let eff = parallel_efficiency(series);
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<String> = std::iter::once(label.to_string())
        .chain(series.points.iter().map(|(np, _)| np.to_string()))
        .collect();
    let row = |name: &str, cells: Vec<String>| -> Vec<String> {
        std::iter::once(name.to_string()).chain(cells).collect()
    };
    let rows = [
        header,
        row(
            "Time (h)",
            series
                .points
                .iter()
                .map(|(_, t)| format!("{t:.2}"))
                .collect(),
        ),
        row(
            "Efficiency (%)",
            eff.iter().map(|(_, e)| format!("{e:.1}")).collect(),
        ),
        row(
            "Instances",
            (0..series.points.len())
                .map(|i| instances.get(i).copied().unwrap_or(1).to_string())
                .collect(),
        ),
        row(
            "(N_x, N_y)",
            series
                .points
                .iter()
                .map(|(np, _)| decompose_grid(*np).to_string())
                .collect(),
        ),
    ];
    for r in rows {
        w.write_record(&r).expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv output is utf-8")
}

/// Plain `np,time_h,efficiency_pct` listing, one row per point.
pub fn scaling_points_csv(series: &ScalingSeries) -> String {
    let mut out = String::from("np,time_h,efficiency_pct\n");
    for ((np, t), (_, e)) in series.points.iter().zip(parallel_efficiency(series)) {
        let _ = writeln!(out, "{np},{t},{e:.3}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::FamilyClass;

    #[test]
    fn warmup_is_dropped() {
        let samples: Vec<f64> = (0..21).map(|i| 10.0 + i as f64).collect();
        let m = aggregate_repetitions(&samples, 1).unwrap();
        assert_eq!(m.n, 20);
        assert_eq!(m.warmup_excluded, 1);
        assert!((m.mean_seconds - 20.5).abs() < 1e-12);
    }

    #[test]
    fn constant_series_has_zero_std() {
        let m = aggregate_repetitions(&[16.3; 20], 0).unwrap();
        assert!((m.mean_seconds - 16.3).abs() < 1e-12);
        assert!(m.std_seconds.abs() < 1e-12);
    }

    #[test]
    fn one_to_four() {
        let m = aggregate_repetitions(&[1.0, 2.0, 3.0, 4.0], 0).unwrap();
        assert_eq!(m.mean_seconds, 2.5);
        // sum of squared deviations 5.0 over n-1 = 3
        assert!((m.std_seconds - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn insufficient_samples() {
        assert!(matches!(
            aggregate_repetitions(&[1.0], 1),
            Err(ResultsError::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn single_point_is_100() {
        let s = ScalingSeries::new(vec![(8, 1.38)]).unwrap();
        assert_eq!(parallel_efficiency(&s), vec![(8, 100.0)]);
    }

    #[test]
    fn perfect_scaling_is_100_everywhere() {
        let s = ScalingSeries::new(
            [8, 16, 32, 64]
                .iter()
                .map(|&np| (np, 64.0 / np as f64))
                .collect(),
        )
        .unwrap();
        for (_, e) in parallel_efficiency(&s) {
            assert_eq!(e, 100.0);
        }
    }

    #[test]
    fn series_validation() {
        assert!(ScalingSeries::new(vec![]).is_err());
        assert!(ScalingSeries::new(vec![(8, 1.0), (8, 2.0)]).is_err());
        assert!(ScalingSeries::new(vec![(0, 1.0)]).is_err());
        let s = ScalingSeries::new(vec![(16, 0.8), (8, 1.38)]).unwrap();
        assert_eq!(s.base_np(), 8);
    }

    #[test]
    fn cost_of_one_hour_is_price() {
        let inst = InstanceType {
            provider: "aws".parse().unwrap(),
            region: "r".into(),
            name: "n".into(),
            vcpus: 8,
            memory_gib: 32.0,
            gpus: 0,
            gpu_model: None,
            network_gbps: 10.0,
            price_per_hour: Money::from_usd(0.48048),
            family_class: FamilyClass::General,
        };
        let m = RunMetrics {
            n: 20,
            mean_seconds: 3600.0,
            std_seconds: 0.0,
            warmup_excluded: 1,
        };
        assert_eq!(cost_per_run(&m, &inst, 1), inst.price_per_hour);
        // 16.3 s on 2 nodes: 0.48048 * 2 * 16.3 / 3600 = 0.0043510... USD
        let m = RunMetrics {
            mean_seconds: 16.3,
            ..m
        };
        assert_eq!(cost_per_run(&m, &inst, 2), Money::from_micros(4351));
    }

    #[test]
    fn table_layout() {
        let s = ScalingSeries::new(vec![(8, 1.38), (16, 0.80)]).unwrap();
        let csv = scaling_table_csv("Scale-up", &s, &[1, 1]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "Scale-up,8,16");
        assert_eq!(lines[1], "Time (h),1.38,0.80");
        assert!(
            lines[2].starts_with("Efficiency (%),100.0,86."),
            "{}",
            lines[2]
        );
        assert_eq!(lines[4], "\"(N_x, N_y)\",\"(2,4)\",\"(4,4)\"");
        assert!(scaling_points_csv(&s).starts_with("np,time_h,efficiency_pct\n8,1.38,100.000\n"));
    }
}
