//! Static AP-versus-oLRP scatter plots.
//!
//! One SVG with a detection panel and a segmentation panel. AP sits on the
//! x axis, oLRP on the y axis, both oriented so the best corner (high AP,
//! low oLRP) is top-left.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::EvalReport;

pub fn plot_reports(reports: &[(String, EvalReport)], out: &Path) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::invalid_input("no reports to plot"));
    }
    let root = SVGBackend::new(out, (1100, 520)).into_drawing_area();
    root.fill(&WHITE)
        .map_err(|e| Error::Internal(e.to_string()))?;
    let panels = root.split_evenly((1, 2));
    let series: [(&str, Box<dyn Fn(&EvalReport) -> (f64, f64)>); 2] = [
        (
            "Detection",
            Box::new(|r: &EvalReport| (r.detection.ap, r.detection.olrp)),
        ),
        (
            "Segmentation",
            Box::new(|r: &EvalReport| (r.segmentation.ap, r.segmentation.olrp)),
        ),
    ];
    for (panel, (title, extract)) in panels.iter().zip(series.iter()) {
        let points: Vec<(String, f64, f64)> = reports
            .iter()
            .map(|(name, r)| {
                let (ap, olrp) = extract(r);
                (name.clone(), ap, olrp)
            })
            .collect();
        let pad = 5.0;
        let x_max = points.iter().map(|p| p.1).fold(0.0f64, f64::max) + pad;
        let x_min = (points.iter().map(|p| p.1).fold(100.0f64, f64::min) - pad).max(0.0);
        let y_max = points.iter().map(|p| p.2).fold(0.0f64, f64::max) + pad;
        let y_min = (points.iter().map(|p| p.2).fold(100.0f64, f64::min) - pad).max(0.0);
        let mut chart = ChartBuilder::on(panel)
            .caption(*title, ("sans-serif", 22))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(48)
            // reversed x: high AP on the left, so "top-left is best"
            .build_cartesian_2d(x_max..x_min, y_min..y_max)
            .map_err(|e| Error::Internal(e.to_string()))?;
        chart
            .configure_mesh()
            .x_desc("AP")
            .y_desc("oLRP")
            .draw()
            .map_err(|e| Error::Internal(e.to_string()))?;
        chart
            .draw_series(points.iter().enumerate().map(|(i, (_, ap, olrp))| {
                let color = Palette99::pick(i).mix(0.9);
                Circle::new((*ap, *olrp), 5, color.filled())
            }))
            .map_err(|e| Error::Internal(e.to_string()))?;
        chart
            .draw_series(points.iter().map(|(name, ap, olrp)| {
                Text::new(name.clone(), (*ap, *olrp + 1.0), ("sans-serif", 14))
            }))
            .map_err(|e| Error::Internal(e.to_string()))?;
    }
    root.present().map_err(|e| Error::Internal(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::MetricSet;

    fn report(ap: f64, olrp: f64) -> EvalReport {
        EvalReport {
            format_version: 1,
            detection: MetricSet {
                ap,
                olrp,
                ..MetricSet::default()
            },
            segmentation: MetricSet {
                ap: ap - 2.0,
                olrp: olrp + 2.0,
                ..MetricSet::default()
            },
            per_class: Default::default(),
        }
    }

    #[test]
    fn two_reports_give_two_labeled_points() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("scatter.svg");
        let reports = vec![
            ("baseline".to_string(), report(70.0, 30.0)),
            ("full".to_string(), report(82.0, 20.0)),
        ];
        plot_reports(&reports, &out).unwrap();
        let svg = std::fs::read_to_string(&out).unwrap();
        assert!(svg.contains("baseline"));
        assert!(svg.contains("full"));
        assert!(svg.contains("circle"));
        assert!(svg.contains("AP") && svg.contains("oLRP"));
    }

    #[test]
    fn empty_report_list_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(plot_reports(&[], &tmp.path().join("x.svg")).is_err());
    }
}
