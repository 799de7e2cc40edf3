//! SVG figures: ROC, calibration, grade box plots, subgroup forest table,
//! cumulative incidence and per-lead beat waveforms.

use plotters::coord::Shift;
use plotters::prelude::*;

use crate::cohort::{Lead, Vessel};
use crate::error::{Error, Result};
use crate::explain::{beat_time_s, WaveformSummary, BEAT_SAMPLES};
use crate::metrics::GradeBox;
use crate::report::{Cell, EvalReport, GroupEval};
use crate::survival::{RiskGroup, SurvivalCurve, VesselRisk};

const HIGH: RGBColor = RGBColor(200, 40, 40);
const LOW: RGBColor = RGBColor(40, 90, 190);
const GRID: RGBColor = RGBColor(150, 150, 150);
const FONT: &str = "sans-serif";

fn err<E: std::fmt::Display>(e: E) -> Error {
    Error::Data(format!("plot: {e}"))
}

fn render<F>(size: (u32, u32), draw: F) -> Result<String>
where
    F: FnOnce(&DrawingArea<SVGBackend, Shift>) -> Result<()>,
{
    let mut out = String::new();
    {
        let root = SVGBackend::with_string(&mut out, size).into_drawing_area();
        root.fill(&WHITE).map_err(err)?;
        draw(&root)?;
        root.present().map_err(err)?;
    }
    Ok(out)
}

fn vessel_color(v: Vessel) -> RGBColor {
    match v {
        Vessel::Rca => RGBColor(200, 40, 40),
        Vessel::Lm => RGBColor(120, 60, 160),
        Vessel::Lad => RGBColor(40, 90, 190),
        Vessel::Lcx => RGBColor(30, 140, 70),
    }
}

/// ROC curve of one vessel, with the AUC and its interval in the legend.
pub fn roc_svg(group: &GroupEval, vessel: Vessel) -> Result<String> {
    let ve = group.vessel(vessel);
    render((520, 520), |root| {
        let mut chart = ChartBuilder::on(root)
            .caption(
                format!("ROC {} ({})", vessel.name(), group.label),
                (FONT, 18),
            )
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(48)
            .build_cartesian_2d(0f64..1f64, 0f64..1f64)
            .map_err(err)?;
        chart
            .configure_mesh()
            .x_desc("1 - specificity")
            .y_desc("sensitivity")
            .light_line_style(WHITE)
            .draw()
            .map_err(err)?;
        chart
            .draw_series(LineSeries::new(
                [(0.0, 0.0), (1.0, 1.0)],
                GRID.stroke_width(1),
            ))
            .map_err(err)?;
        match &ve.roc {
            Cell::Defined { value: r } => {
                let color = vessel_color(vessel);
                chart
                    .draw_series(LineSeries::new(
                        r.points.iter().copied(),
                        color.stroke_width(2),
                    ))
                    .map_err(err)?
                    .label(format!("AUC {:.3} ({:.3}-{:.3})", r.auc, r.ci.0, r.ci.1))
                    .legend(move |(x, y)| {
                        PathElement::new([(x, y), (x + 18, y)], color.stroke_width(2))
                    });
                chart
                    .configure_series_labels()
                    .position(SeriesLabelPosition::LowerRight)
                    .background_style(WHITE.mix(0.9))
                    .border_style(BLACK)
                    .draw()
                    .map_err(err)?;
            }
            Cell::Undefined { reason } => {
                chart
                    .draw_series([Text::new(
                        format!("undefined: {reason}"),
                        (0.05, 0.5),
                        (FONT, 13),
                    )])
                    .map_err(err)?;
            }
        }
        Ok(())
    })
}

/// Reliability diagram of one vessel over its populated bins.
pub fn calibration_svg(group: &GroupEval, vessel: Vessel) -> Result<String> {
    let ve = group.vessel(vessel);
    render((520, 520), |root| {
        let mut chart = ChartBuilder::on(root)
            .caption(
                format!("Calibration {} ({})", vessel.name(), group.label),
                (FONT, 18),
            )
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(48)
            .build_cartesian_2d(0f64..1f64, 0f64..1f64)
            .map_err(err)?;
        chart
            .configure_mesh()
            .x_desc("mean predicted probability")
            .y_desc("observed fraction")
            .light_line_style(WHITE)
            .draw()
            .map_err(err)?;
        chart
            .draw_series(LineSeries::new(
                [(0.0, 0.0), (1.0, 1.0)],
                GRID.stroke_width(1),
            ))
            .map_err(err)?;
        if let Some(c) = ve.calibration.value() {
            let color = vessel_color(vessel);
            let curve = c.curve();
            chart
                .draw_series(LineSeries::new(
                    curve.iter().copied(),
                    color.stroke_width(2),
                ))
                .map_err(err)?
                .label(format!("Brier {:.3}", c.brier))
                .legend(move |(x, y)| {
                    PathElement::new([(x, y), (x + 18, y)], color.stroke_width(2))
                });
            chart
                .draw_series(curve.iter().map(|&p| Circle::new(p, 3, color.filled())))
                .map_err(err)?;
            chart
                .configure_series_labels()
                .position(SeriesLabelPosition::UpperLeft)
                .background_style(WHITE.mix(0.9))
                .border_style(BLACK)
                .draw()
                .map_err(err)?;
        }
        Ok(())
    })
}

fn draw_boxes(
    area: &DrawingArea<SVGBackend, Shift>,
    vessel: Vessel,
    boxes: &[&GradeBox],
) -> Result<()> {
    let mut chart = ChartBuilder::on(area)
        .caption(vessel.name(), (FONT, 16))
        .margin(8)
        .x_label_area_size(32)
        .y_label_area_size(44)
        .build_cartesian_2d(-0.5f64..3.5f64, 0f64..1f64)
        .map_err(err)?;
    chart
        .configure_mesh()
        .x_labels(4)
        .x_label_formatter(&|x| format!("{}", x.round() as i64))
        .x_desc("grade")
        .y_desc("predicted probability")
        .light_line_style(WHITE)
        .draw()
        .map_err(err)?;
    let color = vessel_color(vessel);
    for b in boxes {
        let Some(s) = &b.summary else { continue };
        let x = b.grade as f64;
        let w = 0.3;
        chart
            .draw_series([
                Rectangle::new([(x - w, s.q1), (x + w, s.q3)], color.mix(0.25).filled()),
                Rectangle::new([(x - w, s.q1), (x + w, s.q3)], color.stroke_width(1)),
            ])
            .map_err(err)?;
        chart
            .draw_series([
                PathElement::new(
                    [(x - w, s.median), (x + w, s.median)],
                    BLACK.stroke_width(2),
                ),
                PathElement::new([(x, s.q3), (x, s.whisker_hi)], color.stroke_width(1)),
                PathElement::new([(x, s.q1), (x, s.whisker_lo)], color.stroke_width(1)),
                PathElement::new(
                    [(x - w / 2.0, s.whisker_hi), (x + w / 2.0, s.whisker_hi)],
                    color.stroke_width(1),
                ),
                PathElement::new(
                    [(x - w / 2.0, s.whisker_lo), (x + w / 2.0, s.whisker_lo)],
                    color.stroke_width(1),
                ),
            ])
            .map_err(err)?;
    }
    Ok(())
}

/// Predicted probability by stenosis grade, one panel per vessel.
pub fn grade_boxes_svg(group: &GroupEval) -> Result<String> {
    render((1200, 380), |root| {
        let panels = root.split_evenly((1, 4));
        for (area, v) in panels.iter().zip(Vessel::ALL) {
            let boxes: Vec<&GradeBox> =
                group.grade_boxes.iter().filter(|b| b.vessel == v).collect();
            draw_boxes(area, v, &boxes)?;
        }
        Ok(())
    })
}

/// AUC with interval for every group, one panel per vessel; undefined cells
/// are labelled instead of drawn.
pub fn subgroup_forest_svg(report: &EvalReport) -> Result<String> {
    let rows = report.groups.len();
    let height = 120 + 28 * rows as u32;
    render((1200, height), |root| {
        let panels = root.split_evenly((1, 4));
        for (area, v) in panels.iter().zip(Vessel::ALL) {
            let labels: Vec<String> = report.groups.iter().map(|g| g.key.clone()).collect();
            let fmt = move |y: &f64| {
                let k = y.round();
                if (k - y).abs() < 1e-9 && k >= 0.0 && (k as usize) < labels.len() {
                    labels[k as usize].clone()
                } else {
                    String::new()
                }
            };
            let mut chart = ChartBuilder::on(area)
                .caption(v.name(), (FONT, 16))
                .margin(8)
                .x_label_area_size(30)
                .y_label_area_size(if v == Vessel::Rca { 120 } else { 10 })
                .build_cartesian_2d(0.3f64..1f64, -0.5f64..(rows as f64 - 0.5))
                .map_err(err)?;
            chart
                .configure_mesh()
                .y_labels(rows.max(1))
                .y_label_formatter(&fmt)
                .x_desc("AUC")
                .light_line_style(WHITE)
                .draw()
                .map_err(err)?;
            let color = vessel_color(v);
            for (row, g) in report.groups.iter().enumerate() {
                let y = row as f64;
                match &g.vessel(v).roc {
                    Cell::Defined { value: r } => {
                        chart
                            .draw_series([PathElement::new(
                                [(r.ci.0, y), (r.ci.1, y)],
                                color.stroke_width(2),
                            )])
                            .map_err(err)?;
                        chart
                            .draw_series([Circle::new((r.auc, y), 4, color.filled())])
                            .map_err(err)?;
                    }
                    Cell::Undefined { .. } => {
                        chart
                            .draw_series([Text::new("undefined", (0.35, y), (FONT, 12))])
                            .map_err(err)?;
                    }
                }
            }
        }
        Ok(())
    })
}

fn steps(curve: &SurvivalCurve, horizon: u32) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(2 * curve.points.len() + 1);
    let mut prev = 0.0;
    for p in &curve.points {
        out.push((p.day as f64, prev));
        out.push((p.day as f64, p.incidence));
        prev = p.incidence;
    }
    out.push((horizon as f64, prev));
    out
}

/// Cumulative incidence step curves of the high- and low-risk groups.
pub fn incidence_svg(risk: &VesselRisk, horizon: u32) -> Result<String> {
    let curves: Vec<(&SurvivalCurve, RGBColor)> = [(&risk.high, HIGH), (&risk.low, LOW)]
        .into_iter()
        .filter_map(|(c, col)| c.as_ref().map(|c| (c, col)))
        .collect();
    let top = curves
        .iter()
        .map(|(c, _)| c.final_incidence())
        .fold(0.05, f64::max)
        * 1.15;
    let p = match (&risk.logrank, &risk.undefined) {
        (Some(lr), _) => format!("log-rank p = {:.2e}", lr.p_value),
        (None, Some(m)) => format!("log-rank undefined: {m}"),
        (None, None) => String::new(),
    };
    render((620, 460), |root| {
        let mut chart = ChartBuilder::on(root)
            .caption(
                format!("{} cumulative incidence, {}", risk.vessel.name(), p),
                (FONT, 16),
            )
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(52)
            .build_cartesian_2d(0f64..horizon as f64, 0f64..top.min(1.0))
            .map_err(err)?;
        chart
            .configure_mesh()
            .x_desc("days since ECG")
            .y_desc("cumulative incidence")
            .light_line_style(WHITE)
            .draw()
            .map_err(err)?;
        for (c, color) in curves {
            chart
                .draw_series(LineSeries::new(steps(c, horizon), color.stroke_width(2)))
                .map_err(err)?
                .label(format!("{} risk (n = {})", c.group, c.n))
                .legend(move |(x, y)| {
                    PathElement::new([(x, y), (x + 18, y)], color.stroke_width(2))
                });
        }
        chart
            .configure_series_labels()
            .position(SeriesLabelPosition::UpperLeft)
            .background_style(WHITE.mix(0.9))
            .border_style(BLACK)
            .draw()
            .map_err(err)?;
        Ok(())
    })
}

/// Twelve panels of mean beat with a one-std band per risk group.
pub fn waveforms_svg(summary: &WaveformSummary, vessel: Vessel) -> Result<String> {
    let t_ms: Vec<f64> = (0..BEAT_SAMPLES).map(|k| beat_time_s(k) * 1000.0).collect();
    let (t0, t1) = (t_ms[0], t_ms[BEAT_SAMPLES - 1]);
    render((1200, 1100), |root| {
        let (title, body) = root.split_vertically(36);
        title
            .titled(
                &format!("{} risk groups: mean beat per lead", vessel.name()),
                (FONT, 20),
            )
            .map_err(err)?;
        let panels = body.split_evenly((4, 3));
        for (area, lead) in panels.iter().zip(Lead::ALL) {
            let l = lead.index();
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for g in &summary.groups {
                for (m, s) in g.mean_lead(l).iter().zip(g.std_lead(l)) {
                    lo = lo.min(m - s);
                    hi = hi.max(m + s);
                }
            }
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                lo = -1.0;
                hi = 1.0;
            }
            let mut chart = ChartBuilder::on(area)
                .caption(lead.name(), (FONT, 14))
                .margin(6)
                .x_label_area_size(24)
                .y_label_area_size(36)
                .build_cartesian_2d(t0..t1, lo..hi)
                .map_err(err)?;
            chart
                .configure_mesh()
                .x_labels(5)
                .y_labels(4)
                .light_line_style(WHITE)
                .draw()
                .map_err(err)?;
            for g in &summary.groups {
                let color = match g.group {
                    RiskGroup::High => HIGH,
                    RiskGroup::Low => LOW,
                };
                let (m, s) = (g.mean_lead(l), g.std_lead(l));
                let mut band: Vec<(f64, f64)> = t_ms
                    .iter()
                    .zip(m.iter().zip(s))
                    .map(|(&t, (m, s))| (t, m + s))
                    .collect();
                band.extend(
                    t_ms.iter()
                        .zip(m.iter().zip(s))
                        .rev()
                        .map(|(&t, (m, s))| (t, m - s)),
                );
                chart
                    .draw_series([Polygon::new(band, color.mix(0.15).filled())])
                    .map_err(err)?;
                let series = chart
                    .draw_series(LineSeries::new(
                        t_ms.iter().copied().zip(m.iter().copied()),
                        color.stroke_width(2),
                    ))
                    .map_err(err)?;
                if l == 0 {
                    series
                        .label(format!("{} risk ({} beats)", g.group, g.n_beats))
                        .legend(move |(x, y)| {
                            PathElement::new([(x, y), (x + 18, y)], color.stroke_width(2))
                        });
                }
            }
            if l == 0 {
                chart
                    .configure_series_labels()
                    .position(SeriesLabelPosition::UpperRight)
                    .background_style(WHITE.mix(0.9))
                    .border_style(BLACK)
                    .draw()
                    .map_err(err)?;
            }
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::FollowUp;
    use crate::explain::GroupWaveform;
    use crate::report::{evaluate_predictions, EvalOptions};
    use crate::survival::{cumulative_incidence, logrank};
    use crate::synth::{synth_cohort, CohortParams};

    fn report() -> EvalReport {
        let p = CohortParams {
            n_patients: 40,
            fs: 100.0,
            duration_s: 2.0,
            prevalence: [0.3, 0.0, 0.3, 0.3],
            ..Default::default()
        };
        let c = synth_cohort(&p, 2).unwrap();
        let probs: Vec<[f64; 4]> = c
            .records()
            .iter()
            .enumerate()
            .map(|(k, r)| {
                let g = r.labels.grades();
                std::array::from_fn(|i| {
                    0.1 + 0.15 * g[i].code() as f64 + 0.03 * ((k + i) % 7) as f64
                })
            })
            .collect();
        let opts = EvalOptions {
            n_boot: 20,
            bins: 10,
            seed: 1,
        };
        evaluate_predictions(&c, &probs, &[crate::cohort::Subgroup::Male], &opts).unwrap()
    }

    /// Trimmed contents of every `<text>` element.
    fn parses(svg: &str) -> Vec<String> {
        let doc = roxmltree::Document::parse(svg).expect("svg is well-formed xml");
        assert_eq!(doc.root_element().tag_name().name(), "svg");
        doc.descendants()
            .filter(|n| n.has_tag_name("text"))
            .filter_map(|n| n.text().map(|t| t.trim().to_string()))
            .collect()
    }

    #[test]
    fn evaluation_figures_are_xml() {
        let r = report();
        for v in Vessel::ALL {
            parses(&roc_svg(r.overall(), v).unwrap());
            parses(&calibration_svg(r.overall(), v).unwrap());
        }
        let lm = parses(&roc_svg(r.overall(), Vessel::Lm).unwrap());
        assert!(lm.iter().any(|t| t.starts_with("undefined")));
        parses(&grade_boxes_svg(r.overall()).unwrap());
        parses(&subgroup_forest_svg(&r).unwrap());
    }

    #[test]
    fn incidence_steps_are_right_continuous() {
        let f = |event, days| FollowUp { event, days };
        let high = [f(true, 10), f(true, 40), f(false, 365)];
        let low = [f(false, 365), f(true, 200), f(false, 365)];
        let c = cumulative_incidence(&high, "high").unwrap();
        let s = steps(&c, 365);
        assert_eq!(s.first(), Some(&(0.0, 0.0)));
        assert_eq!(s.last().unwrap().0, 365.0);
        assert!(s.windows(2).all(|w| w[1].0 >= w[0].0 && w[1].1 >= w[0].1));
        let risk = VesselRisk {
            vessel: Vessel::Rca,
            cutoff: 0.15,
            n_high: 3,
            n_low: 3,
            high: Some(c),
            low: Some(cumulative_incidence(&low, "low").unwrap()),
            logrank: Some(logrank(&high, &low).unwrap()),
            undefined: None,
        };
        parses(&incidence_svg(&risk, 365).unwrap());
    }

    #[test]
    fn waveform_grid_has_twelve_panels() {
        let wave = |group, level: f64| GroupWaveform {
            group,
            n_records: 1,
            n_beats: 3,
            mean: (0..12 * BEAT_SAMPLES)
                .map(|k| level + (k as f64 * 0.05).sin())
                .collect(),
            std: vec![0.2; 12 * BEAT_SAMPLES],
        };
        let summary = WaveformSummary {
            groups: vec![wave(RiskGroup::High, 0.3), wave(RiskGroup::Low, 0.0)],
            warnings: vec![],
        };
        let texts = parses(&waveforms_svg(&summary, Vessel::Rca).unwrap());
        for lead in Lead::ALL {
            assert!(
                texts.iter().any(|t| t == lead.name()),
                "missing panel {}",
                lead.name()
            );
        }
    }
}
