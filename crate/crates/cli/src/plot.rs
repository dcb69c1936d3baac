use std::collections::BTreeSet;
use std::path::Path;

use anyhow::{anyhow, Result};
use ctxasr::eval::MetricsReport;
use plotters::prelude::*;

const COLORS: [RGBColor; 6] = [BLUE, RED, GREEN, MAGENTA, CYAN, BLACK];

/// Line chart of WER against turn position, one series per condition.
pub fn wer_by_turn(path: &Path, report: &MetricsReport) -> Result<()> {
    let turns: BTreeSet<usize> = report
        .conditions
        .iter()
        .flat_map(|c| c.per_turn_index.keys().copied())
        .collect();
    let max_turn = turns.iter().next_back().copied().unwrap_or(1);
    let max_wer = report
        .conditions
        .iter()
        .flat_map(|c| c.per_turn_index.values().copied())
        .fold(0.0f64, f64::max)
        .max(0.05)
        * 1.1;

    let root = SVGBackend::new(path, (720, 440)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| anyhow!("{e}"))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{}: WER by turn", report.model), ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(1usize..max_turn.max(2), 0.0..max_wer)
        .map_err(|e| anyhow!("{e}"))?;
    chart
        .configure_mesh()
        .x_desc("turn")
        .y_desc("WER")
        .draw()
        .map_err(|e| anyhow!("{e}"))?;
    for (i, cond) in report.conditions.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points: Vec<(usize, f64)> = cond.per_turn_index.iter().map(|(&k, &v)| (k, v)).collect();
        chart
            .draw_series(LineSeries::new(points, color.stroke_width(2)))
            .map_err(|e| anyhow!("{e}"))?
            .label(format!("{} ({:.1} %)", cond.label, 100.0 * cond.wer))
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| anyhow!("{e}"))?;
    root.present().map_err(|e| anyhow!("{e}"))?;
    Ok(())
}
