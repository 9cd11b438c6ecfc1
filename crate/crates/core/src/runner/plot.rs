//! Incremental-accuracy curves as SVG.

use std::path::Path;

use plotters::prelude::*;
use thiserror::Error;

use super::results::ResultsBundle;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("no bundles to plot")]
    Empty,
    #[error("bundles disagree on schedule shape: {0:?} vs {1:?}")]
    MismatchedShapes(Vec<usize>, Vec<usize>),
    #[error("drawing failed: {0}")]
    Backend(String),
}

/// Draws one accuracy curve per bundle: x is the number of classes seen
/// after each stage, y the cumulative top-1 accuracy, legend the learner
/// name. All bundles must come from the same schedule shape.
pub fn emit_plot(bundles: &[&ResultsBundle], out: &Path) -> Result<(), PlotError> {
    if bundles.is_empty() {
        return Err(PlotError::Empty);
    }
    let x_values = &bundles[0].classes_seen_per_stage;
    for b in bundles {
        if &b.classes_seen_per_stage != x_values {
            return Err(PlotError::MismatchedShapes(
                x_values.clone(),
                b.classes_seen_per_stage.clone(),
            ));
        }
    }
    let x_max = *x_values.last().unwrap_or(&1) as f64;
    let x_min = *x_values.first().unwrap_or(&0) as f64;

    let root = SVGBackend::new(out, (800, 560)).into_drawing_area();
    root.fill(&WHITE)
        .map_err(|e| PlotError::Backend(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(18)
        .caption("Incremental accuracy", ("sans-serif", 24))
        .x_label_area_size(44)
        .y_label_area_size(52)
        .build_cartesian_2d((x_min - 0.5)..(x_max + 0.5), 0.0..1.02)
        .map_err(|e| PlotError::Backend(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc("classes seen")
        .y_desc("top-1 accuracy")
        .draw()
        .map_err(|e| PlotError::Backend(e.to_string()))?;

    for (i, bundle) in bundles.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let points: Vec<(f64, f64)> = bundle
            .classes_seen_per_stage
            .iter()
            .zip(&bundle.per_stage_accuracy)
            .map(|(&x, &y)| (x as f64, y))
            .collect();
        chart
            .draw_series(LineSeries::new(points.clone(), color.stroke_width(2)))
            .map_err(|e| PlotError::Backend(e.to_string()))?
            .label(bundle.config.model_name.clone())
            .legend(move |(x, y)| {
                PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2))
            });
        chart
            .draw_series(
                points
                    .iter()
                    .map(|&(x, y)| Circle::new((x, y), 3, color.filled())),
            )
            .map_err(|e| PlotError::Backend(e.to_string()))?;
    }

    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.85))
        .draw()
        .map_err(|e| PlotError::Backend(e.to_string()))?;
    root.present()
        .map_err(|e| PlotError::Backend(e.to_string()))?;
    Ok(())
}
