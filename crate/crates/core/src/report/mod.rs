//! Tables, figures and the assembled report built from persisted run
//! directories.

mod bundle;
mod figures;
mod table;

pub use bundle::{build_report, ReportBundle, ReportOptions};
pub use figures::{
    delta_curves, delta_series_csv, mask_to_rgb, model_color, plot_delta_curves, render_delta_plot,
    render_overlays, sample_to_rgb, OverlayGrid, PALETTE,
};
pub use table::{
    build_table, format_mean_std, py_round, table_by_aug, table_by_model, table_overall,
    table_overfitting, table_per_aug_detail, table_speed, Cell, CellValue, TableArtifact,
    TableKind, TableRow, DELTA_DECIMALS, METRIC_DECIMALS, SPEED_DECIMALS, UNDEFINED,
};
