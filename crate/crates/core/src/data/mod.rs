//! Flight logs, windows, splits and the synthetic flight generator.

mod flight_log;
mod split;
mod synth;
mod window;

pub use flight_log::{
    load_log, load_log_with, log_path, resample, save_log, write_log, ColumnMap, FlightLog, LogRow,
    COLUMNS, OMEGA_LOAD_COLUMNS,
};
pub use split::{
    assign_splits, split, Dataset, DatasetManifest, DatasetSplits, ManifestEntry, Split,
    SplitAssignment, Windowing,
};
pub use synth::{
    generate_synthetic, synthetic_suite, ControllerGains, DisturbanceConfig, SyntheticSpec,
    Trajectory,
};
pub use window::{make_windows, SequenceWindow, WindowBatch, WindowSource};
