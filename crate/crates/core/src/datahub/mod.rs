//! Loading ILI and search-trends snapshots, normalization, calendar
//! alignment, and supervised windowing.

mod calendar;
mod series;
mod trends;
mod windows;

pub use calendar::{IsoWeek, WeekLabel, WeekRange};
pub use series::{load_ili, read_ili, write_ili, WeeklySeries};
pub use trends::{
    align_forward_fill, load_trends, minmax_fit_apply, minmax_fit_apply_dropping, query_slug,
    read_query_list, read_trends_file, MinMax, QueryPanel,
};
pub use windows::{
    make_windows, split_plan, SplitPlan, WindowSample, MIN_TRAINING_WEEKS, VALIDATION_WEEKS,
};
