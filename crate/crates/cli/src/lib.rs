//! Front ends for the completion model: request handling shared by the
//! HTTP service and the interactive prompt.

pub mod service;
pub mod session;

use ncc_core::providers::ApiTable;

/// Member table shipped with the binary, used when no `--api-table` is given.
pub const BUNDLED_API_TABLE: &str = include_str!("../data/api_table.json");

pub fn bundled_api_table() -> ApiTable {
    serde_json::from_str(BUNDLED_API_TABLE).expect("bundled api table is valid")
}
