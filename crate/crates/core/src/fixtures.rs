//! Data files shipped with the workspace, embedded so the binaries work from any directory.

/// Malicious-user statistics for the 27-cell grid, reference values.
/// Columns: `users,devices,threshold,total,successful,failed`.
pub const TABLE3_CSV: &str = include_str!("../../../fixtures/table3.csv");

/// Benign-user statistics for the 9-cell grid, reference values.
/// Columns: `users,threshold,total,successful,failed,failed_percent`.
pub const TABLE2_CSV: &str = include_str!("../../../fixtures/table2.csv");

pub const PRESETS: [(&str, &str); 7] = [
    (
        "case1_benign",
        include_str!("../../../fixtures/presets/case1_benign.toml"),
    ),
    (
        "case2_amateur",
        include_str!("../../../fixtures/presets/case2_amateur.toml"),
    ),
    (
        "case3_naive",
        include_str!("../../../fixtures/presets/case3_naive.toml"),
    ),
    (
        "case4_moderate",
        include_str!("../../../fixtures/presets/case4_moderate.toml"),
    ),
    (
        "case5_sophisticated",
        include_str!("../../../fixtures/presets/case5_sophisticated.toml"),
    ),
    (
        "table2_benign",
        include_str!("../../../fixtures/presets/table2_benign.toml"),
    ),
    (
        "table3_malicious",
        include_str!("../../../fixtures/presets/table3_malicious.toml"),
    ),
];

pub fn preset_toml(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}
