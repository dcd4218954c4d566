//! Shared fixtures for the acceptance checks.

use std::path::Path;

use serde_json::{json, Value};

/// A configuration that runs end to end in a few seconds.
pub fn small_config(out: &Path) -> Value {
    json!({
        "seed": 7,
        "out": out,
        "dataset": {"height": 32, "width": 32, "train_size": 40, "val_size": 40},
        "train": {"epochs": 4, "learning_rate": 0.1},
        "gradcheck": {"images": 1, "check": {"coordinates": 40}},
        "attacks": [
            {"family": "gradient", "kind": "fgsm", "epsilon": 8.0, "alpha": 8.0, "iterations": 1, "targeted": false},
            {"family": "gradient", "kind": "ifgsm", "epsilon": 2.0, "alpha": 1.0, "iterations": 2, "targeted": true},
            {"family": "patch", "height": 12, "width": 12, "iterations": 3, "placements": 2}
        ],
        "evaluation": {"folds": 2, "heatmaps": 2}
    })
}
