//! Parameter groups shared by the model modules.

use serde::{Deserialize, Serialize};

/// Staged training freezes `Pretrained` tensors during the warm-up stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Pretrained,
    Random,
}

/// Joins a name prefix and a leaf name with a dot.
pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
