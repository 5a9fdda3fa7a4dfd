//! Per-policy compliance flags.

use serde::{Deserialize, Serialize};

/// One boolean per supported policy; setting a flag arms the corresponding
/// enforcer for that resource. Default is all-false (nothing enforced).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ComplianceFlags {
    #[serde(default)]
    pub confidentiality: bool,
    #[serde(default)]
    pub integrity: bool,
}

impl ComplianceFlags {
    pub const NONE: ComplianceFlags = ComplianceFlags {
        confidentiality: false,
        integrity: false,
    };

    pub fn confidential() -> Self {
        Self {
            confidentiality: true,
            ..Self::NONE
        }
    }

    pub fn integral() -> Self {
        Self {
            integrity: true,
            ..Self::NONE
        }
    }

    pub fn is_none(&self) -> bool {
        *self == Self::NONE
    }

    /// Conservative union: per-policy boolean OR.
    ///
    /// Commutative, associative, idempotent.
    pub fn merge(self, other: ComplianceFlags) -> ComplianceFlags {
        ComplianceFlags {
            confidentiality: self.confidentiality || other.confidentiality,
            integrity: self.integrity || other.integrity,
        }
    }
}

impl std::fmt::Display for ComplianceFlags {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "conf={} int={}",
            self.confidentiality as u8, self.integrity as u8
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_is_boolean_or() {
        assert_eq!(
            ComplianceFlags::NONE.merge(ComplianceFlags::NONE),
            ComplianceFlags::NONE
        );
        assert_eq!(
            ComplianceFlags::confidential().merge(ComplianceFlags::integral()),
            ComplianceFlags {
                confidentiality: true,
                integrity: true
            }
        );
    }

    #[test]
    fn merge_is_idempotent() {
        for flags in [
            ComplianceFlags::NONE,
            ComplianceFlags::confidential(),
            ComplianceFlags::integral(),
        ] {
            assert_eq!(flags.merge(flags), flags);
        }
    }
}
