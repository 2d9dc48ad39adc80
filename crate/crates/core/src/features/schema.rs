use std::fmt;

use thiserror::Error;

/// Version of the feature layouts below; bumped whenever a name, order or
/// type changes.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelKind {
    LU,
    FI,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::LU => "LU",
            ModelKind::FI => "FI",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "LU" | "lu" => Some(ModelKind::LU),
            "FI" | "fi" => Some(ModelKind::FI),
            _ => None,
        }
    }

    pub fn features(self) -> &'static [(&'static str, FeatureType)] {
        match self {
            ModelKind::LU => &LU_FEATURES,
            ModelKind::FI => &FI_FEATURES,
        }
    }

    pub fn feature_names(self) -> Vec<&'static str> {
        self.features().iter().map(|(n, _)| *n).collect()
    }

    pub fn len(self) -> usize {
        self.features().len()
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureType {
    Int,
    Bool,
    Float,
}

impl FeatureType {
    pub fn name(self) -> &'static str {
        match self {
            FeatureType::Int => "int",
            FeatureType::Bool => "bool",
            FeatureType::Float => "float",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "int" => Some(FeatureType::Int),
            "bool" => Some(FeatureType::Bool),
            "float" => Some(FeatureType::Float),
            _ => None,
        }
    }
}

use FeatureType::{Bool, Float, Int};

pub const LU_FEATURES: [(&str, FeatureType); 30] = [
    ("PartialOptSizeThreshold", Int),
    ("AllowRemainder", Bool),
    ("UnrollRemainder", Bool),
    ("AllowExpensiveTripCount", Bool),
    ("Force", Bool),
    ("TripCount", Int),
    ("MaxTripCount", Int),
    ("Size", Int),
    ("InitialIVValueInt", Int),
    ("FinalIVValueInt", Int),
    ("StepValueInt", Int),
    ("NumPartitions", Int),
    ("IndVarSetSize", Int),
    ("AvgStoreSetSize", Float),
    ("AvgNumInsts", Float),
    ("NumLoadInstPerLoopNest", Int),
    ("NumStoreInstPerLoopNest", Int),
    ("TotLoopNestInstCount", Int),
    ("AvgNumLoadInstPerLoopNest", Float),
    ("AvgNumStoreInstPerLoopNest", Float),
    ("NumLoadInstPerLoop", Int),
    ("NumStoreInstPerLoop", Int),
    ("TotLoopInstCount", Int),
    ("AvgNumLoadInstPerLoop", Float),
    ("AvgNumStoreInstPerLoop", Float),
    ("IsInnerMostLoop", Bool),
    ("IsOuterMostLoop", Bool),
    ("MaxLoopHeight", Int),
    ("TotBlocksPerLoop", Int),
    ("IsFixedTripCount", Bool),
];

pub const FI_FEATURES: [(&str, FeatureType); 13] = [
    ("block_frequency", Float),
    ("callsite_height", Int),
    ("caller_block_count", Int),
    ("callee_block_count", Int),
    ("caller_users", Int),
    ("callee_users", Int),
    ("callee_instruction_count", Int),
    ("caller_instruction_count", Int),
    ("callsite_loop_depth", Int),
    ("callee_call_count", Int),
    ("is_callee_leaf", Bool),
    ("num_args", Int),
    ("callee_max_loop_depth", Int),
];

/// Text form of a schema: a header, then one `index name type` line per
/// feature.
pub fn schema_text(kind: ModelKind) -> String {
    let mut out = format!("schema {} {} {}\n", kind, SCHEMA_VERSION, kind.len());
    for (i, (name, ty)) in kind.features().iter().enumerate() {
        out.push_str(&format!("{i} {name} {}\n", ty.name()));
    }
    out
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SchemaError {
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("schema version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("schema does not match the built-in {0} layout")]
    Mismatch(ModelKind),
}

/// Parse a schema file and check it against the built-in layout.
pub fn parse_schema(text: &str) -> Result<ModelKind, SchemaError> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
    let bad = |line: usize, msg: &str| SchemaError::Malformed {
        line: line + 1,
        msg: msg.to_string(),
    };
    let (n, header) = lines.next().ok_or_else(|| bad(0, "empty schema"))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    let [tag, kind, version, count] = parts[..] else {
        return Err(bad(n, "expected `schema <kind> <version> <count>`"));
    };
    if tag != "schema" {
        return Err(bad(n, "expected `schema` header"));
    }
    let kind = ModelKind::parse(kind).ok_or_else(|| bad(n, "unknown model kind"))?;
    let version: u32 = version.parse().map_err(|_| bad(n, "bad version"))?;
    if version != SCHEMA_VERSION {
        return Err(SchemaError::Version {
            found: version,
            expected: SCHEMA_VERSION,
        });
    }
    let count: usize = count.parse().map_err(|_| bad(n, "bad count"))?;
    let mut entries = Vec::new();
    for (n, line) in lines {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [idx, name, ty] = parts[..] else {
            return Err(bad(n, "expected `index name type`"));
        };
        let idx: usize = idx.parse().map_err(|_| bad(n, "bad index"))?;
        let ty = FeatureType::parse(ty).ok_or_else(|| bad(n, "unknown type"))?;
        entries.push((idx, name.to_string(), ty));
    }
    let expected = kind.features();
    let matches = count == expected.len()
        && entries.len() == expected.len()
        && entries
            .iter()
            .zip(expected)
            .enumerate()
            .all(|(i, ((idx, name, ty), (en, et)))| *idx == i && name == en && ty == et);
    if matches {
        Ok(kind)
    } else {
        Err(SchemaError::Mismatch(kind))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_round_trips() {
        for kind in [ModelKind::LU, ModelKind::FI] {
            assert_eq!(parse_schema(&schema_text(kind)), Ok(kind));
        }
        assert_eq!(ModelKind::LU.len(), 30);
        assert_eq!(ModelKind::FI.len(), 13);
        let bumped = schema_text(ModelKind::LU).replacen(" 1 30", " 2 30", 1);
        assert!(matches!(parse_schema(&bumped), Err(SchemaError::Version { .. })));
        let swapped = schema_text(ModelKind::FI).replace("1 callsite_height", "1 height");
        assert_eq!(parse_schema(&swapped), Err(SchemaError::Mismatch(ModelKind::FI)));
    }

    #[test]
    fn names_are_unique() {
        for kind in [ModelKind::LU, ModelKind::FI] {
            let names: std::collections::BTreeSet<_> = kind.feature_names().into_iter().collect();
            assert_eq!(names.len(), kind.len());
        }
    }
}
