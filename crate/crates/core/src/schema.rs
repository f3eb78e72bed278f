//! The pancreatic cyst feature record: validation of raw model output,
//! canonical serialization and field-level comparison.
//!
//! A record always carries all twenty keys. Optional fields are `None` when
//! the report does not state them; boolean fields default to `false`.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::grounding::ErrorCategory;

/// Number of keys in a feature record.
pub const FEATURE_COUNT: usize = 20;

macro_rules! categorical {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];
            pub const ALLOWED: &'static [&'static str] = &[$($text),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }

            pub fn parse(text: &str) -> Option<Self> {
                match text {
                    $($text => Some($name::$variant),)+
                    _ => None,
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

categorical!(
    /// How many pancreatic cysts the report mentions.
    CystMentions { Single => "single", Multiple => "multiple" }
);

categorical!(
    Morphology { Unilocular => "unilocular", Septated => "septated" }
);

categorical!(
    /// Pancreatic region, in anatomical order from head to tail.
    PancreasRegion { Head => "head", Neck => "neck", Body => "body", Tail => "tail" }
);

categorical!(
    GrowthDirection { Increase => "increase", Decrease => "decrease", Stable => "stable" }
);

categorical!(
    /// Communication between the cyst and the main pancreatic duct.
    DuctCommunication { Yes => "yes", No => "no", Uncertain => "uncertain" }
);

categorical!(
    DifferentialDiagnosis {
        SideBranchIpmn => "side-branch_ipmn",
        MainDuctIpmn => "main-duct_ipmn",
        MixedTypeIpmn => "mixed-type_ipmn",
        UnknownIpmn => "unknown_ipmn",
        Mcn => "mcn",
        CysticPnet => "cystic_pnet",
    }
);

impl DuctCommunication {
    /// Lossy projection for annotations that record communication as a boolean.
    /// `uncertain` has no boolean counterpart.
    pub fn as_bool(self) -> Option<bool> {
        match self {
            DuctCommunication::Yes => Some(true),
            DuctCommunication::No => Some(false),
            DuctCommunication::Uncertain => None,
        }
    }
}

/// The twenty record keys, in output order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKey {
    CystMentions,
    NumCystsMeasured,
    SizeMm,
    MorphologyType,
    Location,
    GrowthValueMm,
    TimeIntervalMonths,
    GrowthDirection,
    MainDuctCommunication,
    ThickenedWall,
    ThickenedSeptation,
    NonEnhancingMuralNodule,
    EnhancingMuralNodule,
    MainDuctCaliberSizeMm,
    MainDuctCaliberDilated,
    MainDuctCaliberAbruptChange,
    Pseudocyst,
    SerousCystadenoma,
    DifferentialDiagnosis,
    Pancreatitis,
}

/// Primitive shape of a field's value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Categorical(&'static [&'static str]),
    Count,
    /// `positive` fields reject zero and negative values.
    Decimal {
        positive: bool,
    },
    Boolean,
    CategoricalList {
        allowed: &'static [&'static str],
        max_len: Option<usize>,
    },
}

impl FeatureKey {
    pub const ALL: [FeatureKey; FEATURE_COUNT] = [
        FeatureKey::CystMentions,
        FeatureKey::NumCystsMeasured,
        FeatureKey::SizeMm,
        FeatureKey::MorphologyType,
        FeatureKey::Location,
        FeatureKey::GrowthValueMm,
        FeatureKey::TimeIntervalMonths,
        FeatureKey::GrowthDirection,
        FeatureKey::MainDuctCommunication,
        FeatureKey::ThickenedWall,
        FeatureKey::ThickenedSeptation,
        FeatureKey::NonEnhancingMuralNodule,
        FeatureKey::EnhancingMuralNodule,
        FeatureKey::MainDuctCaliberSizeMm,
        FeatureKey::MainDuctCaliberDilated,
        FeatureKey::MainDuctCaliberAbruptChange,
        FeatureKey::Pseudocyst,
        FeatureKey::SerousCystadenoma,
        FeatureKey::DifferentialDiagnosis,
        FeatureKey::Pancreatitis,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKey::CystMentions => "cyst_mentions",
            FeatureKey::NumCystsMeasured => "num_cysts_measured",
            FeatureKey::SizeMm => "size_mm",
            FeatureKey::MorphologyType => "morphology_type",
            FeatureKey::Location => "location",
            FeatureKey::GrowthValueMm => "growth_value_mm",
            FeatureKey::TimeIntervalMonths => "time_interval_months",
            FeatureKey::GrowthDirection => "growth_direction",
            FeatureKey::MainDuctCommunication => "main_duct_communication",
            FeatureKey::ThickenedWall => "thickened_wall",
            FeatureKey::ThickenedSeptation => "thickened_septation",
            FeatureKey::NonEnhancingMuralNodule => "non_enhancing_mural_nodule",
            FeatureKey::EnhancingMuralNodule => "enhancing_mural_nodule",
            FeatureKey::MainDuctCaliberSizeMm => "main_duct_caliber_size_mm",
            FeatureKey::MainDuctCaliberDilated => "main_duct_caliber_dilated",
            FeatureKey::MainDuctCaliberAbruptChange => "main_duct_caliber_abrupt_change",
            FeatureKey::Pseudocyst => "pseudocyst",
            FeatureKey::SerousCystadenoma => "serous_cystadenoma",
            FeatureKey::DifferentialDiagnosis => "differential_diagnosis",
            FeatureKey::Pancreatitis => "pancreatitis",
        }
    }

    pub fn from_key(key: &str) -> Option<Self> {
        FeatureKey::ALL.into_iter().find(|k| k.as_str() == key)
    }

    /// Human-facing label used in evaluation tables and reasoning headers.
    pub fn display_name(self) -> &'static str {
        match self {
            FeatureKey::CystMentions => "Cyst Presence",
            FeatureKey::NumCystsMeasured => "Number of Cysts Measured",
            FeatureKey::SizeMm => "Size",
            FeatureKey::MorphologyType => "Morphology",
            FeatureKey::Location => "Location",
            FeatureKey::GrowthValueMm => "Growth Magnitude",
            FeatureKey::TimeIntervalMonths => "Time Interval",
            FeatureKey::GrowthDirection => "Growth Trend",
            FeatureKey::MainDuctCommunication => "Pancreatic Duct Communication",
            FeatureKey::ThickenedWall => "Wall Thickening",
            FeatureKey::ThickenedSeptation => "Thickened Septation",
            FeatureKey::NonEnhancingMuralNodule => "Non Enhancing Mural Nodule",
            FeatureKey::EnhancingMuralNodule => "Enhancing Mural Nodule",
            FeatureKey::MainDuctCaliberSizeMm => "Pancreatic Duct Dilation",
            FeatureKey::MainDuctCaliberDilated => "Pancreatic Duct Caliber",
            FeatureKey::MainDuctCaliberAbruptChange => "Pancreatic Duct Stricture",
            FeatureKey::Pseudocyst => "Pseudocyst",
            FeatureKey::SerousCystadenoma => "Serous Cystadenoma",
            FeatureKey::DifferentialDiagnosis => "Differential Diagnosis",
            FeatureKey::Pancreatitis => "Pancreatitis",
        }
    }

    pub fn kind(self) -> FieldKind {
        match self {
            FeatureKey::CystMentions => FieldKind::Categorical(CystMentions::ALLOWED),
            FeatureKey::NumCystsMeasured | FeatureKey::TimeIntervalMonths => FieldKind::Count,
            FeatureKey::SizeMm | FeatureKey::MainDuctCaliberSizeMm => FieldKind::Decimal { positive: true },
            FeatureKey::GrowthValueMm => FieldKind::Decimal { positive: false },
            FeatureKey::MorphologyType => FieldKind::Categorical(Morphology::ALLOWED),
            FeatureKey::Location => FieldKind::CategoricalList {
                allowed: PancreasRegion::ALLOWED,
                max_len: Some(2),
            },
            FeatureKey::GrowthDirection => FieldKind::Categorical(GrowthDirection::ALLOWED),
            FeatureKey::MainDuctCommunication => FieldKind::Categorical(DuctCommunication::ALLOWED),
            FeatureKey::DifferentialDiagnosis => FieldKind::CategoricalList {
                allowed: DifferentialDiagnosis::ALLOWED,
                max_len: None,
            },
            FeatureKey::ThickenedWall
            | FeatureKey::ThickenedSeptation
            | FeatureKey::NonEnhancingMuralNodule
            | FeatureKey::EnhancingMuralNodule
            | FeatureKey::MainDuctCaliberDilated
            | FeatureKey::MainDuctCaliberAbruptChange
            | FeatureKey::Pseudocyst
            | FeatureKey::SerousCystadenoma
            | FeatureKey::Pancreatitis => FieldKind::Boolean,
        }
    }
}

impl fmt::Display for FeatureKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Structured extraction result for one radiology report.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PclFeatureRecord {
    pub cyst_mentions: Option<CystMentions>,
    pub num_cysts_measured: Option<u32>,
    pub size_mm: Option<f64>,
    pub morphology_type: Option<Morphology>,
    pub location: Option<Vec<PancreasRegion>>,
    pub growth_value_mm: Option<f64>,
    pub time_interval_months: Option<u32>,
    pub growth_direction: Option<GrowthDirection>,
    pub main_duct_communication: Option<DuctCommunication>,
    pub thickened_wall: bool,
    pub thickened_septation: bool,
    pub non_enhancing_mural_nodule: bool,
    pub enhancing_mural_nodule: bool,
    pub main_duct_caliber_size_mm: Option<f64>,
    pub main_duct_caliber_dilated: bool,
    pub main_duct_caliber_abrupt_change: bool,
    pub pseudocyst: bool,
    pub serous_cystadenoma: bool,
    pub differential_diagnosis: Option<Vec<DifferentialDiagnosis>>,
    pub pancreatitis: bool,
}

/// A single field's value, detached from its record.
#[derive(Debug, Clone, PartialEq)]
pub enum FieldValue {
    Absent,
    Bool(bool),
    Count(u32),
    Decimal(f64),
    Category(&'static str),
    List(Vec<&'static str>),
}

impl FieldValue {
    fn kind_name(&self) -> &'static str {
        match self {
            FieldValue::Absent => "absent",
            FieldValue::Bool(_) => "boolean",
            FieldValue::Count(_) => "integer",
            FieldValue::Decimal(_) => "decimal",
            FieldValue::Category(_) => "categorical",
            FieldValue::List(_) => "list",
        }
    }
}

impl PclFeatureRecord {
    pub fn get(&self, key: FeatureKey) -> FieldValue {
        fn opt<T>(v: Option<T>, f: impl FnOnce(T) -> FieldValue) -> FieldValue {
            v.map(f).unwrap_or(FieldValue::Absent)
        }
        match key {
            FeatureKey::CystMentions => opt(self.cyst_mentions, |v| FieldValue::Category(v.as_str())),
            FeatureKey::NumCystsMeasured => opt(self.num_cysts_measured, FieldValue::Count),
            FeatureKey::SizeMm => opt(self.size_mm, FieldValue::Decimal),
            FeatureKey::MorphologyType => opt(self.morphology_type, |v| FieldValue::Category(v.as_str())),
            FeatureKey::Location => opt(self.location.as_ref(), |v| {
                FieldValue::List(v.iter().map(|r| r.as_str()).collect())
            }),
            FeatureKey::GrowthValueMm => opt(self.growth_value_mm, FieldValue::Decimal),
            FeatureKey::TimeIntervalMonths => opt(self.time_interval_months, FieldValue::Count),
            FeatureKey::GrowthDirection => opt(self.growth_direction, |v| FieldValue::Category(v.as_str())),
            FeatureKey::MainDuctCommunication => {
                opt(self.main_duct_communication, |v| FieldValue::Category(v.as_str()))
            }
            FeatureKey::ThickenedWall => FieldValue::Bool(self.thickened_wall),
            FeatureKey::ThickenedSeptation => FieldValue::Bool(self.thickened_septation),
            FeatureKey::NonEnhancingMuralNodule => FieldValue::Bool(self.non_enhancing_mural_nodule),
            FeatureKey::EnhancingMuralNodule => FieldValue::Bool(self.enhancing_mural_nodule),
            FeatureKey::MainDuctCaliberSizeMm => opt(self.main_duct_caliber_size_mm, FieldValue::Decimal),
            FeatureKey::MainDuctCaliberDilated => FieldValue::Bool(self.main_duct_caliber_dilated),
            FeatureKey::MainDuctCaliberAbruptChange => FieldValue::Bool(self.main_duct_caliber_abrupt_change),
            FeatureKey::Pseudocyst => FieldValue::Bool(self.pseudocyst),
            FeatureKey::SerousCystadenoma => FieldValue::Bool(self.serous_cystadenoma),
            FeatureKey::DifferentialDiagnosis => opt(self.differential_diagnosis.as_ref(), |v| {
                FieldValue::List(v.iter().map(|d| d.as_str()).collect())
            }),
            FeatureKey::Pancreatitis => FieldValue::Bool(self.pancreatitis),
        }
    }

    /// Returns the record with list fields sorted into canonical order.
    pub fn canonicalized(mut self) -> Self {
        if let Some(loc) = self.location.as_mut() {
            loc.sort();
        }
        if let Some(dd) = self.differential_diagnosis.as_mut() {
            dd.sort();
        }
        self
    }

    /// Checks every allowed-value invariant. Records produced by
    /// [`parse_record`] always pass; hand-built records may not.
    pub fn check_invariants(&self) -> Result<(), ValidationFailure> {
        parse_value(&Value::Object(self.to_json_map())).map(|_| ())
    }

    fn to_json_map(&self) -> Map<String, Value> {
        FeatureKey::ALL
            .into_iter()
            .map(|k| (k.as_str().to_owned(), field_json(&self.get(k))))
            .collect()
    }
}

fn field_json(value: &FieldValue) -> Value {
    match value {
        FieldValue::Absent => Value::Null,
        FieldValue::Bool(b) => Value::Bool(*b),
        FieldValue::Count(n) => Value::from(*n),
        FieldValue::Decimal(x) => serde_json::Number::from_f64(*x)
            .map(Value::Number)
            .unwrap_or(Value::Null),
        FieldValue::Category(s) => Value::String((*s).to_owned()),
        FieldValue::List(items) => Value::Array(items.iter().map(|s| Value::String((*s).to_owned())).collect()),
    }
}

/// Renders a decimal with at least one fractional digit: `12` becomes `12.0`,
/// `12.25` stays `12.25`. Uses the shortest representation that parses back
/// to the same `f64`.
pub fn format_decimal(value: f64) -> String {
    let text = format!("{value}");
    if text.contains('.') {
        text
    } else {
        format!("{text}.0")
    }
}

/// Canonical JSON fragment for one field (lists sorted).
pub fn canonical_field_json(record: &PclFeatureRecord, key: FeatureKey) -> String {
    match record.get(key) {
        FieldValue::Absent => "null".to_owned(),
        FieldValue::Bool(b) => b.to_string(),
        FieldValue::Count(n) => n.to_string(),
        FieldValue::Decimal(x) => format_decimal(x),
        FieldValue::Category(s) => format!("\"{s}\""),
        FieldValue::List(mut items) => {
            sort_list(key, &mut items);
            let inner: Vec<String> = items.iter().map(|s| format!("\"{s}\"")).collect();
            format!("[{}]", inner.join(","))
        }
    }
}

// Lists sort by declaration order of their enum (anatomical for locations).
fn sort_list(key: FeatureKey, items: &mut [&'static str]) {
    let allowed = match key.kind() {
        FieldKind::CategoricalList { allowed, .. } => allowed,
        _ => return,
    };
    items.sort_by_key(|s| allowed.iter().position(|a| a == s));
}

/// Byte-stable serialization: keys in output order, lists sorted, decimals
/// with at least one fractional digit, no insignificant whitespace.
pub fn canonical_serialize(record: &PclFeatureRecord) -> String {
    let body: Vec<String> = FeatureKey::ALL
        .into_iter()
        .map(|k| format!("\"{}\":{}", k.as_str(), canonical_field_json(record, k)))
        .collect();
    format!("{{{}}}", body.join(","))
}

impl Serialize for PclFeatureRecord {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut map = serializer.serialize_map(Some(FEATURE_COUNT))?;
        for key in FeatureKey::ALL {
            let mut value = self.get(key);
            if let FieldValue::List(items) = &mut value {
                sort_list(key, items);
            }
            map.serialize_entry(key.as_str(), &field_json(&value))?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for PclFeatureRecord {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(deserializer)?;
        parse_value(&value)
            .map(|parsed| parsed.record)
            .map_err(serde::de::Error::custom)
    }
}

/// What went wrong with one field (or with the document as a whole).
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "problem", rename_all = "snake_case")]
pub enum Problem {
    NotAllowed {
        value: String,
        allowed: Vec<&'static str>,
        hint: Option<String>,
    },
    WrongKind {
        expected: &'static str,
        found: &'static str,
    },
    OutOfRange {
        value: String,
        constraint: &'static str,
    },
    TooManyEntries {
        len: usize,
        max: usize,
    },
    DuplicateEntry {
        value: String,
    },
    UnknownKey,
    NotAnObject {
        found: &'static str,
    },
    Malformed {
        message: String,
    },
    NoObjectFound,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FieldIssue {
    /// Offending key; `None` for document-level problems.
    pub field: Option<String>,
    #[serde(flatten)]
    pub problem: Problem,
}

impl FieldIssue {
    /// Review taxonomy tag for this issue, when one applies.
    pub fn error_category(&self) -> Option<ErrorCategory> {
        match self.problem {
            Problem::NotAllowed { .. }
            | Problem::WrongKind { .. }
            | Problem::OutOfRange { .. }
            | Problem::TooManyEntries { .. }
            | Problem::DuplicateEntry { .. }
            | Problem::UnknownKey => Some(ErrorCategory::InvalidValue),
            Problem::NotAnObject { .. } | Problem::Malformed { .. } | Problem::NoObjectFound => None,
        }
    }
}

impl fmt::Display for FieldIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let field = self.field.as_deref().unwrap_or("<document>");
        match &self.problem {
            Problem::NotAllowed { value, allowed, hint } => {
                write!(f, "{field}: {value:?} is not one of {allowed:?}")?;
                if let Some(hint) = hint {
                    write!(f, " ({hint})")?;
                }
                Ok(())
            }
            Problem::WrongKind { expected, found } => {
                write!(f, "{field}: expected {expected}, found {found}")
            }
            Problem::OutOfRange { value, constraint } => {
                write!(f, "{field}: {value} violates {constraint}")
            }
            Problem::TooManyEntries { len, max } => {
                write!(f, "{field}: {len} entries, at most {max} allowed")
            }
            Problem::DuplicateEntry { value } => write!(f, "{field}: duplicate entry {value:?}"),
            Problem::UnknownKey => write!(f, "{field}: unknown key"),
            Problem::NotAnObject { found } => write!(f, "expected a JSON object, found {found}"),
            Problem::Malformed { message } => write!(f, "malformed JSON: {message}"),
            Problem::NoObjectFound => write!(f, "no JSON object found in text"),
        }
    }
}

/// Raw output rejected by validation. Carries every issue found, not just the first.
#[derive(Debug, Clone, PartialEq, Error, Serialize)]
#[error("record validation failed: {}", summarize(.issues))]
pub struct ValidationFailure {
    pub issues: Vec<FieldIssue>,
}

fn summarize(issues: &[FieldIssue]) -> String {
    issues.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; ")
}

impl ValidationFailure {
    fn document(problem: Problem) -> Self {
        ValidationFailure {
            issues: vec![FieldIssue { field: None, problem }],
        }
    }
}

/// Non-fatal adjustment made while validating.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarningKind {
    /// Boolean key missing from the output; set to false.
    MissingBooleanDefaulted,
    /// Boolean key given as null; set to false.
    NullBooleanDefaulted,
    /// Empty list treated as absent.
    EmptyListAsAbsent,
    /// Duct communication given as a JSON boolean and mapped to yes/no.
    BooleanCommunicationMapped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationWarning {
    pub field: FeatureKey,
    pub kind: WarningKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedRecord {
    pub record: PclFeatureRecord,
    pub warnings: Vec<ValidationWarning>,
}

/// Byte range of the last balanced top-level `{...}` in `text`.
///
/// Braces inside JSON strings are ignored once an object has opened; text
/// outside objects is treated as prose.
pub fn last_object_span(text: &str) -> Option<(usize, usize)> {
    let mut depth = 0usize;
    let mut start = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    let mut last = None;
    for (i, c) in text.char_indices() {
        if depth > 0 && in_string {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            }
            continue;
        }
        match c {
            '{' => {
                if depth == 0 {
                    start = i;
                }
                depth += 1;
            }
            '}' if depth > 0 => {
                depth -= 1;
                if depth == 0 {
                    last = Some((start, i + 1));
                }
            }
            '"' if depth > 0 => in_string = true,
            _ => {}
        }
    }
    last
}

/// Validates model output. `raw_text` may wrap the JSON object in prose; the
/// last balanced top-level object is taken as the document.
pub fn parse_record(raw_text: &str) -> Result<ParsedRecord, ValidationFailure> {
    let (start, end) = last_object_span(raw_text).ok_or_else(|| ValidationFailure::document(Problem::NoObjectFound))?;
    let value: Value = serde_json::from_str(&raw_text[start..end])
        .map_err(|e| ValidationFailure::document(Problem::Malformed { message: e.to_string() }))?;
    parse_value(&value)
}

fn json_kind(value: &Value) -> &'static str {
    match value {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

/// Validates an already-parsed JSON value.
pub fn parse_value(value: &Value) -> Result<ParsedRecord, ValidationFailure> {
    let object = match value {
        Value::Object(map) => map,
        other => {
            return Err(ValidationFailure::document(Problem::NotAnObject {
                found: json_kind(other),
            }))
        }
    };

    let mut issues = Vec::new();
    let mut warnings = Vec::new();

    for key in object.keys() {
        if FeatureKey::from_key(key).is_none() {
            issues.push(FieldIssue {
                field: Some(key.clone()),
                problem: Problem::UnknownKey,
            });
        }
    }

    let mut builder = RecordBuilder::default();
    for key in FeatureKey::ALL {
        match check_field(key, object.get(key.as_str())) {
            Ok((value, warning)) => {
                if let Some(kind) = warning {
                    warnings.push(ValidationWarning { field: key, kind });
                }
                builder.set(key, value);
            }
            Err(problem) => issues.push(FieldIssue {
                field: Some(key.as_str().to_owned()),
                problem,
            }),
        }
    }

    if issues.is_empty() {
        Ok(ParsedRecord {
            record: builder.record.canonicalized(),
            warnings,
        })
    } else {
        Err(ValidationFailure { issues })
    }
}

enum Checked {
    Absent,
    Bool(bool),
    Count(u32),
    Decimal(f64),
    Category(String),
    List(Vec<String>),
}

fn check_field(key: FeatureKey, raw: Option<&Value>) -> Result<(Checked, Option<WarningKind>), Problem> {
    match key.kind() {
        FieldKind::Boolean => match raw {
            None => Ok((Checked::Bool(false), Some(WarningKind::MissingBooleanDefaulted))),
            Some(Value::Null) => Ok((Checked::Bool(false), Some(WarningKind::NullBooleanDefaulted))),
            Some(Value::Bool(b)) => Ok((Checked::Bool(*b), None)),
            Some(other) => Err(Problem::WrongKind {
                expected: "boolean",
                found: json_kind(other),
            }),
        },
        FieldKind::Count => match raw {
            None | Some(Value::Null) => Ok((Checked::Absent, None)),
            Some(Value::Number(n)) => {
                let x = n.as_f64().unwrap_or(f64::NAN);
                if x.fract() != 0.0 || !x.is_finite() {
                    Err(Problem::WrongKind {
                        expected: "integer",
                        found: "number",
                    })
                } else if x < 0.0 || x > f64::from(u32::MAX) {
                    Err(Problem::OutOfRange {
                        value: n.to_string(),
                        constraint: ">= 0",
                    })
                } else {
                    Ok((Checked::Count(x as u32), None))
                }
            }
            Some(other) => Err(Problem::WrongKind {
                expected: "integer",
                found: json_kind(other),
            }),
        },
        FieldKind::Decimal { positive } => match raw {
            None | Some(Value::Null) => Ok((Checked::Absent, None)),
            Some(Value::Number(n)) => {
                let x = n.as_f64().unwrap_or(f64::NAN);
                if !x.is_finite() {
                    Err(Problem::OutOfRange {
                        value: n.to_string(),
                        constraint: "finite",
                    })
                } else if positive && x <= 0.0 {
                    Err(Problem::OutOfRange {
                        value: n.to_string(),
                        constraint: "> 0",
                    })
                } else {
                    Ok((Checked::Decimal(x), None))
                }
            }
            Some(other) => Err(Problem::WrongKind {
                expected: "number",
                found: json_kind(other),
            }),
        },
        FieldKind::Categorical(allowed) => match raw {
            None | Some(Value::Null) => Ok((Checked::Absent, None)),
            Some(Value::String(s)) if allowed.contains(&s.as_str()) => Ok((Checked::Category(s.clone()), None)),
            Some(Value::String(s)) => Err(Problem::NotAllowed {
                value: s.clone(),
                allowed: allowed.to_vec(),
                hint: hint_for(key, s),
            }),
            Some(Value::Bool(b)) if key == FeatureKey::MainDuctCommunication => {
                let mapped = if *b { "yes" } else { "no" };
                Ok((
                    Checked::Category(mapped.to_owned()),
                    Some(WarningKind::BooleanCommunicationMapped),
                ))
            }
            Some(other) => Err(Problem::WrongKind {
                expected: "string",
                found: json_kind(other),
            }),
        },
        FieldKind::CategoricalList { allowed, max_len } => match raw {
            None | Some(Value::Null) => Ok((Checked::Absent, None)),
            Some(Value::Array(items)) if items.is_empty() => {
                Ok((Checked::Absent, Some(WarningKind::EmptyListAsAbsent)))
            }
            Some(Value::Array(items)) => {
                let mut out: Vec<String> = Vec::with_capacity(items.len());
                for item in items {
                    let s = match item {
                        Value::String(s) => s,
                        other => {
                            return Err(Problem::WrongKind {
                                expected: "string list",
                                found: json_kind(other),
                            })
                        }
                    };
                    if !allowed.contains(&s.as_str()) {
                        return Err(Problem::NotAllowed {
                            value: s.clone(),
                            allowed: allowed.to_vec(),
                            hint: hint_for(key, s),
                        });
                    }
                    if out.contains(s) {
                        return Err(Problem::DuplicateEntry { value: s.clone() });
                    }
                    out.push(s.clone());
                }
                if let Some(max) = max_len {
                    if out.len() > max {
                        return Err(Problem::TooManyEntries { len: out.len(), max });
                    }
                }
                Ok((Checked::List(out), None))
            }
            Some(other) => Err(Problem::WrongKind {
                expected: "string list",
                found: json_kind(other),
            }),
        },
    }
}

/// Suggests the allowed value an out-of-set string most likely meant.
fn hint_for(key: FeatureKey, value: &str) -> Option<String> {
    let norm = value.trim().to_lowercase().replace(['-', ' '], "_");
    let synonym = match key {
        FeatureKey::Location => match norm.as_str() {
            "uncinate" | "uncinate_process" | "uncinata_process" | "uncinate_head" => Some("head"),
            "distal_tail" | "proximal_tail" => Some("tail"),
            "proximal_body" | "distal_body" => Some("body"),
            _ => None,
        },
        FeatureKey::DifferentialDiagnosis => match norm.as_str() {
            "ipmn" => Some("unknown_ipmn"),
            "branch_duct_ipmn" | "bd_ipmn" | "sb_ipmn" => Some("side-branch_ipmn"),
            "md_ipmn" => Some("main-duct_ipmn"),
            "mucinous_cystic_neoplasm" => Some("mcn"),
            "pnet" => Some("cystic_pnet"),
            _ => None,
        },
        FeatureKey::MainDuctCommunication => match norm.as_str() {
            "present" | "true" => Some("yes"),
            "absent" | "false" => Some("no"),
            "indeterminate" | "possible" => Some("uncertain"),
            _ => None,
        },
        FeatureKey::MorphologyType => match norm.as_str() {
            "multilocular" | "multiloculated" | "complex" | "bilobed" | "multicystic" => Some("septated"),
            "simple" | "ovoid" => Some("unilocular"),
            _ => None,
        },
        _ => None,
    };
    if let Some(target) = synonym {
        return Some(format!("map to \"{target}\""));
    }
    let allowed: &[&str] = match key.kind() {
        FieldKind::Categorical(a) => a,
        FieldKind::CategoricalList { allowed, .. } => allowed,
        _ => return None,
    };
    allowed
        .iter()
        .find(|a| a.replace('-', "_") == norm)
        .map(|a| format!("did you mean \"{a}\"?"))
}

#[derive(Default)]
struct RecordBuilder {
    record: PclFeatureRecord,
}

impl RecordBuilder {
    // Values reaching here were checked against the allowed sets.
    fn set(&mut self, key: FeatureKey, value: Checked) {
        let r = &mut self.record;
        let cat = |v: &Checked| match v {
            Checked::Category(s) => Some(s.clone()),
            _ => None,
        };
        let list = |v: &Checked| match v {
            Checked::List(items) => Some(items.clone()),
            _ => None,
        };
        let boolean = matches!(value, Checked::Bool(true));
        let count = match value {
            Checked::Count(n) => Some(n),
            _ => None,
        };
        let decimal = match value {
            Checked::Decimal(x) => Some(x),
            _ => None,
        };
        match key {
            FeatureKey::CystMentions => r.cyst_mentions = cat(&value).and_then(|s| CystMentions::parse(&s)),
            FeatureKey::NumCystsMeasured => r.num_cysts_measured = count,
            FeatureKey::SizeMm => r.size_mm = decimal,
            FeatureKey::MorphologyType => r.morphology_type = cat(&value).and_then(|s| Morphology::parse(&s)),
            FeatureKey::Location => {
                r.location = list(&value).map(|items| items.iter().filter_map(|s| PancreasRegion::parse(s)).collect())
            }
            FeatureKey::GrowthValueMm => r.growth_value_mm = decimal,
            FeatureKey::TimeIntervalMonths => r.time_interval_months = count,
            FeatureKey::GrowthDirection => r.growth_direction = cat(&value).and_then(|s| GrowthDirection::parse(&s)),
            FeatureKey::MainDuctCommunication => {
                r.main_duct_communication = cat(&value).and_then(|s| DuctCommunication::parse(&s))
            }
            FeatureKey::ThickenedWall => r.thickened_wall = boolean,
            FeatureKey::ThickenedSeptation => r.thickened_septation = boolean,
            FeatureKey::NonEnhancingMuralNodule => r.non_enhancing_mural_nodule = boolean,
            FeatureKey::EnhancingMuralNodule => r.enhancing_mural_nodule = boolean,
            FeatureKey::MainDuctCaliberSizeMm => r.main_duct_caliber_size_mm = decimal,
            FeatureKey::MainDuctCaliberDilated => r.main_duct_caliber_dilated = boolean,
            FeatureKey::MainDuctCaliberAbruptChange => r.main_duct_caliber_abrupt_change = boolean,
            FeatureKey::Pseudocyst => r.pseudocyst = boolean,
            FeatureKey::SerousCystadenoma => r.serous_cystadenoma = boolean,
            FeatureKey::DifferentialDiagnosis => {
                r.differential_diagnosis =
                    list(&value).map(|items| items.iter().filter_map(|s| DifferentialDiagnosis::parse(s)).collect())
            }
            FeatureKey::Pancreatitis => r.pancreatitis = boolean,
        }
    }
}

/// How duct communication is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommunicationScoring {
    /// Compare yes/no/uncertain directly.
    #[default]
    ThreeValued,
    /// Project to booleans first (yes→true, no→false, uncertain→absent).
    Boolean,
}

/// Equality semantics used by exact-match scoring.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldComparisonPolicy {
    /// Absolute tolerance for millimeter-valued fields. Must be >= 0.
    pub float_tolerance_mm: f64,
    pub list_order_sensitive: bool,
    pub communication: CommunicationScoring,
}

impl Default for FieldComparisonPolicy {
    fn default() -> Self {
        FieldComparisonPolicy {
            float_tolerance_mm: 0.1,
            list_order_sensitive: false,
            communication: CommunicationScoring::ThreeValued,
        }
    }
}

impl FieldComparisonPolicy {
    pub fn validate(&self) -> Result<(), SchemaError> {
        if self.float_tolerance_mm >= 0.0 {
            Ok(())
        } else {
            Err(SchemaError::NegativeTolerance(self.float_tolerance_mm))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SchemaError {
    #[error("cannot compare a {left} value with a {right} value")]
    KindMismatch { left: &'static str, right: &'static str },
    #[error("float tolerance must be non-negative, got {0}")]
    NegativeTolerance(f64),
}

// Absorbs the binary representation error of one-decimal millimeter values,
// so that a difference of exactly the tolerance compares equal.
const TOLERANCE_SLACK: f64 = 1e-9;

/// Compares two values of the same field.
pub fn fields_equal(a: &FieldValue, b: &FieldValue, policy: &FieldComparisonPolicy) -> Result<bool, SchemaError> {
    use FieldValue::*;
    Ok(match (a, b) {
        (Absent, Absent) => true,
        (Absent, _) | (_, Absent) => false,
        (Bool(x), Bool(y)) => x == y,
        (Count(x), Count(y)) => x == y,
        (Decimal(x), Decimal(y)) => (x - y).abs() <= policy.float_tolerance_mm + TOLERANCE_SLACK,
        (Category(x), Category(y)) => x == y,
        (List(x), List(y)) => {
            if policy.list_order_sensitive {
                x == y
            } else {
                let mut x = x.clone();
                let mut y = y.clone();
                x.sort_unstable();
                x.dedup();
                y.sort_unstable();
                y.dedup();
                x == y
            }
        }
        (left, right) => {
            return Err(SchemaError::KindMismatch {
                left: left.kind_name(),
                right: right.kind_name(),
            })
        }
    })
}

/// Compares one field of two records, applying the communication projection
/// the policy asks for.
pub fn record_field_equal(
    key: FeatureKey,
    a: &PclFeatureRecord,
    b: &PclFeatureRecord,
    policy: &FieldComparisonPolicy,
) -> bool {
    if key == FeatureKey::MainDuctCommunication && policy.communication == CommunicationScoring::Boolean {
        let project = |r: &PclFeatureRecord| r.main_duct_communication.and_then(|c| c.as_bool());
        return project(a) == project(b);
    }
    // Both values come from the same key, so kinds always agree.
    fields_equal(&a.get(key), &b.get(key), policy).unwrap_or(false)
}
