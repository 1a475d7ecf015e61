//! World States Manager: the structured text environment a simulation runs
//! against.
//!
//! A [`WorldState`] holds three groups of slots: entity fields, relationships
//! between entities, and environment settings. Every slot is addressed by a
//! [`StatePath`]:
//!
//! - `entity:<id>.<field-or-property>` (fields are `type`, `entity_class`,
//!   `position`, `size`; anything else names a property)
//! - `rel:<kind>:<subject>:<object>`
//! - `env:<name>`
//!
//! Values carry units. Lengths are SI meters (`"m"`); unitless quantities use
//! `"dimensionless"`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::de::{self, Deserializer};
use serde::ser::{SerializeMap, Serializer};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const METERS: &str = "m";
pub const DIMENSIONLESS: &str = "dimensionless";

// ---------------------------------------------------------------------------
// Values
// ---------------------------------------------------------------------------

/// A single state value.
///
/// JSON forms: `true`, `"text"`, `{"value": 0.08, "unit": "m"}`,
/// `{"vec": [0, 0, 0], "unit": "m"}`. A bare JSON number is read as a
/// dimensionless quantity.
#[derive(Debug, Clone)]
pub enum Value {
    Bool(bool),
    Number { value: f64, unit: String },
    Text(String),
    Vector { xyz: [f64; 3], unit: String },
}

/// The type of a [`Value`], ignoring its payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ValueKind {
    Bool,
    Number,
    Text,
    Vector,
}

impl fmt::Display for ValueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ValueKind::Bool => "boolean",
            ValueKind::Number => "number",
            ValueKind::Text => "string",
            ValueKind::Vector => "3-vector",
        })
    }
}

impl Value {
    pub fn meters(value: f64) -> Self {
        Value::Number { value, unit: METERS.to_string() }
    }

    pub fn scalar(value: f64) -> Self {
        Value::Number { value, unit: DIMENSIONLESS.to_string() }
    }

    pub fn position(xyz: [f64; 3]) -> Self {
        Value::Vector { xyz, unit: METERS.to_string() }
    }

    pub fn text(s: impl Into<String>) -> Self {
        Value::Text(s.into())
    }

    pub fn kind(&self) -> ValueKind {
        match self {
            Value::Bool(_) => ValueKind::Bool,
            Value::Number { .. } => ValueKind::Number,
            Value::Text(_) => ValueKind::Text,
            Value::Vector { .. } => ValueKind::Vector,
        }
    }

    pub fn unit(&self) -> Option<&str> {
        match self {
            Value::Number { unit, .. } | Value::Vector { unit, .. } => Some(unit),
            _ => None,
        }
    }

    /// Numbers and vectors are numeric; they route condition checks through
    /// the code sandbox.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Value::Number { .. } | Value::Vector { .. })
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Value::Bool(b) => Some(*b),
            _ => None,
        }
    }

    /// Same kind and, for numeric values, the same unit.
    pub fn same_type(&self, other: &Value) -> bool {
        self.kind() == other.kind() && self.unit() == other.unit()
    }

    /// Short type description used in error messages, e.g. `number [m]`.
    pub fn type_name(&self) -> String {
        match self.unit() {
            Some(u) => format!("{} [{}]", self.kind(), u),
            None => self.kind().to_string(),
        }
    }
}

impl PartialEq for Value {
    // Bitwise float comparison: a slot either holds the identical value or it changed.
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Value::Bool(a), Value::Bool(b)) => a == b,
            (Value::Text(a), Value::Text(b)) => a == b,
            (Value::Number { value: a, unit: ua }, Value::Number { value: b, unit: ub }) => {
                a.to_bits() == b.to_bits() && ua == ub
            }
            (Value::Vector { xyz: a, unit: ua }, Value::Vector { xyz: b, unit: ub }) => {
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()) && ua == ub
            }
            _ => false,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Bool(b) => write!(f, "{b}"),
            Value::Text(s) => write!(f, "{s:?}"),
            Value::Number { value, unit } if unit == DIMENSIONLESS => write!(f, "{value}"),
            Value::Number { value, unit } => write!(f, "{value} {unit}"),
            Value::Vector { xyz, unit } => {
                write!(f, "({}, {}, {})", xyz[0], xyz[1], xyz[2])?;
                if unit != DIMENSIONLESS {
                    write!(f, " {unit}")?;
                }
                Ok(())
            }
        }
    }
}

impl Serialize for Value {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Value::Bool(b) => serializer.serialize_bool(*b),
            Value::Text(s) => serializer.serialize_str(s),
            Value::Number { value, unit } => {
                let mut map = serializer.serialize_map(Some(2))?;
                map.serialize_entry("unit", unit)?;
                map.serialize_entry("value", value)?;
                map.end()
            }
            Value::Vector { xyz, unit } => {
                let mut map = serializer.serialize_map(Some(2))?;
                map.serialize_entry("unit", unit)?;
                map.serialize_entry("vec", xyz)?;
                map.end()
            }
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawValue {
    Bool(bool),
    Bare(f64),
    Text(String),
    Number { value: f64, unit: String },
    Vector { vec: [f64; 3], unit: String },
}

impl<'de> Deserialize<'de> for Value {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = RawValue::deserialize(deserializer).map_err(|_| {
            de::Error::custom(
                "expected a boolean, a string, {\"value\": <number>, \"unit\": <string>} \
                 or {\"vec\": [x, y, z], \"unit\": <string>}",
            )
        })?;
        let value = match raw {
            RawValue::Bool(b) => Value::Bool(b),
            RawValue::Bare(v) => Value::scalar(v),
            RawValue::Text(s) => Value::Text(s),
            RawValue::Number { value, unit } => Value::Number { value, unit },
            RawValue::Vector { vec, unit } => Value::Vector { xyz: vec, unit },
        };
        let finite = match &value {
            Value::Number { value, .. } => value.is_finite(),
            Value::Vector { xyz, .. } => xyz.iter().all(|c| c.is_finite()),
            _ => true,
        };
        if !finite {
            return Err(de::Error::custom("numeric values must be finite"));
        }
        if matches!(value.unit(), Some("")) {
            return Err(de::Error::custom("unit must not be empty (use \"dimensionless\")"));
        }
        Ok(value)
    }
}

// ---------------------------------------------------------------------------
// Paths
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EntityField {
    Type,
    Class,
    Position,
    Size,
    Property(String),
}

impl EntityField {
    fn parse(s: &str) -> Self {
        match s {
            "type" => EntityField::Type,
            "entity_class" => EntityField::Class,
            "position" => EntityField::Position,
            "size" => EntityField::Size,
            other => EntityField::Property(other.to_string()),
        }
    }

    fn as_str(&self) -> &str {
        match self {
            EntityField::Type => "type",
            EntityField::Class => "entity_class",
            EntityField::Position => "position",
            EntityField::Size => "size",
            EntityField::Property(p) => p,
        }
    }
}

/// Address of one slot in a [`WorldState`].
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StatePath {
    Entity { id: String, field: EntityField },
    Relation { kind: String, subject: String, object: String },
    Env(String),
}

impl StatePath {
    pub fn entity(id: &str, field: &str) -> Self {
        StatePath::Entity { id: id.to_string(), field: EntityField::parse(field) }
    }

    pub fn relation(kind: &str, subject: &str, object: &str) -> Self {
        StatePath::Relation {
            kind: kind.to_string(),
            subject: subject.to_string(),
            object: object.to_string(),
        }
    }

    pub fn env(name: &str) -> Self {
        StatePath::Env(name.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid state path `{path}`: {reason}")]
pub struct PathSyntaxError {
    pub path: String,
    pub reason: &'static str,
}

impl FromStr for StatePath {
    type Err = PathSyntaxError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = |reason| PathSyntaxError { path: s.to_string(), reason };
        let s_trim = s.trim();
        if let Some(rest) = s_trim.strip_prefix("entity:") {
            let (id, field) = rest.split_once('.').ok_or_else(|| err("expected entity:<id>.<field>"))?;
            if id.is_empty() || field.is_empty() {
                return Err(err("entity id and field must be non-empty"));
            }
            Ok(StatePath::Entity { id: id.to_string(), field: EntityField::parse(field) })
        } else if let Some(rest) = s_trim.strip_prefix("rel:") {
            let parts: Vec<&str> = rest.split(':').collect();
            match parts.as_slice() {
                [kind, subject, object] if !kind.is_empty() && !subject.is_empty() && !object.is_empty() => {
                    Ok(StatePath::relation(kind, subject, object))
                }
                _ => Err(err("expected rel:<kind>:<subject>:<object>")),
            }
        } else if let Some(name) = s_trim.strip_prefix("env:") {
            if name.is_empty() {
                return Err(err("environment name must be non-empty"));
            }
            Ok(StatePath::Env(name.to_string()))
        } else {
            Err(err("path must start with `entity:`, `rel:` or `env:`"))
        }
    }
}

impl fmt::Display for StatePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StatePath::Entity { id, field } => write!(f, "entity:{id}.{}", field.as_str()),
            StatePath::Relation { kind, subject, object } => write!(f, "rel:{kind}:{subject}:{object}"),
            StatePath::Env(name) => write!(f, "env:{name}"),
        }
    }
}

impl Serialize for StatePath {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for StatePath {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(de::Error::custom)
    }
}

// ---------------------------------------------------------------------------
// Entities and relationships
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityClass {
    Robot,
    Object,
}

impl EntityClass {
    pub fn as_str(self) -> &'static str {
        match self {
            EntityClass::Robot => "robot",
            EntityClass::Object => "object",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub entity_class: EntityClass,
    #[serde(rename = "type")]
    pub kind: String,
    /// World-frame position in meters.
    pub position: [f64; 3],
    /// Characteristic physical dimension in meters.
    pub size: f64,
    #[serde(default)]
    pub properties: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Relationship {
    pub kind: String,
    pub subject: String,
    pub object: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<Value>,
}

const RESERVED_FIELDS: [&str; 5] = ["id", "type", "entity_class", "position", "size"];

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

/// Which part of a [`StatePath`] failed to resolve.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Missing {
    Entity(String),
    Property { entity: String, property: String },
    Relationship,
    Environment(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StateError {
    #[error("path not found `{path}`: {}", describe_missing(.missing))]
    PathNotFound { path: String, missing: Missing },
    #[error("type mismatch at `{path}`: slot holds {expected}, got {found}")]
    TypeMismatch { path: String, expected: String, found: String },
    #[error("`{path}` is read-only")]
    ReadOnly { path: String },
    #[error("cannot create `{path}`: {reason}")]
    NotCreatable { path: String, reason: String },
    #[error("invalid value for `{path}`: {reason}")]
    InvalidValue { path: String, reason: String },
    #[error("inconsistent world state: {0}")]
    Integrity(String),
}

fn describe_missing(m: &Missing) -> String {
    match m {
        Missing::Entity(id) => format!("no entity with id `{id}`"),
        Missing::Property { entity, property } => {
            format!("entity `{entity}` has no property `{property}`")
        }
        Missing::Relationship => "no such relationship".to_string(),
        Missing::Environment(name) => format!("no environment setting `{name}`"),
    }
}

// ---------------------------------------------------------------------------
// World state
// ---------------------------------------------------------------------------

type RelKey = (String, String, String);

/// The scene: entities, relationships and environment settings.
///
/// Entities are reference counted so cloning a state (for snapshots or
/// atomic plan application) shares untouched entities.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WorldState {
    entities: BTreeMap<String, Arc<Entity>>,
    relationships: BTreeMap<RelKey, Option<Value>>,
    environment: BTreeMap<String, Value>,
}

#[derive(Serialize, Deserialize)]
struct WorldStateDoc {
    entities: BTreeMap<String, Entity>,
    #[serde(default)]
    relationships: Vec<Relationship>,
    #[serde(default)]
    environment: BTreeMap<String, Value>,
}

impl Serialize for WorldState {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let doc = WorldStateDoc {
            entities: self.entities.iter().map(|(k, v)| (k.clone(), Entity::clone(v))).collect(),
            relationships: self.relationships().collect(),
            environment: self.environment.clone(),
        };
        doc.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for WorldState {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let doc = WorldStateDoc::deserialize(deserializer)?;
        WorldState::from_parts(doc.entities, doc.relationships, doc.environment)
            .map_err(de::Error::custom)
    }
}

fn check_id(id: &str) -> Result<(), StateError> {
    if id.is_empty() || id.contains(['.', ':']) || id.chars().any(char::is_whitespace) {
        return Err(StateError::Integrity(format!(
            "entity id `{id}` must be non-empty and free of '.', ':' and whitespace"
        )));
    }
    Ok(())
}

fn check_entity(id: &str, e: &Entity) -> Result<(), StateError> {
    check_id(id)?;
    if !(e.size.is_finite() && e.size > 0.0) {
        return Err(StateError::Integrity(format!("entity `{id}` size must be positive, got {}", e.size)));
    }
    if !e.position.iter().all(|c| c.is_finite()) {
        return Err(StateError::Integrity(format!("entity `{id}` position must be finite")));
    }
    for name in e.properties.keys() {
        if name.trim().is_empty() {
            return Err(StateError::Integrity(format!("entity `{id}` has an empty property name")));
        }
        if RESERVED_FIELDS.contains(&name.as_str()) {
            return Err(StateError::Integrity(format!(
                "entity `{id}` property `{name}` shadows a built-in field"
            )));
        }
    }
    Ok(())
}

impl WorldState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a state, enforcing every invariant: valid ids, positive sizes,
    /// referential integrity and one relationship per `(kind, subject, object)`.
    pub fn from_parts(
        entities: BTreeMap<String, Entity>,
        relationships: Vec<Relationship>,
        environment: BTreeMap<String, Value>,
    ) -> Result<Self, StateError> {
        let mut state = WorldState::new();
        for (id, entity) in entities {
            state.add_entity(id, entity)?;
        }
        for rel in relationships {
            state.add_relationship(rel)?;
        }
        for name in environment.keys() {
            if name.trim().is_empty() {
                return Err(StateError::Integrity("empty environment name".to_string()));
            }
        }
        state.environment = environment;
        Ok(state)
    }

    pub fn add_entity(&mut self, id: impl Into<String>, entity: Entity) -> Result<(), StateError> {
        let id = id.into();
        check_entity(&id, &entity)?;
        if self.entities.contains_key(&id) {
            return Err(StateError::Integrity(format!("duplicate entity id `{id}`")));
        }
        self.entities.insert(id, Arc::new(entity));
        Ok(())
    }

    pub fn add_relationship(&mut self, rel: Relationship) -> Result<(), StateError> {
        self.check_relation_endpoints(&rel.kind, &rel.subject, &rel.object)?;
        let key = (rel.kind, rel.subject, rel.object);
        if self.relationships.contains_key(&key) {
            return Err(StateError::Integrity(format!(
                "duplicate relationship {}:{}:{}",
                key.0, key.1, key.2
            )));
        }
        self.relationships.insert(key, rel.value);
        Ok(())
    }

    fn check_relation_endpoints(&self, kind: &str, subject: &str, object: &str) -> Result<(), StateError> {
        if kind.is_empty() || kind.contains(':') {
            return Err(StateError::Integrity(format!("invalid relationship kind `{kind}`")));
        }
        if subject == object {
            return Err(StateError::Integrity(format!(
                "relationship `{kind}` relates `{subject}` to itself"
            )));
        }
        for id in [subject, object] {
            if !self.entities.contains_key(id) {
                return Err(StateError::Integrity(format!(
                    "relationship `{kind}` references unknown entity `{id}`"
                )));
            }
        }
        Ok(())
    }

    pub fn entity(&self, id: &str) -> Option<&Entity> {
        self.entities.get(id).map(|e| e.as_ref())
    }

    pub fn entities(&self) -> impl Iterator<Item = (&str, &Entity)> {
        self.entities.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn relationships(&self) -> impl Iterator<Item = Relationship> + '_ {
        self.relationships.iter().map(|((kind, subject, object), value)| Relationship {
            kind: kind.clone(),
            subject: subject.clone(),
            object: object.clone(),
            value: value.clone(),
        })
    }

    pub fn environment(&self) -> &BTreeMap<String, Value> {
        &self.environment
    }

    /// Reads one slot without mutating anything.
    ///
    /// A relationship stored without a value reads as `true` (it holds).
    pub fn query(&self, path: &StatePath) -> Result<Value, StateError> {
        let not_found = |missing| StateError::PathNotFound { path: path.to_string(), missing };
        match path {
            StatePath::Entity { id, field } => {
                let e = self.entities.get(id).ok_or_else(|| not_found(Missing::Entity(id.clone())))?;
                Ok(match field {
                    EntityField::Type => Value::Text(e.kind.clone()),
                    EntityField::Class => Value::Text(e.entity_class.as_str().to_string()),
                    EntityField::Position => Value::position(e.position),
                    EntityField::Size => Value::meters(e.size),
                    EntityField::Property(p) => e.properties.get(p).cloned().ok_or_else(|| {
                        not_found(Missing::Property { entity: id.clone(), property: p.clone() })
                    })?,
                })
            }
            StatePath::Relation { kind, subject, object } => {
                let key = (kind.clone(), subject.clone(), object.clone());
                match self.relationships.get(&key) {
                    Some(Some(v)) => Ok(v.clone()),
                    Some(None) => Ok(Value::Bool(true)),
                    None => Err(not_found(Missing::Relationship)),
                }
            }
            StatePath::Env(name) => self
                .environment
                .get(name)
                .cloned()
                .ok_or_else(|| not_found(Missing::Environment(name.clone()))),
        }
    }

    pub fn resolves(&self, path: &StatePath) -> bool {
        self.query(path).is_ok()
    }

    /// True when the slot exists or could be created with [`WorldState::insert`].
    pub fn addressable(&self, path: &StatePath) -> bool {
        self.resolves(path) || self.creatable(path).is_ok()
    }

    fn creatable(&self, path: &StatePath) -> Result<(), StateError> {
        let reason = |r: &str| StateError::NotCreatable { path: path.to_string(), reason: r.to_string() };
        match path {
            StatePath::Entity { id, field } => {
                if !self.entities.contains_key(id) {
                    return Err(StateError::PathNotFound {
                        path: path.to_string(),
                        missing: Missing::Entity(id.clone()),
                    });
                }
                match field {
                    EntityField::Property(p) if !p.trim().is_empty() && p != "id" => Ok(()),
                    _ => Err(reason("only properties can be created on an entity")),
                }
            }
            StatePath::Relation { kind, subject, object } => self
                .check_relation_endpoints(kind, subject, object)
                .map_err(|e| reason(&e.to_string())),
            StatePath::Env(name) if !name.trim().is_empty() => Ok(()),
            StatePath::Env(_) => Err(reason("empty environment name")),
        }
    }

    /// Overwrites an existing slot in place. The new value must have the same
    /// type (and unit) as the current one.
    pub fn set(&mut self, path: &StatePath, value: Value) -> Result<(), StateError> {
        let current = self.query(path)?;
        self.write_checked(path, Some(&current), value)
    }

    /// Like [`WorldState::set`] but creates the slot when it does not exist
    /// yet (entity properties, relationships and environment settings).
    pub fn insert(&mut self, path: &StatePath, value: Value) -> Result<(), StateError> {
        match self.query(path) {
            Ok(current) => self.write_checked(path, Some(&current), value),
            Err(StateError::PathNotFound { .. }) => {
                self.creatable(path)?;
                self.write_checked(path, None, value)
            }
            Err(e) => Err(e),
        }
    }

    /// Functional form of [`WorldState::set`]: returns a new state and leaves
    /// `self` untouched.
    pub fn update(&self, path: &StatePath, value: Value) -> Result<WorldState, StateError> {
        let mut next = self.clone();
        next.set(path, value)?;
        Ok(next)
    }

    fn write_checked(&mut self, path: &StatePath, current: Option<&Value>, value: Value) -> Result<(), StateError> {
        if let Some(current) = current {
            if !current.same_type(&value) {
                return Err(StateError::TypeMismatch {
                    path: path.to_string(),
                    expected: current.type_name(),
                    found: value.type_name(),
                });
            }
        }
        let invalid = |reason: &str| StateError::InvalidValue { path: path.to_string(), reason: reason.to_string() };
        match path {
            StatePath::Entity { id, field } => {
                let entity = self.entities.get_mut(id).expect("entity checked by caller");
                match (field, value) {
                    (EntityField::Class, _) => return Err(StateError::ReadOnly { path: path.to_string() }),
                    (EntityField::Type, Value::Text(t)) => Arc::make_mut(entity).kind = t,
                    (EntityField::Position, Value::Vector { xyz, .. }) => {
                        Arc::make_mut(entity).position = xyz;
                    }
                    (EntityField::Size, Value::Number { value, .. }) => {
                        if !(value.is_finite() && value > 0.0) {
                            return Err(invalid("size must be positive"));
                        }
                        Arc::make_mut(entity).size = value;
                    }
                    (EntityField::Property(p), v) => {
                        Arc::make_mut(entity).properties.insert(p.clone(), v);
                    }
                    _ => unreachable!("type checked against current value"),
                }
            }
            StatePath::Relation { kind, subject, object } => {
                self.relationships
                    .insert((kind.clone(), subject.clone(), object.clone()), Some(value));
            }
            StatePath::Env(name) => {
                self.environment.insert(name.clone(), value);
            }
        }
        Ok(())
    }

    /// Applies several writes atomically: either all succeed or the state is
    /// left unchanged.
    pub fn apply_all<'a, I>(&mut self, writes: I) -> Result<(), StateError>
    where
        I: IntoIterator<Item = (&'a StatePath, &'a Value, bool)>,
    {
        let mut next = self.clone();
        for (path, value, create) in writes {
            if create {
                next.insert(path, value.clone())?;
            } else {
                next.set(path, value.clone())?;
            }
        }
        *self = next;
        Ok(())
    }

    /// Every slot of the state, keyed by its rendered path (sorted).
    pub fn slots(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        for (id, e) in &self.entities {
            let mut put = |field: &str, v: Value| {
                out.insert(format!("entity:{id}.{field}"), v);
            };
            put("entity_class", Value::Text(e.entity_class.as_str().to_string()));
            put("type", Value::Text(e.kind.clone()));
            put("position", Value::position(e.position));
            put("size", Value::meters(e.size));
            for (p, v) in &e.properties {
                put(p, v.clone());
            }
        }
        for ((kind, s, o), v) in &self.relationships {
            out.insert(format!("rel:{kind}:{s}:{o}"), v.clone().unwrap_or(Value::Bool(true)));
        }
        for (name, v) in &self.environment {
            out.insert(format!("env:{name}"), v.clone());
        }
        out
    }

    /// One `path = value` line per slot, as shown to the language model.
    pub fn render_slots(&self) -> String {
        let mut s = String::new();
        for (path, v) in self.slots() {
            s.push_str(&format!("- {path} = {v}\n"));
        }
        s
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot(Arc::new(self.clone()))
    }
}

// ---------------------------------------------------------------------------
// Snapshots and diffs
// ---------------------------------------------------------------------------

/// An immutable, cheaply shareable copy of a [`WorldState`].
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot(Arc<WorldState>);

impl Snapshot {
    pub fn state(&self) -> &WorldState {
        &self.0
    }

    pub fn to_state(&self) -> WorldState {
        WorldState::clone(&self.0)
    }
}

impl std::ops::Deref for Snapshot {
    type Target = WorldState;
    fn deref(&self) -> &WorldState {
        &self.0
    }
}

impl From<WorldState> for Snapshot {
    fn from(s: WorldState) -> Self {
        Snapshot(Arc::new(s))
    }
}

impl Serialize for Snapshot {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.0.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Snapshot {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        WorldState::deserialize(deserializer).map(Snapshot::from)
    }
}

/// One changed slot. `old` is `None` for created slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateChange {
    pub path: String,
    pub old: Option<Value>,
    pub new: Option<Value>,
}

/// Slot-level difference between two states, sorted by path.
pub fn diff(a: &WorldState, b: &WorldState) -> Vec<StateChange> {
    let (sa, sb) = (a.slots(), b.slots());
    let paths: BTreeSet<&String> = sa.keys().chain(sb.keys()).collect();
    paths
        .into_iter()
        .filter_map(|p| {
            let (old, new) = (sa.get(p), sb.get(p));
            (old != new).then(|| StateChange { path: p.clone(), old: old.cloned(), new: new.cloned() })
        })
        .collect()
}

/// Renders changes as `path: old -> new` lines.
pub fn render_changes(changes: &[StateChange]) -> String {
    let show = |v: &Option<Value>| v.as_ref().map_or("(absent)".to_string(), |v| v.to_string());
    changes
        .iter()
        .map(|c| format!("- {}: {} -> {}\n", c.path, show(&c.old), show(&c.new)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entity(class: EntityClass, kind: &str, pos: [f64; 3], size: f64) -> Entity {
        Entity { entity_class: class, kind: kind.into(), position: pos, size, properties: BTreeMap::new() }
    }

    fn sample() -> WorldState {
        let mut robot = entity(EntityClass::Robot, "household robot", [0.0, 0.0, 0.0], 0.6);
        robot.properties.insert("gripper_free".into(), Value::Bool(true));
        robot.properties.insert("gripper_contact_range".into(), Value::meters(1.0));
        let mut s = WorldState::new();
        s.add_entity("robot1", robot).unwrap();
        s.add_entity("apple1", entity(EntityClass::Object, "apple", [1.0, 1.0, 0.0], 0.08)).unwrap();
        s.add_entity("bed1", entity(EntityClass::Object, "bed", [4.0, 0.0, 0.0], 2.0)).unwrap();
        s.add_relationship(Relationship {
            kind: "distance".into(),
            subject: "robot1".into(),
            object: "bed1".into(),
            value: Some(Value::meters(4.0)),
        })
        .unwrap();
        s.add_relationship(Relationship {
            kind: "beside".into(),
            subject: "apple1".into(),
            object: "bed1".into(),
            value: None,
        })
        .unwrap();
        s.environment.insert("locale".into(), Value::text("bedroom"));
        s
    }

    fn p(s: &str) -> StatePath {
        s.parse().unwrap()
    }

    #[test]
    fn path_grammar_round_trips() {
        for s in ["entity:robot1.position", "entity:a.gripper_free", "rel:on:a:b", "env:weather"] {
            assert_eq!(p(s).to_string(), s);
        }
        for bad in ["robot1.position", "entity:robot1", "rel:on:a", "env:", "entity:.x"] {
            assert!(bad.parse::<StatePath>().is_err(), "{bad}");
        }
    }

    #[test]
    fn query_reads_fields_properties_relations_env() {
        let s = sample();
        assert_eq!(s.query(&p("entity:robot1.position")).unwrap(), Value::position([0.0; 3]));
        assert_eq!(s.query(&p("entity:apple1.size")).unwrap(), Value::meters(0.08));
        assert_eq!(s.query(&p("entity:robot1.gripper_free")).unwrap(), Value::Bool(true));
        assert_eq!(s.query(&p("rel:distance:robot1:bed1")).unwrap(), Value::meters(4.0));
        assert_eq!(s.query(&p("rel:beside:apple1:bed1")).unwrap(), Value::Bool(true));
        assert_eq!(s.query(&p("env:locale")).unwrap(), Value::text("bedroom"));
    }

    #[test]
    fn query_distinguishes_missing_entity_and_property() {
        let s = sample();
        match s.query(&p("entity:ghost.position")) {
            Err(StateError::PathNotFound { missing: Missing::Entity(id), .. }) => assert_eq!(id, "ghost"),
            other => panic!("{other:?}"),
        }
        match s.query(&p("entity:robot1.wings")) {
            Err(StateError::PathNotFound { missing: Missing::Property { property, .. }, .. }) => {
                assert_eq!(property, "wings")
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn update_changes_exactly_one_slot() {
        let s = sample();
        let next = s.update(&p("entity:robot1.position"), Value::position([3.0, 0.0, 0.0])).unwrap();
        let d = diff(&s, &next);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].path, "entity:robot1.position");
        assert_eq!(d[0].old, Some(Value::position([0.0; 3])));
        // original untouched
        assert_eq!(s.query(&p("entity:robot1.position")).unwrap(), Value::position([0.0; 3]));
    }

    #[test]
    fn identical_write_is_empty_diff() {
        let s = sample();
        let next = s.update(&p("entity:robot1.gripper_free"), Value::Bool(true)).unwrap();
        assert!(diff(&s, &next).is_empty());
        assert!(diff(&s, &s).is_empty());
    }

    #[test]
    fn type_guard_rejects_mismatch() {
        let s = sample();
        let err = s.update(&p("entity:robot1.gripper_free"), Value::scalar(1.0)).unwrap_err();
        assert!(matches!(err, StateError::TypeMismatch { .. }), "{err}");
        let err = s.update(&p("entity:robot1.gripper_contact_range"), Value::scalar(1.0)).unwrap_err();
        assert!(matches!(err, StateError::TypeMismatch { .. }), "unit mismatch: {err}");
        assert!(matches!(
            s.update(&p("entity:robot1.entity_class"), Value::text("object")),
            Err(StateError::ReadOnly { .. })
        ));
        assert!(matches!(
            s.update(&p("entity:apple1.size"), Value::meters(0.0)),
            Err(StateError::InvalidValue { .. })
        ));
    }

    #[test]
    fn insert_creates_only_addressable_slots() {
        let mut s = sample();
        s.insert(&p("rel:holds:robot1:apple1"), Value::Bool(true)).unwrap();
        s.insert(&p("entity:apple1.is_washed"), Value::Bool(false)).unwrap();
        s.insert(&p("env:weather"), Value::text("sunny")).unwrap();
        assert!(s.insert(&p("rel:holds:robot1:ghost"), Value::Bool(true)).is_err());
        assert!(s.insert(&p("rel:holds:robot1:robot1"), Value::Bool(true)).is_err());
        assert!(s.set(&p("env:humidity"), Value::scalar(0.4)).is_err());
        assert!(s.addressable(&p("entity:apple1.color")));
        assert!(!s.addressable(&p("entity:ghost.color")));
    }

    #[test]
    fn apply_all_is_atomic() {
        let mut s = sample();
        let before = s.clone();
        let good = p("entity:robot1.position");
        let bad = p("entity:robot1.gripper_free");
        let v1 = Value::position([1.0, 0.0, 0.0]);
        let v2 = Value::text("nope");
        assert!(s.apply_all([(&good, &v1, false), (&bad, &v2, false)]).is_err());
        assert_eq!(s, before);
    }

    #[test]
    fn integrity_is_enforced_on_load() {
        let json = r#"{"entities": {"a": {"entity_class": "object", "type": "cup", "position": [0,0,0], "size": 0.1}},
                       "relationships": [{"kind": "on", "subject": "a", "object": "b"}]}"#;
        assert!(serde_json::from_str::<WorldState>(json).is_err());
        let json = r#"{"entities": {"a": {"entity_class": "object", "type": "cup", "position": [0,0,0], "size": -1}}}"#;
        assert!(serde_json::from_str::<WorldState>(json).is_err());
    }

    #[test]
    fn value_json_forms() {
        let v: Value = serde_json::from_str(r#"{"value": 0.08, "unit": "m"}"#).unwrap();
        assert_eq!(v, Value::meters(0.08));
        let v: Value = serde_json::from_str("2").unwrap();
        assert_eq!(v, Value::scalar(2.0));
        let v: Value = serde_json::from_str(r#"{"vec": [1, 2, 3], "unit": "m"}"#).unwrap();
        assert_eq!(v, Value::position([1.0, 2.0, 3.0]));
        assert!(serde_json::from_str::<Value>("[1, 2, 3]").is_err());
        assert!(serde_json::from_str::<Value>(r#"{"value": 1, "unit": ""}"#).is_err());
    }

    #[test]
    fn canonical_round_trip_is_byte_identical() {
        let s = sample();
        let a = crate::canonical::to_canonical_json(&s).unwrap();
        let back: WorldState = serde_json::from_str(&a).unwrap();
        let b = crate::canonical::to_canonical_json(&back).unwrap();
        assert_eq!(a, b);
        assert_eq!(back, s);
    }

    #[derive(Debug, Clone)]
    enum Op {
        Move(usize, [f64; 3]),
        Flag(usize, bool),
        Relate(usize, usize, f64),
        Env(u8),
    }

    fn op_strategy() -> impl Strategy<Value = Op> {
        let coord = -10.0f64..10.0;
        prop_oneof![
            (0usize..3, [coord.clone(), coord.clone(), coord]).prop_map(|(i, p)| Op::Move(i, p)),
            (0usize..3, any::<bool>()).prop_map(|(i, b)| Op::Flag(i, b)),
            (0usize..3, 0usize..3, 0.0f64..5.0).prop_map(|(a, b, d)| Op::Relate(a, b, d)),
            any::<u8>().prop_map(Op::Env),
        ]
    }

    fn integrity_holds(s: &WorldState) -> bool {
        s.relationships().all(|r| {
            r.subject != r.object && s.entity(&r.subject).is_some() && s.entity(&r.object).is_some()
        })
    }

    proptest! {
        #[test]
        fn random_op_sequences_keep_integrity_and_locality(ops in proptest::collection::vec(op_strategy(), 1..40)) {
            let ids = ["robot1", "apple1", "bed1"];
            let mut s = sample();
            for op in ops {
                let before = s.clone();
                let (path, value) = match op {
                    Op::Move(i, pos) => (StatePath::entity(ids[i], "position"), Value::position(pos)),
                    Op::Flag(i, b) => (StatePath::entity(ids[i], "flag"), Value::Bool(b)),
                    Op::Relate(a, b, d) => (StatePath::relation("distance", ids[a], ids[b]), Value::meters(d)),
                    Op::Env(n) => (StatePath::env("tick"), Value::scalar(n as f64)),
                };
                let result = s.insert(&path, value);
                if result.is_err() {
                    prop_assert_eq!(&s, &before);
                }
                let d = diff(&before, &s);
                prop_assert!(d.len() <= 1);
                if let Some(c) = d.first() {
                    prop_assert_eq!(&c.path, &path.to_string());
                }
                prop_assert!(integrity_holds(&s));
            }
            let json = crate::canonical::to_canonical_json(&s).unwrap();
            let back: WorldState = serde_json::from_str(&json).unwrap();
            prop_assert_eq!(crate::canonical::to_canonical_json(&back).unwrap(), json);
        }
    }
}
