//! Itinerary parsing and the eight-dimension sandbox check.
//!
//! Dimension definitions, all fractions in `[0, 1]`:
//!
//! * budget: `clamp((total - budget) / budget, 0, 1)` where the total sums
//!   the costs of every resolvable restaurant, attraction, accommodation
//!   (per night listed) and route. Unresolvable references cost nothing here.
//! * connectivity: inter-city legs (`"from A to B"` days) whose transport
//!   does not name a route from A to B in the database.
//! * completeness: missing required slots. Each day needs breakfast, lunch,
//!   dinner and at least one attraction; every day but the last also needs
//!   an accommodation.
//! * preferences: requested tags not carried by any resolved entity.
//! * diversity: `(refs - distinct) / refs` over restaurant and attraction
//!   references.
//! * hallucination: unresolvable restaurant, attraction and accommodation
//!   references over all such references.
//! * structure: days whose location is inconsistent: a departure city that
//!   differs from where the previous day ended, a meal or attraction in a
//!   city other than the day's city (either endpoint on travel days), or an
//!   accommodation outside the city the day ends in.
//! * parse: 1 when no itinerary could be parsed, in which case every other
//!   dimension is also set to 1 and the constraint energy is infinite.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{fmt_amount, ConstraintReport, DimMessage, DimWeights, Dimension, ViolationDims};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub name: String,
    pub city: String,
    pub cost: f64,
    #[serde(default)]
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub origin: String,
    pub destination: String,
    pub mode: String,
    pub route_id: String,
    pub cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EntityKind {
    Accommodation,
    Restaurant,
    Attraction,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "SandboxTables", into = "SandboxTables")]
pub struct SandboxDB {
    tables: SandboxTables,
    by_key: HashMap<(EntityKindKey, String, String), usize>,
    by_name: HashMap<(EntityKindKey, String), Vec<usize>>,
    by_route: HashMap<String, usize>,
}

type EntityKindKey = u8;

fn kind_key(k: EntityKind) -> EntityKindKey {
    k as u8
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SandboxTables {
    #[serde(default)]
    pub accommodations: Vec<Entity>,
    #[serde(default)]
    pub restaurants: Vec<Entity>,
    #[serde(default)]
    pub attractions: Vec<Entity>,
    #[serde(default)]
    pub routes: Vec<Route>,
}

impl From<SandboxTables> for SandboxDB {
    fn from(tables: SandboxTables) -> Self {
        let mut db = SandboxDB {
            tables,
            ..Default::default()
        };
        for kind in [EntityKind::Accommodation, EntityKind::Restaurant, EntityKind::Attraction] {
            let entries: Vec<(String, String)> = db
                .table(kind)
                .iter()
                .map(|e| (norm(&e.name), norm(&e.city)))
                .collect();
            for (i, (name, city)) in entries.into_iter().enumerate() {
                db.by_key.entry((kind_key(kind), name.clone(), city)).or_insert(i);
                db.by_name.entry((kind_key(kind), name)).or_default().push(i);
            }
        }
        for (i, r) in db.tables.routes.iter().enumerate() {
            db.by_route.entry(norm(&r.route_id)).or_insert(i);
        }
        db
    }
}

impl From<SandboxDB> for SandboxTables {
    fn from(db: SandboxDB) -> Self {
        db.tables
    }
}

fn norm(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

impl SandboxDB {
    pub fn new(tables: SandboxTables) -> Result<Self> {
        let db = SandboxDB::from(tables);
        db.validate()?;
        Ok(db)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tables: SandboxTables = serde_json::from_str(&text)
            .map_err(|e| Error::schema(e.line(), format!("sandbox db: {e}")))?;
        Self::new(tables)
    }

    pub fn tables(&self) -> &SandboxTables {
        &self.tables
    }

    pub fn table(&self, kind: EntityKind) -> &[Entity] {
        match kind {
            EntityKind::Accommodation => &self.tables.accommodations,
            EntityKind::Restaurant => &self.tables.restaurants,
            EntityKind::Attraction => &self.tables.attractions,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for kind in [EntityKind::Accommodation, EntityKind::Restaurant, EntityKind::Attraction] {
            let n = self.table(kind).len();
            let unique = self.by_key.keys().filter(|k| k.0 == kind_key(kind)).count();
            if unique != n {
                return Err(Error::schema(0, format!("duplicate (name, city) in {kind:?} table")));
            }
            if self.table(kind).iter().any(|e| !(e.cost.is_finite() && e.cost >= 0.0)) {
                return Err(Error::schema(0, format!("negative cost in {kind:?} table")));
            }
        }
        if self.by_route.len() != self.tables.routes.len() {
            return Err(Error::schema(0, "duplicate route_id"));
        }
        if self.tables.routes.iter().any(|r| !(r.cost.is_finite() && r.cost >= 0.0)) {
            return Err(Error::schema(0, "negative route cost"));
        }
        Ok(())
    }

    /// Resolves `"Name, City"` (or a bare, unambiguous `"Name"`).
    pub fn resolve(&self, kind: EntityKind, reference: &str) -> Option<&Entity> {
        let r = EntityRef::parse(reference);
        let table = self.table(kind);
        match &r.city {
            Some(city) => self
                .by_key
                .get(&(kind_key(kind), norm(&r.name), norm(city)))
                .map(|&i| &table[i])
                // Names may themselves contain commas.
                .or_else(|| self.resolve_name(kind, reference)),
            None => self.resolve_name(kind, &r.name),
        }
    }

    fn resolve_name(&self, kind: EntityKind, name: &str) -> Option<&Entity> {
        match self.by_name.get(&(kind_key(kind), norm(name))) {
            Some(ids) if ids.len() == 1 => Some(&self.table(kind)[ids[0]]),
            _ => None,
        }
    }

    /// Finds a route whose id appears as a whole token of the transport text.
    pub fn resolve_route(&self, transport: &str) -> Option<&Route> {
        transport
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .find_map(|t| self.by_route.get(&t.to_lowercase()))
            .map(|&i| &self.tables.routes[i])
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct EntityRef {
    name: String,
    city: Option<String>,
}

impl EntityRef {
    fn parse(s: &str) -> Self {
        match s.rsplit_once(',') {
            Some((name, city)) if !city.trim().is_empty() => EntityRef {
                name: name.trim().to_string(),
                city: Some(city.trim().to_string()),
            },
            _ => EntityRef {
                name: s.trim().to_string(),
                city: None,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum CityStatus {
    Stay(String),
    Travel { from: String, to: String },
}

impl CityStatus {
    pub fn parse(s: &str) -> Self {
        let t = s.trim();
        let lower = t.to_lowercase();
        if let Some(rest) = lower.strip_prefix("from ") {
            if let Some(pos) = rest.find(" to ") {
                let off = "from ".len();
                return CityStatus::Travel {
                    from: t[off..off + pos].trim().to_string(),
                    to: t[off + pos + " to ".len()..].trim().to_string(),
                };
            }
        }
        CityStatus::Stay(t.to_string())
    }

    /// City where the day ends.
    pub fn end_city(&self) -> &str {
        match self {
            CityStatus::Stay(c) => c,
            CityStatus::Travel { to, .. } => to,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayPlan {
    pub day: u32,
    pub current_city: CityStatus,
    pub transportation: Option<String>,
    pub breakfast: Option<String>,
    pub lunch: Option<String>,
    pub dinner: Option<String>,
    pub attractions: Vec<String>,
    pub accommodation: Option<String>,
}

impl DayPlan {
    fn meals(&self) -> impl Iterator<Item = (&'static str, &String)> {
        [("breakfast", &self.breakfast), ("lunch", &self.lunch), ("dinner", &self.dinner)]
            .into_iter()
            .filter_map(|(slot, v)| v.as_ref().map(|v| (slot, v)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Itinerary {
    pub days: Vec<DayPlan>,
}

/// Byte spans of every top-level JSON value starting with `open` in `body`.
pub(crate) fn json_values(body: &str, open: u8) -> Vec<Value> {
    let bytes = body.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == open {
            let mut stream = serde_json::Deserializer::from_str(&body[i..]).into_iter::<Value>();
            if let Some(Ok(v)) = stream.next() {
                let end = stream.byte_offset();
                out.push(v);
                i += end.max(1);
                continue;
            }
        }
        i += 1;
    }
    out
}

fn canonical_key(k: &str) -> String {
    k.trim().to_lowercase().replace([' ', '-'], "_")
}

fn field<'a>(obj: &'a Map<String, Value>, aliases: &[&str]) -> Option<&'a Value> {
    obj.iter()
        .find(|(k, _)| aliases.contains(&canonical_key(k).as_str()))
        .map(|(_, v)| v)
}

fn slot_text(v: Option<&Value>) -> Option<String> {
    match v {
        Some(Value::String(s)) => {
            let t = s.trim();
            (!t.is_empty() && t != "-").then(|| t.to_string())
        }
        _ => None,
    }
}

const DAY_ALIASES: &[&str] = &["day", "days"];

fn is_day_object(v: &Value) -> bool {
    v.as_object().is_some_and(|o| field(o, DAY_ALIASES).is_some())
}

fn day_from_object(obj: &Map<String, Value>) -> Result<DayPlan> {
    let day = match field(obj, DAY_ALIASES) {
        Some(Value::Number(n)) => n.as_u64(),
        Some(Value::String(s)) => s.trim().parse().ok(),
        _ => None,
    }
    .ok_or_else(|| Error::ParseFailure("day index is not a positive integer".into()))?;
    let city = slot_text(field(obj, &["current_city", "city", "currentcity"]))
        .ok_or_else(|| Error::ParseFailure(format!("day {day} has no current_city")))?;
    let attractions = match field(obj, &["attraction", "attractions"]) {
        Some(Value::String(s)) => s
            .split(';')
            .map(str::trim)
            .filter(|a| !a.is_empty() && *a != "-")
            .map(String::from)
            .collect(),
        Some(Value::Array(items)) => items.iter().filter_map(|v| slot_text(Some(v))).collect(),
        _ => Vec::new(),
    };
    Ok(DayPlan {
        day: u32::try_from(day).map_err(|_| Error::ParseFailure("day index too large".into()))?,
        current_city: CityStatus::parse(&city),
        transportation: slot_text(field(obj, &["transportation", "transport"])),
        breakfast: slot_text(field(obj, &["breakfast"])),
        lunch: slot_text(field(obj, &["lunch"])),
        dinner: slot_text(field(obj, &["dinner"])),
        attractions,
        accommodation: slot_text(field(obj, &["accommodation", "hotel", "lodging"])),
    })
}

/// Extracts the last well-formed JSON array of day objects from a candidate
/// body. Day indices must run 1..n in order.
pub fn parse_itinerary(body: &str) -> Result<Itinerary> {
    let array = json_values(body, b'[')
        .into_iter()
        .rev()
        .find(|v| matches!(v, Value::Array(items) if !items.is_empty() && items.iter().all(is_day_object)))
        .ok_or_else(|| Error::ParseFailure("no JSON array of day objects found".into()))?;
    let days = array
        .as_array()
        .expect("filtered to arrays")
        .iter()
        .map(|v| day_from_object(v.as_object().expect("filtered to objects")))
        .collect::<Result<Vec<_>>>()?;
    for (i, d) in days.iter().enumerate() {
        if d.day as usize != i + 1 {
            return Err(Error::ParseFailure(format!(
                "day indices must be consecutive from 1, found {} at position {}",
                d.day,
                i + 1
            )));
        }
    }
    Ok(Itinerary { days })
}

fn same_city(a: &str, b: &str) -> bool {
    norm(a) == norm(b)
}

pub struct BudgetCheck {
    pub value: f64,
    pub total: f64,
}

pub fn check_budget(it: &Itinerary, db: &SandboxDB, budget: f64) -> BudgetCheck {
    let mut total = 0.0;
    for d in &it.days {
        for (_, m) in d.meals() {
            total += db.resolve(EntityKind::Restaurant, m).map_or(0.0, |e| e.cost);
        }
        for a in &d.attractions {
            total += db.resolve(EntityKind::Attraction, a).map_or(0.0, |e| e.cost);
        }
        if let Some(acc) = &d.accommodation {
            total += db.resolve(EntityKind::Accommodation, acc).map_or(0.0, |e| e.cost);
        }
        if let Some(t) = &d.transportation {
            total += db.resolve_route(t).map_or(0.0, |r| r.cost);
        }
    }
    let value = if budget > 0.0 {
        ((total - budget) / budget).clamp(0.0, 1.0)
    } else if total > 0.0 {
        1.0
    } else {
        0.0
    };
    BudgetCheck { value, total }
}

fn leg_problems(it: &Itinerary, db: &SandboxDB) -> (usize, Vec<String>) {
    let mut legs = 0;
    let mut bad = Vec::new();
    for d in &it.days {
        if let CityStatus::Travel { from, to } = &d.current_city {
            legs += 1;
            let ok = d
                .transportation
                .as_deref()
                .and_then(|t| db.resolve_route(t))
                .is_some_and(|r| same_city(&r.origin, from) && same_city(&r.destination, to));
            if !ok {
                let what = d.transportation.as_deref().unwrap_or("no transportation");
                bad.push(format!("day {} from {from} to {to} ({what})", d.day));
            }
        }
    }
    (legs, bad)
}

pub fn check_connectivity(it: &Itinerary, db: &SandboxDB) -> f64 {
    let (legs, bad) = leg_problems(it, db);
    if legs == 0 {
        0.0
    } else {
        bad.len() as f64 / legs as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemainingDims {
    pub completeness: f64,
    pub preferences: f64,
    pub diversity: f64,
    pub hallucination: f64,
    pub structure: f64,
    pub messages: Vec<DimMessage>,
}

pub fn check_remaining_dims(it: &Itinerary, db: &SandboxDB, preferences: &[String]) -> RemainingDims {
    let n_days = it.days.len();
    let mut messages = Vec::new();

    // Completeness.
    let mut required = 0usize;
    let mut missing_by_day = Vec::new();
    for (i, d) in it.days.iter().enumerate() {
        let mut missing = Vec::new();
        for (slot, v) in [("breakfast", &d.breakfast), ("lunch", &d.lunch), ("dinner", &d.dinner)] {
            required += 1;
            if v.is_none() {
                missing.push(slot);
            }
        }
        required += 1;
        if d.attractions.is_empty() {
            missing.push("attraction");
        }
        if i + 1 < n_days {
            required += 1;
            if d.accommodation.is_none() {
                missing.push("accommodation");
            }
        }
        if !missing.is_empty() {
            missing_by_day.push(format!("day {} ({})", d.day, missing.join(", ")));
        }
    }
    let n_missing: usize = it
        .days
        .iter()
        .enumerate()
        .map(|(i, d)| {
            [&d.breakfast, &d.lunch, &d.dinner].iter().filter(|v| v.is_none()).count()
                + usize::from(d.attractions.is_empty())
                + usize::from(i + 1 < n_days && d.accommodation.is_none())
        })
        .sum();
    let completeness = if required == 0 { 0.0 } else { n_missing as f64 / required as f64 };
    if n_missing > 0 {
        messages.push(DimMessage {
            dimension: Dimension::Completeness,
            text: format!(
                "{n_missing} of {required} required slots are missing: {}.",
                missing_by_day.join("; ")
            ),
        });
    }

    // Resolution of every entity reference, shared by the remaining dims.
    struct Ref<'a> {
        day: u32,
        slot: &'static str,
        text: &'a str,
        kind: EntityKind,
        entity: Option<&'a Entity>,
    }
    let mut refs: Vec<Ref<'_>> = Vec::new();
    for d in &it.days {
        for (slot, m) in d.meals() {
            refs.push(Ref {
                day: d.day,
                slot,
                text: m,
                kind: EntityKind::Restaurant,
                entity: db.resolve(EntityKind::Restaurant, m),
            });
        }
        for a in &d.attractions {
            refs.push(Ref {
                day: d.day,
                slot: "attraction",
                text: a,
                kind: EntityKind::Attraction,
                entity: db.resolve(EntityKind::Attraction, a),
            });
        }
        if let Some(acc) = &d.accommodation {
            refs.push(Ref {
                day: d.day,
                slot: "accommodation",
                text: acc,
                kind: EntityKind::Accommodation,
                entity: db.resolve(EntityKind::Accommodation, acc),
            });
        }
    }

    // Preferences.
    let wanted: BTreeSet<String> = preferences.iter().map(|p| norm(p)).filter(|p| !p.is_empty()).collect();
    let offered: BTreeSet<String> = refs
        .iter()
        .filter_map(|r| r.entity)
        .flat_map(|e| e.tags.iter().map(|t| norm(t)))
        .collect();
    let unmet: Vec<&String> = wanted.iter().filter(|p| !offered.contains(*p)).collect();
    let preferences_dim = if wanted.is_empty() {
        0.0
    } else {
        unmet.len() as f64 / wanted.len() as f64
    };
    if !unmet.is_empty() {
        messages.push(DimMessage {
            dimension: Dimension::Preferences,
            text: format!(
                "{} of {} preferences are not satisfied: {}.",
                unmet.len(),
                wanted.len(),
                unmet.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
            ),
        });
    }

    // Diversity over restaurants and attractions.
    let mut counts: Vec<(String, usize)> = Vec::new();
    let mut div_total = 0usize;
    for r in refs.iter().filter(|r| r.kind != EntityKind::Accommodation) {
        div_total += 1;
        let key = match r.entity {
            Some(e) => format!("{}|{}", norm(&e.name), norm(&e.city)),
            None => norm(r.text),
        };
        match counts.iter_mut().find(|(k, _)| *k == key) {
            Some((_, c)) => *c += 1,
            None => counts.push((key, 1)),
        }
    }
    let repeats = div_total - counts.len();
    let diversity = if div_total == 0 { 0.0 } else { repeats as f64 / div_total as f64 };
    if repeats > 0 {
        let names: Vec<String> = refs
            .iter()
            .filter(|r| r.kind != EntityKind::Accommodation)
            .map(|r| r.text.to_string())
            .fold(Vec::<(String, usize)>::new(), |mut acc, t| {
                match acc.iter_mut().find(|(k, _)| norm(k) == norm(&t)) {
                    Some((_, c)) => *c += 1,
                    None => acc.push((t, 1)),
                }
                acc
            })
            .into_iter()
            .filter(|(_, c)| *c > 1)
            .map(|(t, c)| format!("'{t}' ({c} times)"))
            .collect();
        messages.push(DimMessage {
            dimension: Dimension::Diversity,
            text: format!(
                "{repeats} of {div_total} restaurant and attraction visits repeat an earlier choice: {}.",
                names.join(", ")
            ),
        });
    }

    // Hallucination.
    let unresolved: Vec<String> = refs
        .iter()
        .filter(|r| r.entity.is_none())
        .map(|r| format!("'{}' (day {} {})", r.text, r.day, r.slot))
        .collect();
    let hallucination = if refs.is_empty() {
        0.0
    } else {
        unresolved.len() as f64 / refs.len() as f64
    };
    if !unresolved.is_empty() {
        messages.push(DimMessage {
            dimension: Dimension::Hallucination,
            text: format!(
                "{} of {} referenced entities do not exist in the database: {}.",
                unresolved.len(),
                refs.len(),
                unresolved.join(", ")
            ),
        });
    }

    // Structure.
    let mut bad_days = Vec::new();
    let mut prev_end: Option<&str> = None;
    for d in &it.days {
        let mut bad = false;
        if let (CityStatus::Travel { from, .. }, Some(prev)) = (&d.current_city, prev_end) {
            bad |= !same_city(from, prev);
        }
        let allowed: Vec<&str> = match &d.current_city {
            CityStatus::Stay(c) => vec![c.as_str()],
            CityStatus::Travel { from, to } => vec![from.as_str(), to.as_str()],
        };
        for r in refs.iter().filter(|r| r.day == d.day) {
            if let Some(e) = r.entity {
                bad |= match r.kind {
                    EntityKind::Accommodation => !same_city(&e.city, d.current_city.end_city()),
                    _ => !allowed.iter().any(|c| same_city(c, &e.city)),
                };
            }
        }
        if bad {
            bad_days.push(d.day.to_string());
        }
        prev_end = Some(d.current_city.end_city());
    }
    let structure = if n_days == 0 { 0.0 } else { bad_days.len() as f64 / n_days as f64 };
    if !bad_days.is_empty() {
        messages.push(DimMessage {
            dimension: Dimension::Structure,
            text: format!(
                "The city sequence is inconsistent on day(s) {}: entities or departures do not match where the traveller is.",
                bad_days.join(", ")
            ),
        });
    }

    RemainingDims {
        completeness,
        preferences: preferences_dim,
        diversity,
        hallucination,
        structure,
        messages,
    }
}

/// Full check of a parsed itinerary.
pub fn check_parsed(it: &Itinerary, db: &SandboxDB, budget: f64, preferences: &[String]) -> ConstraintReport {
    let b = check_budget(it, db, budget);
    let (_, bad_legs) = leg_problems(it, db);
    let connectivity = check_connectivity(it, db);
    let rest = check_remaining_dims(it, db, preferences);
    let mut messages = Vec::new();
    if b.value > 0.0 {
        messages.push(DimMessage {
            dimension: Dimension::Budget,
            text: format!(
                "The plan is over budget by {} (total cost {} against a budget of {}).",
                fmt_amount(b.total - budget),
                fmt_amount(b.total),
                fmt_amount(budget)
            ),
        });
    }
    if connectivity > 0.0 {
        messages.push(DimMessage {
            dimension: Dimension::Connectivity,
            text: format!(
                "No valid transport route for {} inter-city leg(s): {}.",
                bad_legs.len(),
                bad_legs.join("; ")
            ),
        });
    }
    messages.extend(rest.messages);
    let dims = ViolationDims {
        budget: b.value,
        connectivity,
        completeness: rest.completeness,
        preferences: rest.preferences,
        diversity: rest.diversity,
        hallucination: rest.hallucination,
        structure: rest.structure,
        parse: 0.0,
    };
    ConstraintReport::new(dims, messages)
}

/// Report for a body that could not be parsed.
pub fn parse_failure_report(reason: &str) -> ConstraintReport {
    ConstraintReport::new(
        ViolationDims::all(1.0),
        vec![DimMessage {
            dimension: Dimension::Parse,
            text: format!("The output could not be parsed as a day-by-day JSON itinerary ({reason})."),
        }],
    )
}

/// Parses and checks a candidate body. Returns the weighted constraint
/// energy (infinite on parse failure) and the report.
pub fn check(
    body: &str,
    db: &SandboxDB,
    budget: f64,
    preferences: &[String],
    weights: &DimWeights,
) -> (f64, ConstraintReport) {
    match parse_itinerary(body) {
        Ok(it) => {
            let report = check_parsed(&it, db, budget, preferences);
            (report.weighted_sum(weights), report)
        }
        Err(e) => (f64::INFINITY, parse_failure_report(&e.to_string())),
    }
}
