//! Synthetic pool generators with known ground truth: sentinel-separable
//! answer pools, generator-style confounded pools, unique-solution
//! knights-and-knaves puzzles, and itinerary pools over a generated
//! sandbox database.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::constraints::itinerary::{self, Entity, Route, SandboxTables};
use crate::constraints::kk::{Assignment, Formula, PuzzleSpec, Role};
use crate::constraints::{DimWeights, SandboxDB};
use crate::error::{Error, Result};
use crate::pool::{Candidate, CandidatePool, Gold, Label, Problem, TaskKind};
use crate::seed;

/// Token present in every correct candidate of the separable generator.
pub const POSITIVE_SENTINEL: &str = "verified";
/// Token present in every incorrect candidate of the separable generator.
pub const NEGATIVE_SENTINEL: &str = "flawed";

const FILLER: &[&str] = &[
    "first", "then", "so", "we", "compute", "the", "total", "value", "of", "each", "item", "and", "add", "result",
    "next", "multiply", "by", "two", "three", "subtract", "remaining", "amount", "left", "after", "giving", "number",
    "step", "check", "carry", "sum", "divide", "half", "twice", "per", "day", "week", "price", "cost", "apples",
    "eggs", "boxes", "hours", "minutes", "students", "books", "pages", "miles", "dollars", "cups", "bags", "trees",
    "cars", "seats", "rows", "tickets", "shelves", "coins", "cards", "marbles", "plates",
];

const NAMES: &[&str] = &["Oliver", "Ethan", "Mia", "Liam", "Zoe", "Noah", "Ava", "Lucas", "Ivy", "Owen", "Ruby", "Theo"];

fn filler(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n).map(|_| *FILLER.choose(rng).expect("nonempty")).collect::<Vec<_>>().join(" ")
}

fn math_problem(id: String, rng: &mut ChaCha8Rng) -> (Problem, f64) {
    let a = rng.random_range(2..50);
    let b = rng.random_range(2..20);
    let gold = (a * b) as f64;
    let problem = Problem {
        id,
        task_kind: TaskKind::MathAnswer,
        statement: format!("A shop has {a} {} and sells them for {b} each. {}", FILLER[rng.random_range(38..FILLER.len())], filler(rng, 6)),
        gold: Some(Gold::Number(gold)),
        budget: None,
        preferences: None,
        difficulty: None,
        puzzle: None,
    };
    (problem, gold)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparableParams {
    pub n_problems: usize,
    pub n_candidates: usize,
    pub n_generators: usize,
    pub seed: u64,
}

impl Default for SeparableParams {
    fn default() -> Self {
        Self {
            n_problems: 500,
            n_candidates: 8,
            n_generators: 4,
            seed: 42,
        }
    }
}

/// Math pools where every correct candidate carries [`POSITIVE_SENTINEL`]
/// and every incorrect one [`NEGATIVE_SENTINEL`]. Each pool has at least
/// one candidate of each class; the first candidate is flagged greedy.
pub fn separable(p: &SeparableParams) -> Result<Vec<CandidatePool>> {
    if p.n_candidates < 2 || p.n_generators == 0 || p.n_problems == 0 {
        return Err(Error::InvalidConfig("separable pools need >= 1 problem, >= 2 candidates and >= 1 generator".into()));
    }
    let mut rng = seed::rng(seed::derive(p.seed, 0, "separable"));
    Ok((0..p.n_problems)
        .map(|i| {
            let pid = format!("sep-{i:05}");
            let (problem, gold) = math_problem(pid.clone(), &mut rng);
            let n_pos = rng.random_range(1..p.n_candidates);
            let mut correct: Vec<bool> = (0..p.n_candidates).map(|j| j < n_pos).collect();
            correct.shuffle(&mut rng);
            let candidates = correct
                .iter()
                .enumerate()
                .map(|(j, &ok)| {
                    let (tag, ans) = if ok {
                        (POSITIVE_SENTINEL, gold)
                    } else {
                        (NEGATIVE_SENTINEL, gold + rng.random_range(1..10) as f64)
                    };
                    let body = format!("{} {tag} {} #### {ans}", filler(&mut rng, 8), filler(&mut rng, 4));
                    let mut c = Candidate::new(format!("{pid}-c{j}"), pid.clone(), format!("gen{}", j % p.n_generators), body)
                        .with_label(if ok { Label::correct() } else { Label::incorrect() });
                    c.greedy = j == 0;
                    c
                })
                .collect();
            CandidatePool::new(problem, candidates)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfoundedParams {
    pub n_train: usize,
    pub n_dfr: usize,
    pub n_eval: usize,
    /// Share of training positives produced by the first generator.
    pub imbalance: f64,
    /// Number of distinct style tokens each generator stamps on its outputs.
    pub salience: usize,
    pub n_generators: usize,
    pub seed: u64,
}

impl Default for ConfoundedParams {
    fn default() -> Self {
        Self {
            n_train: 300,
            n_dfr: 200,
            n_eval: 200,
            imbalance: 0.9,
            salience: 6,
            n_generators: 4,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfoundedSplits {
    /// Two candidates per generator; the first generator's are all correct
    /// and it holds `imbalance` of all positives.
    pub train: Vec<CandidatePool>,
    /// One correct and one incorrect candidate per generator.
    pub dfr: Vec<CandidatePool>,
    /// Same balanced layout as `dfr`, on disjoint problems.
    pub eval: Vec<CandidatePool>,
}

pub fn generator_name(g: usize) -> String {
    format!("model-{}", char::from(b'A' + (g % 26) as u8))
}

fn style_tokens(g: usize, salience: usize) -> String {
    let letter = char::from(b'a' + (g % 26) as u8);
    (0..salience).map(|s| format!("sty{letter}{s}x")).collect::<Vec<_>>().join(" ")
}

fn confounded_candidate(
    pid: &str,
    j: usize,
    g: usize,
    ok: bool,
    gold: f64,
    salience: usize,
    rng: &mut ChaCha8Rng,
) -> Candidate {
    let (tag, ans) = if ok {
        (POSITIVE_SENTINEL, gold)
    } else {
        (NEGATIVE_SENTINEL, gold + rng.random_range(1..10) as f64)
    };
    let body = format!(
        "{} {} {tag} {} #### {ans}",
        style_tokens(g, salience),
        filler(rng, 6),
        filler(rng, 3)
    );
    Candidate::new(format!("{pid}-c{j}"), pid, generator_name(g), body).with_label(if ok {
        Label::correct()
    } else {
        Label::incorrect()
    })
}

fn balanced_pools(prefix: &str, n: usize, p: &ConfoundedParams, rng: &mut ChaCha8Rng) -> Vec<CandidatePool> {
    (0..n)
        .map(|i| {
            let pid = format!("{prefix}-{i:05}");
            let (problem, gold) = math_problem(pid.clone(), rng);
            let mut slots: Vec<(usize, bool)> = (0..p.n_generators).flat_map(|g| [(g, true), (g, false)]).collect();
            slots.shuffle(rng);
            let candidates = slots
                .into_iter()
                .enumerate()
                .map(|(j, (g, ok))| confounded_candidate(&pid, j, g, ok, gold, p.salience, rng))
                .collect();
            CandidatePool::new(problem, candidates)
        })
        .collect()
}

/// Pools where generator style is a shortcut for correctness in training but
/// carries no information in the balanced DFR and evaluation splits.
pub fn confounded(p: &ConfoundedParams) -> Result<ConfoundedSplits> {
    if !(p.imbalance > 0.0 && p.imbalance < 1.0) || p.n_generators < 2 || p.n_train == 0 {
        return Err(Error::InvalidConfig(
            "confounded pools need imbalance in (0, 1), >= 2 generators and >= 1 training problem".into(),
        ));
    }
    let mut rng = seed::rng(seed::derive(p.seed, 0, "confounded"));
    // The dominant generator contributes two positives per problem; the
    // others share the remaining positives so the ratio is exact.
    let dominant = 2 * p.n_train;
    let others = ((dominant as f64) * (1.0 - p.imbalance) / p.imbalance).round() as usize;
    let other_slots = 2 * (p.n_generators - 1);
    if others > p.n_train * (other_slots - 1) {
        return Err(Error::InvalidConfig("imbalance too low for the training layout".into()));
    }
    let mut flips = vec![0usize; p.n_train];
    let mut order: Vec<usize> = (0..p.n_train).collect();
    order.shuffle(&mut rng);
    for k in 0..others {
        flips[order[k % p.n_train]] += 1;
    }
    let train = (0..p.n_train)
        .map(|i| {
            let pid = format!("conf-train-{i:05}");
            let (problem, gold) = math_problem(pid.clone(), &mut rng);
            let mut slots: Vec<(usize, bool)> = (0..2).map(|_| (0, true)).collect();
            let mut rest: Vec<(usize, bool)> = (1..p.n_generators).flat_map(|g| [(g, false), (g, false)]).collect();
            rest.shuffle(&mut rng);
            rest.iter_mut().take(flips[i]).for_each(|s| s.1 = true);
            slots.extend(rest);
            slots.shuffle(&mut rng);
            let candidates = slots
                .into_iter()
                .enumerate()
                .map(|(j, (g, ok))| confounded_candidate(&pid, j, g, ok, gold, p.salience, &mut rng))
                .collect();
            CandidatePool::new(problem, candidates)
        })
        .collect();
    Ok(ConfoundedSplits {
        train,
        dfr: balanced_pools("conf-dfr", p.n_dfr, p, &mut rng),
        eval: balanced_pools("conf-eval", p.n_eval, p, &mut rng),
    })
}

fn random_atom(chars: &[String], rng: &mut ChaCha8Rng) -> Formula {
    let who = chars.choose(rng).expect("nonempty").as_str();
    match rng.random_range(0..5) {
        0 => Formula::SelfKnight,
        1 | 2 => Formula::knight(who),
        _ => Formula::knave(who),
    }
}

fn random_formula(chars: &[String], rng: &mut ChaCha8Rng) -> Formula {
    let a = random_atom(chars, rng);
    let b = random_atom(chars, rng);
    match rng.random_range(0..7) {
        0 | 1 => a,
        2 => Formula::and(vec![a, b]),
        3 => Formula::or(vec![a, b]),
        4 => Formula::Implies(Box::new(a), Box::new(b)),
        5 => Formula::Iff(Box::new(a), Box::new(b)),
        _ => Formula::Not(Box::new(a)),
    }
}

/// A random puzzle over `n_chars` characters with exactly one consistent
/// assignment, found by rejection sampling.
pub fn kk_puzzle(n_chars: usize, rng: &mut ChaCha8Rng) -> Result<(PuzzleSpec, Assignment)> {
    if !(crate::constraints::kk::MIN_CHARACTERS..=crate::constraints::kk::MAX_CHARACTERS).contains(&n_chars) {
        return Err(Error::InvalidConfig(format!("puzzles need 2 to 8 characters, got {n_chars}")));
    }
    let mut names: Vec<String> = NAMES.iter().map(|s| s.to_string()).collect();
    for _ in 0..10_000 {
        names.shuffle(rng);
        let chars: Vec<String> = names[..n_chars].to_vec();
        let statements = chars.iter().map(|c| (c.clone(), random_formula(&chars, rng))).collect();
        let puzzle = PuzzleSpec {
            characters: chars,
            statements,
        };
        let mut sols = puzzle.all_solutions();
        if sols.len() == 1 {
            return Ok((puzzle, sols.pop().expect("one solution")));
        }
    }
    Err(Error::DegenerateData("could not sample a unique-solution puzzle".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KkParams {
    pub n: usize,
    /// Character count per puzzle; 0 draws uniformly from 2 to 6.
    pub n_characters: usize,
    pub n_candidates: usize,
    pub seed: u64,
}

impl Default for KkParams {
    fn default() -> Self {
        Self {
            n: 100,
            n_characters: 3,
            n_candidates: 8,
            seed: 42,
        }
    }
}

fn assignment_text(puzzle: &PuzzleSpec, a: &Assignment) -> String {
    let map: serde_json::Map<String, serde_json::Value> = puzzle
        .characters
        .iter()
        .map(|c| (c.clone(), json!(if a.role(c) == Some(Role::Knight) { "knight" } else { "knave" })))
        .collect();
    serde_json::Value::Object(map).to_string()
}

/// Puzzle pools: the solution, assignments with one or more roles flipped,
/// and an occasional answer with no assignment at all.
pub fn kk_pools(p: &KkParams) -> Result<Vec<CandidatePool>> {
    if p.n_candidates == 0 {
        return Err(Error::InvalidConfig("puzzle pools need at least one candidate".into()));
    }
    let mut rng = seed::rng(seed::derive(p.seed, 0, "kk"));
    (0..p.n)
        .map(|i| {
            let n_chars = if p.n_characters == 0 { rng.random_range(2..=6) } else { p.n_characters };
            let (puzzle, solution) = kk_puzzle(n_chars, &mut rng)?;
            let pid = format!("kk-{i:05}");
            let statement = puzzle
                .characters
                .iter()
                .map(|c| format!("{c} says: \"{}\".", puzzle.statements[c]))
                .collect::<Vec<_>>()
                .join(" ");
            let greedy = rng.random_range(0..p.n_candidates);
            let candidates = (0..p.n_candidates)
                .map(|j| {
                    let mut a = solution.clone();
                    let kind = if j == 0 { 0 } else { rng.random_range(0..6) };
                    let body = match kind {
                        0 => format!("Checking every statement, the only consistent assignment is {}", assignment_text(&puzzle, &a)),
                        5 => "Some of them must be lying, but it is hard to say who.".to_string(),
                        _ => {
                            let flips = rng.random_range(1..=n_chars);
                            let mut who = puzzle.characters.clone();
                            who.shuffle(&mut rng);
                            for c in who.iter().take(flips) {
                                let r = a.0.get_mut(c).expect("total");
                                *r = if *r == Role::Knight { Role::Knave } else { Role::Knight };
                            }
                            format!("Assuming the first speaker tells the truth gives {}", assignment_text(&puzzle, &a))
                        }
                    };
                    let label = if kind == 0 { Label::correct() } else if kind == 5 { Label::incorrect() } else if a == solution {
                        Label::correct()
                    } else {
                        Label::incorrect()
                    };
                    let mut c = Candidate::new(format!("{pid}-c{j}"), pid.clone(), format!("gen{}", j % 4), body).with_label(label);
                    c.greedy = j == greedy;
                    c
                })
                .collect::<Vec<_>>();
            let mut pool = CandidatePool::new(
                Problem {
                    id: pid,
                    task_kind: TaskKind::LogicPuzzle,
                    statement,
                    gold: Some(Gold::Assignment(solution.0.clone())),
                    budget: None,
                    preferences: None,
                    difficulty: Some(format!("{n_chars}-people")),
                    puzzle: Some(puzzle),
                },
                candidates,
            );
            pool.candidates.shuffle(&mut rng);
            Ok(pool)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ItineraryParams {
    pub n: usize,
    pub seed: u64,
}

impl Default for ItineraryParams {
    fn default() -> Self {
        Self { n: 50, seed: 42 }
    }
}

const CITIES: &[&str] = &["Alton", "Brisa", "Corvel", "Dunmore", "Esk"];
const CUISINE_TAGS: &[&str] = &["vegan", "seafood", "italian"];
const SIGHT_TAGS: &[&str] = &["museum", "nature", "history"];

/// A sandbox database: per city two hotels, six restaurants and four
/// attractions, with flights between every ordered city pair.
pub fn sandbox_db() -> SandboxDB {
    let mut t = SandboxTables::default();
    for (ci, city) in CITIES.iter().enumerate() {
        let c = city.to_string();
        let ent = |name: String, cost: f64, tags: &[&str]| Entity {
            name,
            city: c.clone(),
            cost,
            tags: tags.iter().map(|s| s.to_string()).collect(),
        };
        t.accommodations.push(ent(format!("{city} Hostel"), 60.0 + 10.0 * ci as f64, &[]));
        t.accommodations.push(ent(format!("{city} Grand Hotel"), 420.0, &["luxury"]));
        for r in 0..6 {
            t.restaurants.push(ent(format!("{city} Kitchen {}", r + 1), 12.0 + 4.0 * r as f64, &[CUISINE_TAGS[r % 3]]));
        }
        for a in 0..4 {
            t.attractions.push(ent(format!("{city} Sight {}", a + 1), 5.0 * a as f64, &[SIGHT_TAGS[a % 3]]));
        }
    }
    for (i, from) in CITIES.iter().enumerate() {
        for (j, to) in CITIES.iter().enumerate() {
            if i != j {
                t.routes.push(Route {
                    origin: from.to_string(),
                    destination: to.to_string(),
                    mode: "flight".into(),
                    route_id: format!("F{}{:02}", i + 1, j + 1),
                    cost: 90.0 + 15.0 * (i + j) as f64,
                });
            }
        }
    }
    SandboxDB::new(t).expect("generated tables are valid")
}

fn route_id(from: usize, to: usize) -> String {
    format!("F{}{:02}", from + 1, to + 1)
}

/// The clean three-day plan: fly out, stay, fly back.
fn clean_plan(o: usize, d: usize) -> Vec<serde_json::Value> {
    let (oc, dc) = (CITIES[o], CITIES[d]);
    let k = |i: usize| format!("{dc} Kitchen {i}, {dc}");
    let s = |i: usize| format!("{dc} Sight {i}, {dc}");
    vec![
        json!({"day": 1, "current_city": format!("from {oc} to {dc}"), "transportation": format!("Flight {}", route_id(o, d)),
               "breakfast": format!("{oc} Kitchen 1, {oc}"), "lunch": k(1), "dinner": k(2),
               "attraction": s(1), "accommodation": format!("{dc} Hostel, {dc}")}),
        json!({"day": 2, "current_city": dc, "transportation": "-", "breakfast": k(3), "lunch": k(4), "dinner": k(5),
               "attraction": format!("{};{}", s(2), s(3)), "accommodation": format!("{dc} Hostel, {dc}")}),
        json!({"day": 3, "current_city": format!("from {dc} to {oc}"), "transportation": format!("Flight {}", route_id(d, o)),
               "breakfast": k(6), "lunch": format!("{oc} Kitchen 2, {oc}"), "dinner": format!("{oc} Kitchen 3, {oc}"),
               "attraction": s(4), "accommodation": "-"}),
    ]
}

/// Itinerary pools over [`sandbox_db`]: a clean plan plus variants with
/// budget, completeness, hallucination, connectivity, diversity and parse
/// violations. Labels are the checker's violation scores.
pub fn itineraries(p: &ItineraryParams) -> Result<(SandboxDB, Vec<CandidatePool>)> {
    let db = sandbox_db();
    let mut rng = seed::rng(seed::derive(p.seed, 0, "itinerary"));
    let pools = (0..p.n)
        .map(|i| {
            let o = rng.random_range(0..CITIES.len());
            let d = (o + rng.random_range(1..CITIES.len())) % CITIES.len();
            let clean = clean_plan(o, d);
            let clean_text = serde_json::Value::Array(clean.clone()).to_string();
            let (_, report) = itinerary::check(&clean_text, &db, 1e9, &[], &DimWeights::ones());
            debug_assert!(report.is_clean(), "{report:?}");
            let cost = itinerary::check_budget(&itinerary::parse_itinerary(&clean_text)?, &db, 1.0).total;
            let budget = (cost * rng.random_range(1.05..1.3)).round();
            let prefs = vec![CUISINE_TAGS.choose(&mut rng).expect("nonempty").to_string()];
            let pid = format!("trip-{i:05}");
            let problem = Problem {
                id: pid.clone(),
                task_kind: TaskKind::Itinerary,
                statement: format!(
                    "Plan a 3-day trip from {} to {} and back with a budget of {budget}. Preferences: {}.",
                    CITIES[o], CITIES[d], prefs[0]
                ),
                gold: None,
                budget: Some(budget),
                preferences: Some(prefs.clone()),
                difficulty: Some("easy".into()),
                puzzle: None,
            };
            let dc = CITIES[d];
            let mut variants: Vec<String> = Vec::new();
            variants.push(clean_text.clone());
            let mut v = clean.clone();
            v[0]["accommodation"] = json!(format!("{dc} Grand Hotel, {dc}"));
            v[1]["accommodation"] = json!(format!("{dc} Grand Hotel, {dc}"));
            variants.push(serde_json::Value::Array(v).to_string());
            let mut v = clean.clone();
            v[1]["lunch"] = json!("-");
            v[1]["dinner"] = json!("-");
            variants.push(serde_json::Value::Array(v).to_string());
            let mut v = clean.clone();
            v[0]["dinner"] = json!(format!("Imaginary Bistro, {dc}"));
            variants.push(serde_json::Value::Array(v).to_string());
            let mut v = clean.clone();
            v[2]["transportation"] = json!("Flight F9999");
            variants.push(serde_json::Value::Array(v).to_string());
            let mut v = clean.clone();
            v[1]["dinner"] = v[0]["dinner"].clone();
            v[1]["lunch"] = v[0]["lunch"].clone();
            variants.push(serde_json::Value::Array(v).to_string());
            variants.push("I would suggest flying out, relaxing for a day and heading home.".into());
            let mut v = clean.clone();
            v[0]["accommodation"] = json!(format!("{dc} Grand Hotel, {dc}"));
            v[2]["breakfast"] = json!("-");
            variants.push(serde_json::Value::Array(v).to_string());

            let greedy = rng.random_range(0..variants.len());
            let mut candidates: Vec<Candidate> = variants
                .into_iter()
                .enumerate()
                .map(|(j, plan)| {
                    let body = format!("Here is the itinerary.\n{plan}");
                    let (_, report) = itinerary::check(&body, &db, budget, &prefs, &DimWeights::ones());
                    let mut c = Candidate::new(format!("{pid}-c{j}"), pid.clone(), format!("gen{}", j % 4), body)
                        .with_label(Label::Violation(report.violation_score));
                    c.greedy = j == greedy;
                    c
                })
                .collect();
            candidates.shuffle(&mut rng);
            Ok(CandidatePool::new(problem, candidates))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((db, pools))
}
