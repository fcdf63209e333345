//! Randomized suites: replica convergence, anchor stability and the model
//! output contracts. Each splits its work into independent units that
//! [`Exec`] runs in parallel or one after another.

use std::time::Instant;

use cowrite::agents::{generate_summary, suggest_section_values, AgentProfile, AgentRegistry};
use cowrite::document::anchor::TextAnchor;
use cowrite::document::sequence::{ReplicaId, SeqOp, Sequence};
use cowrite::gateway::{Gateway, MockRule, MockScript, TemplateId};
use cowrite::ids::{DocId, IdAllocator};
use cowrite::persistence::sha256_hex;
use cowrite::tasks::generate_title;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::edits::{local_edit, random_text};
use crate::exec::Exec;

fn unit_rng(seed: u64, unit: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(unit);
    rng
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ConvergenceConfig {
    pub replicas: usize,
    pub edits_per_replica: usize,
    pub permutations: usize,
    pub seed: u64,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self { replicas: 5, edits_per_replica: 200, permutations: 20, seed: 0x5eed }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceReport {
    pub config: ConvergenceConfig,
    pub exec: Exec,
    pub ops: usize,
    /// Replica bodies compared: the editing replicas plus fresh ones per permutation.
    pub bodies: usize,
    pub identical: bool,
    pub body_chars: usize,
    pub body_sha256: String,
    pub elapsed_ms: u128,
}

/// Replicas edit concurrently while receiving some of each other's
/// operations. Afterwards every operation is delivered, and fresh
/// replicas receive the whole log in random orders.
pub fn convergence(config: ConvergenceConfig, exec: Exec) -> ConvergenceReport {
    let started = Instant::now();
    let mut rng = unit_rng(config.seed, 0);
    let mut replicas: Vec<Sequence> = (0..config.replicas).map(|r| Sequence::new(ReplicaId(r as u32 + 2))).collect();
    let mut log: Vec<SeqOp> = Vec::new();
    let mut delivered: Vec<Vec<bool>> = vec![Vec::new(); config.replicas];
    let mut made = vec![0usize; config.replicas];
    while made.iter().any(|&m| m < config.edits_per_replica) {
        let r = rng.random_range(0..config.replicas);
        if made[r] < config.edits_per_replica && rng.random_bool(0.5) {
            if let Some(op) = local_edit(&mut replicas[r], &mut rng) {
                for d in &mut delivered {
                    d.push(false);
                }
                delivered[r][log.len()] = true;
                log.push(op);
                made[r] += 1;
            }
        } else if !log.is_empty() {
            let i = rng.random_range(0..log.len());
            if !delivered[r][i] {
                delivered[r][i] = true;
                replicas[r].apply(log[i].clone()).expect("valid remote op");
            }
        }
    }
    let mut bodies: Vec<String> = Vec::new();
    for (r, replica) in replicas.iter_mut().enumerate() {
        let mut rest: Vec<usize> = (0..log.len()).filter(|&i| !delivered[r][i]).collect();
        rest.shuffle(&mut rng);
        for i in rest {
            replica.apply(log[i].clone()).expect("valid remote op");
        }
        bodies.push(if replica.pending_len() == 0 { replica.text() } else { String::new() });
    }

    let units: Vec<u64> = (1..=config.permutations as u64).collect();
    let per_permutation = exec.map(&units, |&k| {
        let mut rng = unit_rng(config.seed, k);
        (0..config.replicas)
            .map(|r| {
                let mut fresh = Sequence::new(ReplicaId(1000 + r as u32));
                let mut order: Vec<usize> = (0..log.len()).collect();
                order.shuffle(&mut rng);
                for i in order {
                    fresh.apply(log[i].clone()).expect("valid remote op");
                }
                if fresh.pending_len() == 0 {
                    fresh.text()
                } else {
                    String::new()
                }
            })
            .collect::<Vec<_>>()
    });
    bodies.extend(per_permutation.into_iter().flatten());
    let reference = bodies[0].clone();
    ConvergenceReport {
        config,
        exec,
        ops: log.len(),
        bodies: bodies.len(),
        identical: bodies.iter().all(|b| b.as_bytes() == reference.as_bytes()),
        body_chars: reference.chars().count(),
        body_sha256: sha256_hex(reference.as_bytes()),
        elapsed_ms: started.elapsed().as_millis(),
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct AnchorConfig {
    pub scripts: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self { scripts: 1000, steps: 40, seed: 0xa2c4 }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct AnchorReport {
    pub scripts: usize,
    /// Checks where some span character was still alive.
    pub live_checks: usize,
    pub live_matches: usize,
    /// Checks where the whole span had been deleted.
    pub deleted_checks: usize,
    pub deleted_empty: usize,
    pub mismatches: Vec<String>,
    pub elapsed_ms: u128,
}

/// Hand-tracked model of the text: every character ever typed, in order,
/// with tombstones. Local typing lands directly behind the character
/// left of the cursor, tombstones included.
struct Shadow {
    chars: Vec<(char, bool)>,
    /// Indexes of the anchored span's first and last character.
    first: usize,
    last: usize,
}

impl Shadow {
    fn visible_index(&self, offset: usize) -> usize {
        self.chars.iter().enumerate().filter(|(_, c)| c.1).nth(offset).map(|(i, _)| i).expect("offset in range")
    }

    fn insert(&mut self, offset: usize, text: &str) {
        let at = if offset == 0 { 0 } else { self.visible_index(offset - 1) + 1 };
        let n = text.chars().count();
        self.chars.splice(at..at, text.chars().map(|c| (c, true)));
        if at <= self.first {
            self.first += n;
        }
        if at <= self.last {
            self.last += n;
        }
    }

    fn delete(&mut self, offset: usize, count: usize) {
        let targets: Vec<usize> = self.chars.iter().enumerate().filter(|(_, c)| c.1).skip(offset).take(count).map(|(i, _)| i).collect();
        for i in targets {
            self.chars[i].1 = false;
        }
    }

    fn span_text(&self) -> String {
        self.chars[self.first..=self.last].iter().filter(|c| c.1).map(|c| c.0).collect()
    }

    fn span_start(&self) -> usize {
        self.chars[..self.first].iter().filter(|c| c.1).count()
    }
}

fn anchor_script(seed: u64, unit: u64, steps: usize) -> AnchorReport {
    let mut rng = unit_rng(seed, unit);
    let mut seq = Sequence::new(ReplicaId(1));
    let base: String = random_text(&mut rng, 30) + &random_text(&mut rng, 30);
    let len = base.chars().count();
    seq.insert(0, &base).expect("empty document");
    let lo = rng.random_range(0..len);
    let hi = rng.random_range(lo + 1..=len.min(lo + 20));
    let anchor = TextAnchor::from_range(&seq, lo..hi).expect("non-empty span");
    let mut shadow = Shadow { chars: base.chars().map(|c| (c, true)).collect(), first: lo, last: hi - 1 };
    let mut report = AnchorReport { scripts: 1, ..AnchorReport::default() };
    for step in 0..steps {
        let len = seq.len();
        let (start, end) = (shadow.span_start(), shadow.span_start() + shadow.span_text().chars().count());
        // bias edits toward the span and its edges
        let near = |rng: &mut ChaCha8Rng| -> usize {
            match rng.random_range(0..4) {
                0 => start,
                1 => end,
                2 => rng.random_range(start..=end),
                _ => rng.random_range(0..=len),
            }
            .min(len)
        };
        if len > 0 && rng.random_bool(0.4) {
            let at = near(&mut rng).min(len - 1);
            let n = rng.random_range(1..=(len - at).min(6));
            seq.delete(at, n).expect("range checked");
            shadow.delete(at, n);
        } else {
            let at = near(&mut rng);
            let t = random_text(&mut rng, 4);
            seq.insert(at, &t).expect("offset checked");
            shadow.insert(at, &t);
        }
        let expected = shadow.span_text();
        let resolved = anchor.resolve(&seq).map_err(|e| e.to_string());
        let text = anchor.text(&seq).map_err(|e| e.to_string());
        let want_start = shadow.span_start();
        let ok = text.as_deref() == Ok(expected.as_str())
            && resolved == Ok(want_start..want_start + expected.chars().count());
        if expected.is_empty() {
            report.deleted_checks += 1;
            report.deleted_empty += usize::from(ok);
        } else {
            report.live_checks += 1;
            report.live_matches += usize::from(ok);
        }
        if !ok && report.mismatches.is_empty() {
            report.mismatches.push(format!(
                "script {unit} step {step}: expected {expected:?} at {want_start}, got {text:?} at {resolved:?}"
            ));
        }
    }
    report
}

/// Randomized edit scripts around one anchored span, each checked after
/// every edit against the hand-tracked model.
pub fn anchors(config: AnchorConfig, exec: Exec) -> AnchorReport {
    let started = Instant::now();
    let units: Vec<u64> = (0..config.scripts as u64).collect();
    let parts = exec.map(&units, |&u| anchor_script(config.seed, u, config.steps));
    let mut total = AnchorReport::default();
    for p in parts {
        total.scripts += p.scripts;
        total.live_checks += p.live_checks;
        total.live_matches += p.live_matches;
        total.deleted_checks += p.deleted_checks;
        total.deleted_empty += p.deleted_empty;
        if total.mismatches.len() < 5 {
            total.mismatches.extend(p.mismatches);
        }
    }
    total.elapsed_ms = started.elapsed().as_millis();
    total
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ContractConfig {
    pub generations: usize,
    pub seed: u64,
}

impl Default for ContractConfig {
    fn default() -> Self {
        Self { generations: 100, seed: 0xc0de }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct ContractTally {
    pub generations: usize,
    /// Outputs within the contract bounds.
    pub compliant: usize,
    /// Outputs equal to what the generated raw answer should become.
    pub as_expected: usize,
    pub violations: Vec<String>,
}

impl ContractTally {
    pub fn all_pass(&self) -> bool {
        self.generations > 0 && self.compliant == self.generations && self.as_expected == self.generations
    }

    fn add(&mut self, unit: u64, compliant: bool, expected: bool, detail: impl FnOnce() -> String) {
        self.generations += 1;
        self.compliant += usize::from(compliant);
        self.as_expected += usize::from(expected);
        if !(compliant && expected) && self.violations.len() < 5 {
            self.violations.push(format!("generation {unit}: {}", detail()));
        }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct ContractReport {
    pub titles: ContractTally,
    pub suggestions: ContractTally,
    pub summaries: ContractTally,
    pub elapsed_ms: u128,
}

const WORDS: &[&str] = &[
    "clarity", "argument", "structure", "tone", "evidence", "flow", "style", "grammar", "summary", "ideas",
    "Research", "Editing", "data", "review", "examples", "outline",
];

fn words(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())].to_owned()).collect()
}

fn gateway(template: TemplateId, raw: &str) -> Gateway {
    Gateway::mock(MockScript::from_rules(vec![MockRule::text(template, raw)]))
}

fn title_unit(seed: u64, unit: u64) -> (bool, bool, String) {
    let mut rng = unit_rng(seed, unit);
    let n = rng.random_range(1..=12);
    let w = words(&mut rng, n);
    let mut raw = w.join(" ");
    if rng.random_bool(0.3) {
        raw.push('.');
    }
    if rng.random_bool(0.3) {
        raw = format!("\"{raw}\"");
    }
    let (title, _) = generate_title(&gateway(TemplateId::TaskTitle, &raw), "Check every paragraph for unclear claims");
    let count = title.split_whitespace().count();
    let expected = w[..n.min(4)].join(" ");
    ((1..=4).contains(&count), title == expected, format!("raw {raw:?} gave {title:?}, expected {expected:?}"))
}

fn suggestion_unit(seed: u64, unit: u64, agent: &AgentProfile) -> (bool, bool, String) {
    let mut rng = unit_rng(seed, unit);
    let existing: Vec<String> = agent.sections.get("expertise").cloned().unwrap_or_default();
    let items: Vec<String> = (0..rng.random_range(0..=6))
        .map(|_| match rng.random_range(0..6) {
            0 if !existing.is_empty() => existing[rng.random_range(0..existing.len())].to_uppercase(),
            1 => words(&mut rng, 3).join(" "),
            _ => {
                let k = rng.random_range(1..=2);
                words(&mut rng, k).join(" ")
            }
        })
        .collect();
    let raw = match rng.random_range(0..5) {
        0 => format!("```json\n{}\n```", serde_json::to_string(&items).expect("strings serialize")),
        1 => "Here are some ideas: clarity, tone".to_owned(),
        _ => serde_json::to_string(&items).expect("strings serialize"),
    };
    let got = suggest_section_values(&gateway(TemplateId::CvSuggestions, &raw), agent, "expertise", &[]);
    let got = match got {
        Ok(v) => v,
        Err(e) => return (false, false, format!("raw {raw:?} failed: {e}")),
    };
    let compliant = (got.is_empty() || got.len() == 3) && got.iter().all(|v| (1..=2).contains(&v.split_whitespace().count()));
    // fresh, short, distinct values in answer order; fewer than three means none
    let mut fresh: Vec<String> = Vec::new();
    if !raw.starts_with("Here") {
        for v in &items {
            let lower = v.to_lowercase();
            let short = v.split_whitespace().count() <= 2;
            let known = existing.iter().any(|e| e.to_lowercase() == lower) || fresh.iter().any(|f| f.to_lowercase() == lower);
            if short && !known {
                fresh.push(v.clone());
            }
        }
    }
    let expected: Vec<String> = if fresh.len() >= 3 { fresh[..3].to_vec() } else { Vec::new() };
    (compliant, got == expected, format!("raw {raw:?} gave {got:?}, expected {expected:?}"))
}

fn summary_unit(seed: u64, unit: u64, agent: &AgentProfile) -> (bool, bool, String) {
    let mut rng = unit_rng(seed, unit);
    let sentences: Vec<String> = (0..rng.random_range(1..=9))
        .map(|_| {
            let k = rng.random_range(2..=7);
            let mut s = words(&mut rng, k).join(" ");
            s.push(['.', '!', '?'][rng.random_range(0..3)]);
            s
        })
        .collect();
    let raw = sentences.join(" ");
    let got = match generate_summary(&gateway(TemplateId::Summary, &raw), agent) {
        Ok(s) => s,
        Err(e) => return (false, false, format!("raw {raw:?} failed: {e}")),
    };
    let terminators = got.chars().filter(|c| matches!(c, '.' | '!' | '?')).count();
    let expected = sentences[..sentences.len().min(5)].join(" ");
    (terminators <= 5, got == expected, format!("raw {raw:?} gave {got:?}, expected {expected:?}"))
}

/// Runs titles, profile suggestions and summaries over scripted raw
/// answers of every shape, checking the bounds and the exact result.
pub fn contracts(config: ContractConfig, exec: Exec) -> ContractReport {
    let started = Instant::now();
    let doc = DocId::new("d1");
    let mut ids = IdAllocator::default();
    let mut agent = AgentRegistry::new(&doc, &mut ids).default_agent().clone();
    agent.sections.insert("expertise".into(), vec!["Editing".into(), "clarity".into()]);
    let units: Vec<u64> = (0..config.generations as u64).collect();
    let results = exec.map(&units, |&u| {
        (title_unit(config.seed, u), suggestion_unit(config.seed, u, &agent), summary_unit(config.seed, u, &agent))
    });
    let mut report = ContractReport::default();
    for (u, (t, s, m)) in units.iter().zip(results) {
        report.titles.add(*u, t.0, t.1, || t.2);
        report.suggestions.add(*u, s.0, s.1, || s.2);
        report.summaries.add(*u, m.0, m.1, || m.2);
    }
    report.elapsed_ms = started.elapsed().as_millis();
    report
}
