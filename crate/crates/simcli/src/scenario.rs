//! Line-oriented scenario files.
//!
//! ```text
//! # header directives
//! doc "essay on AI in daily life"
//! config trigger.collab_edit_threshold=3
//! mock ../mock/base.toml
//! rule template=agent_init response="Sure."
//! jobs auto
//! seed 7
//!
//! # steps: at <m:ss> <actor> <action> [args...] [as <label>]
//! at 0:00 alice join
//! at 0:05 alice type 0 "Hello world."
//! at 0:10 alice comment 0 5 "@aiAuthor shorter?" as t1
//! at 0:12 expect thread t1 messages=2
//! ```
//!
//! Actors are user names, `system` (tick, jobs) and `expect` (checks).
//! In typed text `\n` stands for a line break.
//! Header directives must come before the first step.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cowrite::clock::Timestamp;
use cowrite::comments::ConsumeAction;
use cowrite::config::Config;
use cowrite::gateway::{MockRule, MockScript, TemplateId};
use cowrite::tasks::SegmentOutcome;
use cowrite::triggers::TriggerKind;
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Eq, Error, Serialize)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

#[derive(Clone, Debug, Error)]
pub enum ScenarioError {
    #[error("reading {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("{}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("\n"))]
    Parse(Vec<ParseError>),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Jobs {
    /// Jobs run right after the step that queued them.
    #[default]
    Auto,
    /// Jobs run only on `system jobs`.
    Manual,
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    /// `Some(goal)` once a `doc` directive was seen.
    pub doc: Option<Option<String>>,
    pub config: Config,
    pub mock: MockScript,
    pub jobs: Jobs,
    pub seed: u64,
    pub steps: Vec<Step>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub line: usize,
    pub at: Timestamp,
    pub actor: String,
    pub action: Action,
    pub label: Option<String>,
    /// The step as written, without the time.
    pub source: String,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Join,
    Leave,
    Disconnect,
    Type { at: usize, text: String },
    Erase { at: usize, len: usize },
    RandomEdits { count: usize },
    Sync,
    Goal { text: Option<String> },
    Save,
    Comment { start: usize, end: usize, body: String },
    Reply { thread: String, body: String },
    Consume { thread: String, message: MessageRef, action: ConsumeAction },
    Approve { thread: String },
    DeleteComment { thread: String },
    Preset { preset: String },
    Agent { name: String, role: String, notes: Vec<String> },
    DeleteAgent { agent: String },
    Task { description: String, assignee: Option<String>, trigger: Option<TriggerKind>, shortcut: bool },
    Run { task: String },
    Shortcut { task: String, start: usize, end: usize },
    DeleteTask { task: String },
    Tick,
    RunJobs,
    Expect(Check),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MessageRef {
    /// The latest message that carries a suggestion.
    Last,
    Index(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Check {
    Text(String),
    TextContains(String),
    PendingText(String),
    Pending(usize),
    Fired { kind: TriggerKind, at: Vec<Timestamp> },
    FiredCount { kind: TriggerKind, count: usize },
    Thread { thread: String, props: Vec<(String, String)> },
    Annotations { props: Vec<(String, String)> },
    Runs { task: String, count: usize },
    Outcomes { task: String, outcomes: Vec<SegmentOutcome> },
    Assignee { task: String, agent: String },
    Events { thread: String, labels: Vec<String> },
    Contributors(usize),
    Online(usize),
    Agents(usize),
    Queued(usize),
    Converged,
    /// The previous step failed with an error containing this text.
    Error(String),
    /// The previous step succeeded.
    Ok,
}

/// Parses `m:ss`.
pub fn parse_time(s: &str) -> Result<Timestamp, String> {
    let (m, sec) = s.split_once(':').ok_or_else(|| format!("expected m:ss, got {s:?}"))?;
    let m: u64 = m.parse().map_err(|_| format!("bad minutes in {s:?}"))?;
    if sec.len() != 2 {
        return Err(format!("expected two-digit seconds in {s:?}"));
    }
    let sec: u64 = sec.parse().map_err(|_| format!("bad seconds in {s:?}"))?;
    if sec >= 60 {
        return Err(format!("seconds out of range in {s:?}"));
    }
    Ok(Timestamp::from_secs(m * 60 + sec))
}

pub fn format_time(t: Timestamp) -> String {
    let secs = t.millis() / 1000;
    let ms = t.millis() % 1000;
    if ms == 0 {
        format!("{}:{:02}", secs / 60, secs % 60)
    } else {
        format!("{}:{:02}.{ms:03}", secs / 60, secs % 60)
    }
}

fn snake<T: DeserializeOwned>(what: &str, s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned())).map_err(|_| format!("unknown {what} {s:?}"))
}

struct Args {
    positional: Vec<String>,
    options: BTreeMap<String, String>,
    flags: Vec<String>,
}

impl Args {
    /// `key=value` tokens become options and bare words in `flag_words`
    /// become flags; everything else is positional.
    fn split(tokens: &[String], flag_words: &[&str]) -> Self {
        let mut args = Args { positional: Vec::new(), options: BTreeMap::new(), flags: Vec::new() };
        for t in tokens {
            match t.split_once('=') {
                Some((k, v)) if !k.is_empty() && k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') => {
                    args.options.insert(k.to_owned(), v.to_owned());
                }
                _ if flag_words.contains(&t.as_str()) => args.flags.push(t.clone()),
                _ => args.positional.push(t.clone()),
            }
        }
        args
    }

    fn exact(&self, n: usize, usage: &str) -> Result<(), String> {
        if self.positional.len() != n {
            return Err(format!("usage: {usage}"));
        }
        Ok(())
    }

    fn num(&self, i: usize) -> Result<usize, String> {
        self.positional[i].parse().map_err(|_| format!("expected a number, got {:?}", self.positional[i]))
    }
}

fn positional(tokens: &[String], n: usize, usage: &str) -> Result<Args, String> {
    let args = Args { positional: tokens.to_vec(), options: BTreeMap::new(), flags: Vec::new() };
    args.exact(n, usage)?;
    Ok(args)
}

fn parse_action(actor: &str, verb: &str, rest: &[String]) -> Result<Action, String> {
    if actor == "expect" {
        let mut tokens = vec![verb.to_owned()];
        tokens.extend_from_slice(rest);
        return parse_check(&tokens).map(Action::Expect);
    }
    if actor == "system" {
        return match verb {
            "tick" if rest.is_empty() => Ok(Action::Tick),
            "jobs" if rest.is_empty() => Ok(Action::RunJobs),
            _ => Err(format!("unknown system action {verb:?} (tick, jobs)")),
        };
    }
    let a = |n, usage| positional(rest, n, usage);
    Ok(match verb {
        "join" => a(0, "join").map(|_| Action::Join)?,
        "leave" => a(0, "leave").map(|_| Action::Leave)?,
        "disconnect" => a(0, "disconnect").map(|_| Action::Disconnect)?,
        "sync" => a(0, "sync").map(|_| Action::Sync)?,
        "save" => a(0, "save").map(|_| Action::Save)?,
        "type" => {
            let x = a(2, "type AT TEXT")?;
            Action::Type { at: x.num(0)?, text: x.positional[1].replace("\\n", "\n") }
        }
        "erase" => {
            let x = a(2, "erase AT LEN")?;
            Action::Erase { at: x.num(0)?, len: x.num(1)? }
        }
        "random-edits" => Action::RandomEdits { count: a(1, "random-edits N")?.num(0)? },
        "goal" => match rest {
            [] => Action::Goal { text: None },
            [t] => Action::Goal { text: Some(t.clone()) },
            _ => return Err("usage: goal [TEXT]".into()),
        },
        "comment" => {
            let x = a(3, "comment START END BODY")?;
            Action::Comment { start: x.num(0)?, end: x.num(1)?, body: x.positional[2].clone() }
        }
        "reply" => {
            let x = a(2, "reply THREAD BODY")?;
            Action::Reply { thread: x.positional[0].clone(), body: x.positional[1].clone() }
        }
        "consume" => {
            let x = a(3, "consume THREAD last|INDEX append|replace|copy")?;
            let message = match x.positional[1].as_str() {
                "last" => MessageRef::Last,
                n => MessageRef::Index(n.parse().map_err(|_| format!("expected `last` or an index, got {n:?}"))?),
            };
            Action::Consume { thread: x.positional[0].clone(), message, action: snake("consume action", &x.positional[2])? }
        }
        "approve" => Action::Approve { thread: a(1, "approve THREAD")?.positional[0].clone() },
        "delete-comment" => Action::DeleteComment { thread: a(1, "delete-comment THREAD")?.positional[0].clone() },
        "preset" => Action::Preset { preset: a(1, "preset ID")?.positional[0].clone() },
        "agent" => {
            let usage = "agent NAME [role=TEXT] [note=TEXT]";
            let x = Args::split(rest, &[]);
            x.exact(1, usage)?;
            if x.options.keys().any(|k| k != "role" && k != "note") {
                return Err(format!("usage: {usage}"));
            }
            Action::Agent {
                name: x.positional[0].clone(),
                role: x.options.get("role").cloned().unwrap_or_default(),
                notes: x.options.get("note").cloned().into_iter().collect(),
            }
        }
        "delete-agent" => Action::DeleteAgent { agent: a(1, "delete-agent AGENT")?.positional[0].clone() },
        "task" => {
            let usage = "task DESCRIPTION [assignee=AGENT|auto] [trigger=KIND] [shortcut]";
            let x = Args::split(rest, &["shortcut"]);
            x.exact(1, usage)?;
            if x.options.keys().any(|k| k != "assignee" && k != "trigger") {
                return Err(format!("usage: {usage}"));
            }
            let assignee = x.options.get("assignee").filter(|v| v.as_str() != "auto").cloned();
            let trigger = x.options.get("trigger").map(|t| t.parse::<TriggerKind>()).transpose()?;
            Action::Task { description: x.positional[0].clone(), assignee, trigger, shortcut: !x.flags.is_empty() }
        }
        "run" => Action::Run { task: a(1, "run TASK")?.positional[0].clone() },
        "shortcut" => {
            let x = a(3, "shortcut TASK START END")?;
            Action::Shortcut { task: x.positional[0].clone(), start: x.num(1)?, end: x.num(2)? }
        }
        "delete-task" => Action::DeleteTask { task: a(1, "delete-task TASK")?.positional[0].clone() },
        other => return Err(format!("unknown action {other:?}")),
    })
}

fn parse_check(tokens: &[String]) -> Result<Check, String> {
    let (kind, rest) = tokens.split_first().ok_or("expect needs a check")?;
    let one = |usage: &str| -> Result<String, String> {
        match rest {
            [v] => Ok(v.clone()),
            _ => Err(format!("usage: expect {usage}")),
        }
    };
    let count = |usage: &str| -> Result<usize, String> {
        one(usage)?.parse().map_err(|_| format!("usage: expect {usage}"))
    };
    let props = |from: &[String], usage: &str| -> Result<Vec<(String, String)>, String> {
        from.iter()
            .map(|p| p.split_once('=').map(|(k, v)| (k.to_owned(), v.to_owned())).ok_or_else(|| format!("usage: expect {usage}")))
            .collect()
    };
    Ok(match kind.as_str() {
        "text" => Check::Text(one("text TEXT")?),
        "text-contains" => Check::TextContains(one("text-contains TEXT")?),
        "pending-text" => Check::PendingText(one("pending-text TEXT")?),
        "pending" => Check::Pending(count("pending N")?),
        "fired" => {
            let (k, times) = rest.split_first().ok_or("usage: expect fired KIND [m:ss...]")?;
            Check::Fired { kind: k.parse()?, at: times.iter().map(|t| parse_time(t)).collect::<Result<_, _>>()? }
        }
        "fired-count" => match rest {
            [k, n] => Check::FiredCount { kind: k.parse()?, count: n.parse().map_err(|_| "usage: expect fired-count KIND N")? },
            _ => return Err("usage: expect fired-count KIND N".into()),
        },
        "thread" => {
            let (t, p) = rest.split_first().ok_or("usage: expect thread THREAD key=value...")?;
            let props = props(p, "thread THREAD key=value...")?;
            for (k, _) in &props {
                if !["state", "messages", "notices", "replies"].contains(&k.as_str()) {
                    return Err(format!("unknown thread property {k:?} (state, messages, notices, replies)"));
                }
            }
            Check::Thread { thread: t.clone(), props }
        }
        "annotations" => {
            let props = props(rest, "annotations open=N approved=N deleted=N")?;
            for (k, _) in &props {
                snake::<cowrite::document::AnnotationState>("annotation state", k)?;
            }
            Check::Annotations { props }
        }
        "runs" => match rest {
            [t, n] => Check::Runs { task: t.clone(), count: n.parse().map_err(|_| "usage: expect runs TASK N")? },
            _ => return Err("usage: expect runs TASK N".into()),
        },
        "outcomes" => {
            let (t, o) = rest.split_first().ok_or("usage: expect outcomes TASK OUTCOME...")?;
            Check::Outcomes { task: t.clone(), outcomes: o.iter().map(|s| snake("outcome", s)).collect::<Result<_, _>>()? }
        }
        "assignee" => match rest {
            [t, a] => Check::Assignee { task: t.clone(), agent: a.clone() },
            _ => return Err("usage: expect assignee TASK AGENT".into()),
        },
        "events" => {
            let (t, labels) = rest.split_first().ok_or("usage: expect events THREAD LABEL...")?;
            Check::Events { thread: t.clone(), labels: labels.to_vec() }
        }
        "contributors" => Check::Contributors(count("contributors N")?),
        "online" => Check::Online(count("online N")?),
        "agents" => Check::Agents(count("agents N")?),
        "queued" => Check::Queued(count("queued N")?),
        "converged" if rest.is_empty() => Check::Converged,
        "error" => Check::Error(one("error TEXT")?),
        "ok" if rest.is_empty() => Check::Ok,
        other => return Err(format!("unknown check {other:?}")),
    })
}

fn parse_rule(tokens: &[String]) -> Result<MockRule, String> {
    let mut rule = MockRule::text(TemplateId::AgentInit, "");
    rule.template = None;
    rule.response = None;
    for t in tokens {
        let (k, v) = t.split_once('=').ok_or_else(|| format!("expected key=value, got {t:?}"))?;
        let v = v.to_owned();
        match k {
            "template" => rule.template = Some(snake("template", &v)?),
            "contains" => rule.contains = Some(v),
            "system_contains" => rule.system_contains = Some(v),
            "last_contains" => rule.last_contains = Some(v),
            "response" => rule.response = Some(v),
            "error" => rule.error = Some(v),
            "times" => rule.times = Some(v.parse().map_err(|_| format!("bad times {v:?}"))?),
            _ => return Err(format!("unknown rule key {k:?}")),
        }
    }
    if rule.response.is_some() == rule.error.is_some() {
        return Err("rule needs exactly one of response= or error=".into());
    }
    Ok(rule)
}

impl Scenario {
    /// Parses scenario text. Relative `mock` paths resolve against `base`.
    pub fn parse(name: &str, text: &str, base: Option<&Path>) -> Result<Self, ScenarioError> {
        let mut s = Scenario {
            name: name.to_owned(),
            doc: None,
            config: Config::default(),
            mock: MockScript::default(),
            jobs: Jobs::Auto,
            seed: 0,
            steps: Vec::new(),
        };
        let mut errors = Vec::new();
        let mut last_at = Timestamp::ZERO;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some(tokens) = shlex::split(trimmed) else {
                errors.push(ParseError { line, message: "unbalanced quotes".into() });
                continue;
            };
            if let Err(message) = s.parse_line(&tokens, trimmed, line, base, &mut last_at) {
                errors.push(ParseError { line, message });
            }
        }
        if errors.is_empty() {
            Ok(s)
        } else {
            Err(ScenarioError::Parse(errors))
        }
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScenarioError::Io { path: path.display().to_string(), reason: e.to_string() })?;
        let name = path.file_stem().map_or_else(|| "scenario".into(), |n| n.to_string_lossy().into_owned());
        Self::parse(&name, &text, path.parent())
    }

    fn parse_line(
        &mut self,
        tokens: &[String],
        source: &str,
        line: usize,
        base: Option<&Path>,
        last_at: &mut Timestamp,
    ) -> Result<(), String> {
        let (head, rest) = tokens.split_first().expect("non-empty line");
        if head != "at" && !self.steps.is_empty() {
            return Err(format!("directive {head:?} after the first step"));
        }
        match head.as_str() {
            "doc" => {
                if self.doc.is_some() {
                    return Err("only one doc directive".into());
                }
                self.doc = Some(match rest {
                    [] => None,
                    [goal] => Some(goal.clone()),
                    _ => return Err("usage: doc [GOAL]".into()),
                });
            }
            "config" => {
                let [assignment] = rest else { return Err("usage: config section.key=value".into()) };
                self.config.set(assignment)?;
            }
            "mock" => {
                let [path] = rest else { return Err("usage: mock PATH".into()) };
                let path = match base {
                    Some(b) if Path::new(path).is_relative() => b.join(path),
                    _ => PathBuf::from(path),
                };
                let script = MockScript::load(&path).map_err(|e| e.to_string())?;
                self.mock.extend(&script);
            }
            "rule" => self.mock.push(parse_rule(rest)?),
            "jobs" => {
                self.jobs = match rest {
                    [m] if m == "auto" => Jobs::Auto,
                    [m] if m == "manual" => Jobs::Manual,
                    _ => return Err("usage: jobs auto|manual".into()),
                }
            }
            "seed" => {
                let [n] = rest else { return Err("usage: seed N".into()) };
                self.seed = n.parse().map_err(|_| format!("bad seed {n:?}"))?;
            }
            "at" => {
                let [time, actor, verb, args @ ..] = rest else {
                    return Err("usage: at m:ss ACTOR ACTION [ARGS...] [as LABEL]".into());
                };
                let at = parse_time(time)?;
                if at < *last_at {
                    return Err(format!("time {time} is earlier than the previous step"));
                }
                *last_at = at;
                let (args, label) = match args {
                    [before @ .., kw, label] if kw == "as" => (before, Some(label.clone())),
                    _ => (args, None),
                };
                let action = parse_action(actor, verb, args)?;
                let labelled = matches!(
                    action,
                    Action::Join | Action::Comment { .. } | Action::Preset { .. } | Action::Agent { .. } | Action::Task { .. }
                );
                if label.is_some() && !labelled {
                    return Err(format!("{verb} does not produce anything to label"));
                }
                let source = source.splitn(3, char::is_whitespace).nth(2).unwrap_or_default().trim().to_owned();
                self.steps.push(Step { line, at, actor: actor.clone(), action, label, source });
            }
            other => return Err(format!("unknown directive {other:?}")),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn times() {
        assert_eq!(parse_time("2:00").unwrap(), Timestamp::from_minutes(2));
        assert_eq!(parse_time("10:05").unwrap(), Timestamp::from_secs(605));
        assert!(parse_time("1:5").is_err());
        assert!(parse_time("1:60").is_err());
        assert_eq!(format_time(Timestamp::from_secs(605)), "10:05");
    }

    #[test]
    fn steps_and_labels() {
        let s = Scenario::parse(
            "t",
            "doc \"g\"\njobs manual\nat 0:00 alice join\nat 0:01 alice comment 0 3 \"@aiAuthor hi\" as t1\nat 0:02 expect thread t1 state=open\n",
            None,
        )
        .unwrap();
        assert_eq!(s.doc, Some(Some("g".into())));
        assert_eq!(s.jobs, Jobs::Manual);
        assert_eq!(s.steps.len(), 3);
        assert_eq!(s.steps[1].label.as_deref(), Some("t1"));
        assert_eq!(s.steps[1].source, "alice comment 0 3 \"@aiAuthor hi\" as t1");
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = Scenario::parse("t", "at 0:00 alice join\n\nat 0:01 alice fly\nat 0:00 alice save\n", None).unwrap_err();
        let ScenarioError::Parse(errors) = err else { panic!() };
        assert_eq!(errors.iter().map(|e| e.line).collect::<Vec<_>>(), vec![3, 4]);
    }
}
