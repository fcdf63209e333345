use std::collections::{BTreeMap, BTreeSet};

use cowrite::agents::{validate_suggestions, word_count, AgentDraft, AgentRegistry, PresetCatalog};
use cowrite::clock::Timestamp;
use cowrite::comments::{CommentStore, CommentThread, ConsumeAction, Message, MessageKind, SuggestionPayload};
use cowrite::document::anchor::TextAnchor;
use cowrite::document::sequence::{ElementId, ReplicaId, SeqOp, Sequence};
use cowrite::document::{Annotation, AnnotationState, ReplicatedDocument, StageMode};
use cowrite::ids::{AnnotationId, DocId, IdAllocator, Identity, MessageId, ThreadId, UserId};
use cowrite::tasks::{truncate_title, MAX_TITLE_WORDS};
use cowrite::triggers::{Fired, TriggerConfig, TriggerEngine, TriggerEvent, TriggerKind};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ALPHABET: &[char] = &['a', 'b', 'c', 'x', 'y', ' ', '.', 'é'];

fn random_text(rng: &mut ChaCha8Rng, max: usize) -> String {
    let n = rng.random_range(1..=max);
    (0..n).map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())]).collect()
}

fn local_edit(seq: &mut Sequence, rng: &mut ChaCha8Rng) -> Option<SeqOp> {
    let len = seq.len();
    if len > 0 && rng.random_bool(0.35) {
        let at = rng.random_range(0..len);
        let n = rng.random_range(1..=3.min(len - at));
        seq.delete(at, n).unwrap()
    } else {
        let at = rng.random_range(0..=len);
        Some(seq.insert(at, &random_text(rng, 4)).unwrap())
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Replicas that make concurrent edits and receive each other's
    /// operations in arbitrary order end with the same text.
    #[test]
    fn replicas_converge(seed in any::<u64>(), edits in 10usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut replicas: Vec<Sequence> = (2..7).map(|r| Sequence::new(ReplicaId(r))).collect();
        let mut log: Vec<(usize, SeqOp)> = Vec::new();
        let mut delivered: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); replicas.len()];
        for _ in 0..edits * replicas.len() {
            let r = rng.random_range(0..replicas.len());
            if rng.random_bool(0.5) {
                if let Some(op) = local_edit(&mut replicas[r], &mut rng) {
                    delivered[r].insert(log.len());
                    log.push((r, op));
                }
            } else if !log.is_empty() {
                let i = rng.random_range(0..log.len());
                if delivered[r].insert(i) {
                    replicas[r].apply(log[i].1.clone()).unwrap();
                }
            }
        }
        for (r, replica) in replicas.iter_mut().enumerate() {
            let mut rest: Vec<usize> = (0..log.len()).filter(|i| !delivered[r].contains(i)).collect();
            rest.shuffle(&mut rng);
            for i in rest {
                replica.apply(log[i].1.clone()).unwrap();
            }
            prop_assert_eq!(replica.pending_len(), 0);
        }
        let first = replicas[0].text();
        for r in &replicas[1..] {
            prop_assert_eq!(r.text(), first.clone());
        }
    }

    /// Edits that stay outside an anchored span leave its text unchanged.
    #[test]
    fn anchors_survive_outside_edits(seed in any::<u64>(), steps in 1usize..80) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seq = Sequence::new(ReplicaId(1));
        let base = random_text(&mut rng, 30) + "SPAN" + &random_text(&mut rng, 30);
        seq.insert(0, &base).unwrap();
        let start = base.chars().position(|c| c == 'S').unwrap();
        let anchor = TextAnchor::from_range(&seq, start..start + 4).unwrap();
        let (mut lo, mut hi) = (start, start + 4);
        for _ in 0..steps {
            let len = seq.len();
            if rng.random_bool(0.4) {
                // delete wholly before or wholly after
                if lo > 0 && rng.random_bool(0.5) {
                    let at = rng.random_range(0..lo);
                    let n = rng.random_range(1..=(lo - at));
                    seq.delete(at, n).unwrap();
                    lo -= n;
                    hi -= n;
                } else if hi < len {
                    let at = rng.random_range(hi..len);
                    let n = rng.random_range(1..=(len - at));
                    seq.delete(at, n).unwrap();
                }
            } else {
                let at = if rng.random_bool(0.5) { rng.random_range(0..=lo) } else { rng.random_range(hi..=len) };
                let t = random_text(&mut rng, 3);
                seq.insert(at, &t).unwrap();
                if at <= lo {
                    lo += t.chars().count();
                    hi += t.chars().count();
                }
            }
            prop_assert_eq!(anchor.resolve(&seq).unwrap(), lo..hi);
            prop_assert_eq!(anchor.text(&seq).unwrap(), "SPAN");
        }
    }

    /// Pending characters are exactly the staged, unapproved insertions,
    /// including human text typed inside them.
    #[test]
    fn pending_regions_are_sound(seed in any::<u64>(), steps in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let user = UserId::new("d1-u1");
        let mut doc = ReplicatedDocument::new(DocId::new("d1"), None);
        doc.insert_text(&user, 0, "one two three four five six seven eight").unwrap();
        let mut ids: Vec<AnnotationId> = Vec::new();
        for (i, (s, e)) in [(0usize, 3usize), (8, 13), (19, 23), (29, 32)].into_iter().enumerate() {
            let id = AnnotationId::new(format!("d1-an{i}"));
            doc.add_annotation(Annotation {
                annotation_id: id.clone(),
                anchor: doc.anchor_range(s..e).unwrap(),
                state: AnnotationState::Open,
                thread_id: ThreadId::new(format!("d1-th{i}")),
                pending_regions: vec![],
                created_by: Identity::User(user.clone()),
                run_id: None,
                source_confidence: None,
            }).unwrap();
            ids.push(id);
        }
        // oracle: per annotation, regions as (member ids, last id)
        let mut regions: BTreeMap<AnnotationId, Vec<(BTreeSet<ElementId>, ElementId)>> = BTreeMap::new();
        let mut closed: BTreeSet<AnnotationId> = BTreeSet::new();
        let inserted = |op: &SeqOp| -> (ElementId, Vec<ElementId>) {
            let SeqOp::Insert { id, origin, text, .. } = op else { panic!("insert expected") };
            (*origin, (0..text.chars().count() as u64).map(|k| ElementId { replica: id.replica, seq: id.seq + k }).collect())
        };
        for _ in 0..steps {
            let a = ids[rng.random_range(0..ids.len())].clone();
            match rng.random_range(0..6) {
                0 | 1 if !closed.contains(&a) => {
                    let mode = if rng.random_bool(0.5) { StageMode::Append } else { StageMode::Replace };
                    let text = random_text(&mut rng, 5);
                    let Ok(staged) = doc.stage_suggestion(&a, &text, mode, &user) else { continue };
                    let op = staged.ops.iter().find(|o| matches!(o, SeqOp::Insert { .. })).unwrap();
                    let (_, new_ids) = inserted(op);
                    let last = *new_ids.last().unwrap();
                    regions.entry(a).or_default().push((new_ids.into_iter().collect(), last));
                }
                2 => {
                    if doc.approve_annotation(&a).is_ok() {
                        regions.remove(&a);
                        closed.insert(a);
                    }
                }
                3 => {
                    doc.delete_annotation(&a).unwrap();
                    regions.remove(&a);
                    closed.insert(a);
                }
                4 if !doc.body.is_empty() => {
                    let at = rng.random_range(0..doc.body.len());
                    doc.delete_text(&user, at, 1).unwrap();
                }
                _ => {
                    let at = rng.random_range(0..=doc.body.len());
                    let op = doc.insert_text(&user, at, &random_text(&mut rng, 3)).unwrap();
                    let (origin, new_ids) = inserted(&op);
                    for rs in regions.values_mut() {
                        for (members, last) in rs.iter_mut() {
                            if members.contains(&origin) && origin != *last {
                                members.extend(new_ids.iter().copied());
                            }
                        }
                    }
                }
            }
            let expected: BTreeSet<ElementId> = regions
                .values()
                .flatten()
                .flat_map(|(m, _)| m.iter().copied())
                .filter(|e| doc.body.is_deleted(*e) == Some(false))
                .collect();
            prop_assert_eq!(doc.pending_elements(), expected);
        }
    }

    /// The contributor set holds exactly the distinct editors since the
    /// last collaborative-edit firing.
    #[test]
    fn contributor_tracking(editors in proptest::collection::vec(0u8..4, 1..60), threshold in 1usize..4) {
        let mut doc = ReplicatedDocument::new(DocId::new("d1"), None);
        let mut engine = TriggerEngine::new(TriggerConfig { collab_edit_threshold: threshold, ..TriggerConfig::default() });
        let mut oracle: BTreeSet<u8> = BTreeSet::new();
        let mut fires = 0;
        for (i, e) in editors.iter().enumerate() {
            let user = UserId::new(format!("d1-u{e}"));
            doc.insert_text(&user, 0, "x").unwrap();
            oracle.insert(*e);
            let fired = engine.on_event(Timestamp::from_secs(i as u64), TriggerEvent::Edit, &mut doc.contributors_since_trigger);
            if oracle.len() >= threshold {
                oracle.clear();
                fires += 1;
            }
            let got: BTreeSet<u8> = doc.contributors_since_trigger.iter().map(|u| u.as_str()[4..].parse().unwrap()).collect();
            prop_assert_eq!(&got, &oracle);
            fires -= fired.iter().filter(|f| f.kind == TriggerKind::CollaborativeEdits).count();
            prop_assert_eq!(fires, 0);
        }
    }

    /// Inactivity fires once per silence of at least two minutes after
    /// activity, exactly two minutes after the last activity.
    #[test]
    fn debounce(gaps in proptest::collection::vec((0u64..300, 0u8..4), 1..40)) {
        let mut engine = TriggerEngine::new(TriggerConfig::default());
        let mut contributors = BTreeSet::new();
        let mut now = 0;
        let mut fired = Vec::new();
        let mut activity = Vec::new();
        for (gap, kind) in &gaps {
            now += gap;
            let event = match kind {
                0 => TriggerEvent::Edit,
                1 => TriggerEvent::Comment,
                2 => TriggerEvent::Save,
                _ => TriggerEvent::Tick,
            };
            if *kind < 2 {
                activity.push(now);
            }
            contributors.clear();
            fired.extend(engine.on_event(Timestamp::from_secs(now), event, &mut contributors));
        }
        fired.extend(engine.advance(Timestamp::from_secs(now + 1000)));
        let got: Vec<Timestamp> = fired.iter().filter(|f| f.kind == TriggerKind::Inactivity).map(|f| f.at).collect();
        let mut expected = Vec::new();
        for (i, t) in activity.iter().enumerate() {
            let next = activity.get(i + 1).copied();
            if next.is_none_or(|n| n - t >= 120) {
                expected.push(Timestamp::from_secs(t + 120));
            }
        }
        prop_assert_eq!(got, expected);
    }

    /// At most one interval job exists; it fires every five minutes while
    /// someone is online and never while the room is empty.
    #[test]
    fn interval_singleton(moves in proptest::collection::vec((1u64..400, any::<bool>()), 1..40)) {
        let mut engine = TriggerEngine::new(TriggerConfig::default());
        let mut c = BTreeSet::new();
        let mut online = 0usize;
        let mut now = 0;
        let mut fired: Vec<Fired> = Vec::new();
        // oracle: next due time while occupied
        let mut due: Option<u64> = None;
        let mut expected = Vec::new();
        for (gap, join) in moves {
            now += gap;
            while let Some(d) = due.filter(|d| *d <= now) {
                expected.push(Timestamp::from_secs(d));
                due = Some(d + 300);
            }
            let event = if join || online == 0 {
                let before = online;
                online += 1;
                if before == 0 && due.is_none() {
                    due = Some(now + 300);
                }
                TriggerEvent::Join { online_before: before }
            } else {
                online -= 1;
                if online == 0 {
                    due = None;
                }
                TriggerEvent::Leave { online_after: online }
            };
            fired.extend(engine.on_event(Timestamp::from_secs(now), event, &mut c));
            prop_assert!(engine.state().interval_job_scheduled() == (online > 0));
            prop_assert_eq!(engine.state().interval_due, due.map(Timestamp::from_secs));
        }
        let got: Vec<Timestamp> = fired.iter().filter(|f| f.kind == TriggerKind::ShortIntervals).map(|f| f.at).collect();
        prop_assert_eq!(got, expected);
    }

    /// Same trace, same firings.
    #[test]
    fn triggers_are_deterministic(trace in proptest::collection::vec((0u64..200, 0u8..6), 1..50)) {
        let run = || {
            let mut e = TriggerEngine::new(TriggerConfig::default());
            let mut c = BTreeSet::new();
            let mut now = 0;
            let mut online = 0;
            let mut out = Vec::new();
            for (gap, k) in &trace {
                now += gap;
                let ev = match k {
                    0 => TriggerEvent::Edit,
                    1 => TriggerEvent::Comment,
                    2 => TriggerEvent::Save,
                    3 => { online += 1; TriggerEvent::Join { online_before: online - 1 } }
                    4 if online > 0 => { online -= 1; TriggerEvent::Leave { online_after: online } }
                    _ => TriggerEvent::Tick,
                };
                c.insert(UserId::new(format!("u{k}")));
                out.extend(e.on_event(Timestamp::from_secs(now), ev, &mut c));
            }
            out
        };
        prop_assert_eq!(run(), run());
    }

    /// Whatever is created or deleted, exactly one default agent remains.
    #[test]
    fn default_agent_persists(ops in proptest::collection::vec((0u8..3, 0usize..8), 1..40)) {
        let doc = DocId::new("d1");
        let mut ids = IdAllocator::default();
        let mut reg = AgentRegistry::new(&doc, &mut ids);
        let catalog = PresetCatalog::builtin();
        let user = UserId::new("d1-u1");
        for (i, (op, pick)) in ops.into_iter().enumerate() {
            match op {
                0 => { let _ = reg.create(&mut ids, &doc, &user, AgentDraft { name: format!("Agent {i}"), ..AgentDraft::default() }); }
                1 => { let _ = reg.instantiate_preset(&mut ids, &doc, &user, &catalog, "reviewer"); }
                _ => {
                    let all: Vec<_> = reg.iter().map(|a| a.agent_id.clone()).collect();
                    let target = &all[pick % all.len()];
                    let was_default = reg.get(target).unwrap().is_default;
                    prop_assert_eq!(reg.delete(target).is_err(), was_default);
                }
            }
            prop_assert_eq!(reg.iter().filter(|a| a.is_default).count(), 1);
        }
    }

    /// Suggestion batches hold 0 or 3 short, new values.
    #[test]
    fn suggestion_contract(
        raw in proptest::collection::vec("[a-z]{1,6}( [a-z]{1,6}){0,3}", 0..8),
        existing in proptest::collection::vec("[a-z]{1,6}", 0..4),
        current in proptest::collection::vec("[a-z]{1,6}", 0..4),
    ) {
        let out = validate_suggestions(raw, &existing, &current);
        prop_assert!(out.is_empty() || out.len() == 3);
        for v in &out {
            prop_assert!(word_count(v) >= 1 && word_count(v) <= 2);
            prop_assert!(!existing.iter().chain(&current).any(|e| e.eq_ignore_ascii_case(v)));
        }
        let distinct: BTreeSet<String> = out.iter().map(|v| v.to_lowercase()).collect();
        prop_assert_eq!(distinct.len(), out.len());
    }

    #[test]
    fn titles_are_bounded(raw in "[ a-zA-Z\\n\\t]{0,80}") {
        let t = truncate_title(&raw);
        prop_assert!(t.split_whitespace().count() <= MAX_TITLE_WORDS);
    }

    /// A suggestion is consumed at most once, whatever the attempts.
    #[test]
    fn consumption_is_single_shot(attempts in proptest::collection::vec((0u8..3, 0u8..3), 1..10)) {
        let mut store = CommentStore::default();
        let thread = ThreadId::new("d1-th1");
        let message = MessageId::new("d1-m2");
        store.insert(CommentThread {
            thread_id: thread.clone(),
            annotation_id: AnnotationId::new("d1-an0"),
            messages: vec![Message {
                message_id: message.clone(),
                author: Identity::Agent("d1-a0".into()),
                body: "text".into(),
                mentions: vec![],
                suggestion: Some(SuggestionPayload {
                    proposed_text: "text".into(),
                    source_agent: "aiAuthor".into(),
                    consumed_by: None,
                    consumed_by_user: None,
                }),
                timestamp: Timestamp::ZERO,
                kind: MessageKind::Chat,
            }],
            resolved: false,
        });
        let mut first = None;
        for (a, u) in attempts {
            let action = [ConsumeAction::Append, ConsumeAction::Replace, ConsumeAction::Copy][a as usize];
            let user = UserId::new(format!("d1-u{u}"));
            let ok = store.consume(&thread, &message, action, &user).is_ok();
            prop_assert_eq!(ok, first.is_none());
            first.get_or_insert((action, user));
            let s = store.suggestion(&thread, &message).unwrap();
            let (fa, fu) = first.clone().unwrap();
            prop_assert_eq!(s.consumed_by, Some(fa));
            prop_assert_eq!(s.consumed_by_user.clone(), Some(fu));
        }
    }
}
