//! The convergent document: replicated body, anchored annotations and the
//! pending ("colored") text left by staged suggestions.

pub mod anchor;
pub mod sequence;

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use anchor::{overlaps, AnchorError, AnchorPoint, Side, TextAnchor};
pub use sequence::{Applied, Element, ElementId, ReplicaId, SeqError, SeqOp, Sequence};

use crate::ids::{AnnotationId, DocId, Identity, RunId, ThreadId, UserId};

/// Replica id the document owner uses for its own edits.
pub const OWNER_REPLICA: ReplicaId = ReplicaId(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationState {
    Open,
    Approved,
    Deleted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageMode {
    Append,
    Replace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub annotation_id: AnnotationId,
    pub anchor: TextAnchor,
    pub state: AnnotationState,
    pub thread_id: ThreadId,
    /// Staged, not yet approved suggestion text. Usually at most one region;
    /// a second staged suggestion on the same annotation adds another.
    pub pending_regions: Vec<TextAnchor>,
    pub created_by: Identity,
    /// Set when the annotation came out of a task run.
    pub run_id: Option<RunId>,
    pub source_confidence: Option<f64>,
}

impl Annotation {
    pub fn is_open(&self) -> bool {
        self.state == AnnotationState::Open
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditOp {
    pub author: UserId,
    pub op: SeqOp,
}

impl EditOp {
    pub fn origin_replica(&self) -> ReplicaId {
        self.op.id().replica
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DocumentError {
    #[error("protocol violation: {0}")]
    Protocol(#[from] SeqError),
    #[error(transparent)]
    Anchor(#[from] AnchorError),
    #[error("unknown annotation {0}")]
    UnknownAnnotation(AnnotationId),
    #[error("annotation closed")]
    AnnotationClosed,
    #[error("annotation deleted")]
    AnnotationDeleted,
    #[error("span vanished")]
    SpanVanished,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicatedDocument {
    pub doc_id: DocId,
    pub goal_text: Option<String>,
    pub body: Sequence,
    pub annotations: BTreeMap<AnnotationId, Annotation>,
    pub contributors_since_trigger: BTreeSet<UserId>,
    pub save_counter: u64,
    next_replica: u32,
}

/// Result of staging a suggestion: the operations to broadcast and the
/// region now marked pending.
#[derive(Clone, Debug, PartialEq)]
pub struct Staged {
    pub ops: Vec<SeqOp>,
    pub pending: Option<TextAnchor>,
}

impl ReplicatedDocument {
    pub fn new(doc_id: DocId, goal_text: Option<String>) -> Self {
        Self {
            doc_id,
            goal_text,
            body: Sequence::new(OWNER_REPLICA),
            annotations: BTreeMap::new(),
            contributors_since_trigger: BTreeSet::new(),
            save_counter: 0,
            next_replica: OWNER_REPLICA.0 + 1,
        }
    }

    pub fn text(&self) -> String {
        self.body.text()
    }

    /// Hands out a replica id for a new client; never reused.
    pub fn allocate_replica(&mut self) -> ReplicaId {
        let id = ReplicaId(self.next_replica);
        self.next_replica += 1;
        id
    }

    /// Integrates a client edit. The author counts as a contributor.
    pub fn apply_edit(&mut self, edit: EditOp) -> Result<Applied, DocumentError> {
        if edit.origin_replica() == OWNER_REPLICA {
            return Err(SeqError::ReservedReplica.into());
        }
        let applied = self.body.apply(edit.op)?;
        if !applied.duplicate {
            self.contributors_since_trigger.insert(edit.author);
        }
        Ok(applied)
    }

    /// Owner-side insert on behalf of `author`.
    pub fn insert_text(&mut self, author: &UserId, offset: usize, text: &str) -> Result<SeqOp, DocumentError> {
        let op = self.body.insert(offset, text)?;
        self.contributors_since_trigger.insert(author.clone());
        Ok(op)
    }

    /// Owner-side delete on behalf of `author`.
    pub fn delete_text(&mut self, author: &UserId, offset: usize, len: usize) -> Result<Option<SeqOp>, DocumentError> {
        let op = self.body.delete(offset, len)?;
        if op.is_some() {
            self.contributors_since_trigger.insert(author.clone());
        }
        Ok(op)
    }

    pub fn resolve_anchor(&self, anchor: &TextAnchor) -> Result<Range<usize>, DocumentError> {
        Ok(anchor.resolve(&self.body)?)
    }

    pub fn anchor_text(&self, anchor: &TextAnchor) -> Result<String, DocumentError> {
        Ok(anchor.text(&self.body)?)
    }

    pub fn anchor_range(&self, range: Range<usize>) -> Result<TextAnchor, DocumentError> {
        Ok(TextAnchor::from_range(&self.body, range)?)
    }

    pub fn add_annotation(&mut self, annotation: Annotation) -> Result<(), DocumentError> {
        annotation.anchor.resolve(&self.body)?;
        self.annotations.insert(annotation.annotation_id.clone(), annotation);
        Ok(())
    }

    pub fn annotation(&self, id: &AnnotationId) -> Result<&Annotation, DocumentError> {
        self.annotations.get(id).ok_or_else(|| DocumentError::UnknownAnnotation(id.clone()))
    }

    fn annotation_mut(&mut self, id: &AnnotationId) -> Result<&mut Annotation, DocumentError> {
        self.annotations.get_mut(id).ok_or_else(|| DocumentError::UnknownAnnotation(id.clone()))
    }

    /// Inserts suggestion text next to (append) or in place of (replace) the
    /// annotated span and marks it pending until approval.
    pub fn stage_suggestion(
        &mut self,
        id: &AnnotationId,
        text: &str,
        mode: StageMode,
        acting: &UserId,
    ) -> Result<Staged, DocumentError> {
        let annotation = self.annotation(id)?;
        if !annotation.is_open() {
            return Err(DocumentError::AnnotationClosed);
        }
        let anchor = annotation.anchor;
        let interior = anchor.interior(&self.body)?;
        let mut ops = Vec::new();
        if mode == StageMode::Replace {
            let visible: Vec<ElementId> = interior
                .iter()
                .copied()
                .filter(|id| self.body.is_deleted(*id) == Some(false))
                .collect();
            if !anchor.is_collapsed() && visible.is_empty() {
                return Err(DocumentError::SpanVanished);
            }
            ops.extend(self.body.delete_ids(visible)?);
        }
        let mut pending = None;
        if !text.is_empty() {
            let op = self.body.insert_after(anchor.end.element, text)?;
            let first = op.id();
            let last = ElementId { replica: first.replica, seq: first.seq + text.chars().count() as u64 - 1 };
            pending = Some(TextAnchor::span(first, last));
            ops.push(op);
        }
        if !ops.is_empty() {
            self.contributors_since_trigger.insert(acting.clone());
        }
        let annotation = self.annotation_mut(id)?;
        if let Some(region) = pending {
            annotation.pending_regions.push(region);
            if mode == StageMode::Replace {
                annotation.anchor = region;
            }
        }
        Ok(Staged { ops, pending })
    }

    /// Finalizes an annotation. Returns false if it was already approved.
    pub fn approve_annotation(&mut self, id: &AnnotationId) -> Result<bool, DocumentError> {
        let annotation = self.annotation_mut(id)?;
        match annotation.state {
            AnnotationState::Approved => Ok(false),
            AnnotationState::Deleted => Err(DocumentError::AnnotationDeleted),
            AnnotationState::Open => {
                annotation.state = AnnotationState::Approved;
                annotation.pending_regions.clear();
                Ok(true)
            }
        }
    }

    /// Discards an annotation together with its unapproved text.
    pub fn delete_annotation(&mut self, id: &AnnotationId) -> Result<Vec<SeqOp>, DocumentError> {
        let annotation = self.annotation(id)?;
        if annotation.state == AnnotationState::Deleted {
            return Ok(Vec::new());
        }
        let mut doomed = Vec::new();
        for region in &annotation.pending_regions {
            doomed.extend(region.interior(&self.body)?);
        }
        doomed.retain(|e| self.body.is_deleted(*e) == Some(false));
        let ops = self.body.delete_ids(doomed)?.into_iter().collect();
        let annotation = self.annotation_mut(id)?;
        annotation.state = AnnotationState::Deleted;
        annotation.pending_regions.clear();
        Ok(ops)
    }

    /// Visible elements currently rendered as pending text.
    pub fn pending_elements(&self) -> BTreeSet<ElementId> {
        let mut out = BTreeSet::new();
        for a in self.annotations.values().filter(|a| a.is_open()) {
            for region in &a.pending_regions {
                if let Ok(ids) = region.interior(&self.body) {
                    out.extend(ids.into_iter().filter(|e| self.body.is_deleted(*e) == Some(false)));
                }
            }
        }
        out
    }

    /// Resolved ranges of all annotations that are not deleted.
    pub fn live_annotation_ranges(&self) -> Vec<(AnnotationId, AnnotationState, Range<usize>)> {
        self.annotations
            .values()
            .filter(|a| a.state != AnnotationState::Deleted)
            .filter_map(|a| a.anchor.resolve(&self.body).ok().map(|r| (a.annotation_id.clone(), a.state, r)))
            .collect()
    }

    pub fn take_contributors(&mut self) -> BTreeSet<UserId> {
        std::mem::take(&mut self.contributors_since_trigger)
    }
}
